//! Convolutional building blocks shared by every network.
//!
//! Layers are descriptors: they know their weight names and shapes,
//! register initial values into a [`ParamStore`], and read weights back
//! through a [`Binder`] at forward time.

use std::collections::BTreeMap;

use lap_tensor::Tensor;
use rand_chacha::ChaCha8Rng;

use super::params::{init_uniform, Binder, ParamStore};
use crate::error::{contract, Result};

/// Channel schedule for a given input resolution: the stage producing an
/// `s x s` map has `base * (res / 2) / s` channels, capped at the code size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Widths {
    pub res: usize,
    pub base: usize,
    pub code: usize,
}

impl Widths {
    pub fn new(res: usize, base: usize, code: usize) -> Result<Self> {
        if !res.is_power_of_two() || res < 8 {
            return Err(contract(format!("resolution {res} must be a power of two >= 8")));
        }
        if base == 0 || code == 0 {
            return Err(contract("channel counts must be positive"));
        }
        Ok(Self { res, base, code })
    }

    pub fn channels(&self, size: usize) -> usize {
        if size == 1 {
            return self.code;
        }
        (self.base * (self.res / 2) / size).clamp(1, self.code)
    }

    /// Pyramid sizes from `res / 2` down to 4, then 1.
    pub fn levels(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut s = self.res / 2;
        while s >= 4 {
            out.push(s);
            s /= 2;
        }
        out.push(1);
        out
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub zero_init: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
            pad,
            zero_init: false,
        }
    }

    pub fn zeroed(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let fan_in = self.cin * self.k * self.k;
        let w = init_uniform(rng, &[self.cout, self.cin, self.k, self.k], fan_in, self.zero_init)?;
        let b = init_uniform(rng, &[self.cout], fan_in, self.zero_init)?;
        store.insert(format!("{}.weight", self.name), w);
        store.insert(format!("{}.bias", self.name), b);
        Ok(())
    }

    pub fn forward(&self, p: &Binder, x: &Tensor) -> Result<Tensor> {
        let w = p.param(&format!("{}.weight", self.name))?;
        let b = p.param(&format!("{}.bias", self.name))?;
        Ok(x.conv2d(&w, Some(&b), self.stride, self.pad)?)
    }
}

/// Fully connected layer on `[N, din]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub zero_init: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self {
            name: name.into(),
            din,
            dout,
            zero_init: false,
        }
    }

    pub fn zeroed(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let w = init_uniform(rng, &[self.din, self.dout], self.din, self.zero_init)?;
        let b = init_uniform(rng, &[1, self.dout], self.din, self.zero_init)?;
        store.insert(format!("{}.weight", self.name), w);
        store.insert(format!("{}.bias", self.name), b);
        Ok(())
    }

    pub fn forward(&self, p: &Binder, x: &Tensor) -> Result<Tensor> {
        let w = p.param(&format!("{}.weight", self.name))?;
        let b = p.param(&format!("{}.bias", self.name))?;
        Ok(x.matmul(&w)?.add(&b)?)
    }
}

/// Two-layer perceptron with a leaky-rectifier hidden layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    /// The output layer starts at zero.
    pub fn new(prefix: &str, din: usize, dhidden: usize, dout: usize) -> Self {
        Self {
            hidden: Linear::new(format!("{prefix}.fc1"), din, dhidden),
            out: Linear::new(format!("{prefix}.fc2"), dhidden, dout).zeroed(),
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.hidden.register(store, rng)?;
        self.out.register(store, rng)
    }

    pub fn forward(&self, p: &Binder, x: &Tensor) -> Result<Tensor> {
        let h = self.hidden.forward(p, x)?.leaky_relu()?;
        self.out.forward(p, &h)
    }
}

/// Multi-level feature maps of one encoder pass, keyed by spatial size.
/// The `1` entry is the fused code `[B, c, 1, 1]`.
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub levels: BTreeMap<usize, Tensor>,
}

impl Pyramid {
    pub fn level(&self, size: usize) -> Result<&Tensor> {
        self.levels
            .get(&size)
            .ok_or_else(|| contract(format!("pyramid has no {size}x{size} level")))
    }

    pub fn code(&self) -> &Tensor {
        &self.levels[&1]
    }

    /// The code as `[B, c]` rows.
    pub fn code_rows(&self) -> Result<Tensor> {
        let c = self.code();
        Ok(c.reshape(&[c.dim(0), c.dim(1)])?)
    }
}

/// Hook applied to a pyramid level before it is used downstream.
pub type Inject<'f> = &'f mut dyn FnMut(usize, Tensor) -> Result<Tensor>;

/// Strided encoder with multi-level pooling: every stage output passes a
/// convolution and global average pooling, and the pooled vectors are
/// fused by a 1x1 convolution into the code.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub widths: Widths,
    stages: Vec<Conv>,
    sides: Vec<Conv>,
    fuse: Conv,
}

impl Encoder {
    pub fn new(prefix: &str, in_ch: usize, widths: Widths) -> Self {
        let levels = widths.levels();
        let mut stages = Vec::new();
        let mut sides = Vec::new();
        let mut cin = in_ch;
        for (i, &s) in levels.iter().enumerate() {
            let cout = widths.channels(s);
            let stage = if s == 1 {
                Conv::new(format!("{prefix}.stage{i}.conv"), cin, cout, 4, 1, 0)
            } else {
                Conv::new(format!("{prefix}.stage{i}.conv"), cin, cout, 4, 2, 1)
            };
            stages.push(stage);
            let (k, pad) = if s == 1 { (1, 0) } else { (3, 1) };
            sides.push(Conv::new(format!("{prefix}.stage{i}.side"), cout, cout, k, 1, pad));
            cin = cout;
        }
        let pooled: usize = levels.iter().map(|&s| widths.channels(s)).sum();
        let fuse = Conv::new(format!("{prefix}.fuse"), pooled, widths.code, 1, 1, 0);
        Self {
            widths,
            stages,
            sides,
            fuse,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for (stage, side) in self.stages.iter().zip(&self.sides) {
            stage.register(store, rng)?;
            side.register(store, rng)?;
        }
        self.fuse.register(store, rng)
    }

    pub fn forward(&self, p: &Binder, x: &Tensor) -> Result<Pyramid> {
        self.forward_injected(p, x, &mut |_, f| Ok(f))
    }

    /// Runs the encoder, passing each pyramid level through `inject` before
    /// it feeds the next stage; the code level is offered after fusion.
    pub fn forward_injected(&self, p: &Binder, x: &Tensor, inject: Inject) -> Result<Pyramid> {
        let res = self.widths.res;
        if x.rank() != 4 || x.dim(2) != res || x.dim(3) != res || x.dim(1) != self.stages[0].cin {
            return Err(contract(format!(
                "encoder expects [B, {}, {res}, {res}], got {:?}",
                self.stages[0].cin,
                x.shape()
            )));
        }
        let mut levels = BTreeMap::new();
        let mut pooled = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for ((stage, side), s) in self.stages.iter().zip(&self.sides).zip(self.widths.levels()) {
            h = stage.forward(p, &h)?.leaky_relu()?;
            if s > 1 {
                h = inject(s, h)?;
                levels.insert(s, h.clone());
            }
            pooled.push(side.forward(p, &h)?.leaky_relu()?.global_avg_pool()?);
        }
        let refs: Vec<&Tensor> = pooled.iter().collect();
        let code = self.fuse.forward(p, &Tensor::concat(&refs, 1)?)?;
        levels.insert(1, inject(1, code)?);
        Ok(Pyramid { levels })
    }
}

/// Plain strided encoder ending in an activated `[B, code, 1, 1]` vector.
#[derive(Clone, Debug)]
pub struct PlainEncoder {
    pub widths: Widths,
    stages: Vec<Conv>,
}

impl PlainEncoder {
    pub fn new(prefix: &str, in_ch: usize, widths: Widths) -> Self {
        let mut stages = Vec::new();
        let mut cin = in_ch;
        for (i, s) in widths.levels().into_iter().enumerate() {
            let cout = widths.channels(s);
            stages.push(if s == 1 {
                Conv::new(format!("{prefix}.stage{i}.conv"), cin, cout, 4, 1, 0)
            } else {
                Conv::new(format!("{prefix}.stage{i}.conv"), cin, cout, 4, 2, 1)
            });
            cin = cout;
        }
        Self { widths, stages }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.stages.iter().try_for_each(|s| s.register(store, rng))
    }

    pub fn forward(&self, p: &Binder, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for stage in &self.stages {
            h = stage.forward(p, &h)?.leaky_relu()?;
        }
        Ok(h)
    }
}

/// Forced values for the learned gates of the refining network.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Overrides {
    /// Replaces every filtered-connection attention map by this constant.
    pub attention: Option<f64>,
    /// Replaces every injection gate logit by this constant.
    pub gate_logit: Option<f64>,
}

/// Spatial attention `A = sigmoid(conv3x3([f_enc, f_dec]))` and the fused
/// map `[f_dec, f_enc * A]`.
pub fn filtered_connection(
    p: &Binder,
    conv: &Conv,
    f_enc: &Tensor,
    f_dec: &Tensor,
    forced: Option<f64>,
) -> Result<(Tensor, Tensor)> {
    let (se, sd) = (f_enc.shape(), f_dec.shape());
    if se.len() != 4 || sd.len() != 4 || se[0] != sd[0] || se[2..] != sd[2..] {
        return Err(contract(format!("filtered_connection: encoder {se:?} vs decoder {sd:?}")));
    }
    let a = match forced {
        Some(v) => Tensor::full([se[0], 1, se[2], se[3]], v)?,
        None => conv.forward(p, &Tensor::concat(&[f_enc, f_dec], 1)?)?.sigmoid()?,
    };
    let fused = Tensor::concat(&[f_dec, &f_enc.mul(&a)?], 1)?;
    Ok((a, fused))
}

/// Nearest-upsampling decoder from a `[B, c, 1, 1]` code to a
/// `[B, out, res, res]` pre-activation map, optionally fusing encoder
/// features through filtered connections at the given sizes.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub widths: Widths,
    first: Conv,
    ups: Vec<(usize, Conv)>,
    filters: BTreeMap<usize, Conv>,
    out: Conv,
}

impl Decoder {
    pub fn new(prefix: &str, out_ch: usize, widths: Widths, skip_sizes: &[usize]) -> Self {
        let first = Conv::new(format!("{prefix}.up4.conv"), widths.code, widths.channels(4), 3, 1, 1);
        let mut ups = Vec::new();
        let mut filters = BTreeMap::new();
        let mut cin = widths.channels(4);
        let mut s = 8;
        while s <= widths.res {
            let cout = widths.channels(s);
            ups.push((s, Conv::new(format!("{prefix}.up{s}.conv"), cin, cout, 3, 1, 1)));
            cin = cout;
            if skip_sizes.contains(&s) {
                let enc = widths.channels(s);
                filters.insert(s, Conv::new(format!("{prefix}.up{s}.attn"), enc + cout, 1, 3, 1, 1));
                cin += enc;
            }
            s *= 2;
        }
        let out = Conv::new(format!("{prefix}.out"), cin, out_ch, 3, 1, 1).zeroed();
        Self {
            widths,
            first,
            ups,
            filters,
            out,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.first.register(store, rng)?;
        for (_, c) in &self.ups {
            c.register(store, rng)?;
        }
        for c in self.filters.values() {
            c.register(store, rng)?;
        }
        self.out.register(store, rng)
    }

    pub fn forward(&self, p: &Binder, code: &Tensor) -> Result<Tensor> {
        Ok(self.forward_skips(p, code, None, None)?.0)
    }

    /// Returns the output map and the attention maps by size.
    pub fn forward_skips(
        &self,
        p: &Binder,
        code: &Tensor,
        skips: Option<&Pyramid>,
        forced_attention: Option<f64>,
    ) -> Result<(Tensor, BTreeMap<usize, Tensor>)> {
        if code.rank() != 4 || code.dim(1) != self.widths.code || code.dim(2) != 1 || code.dim(3) != 1 {
            return Err(contract(format!(
                "decoder expects a [B, {}, 1, 1] code, got {:?}",
                self.widths.code,
                code.shape()
            )));
        }
        let mut attention = BTreeMap::new();
        let mut h = self.first.forward(p, &code.upsample_nearest(4)?)?.leaky_relu()?;
        for (s, conv) in &self.ups {
            h = conv.forward(p, &h.upsample_nearest(2)?)?.leaky_relu()?;
            if let Some(filter) = self.filters.get(s) {
                let skips = skips.ok_or_else(|| contract("decoder with filtered connections needs encoder features"))?;
                let (a, fused) = filtered_connection(p, filter, skips.level(*s)?, &h, forced_attention)?;
                attention.insert(*s, a);
                h = fused;
            }
        }
        Ok((self.out.forward(p, &h)?, attention))
    }
}
