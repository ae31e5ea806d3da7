//! Attribute-refining network: turns the identity-level (a_c, d_c) into
//! scene-specific (a_t, d_t) for one target image.
//!
//! Encoders of the canonical maps receive gated features of a separate
//! target-image encoder at the three coarsest pyramid levels (added after
//! gating), and their decoders fuse encoder features through filtered
//! connections. The decoders predict a residual on the canonical
//! pre-activation maps, so a zero-initialised output layer starts from
//! `(a_t, d_t) = (a_c, d_c)`.

use std::collections::BTreeMap;

use lap_tensor::Tensor;
use rand_chacha::ChaCha8Rng;

use super::layers::{Decoder, Encoder, Mlp, Overrides, Pyramid, Widths};
use super::params::{Binder, ParamStore};
use crate::error::{contract, Result};
use crate::render::{albedo_from_raw, depth_from_raw, DEPTH_HALF_RANGE, DEPTH_MID};

pub const INJECTION_LEVELS: [usize; 3] = [8, 4, 1];

/// Channel-wise gate `sigmoid(mlp(gap(feature)))` for one pyramid level.
#[derive(Clone, Debug)]
pub struct Gate {
    mlp: Mlp,
}

impl Gate {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            mlp: Mlp::new(prefix, channels, channels, channels),
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.mlp.register(store, rng)
    }

    /// Gate values `[B, C, 1, 1]` for `feature` (`[B, C, h, w]`).
    pub fn weights(&self, p: &Binder, feature: &Tensor, forced_logit: Option<f64>) -> Result<Tensor> {
        let (b, c) = (feature.dim(0), feature.dim(1));
        let logits = match forced_logit {
            Some(v) => Tensor::full([b, c], v)?,
            None => {
                let pooled = feature.global_avg_pool()?.reshape(&[b, c])?;
                self.mlp.forward(p, &pooled)?
            }
        };
        Ok(logits.sigmoid()?.reshape(&[b, c, 1, 1])?)
    }
}

/// Gated copy of the `level` feature of a target-image pyramid.
pub fn attribute_gate(
    p: &Binder,
    gates: &BTreeMap<usize, Gate>,
    pyramid: &Pyramid,
    level: usize,
    forced_logit: Option<f64>,
) -> Result<Tensor> {
    if !INJECTION_LEVELS.contains(&level) {
        return Err(contract(format!(
            "level {level} is not an injection level (expected one of {INJECTION_LEVELS:?})"
        )));
    }
    let gate = gates
        .get(&level)
        .ok_or_else(|| contract(format!("no gate for level {level}")))?;
    let f = pyramid.level(level)?;
    Ok(f.mul(&gate.weights(p, f, forced_logit)?)?)
}

/// Canonical maps together with their pre-activation values.
#[derive(Clone, Debug)]
pub struct CanonicalFace {
    pub albedo: Tensor,
    pub depth: Tensor,
    pub raw_albedo: Tensor,
    pub raw_depth: Tensor,
}

impl CanonicalFace {
    pub fn from_raw(raw_albedo: Tensor, raw_depth: Tensor) -> Result<Self> {
        Ok(Self {
            albedo: albedo_from_raw(&raw_albedo)?,
            depth: depth_from_raw(&raw_depth)?,
            raw_albedo,
            raw_depth,
        })
    }

    /// Repeats a single-face batch `n` times.
    pub fn broadcast(&self, n: usize) -> Result<Self> {
        let rep = |t: &Tensor| -> Result<Tensor> {
            let mut s = t.shape().to_vec();
            s[0] = n;
            Ok(t.broadcast_to(&s)?)
        };
        Ok(Self {
            albedo: rep(&self.albedo)?,
            depth: rep(&self.depth)?,
            raw_albedo: rep(&self.raw_albedo)?,
            raw_depth: rep(&self.raw_depth)?,
        })
    }

    pub fn detach(&self) -> Self {
        Self {
            albedo: self.albedo.detach(),
            depth: self.depth.detach(),
            raw_albedo: self.raw_albedo.detach(),
            raw_depth: self.raw_depth.detach(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Refined {
    pub albedo: Tensor,
    pub depth: Tensor,
    pub attention_albedo: BTreeMap<usize, Tensor>,
    pub attention_depth: BTreeMap<usize, Tensor>,
}

#[derive(Clone, Debug)]
pub struct Refiner {
    widths: Widths,
    varphi_a: Encoder,
    varphi_d: Encoder,
    delta_ta: Encoder,
    delta_td: Encoder,
    gate_a: BTreeMap<usize, Gate>,
    gate_d: BTreeMap<usize, Gate>,
    dec_a: Decoder,
    dec_d: Decoder,
}

impl Refiner {
    pub fn new(widths: Widths) -> Result<Self> {
        if widths.res < 16 {
            return Err(contract("the refining network needs resolution >= 16"));
        }
        let skips: Vec<usize> = widths.levels().into_iter().filter(|&s| s >= 8).collect();
        let gates = |prefix: &str| -> BTreeMap<usize, Gate> {
            INJECTION_LEVELS
                .iter()
                .map(|&l| (l, Gate::new(&format!("{prefix}.l{l}"), widths.channels(l))))
                .collect()
        };
        Ok(Self {
            widths,
            varphi_a: Encoder::new("varphi_a", 3, widths),
            varphi_d: Encoder::new("varphi_d", 1, widths),
            delta_ta: Encoder::new("delta_ta", 3, widths),
            delta_td: Encoder::new("delta_td", 3, widths),
            gate_a: gates("gate_a"),
            gate_d: gates("gate_d"),
            dec_a: Decoder::new("refine_a", 3, widths, &skips),
            dec_d: Decoder::new("refine_d", 1, widths, &skips),
        })
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.varphi_a.register(store, rng)?;
        self.varphi_d.register(store, rng)?;
        self.delta_ta.register(store, rng)?;
        self.delta_td.register(store, rng)?;
        for g in self.gate_a.values().chain(self.gate_d.values()) {
            g.register(store, rng)?;
        }
        self.dec_a.register(store, rng)?;
        self.dec_d.register(store, rng)
    }

    pub fn widths(&self) -> Widths {
        self.widths
    }

    /// Refines per-view copies of the canonical face (`[N, ..]`) toward the
    /// target images `[N, 3, H, W]`.
    pub fn forward(&self, p: &Binder, canon: &CanonicalFace, target: &Tensor, ov: Overrides) -> Result<Refined> {
        let (raw_a, att_a) = self.branch(
            p,
            &canon.albedo,
            target,
            (&self.varphi_a, &self.delta_ta, &self.gate_a, &self.dec_a),
            ov,
        )?;
        let depth_in = canon.depth.add_scalar(-DEPTH_MID)?.scale(1.0 / DEPTH_HALF_RANGE)?;
        let (raw_d, att_d) = self.branch(
            p,
            &depth_in,
            target,
            (&self.varphi_d, &self.delta_td, &self.gate_d, &self.dec_d),
            ov,
        )?;
        Ok(Refined {
            albedo: albedo_from_raw(&canon.raw_albedo.add(&raw_a)?)?,
            depth: depth_from_raw(&canon.raw_depth.add(&raw_d)?)?,
            attention_albedo: att_a,
            attention_depth: att_d,
        })
    }

    #[allow(clippy::type_complexity)]
    fn branch(
        &self,
        p: &Binder,
        source: &Tensor,
        target: &Tensor,
        nets: (&Encoder, &Encoder, &BTreeMap<usize, Gate>, &Decoder),
        ov: Overrides,
    ) -> Result<(Tensor, BTreeMap<usize, Tensor>)> {
        let (phi, delta_t, gates, dec) = nets;
        let attr = delta_t.forward(p, target)?;
        let pyr = phi.forward_injected(p, source, &mut |level, f| {
            if INJECTION_LEVELS.contains(&level) {
                Ok(f.add(&attribute_gate(p, gates, &attr, level, ov.gate_logit)?)?)
            } else {
                Ok(f)
            }
        })?;
        dec.forward_skips(p, pyr.code(), Some(&pyr), ov.attention)
    }
}
