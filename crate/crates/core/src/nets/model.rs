use lap_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::aggregate::{Aggregated, Aggregator};
use super::layers::{Conv, Decoder, Encoder, Overrides, PlainEncoder, Pyramid, Widths};
use super::params::{Binder, ParamStore};
use super::refine::{CanonicalFace, Refined, Refiner};
use crate::error::{contract, Result};
use crate::render::{light_from_raw, pose_from_raw};

/// Groups trained in the aggregation stage.
pub const AGGREGATION_GROUPS: [&str; 9] =
    ["delta_a", "delta_d", "agg_a", "agg_d", "phi_a", "phi_d", "pose", "light", "conf"];
/// Groups trained in the personalization stage.
pub const REFINEMENT_GROUPS: [&str; 8] = [
    "varphi_a", "varphi_d", "delta_ta", "delta_td", "gate_a", "gate_d", "refine_a", "refine_d",
];

pub const SIGMA_LOG_BOUND: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub resolution: usize,
    /// Channels of the first encoder stage.
    pub base_channels: usize,
    pub code_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            base_channels: 16,
            code_dim: 128,
        }
    }
}

/// Small strided encoder with a zero-initialised linear read-out.
#[derive(Clone, Debug)]
pub struct Head {
    enc: PlainEncoder,
    out: Conv,
    outputs: usize,
}

impl Head {
    pub fn new(prefix: &str, outputs: usize, widths: Widths) -> Self {
        Self {
            enc: PlainEncoder::new(&format!("{prefix}.enc"), 3, widths),
            out: Conv::new(format!("{prefix}.out"), widths.code, outputs, 1, 1, 0).zeroed(),
            outputs,
        }
    }

    fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.enc.register(store, rng)?;
        self.out.register(store, rng)
    }

    /// Raw outputs `[B, outputs]`.
    pub fn forward(&self, p: &Binder, x: &Tensor) -> Result<Tensor> {
        let h = self.out.forward(p, &self.enc.forward(p, x)?)?;
        Ok(h.reshape(&[x.dim(0), self.outputs])?)
    }
}

/// Per-view predictions of the pose, light and confidence networks.
#[derive(Clone, Debug)]
pub struct ViewFactors {
    /// `[N, 6]`.
    pub pose: Tensor,
    /// `[N, 4]`.
    pub light: Tensor,
    /// `[N, 2, H, W]` holding (sigma, sigma').
    pub sigmas: Tensor,
}

#[derive(Clone, Debug)]
pub struct LapModel {
    pub config: ModelConfig,
    pub widths: Widths,
    delta_a: Encoder,
    delta_d: Encoder,
    agg_a: Aggregator,
    agg_d: Aggregator,
    phi_a: Decoder,
    phi_d: Decoder,
    pose: Head,
    light: Head,
    conf_enc: PlainEncoder,
    conf_dec: Decoder,
    refiner: Refiner,
}

/// Output of the aggregation branch for one identity.
#[derive(Clone, Debug)]
pub struct Aggregation {
    pub face: CanonicalFace,
    pub albedo_weights: Tensor,
    pub depth_weights: Tensor,
}

impl LapModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let w = Widths::new(config.resolution, config.base_channels, config.code_dim)?;
        Ok(Self {
            config,
            widths: w,
            delta_a: Encoder::new("delta_a", 3, w),
            delta_d: Encoder::new("delta_d", 3, w),
            agg_a: Aggregator::new("agg_a", w.code),
            agg_d: Aggregator::new("agg_d", w.code),
            phi_a: Decoder::new("phi_a", 3, w, &[]),
            phi_d: Decoder::new("phi_d", 1, w, &[]),
            pose: Head::new("pose", 6, w),
            light: Head::new("light", 4, w),
            conf_enc: PlainEncoder::new("conf.enc", 3, w),
            conf_dec: Decoder::new("conf.dec", 2, w, &[]),
            refiner: Refiner::new(w)?,
        })
    }

    /// Fresh weights, deterministic in `seed`.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        self.delta_a.register(&mut s, &mut rng)?;
        self.delta_d.register(&mut s, &mut rng)?;
        self.agg_a.register(&mut s, &mut rng)?;
        self.agg_d.register(&mut s, &mut rng)?;
        self.phi_a.register(&mut s, &mut rng)?;
        self.phi_d.register(&mut s, &mut rng)?;
        self.pose.register(&mut s, &mut rng)?;
        self.light.register(&mut s, &mut rng)?;
        self.conf_enc.register(&mut s, &mut rng)?;
        self.conf_dec.register(&mut s, &mut rng)?;
        self.refiner.register(&mut s, &mut rng)?;
        Ok(s)
    }

    fn check_images(&self, images: &Tensor) -> Result<usize> {
        let r = self.config.resolution;
        match images.shape() {
            &[n, 3, h, w] if n > 0 && h == r && w == r => Ok(n),
            s => Err(contract(format!("expected images [N, 3, {r}, {r}], got {s:?}"))),
        }
    }

    pub fn encode_albedo(&self, p: &Binder, images: &Tensor) -> Result<Pyramid> {
        self.check_images(images)?;
        self.delta_a.forward(p, images)
    }

    pub fn encode_depth(&self, p: &Binder, images: &Tensor) -> Result<Pyramid> {
        self.check_images(images)?;
        self.delta_d.forward(p, images)
    }

    pub fn aggregate_albedo(&self, p: &Binder, codes: &Tensor) -> Result<Aggregated> {
        self.agg_a.forward(p, codes)
    }

    pub fn aggregate_depth(&self, p: &Binder, codes: &Tensor) -> Result<Aggregated> {
        self.agg_d.forward(p, codes)
    }

    /// Decodes `[1, c]` codes into a canonical face.
    pub fn decode(&self, p: &Binder, code_a: &Tensor, code_d: &Tensor) -> Result<CanonicalFace> {
        let as_map = |c: &Tensor| c.reshape(&[c.dim(0), c.dim(1), 1, 1]);
        let raw_a = self.phi_a.forward(p, &as_map(code_a)?)?;
        let raw_d = self.phi_d.forward(p, &as_map(code_d)?)?;
        CanonicalFace::from_raw(raw_a, raw_d)
    }

    /// Encodes a set of images of one identity, aggregates and decodes the
    /// identity-consistent face (batch 1).
    pub fn aggregate(&self, p: &Binder, images: &Tensor) -> Result<Aggregation> {
        let codes_a = self.encode_albedo(p, images)?.code_rows()?;
        let codes_d = self.encode_depth(p, images)?.code_rows()?;
        let agg_a = self.aggregate_albedo(p, &codes_a)?;
        let agg_d = self.aggregate_depth(p, &codes_d)?;
        Ok(Aggregation {
            face: self.decode(p, &agg_a.code, &agg_d.code)?,
            albedo_weights: agg_a.weights,
            depth_weights: agg_d.weights,
        })
    }

    pub fn predict_views(&self, p: &Binder, images: &Tensor) -> Result<ViewFactors> {
        self.check_images(images)?;
        let pose = pose_from_raw(&self.pose.forward(p, images)?)?;
        let light = light_from_raw(&self.light.forward(p, images)?)?;
        let raw = self.conf_dec.forward(p, &self.conf_enc.forward(p, images)?)?;
        let sigmas = raw.clamp(-SIGMA_LOG_BOUND, SIGMA_LOG_BOUND)?.exp()?;
        Ok(ViewFactors { pose, light, sigmas })
    }

    /// Per-view scene-specific faces; `canon` must already hold one face per
    /// target image.
    pub fn refine(&self, p: &Binder, canon: &CanonicalFace, targets: &Tensor, ov: Overrides) -> Result<Refined> {
        let n = self.check_images(targets)?;
        if canon.albedo.dim(0) != n {
            return Err(contract(format!("{} canonical faces for {n} targets", canon.albedo.dim(0))));
        }
        self.refiner.forward(p, canon, targets, ov)
    }
}
