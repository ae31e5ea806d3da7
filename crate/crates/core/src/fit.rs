//! Network-free inverse rendering of a single image: raw grids for albedo
//! and depth plus light, pose and one scalar confidence are fitted directly.

use std::collections::BTreeMap;

use lap_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::nets::model::SIGMA_LOG_BOUND;
use crate::nets::ParamStore;
use crate::objectives::{recon_nll, DEFAULT_FLIP_WEIGHT};
use crate::optim::{Adam, AdamConfig};
use crate::render::{
    albedo_from_raw, depth_from_raw, light_from_raw, pose_from_raw, render, Camera, Light, Pose, RenderOutput,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    pub flip_weight: f64,
    /// Half-width of the seeded uniform jitter on the raw grids. A flat
    /// surface under frontal light is a stationary point of the shading, so
    /// some asymmetry is needed to get depth moving.
    pub jitter: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 0.005,
            seed: 0,
            flip_weight: DEFAULT_FLIP_WEIGHT,
            jitter: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub albedo: Tensor,
    pub depth: Tensor,
    pub light: Light,
    pub pose: Pose,
    pub sigma: f64,
    /// Loss before each update.
    pub trace: Vec<f64>,
    pub render: RenderOutput,
}

struct Factors {
    albedo: Tensor,
    depth: Tensor,
    light: Tensor,
    pose: Tensor,
    sigma: Tensor,
}

fn factors(raw: &BTreeMap<&str, Tensor>) -> Result<Factors> {
    Ok(Factors {
        albedo: albedo_from_raw(&raw["albedo"])?,
        depth: depth_from_raw(&raw["depth"])?,
        light: light_from_raw(&raw["light"])?,
        pose: pose_from_raw(&raw["pose"])?,
        sigma: raw["sigma"].clamp(-SIGMA_LOG_BOUND, SIGMA_LOG_BOUND)?.exp()?,
    })
}

fn objective(f: &Factors, image: &Tensor, cam: &Camera, flip_weight: f64) -> Result<(Tensor, RenderOutput)> {
    let (h, w) = (cam.h, cam.w);
    let sigma = f.sigma.reshape(&[1, 1, 1, 1])?.broadcast_to(&[1, 1, h, w])?;
    let r0 = render(&f.albedo, &f.depth, &f.light, &f.pose, cam, false)?;
    let r1 = render(&f.albedo, &f.depth, &f.light, &f.pose, cam, true)?;
    let direct = recon_nll(&r0.image, image, &sigma, Some(&r0.covered))?;
    let flipped = recon_nll(&r1.image, image, &sigma, Some(&r1.covered))?;
    Ok((direct.add(&flipped.scale(flip_weight)?)?, r0))
}

/// Fits factors to `image` (`[1, 3, H, W]`) from flat depth 1, gray albedo,
/// identity pose, frontal light and sigma 1 (up to the seeded jitter).
pub fn fit_single(image: &Tensor, cam: &Camera, cfg: &FitConfig) -> Result<FitResult> {
    if image.shape() != [1, 3, cam.h, cam.w] {
        return Err(contract(format!(
            "fit expects a [1, 3, {}, {}] image, got {:?}",
            cam.h,
            cam.w,
            image.shape()
        )));
    }
    let (h, w) = (cam.h, cam.w);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut grid = |c: usize| -> Result<Tensor> {
        let data = (0..c * h * w)
            .map(|_| if cfg.jitter > 0.0 { rng.random_range(-cfg.jitter..cfg.jitter) } else { 0.0 })
            .collect();
        Ok(Tensor::new([1, c, h, w], data)?)
    };
    let mut store = ParamStore::new();
    store.insert("albedo", grid(3)?);
    store.insert("depth", grid(1)?);
    store.insert("light", Tensor::zeros([1, 4])?);
    store.insert("pose", Tensor::zeros([1, 6])?);
    store.insert("sigma", Tensor::zeros([1])?);
    const NAMES: [&str; 5] = ["albedo", "depth", "light", "pose", "sigma"];
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let tape = Tape::new();
        let raw: BTreeMap<&str, Tensor> = NAMES.iter().map(|&k| Ok((k, tape.leaf(store.get(k)?)))).collect::<Result<_>>()?;
        let (loss, _) = objective(&factors(&raw)?, image, cam, cfg.flip_weight)?;
        trace.push(loss.item()?);
        let g = tape.backward(&loss)?;
        let grads: BTreeMap<String, Tensor> =
            NAMES.iter().map(|&k| Ok((k.to_string(), g.get(&raw[k])?))).collect::<Result<_>>()?;
        adam.step(&mut store, &grads)?;
    }
    let raw: BTreeMap<&str, Tensor> = NAMES.iter().map(|&k| Ok((k, store.get(k)?.clone()))).collect::<Result<_>>()?;
    let f = factors(&raw)?;
    let (_, r0) = objective(&f, image, cam, cfg.flip_weight)?;
    Ok(FitResult {
        light: Light::from_row(f.light.data()),
        pose: Pose::from_row(f.pose.data()),
        sigma: f.sigma.item()?,
        albedo: f.albedo,
        depth: f.depth,
        trace,
        render: r0,
    })
}

/// Peak signal-to-noise ratio in dB of `pred` against `target` over pixels
/// where `mask` (`[1, 1, H, W]`) is positive.
pub fn psnr(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() || pred.rank() != 4 || mask.shape() != [pred.dim(0), 1, pred.dim(2), pred.dim(3)] {
        return Err(contract(format!(
            "psnr: {:?} vs {:?} with mask {:?}",
            pred.shape(),
            target.shape(),
            mask.shape()
        )));
    }
    let (b, c, plane) = (pred.dim(0), pred.dim(1), pred.dim(2) * pred.dim(3));
    let (mut se, mut n) = (0.0, 0usize);
    for bi in 0..b {
        for i in 0..plane {
            if mask.data()[bi * plane + i] > 0.0 {
                for ci in 0..c {
                    let k = (bi * c + ci) * plane + i;
                    se += (pred.data()[k] - target.data()[k]).powi(2);
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(crate::Error::EmptyDomain("psnr"));
    }
    let mse = se / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

#[derive(serde::Serialize)]
struct FitJson {
    iterations: usize,
    final_loss: Option<f64>,
    sigma: f64,
    light: Light,
    pose: Pose,
}

/// Writes albedo, depth, normals, the render, the fitted scalars and the
/// loss trace into `out`.
pub fn write_fit(out: &std::path::Path, fit: &FitResult, cam: &Camera) -> Result<()> {
    use crate::error::Error;
    use crate::io;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    io::write_png_rgb(out.join("albedo.png"), &fit.albedo)?;
    io::write_lapd(out.join("depth.lapd"), &fit.depth)?;
    io::write_depth_png(out.join("depth.png"), &fit.depth)?;
    io::write_normals_png(out.join("normals.png"), &crate::render::depth_to_normals(&fit.depth, cam)?)?;
    io::write_png_rgb(out.join("render.png"), &fit.render.image)?;
    let json = FitJson {
        iterations: fit.trace.len(),
        final_loss: fit.trace.last().copied(),
        sigma: fit.sigma,
        light: fit.light,
        pose: fit.pose,
    };
    let path = out.join("fit.json");
    let text = serde_json::to_string_pretty(&json).map_err(|e| Error::format(&path, e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    let mut trace = String::from("iteration,loss\n");
    for (i, l) in fit.trace.iter().enumerate() {
        trace.push_str(&format!("{i},{l}\n"));
    }
    let path = out.join("trace.csv");
    std::fs::write(&path, trace).map_err(|e| Error::io(&path, e))
}
