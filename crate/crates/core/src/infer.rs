//! Inference from a trained checkpoint: canonical and (from stage B on)
//! scene-specific factors of one target image, with their renders.

use std::fs;
use std::path::{Path, PathBuf};

use lap_tensor::Tensor;
use serde::Serialize;

use crate::config::TrainConfig;
use crate::error::{contract, Error, Result};
use crate::io;
use crate::nets::layers::Overrides;
use crate::nets::{Binder, LapModel, ParamStore};
use crate::render::{depth_to_normals, render, Camera, Light, Pose, RenderOutput};
use crate::synth::{read_json, CollectionManifest, MANIFEST_FILE};
use crate::train::{read_sidecar, Stage};

pub struct Checkpoint {
    pub path: PathBuf,
    pub stage: Stage,
    pub epoch: usize,
    pub config: TrainConfig,
    pub model: LapModel,
    pub store: ParamStore,
}

/// Loads weights and rebuilds the model from the configuration recorded in
/// the sidecar.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let side = read_sidecar(path)?;
    let config = TrainConfig::parse_str(&side.config)?;
    let model = LapModel::new(config.model())?;
    let mut store = model.init(config.seed)?;
    store.load_from(&ParamStore::load(path)?)?;
    Ok(Checkpoint {
        path: path.to_path_buf(),
        stage: side.stage,
        epoch: side.epoch,
        config,
        model,
        store,
    })
}

/// Input images as `[N, 3, H, W]`. A single identity directory expands to
/// its views in manifest order; anything else is read as one image per path.
pub fn load_inputs(paths: &[PathBuf]) -> Result<Tensor> {
    if paths.is_empty() {
        return Err(contract("--input needs at least one image or identity directory"));
    }
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let manifest: CollectionManifest = read_json(&p.join(MANIFEST_FILE))?;
            files.extend(manifest.views.iter().map(|v| p.join(&v.image)));
        } else {
            files.push(p.clone());
        }
    }
    let imgs: Vec<Tensor> = files.iter().map(io::read_png_rgb).collect::<Result<_>>()?;
    Tensor::concat(&imgs.iter().collect::<Vec<_>>(), 0)
        .map_err(|_| contract("input images differ in size"))
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub stage: Stage,
    pub target: usize,
    pub inputs: usize,
    /// `[1, 3, H, W]` and `[1, 1, H, W]`.
    pub canonical_albedo: Tensor,
    pub canonical_depth: Tensor,
    /// Scene-specific albedo and depth; present when personalised.
    pub personal: Option<(Tensor, Tensor)>,
    pub light: Light,
    pub pose: Pose,
    /// `[1, 2, H, W]` (sigma, sigma').
    pub sigmas: Tensor,
    /// Normals of the depth used for rendering.
    pub normals: Tensor,
    pub render: RenderOutput,
    pub render_flipped: RenderOutput,
}

impl Reconstruction {
    /// Albedo and depth the renders were made from.
    pub fn rendered_factors(&self) -> (&Tensor, &Tensor) {
        match &self.personal {
            Some((a, d)) => (a, d),
            None => (&self.canonical_albedo, &self.canonical_depth),
        }
    }
}

/// Aggregates all `images`, predicts the target's view factors and, with
/// `personalize`, refines the canonical face for the target.
pub fn reconstruct(ck: &Checkpoint, images: &Tensor, target: usize, personalize: bool) -> Result<Reconstruction> {
    let n = images.dim(0);
    if target >= n {
        return Err(contract(format!("--target {target} out of range for {n} input images")));
    }
    if personalize && ck.stage < Stage::B {
        return Err(Error::Capability(format!(
            "{} is a stage {} checkpoint; scene-specific factors need stage B or later",
            ck.path.display(),
            ck.stage
        )));
    }
    let res = ck.config.resolution;
    if images.shape()[2..] != [res, res] {
        return Err(contract(format!(
            "checkpoint expects {res}x{res} images, got {}x{}",
            images.dim(2),
            images.dim(3)
        )));
    }
    let cam = Camera::square(res)?;
    let p = Binder::frozen(&ck.store);
    let face = ck.model.aggregate(&p, images)?.face;
    let target_img = images.narrow(0, target, 1)?;
    let views = ck.model.predict_views(&p, &target_img)?;
    let personal = if personalize {
        let r = ck.model.refine(&p, &face, &target_img, Overrides::default())?;
        Some((r.albedo, r.depth))
    } else {
        None
    };
    let (a, d) = personal.as_ref().map_or((&face.albedo, &face.depth), |(a, d)| (a, d));
    let render0 = render(a, d, &views.light, &views.pose, &cam, false)?;
    let render1 = render(a, d, &views.light, &views.pose, &cam, true)?;
    let normals = depth_to_normals(d, &cam)?;
    Ok(Reconstruction {
        stage: ck.stage,
        target,
        inputs: n,
        light: Light::from_row(views.light.data()),
        pose: Pose::from_row(views.pose.data()),
        sigmas: views.sigmas,
        normals,
        render: render0,
        render_flipped: render1,
        canonical_albedo: face.albedo,
        canonical_depth: face.depth,
        personal,
    })
}

#[derive(Serialize)]
struct FactorsJson {
    stage: Stage,
    inputs: usize,
    target: usize,
    personalized: bool,
    light: Light,
    pose: Pose,
}

pub const FACTORS_FILE: &str = "factors.json";

/// Writes the output bundle into `out`.
pub fn write_bundle(out: &Path, rec: &Reconstruction) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    io::write_png_rgb(out.join("canonical_albedo.png"), &rec.canonical_albedo)?;
    io::write_lapd(out.join("canonical_depth.lapd"), &rec.canonical_depth)?;
    io::write_depth_png(out.join("canonical_depth.png"), &rec.canonical_depth)?;
    if let Some((a, d)) = &rec.personal {
        io::write_png_rgb(out.join("target_albedo.png"), a)?;
        io::write_lapd(out.join("target_depth.lapd"), d)?;
        io::write_depth_png(out.join("target_depth.png"), d)?;
    }
    io::write_normals_png(out.join("normals.png"), &rec.normals)?;
    io::write_lapi(out.join("sigma.lapi"), &rec.sigmas)?;
    io::write_png_rgb(out.join("render.png"), &rec.render.image)?;
    io::write_png_rgb(out.join("render_flipped.png"), &rec.render_flipped.image)?;
    let json = FactorsJson {
        stage: rec.stage,
        inputs: rec.inputs,
        target: rec.target,
        personalized: rec.personal.is_some(),
        light: rec.light,
        pose: rec.pose,
    };
    let path = out.join(FACTORS_FILE);
    let text = serde_json::to_string_pretty(&json).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Mean absolute error per channel value between `pred` and `target` over
/// pixels where `mask` is positive.
pub fn masked_l1(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() || pred.rank() != 4 || mask.shape() != [pred.dim(0), 1, pred.dim(2), pred.dim(3)] {
        return Err(contract(format!(
            "masked_l1: {:?} vs {:?} with mask {:?}",
            pred.shape(),
            target.shape(),
            mask.shape()
        )));
    }
    let (b, c, plane) = (pred.dim(0), pred.dim(1), pred.dim(2) * pred.dim(3));
    let (mut sum, mut n) = (0.0, 0usize);
    for bi in 0..b {
        for i in 0..plane {
            if mask.data()[bi * plane + i] > 0.0 {
                for ci in 0..c {
                    let k = (bi * c + ci) * plane + i;
                    sum += (pred.data()[k] - target.data()[k]).abs();
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyDomain("masked_l1"));
    }
    Ok(sum / n as f64)
}
