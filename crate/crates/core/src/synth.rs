//! Procedural face-like scenes with exact ground truth.
//!
//! Scenes live in normalised canonical coordinates `x, y` in [-1, 1]
//! (x to the right, y down). Every feature is a function of `|x|`, which
//! makes depth, albedo and labels exactly width-symmetric.

use std::fs;
use std::path::{Path, PathBuf};

use lap_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::io;
use crate::render::{self, Camera, Light, Pose};

pub const DEFAULT_RELAX_WEIGHT: f64 = 0.3;
/// Depth of the canonical background plane.
pub const BACKGROUND_DEPTH: f64 = 1.05;
/// Cap on the per-view expression surrogate, depth units.
pub const MAX_EXPRESSION_DEPTH: f64 = 0.02;
pub const MAX_VIEWS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum Label {
    Background = 0,
    Face = 1,
    Mouth = 2,
    Eye = 3,
    Brow = 4,
}

impl Label {
    pub const ALL: [Label; 5] = [Label::Background, Label::Face, Label::Mouth, Label::Eye, Label::Brow];

    fn from_index(i: usize) -> Label {
        Self::ALL[i]
    }

    pub fn is_relaxed(self) -> bool {
        matches!(self, Label::Mouth | Label::Eye | Label::Brow)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Easy,
    Wild,
}

impl std::str::FromStr for Tier {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Tier::Easy),
            "wild" => Ok(Tier::Wild),
            other => Err(contract(format!("unknown tier {other:?} (expected easy or wild)"))),
        }
    }
}

/// Axis-aligned ellipse in normalised coordinates, mirrored across x = 0
/// when `cx != 0`.
#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Blob {
    /// Normalised radius at `(|x|, y)`; 1 on the boundary.
    fn radius(&self, ax: f64, y: f64) -> f64 {
        (((ax - self.cx) / self.rx).powi(2) + ((y - self.cy) / self.ry).powi(2)).sqrt()
    }

    fn inside(&self, ax: f64, y: f64) -> bool {
        self.radius(ax, y) <= 1.0
    }

    /// Compactly supported soft indicator: 1 well inside, exactly 0 once the
    /// radius exceeds `1 + soft`.
    fn weight(&self, ax: f64, y: f64, soft: f64) -> f64 {
        smoothstep(1.0 + soft, 1.0 - soft, self.radius(ax, y))
    }

    /// Compact bump `(1 - r^2)^2` for r < 1.
    fn bump(&self, ax: f64, y: f64) -> f64 {
        let r2 = self.radius(ax, y).powi(2);
        if r2 < 1.0 {
            (1.0 - r2).powi(2)
        } else {
            0.0
        }
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Identity-level layout drawn from a seed.
#[derive(Clone, Debug)]
struct Layout {
    face: Blob,
    eye: Blob,
    brow: Blob,
    mouth: Blob,
    nose: Blob,
    dome: f64,
    nose_height: f64,
    brow_height: f64,
    socket_depth: f64,
    mouth_depth: f64,
    skin: [f64; 3],
    eye_colour: [f64; 3],
    brow_colour: [f64; 3],
    lip_colour: [f64; 3],
    background: f64,
    tone_wave: f64,
}

impl Layout {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let face = Blob {
            cx: 0.0,
            cy: rng.random_range(-0.03..0.03),
            rx: rng.random_range(0.6..0.75),
            ry: rng.random_range(0.8..0.9),
        };
        let ey = rng.random_range(-0.18..-0.08);
        let ex = rng.random_range(0.22..0.3);
        let erx = rng.random_range(0.1..0.13);
        let eye = Blob {
            cx: ex,
            cy: ey,
            rx: erx,
            ry: rng.random_range(0.06..0.085),
        };
        let brow = Blob {
            cx: ex + rng.random_range(-0.02..0.02),
            cy: ey - rng.random_range(0.13..0.17),
            rx: erx * rng.random_range(1.1..1.3),
            ry: rng.random_range(0.03..0.045),
        };
        let mouth = Blob {
            cx: 0.0,
            cy: rng.random_range(0.4..0.5),
            rx: rng.random_range(0.2..0.28),
            ry: rng.random_range(0.06..0.09),
        };
        let nose = Blob {
            cx: 0.0,
            cy: rng.random_range(0.02..0.12),
            rx: rng.random_range(0.1..0.14),
            ry: rng.random_range(0.25..0.32),
        };
        let r = rng.random_range(0.62..0.85);
        let g = r * rng.random_range(0.7..0.85);
        let b = g * rng.random_range(0.75..0.9);
        let dark = rng.random_range(0.1..0.2);
        let lip = rng.random_range(0.55..0.75);
        Self {
            face,
            eye,
            brow,
            mouth,
            nose,
            dome: rng.random_range(0.05..0.08),
            nose_height: rng.random_range(0.025..0.04),
            brow_height: rng.random_range(0.006..0.012),
            socket_depth: rng.random_range(0.008..0.015),
            mouth_depth: rng.random_range(0.004..0.01),
            skin: [r, g, b],
            eye_colour: [dark, dark * 0.9, dark * 0.85],
            brow_colour: [dark * 1.8, dark * 1.3, dark],
            lip_colour: [lip, lip * 0.45, lip * 0.45],
            background: rng.random_range(0.35..0.6),
            tone_wave: rng.random_range(-0.06..0.06),
        }
    }

    fn label(&self, ax: f64, y: f64) -> Label {
        if !self.face.inside(ax, y) {
            Label::Background
        } else if self.mouth.inside(ax, y) {
            Label::Mouth
        } else if self.eye.inside(ax, y) {
            Label::Eye
        } else if self.brow.inside(ax, y) {
            Label::Brow
        } else {
            Label::Face
        }
    }
}

/// Ground-truth identity: canonical albedo/depth, region labels and
/// landmarks, plus the soft region weights used by per-view perturbations.
#[derive(Clone, Debug)]
pub struct SceneTemplate {
    pub seed: u64,
    pub resolution: usize,
    /// `[1, 3, H, W]`.
    pub albedo: Tensor,
    /// `[1, 1, H, W]`.
    pub depth: Tensor,
    /// Row-major `H * W` labels.
    pub labels: Vec<Label>,
    /// 12 landmarks as (u, v) pixel coordinates.
    pub keypoints: Vec<[f64; 2]>,
    mouth_weight: Vec<f64>,
    eye_weight: Vec<f64>,
}

fn norm_coord(i: usize, n: usize) -> f64 {
    (2.0 * i as f64 - (n as f64 - 1.0)) / (n as f64 - 1.0)
}

fn pixel_coord(c: f64, n: usize) -> f64 {
    (c * (n as f64 - 1.0) + (n as f64 - 1.0)) / 2.0
}

impl SceneTemplate {
    /// Pixels that per-view expression changes may touch.
    pub fn expression_support(&self) -> Vec<bool> {
        self.mouth_weight
            .iter()
            .zip(&self.eye_weight)
            .map(|(&m, &e)| m > 0.0 || e > 0.0)
            .collect()
    }
}

pub fn generate_identity(seed: u64, resolution: usize) -> Result<SceneTemplate> {
    if resolution < 8 {
        return Err(contract(format!("resolution {resolution} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = Layout::draw(&mut rng);
    let n = resolution;
    let plane = n * n;
    let soft = 2.5 / n as f64;
    let mut albedo = vec![0.0; 3 * plane];
    let mut depth = vec![0.0; plane];
    let mut labels = Vec::with_capacity(plane);
    let mut mouth_weight = vec![0.0; plane];
    let mut eye_weight = vec![0.0; plane];
    for v in 0..n {
        let y = norm_coord(v, n);
        for u in 0..n {
            let ax = norm_coord(u, n).abs();
            let i = v * n + u;
            let in_face = l.face.weight(ax, y, soft);
            let r2 = l.face.radius(ax, y).powi(2);
            let dome = l.dome * (1.0 - r2).max(0.0);
            let height = dome + l.nose_height * l.nose.bump(ax, y) + l.brow_height * l.brow.bump(ax, y)
                - l.socket_depth * l.eye.bump(ax, y)
                - l.mouth_depth * l.mouth.bump(ax, y);
            depth[i] = (BACKGROUND_DEPTH - in_face * height).clamp(0.9, 1.1);

            let wm = l.mouth.weight(ax, y, soft);
            let we = l.eye.weight(ax, y, soft) * (1.0 - wm);
            let wb = l.brow.weight(ax, y, soft) * (1.0 - wm) * (1.0 - we);
            mouth_weight[i] = wm;
            eye_weight[i] = we;
            let tone = 1.0 + l.tone_wave * (std::f64::consts::PI * y).cos();
            for c in 0..3 {
                let skin = (l.skin[c] * tone).clamp(0.0, 1.0);
                let mut a = skin * (1.0 - wm - we - wb) + l.lip_colour[c] * wm + l.eye_colour[c] * we + l.brow_colour[c] * wb;
                a = in_face * a + (1.0 - in_face) * l.background;
                albedo[c * plane + i] = a.clamp(0.0, 1.0);
            }
            labels.push(l.label(ax, y));
        }
    }
    let kp = |x: f64, y: f64| [pixel_coord(x, n), pixel_coord(y, n)];
    let (e, b, m) = (l.eye, l.brow, l.mouth);
    let mut keypoints = Vec::with_capacity(12);
    for s in [-1.0, 1.0] {
        keypoints.push(kp(s * (e.cx + e.rx * 0.9), e.cy));
        keypoints.push(kp(s * e.cx, e.cy));
        keypoints.push(kp(s * (e.cx - e.rx * 0.9), e.cy));
        keypoints.push(kp(s * b.cx, b.cy));
        keypoints.push(kp(s * m.rx * 0.9, m.cy));
    }
    keypoints.push(kp(0.0, l.nose.cy));
    keypoints.push(kp(0.0, m.cy));
    Ok(SceneTemplate {
        seed,
        resolution,
        albedo: Tensor::new([1, 3, n, n], albedo)?,
        depth: Tensor::new([1, 1, n, n], depth)?,
        labels,
        keypoints,
        mouth_weight,
        eye_weight,
    })
}

/// Maps region labels to relaxed mask weights: background 0, face 1,
/// mouth/eye/brow `relax_weight`.
pub fn build_relaxed_mask(labels: &[Label], h: usize, w: usize, relax_weight: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&relax_weight) {
        return Err(contract(format!("relax weight {relax_weight} outside [0, 1]")));
    }
    if labels.len() != h * w {
        return Err(contract(format!("{} labels for a {h}x{w} mask", labels.len())));
    }
    let data = labels
        .iter()
        .map(|&l| match l {
            Label::Background => 0.0,
            Label::Face => 1.0,
            _ => relax_weight,
        })
        .collect();
    Ok(Tensor::new([1, 1, h, w], data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub image: String,
    pub mask: String,
    /// Pre-perturbation render, lossless.
    pub clean: String,
    /// Per-view canonical albedo + depth, lossless 4-channel raster.
    pub factors: String,
    /// Per-view canonical depth, LAPD.
    pub depth: String,
    pub light: Light,
    pub pose: Pose,
    pub occluded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectionManifest {
    pub identity: String,
    pub seed: u64,
    pub tier: Tier,
    pub resolution: usize,
    pub fov_deg: f64,
    pub canonical_albedo: String,
    pub canonical_depth: String,
    pub canonical_mask: String,
    pub keypoints: String,
    pub views: Vec<ViewRecord>,
}

/// One rendered view and its ground truth, in memory.
#[derive(Clone, Debug)]
pub struct RenderedView {
    pub light: Light,
    pub pose: Pose,
    /// Canonical-frame factors of this view (perturbed in the wild tier).
    pub albedo: Tensor,
    pub depth: Tensor,
    /// Render of the factors before photometric perturbation.
    pub clean: Tensor,
    /// Final photo `[1, 3, H, W]`.
    pub image: Tensor,
    /// Relaxed mask in the view frame.
    pub mask: Tensor,
    pub occluded: bool,
}

fn draw_view_params(rng: &mut ChaCha8Rng, tier: Tier) -> (Light, Pose) {
    match tier {
        Tier::Easy => (
            Light {
                k_amb: rng.random_range(0.2..0.45),
                k_diff: rng.random_range(0.3..0.7),
                lx: rng.random_range(-0.3..0.3),
                ly: rng.random_range(-0.3..0.3),
            },
            Pose {
                yaw: rng.random_range(-45.0..45.0),
                pitch: rng.random_range(-15.0..15.0),
                roll: rng.random_range(-5.0..5.0),
                tx: rng.random_range(-0.02..0.02),
                ty: rng.random_range(-0.02..0.02),
                tz: rng.random_range(-0.01..0.01),
            },
        ),
        Tier::Wild => (
            Light {
                k_amb: rng.random_range(0.0..1.0),
                k_diff: rng.random_range(0.0..1.0),
                lx: rng.random_range(-1.0..1.0),
                ly: rng.random_range(-1.0..1.0),
            },
            Pose {
                yaw: rng.random_range(-render::MAX_ANGLE_DEG..render::MAX_ANGLE_DEG),
                pitch: rng.random_range(-render::MAX_ANGLE_DEG..render::MAX_ANGLE_DEG),
                roll: rng.random_range(-render::MAX_ANGLE_DEG..render::MAX_ANGLE_DEG),
                tx: rng.random_range(-render::MAX_TXY..render::MAX_TXY),
                ty: rng.random_range(-render::MAX_TXY..render::MAX_TXY),
                tz: rng.random_range(-render::MAX_TZ..render::MAX_TZ),
            },
        ),
    }
}

/// Mouth/eye recolouring and depth offsets confined to those regions.
fn perturb_expression(rng: &mut ChaCha8Rng, t: &SceneTemplate) -> Result<(Tensor, Tensor)> {
    let plane = t.resolution * t.resolution;
    let lip_gain: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.75..1.25));
    let eye_gain: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.75..1.25));
    let mouth_dz = rng.random_range(0.0..MAX_EXPRESSION_DEPTH);
    let eye_dz = rng.random_range(-MAX_EXPRESSION_DEPTH / 2.0..MAX_EXPRESSION_DEPTH / 2.0);
    let mut albedo = t.albedo.to_vec();
    for c in 0..3 {
        for i in 0..plane {
            let (wm, we) = (t.mouth_weight[i], t.eye_weight[i]);
            if wm > 0.0 || we > 0.0 {
                let a = &mut albedo[c * plane + i];
                *a = (*a * (1.0 + wm * (lip_gain[c] - 1.0) + we * (eye_gain[c] - 1.0))).clamp(0.0, 1.0);
            }
        }
    }
    let mut depth = t.depth.to_vec();
    for i in 0..plane {
        let (wm, we) = (t.mouth_weight[i], t.eye_weight[i]);
        if wm > 0.0 || we > 0.0 {
            depth[i] = (depth[i] + wm * mouth_dz + we * eye_dz).clamp(0.9, 1.1);
        }
    }
    Ok((
        Tensor::new(t.albedo.shape().to_vec(), albedo)?,
        Tensor::new(t.depth.shape().to_vec(), depth)?,
    ))
}

/// Labels of the view frame: the region whose indicator dominates the
/// splatted one-hot label planes; uncovered pixels are background.
fn reproject_labels(t: &SceneTemplate, depth: &Tensor, pose: &Tensor, cam: &Camera) -> Result<Vec<Label>> {
    let n = t.resolution;
    let plane = n * n;
    let k = Label::ALL.len();
    let mut onehot = vec![0.0; k * plane];
    for (i, &l) in t.labels.iter().enumerate() {
        onehot[l as usize * plane + i] = 1.0;
    }
    let onehot = Tensor::new([1, k, n, n], onehot)?;
    let (planes, out) = render::splat(&onehot, depth, pose, cam)?;
    let (p, cov) = (planes.data(), out.covered.data());
    Ok((0..plane)
        .map(|i| {
            if cov[i] == 0.0 {
                return Label::Background;
            }
            let best = (0..k).fold(0, |b, c| if p[c * plane + i] > p[b * plane + i] { c } else { b });
            Label::from_index(best)
        })
        .collect())
}

/// Renders `n_views` views of one identity. Deterministic in
/// `(template, n_views, tier, seed)`.
pub fn render_collection(t: &SceneTemplate, n_views: usize, tier: Tier, seed: u64) -> Result<Vec<RenderedView>> {
    if !(1..=MAX_VIEWS).contains(&n_views) {
        return Err(contract(format!("views per identity must be in 1..={MAX_VIEWS}, got {n_views}")));
    }
    let n = t.resolution;
    let cam = Camera::square(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut views = Vec::with_capacity(n_views);
    for _ in 0..n_views {
        let (light, pose) = draw_view_params(&mut rng, tier);
        let (albedo, depth) = match tier {
            Tier::Easy => (t.albedo.clone(), t.depth.clone()),
            Tier::Wild => perturb_expression(&mut rng, t)?,
        };
        let light_t = render::lights_tensor(&[light])?;
        let pose_t = render::poses_tensor(&[pose])?;
        let clean = render::render(&albedo, &depth, &light_t, &pose_t, &cam, false)?.image;
        let labels = reproject_labels(t, &depth, &pose_t, &cam)?;
        let mut mask = build_relaxed_mask(&labels, n, n, DEFAULT_RELAX_WEIGHT)?.to_vec();
        let mut image = clean.to_vec();
        let mut occluded = false;
        if tier == Tier::Wild {
            let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.9..1.1));
            let noise = Normal::new(0.0, rng.random_range(0.0..0.02)).expect("finite std");
            for c in 0..3 {
                for px in &mut image[c * n * n..(c + 1) * n * n] {
                    *px = (*px * jitter[c] + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            if rng.random_bool(0.1) {
                occluded = true;
                let rw = rng.random_range(n / 6..=n / 3);
                let rh = rng.random_range(n / 6..=n / 3);
                let x0 = rng.random_range(0..=n - rw);
                let y0 = rng.random_range(0..=n - rh);
                let grey = rng.random_range(0.0..1.0);
                for y in y0..y0 + rh {
                    for x in x0..x0 + rw {
                        mask[y * n + x] = 0.0;
                        for c in 0..3 {
                            image[c * n * n + y * n + x] = grey;
                        }
                    }
                }
            }
        }
        views.push(RenderedView {
            light,
            pose,
            albedo,
            depth,
            clean,
            image: Tensor::new([1, 3, n, n], image)?,
            mask: Tensor::new([1, 1, n, n], mask)?,
            occluded,
        });
    }
    Ok(views)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes one identity directory: canonical ground truth, every view, and
/// the manifest.
pub fn write_identity(
    dir: &Path,
    identity: &str,
    template: &SceneTemplate,
    views: &[RenderedView],
    tier: Tier,
) -> Result<CollectionManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = template.resolution;
    let canonical_mask = build_relaxed_mask(&template.labels, n, n, DEFAULT_RELAX_WEIGHT)?;
    io::write_png_rgb(dir.join("canonical.png"), &template.albedo)?;
    io::write_lapd(dir.join("canonical.lapd"), &template.depth)?;
    io::write_mask_png(dir.join("canonical_mask.png"), &canonical_mask)?;
    write_json(&dir.join("canonical_keypoints.json"), &template.keypoints)?;
    let mut records = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        let stem = format!("view{i}");
        let canon = format!("{stem}_canonical");
        io::write_png_rgb(dir.join(format!("{stem}.png")), &v.image)?;
        io::write_mask_png(dir.join(format!("{stem}_mask.png")), &v.mask)?;
        io::write_lapi(dir.join(format!("{stem}_clean.lapi")), &v.clean)?;
        io::write_lapi(dir.join(format!("{canon}.lapi")), &Tensor::concat(&[&v.albedo, &v.depth], 1)?)?;
        io::write_lapd(dir.join(format!("{canon}.lapd")), &v.depth)?;
        io::write_png_rgb(dir.join(format!("{canon}.png")), &v.albedo)?;
        io::write_mask_png(dir.join(format!("{canon}_mask.png")), &canonical_mask)?;
        write_json(&dir.join(format!("{canon}_keypoints.json")), &template.keypoints)?;
        records.push(ViewRecord {
            image: format!("{stem}.png"),
            mask: format!("{stem}_mask.png"),
            clean: format!("{stem}_clean.lapi"),
            factors: format!("{canon}.lapi"),
            depth: format!("{canon}.lapd"),
            light: v.light,
            pose: v.pose,
            occluded: v.occluded,
        });
    }
    let manifest = CollectionManifest {
        identity: identity.to_string(),
        seed: template.seed,
        tier,
        resolution: n,
        fov_deg: Camera::square(n)?.fov_deg,
        canonical_albedo: "canonical.png".into(),
        canonical_depth: "canonical.lapd".into(),
        canonical_mask: "canonical_mask.png".into(),
        keypoints: "canonical_keypoints.json".into(),
        views: records,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug)]
pub struct SynthOptions {
    pub identities: usize,
    pub views: usize,
    pub tier: Tier,
    pub seed: u64,
    pub resolution: usize,
}

/// Generates a whole dataset under `out`, one directory per identity.
pub fn synthesize(out: &Path, opts: &SynthOptions) -> Result<Vec<PathBuf>> {
    if !(1..=MAX_VIEWS).contains(&opts.views) {
        return Err(contract(format!("views per identity must be in 1..={MAX_VIEWS}, got {}", opts.views)));
    }
    let mut master = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut dirs = Vec::with_capacity(opts.identities);
    for k in 0..opts.identities {
        let identity_seed: u64 = master.random();
        let view_seed: u64 = master.random();
        let template = generate_identity(identity_seed, opts.resolution)?;
        let views = render_collection(&template, opts.views, opts.tier, view_seed)?;
        let name = format!("id{k:04}");
        let dir = out.join(&name);
        write_identity(&dir, &name, &template, &views, opts.tier)?;
        dirs.push(dir);
    }
    Ok(dirs)
}
