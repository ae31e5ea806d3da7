//! Depth, normal and image metrics, and directory-level evaluation.
//!
//! Masks are `[1, 1, H, W]`; a pixel belongs to the evaluation domain when
//! its mask value is positive.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lap_tensor::Tensor;

use crate::error::{contract, Error, Result};
use crate::io;
use crate::render::{depth_to_normals, Camera, DEFAULT_FOV_DEG};
use crate::synth::read_json;

fn domain(mask: Option<&Tensor>, n: usize) -> Result<Vec<usize>> {
    let idx: Vec<usize> = match mask {
        Some(m) => {
            if m.numel() != n {
                return Err(contract(format!("mask {:?} does not cover {n} pixels", m.shape())));
            }
            m.data().iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, _)| i).collect()
        }
        None => (0..n).collect(),
    };
    Ok(idx)
}

/// Scale-invariant depth error: standard deviation of the log ratio.
pub fn side(pred: &Tensor, gt: &Tensor, mask: Option<&Tensor>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(contract(format!("side: {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let idx = domain(mask, pred.numel())?;
    if idx.is_empty() {
        return Err(Error::EmptyDomain("side"));
    }
    let (p, g) = (pred.data(), gt.data());
    let (mut s1, mut s2) = (0.0, 0.0);
    for &i in &idx {
        if p[i] <= 0.0 || g[i] <= 0.0 {
            return Err(Error::Degenerate(format!("side: non-positive depth at pixel {i}")));
        }
        let d = p[i].ln() - g[i].ln();
        s1 += d;
        s2 += d * d;
    }
    let n = idx.len() as f64;
    let (m1, m2) = (s1 / n, s2 / n);
    Ok((m2 - m1 * m1).max(0.0).sqrt())
}

/// Mean angle in degrees between two `[1, 3, H, W]` unit normal maps.
pub fn mad(pred: &Tensor, gt: &Tensor, mask: Option<&Tensor>) -> Result<f64> {
    if pred.shape() != gt.shape() || pred.rank() != 4 || pred.dim(1) != 3 || pred.dim(0) != 1 {
        return Err(contract(format!("mad: {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let plane = pred.dim(2) * pred.dim(3);
    let idx = domain(mask, plane)?;
    if idx.is_empty() {
        return Err(Error::EmptyDomain("mad"));
    }
    let (p, g) = (pred.data(), gt.data());
    let total: f64 = idx
        .iter()
        .map(|&i| {
            let a = [p[i], p[plane + i], p[2 * plane + i]];
            let b = [g[i], g[plane + i], g[2 * plane + i]];
            let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            let cross = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
            // Same angle as acos of the clamped dot product for unit vectors,
            // without its loss of precision near 0 and 180 degrees.
            let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
            sin.atan2(dot).to_degrees()
        })
        .sum();
    Ok(total / idx.len() as f64)
}

/// Pearson correlation (x100) of the two depth maps sampled at keypoints
/// given as (u, v) pixel coordinates, rounded to the nearest pixel.
pub fn depth_corr(pred: &Tensor, gt: &Tensor, keypoints: &[[f64; 2]]) -> Result<f64> {
    if pred.shape() != gt.shape() || pred.rank() != 4 {
        return Err(contract(format!("depth_corr: {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let (h, w) = (pred.dim(2), pred.dim(3));
    let mut a = Vec::new();
    let mut b = Vec::new();
    for k in keypoints {
        let (u, v) = (k[0].round(), k[1].round());
        if u >= 0.0 && v >= 0.0 && (u as usize) < w && (v as usize) < h {
            let i = v as usize * w + u as usize;
            a.push(pred.data()[i]);
            b.push(gt.data()[i]);
        }
    }
    pearson(&a, &b)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 3 {
        return Err(Error::Degenerate(format!("pearson needs >= 3 paired samples, got {}", a.len().min(b.len()))));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("pearson: zero variance sample".into()));
    }
    Ok(100.0 * sab / (saa * sbb).sqrt())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_STD: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_STD * SSIM_STD)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|x| x / s).collect()
}

/// Valid-mode separable filtering of one `h x w` plane.
fn filter(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|j| g[j] * plane[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|j| g[j] * rows[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM of `[1, C, H, W]` images, averaged over channels and
/// over the windows whose centre lies in the mask.
pub fn ssim(x: &Tensor, y: &Tensor, mask: Option<&Tensor>) -> Result<f64> {
    if x.shape() != y.shape() || x.rank() != 4 || x.dim(0) != 1 {
        return Err(contract(format!("ssim: {:?} vs {:?}", x.shape(), y.shape())));
    }
    let (c, h, w) = (x.dim(1), x.dim(2), x.dim(3));
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(contract(format!("ssim: {h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let g = gaussian_window();
    let half = SSIM_WINDOW / 2;
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let centres: Vec<usize> = (0..oh * ow)
        .filter(|&i| {
            let (oy, ox) = (i / ow, i % ow);
            mask.is_none_or(|m| m.data()[(oy + half) * w + ox + half] > 0.0)
        })
        .collect();
    if let Some(m) = mask {
        if m.numel() != h * w {
            return Err(contract(format!("ssim: mask {:?} for a {h}x{w} image", m.shape())));
        }
    }
    if centres.is_empty() {
        return Err(Error::EmptyDomain("ssim"));
    }
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let a = &x.data()[ch * plane..(ch + 1) * plane];
        let b = &y.data()[ch * plane..(ch + 1) * plane];
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
        let mx = filter(a, h, w, &g);
        let my = filter(b, h, w, &g);
        let mxx = filter(&prod(a, a), h, w, &g);
        let myy = filter(&prod(b, b), h, w, &g);
        let mxy = filter(&prod(a, b), h, w, &g);
        let sum: f64 = centres
            .iter()
            .map(|&i| {
                let (ux, uy) = (mx[i], my[i]);
                let sx = mxx[i] - ux * ux;
                let sy = myy[i] - uy * uy;
                let sxy = mxy[i] - ux * uy;
                ((2.0 * ux * uy + C1) * (2.0 * sxy + C2)) / ((ux * ux + uy * uy + C1) * (sx + sy + C2))
            })
            .sum();
        total += sum / centres.len() as f64;
    }
    Ok(total / c as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Side,
    Mad,
    Ssim,
    Corr,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Side, Metric::Mad, Metric::Ssim, Metric::Corr];

    pub fn column(self) -> &'static str {
        match self {
            Metric::Side => "side_e-2",
            Metric::Mad => "mad_deg",
            Metric::Ssim => "ssim",
            Metric::Corr => "corr",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "side" => Ok(Metric::Side),
            "mad" => Ok(Metric::Mad),
            "ssim" => Ok(Metric::Ssim),
            "corr" => Ok(Metric::Corr),
            other => Err(contract(format!("unknown metric {other:?} (expected side, mad, ssim or corr)"))),
        }
    }
}

pub fn parse_metrics(list: &str) -> Result<Vec<Metric>> {
    let mut m: Vec<Metric> = list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    m.sort();
    m.dedup();
    if m.is_empty() {
        return Err(contract("no metrics selected"));
    }
    Ok(m)
}

/// One evaluated file stem; `None` where a metric does not apply.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub stem: String,
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metrics: Vec<Metric>,
    pub rows: Vec<ReportRow>,
    /// Ground-truth stems without a matching prediction.
    pub missing: Vec<String>,
    /// Pixels inside all evaluated masks.
    pub masked_pixels: usize,
}

impl EvalReport {
    /// Mean and standard deviation of each column over the rows where it is
    /// defined.
    pub fn aggregate(&self) -> Vec<Option<(f64, f64)>> {
        (0..self.metrics.len())
            .map(|k| {
                let v: Vec<f64> = self.rows.iter().filter_map(|r| r.values[k]).collect();
                if v.is_empty() {
                    return None;
                }
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                Some((mean, var.sqrt()))
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image");
        for m in &self.metrics {
            s.push(',');
            s.push_str(m.column());
        }
        s.push('\n');
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            s.push_str(&r.stem);
            for v in &r.values {
                s.push(',');
                s.push_str(&cell(*v));
            }
            s.push('\n');
        }
        let agg = self.aggregate();
        for (label, pick) in [("mean", 0), ("std", 1)] {
            s.push_str(label);
            for a in &agg {
                s.push(',');
                s.push_str(&cell(a.map(|(m, d)| if pick == 0 { m } else { d })));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.stem.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{:<width$}", "image");
        for m in &self.metrics {
            let _ = write!(s, " {:>12}", m.column());
        }
        s.push('\n');
        let cell = |v: Option<f64>| v.map(|x| format!("{x:>12.6}")).unwrap_or_else(|| format!("{:>12}", "-"));
        for r in &self.rows {
            let _ = write!(s, "{:<width$}", r.stem);
            for v in &r.values {
                let _ = write!(s, " {}", cell(*v));
            }
            s.push('\n');
        }
        let agg = self.aggregate();
        for (label, pick) in [("mean", 0), ("std", 1)] {
            let _ = write!(s, "{label:<width$}");
            for a in &agg {
                let _ = write!(s, " {}", cell(a.map(|(m, d)| if pick == 0 { m } else { d })));
            }
            s.push('\n');
        }
        let _ = writeln!(s, "{} rows, {} masked pixels, {} missing predictions", self.rows.len(), self.masked_pixels, self.missing.len());
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Align {
    /// Depth metrics see the raw predictions.
    #[default]
    None,
    /// Predicted depth is shifted so its masked median matches the ground
    /// truth's before any depth metric.
    Median,
}

impl std::str::FromStr for Align {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Align::None),
            "median" => Ok(Align::Median),
            other => Err(contract(format!("unknown alignment {other:?} (expected none or median)"))),
        }
    }
}

fn masked_median(t: &Tensor, idx: &[usize]) -> f64 {
    let mut v: Vec<f64> = idx.iter().map(|&i| t.data()[i]).collect();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Shifts `pred` additively so that its median over the mask equals that of
/// `gt`.
pub fn align_median(pred: &Tensor, gt: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let idx = domain(mask, pred.numel())?;
    if idx.is_empty() {
        return Err(Error::EmptyDomain("align_median"));
    }
    Ok(pred.add_scalar(masked_median(gt, &idx) - masked_median(pred, &idx))?)
}

/// Worker threads for per-image evaluation: `LAP_THREADS`, or the available
/// parallelism when unset or 0.
pub fn worker_threads() -> usize {
    match std::env::var("LAP_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n > 0 => n,
        _ => std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

/// `f` over `items` on up to `threads` scoped workers, results in input order.
fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    })
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(root, &p, out)?;
        } else if let Ok(rel) = p.strip_prefix(root) {
            out.push(rel.to_path_buf());
        }
    }
    Ok(())
}

fn stem_of(rel: &Path) -> String {
    rel.with_extension("").to_string_lossy().replace('\\', "/")
}

enum Outcome {
    Row(ReportRow, usize),
    Missing(String),
}

fn evaluate_one(pred_dir: &Path, gt_dir: &Path, rel: &Path, metrics: &[Metric], align: Align) -> Result<Outcome> {
    let stem = stem_of(rel);
    let pred_path = pred_dir.join(rel);
    if !pred_path.is_file() {
        return Ok(Outcome::Missing(stem));
    }
    let gt_path = gt_dir.join(rel);
    let mask_path = gt_dir.join(format!("{stem}_mask.png"));
    let mask = if mask_path.is_file() {
        Some(io::read_mask_png(&mask_path)?)
    } else {
        None
    };
    let mut values = vec![None; metrics.len()];
    let pixels;
    if rel.extension().is_some_and(|e| e == "lapd") {
        let (p, g) = (io::read_lapd(&pred_path)?, io::read_lapd(&gt_path)?);
        if p.shape() != g.shape() {
            return Err(Error::format(&pred_path, format!("shape {:?} differs from ground truth {:?}", p.shape(), g.shape())));
        }
        let p = match align {
            Align::None => p,
            Align::Median => align_median(&p, &g, mask.as_ref())?,
        };
        let (h, w) = (g.dim(2), g.dim(3));
        pixels = h * w;
        let kp_path = gt_dir.join(format!("{stem}_keypoints.json"));
        for (k, m) in metrics.iter().enumerate() {
            values[k] = match m {
                Metric::Side => Some(100.0 * side(&p, &g, mask.as_ref())?),
                Metric::Mad => {
                    let cam = Camera::new(DEFAULT_FOV_DEG, h, w)?;
                    Some(mad(&depth_to_normals(&p, &cam)?, &depth_to_normals(&g, &cam)?, mask.as_ref())?)
                }
                Metric::Corr if kp_path.is_file() => {
                    let kp: Vec<[f64; 2]> = read_json(&kp_path)?;
                    Some(depth_corr(&p, &g, &kp)?)
                }
                _ => None,
            };
        }
    } else {
        let (p, g) = (io::read_png_rgb(&pred_path)?, io::read_png_rgb(&gt_path)?);
        if p.shape() != g.shape() {
            return Err(Error::format(&pred_path, format!("shape {:?} differs from ground truth {:?}", p.shape(), g.shape())));
        }
        pixels = g.dim(2) * g.dim(3);
        for (k, m) in metrics.iter().enumerate() {
            if *m == Metric::Ssim {
                values[k] = Some(ssim(&p, &g, mask.as_ref())?);
            }
        }
    }
    let counted = mask.map_or(pixels, |m| m.data().iter().filter(|&&v| v > 0.0).count());
    Ok(Outcome::Row(ReportRow { stem, values }, counted))
}

/// Compares every prediction under `pred_dir` with the file of the same
/// relative path under `gt_dir`. Depth rasters (`.lapd`) feed SIDE, MAD and
/// keypoint correlation (when `<stem>_keypoints.json` exists); RGB images
/// (`.png`, except masks) feed SSIM. `<stem>_mask.png` in the ground truth
/// restricts the domain. Files are evaluated on [`worker_threads`] threads.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, metrics: &[Metric], align: Align) -> Result<EvalReport> {
    let mut files = Vec::new();
    walk(gt_dir, gt_dir, &mut files)?;
    let wants = |m: Metric| metrics.contains(&m);
    let depth_metrics = wants(Metric::Side) || wants(Metric::Mad) || wants(Metric::Corr);
    files.retain(|rel| {
        let ext = rel.extension().and_then(|e| e.to_str()).unwrap_or("");
        ext == "lapd" && depth_metrics || ext == "png" && wants(Metric::Ssim) && !stem_of(rel).ends_with("_mask")
    });
    let outcomes = par_map(&files, worker_threads(), |rel| evaluate_one(pred_dir, gt_dir, rel, metrics, align));
    let mut report = EvalReport {
        metrics: metrics.to_vec(),
        rows: Vec::new(),
        missing: Vec::new(),
        masked_pixels: 0,
    };
    for o in outcomes {
        match o? {
            Outcome::Row(row, n) => {
                report.rows.push(row);
                report.masked_pixels += n;
            }
            Outcome::Missing(stem) => report.missing.push(stem),
        }
    }
    Ok(report)
}
