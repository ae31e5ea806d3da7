//! Central-difference checks of the analytic gradients, grouped by
//! subsystem, with the tolerance each group must meet.

use std::fmt::Write as _;

use lap_tensor::suite::run_primitive_suite;
use lap_tensor::{finite_diff_check_with, GradCheckOptions, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::nets::layers::Overrides;
use crate::nets::{Binder, LapModel, ModelConfig, ParamStore};
use crate::objectives::{recon_nll, relaxed_consistency, total_objective, LossKind};
use crate::render::{depth_to_normals, render, reproject, shade, Camera, RenderOutput};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const RENDERER_TOLERANCE: f64 = 1e-3;
pub const LOSS_TOLERANCE: f64 = 1e-5;
pub const NETWORK_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-6;
const NETWORK_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Primitives,
    Renderer,
    Losses,
    Networks,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primitives" => Ok(Suite::Primitives),
            "renderer" => Ok(Suite::Renderer),
            "losses" => Ok(Suite::Losses),
            "networks" => Ok(Suite::Networks),
            "all" => Ok(Suite::All),
            other => Err(contract(format!(
                "unknown suite {other:?} (expected primitives, renderer, losses, networks or all)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub group: &'static str,
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn table(rows: &[GradRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut s = format!("{:<10} {:<width$} {:>12} {:>10}  status\n", "group", "check", "max_rel_err", "tolerance");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:<width$} {:>12.3e} {:>10.0e}  {}",
            r.group,
            r.name,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    s
}

fn opts(probes: usize) -> GradCheckOptions {
    GradCheckOptions {
        step: STEP,
        max_probes: Some(probes),
    }
}

/// Network outputs are sums over many small terms; at the 1e-6 step
/// round-off in the difference quotient dominates, so they use a coarser one.
fn net_opts(probes: usize) -> GradCheckOptions {
    GradCheckOptions {
        step: NETWORK_STEP,
        max_probes: Some(probes),
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    Ok(Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())?)
}

/// Smooth bump-shaped depth and albedo on an `n x n` grid.
fn smooth_scene(n: usize) -> Result<(Tensor, Tensor)> {
    let mut d = vec![0.0; n * n];
    let mut a = vec![0.0; 3 * n * n];
    for v in 0..n {
        for u in 0..n {
            let x = (2.0 * u as f64 - (n - 1) as f64) / (n - 1) as f64;
            let y = (2.0 * v as f64 - (n - 1) as f64) / (n - 1) as f64;
            d[v * n + u] = 1.04 - 0.06 * (-(x * x + y * y) * 2.0).exp();
            for c in 0..3 {
                a[c * n * n + v * n + u] = 0.3 + 0.1 * c as f64 + 0.2 * x * x + 0.1 * y;
            }
        }
    }
    Ok((Tensor::new([1, 3, n, n], a)?, Tensor::new([1, 1, n, n], d)?))
}

pub fn primitives(seed: u64) -> Result<Vec<GradRow>> {
    Ok(run_primitive_suite(seed, 3, STEP)?
        .into_iter()
        .map(|r| GradRow {
            group: "primitive",
            name: r.name.to_string(),
            max_rel_error: r.max_rel_error,
            tolerance: PRIMITIVE_TOLERANCE,
        })
        .collect())
}

pub fn renderer(seed: u64) -> Result<Vec<GradRow>> {
    let n = 10;
    let cam = Camera::square(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, d) = smooth_scene(n)?;
    let r3 = uniform(&mut rng, &[1, 3, n, n], 0.5, 1.5)?;
    let light = Tensor::new([1, 4], vec![0.35, 0.55, 0.2, -0.15])?;
    // Small pose keeps every point clear of cell boundaries.
    let pose = Tensor::new([1, 6], vec![3.1, -2.3, 1.7, 0.0131, -0.0077, 0.004])?;
    let n3 = depth_to_normals(&d, &cam)?;
    let mut rows = Vec::new();
    let mut push = |name: &str, worst: f64| {
        rows.push(GradRow {
            group: "renderer",
            name: name.to_string(),
            max_rel_error: worst,
            tolerance: RENDERER_TOLERANCE,
        })
    };
    let rep = finite_diff_check_with(|x| depth_to_normals(&x[0], &cam)?.mul(&r3)?.sum(), &[d.clone()], &opts(40))?;
    push("depth_to_normals", rep.worst());
    let rep = finite_diff_check_with(|x| shade(&x[0], &x[1], &x[2])?.mul(&r3)?.sum(), &[a.clone(), n3, light.clone()], &opts(40))?;
    push("shade", rep.worst());
    let rep = finite_diff_check_with(
        |x| reproject(&x[0], &x[1], &x[2], &cam)?.image.mul(&r3)?.sum(),
        &[a.clone(), d.clone(), pose.clone()],
        &opts(40),
    )?;
    push("reproject", rep.worst());
    for (name, flipped) in [("render", false), ("render_flipped", true)] {
        let rep = finite_diff_check_with(
            |x| render(&x[0], &x[1], &x[2], &x[3], &cam, flipped)?.image.mul(&r3)?.sum(),
            &[a.clone(), d.clone(), light.clone(), pose.clone()],
            &opts(40),
        )?;
        push(name, rep.worst());
    }
    Ok(rows)
}

/// Prediction offset from the target by residuals bounded away from zero,
/// so no probe crosses the kink of |.|.
fn loss_inputs(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> Result<(Tensor, Tensor)> {
    let target = uniform(rng, &[b, 3, h, w], 0.2, 0.8)?;
    let offs: Vec<f64> = (0..b * 3 * h * w)
        .map(|_| {
            let m = rng.random_range(0.05..0.2);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let pred = target.add(&Tensor::new([b, 3, h, w], offs)?)?;
    Ok((pred, target))
}

pub fn losses(seed: u64) -> Result<Vec<GradRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, h, w) = (2, 3, 3);
    let (pred, target) = loss_inputs(&mut rng, b, h, w)?;
    let (pred_f, _) = loss_inputs(&mut rng, b, h, w)?;
    let sigma = uniform(&mut rng, &[b, 1, h, w], 0.3, 1.5)?;
    let sigmas = uniform(&mut rng, &[b, 2, h, w], 0.3, 1.5)?;
    let mask = Tensor::new([b, 1, h, w], (0..b * h * w).map(|i| [1.0, 0.3, 0.0][i % 3]).collect())?;
    let ones = Tensor::ones([b, 1, h, w])?;
    let as_render = |image: &Tensor| RenderOutput {
        image: image.clone(),
        coverage: ones.clone(),
        depth: ones.clone(),
        covered: ones.clone(),
    };
    let full = GradCheckOptions {
        step: 1e-5,
        max_probes: None,
    };
    let mut rows = Vec::new();
    let mut push = |name: &str, worst: f64| {
        rows.push(GradRow {
            group: "loss",
            name: name.to_string(),
            max_rel_error: worst,
            tolerance: LOSS_TOLERANCE,
        })
    };
    let t = &target;
    let rep = finite_diff_check_with(|x| Ok(recon_nll(&x[0], t, &x[1], None)?), &[pred.clone(), sigma.clone()], &full)?;
    push("recon_nll", rep.worst());
    let rep = finite_diff_check_with(
        |x| Ok(relaxed_consistency(&x[0], t, &x[1], &mask)?),
        &[pred.clone(), sigma.clone()],
        &full,
    )?;
    push("relaxed_consistency", rep.worst());
    for (name, kind) in [("total_relaxed", LossKind::Relaxed), ("total_recon", LossKind::Recon)] {
        let rep = finite_diff_check_with(
            |x| Ok(total_objective(kind, &as_render(&x[0]), &as_render(&x[1]), t, &x[2], &mask, 0.5)?),
            &[pred.clone(), pred_f.clone(), sigmas.clone()],
            &full,
        )?;
        push(name, rep.worst());
    }
    Ok(rows)
}

/// Randomises every all-zero tensor so that no path is trivially dead.
fn wake(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    let names: Vec<String> = store
        .iter()
        .filter(|(_, t)| t.data().iter().all(|&x| x == 0.0))
        .map(|(k, _)| k.clone())
        .collect();
    for k in names {
        let shape = store.get(&k)?.shape().to_vec();
        store.set(&k, uniform(rng, &shape, -0.2, 0.2)?)?;
    }
    Ok(())
}

pub fn networks(seed: u64) -> Result<Vec<GradRow>> {
    let cfg = ModelConfig {
        resolution: 16,
        base_channels: 4,
        code_dim: 16,
    };
    let m = LapModel::new(cfg)?;
    let mut store = m.init(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    wake(&mut store, &mut rng)?;
    let imgs = uniform(&mut rng, &[2, 3, 16, 16], 0.0, 1.0)?;
    let code = uniform(&mut rng, &[1, cfg.code_dim], -2.0, 2.0)?;
    let codes = uniform(&mut rng, &[3, cfg.code_dim], -1.0, 1.0)?;
    let ra = uniform(&mut rng, &[2, 3, 16, 16], -1.0, 1.0)?;
    let rd = uniform(&mut rng, &[2, 1, 16, 16], -1.0, 1.0)?;
    let rc = uniform(&mut rng, &[2, cfg.code_dim], -1.0, 1.0)?;
    let p = Binder::frozen(&store);
    let mut rows = Vec::new();
    let mut push = |name: &str, worst: f64| {
        rows.push(GradRow {
            group: "network",
            name: name.to_string(),
            max_rel_error: worst,
            tolerance: NETWORK_TOLERANCE,
        })
    };
    let rep = finite_diff_check_with(|x| Ok(m.encode_albedo(&p, &x[0])?.code_rows()?.mul(&rc)?.sum()?), &[imgs.clone()], &net_opts(32))?;
    push("encoder", rep.worst());
    let rep = finite_diff_check_with(|x| Ok(m.aggregate_albedo(&p, &x[0])?.code.sum()?), &[codes], &net_opts(32))?;
    push("aggregator", rep.worst());
    let rep = finite_diff_check_with(
        |x| {
            let f = m.decode(&p, &x[0], &x[1])?;
            Ok(f.albedo.mean()?.add(&f.depth.mean()?)?)
        },
        &[code.clone(), code.scale(0.5)?],
        &net_opts(16),
    )?;
    push("decoder", rep.worst());
    let rep = finite_diff_check_with(
        |x| {
            let v = m.predict_views(&p, &x[0])?;
            Ok(v.pose.sum()?.add(&v.light.sum()?)?.add(&v.sigmas.mean()?)?)
        },
        &[imgs.clone()],
        &net_opts(24),
    )?;
    push("view_heads", rep.worst());
    let canon = m.decode(&p, &code, &code)?.broadcast(2)?;
    let rep = finite_diff_check_with(
        |x| {
            let r = m.refine(&p, &canon, &x[0], Overrides::default())?;
            Ok(r.albedo.mul(&ra)?.sum()?.add(&r.depth.mul(&rd)?.sum()?)?)
        },
        &[imgs.clone()],
        &net_opts(24),
    )?;
    push("refiner", rep.worst());
    // Parameter gradients, as training uses them.
    let names: Vec<String> = store
        .iter()
        .filter(|(k, _)| k.starts_with("phi_d."))
        .map(|(k, _)| k.clone())
        .take(2)
        .collect();
    let weights: Vec<Tensor> = names.iter().map(|k| store.get(k).cloned()).collect::<Result<_>>()?;
    let rep = finite_diff_check_with(
        |x| {
            let p = Binder::frozen(&store);
            for (k, t) in names.iter().zip(x) {
                p.bind(k, t.clone())?;
            }
            Ok(m.decode(&p, &code, &code)?.depth.mean()?)
        },
        &weights,
        &net_opts(16),
    )?;
    push("decoder_weights", rep.worst());
    Ok(rows)
}

pub fn run(suite: Suite, seed: u64) -> Result<Vec<GradRow>> {
    let mut rows = Vec::new();
    if matches!(suite, Suite::Primitives | Suite::All) {
        rows.extend(primitives(seed)?);
    }
    if matches!(suite, Suite::Renderer | Suite::All) {
        rows.extend(renderer(seed)?);
    }
    if matches!(suite, Suite::Losses | Suite::All) {
        rows.extend(losses(seed)?);
    }
    if matches!(suite, Suite::Networks | Suite::All) {
        rows.extend(networks(seed)?);
    }
    Ok(rows)
}
