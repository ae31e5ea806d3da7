//! Differentiable image formation: Lambertian shading of a canonical
//! albedo/depth pair followed by rigid reprojection with soft splatting.
//!
//! Every function is batched: albedo `[B, 3, H, W]`, depth `[B, 1, H, W]`,
//! light `[B, 4]` as (k_amb, k_diff, l_x, l_y), pose `[B, 6]` as
//! (yaw, pitch, roll in degrees, t_x, t_y, t_z).

use lap_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Canonical object centre, camera units.
/// Field of view of the synthetic camera, in degrees.
pub const DEFAULT_FOV_DEG: f64 = 10.0;
pub const OBJECT_CENTER: [f64; 3] = [0.0, 0.0, 1.0];
/// Soft-visibility temperature.
pub const VIS_TAU: f64 = 0.01;
/// Minimum accumulated bilinear weight for a pixel to count as covered.
pub const COVER_EPS: f64 = 1e-6;
pub const MAX_ANGLE_DEG: f64 = 60.0;
pub const MAX_TXY: f64 = 0.1;
pub const MAX_TZ: f64 = 0.05;
pub const DEPTH_MID: f64 = 1.0;
pub const DEPTH_HALF_RANGE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub fov_deg: f64,
    pub h: usize,
    pub w: usize,
}

impl Camera {
    pub fn new(fov_deg: f64, h: usize, w: usize) -> Result<Self> {
        if !(fov_deg > 1.0 && fov_deg < 60.0) {
            return Err(contract(format!("field of view {fov_deg} outside (1, 60) degrees")));
        }
        if h < 3 || w < 3 {
            return Err(contract(format!("image {h}x{w} smaller than 3x3")));
        }
        Ok(Self { fov_deg, h, w })
    }

    pub fn square(size: usize) -> Result<Self> {
        Self::new(DEFAULT_FOV_DEG, size, size)
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        (self.w as f64 - 1.0) / 2.0 / (self.fov_deg.to_radians() / 2.0).tan()
    }

    pub fn cx(&self) -> f64 {
        (self.w as f64 - 1.0) / 2.0
    }

    pub fn cy(&self) -> f64 {
        (self.h as f64 - 1.0) / 2.0
    }

    /// Normalised ray coordinates (K^-1 (u, v, 1)) as `[1, 1, H, W]` pair.
    fn rays(&self) -> Result<(Tensor, Tensor)> {
        let (f, cx, cy) = (self.focal(), self.cx(), self.cy());
        let n = self.h * self.w;
        let xs = (0..n).map(|i| ((i % self.w) as f64 - cx) / f).collect();
        let ys = (0..n).map(|i| ((i / self.w) as f64 - cy) / f).collect();
        Ok((
            Tensor::new([1, 1, self.h, self.w], xs)?,
            Tensor::new([1, 1, self.h, self.w], ys)?,
        ))
    }

    fn check_plane(&self, t: &Tensor, channels: usize, what: &str) -> Result<usize> {
        match t.shape() {
            &[b, c, h, w] if c == channels && h == self.h && w == self.w => Ok(b),
            s => Err(contract(format!(
                "{what}: expected [B, {channels}, {}, {}], got {s:?}",
                self.h, self.w
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Light {
    pub k_amb: f64,
    pub k_diff: f64,
    pub lx: f64,
    pub ly: f64,
}

impl Light {
    pub fn to_row(self) -> [f64; 4] {
        [self.k_amb, self.k_diff, self.lx, self.ly]
    }

    pub fn from_row(r: &[f64]) -> Self {
        Self {
            k_amb: r[0],
            k_diff: r[1],
            lx: r[2],
            ly: r[3],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
}

impl Pose {
    pub fn to_row(self) -> [f64; 6] {
        [self.yaw, self.pitch, self.roll, self.tx, self.ty, self.tz]
    }

    pub fn from_row(r: &[f64]) -> Self {
        Self {
            yaw: r[0],
            pitch: r[1],
            roll: r[2],
            tx: r[3],
            ty: r[4],
            tz: r[5],
        }
    }

    /// The pose whose render is the width-mirror of this one's.
    pub fn mirrored(self) -> Self {
        Self {
            yaw: -self.yaw,
            roll: -self.roll,
            tx: -self.tx,
            ..self
        }
    }
}

/// Stacks per-view rows into a `[B, K]` tensor.
pub fn rows<const K: usize>(rows: &[[f64; K]]) -> Result<Tensor> {
    Ok(Tensor::new([rows.len(), K], rows.concat())?)
}

pub fn lights_tensor(lights: &[Light]) -> Result<Tensor> {
    rows(&lights.iter().map(|l| l.to_row()).collect::<Vec<_>>())
}

pub fn poses_tensor(poses: &[Pose]) -> Result<Tensor> {
    rows(&poses.iter().map(|p| p.to_row()).collect::<Vec<_>>())
}

/// Column `j` of a `[B, K]` tensor as `[B, 1, 1, 1]`.
fn column(t: &Tensor, j: usize) -> Result<Tensor> {
    let b = t.shape()[0];
    Ok(t.narrow(1, j, 1)?.reshape(&[b, 1, 1, 1])?)
}

/// `[B, K]` raw network outputs to bounded factors, via tanh.
pub fn light_from_raw(raw: &Tensor) -> Result<Tensor> {
    let t = raw.tanh()?;
    let k = t.narrow(1, 0, 2)?.add_scalar(1.0)?.scale(0.5)?;
    let dir = t.narrow(1, 2, 2)?;
    Ok(Tensor::concat(&[&k, &dir], 1)?)
}

pub fn pose_from_raw(raw: &Tensor) -> Result<Tensor> {
    let t = raw.tanh()?;
    let scale = Tensor::new(
        [1, 6],
        vec![MAX_ANGLE_DEG, MAX_ANGLE_DEG, MAX_ANGLE_DEG, MAX_TXY, MAX_TXY, MAX_TZ],
    )?;
    Ok(t.mul(&scale)?)
}

pub fn depth_from_raw(raw: &Tensor) -> Result<Tensor> {
    Ok(raw.tanh()?.scale(DEPTH_HALF_RANGE)?.add_scalar(DEPTH_MID)?)
}

pub fn albedo_from_raw(raw: &Tensor) -> Result<Tensor> {
    Ok(raw.tanh()?.add_scalar(1.0)?.scale(0.5)?)
}

/// Unit light direction `[B, 3, 1, 1]` pointing toward the camera side.
pub fn light_direction(light: &Tensor) -> Result<Tensor> {
    let (lx, ly) = (column(light, 2)?, column(light, 3)?);
    let rest = lx.mul(&lx)?.add(&ly.mul(&ly)?)?.neg()?.add_scalar(1.0)?;
    let lz = rest.clamp(1e-12, 1.0)?.sqrt()?.neg()?;
    let norm = lx.mul(&lx)?.add(&ly.mul(&ly)?)?.add(&lz.mul(&lz)?)?.sqrt()?;
    let dir = Tensor::concat(&[&lx, &ly, &lz], 1)?;
    Ok(dir.div(&norm)?)
}

/// Backprojected points `(Px, Py, Pz)`, each `[B, 1, H, W]`.
fn backproject(d: &Tensor, cam: &Camera) -> Result<[Tensor; 3]> {
    let (rx, ry) = cam.rays()?;
    Ok([d.mul(&rx)?, d.mul(&ry)?, d.clone()])
}

/// Replicates the outer ring of a `[B, C, H-2, W-2]` interior.
fn replicate_border(x: &Tensor) -> Result<Tensor> {
    let h = x.dim(2);
    let rows = Tensor::concat(&[&x.narrow(2, 0, 1)?, x, &x.narrow(2, h - 1, 1)?], 2)?;
    let w = rows.dim(3);
    Ok(Tensor::concat(
        &[&rows.narrow(3, 0, 1)?, &rows, &rows.narrow(3, w - 1, 1)?],
        3,
    )?)
}

/// Per-pixel unit normals `[B, 3, H, W]`, oriented so that n_z <= 0 on any
/// surface facing the camera.
pub fn depth_to_normals(d: &Tensor, cam: &Camera) -> Result<Tensor> {
    cam.check_plane(d, 1, "depth_to_normals")?;
    let (h, w) = (cam.h, cam.w);
    let p = backproject(d, cam)?;
    // Central differences on the interior.
    let du: Vec<Tensor> = p
        .iter()
        .map(|c| {
            let c = c.narrow(2, 1, h - 2)?;
            c.narrow(3, 2, w - 2)?.sub(&c.narrow(3, 0, w - 2)?)
        })
        .collect::<lap_tensor::Result<_>>()?;
    let dv: Vec<Tensor> = p
        .iter()
        .map(|c| {
            let c = c.narrow(3, 1, w - 2)?;
            c.narrow(2, 2, h - 2)?.sub(&c.narrow(2, 0, h - 2)?)
        })
        .collect::<lap_tensor::Result<_>>()?;
    // n = -(du x dv).
    let nx = dv[1].mul(&du[2])?.sub(&du[1].mul(&dv[2])?)?;
    let ny = du[0].mul(&dv[2])?.sub(&dv[0].mul(&du[2])?)?;
    let nz = dv[0].mul(&du[1])?.sub(&du[0].mul(&dv[1])?)?;
    let norm = nx.mul(&nx)?.add(&ny.mul(&ny)?)?.add(&nz.mul(&nz)?)?.sqrt()?;
    let n = Tensor::concat(&[&nx, &ny, &nz], 1)?.div(&norm)?;
    replicate_border(&n)
}

/// `clamp(a * (k_amb + k_diff * max(0, <n, l>)), 0, 1)`.
pub fn shade(albedo: &Tensor, normals: &Tensor, light: &Tensor) -> Result<Tensor> {
    let b = albedo.dim(0);
    if albedo.dim(1) != 3 || normals.shape() != [b, 3, albedo.dim(2), albedo.dim(3)] || light.shape() != [b, 4] {
        return Err(contract(format!(
            "shade: albedo {:?}, normals {:?}, light {:?} do not conform",
            albedo.shape(),
            normals.shape(),
            light.shape()
        )));
    }
    let dir = light_direction(light)?;
    let cos = normals.mul(&dir)?.sum_axis(1, true)?.relu()?;
    let intensity = column(light, 1)?.mul(&cos)?.add(&column(light, 0)?)?;
    Ok(albedo.mul(&intensity)?.clamp(0.0, 1.0)?)
}

/// 3x3 matrix of `[B, 1, 1, 1]` entries.
type Mat3 = [[Tensor; 3]; 3];

fn mat3_mul(a: &Mat3, b: &Mat3) -> Result<Mat3> {
    let entry = |i: usize, j: usize| -> Result<Tensor> {
        let mut acc = a[i][0].mul(&b[0][j])?;
        for k in 1..3 {
            acc = acc.add(&a[i][k].mul(&b[k][j])?)?;
        }
        Ok(acc)
    };
    Ok([
        [entry(0, 0)?, entry(0, 1)?, entry(0, 2)?],
        [entry(1, 0)?, entry(1, 1)?, entry(1, 2)?],
        [entry(2, 0)?, entry(2, 1)?, entry(2, 2)?],
    ])
}

/// `R = Ry(yaw) Rx(pitch) Rz(roll)`.
fn rotation(pose: &Tensor) -> Result<Mat3> {
    let b = pose.dim(0);
    let zero = Tensor::zeros([b, 1, 1, 1])?;
    let one = Tensor::ones([b, 1, 1, 1])?;
    let angle = |j| -> Result<(Tensor, Tensor)> {
        let a = column(pose, j)?.scale(std::f64::consts::PI / 180.0)?;
        Ok((a.cos()?, a.sin()?))
    };
    let (cy, sy) = angle(0)?;
    let (cx, sx) = angle(1)?;
    let (cz, sz) = angle(2)?;
    let ry = [
        [cy.clone(), zero.clone(), sy.clone()],
        [zero.clone(), one.clone(), zero.clone()],
        [sy.neg()?, zero.clone(), cy],
    ];
    let rx = [
        [one.clone(), zero.clone(), zero.clone()],
        [zero.clone(), cx.clone(), sx.neg()?],
        [zero.clone(), sx, cx],
    ];
    let rz = [
        [cz.clone(), sz.neg()?, zero.clone()],
        [sz, cz, zero.clone()],
        [zero.clone(), zero, one],
    ];
    mat3_mul(&ry, &mat3_mul(&rx, &rz)?)
}

/// Target-view pixel coordinates and camera-space depth of every canonical
/// pixel, each `[B, 1, H, W]`.
pub fn project(d: &Tensor, pose: &Tensor, cam: &Camera) -> Result<[Tensor; 3]> {
    let b = cam.check_plane(d, 1, "project")?;
    if pose.shape() != [b, 6] {
        return Err(contract(format!("project: pose {:?} for batch {b}", pose.shape())));
    }
    let p = backproject(d, cam)?;
    let rel = [
        p[0].add_scalar(-OBJECT_CENTER[0])?,
        p[1].add_scalar(-OBJECT_CENTER[1])?,
        p[2].add_scalar(-OBJECT_CENTER[2])?,
    ];
    let r = rotation(pose)?;
    let mut q = Vec::with_capacity(3);
    for i in 0..3 {
        let mut acc = rel[0].mul(&r[i][0])?;
        acc = acc.add(&rel[1].mul(&r[i][1])?)?;
        acc = acc.add(&rel[2].mul(&r[i][2])?)?;
        let t = column(pose, 3 + i)?;
        q.push(acc.add(&t)?.add_scalar(OBJECT_CENTER[i])?);
    }
    let f = cam.focal();
    let u = q[0].div(&q[2])?.scale(f)?.add_scalar(cam.cx())?;
    let v = q[1].div(&q[2])?.scale(f)?.add_scalar(cam.cy())?;
    Ok([u, v, q[2].clone()])
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    /// `[B, 3, H, W]` in [0, 1]; uncovered pixels are white.
    pub image: Tensor,
    /// `[B, 1, H, W]` accumulated bilinear weight clamped to [0, 1].
    pub coverage: Tensor,
    /// `[B, 1, H, W]` visibility-weighted camera depth; 0 where uncovered.
    pub depth: Tensor,
    /// `[B, 1, H, W]` constant 0/1 indicator of covered pixels.
    pub covered: Tensor,
}

/// Forward-splats `values` (`[B, C, H, W]` in canonical layout) to the target
/// view, normalising by soft-visibility weights.
pub fn splat(values: &Tensor, d: &Tensor, pose: &Tensor, cam: &Camera) -> Result<(Tensor, RenderOutput)> {
    let b = cam.check_plane(d, 1, "splat")?;
    let c = values.dim(1);
    if values.shape() != [b, c, cam.h, cam.w] {
        return Err(contract(format!("splat: values {:?} vs depth {:?}", values.shape(), d.shape())));
    }
    let (h, w, n) = (cam.h, cam.w, cam.h * cam.w);
    let [u, v, qz] = project(d, pose, cam)?;
    // Per-image reference depth keeps exp() in range; it cancels in the
    // normalisation so it carries no gradient.
    let zref: Vec<f64> = qz
        .data()
        .chunks_exact(n)
        .map(|c| c.iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    let zref = Tensor::new([b, 1, 1, 1], zref)?;
    let vis = qz.sub(&zref)?.scale(-1.0 / VIS_TAU)?.exp()?;
    let ones = Tensor::ones([b, 1, h, w])?;
    let stacked = Tensor::concat(&[&values.mul(&vis)?, &qz.mul(&vis)?, &vis, &ones], 1)?;
    let splatted = stacked
        .reshape(&[b, c + 3, n])?
        .scatter_bilinear(&u.reshape(&[b, n])?, &v.reshape(&[b, n])?, h, w)?;
    let num = splatted.narrow(1, 0, c)?;
    let num_z = splatted.narrow(1, c, 1)?;
    let den = splatted.narrow(1, c + 1, 1)?;
    let cov = splatted.narrow(1, c + 2, 1)?;
    let covered: Vec<f64> = cov.data().iter().map(|&x| if x >= COVER_EPS { 1.0 } else { 0.0 }).collect();
    let covered = Tensor::new([b, 1, h, w], covered)?;
    let uncovered = covered.neg()?.add_scalar(1.0)?;
    let safe_den = den.add(&uncovered)?;
    let out = num.div(&safe_den)?.mul(&covered)?;
    let depth = num_z.div(&safe_den)?.mul(&covered)?;
    let rendered = RenderOutput {
        image: Tensor::zeros([1])?,
        coverage: cov.clamp(0.0, 1.0)?,
        depth,
        covered,
    };
    Ok((out, rendered))
}

/// Reprojects a shaded canonical image into the view given by `pose`.
pub fn reproject(j: &Tensor, d: &Tensor, pose: &Tensor, cam: &Camera) -> Result<RenderOutput> {
    cam.check_plane(j, 3, "reproject")?;
    let (colour, mut out) = splat(j, d, pose, cam)?;
    let background = out.covered.neg()?.add_scalar(1.0)?;
    out.image = colour.add(&background)?;
    Ok(out)
}

/// Shades and reprojects; with `flipped` the albedo and depth are mirrored
/// across the width axis first.
pub fn render(
    albedo: &Tensor,
    depth: &Tensor,
    light: &Tensor,
    pose: &Tensor,
    cam: &Camera,
    flipped: bool,
) -> Result<RenderOutput> {
    cam.check_plane(albedo, 3, "render")?;
    let (a, d) = if flipped {
        (albedo.flip_w()?, depth.flip_w()?)
    } else {
        (albedo.clone(), depth.clone())
    };
    let n = depth_to_normals(&d, cam)?;
    let j = shade(&a, &n, light)?;
    reproject(&j, &d, pose, cam)
}
