//! Randomized finite-difference sweep over every primitive.
//!
//! Each case draws a small random shape, inputs kept away from the
//! primitive's non-smooth points, and contracts the output with a fixed
//! random weighting so the scalar under test has non-uniform gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{finite_diff_check_with, GradCheckOptions};
use crate::tensor::Tensor;

type Build = fn(&mut ChaCha8Rng) -> Result<Case>;

pub struct Case {
    inputs: Vec<Tensor>,
    f: Box<dyn Fn(&[Tensor]) -> Result<Tensor>>,
}

#[derive(Clone, Debug)]
pub struct PrimitiveResult {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Magnitude in `[lo, hi]` with random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| {
                let m = rng.random_range(lo..hi);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
}

/// Distinct values spaced at least 0.1 apart, shuffled.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.2 + rng.random_range(0.0..0.1) - 1.0).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals)
}

/// Fractional pixel coordinates at least 0.05 from any cell boundary.
fn coords(rng: &mut ChaCha8Rng, shape: &[usize], extent: usize) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| rng.random_range(-1..extent as i64) as f64 + rng.random_range(0.05..0.95))
            .collect(),
    )
}

fn dims(rng: &mut ChaCha8Rng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=max)).collect()
}

fn image_dims(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(2..=5),
        rng.random_range(2..=5),
    ]
}

/// Wraps `op` into `sum(op(inputs) * r)` with a fixed random weighting `r`.
fn weighted(
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor>,
    op: impl Fn(&[Tensor]) -> Result<Tensor> + 'static,
) -> Result<Case> {
    let probe: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
    let out_shape = op(&probe)?.shape().to_vec();
    let r = uniform(rng, &out_shape, -1.0, 1.0)?;
    Ok(Case {
        inputs,
        f: Box::new(move |x| op(x)?.mul(&r)?.sum()),
    })
}

fn unary_case(
    rng: &mut ChaCha8Rng,
    gen: fn(&mut ChaCha8Rng, &[usize]) -> Result<Tensor>,
    op: fn(&Tensor) -> Result<Tensor>,
) -> Result<Case> {
    let rank = rng.random_range(1..=4);
    let shape = dims(rng, rank, 4);
    let x = gen(rng, &shape)?;
    weighted(rng, vec![x], move |t| op(&t[0]))
}

fn binary_case(
    rng: &mut ChaCha8Rng,
    op: fn(&Tensor, &Tensor) -> Result<Tensor>,
    denominator: bool,
) -> Result<Case> {
    let rank = rng.random_range(1..=4);
    let shape = dims(rng, rank, 4);
    // Squash a random subset of axes to 1 on one side to exercise broadcasting.
    let mut other = shape.clone();
    if rng.random_bool(0.5) {
        for d in other.iter_mut() {
            if rng.random_bool(0.5) {
                *d = 1;
            }
        }
    }
    let a = uniform(rng, &shape, -1.5, 1.5)?;
    let b = if denominator {
        away_from_zero(rng, &other, 0.5, 2.0)?
    } else {
        uniform(rng, &other, -1.5, 1.5)?
    };
    weighted(rng, vec![a, b], move |t| op(&t[0], &t[1]))
}

pub fn cases() -> Vec<(&'static str, Build)> {
    vec![
        ("add", |r| binary_case(r, Tensor::add, false)),
        ("sub", |r| binary_case(r, Tensor::sub, false)),
        ("mul", |r| binary_case(r, Tensor::mul, false)),
        ("div", |r| binary_case(r, Tensor::div, true)),
        ("neg", |r| unary_case(r, |r, s| uniform(r, s, -2.0, 2.0), Tensor::neg)),
        ("abs", |r| unary_case(r, |r, s| away_from_zero(r, s, 0.1, 2.0), Tensor::abs)),
        ("exp", |r| unary_case(r, |r, s| uniform(r, s, -2.0, 2.0), Tensor::exp)),
        ("ln", |r| unary_case(r, |r, s| uniform(r, s, 0.3, 3.0), Tensor::ln)),
        ("sqrt", |r| unary_case(r, |r, s| uniform(r, s, 0.3, 3.0), Tensor::sqrt)),
        ("tanh", |r| unary_case(r, |r, s| uniform(r, s, -2.0, 2.0), Tensor::tanh)),
        ("sigmoid", |r| unary_case(r, |r, s| uniform(r, s, -3.0, 3.0), Tensor::sigmoid)),
        ("softplus", |r| unary_case(r, |r, s| uniform(r, s, -3.0, 3.0), Tensor::softplus)),
        ("relu", |r| unary_case(r, |r, s| away_from_zero(r, s, 0.1, 2.0), Tensor::relu)),
        ("leaky_relu", |r| {
            unary_case(r, |r, s| away_from_zero(r, s, 0.1, 2.0), Tensor::leaky_relu)
        }),
        ("powf", |r| {
            let p = r.random_range(0.5..3.0);
            let shape = dims(r, 2, 4);
            let x = uniform(r, &shape, 0.3, 2.0)?;
            weighted(r, vec![x], move |t| t[0].powf(p))
        }),
        ("sin", |r| unary_case(r, |r, s| uniform(r, s, -3.0, 3.0), Tensor::sin)),
        ("cos", |r| unary_case(r, |r, s| uniform(r, s, -3.0, 3.0), Tensor::cos)),
        ("clamp", |r| {
            let shape = dims(r, 3, 4);
            let data = (0..shape.iter().product::<usize>())
                .map(|_| {
                    // Inside (-0.5, 0.5) or clearly outside, never near a bound.
                    match r.random_range(0..3) {
                        0 => r.random_range(-0.45..0.45),
                        1 => r.random_range(0.55..1.5),
                        _ => r.random_range(-1.5..-0.55),
                    }
                })
                .collect();
            let x = Tensor::new(shape, data)?;
            weighted(r, vec![x], |t| t[0].clamp(-0.5, 0.5))
        }),
        ("sum", |r| {
            let rank = r.random_range(1..=4);
            let shape = dims(r, rank, 4);
            let x = uniform(r, &shape, -1.0, 1.0)?;
            let c = r.random_range(0.5..2.0);
            Ok(Case {
                inputs: vec![x],
                f: Box::new(move |t| t[0].sum()?.scale(c)),
            })
        }),
        ("mean", |r| {
            let rank = r.random_range(1..=4);
            let shape = dims(r, rank, 4);
            let x = uniform(r, &shape, -1.0, 1.0)?;
            Ok(Case {
                inputs: vec![x],
                f: Box::new(|t| t[0].mean()?.tanh()),
            })
        }),
        ("max", |r| {
            let rank = r.random_range(1..=4);
            let shape = dims(r, rank, 4);
            let x = distinct(r, &shape)?;
            Ok(Case {
                inputs: vec![x],
                f: Box::new(|t| t[0].max()?.sin()),
            })
        }),
        ("sum_axis", |r| {
            let rank = r.random_range(1..=4);
            let axis = r.random_range(0..rank) as isize;
            let keep = r.random_bool(0.5);
            let shape = dims(r, rank, 4);
            let x = uniform(r, &shape, -1.0, 1.0)?;
            weighted(r, vec![x], move |t| t[0].sum_axis(axis, keep))
        }),
        ("mean_axis", |r| {
            let rank = r.random_range(1..=4);
            let axis = r.random_range(0..rank) as isize;
            let shape = dims(r, rank, 4);
            let x = uniform(r, &shape, -1.0, 1.0)?;
            weighted(r, vec![x], move |t| t[0].mean_axis(axis, true))
        }),
        ("max_axis", |r| {
            let rank = r.random_range(1..=4);
            let axis = r.random_range(0..rank) as isize;
            let shape = dims(r, rank, 4);
            let x = distinct(r, &shape)?;
            weighted(r, vec![x], move |t| t[0].max_axis(axis, false))
        }),
        ("softmax", |r| {
            let rank = r.random_range(1..=4);
            let axis = r.random_range(0..rank) as isize;
            let shape = dims(r, rank, 4);
            let x = uniform(r, &shape, -2.0, 2.0)?;
            weighted(r, vec![x], move |t| t[0].softmax(axis))
        }),
        ("matmul", |r| {
            let (m, k, n) = (r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=4));
            let a = uniform(r, &[m, k], -1.0, 1.0)?;
            let b = uniform(r, &[k, n], -1.0, 1.0)?;
            weighted(r, vec![a, b], |t| t[0].matmul(&t[1]))
        }),
        ("conv2d", |r| {
            let (b, cin, cout) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
            let k = [1, 3, 4][r.random_range(0..3)];
            let stride = r.random_range(1..=2);
            let pad = r.random_range(0..=1);
            let h = r.random_range(k.max(2)..=6);
            let w = r.random_range(k.max(2)..=6);
            let x = uniform(r, &[b, cin, h, w], -1.0, 1.0)?;
            let wt = uniform(r, &[cout, cin, k, k], -1.0, 1.0)?;
            let bias = uniform(r, &[cout], -1.0, 1.0)?;
            weighted(r, vec![x, wt, bias], move |t| {
                t[0].conv2d(&t[1], Some(&t[2]), stride, pad)
            })
        }),
        ("upsample_nearest", |r| {
            let f = r.random_range(1..=3);
            let shape = image_dims(r);
            let x = uniform(r, &shape, -1.0, 1.0)?;
            weighted(r, vec![x], move |t| t[0].upsample_nearest(f))
        }),
        ("upsample_bilinear", |r| {
            let f = r.random_range(1..=3);
            let shape = image_dims(r);
            let x = uniform(r, &shape, -1.0, 1.0)?;
            weighted(r, vec![x], move |t| t[0].upsample_bilinear(f))
        }),
        ("avg_pool2d", |r| {
            let k = r.random_range(1..=2);
            let mut shape = image_dims(r);
            shape[2] *= k;
            shape[3] *= k;
            let x = uniform(r, &shape, -1.0, 1.0)?;
            weighted(r, vec![x], move |t| t[0].avg_pool2d(k))
        }),
        ("global_avg_pool", |r| {
            let shape = image_dims(r);
            let x = uniform(r, &shape, -1.0, 1.0)?;
            weighted(r, vec![x], |t| t[0].global_avg_pool())
        }),
        ("concat", |r| {
            let rank = r.random_range(1..=4);
            let axis = r.random_range(0..rank);
            let a_shape = dims(r, rank, 3);
            let mut b_shape = a_shape.clone();
            b_shape[axis] = r.random_range(1..=3);
            let a = uniform(r, &a_shape, -1.0, 1.0)?;
            let b = uniform(r, &b_shape, -1.0, 1.0)?;
            weighted(r, vec![a, b], move |t| Tensor::concat(&[&t[0], &t[1]], axis as isize))
        }),
        ("flip_w", |r| {
            let rank = r.random_range(1..=4);
            let shape = dims(r, rank, 4);
            let x = uniform(r, &shape, -1.0, 1.0)?;
            weighted(r, vec![x], |t| t[0].flip_w())
        }),
        ("narrow", |r| {
            let rank = r.random_range(1..=4);
            let shape = dims(r, rank, 4);
            let axis = r.random_range(0..rank);
            let start = r.random_range(0..shape[axis]);
            let len = r.random_range(1..=shape[axis] - start);
            let x = uniform(r, &shape, -1.0, 1.0)?;
            weighted(r, vec![x], move |t| t[0].narrow(axis as isize, start, len))
        }),
        ("reshape", |r| {
            let shape = dims(r, 3, 3);
            let n: usize = shape.iter().product();
            let x = uniform(r, &shape, -1.0, 1.0)?;
            weighted(r, vec![x], move |t| t[0].reshape(&[n]))
        }),
        ("broadcast_to", |r| {
            let rank = r.random_range(1..=4);
            let target = dims(r, rank, 3);
            let src: Vec<usize> = target.iter().map(|&d| if r.random_bool(0.5) { 1 } else { d }).collect();
            let x = uniform(r, &src, -1.0, 1.0)?;
            weighted(r, vec![x], move |t| t[0].broadcast_to(&target))
        }),
        ("gather_bilinear", |r| {
            let shape = image_dims(r);
            let n = r.random_range(1..=6);
            let img = uniform(r, &shape, -1.0, 1.0)?;
            let u = coords(r, &[shape[0], n], shape[3])?;
            let v = coords(r, &[shape[0], n], shape[2])?;
            weighted(r, vec![img, u, v], |t| t[0].gather_bilinear(&t[1], &t[2]))
        }),
        ("scatter_bilinear", |r| {
            let (b, c, h, w) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(2..=5), r.random_range(2..=5));
            let n = r.random_range(1..=6);
            let vals = uniform(r, &[b, c, n], -1.0, 1.0)?;
            let u = coords(r, &[b, n], w)?;
            let v = coords(r, &[b, n], h)?;
            weighted(r, vec![vals, u, v], move |t| t[0].scatter_bilinear(&t[1], &t[2], h, w))
        }),
    ]
}

/// Runs `trials` random cases for every primitive, returning the worst
/// relative error seen for each.
pub fn run_primitive_suite(seed: u64, trials: usize, step: f64) -> Result<Vec<PrimitiveResult>> {
    let opts = GradCheckOptions {
        step,
        max_probes: None,
    };
    cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, build))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64 + 1) << 32));
            let mut worst = 0.0f64;
            for _ in 0..trials {
                let case = build(&mut rng)?;
                let report = finite_diff_check_with(&case.f, &case.inputs, &opts)?;
                worst = worst.max(report.worst());
            }
            Ok(PrimitiveResult {
                name,
                trials,
                max_rel_error: worst,
            })
        })
        .collect()
}
