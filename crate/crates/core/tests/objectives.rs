use std::f64::consts::{LN_2, SQRT_2};

use lap_core::objectives::*;
use lap_core::render::RenderOutput;
use lap_core::Error;
use lap_tensor::{finite_diff_check, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN_SQRT2: f64 = LN_2 / 2.0;

/// Prediction/target pair whose channel-mean residual equals `e` exactly.
fn pair_with_residual(e: &[f64]) -> (Tensor, Tensor) {
    let n = e.len();
    let target = Tensor::full([1, 3, 1, n], 0.25).unwrap();
    let mut pred = Vec::with_capacity(3 * n);
    for _ in 0..3 {
        pred.extend(e.iter().map(|x| 0.25 + x));
    }
    (Tensor::new([1, 3, 1, n], pred).unwrap(), target)
}

fn plane(v: &[f64]) -> Tensor {
    Tensor::new([1, 1, 1, v.len()], v.to_vec()).unwrap()
}

fn render_of(image: &Tensor) -> RenderOutput {
    let s = image.shape();
    RenderOutput {
        image: image.clone(),
        coverage: Tensor::ones([s[0], 1, s[2], s[3]]).unwrap(),
        depth: Tensor::ones([s[0], 1, s[2], s[3]]).unwrap(),
        covered: Tensor::ones([s[0], 1, s[2], s[3]]).unwrap(),
    }
}

#[test]
fn recon_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = Tensor::new([2, 3, 5, 4], (0..120).map(|_| rng.random::<f64>()).collect()).unwrap();
    let s = Tensor::full([2, 1, 5, 4], 1.0 / SQRT_2).unwrap();
    assert!(recon_nll(&img, &img, &s, None).unwrap().item().unwrap().abs() < 1e-12);
    let ones = Tensor::ones([2, 1, 5, 4]).unwrap();
    let v = recon_nll(&img, &img, &ones, None).unwrap().item().unwrap();
    assert!((v - LN_SQRT2).abs() < 1e-9);
    assert!((v - 0.346574).abs() < 1e-6);

    let (p, t) = pair_with_residual(&[1.0]);
    let v = recon_nll(&p, &t, &plane(&[1.0]), None).unwrap().item().unwrap();
    assert!((v - (LN_SQRT2 + SQRT_2)).abs() < 1e-9);
    assert!((v - 1.760788).abs() < 1e-6);
}

#[test]
fn relaxed_closed_forms() {
    let (p, t) = pair_with_residual(&[0.1, 0.4, 0.0, 0.7]);
    let s = plane(&[0.5, 1.0, 2.0, 0.3]);
    let full = relaxed_consistency(&p, &t, &s, &plane(&[1.0; 4])).unwrap().item().unwrap();
    let recon = recon_nll(&p, &t, &s, None).unwrap().item().unwrap();
    assert!((full - recon).abs() < 1e-12);

    let s0 = plane(&[1.0 / SQRT_2; 4]);
    let z = relaxed_consistency(&t, &t, &s0, &plane(&[1.0, 0.3, 0.0, 0.3])).unwrap();
    assert!(z.item().unwrap().abs() < 1e-12);

    // [ln sqrt2 + (ln sqrt2 + 0.3 sqrt2)] / 1.3, evaluated in closed form.
    let (p, t) = pair_with_residual(&[0.0, 1.0]);
    let v = relaxed_consistency(&p, &t, &plane(&[1.0, 1.0]), &plane(&[1.0, 0.3])).unwrap().item().unwrap();
    let expected = (2.0 * LN_SQRT2 + 0.3 * SQRT_2) / 1.3;
    assert!((v - expected).abs() < 1e-9);
    assert!((expected - 0.8595471).abs() < 1e-7);
}

#[test]
fn total_objective_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = Tensor::new([1, 3, 3, 3], (0..27).map(|_| rng.random::<f64>()).collect()).unwrap();
    let r = render_of(&img);
    let mask = Tensor::ones([1, 1, 3, 3]).unwrap();
    let s = Tensor::full([1, 2, 3, 3], 1.0 / SQRT_2).unwrap();
    for kind in [LossKind::Relaxed, LossKind::Recon] {
        let v = total_objective(kind, &r, &r, &img, &s, &mask, 0.5).unwrap().item().unwrap();
        assert!(v.abs() < 1e-12);
    }

    let other = render_of(&Tensor::full([1, 3, 3, 3], 0.5).unwrap());
    let s1 = Tensor::ones([1, 2, 3, 3]).unwrap();
    let no_flip = total_objective(LossKind::Relaxed, &r, &other, &img, &s1, &mask, 0.0).unwrap();
    let direct = relaxed_consistency(&img, &img, &Tensor::ones([1, 1, 3, 3]).unwrap(), &mask).unwrap();
    assert_eq!(no_flip.item().unwrap(), direct.item().unwrap());

    let v = total_objective(LossKind::Relaxed, &r, &r, &img, &s1, &mask, 0.5).unwrap().item().unwrap();
    assert!((v - 1.5 * LN_SQRT2).abs() < 1e-9);
    assert!((v - 0.519861).abs() < 1e-6);
}

#[test]
fn mask_filter_examples() {
    assert!(mask_filter(&Tensor::ones([1, 1, 8, 8]).unwrap(), DEFAULT_MIN_FACE_FRACTION));
    assert!(!mask_filter(&Tensor::zeros([1, 1, 8, 8]).unwrap(), DEFAULT_MIN_FACE_FRACTION));
    let mut m = vec![0.0; 4096];
    m[..200].fill(1.0);
    let m = Tensor::new([1, 1, 64, 64], m).unwrap();
    assert!((face_fraction(&m) - 200.0 / 4096.0).abs() < 1e-15);
    assert!(!mask_filter(&m, 0.10));
}

#[test]
fn empty_masks_are_rejected() {
    let (p, t) = pair_with_residual(&[0.1, 0.2]);
    let s = plane(&[1.0, 1.0]);
    let zero = plane(&[0.0, 0.0]);
    assert!(matches!(relaxed_consistency(&p, &t, &s, &zero), Err(Error::EmptyDomain(_))));
    assert!(matches!(recon_nll(&p, &t, &s, Some(&zero)), Err(Error::EmptyDomain(_))));
}

#[test]
fn sigma_descends_to_sqrt2_e() {
    let e = [0.1, 0.2, 0.3, 0.5];
    let (p, t) = pair_with_residual(&e);
    let mut sigma = plane(&[0.5; 4]);
    for _ in 0..3000 {
        let tape = Tape::new();
        let s = tape.leaf(&sigma);
        let loss = recon_nll(&p, &t, &s, None).unwrap();
        let g = tape.backward(&loss).unwrap().get(&s).unwrap();
        sigma = sigma.sub(&g.scale(0.05).unwrap()).unwrap();
    }
    for (s, e) in sigma.data().iter().zip(e) {
        assert!((s - SQRT_2 * e).abs() < 1e-3, "{s} vs {}", SQRT_2 * e);
    }
}

#[test]
fn relaxed_pixels_get_scaled_gradient() {
    let (p, t) = pair_with_residual(&[0.4, 0.4]);
    let tape = Tape::new();
    let pred = tape.leaf(&p);
    let loss = relaxed_consistency(&pred, &t, &plane(&[0.8, 0.8]), &plane(&[1.0, 0.3])).unwrap();
    let g = tape.backward(&loss).unwrap().get(&pred).unwrap();
    for c in 0..3 {
        let (full, relaxed) = (g.data()[2 * c], g.data()[2 * c + 1]);
        assert!(full != 0.0);
        assert!((relaxed - 0.3 * full).abs() < 1e-14);
    }
}

#[test]
fn masked_out_pixels_carry_no_sigma_gradient() {
    let (p, t) = pair_with_residual(&[0.4, 0.2, 0.3]);
    let tape = Tape::new();
    let s = tape.leaf(&plane(&[0.8, 0.5, 0.9]));
    let loss = relaxed_consistency(&p, &t, &s, &plane(&[1.0, 0.0, 0.3])).unwrap();
    let g = tape.backward(&loss).unwrap().get(&s).unwrap();
    assert_eq!(g.data()[1], 0.0);
    assert!(g.data()[0] != 0.0 && g.data()[2] != 0.0);
}

#[test]
fn losses_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let target = Tensor::new([2, 3, 3, 3], (0..54).map(|_| rng.random_range(0.2..0.8)).collect()).unwrap();
    // Residuals bounded away from the |.| kink.
    let pred = target
        .add(
            &Tensor::new(
                [2, 3, 3, 3],
                (0..54)
                    .map(|_| {
                        let m = rng.random_range(0.05..0.2);
                        if rng.random_bool(0.5) {
                            m
                        } else {
                            -m
                        }
                    })
                    .collect(),
            )
            .unwrap(),
        )
        .unwrap();
    let sigma = Tensor::new([2, 1, 3, 3], (0..18).map(|_| rng.random_range(0.3..1.5)).collect()).unwrap();
    let mask = Tensor::new([2, 1, 3, 3], (0..18).map(|i| [1.0, 0.3, 0.0][i % 3]).collect()).unwrap();
    let t = target.clone();
    let errs = finite_diff_check(|x| Ok(recon_nll(&x[0], &t, &x[1], None)?), &[pred.clone(), sigma.clone()], 1e-5).unwrap();
    assert!(errs.iter().all(|&e| e < 1e-5), "{errs:?}");
    let errs =
        finite_diff_check(|x| Ok(relaxed_consistency(&x[0], &t, &x[1], &mask)?), &[pred, sigma], 1e-5).unwrap();
    assert!(errs.iter().all(|&e| e < 1e-5), "{errs:?}");
}

proptest! {
    #[test]
    fn residual_increase_raises_recon(
        e in prop::collection::vec(0.0f64..0.9, 1..8),
        sigma in 0.05f64..3.0,
        pick in any::<prop::sample::Index>(),
        bump in 1e-6f64..0.1,
    ) {
        let k = pick.index(e.len());
        let s = plane(&vec![sigma; e.len()]);
        let (p0, t) = pair_with_residual(&e);
        let mut e1 = e.clone();
        e1[k] += bump;
        let (p1, _) = pair_with_residual(&e1);
        let l0 = recon_nll(&p0, &t, &s, None).unwrap().item().unwrap();
        let l1 = recon_nll(&p1, &t, &s, None).unwrap().item().unwrap();
        prop_assert!(l1 > l0);
    }
}
