use std::f64::consts::LN_2;
use std::fs;
use std::path::Path;
use std::process::Command;

use lap_core::config::TrainConfig;
use lap_core::data::load_dataset;
use lap_core::eval::*;
use lap_core::infer::{load_checkpoint, load_inputs, reconstruct, write_bundle, FACTORS_FILE};
use lap_core::synth::{synthesize, SynthOptions, Tier};
use lap_core::train::{checkpoint_path, train_stage, Stage};
use lap_core::Error;
use lap_tensor::Tensor;
use proptest::prelude::*;

fn plane(h: usize, w: usize, v: Vec<f64>) -> Tensor {
    Tensor::new([1, 1, h, w], v).unwrap()
}

/// Unit normal map holding `n` at every pixel.
fn normals(n: [f64; 3], h: usize, w: usize) -> Tensor {
    let mut d = Vec::with_capacity(3 * h * w);
    for c in n {
        d.extend(std::iter::repeat_n(c, h * w));
    }
    Tensor::new([1, 3, h, w], d).unwrap()
}

fn rotate(v: [f64; 3], axis: [f64; 3], deg: f64) -> [f64; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    let dot: f64 = (0..3).map(|i| v[i] * axis[i]).sum();
    let cross = [
        axis[1] * v[2] - axis[2] * v[1],
        axis[2] * v[0] - axis[0] * v[2],
        axis[0] * v[1] - axis[1] * v[0],
    ];
    std::array::from_fn(|i| v[i] * c + cross[i] * s + axis[i] * dot * (1.0 - c))
}

#[test]
fn side_examples() {
    let d = plane(2, 2, vec![1.0, 1.2, 0.9, 1.05]);
    assert_eq!(side(&d, &d, None).unwrap(), 0.0);
    assert!(side(&d.scale(2.0).unwrap(), &d, None).unwrap() < 1e-12);
    let two = side(&plane(1, 2, vec![1.0, 2.0]), &plane(1, 2, vec![1.0, 1.0]), None).unwrap();
    assert!((two - LN_2 / 2.0).abs() < 1e-12);
    assert!((two - 0.346574).abs() < 1e-6);
    let mask = plane(2, 2, vec![0.0, 1.0, 0.3, 0.0]);
    let other = plane(2, 2, vec![5.0, 1.2, 0.9, 7.0]);
    assert_eq!(side(&other, &d, Some(&mask)).unwrap(), 0.0);
    assert!(matches!(side(&d, &d, Some(&plane(2, 2, vec![0.0; 4]))), Err(Error::EmptyDomain(_))));
    assert!(matches!(side(&plane(1, 2, vec![1.0, -1.0]), &d.narrow(2, 0, 1).unwrap(), None), Err(Error::Degenerate(_))));
}

#[test]
fn mad_examples() {
    let n = normals([0.0, 0.0, 1.0], 3, 3);
    assert_eq!(mad(&n, &n, None).unwrap(), 0.0);
    let side_on = normals([1.0, 0.0, 0.0], 3, 3);
    assert!((mad(&side_on, &n, None).unwrap() - 90.0).abs() < 1e-12);
    // Tilt an oblique normal 30 degrees about an axis perpendicular to it.
    let len = (0.2f64 * 0.2 + 0.3 * 0.3 + 1.0).sqrt();
    let base = [0.2 / len, -0.3 / len, 1.0 / len];
    let axis = {
        let a = [base[1], -base[0], 0.0];
        let l = (a[0] * a[0] + a[1] * a[1]).sqrt();
        [a[0] / l, a[1] / l, 0.0]
    };
    let tilted = rotate(base, axis, 30.0);
    let got = mad(&normals(tilted, 4, 5), &normals(base, 4, 5), None).unwrap();
    assert!((got - 30.0).abs() < 1e-9, "{got}");
    assert!(matches!(mad(&n, &n, Some(&plane(3, 3, vec![0.0; 9]))), Err(Error::EmptyDomain(_))));
}

#[test]
fn pearson_examples() {
    // Means 2 and 7/3: cov = 3, var = 2 and 42/9, so r = 9 / sqrt(84).
    let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
    assert!((r - 900.0 / 84f64.sqrt()).abs() < 1e-9);
    assert!((r - 98.198).abs() < 1e-3);
    assert!(matches!(pearson(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::Degenerate(_))));
    assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Degenerate(_))));

    let d = plane(3, 4, (0..12).map(|i| 1.0 + 0.01 * ((i * 7) % 5) as f64).collect());
    let kp = [[0.0, 0.0], [1.2, 0.9], [3.0, 2.0], [2.0, 1.0], [9.0, 9.0]];
    let aff = d.scale(3.0).unwrap().add_scalar(0.5).unwrap();
    assert!((depth_corr(&aff, &d, &kp).unwrap() - 100.0).abs() < 1e-9);
    assert!((depth_corr(&d.neg().unwrap(), &d, &kp).unwrap() + 100.0).abs() < 1e-9);
    assert!(depth_corr(&d, &d, &[[0.0, 0.0], [9.0, 9.0], [1.0, 1.0]]).is_err());
}

#[test]
fn ssim_examples() {
    let zero = Tensor::zeros([1, 3, 12, 12]).unwrap();
    let one = Tensor::ones([1, 3, 12, 12]).unwrap();
    let c1 = 1e-4;
    assert!((ssim(&zero, &one, None).unwrap() - c1 / (1.0 + c1)).abs() < 1e-12);
    let x = Tensor::new([1, 1, 11, 11], (0..121).map(|i| ((i * 37) % 11) as f64 / 10.0).collect()).unwrap();
    assert!((ssim(&x, &x, None).unwrap() - 1.0).abs() < 1e-12);
    assert!(matches!(ssim(&x.narrow(2, 0, 10).unwrap(), &x.narrow(2, 0, 10).unwrap(), None), Err(Error::Contract(_))));
    let mut m = vec![0.0; 144];
    m[0] = 1.0;
    assert!(matches!(ssim(&zero, &one, Some(&plane(12, 12, m))), Err(Error::EmptyDomain(_))));
}

#[test]
fn median_alignment_matches_medians() {
    let gt = plane(1, 4, vec![1.0, 1.1, 1.2, 5.0]);
    let pred = plane(1, 4, vec![0.5, 0.6, 0.8, 0.9]);
    let a = align_median(&pred, &gt, None).unwrap();
    assert!((a.data()[1] + a.data()[2] - 2.3).abs() < 1e-12);
}

fn small_image(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let v = (0..c * h * w)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect();
    Tensor::new([1, c, h, w], v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn side_is_scale_invariant(seed in any::<u64>(), k in 0.1f64..10.0) {
        let d = small_image(seed, 1, 4, 5).add_scalar(0.5).unwrap();
        let g = small_image(seed.wrapping_add(1), 1, 4, 5).add_scalar(0.5).unwrap();
        let base = side(&d, &g, None).unwrap();
        prop_assert!((side(&d.scale(k).unwrap(), &g, None).unwrap() - base).abs() < 1e-12);
        prop_assert!((side(&d, &g.scale(k).unwrap(), None).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn mad_is_symmetric(seed in any::<u64>()) {
        let unit = |t: Tensor| {
            let len = t.mul(&t).unwrap().sum_axis(1, true).unwrap().sqrt().unwrap();
            t.div(&len.broadcast_to(&[1, 3, 3, 3]).unwrap()).unwrap()
        };
        let a = unit(small_image(seed, 3, 3, 3).add_scalar(-0.5).unwrap());
        let b = unit(small_image(seed.wrapping_add(9), 3, 3, 3).add_scalar(-0.5).unwrap());
        prop_assert!((mad(&a, &b, None).unwrap() - mad(&b, &a, None).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn depth_corr_is_symmetric_and_affine_invariant(seed in any::<u64>(), k in 0.1f64..10.0, c in -1.0f64..1.0) {
        let d = small_image(seed, 1, 4, 4);
        let g = small_image(seed.wrapping_add(3), 1, 4, 4);
        let kp = [[0.0, 0.0], [1.0, 2.0], [3.0, 3.0], [2.0, 1.0], [3.0, 0.0]];
        let r = depth_corr(&d, &g, &kp).unwrap();
        prop_assert!((depth_corr(&g, &d, &kp).unwrap() - r).abs() < 1e-9);
        let aff = d.scale(k).unwrap().add_scalar(c).unwrap();
        prop_assert!((depth_corr(&aff, &g, &kp).unwrap() - r).abs() < 1e-9);
    }

    #[test]
    fn ssim_is_symmetric_flip_invariant_and_one_on_itself(seed in any::<u64>()) {
        let x = small_image(seed, 3, 13, 14);
        let y = small_image(seed.wrapping_add(5), 3, 13, 14);
        let m = small_image(seed.wrapping_add(7), 1, 13, 14).add_scalar(-0.3).unwrap();
        prop_assert!((ssim(&x, &x, None).unwrap() - 1.0).abs() < 1e-12);
        let s = ssim(&x, &y, Some(&m));
        prop_assume!(s.is_ok());
        let s = s.unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((ssim(&y, &x, Some(&m)).unwrap() - s).abs() < 1e-12);
        let f = |t: &Tensor| t.flip_w().unwrap();
        prop_assert!((ssim(&f(&x), &f(&y), Some(&f(&m))).unwrap() - s).abs() < 1e-12);
    }
}

fn tiny_collection(dir: &Path) {
    synthesize(
        dir,
        &SynthOptions {
            identities: 2,
            views: 3,
            tier: Tier::Easy,
            seed: 7,
            resolution: 16,
        },
    )
    .unwrap();
}

fn copy_tree(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let p = e.unwrap().path();
        let dest = to.join(p.file_name().unwrap());
        if p.is_dir() {
            copy_tree(&p, &dest);
        } else {
            fs::copy(&p, &dest).unwrap();
        }
    }
}

#[test]
fn evaluating_ground_truth_against_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = tmp.path().join("gt");
    tiny_collection(&gt);
    let pred = tmp.path().join("pred");
    copy_tree(&gt, &pred);
    fs::remove_file(pred.join("id0001/canonical.lapd")).unwrap();
    let rep = evaluate_dirs(&pred, &gt, &Metric::ALL, Align::None).unwrap();
    assert_eq!(rep.missing, vec!["id0001/canonical".to_string()]);
    assert!(!rep.rows.is_empty());
    let agg = rep.aggregate();
    for (k, m) in rep.metrics.iter().enumerate() {
        let vals: Vec<f64> = rep.rows.iter().filter_map(|r| r.values[k]).collect();
        assert!(!vals.is_empty(), "{m:?} never evaluated");
        let (mean, _) = agg[k].unwrap();
        assert!((mean - vals.iter().sum::<f64>() / vals.len() as f64).abs() < 1e-12);
        let want = match m {
            Metric::Side | Metric::Mad => 0.0,
            Metric::Ssim => 1.0,
            Metric::Corr => 100.0,
        };
        assert!(vals.iter().all(|v| (v - want).abs() < 1e-9), "{m:?}: {vals:?}");
    }
    let csv = rep.to_csv();
    assert!(csv.starts_with("image,side_e-2,mad_deg,ssim,corr\n"));
    assert!(csv.contains("\nmean,") && csv.contains("\nstd,"));
    assert!(rep.masked_pixels > 0);
}

#[test]
fn parse_metrics_normalises_and_rejects() {
    assert_eq!(parse_metrics("ssim,side,ssim").unwrap(), vec![Metric::Side, Metric::Ssim]);
    assert!(parse_metrics("side,psnr").is_err());
    assert!(parse_metrics("").is_err());
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig::parse_str(
        "resolution = 16\nbase_channels = 4\ncode_dim = 16\nepochs_a = 1\nwild_epochs_a = 0\nepochs_b = 1\nbatch_size = 2\nval_fraction = 0.5\nlr = 0.001",
    )
    .unwrap()
}

#[test]
fn reconstruct_respects_stage_capabilities() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_collection(&data);
    let ids = load_dataset(&[data.clone()]).unwrap();
    let cfg = tiny_train_config();
    let runs = tmp.path().join("runs");
    train_stage(&cfg, &ids, Stage::A, None, &runs, &mut |_| {}).unwrap();
    let ck_a = checkpoint_path(&runs, Stage::A, 1);
    train_stage(&cfg, &ids, Stage::B, Some(&ck_a), &runs, &mut |_| {}).unwrap();
    let ck_b = checkpoint_path(&runs, Stage::B, 1);

    let a = load_checkpoint(&ck_a).unwrap();
    let images = load_inputs(&[data.join("id0000")]).unwrap();
    assert_eq!(images.dim(0), 3);
    assert!(matches!(reconstruct(&a, &images, 0, true), Err(Error::Capability(_))));
    assert!(matches!(reconstruct(&a, &images, 3, false), Err(Error::Contract(_))));
    let rec = reconstruct(&a, &images, 1, false).unwrap();
    assert!(rec.personal.is_none());

    // A set of copies of the target aggregates to the target alone.
    let target = images.narrow(0, 1, 1).unwrap();
    let alone = reconstruct(&a, &target, 0, false).unwrap();
    let copies = Tensor::concat(&[&target, &target, &target], 0).unwrap();
    let tripled = reconstruct(&a, &copies, 2, false).unwrap();
    assert!(alone.canonical_depth.max_abs_diff(&tripled.canonical_depth) < 1e-12);
    assert!(alone.render.image.max_abs_diff(&tripled.render.image) < 1e-12);

    let b = load_checkpoint(&ck_b).unwrap();
    let rec = reconstruct(&b, &images, 2, true).unwrap();
    let (ta, td) = rec.personal.as_ref().unwrap();
    assert!(ta.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(td.data().iter().all(|v| (0.9..=1.1).contains(v)));
    assert!(rec.sigmas.data().iter().all(|&s| s > 0.0));
    assert!(rec.render.image.data().iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
    let n = &rec.normals;
    let plane = 16 * 16;
    for i in 0..plane {
        let l: f64 = (0..3).map(|c| n.data()[c * plane + i].powi(2)).sum();
        assert!((l - 1.0).abs() < 1e-9);
    }
    let out = tmp.path().join("bundle");
    write_bundle(&out, &rec).unwrap();
    for f in ["canonical_albedo.png", "canonical_depth.lapd", "target_albedo.png", "target_depth.lapd", "normals.png", "sigma.lapi", "render.png", "render_flipped.png", FACTORS_FILE] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let missing = load_checkpoint(&tmp.path().join("nope.lapw")).err().unwrap();
    assert!(missing.is_io() && missing.to_string().contains("nope"));
}

fn lap(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_lap")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn cli_synth_is_reproducible_and_eval_of_truth_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let (d1, d2) = (tmp.path().join("d1"), tmp.path().join("d2"));
    for d in [&d1, &d2] {
        let (code, _, err) = lap(&["synth", "--identities", "2", "--views", "3", "--tier", "easy", "--seed", "7", "--resolution", "16", "--out", d.to_str().unwrap()]);
        assert_eq!(code, 0, "{err}");
    }
    let mut files = Vec::new();
    for e in fs::read_dir(d1.join("id0000")).unwrap() {
        files.push(e.unwrap().file_name());
    }
    assert!(!files.is_empty());
    for f in files {
        assert_eq!(fs::read(d1.join("id0000").join(&f)).unwrap(), fs::read(d2.join("id0000").join(&f)).unwrap());
    }
    let report = tmp.path().join("r.csv");
    let (code, table, err) = lap(&["eval", "--pred-dir", d2.to_str().unwrap(), "--gt-dir", d1.to_str().unwrap(), "--metrics", "side", "--report", report.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(table.contains("side_e-2"));
    let csv = fs::read_to_string(&report).unwrap();
    for line in csv.lines().skip(1).filter(|l| !l.starts_with("std")) {
        let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(v, 0.0, "{line}");
    }
}

#[test]
fn cli_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.png");
    assert_eq!(lap(&["fit", "--image", missing.to_str().unwrap(), "--out", "x"]).0, 2);
    assert_eq!(lap(&["gradcheck", "--suite", "nonsense"]).0, 1);
    assert_eq!(lap(&["frobnicate"]).0, 1);
    assert_eq!(lap(&["--help"]).0, 0);
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "learning_rate = 1\n").unwrap();
    let (code, _, err) = lap(&["train", "--stage", "A", "--data", tmp.path().to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("learning_rate"), "{err}");
    let (code, out, _) = lap(&["gradcheck", "--suite", "losses"]);
    assert_eq!(code, 0);
    assert!(out.contains("relaxed_consistency"));
}
