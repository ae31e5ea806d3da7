use std::fs;
use std::path::Path;

use lap_core::io;
use lap_core::objectives::{face_fraction, mask_filter, DEFAULT_MIN_FACE_FRACTION};
use lap_core::render::{self, Camera, Light, Pose};
use lap_core::synth::*;
use lap_tensor::Tensor;

fn mirror_eq<T: PartialEq + std::fmt::Debug>(data: &[T], n: usize) {
    for v in 0..n {
        for u in 0..n {
            assert_eq!(data[v * n + u], data[v * n + n - 1 - u], "pixel ({u}, {v})");
        }
    }
}

#[test]
fn identities_are_deterministic() {
    let a = generate_identity(42, 32).unwrap();
    let b = generate_identity(42, 32).unwrap();
    let c = generate_identity(43, 32).unwrap();
    assert!(a.albedo.bit_eq(&b.albedo) && a.depth.bit_eq(&b.depth));
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.keypoints, b.keypoints);
    assert!(!a.depth.bit_eq(&c.depth));
}

#[test]
fn identities_are_width_symmetric_and_in_range() {
    for seed in 0..20 {
        let t = generate_identity(seed, 32).unwrap();
        let n = 32;
        mirror_eq(t.depth.data(), n);
        for c in 0..3 {
            mirror_eq(&t.albedo.data()[c * n * n..(c + 1) * n * n], n);
        }
        mirror_eq(&t.labels, n);
        assert!(t.depth.data().iter().all(|d| (0.9..=1.1).contains(d)));
        assert!(t.albedo.data().iter().all(|a| (0.0..=1.0).contains(a)));
        assert_eq!(t.keypoints.len(), 12);
    }
}

#[test]
fn feature_regions_sit_inside_the_face() {
    for seed in 0..50 {
        let n = 32;
        let t = generate_identity(seed, n).unwrap();
        for v in 0..n {
            for u in 0..n {
                if !t.labels[v * n + u].is_relaxed() {
                    continue;
                }
                assert!(u > 0 && v > 0 && u < n - 1 && v < n - 1);
                for (du, dv) in [(0, 1), (2, 1), (1, 0), (1, 2)] {
                    let l = t.labels[(v + dv - 1) * n + u + du - 1];
                    assert_ne!(l, Label::Background, "seed {seed} pixel ({u}, {v})");
                }
            }
        }
    }
}

#[test]
fn face_fraction_sweep_over_1000_seeds() {
    let (mut lo, mut hi) = (1.0f64, 0.0f64);
    for seed in 0..1000 {
        let t = generate_identity(seed, 32).unwrap();
        let f = face_fraction(&build_relaxed_mask(&t.labels, 32, 32, DEFAULT_RELAX_WEIGHT).unwrap());
        lo = lo.min(f);
        hi = hi.max(f);
    }
    assert!(lo >= 0.3 && hi <= 0.8, "face fraction range [{lo}, {hi}]");
}

#[test]
fn relaxed_mask_examples() {
    let bg = vec![Label::Background; 16];
    let m = build_relaxed_mask(&bg, 4, 4, 0.3).unwrap();
    assert!(m.data().iter().all(|&x| x == 0.0));
    assert!(!mask_filter(&m, DEFAULT_MIN_FACE_FRACTION));

    let mixed = [Label::Background, Label::Face, Label::Mouth, Label::Eye, Label::Brow, Label::Face];
    let m = build_relaxed_mask(&mixed, 2, 3, 1.0).unwrap();
    assert_eq!(m.data(), &[0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);

    let mut labels = vec![Label::Face; 900];
    labels.extend(vec![Label::Mouth; 100]);
    let m = build_relaxed_mask(&labels, 40, 25, 0.3).unwrap();
    let total: f64 = m.data().iter().sum();
    assert!((total - 930.0).abs() < 1e-9);

    assert!(build_relaxed_mask(&mixed, 2, 3, 1.5).is_err());
    assert!(build_relaxed_mask(&mixed, 3, 3, 0.3).is_err());
}

#[test]
fn view_count_is_bounded() {
    let t = generate_identity(1, 16).unwrap();
    assert!(render_collection(&t, 0, Tier::Easy, 0).is_err());
    assert!(render_collection(&t, 7, Tier::Easy, 0).is_err());
    assert_eq!(render_collection(&t, 6, Tier::Easy, 0).unwrap().len(), 6);
}

#[test]
fn easy_views_share_the_canonical_factors() {
    let t = generate_identity(5, 32).unwrap();
    let views = render_collection(&t, 6, Tier::Easy, 9).unwrap();
    for v in &views {
        assert!(v.albedo.bit_eq(&t.albedo) && v.depth.bit_eq(&t.depth));
        assert!(v.image.bit_eq(&v.clean));
        assert!(v.pose.yaw.abs() <= 45.0 && v.pose.pitch.abs() <= 15.0);
        assert!((0.3..=0.7).contains(&v.light.k_diff));
        assert!(!v.occluded);
    }
}

#[test]
fn wild_expression_changes_stay_local_and_small() {
    let n = 32;
    let t = generate_identity(8, n).unwrap();
    let support = t.expression_support();
    let nose = t.keypoints[10];
    let nose_px = nose[1].round() as usize * n + nose[0].round() as usize;
    assert!(!support[nose_px]);
    let views = render_collection(&t, 6, Tier::Wild, 3).unwrap();
    let mut moved = false;
    for v in &views {
        for (i, (&a, &b)) in v.depth.data().iter().zip(t.depth.data()).enumerate() {
            if support[i] {
                assert!((a - b).abs() <= MAX_EXPRESSION_DEPTH);
                moved |= a != b;
            } else {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        for c in 0..3 {
            for i in 0..n * n {
                if !support[i] {
                    assert_eq!(v.albedo.data()[c * n * n + i], t.albedo.data()[c * n * n + i]);
                }
            }
        }
    }
    assert!(moved);
}

#[test]
fn wild_occluders_zero_the_mask() {
    let t = generate_identity(2, 32).unwrap();
    let mut occluded = 0;
    for seed in 0..40 {
        for v in render_collection(&t, 6, Tier::Wild, seed).unwrap() {
            if v.occluded {
                occluded += 1;
            }
            assert!(v.image.data().iter().all(|x| (0.0..=1.0).contains(x)));
            assert!(v.mask.data().iter().all(|&m| m == 0.0 || m == 0.3 || m == 1.0));
        }
    }
    // 240 draws at p = 0.1.
    assert!((8..=45).contains(&occluded), "{occluded}");
}

#[test]
fn identity_view_matches_direct_shading() {
    let n = 32;
    let t = generate_identity(11, n).unwrap();
    let cam = Camera::square(n).unwrap();
    let light = render::lights_tensor(&[Light {
        k_amb: 0.3,
        k_diff: 0.6,
        lx: 0.0,
        ly: 0.0,
    }])
    .unwrap();
    let pose = render::poses_tensor(&[Pose::default()]).unwrap();
    let out = render::render(&t.albedo, &t.depth, &light, &pose, &cam, false).unwrap();
    let shaded = render::shade(&t.albedo, &render::depth_to_normals(&t.depth, &cam).unwrap(), &light).unwrap();
    for i in 0..n * n {
        if out.covered.data()[i] == 1.0 {
            for c in 0..3 {
                let k = c * n * n + i;
                assert!((out.image.data()[k] - shaded.data()[k]).abs() < 1e-6);
            }
        }
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn written_collections_are_consistent_and_reproducible() {
    let opts = SynthOptions {
        identities: 2,
        views: 3,
        tier: Tier::Wild,
        seed: 77,
        resolution: 16,
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let dirs = synthesize(a.path(), &opts).unwrap();
    synthesize(b.path(), &opts).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));

    let cam = Camera::square(16).unwrap();
    for dir in dirs {
        let m: CollectionManifest = read_json(&dir.join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.tier, Tier::Wild);
        assert_eq!(m.views.len(), 3);
        for f in [&m.canonical_albedo, &m.canonical_depth, &m.canonical_mask, &m.keypoints] {
            assert!(dir.join(f).is_file());
        }
        for v in &m.views {
            let factors = io::read_lapi(dir.join(&v.factors)).unwrap();
            let albedo = factors.narrow(1, 0, 3).unwrap();
            let depth = factors.narrow(1, 3, 1).unwrap();
            let clean = io::read_lapi(dir.join(&v.clean)).unwrap();
            let out = render::render(
                &albedo,
                &depth,
                &render::lights_tensor(&[v.light]).unwrap(),
                &render::poses_tensor(&[v.pose]).unwrap(),
                &cam,
                false,
            )
            .unwrap();
            assert!(out.image.max_abs_diff(&clean) < 1e-6);
            let mask = io::read_mask_png(dir.join(&v.mask)).unwrap();
            assert_eq!(mask.shape(), &[1, 1, 16, 16]);
            let img = io::read_png_rgb(dir.join(&v.image)).unwrap();
            assert_eq!(img.shape(), &[1, 3, 16, 16]);
            let d32 = io::read_lapd(dir.join(&v.depth)).unwrap();
            assert!(d32.max_abs_diff(&depth) < 1e-6);
        }
    }
}

#[test]
fn manifests_round_trip_exactly() {
    let t = generate_identity(4, 16).unwrap();
    let views = render_collection(&t, 2, Tier::Wild, 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = write_identity(dir.path(), "x", &t, &views, Tier::Wild).unwrap();
    let back: CollectionManifest = read_json(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(m, back);
    assert_eq!(back.views[1].pose, views[1].pose);
    let canon = io::read_lapd(dir.path().join("canonical.lapd")).unwrap();
    assert!(canon.max_abs_diff(&t.depth) < 1e-6);
    let _: Tensor = io::read_mask_png(dir.path().join("canonical_mask.png")).unwrap();
}
