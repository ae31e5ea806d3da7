use lap_tensor::{finite_diff_check, Tape, Tensor, TensorError};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn softmax_of_ln3_and_zero() {
    // exp(ln 3) = 3, exp(0) = 1, normalised by 4.
    let y = t(&[2], &[3f64.ln(), 0.0]).softmax(0).unwrap();
    assert!((y.data()[0] - 0.75).abs() < 1e-15);
    assert!((y.data()[1] - 0.25).abs() < 1e-15);
}

#[test]
fn flip_twice_is_identity() {
    let x = t(&[2, 1, 2, 3], &[0.1, -0.0, 3.5, f64::MIN_POSITIVE, 7.0, -1e300, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let once = x.flip_w().unwrap();
    assert_eq!(&once.data()[..3], &[3.5, -0.0, 0.1]);
    assert!(once.flip_w().unwrap().bit_eq(&x));
}

#[test]
fn unit_kernel_conv_scales_image() {
    let x = Tensor::ones([1, 1, 3, 3]).unwrap();
    let k = Tensor::full([1, 1, 1, 1], 2.0).unwrap();
    let y = x.conv2d(&k, None, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert!(y.data().iter().all(|&v| v == 2.0));
}

#[test]
fn conv_stride_two_with_padding_matches_direct_sum() {
    let x = t(&[1, 1, 4, 4], &(0..16).map(f64::from).collect::<Vec<_>>());
    let k = t(&[1, 1, 3, 3], &[1.0, 0.0, -1.0, 2.0, 0.0, -2.0, 1.0, 0.0, -1.0]);
    let y = x.conv2d(&k, Some(&t(&[1], &[0.5])), 2, 1).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    // Direct evaluation of the cross-correlation with zero padding.
    let px = |r: isize, c: isize| if (0..4).contains(&r) && (0..4).contains(&c) { (r * 4 + c) as f64 } else { 0.0 };
    for oy in 0..2 {
        for ox in 0..2 {
            let mut s = 0.5;
            for ky in 0..3 {
                for kx in 0..3 {
                    s += k.data()[ky * 3 + kx] * px(oy as isize * 2 + ky as isize - 1, ox as isize * 2 + kx as isize - 1);
                }
            }
            assert_eq!(y.data()[oy * 2 + ox], s);
        }
    }
}

#[test]
fn shape_mismatch_names_primitive_and_shapes() {
    let err = t(&[2, 3], &[0.0; 6]).add(&t(&[4], &[0.0; 4])).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, TensorError::Shape { .. }));
    assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
}

#[test]
fn log_and_sqrt_reject_negative_input() {
    let x = t(&[2], &[1.0, -1.0]);
    assert!(matches!(x.ln(), Err(TensorError::Domain { .. })));
    assert!(matches!(x.sqrt(), Err(TensorError::Domain { .. })));
}

#[test]
fn backward_of_sum_of_squares() {
    let tape = Tape::new();
    let x = tape.leaf(&t(&[2], &[1.0, -2.0]));
    let g = tape.backward(&x.mul(&x).unwrap().sum().unwrap()).unwrap();
    assert_eq!(g.get(&x).unwrap().data(), &[2.0, -4.0]);
}

#[test]
fn backward_of_mean_abs() {
    let tape = Tape::new();
    let x = tape.leaf(&t(&[1], &[3.0]));
    let g = tape.backward(&x.abs().unwrap().mean().unwrap()).unwrap();
    assert_eq!(g.get(&x).unwrap().data(), &[1.0]);
}

#[test]
fn backward_of_log_sigmoid_at_zero() {
    // d/dx ln(sigmoid(x)) = 1 - sigmoid(x) = 0.5 at 0.
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(0.0));
    let g = tape.backward(&x.sigmoid().unwrap().ln().unwrap()).unwrap();
    assert!((g.get(&x).unwrap().item().unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn subgradients_at_zero_are_zero() {
    let tape = Tape::new();
    let x = tape.leaf(&t(&[2], &[0.0, 0.0]));
    let loss = x.abs().unwrap().add(&x.relu().unwrap()).unwrap().sum().unwrap();
    assert_eq!(tape.backward(&loss).unwrap().get(&x).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn fan_out_accumulates_by_summation() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(3.0));
    let y = x.mul(&x).unwrap().add(&x.scale(5.0).unwrap()).unwrap().add(&x).unwrap();
    let g = tape.backward(&y).unwrap();
    assert_eq!(g.get(&x).unwrap().item().unwrap(), 2.0 * 3.0 + 5.0 + 1.0);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let tape = Tape::new();
    let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(&x), Err(TensorError::NotScalar(_))));
}

#[test]
fn detached_query_is_absent_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
    let g = tape.backward(&x.sum().unwrap()).unwrap();
    assert!(matches!(g.get(&x.detach()), Err(TensorError::AbsentGradient)));
}

#[test]
fn untracked_inputs_stay_off_tape() {
    let x = t(&[2], &[1.0, 2.0]);
    let y = x.exp().unwrap();
    assert!(!y.is_tracked() && y.node_id().is_none());
    let tape = Tape::new();
    let l = tape.leaf(&x);
    assert!(l.mul(&y).unwrap().is_tracked());
    assert_eq!(tape.len(), 2);
}

#[test]
fn gradcheck_tanh_is_tight() {
    let x = t(&[6], &[-0.93, -0.41, -0.02, 0.17, 0.66, 0.98]);
    let err = finite_diff_check(|v| v[0].tanh()?.sum(), &[x], 1e-4).unwrap();
    assert!(err[0] < 1e-6, "{err:?}");
}

#[test]
fn gradcheck_linear_is_exact() {
    let x = t(&[2, 3], &[0.5, -3.0, 8.0, 1e-3, 42.0, -7.5]);
    let err = finite_diff_check(|v| v[0].sum(), &[x], 1e-4).unwrap();
    assert!(err[0] < 1e-9, "{err:?}");
}

#[test]
fn gradcheck_abs_away_from_kink() {
    let x = t(&[5], &[-1.5, -0.11, 0.12, 0.7, 2.0]);
    let err = finite_diff_check(|v| v[0].abs()?.sum(), &[x], 1e-4).unwrap();
    assert!(err[0] < 1e-6, "{err:?}");
}

#[test]
fn gradcheck_rejects_step_out_of_range() {
    let x = Tensor::scalar(1.0);
    for step in [1e-7, 2e-3] {
        assert!(matches!(
            finite_diff_check(|v| v[0].sum(), &[x.clone()], step),
            Err(TensorError::Invalid { .. })
        ));
    }
}

#[test]
fn gradcheck_detects_nondeterminism() {
    use std::cell::Cell;
    let calls = Cell::new(0u32);
    let f = |v: &[Tensor]| {
        calls.set(calls.get() + 1);
        v[0].sum()?.add_scalar(calls.get() as f64)
    };
    let err = finite_diff_check(f, &[Tensor::scalar(1.0)], 1e-4).unwrap_err();
    assert!(matches!(err, TensorError::Verification(_)));
}
