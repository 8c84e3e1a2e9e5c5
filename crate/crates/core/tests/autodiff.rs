mod common;

use common::{conv2d_oracle, grid_sample_oracle, matmul_oracle, rng};
use proptest::prelude::*;
use vosalign::autodiff::{gradcheck, gradcheck_many};
use vosalign::{Error, Precision, Tape, Tensor};

fn f64_tape() -> Tape {
    Tape::new(Precision::F64)
}

#[test]
fn conv2d_sum_of_ones() {
    let mut t = f64_tape();
    let x = t.constant(Tensor::ones(&[1, 1, 3, 3]));
    let w = t.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = t.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 3, 3]);
    assert_eq!(t.value(y).at(&[0, 0, 1, 1]), 9.0);
    assert_eq!(t.value(y).at(&[0, 0, 0, 0]), 4.0);
}

#[test]
fn conv2d_identity_kernel() {
    let mut r = rng(1);
    let input = Tensor::rand_uniform(&[1, 1, 5, 4], -1.0, 1.0, &mut r);
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.set(&[0, 0, 1, 1], 1.0);
    let mut t = f64_tape();
    let x = t.constant(input.clone());
    let w = t.constant(k);
    let y = t.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(t.value(y), &input);
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut r = rng(2);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 3), (1, 2, 5), (2, 0, 1)] {
        let input = Tensor::rand_uniform(&[2, 2, 5, 5], -1.0, 1.0, &mut r);
        let weight = Tensor::rand_uniform(&[3, 2, k, k], -1.0, 1.0, &mut r);
        let bias = Tensor::rand_uniform(&[3], -1.0, 1.0, &mut r);
        let mut t = f64_tape();
        let x = t.constant(input.clone());
        let w = t.constant(weight.clone());
        let b = t.constant(bias.clone());
        let y = t.conv2d(x, w, Some(b), stride, pad).unwrap();
        let expect = conv2d_oracle(&input, &weight, Some(&bias), stride, pad);
        assert!(t.value(y).max_abs_diff(&expect) < 1e-12);
    }
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut t = f64_tape();
    let x = t.constant(Tensor::ones(&[1, 2, 4, 4]));
    let w = t.constant(Tensor::ones(&[1, 3, 3, 3]));
    match t.conv2d(x, w, None, 1, 1) {
        Err(Error::Dimension {
            axis, expected, got, ..
        }) => {
            assert_eq!((axis, expected, got), (1, 3, 2));
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn grid_sample_named_cases() {
    let input = Tensor::from_fn(&[1, 1, 4, 5], |i| i as f64 * 0.5 + 1.0);
    let mut t = f64_tape();
    let x = t.constant(input.clone());
    let pts = t.constant(Tensor::new(&[1, 3, 2], vec![2.0, 3.0, 0.5, 0.5, -10.0, -10.0]).unwrap());
    let y = t.grid_sample_bilinear(x, pts).unwrap();
    let v = t.value(y);
    assert_eq!(v.at(&[0, 0, 0]), input.at(&[0, 0, 3, 2]));
    let patch_mean =
        (input.at(&[0, 0, 0, 0]) + input.at(&[0, 0, 0, 1]) + input.at(&[0, 0, 1, 0]) + input.at(&[0, 0, 1, 1])) / 4.0;
    assert!((v.at(&[0, 0, 1]) - patch_mean).abs() < 1e-15);
    assert_eq!(v.at(&[0, 0, 2]), 0.0);
}

#[test]
fn grid_sample_matches_nested_loops() {
    let mut r = rng(3);
    for _ in 0..20 {
        let input = Tensor::rand_uniform(&[2, 3, 4, 6], -1.0, 1.0, &mut r);
        let pts = Tensor::rand_uniform(&[2, 7, 2], -2.0, 7.0, &mut r);
        let mut t = f64_tape();
        let x = t.constant(input.clone());
        let p = t.constant(pts.clone());
        let y = t.grid_sample_bilinear(x, p).unwrap();
        assert!(t.value(y).max_abs_diff(&grid_sample_oracle(&input, &pts)) < 1e-12);
    }
}

#[test]
fn elementwise_named_cases() {
    let mut t = f64_tape();
    let z = t.constant(Tensor::new(&[1, 3], vec![0.0, -1.0, 2.0]).unwrap());
    let s = t.sigmoid(z);
    assert_eq!(t.value(s).data()[0], 0.5);
    let r = t.relu(z);
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
    let a = t.constant(Tensor::ones(&[1, 2]));
    let b = t.constant(Tensor::ones(&[1, 3]));
    let c = t.concat(&[a, b], 1).unwrap();
    assert_eq!(t.shape(c), &[1, 5]);
    assert!(matches!(t.concat(&[a, b], 0), Err(Error::Dimension { axis: 1, .. })));
    assert!(t.add(a, b).is_err());
}

#[test]
fn matmul_named_cases() {
    let mut r = rng(4);
    let a = Tensor::rand_uniform(&[3, 3], -1.0, 1.0, &mut r);
    let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let mut t = f64_tape();
    let vi = t.constant(eye);
    let va = t.constant(a.clone());
    let y = t.matmul(vi, va).unwrap();
    assert_eq!(t.value(y), &a);

    let s1 = t.constant(Tensor::new(&[1, 1], vec![3.0]).unwrap());
    let s2 = t.constant(Tensor::new(&[1, 1], vec![-2.5]).unwrap());
    let y = t.matmul(s1, s2).unwrap();
    assert_eq!(t.value(y).item(), -7.5);

    let a = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r);
    let b = Tensor::rand_uniform(&[4, 2], -1.0, 1.0, &mut r);
    let va = t.constant(a.clone());
    let vb = t.constant(b.clone());
    let y = t.matmul(va, vb).unwrap();
    assert!(t.value(y).max_abs_diff(&matmul_oracle(&a, &b)) < 1e-12);
    assert!(matches!(t.matmul(vb, vb), Err(Error::Dimension { .. })));
}

#[test]
fn cross_entropy_named_cases() {
    let mut t = f64_tape();
    let logits = t.constant(Tensor::full(&[1, 2, 3, 3], 0.7));
    let target = Tensor::from_fn(&[1, 3, 3], |i| (i % 2) as f64);
    let l = t.softmax_cross_entropy(logits, &target).unwrap();
    assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

    // +20 toward the true class.
    let mut gap = Tensor::zeros(&[1, 2, 1, 2]);
    gap.set(&[0, 1, 0, 0], 20.0);
    gap.set(&[0, 0, 0, 1], 20.0);
    let target = Tensor::new(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
    let lg = t.constant(gap);
    let l = t.softmax_cross_entropy(lg, &target).unwrap();
    assert!(t.value(l).item() < 1e-8);

    let bad = Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(t.softmax_cross_entropy(lg, &bad), Err(Error::Validation(_))));
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut r = rng(5);
    let logits = Tensor::rand_uniform(&[1, 2, 2, 2], -3.0, 3.0, &mut r);
    let target = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let mut expect = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let l0 = logits.at(&[0, 0, i, j]);
            let l1 = logits.at(&[0, 1, i, j]);
            let lt = if target.at(&[0, i, j]) == 1.0 { l1 } else { l0 };
            expect += -(lt.exp() / (l0.exp() + l1.exp())).ln();
        }
    }
    expect /= 4.0;
    let mut t = f64_tape();
    let v = t.constant(logits);
    let l = t.softmax_cross_entropy(v, &target).unwrap();
    assert!((t.value(l).item() - expect).abs() < 1e-14);
}

#[test]
fn backward_named_cases() {
    let mut r = rng(6);
    let x0 = Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut r);
    let mut t = f64_tape();
    let x = t.param(x0.clone());
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), Tensor::ones(&[2, 3]));

    let mut t = f64_tape();
    let x = t.param(x0.clone());
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), x0.map(|v| 2.0 * v));

    // Second backward without reset is an error; reset allows it.
    assert!(matches!(t.backward(s), Err(Error::Usage(_))));
    t.reset_grads();
    t.backward(s).unwrap();

    let nonscalar = t.scale(x, 2.0);
    t.reset_grads();
    assert!(matches!(t.backward(nonscalar), Err(Error::Usage(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = f64_tape();
    let c = t.constant(Tensor::ones(&[2]));
    let p = t.param(Tensor::ones(&[2]));
    let y = t.mul(c, p).unwrap();
    let s = t.sum(y);
    t.backward(s).unwrap();
    assert!(t.grad(c).is_none());
    assert!(t.grad(p).is_some());
}

#[test]
fn gradcheck_linear_is_exact() {
    let mut r = rng(7);
    let x = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r);
    let w = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r);
    let err = gradcheck(
        |t, x| {
            let wv = t.constant(w.clone());
            let y = t.mul(x, wv)?;
            let y = t.scale(y, 0.5);
            Ok(t.sum(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn gradcheck_sigmoid_composite() {
    let mut r = rng(8);
    let x = Tensor::rand_uniform(&[2, 5], -2.0, 2.0, &mut r);
    let w = Tensor::rand_uniform(&[5, 3], -1.0, 1.0, &mut r);
    let err = gradcheck(
        |t, x| {
            let wv = t.constant(w.clone());
            let h = t.matmul(x, wv)?;
            let s = t.sigmoid(h);
            let sq = t.mul(s, s)?;
            Ok(t.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_relu_away_from_kink() {
    let mut r = rng(9);
    let x =
        Tensor::rand_uniform(&[4, 4], -1.0, 1.0, &mut r).map(|v| if v.abs() < 1e-3 { 1e-3_f64.copysign(v) } else { v });
    let err = gradcheck(
        |t, x| {
            let y = t.relu(x);
            let s = t.sigmoid(y);
            Ok(t.sum(s))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn injected_relu_fault_is_detected() {
    let x = Tensor::new(&[1, 4], vec![-0.5, 0.3, -0.2, 0.9]).unwrap();
    let mut t = f64_tape();
    t.inject_relu_fault();
    let v = t.param(x);
    let y = t.relu(v);
    let s = t.sum(y);
    t.backward(s).unwrap();
    assert_eq!(t.grad(v).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn gradcheck_every_op() {
    let mut r = rng(10);
    let x = Tensor::rand_uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut r);
    let w = Tensor::rand_uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut r);
    let b = Tensor::rand_uniform(&[3], -0.5, 0.5, &mut r);
    let err = gradcheck_many(
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            let s = t.sigmoid(y);
            Ok(t.sum(s))
        },
        &[x.clone(), w, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "conv2d {err}");

    let pts = Tensor::rand_uniform(&[1, 6, 2], -0.7, 4.7, &mut r);
    let err = gradcheck_many(
        |t, v| {
            let y = t.grid_sample_bilinear(v[0], v[1])?;
            let s = t.sigmoid(y);
            Ok(t.sum(s))
        },
        &[x.clone(), pts],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "grid_sample {err}");

    let a = Tensor::rand_uniform(&[2, 3, 1], -1.0, 1.0, &mut r);
    let c = Tensor::rand_uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
    let err = gradcheck_many(
        |t, v| {
            let p = t.mul(v[0], v[1])?;
            let q = t.add(p, v[0])?;
            let cat = t.concat(&[q, v[1]], 2)?;
            let perm = t.permute(cat, &[2, 0, 1])?;
            let nar = t.narrow(perm, 0, 1, 5)?;
            let flat = t.reshape(nar, &[10, 3])?;
            let g = t.gather_rows(flat, &[0, 3, 3, 9])?;
            let s = t.sigmoid(g);
            let sc = t.scale(s, 1.5);
            Ok(t.sum(sc))
        },
        &[a, c],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "layout ops {err}");

    let logits = Tensor::rand_uniform(&[1, 2, 3, 2], -2.0, 2.0, &mut r);
    let target = Tensor::from_fn(&[1, 3, 2], |i| ((i * 7) % 3 % 2) as f64);
    let err = gradcheck(|t, v| t.softmax_cross_entropy(v, &target), &logits, 1e-5).unwrap();
    assert!(err < 1e-4, "cross entropy {err}");
}

#[test]
fn f32_mode_rounds_outputs() {
    let mut t = Tape::new(Precision::F32);
    let x = t.constant(Tensor::scalar(0.1));
    assert_eq!(t.value(x).item(), 0.1f32 as f64);
    let y = t.scale(x, 3.0);
    assert_eq!(t.value(y).item(), (0.1f32 as f64 * 3.0) as f32 as f64);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_sample_stays_within_neighbor_range(
        x in -2.0f64..6.0, y in -2.0f64..5.0, seed in 0u64..1000
    ) {
        let mut r = rng(seed);
        let input = Tensor::rand_uniform(&[1, 1, 4, 5], -1.0, 1.0, &mut r);
        let mut t = f64_tape();
        let xv = t.constant(input.clone());
        let pv = t.constant(Tensor::new(&[1, 1, 2], vec![x, y]).unwrap());
        let out = t.grid_sample_bilinear(xv, pv).unwrap();
        let v = t.value(out).item();
        let (x0, y0) = (x.floor() as isize, y.floor() as isize);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let (cx, cy) = (x0 + dx, y0 + dy);
            let nv = if cx >= 0 && cy >= 0 && cx < 5 && cy < 4 {
                input.at(&[0, 0, cy as usize, cx as usize])
            } else {
                0.0
            };
            lo = lo.min(nv);
            hi = hi.max(nv);
        }
        prop_assert!(v >= lo - 1e-15 && v <= hi + 1e-15);
    }

    #[test]
    fn ops_are_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut r = rng(seed);
            let input = Tensor::rand_uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut r);
            let weight = Tensor::rand_uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut r);
            let mut t = Tape::new(Precision::F32);
            let x = t.param(input);
            let w = t.param(weight);
            let y = t.conv2d(x, w, None, 1, 1).unwrap();
            let s = t.sigmoid(y);
            let l = t.sum(s);
            t.backward(l).unwrap();
            (t.value(y).clone(), t.grad(w).unwrap())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn random_small_ops_pass_gradcheck(seed in 0u64..200, h in 2usize..6, w in 2usize..6) {
        let mut r = rng(seed);
        let x = Tensor::rand_uniform(&[1, 2, h, w], -1.0, 1.0, &mut r);
        let k = Tensor::rand_uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut r);
        let err = gradcheck_many(
            |t, v| {
                let y = t.conv2d(v[0], v[1], None, 1, 1)?;
                let s = t.sigmoid(y);
                Ok(t.sum(s))
            },
            &[x, k],
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-4);
    }
}

#[test]
fn gradient_suite_passes_and_detects_faults() {
    use vosalign::grad_suite::{run, Suite, TOLERANCE};
    let start = std::time::Instant::now();
    let reports = run(Suite::All, 0, false).unwrap();
    for r in &reports {
        assert!(r.passed(), "{} {}: {}", r.module, r.op, r.max_error);
    }
    assert!(reports.iter().any(|r| r.op == "deformable_align"));
    assert!(reports.iter().any(|r| r.op == "decode_continuous"));
    eprintln!("gradient suite: {} ops in {:?}", reports.len(), start.elapsed());
    let sad = run(Suite::Sad, 0, false).unwrap();
    assert!(sad.iter().all(|r| r.module == Suite::Sad));
    let broken = run(Suite::Tensor, 0, true).unwrap();
    let relu = broken.iter().find(|r| r.op == "relu").unwrap();
    assert!(relu.max_error >= TOLERANCE);
}
