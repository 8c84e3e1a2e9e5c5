#![allow(clippy::needless_range_loop)]

mod common;

use common::{bilinear_oracle, rng, weighted_sum};
use vosalign::autodiff::{gradcheck_many, gradcheck_sampled};
use vosalign::encoder::{DEFAULT_WIDTHS, LEVELS};
use vosalign::params::{bind, leaves, rebind, Conv};
use vosalign::temporal_align::{
    aggregate_aligned, deformable_align, predict_offsets_masks, taf_forward, tap_offset, OffsetField, TafLevel,
    TafParams, TAPS,
};
use vosalign::{FeaturePyramid, Precision, Tape, Tensor, Var};

/// Per-position, per-tap modulated deformable convolution.
fn deform_oracle(f: &Tensor, off: &Tensor, mask: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let [n, c, h, wd] = [f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]];
    let cout = w.shape()[0];
    let mut out = Tensor::zeros(&[n, cout, h, wd]);
    for bi in 0..n {
        for co in 0..cout {
            for y in 0..h {
                for x in 0..wd {
                    let mut acc = b.data()[co];
                    for i in 0..TAPS {
                        let (gx, gy) = tap_offset(i);
                        let sx = x as f64 + gx + off.at(&[bi, 2 * i, y, x]);
                        let sy = y as f64 + gy + off.at(&[bi, 2 * i + 1, y, x]);
                        let m = mask.at(&[bi, i, y, x]);
                        for ci in 0..c {
                            let plane = |ix: isize, iy: isize| {
                                (ix >= 0 && iy >= 0 && (ix as usize) < wd && (iy as usize) < h)
                                    .then(|| f.at(&[bi, ci, iy as usize, ix as usize]))
                            };
                            acc += w.at(&[co, ci, i / 3, i % 3]) * m * bilinear_oracle(plane, sx, sy);
                        }
                    }
                    out.set(&[bi, co, y, x], acc);
                }
            }
        }
    }
    out
}

fn run_deform(f: &Tensor, off: &Tensor, mask: &Tensor, kernel: &Conv<Tensor>) -> Tensor {
    let mut tape = Tape::new(Precision::F64);
    let fv = tape.constant(f.clone());
    let field = OffsetField {
        offsets: tape.constant(off.clone()),
        masks: tape.constant(mask.clone()),
    };
    let k = bind(&mut tape, kernel);
    let y = deformable_align(&mut tape, fv, &field, &k).unwrap();
    tape.value(y).clone()
}

#[test]
fn zero_offsets_identity_tap_returns_input() {
    let mut r = rng(0);
    let f = Tensor::rand_uniform(&[1, 3, 5, 6], -1.0, 1.0, &mut r);
    let mut kernel = Conv::zeros(3, 3, 3);
    for c in 0..3 {
        kernel.weight.set(&[c, c, 1, 1], 1.0);
    }
    let out = run_deform(
        &f,
        &Tensor::zeros(&[1, 18, 5, 6]),
        &Tensor::ones(&[1, 9, 5, 6]),
        &kernel,
    );
    assert_eq!(out, f);
}

#[test]
fn zero_offsets_unit_masks_collapse_to_conv2d() {
    let mut r = rng(1);
    for case in 0..100 {
        let (c, h, w) = (1 + case % 3, 2 + case % 5, 3 + case % 4);
        let f = Tensor::rand_uniform(&[1, c, h, w], -1.0, 1.0, &mut r);
        let kernel = Conv {
            weight: Tensor::rand_uniform(&[2, c, 3, 3], -1.0, 1.0, &mut r),
            bias: Tensor::rand_uniform(&[2], -1.0, 1.0, &mut r),
        };
        let out = run_deform(
            &f,
            &Tensor::zeros(&[1, 18, h, w]),
            &Tensor::ones(&[1, 9, h, w]),
            &kernel,
        );
        let expect = common::conv2d_oracle(&f, &kernel.weight, Some(&kernel.bias), 1, 1);
        assert!(out.max_abs_diff(&expect) < 1e-10, "case {case}");

        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(f.clone());
        let k = bind(&mut tape, &kernel);
        let conv = k.apply(&mut tape, x, 1, 1).unwrap();
        assert!(out.max_abs_diff(tape.value(conv)) < 1e-10, "case {case}");
    }
}

#[test]
fn random_case_matches_nested_loop_oracle() {
    let mut r = rng(2);
    for _ in 0..5 {
        let f = Tensor::rand_uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut r);
        let off = Tensor::rand_uniform(&[1, 18, 5, 5], -2.5, 2.5, &mut r);
        let mask = Tensor::rand_uniform(&[1, 9, 5, 5], 0.0, 1.0, &mut r);
        let kernel = Conv {
            weight: Tensor::rand_uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut r),
            bias: Tensor::rand_uniform(&[2], -1.0, 1.0, &mut r),
        };
        let out = run_deform(&f, &off, &mask, &kernel);
        let expect = deform_oracle(&f, &off, &mask, &kernel.weight, &kernel.bias);
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }
    // Batched input.
    let f = Tensor::rand_uniform(&[2, 2, 4, 3], -1.0, 1.0, &mut r);
    let off = Tensor::rand_uniform(&[2, 18, 4, 3], -1.5, 1.5, &mut r);
    let mask = Tensor::rand_uniform(&[2, 9, 4, 3], 0.0, 1.0, &mut r);
    let kernel = Conv {
        weight: Tensor::rand_uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r),
        bias: Tensor::rand_uniform(&[3], -1.0, 1.0, &mut r),
    };
    let out = run_deform(&f, &off, &mask, &kernel);
    assert!(out.max_abs_diff(&deform_oracle(&f, &off, &mask, &kernel.weight, &kernel.bias)) < 1e-12);
}

#[test]
fn taps_displaced_outside_contribute_zero() {
    let mut r = rng(3);
    let f = Tensor::rand_uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut r);
    let off = Tensor::full(&[1, 18, 4, 4], -50.0);
    let kernel = Conv {
        weight: Tensor::rand_uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut r),
        bias: Tensor::zeros(&[2]),
    };
    let out = run_deform(&f, &off, &Tensor::ones(&[1, 9, 4, 4]), &kernel);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_initialized_head_gives_neutral_field() {
    let mut r = rng(4);
    let level = TafLevel::init(&mut r, 8);
    let mut tape = Tape::new(Precision::F64);
    let b = bind(&mut tape, &level);
    let a = tape.constant(Tensor::rand_uniform(&[1, 8, 4, 4], -1.0, 1.0, &mut r));
    let t = tape.constant(Tensor::rand_uniform(&[1, 8, 4, 4], -1.0, 1.0, &mut r));
    let field = predict_offsets_masks(&mut tape, a, t, &b.offset).unwrap();
    assert_eq!(tape.shape(field.offsets), &[1, 18, 4, 4]);
    assert_eq!(tape.shape(field.masks), &[1, 9, 4, 4]);
    assert!(tape.value(field.offsets).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(field.masks).data().iter().all(|&v| v == 0.5));
    let bad = tape.constant(Tensor::zeros(&[1, 8, 4, 5]));
    assert!(predict_offsets_masks(&mut tape, a, bad, &b.offset).is_err());
}

#[test]
fn aggregate_named_cases() {
    let mut r = rng(5);
    let conv = Conv {
        weight: Tensor::rand_uniform(&[4, 4, 3, 3], -1.0, 1.0, &mut r),
        bias: Tensor::zeros(&[4]),
    };
    let a = Tensor::rand_uniform(&[1, 4, 3, 5], -1.0, 1.0, &mut r);
    let b = Tensor::rand_uniform(&[1, 4, 3, 5], -1.0, 1.0, &mut r);
    let mut tape = Tape::new(Precision::F64);
    let k = bind(&mut tape, &conv);
    let av = tape.constant(a.clone());
    let neg = tape.constant(a.map(|v| -v));
    let bv = tape.constant(b);
    let zero = aggregate_aligned(&mut tape, av, neg, None, &k).unwrap();
    assert!(tape.value(zero).data().iter().all(|&v| v == 0.0));
    let ab = aggregate_aligned(&mut tape, av, bv, None, &k).unwrap();
    let ba = aggregate_aligned(&mut tape, bv, av, None, &k).unwrap();
    assert_eq!(tape.value(ab), tape.value(ba));
}

fn random_pyramid(tape: &mut Tape, r: &mut impl rand::Rng, size: usize) -> FeaturePyramid {
    let levels: Vec<Var> = (0..LEVELS)
        .map(|l| {
            let s = size >> (l + 2);
            tape.constant(Tensor::rand_uniform(&[1, DEFAULT_WIDTHS[l], s, s], 0.0, 1.0, r))
        })
        .collect();
    FeaturePyramid {
        levels: levels.try_into().unwrap(),
    }
}

#[test]
fn taf_preserves_level_shapes() {
    let mut r = rng(6);
    let params = TafParams::init(&mut r, DEFAULT_WIDTHS);
    let mut tape = Tape::new(Precision::F64);
    let b = bind(&mut tape, &params);
    let tgt = random_pyramid(&mut tape, &mut r, 64);
    let prev = random_pyramid(&mut tape, &mut r, 64);
    let next = random_pyramid(&mut tape, &mut r, 64);
    let out = taf_forward(&mut tape, &prev, &tgt, &next, &b, false).unwrap();
    assert_eq!(out.shapes(&tape), tgt.shapes(&tape));
    let same = taf_forward(&mut tape, &tgt, &tgt, &tgt, &b, true).unwrap();
    assert_eq!(same.shapes(&tape), tgt.shapes(&tape));
}

#[test]
fn gradcheck_offset_head() {
    let mut r = rng(7);
    let a = Tensor::rand_uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut r);
    let t = Tensor::rand_uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut r);
    let w = Tensor::rand_uniform(&[27, 4, 3, 3], -0.5, 0.5, &mut r);
    let err = gradcheck_many(
        |tape, v| {
            let head = Conv {
                weight: v[2],
                bias: v[3],
            };
            let field = predict_offsets_masks(tape, v[0], v[1], &head)?;
            weighted_sum(tape, &[field.offsets, field.masks], 11)
        },
        &[a, t, w, Tensor::rand_uniform(&[27], -0.5, 0.5, &mut r)],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_deformable_all_inputs() {
    let mut r = rng(8);
    let f = Tensor::rand_uniform(&[1, 2, 4, 5], -1.0, 1.0, &mut r);
    let off = Tensor::rand_uniform(&[1, 18, 4, 5], -1.7, 1.7, &mut r);
    let mask = Tensor::rand_uniform(&[1, 9, 4, 5], 0.05, 0.95, &mut r);
    let w = Tensor::rand_uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut r);
    let b = Tensor::rand_uniform(&[2], -1.0, 1.0, &mut r);
    let err = gradcheck_many(
        |tape, v| {
            let field = OffsetField {
                offsets: v[1],
                masks: v[2],
            };
            let y = deformable_align(
                tape,
                v[0],
                &field,
                &Conv {
                    weight: v[3],
                    bias: v[4],
                },
            )?;
            weighted_sum(tape, &[y], 12)
        },
        &[f, off, mask, w, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_aggregate() {
    let mut r = rng(9);
    let a = Tensor::rand_uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut r);
    let b = Tensor::rand_uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut r);
    let w = Tensor::rand_uniform(&[3, 3, 3, 3], -1.0, 1.0, &mut r);
    let bias = Tensor::rand_uniform(&[3], -1.0, 1.0, &mut r);
    let err = gradcheck_many(
        |tape, v| {
            let y = aggregate_aligned(
                tape,
                v[0],
                v[1],
                None,
                &Conv {
                    weight: v[2],
                    bias: v[3],
                },
            )?;
            weighted_sum(tape, &[y], 13)
        },
        &[a, b, w, bias],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_taf_end_to_end() {
    let mut r = rng(10);
    let mut params = TafParams::init(&mut r, DEFAULT_WIDTHS);
    // Exercise the offset path: a zero head would hold offsets at exactly 0.
    for level in &mut params.levels {
        let s = level.offset.weight.shape().to_vec();
        level.offset.weight = Tensor::rand_uniform(&s, -0.05, 0.05, &mut r);
    }
    let mut inputs = Vec::new();
    for _ in 0..3 {
        for l in 0..LEVELS {
            let s = 32 >> (l + 2);
            inputs.push(Tensor::rand_uniform(&[1, DEFAULT_WIDTHS[l], s, s], 0.0, 1.0, &mut r));
        }
    }
    let n_feat = inputs.len();
    inputs.extend(leaves(&params));
    let err = gradcheck_sampled(
        |tape, v| {
            let pyr = |k: usize| FeaturePyramid {
                levels: v[k * LEVELS..(k + 1) * LEVELS].try_into().unwrap(),
            };
            let b = rebind(&params, &v[n_feat..]);
            let out = taf_forward(tape, &pyr(0), &pyr(1), &pyr(2), &b, false)?;
            weighted_sum(tape, &out.levels, 14)
        },
        &inputs,
        1e-5,
        16,
        15,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}
