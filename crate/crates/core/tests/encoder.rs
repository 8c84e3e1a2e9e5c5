#![allow(clippy::needless_range_loop)]

mod common;

use common::{rng, weighted_sum};
use vosalign::autodiff::gradcheck_sampled;
use vosalign::encoder::{Branch, EncoderParams, DEFAULT_WIDTHS, LEVELS};
use vosalign::params::{bind, leaves, rebind, Conv};
use vosalign::{Precision, Tape, Tensor};

fn encoder(seed: u64) -> EncoderParams<Tensor> {
    EncoderParams::init(&mut rng(seed), DEFAULT_WIDTHS)
}

#[test]
fn named_shapes_for_64x64() {
    let params = encoder(0);
    let mut tape = Tape::new(Precision::F64);
    let b = bind(&mut tape, &params);
    let img = tape.constant(Tensor::rand_uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut rng(1)));
    let pyr = b.extract_pyramid(&mut tape, img, Branch::Appearance).unwrap();
    let shapes = pyr.shapes(&tape);
    assert_eq!(shapes[0], vec![1, 16, 16, 16]);
    assert_eq!(shapes[1], vec![1, 32, 8, 8]);
    assert_eq!(shapes[2], vec![1, 64, 4, 4]);
    assert_eq!(shapes[3], vec![1, 128, 2, 2]);
}

#[test]
fn zero_image_and_bias_give_zero_features() {
    let params = encoder(0);
    let mut tape = Tape::new(Precision::F64);
    let b = bind(&mut tape, &params);
    let img = tape.constant(Tensor::zeros(&[1, 3, 32, 64]));
    let pyr = b.extract_pyramid(&mut tape, img, Branch::Motion).unwrap();
    for l in pyr.levels {
        assert!(tape.value(l).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn fusion_passthrough_recovers_appearance() {
    let mut params = encoder(2);
    for (l, &c) in DEFAULT_WIDTHS.iter().enumerate() {
        let mut conv = Conv::zeros(c, 2 * c, 1);
        for i in 0..c {
            conv.weight.set(&[i, i, 0, 0], 1.0);
        }
        params.fusion[l] = conv;
    }
    let mut tape = Tape::new(Precision::F64);
    let b = bind(&mut tape, &params);
    let img = tape.constant(Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng(3)));
    let f_i = b.extract_pyramid(&mut tape, img, Branch::Appearance).unwrap();
    let zeros: Vec<_> = f_i
        .levels
        .iter()
        .map(|&l| {
            let s = tape.shape(l).to_vec();
            tape.constant(Tensor::zeros(&s))
        })
        .collect();
    let f_o = vosalign::FeaturePyramid {
        levels: zeros.try_into().unwrap(),
    };
    let fused = b.fuse_appearance_motion(&mut tape, &f_i, &f_o).unwrap();
    for l in 0..LEVELS {
        assert_eq!(tape.value(fused.levels[l]), tape.value(f_i.levels[l]));
        assert_eq!(tape.shape(fused.levels[l])[1], DEFAULT_WIDTHS[l]);
    }
}

#[test]
fn fusion_rejects_mismatched_levels() {
    let params = encoder(0);
    let mut tape = Tape::new(Precision::F64);
    let b = bind(&mut tape, &params);
    let a = tape.constant(Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng(3)));
    let c = tape.constant(Tensor::rand_uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut rng(3)));
    let pa = b.extract_pyramid(&mut tape, a, Branch::Appearance).unwrap();
    let pc = b.extract_pyramid(&mut tape, c, Branch::Motion).unwrap();
    assert!(matches!(
        b.fuse_appearance_motion(&mut tape, &pa, &pc),
        Err(vosalign::Error::Dimension { axis: 2, .. })
    ));
}

#[test]
fn branches_are_independent() {
    let params = encoder(4);
    let mut r = rng(5);
    let img = Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut r);
    let flow = Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut r);
    let run = |a: &Tensor, o: &Tensor| {
        let mut tape = Tape::new(Precision::F64);
        let b = bind(&mut tape, &params);
        let av = tape.constant(a.clone());
        let ov = tape.constant(o.clone());
        let fused = b.encode_frame(&mut tape, av, ov).unwrap();
        tape.value(fused.levels[0]).clone()
    };
    assert_ne!(run(&img, &flow), run(&flow, &img));
}

#[test]
fn gradcheck_through_pyramid_and_fusion() {
    let params = encoder(6);
    let mut r = rng(7);
    let img = Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut r);
    let flow = Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut r);
    let mut inputs = vec![img, flow];
    inputs.extend(leaves(&params));
    let err = gradcheck_sampled(
        |tape, v| {
            let bound = rebind(&params, &v[2..]);
            let fused = bound.encode_frame(tape, v[0], v[1])?;
            weighted_sum(tape, &fused.levels, 99)
        },
        &inputs,
        1e-5,
        12,
        8,
    )
    .unwrap();
    assert!(err < 1e-4, "encoder gradcheck {err}");
}
