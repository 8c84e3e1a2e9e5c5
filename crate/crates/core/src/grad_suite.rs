//! Finite-difference verification of every differentiable op, grouped by
//! the module that owns it.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradcheck_sampled, Tape, Var};
use crate::encoder::{EncoderParams, FeaturePyramid, LEVELS};
use crate::error::{Error, Result};
use crate::params::{leaves, rebind, Conv, Linear, ParamTree};
use crate::scale_decoder::{
    self, decode_continuous, mlp_input_width, nearest_feature, DecoderOptions, SadParams, CLASSES,
};
use crate::temporal_align::{
    aggregate_aligned, deformable_align, predict_offsets_masks, taf_forward, OffsetField, TafParams, TAPS,
};
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Element probes per input for tensors too large to check exhaustively.
const SAMPLES: usize = 160;

const TOY_WIDTHS: [usize; LEVELS] = [2, 2, 3, 3];
const TOY_HIDDEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    Tensor,
    Encoder,
    Taf,
    Sad,
}

impl Suite {
    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Suite::All),
            "tensor" => Ok(Suite::Tensor),
            "encoder" => Ok(Suite::Encoder),
            "taf" => Ok(Suite::Taf),
            "sad" => Ok(Suite::Sad),
            _ => Err(Error::validation(format!(
                "unknown gradcheck module `{s}` (expected all, tensor, encoder, taf or sad)"
            ))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::All => "all",
            Suite::Tensor => "tensor",
            Suite::Encoder => "encoder",
            Suite::Taf => "taf",
            Suite::Sad => "sad",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub module: Suite,
    pub op: &'static str,
    pub max_error: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE
    }
}

/// Random-weight scalar reduction so every output element gets a distinct
/// upstream gradient.
fn weighted_sum(tape: &mut Tape, vars: &[Var], seed: u64) -> Result<Var> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut total: Option<Var> = None;
    for &v in vars {
        let shape = tape.shape(v).to_vec();
        let w = tape.constant(Tensor::rand_uniform(&shape, -1.0, 1.0, &mut r));
        let p = tape.mul(v, w)?;
        let s = tape.sum(p);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| Error::Usage("weighted_sum of nothing".into()))
}

struct Runner {
    rng: ChaCha8Rng,
    seed: u64,
    fault: bool,
    out: Vec<OpReport>,
}

impl Runner {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::rand_uniform(shape, lo, hi, &mut self.rng)
    }

    fn check<F>(&mut self, module: Suite, op: &'static str, xs: Vec<Tensor>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let fault = self.fault;
        let head = self.rng.gen();
        let wrapped = |tape: &mut Tape, v: &[Var]| {
            if fault {
                tape.inject_relu_fault();
            }
            let y = f(tape, v)?;
            weighted_sum(tape, &[y], head)
        };
        let max_error = gradcheck_sampled(wrapped, &xs, EPS, SAMPLES, self.seed)?;
        self.out.push(OpReport { module, op, max_error });
        Ok(())
    }

    fn tensor_ops(&mut self) -> Result<()> {
        let m = Suite::Tensor;
        let (a, b) = (self.uniform(&[3, 4], -1.0, 1.0), self.uniform(&[3, 4], -1.0, 1.0));
        let (row, c, rhs) = (
            self.uniform(&[1, 4], -1.0, 1.0),
            self.uniform(&[3, 2], -1.0, 1.0),
            self.uniform(&[4, 5], -1.0, 1.0),
        );
        self.check(m, "add", vec![a.clone(), row], |t, v| t.add(v[0], v[1]))?;
        self.check(m, "mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]))?;
        self.check(m, "scale", vec![a.clone()], |t, v| Ok(t.scale(v[0], -1.7)))?;
        self.check(m, "relu", vec![a.clone()], |t, v| Ok(t.relu(v[0])))?;
        self.check(m, "sigmoid", vec![a.clone()], |t, v| Ok(t.sigmoid(v[0])))?;
        self.check(m, "concat", vec![a.clone(), c], |t, v| t.concat(&[v[0], v[1]], 1))?;
        self.check(m, "matmul", vec![a.clone(), rhs], |t, v| t.matmul(v[0], v[1]))?;
        let x = self.uniform(&[2, 3, 6, 5], -1.0, 1.0);
        let w = self.uniform(&[4, 3, 3, 3], -1.0, 1.0);
        let bias = self.uniform(&[4], -1.0, 1.0);
        self.check(m, "conv2d", vec![x.clone(), w.clone(), bias.clone()], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        })?;
        self.check(m, "conv2d_stride2", vec![x.clone(), w, bias], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 2, 1)
        })?;
        // Points straddle the border so zero padding is exercised.
        let pts = self.uniform(&[2, 7, 2], -1.3, 5.6);
        self.check(m, "grid_sample_bilinear", vec![x.clone(), pts], |t, v| {
            t.grid_sample_bilinear(v[0], v[1])
        })?;
        self.check(m, "reshape", vec![a.clone()], |t, v| t.reshape(v[0], &[2, 6]))?;
        self.check(m, "permute", vec![x.clone()], |t, v| t.permute(v[0], &[2, 0, 3, 1]))?;
        self.check(m, "transpose", vec![a.clone()], |t, v| t.transpose(v[0]))?;
        self.check(m, "narrow", vec![x], |t, v| t.narrow(v[0], 2, 1, 3))?;
        self.check(m, "gather_rows", vec![a.clone()], |t, v| {
            t.gather_rows(v[0], &[2, 0, 2, 1, 2])
        })?;
        self.check(m, "sum", vec![a], |t, v| Ok(t.sum(v[0])))?;
        let logits = self.uniform(&[2, 2, 3, 4], -2.0, 2.0);
        let target = Tensor::from_fn(&[2, 3, 4], |_| f64::from(self.rng.gen_range(0u8..2)));
        self.check(m, "softmax_cross_entropy", vec![logits], move |t, v| {
            t.softmax_cross_entropy(v[0], &target)
        })
    }

    /// Model parameters with random biases so no pre-activation sits exactly
    /// on a relu kink.
    fn perturbed<T: ParamTree<Tensor, Of<Tensor> = T>>(&mut self, params: &T) -> T {
        let rng = &mut self.rng;
        params.map_params("", &mut |name, t| {
            if name.ends_with("bias") {
                Tensor::rand_uniform(t.shape(), -0.2, 0.2, rng)
            } else {
                t.clone()
            }
        })
    }

    fn encoder_ops(&mut self) -> Result<()> {
        let m = Suite::Encoder;
        let init = EncoderParams::init(&mut self.rng, TOY_WIDTHS);
        let enc = self.perturbed(&init);
        let p = leaves(&enc);
        let img = self.uniform(&[1, 3, 32, 32], 0.0, 1.0);
        let flow = self.uniform(&[1, 3, 32, 32], 0.0, 1.0);

        let tpl = enc.appearance.clone();
        let branch = leaves(&tpl);
        let xs = [vec![img.clone()], branch.clone()].concat();
        self.check(m, "extract_pyramid", xs, move |t, v| {
            let b = rebind(&tpl, &v[1..]);
            let pyr = b.extract_pyramid(t, v[0])?;
            flatten(t, &pyr)
        })?;

        let shapes: Vec<Vec<usize>> = (0..LEVELS)
            .map(|l| vec![1, TOY_WIDTHS[l], 32 >> (l + 2), 32 >> (l + 2)])
            .collect();
        let mut xs: Vec<Tensor> = Vec::new();
        for s in shapes.iter().chain(&shapes) {
            xs.push(self.uniform(s, -1.0, 1.0));
        }
        let tpl = enc.clone();
        xs.extend(p.iter().cloned());
        self.check(m, "fuse_appearance_motion", xs, move |t, v| {
            let e = rebind(&tpl, &v[2 * LEVELS..]);
            let a = pyramid(&v[..LEVELS]);
            let b = pyramid(&v[LEVELS..2 * LEVELS]);
            let fused = e.fuse_appearance_motion(t, &a, &b)?;
            flatten(t, &fused)
        })?;

        let tpl = enc;
        let xs = [vec![img, flow], p].concat();
        self.check(m, "encode_frame", xs, move |t, v| {
            let e = rebind(&tpl, &v[2..]);
            let f = e.encode_frame(t, v[0], v[1])?;
            flatten(t, &f)
        })
    }

    fn taf_ops(&mut self) -> Result<()> {
        let m = Suite::Taf;
        let (c, h, w) = (2, 4, 5);
        let fa = self.uniform(&[1, c, h, w], -1.0, 1.0);
        let ft = self.uniform(&[1, c, h, w], -1.0, 1.0);
        let ow = self.uniform(&[3 * TAPS, 2 * c, 3, 3], -0.5, 0.5);
        let ob = self.uniform(&[3 * TAPS], -0.5, 0.5);
        self.check(
            m,
            "predict_offsets_masks",
            vec![fa.clone(), ft.clone(), ow, ob],
            |t, v| {
                let head = Conv {
                    weight: v[2],
                    bias: v[3],
                };
                let field = predict_offsets_masks(t, v[0], v[1], &head)?;
                let o = t.reshape(field.offsets, &[2 * TAPS * 20])?;
                let k = t.reshape(field.masks, &[TAPS * 20])?;
                t.concat(&[o, k], 0)
            },
        )?;

        let off = self.uniform(&[1, 2 * TAPS, h, w], -1.7, 1.7);
        let mask = self.uniform(&[1, TAPS, h, w], 0.05, 0.95);
        let dw = self.uniform(&[c, c, 3, 3], -1.0, 1.0);
        let db = self.uniform(&[c], -1.0, 1.0);
        self.check(
            m,
            "deformable_align",
            vec![fa.clone(), off, mask, dw.clone(), db.clone()],
            |t, v| {
                let field = OffsetField {
                    offsets: v[1],
                    masks: v[2],
                };
                deformable_align(
                    t,
                    v[0],
                    &field,
                    &Conv {
                        weight: v[3],
                        bias: v[4],
                    },
                )
            },
        )?;

        let tr = self.uniform(&[1, c, h, w], -1.0, 1.0);
        self.check(m, "aggregate_aligned", vec![fa, ft, tr, dw, db], |t, v| {
            aggregate_aligned(
                t,
                v[0],
                v[1],
                Some(v[2]),
                &Conv {
                    weight: v[3],
                    bias: v[4],
                },
            )
        })?;

        // Whole alignment stage over a toy pyramid, offset heads non-zero so
        // sampling leaves the integer grid.
        let mut taf = TafParams::init(&mut self.rng, TOY_WIDTHS);
        for level in &mut taf.levels {
            let s = level.offset.weight.shape().to_vec();
            level.offset.weight = self.uniform(&s, -0.05, 0.05);
        }
        let taf = self.perturbed(&taf);
        let mut xs = Vec::new();
        for _ in 0..3 {
            for (l, &c) in TOY_WIDTHS.iter().enumerate() {
                let e = 4 >> l.min(2);
                xs.push(self.uniform(&[1, c, e, e], -1.0, 1.0));
            }
        }
        xs.extend(leaves(&taf));
        self.check(m, "taf_forward", xs, move |t, v| {
            let p = rebind(&taf, &v[3 * LEVELS..]);
            let (prev, tgt, next) = (
                pyramid(&v[..LEVELS]),
                pyramid(&v[LEVELS..2 * LEVELS]),
                pyramid(&v[2 * LEVELS..3 * LEVELS]),
            );
            let out = taf_forward(t, &prev, &tgt, &next, &p, true)?;
            flatten(t, &out)
        })
    }

    fn sad_ops(&mut self) -> Result<()> {
        let m = Suite::Sad;
        let level = self.uniform(&[1, 3, 4, 6], -1.0, 1.0);
        let query = self.uniform(&[9, 2], -1.0, 1.0);
        let q = query.clone();
        self.check(m, "nearest_feature", vec![level], move |t, v| {
            Ok(nearest_feature(t, &q, v[0])?.0)
        })?;

        let opts = DecoderOptions {
            embed_freqs: 2,
            scale_relative: false,
        };
        // Narrow hidden layers keep the number of relu units, and with it the
        // chance of a probe straddling a kink, small.
        let input = mlp_input_width(TOY_WIDTHS, opts.embed_freqs);
        let sad = SadParams {
            layers: vec![
                Linear::init(&mut self.rng, input, TOY_HIDDEN),
                Linear::init(&mut self.rng, TOY_HIDDEN, TOY_HIDDEN),
                Linear::init(&mut self.rng, TOY_HIDDEN, CLASSES),
            ],
        };
        let sad = self.perturbed(&sad);
        let mut xs: Vec<Tensor> = (0..LEVELS)
            .map(|l| {
                let e = 8 >> l;
                self.uniform(&[1, TOY_WIDTHS[l], e, e], -1.0, 1.0)
            })
            .collect();
        xs.extend(leaves(&sad));
        let tpl = sad.clone();
        self.check(m, "decode_continuous", xs.clone(), move |t, v| {
            let p = rebind(&tpl, &v[LEVELS..]);
            decode_continuous(t, &query, &v[..LEVELS], &p, opts)
        })?;
        self.check(m, "predict_mask", xs, move |t, v| {
            let p = rebind(&sad, &v[LEVELS..]);
            scale_decoder::predict_mask(t, &pyramid(&v[..LEVELS]), 6, 5, &p, opts)
        })
    }
}

fn pyramid(v: &[Var]) -> FeaturePyramid {
    FeaturePyramid {
        levels: std::array::from_fn(|l| v[l]),
    }
}

fn flatten(t: &mut Tape, p: &FeaturePyramid) -> Result<Var> {
    let mut parts = Vec::with_capacity(LEVELS);
    for &l in &p.levels {
        let n = t.shape(l).iter().product();
        parts.push(t.reshape(l, &[n])?);
    }
    t.concat(&parts, 0)
}

/// Run the checks for `suite` in 64-bit with central differences. `fault`
/// breaks relu's backward rule, for testing that failures are reported.
pub fn run(suite: Suite, seed: u64, fault: bool) -> Result<Vec<OpReport>> {
    let mut r = Runner {
        rng: ChaCha8Rng::seed_from_u64(seed),
        seed,
        fault,
        out: Vec::new(),
    };
    if suite.includes(Suite::Tensor) {
        r.tensor_ops()?;
    }
    if suite.includes(Suite::Encoder) {
        r.encoder_ops()?;
    }
    if suite.includes(Suite::Taf) {
        r.taf_ops()?;
    }
    if suite.includes(Suite::Sad) {
        r.sad_ops()?;
    }
    Ok(r.out)
}
