//! Temporal alignment fusion.
//!
//! For each pyramid level, an adjacent frame's fused features are warped onto
//! the target frame by a modulated deformable 3×3 convolution whose per-tap
//! offsets and masks are predicted from both frames. The two aligned maps
//! (previous and next frame) are summed and passed through a 3×3 conv + relu.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::encoder::{FeaturePyramid, LEVELS};
use crate::error::{Error, Result};
use crate::params::{join, Conv, ParamTree};
use crate::tensor::Tensor;

/// Taps of the 3×3 deformable kernel.
pub const TAPS: usize = 9;

/// Regular-grid displacement `(dx, dy)` of tap `i` (row-major over the kernel).
pub fn tap_offset(i: usize) -> (f64, f64) {
    ((i % 3) as f64 - 1.0, (i / 3) as f64 - 1.0)
}

/// Learned residual displacements and modulation masks for one frame pair.
#[derive(Clone, Copy, Debug)]
pub struct OffsetField {
    /// `[N, 2·TAPS, H, W]`; channels `2i, 2i+1` are `(dx, dy)` of tap `i`.
    pub offsets: Var,
    /// `[N, TAPS, H, W]`, values in (0, 1).
    pub masks: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TafLevel<P> {
    /// 3×3 conv `2·C → 3·TAPS`, zero-initialized.
    pub offset: Conv<P>,
    /// Deformable kernel `C → C`, 3×3.
    pub deform: Conv<P>,
    /// 3×3 conv `C → C` applied after summing over the two neighbors.
    pub aggregate: Conv<P>,
}

impl<P> ParamTree<P> for TafLevel<P> {
    type Of<Q> = TafLevel<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> TafLevel<Q> {
        TafLevel {
            offset: self.offset.map_params(&join(prefix, "offset"), f),
            deform: self.deform.map_params(&join(prefix, "deform"), f),
            aggregate: self.aggregate.map_params(&join(prefix, "aggregate"), f),
        }
    }
}

impl TafLevel<Tensor> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, channels: usize) -> Self {
        Self {
            offset: Conv::zeros(3 * TAPS, 2 * channels, 3),
            deform: Conv::init(rng, channels, channels, 3),
            aggregate: Conv::init(rng, channels, channels, 3),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TafParams<P> {
    pub levels: Vec<TafLevel<P>>,
}

impl<P> ParamTree<P> for TafParams<P> {
    type Of<Q> = TafParams<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> TafParams<Q> {
        TafParams {
            levels: self.levels.map_params(&join(prefix, "levels"), f),
        }
    }
}

impl TafParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, widths: [usize; LEVELS]) -> Self {
        Self {
            levels: widths.iter().map(|&c| TafLevel::init(rng, c)).collect(),
        }
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != sb.len() {
        return Err(Error::Rank {
            op,
            expected: sa.len(),
            shape: sb.to_vec(),
        });
    }
    if let Some(axis) = sa.iter().zip(sb).position(|(x, y)| x != y) {
        return Err(Error::Dimension {
            op,
            axis,
            expected: sa[axis],
            got: sb[axis],
        });
    }
    Ok(())
}

/// Conv over `concat(f_adj, f_tgt)`; first `2·TAPS` channels are offsets,
/// the last `TAPS` go through a sigmoid to become masks.
pub fn predict_offsets_masks(tape: &mut Tape, f_adj: Var, f_tgt: Var, head: &Conv<Var>) -> Result<OffsetField> {
    same_shape(tape, "predict_offsets_masks", f_adj, f_tgt)?;
    let cat = tape.concat(&[f_adj, f_tgt], 1)?;
    let raw = head.apply(tape, cat, 1, 1)?;
    let channels = tape.shape(raw)[1];
    if channels != 3 * TAPS {
        return Err(Error::Dimension {
            op: "predict_offsets_masks",
            axis: 1,
            expected: 3 * TAPS,
            got: channels,
        });
    }
    let offsets = tape.narrow(raw, 1, 0, 2 * TAPS)?;
    let logits = tape.narrow(raw, 1, 2 * TAPS, TAPS)?;
    let masks = tape.sigmoid(logits);
    Ok(OffsetField { offsets, masks })
}

/// Sampling positions `p + g_i` for every tap and pixel, `[1, TAPS·H·W, 2]`.
fn base_grid(h: usize, w: usize) -> Tensor {
    let p = h * w;
    let mut data = Vec::with_capacity(TAPS * p * 2);
    for i in 0..TAPS {
        let (gx, gy) = tap_offset(i);
        for y in 0..h {
            for x in 0..w {
                data.push(x as f64 + gx);
                data.push(y as f64 + gy);
            }
        }
    }
    Tensor::new(&[1, TAPS * p, 2], data).expect("grid shape")
}

/// Modulated deformable 3×3 convolution:
/// `out(p) = b + Σ_i w_i · m_i(p) · f_adj(p + g_i + δp_i(p))`.
pub fn deformable_align(tape: &mut Tape, f_adj: Var, field: &OffsetField, kernel: &Conv<Var>) -> Result<Var> {
    let s = tape.shape(f_adj).to_vec();
    if s.len() != 4 {
        return Err(Error::Rank {
            op: "deformable_align",
            expected: 4,
            shape: s,
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let p = h * w;
    let expect_off = [n, 2 * TAPS, h, w];
    let expect_mask = [n, TAPS, h, w];
    for (var, expect) in [(field.offsets, &expect_off[..]), (field.masks, &expect_mask[..])] {
        let got = tape.shape(var);
        if let Some(axis) = (0..4).find(|&a| got.get(a) != expect.get(a)) {
            return Err(Error::Dimension {
                op: "deformable_align",
                axis,
                expected: expect[axis],
                got: got.get(axis).copied().unwrap_or(0),
            });
        }
    }
    let wshape = tape.shape(kernel.weight).to_vec();
    if wshape.len() != 4 || wshape[1] != c || wshape[2] != 3 || wshape[3] != 3 {
        return Err(Error::validation(format!(
            "deformable_align: kernel must be [Cout,{c},3,3], got {wshape:?}"
        )));
    }
    let cout = wshape[0];

    // Offsets [N,2T,H,W] -> [N,T,P,2], matching the base grid layout.
    let off = tape.reshape(field.offsets, &[n, TAPS, 2, p])?;
    let off = tape.permute(off, &[0, 1, 3, 2])?;
    let off = tape.reshape(off, &[n, TAPS * p, 2])?;
    let grid = tape.constant(base_grid(h, w));
    let points = tape.add(off, grid)?;

    let samples = tape.grid_sample_bilinear(f_adj, points)?;
    let samples = tape.reshape(samples, &[n, c, TAPS, p])?;
    let masks = tape.reshape(field.masks, &[n, 1, TAPS, p])?;
    let modulated = tape.mul(samples, masks)?;

    let wmat = tape.reshape(kernel.weight, &[cout, c * TAPS])?;
    let mut outs = Vec::with_capacity(n);
    for b in 0..n {
        let cols = tape.narrow(modulated, 0, b, 1)?;
        let cols = tape.reshape(cols, &[c * TAPS, p])?;
        let y = tape.matmul(wmat, cols)?;
        outs.push(tape.reshape(y, &[1, cout, h, w])?);
    }
    let y = if n == 1 { outs[0] } else { tape.concat(&outs, 0)? };
    let bias = tape.reshape(kernel.bias, &[1, cout, 1, 1])?;
    tape.add(y, bias)
}

/// `relu(conv3x3(a_prev + a_next [+ target]))`.
pub fn aggregate_aligned(
    tape: &mut Tape,
    a_prev: Var,
    a_next: Var,
    target: Option<Var>,
    conv: &Conv<Var>,
) -> Result<Var> {
    same_shape(tape, "aggregate_aligned", a_prev, a_next)?;
    let mut sum = tape.add(a_prev, a_next)?;
    if let Some(t) = target {
        same_shape(tape, "aggregate_aligned", a_prev, t)?;
        sum = tape.add(sum, t)?;
    }
    let y = conv.apply(tape, sum, 1, 1)?;
    Ok(tape.relu(y))
}

/// Align one adjacent frame's level features onto the target.
pub fn align_level(tape: &mut Tape, f_adj: Var, f_tgt: Var, level: &TafLevel<Var>) -> Result<Var> {
    let field = predict_offsets_masks(tape, f_adj, f_tgt, &level.offset)?;
    deformable_align(tape, f_adj, &field, &level.deform)
}

/// Temporal alignment at every level; `target_residual` also feeds the target
/// frame's own features into the aggregation conv.
pub fn taf_forward(
    tape: &mut Tape,
    prev: &FeaturePyramid,
    target: &FeaturePyramid,
    next: &FeaturePyramid,
    params: &TafParams<Var>,
    target_residual: bool,
) -> Result<FeaturePyramid> {
    if params.levels.len() != LEVELS {
        return Err(Error::validation(format!(
            "expected {LEVELS} alignment levels, got {}",
            params.levels.len()
        )));
    }
    let mut out = Vec::with_capacity(LEVELS);
    for (l, level) in params.levels.iter().enumerate() {
        let tgt = target.levels[l];
        same_shape(tape, "taf_forward", prev.levels[l], tgt)?;
        same_shape(tape, "taf_forward", next.levels[l], tgt)?;
        let a_prev = align_level(tape, prev.levels[l], tgt, level)?;
        let a_next = align_level(tape, next.levels[l], tgt, level)?;
        let residual = target_residual.then_some(tgt);
        out.push(aggregate_aligned(tape, a_prev, a_next, residual, &level.aggregate)?);
    }
    Ok(FeaturePyramid {
        levels: out.try_into().expect("four levels"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_grid_is_row_major() {
        assert_eq!(tap_offset(0), (-1.0, -1.0));
        assert_eq!(tap_offset(4), (0.0, 0.0));
        assert_eq!(tap_offset(5), (1.0, 0.0));
        assert_eq!(tap_offset(8), (1.0, 1.0));
    }

    #[test]
    fn base_grid_layout() {
        let g = base_grid(2, 3);
        assert_eq!(g.shape(), &[1, TAPS * 6, 2]);
        // tap 0, pixel (x=2, y=1) -> (1, 0)
        assert_eq!(g.at(&[0, 5, 0]), 1.0);
        assert_eq!(g.at(&[0, 5, 1]), 0.0);
        // tap 8, pixel (0,0) -> (1, 1)
        assert_eq!(g.at(&[0, 8 * 6, 0]), 1.0);
        assert_eq!(g.at(&[0, 8 * 6, 1]), 1.0);
    }
}
