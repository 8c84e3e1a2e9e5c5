//! Dual-branch strided CNN producing four-level feature pyramids for
//! appearance (RGB) and motion (encoded flow) inputs, plus their fusion.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{join, Conv, ParamTree};
use crate::tensor::Tensor;

pub const LEVELS: usize = 4;

/// Channel widths of the four pyramid levels.
pub const DEFAULT_WIDTHS: [usize; LEVELS] = [16, 32, 64, 128];

/// Input extents must be divisible by the coarsest stride.
pub const STRIDE_MULTIPLE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Appearance,
    Motion,
}

/// Four feature maps `[N, C_l, H/2^(l+1), W/2^(l+1)]`, finest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub levels: [Var; LEVELS],
}

impl FeaturePyramid {
    pub fn shapes(&self, tape: &Tape) -> [Vec<usize>; LEVELS] {
        self.levels.map(|v| tape.shape(v).to_vec())
    }
}

pub fn check_input_extent(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(STRIDE_MULTIPLE) || !w.is_multiple_of(STRIDE_MULTIPLE) {
        return Err(Error::validation(format!(
            "input size {h}x{w} must be a positive multiple of {STRIDE_MULTIPLE} in both axes"
        )));
    }
    Ok(())
}

/// One branch: a stride-2 stem followed by one stride-2 block per level.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams<P> {
    pub stem: Conv<P>,
    pub blocks: Vec<Conv<P>>,
}

impl<P> ParamTree<P> for BranchParams<P> {
    type Of<Q> = BranchParams<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> BranchParams<Q> {
        BranchParams {
            stem: self.stem.map_params(&join(prefix, "stem"), f),
            blocks: self.blocks.map_params(&join(prefix, "blocks"), f),
        }
    }
}

impl BranchParams<Tensor> {
    fn init<R: Rng + ?Sized>(rng: &mut R, widths: [usize; LEVELS]) -> Self {
        let stem = Conv::init(rng, widths[0], 3, 3);
        let mut blocks = Vec::with_capacity(LEVELS);
        let mut cin = widths[0];
        for &c in &widths {
            blocks.push(Conv::init(rng, c, cin, 3));
            cin = c;
        }
        Self { stem, blocks }
    }
}

impl BranchParams<Var> {
    /// Four-level pyramid of a `[N,3,H,W]` image.
    pub fn extract_pyramid(&self, tape: &mut Tape, image: Var) -> Result<FeaturePyramid> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::validation(format!(
                "encoder input must be [N,3,H,W], got {shape:?}"
            )));
        }
        check_input_extent(shape[2], shape[3])?;
        let x = self.stem.apply(tape, image, 2, 1)?;
        let mut x = tape.relu(x);
        let mut levels = Vec::with_capacity(LEVELS);
        for block in &self.blocks {
            let y = block.apply(tape, x, 2, 1)?;
            x = tape.relu(y);
            levels.push(x);
        }
        Ok(FeaturePyramid {
            levels: levels.try_into().expect("four levels"),
        })
    }
}

/// Both encoder branches and the per-level fusion convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<P> {
    pub appearance: BranchParams<P>,
    pub motion: BranchParams<P>,
    /// 1×1 convolutions `2·C_l → C_l`.
    pub fusion: Vec<Conv<P>>,
}

impl<P> ParamTree<P> for EncoderParams<P> {
    type Of<Q> = EncoderParams<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> EncoderParams<Q> {
        EncoderParams {
            appearance: self.appearance.map_params(&join(prefix, "appearance"), f),
            motion: self.motion.map_params(&join(prefix, "motion"), f),
            fusion: self.fusion.map_params(&join(prefix, "fusion"), f),
        }
    }
}

impl EncoderParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, widths: [usize; LEVELS]) -> Self {
        let appearance = BranchParams::init(rng, widths);
        let motion = BranchParams::init(rng, widths);
        let fusion = widths.iter().map(|&c| Conv::init(rng, c, 2 * c, 1)).collect();
        Self {
            appearance,
            motion,
            fusion,
        }
    }

    pub fn widths(&self) -> [usize; LEVELS] {
        std::array::from_fn(|l| self.fusion[l].out_channels())
    }
}

impl EncoderParams<Var> {
    pub fn extract_pyramid(&self, tape: &mut Tape, image: Var, branch: Branch) -> Result<FeaturePyramid> {
        match branch {
            Branch::Appearance => self.appearance.extract_pyramid(tape, image),
            Branch::Motion => self.motion.extract_pyramid(tape, image),
        }
    }

    /// Per level: channel concat, 1×1 conv back to `C_l`, relu.
    pub fn fuse_appearance_motion(
        &self,
        tape: &mut Tape,
        f_i: &FeaturePyramid,
        f_o: &FeaturePyramid,
    ) -> Result<FeaturePyramid> {
        let mut out = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let (a, b) = (f_i.levels[l], f_o.levels[l]);
            if tape.shape(a) != tape.shape(b) {
                let (sa, sb) = (tape.shape(a), tape.shape(b));
                let axis = sa.iter().zip(sb).position(|(x, y)| x != y).unwrap_or(0);
                return Err(Error::Dimension {
                    op: "fuse_appearance_motion",
                    axis,
                    expected: sa.get(axis).copied().unwrap_or(0),
                    got: sb.get(axis).copied().unwrap_or(0),
                });
            }
            let cat = tape.concat(&[a, b], 1)?;
            let y = self.fusion[l].apply(tape, cat, 1, 0)?;
            out.push(tape.relu(y));
        }
        Ok(FeaturePyramid {
            levels: out.try_into().expect("four levels"),
        })
    }

    /// Appearance and motion pyramids of one frame, fused.
    pub fn encode_frame(&self, tape: &mut Tape, image: Var, flow: Var) -> Result<FeaturePyramid> {
        let f_i = self.appearance.extract_pyramid(tape, image)?;
        let f_o = self.motion.extract_pyramid(tape, flow)?;
        self.fuse_appearance_motion(tape, &f_i, &f_o)
    }
}
