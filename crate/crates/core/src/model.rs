//! The full segmentation network: dual encoders, temporal alignment over a
//! three-frame window, and a continuous or bilinear decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::encoder::{check_input_extent, EncoderParams, FeaturePyramid, DEFAULT_WIDTHS, LEVELS};
use crate::error::{Error, Result};
use crate::params::{join, ParamTree};
use crate::scale_decoder::{self, BilinearHead, DecoderOptions, SadParams};
use crate::temporal_align::{taf_forward, TafParams};
use crate::tensor::Tensor;

/// Architecture switches; these determine the parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub widths: [usize; LEVELS],
    pub taf_enabled: bool,
    pub sad_enabled: bool,
    pub target_residual: bool,
    pub decoder: DecoderOptions,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: DEFAULT_WIDTHS,
            taf_enabled: true,
            sad_enabled: true,
            target_residual: false,
            decoder: DecoderOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Decoder<P> {
    Continuous(SadParams<P>),
    Bilinear(BilinearHead<P>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<P> {
    pub encoder: EncoderParams<P>,
    pub taf: Option<TafParams<P>>,
    pub decoder: Decoder<P>,
}

impl<P> ParamTree<P> for Model<P> {
    type Of<Q> = Model<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Model<Q> {
        Model {
            encoder: self.encoder.map_params(&join(prefix, "encoder"), f),
            taf: self.taf.as_ref().map(|t| t.map_params(&join(prefix, "taf"), f)),
            decoder: match &self.decoder {
                Decoder::Continuous(s) => Decoder::Continuous(s.map_params(&join(prefix, "sad"), f)),
                Decoder::Bilinear(b) => Decoder::Bilinear(b.map_params(&join(prefix, "bilinear"), f)),
            },
        }
    }
}

impl Model<Tensor> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(&mut rng, cfg.widths);
        let taf = cfg.taf_enabled.then(|| TafParams::init(&mut rng, cfg.widths));
        let decoder = if cfg.sad_enabled {
            Decoder::Continuous(SadParams::init(&mut rng, cfg.widths, cfg.decoder))
        } else {
            Decoder::Bilinear(BilinearHead::init(&mut rng, cfg.widths))
        };
        let mut model = Self { encoder, taf, decoder };
        model.round_f32();
        model
    }

    /// Round every parameter to `f32` so checkpoints store them exactly.
    pub fn round_f32(&mut self) {
        *self = self.map_params("", &mut |_, t| {
            let mut t = t.clone();
            t.round_f32();
            t
        });
    }
}

/// Frames and encoded flows at `t−1, t, t+1`, each `[1, 3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub frames: [Tensor; 3],
    pub flows: [Tensor; 3],
}

impl Window {
    pub fn size(&self) -> (usize, usize) {
        let s = self.frames[1].shape();
        (s[2], s[3])
    }

    fn validate(&self) -> Result<()> {
        let reference = self.frames[1].shape();
        if reference.len() != 4 || reference[0] != 1 || reference[1] != 3 {
            return Err(Error::validation(format!(
                "window tensors must be [1,3,H,W], got {reference:?}"
            )));
        }
        for t in self.frames.iter().chain(&self.flows) {
            if t.shape() != reference {
                return Err(Error::validation(format!(
                    "window resolution mismatch: {:?} vs {:?}",
                    t.shape(),
                    reference
                )));
            }
        }
        check_input_extent(reference[2], reference[3])
    }
}

/// Forward pass over one window; returns logits `[1, 2, out_h, out_w]`.
pub fn forward_segment(
    tape: &mut Tape,
    model: &Model<Var>,
    cfg: &ModelConfig,
    window: &Window,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    window.validate()?;
    let encode = |tape: &mut Tape, k: usize| -> Result<FeaturePyramid> {
        let img = tape.constant(window.frames[k].clone());
        let flow = tape.constant(window.flows[k].clone());
        model.encoder.encode_frame(tape, img, flow)
    };
    let target = encode(tape, 1)?;
    let aligned = match &model.taf {
        Some(taf) => {
            let prev = encode(tape, 0)?;
            let next = encode(tape, 2)?;
            taf_forward(tape, &prev, &target, &next, taf, cfg.target_residual)?
        }
        None => target,
    };
    match &model.decoder {
        Decoder::Continuous(sad) => scale_decoder::predict_mask(tape, &aligned, out_h, out_w, sad, cfg.decoder),
        Decoder::Bilinear(head) => head.predict_mask(tape, &aligned, out_h, out_w),
    }
}

/// Per-pixel class decision `[H, W]` in `{0, 1}` from `[1, 2, H, W]` logits.
/// Ties go to background.
pub fn argmax_mask(logits: &Tensor) -> Tensor {
    let s = logits.shape();
    let (h, w) = (s[2], s[3]);
    let hw = h * w;
    Tensor::from_fn(&[h, w], |i| {
        if logits.data()[hw + i] > logits.data()[i] {
            1.0
        } else {
            0.0
        }
    })
}
