//! Video sequences: synthetic generation, disk layout, flow encoding,
//! pseudo-video augmentation and the training sampler.

mod flow;
mod io;
mod pseudo;
mod sampler;
mod synthetic;

pub use flow::{flow_to_rgb, rgb_to_flow};
pub use io::{
    frame_file, list_sequences, load_dataset, load_sequence, read_mask, read_rgb, save_sequence, write_mask, write_rgb,
};
pub use pseudo::{image_to_pseudo_video, pseudo_video_with, Jitter};
pub use sampler::{Draw, JointSampler};
pub use synthetic::{generate_synthetic_sequence, Shape, SyntheticConfig};

use crate::encoder::STRIDE_MULTIPLE;
use crate::error::{Error, Result};
use crate::model::Window;
use crate::tensor::Tensor;

/// Frames, encoded flows and binary masks of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub name: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub frames: Vec<Tensor>,
    /// `[3, H, W]`, see [`flow_to_rgb`].
    pub flows: Vec<Tensor>,
    /// `[H, W]` with values in `{0, 1}`.
    pub masks: Vec<Tensor>,
    /// Scale the flows were encoded with.
    pub max_mag: f64,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(H, W)` of the first frame.
    pub fn size(&self) -> (usize, usize) {
        let s = self.frames[0].shape();
        (s[1], s[2])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if n == 0 {
            return Err(Error::validation(format!("sequence `{}` has no frames", self.name)));
        }
        if self.flows.len() != n || self.masks.len() != n {
            return Err(Error::validation(format!(
                "sequence `{}`: {} frames, {} flows, {} masks",
                self.name,
                n,
                self.flows.len(),
                self.masks.len()
            )));
        }
        if !(self.max_mag > 0.0 && self.max_mag.is_finite()) {
            return Err(Error::validation(format!(
                "sequence `{}`: max_mag must be positive, got {}",
                self.name, self.max_mag
            )));
        }
        let s = self.frames[0].shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::validation(format!(
                "sequence `{}`: frames must be [3,H,W], got {s:?}",
                self.name
            )));
        }
        let (h, w) = (s[1], s[2]);
        if h % STRIDE_MULTIPLE != 0 || w % STRIDE_MULTIPLE != 0 {
            return Err(Error::validation(format!(
                "sequence `{}`: resolution {h}x{w} is not divisible by {STRIDE_MULTIPLE}",
                self.name
            )));
        }
        for (k, t) in self.frames.iter().chain(&self.flows).enumerate() {
            if t.shape() != [3, h, w] {
                return Err(Error::validation(format!(
                    "sequence `{}`: tensor {k} has shape {:?}, expected [3, {h}, {w}]",
                    self.name,
                    t.shape()
                )));
            }
        }
        for (k, m) in self.masks.iter().enumerate() {
            if m.shape() != [h, w] {
                return Err(Error::validation(format!(
                    "sequence `{}`: mask {k} has shape {:?}, expected [{h}, {w}]",
                    self.name,
                    m.shape()
                )));
            }
            if !is_binary(m) {
                return Err(Error::validation(format!(
                    "sequence `{}`: mask {k} is not binary",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Frames and flows at `t−1, t, t+1` with indices clamped to the sequence.
    pub fn window(&self, t: usize) -> Window {
        let n = self.len();
        let idx = [t.saturating_sub(1), t.min(n - 1), (t + 1).min(n - 1)];
        let batch = |x: &Tensor| {
            let s = x.shape();
            x.reshape(&[1, s[0], s[1], s[2]]).expect("frame reshape")
        };
        Window {
            frames: idx.map(|i| batch(&self.frames[i])),
            flows: idx.map(|i| batch(&self.flows[i])),
        }
    }
}

pub fn is_binary(mask: &Tensor) -> bool {
    mask.data().iter().all(|&v| v == 0.0 || v == 1.0)
}

/// Bilinear resize of `[C, H, W]` with half-pixel centers and edge clamping.
/// Resizing to the same extent returns the input unchanged.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let src = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
    };
    let d = x.data();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let o = out.data_mut();
    for oy in 0..oh {
        let (y0, y1, fy) = src(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = src(ox, w, ow);
            for ch in 0..c {
                let base = ch * h * w;
                let top = d[base + y0 * w + x0] * (1.0 - fx) + d[base + y0 * w + x1] * fx;
                let bottom = d[base + y1 * w + x0] * (1.0 - fx) + d[base + y1 * w + x1] * fx;
                o[ch * oh * ow + oy * ow + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Nearest-neighbor resize of an `[H, W]` mask; stays binary.
pub fn resize_nearest(m: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w) = (m.shape()[0], m.shape()[1]);
    let pick = |o: usize, n_in: usize, n_out: usize| ((o * n_in * 2 + n_in) / (2 * n_out)).min(n_in - 1);
    Tensor::from_fn(&[oh, ow], |i| {
        let (oy, ox) = (i / ow, i % ow);
        m.data()[pick(oy, h, oh) * w + pick(ox, w, ow)]
    })
}
