use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::flow::flow_to_rgb;
use super::{is_binary, FrameSequence};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Similarity transform about the image center:
/// `p ↦ c + scale·(p − c) + (tx, ty)` in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Jitter {
    pub const IDENTITY: Jitter = Jitter {
        scale: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    /// Translation up to 5% of each extent, scale in `[0.95, 1.05]`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize) -> Self {
        Self {
            scale: rng.gen_range(0.95..=1.05),
            tx: rng.gen_range(-0.05..=0.05) * w as f64,
            ty: rng.gen_range(-0.05..=0.05) * h as f64,
        }
    }

    pub fn apply(&self, x: f64, y: f64, c: (f64, f64)) -> (f64, f64) {
        (
            c.0 + self.scale * (x - c.0) + self.tx,
            c.1 + self.scale * (y - c.1) + self.ty,
        )
    }

    pub fn invert(&self, x: f64, y: f64, c: (f64, f64)) -> (f64, f64) {
        (
            c.0 + (x - self.tx - c.0) / self.scale,
            c.1 + (y - self.ty - c.1) / self.scale,
        )
    }
}

fn center(h: usize, w: usize) -> (f64, f64) {
    ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
}

/// Three jittered copies of a still image with consistent masks and the
/// analytic displacement field between consecutive copies.
pub fn image_to_pseudo_video(image: &Tensor, mask: &Tensor, seed: u64) -> Result<FrameSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let jitters = [0; 3].map(|_| Jitter::sample(&mut rng, h, w));
    let mut seq = pseudo_video_with(image, mask, jitters)?;
    seq.name = format!("pseudo-{seed}");
    Ok(seq)
}

pub fn pseudo_video_with(image: &Tensor, mask: &Tensor, jitters: [Jitter; 3]) -> Result<FrameSequence> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if mask.shape() != [h, w] {
        return Err(Error::validation(format!(
            "mask shape {:?} does not match image {h}x{w}",
            mask.shape()
        )));
    }
    if !is_binary(mask) {
        return Err(Error::validation("pseudo-video mask is not binary"));
    }
    let c = center(h, w);
    let hw = h * w;
    let mut frames = Vec::with_capacity(3);
    let mut masks = Vec::with_capacity(3);
    for j in &jitters {
        let mut frame = Tensor::zeros(&[3, h, w]);
        let mut m = Tensor::zeros(&[h, w]);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = j.invert(x as f64, y as f64, c);
                let i = y * w + x;
                for ch in 0..3 {
                    frame.data_mut()[ch * hw + i] = sample_clamped(&image.data()[ch * hw..(ch + 1) * hw], h, w, sx, sy);
                }
                let nx = (sx.round().max(0.0) as usize).min(w - 1);
                let ny = (sy.round().max(0.0) as usize).min(h - 1);
                m.data_mut()[i] = mask.data()[ny * w + nx];
            }
        }
        frames.push(frame);
        masks.push(m);
    }

    let fields: Vec<(Tensor, Tensor)> = [(0, 1), (1, 2), (1, 2)]
        .iter()
        .map(|&(a, b)| displacement(&jitters[a], &jitters[b], h, w))
        .collect();
    let peak = fields
        .iter()
        .flat_map(|(dx, dy)| dx.data().iter().zip(dy.data()).map(|(x, y)| x.hypot(*y)))
        .fold(0.0f64, f64::max);
    let max_mag = peak.ceil().max(1.0);
    let flows = fields.iter().map(|(dx, dy)| flow_to_rgb(dx, dy, max_mag)).collect();
    Ok(FrameSequence {
        name: "pseudo".into(),
        frames,
        flows,
        masks,
        max_mag,
    })
}

/// `A_to(A_from⁻¹(p)) − p` at every pixel.
pub(crate) fn displacement(from: &Jitter, to: &Jitter, h: usize, w: usize) -> (Tensor, Tensor) {
    let c = center(h, w);
    let mut dx = Tensor::zeros(&[h, w]);
    let mut dy = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = from.invert(x as f64, y as f64, c);
            let (tx, ty) = to.apply(sx, sy, c);
            dx.data_mut()[y * w + x] = tx - x as f64;
            dy.data_mut()[y * w + x] = ty - y as f64;
        }
    }
    (dx, dy)
}

fn sample_clamped(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}
