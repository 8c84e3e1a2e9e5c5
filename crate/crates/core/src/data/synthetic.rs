use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::flow::flow_to_rgb;
use super::FrameSequence;
use crate::encoder::STRIDE_MULTIPLE;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Rectangle,
    Blob,
    /// Pick one of the above per object.
    Any,
}

impl std::str::FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disk" => Ok(Shape::Disk),
            "rectangle" => Ok(Shape::Rectangle),
            "blob" => Ok(Shape::Blob),
            "any" => Ok(Shape::Any),
            _ => Err(Error::validation(format!(
                "unknown shape `{s}` (expected disk, rectangle, blob or any)"
            ))),
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Shape::Disk => "disk",
            Shape::Rectangle => "rectangle",
            Shape::Blob => "blob",
            Shape::Any => "any",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    pub n_frames: usize,
    pub shape: Shape,
    /// Object speed range in px/frame; direction is uniform.
    pub speed: (f64, f64),
    /// Fixed direction of motion in radians (image axes); uniform if unset.
    pub heading: Option<f64>,
    /// Mixed into the per-sequence seed for the background texture.
    pub texture_seed: u64,
    /// Insert occlusion events: a static bar hides part of the object and
    /// the frame's flow is unavailable (all zero).
    pub occluders: bool,
    /// Static objects drawn from the same appearance distribution.
    pub distractors: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_frames: 12,
            shape: Shape::Any,
            speed: (1.0, 3.0),
            heading: None,
            texture_seed: 0,
            occluders: false,
            distractors: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % STRIDE_MULTIPLE != 0 {
                return Err(Error::validation(format!(
                    "{name} {v} must be a positive multiple of {STRIDE_MULTIPLE}"
                )));
            }
        }
        if self.n_frames < 3 {
            return Err(Error::validation(format!(
                "sequences need at least 3 frames, got {}",
                self.n_frames
            )));
        }
        let (lo, hi) = self.speed;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return Err(Error::validation(format!("invalid speed range ({lo}, {hi})")));
        }
        Ok(())
    }

    /// Flow encoding scale: per-frame displacements are rounded to whole
    /// pixels, which moves each component by at most one.
    pub fn max_mag(&self) -> f64 {
        self.speed.1 + std::f64::consts::SQRT_2
    }
}

#[derive(Clone, Debug)]
enum Outline {
    Disk { r: f64 },
    Rectangle { a: f64, b: f64 },
    Blob { r: f64, harmonics: Vec<(f64, f64, f64)> },
}

impl Outline {
    fn sample(rng: &mut ChaCha8Rng, shape: Shape, size: f64) -> Self {
        let kind = match shape {
            Shape::Any => [Shape::Disk, Shape::Rectangle, Shape::Blob][rng.gen_range(0..3)],
            s => s,
        };
        match kind {
            Shape::Disk => Outline::Disk {
                r: rng.gen_range(0.16..0.26) * size,
            },
            Shape::Rectangle => Outline::Rectangle {
                a: rng.gen_range(0.13..0.26) * size,
                b: rng.gen_range(0.13..0.26) * size,
            },
            _ => Outline::Blob {
                r: rng.gen_range(0.17..0.24) * size,
                harmonics: (2..4)
                    .map(|k| (k as f64, rng.gen_range(0.0..0.12), rng.gen_range(0.0..2.0 * PI)))
                    .collect(),
            },
        }
    }

    /// Half extents of the bounding box.
    fn extent(&self) -> (f64, f64) {
        match self {
            Outline::Disk { r } => (*r, *r),
            Outline::Rectangle { a, b } => (*a, *b),
            Outline::Blob { r, harmonics } => {
                let e = r * (1.0 + harmonics.iter().map(|h| h.1).sum::<f64>());
                (e, e)
            }
        }
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        match self {
            Outline::Disk { r } => u * u + v * v <= r * r,
            Outline::Rectangle { a, b } => u.abs() <= *a && v.abs() <= *b,
            Outline::Blob { r, harmonics } => {
                let theta = v.atan2(u);
                let radius = r
                    * (1.0
                        + harmonics
                            .iter()
                            .map(|&(k, a, p)| a * (k * theta + p).cos())
                            .sum::<f64>());
                u.hypot(v) <= radius
            }
        }
    }
}

/// Base color plus a stripe pattern in object-local coordinates.
#[derive(Clone, Debug)]
struct Texture {
    color: [f64; 3],
    freq: f64,
    dir: (f64, f64),
    phase: f64,
}

impl Texture {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let angle = rng.gen_range(0.0..PI);
        Self {
            color: [0; 3].map(|_| rng.gen_range(0.15..0.85)),
            freq: rng.gen_range(0.25..0.6),
            dir: (angle.cos(), angle.sin()),
            phase: rng.gen_range(0.0..2.0 * PI),
        }
    }

    fn at(&self, u: f64, v: f64, ch: usize) -> f64 {
        let s = (self.freq * (u * self.dir.0 + v * self.dir.1) + self.phase).sin();
        (self.color[ch] + 0.12 * s).clamp(0.0, 1.0)
    }
}

struct Sprite {
    outline: Outline,
    texture: Texture,
}

fn background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(&[3, h, w]);
    for ch in 0..3 {
        let base = rng.gen_range(0.2..0.8);
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                let a = rng.gen_range(0.0..PI);
                (rng.gen_range(0.05..0.4), a.cos(), a.sin(), rng.gen_range(0.0..2.0 * PI))
            })
            .collect();
        let plane = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let s: f64 = waves
                    .iter()
                    .map(|&(f, cx, cy, p)| (f * (x as f64 * cx + y as f64 * cy) + p).sin())
                    .sum();
                plane[y * w + x] = (base + 0.08 * s).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Paint `sprite` anchored at integer pixel `(ax, ay)`; returns its footprint.
fn paint(frame: &mut Tensor, sprite: &Sprite, ax: i64, ay: i64) -> Vec<usize> {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let (ex, ey) = sprite.outline.extent();
    let (ex, ey) = (ex.ceil() as i64, ey.ceil() as i64);
    let mut footprint = Vec::new();
    for v in -ey..=ey {
        for u in -ex..=ex {
            let (x, y) = (ax + u, ay + v);
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                continue;
            }
            if sprite.outline.contains(u as f64, v as f64) {
                let i = y as usize * w + x as usize;
                for ch in 0..3 {
                    frame.data_mut()[ch * h * w + i] = sprite.texture.at(u as f64, v as f64, ch);
                }
                footprint.push(i);
            }
        }
    }
    footprint
}

/// Sample one axis of the trajectory so every anchor stays inside
/// `[lo, hi]`; returns `(start, velocity)`.
fn fit_axis(rng: &mut ChaCha8Rng, lo: f64, hi: f64, velocity: f64, steps: f64) -> (f64, f64) {
    let span = (hi - lo).max(0.0);
    let v = velocity.clamp(-span / steps, span / steps);
    let travel = v * steps;
    let (a, b) = if travel >= 0.0 {
        (lo, hi - travel)
    } else {
        (lo - travel, hi)
    };
    let start = if b > a { rng.gen_range(a..b) } else { a };
    (start, v)
}

/// One moving object over a textured background with optional static
/// distractors and occlusion events. Flow is the exact per-frame object
/// displacement; the last frame reuses the previous displacement.
pub fn generate_synthetic_sequence(cfg: &SyntheticConfig, seed: u64) -> Result<FrameSequence> {
    cfg.validate()?;
    let (h, w, n) = (cfg.height, cfg.width, cfg.n_frames);
    let size = h.min(w) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tex_rng = ChaCha8Rng::seed_from_u64(seed ^ cfg.texture_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let bg = background(&mut tex_rng, h, w);

    let object = Sprite {
        outline: Outline::sample(&mut rng, cfg.shape, size),
        texture: Texture::sample(&mut rng),
    };
    let (ex, ey) = object.outline.extent();
    let speed = rng.gen_range(cfg.speed.0..=cfg.speed.1);
    let angle = rng.gen_range(0.0..2.0 * PI);
    let angle = cfg.heading.unwrap_or(angle);
    let steps = (n - 1) as f64;
    // Anchors keep a one pixel margin to the border.
    let (x0, vx) = fit_axis(
        &mut rng,
        ex.ceil() + 1.0,
        w as f64 - 2.0 - ex.ceil(),
        speed * angle.cos(),
        steps,
    );
    let (y0, vy) = fit_axis(
        &mut rng,
        ey.ceil() + 1.0,
        h as f64 - 2.0 - ey.ceil(),
        speed * angle.sin(),
        steps,
    );
    let anchors: Vec<(i64, i64)> = (0..n)
        .map(|t| ((x0 + vx * t as f64).round() as i64, (y0 + vy * t as f64).round() as i64))
        .collect();

    let distractors: Vec<(Sprite, i64, i64)> = (0..cfg.distractors)
        .map(|_| {
            let sprite = Sprite {
                outline: Outline::sample(&mut rng, cfg.shape, size),
                texture: Texture::sample(&mut rng),
            };
            let ax = rng.gen_range(0..w as i64);
            let ay = rng.gen_range(0..h as i64);
            (sprite, ax, ay)
        })
        .collect();

    // Occlusion events on isolated interior frames: a bar through the object.
    let phase = rng.gen_range(0..3);
    let bar_color: [f64; 3] = [0; 3].map(|_| rng.gen_range(0.15..0.85));
    let horizontal = rng.gen_bool(0.5);
    let bar_offset = rng.gen_range(-0.3..0.3);
    let event = |t: usize| cfg.occluders && t > 0 && t + 1 < n && (t + phase).is_multiple_of(3);

    let mut seq = FrameSequence {
        name: format!("synth-{seed}"),
        frames: Vec::with_capacity(n),
        flows: Vec::with_capacity(n),
        masks: Vec::with_capacity(n),
        max_mag: cfg.max_mag(),
    };
    for t in 0..n {
        let mut frame = bg.clone();
        for (sprite, ax, ay) in &distractors {
            paint(&mut frame, sprite, *ax, *ay);
        }
        let (ax, ay) = anchors[t];
        let footprint = paint(&mut frame, &object, ax, ay);
        let mut mask = Tensor::zeros(&[h, w]);
        for &i in &footprint {
            mask.data_mut()[i] = 1.0;
        }
        let (dx, dy) = if t + 1 < n {
            (anchors[t + 1].0 - ax, anchors[t + 1].1 - ay)
        } else {
            (ax - anchors[t - 1].0, ay - anchors[t - 1].1)
        };
        let mut fx = Tensor::zeros(&[h, w]);
        let mut fy = Tensor::zeros(&[h, w]);
        if event(t) {
            // Bar thickness 0.6 of the object extent across the whole frame.
            let (center, half) = if horizontal {
                (ay as f64 + bar_offset * ey, 0.6 * ey)
            } else {
                (ax as f64 + bar_offset * ex, 0.6 * ex)
            };
            for y in 0..h {
                for x in 0..w {
                    let c = if horizontal { y } else { x } as f64;
                    if (c - center).abs() <= half {
                        let i = y * w + x;
                        for (ch, &col) in bar_color.iter().enumerate() {
                            frame.data_mut()[ch * h * w + i] = col;
                        }
                        mask.data_mut()[i] = 0.0;
                    }
                }
            }
        } else {
            for &i in &footprint {
                fx.data_mut()[i] = dx as f64;
                fy.data_mut()[i] = dy as f64;
            }
        }
        seq.frames.push(frame);
        seq.flows.push(flow_to_rgb(&fx, &fy, seq.max_mag));
        seq.masks.push(mask);
    }
    Ok(seq)
}
