//! Independent nested-loop oracles shared by the integration tests.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vosalign::{Tape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn conv2d_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let [n, cin, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [cout, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.at(&[co, ci, ky, kx]) * x.at(&[bi, ci, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    out.set(&[bi, co, oy, ox], acc);
                }
            }
        }
    }
    out
}

pub fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a.at(&[i, l]) * b.at(&[l, j]);
            }
            out.set(&[i, j], acc);
        }
    }
    out
}

/// Bilinear sample of a single-channel plane at `(x, y)` with zero padding.
pub fn bilinear_oracle(plane: impl Fn(isize, isize) -> Option<f64>, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let v = |dx: isize, dy: isize| plane(x0 as isize + dx, y0 as isize + dy).unwrap_or(0.0);
    v(0, 0) * (1.0 - fx) * (1.0 - fy) + v(1, 0) * fx * (1.0 - fy) + v(0, 1) * (1.0 - fx) * fy + v(1, 1) * fx * fy
}

pub fn grid_sample_oracle(x: &Tensor, pts: &Tensor) -> Tensor {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let p = pts.shape()[1];
    let mut out = Tensor::zeros(&[n, c, p]);
    for b in 0..n {
        for ch in 0..c {
            for q in 0..p {
                let plane = |ix: isize, iy: isize| {
                    (ix >= 0 && iy >= 0 && (ix as usize) < w && (iy as usize) < h)
                        .then(|| x.at(&[b, ch, iy as usize, ix as usize]))
                };
                let v = bilinear_oracle(plane, pts.at(&[b, q, 0]), pts.at(&[b, q, 1]));
                out.set(&[b, ch, q], v);
            }
        }
    }
    out
}

/// Random weights into a scalar so gradients are O(1).
pub fn weighted_sum(tape: &mut Tape, vars: &[vosalign::Var], seed: u64) -> vosalign::Result<vosalign::Var> {
    let mut r = rng(seed);
    let mut total = None;
    for &v in vars {
        let s = tape.shape(v).to_vec();
        let n: usize = s.iter().product();
        let w = tape.constant(Tensor::rand_uniform(&s, -1.0, 1.0, &mut r).map(|x| x / n as f64));
        let p = tape.mul(v, w)?;
        let term = tape.sum(p);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}

/// Exhaustive argmin over every cell center; strict `<` in row-major order.
pub fn nearest_oracle(x: f64, y: f64, h: usize, w: usize) -> usize {
    let mut best = (f64::INFINITY, 0);
    for i in 0..h {
        let cy = (2.0 * i as f64 + 1.0) / h as f64 - 1.0;
        for j in 0..w {
            let cx = (2.0 * j as f64 + 1.0) / w as f64 - 1.0;
            let d = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            if d < best.0 {
                best = (d, i * w + j);
            }
        }
    }
    best.1
}

pub fn rect(h: usize, w: usize, y0: usize, x0: usize, rh: usize, rw: usize) -> Tensor {
    Tensor::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        (y >= y0 && y < y0 + rh && x >= x0 && x < x0 + rw) as u8 as f64
    })
}

/// Explicit pairwise matching: every boundary pixel searches every boundary
/// pixel of the other mask for one within the tolerance disk.
pub fn boundary_f_oracle(pred: &Tensor, gt: &Tensor, tol: usize) -> f64 {
    let (h, w) = (pred.shape()[0] as i64, pred.shape()[1] as i64);
    let boundary = |m: &Tensor| -> Vec<(i64, i64)> {
        let on = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m.at(&[y as usize, x as usize]) == 1.0;
        let mut pts = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if on(y, x)
                    && [(-1, 0), (1, 0), (0, -1), (0, 1)]
                        .iter()
                        .any(|(dy, dx)| !on(y + dy, x + dx))
                {
                    pts.push((y, x));
                }
            }
        }
        pts
    };
    let (pb, gb) = (boundary(pred), boundary(gt));
    if pb.is_empty() && gb.is_empty() {
        return 1.0;
    }
    if pb.is_empty() || gb.is_empty() {
        return 0.0;
    }
    let t = (tol * tol) as i64;
    let matched = |a: &[(i64, i64)], b: &[(i64, i64)]| {
        a.iter()
            .filter(|p| b.iter().any(|q| (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2) <= t))
            .count()
    };
    let precision = matched(&pb, &gb) as f64 / pb.len() as f64;
    let recall = matched(&gb, &pb) as f64 / gb.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn random_mask(r: &mut impl rand::Rng, h: usize, w: usize) -> Tensor {
    match r.gen_range(0..4) {
        0 => Tensor::from_fn(&[h, w], |_| r.gen_bool(0.5) as u8 as f64),
        1 => {
            let (y0, x0) = (r.gen_range(0..h), r.gen_range(0..w));
            rect(h, w, y0, x0, r.gen_range(1..=h - y0), r.gen_range(1..=w - x0))
        }
        2 => {
            let (cy, cx, rad) = (
                r.gen_range(0.0..h as f64),
                r.gen_range(0.0..w as f64),
                r.gen_range(1.0..8.0),
            );
            Tensor::from_fn(&[h, w], |i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                ((y - cy).powi(2) + (x - cx).powi(2) <= rad * rad) as u8 as f64
            })
        }
        _ => Tensor::zeros(&[h, w]),
    }
}
