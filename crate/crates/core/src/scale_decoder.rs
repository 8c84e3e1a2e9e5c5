//! Scale alignment decoder: a continuous, resolution-free segmentation head.
//!
//! Every output pixel center is matched to the nearest cell of each of the
//! four aligned pyramid levels. The matched feature vectors, together with a
//! Fourier embedding of the query's offset from each matched cell center, are
//! concatenated and decoded by an MLP into two class logits.

use std::f64::consts::PI;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::encoder::{FeaturePyramid, LEVELS};
use crate::error::{Error, Result};
use crate::params::{join, Conv, Linear, ParamTree};
use crate::tensor::Tensor;

pub const EMBED_FREQS: usize = 6;
pub const HIDDEN: usize = 128;
pub const CLASSES: usize = 2;
/// Maximum number of query points decoded per tape segment.
pub const QUERY_CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderOptions {
    pub embed_freqs: usize,
    /// Express relative coordinates in units of the level's cell size
    /// instead of normalized image units.
    pub scale_relative: bool,
}

impl Default for DecoderOptions {
    fn default() -> Self {
        Self {
            embed_freqs: EMBED_FREQS,
            scale_relative: false,
        }
    }
}

pub fn embed_width(freqs: usize) -> usize {
    4 * freqs + 2
}

/// MLP input width for the given level widths.
pub fn mlp_input_width(widths: [usize; LEVELS], freqs: usize) -> usize {
    widths.iter().sum::<usize>() + LEVELS * embed_width(freqs)
}

/// Center of cell `i` of `n` along one axis, in `[-1, 1]`.
pub fn cell_center(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64 * 2.0 - 1.0
}

/// Row-major pixel-center coordinates `(x, y)` of an `h×w` grid, `[h·w, 2]`.
pub fn normalize_coords(h: usize, w: usize) -> Tensor {
    assert!(h >= 1 && w >= 1, "coordinate grid must be non-empty");
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        let y = cell_center(i, h);
        for j in 0..w {
            data.push(cell_center(j, w));
            data.push(y);
        }
    }
    Tensor::new(&[h * w, 2], data).expect("coordinate shape")
}

/// Result of matching query points to the cells of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct NearestCells {
    /// Row-major cell index per query.
    pub cells: Vec<usize>,
    /// Matched cell centers `[P, 2]`.
    pub centers: Tensor,
}

impl NearestCells {
    /// `query − center`, `[P, 2]`.
    pub fn relative(&self, query: &Tensor) -> Tensor {
        Tensor::from_fn(query.shape(), |i| query.data()[i] - self.centers.data()[i])
    }
}

fn nearest_index_candidates(v: f64, n: usize) -> std::ops::Range<usize> {
    let c = ((v + 1.0) * 0.5 * n as f64 - 0.5).floor();
    let lo = (c - 1.0).max(0.0).min((n - 1) as f64) as usize;
    let hi = (c + 2.0).max(0.0).min((n - 1) as f64) as usize;
    lo..hi + 1
}

/// Euclidean nearest cell center for every query point of an `h×w` level.
///
/// Ties resolve to the smaller row, then the smaller column.
pub fn nearest_cells(query: &Tensor, h: usize, w: usize) -> NearestCells {
    let p = query.shape()[0];
    let mut cells = Vec::with_capacity(p);
    let mut centers = Vec::with_capacity(p * 2);
    for q in 0..p {
        let (x, y) = (query.data()[2 * q], query.data()[2 * q + 1]);
        let mut best = (f64::INFINITY, 0, 0);
        for i in nearest_index_candidates(y, h) {
            let dy = y - cell_center(i, h);
            for j in nearest_index_candidates(x, w) {
                let dx = x - cell_center(j, w);
                let d = dx * dx + dy * dy;
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        cells.push(best.1 * w + best.2);
        centers.push(cell_center(best.2, w));
        centers.push(cell_center(best.1, h));
    }
    NearestCells {
        cells,
        centers: Tensor::new(&[p, 2], centers).expect("center shape"),
    }
}

/// Raw relative coordinate followed by `sin, cos` of `2^j·π·r` for each
/// frequency, `[P, 4·freqs + 2]`.
pub fn positional_embed(r: &Tensor, freqs: usize) -> Tensor {
    let p = r.shape()[0];
    let width = embed_width(freqs);
    let mut data = Vec::with_capacity(p * width);
    for q in 0..p {
        let (rx, ry) = (r.data()[2 * q], r.data()[2 * q + 1]);
        data.push(rx);
        data.push(ry);
        for j in 0..freqs {
            let f = (1u64 << j) as f64 * PI;
            data.push((f * rx).sin());
            data.push((f * ry).sin());
            data.push((f * rx).cos());
            data.push((f * ry).cos());
        }
    }
    Tensor::new(&[p, width], data).expect("embedding shape")
}

/// Nearest-cell features of a `[1, C, H, W]` level for every query:
/// returns `z_a` as `[P, C]` and the matched cells. Gradients reach the
/// selected features; the selection itself is constant.
pub fn nearest_feature(tape: &mut Tape, query: &Tensor, level: Var) -> Result<(Var, NearestCells)> {
    let table = LevelTable::new(tape, level)?;
    table.lookup(tape, query)
}

/// A pyramid level flattened to one row per cell.
#[derive(Clone, Copy, Debug)]
struct LevelTable {
    rows: Var,
    h: usize,
    w: usize,
}

impl LevelTable {
    fn new(tape: &mut Tape, level: Var) -> Result<Self> {
        let s = tape.shape(level).to_vec();
        let (c, h, w) = match s.as_slice() {
            [1, c, h, w] => (*c, *h, *w),
            [c, h, w] => (*c, *h, *w),
            _ => {
                return Err(Error::validation(format!(
                    "decoder levels must be [1,C,H,W] or [C,H,W], got {s:?}"
                )))
            }
        };
        let flat = tape.reshape(level, &[c, h * w])?;
        let rows = tape.transpose(flat)?;
        Ok(Self { rows, h, w })
    }

    fn lookup(&self, tape: &mut Tape, query: &Tensor) -> Result<(Var, NearestCells)> {
        let m = nearest_cells(query, self.h, self.w);
        let z = tape.gather_rows(self.rows, &m.cells)?;
        Ok((z, m))
    }

    fn embed(&self, query: &Tensor, m: &NearestCells, opts: DecoderOptions) -> Tensor {
        let mut r = m.relative(query);
        if opts.scale_relative {
            let (sx, sy) = (self.w as f64 / 2.0, self.h as f64 / 2.0);
            for pair in r.data_mut().chunks_mut(2) {
                pair[0] *= sx;
                pair[1] *= sy;
            }
        }
        positional_embed(&r, opts.embed_freqs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SadParams<P> {
    pub layers: Vec<Linear<P>>,
}

impl<P> ParamTree<P> for SadParams<P> {
    type Of<Q> = SadParams<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> SadParams<Q> {
        SadParams {
            layers: self.layers.map_params(&join(prefix, "layers"), f),
        }
    }
}

impl SadParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, widths: [usize; LEVELS], opts: DecoderOptions) -> Self {
        let input = mlp_input_width(widths, opts.embed_freqs);
        let mut last = Linear::init(rng, HIDDEN, CLASSES);
        // Small output layer keeps the untrained classifier near chance.
        last.weight = last.weight.map(|v| v * 0.1);
        Self {
            layers: vec![
                Linear::init(rng, input, HIDDEN),
                Linear::init(rng, HIDDEN, HIDDEN),
                last,
            ],
        }
    }
}

impl SadParams<Var> {
    fn mlp(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(tape, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    fn decode_with(&self, tape: &mut Tape, query: &Tensor, tables: &[LevelTable], opts: DecoderOptions) -> Result<Var> {
        let mut parts = Vec::with_capacity(2 * LEVELS);
        for table in tables {
            let (z, m) = table.lookup(tape, query)?;
            let e = tape.constant(table.embed(query, &m, opts));
            parts.push(z);
            parts.push(e);
        }
        let x = tape.concat(&parts, 1)?;
        self.mlp(tape, x)
    }
}

fn tables(tape: &mut Tape, aligned: &[Var]) -> Result<Vec<LevelTable>> {
    if aligned.len() != LEVELS {
        return Err(Error::validation(format!(
            "decoder expects {LEVELS} pyramid levels, got {}",
            aligned.len()
        )));
    }
    aligned.iter().map(|&l| LevelTable::new(tape, l)).collect()
}

fn check_query(query: &Tensor) -> Result<()> {
    if query.rank() != 2 || query.shape()[1] != 2 {
        return Err(Error::validation(format!(
            "query must be [P,2], got {:?}",
            query.shape()
        )));
    }
    Ok(())
}

/// Logits `[P, 2]` of the continuous feature map at the given normalized
/// query points.
pub fn decode_continuous(
    tape: &mut Tape,
    query: &Tensor,
    aligned: &[Var],
    params: &SadParams<Var>,
    opts: DecoderOptions,
) -> Result<Var> {
    check_query(query)?;
    let t = tables(tape, aligned)?;
    params.decode_with(tape, query, &t, opts)
}

/// Dense logits `[1, 2, out_h, out_w]` at any output resolution.
pub fn predict_mask(
    tape: &mut Tape,
    aligned: &FeaturePyramid,
    out_h: usize,
    out_w: usize,
    params: &SadParams<Var>,
    opts: DecoderOptions,
) -> Result<Var> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::validation("output size must be at least 1x1"));
    }
    let t = tables(tape, &aligned.levels)?;
    let coords = normalize_coords(out_h, out_w);
    let p = out_h * out_w;
    let mut chunks = Vec::with_capacity(p.div_ceil(QUERY_CHUNK));
    let mut start = 0;
    while start < p {
        let len = QUERY_CHUNK.min(p - start);
        let q = coords.narrow0(start, len);
        chunks.push(params.decode_with(tape, &q, &t, opts)?);
        start += len;
    }
    let logits = if chunks.len() == 1 {
        chunks[0]
    } else {
        tape.concat(&chunks, 0)?
    };
    let by_class = tape.transpose(logits)?;
    tape.reshape(by_class, &[1, CLASSES, out_h, out_w])
}

/// Fixed baseline decoder: per-level 1×1 conv to class logits, bilinear
/// upsampling to the output size, sum over levels.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearHead<P> {
    pub convs: Vec<Conv<P>>,
}

impl<P> ParamTree<P> for BilinearHead<P> {
    type Of<Q> = BilinearHead<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> BilinearHead<Q> {
        BilinearHead {
            convs: self.convs.map_params(&join(prefix, "convs"), f),
        }
    }
}

impl BilinearHead<Tensor> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, widths: [usize; LEVELS]) -> Self {
        Self {
            convs: widths.iter().map(|&c| Conv::init(rng, CLASSES, c, 1)).collect(),
        }
    }
}

/// Source pixel positions for resizing an `h×w` map to `out_h×out_w` with
/// half-pixel alignment, clamped to the source so borders replicate.
pub fn resize_points(h: usize, w: usize, out_h: usize, out_w: usize) -> Tensor {
    let mut data = Vec::with_capacity(out_h * out_w * 2);
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    for i in 0..out_h {
        let y = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        for j in 0..out_w {
            let x = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            data.push(x);
            data.push(y);
        }
    }
    Tensor::new(&[1, out_h * out_w, 2], data).expect("point shape")
}

impl BilinearHead<Var> {
    pub fn predict_mask(&self, tape: &mut Tape, aligned: &FeaturePyramid, out_h: usize, out_w: usize) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (conv, &level) in self.convs.iter().zip(&aligned.levels) {
            let logits = conv.apply(tape, level, 1, 0)?;
            let s = tape.shape(logits).to_vec();
            let pts = tape.constant(resize_points(s[2], s[3], out_h, out_w));
            let up = tape.grid_sample_bilinear(logits, pts)?;
            let up = tape.reshape(up, &[1, CLASSES, out_h, out_w])?;
            total = Some(match total {
                Some(t) => tape.add(t, up)?,
                None => up,
            });
        }
        total.ok_or_else(|| Error::validation("bilinear head has no levels"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_grid_is_centered() {
        assert_eq!(normalize_coords(1, 1).data(), &[0.0, 0.0]);
        let c = normalize_coords(2, 2);
        let xs: Vec<f64> = c.data().chunks(2).map(|p| p[0]).collect();
        assert_eq!(xs, vec![-0.5, 0.5, -0.5, 0.5]);
    }

    #[test]
    fn one_cell_level_matches_everything() {
        let q = Tensor::new(&[3, 2], vec![-0.9, 0.9, 0.0, 0.0, 0.7, -0.2]).unwrap();
        let m = nearest_cells(&q, 1, 1);
        assert_eq!(m.cells, vec![0, 0, 0]);
        assert!(m.centers.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn query_at_cell_center_has_zero_offset() {
        let q = Tensor::new(&[1, 2], vec![cell_center(3, 5), cell_center(1, 3)]).unwrap();
        let m = nearest_cells(&q, 3, 5);
        assert_eq!(m.cells, vec![5 + 3]);
        assert!(m.relative(&q).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ties_prefer_smaller_indices() {
        // x = 0 lies exactly between the two cells of a 1x2 level.
        let q = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(nearest_cells(&q, 2, 2).cells, vec![0]);
    }

    #[test]
    fn embedding_named_cases() {
        let zero = positional_embed(&Tensor::zeros(&[1, 2]), EMBED_FREQS);
        assert_eq!(zero.shape(), &[1, 26]);
        let mut expect = vec![0.0, 0.0];
        for _ in 0..EMBED_FREQS {
            expect.extend([0.0, 0.0, 1.0, 1.0]);
        }
        assert_eq!(zero.data(), expect.as_slice());

        let half = positional_embed(&Tensor::new(&[1, 2], vec![0.5, 0.0]).unwrap(), EMBED_FREQS);
        assert!((half.data()[2] - 1.0).abs() < 1e-12);
        assert!(half.data()[4].abs() < 1e-12);
    }

    #[test]
    fn mlp_width_for_default_widths() {
        assert_eq!(mlp_input_width([16, 32, 64, 128], EMBED_FREQS), 344);
    }

    #[test]
    fn resize_points_identity() {
        let p = resize_points(4, 4, 4, 4);
        assert_eq!(p.at(&[0, 5, 0]), 1.0);
        assert_eq!(p.at(&[0, 5, 1]), 1.0);
    }
}
