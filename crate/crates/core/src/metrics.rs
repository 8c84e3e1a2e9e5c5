//! Region similarity J, boundary accuracy F and their per-sequence
//! Mean / Recall / Decay aggregates.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{self, is_binary, FrameSequence};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::training::{model_from_checkpoint, predict_masks, Checkpoint};

fn check_pair(op: &str, pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() || pred.rank() != 2 {
        return Err(Error::validation(format!(
            "{op}: masks must be equal-shaped [H, W], got {:?} and {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if !is_binary(pred) || !is_binary(gt) {
        return Err(Error::validation(format!("{op}: masks must be binary")));
    }
    Ok(())
}

/// Intersection over union; 1 when both masks are empty.
pub fn region_similarity(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair("region_similarity", pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p == 1.0 && g == 1.0) as usize;
        union += (p == 1.0 || g == 1.0) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels with a 4-neighbor that is background or outside.
pub fn boundary_map(mask: &Tensor) -> Vec<bool> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let m = mask.data();
    let fg = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m[y as usize * w + x as usize] == 1.0
    };
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            fg(y, x) && !(fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1))
        })
        .collect()
}

/// Matching radius in pixels: `ceil(0.008 · diagonal)`.
pub fn boundary_tolerance(h: usize, w: usize) -> usize {
    (0.008 * ((h * h + w * w) as f64).sqrt()).ceil() as usize
}

fn dilate(map: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let r = r as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let mut out = vec![false; h * w];
    for (i, _) in map.iter().enumerate().filter(|(_, &b)| b) {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for &(dy, dx) in &offsets {
            let (yy, xx) = (y + dy, x + dx);
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                out[yy as usize * w + xx as usize] = true;
            }
        }
    }
    out
}

/// Boundary F-measure with matches inside a disk of radius `tol_px`.
/// Both boundaries empty gives 1; exactly one empty gives 0.
pub fn boundary_accuracy_with(pred: &Tensor, gt: &Tensor, tol_px: usize) -> Result<f64> {
    check_pair("boundary_accuracy", pred, gt)?;
    let (h, w) = (pred.shape()[0], pred.shape()[1]);
    let pb = boundary_map(pred);
    let gb = boundary_map(gt);
    let np = pb.iter().filter(|&&b| b).count();
    let ng = gb.iter().filter(|&&b| b).count();
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let gd = dilate(&gb, h, w, tol_px);
    let pd = dilate(&pb, h, w, tol_px);
    let matched_p = pb.iter().zip(&gd).filter(|(&p, &g)| p && g).count();
    let matched_g = gb.iter().zip(&pd).filter(|(&g, &p)| g && p).count();
    let precision = matched_p as f64 / np as f64;
    let recall = matched_g as f64 / ng as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

pub fn boundary_accuracy(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (h, w) = (gt.shape()[0], gt.shape().get(1).copied().unwrap_or(0));
    boundary_accuracy_with(pred, gt, boundary_tolerance(h, w))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    /// Fraction of values above 0.5.
    pub recall: f64,
    /// Mean of the first quarter minus mean of the last quarter.
    pub decay: f64,
}

/// Mean accumulated as offsets from the first value, so constant inputs
/// give that constant exactly.
fn exact_mean(s: &[f64]) -> f64 {
    s[0] + s.iter().map(|v| v - s[0]).sum::<f64>() / s.len() as f64
}

/// Quarters are contiguous; when the length is not a multiple of four the
/// earlier bins take the extra values. Decay is 0 if the last bin is empty.
pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::validation("aggregate of an empty list"));
    }
    let n = values.len();
    let mean = exact_mean(values);
    let recall = values.iter().filter(|&&v| v > 0.5).count() as f64 / n as f64;
    let sizes: Vec<usize> = (0..4).map(|i| n / 4 + usize::from(i < n % 4)).collect();
    let first = &values[..sizes[0]];
    let last = &values[n - sizes[3]..];
    let avg = exact_mean;
    let decay = if last.is_empty() { 0.0 } else { avg(first) - avg(last) };
    Ok(Aggregate { mean, recall, decay })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceScores {
    pub name: String,
    pub j: Vec<f64>,
    pub f: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub sequences: Vec<SequenceScores>,
    pub j: Aggregate,
    pub f: Aggregate,
    pub jf_mean: f64,
}

/// Per-frame J and F; the first and last frames are not scored when the
/// sequence has at least three frames.
pub fn score_sequence(name: &str, preds: &[Tensor], gts: &[Tensor]) -> Result<SequenceScores> {
    if preds.len() != gts.len() || gts.is_empty() {
        return Err(Error::validation(format!(
            "sequence `{name}`: {} predictions for {} ground-truth frames",
            preds.len(),
            gts.len()
        )));
    }
    let range = if gts.len() >= 3 { 1..gts.len() - 1 } else { 0..gts.len() };
    let mut scores = SequenceScores {
        name: name.to_string(),
        j: Vec::new(),
        f: Vec::new(),
    };
    for t in range {
        scores.j.push(region_similarity(&preds[t], &gts[t])?);
        scores.f.push(boundary_accuracy(&preds[t], &gts[t])?);
    }
    Ok(scores)
}

impl EvalReport {
    /// Aggregate each sequence, then average the statistics over sequences.
    pub fn from_scores(sequences: Vec<SequenceScores>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::validation("no sequences to report"));
        }
        let per: Vec<(Aggregate, Aggregate)> = sequences
            .iter()
            .map(|s| Ok((aggregate(&s.j)?, aggregate(&s.f)?)))
            .collect::<Result<_>>()?;
        let n = per.len() as f64;
        let avg = |pick: &dyn Fn(&(Aggregate, Aggregate)) -> Aggregate| Aggregate {
            mean: per.iter().map(|p| pick(p).mean).sum::<f64>() / n,
            recall: per.iter().map(|p| pick(p).recall).sum::<f64>() / n,
            decay: per.iter().map(|p| pick(p).decay).sum::<f64>() / n,
        };
        let j = avg(&|p| p.0);
        let f = avg(&|p| p.1);
        Ok(Self {
            sequences,
            j,
            f,
            jf_mean: (j.mean + f.mean) / 2.0,
        })
    }

    /// Tab-separated per-sequence table with a trailing mean row.
    pub fn table(&self) -> String {
        let mut s = String::from("sequence\tJ-mean\tF-mean\tJ&F\n");
        for seq in &self.sequences {
            let j = seq.j.iter().sum::<f64>() / seq.j.len() as f64;
            let f = seq.f.iter().sum::<f64>() / seq.f.len() as f64;
            let _ = writeln!(s, "{}\t{j:.4}\t{f:.4}\t{:.4}", seq.name, (j + f) / 2.0);
        }
        let _ = writeln!(s, "mean\t{:.4}\t{:.4}\t{:.4}", self.j.mean, self.f.mean, self.jf_mean);
        s
    }

    /// One-row summary: J&F mean, then Mean / Recall / Decay for J and F.
    pub fn summary(&self) -> String {
        format!(
            "J&F-Mean\tJ-Mean\tJ-Recall\tJ-Decay\tF-Mean\tF-Recall\tF-Decay\n\
             {:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
            self.jf_mean, self.j.mean, self.j.recall, self.j.decay, self.f.mean, self.f.recall, self.f.decay
        )
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        for (file, text) in [("report.tsv", self.table()), ("summary.tsv", self.summary())] {
            let path = out_dir.join(file);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn write_masks(dir: &Path, masks: &[Tensor]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, m) in masks.iter().enumerate() {
        data::write_mask(&dir.join(format!("{k:05}.png")), m)?;
    }
    Ok(())
}

/// Predict every frame of every sequence, score against the ground truth,
/// and write masks under `<out>/masks/<seq>/` plus the report tables.
pub fn evaluate_model(
    model: &Model<Tensor>,
    cfg: &ModelConfig,
    sequences: &[FrameSequence],
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let mut scores = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let (h, w) = seq.size();
        let preds = predict_masks(model, cfg, seq, h, w)?;
        if let Some(dir) = out_dir {
            write_masks(&dir.join("masks").join(&seq.name), &preds)?;
        }
        scores.push(score_sequence(&seq.name, &preds, &seq.masks)?);
    }
    let report = EvalReport::from_scores(scores)?;
    if let Some(dir) = out_dir {
        report.write(dir)?;
    }
    Ok(report)
}

pub fn evaluate(ckpt_path: &Path, data_root: &Path, out_dir: &Path) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let (model, cfg) = model_from_checkpoint(&ckpt)?;
    let sequences = data::load_dataset(data_root)?;
    evaluate_model(&model, &cfg, &sequences, Some(out_dir))
}

/// Score stored masks: `<pred_root>/<seq>/masks/%05d.png` if present,
/// otherwise `<pred_root>/<seq>/%05d.png`.
pub fn evaluate_predictions(pred_root: &Path, data_root: &Path, out_dir: &Path) -> Result<EvalReport> {
    let mut scores = Vec::new();
    for dir in data::list_sequences(data_root)? {
        let seq = data::load_sequence(&dir)?;
        let base = pred_root.join(&seq.name);
        let base = if base.join("masks").is_dir() {
            base.join("masks")
        } else {
            base
        };
        let preds = (0..seq.len())
            .map(|k| data::read_mask(&base.join(format!("{k:05}.png"))))
            .collect::<Result<Vec<_>>>()?;
        for (k, p) in preds.iter().enumerate() {
            if p.shape() != seq.masks[k].shape() {
                return Err(Error::data(
                    base.join(format!("{k:05}.png")),
                    format!(
                        "prediction shape {:?} differs from ground truth {:?}",
                        p.shape(),
                        seq.masks[k].shape()
                    ),
                ));
            }
        }
        scores.push(score_sequence(&seq.name, &preds, &seq.masks)?);
    }
    let report = EvalReport::from_scores(scores)?;
    report.write(out_dir)?;
    Ok(report)
}
