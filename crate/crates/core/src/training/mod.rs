//! Optimization loop, Adam, configuration and checkpoint persistence.

mod adam;
mod checkpoint;
mod config;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::{TrainConfig, KEYS};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Precision, Tape, Var};
use crate::data::{self, image_to_pseudo_video, FrameSequence, JointSampler};
use crate::error::{Error, Result};
use crate::model::{argmax_mask, forward_segment, Model, ModelConfig, Window};
use crate::params::{bind, from_named, grads, leaves, named};
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.tsck";
pub const LOSS_LOG: &str = "loss.log";

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    /// Loss before the update of each iteration.
    pub losses: Vec<f64>,
}

/// Resize every frame and flow of a window to `s × s`.
pub fn resize_window(w: &Window, h: usize, wd: usize) -> Window {
    let resize = |t: &Tensor| {
        let s = t.shape();
        let flat = t.reshape(&s[1..]).expect("window tensor");
        let r = data::resize_bilinear(&flat, h, wd);
        r.reshape(&[1, s[1], h, wd]).expect("window tensor")
    };
    Window {
        frames: w.frames.each_ref().map(resize),
        flows: w.flows.each_ref().map(resize),
    }
}

/// Train on sequences loaded from `data_root`, writing the loss log and
/// checkpoints under `out_dir`.
pub fn train(
    cfg: &TrainConfig,
    data_root: &Path,
    out_dir: &Path,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<TrainRun> {
    cfg.validate()?;
    let sequences = data::load_dataset(data_root)?;
    train_on(cfg, &sequences, Some(out_dir), progress)
}

pub fn train_on(
    cfg: &TrainConfig,
    sequences: &[FrameSequence],
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<TrainRun> {
    cfg.validate()?;
    if sequences.is_empty() {
        return Err(Error::validation("no training sequences"));
    }
    for s in sequences {
        s.validate()?;
    }
    let mut datasets: Vec<Vec<FrameSequence>> = vec![sequences.to_vec()];
    if cfg.pseudo_video {
        let stills = sequences
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let mid = s.len() / 2;
                image_to_pseudo_video(&s.frames[mid], &s.masks[mid], cfg.seed.wrapping_add(k as u64))
            })
            .collect::<Result<_>>()?;
        datasets.push(stills);
    }
    let counts = datasets
        .iter()
        .map(|d| d.iter().map(FrameSequence::len).collect())
        .collect();
    let mut sampler = JointSampler::new(counts, cfg.switch_every, cfg.seed)?;
    let mut scale_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005C_A1E5);

    let model_cfg = cfg.model_config();
    let template = Model::init(&model_cfg, cfg.seed);
    let (names, mut params): (Vec<String>, Vec<Tensor>) = named(&template).into_iter().unzip();
    let mut adam = AdamState::new(&params);
    let config = cfg.to_text();

    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOSS_LOG);
            Some((
                BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?),
                path,
            ))
        }
        None => None,
    };
    let snapshot = |params: &[Tensor], adam: &AdamState, iteration: usize| Checkpoint {
        params: names.iter().cloned().zip(params.iter().cloned()).collect(),
        adam: adam.clone(),
        config: config.clone(),
        iteration: iteration as u64,
    };

    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let pairs: Vec<(String, Tensor)> = names.iter().cloned().zip(params.iter().cloned()).collect();
        let model = from_named(&template, &pairs)?;
        let mut tape = Tape::new(Precision::F32);
        let bound = bind(&mut tape, &model);
        let mut total: Option<Var> = None;
        for _ in 0..cfg.batch_size {
            let draw = sampler.next().expect("sampler is infinite");
            let seq = &datasets[draw.dataset][draw.sequence];
            let s = cfg.scales[scale_rng.gen_range(0..cfg.scales.len())];
            let window = resize_window(&seq.window(draw.t), s, s);
            let target = data::resize_nearest(&seq.masks[draw.t], s, s).reshape(&[1, s, s])?;
            let logits = forward_segment(&mut tape, &bound, &model_cfg, &window, s, s)?;
            let loss = tape.softmax_cross_entropy(logits, &target)?;
            let loss = tape.scale(loss, 1.0 / cfg.batch_size as f64);
            total = Some(match total {
                Some(t) => tape.add(t, loss)?,
                None => loss,
            });
        }
        let total = total.expect("batch_size >= 1");
        let value = tape.value(total).item();
        tape.backward(total)?;
        let g = leaves(&grads(&tape, &bound));
        drop(tape);
        adam_step(&mut params, &g, &names, &mut adam, cfg.learning_rate, true)?;

        losses.push(value);
        progress(it, value);
        if let Some((w, path)) = log.as_mut() {
            writeln!(w, "iter {it} loss {value}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(dir) = out_dir {
            if (it + 1) % cfg.checkpoint_every == 0 && it + 1 < cfg.iterations {
                snapshot(&params, &adam, it + 1).save(&dir.join(CHECKPOINT_FILE))?;
            }
        }
    }
    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let checkpoint = snapshot(&params, &adam, cfg.iterations);
    if let Some(dir) = out_dir {
        checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainRun { checkpoint, losses })
}

/// Rebuild the model described by a checkpoint's config echo.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(Model<Tensor>, ModelConfig)> {
    let cfg = TrainConfig::parse(&ckpt.config)?;
    let model_cfg = cfg.model_config();
    let template = Model::init(&model_cfg, 0);
    Ok((from_named(&template, &ckpt.params)?, model_cfg))
}

/// Logits `[1, 2, out_h, out_w]` for frame `t` at the sequence's native
/// input resolution.
pub fn predict_logits(
    model: &Model<Tensor>,
    cfg: &ModelConfig,
    seq: &FrameSequence,
    t: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let mut tape = Tape::new(Precision::F32);
    let bound = crate::params::constants(&mut tape, model);
    let y = forward_segment(&mut tape, &bound, cfg, &seq.window(t), out_h, out_w)?;
    Ok(tape.value(y).clone())
}

/// Binary masks `[out_h, out_w]` for every frame.
pub fn predict_masks(
    model: &Model<Tensor>,
    cfg: &ModelConfig,
    seq: &FrameSequence,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<Tensor>> {
    (0..seq.len())
        .map(|t| Ok(argmax_mask(&predict_logits(model, cfg, seq, t, out_h, out_w)?)))
        .collect()
}
