use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{ArgGroup, Args, Parser, Subcommand};
use image::{GrayImage, RgbImage};
use vosalign::data::{self, frame_file, generate_synthetic_sequence, save_sequence, Shape, SyntheticConfig};
use vosalign::grad_suite::{self, Suite, TOLERANCE};
use vosalign::metrics::{evaluate, evaluate_predictions, EvalReport};
use vosalign::model::argmax_mask;
use vosalign::training::{model_from_checkpoint, predict_logits, train, Checkpoint, TrainConfig};
use vosalign::Error;

#[derive(Debug, Parser)]
#[command(name = "vosalign", version, about = "Flow-guided video object segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic moving-object dataset.
    Synth(SynthArgs),
    /// Train a model and write checkpoints and a loss log.
    Train(TrainArgs),
    /// Score a checkpoint or stored predictions against ground truth.
    Eval(EvalArgs),
    /// Predict masks for one sequence at any output size.
    Infer(InferArgs),
    /// Compare every backward rule with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Blend masks onto frames with a red tint.
    Overlay(OverlayArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    sequences: usize,
    #[arg(long, default_value_t = 12)]
    frames: usize,
    /// Square frame size; must be a multiple of 32.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    occluders: bool,
    #[arg(long, default_value_t = 1)]
    distractors: usize,
    /// disk, rectangle, blob or any.
    #[arg(long, default_value = "any")]
    shape: Shape,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `key=value` file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Comma-separated square training sizes.
    #[arg(long)]
    scales: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    switch_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    pseudo_video: Option<bool>,
    #[arg(long)]
    taf_enabled: Option<bool>,
    #[arg(long)]
    sad_enabled: Option<bool>,
    #[arg(long)]
    target_residual: Option<bool>,
    #[arg(long)]
    scale_relative: Option<bool>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["ckpt", "pred"])))]
struct EvalArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Directory of stored masks, `<pred>/<seq>/%05d.png`.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Output height and width; defaults to the sequence resolution.
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    size: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// all, tensor, encoder, taf or sad.
    #[arg(long, default_value = "all")]
    module: Suite,
    /// Break relu's backward rule to exercise the failure path.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Debug, Args)]
struct OverlayArgs {
    #[arg(long)]
    seq: PathBuf,
    /// Directory of `%05d.png` masks.
    #[arg(long)]
    masks: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Process exit status for each failure class.
#[derive(Debug)]
enum Failure {
    Validation(String),
    Io(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Io(_) => 2,
            Failure::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Io(m) | Failure::Internal(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Validation(_) => Failure::Validation(msg),
            Error::Io { .. } | Error::Data { .. } | Error::Format { .. } => Failure::Io(msg),
            Error::Dimension { .. } | Error::Rank { .. } | Error::Usage(_) | Error::NonFiniteGradient { .. } => {
                Failure::Internal(msg)
            }
        }
    }
}

type Outcome = Result<(), Failure>;

fn echo(command: &str, pairs: &[(&str, String)]) {
    println!("# {command}: resolved config");
    for (k, v) in pairs {
        println!("{k}={v}");
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn synth(a: SynthArgs) -> Outcome {
    echo(
        "synth",
        &[
            ("out", show(&a.out)),
            ("sequences", a.sequences.to_string()),
            ("frames", a.frames.to_string()),
            ("resolution", a.resolution.to_string()),
            ("seed", a.seed.to_string()),
            ("occluders", a.occluders.to_string()),
            ("distractors", a.distractors.to_string()),
            ("shape", a.shape.to_string()),
        ],
    );
    let cfg = SyntheticConfig {
        height: a.resolution,
        width: a.resolution,
        n_frames: a.frames,
        shape: a.shape,
        occluders: a.occluders,
        distractors: a.distractors,
        ..Default::default()
    };
    cfg.validate()?;
    if a.sequences == 0 {
        return Err(Failure::Validation("--sequences must be at least 1".into()));
    }
    for k in 0..a.sequences {
        let seq = generate_synthetic_sequence(&cfg, a.seed.wrapping_add(k as u64))?;
        save_sequence(&seq, &a.out.join(format!("seq{k:03}")))?;
    }
    println!("wrote {} sequences to {}", a.sequences, a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::from_file(path).map_err(|e| match e {
            // A readable file with bad contents is a validation problem.
            Error::Data { message, path } => Failure::Validation(format!("{}: {message}", path.display())),
            other => other.into(),
        })?,
        None => TrainConfig::default(),
    };
    let mut set = |key: &str, value: Option<String>| match value {
        Some(v) => cfg.set(key, &v),
        None => Ok(()),
    };
    set("learning_rate", a.learning_rate.map(|v| format!("{v:e}")))?;
    set("iterations", a.iterations.map(|v| v.to_string()))?;
    set("scales", a.scales.clone())?;
    set("batch_size", a.batch_size.map(|v| v.to_string()))?;
    set("seed", a.seed.map(|v| v.to_string()))?;
    set("switch_every", a.switch_every.map(|v| v.to_string()))?;
    set("checkpoint_every", a.checkpoint_every.map(|v| v.to_string()))?;
    set("pseudo_video", a.pseudo_video.map(|v| v.to_string()))?;
    set("taf_enabled", a.taf_enabled.map(|v| v.to_string()))?;
    set("sad_enabled", a.sad_enabled.map(|v| v.to_string()))?;
    set("target_residual", a.target_residual.map(|v| v.to_string()))?;
    set("scale_relative", a.scale_relative.map(|v| v.to_string()))?;

    let mut pairs = vec![("data", show(&a.data)), ("out", show(&a.out))];
    let text = cfg.to_text();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            pairs.push((k, v.to_string()));
        }
    }
    echo("train", &pairs);
    cfg.validate()?;

    let every = (cfg.iterations / 20).max(1);
    let start = Instant::now();
    let run = train(&cfg, &a.data, &a.out, &mut |it, loss| {
        if it % every == 0 || it + 1 == cfg.iterations {
            println!("iter {it} loss {loss:.6} elapsed {:.1}s", start.elapsed().as_secs_f64());
        }
    })?;
    println!(
        "trained {} iterations; final loss {:.6}; checkpoint {}",
        run.checkpoint.iteration,
        run.losses.last().copied().unwrap_or(f64::NAN),
        a.out.join(vosalign::training::CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn print_report(r: &EvalReport) {
    print!("{}", r.table());
    print!("{}", r.summary());
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let mut pairs = Vec::new();
    if let Some(c) = &a.ckpt {
        pairs.push(("ckpt", show(c)));
    }
    if let Some(p) = &a.pred {
        pairs.push(("pred", show(p)));
    }
    pairs.push(("data", show(&a.data)));
    pairs.push(("out", show(&a.out)));
    echo("eval", &pairs);
    let report = match (&a.ckpt, &a.pred) {
        (Some(ckpt), None) => evaluate(ckpt, &a.data, &a.out)?,
        (None, Some(pred)) => evaluate_predictions(pred, &a.data, &a.out)?,
        _ => return Err(Failure::Validation("give exactly one of --ckpt and --pred".into())),
    };
    print_report(&report);
    Ok(())
}

fn infer_cmd(a: InferArgs) -> Outcome {
    let size = a.size.as_ref().map(|s| (s[0], s[1]));
    echo(
        "infer",
        &[
            ("ckpt", show(&a.ckpt)),
            ("seq", show(&a.seq)),
            ("out", show(&a.out)),
            ("size", size.map_or("native".into(), |(h, w)| format!("{h}x{w}"))),
        ],
    );
    if let Some((h, w)) = size {
        if h == 0 || w == 0 {
            return Err(Failure::Validation(format!("--size {h} {w}: extents must be positive")));
        }
    }
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (model, cfg) = model_from_checkpoint(&ckpt)?;
    let seq = data::load_sequence(&a.seq)?;
    let (h, w) = size.unwrap_or_else(|| seq.size());
    fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;
    for t in 0..seq.len() {
        let logits = predict_logits(&model, &cfg, &seq, t, h, w)?;
        if !logits.is_finite() {
            return Err(Failure::Internal(format!("frame {t}: non-finite logits")));
        }
        data::write_mask(&a.out.join(format!("{t:05}.png")), &argmax_mask(&logits))?;
    }
    println!("wrote {} masks of {h}x{w} to {}", seq.len(), a.out.display());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Outcome {
    echo(
        "gradcheck",
        &[
            ("seed", a.seed.to_string()),
            ("module", a.module.to_string()),
            ("eps", format!("{:e}", grad_suite::EPS)),
            ("tolerance", format!("{TOLERANCE:e}")),
        ],
    );
    let start = Instant::now();
    let reports = grad_suite::run(a.module, a.seed, a.inject_fault)?;
    println!("module\top\tmax_rel_error\tstatus");
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{}\t{}\t{:.3e}\t{status}", r.module, r.op, r.max_error);
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!(
        "{} ops, {failed} failed, {:.1}s",
        reports.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Failure::Internal(format!(
            "{failed} ops exceed relative error {TOLERANCE:e}"
        )));
    }
    Ok(())
}

/// `round(0.5·frame + 0.5·(255, 0, 0))` on mask pixels, rounding halves up.
fn blend(frame: &RgbImage, mask: &GrayImage) -> RgbImage {
    let mut out = frame.clone();
    for (p, m) in out.pixels_mut().zip(mask.pixels()) {
        if m[0] != 0 {
            let [r, g, b] = p.0.map(u16::from);
            p.0 = [((r + 256) / 2) as u8, g.div_ceil(2) as u8, b.div_ceil(2) as u8];
        }
    }
    out
}

fn overlay_cmd(a: OverlayArgs) -> Outcome {
    echo(
        "overlay",
        &[("seq", show(&a.seq)), ("masks", show(&a.masks)), ("out", show(&a.out))],
    );
    let mut n = 0;
    while frame_file(&a.seq, "frames", n).is_file() {
        n += 1;
    }
    if n == 0 {
        return Err(io_failure(&a.seq.join("frames"), "no frames found"));
    }
    fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;
    for k in 0..n {
        let fpath = frame_file(&a.seq, "frames", k);
        let frame = image::open(&fpath).map_err(|e| io_failure(&fpath, e))?.to_rgb8();
        let mpath = a.masks.join(format!("{k:05}.png"));
        let m = data::read_mask(&mpath)?;
        let (h, w) = (m.shape()[0] as u32, m.shape()[1] as u32);
        if (w, h) != frame.dimensions() {
            return Err(Failure::Validation(format!(
                "{}: mask is {w}x{h} but the frame is {}x{}",
                mpath.display(),
                frame.width(),
                frame.height()
            )));
        }
        let mask = GrayImage::from_fn(w, h, |x, y| image::Luma([m.data()[(y * w + x) as usize] as u8]));
        let opath = a.out.join(format!("{k:05}.png"));
        blend(&frame, &mask).save(&opath).map_err(|e| io_failure(&opath, e))?;
    }
    println!("wrote {n} overlays to {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Overlay(a) => overlay_cmd(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
