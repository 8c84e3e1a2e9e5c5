use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageError, RgbImage};

use super::FrameSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FOLDERS: [&str; 3] = ["frames", "flows", "masks"];
const META: &str = "meta.txt";

fn image_error(path: &Path, e: ImageError) -> Error {
    match e {
        ImageError::IoError(source) => Error::io(path, source),
        other => Error::data(path, other.to_string()),
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a `[3, H, W]` tensor in `[0, 1]` as 8-bit RGB.
pub fn write_rgb(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let hw = h * w;
    let d = t.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([quantize(d[i]), quantize(d[hw + i]), quantize(d[2 * hw + i])])
    });
    img.save(path).map_err(|e| image_error(path, e))
}

pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = h * w;
    let mut t = Tensor::zeros(&[3, h, w]);
    for (i, p) in img.pixels().enumerate() {
        for ch in 0..3 {
            t.data_mut()[ch * hw + i] = p[ch] as f64 / 255.0;
        }
    }
    Ok(t)
}

/// Write an `[H, W]` binary mask as gray `{0, 255}`.
pub fn write_mask(path: &Path, m: &Tensor) -> Result<()> {
    let (h, w) = (m.shape()[0], m.shape()[1]);
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if m.data()[y as usize * w + x as usize] > 0.5 {
            255
        } else {
            0
        }])
    });
    img.save(path).map_err(|e| image_error(path, e))
}

/// Read a gray mask; any value other than 0 or 255 is rejected.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::data(
                path,
                format!("mask must be 8-bit grayscale, got {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut t = Tensor::zeros(&[h, w]);
    for (i, p) in gray.pixels().enumerate() {
        t.data_mut()[i] = match p[0] {
            0 => 0.0,
            255 => 1.0,
            v => {
                return Err(Error::data(
                    path,
                    format!("non-binary mask value {v} at pixel ({}, {})", i % w, i / w),
                ))
            }
        };
    }
    Ok(t)
}

pub fn frame_file(dir: &Path, folder: &str, k: usize) -> PathBuf {
    dir.join(folder).join(format!("{k:05}.png"))
}

/// Write `<dir>/{frames,flows,masks}/%05d.png` and `<dir>/meta.txt`.
pub fn save_sequence(seq: &FrameSequence, dir: &Path) -> Result<()> {
    seq.validate()?;
    for folder in FOLDERS {
        let p = dir.join(folder);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for k in 0..seq.len() {
        write_rgb(&frame_file(dir, "frames", k), &seq.frames[k])?;
        write_rgb(&frame_file(dir, "flows", k), &seq.flows[k])?;
        write_mask(&frame_file(dir, "masks", k), &seq.masks[k])?;
    }
    let meta = dir.join(META);
    let text = format!("max_mag={}\nn_frames={}\n", seq.max_mag, seq.len());
    fs::write(&meta, text).map_err(|e| Error::io(&meta, e))
}

fn read_meta(dir: &Path) -> Result<(f64, usize)> {
    let path = dir.join(META);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut max_mag = None;
    let mut n_frames = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::data(&path, format!("expected key=value, got `{line}`")))?;
        let bad = |_| Error::data(&path, format!("invalid value for `{key}`: `{value}`"));
        match key.trim() {
            "max_mag" => max_mag = Some(value.trim().parse::<f64>().map_err(|e| bad(e.to_string()))?),
            "n_frames" => n_frames = Some(value.trim().parse::<usize>().map_err(|e| bad(e.to_string()))?),
            _ => {}
        }
    }
    match (max_mag, n_frames) {
        (Some(m), Some(n)) if m > 0.0 && n > 0 => Ok((m, n)),
        (Some(_), Some(_)) => Err(Error::data(&path, "max_mag and n_frames must be positive")),
        _ => Err(Error::data(&path, "missing max_mag or n_frames")),
    }
}

fn count_pngs(dir: &Path) -> Result<usize> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut n = 0;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().extension().is_some_and(|e| e == "png") {
            n += 1;
        }
    }
    Ok(n)
}

pub fn load_sequence(dir: &Path) -> Result<FrameSequence> {
    let (max_mag, n) = read_meta(dir)?;
    for folder in FOLDERS {
        let p = dir.join(folder);
        if !p.is_dir() {
            return Err(Error::data(&p, "missing directory"));
        }
        let found = count_pngs(&p)?;
        if found != n {
            return Err(Error::data(&p, format!("expected {n} frames, found {found} png files")));
        }
    }
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let mut seq = FrameSequence {
        name,
        frames: Vec::with_capacity(n),
        flows: Vec::with_capacity(n),
        masks: Vec::with_capacity(n),
        max_mag,
    };
    let mut size = None;
    for k in 0..n {
        let files = FOLDERS.map(|f| frame_file(dir, f, k));
        let frame = read_rgb(&files[0])?;
        let flow = read_rgb(&files[1])?;
        let mask = read_mask(&files[2])?;
        let s = (frame.shape()[1], frame.shape()[2]);
        let expect = *size.get_or_insert(s);
        for (file, got) in [
            (&files[0], s),
            (&files[1], (flow.shape()[1], flow.shape()[2])),
            (&files[2], (mask.shape()[0], mask.shape()[1])),
        ] {
            if got != expect {
                return Err(Error::data(
                    file,
                    format!("resolution {}x{} differs from {}x{}", got.0, got.1, expect.0, expect.1),
                ));
            }
        }
        seq.frames.push(frame);
        seq.flows.push(flow);
        seq.masks.push(mask);
    }
    seq.validate().map_err(|e| Error::data(dir, e.to_string()))?;
    Ok(seq)
}

/// Sequence directories under `root`, sorted by name.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::data(root, "no sequence directories"));
    }
    Ok(dirs)
}

pub fn load_dataset(root: &Path) -> Result<Vec<FrameSequence>> {
    list_sequences(root)?.iter().map(|d| load_sequence(d)).collect()
}
