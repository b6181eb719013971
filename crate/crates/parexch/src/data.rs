//! Batch files on disk and the parallel loading pipeline.
//!
//! Raw example tensors live in binary batch files (magic `PXB1`), one
//! minibatch per file, with labels held entirely in memory in a separate
//! index — labels are cheap, images are not. A loader thread per trainer
//! prefetches and preprocesses the next file while the trainer computes on
//! the last one, double-buffering through a staging slot and an input slot.
//!
//! The loader follows a strict control protocol: it receives a mode word
//! (train / val / stop), then filenames. After preprocessing file t into
//! staging it blocks until the next control message; a filename means
//! "training on batch t-1 finished": staging moves to the input slot, the
//! trainer is notified, and the loader starts on the next file. A mode word
//! instead re-enters the outer loop (discarding staging), and stop ends the
//! loop. Because the staged batch is only delivered on receipt of a further
//! filename, the driver sends one trailing repeat filename per epoch to
//! flush the final batch.
//!
//! File formats (bit-exact):
//!   batch file: "PXB1" | u32-LE n | u32-LE c | u32-LE h | u32-LE w | n*c*h*w u8
//!   mean file:  "PXM1" | u32-LE c | u32-LE h | u32-LE w | c*h*w f32-LE
//!   label file: "PXL1" | u32-LE batches | per batch: u32-LE n | n u32-LE

use crate::error::{Error, Result};
use crate::transport::{ControlMessage, ModeMsg};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

pub const BATCH_MAGIC: &[u8; 4] = b"PXB1";
pub const MEAN_MAGIC: &[u8; 4] = b"PXM1";
pub const LABEL_MAGIC: &[u8; 4] = b"PXL1";

/// One minibatch of raw u8 example tensors, shape n x c x h x w.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawBatch {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl RawBatch {
    pub fn example_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Per-pixel mean over the training set, subtracted before cropping.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanImage {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
}

/// Preprocessing phase: training batches get random crop and mirror,
/// validation batches get the deterministic center crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Val,
}

impl Phase {
    pub fn mode_msg(self) -> ModeMsg {
        match self {
            Phase::Train => ModeMsg::Train,
            Phase::Val => ModeMsg::Val,
        }
    }
}

/// Crop window applied after mean subtraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpec {
    pub h: usize,
    pub w: usize,
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| Error::CorruptHeader {
        path: path.display().to_string(),
        reason: "short header".to_string(),
    })?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_batch_file(path: &Path, batch: &RawBatch) -> Result<()> {
    if batch.data.len() != batch.n * batch.example_len() || batch.n == 0 {
        return Err(Error::ShapeMismatch(format!(
            "batch payload {} does not match {}x{}x{}x{}",
            batch.data.len(),
            batch.n,
            batch.c,
            batch.h,
            batch.w
        )));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(BATCH_MAGIC)?;
    for dim in [batch.n, batch.c, batch.h, batch.w] {
        f.write_all(&(dim as u32).to_le_bytes())?;
    }
    f.write_all(&batch.data)?;
    Ok(())
}

pub fn read_batch_file(path: &Path) -> Result<RawBatch> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(|_| Error::CorruptHeader {
        path: path.display().to_string(),
        reason: "file shorter than magic".to_string(),
    })?;
    if &magic != BATCH_MAGIC {
        return Err(Error::CorruptHeader {
            path: path.display().to_string(),
            reason: format!("bad magic {magic:?}"),
        });
    }
    let n = read_u32(&mut f, path)? as usize;
    let c = read_u32(&mut f, path)? as usize;
    let h = read_u32(&mut f, path)? as usize;
    let w = read_u32(&mut f, path)? as usize;
    if n == 0 {
        return Err(Error::CorruptHeader {
            path: path.display().to_string(),
            reason: "zero examples".to_string(),
        });
    }
    let expected = n * c * h * w;
    let mut data = Vec::with_capacity(expected);
    f.read_to_end(&mut data)?;
    if data.len() != expected {
        return Err(Error::TruncatedPayload {
            path: path.display().to_string(),
            expected,
            got: data.len(),
        });
    }
    Ok(RawBatch { n, c, h, w, data })
}

pub fn write_mean_file(path: &Path, mean: &MeanImage) -> Result<()> {
    if mean.values.len() != mean.c * mean.h * mean.w {
        return Err(Error::ShapeMismatch("mean payload mismatch".to_string()));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(MEAN_MAGIC)?;
    for dim in [mean.c, mean.h, mean.w] {
        f.write_all(&(dim as u32).to_le_bytes())?;
    }
    for v in &mean.values {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_mean_file(path: &Path) -> Result<MeanImage> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(|_| Error::CorruptHeader {
        path: path.display().to_string(),
        reason: "file shorter than magic".to_string(),
    })?;
    if &magic != MEAN_MAGIC {
        return Err(Error::CorruptHeader {
            path: path.display().to_string(),
            reason: format!("bad magic {magic:?}"),
        });
    }
    let c = read_u32(&mut f, path)? as usize;
    let h = read_u32(&mut f, path)? as usize;
    let w = read_u32(&mut f, path)? as usize;
    let expected = c * h * w;
    let mut raw = Vec::new();
    f.read_to_end(&mut raw)?;
    if raw.len() != expected * 4 {
        return Err(Error::TruncatedPayload {
            path: path.display().to_string(),
            expected: expected * 4,
            got: raw.len(),
        });
    }
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    for (index, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { index });
        }
    }
    Ok(MeanImage { c, h, w, values })
}

/// Labels for every batch, fully in memory; batch files never carry labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelIndex {
    pub per_batch: Vec<Vec<u32>>,
}

pub fn write_label_file(path: &Path, index: &LabelIndex) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(LABEL_MAGIC)?;
    f.write_all(&(index.per_batch.len() as u32).to_le_bytes())?;
    for labels in &index.per_batch {
        f.write_all(&(labels.len() as u32).to_le_bytes())?;
        for &l in labels {
            f.write_all(&l.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_label_file(path: &Path) -> Result<LabelIndex> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(|_| Error::CorruptHeader {
        path: path.display().to_string(),
        reason: "file shorter than magic".to_string(),
    })?;
    if &magic != LABEL_MAGIC {
        return Err(Error::CorruptHeader {
            path: path.display().to_string(),
            reason: format!("bad magic {magic:?}"),
        });
    }
    let batches = read_u32(&mut f, path)? as usize;
    let mut per_batch = Vec::with_capacity(batches);
    for _ in 0..batches {
        let n = read_u32(&mut f, path)? as usize;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(read_u32(&mut f, path)?);
        }
        per_batch.push(labels);
    }
    Ok(LabelIndex { per_batch })
}

/// Mean image over all examples of the given batch files.
pub fn mean_of_batches(paths: &[PathBuf]) -> Result<MeanImage> {
    let first = read_batch_file(&paths[0])?;
    let (c, h, w) = (first.c, first.h, first.w);
    let len = c * h * w;
    let mut acc = vec![0f64; len];
    let mut count = 0usize;
    for path in paths {
        let batch = read_batch_file(path)?;
        if (batch.c, batch.h, batch.w) != (c, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "batch {} has differing dims",
                path.display()
            )));
        }
        for e in 0..batch.n {
            for (a, &px) in acc.iter_mut().zip(&batch.data[e * len..(e + 1) * len]) {
                *a += px as f64;
            }
        }
        count += batch.n;
    }
    Ok(MeanImage {
        c,
        h,
        w,
        values: acc.iter().map(|a| (*a / count as f64) as f32).collect(),
    })
}

/// Canonical batch-file name: zero-padded batch index.
pub fn batch_file_name(prefix: &str, index: usize) -> String {
    format!("{prefix}_{index:06}.pxb")
}

/// Batch index from a filename, for label lookup and seed derivation. Falls
/// back to a name hash when no digit run is present.
pub fn parse_batch_index(name: &str) -> u64 {
    let stem = name.rsplit('/').next().unwrap_or(name);
    let digits: String = stem
        .chars()
        .skip_while(|ch| !ch.is_ascii_digit())
        .take_while(|ch| ch.is_ascii_digit())
        .collect();
    match digits.parse::<u64>() {
        Ok(v) => v,
        Err(_) => crate::util::fnv1a64(stem.as_bytes()),
    }
}

/// splitmix64 finalizer: per-batch preprocessing seed from the run seed and
/// the batch index, independent of which thread does the work.
pub fn preprocess_seed(base: u64, batch_index: u64) -> u64 {
    let mut z = base ^ batch_index.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Mean-subtract, crop and (in train mode) randomly mirror a raw batch.
/// Train mode draws one crop offset and one mirror flag per batch from the
/// given seed; val mode center-crops and never mirrors, so two val calls are
/// identical. Output is flattened to n x (c * crop.h * crop.w).
pub fn preprocess(
    raw: &RawBatch,
    mean: &MeanImage,
    phase: Phase,
    crop: CropSpec,
    seed: u64,
) -> Result<(Vec<f32>, usize)> {
    if (raw.c, raw.h, raw.w) != (mean.c, mean.h, mean.w) {
        return Err(Error::ShapeMismatch(format!(
            "batch {}x{}x{} vs mean {}x{}x{}",
            raw.c, raw.h, raw.w, mean.c, mean.h, mean.w
        )));
    }
    if crop.h > raw.h || crop.w > raw.w {
        return Err(Error::CropLargerThanImage {
            crop_h: crop.h,
            crop_w: crop.w,
            h: raw.h,
            w: raw.w,
        });
    }

    let (oy, ox, mirror) = match phase {
        Phase::Train => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let oy = rng.random_range(0..=raw.h - crop.h);
            let ox = rng.random_range(0..=raw.w - crop.w);
            let mirror = rng.random_bool(0.5);
            (oy, ox, mirror)
        }
        Phase::Val => ((raw.h - crop.h) / 2, (raw.w - crop.w) / 2, false),
    };

    let dim = raw.c * crop.h * crop.w;
    let example_len = raw.example_len();
    let mut out = Vec::with_capacity(raw.n * dim);
    for e in 0..raw.n {
        let base = e * example_len;
        for ch in 0..raw.c {
            for y in 0..crop.h {
                for x in 0..crop.w {
                    let sx = if mirror { crop.w - 1 - x } else { x };
                    let src = ch * raw.h * raw.w + (oy + y) * raw.w + (ox + sx);
                    out.push(raw.data[base + src] as f32 - mean.values[src]);
                }
            }
        }
    }
    Ok((out, dim))
}

/// A preprocessed batch handed from the loader to the trainer. Labels are
/// the trainer's business: it looks them up by `batch_index` in the
/// in-memory label index.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub x: Vec<f32>,
    pub n: usize,
    pub dim: usize,
    pub batch_index: u64,
    pub filename: String,
}

/// What the loader reports back on the notify channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoaderNotify {
    Ready,
    Failed(String),
}

/// Loader-side configuration.
#[derive(Debug, Clone)]
pub struct LoaderConfig {
    pub mean: MeanImage,
    pub crop: CropSpec,
    pub base_seed: u64,
    /// Artificial extra latency per file load, for overlap experiments.
    pub load_delay: Duration,
}

/// Handle on a spawned loader thread: its control channel, notify channel
/// and the shared input slot.
pub struct Loader {
    pub ctrl: Sender<ControlMessage>,
    pub notify: Receiver<LoaderNotify>,
    pub input: Arc<Mutex<Option<PreparedBatch>>>,
    handle: std::thread::JoinHandle<()>,
}

impl Loader {
    /// Tell the loader to stop and wait for it to exit.
    pub fn stop(self) -> Result<()> {
        // a dead loader has already stopped; that is fine here
        let _ = self.ctrl.send(ControlMessage::Mode(ModeMsg::Stop));
        self.handle
            .join()
            .map_err(|_| Error::ProtocolViolation("loader panicked".to_string()))
    }
}

/// Start the loading thread for a directory of batch files.
pub fn spawn_loader(dir: PathBuf, cfg: LoaderConfig) -> Loader {
    let (ctrl_tx, ctrl_rx) = std::sync::mpsc::channel();
    let (notify_tx, notify_rx) = std::sync::mpsc::channel();
    let input: Arc<Mutex<Option<PreparedBatch>>> = Arc::new(Mutex::new(None));
    let slot = input.clone();
    let handle = std::thread::Builder::new()
        .name("loader".to_string())
        .spawn(move || loader_loop(&ctrl_rx, &notify_tx, &slot, &dir, &cfg))
        .expect("spawn loader thread");
    Loader {
        ctrl: ctrl_tx,
        notify: notify_rx,
        input,
        handle,
    }
}

fn load_and_preprocess(
    dir: &Path,
    filename: &str,
    phase: Phase,
    cfg: &LoaderConfig,
) -> Result<PreparedBatch> {
    if !cfg.load_delay.is_zero() {
        std::thread::sleep(cfg.load_delay);
    }
    let raw = read_batch_file(&dir.join(filename))?;
    let batch_index = parse_batch_index(filename);
    let seed = preprocess_seed(cfg.base_seed, batch_index);
    let (x, dim) = preprocess(&raw, &cfg.mean, phase, cfg.crop, seed)?;
    Ok(PreparedBatch {
        x,
        n: raw.n,
        dim,
        batch_index,
        filename: filename.to_string(),
    })
}

/// The loading-process state machine. Public so tests can drive it over
/// bare channels; trainers go through `spawn_loader`.
pub fn loader_loop(
    ctrl: &Receiver<ControlMessage>,
    notify: &Sender<LoaderNotify>,
    input: &Mutex<Option<PreparedBatch>>,
    dir: &Path,
    cfg: &LoaderConfig,
) {
    // A message that broke the inner loop becomes the outer loop's mode
    // word; nothing is received twice.
    let mut pending: Option<ControlMessage> = None;

    'outer: loop {
        let msg = match pending.take() {
            Some(m) => m,
            None => match ctrl.recv() {
                Ok(m) => m,
                Err(_) => return, // trainer gone
            },
        };
        let phase = match msg {
            ControlMessage::Mode(ModeMsg::Stop) => return,
            ControlMessage::Mode(ModeMsg::Train) => Phase::Train,
            ControlMessage::Mode(ModeMsg::Val) => Phase::Val,
            other => {
                let _ = notify.send(LoaderNotify::Failed(format!(
                    "expected mode, got {other:?}"
                )));
                return;
            }
        };

        // First filename of the stream.
        let mut filename = match ctrl.recv() {
            Ok(ControlMessage::Filename(f)) => f,
            Ok(m @ ControlMessage::Mode(_)) => {
                pending = Some(m);
                continue 'outer;
            }
            Ok(ControlMessage::Notify) => {
                let _ = notify.send(LoaderNotify::Failed(
                    "expected filename, got notify".to_string(),
                ));
                return;
            }
            Err(_) => return,
        };

        loop {
            // Load and preprocess into staging.
            let staging = match load_and_preprocess(dir, &filename, phase, cfg) {
                Ok(b) => b,
                Err(e) => {
                    // stop-with-error: the trainer learns why, the loop ends
                    let _ = notify.send(LoaderNotify::Failed(e.to_string()));
                    return;
                }
            };

            // Wait for training on the last input batch to finish: the next
            // control message doubles as that signal.
            match ctrl.recv() {
                Ok(ControlMessage::Filename(f)) => {
                    filename = f;
                    *input.lock().unwrap() = Some(staging);
                    if notify.send(LoaderNotify::Ready).is_err() {
                        return;
                    }
                }
                Ok(m @ ControlMessage::Mode(_)) => {
                    // mode switch or stop: staging is discarded
                    pending = Some(m);
                    continue 'outer;
                }
                Ok(ControlMessage::Notify) => {
                    let _ = notify.send(LoaderNotify::Failed(
                        "expected filename or mode, got notify".to_string(),
                    ));
                    return;
                }
                Err(_) => return,
            }
        }
    }
}

/// Wall-clock summary of one pipelined pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineStats {
    pub batches: usize,
    pub wall_seconds: f64,
}

/// Drive the loader through one epoch of files, invoking `on_batch` for each
/// delivered batch while the loader preprocesses the next file. Preprocess
/// of batch t+1 overlaps compute on batch t; the delivered sequence equals
/// the serial sequence under the same seed.
pub fn pipelined_epoch<F>(
    loader: &Loader,
    phase: Phase,
    files: &[String],
    mut on_batch: F,
) -> Result<PipelineStats>
where
    F: FnMut(PreparedBatch) -> Result<()>,
{
    let started = Instant::now();
    if files.is_empty() {
        return Ok(PipelineStats {
            batches: 0,
            wall_seconds: 0.0,
        });
    }
    let gone = || Error::ProtocolViolation("loader exited".to_string());
    loader
        .ctrl
        .send(ControlMessage::Mode(phase.mode_msg()))
        .map_err(|_| gone())?;
    loader
        .ctrl
        .send(ControlMessage::Filename(files[0].clone()))
        .map_err(|_| gone())?;

    for i in 0..files.len() {
        // Next filename; past the end, a repeat of the last file flushes the
        // final staged batch (its extra load is discarded at the mode switch).
        let next = files.get(i + 1).unwrap_or(&files[files.len() - 1]);
        loader
            .ctrl
            .send(ControlMessage::Filename(next.clone()))
            .map_err(|_| gone())?;
        match loader.notify.recv() {
            Ok(LoaderNotify::Ready) => {}
            Ok(LoaderNotify::Failed(reason)) => {
                return Err(Error::ProtocolViolation(reason));
            }
            Err(_) => return Err(gone()),
        }
        let batch = loader
            .input
            .lock()
            .unwrap()
            .take()
            .ok_or_else(|| Error::ProtocolViolation("input slot empty after notify".to_string()))?;
        on_batch(batch)?;
    }

    Ok(PipelineStats {
        batches: files.len(),
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Parameters for generating a synthetic image-classification corpus as
/// batch files: class-dependent pixel patterns plus Gaussian noise,
/// quantized to u8.
#[derive(Debug, Clone)]
pub struct SyntheticFilesSpec {
    pub batches: usize,
    pub per_batch: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub classes: usize,
    pub difficulty: f64,
    pub seed: u64,
}

/// Write `spec.batches` batch files named `<prefix>_NNNNNN.pxb` plus the
/// label index `<prefix>_labels.pxl`. Returns the batch file names.
pub fn write_synthetic_batches(
    dir: &Path,
    prefix: &str,
    spec: &SyntheticFilesSpec,
) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pixels = spec.c * spec.h * spec.w;

    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            (0..pixels)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect();

    let mut names = Vec::with_capacity(spec.batches);
    let mut per_batch_labels = Vec::with_capacity(spec.batches);
    for b in 0..spec.batches {
        let mut data = Vec::with_capacity(spec.per_batch * pixels);
        let mut labels = Vec::with_capacity(spec.per_batch);
        for _ in 0..spec.per_batch {
            let class = rng.random_range(0..spec.classes);
            labels.push(class as u32);
            for p in 0..pixels {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let v = 128.0 + 40.0 * (centers[class][p] + spec.difficulty * noise);
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
        let name = batch_file_name(prefix, b);
        write_batch_file(
            &dir.join(&name),
            &RawBatch {
                n: spec.per_batch,
                c: spec.c,
                h: spec.h,
                w: spec.w,
                data,
            },
        )?;
        names.push(name);
        per_batch_labels.push(labels);
    }
    write_label_file(
        &dir.join(format!("{prefix}_labels.pxl")),
        &LabelIndex {
            per_batch: per_batch_labels,
        },
    )?;
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::ControlMessage as Cm;

    fn tiny_batch() -> RawBatch {
        RawBatch {
            n: 2,
            c: 1,
            h: 3,
            w: 3,
            data: (0..18).collect(),
        }
    }

    fn flat_mean(c: usize, h: usize, w: usize, v: f32) -> MeanImage {
        MeanImage {
            c,
            h,
            w,
            values: vec![v; c * h * w],
        }
    }

    #[test]
    fn batch_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch_000000.pxb");
        let batch = tiny_batch();
        write_batch_file(&path, &batch).unwrap();
        let back = read_batch_file(&path).unwrap();
        assert_eq!(back, batch);
    }

    #[test]
    fn minimal_single_example_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.pxb");
        let batch = RawBatch {
            n: 1,
            c: 1,
            h: 1,
            w: 1,
            data: vec![42],
        };
        write_batch_file(&path, &batch).unwrap();
        assert_eq!(read_batch_file(&path).unwrap(), batch);
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pxb");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            read_batch_file(&path),
            Err(Error::CorruptHeader { .. })
        ));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.pxb");
        let batch = tiny_batch();
        write_batch_file(&path, &batch).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            read_batch_file(&path),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn mean_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mean.pxm");
        let mean = MeanImage {
            c: 2,
            h: 2,
            w: 2,
            values: (0..8).map(|i| i as f32 * 0.5).collect(),
        };
        write_mean_file(&path, &mean).unwrap();
        assert_eq!(read_mean_file(&path).unwrap(), mean);
    }

    #[test]
    fn label_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.pxl");
        let index = LabelIndex {
            per_batch: vec![vec![0, 1, 2], vec![1, 1], vec![]],
        };
        write_label_file(&path, &index).unwrap();
        assert_eq!(read_label_file(&path).unwrap(), index);
    }

    #[test]
    fn constant_batch_minus_its_mean_is_zero() {
        let raw = RawBatch {
            n: 1,
            c: 1,
            h: 2,
            w: 2,
            data: vec![7, 7, 7, 7],
        };
        let mean = flat_mean(1, 2, 2, 7.0);
        let (out, dim) = preprocess(
            &raw,
            &mean,
            Phase::Val,
            CropSpec { h: 2, w: 2 },
            0,
        )
        .unwrap();
        assert_eq!(dim, 4);
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn val_preprocess_is_deterministic() {
        let raw = tiny_batch();
        let mean = flat_mean(1, 3, 3, 1.0);
        let crop = CropSpec { h: 2, w: 2 };
        let a = preprocess(&raw, &mean, Phase::Val, crop, 1).unwrap();
        let b = preprocess(&raw, &mean, Phase::Val, crop, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_preprocess_is_seed_reproducible() {
        let raw = tiny_batch();
        let mean = flat_mean(1, 3, 3, 0.0);
        let crop = CropSpec { h: 2, w: 2 };
        let a = preprocess(&raw, &mean, Phase::Train, crop, 99).unwrap();
        let b = preprocess(&raw, &mean, Phase::Train, crop, 99).unwrap();
        assert_eq!(a, b);
        // different seeds eventually differ (crop offset or mirror changes)
        let mut any_differ = false;
        for seed in 0..16 {
            if preprocess(&raw, &mean, Phase::Train, crop, seed).unwrap() != a {
                any_differ = true;
                break;
            }
        }
        assert!(any_differ);
    }

    #[test]
    fn crop_larger_than_image_rejected() {
        let raw = tiny_batch();
        let mean = flat_mean(1, 3, 3, 0.0);
        assert!(matches!(
            preprocess(&raw, &mean, Phase::Val, CropSpec { h: 4, w: 2 }, 0),
            Err(Error::CropLargerThanImage { .. })
        ));
    }

    #[test]
    fn stop_first_exits_without_reading() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = LoaderConfig {
            mean: flat_mean(1, 3, 3, 0.0),
            crop: CropSpec { h: 2, w: 2 },
            base_seed: 0,
            load_delay: Duration::ZERO,
        };
        let loader = spawn_loader(dir.path().to_path_buf(), cfg);
        loader.stop().unwrap();
    }

    #[test]
    fn m_filenames_deliver_m_batches_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticFilesSpec {
            batches: 5,
            per_batch: 2,
            c: 1,
            h: 3,
            w: 3,
            classes: 2,
            difficulty: 0.3,
            seed: 5,
        };
        let files = write_synthetic_batches(dir.path(), "batch", &spec).unwrap();
        let cfg = LoaderConfig {
            mean: flat_mean(1, 3, 3, 0.0),
            crop: CropSpec { h: 2, w: 2 },
            base_seed: 77,
            load_delay: Duration::ZERO,
        };
        let loader = spawn_loader(dir.path().to_path_buf(), cfg.clone());

        let mut got = Vec::new();
        pipelined_epoch(&loader, Phase::Train, &files, |b| {
            got.push(b);
            Ok(())
        })
        .unwrap();
        loader.stop().unwrap();

        assert_eq!(got.len(), files.len());
        // serial oracle: same files, same per-batch seeds, no pipeline
        for (i, name) in files.iter().enumerate() {
            let raw = read_batch_file(&dir.path().join(name)).unwrap();
            let seed = preprocess_seed(cfg.base_seed, parse_batch_index(name));
            let (x, dim) = preprocess(&raw, &cfg.mean, Phase::Train, cfg.crop, seed).unwrap();
            assert_eq!(got[i].x, x, "batch {i} differs from serial reference");
            assert_eq!(got[i].dim, dim);
            assert_eq!(got[i].filename, *name);
        }
    }

    #[test]
    fn mode_switch_mid_stream_reenters_outer_loop() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticFilesSpec {
            batches: 3,
            per_batch: 1,
            c: 1,
            h: 3,
            w: 3,
            classes: 2,
            difficulty: 0.3,
            seed: 6,
        };
        let files = write_synthetic_batches(dir.path(), "batch", &spec).unwrap();
        let cfg = LoaderConfig {
            mean: flat_mean(1, 3, 3, 0.0),
            crop: CropSpec { h: 2, w: 2 },
            base_seed: 3,
            load_delay: Duration::ZERO,
        };
        let loader = spawn_loader(dir.path().to_path_buf(), cfg);

        // train stream delivering one batch, then a val stream
        loader.ctrl.send(Cm::Mode(ModeMsg::Train)).unwrap();
        loader.ctrl.send(Cm::Filename(files[0].clone())).unwrap();
        loader.ctrl.send(Cm::Filename(files[1].clone())).unwrap();
        assert_eq!(loader.notify.recv().unwrap(), LoaderNotify::Ready);
        let first = loader.input.lock().unwrap().take().unwrap();
        assert_eq!(first.filename, files[0]);

        // switch to val: the staged batch for files[1] is discarded
        loader.ctrl.send(Cm::Mode(ModeMsg::Val)).unwrap();
        loader.ctrl.send(Cm::Filename(files[2].clone())).unwrap();
        loader.ctrl.send(Cm::Filename(files[2].clone())).unwrap();
        assert_eq!(loader.notify.recv().unwrap(), LoaderNotify::Ready);
        let val_batch = loader.input.lock().unwrap().take().unwrap();
        assert_eq!(val_batch.filename, files[2]);

        loader.stop().unwrap();
    }

    #[test]
    fn missing_file_reports_stop_with_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = LoaderConfig {
            mean: flat_mean(1, 3, 3, 0.0),
            crop: CropSpec { h: 2, w: 2 },
            base_seed: 0,
            load_delay: Duration::ZERO,
        };
        let loader = spawn_loader(dir.path().to_path_buf(), cfg);
        loader.ctrl.send(Cm::Mode(ModeMsg::Train)).unwrap();
        loader
            .ctrl
            .send(Cm::Filename("does_not_exist.pxb".to_string()))
            .unwrap();
        match loader.notify.recv().unwrap() {
            LoaderNotify::Failed(_) => {}
            other => panic!("expected failure, got {other:?}"),
        }
        loader.stop().unwrap();
    }

    #[test]
    fn labels_never_ride_batch_files() {
        // the batch payload is exactly n*c*h*w pixels; labels live in the
        // in-memory index loaded from the separate label file
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticFilesSpec {
            batches: 2,
            per_batch: 3,
            c: 1,
            h: 2,
            w: 2,
            classes: 2,
            difficulty: 0.1,
            seed: 1,
        };
        let files = write_synthetic_batches(dir.path(), "batch", &spec).unwrap();
        for name in &files {
            let raw = read_batch_file(&dir.path().join(name)).unwrap();
            assert_eq!(raw.data.len(), raw.n * raw.example_len());
        }
        let labels = read_label_file(&dir.path().join("batch_labels.pxl")).unwrap();
        assert_eq!(labels.per_batch.len(), 2);
        assert!(labels.per_batch.iter().all(|l| l.len() == 3));
    }
}
