//! Clip sampling: cutting aligned audio/visual windows out of stored media,
//! optional augmentation, normalization, and stage-1/stage-2 batch assembly.

use ndarray::{s, Array2, Array4};
use rand::Rng;

use super::mel::{log_mel, MEL_FLOOR};
use super::tensor_file::{read_array4, read_tensor};
use super::{Category, Label, Manifest, ManifestRecord};
use crate::config::ModelConfig;
use crate::{Error, Result};

/// One training or evaluation example: an aligned audio/visual window plus
/// its provenance.
#[derive(Debug, Clone)]
pub struct ClipSample {
    /// Normalized log-mel window, `audio_frames x mel_bins`.
    pub audio: Array2<f32>,
    /// Normalized frame stack, `visual_frames x channels x size x size`.
    pub visual: Array4<f32>,
    pub label: Label,
    pub category: Category,
    pub clip_id: String,
    pub source_id: String,
    /// Window start within the source media, in seconds.
    pub time_offset: f64,
    /// Set when a stage-1 pair could not be placed at least one slice apart.
    pub overlapped_pair: bool,
}

/// Loads a record's audio media as a log-mel matrix covering the whole clip.
/// Rank-2 files are taken as mel frames directly; rank-1 files are raw
/// waveforms and go through [`log_mel`].
pub fn load_audio(
    manifest: &Manifest,
    record: &ManifestRecord,
    cfg: &ModelConfig,
) -> Result<Array2<f32>> {
    let path = manifest.audio_path(record)?;
    let (dims, data) = read_tensor(&path)?;
    match dims.len() {
        1 => log_mel(&data, cfg),
        2 => {
            if dims[1] != cfg.mel_bins {
                return Err(Error::Shape(format!(
                    "clip {}: mel file has {} bins, config wants {}",
                    record.clip_id, dims[1], cfg.mel_bins
                )));
            }
            Array2::from_shape_vec((dims[0], dims[1]), data)
                .map_err(|e| Error::Shape(e.to_string()))
        }
        r => Err(Error::Shape(format!(
            "clip {}: audio media must be rank 1 (waveform) or 2 (mel), got rank {r}",
            record.clip_id
        ))),
    }
}

/// Loads a record's visual media and checks channel/size agreement with the
/// config. The frame count along the first axis is the media's own.
pub fn load_frames(
    manifest: &Manifest,
    record: &ManifestRecord,
    cfg: &ModelConfig,
) -> Result<Array4<f32>> {
    let path = manifest.frames_path(record)?;
    let frames = read_array4(&path)?;
    let (n, c, h, w) = frames.dim();
    if n == 0 || c != cfg.channels || h != cfg.visual_size || w != cfg.visual_size {
        return Err(Error::Shape(format!(
            "clip {}: frames are {}x{}x{}x{}, config wants Nx{}x{}x{}",
            record.clip_id, n, c, h, w, cfg.channels, cfg.visual_size, cfg.visual_size
        )));
    }
    Ok(frames)
}

/// Deterministic core of clip sampling: cuts the window starting at
/// `offset` seconds, applies the given augmentation decisions, and
/// normalizes with the manifest statistics.
///
/// Audio rows are taken from `round(offset / hop)` onward; rows past the end
/// of the media are padded with the log floor. Visual frames are placed at
/// the interior quartile points of each temporal slice (for two frames per
/// slice: 1/4 and 3/4 of the slice span) and indices past the media repeat
/// the last frame.
pub fn sample_clip_at(
    manifest: &Manifest,
    record: &ManifestRecord,
    cfg: &ModelConfig,
    offset: f64,
    grayscale: bool,
    flip: bool,
) -> Result<ClipSample> {
    let mel = load_audio(manifest, record, cfg)?;
    let frames = load_frames(manifest, record, cfg)?;
    window_at(manifest, record, &mel, &frames, cfg, offset, grayscale, flip)
}

/// [`sample_clip_at`] over media that is already in memory, so callers
/// cutting many windows from one clip (or feeding perturbed audio) load
/// and transform each file once.
#[allow(clippy::too_many_arguments)]
pub fn window_at(
    manifest: &Manifest,
    record: &ManifestRecord,
    mel: &Array2<f32>,
    frames: &Array4<f32>,
    cfg: &ModelConfig,
    offset: f64,
    grayscale: bool,
    flip: bool,
) -> Result<ClipSample> {
    let start = (offset / cfg.audio_hop_s()).round() as usize;
    let mut audio = Array2::from_elem((cfg.audio_frames, cfg.mel_bins), MEL_FLOOR.ln());
    for r in 0..cfg.audio_frames {
        let src = start + r;
        if src < mel.nrows() {
            audio.row_mut(r).assign(&mel.row(src));
        }
    }

    let n_media = frames.dim().0;
    let per_slice = cfg.visual_frames / cfg.num_slices;
    let slice_span = cfg.clip_seconds / cfg.num_slices as f64;
    let mut visual = Array4::<f32>::zeros((
        cfg.visual_frames,
        cfg.channels,
        cfg.visual_size,
        cfg.visual_size,
    ));
    for slice in 0..cfg.num_slices {
        for j in 0..per_slice {
            let t = offset + (slice as f64 + (j as f64 + 0.5) / per_slice as f64) * slice_span;
            let idx = ((t * cfg.visual_fps + 1e-9).floor() as usize).min(n_media - 1);
            visual
                .slice_mut(s![slice * per_slice + j, .., .., ..])
                .assign(&frames.slice(s![idx, .., .., ..]));
        }
    }

    if grayscale && cfg.channels == 3 {
        for mut frame in visual.outer_iter_mut() {
            for y in 0..cfg.visual_size {
                for x in 0..cfg.visual_size {
                    let luma = 0.299 * frame[[0, y, x]]
                        + 0.587 * frame[[1, y, x]]
                        + 0.114 * frame[[2, y, x]];
                    for ch in 0..3 {
                        frame[[ch, y, x]] = luma;
                    }
                }
            }
        }
    }
    if flip {
        visual.invert_axis(ndarray::Axis(3));
    }

    let st = manifest.stats;
    let (mean_a, std_a) = (st.mean_a as f32, (st.std_a as f32).max(1e-6));
    let (mean_v, std_v) = (st.mean_v as f32, (st.std_v as f32).max(1e-6));
    audio.mapv_inplace(|x| (x - mean_a) / std_a);
    visual.mapv_inplace(|x| (x - mean_v) / std_v);

    Ok(ClipSample {
        audio,
        visual,
        label: record.label,
        category: record.category,
        clip_id: record.clip_id.clone(),
        source_id: record.source_id.clone(),
        time_offset: offset,
        overlapped_pair: false,
    })
}

/// Samples one window at a random offset. With `augment` set, grayscale and
/// horizontal flip are each applied with probability 1/2 (jointly over all
/// frames of the clip).
pub fn sample_clip<R: Rng + ?Sized>(
    manifest: &Manifest,
    record: &ManifestRecord,
    cfg: &ModelConfig,
    rng: &mut R,
    augment: bool,
) -> Result<ClipSample> {
    let span = record.duration_s - cfg.clip_seconds;
    let offset = if span > 0.0 { rng.random::<f64>() * span } else { 0.0 };
    let (grayscale, flip) = if augment {
        (rng.random_bool(0.5), rng.random_bool(0.5))
    } else {
        (false, false)
    };
    sample_clip_at(manifest, record, cfg, offset, grayscale, flip)
}

/// Draws a second offset at least `gap` seconds away from `first` within
/// `[0, span]`, or `None` when no such offset exists.
fn draw_disjoint_offset<R: Rng + ?Sized>(
    rng: &mut R,
    span: f64,
    first: f64,
    gap: f64,
) -> Option<f64> {
    let left = (first - gap).max(0.0);
    let right_start = first + gap;
    let right = (span - right_start).max(0.0);
    let total = left + right;
    if total <= 0.0 {
        return None;
    }
    let u = rng.random::<f64>() * total;
    Some(if u < left { u } else { right_start + (u - left) })
}

/// Builds a self-supervised batch: `batch_size / 2` clips, each contributing
/// two windows from the same source at different offsets. Pairs are placed
/// adjacently. Offsets are kept at least one slice duration apart when the
/// media is long enough; otherwise the pair is drawn overlapping and both
/// samples carry `overlapped_pair`.
pub fn make_stage1_batch<R: Rng + ?Sized>(
    manifest: &Manifest,
    cfg: &ModelConfig,
    rng: &mut R,
    batch_size: usize,
) -> Result<Vec<ClipSample>> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::Invalid(format!(
            "stage-1 batch size must be even and positive, got {batch_size}"
        )));
    }
    if manifest.records.is_empty() {
        return Err(Error::Invalid("stage-1 batch from an empty manifest".to_string()));
    }
    if let Some(f) = manifest.records.iter().find(|r| r.label != Label::Real) {
        return Err(Error::Invalid(format!(
            "stage-1 batches require a real-only manifest; found fake clip {}",
            f.clip_id
        )));
    }
    let augment = cfg.train.augment;
    let gap = cfg.clip_seconds / cfg.num_slices as f64;
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size / 2 {
        let record = &manifest.records[rng.random_range(0..manifest.records.len())];
        let span = (record.duration_s - cfg.clip_seconds).max(0.0);
        let o1 = if span > 0.0 { rng.random::<f64>() * span } else { 0.0 };
        let (o2, overlapped) = match draw_disjoint_offset(rng, span, o1, gap) {
            Some(o2) => (o2, false),
            None => (if span > 0.0 { rng.random::<f64>() * span } else { 0.0 }, true),
        };
        for offset in [o1, o2] {
            let (grayscale, flip) = if augment {
                (rng.random_bool(0.5), rng.random_bool(0.5))
            } else {
                (false, false)
            };
            let mut sample = sample_clip_at(manifest, record, cfg, offset, grayscale, flip)?;
            sample.overlapped_pair = overlapped;
            batch.push(sample);
        }
    }
    Ok(batch)
}

/// Per-record sampling weights inversely proportional to class frequency,
/// plus a warning when the manifest holds a single class (weights fall back
/// to uniform).
pub fn class_weights(manifest: &Manifest) -> (Vec<f64>, Option<String>) {
    let n_real = manifest.records.iter().filter(|r| r.label == Label::Real).count();
    let n_fake = manifest.records.len() - n_real;
    if n_real == 0 || n_fake == 0 {
        let warning = format!(
            "manifest holds a single class ({} real, {} fake); falling back to uniform sampling",
            n_real, n_fake
        );
        return (vec![1.0; manifest.records.len()], Some(warning));
    }
    let weights = manifest
        .records
        .iter()
        .map(|r| match r.label {
            Label::Real => 1.0 / n_real as f64,
            Label::Fake => 1.0 / n_fake as f64,
        })
        .collect();
    (weights, None)
}

/// Builds a supervised batch with class-balanced sampling (with
/// replacement). Single-class manifests degrade to uniform sampling; call
/// [`class_weights`] to surface the warning.
pub fn make_stage2_batch<R: Rng + ?Sized>(
    manifest: &Manifest,
    cfg: &ModelConfig,
    rng: &mut R,
    batch_size: usize,
) -> Result<Vec<ClipSample>> {
    if manifest.records.is_empty() {
        return Err(Error::Invalid("stage-2 batch from an empty manifest".to_string()));
    }
    let (weights, _) = class_weights(manifest);
    let mut cum = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in &weights {
        acc += w;
        cum.push(acc);
    }
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let u = rng.random::<f64>() * acc;
        let idx = cum.partition_point(|&c| c <= u).min(weights.len() - 1);
        batch.push(sample_clip(manifest, &manifest.records[idx], cfg, rng, cfg.train.augment)?);
    }
    Ok(batch)
}
