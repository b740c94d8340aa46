//! Windowed inference, threshold-free metrics, evaluation protocols,
//! audio perturbations, and embedding export.
//!
//! A clip longer than the model's window T is scored as the mean of
//! block logits over overlapping T-length windows with a T/8 stride.
//! AUC and AP are computed from scratch (rank statistic and step
//! interpolation); both refuse single-class inputs. Protocol splits are
//! deterministic functions of the manifest and a seed, and always keep
//! source identities on one side.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array4};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbone::{cross_modal_convert, encode, Direction, Modality, ParamBinder, ParameterStore};
use crate::config::{derive_geometry, ModelConfig};
use crate::data::{
    load_audio, load_frames, window_at, Category, ClipSample, Label, Manifest, ManifestRecord,
    MEL_FLOOR,
};
use crate::tensor::Tape;
use crate::tokenizer::TokenizedPair;
use crate::training::{stage2_logits, AblationFlags};
use crate::{Error, Result};

/// Numerically stable two-way softmax.
pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

/// Classifier logits for one sampled window, forward only.
pub fn score_sample(
    params: &ParameterStore,
    sample: &ClipSample,
    cfg: &ModelConfig,
    flags: &AblationFlags,
) -> Result<[f64; 2]> {
    let tp = TokenizedPair::new(&sample.audio, &sample.visual, cfg)?;
    let mut tape: Tape<f32> = Tape::new();
    let mut binder = ParamBinder::new(params);
    let logits = stage2_logits(&mut tape, &mut binder, &tp, cfg, flags)?;
    let v = tape.value(logits);
    Ok([v[[0, 0]] as f64, v[[0, 1]] as f64])
}

/// Window start offsets for a clip: 0, T/8, 2T/8, ... while the window
/// still fits. Clips shorter than T get a single padded window at 0.
pub fn block_offsets(duration_s: f64, clip_seconds: f64) -> Vec<f64> {
    let step = clip_seconds / 8.0;
    let mut offsets = Vec::new();
    let mut k = 0u64;
    loop {
        let o = k as f64 * step;
        if o + clip_seconds <= duration_s + 1e-9 {
            offsets.push(o);
            k += 1;
        } else {
            break;
        }
    }
    if offsets.is_empty() {
        offsets.push(0.0);
    }
    offsets
}

/// One clip's windowed-inference outcome.
#[derive(Debug, Clone)]
pub struct ClipScore {
    pub clip_id: String,
    pub label: Label,
    pub category: Category,
    pub n_blocks: usize,
    pub mean_logits: [f64; 2],
    /// Softmax fake-probability of the mean logits.
    pub score: f64,
    /// Argmax of the mean logits.
    pub prediction: Label,
}

fn infer_from_media(
    params: &ParameterStore,
    manifest: &Manifest,
    record: &ManifestRecord,
    mel: &Array2<f32>,
    frames: &Array4<f32>,
    cfg: &ModelConfig,
    flags: &AblationFlags,
) -> Result<ClipScore> {
    let offsets = block_offsets(record.duration_s, cfg.clip_seconds);
    let mut mean = [0.0f64; 2];
    for &offset in &offsets {
        let sample = window_at(manifest, record, mel, frames, cfg, offset, false, false)?;
        let l = score_sample(params, &sample, cfg, flags)?;
        mean[0] += l[0];
        mean[1] += l[1];
    }
    let n = offsets.len() as f64;
    mean[0] /= n;
    mean[1] /= n;
    let score = softmax2(mean)[1];
    Ok(ClipScore {
        clip_id: record.clip_id.clone(),
        label: record.label,
        category: record.category,
        n_blocks: offsets.len(),
        mean_logits: mean,
        score,
        prediction: if mean[1] > mean[0] { Label::Fake } else { Label::Real },
    })
}

/// Scores one clip by windowed inference over its whole duration.
pub fn infer_clip(
    params: &ParameterStore,
    manifest: &Manifest,
    record: &ManifestRecord,
    cfg: &ModelConfig,
    flags: &AblationFlags,
) -> Result<ClipScore> {
    let mel = load_audio(manifest, record, cfg)?;
    let frames = load_frames(manifest, record, cfg)?;
    infer_from_media(params, manifest, record, &mel, &frames, cfg, flags)
}

/// [`infer_clip`] with the clip's audio perturbed once before windowing.
#[allow(clippy::too_many_arguments)]
pub fn infer_clip_perturbed<R: Rng + ?Sized>(
    params: &ParameterStore,
    manifest: &Manifest,
    record: &ManifestRecord,
    cfg: &ModelConfig,
    flags: &AblationFlags,
    kind: PerturbKind,
    level: usize,
    rng: &mut R,
) -> Result<ClipScore> {
    let mel = load_audio(manifest, record, cfg)?;
    let mel = perturb_audio(&mel, kind, level, cfg, rng)?;
    let frames = load_frames(manifest, record, cfg)?;
    infer_from_media(params, manifest, record, &mel, &frames, cfg, flags)
}

fn class_counts(labels: &[Label]) -> (usize, usize) {
    let fake = labels.iter().filter(|&&l| l == Label::Fake).count();
    (fake, labels.len() - fake)
}

fn check_two_classes(scores: &[f64], labels: &[Label], what: &str) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{what}: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let (fake, real) = class_counts(labels);
    if fake == 0 || real == 0 {
        return Err(Error::DegenerateMetric(format!(
            "{what} needs both classes, got {fake} fake / {real} real"
        )));
    }
    Ok((fake, real))
}

/// Area under the ROC curve via the rank statistic, ties averaged.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (n_fake, n_real) = check_two_classes(scores, labels, "AUC")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks, averaged over the tie group [i, j].
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum_fake: f64 =
        labels.iter().zip(&ranks).filter(|(l, _)| **l == Label::Fake).map(|(_, r)| r).sum();
    let u = rank_sum_fake - (n_fake * (n_fake + 1)) as f64 / 2.0;
    Ok(u / (n_fake as f64 * n_real as f64))
}

/// Average precision: area under the precision-recall curve by step
/// interpolation, processing tied scores as one threshold.
pub fn ap(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (n_fake, _) = check_two_classes(scores, labels, "AP")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            match labels[k] {
                Label::Fake => tp += 1,
                Label::Real => fp += 1,
            }
        }
        let recall = tp as f64 / n_fake as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(area)
}

/// Fraction of correct decisions at threshold 0.5 on the fake-probability.
pub fn acc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Invalid(format!(
            "ACC: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| (**s > 0.5) == (**l == Label::Fake))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Per-clip scores plus the aggregate metrics over one evaluation set.
/// AUC and AP are absent when the set holds a single class.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Sorted by clip id.
    pub rows: Vec<ClipScore>,
    pub acc: f64,
    pub auc: Option<f64>,
    pub ap: Option<f64>,
}

fn aggregate(mut rows: Vec<ClipScore>) -> EvalReport {
    rows.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<Label> = rows.iter().map(|r| r.label).collect();
    let correct = rows.iter().filter(|r| r.prediction == r.label).count();
    EvalReport {
        acc: correct as f64 / rows.len().max(1) as f64,
        auc: auc(&scores, &labels).ok(),
        ap: ap(&scores, &labels).ok(),
        rows,
    }
}

/// Windowed inference over every clip of the manifest.
pub fn evaluate(
    params: &ParameterStore,
    manifest: &Manifest,
    cfg: &ModelConfig,
    flags: &AblationFlags,
) -> Result<EvalReport> {
    if manifest.records.is_empty() {
        return Err(Error::Invalid("evaluate on an empty manifest".into()));
    }
    let rows = manifest
        .records
        .iter()
        .map(|r| infer_clip(params, manifest, r, cfg, flags))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(rows))
}

fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// [`evaluate`] with every clip's audio perturbed. Each clip gets an rng
/// derived from the seed and its id, so results do not depend on
/// evaluation order.
pub fn evaluate_perturbed(
    params: &ParameterStore,
    manifest: &Manifest,
    cfg: &ModelConfig,
    flags: &AblationFlags,
    kind: PerturbKind,
    level: usize,
    seed: u64,
) -> Result<EvalReport> {
    if manifest.records.is_empty() {
        return Err(Error::Invalid("evaluate on an empty manifest".into()));
    }
    let rows = manifest
        .records
        .iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&r.clip_id));
            infer_clip_perturbed(params, manifest, r, cfg, flags, kind, level, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(rows))
}

fn split_sources(manifest: &Manifest, held_out_frac: f64, seed: u64) -> Result<BTreeSet<String>> {
    let mut sources = manifest.source_ids();
    if sources.len() < 2 {
        return Err(Error::Invalid(format!(
            "split needs at least 2 source identities, found {}",
            sources.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1e7a_5b17);
    sources.shuffle(&mut rng);
    let n = sources.len();
    let n_test = ((n as f64 * held_out_frac).round() as usize).clamp(1, n - 1);
    Ok(sources.into_iter().take(n_test).collect())
}

/// Deterministic 70/30 train/test split by source identity.
pub fn intra_split(manifest: &Manifest, seed: u64) -> Result<(Manifest, Manifest)> {
    let test_sources = split_sources(manifest, 0.3, seed)?;
    let train = manifest.filtered(|r| !test_sources.contains(&r.source_id));
    let test = manifest.filtered(|r| test_sources.contains(&r.source_id));
    Ok((train, test))
}

/// One leave-one-category-out split: the training half holds every other
/// category on the train sources, the test half holds real clips and the
/// held-out category on the test sources.
#[derive(Debug)]
pub struct LocoSplit {
    pub held_out: Category,
    pub train: Manifest,
    pub test: Manifest,
}

/// Builds one split per fake category present in the manifest. Source
/// identities are split 70/30 first, so no identity crosses sides.
pub fn loco_splits(manifest: &Manifest, seed: u64) -> Result<Vec<LocoSplit>> {
    let fake_cats: BTreeSet<Category> = manifest
        .records
        .iter()
        .filter(|r| r.label == Label::Fake)
        .map(|r| r.category)
        .collect();
    if fake_cats.len() < 2 {
        return Err(Error::Invalid(format!(
            "leave-one-category-out needs at least 2 fake categories, found {}",
            fake_cats.len()
        )));
    }
    let test_sources = split_sources(manifest, 0.3, seed)?;
    let splits = fake_cats
        .into_iter()
        .map(|held_out| LocoSplit {
            held_out,
            train: manifest.filtered(|r| {
                !test_sources.contains(&r.source_id) && r.category != held_out
            }),
            test: manifest.filtered(|r| {
                test_sources.contains(&r.source_id)
                    && (r.category == Category::Real || r.category == held_out)
            }),
        })
        .collect();
    Ok(splits)
}

/// True for categories whose visual stream is manipulated.
pub fn has_fake_visual(category: Category) -> bool {
    matches!(
        category,
        Category::FvraWl
            | Category::FvraFs
            | Category::FvraGan
            | Category::FvfaFs
            | Category::FvfaGan
            | Category::FvfaWl
            | Category::SynthFv
            | Category::SynthFav
            | Category::SynthSwap
    )
}

/// Evaluation protocol selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Evaluate the 30% source-held-out side of the manifest.
    Intra,
    /// Evaluate each leave-one-category-out test set, plus the AVG-FV
    /// summary over categories with fake visuals.
    LeaveOneCategoryOut,
    /// Evaluate the manifest as given (a corpus the model never saw).
    CrossCorpus,
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "intra" => Ok(Protocol::Intra),
            "loco" => Ok(Protocol::LeaveOneCategoryOut),
            "cross-corpus" | "cross_corpus" => Ok(Protocol::CrossCorpus),
            other => Err(format!("unknown protocol {other:?} (expected intra|loco|cross-corpus)")),
        }
    }
}

/// One named evaluation outcome of [`run_protocol`].
#[derive(Debug)]
pub struct ProtocolResult {
    pub name: String,
    pub report: EvalReport,
}

/// Evaluates an already-trained model under a protocol's test splits.
/// LOCO yields one result per held-out category plus an `AVG-FV` summary
/// row (mean metrics over fake-visual categories, no per-clip rows);
/// training per split is the caller's business.
pub fn run_protocol(
    params: &ParameterStore,
    manifest: &Manifest,
    cfg: &ModelConfig,
    flags: &AblationFlags,
    protocol: Protocol,
    seed: u64,
) -> Result<Vec<ProtocolResult>> {
    match protocol {
        Protocol::Intra => {
            let (_, test) = intra_split(manifest, seed)?;
            let report = evaluate(params, &test, cfg, flags)?;
            Ok(vec![ProtocolResult { name: "intra".into(), report }])
        }
        Protocol::CrossCorpus => {
            let report = evaluate(params, manifest, cfg, flags)?;
            Ok(vec![ProtocolResult { name: "cross-corpus".into(), report }])
        }
        Protocol::LeaveOneCategoryOut => {
            let mut results = Vec::new();
            let mut fv = Vec::new();
            for split in loco_splits(manifest, seed)? {
                let report = evaluate(params, &split.test, cfg, flags)?;
                if has_fake_visual(split.held_out) {
                    fv.push((report.acc, report.auc, report.ap));
                }
                results.push(ProtocolResult {
                    name: format!("LOCO-{}", split.held_out),
                    report,
                });
            }
            if !fv.is_empty() {
                let mean_opt = |xs: Vec<Option<f64>>| {
                    let vals: Vec<f64> = xs.into_iter().flatten().collect();
                    if vals.is_empty() {
                        None
                    } else {
                        Some(vals.iter().sum::<f64>() / vals.len() as f64)
                    }
                };
                let n = fv.len() as f64;
                results.push(ProtocolResult {
                    name: "AVG-FV".into(),
                    report: EvalReport {
                        rows: Vec::new(),
                        acc: fv.iter().map(|x| x.0).sum::<f64>() / n,
                        auc: mean_opt(fv.iter().map(|x| x.1).collect()),
                        ap: mean_opt(fv.iter().map(|x| x.2).collect()),
                    },
                });
            }
            Ok(results)
        }
    }
}

/// Audio perturbation families, applied in the log-mel domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbKind {
    Identity,
    GaussianNoise,
    PitchShift,
    Reverberance,
    Compression,
}

impl FromStr for PerturbKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "identity" => Ok(PerturbKind::Identity),
            "gaussian_noise" => Ok(PerturbKind::GaussianNoise),
            "pitch_shift" => Ok(PerturbKind::PitchShift),
            "reverberance" => Ok(PerturbKind::Reverberance),
            "compression" => Ok(PerturbKind::Compression),
            other => Err(format!(
                "unknown perturbation {other:?} \
                 (expected identity|gaussian_noise|pitch_shift|reverberance|compression)"
            )),
        }
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerturbKind::Identity => "identity",
            PerturbKind::GaussianNoise => "gaussian_noise",
            PerturbKind::PitchShift => "pitch_shift",
            PerturbKind::Reverberance => "reverberance",
            PerturbKind::Compression => "compression",
        })
    }
}

/// The published strength parameter for a kind at a level: SNR in dB,
/// semitones, reverberance percent, or bitrate in kbit/s. Level 0 is the
/// identity for every kind and maps to 0.
pub fn perturb_params(kind: PerturbKind, level: usize) -> Result<f64> {
    if level == 0 {
        return Ok(0.0);
    }
    if !(1..=5).contains(&level) {
        return Err(Error::Invalid(format!("perturbation level {level} outside 0..=5")));
    }
    let i = level - 1;
    Ok(match kind {
        PerturbKind::Identity => 0.0,
        PerturbKind::GaussianNoise => [40.0, 30.0, 20.0, 15.0, 10.0][i],
        PerturbKind::PitchShift => [2.0, 4.0, 6.0, 8.0, 10.0][i],
        PerturbKind::Reverberance => [20.0, 40.0, 60.0, 80.0, 100.0][i],
        PerturbKind::Compression => [320.0, 256.0, 192.0, 128.0, 64.0][i],
    })
}

/// SNR of `noisy` against `clean` in the linear mel-power domain, in dB.
pub fn measured_snr_db(clean: &Array2<f32>, noisy: &Array2<f32>) -> f64 {
    assert_eq!(clean.dim(), noisy.dim());
    let mut p_sig = 0.0f64;
    let mut p_noise = 0.0f64;
    for (&c, &y) in clean.iter().zip(noisy.iter()) {
        let (c, y) = (c.exp() as f64, y.exp() as f64);
        p_sig += c * c;
        p_noise += (y - c) * (y - c);
    }
    if p_noise == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (p_sig / p_noise).log10()
}

/// Perturbs a whole clip's log-mel matrix. Level 0 (or the identity kind)
/// returns the input bit for bit; levels 1-5 apply the published strength
/// for the kind.
pub fn perturb_audio<R: Rng + ?Sized>(
    mel: &Array2<f32>,
    kind: PerturbKind,
    level: usize,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<Array2<f32>> {
    let strength = perturb_params(kind, level)?;
    if level == 0 || kind == PerturbKind::Identity {
        return Ok(mel.clone());
    }
    Ok(match kind {
        PerturbKind::Identity => unreachable!(),
        PerturbKind::GaussianNoise => add_noise_at_snr(mel, strength, rng),
        PerturbKind::PitchShift => {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            pitch_warp(mel, sign * strength)
        }
        PerturbKind::Reverberance => reverberate(mel, strength, cfg),
        PerturbKind::Compression => compress(mel, level),
    })
}

/// Adds white noise in the linear-power domain, rescaled iteratively so
/// the realized (post-floor) noise power hits the target SNR exactly.
fn add_noise_at_snr<R: Rng + ?Sized>(mel: &Array2<f32>, snr_db: f64, rng: &mut R) -> Array2<f32> {
    let lin = mel.mapv(|x| x.exp() as f64);
    let p_sig: f64 = lin.iter().map(|&x| x * x).sum();
    let target = p_sig / 10f64.powf(snr_db / 10.0);
    let noise = Array2::from_shape_fn(mel.raw_dim(), |_| rng.sample::<f64, _>(StandardNormal));
    let floor = MEL_FLOOR as f64;
    let mut c = (target / noise.iter().map(|&x| x * x).sum::<f64>()).sqrt();
    let mut out = lin.clone();
    for _ in 0..200 {
        out.iter_mut().zip(lin.iter()).zip(noise.iter()).for_each(|((o, &l), &n)| {
            *o = (l + c * n).max(floor);
        });
        let achieved: f64 =
            out.iter().zip(lin.iter()).map(|(&o, &l)| (o - l) * (o - l)).sum();
        let ratio = target / achieved;
        if (ratio - 1.0).abs() < 1e-12 {
            break;
        }
        c *= ratio.sqrt();
    }
    out.mapv(|x| (x.ln()) as f32)
}

/// Shifts pitch by warping the frequency axis with factor 2^(semitones/12)
/// and linear interpolation; bins pulled from beyond the edge take the
/// floor.
fn pitch_warp(mel: &Array2<f32>, semitones: f64) -> Array2<f32> {
    let factor = 2f64.powf(semitones / 12.0);
    let bins = mel.ncols();
    let lin = mel.mapv(|x| x.exp() as f64);
    let mut out = Array2::from_elem(mel.raw_dim(), MEL_FLOOR.ln());
    for t in 0..mel.nrows() {
        for b in 0..bins {
            let u = b as f64 / factor;
            let i0 = u.floor() as usize;
            let frac = u - i0 as f64;
            let v = if i0 + 1 < bins {
                lin[[t, i0]] * (1.0 - frac) + lin[[t, i0 + 1]] * frac
            } else if i0 < bins {
                lin[[t, i0]]
            } else {
                continue;
            };
            out[[t, b]] = (v.max(MEL_FLOOR as f64)).ln() as f32;
        }
    }
    out
}

/// Convolves each mel band with an exponentially decaying impulse response
/// along time. Reverberance percent `r` maps to a decay reaching -60 dB at
/// `r/100` seconds; weights are normalized to preserve the overall level.
fn reverberate(mel: &Array2<f32>, reverberance: f64, cfg: &ModelConfig) -> Array2<f32> {
    let hop = cfg.audio_hop_s();
    let rt60 = reverberance / 100.0;
    let frames = mel.nrows();
    let taps = ((rt60 / hop).ceil() as usize).clamp(1, frames.max(1));
    let mut weights: Vec<f64> = (0..=taps)
        .map(|k| 10f64.powf(-6.0 * (k as f64 * hop) / rt60))
        .collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    let lin = mel.mapv(|x| x.exp() as f64);
    let mut out = Array2::zeros(mel.raw_dim());
    for b in 0..mel.ncols() {
        for t in 0..frames {
            let mut acc = 0.0;
            for (k, &w) in weights.iter().enumerate() {
                if t >= k {
                    acc += w * lin[[t - k, b]];
                }
            }
            out[[t, b]] = (acc.max(MEL_FLOOR as f64)).ln() as f32;
        }
    }
    out
}

/// Bitrate-mapped compression proxy: quantizes the log-mel values to a
/// per-level bit depth and silences the top of the band at low bitrates.
fn compress(mel: &Array2<f32>, level: usize) -> Array2<f32> {
    let bits = [8usize, 7, 6, 5, 4][level - 1];
    let keep_frac = [1.0f64, 1.0, 0.875, 0.75, 0.5][level - 1];
    let lo = MEL_FLOOR.ln();
    let hi = mel.iter().copied().fold(lo, f32::max);
    let levels = (1usize << bits) - 1;
    let step = (hi - lo) / levels as f32;
    let keep = ((mel.ncols() as f64 * keep_frac).round() as usize).max(1);
    let mut out = mel.mapv(|x| {
        if step > 0.0 {
            lo + ((x - lo) / step).round() * step
        } else {
            x
        }
    });
    for t in 0..out.nrows() {
        for b in keep..out.ncols() {
            out[[t, b]] = lo;
        }
    }
    out
}

/// Mean-pooled combined representation of one window: f_a (own audio plus
/// converted visual) and f_v (own visual plus converted audio), each
/// averaged over tokens and concatenated to a 4 x encoder_dim vector.
pub fn clip_embedding(
    params: &ParameterStore,
    sample: &ClipSample,
    cfg: &ModelConfig,
) -> Result<Vec<f32>> {
    let g = derive_geometry(cfg)?;
    let tp = TokenizedPair::new(&sample.audio, &sample.visual, cfg)?;
    let all_a: Vec<usize> = (0..g.audio_tokens_total).collect();
    let all_v: Vec<usize> = (0..g.visual_tokens_total).collect();
    let all_slices: Vec<usize> = (0..cfg.num_slices).collect();
    let mut tape: Tape<f32> = Tape::new();
    let mut binder = ParamBinder::new(params);
    let a_tok = tape.constant(tp.audio_tokens.clone());
    let v_tok = tape.constant(tp.visual_tokens.clone());
    let a = encode(&mut tape, &mut binder, a_tok, &all_a, Modality::Audio, cfg)?;
    let v = encode(&mut tape, &mut binder, v_tok, &all_v, Modality::Visual, cfg)?;
    let (a_q, _) = cross_modal_convert(&mut tape, &mut binder, v, &all_slices, Direction::V2A, cfg)?;
    let (v_q, _) = cross_modal_convert(&mut tape, &mut binder, a, &all_slices, Direction::A2V, cfg)?;
    let f_a = tape.concat_cols(a, a_q);
    let f_v = tape.concat_cols(v, v_q);
    let ma = tape.mean_rows(f_a);
    let mv = tape.mean_rows(f_v);
    let e = tape.concat_cols(ma, mv);
    Ok(tape.value(e).iter().copied().collect())
}

/// Writes one embedding row per clip (sorted by id, sampled at the clip's
/// centered window) as a tab-separated table:
/// `clip_id  label  category  e0 .. e{4*encoder_dim-1}`.
pub fn export_embeddings(
    params: &ParameterStore,
    manifest: &Manifest,
    cfg: &ModelConfig,
    out_path: &Path,
) -> Result<()> {
    let mut records: Vec<&ManifestRecord> = manifest.records.iter().collect();
    records.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    let file = fs::File::create(out_path).map_err(|e| Error::io(out_path, e))?;
    let mut out = BufWriter::new(file);
    let dim = 4 * cfg.encoder_dim;
    let mut header = String::from("clip_id\tlabel\tcategory");
    for i in 0..dim {
        header.push_str(&format!("\te{i}"));
    }
    writeln!(out, "{header}").map_err(|e| Error::io(out_path, e))?;
    for record in records {
        let offset = ((record.duration_s - cfg.clip_seconds) / 2.0).max(0.0);
        let sample = crate::data::sample_clip_at(manifest, record, cfg, offset, false, false)?;
        let emb = clip_embedding(params, &sample, cfg)?;
        let mut line = format!("{}\t{}\t{}", record.clip_id, record.label, record.category);
        for v in emb {
            line.push_str(&format!("\t{v:.6}"));
        }
        writeln!(out, "{line}").map_err(|e| Error::io(out_path, e))?;
    }
    out.flush().map_err(|e| Error::io(out_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_corpus, CorpusStats};
    use std::sync::OnceLock;
    use tempfile::TempDir;

    fn l(pattern: &[u8]) -> Vec<Label> {
        pattern.iter().map(|&b| if b == 1 { Label::Fake } else { Label::Real }).collect()
    }

    #[test]
    fn trivial_separable_case() {
        let scores = [0.9, 0.1];
        let labels = l(&[1, 0]);
        assert_eq!(auc(&scores, &labels).unwrap(), 1.0);
        assert_eq!(ap(&scores, &labels).unwrap(), 1.0);
        assert_eq!(acc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn auc_single_class_is_degenerate() {
        let err = auc(&[0.2, 0.4], &l(&[0, 0])).unwrap_err();
        assert!(matches!(err, Error::DegenerateMetric(_)), "{err}");
        let err = ap(&[0.2, 0.4], &l(&[1, 1])).unwrap_err();
        assert!(matches!(err, Error::DegenerateMetric(_)), "{err}");
    }

    fn brute_force_auc(scores: &[f64], labels: &[Label]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != Label::Fake {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != Label::Real {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_matches_pairwise_oracle_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(4..60);
            // Quantized scores force tie groups.
            let scores: Vec<f64> =
                (0..n).map(|_| (rng.random::<f64>() * 10.0).round() / 10.0).collect();
            let mut labels = l(&vec![0; n]);
            for lab in labels.iter_mut() {
                if rng.random_bool(0.5) {
                    *lab = Label::Fake;
                }
            }
            let (fake, real) = class_counts(&labels);
            if fake == 0 || real == 0 {
                continue;
            }
            let got = auc(&scores, &labels).unwrap();
            let want = brute_force_auc(&scores, &labels);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let scores: Vec<f64> = (0..80).map(|_| rng.random::<f64>()).collect();
        let mut labels = l(&vec![0; 80]);
        for lab in labels.iter_mut().step_by(3) {
            *lab = Label::Fake;
        }
        let base = auc(&scores, &labels).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|&s| (3.0 * s + 1.0).exp()).collect();
        assert!((auc(&transformed, &labels).unwrap() - base).abs() < 1e-12);
        let cubed: Vec<f64> = scores.iter().map(|&s| s.powi(3)).collect();
        assert!((auc(&cubed, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn ap_hand_computed_case() {
        let scores = [0.9, 0.8, 0.7];
        let labels = l(&[1, 0, 1]);
        let want = 0.5 + 0.5 * (2.0 / 3.0);
        assert!((ap(&scores, &labels).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn block_counts_for_key_durations() {
        let t = 3.2;
        assert_eq!(block_offsets(2.0 * t, t).len(), 9);
        assert_eq!(block_offsets(t, t).len(), 1);
        assert_eq!(block_offsets(1.5 * t, t).len(), 5);
        assert_eq!(block_offsets(0.5 * t, t).len(), 1);
    }

    #[test]
    fn block_counts_match_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = 3.2;
        for _ in 0..25 {
            let d = t * (0.3 + rng.random::<f64>() * 4.0);
            let want = if d < t { 1 } else { ((d - t) / (t / 8.0) + 1e-9).floor() as usize + 1 };
            assert_eq!(block_offsets(d, t).len(), want, "duration {d}");
        }
    }

    fn random_mel(rng: &mut ChaCha8Rng, rows: usize, bins: usize) -> Array2<f32> {
        Array2::from_shape_fn((rows, bins), |_| {
            (MEL_FLOOR + rng.random::<f32>()).ln()
        })
    }

    #[test]
    fn perturb_level_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mel = random_mel(&mut rng, 32, 8);
        let cfg = ModelConfig::tiny();
        for kind in [
            PerturbKind::Identity,
            PerturbKind::GaussianNoise,
            PerturbKind::PitchShift,
            PerturbKind::Reverberance,
            PerturbKind::Compression,
        ] {
            let out = perturb_audio(&mel, kind, 0, &cfg, &mut rng).unwrap();
            assert_eq!(out, mel);
        }
    }

    #[test]
    fn perturb_rejects_out_of_range_level() {
        let mel = Array2::from_elem((4, 4), 0.0f32);
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(perturb_audio(&mel, PerturbKind::GaussianNoise, 6, &cfg, &mut rng).is_err());
        assert!(perturb_params(PerturbKind::PitchShift, 9).is_err());
    }

    #[test]
    fn published_strength_table() {
        assert_eq!(perturb_params(PerturbKind::GaussianNoise, 1).unwrap(), 40.0);
        assert_eq!(perturb_params(PerturbKind::GaussianNoise, 5).unwrap(), 10.0);
        assert_eq!(perturb_params(PerturbKind::PitchShift, 3).unwrap(), 6.0);
        assert_eq!(perturb_params(PerturbKind::Reverberance, 4).unwrap(), 80.0);
        assert_eq!(perturb_params(PerturbKind::Compression, 5).unwrap(), 64.0);
    }

    #[test]
    fn gaussian_noise_hits_target_snr() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mel = random_mel(&mut rng, 64, 16);
        let cfg = ModelConfig::tiny();
        for level in 1..=5 {
            let target = perturb_params(PerturbKind::GaussianNoise, level).unwrap();
            let noisy =
                perturb_audio(&mel, PerturbKind::GaussianNoise, level, &cfg, &mut rng).unwrap();
            let got = measured_snr_db(&mel, &noisy);
            assert!(
                (got - target).abs() < 1e-6,
                "level {level}: measured {got} dB, target {target} dB"
            );
        }
    }

    #[test]
    fn reverb_smears_energy_forward_in_time() {
        let cfg = ModelConfig::tiny();
        let mut mel = Array2::from_elem((32, 4), MEL_FLOOR.ln());
        for b in 0..4 {
            mel[[4, b]] = 1.0f32.ln();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let out = perturb_audio(&mel, PerturbKind::Reverberance, 5, &cfg, &mut rng).unwrap();
        // The impulse leaks into later frames but not earlier ones.
        assert!(out[[6, 0]] > mel[[6, 0]] + 1.0);
        assert!((out[[2, 0]] - mel[[2, 0]]).abs() < 1e-4);
    }

    #[test]
    fn compression_quantizes_and_band_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mel = random_mel(&mut rng, 16, 8);
        let cfg = ModelConfig::tiny();
        let out = perturb_audio(&mel, PerturbKind::Compression, 5, &cfg, &mut rng).unwrap();
        let distinct = |m: &Array2<f32>| {
            let mut v: Vec<u32> = m.iter().map(|x| x.to_bits()).collect();
            v.sort_unstable();
            v.dedup();
            v.len()
        };
        assert!(distinct(&out) < distinct(&mel));
        for t in 0..16 {
            assert_eq!(out[[t, 7]], MEL_FLOOR.ln(), "top band should be silenced");
        }
    }

    struct Fixture {
        dir: TempDir,
        manifest: Manifest,
        cfg: ModelConfig,
        params: ParameterStore,
    }

    fn fixture() -> &'static Fixture {
        static FIX: OnceLock<Fixture> = OnceLock::new();
        FIX.get_or_init(|| {
            let cfg = ModelConfig::tiny();
            let dir = tempfile::tempdir().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let manifest =
                generate_synthetic_corpus(3, 2, &cfg, &mut rng, dir.path()).unwrap();
            let params = ParameterStore::init(&cfg).unwrap();
            Fixture { dir, manifest, cfg, params }
        })
    }

    #[test]
    fn infer_clip_uses_nine_blocks_on_double_length_media() {
        let f = fixture();
        let record = &f.manifest.records[0];
        let flags = AblationFlags::default();
        let score = infer_clip(&f.params, &f.manifest, record, &f.cfg, &flags).unwrap();
        assert_eq!(score.n_blocks, 9);
        assert!(score.score >= 0.0 && score.score <= 1.0);
        let by_argmax =
            if score.mean_logits[1] > score.mean_logits[0] { Label::Fake } else { Label::Real };
        assert_eq!(score.prediction, by_argmax);
    }

    #[test]
    fn infer_clip_requires_both_modalities() {
        let f = fixture();
        let mut record = f.manifest.records[0].clone();
        record.audio_path = crate::data::MISSING_PATH.to_string();
        let flags = AblationFlags::default();
        let err = infer_clip(&f.params, &f.manifest, &record, &f.cfg, &flags).unwrap_err();
        assert!(matches!(err, Error::MissingModality { .. }), "{err}");
    }

    #[test]
    fn evaluate_sorts_rows_and_aggregates_consistently() {
        let f = fixture();
        let flags = AblationFlags::default();
        let report = evaluate(&f.params, &f.manifest, &f.cfg, &flags).unwrap();
        assert_eq!(report.rows.len(), f.manifest.records.len());
        for w in report.rows.windows(2) {
            assert!(w[0].clip_id < w[1].clip_id);
        }
        let recomputed =
            report.rows.iter().filter(|r| r.prediction == r.label).count() as f64
                / report.rows.len() as f64;
        assert_eq!(report.acc, recomputed);
        let scores: Vec<f64> = report.rows.iter().map(|r| r.score).collect();
        let labels: Vec<Label> = report.rows.iter().map(|r| r.label).collect();
        assert_eq!(report.auc, auc(&scores, &labels).ok());
    }

    #[test]
    fn evaluate_single_class_has_no_auc() {
        let f = fixture();
        let real_only = f.manifest.filtered(|r| r.label == Label::Real);
        let flags = AblationFlags::default();
        let report = evaluate(&f.params, &real_only, &f.cfg, &flags).unwrap();
        assert!(report.auc.is_none());
        assert!(report.ap.is_none());
        assert!(report.acc.is_finite());
    }

    #[test]
    fn perturbed_evaluation_is_order_independent_and_deterministic() {
        let f = fixture();
        let flags = AblationFlags::default();
        let small = Manifest {
            records: f.manifest.records[..4].to_vec(),
            stats: f.manifest.stats,
            base_dir: f.manifest.base_dir.clone(),
        };
        let mut reversed = small.clone();
        reversed.records.reverse();
        let a =
            evaluate_perturbed(&f.params, &small, &f.cfg, &flags, PerturbKind::GaussianNoise, 3, 7)
                .unwrap();
        let b = evaluate_perturbed(
            &f.params,
            &reversed,
            &f.cfg,
            &flags,
            PerturbKind::GaussianNoise,
            3,
            7,
        )
        .unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.clip_id, rb.clip_id);
            assert_eq!(ra.score, rb.score);
        }
    }

    #[test]
    fn intra_split_keeps_sources_apart() {
        let f = fixture();
        let (train, test) = intra_split(&f.manifest, 3).unwrap();
        assert!(!train.records.is_empty());
        assert!(!test.records.is_empty());
        let train_src: BTreeSet<_> = train.records.iter().map(|r| &r.source_id).collect();
        let test_src: BTreeSet<_> = test.records.iter().map(|r| &r.source_id).collect();
        assert!(train_src.is_disjoint(&test_src));
        let (train2, test2) = intra_split(&f.manifest, 3).unwrap();
        assert_eq!(train.records.len(), train2.records.len());
        assert_eq!(test.records.len(), test2.records.len());
    }

    #[test]
    fn loco_splits_hold_out_one_category_each() {
        let f = fixture();
        let splits = loco_splits(&f.manifest, 5).unwrap();
        assert_eq!(splits.len(), 4);
        for split in &splits {
            assert!(split.train.records.iter().all(|r| r.category != split.held_out));
            assert!(split
                .test
                .records
                .iter()
                .all(|r| r.category == Category::Real || r.category == split.held_out));
            let train_src: BTreeSet<_> =
                split.train.records.iter().map(|r| &r.source_id).collect();
            let test_src: BTreeSet<_> =
                split.test.records.iter().map(|r| &r.source_id).collect();
            assert!(train_src.is_disjoint(&test_src));
        }
    }

    #[test]
    fn loco_needs_two_fake_categories() {
        let f = fixture();
        let narrowed = f
            .manifest
            .filtered(|r| matches!(r.category, Category::Real | Category::SynthFa));
        let err = loco_splits(&narrowed, 0).unwrap_err();
        assert!(err.to_string().contains("at least 2 fake categories"), "{err}");
    }

    #[test]
    fn loco_protocol_adds_fake_visual_average() {
        let f = fixture();
        let flags = AblationFlags::default();
        let results = run_protocol(
            &f.params,
            &f.manifest,
            &f.cfg,
            &flags,
            Protocol::LeaveOneCategoryOut,
            5,
        )
        .unwrap();
        assert_eq!(results.len(), 5);
        let names: Vec<&str> = results.iter().map(|r| r.name.as_str()).collect();
        assert!(names.contains(&"AVG-FV"));
        assert!(names.contains(&"LOCO-SYNTH-SWAP"));
        let avg = results.iter().find(|r| r.name == "AVG-FV").unwrap();
        assert!(avg.report.rows.is_empty());
        let fv_accs: Vec<f64> = results
            .iter()
            .filter(|r| r.name.starts_with("LOCO-") && r.name != "LOCO-SYNTH-FA")
            .map(|r| r.report.acc)
            .collect();
        let want = fv_accs.iter().sum::<f64>() / fv_accs.len() as f64;
        assert!((avg.report.acc - want).abs() < 1e-12);
    }

    #[test]
    fn embedding_export_shape_and_determinism() {
        let f = fixture();
        let path1 = f.dir.path().join("emb1.tsv");
        let path2 = f.dir.path().join("emb2.tsv");
        export_embeddings(&f.params, &f.manifest, &f.cfg, &path1).unwrap();
        export_embeddings(&f.params, &f.manifest, &f.cfg, &path2).unwrap();
        let text = std::fs::read_to_string(&path1).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + f.manifest.records.len());
        let dim = 4 * f.cfg.encoder_dim;
        for line in &lines {
            assert_eq!(line.split('\t').count(), 3 + dim);
        }
        assert_eq!(text, std::fs::read_to_string(&path2).unwrap());
    }

    #[test]
    fn protocol_names_parse() {
        assert_eq!("intra".parse::<Protocol>().unwrap(), Protocol::Intra);
        assert_eq!("loco".parse::<Protocol>().unwrap(), Protocol::LeaveOneCategoryOut);
        assert_eq!("cross-corpus".parse::<Protocol>().unwrap(), Protocol::CrossCorpus);
        assert!("nearest".parse::<Protocol>().is_err());
        assert!("gaussian_noise".parse::<PerturbKind>().is_ok());
        assert!("mp3".parse::<PerturbKind>().is_err());
    }

    #[test]
    fn split_requires_multiple_sources() {
        let one = Manifest {
            records: vec![ManifestRecord {
                clip_id: "a".into(),
                audio_path: "-".into(),
                frames_path: "-".into(),
                label: Label::Real,
                category: Category::Real,
                source_id: "s0".into(),
                duration_s: 3.2,
            }],
            stats: CorpusStats::default(),
            base_dir: ".".into(),
        };
        assert!(intra_split(&one, 0).is_err());
    }
}
