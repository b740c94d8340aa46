//! Two-stage training: the AdamW optimizer, learning-rate schedules, the
//! per-batch step functions for both stages, and the epoch loop with
//! source-held-out validation, best-checkpoint retention, and resumable
//! state.
//!
//! Stage 1 alternates one generator update (contrastive + masked
//! reconstruction + adversarial terms) with `n_critic` critic updates
//! followed by weight clipping. Stage 2 trains the classification heads,
//! end-to-end by default or heads-only under `frozen_backbone`. Ablation
//! switches change the graph, never the data.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Read as _, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    classify, cross_modal_convert, decode, discriminate, encode, stage1_param_names,
    stage2_param_names, Direction, FeatureMode, Modality, ParamBinder, ParameterStore,
};
use crate::config::{derive_geometry, ModelConfig};
use crate::data::{
    make_stage1_batch, make_stage2_batch, sample_clip_at, ClipSample, Label, Manifest,
};
use crate::losses::{
    adversarial_generator_term, combined_generator_loss, contrastive_loss, cross_entropy,
    masked_reconstruction_term, LossReport,
};
use crate::masking::{
    draw_complementary_masks, draw_independent_masks, fuse_plan, masked_token_indices,
    visible_token_indices, SliceMaskPair,
};
use crate::tensor::{Scalar, Tape, Var};
use crate::tokenizer::TokenizedPair;
use crate::{Error, Result};

/// Column header of the metrics stream written by [`run_training`].
pub const METRICS_HEADER: &str =
    "step,epoch,split,l_c,l_rec,l_adv_g,l_adv_d,l_total_g,l_ce,acc,auc,ap,lr,wall_ms";

/// Which training stage a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Self-supervised representation learning on real clips.
    One,
    /// Supervised real/fake classification.
    Two,
}

/// Graph variants for the ablation study. All default to off, which is the
/// full method.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AblationFlags {
    /// Stage 1 trains with the contrastive term alone: no masking, no
    /// fusion, no decoders, no critics.
    pub contrastive_only: bool,
    /// Replace cross-modal predictions at masked positions with a shared
    /// learnable mask row per modality.
    pub no_cross_modal_fusion: bool,
    /// Draw the two slice masks independently instead of complementarily.
    /// Positions masked in both modalities fall back to the learnable
    /// mask row.
    pub random_masking: bool,
    /// Stage 2 classifies from the encoder outputs alone.
    pub features_only: bool,
    /// Stage 2 classifies from the cross-modal predictions alone.
    pub cross_modal_only: bool,
    /// Plain token mean instead of learned attention pooling in the
    /// reduction heads.
    pub mean_pool_reduction: bool,
    /// Stage 2 updates only the reduction and classifier heads.
    pub frozen_backbone: bool,
}

impl AblationFlags {
    /// What the stage-2 per-token features are built from.
    pub fn feature_mode(&self) -> FeatureMode {
        if self.features_only {
            FeatureMode::OwnOnly
        } else if self.cross_modal_only {
            FeatureMode::CrossOnly
        } else {
            FeatureMode::Combined
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.features_only && self.cross_modal_only {
            return Err(Error::Invalid(
                "features_only and cross_modal_only are mutually exclusive".into(),
            ));
        }
        Ok(())
    }
}

fn every_param(_: &str) -> bool {
    true
}

fn non_critic(name: &str) -> bool {
    !name.starts_with("disc_")
}

fn critic_only(name: &str) -> bool {
    name.starts_with("disc_")
}

fn heads_only(name: &str) -> bool {
    name.starts_with("psi_") || name.starts_with("gamma.")
}

/// Adam with decoupled weight decay over named tensors. Decay applies only
/// to genuinely two-dimensional weights; biases, norm scales, learned mask
/// rows, pooling vectors, and positional tables are exempt.
#[derive(Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: HashMap<String, Array2<f32>>,
    v: HashMap<String, Array2<f32>>,
    t: HashMap<String, u64>,
}

fn decays(name: &str, dim: (usize, usize)) -> bool {
    dim.0 > 1 && dim.1 > 1 && !name.ends_with(".pos")
}

impl AdamW {
    pub fn new(weight_decay: f64) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
            m: HashMap::new(),
            v: HashMap::new(),
            t: HashMap::new(),
        }
    }

    /// Applies one update to every named gradient. Moments are created on
    /// first use; bias correction is tracked per tensor so parameter
    /// subsets updated on different cadences stay correct.
    pub fn step(
        &mut self,
        params: &mut ParameterStore,
        grads: &[(String, Array2<f32>)],
        lr: f64,
    ) {
        for (name, g) in grads {
            let t = {
                let t = self.t.entry(name.clone()).or_insert(0);
                *t += 1;
                *t
            };
            let m = self.m.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let bc1 = (1.0 - self.beta1.powi(t as i32)) as f32;
            let bc2 = (1.0 - self.beta2.powi(t as i32)) as f32;
            let eps = self.eps as f32;
            let lr32 = lr as f32;

            let p = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("optimizer step on unknown parameter {name}"));
            let wd = if decays(name, p.dim()) { self.weight_decay as f32 } else { 0.0 };
            ndarray::Zip::from(&mut *p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr32 * (mhat / (vhat.sqrt() + eps) + wd * *p);
            });
        }
    }
}

/// Linear warmup to `max_lr` over `warmup_frac` of the run, then cosine
/// decay to zero at `total_steps`. `step` counts completed steps.
pub fn warmup_cosine_lr(step: u64, total_steps: u64, warmup_frac: f64, max_lr: f64) -> f64 {
    let total = total_steps.max(1);
    let warmup = ((total as f64) * warmup_frac).round() as u64;
    if step < warmup {
        return max_lr * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    0.5 * max_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Warmup, then cosine cycles of `period` steps that restart at full
/// height. A zero period degenerates to a single cycle over the rest of
/// the run.
pub fn warm_restart_lr(
    step: u64,
    total_steps: u64,
    period: u64,
    warmup_frac: f64,
    max_lr: f64,
) -> f64 {
    let total = total_steps.max(1);
    let warmup = ((total as f64) * warmup_frac).round() as u64;
    if step < warmup {
        return max_lr * (step + 1) as f64 / warmup as f64;
    }
    let period = if period == 0 { (total - warmup).max(1) } else { period };
    let pos = ((step - warmup) % period) as f64 / period as f64;
    0.5 * max_lr * (1.0 + (std::f64::consts::PI * pos).cos())
}

/// Everything a run needs to continue exactly where it stopped.
#[derive(Debug)]
pub struct TrainState {
    pub params: ParameterStore,
    pub opt: AdamW,
    /// Completed optimizer steps (generator steps in stage 1).
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub rng: ChaCha8Rng,
    pub best_metric: Option<f64>,
}

impl TrainState {
    /// Fresh state: parameters initialized for the config, empty optimizer
    /// moments, data rng seeded from `cfg.seed`.
    pub fn new(cfg: &ModelConfig, mode: FeatureMode) -> Result<TrainState> {
        Ok(TrainState {
            params: ParameterStore::init_for(cfg, mode)?,
            opt: AdamW::new(cfg.train.weight_decay),
            step: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            best_metric: None,
        })
    }

    /// Writes the full state: counters, rng position, every parameter, and
    /// the optimizer moments of every tensor touched so far.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"AVFS");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&self.params.fingerprint().to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.epoch.to_le_bytes());
        buf.push(self.best_metric.is_some() as u8);
        buf.extend_from_slice(&self.best_metric.unwrap_or(0.0).to_le_bytes());
        buf.extend_from_slice(&self.rng.get_seed());
        buf.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());

        let write_tensor = |buf: &mut Vec<u8>, t: &Array2<f32>| {
            buf.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
            buf.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
            for &x in t.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        };
        let names: Vec<&str> = self.params.names().collect();
        buf.extend_from_slice(&(names.len() as u32).to_le_bytes());
        for name in &names {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            write_tensor(&mut buf, self.params.get(name).unwrap());
        }
        let mut touched: Vec<&String> = self.opt.t.keys().collect();
        touched.sort();
        buf.extend_from_slice(&(touched.len() as u32).to_le_bytes());
        for name in touched {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&self.opt.t[name].to_le_bytes());
            write_tensor(&mut buf, &self.opt.m[name]);
            write_tensor(&mut buf, &self.opt.v[name]);
        }
        fs::write(path, &buf).map_err(|e| Error::io(path, e))
    }

    /// Restores a state written by [`TrainState::save`]. The config must
    /// describe the same shapes (fingerprint check).
    pub fn load(path: &Path, cfg: &ModelConfig, mode: FeatureMode) -> Result<TrainState> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut off = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if off + n > bytes.len() {
                return Err(Error::Checkpoint(format!(
                    "{}: truncated at byte {off}",
                    path.display()
                )));
            }
            let s = &bytes[off..off + n];
            off += n;
            Ok(s)
        };
        if take(4)? != b"AVFS" {
            return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != 1 {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {version}",
                path.display()
            )));
        }
        let fp = u64::from_le_bytes(take(8)?.try_into().unwrap());
        if fp != cfg.fingerprint() {
            return Err(Error::Checkpoint(format!(
                "{}: state fingerprint {fp:016x} does not match active config {:016x}",
                path.display(),
                cfg.fingerprint()
            )));
        }
        let step = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let epoch = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let has_best = take(1)?[0] != 0;
        let best = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let seed: [u8; 32] = take(32)?.try_into().unwrap();
        let word_pos = u128::from_le_bytes(take(16)?.try_into().unwrap());
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(word_pos);

        let mut state = TrainState {
            params: ParameterStore::init_for(cfg, mode)?,
            opt: AdamW::new(cfg.train.weight_decay),
            step,
            epoch,
            rng,
            best_metric: if has_best { Some(best) } else { None },
        };

        let n_params = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        for _ in 0..n_params {
            let (name, tensor) = {
                let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
                let name = String::from_utf8(take(len)?.to_vec())
                    .map_err(|_| Error::Checkpoint(format!("{}: non-utf8 name", path.display())))?;
                let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
                let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
                let payload = take(rows * cols * 4)?;
                let data: Vec<f32> = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                (name, Array2::from_shape_vec((rows, cols), data).unwrap())
            };
            let slot = state.params.get_mut(&name).ok_or_else(|| {
                Error::Checkpoint(format!("{}: unknown parameter {name}", path.display()))
            })?;
            if slot.dim() != tensor.dim() {
                return Err(Error::Checkpoint(format!(
                    "{}: parameter {name} has shape {:?}, config wants {:?}",
                    path.display(),
                    tensor.dim(),
                    slot.dim()
                )));
            }
            slot.assign(&tensor);
        }
        let n_moments = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        for _ in 0..n_moments {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("{}: non-utf8 name", path.display())))?;
            let t = u64::from_le_bytes(take(8)?.try_into().unwrap());
            let mut tensors = Vec::with_capacity(2);
            for _ in 0..2 {
                let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
                let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
                let payload = take(rows * cols * 4)?;
                let data: Vec<f32> = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                tensors.push(Array2::from_shape_vec((rows, cols), data).unwrap());
            }
            let v = tensors.pop().unwrap();
            let m = tensors.pop().unwrap();
            state.opt.t.insert(name.clone(), t);
            state.opt.m.insert(name.clone(), m);
            state.opt.v.insert(name, v);
        }
        Ok(state)
    }
}

/// Detached token matrices one sample contributes to the critic update.
struct CriticSample {
    fake_a: Array2<f32>,
    real_a: Array2<f32>,
    fake_v: Array2<f32>,
    real_v: Array2<f32>,
}

struct Stage1Graph {
    root: Var,
    report: LossReport,
    critic_data: Vec<CriticSample>,
}

fn rows_of(m: &Array2<f32>, idx: &[usize]) -> Array2<f32> {
    let mut out = Array2::zeros((idx.len(), m.ncols()));
    for (mut row, &i) in out.rows_mut().into_iter().zip(idx) {
        row.assign(&m.row(i));
    }
    out
}

fn mean_of_terms(tape: &mut Tape<f32>, terms: Vec<Var>) -> Var {
    if terms.len() == 1 {
        terms[0]
    } else {
        let stacked = tape.concat_rows(terms);
        tape.mean_all(stacked)
    }
}

fn check_finite(step: u64, pairs: &[(&str, f64)]) -> Result<()> {
    let bad: Vec<String> = pairs
        .iter()
        .filter(|(_, v)| !v.is_finite())
        .map(|(n, v)| format!("{n} = {v}"))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::NonFinite { step, detail: bad.join(", ") })
    }
}

/// Fused embedding for one modality: visible slices keep their own rows,
/// masked slices take cross-modal predictions where the other modality is
/// visible at that slice, and the learnable mask row otherwise.
#[allow(clippy::too_many_arguments)]
pub fn fused_embedding<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut ParamBinder<F>,
    tp: &TokenizedPair<F>,
    pair: &SliceMaskPair,
    a: Var,
    v: Var,
    modality: Modality,
    cfg: &ModelConfig,
    flags: &AblationFlags,
) -> Result<Var> {
    let g = derive_geometry(cfg)?;
    let (own, own_mask, own_map, own_tps, other, other_mask, other_map, dir, mask_name) =
        match modality {
            Modality::Audio => (
                a,
                &pair.mask_a,
                &tp.slice_of_audio_token,
                g.audio_tokens_per_slice,
                v,
                &pair.mask_v,
                &tp.slice_of_visual_token,
                Direction::V2A,
                "fuse_a.mask",
            ),
            Modality::Visual => (
                v,
                &pair.mask_v,
                &tp.slice_of_visual_token,
                g.visual_tokens_per_slice,
                a,
                &pair.mask_a,
                &tp.slice_of_audio_token,
                Direction::A2V,
                "fuse_v.mask",
            ),
        };
    let masked: Vec<usize> =
        (0..own_mask.len()).filter(|&s| !own_mask[s]).collect();
    if masked.is_empty() {
        return Ok(own);
    }

    let mut parts: Vec<Var> = Vec::new();
    let mut part_slices: Vec<usize> = Vec::new();
    if !flags.no_cross_modal_fusion {
        let vis_other: Vec<usize> =
            (0..other_mask.len()).filter(|&s| other_mask[s]).collect();
        if !vis_other.is_empty() {
            let idx = visible_token_indices(other_map, other_mask);
            let vis_rows = tape.gather_rows(other, idx);
            let (converted, ids) =
                cross_modal_convert(tape, binder, vis_rows, &vis_other, dir, cfg)?;
            parts.push(converted);
            part_slices.extend(ids);
        }
    }
    let uncovered: Vec<usize> =
        masked.iter().copied().filter(|s| !part_slices.contains(s)).collect();
    if !uncovered.is_empty() {
        let mask_row = binder.var(tape, mask_name)?;
        let rows = tape.gather_rows(mask_row, vec![0; uncovered.len() * own_tps]);
        parts.push(rows);
        part_slices.extend(uncovered);
    }
    let cross = if parts.len() == 1 { parts[0] } else { tape.concat_rows(parts) };
    let cross_map: Vec<usize> = part_slices
        .iter()
        .flat_map(|&s| std::iter::repeat(s).take(own_tps))
        .collect();
    let plan = fuse_plan(own_mask, own_map, &cross_map, own_tps)?;
    Ok(tape.assemble_rows(own, cross, plan))
}

/// Builds the whole stage-1 generator graph for a batch and evaluates every
/// loss term, including the critic gap at current parameters. The critic
/// weights enter as constants: the adversarial gradient flows through them
/// into the decoders without ever updating them here.
fn build_stage1(
    tape: &mut Tape<f32>,
    binder: &mut ParamBinder<f32>,
    batch: &[ClipSample],
    pairs: &[TokenizedPair<f32>],
    masks: Option<&[SliceMaskPair]>,
    cfg: &ModelConfig,
    flags: &AblationFlags,
    step: u64,
) -> Result<Stage1Graph> {
    let g = derive_geometry(cfg)?;
    let w = &cfg.loss_weights;
    let all_a: Vec<usize> = (0..g.audio_tokens_total).collect();
    let all_v: Vec<usize> = (0..g.visual_tokens_total).collect();

    let mut a_means: Vec<Var> = Vec::with_capacity(batch.len());
    let mut v_means: Vec<Var> = Vec::with_capacity(batch.len());
    let mut rec_a_terms: Vec<Var> = Vec::new();
    let mut rec_v_terms: Vec<Var> = Vec::new();
    let mut adv_terms: Vec<Var> = Vec::new();
    let mut d_scores: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut critic_data: Vec<CriticSample> = Vec::new();

    for (i, tp) in pairs.iter().enumerate() {
        let a_tok = tape.constant(tp.audio_tokens.clone());
        let v_tok = tape.constant(tp.visual_tokens.clone());
        let a = encode(tape, binder, a_tok, &all_a, Modality::Audio, cfg)?;
        let v = encode(tape, binder, v_tok, &all_v, Modality::Visual, cfg)?;
        a_means.push(tape.mean_rows(a));
        v_means.push(tape.mean_rows(v));

        let Some(masks) = masks else { continue };
        let pair = &masks[i];
        let a_fused = fused_embedding(tape, binder, tp, pair, a, v, Modality::Audio, cfg, flags)?;
        let v_fused = fused_embedding(tape, binder, tp, pair, a, v, Modality::Visual, cfg, flags)?;
        let a_hat = decode(tape, binder, a_fused, Modality::Audio, cfg)?;
        let v_hat = decode(tape, binder, v_fused, Modality::Visual, cfg)?;

        let ma = masked_token_indices(&tp.slice_of_audio_token, &pair.mask_a);
        let mv = masked_token_indices(&tp.slice_of_visual_token, &pair.mask_v);
        rec_a_terms.push(masked_reconstruction_term(tape, a_hat, &tp.audio_tokens, &ma)?);
        rec_v_terms.push(masked_reconstruction_term(tape, v_hat, &tp.visual_tokens, &mv)?);

        let fake_a = tape.gather_rows(a_hat, ma.clone());
        let fake_v = tape.gather_rows(v_hat, mv.clone());
        let real_a_rows = rows_of(&tp.audio_tokens, &ma);
        let real_v_rows = rows_of(&tp.visual_tokens, &mv);
        let real_a = tape.constant(real_a_rows.clone());
        let real_v = tape.constant(real_v_rows.clone());
        let d_fake_a = discriminate(tape, binder, fake_a, Modality::Audio, cfg)?;
        let d_fake_v = discriminate(tape, binder, fake_v, Modality::Visual, cfg)?;
        let d_real_a = discriminate(tape, binder, real_a, Modality::Audio, cfg)?;
        let d_real_v = discriminate(tape, binder, real_v, Modality::Visual, cfg)?;
        adv_terms.push(adversarial_generator_term(tape, d_fake_a, d_fake_v));
        d_scores.push((
            tape.scalar(d_fake_a) as f64,
            tape.scalar(d_real_a) as f64,
            tape.scalar(d_fake_v) as f64,
            tape.scalar(d_real_v) as f64,
        ));
        critic_data.push(CriticSample {
            fake_a: tape.value(fake_a).clone(),
            real_a: real_a_rows,
            fake_v: tape.value(fake_v).clone(),
            real_v: real_v_rows,
        });
    }

    let a_bar = tape.concat_rows(a_means);
    let v_bar = tape.concat_rows(v_means);
    let neg_mask = same_source_mask(batch, cfg);
    let l_c = contrastive_loss(tape, a_bar, v_bar, cfg.temperature as f32, neg_mask.as_ref())?;

    let mut report = LossReport::default();
    report.l_c = tape.scalar(l_c) as f64;

    let root = if rec_a_terms.is_empty() {
        tape.scale(l_c, w.contrastive as f32)
    } else {
        let rec_a = mean_of_terms(tape, rec_a_terms);
        let rec_v = mean_of_terms(tape, rec_v_terms);
        let adv = mean_of_terms(tape, adv_terms);
        report.l_rec_audio = tape.scalar(rec_a) as f64;
        report.l_rec_visual = tape.scalar(rec_v) as f64;
        let n = d_scores.len() as f64;
        report.l_adv_g_audio = d_scores.iter().map(|s| -s.0).sum::<f64>() / n;
        report.l_adv_g_visual = d_scores.iter().map(|s| -s.2).sum::<f64>() / n;
        report.l_adv_d_audio = d_scores.iter().map(|s| s.0 - s.1).sum::<f64>() / n;
        report.l_adv_d_visual = d_scores.iter().map(|s| s.2 - s.3).sum::<f64>() / n;
        report.l_adv_d = 0.5 * (report.l_adv_d_audio + report.l_adv_d_visual);

        let rec_sum = tape.add(rec_a, rec_v);
        let t_c = tape.scale(l_c, w.contrastive as f32);
        let t_rec = tape.scale(rec_sum, w.reconstruction as f32);
        let t_adv = tape.scale(adv, w.adversarial as f32);
        let partial = tape.add(t_c, t_rec);
        tape.add(partial, t_adv)
    };
    report.l_rec = report.l_rec_audio + report.l_rec_visual;
    report.l_adv_g = 0.5 * (report.l_adv_g_audio + report.l_adv_g_visual);
    report.l_total_g = combined_generator_loss(report.l_c, report.l_rec, report.l_adv_g, w);
    check_finite(
        step,
        &[
            ("l_c", report.l_c),
            ("l_rec", report.l_rec),
            ("l_adv_g", report.l_adv_g),
            ("l_total_g", report.l_total_g),
        ],
    )?;
    Ok(Stage1Graph { root, report, critic_data })
}

/// Additive contrastive exclusion matrix for clips that share a source,
/// when the config asks for it.
fn same_source_mask(batch: &[ClipSample], cfg: &ModelConfig) -> Option<Array2<f32>> {
    if !cfg.train.exclude_same_source_negatives {
        return None;
    }
    let n = batch.len();
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i != j && batch[i].source_id == batch[j].source_id {
                m[[i, j]] = -1e9;
            }
        }
    }
    Some(m)
}

/// One full stage-1 training step: a generator update from the combined
/// loss, then `n_critic` critic updates on the detached reconstructions,
/// each followed by weight clipping.
pub fn stage1_step(
    state: &mut TrainState,
    batch: &[ClipSample],
    cfg: &ModelConfig,
    flags: &AblationFlags,
    lr: f64,
) -> Result<LossReport> {
    flags.validate()?;
    if batch.is_empty() {
        return Err(Error::Invalid("stage-1 step on an empty batch".into()));
    }
    for s in batch {
        if s.label != Label::Real {
            return Err(Error::Invalid(format!(
                "stage-1 step on fake clip {}",
                s.clip_id
            )));
        }
    }
    let step_no = state.step + 1;
    let mut pairs = Vec::with_capacity(batch.len());
    for s in batch {
        pairs.push(TokenizedPair::new(&s.audio, &s.visual, cfg)?);
    }
    let masks: Option<Vec<SliceMaskPair>> = if flags.contrastive_only {
        None
    } else {
        let mut v = Vec::with_capacity(batch.len());
        for _ in 0..batch.len() {
            let m = if flags.random_masking {
                draw_independent_masks(cfg, &mut state.rng)?
            } else {
                let m = draw_complementary_masks(cfg, &mut state.rng)?;
                assert!(m.is_complementary(), "complementary draw violated its contract");
                m
            };
            v.push(m);
        }
        Some(v)
    };

    let (gen_grads, report, critic_data) = {
        let mut tape: Tape<f32> = Tape::new();
        let mut binder = ParamBinder::with_trainable(&state.params, non_critic);
        let graph = build_stage1(
            &mut tape,
            &mut binder,
            batch,
            &pairs,
            masks.as_deref(),
            cfg,
            flags,
            step_no,
        )?;
        let grads = tape.backward(graph.root);
        let collected: Vec<(String, Array2<f32>)> = binder
            .bound()
            .iter()
            .filter_map(|(name, var)| grads.get(*var).map(|g| (name.clone(), g.clone())))
            .collect();
        (collected, graph.report, graph.critic_data)
    };
    state.opt.step(&mut state.params, &gen_grads, lr);

    if !critic_data.is_empty() {
        for _ in 0..cfg.train.n_critic {
            critic_update(state, &critic_data, cfg, lr, step_no)?;
        }
    }
    state.step = step_no;
    Ok(report)
}

/// Forward-only stage-1 losses, for validation. Masks are drawn from the
/// supplied rng; no parameter changes.
pub fn stage1_losses(
    params: &ParameterStore,
    batch: &[ClipSample],
    cfg: &ModelConfig,
    flags: &AblationFlags,
    rng: &mut ChaCha8Rng,
) -> Result<LossReport> {
    flags.validate()?;
    if batch.is_empty() {
        return Err(Error::Invalid("stage-1 losses on an empty batch".into()));
    }
    let mut pairs = Vec::with_capacity(batch.len());
    for s in batch {
        pairs.push(TokenizedPair::new(&s.audio, &s.visual, cfg)?);
    }
    let masks: Option<Vec<SliceMaskPair>> = if flags.contrastive_only {
        None
    } else {
        let mut v = Vec::with_capacity(batch.len());
        for _ in 0..batch.len() {
            v.push(if flags.random_masking {
                draw_independent_masks(cfg, rng)?
            } else {
                draw_complementary_masks(cfg, rng)?
            });
        }
        Some(v)
    };
    let mut tape: Tape<f32> = Tape::new();
    let mut binder = ParamBinder::with_trainable(params, non_critic);
    let graph =
        build_stage1(&mut tape, &mut binder, batch, &pairs, masks.as_deref(), cfg, flags, 0)?;
    Ok(graph.report)
}

/// One critic update on detached reconstructions: minimize the mean
/// fake-minus-real score gap, then clip every critic tensor to the
/// configured symmetric bound.
fn critic_update(
    state: &mut TrainState,
    data: &[CriticSample],
    cfg: &ModelConfig,
    lr: f64,
    step_no: u64,
) -> Result<()> {
    let critic_grads = {
        let mut tape: Tape<f32> = Tape::new();
        let mut binder = ParamBinder::with_trainable(&state.params, critic_only);
        let mut terms = Vec::with_capacity(data.len());
        for s in data {
            let fake_a = tape.constant(s.fake_a.clone());
            let real_a = tape.constant(s.real_a.clone());
            let fake_v = tape.constant(s.fake_v.clone());
            let real_v = tape.constant(s.real_v.clone());
            let d_fake_a = discriminate(&mut tape, &mut binder, fake_a, Modality::Audio, cfg)?;
            let d_real_a = discriminate(&mut tape, &mut binder, real_a, Modality::Audio, cfg)?;
            let d_fake_v = discriminate(&mut tape, &mut binder, fake_v, Modality::Visual, cfg)?;
            let d_real_v = discriminate(&mut tape, &mut binder, real_v, Modality::Visual, cfg)?;
            terms.push(crate::losses::adversarial_critic_term(
                &mut tape, d_fake_a, d_real_a, d_fake_v, d_real_v,
            ));
        }
        let loss = mean_of_terms(&mut tape, terms);
        check_finite(step_no, &[("l_adv_d", tape.scalar(loss) as f64)])?;
        let grads = tape.backward(loss);
        binder
            .bound()
            .iter()
            .filter_map(|(name, var)| grads.get(*var).map(|g| (name.clone(), g.clone())))
            .collect::<Vec<_>>()
    };
    state.opt.step(&mut state.params, &critic_grads, lr);

    let clip = cfg.wgan_clip as f32;
    let critic_names: Vec<String> = state
        .params
        .names()
        .filter(|n| n.starts_with("disc_"))
        .map(str::to_string)
        .collect();
    for name in critic_names {
        let t = state.params.get_mut(&name).unwrap();
        t.mapv_inplace(|x| x.clamp(-clip, clip));
    }
    Ok(())
}

/// Per-sample stage-2 logits on an existing tape: encode both modalities,
/// build the per-token features for the flag's feature mode, and classify.
pub fn stage2_logits<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut ParamBinder<F>,
    tp: &TokenizedPair<F>,
    cfg: &ModelConfig,
    flags: &AblationFlags,
) -> Result<Var> {
    let g = derive_geometry(cfg)?;
    let all_a: Vec<usize> = (0..g.audio_tokens_total).collect();
    let all_v: Vec<usize> = (0..g.visual_tokens_total).collect();
    let all_slices: Vec<usize> = (0..cfg.num_slices).collect();
    let a_tok = tape.constant(tp.audio_tokens.clone());
    let v_tok = tape.constant(tp.visual_tokens.clone());
    let a = encode(tape, binder, a_tok, &all_a, Modality::Audio, cfg)?;
    let v = encode(tape, binder, v_tok, &all_v, Modality::Visual, cfg)?;
    let (f_a, f_v) = match flags.feature_mode() {
        FeatureMode::OwnOnly => (a, v),
        FeatureMode::CrossOnly => {
            let (a_q, _) = cross_modal_convert(tape, binder, v, &all_slices, Direction::V2A, cfg)?;
            let (v_q, _) = cross_modal_convert(tape, binder, a, &all_slices, Direction::A2V, cfg)?;
            (a_q, v_q)
        }
        FeatureMode::Combined => {
            let (a_q, _) = cross_modal_convert(tape, binder, v, &all_slices, Direction::V2A, cfg)?;
            let (v_q, _) = cross_modal_convert(tape, binder, a, &all_slices, Direction::A2V, cfg)?;
            (tape.concat_cols(a, a_q), tape.concat_cols(v, v_q))
        }
    };
    classify(tape, binder, f_a, f_v, flags.mean_pool_reduction)
}

/// One stage-2 training step: cross-entropy over the batch, one optimizer
/// update (all parameters, or heads only under `frozen_backbone`). Returns
/// the report and the batch accuracy.
pub fn stage2_step(
    state: &mut TrainState,
    batch: &[ClipSample],
    cfg: &ModelConfig,
    flags: &AblationFlags,
    lr: f64,
) -> Result<(LossReport, f64)> {
    flags.validate()?;
    if batch.is_empty() {
        return Err(Error::Invalid("stage-2 step on an empty batch".into()));
    }
    let step_no = state.step + 1;
    let labels: Vec<usize> = batch.iter().map(|s| s.label.index()).collect();
    let mut pairs = Vec::with_capacity(batch.len());
    for s in batch {
        pairs.push(TokenizedPair::new(&s.audio, &s.visual, cfg)?);
    }
    let trainable: fn(&str) -> bool =
        if flags.frozen_backbone { heads_only } else { every_param };

    let (grads, l_ce, acc) = {
        let mut tape: Tape<f32> = Tape::new();
        let mut binder = ParamBinder::with_trainable(&state.params, trainable);
        let mut logit_vars = Vec::with_capacity(batch.len());
        for tp in &pairs {
            logit_vars.push(stage2_logits(&mut tape, &mut binder, tp, cfg, flags)?);
        }
        let logits = tape.concat_rows(logit_vars);
        let correct = tape
            .value(logits)
            .rows()
            .into_iter()
            .zip(&labels)
            .filter(|(row, &want)| (row[1] > row[0]) as usize == want)
            .count();
        let acc = correct as f64 / labels.len() as f64;
        let l_ce = cross_entropy(&mut tape, logits, &labels);
        let l_ce_val = tape.scalar(l_ce) as f64;
        check_finite(step_no, &[("l_ce", l_ce_val)])?;
        let grads = tape.backward(l_ce);
        let collected: Vec<(String, Array2<f32>)> = binder
            .bound()
            .iter()
            .filter_map(|(name, var)| grads.get(*var).map(|g| (name.clone(), g.clone())))
            .collect();
        (collected, l_ce_val, acc)
    };
    state.opt.step(&mut state.params, &grads, lr);
    state.step = step_no;
    let report = LossReport { l_ce, ..LossReport::default() };
    Ok((report, acc))
}

/// Deterministic train/validation split by source identity: no source
/// appears in both halves. A fraction of zero (or a single source) yields
/// an empty validation set.
pub fn validation_split(manifest: &Manifest, fraction: f64, seed: u64) -> (Manifest, Manifest) {
    let mut sources = manifest.source_ids();
    sources.sort();
    let n = sources.len();
    let n_val = if n < 2 || fraction <= 0.0 {
        0
    } else {
        ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
    };
    if n_val == 0 {
        return (manifest.clone(), manifest.filtered(|_| false));
    }
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5917);
    sources.shuffle(&mut rng);
    let val: std::collections::HashSet<&String> = sources[..n_val].iter().collect();
    let train = manifest.filtered(|r| !val.contains(&r.source_id));
    let valm = manifest.filtered(|r| val.contains(&r.source_id));
    (train, valm)
}

/// Paths and outcome of a completed [`run_training`] call.
#[derive(Debug)]
pub struct RunArtifacts {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub state_path: PathBuf,
    pub metrics_path: PathBuf,
    /// Validation metric of the retained best checkpoint: total generator
    /// loss for stage 1 (lower is better), AUC for stage 2 (higher is
    /// better).
    pub best_metric: f64,
    pub epochs_run: u64,
}

fn fmt_field(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => String::new(),
    }
}

fn metrics_row(step: u64, epoch: u64, split: &str, fields: [Option<f64>; 11]) -> String {
    let mut cols = vec![step.to_string(), epoch.to_string(), split.to_string()];
    cols.extend(fields.iter().map(|&f| fmt_field(f)));
    cols.join(",")
}

fn stage1_fields(r: &LossReport, lr: Option<f64>, wall_ms: Option<f64>) -> [Option<f64>; 11] {
    [
        Some(r.l_c),
        Some(r.l_rec),
        Some(r.l_adv_g),
        Some(r.l_adv_d),
        Some(r.l_total_g),
        None,
        None,
        None,
        None,
        lr,
        wall_ms,
    ]
}

/// Trains one stage over the manifest and writes checkpoints, resumable
/// state, and the metrics stream into `out_dir`.
///
/// `init_from` overlays a checkpoint onto the fresh parameters before
/// training (the stage-2 entry point for a stage-1 result). With `resume`,
/// an existing `state.avfs` in `out_dir` takes over instead and training
/// continues at the next epoch; metrics rows from abandoned partial epochs
/// are dropped so the stream always reads as one uninterrupted run.
pub fn run_training(
    manifest: &Manifest,
    cfg: &ModelConfig,
    stage: Stage,
    flags: &AblationFlags,
    init_from: Option<&Path>,
    out_dir: &Path,
    resume: bool,
) -> Result<RunArtifacts> {
    flags.validate()?;
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if stage == Stage::One {
        if let Some(f) = manifest.records.iter().find(|r| r.label != Label::Real) {
            return Err(Error::Invalid(format!(
                "stage-1 training requires a real-only manifest; found fake clip {}",
                f.clip_id
            )));
        }
    }
    let mode = match stage {
        Stage::One => FeatureMode::Combined,
        Stage::Two => flags.feature_mode(),
    };
    let (train_m, val_m) = validation_split(manifest, cfg.train.val_fraction, cfg.seed);
    if train_m.records.is_empty() {
        return Err(Error::Invalid("empty training split".into()));
    }

    let batch = cfg.train.batch_size;
    let (epochs, steps_per_epoch) = match stage {
        Stage::One => (
            cfg.train.stage1_epochs as u64,
            ((2 * train_m.records.len()).div_ceil(batch)).max(1) as u64,
        ),
        Stage::Two => (
            cfg.train.stage2_epochs as u64,
            (train_m.records.len().div_ceil(batch)).max(1) as u64,
        ),
    };
    if epochs == 0 {
        return Err(Error::Invalid("zero training epochs configured".into()));
    }
    let total_steps = epochs * steps_per_epoch;
    let restart_period = cfg.train.stage2_restart_epochs as u64 * steps_per_epoch;

    let state_path = out_dir.join("state.avfs");
    let best_path = out_dir.join("best.avfp");
    let last_path = out_dir.join("last.avfp");
    let metrics_path = out_dir.join("metrics.csv");

    let mut state = if resume && state_path.exists() {
        TrainState::load(&state_path, cfg, mode)?
    } else {
        let mut s = TrainState::new(cfg, mode)?;
        if let Some(ckpt) = init_from {
            let (params, _report) = ParameterStore::load_for(ckpt, cfg, mode, false)?;
            s.params = params;
        }
        s
    };
    let start_epoch = state.epoch;
    if start_epoch >= epochs {
        return Err(Error::Invalid(format!(
            "resume state already covers {start_epoch} epochs, config asks for {epochs}"
        )));
    }

    // Fresh runs start a new stream; resumed runs keep completed epochs
    // and drop any partial trailing rows.
    let mut kept_rows: Vec<String> = Vec::new();
    if start_epoch > 0 && metrics_path.exists() {
        let text = fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        for line in text.lines().skip(1) {
            let mut it = line.split(',');
            let (Some(_), Some(epoch_s)) = (it.next(), it.next()) else { continue };
            if epoch_s.parse::<u64>().map(|e| e < start_epoch).unwrap_or(false) {
                kept_rows.push(line.to_string());
            }
        }
    }
    let mut metrics = BufWriter::new(
        fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?,
    );
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
    for row in &kept_rows {
        writeln!(metrics, "{row}").map_err(|e| Error::io(&metrics_path, e))?;
    }

    let stage_names: std::collections::HashSet<String> = match stage {
        Stage::One => stage1_param_names(cfg)?.into_iter().collect(),
        Stage::Two => stage2_param_names(cfg)?.into_iter().collect(),
    };
    let save_checkpoint = |params: &ParameterStore, path: &Path| -> Result<()> {
        params.save_filtered(path, |n| stage_names.contains(n))
    };

    let mut best_metric = state.best_metric;
    for epoch in start_epoch..epochs {
        for _ in 0..steps_per_epoch {
            let lr = match stage {
                Stage::One => warmup_cosine_lr(
                    state.step,
                    total_steps,
                    cfg.train.warmup_frac,
                    cfg.train.stage1_lr,
                ),
                Stage::Two => warm_restart_lr(
                    state.step,
                    total_steps,
                    restart_period,
                    cfg.train.warmup_frac,
                    cfg.train.stage2_lr,
                ),
            };
            let t0 = Instant::now();
            let row = match stage {
                Stage::One => {
                    let b = make_stage1_batch(&train_m, cfg, &mut state.rng, batch)?;
                    let r = stage1_step(&mut state, &b, cfg, flags, lr)?;
                    let wall = t0.elapsed().as_secs_f64() * 1e3;
                    metrics_row(state.step, epoch, "train", stage1_fields(&r, Some(lr), Some(wall)))
                }
                Stage::Two => {
                    let b = make_stage2_batch(&train_m, cfg, &mut state.rng, batch)?;
                    let (r, acc) = stage2_step(&mut state, &b, cfg, flags, lr)?;
                    let wall = t0.elapsed().as_secs_f64() * 1e3;
                    metrics_row(
                        state.step,
                        epoch,
                        "train",
                        [
                            None,
                            None,
                            None,
                            None,
                            None,
                            Some(r.l_ce),
                            Some(acc),
                            None,
                            None,
                            Some(lr),
                            Some(wall),
                        ],
                    )
                }
            };
            writeln!(metrics, "{row}").map_err(|e| Error::io(&metrics_path, e))?;
        }

        // Validation at epoch end; with no held-out sources the last epoch
        // simply becomes the best.
        let t0 = Instant::now();
        let (metric, val_row) = if val_m.records.is_empty() {
            (None, None)
        } else {
            match stage {
                Stage::One => {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa5f3_c6e1u64.wrapping_add(epoch));
                    let val_steps = ((2 * val_m.records.len()).div_ceil(batch)).max(1).min(8);
                    let mut sum = LossReport::default();
                    for _ in 0..val_steps {
                        let b = make_stage1_batch(&val_m, cfg, &mut rng, batch)?;
                        let r = stage1_losses(&state.params, &b, cfg, flags, &mut rng)?;
                        sum.l_c += r.l_c;
                        sum.l_rec += r.l_rec;
                        sum.l_adv_g += r.l_adv_g;
                        sum.l_adv_d += r.l_adv_d;
                        sum.l_total_g += r.l_total_g;
                    }
                    let k = val_steps as f64;
                    sum.l_c /= k;
                    sum.l_rec /= k;
                    sum.l_adv_g /= k;
                    sum.l_adv_d /= k;
                    sum.l_total_g /= k;
                    let wall = t0.elapsed().as_secs_f64() * 1e3;
                    let row =
                        metrics_row(state.step, epoch, "val", stage1_fields(&sum, None, Some(wall)));
                    (Some(sum.l_total_g), Some(row))
                }
                Stage::Two => {
                    let (l_ce, acc, auc, ap) = stage2_validate(&state.params, &val_m, cfg, flags)?;
                    let wall = t0.elapsed().as_secs_f64() * 1e3;
                    let row = metrics_row(
                        state.step,
                        epoch,
                        "val",
                        [
                            None,
                            None,
                            None,
                            None,
                            None,
                            Some(l_ce),
                            Some(acc),
                            auc,
                            ap,
                            None,
                            Some(wall),
                        ],
                    );
                    (Some(auc.unwrap_or(acc)), Some(row))
                }
            }
        };
        if let Some(row) = val_row {
            writeln!(metrics, "{row}").map_err(|e| Error::io(&metrics_path, e))?;
        }

        let improved = match (metric, best_metric) {
            (None, _) => true,
            (Some(m), None) => {
                best_metric = Some(m);
                true
            }
            (Some(m), Some(prev)) => {
                let better = match stage {
                    Stage::One => m < prev,
                    Stage::Two => m > prev,
                };
                if better {
                    best_metric = Some(m);
                }
                better
            }
        };
        if improved {
            save_checkpoint(&state.params, &best_path)?;
        }
        state.epoch = epoch + 1;
        state.best_metric = best_metric;
        save_checkpoint(&state.params, &last_path)?;
        state.save(&state_path)?;
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    }

    Ok(RunArtifacts {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        state_path,
        metrics_path,
        best_metric: best_metric.unwrap_or(f64::NAN),
        epochs_run: epochs - start_epoch,
    })
}

/// Scores every validation record at a deterministic centered window and
/// reports cross-entropy, accuracy, and (when both classes are present)
/// AUC and AP.
fn stage2_validate(
    params: &ParameterStore,
    val: &Manifest,
    cfg: &ModelConfig,
    flags: &AblationFlags,
) -> Result<(f64, f64, Option<f64>, Option<f64>)> {
    let mut scores = Vec::with_capacity(val.records.len());
    let mut labels = Vec::with_capacity(val.records.len());
    let mut l_ce = 0.0;
    let mut correct = 0usize;
    for record in &val.records {
        let offset = ((record.duration_s - cfg.clip_seconds) / 2.0).max(0.0);
        let sample = sample_clip_at(val, record, cfg, offset, false, false)?;
        let logits = crate::eval::score_sample(params, &sample, cfg, flags)?;
        let p_fake = crate::eval::softmax2(logits)[1];
        let label = record.label.index();
        let p_label = if label == 1 { p_fake } else { 1.0 - p_fake };
        l_ce -= p_label.max(1e-12).ln();
        if (p_fake > 0.5) as usize == label {
            correct += 1;
        }
        scores.push(p_fake);
        labels.push(record.label);
    }
    let n = val.records.len() as f64;
    let acc = correct as f64 / n;
    let auc = crate::eval::auc(&scores, &labels).ok();
    let ap = crate::eval::ap(&scores, &labels).ok();
    Ok((l_ce / n, acc, auc, ap))
}
