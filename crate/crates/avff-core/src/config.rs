//! Run configuration and derived tokenization geometry.
//!
//! `ModelConfig` is the single source of truth every other module reads.
//! Defaults reproduce the published training setup (3.2 s clips, 128 mel
//! bins at a 4 ms hop, 16 visual frames at 224x224, ViT-B sized
//! encoders); `ModelConfig::desk()` is a small preset that trains in
//! minutes on a laptop. Config files are flat `key = value` text with
//! `#` comments, overlaid by CLI `--set key=value` overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

/// Weights on the three stage-1 loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub contrastive: f64,
    pub reconstruction: f64,
    pub adversarial: f64,
}

/// Optimization knobs. These do not affect tensor shapes, so they are
/// excluded from the checkpoint fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    /// Critic updates per generator update.
    pub n_critic: usize,
    /// Fraction of training sources held out for validation.
    pub val_fraction: f64,
    /// Drop same-source clips from the contrastive denominator.
    pub exclude_same_source_negatives: bool,
    /// Grayscale/flip augmentation during training.
    pub augment: bool,
    /// Cosine restart period for stage 2, in epochs. 0 = one cycle.
    pub stage2_restart_epochs: usize,
}

/// Full model + training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Clip duration T in seconds.
    pub clip_seconds: f64,
    /// Source visual frame rate (frames per second).
    pub visual_fps: f64,
    /// Source audio sample rate in Hz.
    pub audio_sample_rate: u32,
    /// Mel filterbank size L.
    pub mel_bins: usize,
    /// STFT hop in milliseconds.
    pub mel_hop_ms: f64,
    /// STFT window in milliseconds (Hamming).
    pub mel_window_ms: f64,
    /// Visual frames per clip T_v.
    pub visual_frames: usize,
    /// Mel frames per clip T_a.
    pub audio_frames: usize,
    /// Frame height = width in pixels.
    pub visual_size: usize,
    /// Image channels C.
    pub channels: usize,
    /// Visual patch (depth in frames, height px, width px).
    pub visual_patch: (usize, usize, usize),
    /// Audio patch (time frames, freq bins).
    pub audio_patch: (usize, usize),
    /// Temporal slice count K.
    pub num_slices: usize,
    /// Fraction of slices hidden on the audio side; the visual side
    /// hides the complementary slices.
    pub mask_ratio: f64,
    pub encoder_dim: usize,
    pub decoder_dim: usize,
    pub num_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Contrastive temperature tau.
    pub temperature: f64,
    pub loss_weights: LossWeights,
    /// Critic weight-clip bound (symmetric).
    pub wgan_clip: f64,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    /// Published setup: 3.2 s clips, 768x128 log-mel with 16x16 patches,
    /// 16 frames at 224x224 with 2x16x16 patches, ViT-B encoders.
    pub fn paper() -> Self {
        ModelConfig {
            clip_seconds: 3.2,
            visual_fps: 5.0,
            audio_sample_rate: 16_000,
            mel_bins: 128,
            mel_hop_ms: 4.0,
            mel_window_ms: 16.0,
            visual_frames: 16,
            audio_frames: 768,
            visual_size: 224,
            channels: 3,
            visual_patch: (2, 16, 16),
            audio_patch: (16, 16),
            num_slices: 8,
            mask_ratio: 0.5,
            encoder_dim: 768,
            decoder_dim: 384,
            num_heads: 12,
            encoder_layers: 12,
            decoder_layers: 4,
            temperature: 0.05,
            loss_weights: LossWeights { contrastive: 0.01, reconstruction: 1.0, adversarial: 0.1 },
            wgan_clip: 0.01,
            seed: 0,
            train: TrainConfig {
                batch_size: 32,
                stage1_epochs: 500,
                stage2_epochs: 30,
                stage1_lr: 1.5e-4,
                stage2_lr: 1.0e-4,
                warmup_frac: 0.08,
                weight_decay: 0.05,
                n_critic: 1,
                val_fraction: 0.1,
                exclude_same_source_negatives: false,
                augment: true,
                stage2_restart_epochs: 0,
            },
        }
    }

    /// Laptop-scale preset: same clip timing, 128x32 log-mel at a 25 ms
    /// hop, 64x64 frames, small encoders. Trains in minutes on CPU.
    pub fn desk() -> Self {
        let mut cfg = Self::paper();
        cfg.mel_bins = 32;
        cfg.mel_hop_ms = 25.0;
        cfg.mel_window_ms = 50.0;
        cfg.audio_frames = 128;
        cfg.visual_size = 64;
        cfg.visual_patch = (2, 8, 8);
        cfg.audio_patch = (8, 8);
        cfg.encoder_dim = 192;
        cfg.decoder_dim = 96;
        cfg.num_heads = 4;
        cfg.encoder_layers = 4;
        cfg.decoder_layers = 2;
        cfg.train.batch_size = 16;
        cfg.train.stage1_epochs = 30;
        cfg.train.stage2_epochs = 12;
        cfg
    }

    /// Minimal geometry (8-dim embeddings, 4 slices, 2 tokens per slice and
    /// modality) for double-precision gradient checks and fast unit tests.
    pub fn tiny() -> Self {
        let mut cfg = Self::desk();
        cfg.mel_bins = 8;
        cfg.audio_frames = 64;
        cfg.mel_hop_ms = 50.0;
        cfg.mel_window_ms = 100.0;
        cfg.audio_patch = (8, 8);
        cfg.visual_frames = 8;
        cfg.visual_fps = 2.5;
        cfg.visual_size = 8;
        cfg.channels = 1;
        cfg.visual_patch = (2, 4, 8);
        cfg.num_slices = 4;
        cfg.encoder_dim = 8;
        cfg.decoder_dim = 8;
        cfg.num_heads = 2;
        cfg.encoder_layers = 1;
        cfg.decoder_layers = 1;
        cfg.train.batch_size = 4;
        cfg
    }

    /// Audio frame period in seconds (n_a).
    pub fn audio_hop_s(&self) -> f64 {
        self.mel_hop_ms / 1000.0
    }

    /// Visual frame period in seconds (n_v).
    pub fn visual_period_s(&self) -> f64 {
        1.0 / self.visual_fps
    }

    /// Number of slices hidden on the audio side.
    pub fn masked_slices(&self) -> usize {
        (self.mask_ratio * self.num_slices as f64).round() as usize
    }

    /// Checks every config invariant, reporting all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut faults: Vec<String> = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                faults.push(msg);
            }
        };

        need(self.clip_seconds > 0.0, "clip_seconds must be > 0".into());
        need(self.visual_fps > 0.0, "visual_fps must be > 0".into());
        need(self.audio_sample_rate > 0, "audio_sample_rate must be > 0".into());
        need(self.mel_hop_ms > 0.0, "mel_hop_ms must be > 0".into());
        need(
            self.mel_window_ms >= self.mel_hop_ms,
            "mel_window_ms must be >= mel_hop_ms".into(),
        );
        need(self.channels >= 1, "channels must be >= 1".into());
        need(self.num_slices >= 1, "num_slices must be >= 1".into());

        let (pd, ph, pw) = self.visual_patch;
        let (at, af) = self.audio_patch;
        need(pd >= 1 && ph >= 1 && pw >= 1, "visual_patch dims must be >= 1".into());
        need(at >= 1 && af >= 1, "audio_patch dims must be >= 1".into());
        if pd >= 1 && self.num_slices >= 1 {
            need(
                self.visual_frames % (pd * self.num_slices) == 0,
                format!(
                    "visual_frames ({}) not divisible by visual_patch.depth x num_slices ({})",
                    self.visual_frames,
                    pd * self.num_slices
                ),
            );
        }
        if at >= 1 && self.num_slices >= 1 {
            need(
                self.audio_frames % (at * self.num_slices) == 0,
                format!(
                    "audio_frames ({}) not divisible by audio_patch.time x num_slices ({})",
                    self.audio_frames,
                    at * self.num_slices
                ),
            );
        }
        if ph >= 1 && pw >= 1 {
            need(
                self.visual_size % ph == 0 && self.visual_size % pw == 0,
                format!(
                    "visual_size ({}) not divisible by visual_patch {}x{}",
                    self.visual_size, ph, pw
                ),
            );
        }
        if af >= 1 {
            need(
                self.mel_bins % af == 0,
                format!("mel_bins ({}) not divisible by audio_patch.freq ({})", self.mel_bins, af),
            );
        }

        // Both modalities must span the clip, up to one slice of slack
        // for frame-count rounding.
        let audio_span = self.audio_frames as f64 * self.audio_hop_s();
        let audio_slack = audio_span / self.num_slices as f64;
        need(
            (audio_span - self.clip_seconds).abs() <= audio_slack + 1e-9,
            format!(
                "audio_frames x hop spans {audio_span:.4}s, clip_seconds is {:.4}s",
                self.clip_seconds
            ),
        );
        let visual_span = self.visual_frames as f64 * self.visual_period_s();
        let visual_slack = visual_span / self.num_slices as f64;
        need(
            (visual_span - self.clip_seconds).abs() <= visual_slack + 1e-9,
            format!(
                "visual_frames / fps spans {visual_span:.4}s, clip_seconds is {:.4}s",
                self.clip_seconds
            ),
        );

        need(
            self.mask_ratio > 0.0 && self.mask_ratio < 1.0,
            format!("mask_ratio ({}) must lie in (0, 1)", self.mask_ratio),
        );
        let scaled = self.mask_ratio * self.num_slices as f64;
        need(
            (scaled - scaled.round()).abs() < 1e-9,
            format!(
                "mask_ratio x num_slices = {scaled} is not an integer slice count"
            ),
        );

        need(self.encoder_dim >= 1 && self.decoder_dim >= 1, "model dims must be >= 1".into());
        need(self.num_heads >= 1, "num_heads must be >= 1".into());
        need(
            self.encoder_dim % self.num_heads == 0,
            format!(
                "encoder_dim ({}) not divisible by num_heads ({})",
                self.encoder_dim, self.num_heads
            ),
        );
        need(
            self.decoder_dim % self.num_heads == 0,
            format!(
                "decoder_dim ({}) not divisible by num_heads ({})",
                self.decoder_dim, self.num_heads
            ),
        );
        need(self.temperature > 0.0, "temperature must be > 0".into());
        need(
            self.loss_weights.contrastive > 0.0
                && self.loss_weights.reconstruction > 0.0
                && self.loss_weights.adversarial > 0.0,
            "loss weights must be > 0".into(),
        );
        need(self.wgan_clip > 0.0, "wgan_clip must be > 0".into());

        let t = &self.train;
        need(t.batch_size >= 1, "batch_size must be >= 1".into());
        need(t.stage1_lr > 0.0 && t.stage2_lr > 0.0, "learning rates must be > 0".into());
        need(
            (0.0..1.0).contains(&t.warmup_frac),
            "warmup_frac must lie in [0, 1)".into(),
        );
        need(t.weight_decay >= 0.0, "weight_decay must be >= 0".into());
        need(t.n_critic >= 1, "n_critic must be >= 1".into());
        need(
            (0.0..0.5).contains(&t.val_fraction),
            "val_fraction must lie in [0, 0.5)".into(),
        );

        if faults.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(faults.join("; ")))
        }
    }

    /// 64-bit FNV-1a over the canonical rendering of every
    /// shape-determining key. Two configs with equal fingerprints
    /// produce identically-shaped parameter sets.
    pub fn fingerprint(&self) -> u64 {
        let text = self.shape_text();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    fn shape_text(&self) -> String {
        let mut s = String::new();
        let (pd, ph, pw) = self.visual_patch;
        let (at, af) = self.audio_patch;
        let _ = write!(
            s,
            "audio_frames={};audio_patch={}x{};channels={};decoder_dim={};\
             decoder_layers={};encoder_dim={};encoder_layers={};mel_bins={};\
             num_heads={};num_slices={};visual_frames={};visual_patch={}x{}x{};\
             visual_size={}",
            self.audio_frames,
            at,
            af,
            self.channels,
            self.decoder_dim,
            self.decoder_layers,
            self.encoder_dim,
            self.encoder_layers,
            self.mel_bins,
            self.num_heads,
            self.num_slices,
            self.visual_frames,
            pd,
            ph,
            pw,
            self.visual_size,
        );
        s
    }

    /// Applies one `key = value` assignment. The `preset` key replaces
    /// the whole config with a named preset, so it should come before
    /// any other assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn bad(key: &str, value: &str, want: &str) -> Error {
            Error::Config(format!("key `{key}`: cannot parse `{value}` as {want}"))
        }
        macro_rules! num {
            ($field:expr, $ty:literal, $key:ident, $val:ident) => {
                $field = $val.parse().map_err(|_| bad($key, $val, $ty))?
            };
        }
        let (key, value) = (key.trim(), value.trim());
        match key {
            "preset" => {
                *self = match value {
                    "paper" => ModelConfig::paper(),
                    "desk" => ModelConfig::desk(),
                    "tiny" => ModelConfig::tiny(),
                    _ => return Err(bad(key, value, "one of paper, desk, tiny")),
                }
            }
            "clip_seconds" => num!(self.clip_seconds, "a number", key, value),
            "visual_fps" => num!(self.visual_fps, "a number", key, value),
            "audio_sample_rate" => num!(self.audio_sample_rate, "an integer", key, value),
            "mel_bins" => num!(self.mel_bins, "an integer", key, value),
            "mel_hop_ms" => num!(self.mel_hop_ms, "a number", key, value),
            "mel_window_ms" => num!(self.mel_window_ms, "a number", key, value),
            "visual_frames" => num!(self.visual_frames, "an integer", key, value),
            "audio_frames" => num!(self.audio_frames, "an integer", key, value),
            "visual_size" => num!(self.visual_size, "an integer", key, value),
            "channels" => num!(self.channels, "an integer", key, value),
            "visual_patch" => {
                let parts: Vec<&str> = value.split('x').collect();
                let dims: Option<Vec<usize>> =
                    parts.iter().map(|p| p.trim().parse().ok()).collect();
                match dims.as_deref() {
                    Some([d, h, w]) if parts.len() == 3 => self.visual_patch = (*d, *h, *w),
                    _ => return Err(bad(key, value, "DxHxW (e.g. 2x16x16)")),
                }
            }
            "audio_patch" => {
                let parts: Vec<&str> = value.split('x').collect();
                let dims: Option<Vec<usize>> =
                    parts.iter().map(|p| p.trim().parse().ok()).collect();
                match dims.as_deref() {
                    Some([t, f]) if parts.len() == 2 => self.audio_patch = (*t, *f),
                    _ => return Err(bad(key, value, "TxF (e.g. 16x16)")),
                }
            }
            "num_slices" => num!(self.num_slices, "an integer", key, value),
            "mask_ratio" => num!(self.mask_ratio, "a number", key, value),
            "encoder_dim" => num!(self.encoder_dim, "an integer", key, value),
            "decoder_dim" => num!(self.decoder_dim, "an integer", key, value),
            "num_heads" => num!(self.num_heads, "an integer", key, value),
            "encoder_layers" => num!(self.encoder_layers, "an integer", key, value),
            "decoder_layers" => num!(self.decoder_layers, "an integer", key, value),
            "temperature" => num!(self.temperature, "a number", key, value),
            "lambda_contrastive" => num!(self.loss_weights.contrastive, "a number", key, value),
            "lambda_reconstruction" => {
                num!(self.loss_weights.reconstruction, "a number", key, value)
            }
            "lambda_adversarial" => num!(self.loss_weights.adversarial, "a number", key, value),
            "wgan_clip" => num!(self.wgan_clip, "a number", key, value),
            "seed" => num!(self.seed, "an integer", key, value),
            "batch_size" => num!(self.train.batch_size, "an integer", key, value),
            "stage1_epochs" => num!(self.train.stage1_epochs, "an integer", key, value),
            "stage2_epochs" => num!(self.train.stage2_epochs, "an integer", key, value),
            "stage1_lr" => num!(self.train.stage1_lr, "a number", key, value),
            "stage2_lr" => num!(self.train.stage2_lr, "a number", key, value),
            "warmup_frac" => num!(self.train.warmup_frac, "a number", key, value),
            "weight_decay" => num!(self.train.weight_decay, "a number", key, value),
            "n_critic" => num!(self.train.n_critic, "an integer", key, value),
            "val_fraction" => num!(self.train.val_fraction, "a number", key, value),
            "exclude_same_source_negatives" => {
                num!(self.train.exclude_same_source_negatives, "true/false", key, value)
            }
            "augment" => num!(self.train.augment, "true/false", key, value),
            "stage2_restart_epochs" => {
                num!(self.train.stage2_restart_epochs, "an integer", key, value)
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}

/// Token counts derived from a validated config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub audio_tokens_total: usize,
    pub audio_tokens_per_slice: usize,
    pub visual_tokens_total: usize,
    pub visual_tokens_per_slice: usize,
    /// Flattened audio patch length: time x freq.
    pub patch_dim_audio: usize,
    /// Flattened visual patch length: depth x height x width x C.
    pub patch_dim_visual: usize,
    pub audio_patches_time: usize,
    pub audio_patches_freq: usize,
    pub visual_patches_time: usize,
    /// Patches per frame-group: (H/ph) x (W/pw).
    pub visual_patches_space: usize,
}

/// Computes exact token counts for both modalities.
pub fn derive_geometry(cfg: &ModelConfig) -> Result<Geometry> {
    cfg.validate()?;
    let (pd, ph, pw) = cfg.visual_patch;
    let (at, af) = cfg.audio_patch;
    let audio_patches_time = cfg.audio_frames / at;
    let audio_patches_freq = cfg.mel_bins / af;
    let visual_patches_time = cfg.visual_frames / pd;
    let visual_patches_space = (cfg.visual_size / ph) * (cfg.visual_size / pw);
    let audio_tokens_total = audio_patches_time * audio_patches_freq;
    let visual_tokens_total = visual_patches_time * visual_patches_space;
    Ok(Geometry {
        audio_tokens_total,
        audio_tokens_per_slice: audio_tokens_total / cfg.num_slices,
        visual_tokens_total,
        visual_tokens_per_slice: visual_tokens_total / cfg.num_slices,
        patch_dim_audio: at * af,
        patch_dim_visual: pd * ph * pw * cfg.channels,
        audio_patches_time,
        audio_patches_freq,
        visual_patches_time,
        visual_patches_space,
    })
}

/// Loads a config: paper defaults, overlaid by the file (if given),
/// then by `overrides`, then re-validated.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::paper();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut faults = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = cfg.set(k, v) {
                        faults.push(format!("line {}: {e}", lineno + 1));
                    }
                }
                None => faults.push(format!("line {}: expected `key = value`", lineno + 1)),
            }
        }
        if !faults.is_empty() {
            return Err(Error::format(path, faults.join("; ")));
        }
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Renders a config as a parseable key-value document with keys in
/// sorted order. `load_config` on the output reproduces the config.
pub fn render_config(cfg: &ModelConfig) -> String {
    let (pd, ph, pw) = cfg.visual_patch;
    let (at, af) = cfg.audio_patch;
    let mut kv: BTreeMap<&str, String> = BTreeMap::new();
    kv.insert("clip_seconds", format!("{:?}", cfg.clip_seconds));
    kv.insert("visual_fps", format!("{:?}", cfg.visual_fps));
    kv.insert("audio_sample_rate", cfg.audio_sample_rate.to_string());
    kv.insert("mel_bins", cfg.mel_bins.to_string());
    kv.insert("mel_hop_ms", format!("{:?}", cfg.mel_hop_ms));
    kv.insert("mel_window_ms", format!("{:?}", cfg.mel_window_ms));
    kv.insert("visual_frames", cfg.visual_frames.to_string());
    kv.insert("audio_frames", cfg.audio_frames.to_string());
    kv.insert("visual_size", cfg.visual_size.to_string());
    kv.insert("channels", cfg.channels.to_string());
    kv.insert("visual_patch", format!("{pd}x{ph}x{pw}"));
    kv.insert("audio_patch", format!("{at}x{af}"));
    kv.insert("num_slices", cfg.num_slices.to_string());
    kv.insert("mask_ratio", format!("{:?}", cfg.mask_ratio));
    kv.insert("encoder_dim", cfg.encoder_dim.to_string());
    kv.insert("decoder_dim", cfg.decoder_dim.to_string());
    kv.insert("num_heads", cfg.num_heads.to_string());
    kv.insert("encoder_layers", cfg.encoder_layers.to_string());
    kv.insert("decoder_layers", cfg.decoder_layers.to_string());
    kv.insert("temperature", format!("{:?}", cfg.temperature));
    kv.insert("lambda_contrastive", format!("{:?}", cfg.loss_weights.contrastive));
    kv.insert("lambda_reconstruction", format!("{:?}", cfg.loss_weights.reconstruction));
    kv.insert("lambda_adversarial", format!("{:?}", cfg.loss_weights.adversarial));
    kv.insert("wgan_clip", format!("{:?}", cfg.wgan_clip));
    kv.insert("seed", cfg.seed.to_string());
    kv.insert("batch_size", cfg.train.batch_size.to_string());
    kv.insert("stage1_epochs", cfg.train.stage1_epochs.to_string());
    kv.insert("stage2_epochs", cfg.train.stage2_epochs.to_string());
    kv.insert("stage1_lr", format!("{:?}", cfg.train.stage1_lr));
    kv.insert("stage2_lr", format!("{:?}", cfg.train.stage2_lr));
    kv.insert("warmup_frac", format!("{:?}", cfg.train.warmup_frac));
    kv.insert("weight_decay", format!("{:?}", cfg.train.weight_decay));
    kv.insert("n_critic", cfg.train.n_critic.to_string());
    kv.insert("val_fraction", format!("{:?}", cfg.train.val_fraction));
    kv.insert(
        "exclude_same_source_negatives",
        cfg.train.exclude_same_source_negatives.to_string(),
    );
    kv.insert("augment", cfg.train.augment.to_string());
    kv.insert("stage2_restart_epochs", cfg.train.stage2_restart_epochs.to_string());

    let mut out = String::new();
    for (k, v) in kv {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}
