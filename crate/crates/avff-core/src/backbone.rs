//! Learnable networks: per-modality token encoders, cross-modal conversion
//! networks, decoders, critics, and the classification heads, all expressed
//! as tape graphs over a named parameter store.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{derive_geometry, ModelConfig};
use crate::tensor::{Scalar, Tape, Var};
use crate::{Error, Result};

/// Which side of the audio-visual pair an operation works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    pub fn short(self) -> &'static str {
        match self {
            Modality::Audio => "a",
            Modality::Visual => "v",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Audio => Modality::Visual,
            Modality::Visual => Modality::Audio,
        }
    }
}

/// Direction of cross-modal token conversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Audio embeddings to visual-side token counts.
    A2V,
    /// Visual embeddings to audio-side token counts.
    V2A,
}

impl Direction {
    fn name(self) -> &'static str {
        match self {
            Direction::A2V => "a2v",
            Direction::V2A => "v2a",
        }
    }

    /// Source modality of the conversion.
    pub fn from_modality(self) -> Modality {
        match self {
            Direction::A2V => Modality::Audio,
            Direction::V2A => Modality::Visual,
        }
    }
}

/// What the per-token classification features are built from. The choice
/// sizes the reduction and classifier heads: `Combined` concatenates each
/// modality's own embeddings with the cross-modal ones (width 2 d_e per
/// modality), the other two use a single source (width d_e).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureMode {
    /// f_p = p concatenated with the cross-modal p_q.
    #[default]
    Combined,
    /// f_p = p, the encoder output alone.
    OwnOnly,
    /// f_p = p_q, the cross-modal prediction alone.
    CrossOnly,
}

impl FeatureMode {
    /// Per-modality feature width entering the reduction heads.
    pub fn width(self, encoder_dim: usize) -> usize {
        match self {
            FeatureMode::Combined => 2 * encoder_dim,
            FeatureMode::OwnOnly | FeatureMode::CrossOnly => encoder_dim,
        }
    }
}

/// How a tensor is filled at initialization. Residual-path weights use
/// the fixed ViT-style std; plain MLP stacks (reduction heads, classifier,
/// critics) scale by fan-in instead, or their activations and gradients
/// shrink geometrically with depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    TruncNormal,
    FanInNormal,
    Zero,
    One,
}

/// Shape and init of every parameter, in a fixed order. This is the single
/// source of truth for names; init, checkpoint validation, and the
/// parameter count all derive from it.
fn parameter_spec(
    cfg: &ModelConfig,
    mode: FeatureMode,
) -> Result<Vec<(String, (usize, usize), Init)>> {
    let g = derive_geometry(cfg)?;
    let d = cfg.encoder_dim;
    let dd = cfg.decoder_dim;
    let mut spec: Vec<(String, (usize, usize), Init)> = Vec::new();

    let block = |spec: &mut Vec<(String, (usize, usize), Init)>, prefix: String, w: usize| {
        spec.push((format!("{prefix}.ln1.g"), (1, w), Init::One));
        spec.push((format!("{prefix}.ln1.b"), (1, w), Init::Zero));
        for proj in ["wq", "wk", "wv", "wo"] {
            spec.push((format!("{prefix}.attn.{proj}"), (w, w), Init::TruncNormal));
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            spec.push((format!("{prefix}.attn.{bias}"), (1, w), Init::Zero));
        }
        spec.push((format!("{prefix}.ln2.g"), (1, w), Init::One));
        spec.push((format!("{prefix}.ln2.b"), (1, w), Init::Zero));
        spec.push((format!("{prefix}.mlp.w1"), (w, 4 * w), Init::TruncNormal));
        spec.push((format!("{prefix}.mlp.b1"), (1, 4 * w), Init::Zero));
        spec.push((format!("{prefix}.mlp.w2"), (4 * w, w), Init::TruncNormal));
        spec.push((format!("{prefix}.mlp.b2"), (1, w), Init::Zero));
    };

    for (m, tokens, patch_dim) in [
        ("a", g.audio_tokens_total, g.patch_dim_audio),
        ("v", g.visual_tokens_total, g.patch_dim_visual),
    ] {
        spec.push((format!("enc_{m}.embed.w"), (patch_dim, d), Init::TruncNormal));
        spec.push((format!("enc_{m}.embed.b"), (1, d), Init::Zero));
        spec.push((format!("enc_{m}.pos"), (tokens, d), Init::Zero));
        for i in 0..cfg.encoder_layers {
            block(&mut spec, format!("enc_{m}.block{i}"), d);
        }
        spec.push((format!("enc_{m}.ln_f.g"), (1, d), Init::One));
        spec.push((format!("enc_{m}.ln_f.b"), (1, d), Init::Zero));
    }

    for (dir, src_tps, tgt_tps) in [
        ("a2v", g.audio_tokens_per_slice, g.visual_tokens_per_slice),
        ("v2a", g.visual_tokens_per_slice, g.audio_tokens_per_slice),
    ] {
        spec.push((format!("conv_{dir}.adapter.w"), (tgt_tps, src_tps), Init::TruncNormal));
        spec.push((format!("conv_{dir}.adapter.b"), (tgt_tps, 1), Init::Zero));
        block(&mut spec, format!("conv_{dir}.block0"), d);
    }

    // Shared learnable mask rows, substituted at fused positions that no
    // cross-modal prediction covers (the no-fusion and random-masking
    // ablations).
    for m in ["a", "v"] {
        spec.push((format!("fuse_{m}.mask"), (1, d), Init::TruncNormal));
    }

    for (m, tokens, patch_dim) in [
        ("a", g.audio_tokens_total, g.patch_dim_audio),
        ("v", g.visual_tokens_total, g.patch_dim_visual),
    ] {
        spec.push((format!("dec_{m}.proj.w"), (d, dd), Init::TruncNormal));
        spec.push((format!("dec_{m}.proj.b"), (1, dd), Init::Zero));
        spec.push((format!("dec_{m}.pos"), (tokens, dd), Init::Zero));
        for i in 0..cfg.decoder_layers {
            block(&mut spec, format!("dec_{m}.block{i}"), dd);
        }
        spec.push((format!("dec_{m}.ln_f.g"), (1, dd), Init::One));
        spec.push((format!("dec_{m}.ln_f.b"), (1, dd), Init::Zero));
        spec.push((format!("dec_{m}.head.w"), (dd, patch_dim), Init::TruncNormal));
        spec.push((format!("dec_{m}.head.b"), (1, patch_dim), Init::Zero));
    }

    for (m, patch_dim) in [("a", g.patch_dim_audio), ("v", g.patch_dim_visual)] {
        spec.push((format!("disc_{m}.w1"), (patch_dim, d), Init::FanInNormal));
        spec.push((format!("disc_{m}.b1"), (1, d), Init::Zero));
        spec.push((format!("disc_{m}.w2"), (d, 1), Init::FanInNormal));
        spec.push((format!("disc_{m}.b2"), (1, 1), Init::Zero));
    }

    let f = mode.width(d);
    for m in ["a", "v"] {
        for i in 1..=3 {
            spec.push((format!("psi_{m}.w{i}"), (f, f), Init::FanInNormal));
            spec.push((format!("psi_{m}.b{i}"), (1, f), Init::Zero));
        }
        spec.push((format!("psi_{m}.pool"), (f, 1), Init::TruncNormal));
    }
    for i in 1..=3 {
        spec.push((format!("gamma.w{i}"), (2 * f, 2 * f), Init::FanInNormal));
        spec.push((format!("gamma.b{i}"), (1, 2 * f), Init::Zero));
    }
    spec.push(("gamma.w4".to_string(), (2 * f, 2), Init::FanInNormal));
    spec.push(("gamma.b4".to_string(), (1, 2), Init::Zero));

    Ok(spec)
}

/// Parameter names updated during stage-1 pretraining (everything except the
/// classification heads). Names do not depend on the feature mode.
pub fn stage1_param_names(cfg: &ModelConfig) -> Result<Vec<String>> {
    Ok(parameter_spec(cfg, FeatureMode::Combined)?
        .into_iter()
        .map(|(n, _, _)| n)
        .filter(|n| !n.starts_with("psi_") && !n.starts_with("gamma."))
        .collect())
}

/// Parameter names needed to run stage-2 classification (encoders,
/// conversion networks, and heads; decoders, critics, and fusion mask
/// rows are not used because stage 2 does not mask).
pub fn stage2_param_names(cfg: &ModelConfig) -> Result<Vec<String>> {
    Ok(parameter_spec(cfg, FeatureMode::Combined)?
        .into_iter()
        .map(|(n, _, _)| n)
        .filter(|n| {
            n.starts_with("enc_")
                || n.starts_with("conv_")
                || n.starts_with("psi_")
                || n.starts_with("gamma.")
        })
        .collect())
}

/// Named f32 parameter tensors in a fixed order, shared into tapes by `Arc`.
#[derive(Debug)]
pub struct ParameterStore {
    entries: Vec<(String, Arc<Array2<f32>>)>,
    index: HashMap<String, usize>,
    fingerprint: u64,
}

/// Outcome of overlaying a checkpoint onto a fresh store: which tensors
/// came from the file and which kept their fresh initialization.
#[derive(Debug)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub fresh: Vec<String>,
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), std: f64) -> Array2<f32> {
    Array2::from_shape_fn(shape, |_| {
        loop {
            let x: f64 = rng.sample::<f64, _>(StandardNormal) * std;
            if x.abs() <= 2.0 * std {
                return x as f32;
            }
        }
    })
}

impl ParameterStore {
    /// Fresh initialization for the config: truncated normal (resampled
    /// beyond two sigma) for weights, at std 0.02 on residual paths and
    /// std sqrt(2/fan_in) in the plain MLP stacks; zeros for biases and
    /// positional embeddings, ones for layer-norm scales. Seeded by
    /// `cfg.seed`. Heads are sized for [`FeatureMode::Combined`].
    pub fn init(cfg: &ModelConfig) -> Result<ParameterStore> {
        ParameterStore::init_for(cfg, FeatureMode::Combined)
    }

    /// Fresh initialization with the reduction and classifier heads sized
    /// for the given feature mode.
    pub fn init_for(cfg: &ModelConfig, mode: FeatureMode) -> Result<ParameterStore> {
        let spec = parameter_spec(cfg, mode)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut entries = Vec::with_capacity(spec.len());
        let mut index = HashMap::with_capacity(spec.len());
        for (name, shape, init) in spec {
            let tensor = match init {
                Init::TruncNormal => truncated_normal(&mut rng, shape, 0.02),
                Init::FanInNormal => {
                    truncated_normal(&mut rng, shape, (2.0 / shape.0 as f64).sqrt())
                }
                Init::Zero => Array2::zeros(shape),
                Init::One => Array2::ones(shape),
            };
            index.insert(name.clone(), entries.len());
            entries.push((name, Arc::new(tensor)));
        }
        Ok(ParameterStore { entries, index, fingerprint: cfg.fingerprint() })
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Array2<f32>>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    /// Mutable access for the optimizer. Clones the tensor only if a tape
    /// still holds a reference to it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f32>> {
        let &i = self.index.get(name)?;
        Some(Arc::make_mut(&mut self.entries[i].1))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Arc<Array2<f32>>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Writes all tensors to a checkpoint file.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_filtered(path, |_| true)
    }

    /// Writes the tensors whose names satisfy the predicate.
    pub fn save_filtered(&self, path: &Path, keep: impl Fn(&str) -> bool) -> Result<()> {
        let kept: Vec<&(String, Arc<Array2<f32>>)> =
            self.entries.iter().filter(|(n, _)| keep(n)).collect();
        let mut buf = Vec::new();
        buf.extend_from_slice(b"AVFP");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&self.fingerprint.to_le_bytes());
        buf.extend_from_slice(&(kept.len() as u32).to_le_bytes());
        for (name, tensor) in kept {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&2u32.to_le_bytes());
            buf.extend_from_slice(&(tensor.nrows() as u32).to_le_bytes());
            buf.extend_from_slice(&(tensor.ncols() as u32).to_le_bytes());
            for &x in tensor.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Initializes a fresh store for `cfg` and overlays every tensor found
    /// in the checkpoint. The file's config fingerprint must match unless
    /// `force` is set; unknown names or shape mismatches are always errors,
    /// listed exhaustively. The report says which tensors were loaded and
    /// which stayed at their fresh initialization. Heads are sized for
    /// [`FeatureMode::Combined`].
    pub fn load(path: &Path, cfg: &ModelConfig, force: bool) -> Result<(ParameterStore, LoadReport)> {
        ParameterStore::load_for(path, cfg, FeatureMode::Combined, force)
    }

    /// [`ParameterStore::load`] with heads sized for the given feature
    /// mode. The fingerprint does not record the mode, so loading a
    /// checkpoint trained under a different mode fails with head-shape
    /// mismatches rather than a fingerprint error.
    pub fn load_for(
        path: &Path,
        cfg: &ModelConfig,
        mode: FeatureMode,
        force: bool,
    ) -> Result<(ParameterStore, LoadReport)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
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
        if take(4)? != b"AVFP" {
            return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != 1 {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {version}",
                path.display()
            )));
        }
        let file_fp = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let want_fp = cfg.fingerprint();
        if file_fp != want_fp && !force {
            return Err(Error::Checkpoint(format!(
                "{}: config fingerprint {file_fp:016x} does not match active config \
                 {want_fp:016x} (use force to override)",
                path.display()
            )));
        }
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut loaded_tensors: Vec<(String, Array2<f32>)> = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("{}: non-utf8 name", path.display())))?;
            let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            if rank != 2 {
                return Err(Error::Checkpoint(format!(
                    "{}: tensor {name} has rank {rank}, expected 2",
                    path.display()
                )));
            }
            let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let payload = take(rows * cols * 4)?;
            let data: Vec<f32> =
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            loaded_tensors.push((name, Array2::from_shape_vec((rows, cols), data).unwrap()));
        }

        let mut store = ParameterStore::init_for(cfg, mode)?;
        let mut mismatches = Vec::new();
        let mut loaded = Vec::new();
        for (name, tensor) in loaded_tensors {
            match store.index.get(&name) {
                None => mismatches.push(format!("{name}: not a parameter of this config")),
                Some(&i) => {
                    let want = store.entries[i].1.dim();
                    if tensor.dim() != want {
                        mismatches.push(format!(
                            "{name}: file has {:?}, config wants {:?}",
                            tensor.dim(),
                            want
                        ));
                    } else {
                        store.entries[i].1 = Arc::new(tensor);
                        loaded.push(name);
                    }
                }
            }
        }
        if !mismatches.is_empty() {
            return Err(Error::Checkpoint(format!(
                "{}: {} tensor mismatches: {}",
                path.display(),
                mismatches.len(),
                mismatches.join("; ")
            )));
        }
        let loaded_set: std::collections::HashSet<&str> =
            loaded.iter().map(|s| s.as_str()).collect();
        let fresh = store
            .entries
            .iter()
            .map(|(n, _)| n.clone())
            .filter(|n| !loaded_set.contains(n.as_str()))
            .collect();
        Ok((store, LoadReport { loaded, fresh }))
    }
}

/// Typed view of the parameters for building graphs at a chosen precision.
pub trait ParamSource<F: Scalar> {
    fn fetch(&self, name: &str) -> Result<Arc<Array2<F>>>;
}

impl ParamSource<f32> for ParameterStore {
    fn fetch(&self, name: &str) -> Result<Arc<Array2<f32>>> {
        self.get(name)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }
}

/// A converted copy of the store at another precision, for double-precision
/// gradient checks.
pub struct CastParams<F: Scalar> {
    map: HashMap<String, Arc<Array2<F>>>,
}

impl<F: Scalar> CastParams<F> {
    pub fn from_store(store: &ParameterStore) -> CastParams<F> {
        let map = store
            .entries()
            .map(|(n, t)| (n.to_string(), Arc::new(t.mapv(|x| F::from_f64(x as f64)))))
            .collect();
        CastParams { map }
    }

    /// Replaces one tensor (shape must match), for perturbation tests.
    pub fn set(&mut self, name: &str, tensor: Array2<F>) {
        let slot = self.map.get_mut(name).expect("unknown parameter");
        assert_eq!(slot.dim(), tensor.dim());
        *slot = Arc::new(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Array2<F>>> {
        self.map.get(name)
    }
}

impl<F: Scalar> ParamSource<F> for CastParams<F> {
    fn fetch(&self, name: &str) -> Result<Arc<Array2<F>>> {
        self.map
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }
}

/// Binds named parameters onto one tape, deduplicating by name, and records
/// the name-to-Var mapping for gradient routing.
pub struct ParamBinder<'s, F: Scalar> {
    source: &'s dyn ParamSource<F>,
    seen: HashMap<String, Var>,
    bound: Vec<(String, Var)>,
    trainable: fn(&str) -> bool,
}

impl<'s, F: Scalar> ParamBinder<'s, F> {
    pub fn new(source: &'s dyn ParamSource<F>) -> Self {
        ParamBinder::with_trainable(source, |_| true)
    }

    /// A binder that enters parameters rejected by the predicate as tape
    /// constants: no gradient is computed for them and they are left out
    /// of [`ParamBinder::bound`].
    pub fn with_trainable(source: &'s dyn ParamSource<F>, trainable: fn(&str) -> bool) -> Self {
        ParamBinder { source, seen: HashMap::new(), bound: Vec::new(), trainable }
    }

    /// The tape Var for a named parameter, creating it on first use.
    pub fn var(&mut self, tape: &mut Tape<F>, name: &str) -> Result<Var> {
        if let Some(&v) = self.seen.get(name) {
            return Ok(v);
        }
        let tensor = self.source.fetch(name)?;
        let v = if (self.trainable)(name) {
            let v = tape.param(tensor);
            self.bound.push((name.to_string(), v));
            v
        } else {
            tape.constant(tensor.as_ref().clone())
        };
        self.seen.insert(name.to_string(), v);
        Ok(v)
    }

    /// All trainable (name, Var) pairs bound so far, in first-use order.
    pub fn bound(&self) -> &[(String, Var)] {
        &self.bound
    }
}

fn linear<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut ParamBinder<F>,
    x: Var,
    w: &str,
    b: &str,
) -> Result<Var> {
    let wv = binder.var(tape, w)?;
    let bv = binder.var(tape, b)?;
    let y = tape.matmul(x, wv);
    Ok(tape.add_row(y, bv))
}

fn layer_norm_named<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut ParamBinder<F>,
    x: Var,
    prefix: &str,
) -> Result<Var> {
    let g = binder.var(tape, &format!("{prefix}.g"))?;
    let b = binder.var(tape, &format!("{prefix}.b"))?;
    Ok(tape.layer_norm(x, g, b))
}

fn multi_head_attention<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut ParamBinder<F>,
    x: Var,
    prefix: &str,
    width: usize,
    heads: usize,
) -> Result<Var> {
    let q = linear(tape, binder, x, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
    let k = linear(tape, binder, x, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
    let v = linear(tape, binder, x, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
    let dh = width / heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let mut ctx = None;
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.matmul_nt(qh, kh);
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scaled);
        let out = tape.matmul(attn, vh);
        ctx = Some(match ctx {
            None => out,
            Some(c) => tape.concat_cols(c, out),
        });
    }
    linear(tape, binder, ctx.unwrap(), &format!("{prefix}.wo"), &format!("{prefix}.bo"))
}

/// One pre-norm transformer block: x + MHSA(LN(x)), then x + MLP(LN(x)).
fn transformer_block<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut ParamBinder<F>,
    x: Var,
    prefix: &str,
    width: usize,
    heads: usize,
) -> Result<Var> {
    let normed = layer_norm_named(tape, binder, x, &format!("{prefix}.ln1"))?;
    let attn = multi_head_attention(tape, binder, normed, &format!("{prefix}.attn"), width, heads)?;
    let x = tape.add(x, attn);
    let normed = layer_norm_named(tape, binder, x, &format!("{prefix}.ln2"))?;
    let h = linear(tape, binder, normed, &format!("{prefix}.mlp.w1"), &format!("{prefix}.mlp.b1"))?;
    let h = tape.gelu(h);
    let h = linear(tape, binder, h, &format!("{prefix}.mlp.w2"), &format!("{prefix}.mlp.b2"))?;
    Ok(tape.add(x, h))
}

fn expected_patch_dim(g: &crate::config::Geometry, modality: Modality) -> usize {
    match modality {
        Modality::Audio => g.patch_dim_audio,
        Modality::Visual => g.patch_dim_visual,
    }
}

fn tokens_total(g: &crate::config::Geometry, modality: Modality) -> usize {
    match modality {
        Modality::Audio => g.audio_tokens_total,
        Modality::Visual => g.visual_tokens_total,
    }
}

/// Embeds tokens (any subset of the grid) into the shared width: linear
/// patch embedding, plus the positional rows named by `positions`, then the
/// encoder transformer stack. Row i of `tokens` must sit at grid position
/// `positions[i]`.
pub fn encode<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut ParamBinder<F>,
    tokens: Var,
    positions: &[usize],
    modality: Modality,
    cfg: &ModelConfig,
) -> Result<Var> {
    let g = derive_geometry(cfg)?;
    let m = modality.short();
    let (rows, cols) = tape.value(tokens).dim();
    if rows != positions.len() || cols != expected_patch_dim(&g, modality) {
        return Err(Error::Shape(format!(
            "encode {m}: tokens are {rows}x{cols}, expected {}x{}",
            positions.len(),
            expected_patch_dim(&g, modality)
        )));
    }
    let total = tokens_total(&g, modality);
    if let Some(&bad) = positions.iter().find(|&&p| p >= total) {
        return Err(Error::Shape(format!("encode {m}: position {bad} outside 0..{total}")));
    }

    let mut x = linear(tape, binder, tokens, &format!("enc_{m}.embed.w"), &format!("enc_{m}.embed.b"))?;
    let pos = binder.var(tape, &format!("enc_{m}.pos"))?;
    let full = positions.len() == total && positions.iter().enumerate().all(|(i, &p)| i == p);
    let pos_rows = if full { pos } else { tape.gather_rows(pos, positions.to_vec()) };
    x = tape.add(x, pos_rows);
    for i in 0..cfg.encoder_layers {
        x = transformer_block(tape, binder, x, &format!("enc_{m}.block{i}"), cfg.encoder_dim, cfg.num_heads)?;
    }
    layer_norm_named(tape, binder, x, &format!("enc_{m}.ln_f"))
}

/// Converts per-slice embeddings to the other modality's token counts: a
/// shared linear adapter across the token axis of each slice, then one
/// transformer block per slice. Slice identities of the input are kept.
pub fn cross_modal_convert<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut ParamBinder<F>,
    embeddings: Var,
    slice_ids: &[usize],
    direction: Direction,
    cfg: &ModelConfig,
) -> Result<(Var, Vec<usize>)> {
    let g = derive_geometry(cfg)?;
    let (src_tps, tgt_tps) = match direction {
        Direction::A2V => (g.audio_tokens_per_slice, g.visual_tokens_per_slice),
        Direction::V2A => (g.visual_tokens_per_slice, g.audio_tokens_per_slice),
    };
    let (rows, cols) = tape.value(embeddings).dim();
    if rows != slice_ids.len() * src_tps || cols != cfg.encoder_dim {
        return Err(Error::Shape(format!(
            "convert {}: embeddings are {rows}x{cols}, expected {} slices x {src_tps} tokens x {}",
            direction.name(),
            slice_ids.len(),
            cfg.encoder_dim
        )));
    }
    let name = direction.name();
    let w = binder.var(tape, &format!("conv_{name}.adapter.w"))?;
    let b = binder.var(tape, &format!("conv_{name}.adapter.b"))?;
    let mut outputs = Vec::with_capacity(slice_ids.len());
    for s in 0..slice_ids.len() {
        let idx: Vec<usize> = (s * src_tps..(s + 1) * src_tps).collect();
        let slice = tape.gather_rows(embeddings, idx);
        let adapted = tape.matmul(w, slice);
        let adapted = tape.add_col(adapted, b);
        let out =
            transformer_block(tape, binder, adapted, &format!("conv_{name}.block0"), cfg.encoder_dim, cfg.num_heads)?;
        outputs.push(out);
    }
    let combined = if outputs.len() == 1 { outputs[0] } else { tape.concat_rows(outputs) };
    debug_assert_eq!(tape.value(combined).nrows(), slice_ids.len() * tgt_tps);
    Ok((combined, slice_ids.to_vec()))
}

/// Decodes a full fused sequence back to token space: projection to the
/// decoder width, decoder positional embeddings, transformer stack, and a
/// linear head to the patch dimension.
pub fn decode<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut ParamBinder<F>,
    fused: Var,
    modality: Modality,
    cfg: &ModelConfig,
) -> Result<Var> {
    let g = derive_geometry(cfg)?;
    let m = modality.short();
    let total = tokens_total(&g, modality);
    let (rows, cols) = tape.value(fused).dim();
    if rows != total || cols != cfg.encoder_dim {
        return Err(Error::Shape(format!(
            "decode {m}: fused sequence is {rows}x{cols}, expected {total}x{}",
            cfg.encoder_dim
        )));
    }
    let mut x = linear(tape, binder, fused, &format!("dec_{m}.proj.w"), &format!("dec_{m}.proj.b"))?;
    let pos = binder.var(tape, &format!("dec_{m}.pos"))?;
    x = tape.add(x, pos);
    for i in 0..cfg.decoder_layers {
        x = transformer_block(tape, binder, x, &format!("dec_{m}.block{i}"), cfg.decoder_dim, cfg.num_heads)?;
    }
    x = layer_norm_named(tape, binder, x, &format!("dec_{m}.ln_f"))?;
    linear(tape, binder, x, &format!("dec_{m}.head.w"), &format!("dec_{m}.head.b"))
}

/// Critic score for one sample's reconstructed masked tokens: a two-layer
/// MLP per token, averaged over tokens. Unbounded output (1x1).
pub fn discriminate<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut ParamBinder<F>,
    tokens: Var,
    modality: Modality,
    cfg: &ModelConfig,
) -> Result<Var> {
    let g = derive_geometry(cfg)?;
    let m = modality.short();
    let (rows, cols) = tape.value(tokens).dim();
    if rows == 0 {
        return Err(Error::Invalid(format!("discriminate {m}: empty token set")));
    }
    if cols != expected_patch_dim(&g, modality) {
        return Err(Error::Shape(format!(
            "discriminate {m}: token dim {cols}, expected {}",
            expected_patch_dim(&g, modality)
        )));
    }
    let h = linear(tape, binder, tokens, &format!("disc_{m}.w1"), &format!("disc_{m}.b1"))?;
    let h = tape.gelu(h);
    let scores = linear(tape, binder, h, &format!("disc_{m}.w2"), &format!("disc_{m}.b2"))?;
    Ok(tape.mean_rows(scores))
}

/// Collapses one modality's fused features to a single vector: a 3-layer
/// MLP across the feature axis, then a learned attention-weighted mean over
/// tokens (or a plain mean when `mean_pool` is set).
pub fn patch_reduce<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut ParamBinder<F>,
    features: Var,
    modality: Modality,
    mean_pool: bool,
) -> Result<Var> {
    let m = modality.short();
    let w1 = binder.var(tape, &format!("psi_{m}.w1"))?;
    let f = tape.value(w1).nrows();
    let (_, cols) = tape.value(features).dim();
    if cols != f {
        return Err(Error::Shape(format!(
            "patch reduction {m}: feature dim {cols}, expected {f}"
        )));
    }
    let mut h = features;
    for i in 1..=3 {
        h = linear(tape, binder, h, &format!("psi_{m}.w{i}"), &format!("psi_{m}.b{i}"))?;
        if i < 3 {
            h = tape.gelu(h);
        }
    }
    if mean_pool {
        return Ok(tape.mean_rows(h));
    }
    let pool = binder.var(tape, &format!("psi_{m}.pool"))?;
    let scores = tape.matmul(h, pool);
    let row = tape.transpose(scores);
    let weights = tape.softmax_rows(row);
    Ok(tape.matmul(weights, h))
}

/// Classifier logits for one sample: reduce each modality's fused features
/// to a vector, concatenate, and run the 4-layer head. Output is 1x2.
pub fn classify<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut ParamBinder<F>,
    f_a: Var,
    f_v: Var,
    mean_pool: bool,
) -> Result<Var> {
    let ra = patch_reduce(tape, binder, f_a, Modality::Audio, mean_pool)?;
    let rv = patch_reduce(tape, binder, f_v, Modality::Visual, mean_pool)?;
    let mut h = tape.concat_cols(ra, rv);
    for i in 1..=4 {
        h = linear(tape, binder, h, &format!("gamma.w{i}"), &format!("gamma.b{i}"))?;
        if i < 4 {
            h = tape.gelu(h);
        }
    }
    Ok(h)
}
