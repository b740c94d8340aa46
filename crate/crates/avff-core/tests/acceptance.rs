//! Acceptance suite: one test per criterion, each printing a PASS line
//! (run with `--nocapture` to see them). Heavyweight end-to-end runs share
//! a fixture; set `ACCEPTANCE_FULL=1` to run those at full published scale
//! instead of the default sandbox scale.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use ndarray::{Array2, Array4};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use avff_core::backbone::{
    decode, discriminate, encode, CastParams, Modality, ParamBinder, ParameterStore,
};
use avff_core::config::{derive_geometry, ModelConfig};
use avff_core::data::{generate_synthetic_corpus, sample_clip_at, ClipSample, Manifest};
use avff_core::losses::{
    adversarial_critic_term, adversarial_generator_term, contrastive_loss, cross_entropy,
    masked_reconstruction_term,
};
use avff_core::masking::{draw_complementary_masks, draw_independent_masks, SliceMaskPair};
use avff_core::tensor::{Tape, Var};
use avff_core::tokenizer::TokenizedPair;
use avff_core::training::{fused_embedding, stage2_logits, AblationFlags};

fn pass(criterion: usize, what: &str) {
    println!("acceptance criterion {criterion} ({what}): PASS");
}

// ---------------------------------------------------------------- fixtures

struct TinyWorld {
    _dir: tempfile::TempDir,
    cfg: ModelConfig,
    manifest: Manifest,
    params: ParameterStore,
}

/// Tiny corpus and fresh parameters for structural and gradient checks.
fn tiny_world() -> &'static TinyWorld {
    static WORLD: OnceLock<TinyWorld> = OnceLock::new();
    WORLD.get_or_init(|| {
        let mut cfg = ModelConfig::tiny();
        cfg.seed = 11;
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let manifest = generate_synthetic_corpus(3, 2, &cfg, &mut rng, dir.path()).unwrap();
        let params = ParameterStore::init(&cfg).unwrap();
        TinyWorld { _dir: dir, cfg, manifest, params }
    })
}

fn tiny_samples(n: usize, seed: u64) -> Vec<ClipSample> {
    let w = tiny_world();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let r = &w.manifest.records[rng.random_range(0..w.manifest.records.len())];
            let span = (r.duration_s - w.cfg.clip_seconds).max(0.0);
            let offset = rng.random::<f64>() * span;
            sample_clip_at(&w.manifest, r, &w.cfg, offset, false, false).unwrap()
        })
        .collect()
}

fn to_f64_pair(s: &ClipSample, cfg: &ModelConfig) -> TokenizedPair<f64> {
    let audio: Array2<f64> = s.audio.mapv(|x| x as f64);
    let visual: Array4<f64> = s.visual.mapv(|x| x as f64);
    TokenizedPair::new(&audio, &visual, cfg).unwrap()
}

// ---------------------------------------------------- gradient-check core

fn every_param(_: &str) -> bool {
    true
}

fn generator_params(name: &str) -> bool {
    !name.starts_with("disc_")
}

fn critic_params(name: &str) -> bool {
    name.starts_with("disc_")
}

/// Loss value plus, when asked, the analytic gradients of every bound
/// trainable parameter.
type Forward<'a> = dyn Fn(&CastParams<f64>, bool) -> (f64, Vec<(String, Array2<f64>)>) + 'a;

/// Central-difference check: every parameter the loss touches is sampled
/// at `k` entries and the analytic gradient must match to 1e-4 relative
/// error. Entries are picked deterministically from `seed`.
fn check_gradients(what: &str, forward: &Forward<'_>, base: &ParameterStore, k: usize, seed: u64) {
    let mut cast = CastParams::<f64>::from_store(base);
    let (_, grads) = forward(&cast, true);
    assert!(!grads.is_empty(), "{what}: no trainable parameters bound");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0usize;
    let mut worst: (f64, String) = (0.0, String::new());
    for (name, g) in &grads {
        let (rows, cols) = g.dim();
        for _ in 0..k.min(rows * cols) {
            let (i, j) = (rng.random_range(0..rows), rng.random_range(0..cols));
            let orig = cast.get(name).unwrap().clone();
            let h = 1e-5 * orig[(i, j)].abs().max(1.0);
            let mut plus = (*orig).clone();
            plus[(i, j)] += h;
            cast.set(name, plus);
            let (lp, _) = forward(&cast, false);
            let mut minus = (*orig).clone();
            minus[(i, j)] -= h;
            cast.set(name, minus);
            let (lm, _) = forward(&cast, false);
            cast.set(name, (*orig).clone());

            let numeric = (lp - lm) / (2.0 * h);
            let analytic = g[(i, j)];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                rel < 1e-4,
                "{what}: d/d{name}[{i},{j}] analytic {analytic:.9e} vs numeric {numeric:.9e} \
                 (rel {rel:.3e})"
            );
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i},{j}]"));
            }
            checked += 1;
        }
    }
    println!("  {what}: {checked} sampled entries ok, worst rel {:.3e} at {}", worst.0, worst.1);
}

fn masked_token_indices(slice_of_token: &[usize], mask: &[bool]) -> Vec<usize> {
    (0..slice_of_token.len()).filter(|&i| !mask[slice_of_token[i]]).collect()
}

/// Builds the full fused reconstruction for one modality on the tape.
#[allow(clippy::too_many_arguments)]
fn reconstruction(
    tape: &mut Tape<f64>,
    binder: &mut ParamBinder<'_, f64>,
    tp: &TokenizedPair<f64>,
    pair: &SliceMaskPair,
    a: Var,
    v: Var,
    modality: Modality,
    cfg: &ModelConfig,
    flags: &AblationFlags,
) -> Var {
    let fused = fused_embedding(tape, binder, tp, pair, a, v, modality, cfg, flags).unwrap();
    decode(tape, binder, fused, modality, cfg).unwrap()
}

fn encode_full(
    tape: &mut Tape<f64>,
    binder: &mut ParamBinder<'_, f64>,
    tp: &TokenizedPair<f64>,
    cfg: &ModelConfig,
) -> (Var, Var) {
    let g = derive_geometry(cfg).unwrap();
    let all_a: Vec<usize> = (0..g.audio_tokens_total).collect();
    let all_v: Vec<usize> = (0..g.visual_tokens_total).collect();
    let a_tok = tape.constant(tp.audio_tokens.clone());
    let v_tok = tape.constant(tp.visual_tokens.clone());
    let a = encode(tape, binder, a_tok, &all_a, Modality::Audio, cfg).unwrap();
    let v = encode(tape, binder, v_tok, &all_v, Modality::Visual, cfg).unwrap();
    (a, v)
}

#[test]
fn criterion_3_gradient_checks() {
    let w = tiny_world();
    let cfg = &w.cfg;
    let flags = AblationFlags::default();

    // Contrastive term over a 3-sample batch.
    let samples = tiny_samples(3, 31);
    let pairs: Vec<TokenizedPair<f64>> = samples.iter().map(|s| to_f64_pair(s, cfg)).collect();
    let contrastive: &Forward<'_> = &|cast, want| {
        let mut tape = Tape::<f64>::new();
        let mut binder = ParamBinder::with_trainable(cast, every_param);
        let mut a_bars = Vec::new();
        let mut v_bars = Vec::new();
        for tp in &pairs {
            let (a, v) = encode_full(&mut tape, &mut binder, tp, cfg);
            a_bars.push(tape.mean_rows(a));
            v_bars.push(tape.mean_rows(v));
        }
        let a_bar = tape.concat_rows(a_bars);
        let v_bar = tape.concat_rows(v_bars);
        let loss = contrastive_loss(&mut tape, a_bar, v_bar, cfg.temperature, None).unwrap();
        finish(tape, binder, loss, want)
    };
    check_gradients("contrastive", contrastive, &w.params, 2, 301);

    // Masked reconstruction, both modalities, through fusion and decoders.
    let mut mask_rng = ChaCha8Rng::seed_from_u64(32);
    let rec_pair = draw_complementary_masks(cfg, &mut mask_rng).unwrap();
    let tp0 = &pairs[0];
    let reconstruction_loss: &Forward<'_> = &|cast, want| {
        let mut tape = Tape::<f64>::new();
        let mut binder = ParamBinder::with_trainable(cast, every_param);
        let (a, v) = encode_full(&mut tape, &mut binder, tp0, cfg);
        let ra = reconstruction(
            &mut tape, &mut binder, tp0, &rec_pair, a, v, Modality::Audio, cfg, &flags,
        );
        let rv = reconstruction(
            &mut tape, &mut binder, tp0, &rec_pair, a, v, Modality::Visual, cfg, &flags,
        );
        let ma = masked_token_indices(&tp0.slice_of_audio_token, &rec_pair.mask_a);
        let mv = masked_token_indices(&tp0.slice_of_visual_token, &rec_pair.mask_v);
        let la = masked_reconstruction_term(&mut tape, ra, &tp0.audio_tokens, &ma).unwrap();
        let lv = masked_reconstruction_term(&mut tape, rv, &tp0.visual_tokens, &mv).unwrap();
        let sum = tape.add(la, lv);
        let loss = tape.scale(sum, 0.5);
        finish(tape, binder, loss, want)
    };
    check_gradients("reconstruction", reconstruction_loss, &w.params, 2, 302);

    // Random-masking variant exercises the learnable fallback mask rows.
    let mut indep_rng = ChaCha8Rng::seed_from_u64(33);
    let indep_pair = loop {
        let p = draw_independent_masks(cfg, &mut indep_rng).unwrap();
        if !p.is_complementary() {
            break p;
        }
    };
    let indep_flags = AblationFlags { random_masking: true, ..AblationFlags::default() };
    let fallback_loss: &Forward<'_> = &|cast, want| {
        let mut tape = Tape::<f64>::new();
        let mut binder = ParamBinder::with_trainable(cast, every_param);
        let (a, v) = encode_full(&mut tape, &mut binder, tp0, cfg);
        let ra = reconstruction(
            &mut tape, &mut binder, tp0, &indep_pair, a, v, Modality::Audio, cfg, &indep_flags,
        );
        let ma = masked_token_indices(&tp0.slice_of_audio_token, &indep_pair.mask_a);
        let loss = masked_reconstruction_term(&mut tape, ra, &tp0.audio_tokens, &ma).unwrap();
        finish(tape, binder, loss, want)
    };
    check_gradients("reconstruction-fallback-mask", fallback_loss, &w.params, 2, 303);

    // Generator adversarial term: critics bound as constants.
    let adv_g: &Forward<'_> = &|cast, want| {
        let mut tape = Tape::<f64>::new();
        let mut binder = ParamBinder::with_trainable(cast, generator_params);
        let (a, v) = encode_full(&mut tape, &mut binder, tp0, cfg);
        let ra = reconstruction(
            &mut tape, &mut binder, tp0, &rec_pair, a, v, Modality::Audio, cfg, &flags,
        );
        let rv = reconstruction(
            &mut tape, &mut binder, tp0, &rec_pair, a, v, Modality::Visual, cfg, &flags,
        );
        let da = discriminate(&mut tape, &mut binder, ra, Modality::Audio, cfg).unwrap();
        let dv = discriminate(&mut tape, &mut binder, rv, Modality::Visual, cfg).unwrap();
        let loss = adversarial_generator_term(&mut tape, da, dv);
        finish(tape, binder, loss, want)
    };
    check_gradients("adversarial-generator", adv_g, &w.params, 2, 304);

    // Critic adversarial term on detached reconstructions.
    let adv_d: &Forward<'_> = &|cast, want| {
        let mut tape = Tape::<f64>::new();
        let mut binder = ParamBinder::with_trainable(cast, critic_params);
        let fake_a = tape.constant(tp0.audio_tokens.mapv(|x| x * 0.9 + 0.05));
        let fake_v = tape.constant(tp0.visual_tokens.mapv(|x| x * 0.9 + 0.05));
        let real_a = tape.constant(tp0.audio_tokens.clone());
        let real_v = tape.constant(tp0.visual_tokens.clone());
        let dfa = discriminate(&mut tape, &mut binder, fake_a, Modality::Audio, cfg).unwrap();
        let dra = discriminate(&mut tape, &mut binder, real_a, Modality::Audio, cfg).unwrap();
        let dfv = discriminate(&mut tape, &mut binder, fake_v, Modality::Visual, cfg).unwrap();
        let drv = discriminate(&mut tape, &mut binder, real_v, Modality::Visual, cfg).unwrap();
        let loss = adversarial_critic_term(&mut tape, dfa, dra, dfv, drv);
        finish(tape, binder, loss, want)
    };
    check_gradients("adversarial-critic", adv_d, &w.params, 3, 305);

    // Stage-2 cross-entropy through the exact production logits graph.
    let labels = vec![0usize, 1, 1];
    let ce: &Forward<'_> = &|cast, want| {
        let mut tape = Tape::<f64>::new();
        let mut binder = ParamBinder::with_trainable(cast, every_param);
        let logit_vars: Vec<Var> = pairs
            .iter()
            .map(|tp| stage2_logits(&mut tape, &mut binder, tp, cfg, &flags).unwrap())
            .collect();
        let logits = tape.concat_rows(logit_vars);
        let loss = cross_entropy(&mut tape, logits, &labels);
        finish(tape, binder, loss, want)
    };
    check_gradients("stage2-cross-entropy", ce, &w.params, 2, 306);

    // Fusion replacement passes no gradient to the replaced own rows.
    fusion_gradient_is_zero_on_masked_rows();

    pass(3, "gradient checks");
}

/// Evaluates the loss and optionally collects analytic gradients.
fn finish(
    tape: Tape<f64>,
    binder: ParamBinder<'_, f64>,
    loss: Var,
    want_grads: bool,
) -> (f64, Vec<(String, Array2<f64>)>) {
    let tape = tape;
    let value = tape.scalar(loss);
    if !want_grads {
        return (value, Vec::new());
    }
    let grads = tape.backward(loss);
    let collected = binder
        .bound()
        .iter()
        .filter_map(|(name, var)| grads.get(*var).map(|g| (name.clone(), g.clone())))
        .collect();
    (value, collected)
}

/// The fused embedding must carry zero gradient back to an embedding's own
/// masked rows: those rows are replaced, not mixed.
fn fusion_gradient_is_zero_on_masked_rows() {
    let w = tiny_world();
    let cfg = &w.cfg;
    let g = derive_geometry(cfg).unwrap();
    let samples = tiny_samples(1, 35);
    let tp = to_f64_pair(&samples[0], cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let pair = draw_complementary_masks(cfg, &mut rng).unwrap();

    let cast = CastParams::<f64>::from_store(&w.params);
    let mut tape = Tape::<f64>::new();
    let mut binder = ParamBinder::with_trainable(&cast, every_param);
    let mut leaf_rng = ChaCha8Rng::seed_from_u64(37);
    let a_leaf = Arc::new(Array2::from_shape_fn(
        (g.audio_tokens_total, cfg.encoder_dim),
        |_| leaf_rng.random::<f64>() - 0.5,
    ));
    let v_leaf = Arc::new(Array2::from_shape_fn(
        (g.visual_tokens_total, cfg.encoder_dim),
        |_| leaf_rng.random::<f64>() - 0.5,
    ));
    let a = tape.param(a_leaf);
    let v = tape.param(v_leaf);
    let fused = fused_embedding(
        &mut tape,
        &mut binder,
        &tp,
        &pair,
        a,
        v,
        Modality::Audio,
        cfg,
        &AblationFlags::default(),
    )
    .unwrap();
    let loss = tape.mean_all(fused);
    let grads = tape.backward(loss);
    let ga = grads.get(a).expect("audio leaf gradient");
    let gv = grads.get(v).expect("visual leaf gradient");
    for (i, row) in ga.rows().into_iter().enumerate() {
        let masked = !pair.mask_a[tp.slice_of_audio_token[i]];
        let norm: f64 = row.iter().map(|x| x.abs()).sum();
        if masked {
            assert_eq!(norm, 0.0, "masked audio row {i} received gradient");
        } else {
            assert!(norm > 0.0, "visible audio row {i} received no gradient");
        }
    }
    assert!(gv.iter().any(|&x| x != 0.0), "cross-modal source received no gradient");
    println!("  fusion-replacement: own masked rows carry exactly zero gradient");
}

// Placeholder module so the file stays organized as criteria are added.
#[allow(dead_code)]
fn unused(_: &HashMap<String, usize>) {}
