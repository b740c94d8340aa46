//! Training objectives, built as autodiff graph nodes.
//!
//! Stage 1 optimizes a weighted sum of three terms: a bidirectional
//! contrastive loss aligning per-clip mean embeddings across modalities,
//! a masked-token reconstruction loss, and a Wasserstein adversarial
//! loss on reconstructed masked tokens. Stage 2 is plain cross-entropy.
//!
//! Builders that need per-sample graphs (reconstruction, adversarial)
//! produce one scalar node per sample; the training step averages them
//! through backward seeds. The contrastive loss operates on the whole
//! batch at once.

use ndarray::Array2;

use crate::config::LossWeights;
use crate::tensor::{Scalar, Tape, Var};
use crate::{Error, Result};

/// Per-step loss values for metrics and checkpoint selection.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub l_c: f64,
    pub l_rec: f64,
    pub l_adv_g: f64,
    pub l_adv_d: f64,
    pub l_total_g: f64,
    pub l_ce: f64,
    pub l_rec_audio: f64,
    pub l_rec_visual: f64,
    pub l_adv_g_audio: f64,
    pub l_adv_g_visual: f64,
    pub l_adv_d_audio: f64,
    pub l_adv_d_visual: f64,
}

/// Weighted sum of the stage-1 generator terms.
pub fn combined_generator_loss(l_c: f64, l_rec: f64, l_adv_g: f64, w: &LossWeights) -> f64 {
    w.contrastive * l_c + w.reconstruction * l_rec + w.adversarial * l_adv_g
}

/// Bidirectional contrastive loss over a batch of mean embeddings.
///
/// Rows of `a_bar` and `v_bar` are per-sample token means (not yet
/// normalized); sample i of one modality is the positive for sample i
/// of the other, all other rows are negatives. Similarities are cosine
/// (rows L2-normalized) scaled by 1/tau. Both softmax directions are
/// averaged with weight 1/(2N).
///
/// `neg_mask`, when given, is an NxN additive matrix applied to both
/// similarity matrices before the softmax; entries to exclude carry a
/// large negative value, kept entries 0. The diagonal must be 0.
pub fn contrastive_loss<F: Scalar>(
    tape: &mut Tape<F>,
    a_bar: Var,
    v_bar: Var,
    tau: F,
    neg_mask: Option<&Array2<F>>,
) -> Result<Var> {
    let n = tape.value(a_bar).nrows();
    assert_eq!(tape.value(v_bar).nrows(), n, "batch size mismatch");
    for (name, var) in [("audio", a_bar), ("visual", v_bar)] {
        for (i, row) in tape.value(var).rows().into_iter().enumerate() {
            let norm = row.iter().map(|&x| x.to_f64().powi(2)).sum::<f64>().sqrt();
            if norm < 1e-9 {
                return Err(Error::Invalid(format!(
                    "degenerate {name} mean embedding at sample {i} (norm {norm:.2e})"
                )));
            }
        }
    }
    if let Some(m) = neg_mask {
        assert_eq!(m.dim(), (n, n), "neg_mask shape");
    }

    let an = tape.normalize_rows(a_bar);
    let vn = tape.normalize_rows(v_bar);
    let inv_tau = tau.recip();
    let diag_idx: Vec<usize> = (0..n).collect();

    let direction = |tape: &mut Tape<F>, x: Var, y: Var| -> Var {
        let sim = tape.matmul_nt(x, y);
        let mut scaled = tape.scale(sim, inv_tau);
        if let Some(m) = neg_mask {
            let mvar = tape.constant(m.clone());
            scaled = tape.add(scaled, mvar);
        }
        let logp = tape.log_softmax_rows(scaled);
        let diag = tape.select_per_row(logp, diag_idx.clone());
        tape.sum_all(diag)
    };

    let av = direction(tape, an, vn);
    let va = direction(tape, vn, an);
    let total = tape.add(av, va);
    Ok(tape.scale(total, F::from_f64(-0.5 / n as f64)))
}

/// Masked-token reconstruction error for one modality of one sample:
/// mean squared difference over masked-token entries only.
pub fn masked_reconstruction_term<F: Scalar>(
    tape: &mut Tape<F>,
    reconstructed: Var,
    target: &Array2<F>,
    masked_positions: &[usize],
) -> Result<Var> {
    if masked_positions.is_empty() {
        return Err(Error::Invalid("reconstruction loss over an empty masked set".into()));
    }
    assert_eq!(tape.value(reconstructed).dim(), target.dim(), "token grid shape");
    let rec = tape.gather_rows(reconstructed, masked_positions.to_vec());
    let mut tgt = Array2::zeros((masked_positions.len(), target.ncols()));
    for (mut row, &i) in tgt.rows_mut().into_iter().zip(masked_positions) {
        row.assign(&target.row(i));
    }
    let tgt = tape.constant(tgt);
    let diff = tape.sub(rec, tgt);
    let sq = tape.mul(diff, diff);
    Ok(tape.mean_all(sq))
}

/// Generator-side adversarial term for one sample: the negated critic
/// scores of the reconstructed masked tokens, averaged over the two
/// modalities.
pub fn adversarial_generator_term<F: Scalar>(
    tape: &mut Tape<F>,
    critic_fake_audio: Var,
    critic_fake_visual: Var,
) -> Var {
    let sum = tape.add(critic_fake_audio, critic_fake_visual);
    tape.scale(sum, F::from_f64(-0.5))
}

/// Critic-side adversarial term for one sample: fake minus real score,
/// averaged over the two modalities.
pub fn adversarial_critic_term<F: Scalar>(
    tape: &mut Tape<F>,
    critic_fake_audio: Var,
    critic_real_audio: Var,
    critic_fake_visual: Var,
    critic_real_visual: Var,
) -> Var {
    let da = tape.sub(critic_fake_audio, critic_real_audio);
    let dv = tape.sub(critic_fake_visual, critic_real_visual);
    let sum = tape.add(da, dv);
    tape.scale(sum, F::from_f64(0.5))
}

/// Mean cross-entropy of 2-class logits against integer labels.
pub fn cross_entropy<F: Scalar>(tape: &mut Tape<F>, logits: Var, labels: &[usize]) -> Var {
    let (n, c) = tape.value(logits).dim();
    assert_eq!(labels.len(), n, "one label per row");
    assert!(labels.iter().all(|&l| l < c), "label out of range");
    let logp = tape.log_softmax_rows(logits);
    let picked = tape.select_per_row(logp, labels.to_vec());
    let mean = tape.mean_all(picked);
    tape.scale(mean, F::from_f64(-1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn randn(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        use rand_distr::{Distribution, StandardNormal};
        Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng))
    }

    /// Direct evaluation of the contrastive definition, no graph.
    fn brute_contrastive(a: &Array2<f64>, v: &Array2<f64>, tau: f64) -> f64 {
        let n = a.nrows();
        let norm = |m: &Array2<f64>| {
            let mut out = m.clone();
            for mut r in out.rows_mut() {
                let s = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                r.mapv_inplace(|x| x / s);
            }
            out
        };
        let an = norm(a);
        let vn = norm(v);
        let mut total = 0.0;
        for (x, y) in [(&an, &vn), (&vn, &an)] {
            for i in 0..n {
                let sims: Vec<f64> =
                    (0..n).map(|j| x.row(i).dot(&y.row(j)) / tau).collect();
                let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = sims.iter().map(|s| (s - max).exp()).sum();
                total += sims[i] - max - z.ln();
            }
        }
        -total / (2.0 * n as f64)
    }

    fn eval_contrastive(a: &Array2<f64>, v: &Array2<f64>, tau: f64) -> f64 {
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let vv = tape.constant(v.clone());
        let l = contrastive_loss(&mut tape, av, vv, tau, None).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn contrastive_single_sample_is_zero() {
        let a = array![[0.3, -0.7, 0.1]];
        let v = array![[1.0, 2.0, 3.0]];
        assert!(eval_contrastive(&a, &v, 0.05).abs() < 1e-12);
    }

    #[test]
    fn contrastive_orthonormal_pair_closed_form() {
        let a = array![[1.0, 0.0], [0.0, 1.0]];
        let l = eval_contrastive(&a, &a, 1.0);
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - expected).abs() < 1e-12, "{l} vs {expected}");
    }

    #[test]
    fn contrastive_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..20 {
            let n = rng.random_range(2..7);
            let d = rng.random_range(2..9);
            let a = randn(&mut rng, n, d);
            let v = randn(&mut rng, n, d);
            let tau = 0.05 + rng.random::<f64>();
            let got = eval_contrastive(&a, &v, tau);
            let want = brute_contrastive(&a, &v, tau);
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn contrastive_invariant_to_row_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = randn(&mut rng, 4, 6);
        let v = randn(&mut rng, 4, 6);
        let before = eval_contrastive(&a, &v, 0.3);
        let mut a2 = a.clone();
        for (i, mut row) in a2.rows_mut().into_iter().enumerate() {
            let c = 0.5 + i as f64;
            row.mapv_inplace(|x| x * c);
        }
        let after = eval_contrastive(&a2, &v, 0.3);
        assert!((before - after).abs() < 1e-10);
    }

    #[test]
    fn contrastive_symmetric_in_modalities() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a = randn(&mut rng, 5, 4);
        let v = randn(&mut rng, 5, 4);
        let ab = eval_contrastive(&a, &v, 0.2);
        let ba = eval_contrastive(&v, &a, 0.2);
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn contrastive_rejects_zero_norm_row() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(array![[0.0, 0.0], [1.0, 0.0]]);
        let v = tape.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let err = contrastive_loss(&mut tape, a, v, 0.1, None).unwrap_err().to_string();
        assert!(err.contains("degenerate"), "{err}");
    }

    #[test]
    fn contrastive_neg_mask_removes_negatives() {
        // With all off-diagonal pairs excluded, each softmax sees only
        // its positive, so the loss collapses to zero.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = randn(&mut rng, 3, 5);
        let v = randn(&mut rng, 3, 5);
        let mut mask = Array2::from_elem((3, 3), -1e30);
        for i in 0..3 {
            mask[[i, i]] = 0.0;
        }
        let mut tape = Tape::new();
        let av = tape.constant(a);
        let vv = tape.constant(v);
        let l = contrastive_loss(&mut tape, av, vv, 0.2, Some(&mask)).unwrap();
        assert!(tape.scalar(l).abs() < 1e-9);
    }

    #[test]
    fn contrastive_aligned_improves_as_tau_shrinks() {
        // Perfect diagonal alignment with orthogonal negatives:
        // sharper softmax (smaller tau) can only lower the loss.
        let eye = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let mut last = f64::INFINITY;
        for tau in [1.0, 0.5, 0.25, 0.1, 0.05] {
            let l = eval_contrastive(&eye, &eye, tau);
            assert!(l < last, "tau {tau}: {l} !< {last}");
            last = l;
        }
    }

    #[test]
    fn reconstruction_perfect_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = randn(&mut rng, 8, 4);
        let mut tape = Tape::new();
        let xhat = tape.constant(x.clone());
        let l = masked_reconstruction_term(&mut tape, xhat, &x, &[1, 3, 5]).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn reconstruction_unit_offset_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let x = randn(&mut rng, 8, 4);
        let xhat = x.mapv(|v| v + 1.0);
        let mut tape = Tape::new();
        let xh = tape.constant(xhat);
        let l = masked_reconstruction_term(&mut tape, xh, &x, &[0, 2, 7]).unwrap();
        assert!((tape.scalar(l) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_ignores_visible_tokens_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let x = randn(&mut rng, 8, 4);
        let masked = [2usize, 4, 6];
        let mut xhat = x.clone();
        xhat.row_mut(2).mapv_inplace(|v| v * 3.0);
        let eval = |xh: &Array2<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(xh.clone());
            let l = masked_reconstruction_term(&mut tape, v, &x, &masked).unwrap();
            tape.scalar(l)
        };
        let base = eval(&xhat);
        // Corrupt every visible row; the loss must not move at all.
        let mut corrupted = xhat.clone();
        for i in [0usize, 1, 3, 5, 7] {
            corrupted.row_mut(i).mapv_inplace(|v| v * -10.0 + 5.0);
        }
        assert_eq!(base, eval(&corrupted));
    }

    #[test]
    fn reconstruction_rejects_empty_mask() {
        let mut tape: Tape<f64> = Tape::new();
        let x = Array2::zeros((4, 2));
        let xh = tape.constant(x.clone());
        assert!(masked_reconstruction_term(&mut tape, xh, &x, &[]).is_err());
    }

    #[test]
    fn critic_term_zero_when_fake_equals_real() {
        let mut tape: Tape<f64> = Tape::new();
        let s = tape.constant(array![[0.83]]);
        let s2 = tape.constant(array![[-0.4]]);
        let l = adversarial_critic_term(&mut tape, s, s, s2, s2);
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn generator_term_constant_critic() {
        let mut tape: Tape<f64> = Tape::new();
        let c = tape.constant(array![[0.7]]);
        let l = adversarial_generator_term(&mut tape, c, c);
        assert!((tape.scalar(l) + 0.7).abs() < 1e-15);
    }

    #[test]
    fn adversarial_terms_scale_linearly() {
        let eval = |scale: f64| {
            let mut tape: Tape<f64> = Tape::new();
            let fa = tape.constant(array![[0.3 * scale]]);
            let ra = tape.constant(array![[-0.2 * scale]]);
            let fv = tape.constant(array![[0.9 * scale]]);
            let rv = tape.constant(array![[0.1 * scale]]);
            let g = adversarial_generator_term(&mut tape, fa, fv);
            let d = adversarial_critic_term(&mut tape, fa, ra, fv, rv);
            (tape.scalar(g), tape.scalar(d))
        };
        let (g1, d1) = eval(1.0);
        let (g2, d2) = eval(2.0);
        assert!((g2 - 2.0 * g1).abs() < 1e-12);
        assert!((d2 - 2.0 * d1).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_paper_weights() {
        let w = LossWeights { contrastive: 0.01, reconstruction: 1.0, adversarial: 0.1 };
        assert!((combined_generator_loss(1.0, 1.0, 1.0, &w) - 1.11).abs() < 1e-12);
        assert_eq!(combined_generator_loss(0.0, 0.0, 0.0, &w), 0.0);
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.constant(Array2::zeros((6, 2)));
        let l = cross_entropy(&mut tape, logits, &[0, 1, 0, 1, 1, 0]);
        assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_confident_correct_is_tiny() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.constant(array![[30.0, -30.0], [-30.0, 30.0]]);
        let l = cross_entropy(&mut tape, logits, &[0, 1]);
        assert!(tape.scalar(l) < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let logits = randn(&mut rng, 5, 2);
        let labels = [0usize, 1, 1, 0, 1];
        let mut want = 0.0;
        for (row, &lab) in logits.rows().into_iter().zip(&labels) {
            let z: f64 = row.iter().map(|&x| x.exp()).sum();
            want -= (row[lab].exp() / z).ln();
        }
        want /= labels.len() as f64;
        let mut tape = Tape::new();
        let lv = tape.constant(logits.clone());
        let l = cross_entropy(&mut tape, lv, &labels);
        assert!((tape.scalar(l) - want).abs() < 1e-6, "{} vs {want}", tape.scalar(l));
    }

    #[test]
    fn losses_differentiate_cleanly() {
        // End-to-end gradient through contrastive + reconstruction on
        // one small tape, against central differences.
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let a0 = randn(&mut rng, 3, 4);
        let v0 = randn(&mut rng, 3, 4);
        let x = randn(&mut rng, 6, 2);
        let eval = |a: &Array2<f64>, v: &Array2<f64>| -> (f64, Option<(Array2<f64>, Array2<f64>)>) {
            let mut tape = Tape::new();
            let av = tape.param(Arc::new(a.clone()));
            let vv = tape.param(Arc::new(v.clone()));
            let lc = contrastive_loss(&mut tape, av, vv, 0.3, None).unwrap();
            let xh = tape.matmul_nt(av, vv); // 3x3, reuse as fake recon input
            let proj = tape_const(&mut tape, &randn_fixed());
            let xr = tape.matmul(xh, proj);
            let lr = masked_reconstruction_term(&mut tape, xr, &x.slice(ndarray::s![..3, ..]).to_owned(), &[0, 2]).unwrap();
            let total = tape.add(lc, lr);
            let scalar = tape.scalar(total);
            let grads = tape.backward(total);
            let ga = grads.get(av).cloned();
            let gv = grads.get(vv).cloned();
            (scalar, ga.zip(gv))
        };
        fn tape_const(t: &mut Tape<f64>, m: &Array2<f64>) -> Var {
            t.constant(m.clone())
        }
        fn randn_fixed() -> Array2<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(999);
            use rand_distr::{Distribution, StandardNormal};
            Array2::from_shape_fn((3, 2), |_| StandardNormal.sample(&mut rng))
        }
        let (_, grads) = eval(&a0, &v0);
        let (ga, gv) = grads.unwrap();
        let h = 1e-5;
        for i in 0..3 {
            for j in 0..4 {
                let mut ap = a0.clone();
                ap[[i, j]] += h;
                let mut am = a0.clone();
                am[[i, j]] -= h;
                let fd = (eval(&ap, &v0).0 - eval(&am, &v0).0) / (2.0 * h);
                assert!((ga[[i, j]] - fd).abs() < 1e-6 * fd.abs().max(1.0), "a[{i},{j}]");
                let mut vp = v0.clone();
                vp[[i, j]] += h;
                let mut vm = v0.clone();
                vm[[i, j]] -= h;
                let fd = (eval(&a0, &vp).0 - eval(&a0, &vm).0) / (2.0 * h);
                assert!((gv[[i, j]] - fd).abs() < 1e-6 * fd.abs().max(1.0), "v[{i},{j}]");
            }
        }
    }
}
