//! Complementary slice masking and cross-modal fusion plans.
//!
//! Masks act on temporal slices, not individual tokens: hiding slice i
//! of one modality removes all of that slice's tokens at once. The
//! complementary draw hides a random slice subset on the audio side and
//! exactly the remaining slices on the visual side, so every slice is
//! hidden in exactly one modality and each modality's hidden slices can
//! be rebuilt from the other's visible ones.
//!
//! Fusion is index plumbing shared by the plain-matrix helpers here and
//! the autodiff graph (via [`RowSrc`] plans): visible slices keep their
//! own tokens, masked slices take the cross-modal token at the same
//! (slice, within-slice) position.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::ModelConfig;
use crate::tensor::{RowSrc, Scalar};
use crate::{Error, Result};

/// Paired per-slice visibility masks. `true` = visible, `false` =
/// masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceMaskPair {
    pub mask_a: Vec<bool>,
    pub mask_v: Vec<bool>,
    /// Slices hidden on the audio side.
    pub masked_slice_count: usize,
}

impl SliceMaskPair {
    /// True when every slice is hidden in exactly one modality.
    pub fn is_complementary(&self) -> bool {
        self.mask_a.iter().zip(&self.mask_v).all(|(&a, &v)| a ^ v)
    }

    /// True for the published setup: both sides hide the same number
    /// of slices (mask_ratio = 0.5).
    pub fn is_balanced(&self) -> bool {
        let hidden_a = self.mask_a.iter().filter(|&&m| !m).count();
        let hidden_v = self.mask_v.iter().filter(|&&m| !m).count();
        hidden_a == hidden_v
    }

    pub fn masked_slices_audio(&self) -> Vec<usize> {
        (0..self.mask_a.len()).filter(|&i| !self.mask_a[i]).collect()
    }

    pub fn masked_slices_visual(&self) -> Vec<usize> {
        (0..self.mask_v.len()).filter(|&i| !self.mask_v[i]).collect()
    }

    pub fn visible_slices_audio(&self) -> Vec<usize> {
        (0..self.mask_a.len()).filter(|&i| self.mask_a[i]).collect()
    }

    pub fn visible_slices_visual(&self) -> Vec<usize> {
        (0..self.mask_v.len()).filter(|&i| self.mask_v[i]).collect()
    }
}

fn random_subset<R: Rng>(k: usize, m: usize, rng: &mut R) -> Vec<bool> {
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    let mut visible = vec![true; k];
    for &s in &order[..m] {
        visible[s] = false;
    }
    visible
}

/// Draws a uniformly random slice subset S with |S| = mask_ratio x K;
/// audio hides S, visual hides the complement.
pub fn draw_complementary_masks<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<SliceMaskPair> {
    cfg.validate()?;
    let k = cfg.num_slices;
    let m = cfg.masked_slices();
    let mask_a = random_subset(k, m, rng);
    let mask_v: Vec<bool> = mask_a.iter().map(|&a| !a).collect();
    Ok(SliceMaskPair { mask_a, mask_v, masked_slice_count: m })
}

/// Ablation draw: both modalities hide mask_ratio x K slices chosen
/// independently, so masked slices may collide across modalities.
pub fn draw_independent_masks<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<SliceMaskPair> {
    cfg.validate()?;
    let k = cfg.num_slices;
    let m = cfg.masked_slices();
    let mask_a = random_subset(k, m, rng);
    let mask_v = random_subset(k, m, rng);
    Ok(SliceMaskPair { mask_a, mask_v, masked_slice_count: m })
}

/// Token indices whose slice is visible, in original order.
pub fn visible_token_indices(slice_of_token: &[usize], mask: &[bool]) -> Vec<usize> {
    (0..slice_of_token.len()).filter(|&i| mask[slice_of_token[i]]).collect()
}

/// Token indices whose slice is masked, in original order.
pub fn masked_token_indices(slice_of_token: &[usize], mask: &[bool]) -> Vec<usize> {
    (0..slice_of_token.len()).filter(|&i| !mask[slice_of_token[i]]).collect()
}

/// Splits embeddings into (visible rows, masked token indices).
pub fn apply_mask<F: Scalar>(
    embeddings: &Array2<F>,
    slice_of_token: &[usize],
    mask: &[bool],
) -> (Array2<F>, Vec<usize>) {
    assert_eq!(embeddings.nrows(), slice_of_token.len());
    let visible = visible_token_indices(slice_of_token, mask);
    let masked = masked_token_indices(slice_of_token, mask);
    let mut out = Array2::zeros((visible.len(), embeddings.ncols()));
    for (mut row, &i) in out.rows_mut().into_iter().zip(&visible) {
        row.assign(&embeddings.row(i));
    }
    (out, masked)
}

/// Builds the row-source plan for fusing one modality.
///
/// `cross_slice_of_token` describes the cross-modal sequence: its rows
/// must be grouped by slice, each group exactly `tokens_per_slice` long
/// (the FUSING modality's per-slice count). Every masked own-slice must
/// appear in the cross sequence; extra cross slices are ignored.
pub fn fuse_plan(
    own_mask: &[bool],
    slice_of_token: &[usize],
    cross_slice_of_token: &[usize],
    tokens_per_slice: usize,
) -> Result<Vec<RowSrc>> {
    let k = own_mask.len();
    // Start row of each slice's group in the cross sequence.
    let mut cross_start: Vec<Option<usize>> = vec![None; k];
    let mut i = 0;
    while i < cross_slice_of_token.len() {
        let s = cross_slice_of_token[i];
        if s >= k {
            return Err(Error::Invalid(format!("cross token slice {s} out of range (K={k})")));
        }
        if cross_start[s].is_some() {
            return Err(Error::Invalid(format!("cross tokens for slice {s} are not contiguous")));
        }
        let run = cross_slice_of_token[i..].iter().take_while(|&&x| x == s).count();
        if run != tokens_per_slice {
            return Err(Error::Invalid(format!(
                "cross slice {s} has {run} tokens, expected {tokens_per_slice}"
            )));
        }
        cross_start[s] = Some(i);
        i += run;
    }

    let mut within = vec![0usize; k];
    let mut plan = Vec::with_capacity(slice_of_token.len());
    for (tok, &s) in slice_of_token.iter().enumerate() {
        if own_mask[s] {
            plan.push(RowSrc::Own(tok));
        } else {
            let start = cross_start[s].ok_or_else(|| {
                Error::Invalid(format!("masked slice {s} has no cross-modal tokens"))
            })?;
            plan.push(RowSrc::Cross(start + within[s]));
        }
        within[s] += 1;
    }
    Ok(plan)
}

/// Plain-matrix fusion: visible slices keep own tokens, masked slices
/// substitute the cross token at the same (slice, position).
pub fn fuse<F: Scalar>(
    own: &Array2<F>,
    own_mask: &[bool],
    slice_of_token: &[usize],
    cross: &Array2<F>,
    cross_slice_of_token: &[usize],
    tokens_per_slice: usize,
) -> Result<Array2<F>> {
    assert_eq!(own.nrows(), slice_of_token.len());
    assert_eq!(cross.nrows(), cross_slice_of_token.len());
    let plan = fuse_plan(own_mask, slice_of_token, cross_slice_of_token, tokens_per_slice)?;
    let mut out = Array2::zeros(own.raw_dim());
    for (i, src) in plan.iter().enumerate() {
        match *src {
            RowSrc::Own(r) => out.row_mut(i).assign(&own.row(r)),
            RowSrc::Cross(r) => out.row_mut(i).assign(&cross.row(r)),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{derive_geometry, ModelConfig};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn complementary_draw_is_exact_xor() {
        let cfg = ModelConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let pair = draw_complementary_masks(&cfg, &mut rng).unwrap();
            assert!(pair.is_complementary());
            assert!(pair.is_balanced());
            assert_eq!(pair.masked_slices_audio().len(), 4);
            assert_eq!(pair.masked_slices_visual().len(), 4);
        }
    }

    #[test]
    fn masked_frequency_near_half() {
        let cfg = ModelConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 10_000;
        let mut hidden = vec![0u32; cfg.num_slices];
        for _ in 0..draws {
            let pair = draw_complementary_masks(&cfg, &mut rng).unwrap();
            for (i, &vis) in pair.mask_a.iter().enumerate() {
                if !vis {
                    hidden[i] += 1;
                }
            }
        }
        for &h in &hidden {
            let f = h as f64 / draws as f64;
            assert!((f - 0.5).abs() < 0.02, "slice masked frequency {f}");
        }
    }

    #[test]
    fn same_seed_same_masks() {
        let cfg = ModelConfig::desk();
        let a = draw_complementary_masks(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = draw_complementary_masks(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unbalanced_ratio_still_xor() {
        let mut cfg = ModelConfig::desk();
        cfg.mask_ratio = 0.75;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pair = draw_complementary_masks(&cfg, &mut rng).unwrap();
        assert!(pair.is_complementary());
        assert!(!pair.is_balanced());
        assert_eq!(pair.masked_slices_audio().len(), 6);
        assert_eq!(pair.masked_slices_visual().len(), 2);
    }

    #[test]
    fn independent_draw_hides_quota_per_side() {
        let cfg = ModelConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen_noncomplementary = false;
        for _ in 0..50 {
            let pair = draw_independent_masks(&cfg, &mut rng).unwrap();
            assert_eq!(pair.masked_slices_audio().len(), 4);
            assert_eq!(pair.masked_slices_visual().len(), 4);
            seen_noncomplementary |= !pair.is_complementary();
        }
        assert!(seen_noncomplementary, "independent draws should collide sometimes");
    }

    #[test]
    fn apply_mask_all_visible_is_identity() {
        let emb = Array2::from_shape_fn((8, 3), |(i, j)| (i * 3 + j) as f32);
        let slice_of_token = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let (vis, masked) = apply_mask(&emb, &slice_of_token, &[true; 4]);
        assert_eq!(vis, emb);
        assert!(masked.is_empty());
    }

    #[test]
    fn apply_mask_counts_for_desk_audio() {
        let cfg = ModelConfig::desk();
        let geo = derive_geometry(&cfg).unwrap();
        let emb = Array2::<f32>::ones((geo.audio_tokens_total, 5));
        let slice_of_token: Vec<usize> =
            (0..geo.audio_tokens_total).map(|i| i / geo.audio_tokens_per_slice).collect();
        let mask = [false, true, false, true, false, true, false, true];
        let (vis, masked) = apply_mask(&emb, &slice_of_token, &mask);
        assert_eq!(vis.nrows(), 32);
        assert_eq!(masked.len(), 32);
    }

    #[test]
    fn visible_and_masked_partition_tokens() {
        let slice_of_token: Vec<usize> = (0..24).map(|i| i / 3).collect();
        let mask = [true, false, true, false, true, false, true, false];
        let vis = visible_token_indices(&slice_of_token, &mask);
        let msk = masked_token_indices(&slice_of_token, &mask);
        let mut union: Vec<usize> = vis.iter().chain(&msk).copied().collect();
        union.sort_unstable();
        assert_eq!(union, (0..24).collect::<Vec<_>>());
        assert!(vis.iter().all(|i| !msk.contains(i)));
    }

    #[test]
    fn fuse_identity_when_nothing_masked() {
        let own = Array2::from_shape_fn((8, 4), |(i, j)| (i + j) as f64);
        let slice_of_token = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let cross = Array2::zeros((0, 4));
        let fused = fuse(&own, &[true; 4], &slice_of_token, &cross, &[], 2).unwrap();
        assert_eq!(fused, own);
    }

    #[test]
    fn fuse_substitutes_masked_slices_exactly() {
        let own = Array2::from_elem((8, 4), 1.0f32);
        let slice_of_token = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let mask = [true, false, true, false];
        // Cross tokens for slices 1 and 3, distinct values per row.
        let cross = Array2::from_shape_fn((4, 4), |(i, _)| 10.0 + i as f32);
        let cross_slices = vec![1, 1, 3, 3];
        let fused = fuse(&own, &mask, &slice_of_token, &cross, &cross_slices, 2).unwrap();
        for i in [0usize, 1, 4, 5] {
            assert_eq!(fused.row(i), own.row(i));
        }
        assert_eq!(fused.row(2), cross.row(0));
        assert_eq!(fused.row(3), cross.row(1));
        assert_eq!(fused.row(6), cross.row(2));
        assert_eq!(fused.row(7), cross.row(3));
    }

    #[test]
    fn fuse_detects_coverage_gap() {
        let own = Array2::<f32>::ones((8, 4));
        let slice_of_token = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let mask = [true, false, true, false];
        let cross = Array2::<f32>::zeros((2, 4));
        let err = fuse(&own, &mask, &slice_of_token, &cross, &[1, 1], 2)
            .unwrap_err()
            .to_string();
        assert!(err.contains("slice 3"), "{err}");
    }

    #[test]
    fn fuse_rejects_wrong_group_size() {
        let own = Array2::<f32>::ones((8, 4));
        let slice_of_token = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let mask = [true, false, true, true];
        let cross = Array2::<f32>::zeros((3, 4));
        let err = fuse(&own, &mask, &slice_of_token, &cross, &[1, 1, 1], 2)
            .unwrap_err()
            .to_string();
        assert!(err.contains("expected 2"), "{err}");
    }

    #[test]
    fn pipeline_masks_cover_exactly() {
        // Complementarity means: audio's masked slices = visual's
        // visible slices, which is precisely what V2A converts.
        let cfg = ModelConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let pair = draw_complementary_masks(&cfg, &mut rng).unwrap();
            assert_eq!(pair.masked_slices_audio(), pair.visible_slices_visual());
            assert_eq!(pair.masked_slices_visual(), pair.visible_slices_audio());
        }
    }
}
