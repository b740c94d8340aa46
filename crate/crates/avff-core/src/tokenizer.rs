//! Patch tokenization for both modalities.
//!
//! Tokens are laid out temporal-major: all tokens of temporal slice 0,
//! then slice 1, and so on. Slice masking and fusion then operate on
//! contiguous row ranges. Patchify and unpatchify are exact inverses;
//! both directions are pure reshapes with no arithmetic on the values.

use ndarray::{Array2, Array4};

use crate::config::{derive_geometry, ModelConfig};
use crate::tensor::Scalar;
use crate::{Error, Result};

/// Token grids for one clip, with per-token slice assignment.
#[derive(Debug, Clone)]
pub struct TokenizedPair<F: Scalar> {
    /// N_a x patch_dim_audio.
    pub audio_tokens: Array2<F>,
    /// N_v x patch_dim_visual.
    pub visual_tokens: Array2<F>,
    /// Slice index in [0, K) per audio token; non-decreasing.
    pub slice_of_audio_token: Vec<usize>,
    /// Slice index in [0, K) per visual token; non-decreasing.
    pub slice_of_visual_token: Vec<usize>,
}

impl<F: Scalar> TokenizedPair<F> {
    pub fn new(
        audio: &Array2<F>,
        visual: &Array4<F>,
        cfg: &ModelConfig,
    ) -> Result<TokenizedPair<F>> {
        let (audio_tokens, slice_of_audio_token) = patchify_audio(audio, cfg)?;
        let (visual_tokens, slice_of_visual_token) = patchify_visual(visual, cfg)?;
        Ok(TokenizedPair { audio_tokens, visual_tokens, slice_of_audio_token, slice_of_visual_token })
    }
}

/// Splits a T_a x L spectrogram into flattened non-overlapping patches.
///
/// Token order is (time-block, freq-block) row-major; within a patch,
/// (time, freq) row-major. Slice index = time-block / (time-blocks/K).
pub fn patchify_audio<F: Scalar>(
    spec: &Array2<F>,
    cfg: &ModelConfig,
) -> Result<(Array2<F>, Vec<usize>)> {
    let geo = derive_geometry(cfg)?;
    let (at, af) = cfg.audio_patch;
    let want = (cfg.audio_frames, cfg.mel_bins);
    if spec.dim() != want {
        return Err(Error::Shape(format!(
            "audio spectrogram: expected {want:?}, got {:?}",
            spec.dim()
        )));
    }
    let blocks_per_slice = geo.audio_patches_time / cfg.num_slices;
    let mut tokens = Array2::zeros((geo.audio_tokens_total, geo.patch_dim_audio));
    let mut slices = Vec::with_capacity(geo.audio_tokens_total);
    let mut row = 0;
    for tb in 0..geo.audio_patches_time {
        for fb in 0..geo.audio_patches_freq {
            let mut k = 0;
            for dt in 0..at {
                for df in 0..af {
                    tokens[[row, k]] = spec[[tb * at + dt, fb * af + df]];
                    k += 1;
                }
            }
            slices.push(tb / blocks_per_slice);
            row += 1;
        }
    }
    Ok((tokens, slices))
}

/// Exact inverse of `patchify_audio`.
pub fn unpatchify_audio<F: Scalar>(tokens: &Array2<F>, cfg: &ModelConfig) -> Result<Array2<F>> {
    let geo = derive_geometry(cfg)?;
    let (at, af) = cfg.audio_patch;
    let want = (geo.audio_tokens_total, geo.patch_dim_audio);
    if tokens.dim() != want {
        return Err(Error::Shape(format!(
            "audio tokens: expected {want:?}, got {:?}",
            tokens.dim()
        )));
    }
    let mut spec = Array2::zeros((cfg.audio_frames, cfg.mel_bins));
    let mut row = 0;
    for tb in 0..geo.audio_patches_time {
        for fb in 0..geo.audio_patches_freq {
            let mut k = 0;
            for dt in 0..at {
                for df in 0..af {
                    spec[[tb * at + dt, fb * af + df]] = tokens[[row, k]];
                    k += 1;
                }
            }
            row += 1;
        }
    }
    Ok(spec)
}

/// Splits a T_v x C x H x W frame stack into flattened 3-D patches.
///
/// Token order is (time-block, row-block, col-block) row-major; within
/// a patch, (frame, channel, row, col) row-major.
pub fn patchify_visual<F: Scalar>(
    frames: &Array4<F>,
    cfg: &ModelConfig,
) -> Result<(Array2<F>, Vec<usize>)> {
    let geo = derive_geometry(cfg)?;
    let (pd, ph, pw) = cfg.visual_patch;
    let want = (cfg.visual_frames, cfg.channels, cfg.visual_size, cfg.visual_size);
    if frames.dim() != want {
        return Err(Error::Shape(format!(
            "visual frames: expected {want:?}, got {:?}",
            frames.dim()
        )));
    }
    let hb = cfg.visual_size / ph;
    let wb = cfg.visual_size / pw;
    let blocks_per_slice = geo.visual_patches_time / cfg.num_slices;
    let mut tokens = Array2::zeros((geo.visual_tokens_total, geo.patch_dim_visual));
    let mut slices = Vec::with_capacity(geo.visual_tokens_total);
    let mut row = 0;
    for tb in 0..geo.visual_patches_time {
        for rb in 0..hb {
            for cb in 0..wb {
                let mut k = 0;
                for dt in 0..pd {
                    for c in 0..cfg.channels {
                        for dh in 0..ph {
                            for dw in 0..pw {
                                tokens[[row, k]] =
                                    frames[[tb * pd + dt, c, rb * ph + dh, cb * pw + dw]];
                                k += 1;
                            }
                        }
                    }
                }
                slices.push(tb / blocks_per_slice);
                row += 1;
            }
        }
    }
    Ok((tokens, slices))
}

/// Exact inverse of `patchify_visual`.
pub fn unpatchify_visual<F: Scalar>(tokens: &Array2<F>, cfg: &ModelConfig) -> Result<Array4<F>> {
    let geo = derive_geometry(cfg)?;
    let (pd, ph, pw) = cfg.visual_patch;
    let want = (geo.visual_tokens_total, geo.patch_dim_visual);
    if tokens.dim() != want {
        return Err(Error::Shape(format!(
            "visual tokens: expected {want:?}, got {:?}",
            tokens.dim()
        )));
    }
    let hb = cfg.visual_size / ph;
    let wb = cfg.visual_size / pw;
    let mut frames =
        Array4::zeros((cfg.visual_frames, cfg.channels, cfg.visual_size, cfg.visual_size));
    let mut row = 0;
    for tb in 0..geo.visual_patches_time {
        for rb in 0..hb {
            for cb in 0..wb {
                let mut k = 0;
                for dt in 0..pd {
                    for c in 0..cfg.channels {
                        for dh in 0..ph {
                            for dw in 0..pw {
                                frames[[tb * pd + dt, c, rb * ph + dh, cb * pw + dw]] =
                                    tokens[[row, k]];
                                k += 1;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Ok(frames)
}
