//! Log-mel spectrogram extraction: Hamming-windowed STFT magnitudes pushed
//! through a triangular mel filterbank, with a log floor.

use ndarray::Array2;
use rustfft::num_complex::Complex32;
use rustfft::FftPlanner;

use crate::config::ModelConfig;
use crate::{Error, Result};

/// Log floor applied to mel energies; silence maps to `ln(MEL_FLOOR)`.
pub const MEL_FLOOR: f32 = 1e-6;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filterbank over FFT bins, one sparse `(bin, weight)` list per
/// mel channel. Centers are equally spaced on the mel scale from 0 Hz to
/// the Nyquist frequency.
fn mel_filterbank(n_mels: usize, nfft: usize, sample_rate: f64) -> Vec<Vec<(usize, f32)>> {
    let n_bins = nfft / 2 + 1;
    let mel_hi = hz_to_mel(sample_rate / 2.0);
    let centers: Vec<f64> =
        (0..n_mels + 2).map(|i| mel_to_hz(mel_hi * i as f64 / (n_mels + 1) as f64)).collect();
    let mut bank = Vec::with_capacity(n_mels);
    for m in 1..=n_mels {
        let (lo, mid, hi) = (centers[m - 1], centers[m], centers[m + 1]);
        let mut taps = Vec::new();
        for k in 0..n_bins {
            let f = k as f64 * sample_rate / nfft as f64;
            let w = if f <= mid { (f - lo) / (mid - lo) } else { (hi - f) / (hi - mid) };
            if w > 0.0 {
                taps.push((k, w as f32));
            }
        }
        bank.push(taps);
    }
    bank
}

/// Computes a log-mel spectrogram of shape `frames x mel_bins` from a raw
/// waveform at `cfg.audio_sample_rate`. Frame count is
/// `floor((len - win) / hop) + 1`; a waveform shorter than one window is an
/// error.
pub fn log_mel(waveform: &[f32], cfg: &ModelConfig) -> Result<Array2<f32>> {
    let sr = cfg.audio_sample_rate as f64;
    let win = (sr * cfg.mel_window_ms / 1000.0).round() as usize;
    let hop = (sr * cfg.mel_hop_ms / 1000.0).round() as usize;
    if win == 0 || hop == 0 {
        return Err(Error::Invalid(format!(
            "mel window/hop of {}/{} ms collapse to zero samples",
            cfg.mel_window_ms, cfg.mel_hop_ms
        )));
    }
    if waveform.len() < win {
        return Err(Error::Invalid(format!(
            "waveform has {} samples, shorter than one {win}-sample window",
            waveform.len()
        )));
    }
    let frames = (waveform.len() - win) / hop + 1;
    let window: Vec<f32> = (0..win)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (win - 1) as f64).cos())
        .map(|w| w as f32)
        .collect();
    let bank = mel_filterbank(cfg.mel_bins, win, sr);

    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(win);
    let n_bins = win / 2 + 1;
    let mut out = Array2::<f32>::zeros((frames, cfg.mel_bins));
    let mut buf = vec![Complex32::default(); win];
    let mut scratch = vec![Complex32::default(); fft.get_inplace_scratch_len()];
    for t in 0..frames {
        let start = t * hop;
        for n in 0..win {
            buf[n] = Complex32::new(waveform[start + n] * window[n], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        let mags: Vec<f32> = buf[..n_bins].iter().map(|c| c.norm()).collect();
        for (m, taps) in bank.iter().enumerate() {
            let e: f32 = taps.iter().map(|&(k, w)| w * mags[k]).sum();
            out[[t, m]] = e.max(MEL_FLOOR).ln();
        }
    }
    Ok(out)
}

/// Fits a mel spectrogram to exactly `target_rows` time frames: longer input
/// is center-cropped, shorter input is right-padded with the log floor.
pub fn fit_frames(mel: &Array2<f32>, target_rows: usize) -> Array2<f32> {
    let rows = mel.nrows();
    if rows == target_rows {
        return mel.clone();
    }
    if rows > target_rows {
        let start = (rows - target_rows) / 2;
        return mel.slice(ndarray::s![start..start + target_rows, ..]).to_owned();
    }
    let mut out = Array2::from_elem((target_rows, mel.ncols()), MEL_FLOOR.ln());
    out.slice_mut(ndarray::s![..rows, ..]).assign(mel);
    out
}
