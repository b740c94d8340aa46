//! Synthetic paired-modality corpus. Each real source owns a latent driver
//! z(t), a sum of three random-phase sinusoids, that renders both
//! modalities: the audio is a mel band whose center frequency moves with
//! z(t), and the visual is a face-like scene whose mouth aperture opens with
//! z(t). Fake categories break the cross-modal agreement by re-rendering one
//! or both modalities from independent drivers, or by pairing tracks from
//! two different sources.

use std::f64::consts::TAU;
use std::path::Path;

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_distr::StandardNormal;

use super::mel::MEL_FLOOR;
use super::tensor_file::{write_array2, write_array4};
use super::{Category, CorpusStats, Manifest, ManifestRecord};
use crate::config::ModelConfig;
use crate::{Error, Result};

/// File name of the full manifest written by the generator.
pub const CORPUS_MANIFEST: &str = "corpus.tsv";
/// File name of the real-clips-only manifest (stage-1 training set).
pub const REAL_MANIFEST: &str = "corpus_real.tsv";

/// Generated media spans twice the model's clip length so stage-1 pairs can
/// be drawn at disjoint offsets.
const MEDIA_CLIPS: f64 = 2.0;

#[derive(Debug, Clone)]
struct Driver {
    comps: [(f64, f64, f64); 3],
    norm: f64,
}

impl Driver {
    fn new<R: Rng + ?Sized>(rng: &mut R) -> Driver {
        let mut comps = [(0.0, 0.0, 0.0); 3];
        let mut norm = 0.0;
        for c in comps.iter_mut() {
            let amp = 0.5 + 0.5 * rng.random::<f64>();
            let freq = 0.5 + 1.5 * rng.random::<f64>();
            let phase = TAU * rng.random::<f64>();
            *c = (amp, freq, phase);
            norm += amp;
        }
        Driver { comps, norm }
    }

    /// Driver value at time `t`, guaranteed to lie within [-1, 1].
    fn at(&self, t: f64) -> f64 {
        self.comps.iter().map(|&(a, f, p)| a * (TAU * f * t + p).sin()).sum::<f64>() / self.norm
    }
}

/// Per-source appearance and timbre parameters, plus the driver the source's
/// real clip was rendered from.
#[derive(Debug, Clone)]
struct Identity {
    bg_kx: f64,
    bg_ky: f64,
    bg_phase: f64,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    skin: [f64; 3],
    timbre_center: f64,
    real_driver: Driver,
}

impl Identity {
    fn new<R: Rng + ?Sized>(rng: &mut R, mel_bins: usize) -> Identity {
        let base = 0.55 + 0.2 * rng.random::<f64>();
        Identity {
            bg_kx: 0.8 + 1.7 * rng.random::<f64>(),
            bg_ky: 0.8 + 1.7 * rng.random::<f64>(),
            bg_phase: TAU * rng.random::<f64>(),
            cx: 0.45 + 0.1 * rng.random::<f64>(),
            cy: 0.4 + 0.1 * rng.random::<f64>(),
            rx: 0.3 + 0.04 * rng.random::<f64>(),
            ry: 0.4 + 0.04 * rng.random::<f64>(),
            skin: [(base + 0.1).min(1.0), base, (base - 0.08).max(0.0)],
            timbre_center: mel_bins as f64 * (0.1 + 0.8 * rng.random::<f64>()),
            real_driver: Driver::new(rng),
        }
    }
}

fn render_audio<R: Rng + ?Sized>(
    id: &Identity,
    driver: &Driver,
    cfg: &ModelConfig,
    rows: usize,
    rng: &mut R,
) -> Array2<f32> {
    let bins = cfg.mel_bins;
    let sigma = bins as f64 / 16.0;
    let sigma_t = bins as f64 / 24.0;
    let hop = cfg.audio_hop_s();
    let mut mel = Array2::<f32>::zeros((rows, bins));
    for r in 0..rows {
        let t = (r as f64 + 0.5) * hop;
        let center = bins as f64 * (0.5 + 0.35 * driver.at(t));
        for b in 0..bins {
            let fb = b as f64 + 0.5;
            let dyn_band = (-(fb - center).powi(2) / (2.0 * sigma * sigma)).exp();
            let timbre =
                (-(fb - id.timbre_center).powi(2) / (2.0 * sigma_t * sigma_t)).exp();
            let p = 0.05 + dyn_band + 0.3 * timbre + 0.03 * rng.random::<f64>();
            mel[[r, b]] = (p.max(MEL_FLOOR as f64)).ln() as f32;
        }
    }
    mel
}

fn render_visual<R: Rng + ?Sized>(
    id: &Identity,
    driver: &Driver,
    brightness: &Driver,
    cfg: &ModelConfig,
    n_frames: usize,
    rng: &mut R,
) -> Array4<f32> {
    let (h, w, ch) = (cfg.visual_size, cfg.visual_size, cfg.channels);
    let mut out = Array4::<f32>::zeros((n_frames, ch, h, w));
    let (ex1, ex2) = (id.cx - 0.4 * id.rx, id.cx + 0.4 * id.rx);
    let ey = id.cy - 0.35 * id.ry;
    let r_eye = 0.12 * id.rx;
    let (mx, my) = (id.cx, id.cy + 0.5 * id.ry);
    let ma = 0.55 * id.rx;
    for n in 0..n_frames {
        let t = (n as f64 + 0.5) / cfg.visual_fps;
        let mb = id.ry * (0.16 + 0.18 * (0.5 + 0.5 * driver.at(t)));
        let factor = 1.0 + 0.15 * brightness.at(t);
        for c in 0..ch {
            for y in 0..h {
                let yf = (y as f64 + 0.5) / h as f64;
                for x in 0..w {
                    let xf = (x as f64 + 0.5) / w as f64;
                    let mut val = 0.4
                        + 0.12
                            * (TAU * (id.bg_kx * xf + id.bg_ky * yf)
                                + id.bg_phase
                                + 0.8 * c as f64)
                                .sin();
                    let in_face = ((xf - id.cx) / id.rx).powi(2)
                        + ((yf - id.cy) / id.ry).powi(2)
                        <= 1.0;
                    if in_face {
                        val = id.skin[c % 3];
                        for ex in [ex1, ex2] {
                            if ((xf - ex) / r_eye).powi(2) + ((yf - ey) / r_eye).powi(2) <= 1.0 {
                                val = 0.15;
                            }
                        }
                        // A wide linear falloff keeps the darkness mass a
                        // smooth function of the aperture even when the
                        // mouth is only a couple of pixels tall.
                        let e = ((xf - mx) / ma).powi(2) + ((yf - my) / mb).powi(2);
                        let alpha = (1.2 - e).clamp(0.0, 1.0);
                        val = val + alpha * (0.08 - val);
                    }
                    let noise: f64 = rng.sample(StandardNormal);
                    out[[n, c, y, x]] = (val * factor + 0.02 * noise) as f32;
                }
            }
        }
    }
    out
}

/// Per-frame mouth-opening measurement on raw (unnormalized) stored frames:
/// the darkness mass below the frame median inside the lower-face region,
/// normalized by the median so global brightness changes cancel.
pub fn mouth_aperture_series(frames: &Array4<f32>) -> Vec<f64> {
    let (n, _, h, w) = frames.dim();
    let (y0, y1) = (h / 2, (h * 9) / 10);
    let (x0, x1) = (w / 5, (w * 4) / 5);
    let mut series = Vec::with_capacity(n);
    for f in 0..n {
        let mut all: Vec<f32> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| frames[[f, 0, y, x]])
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = all[all.len() / 2] as f64;
        let mut mass = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                let px = frames[[f, 0, y, x]] as f64;
                if px < median {
                    mass += median - px;
                }
            }
        }
        series.push(mass / median.max(1e-6));
    }
    series
}

/// Per-frame spectral centroid of raw (unnormalized) stored log-mel rows,
/// computed on linear power.
pub fn band_centroid_series(mel: &Array2<f32>) -> Vec<f64> {
    mel.rows()
        .into_iter()
        .map(|row| {
            let mut num = 0.0;
            let mut den = 0.0;
            for (b, &v) in row.iter().enumerate() {
                let p = (v as f64).exp();
                num += b as f64 * p;
                den += p;
            }
            num / den.max(1e-12)
        })
        .collect()
}

/// Pearson correlation coefficient; 0 when either series is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Cross-modal agreement of one clip's raw media: the correlation between
/// the mouth-aperture series and the audio band centroid averaged within
/// each visual frame's time span.
pub fn av_driver_correlation(mel: &Array2<f32>, frames: &Array4<f32>) -> f64 {
    let aperture = mouth_aperture_series(frames);
    let centroid = band_centroid_series(mel);
    let n = aperture.len();
    let rows = centroid.len();
    let mut binned = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for (r, &c) in centroid.iter().enumerate() {
        let f = ((r * n) / rows).min(n - 1);
        binned[f] += c;
        counts[f] += 1;
    }
    for (b, &c) in binned.iter_mut().zip(&counts) {
        *b /= (c as f64).max(1.0);
    }
    pearson(&aperture, &binned)
}

struct StatAccum {
    sum: f64,
    sumsq: f64,
    count: f64,
}

impl StatAccum {
    fn new() -> StatAccum {
        StatAccum { sum: 0.0, sumsq: 0.0, count: 0.0 }
    }

    fn push_all<'a>(&mut self, values: impl Iterator<Item = &'a f32>) {
        for &v in values {
            let v = v as f64;
            self.sum += v;
            self.sumsq += v * v;
            self.count += 1.0;
        }
    }

    fn finish(&self) -> (f64, f64) {
        let mean = self.sum / self.count;
        let var = (self.sumsq / self.count - mean * mean).max(0.0);
        (mean, var.sqrt())
    }
}

/// Generates a corpus under `out_dir`: `n_real` real clips (one source
/// each) plus `n_fake_per_category` clips of each SYNTH category, media
/// twice the configured clip length. Writes clip tensors under `clips/`,
/// a full manifest, and a real-only manifest; normalization statistics are
/// computed over the real clips. The same rng seed reproduces the corpus
/// bit for bit.
pub fn generate_synthetic_corpus<R: Rng + ?Sized>(
    n_real: usize,
    n_fake_per_category: usize,
    cfg: &ModelConfig,
    rng: &mut R,
    out_dir: &Path,
) -> Result<Manifest> {
    if n_real < 2 {
        return Err(Error::Invalid(format!(
            "synthetic corpus needs at least 2 real sources, got {n_real}"
        )));
    }
    let clips_dir = out_dir.join("clips");
    std::fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;

    let duration = MEDIA_CLIPS * cfg.clip_seconds;
    let mel_rows = (duration / cfg.audio_hop_s()).round() as usize;
    let n_frames = (duration * cfg.visual_fps).round() as usize;

    let sources: Vec<Identity> =
        (0..n_real).map(|_| Identity::new(rng, cfg.mel_bins)).collect();

    let mut audio_stats = StatAccum::new();
    let mut visual_stats = StatAccum::new();
    let mut records = Vec::new();

    let write_clip = |clip_id: &str,
                          source_id: String,
                          category: Category,
                          mel: &Array2<f32>,
                          frames: &Array4<f32>,
                          records: &mut Vec<ManifestRecord>|
     -> Result<()> {
        let audio_rel = format!("clips/{clip_id}.a.avft");
        let frames_rel = format!("clips/{clip_id}.v.avft");
        write_array2(&out_dir.join(&audio_rel), mel)?;
        write_array4(&out_dir.join(&frames_rel), frames)?;
        records.push(ManifestRecord {
            clip_id: clip_id.to_string(),
            audio_path: audio_rel,
            frames_path: frames_rel,
            label: category.label(),
            category,
            source_id,
            duration_s: duration,
        });
        Ok(())
    };

    for (i, id) in sources.iter().enumerate() {
        let mel = render_audio(id, &id.real_driver, cfg, mel_rows, rng);
        let brightness = Driver::new(rng);
        let frames = render_visual(id, &id.real_driver, &brightness, cfg, n_frames, rng);
        audio_stats.push_all(mel.iter());
        visual_stats.push_all(frames.iter());
        write_clip(
            &format!("real_{i:04}"),
            format!("src_{i:04}"),
            Category::Real,
            &mel,
            &frames,
            &mut records,
        )?;
    }

    for (category, prefix) in [
        (Category::SynthFa, "fa"),
        (Category::SynthFv, "fv"),
        (Category::SynthFav, "fav"),
        (Category::SynthSwap, "swap"),
    ] {
        for j in 0..n_fake_per_category {
            let s = j % n_real;
            let id = &sources[s];
            let (mel, frames, source_id) = match category {
                Category::SynthFa => {
                    let alien = Driver::new(rng);
                    let mel = render_audio(id, &alien, cfg, mel_rows, rng);
                    let b = Driver::new(rng);
                    let frames = render_visual(id, &id.real_driver, &b, cfg, n_frames, rng);
                    (mel, frames, format!("src_{s:04}"))
                }
                Category::SynthFv => {
                    let mel = render_audio(id, &id.real_driver, cfg, mel_rows, rng);
                    let alien = Driver::new(rng);
                    let b = Driver::new(rng);
                    let frames = render_visual(id, &alien, &b, cfg, n_frames, rng);
                    (mel, frames, format!("src_{s:04}"))
                }
                Category::SynthFav => {
                    let za = Driver::new(rng);
                    let zv = Driver::new(rng);
                    let mel = render_audio(id, &za, cfg, mel_rows, rng);
                    let b = Driver::new(rng);
                    let frames = render_visual(id, &zv, &b, cfg, n_frames, rng);
                    (mel, frames, format!("src_{s:04}"))
                }
                Category::SynthSwap => {
                    let s2 = (s + 1) % n_real;
                    let id2 = &sources[s2];
                    let mel = render_audio(id, &id.real_driver, cfg, mel_rows, rng);
                    let b = Driver::new(rng);
                    let frames =
                        render_visual(id2, &id2.real_driver, &b, cfg, n_frames, rng);
                    (mel, frames, format!("src_{s2:04}"))
                }
                _ => unreachable!(),
            };
            write_clip(&format!("{prefix}_{j:04}"), source_id, category, &mel, &frames, &mut records)?;
        }
    }

    let (mean_a, std_a) = audio_stats.finish();
    let (mean_v, std_v) = visual_stats.finish();
    let stats = CorpusStats { mean_a, std_a, mean_v, std_v };

    let manifest = Manifest { records, stats, base_dir: out_dir.to_path_buf() };
    manifest.write(&out_dir.join(CORPUS_MANIFEST))?;
    manifest
        .filtered(|r| r.category == Category::Real)
        .write(&out_dir.join(REAL_MANIFEST))?;
    Ok(manifest)
}
