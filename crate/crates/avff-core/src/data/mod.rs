//! Corpus handling: tensor file IO, manifests, log-mel extraction, clip
//! sampling, batch assembly, and the synthetic paired-modality generator.

mod mel;
mod sample;
mod synth;
mod tensor_file;

pub use mel::{fit_frames, log_mel, MEL_FLOOR};
pub use sample::{
    class_weights, load_audio, load_frames, make_stage1_batch, make_stage2_batch, sample_clip,
    sample_clip_at, window_at, ClipSample,
};
pub use synth::{
    av_driver_correlation, band_centroid_series, generate_synthetic_corpus,
    mouth_aperture_series, pearson, CORPUS_MANIFEST, REAL_MANIFEST,
};
pub use tensor_file::{read_array2, read_array4, read_tensor, write_array2, write_array4};

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::{Error, Result};

/// Binary real/fake target for the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// Class index used by the cross-entropy head (real = 0, fake = 1).
    pub fn index(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Fake => "fake",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "real" => Ok(Label::Real),
            "fake" => Ok(Label::Fake),
            other => Err(format!("unknown label {other:?} (expected real|fake)")),
        }
    }
}

/// Manipulation category of a clip. The `Fvra`/`Fvfa`/`Rvfa` variants mirror
/// the taxonomy of public benchmark corpora (which modality is forged and by
/// what family of method); the `Synth*` variants are produced by the built-in
/// generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Real,
    Rvfa,
    FvraWl,
    FvraFs,
    FvraGan,
    FvfaFs,
    FvfaGan,
    FvfaWl,
    SynthFa,
    SynthFv,
    SynthFav,
    SynthSwap,
}

impl Category {
    /// The label implied by the category: only `Real` is real.
    pub fn label(self) -> Label {
        match self {
            Category::Real => Label::Real,
            _ => Label::Fake,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Real => "REAL",
            Category::Rvfa => "RVFA",
            Category::FvraWl => "FVRA-WL",
            Category::FvraFs => "FVRA-FS",
            Category::FvraGan => "FVRA-GAN",
            Category::FvfaFs => "FVFA-FS",
            Category::FvfaGan => "FVFA-GAN",
            Category::FvfaWl => "FVFA-WL",
            Category::SynthFa => "SYNTH-FA",
            Category::SynthFv => "SYNTH-FV",
            Category::SynthFav => "SYNTH-FAV",
            Category::SynthSwap => "SYNTH-SWAP",
        }
    }

    /// All categories in manifest sort order.
    pub fn all() -> &'static [Category] {
        &[
            Category::Real,
            Category::Rvfa,
            Category::FvraWl,
            Category::FvraFs,
            Category::FvraGan,
            Category::FvfaFs,
            Category::FvfaGan,
            Category::FvfaWl,
            Category::SynthFa,
            Category::SynthFv,
            Category::SynthFav,
            Category::SynthSwap,
        ]
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Category::all()
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown category {s:?}"))
    }
}

/// One manifest row. Paths are stored relative to the manifest file and
/// resolved against [`Manifest::base_dir`] when media is loaded.
#[derive(Debug, Clone)]
pub struct ManifestRecord {
    pub clip_id: String,
    pub audio_path: String,
    pub frames_path: String,
    pub label: Label,
    pub category: Category,
    /// Identity the clip is grouped under for leave-one-out style splits.
    pub source_id: String,
    pub duration_s: f64,
}

/// Per-modality normalization statistics computed over the real clips of a
/// corpus and carried in the manifest header.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusStats {
    pub mean_a: f64,
    pub std_a: f64,
    pub mean_v: f64,
    pub std_v: f64,
}

impl Default for CorpusStats {
    fn default() -> Self {
        CorpusStats { mean_a: 0.0, std_a: 1.0, mean_v: 0.0, std_v: 1.0 }
    }
}

/// A parsed clip manifest: header stats plus one record per clip.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub stats: CorpusStats,
    /// Directory the record paths are relative to.
    pub base_dir: PathBuf,
}

const MANIFEST_HEADER: &str = "#avff-manifest v1";
/// A path field holding this marker means the modality is absent.
pub const MISSING_PATH: &str = "-";

impl Manifest {
    /// Parses a manifest file and checks its invariants: header present,
    /// clip ids unique, labels consistent with categories, durations
    /// positive, and every non-absent media path resolvable on disk.
    pub fn load(path: &Path) -> Result<Manifest> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);
        let base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();

        let mut lines = reader.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::format(path, "empty file".to_string()))?;
        let first = first.map_err(|e| Error::io(path, e))?;
        if first.trim_end() != MANIFEST_HEADER {
            return Err(Error::format(
                path,
                format!("bad header line {first:?} (expected {MANIFEST_HEADER:?})"),
            ));
        }

        let mut stats = CorpusStats::default();
        let mut have_stats = false;
        let mut records = Vec::new();
        let mut seen_ids = BTreeSet::new();
        for (idx, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            let lineno = idx + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#stats\t") {
                let vals: Vec<&str> = rest.split('\t').collect();
                if vals.len() != 4 {
                    return Err(Error::format(
                        path,
                        format!("line {lineno}: #stats needs 4 fields, got {}", vals.len()),
                    ));
                }
                let parse = |s: &str| -> Result<f64> {
                    s.parse().map_err(|_| {
                        Error::format(path, format!("line {lineno}: bad stats value {s:?}"))
                    })
                };
                stats = CorpusStats {
                    mean_a: parse(vals[0])?,
                    std_a: parse(vals[1])?,
                    mean_v: parse(vals[2])?,
                    std_v: parse(vals[3])?,
                };
                have_stats = true;
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 7 {
                return Err(Error::format(
                    path,
                    format!("line {lineno}: expected 7 tab-separated fields, got {}", fields.len()),
                ));
            }
            let label: Label = fields[3]
                .parse()
                .map_err(|e| Error::format(path, format!("line {lineno}: {e}")))?;
            let category: Category = fields[4]
                .parse()
                .map_err(|e| Error::format(path, format!("line {lineno}: {e}")))?;
            if category.label() != label {
                return Err(Error::format(
                    path,
                    format!(
                        "line {lineno}: label {label} inconsistent with category {category}"
                    ),
                ));
            }
            let duration_s: f64 = fields[6].parse().map_err(|_| {
                Error::format(path, format!("line {lineno}: bad duration {:?}", fields[6]))
            })?;
            if !(duration_s > 0.0) {
                return Err(Error::format(
                    path,
                    format!("line {lineno}: duration must be positive, got {duration_s}"),
                ));
            }
            let record = ManifestRecord {
                clip_id: fields[0].to_string(),
                audio_path: fields[1].to_string(),
                frames_path: fields[2].to_string(),
                label,
                category,
                source_id: fields[5].to_string(),
                duration_s,
            };
            if !seen_ids.insert(record.clip_id.clone()) {
                return Err(Error::format(
                    path,
                    format!("line {lineno}: duplicate clip_id {:?}", record.clip_id),
                ));
            }
            for rel in [&record.audio_path, &record.frames_path] {
                if rel != MISSING_PATH && !base_dir.join(rel).is_file() {
                    return Err(Error::format(
                        path,
                        format!("line {lineno}: media path {rel:?} not found under {base_dir:?}"),
                    ));
                }
            }
            records.push(record);
        }
        if !have_stats {
            return Err(Error::format(path, "missing #stats header line".to_string()));
        }
        Ok(Manifest { records, stats, base_dir })
    }

    /// Writes the manifest in the canonical text format.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        out.push_str(&format!(
            "#stats\t{}\t{}\t{}\t{}\n",
            self.stats.mean_a, self.stats.std_a, self.stats.mean_v, self.stats.std_v
        ));
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.clip_id, r.audio_path, r.frames_path, r.label, r.category, r.source_id,
                r.duration_s
            ));
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Absolute path of a record's audio media, or a missing-modality error.
    pub fn audio_path(&self, record: &ManifestRecord) -> Result<PathBuf> {
        if record.audio_path == MISSING_PATH {
            return Err(Error::MissingModality {
                clip_id: record.clip_id.clone(),
                modality: "audio".to_string(),
            });
        }
        Ok(self.base_dir.join(&record.audio_path))
    }

    /// Absolute path of a record's visual media, or a missing-modality error.
    pub fn frames_path(&self, record: &ManifestRecord) -> Result<PathBuf> {
        if record.frames_path == MISSING_PATH {
            return Err(Error::MissingModality {
                clip_id: record.clip_id.clone(),
                modality: "visual".to_string(),
            });
        }
        Ok(self.base_dir.join(&record.frames_path))
    }

    /// A copy containing only records that satisfy the predicate; stats and
    /// base directory are carried over.
    pub fn filtered(&self, keep: impl Fn(&ManifestRecord) -> bool) -> Manifest {
        Manifest {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            stats: self.stats,
            base_dir: self.base_dir.clone(),
        }
    }

    /// Sorted list of distinct source ids.
    pub fn source_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.source_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }
}
