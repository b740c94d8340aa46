//! Command-line front end: corpus synthesis, two-stage training,
//! protocol evaluation, perturbation sweeps, embedding export, and
//! single-clip inference.
//!
//! Every subcommand resolves its config the same way: built-in defaults,
//! overlaid by `--config FILE`, overlaid by each `--set key=value` in
//! order (`--set preset=desk` switches preset, so put it first), then
//! `--seed N`. Evaluation commands write a `metrics.csv` in the training
//! stream format plus per-clip `clips_*.tsv` tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use avff_core::backbone::{FeatureMode, ParameterStore};
use avff_core::config::{load_config, render_config, ModelConfig};
use avff_core::data::{
    generate_synthetic_corpus, Label, Manifest, CORPUS_MANIFEST, REAL_MANIFEST,
};
use avff_core::eval::{
    evaluate, evaluate_perturbed, export_embeddings, has_fake_visual, infer_clip, intra_split,
    loco_splits, run_protocol, ClipScore, EvalReport, PerturbKind, Protocol, ProtocolResult,
};
use avff_core::training::{run_training, AblationFlags, Stage, METRICS_HEADER};
use avff_core::{Error, Result};

/// Column names of the per-clip results tables.
const CLIP_TABLE_HEADER: &str =
    "clip_id\tlabel\tcategory\tn_blocks\tlogit_real\tlogit_fake\tscore\tprediction";

/// Tensor name prefixes read when classifying clips.
const CLASSIFY_PREFIXES: &[&str] = &["enc_", "conv_", "psi_", "gamma."];
/// Tensor name prefixes read when exporting embeddings.
const EMBED_PREFIXES: &[&str] = &["enc_", "conv_"];

#[derive(Parser, Debug)]
#[command(name = "avff", version, about = "Audio-visual fusion deepfake detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; each command checks for the ones it
/// needs and reports a missing flag as an error.
#[derive(Args, Debug, Clone)]
struct CommonOpts {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Config override applied after the file; repeatable.
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Clip manifest to read.
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,

    /// Parameter checkpoint: initialization for training commands,
    /// the model under test for evaluation commands.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,

    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Overrides the config's RNG seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Evaluation protocol: intra, loco, or cross-corpus.
    #[arg(long, value_name = "NAME")]
    protocol: Option<String>,

    /// Ablation switch; repeatable. One of: contrastive-only,
    /// no-cross-modal-fusion, random-masking, features-only,
    /// cross-modal-only, mean-pool-reduction, frozen-backbone.
    #[arg(long, value_name = "NAME")]
    ablation: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Renders a synthetic paired-modality corpus and its manifests.
    SynthData {
        #[command(flatten)]
        opts: CommonOpts,
        /// Number of real source clips.
        #[arg(long, value_name = "N", default_value_t = 64)]
        real: usize,
        /// Fake clips per synthetic category.
        #[arg(long, value_name = "N", default_value_t = 16)]
        fake_per_category: usize,
    },
    /// Stage-1 self-supervised pretraining on a real-only manifest.
    Pretrain {
        #[command(flatten)]
        opts: CommonOpts,
        /// Continue from the saved training state in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Stage-2 supervised training, usually from a stage-1 checkpoint.
    Finetune {
        #[command(flatten)]
        opts: CommonOpts,
        /// Continue from the saved training state in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Scores a manifest under an evaluation protocol.
    Eval {
        #[command(flatten)]
        opts: CommonOpts,
        /// With --protocol loco: finetune a fresh stage-2 model per split
        /// from the stage-1 checkpoint instead of scoring --checkpoint
        /// as given.
        #[arg(long)]
        train_each: bool,
    },
    /// Sweeps audio perturbations and reports metrics per kind and level.
    PerturbEval {
        #[command(flatten)]
        opts: CommonOpts,
        /// Perturbation kind; sweeps all four families when absent.
        #[arg(long, value_name = "NAME")]
        kind: Option<String>,
        /// Severity level 0..=5; sweeps the full range when absent.
        #[arg(long, value_name = "L")]
        level: Option<usize>,
    },
    /// Writes per-clip fused embeddings as a TSV table.
    Embed {
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Scores one clip and prints its results row.
    Infer {
        #[command(flatten)]
        opts: CommonOpts,
        /// Clip id to look up in the manifest.
        #[arg(long, value_name = "ID")]
        clip: String,
    },
}

impl CommonOpts {
    fn config(&self) -> Result<ModelConfig> {
        let mut overrides = Vec::with_capacity(self.set.len() + 1);
        for entry in &self.set {
            let (k, v) = entry.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set `{entry}`: expected KEY=VALUE"))
            })?;
            overrides.push((k.to_string(), v.to_string()));
        }
        if let Some(seed) = self.seed {
            overrides.push(("seed".to_string(), seed.to_string()));
        }
        load_config(self.config.as_deref(), &overrides)
    }

    fn flags(&self) -> Result<AblationFlags> {
        let mut flags = AblationFlags::default();
        for name in &self.ablation {
            match name.replace('-', "_").as_str() {
                "contrastive_only" => flags.contrastive_only = true,
                "no_cross_modal_fusion" => flags.no_cross_modal_fusion = true,
                "random_masking" => flags.random_masking = true,
                "features_only" => flags.features_only = true,
                "cross_modal_only" => flags.cross_modal_only = true,
                "mean_pool_reduction" => flags.mean_pool_reduction = true,
                "frozen_backbone" => flags.frozen_backbone = true,
                other => {
                    return Err(Error::Invalid(format!("unknown ablation `{other}`")));
                }
            }
        }
        flags.validate()?;
        Ok(flags)
    }

    fn manifest(&self) -> Result<Manifest> {
        Manifest::load(require(&self.manifest, "--manifest")?)
    }

    fn out_dir(&self) -> Result<&Path> {
        let out = require(&self.out, "--out")?;
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(out)
    }

    /// Loads --checkpoint with heads sized for the feature mode; tensors
    /// absent from the file keep their fresh initialization. Warns only
    /// about missing tensors the command will actually read.
    fn params(
        &self,
        cfg: &ModelConfig,
        mode: FeatureMode,
        used_prefixes: &[&str],
    ) -> Result<ParameterStore> {
        let path = require(&self.checkpoint, "--checkpoint")?;
        let (params, report) = ParameterStore::load_for(path, cfg, mode, false)?;
        let missing: Vec<&String> = report
            .fresh
            .iter()
            .filter(|n| used_prefixes.iter().any(|p| n.starts_with(p)))
            .collect();
        if !missing.is_empty() {
            eprintln!(
                "warning: {} needed tensors missing from {} (e.g. {}), left at fresh init",
                missing.len(),
                path.display(),
                missing[0]
            );
        }
        Ok(params)
    }

    fn protocol(&self) -> Result<Protocol> {
        self.protocol
            .as_deref()
            .unwrap_or("cross-corpus")
            .parse()
            .map_err(Error::Invalid)
    }
}

fn require<'a>(opt: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    opt.as_deref()
        .ok_or_else(|| Error::Invalid(format!("this command needs {flag}")))
}

/// Lowercase file-name stem for a split name.
fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn fmt_opt_short(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".to_string())
}

/// One metrics-stream row for an evaluation result: loss and lr fields
/// stay empty, the split column carries the result name.
fn eval_metrics_row(name: &str, report: &EvalReport, wall_ms: f64) -> String {
    format!(
        "0,0,{name},,,,,,,{:.6},{},{},,{:.6}\n",
        report.acc,
        fmt_opt(report.auc),
        fmt_opt(report.ap),
        wall_ms
    )
}

fn clip_row(row: &ClipScore) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
        row.clip_id,
        row.label,
        row.category,
        row.n_blocks,
        row.mean_logits[0],
        row.mean_logits[1],
        row.score,
        row.prediction
    )
}

fn write_clip_table(path: &Path, rows: &[ClipScore]) -> Result<()> {
    let mut text = String::from(CLIP_TABLE_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&clip_row(row));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn print_result(name: &str, report: &EvalReport) {
    println!(
        "{name}: n={} acc={:.4} auc={} ap={}",
        report.rows.len(),
        report.acc,
        fmt_opt_short(report.auc),
        fmt_opt_short(report.ap)
    );
}

/// Writes metrics.csv and per-clip tables for a list of named results.
fn write_results(out: &Path, results: &[(ProtocolResult, f64)]) -> Result<()> {
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    for (result, wall_ms) in results {
        metrics.push_str(&eval_metrics_row(&result.name, &result.report, *wall_ms));
        if !result.report.rows.is_empty() {
            let table = out.join(format!("clips_{}.tsv", slug(&result.name)));
            write_clip_table(&table, &result.report.rows)?;
        }
    }
    let path = out.join("metrics.csv");
    fs::write(&path, metrics).map_err(|e| Error::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_synth_data(opts: &CommonOpts, n_real: usize, n_fake: usize) -> Result<()> {
    let cfg = opts.config()?;
    let out = require(&opts.out, "--out")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let manifest = generate_synthetic_corpus(n_real, n_fake, &cfg, &mut rng, out)?;
    let fakes = manifest.records.iter().filter(|r| r.label == Label::Fake).count();
    println!(
        "wrote {} clips ({n_real} real, {fakes} fake) under {}",
        manifest.records.len(),
        out.display()
    );
    println!("corpus manifest: {}", out.join(CORPUS_MANIFEST).display());
    println!("real-only manifest: {}", out.join(REAL_MANIFEST).display());
    Ok(())
}

fn cmd_train(opts: &CommonOpts, stage: Stage, resume: bool) -> Result<()> {
    let cfg = opts.config()?;
    let flags = opts.flags()?;
    let mut manifest = opts.manifest()?;
    let out = opts.out_dir()?;
    // --protocol restricts training to the protocol's training sources, so
    // a later `eval` with the same seed scores clips this run never saw.
    if opts.protocol.is_some() {
        match opts.protocol()? {
            Protocol::Intra => {
                let (train, _) = intra_split(&manifest, cfg.seed)?;
                println!(
                    "training on the intra split's training sources: {} of {} clips",
                    train.records.len(),
                    manifest.records.len()
                );
                manifest = train;
            }
            Protocol::CrossCorpus => {}
            Protocol::LeaveOneCategoryOut => {
                return Err(Error::Invalid(
                    "per-split training runs under `eval --protocol loco --train-each`".into(),
                ));
            }
        }
    }
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, render_config(&cfg)).map_err(|e| Error::io(&cfg_path, e))?;
    let art = run_training(
        &manifest,
        &cfg,
        stage,
        &flags,
        opts.checkpoint.as_deref(),
        out,
        resume,
    )?;
    let metric = match stage {
        Stage::One => "val generator loss",
        Stage::Two => "val AUC",
    };
    println!("ran {} epochs; best {metric} {:.6}", art.epochs_run, art.best_metric);
    println!("best checkpoint: {}", art.best_checkpoint.display());
    println!("last checkpoint: {}", art.last_checkpoint.display());
    println!("metrics: {}", art.metrics_path.display());
    Ok(())
}

/// Leave-one-category-out with a stage-2 model trained per split from the
/// stage-1 checkpoint, with the same `AVG-FV` summary as the read-only
/// protocol.
fn loco_train_each(
    opts: &CommonOpts,
    cfg: &ModelConfig,
    flags: &AblationFlags,
    manifest: &Manifest,
    out: &Path,
) -> Result<Vec<(ProtocolResult, f64)>> {
    let init = require(&opts.checkpoint, "--checkpoint")?;
    let mut results = Vec::new();
    let mut fv = Vec::new();
    for split in loco_splits(manifest, cfg.seed)? {
        let name = format!("LOCO-{}", split.held_out);
        let start = Instant::now();
        let run_dir = out.join(slug(&name));
        let art = run_training(&split.train, cfg, Stage::Two, flags, Some(init), &run_dir, false)?;
        let (params, _) =
            ParameterStore::load_for(&art.best_checkpoint, cfg, flags.feature_mode(), false)?;
        let report = evaluate(&params, &split.test, cfg, flags)?;
        print_result(&name, &report);
        if has_fake_visual(split.held_out) {
            fv.push((report.acc, report.auc, report.ap));
        }
        results.push((ProtocolResult { name, report }, start.elapsed().as_secs_f64() * 1e3));
    }
    if let Some(avg) = fv_average(&fv) {
        print_result(&avg.name, &avg.report);
        results.push((avg, 0.0));
    }
    Ok(results)
}

fn cmd_eval(opts: &CommonOpts, train_each: bool) -> Result<()> {
    let cfg = opts.config()?;
    let flags = opts.flags()?;
    let manifest = opts.manifest()?;
    let out = opts.out_dir()?;
    let protocol = opts.protocol()?;

    let results = if train_each {
        if protocol != Protocol::LeaveOneCategoryOut {
            return Err(Error::Invalid("--train-each needs --protocol loco".into()));
        }
        loco_train_each(opts, &cfg, &flags, &manifest, out)?
    } else {
        let params = opts.params(&cfg, flags.feature_mode(), CLASSIFY_PREFIXES)?;
        let start = Instant::now();
        let results = run_protocol(&params, &manifest, &cfg, &flags, protocol, cfg.seed)?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3 / results.len().max(1) as f64;
        for result in &results {
            print_result(&result.name, &result.report);
        }
        results.into_iter().map(|r| (r, wall_ms)).collect()
    };
    write_results(out, &results)
}

/// Mean metrics over the splits whose held-out category has fake visuals,
/// as a per-clip-row-free summary result.
fn fv_average(fv: &[(f64, Option<f64>, Option<f64>)]) -> Option<ProtocolResult> {
    if fv.is_empty() {
        return None;
    }
    let mean_opt = |xs: Vec<Option<f64>>| {
        let vals: Vec<f64> = xs.into_iter().flatten().collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Some(ProtocolResult {
        name: "AVG-FV".to_string(),
        report: EvalReport {
            rows: Vec::new(),
            acc: fv.iter().map(|x| x.0).sum::<f64>() / fv.len() as f64,
            auc: mean_opt(fv.iter().map(|x| x.1).collect()),
            ap: mean_opt(fv.iter().map(|x| x.2).collect()),
        },
    })
}

fn cmd_perturb_eval(opts: &CommonOpts, kind: &Option<String>, level: Option<usize>) -> Result<()> {
    let cfg = opts.config()?;
    let flags = opts.flags()?;
    let manifest = opts.manifest()?;
    let out = opts.out_dir()?;
    let params = opts.params(&cfg, flags.feature_mode(), CLASSIFY_PREFIXES)?;

    let kinds: Vec<PerturbKind> = match kind {
        Some(name) => vec![name.parse().map_err(Error::Invalid)?],
        None => vec![
            PerturbKind::GaussianNoise,
            PerturbKind::PitchShift,
            PerturbKind::Reverberance,
            PerturbKind::Compression,
        ],
    };
    let levels: Vec<usize> = match level {
        Some(l) => vec![l],
        None => (1..=5).collect(),
    };
    // Level 0 is the identity whatever the kind, so the full sweep runs
    // it once as the shared baseline.
    let mut cells: Vec<(PerturbKind, usize)> = Vec::new();
    if level.is_none() {
        cells.push((PerturbKind::Identity, 0));
    }
    for &k in &kinds {
        for &l in &levels {
            cells.push((k, l));
        }
    }

    let mut results = Vec::new();
    for (k, l) in cells {
        let start = Instant::now();
        let report = evaluate_perturbed(&params, &manifest, &cfg, &flags, k, l, cfg.seed)?;
        let name = format!("{k}-{l}");
        print_result(&name, &report);
        results.push((ProtocolResult { name, report }, start.elapsed().as_secs_f64() * 1e3));
    }
    write_results(out, &results)
}

fn cmd_embed(opts: &CommonOpts) -> Result<()> {
    let cfg = opts.config()?;
    let manifest = opts.manifest()?;
    let out = opts.out_dir()?;
    let params = opts.params(&cfg, FeatureMode::Combined, EMBED_PREFIXES)?;
    let path = out.join("embeddings.tsv");
    export_embeddings(&params, &manifest, &cfg, &path)?;
    println!(
        "wrote {} ({} clips x {} dims)",
        path.display(),
        manifest.records.len(),
        4 * cfg.encoder_dim
    );
    Ok(())
}

fn cmd_infer(opts: &CommonOpts, clip: &str) -> Result<()> {
    let cfg = opts.config()?;
    let flags = opts.flags()?;
    let manifest = opts.manifest()?;
    let params = opts.params(&cfg, flags.feature_mode(), CLASSIFY_PREFIXES)?;
    let record = manifest
        .records
        .iter()
        .find(|r| r.clip_id == clip)
        .ok_or_else(|| Error::Invalid(format!("clip `{clip}` not in the manifest")))?;
    let score = infer_clip(&params, &manifest, record, &cfg, &flags)?;
    println!("{CLIP_TABLE_HEADER}");
    println!("{}", clip_row(&score));
    if let Some(out) = &opts.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join(format!("clips_{}.tsv", slug(clip)));
        write_clip_table(&path, std::slice::from_ref(&score))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData { opts, real, fake_per_category } => {
            cmd_synth_data(opts, *real, *fake_per_category)
        }
        Command::Pretrain { opts, resume } => cmd_train(opts, Stage::One, *resume),
        Command::Finetune { opts, resume } => cmd_train(opts, Stage::Two, *resume),
        Command::Eval { opts, train_each } => cmd_eval(opts, *train_each),
        Command::PerturbEval { opts, kind, level } => cmd_perturb_eval(opts, kind, *level),
        Command::Embed { opts } => cmd_embed(opts),
        Command::Infer { opts, clip } => cmd_infer(opts, clip),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
