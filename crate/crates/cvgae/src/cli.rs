//! Command-line entry points: `ingest`, `stats`, `train`, `sample`, `eval`,
//! and `gradcheck`, driven by a strict JSON run configuration.
//!
//! Every command writes a manifest (tool version, command, seed, config and
//! dataset hashes, output names) next to its outputs. Nothing in the output
//! tree depends on wall-clock time, so a fixed seed reproduces every file
//! byte for byte.

use crate::autodiff::{grad_check, FnModel, ParamStore, Tensor};
use crate::eval::{
    aggregate_csv, dataset_stats, diversity, diversity_csv, element_counts_csv,
    group_by_heavy_atoms, grouped_csv, molecule_stats_csv, per_molecule_csv, random_baseline,
    MethodSamples,
};
use crate::molgraph::{xyz, Conformation, Dataset, FilterProfile, SplitKind};
use crate::mpnn::MpnnConfig;
use crate::train::{subseed, trace_to_csv, TrainConfig, Trainer};
use crate::vae::{
    elbo_loss, sample_conformations, LatentDraw, ModelConfig, ModelParams, Networks, VaeError,
};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Conditional variational graph autoencoder for molecular conformations.
#[derive(Parser, Debug)]
#[command(name = "cvgae", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse SDF files into a featurized dataset bundle with splits.
    Ingest(IngestArgs),
    /// Dataset composition statistics as CSV tables.
    Stats(StatsArgs),
    /// Train a model on the train split of a bundle.
    Train(TrainArgs),
    /// Sample conformations for a split into an XYZ file.
    Sample(SampleArgs),
    /// Score one or more conformation files against the references.
    Eval(EvalArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// SDF inputs (concatenated V2000 molblocks).
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output directory for dataset.json, rejects.csv and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Named admission profile: qm9, cod, csd, or open.
    #[arg(long, default_value = "open")]
    pub profile: String,
    /// Heavy-atom cap override.
    #[arg(long)]
    pub max_heavy: Option<usize>,
    /// Comma-separated element whitelist override (include H).
    #[arg(long)]
    pub elements: Option<String>,
    /// Validation split size.
    #[arg(long, default_value_t = 0)]
    pub valid: usize,
    /// Test split size.
    #[arg(long, default_value_t = 0)]
    pub test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration (strict JSON; unknown keys are rejected).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from an existing checkpoint; its config takes precedence.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Seed override for the run.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Trained checkpoint; required for the cvgae method.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Which split to sample: train, valid, or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Conformations per molecule.
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    /// cvgae (model sampling) or random (normal-coordinate baseline).
    #[arg(long, default_value = "cvgae")]
    pub method: String,
    /// Baseline coordinate scale in angstroms.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// XYZ conformation files; the file stem names the method.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Index of the molecule to differentiate through.
    #[arg(long, default_value_t = 0)]
    pub molecule: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fault-injection hook: flip the sign of one analytic gradient entry.
    #[arg(long, default_value_t = false)]
    pub inject_sign_flip: bool,
}

/// Architecture section of the run configuration. Defaults mirror the
/// published setup: three message passing rounds, 50 hidden units, and a
/// 100-wide head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub rounds: usize,
    pub hidden_dim: usize,
    pub head_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { rounds: 3, hidden_dim: 50, head_dim: 100 }
    }
}

/// Whole run configuration: model architecture, optimizer settings, and the
/// per-molecule sample count (default 100).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { model: ModelSection::default(), train: TrainConfig::default(), samples: 100 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let mpnn = self.mpnn_config();
        mpnn.validate().map_err(|e| anyhow!("{}", e))?;
        self.train.validate().map_err(|e| anyhow!("{}", e))?;
        if self.samples == 0 {
            bail!("samples must be at least 1");
        }
        Ok(())
    }

    pub fn mpnn_config(&self) -> MpnnConfig {
        MpnnConfig {
            rounds: self.model.rounds,
            hidden_dim: self.model.hidden_dim,
            head_dim: self.model.head_dim,
        }
    }

    pub fn sha256(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool_version: &'a str,
    command: &'a str,
    seed: u64,
    config_sha256: Option<String>,
    dataset_sha256: Option<String>,
    resolved_config: Option<&'a RunConfig>,
    outputs: Vec<String>,
}

fn write_manifest(dir: &Path, manifest: &Manifest<'_>) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(args) => cmd_ingest(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Train(args) => cmd_train(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn profile_from(args: &IngestArgs) -> Result<FilterProfile> {
    let mut profile = match args.profile.as_str() {
        "qm9" => FilterProfile::qm9(),
        "cod" => FilterProfile::cod(),
        "csd" => FilterProfile::csd(),
        "open" => FilterProfile::open(),
        other => bail!("unknown filter profile `{}`", other),
    };
    if let Some(cap) = args.max_heavy {
        profile.max_heavy = cap;
    }
    if let Some(list) = &args.elements {
        profile.allowed_elements =
            Some(list.split(',').map(|s| s.trim().to_string()).collect());
    }
    Ok(profile)
}

pub fn cmd_ingest(args: IngestArgs) -> Result<()> {
    let profile = profile_from(&args)?;
    let mut sources = Vec::new();
    for path in &args.inputs {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        sources.push((name, text));
    }

    let outcome = Dataset::ingest(&sources, &profile).map_err(|e| anyhow!("{}", e))?;
    let mut dataset = outcome.dataset;
    dataset
        .assign_splits(args.valid, args.test, args.seed)
        .map_err(|e| anyhow!("{}", e))?;

    ensure_dir(&args.out)?;
    let bundle = args.out.join("dataset.json");
    dataset.save(&bundle).map_err(|e| anyhow!("{}", e))?;

    let mut rejects_csv = String::from("source,record,title,reason\n");
    for (source, reject) in &outcome.rejects {
        let record = if reject.index == usize::MAX {
            String::new()
        } else {
            reject.index.to_string()
        };
        rejects_csv.push_str(&format!(
            "{},{},{},{}\n",
            source,
            record,
            reject.title.replace(',', ";"),
            reject.reason.to_string().replace(',', ";")
        ));
        log::warn!("rejected `{}` from {}: {}", reject.title, source, reject.reason);
    }
    std::fs::write(args.out.join("rejects.csv"), &rejects_csv)?;

    println!(
        "accepted {} molecules, rejected {} (splits: {} train / {} valid / {} test)",
        dataset.len(),
        outcome.rejects.len(),
        dataset.splits.train.len(),
        dataset.splits.valid.len(),
        dataset.splits.test.len()
    );
    for (_, reject) in &outcome.rejects {
        println!("  rejected `{}`: {}", reject.title, reject.reason);
    }

    write_manifest(
        &args.out,
        &Manifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: "ingest",
            seed: args.seed,
            config_sha256: None,
            dataset_sha256: Some(dataset.fingerprint().map_err(|e| anyhow!("{}", e))?),
            resolved_config: None,
            outputs: vec!["dataset.json".into(), "rejects.csv".into()],
        },
    )
}

pub fn cmd_stats(args: StatsArgs) -> Result<()> {
    let dataset = Dataset::load(&args.dataset).map_err(|e| anyhow!("{}", e))?;
    let stats = dataset_stats(&dataset);
    ensure_dir(&args.out)?;
    std::fs::write(args.out.join("elements.csv"), element_counts_csv(&stats))?;
    std::fs::write(args.out.join("molecules.csv"), molecule_stats_csv(&stats))?;
    println!(
        "{} molecules, {} distinct elements",
        dataset.len(),
        stats.element_counts.len()
    );
    write_manifest(
        &args.out,
        &Manifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: "stats",
            seed: 0,
            config_sha256: None,
            dataset_sha256: Some(dataset.fingerprint().map_err(|e| anyhow!("{}", e))?),
            resolved_config: None,
            outputs: vec!["elements.csv".into(), "molecules.csv".into()],
        },
    )
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    let dataset = Dataset::load(&args.dataset).map_err(|e| anyhow!("{}", e))?;
    if dataset.splits.train.is_empty() {
        bail!("dataset has an empty train split");
    }

    let mut trainer = match &args.resume {
        Some(path) => {
            let mut t = Trainer::load_checkpoint(path).map_err(|e| anyhow!("{}", e))?;
            if t.model.vocab_fingerprint != dataset.vocab.fingerprint() {
                bail!("checkpoint was trained against a different vocabulary");
            }
            // trajectory state (seed, batch, optimizer) comes from the
            // checkpoint; run control comes from this invocation
            t.config.max_steps = config.train.max_steps;
            t.config.checkpoint_interval = config.train.checkpoint_interval;
            t.config.early_stop_patience = config.train.early_stop_patience;
            log::info!("resuming at step {}", t.step);
            t
        }
        None => {
            let model_config = ModelConfig {
                mpnn: config.mpnn_config(),
                node_feature_dim: dataset.vocab.node_feature_dim(),
                edge_feature_dim: dataset.vocab.edge_feature_dim(),
            };
            let model = ModelParams::init(
                model_config,
                dataset.vocab.fingerprint(),
                subseed(config.train.seed, "model-init", 0),
            )
            .map_err(|e| anyhow!("{}", e))?;
            Trainer::new(model, config.train.clone()).map_err(|e| anyhow!("{}", e))?
        }
    };

    ensure_dir(&args.out)?;
    let max_steps = trainer.config.max_steps;
    let interval = trainer.config.checkpoint_interval;
    let mut trace = Vec::new();
    let mut best_valid: Option<f64> = None;
    let mut stale_evals: u64 = 0;
    let mut outputs = vec!["loss.csv".into(), "checkpoint.json".into()];

    while trainer.step < max_steps {
        let chunk = if interval > 0 {
            interval.min(max_steps - trainer.step)
        } else {
            max_steps - trainer.step
        };
        let rows = trainer
            .train_steps(&dataset, &dataset.splits.train, chunk)
            .map_err(|e| anyhow!("{}", e))?;
        trace.extend(rows);

        if interval > 0 && trainer.step < max_steps {
            let name = format!("checkpoint_step{}.json", trainer.step);
            trainer
                .save_checkpoint(&args.out.join(&name))
                .map_err(|e| anyhow!("{}", e))?;
            outputs.push(name);
        }

        if let Some(patience) = trainer.config.early_stop_patience {
            if !dataset.splits.valid.is_empty() {
                let row = trainer
                    .validation_loss(
                        &dataset,
                        &dataset.splits.valid,
                        subseed(trainer.config.seed, "valid", trainer.step),
                    )
                    .map_err(|e| anyhow!("{}", e))?;
                let loss = row.loss();
                if best_valid.is_none_or(|b| loss < b) {
                    best_valid = Some(loss);
                    stale_evals = 0;
                } else {
                    stale_evals += 1;
                    if stale_evals >= patience {
                        log::info!("early stop at step {} (validation stale)", trainer.step);
                        break;
                    }
                }
            }
        }
    }

    std::fs::write(args.out.join("loss.csv"), trace_to_csv(&trace))?;
    trainer
        .save_checkpoint(&args.out.join("checkpoint.json"))
        .map_err(|e| anyhow!("{}", e))?;
    if let Some(last) = trace.last() {
        println!(
            "trained to step {} (last batch: recon {:.4}, kl {:.4}, loss {:.4})",
            trainer.step,
            last.recon,
            last.kl_post_prior,
            last.loss()
        );
    }

    write_manifest(
        &args.out,
        &Manifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: "train",
            seed: trainer.config.seed,
            config_sha256: Some(config.sha256()),
            dataset_sha256: Some(dataset.fingerprint().map_err(|e| anyhow!("{}", e))?),
            resolved_config: Some(&config),
            outputs,
        },
    )
}

pub fn cmd_sample(args: SampleArgs) -> Result<()> {
    let dataset = Dataset::load(&args.dataset).map_err(|e| anyhow!("{}", e))?;
    let split = SplitKind::from_str(&args.split).map_err(|e| anyhow!("{}", e))?;
    let indices = dataset.split(split);
    if indices.is_empty() {
        bail!("split `{}` is empty", args.split);
    }
    if args.samples == 0 {
        bail!("--samples must be at least 1");
    }

    let started = std::time::Instant::now();
    let mut text = String::new();
    let mut total = 0usize;
    match args.method.as_str() {
        "cvgae" => {
            let checkpoint = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| anyhow!("--checkpoint is required for the cvgae method"))?;
            let trainer = Trainer::load_checkpoint(checkpoint).map_err(|e| anyhow!("{}", e))?;
            let model = trainer.model;
            if model.vocab_fingerprint != dataset.vocab.fingerprint() {
                bail!("checkpoint was trained against a different vocabulary");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(subseed(args.seed, "sample", 0));
            for &idx in indices {
                let entry = &dataset.entries[idx];
                let confs = sample_conformations(
                    &model,
                    &entry.features,
                    args.samples,
                    &mut rng,
                    LatentDraw::Stochastic,
                )
                .map_err(|e| anyhow!("{}", e))?;
                write_sample_frames(&mut text, entry, &confs);
                total += confs.len();
            }
        }
        "random" => {
            let mut rng = ChaCha8Rng::seed_from_u64(subseed(args.seed, "baseline", 0));
            for &idx in indices {
                let entry = &dataset.entries[idx];
                let confs =
                    random_baseline(entry.graph.atom_count(), args.samples, &mut rng, args.scale);
                write_sample_frames(&mut text, entry, &confs);
                total += confs.len();
            }
        }
        other => bail!("unknown sampling method `{}`", other),
    }

    ensure_dir(&args.out)?;
    let file_name = format!("{}.xyz", args.method);
    std::fs::write(args.out.join(&file_name), &text)?;
    log::info!(
        "sampled {} conformations for {} molecules in {:.2}s",
        total,
        indices.len(),
        started.elapsed().as_secs_f64()
    );
    println!(
        "wrote {} conformations ({} molecules x {}) to {}",
        total,
        indices.len(),
        args.samples,
        args.out.join(&file_name).display()
    );

    write_manifest(
        &args.out,
        &Manifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: "sample",
            seed: args.seed,
            config_sha256: None,
            dataset_sha256: Some(dataset.fingerprint().map_err(|e| anyhow!("{}", e))?),
            resolved_config: None,
            outputs: vec![file_name],
        },
    )
}

fn write_sample_frames(out: &mut String, entry: &crate::molgraph::DatasetEntry, confs: &[Conformation]) {
    let elements: Vec<String> =
        entry.graph.atoms().iter().map(|a| a.element.clone()).collect();
    for (k, conf) in confs.iter().enumerate() {
        let comment = format!("id={} sample={}", entry.id, k);
        xyz::write_frame(out, &comment, &elements, conf);
    }
}

fn comment_field<'a>(comment: &'a str, key: &str) -> Option<&'a str> {
    comment
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix(key).and_then(|rest| rest.strip_prefix('=')))
}

/// Read one method's samples from an XYZ file written by `sample`.
fn read_method_samples(
    path: &Path,
    dataset: &Dataset,
    requested_hint: &mut usize,
) -> Result<MethodSamples> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let frames = xyz::read_xyz(&text).map_err(|e| anyhow!("{}: {}", path.display(), e))?;
    let method = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "method".into());
    let mut by_molecule: BTreeMap<String, Vec<Conformation>> = BTreeMap::new();
    for (k, frame) in frames.into_iter().enumerate() {
        let id = comment_field(&frame.comment, "id")
            .ok_or_else(|| anyhow!("{}: frame {} has no id= comment", path.display(), k))?
            .to_string();
        let entry = dataset
            .entry_by_id(&id)
            .ok_or_else(|| anyhow!("{}: unknown molecule id `{}`", path.display(), id))?;
        if entry.graph.atom_count() != frame.conformation.len() {
            bail!(
                "{}: frame {} has {} atoms but molecule `{}` has {}",
                path.display(),
                k,
                frame.conformation.len(),
                id,
                entry.graph.atom_count()
            );
        }
        for (a, el) in entry.graph.atoms().iter().zip(&frame.elements) {
            if &a.element != el {
                bail!(
                    "{}: frame {} element order mismatch for molecule `{}`",
                    path.display(),
                    k,
                    id
                );
            }
        }
        by_molecule.entry(id).or_default().push(frame.conformation);
    }
    let requested = by_molecule.values().map(Vec::len).max().unwrap_or(0);
    *requested_hint = (*requested_hint).max(requested);
    Ok(MethodSamples { method, requested, by_molecule })
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let dataset = Dataset::load(&args.dataset).map_err(|e| anyhow!("{}", e))?;
    let split = SplitKind::from_str(&args.split).map_err(|e| anyhow!("{}", e))?;
    let indices = dataset.split(split);
    if indices.is_empty() {
        bail!("split `{}` is empty", args.split);
    }
    let ids: Vec<String> = indices.iter().map(|&i| dataset.entries[i].id.clone()).collect();

    let mut methods = Vec::new();
    let mut hint = 0usize;
    for path in &args.inputs {
        methods.push(read_method_samples(path, &dataset, &mut hint)?);
    }
    let reports =
        crate::eval::eval_methods(&methods, &dataset, &ids).map_err(|e| anyhow!("{}", e))?;

    ensure_dir(&args.out)?;
    let mut outputs = vec!["aggregate.csv".into(), "diversity.csv".into()];
    std::fs::write(args.out.join("aggregate.csv"), aggregate_csv(&reports))?;

    let mut diversity_rows = Vec::new();
    for method in &methods {
        diversity_rows.push(diversity(method, &dataset, &ids).map_err(|e| anyhow!("{}", e))?);
    }
    std::fs::write(args.out.join("diversity.csv"), diversity_csv(&diversity_rows))?;

    for report in &reports {
        let per_mol = format!("per_molecule_{}.csv", report.method);
        std::fs::write(args.out.join(&per_mol), per_molecule_csv(report))?;
        let grouped = format!("grouped_{}.csv", report.method);
        std::fs::write(args.out.join(&grouped), grouped_csv(&group_by_heavy_atoms(report)))?;
        outputs.push(per_mol);
        outputs.push(grouped);
        println!(
            "{}: median mean {:.4}, median std {:.4}, median best {:.4}, success {:.1}%/{:.1}%",
            report.method,
            report.median_of_mean,
            report.median_of_std,
            report.median_of_best,
            100.0 * report.success_per_test_set,
            100.0 * report.success_per_molecule
        );
    }

    write_manifest(
        &args.out,
        &Manifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: "eval",
            seed: 0,
            config_sha256: None,
            dataset_sha256: Some(dataset.fingerprint().map_err(|e| anyhow!("{}", e))?),
            resolved_config: None,
            outputs,
        },
    )
}

pub fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let config = RunConfig::load(&args.config)?;
    let dataset = Dataset::load(&args.dataset).map_err(|e| anyhow!("{}", e))?;
    let entry = dataset
        .entries
        .get(args.molecule)
        .ok_or_else(|| anyhow!("molecule index {} out of {}", args.molecule, dataset.len()))?;

    let model_config = ModelConfig {
        mpnn: config.mpnn_config(),
        node_feature_dim: dataset.vocab.node_feature_dim(),
        edge_feature_dim: dataset.vocab.edge_feature_dim(),
    };
    let model = ModelParams::init(
        model_config.clone(),
        dataset.vocab.fingerprint(),
        subseed(args.seed, "gradcheck-init", 0),
    )
    .map_err(|e| anyhow!("{}", e))?;

    let noise_seed = subseed(args.seed, "gradcheck-noise", 0);
    let features = entry.features.clone();
    let reference = entry.conformation.clone();
    let alpha = config.train.alpha;
    let dropout = config.train.dropout;

    let eval = move |store: &ParamStore,
                     want_grads: bool|
          -> Result<(f64, BTreeMap<String, Tensor>), VaeError> {
        let mut tape = crate::autodiff::Tape::new();
        let bound = store.bind(&mut tape);
        let nets = Networks::resolve(&bound)?;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let terms = elbo_loss(
            &mut tape,
            &nets,
            &model_config,
            &features,
            &reference,
            alpha,
            dropout,
            true,
            &mut rng,
        )?;
        let loss = tape.scale(terms.total, -1.0)?;
        let value = tape.value(loss).item();
        if want_grads {
            let grads = tape.backward(loss)?;
            Ok((value, bound.grads_by_name(&grads)))
        } else {
            Ok((value, BTreeMap::new()))
        }
    };

    let inject = args.inject_sign_flip;
    let eval2 = eval.clone();
    let model_fn = FnModel {
        value: move |p: &ParamStore| eval(p, false).map(|(v, _)| v),
        grads: move |p: &ParamStore| {
            let (v, mut grads) = eval2(p, true)?;
            if inject {
                'outer: for t in grads.values_mut() {
                    for x in t.data_mut() {
                        if *x != 0.0 {
                            *x = -*x;
                            break 'outer;
                        }
                    }
                }
            }
            Ok((v, grads))
        },
    };

    let started = std::time::Instant::now();
    let report = grad_check(&model_fn, &model.store, 1e-4).map_err(|e| anyhow!("{}", e))?;
    println!(
        "gradcheck molecule `{}`: {} in {:.2}s",
        entry.id,
        report,
        started.elapsed().as_secs_f64()
    );
    if report.max_rel_err >= 1e-4 {
        bail!("gradient check failed: max relative error {:.3e}", report.max_rel_err);
    }
    Ok(())
}
