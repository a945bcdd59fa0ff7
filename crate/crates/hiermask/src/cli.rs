//! Command-line front end: dataset generation, training, inference,
//! evaluation and the query-representation ablation.
//!
//! Every subcommand is deterministic for a fixed seed and configuration —
//! there is no other mode — and embeds enough provenance (hashes, config
//! echoes) in its outputs to reproduce the run. Relative output paths
//! resolve against the `HIERMASK_OUT` environment variable when it is set.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or file
//! error, 4 numeric divergence.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::caseio::{resolve_out_path, Manifest};
use crate::error::{Error, Result};
use crate::eval::{evaluate_predictions, run_ablation, save_report_charts};
use crate::infer::{file_sha256, predict_split, InstanceRules, PredictionSet, SlidingOptions};
use crate::model::{load_checkpoint, RepresentationMode};
use crate::phantom::{make_dataset, PhantomSpec};
use crate::taxonomy::{Taxonomy, TaxonomySpec};
use crate::train::{train, TrainConfig};
use crate::volume::Dims;

#[derive(Debug, Parser)]
#[command(
    name = "hiermask",
    version,
    about = "Joint tumor detection, segmentation and diagnosis on synthetic 3D phantoms"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset with a manifest.
    Gen(GenArgs),
    /// Train a model on one dataset split.
    Train(TrainArgs),
    /// Predict one dataset split with a trained checkpoint.
    Infer(InferArgs),
    /// Evaluate saved predictions against ground truth.
    Eval(EvalArgs),
    /// Train and evaluate every query representation on identical data.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of cases to generate.
    #[arg(long)]
    pub n: usize,
    /// Base seed; case `i` derives its own seed from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Taxonomy preset: two-organ, four-organ or eight-organ.
    #[arg(long, default_value = "four-organ")]
    pub taxonomy: String,
    /// Phantom specification JSON; generator defaults when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Split layout as name=fraction pairs.
    #[arg(long, default_value = "train=0.8,test=0.2")]
    pub splits: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Output directory for the checkpoint and loss trace.
    #[arg(long)]
    pub out: PathBuf,
    /// Training configuration JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Query representation: hierarchy, parallel or plain.
    #[arg(long, value_enum)]
    pub mode: Option<RepresentationMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training patch extent as "z,y,x".
    #[arg(long)]
    pub patch: Option<String>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Trained checkpoint file.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for label maps and predictions.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Window extent as "z,y,x"; defaults to the checkpoint's training
    /// patch.
    #[arg(long)]
    pub window: Option<String>,
    /// Window stride as a fraction of the window.
    #[arg(long, default_value_t = 0.5)]
    pub step_frac: f64,
    /// Gaussian weight σ as a fraction of the half-window.
    #[arg(long, default_value_t = 0.25)]
    pub sigma_frac: f64,
    /// Weight overlapping windows uniformly instead of with a Gaussian.
    #[arg(long)]
    pub no_gaussian: bool,
    /// Skip flip test-time augmentation.
    #[arg(long)]
    pub no_tta: bool,
    /// Component connectivity, 6 or 26.
    #[arg(long)]
    pub connectivity: Option<u8>,
    /// Minimum instance size in voxels; defaults to a fixed physical
    /// volume rescaled to the dataset spacing.
    #[arg(long)]
    pub min_voxels: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Prediction directory containing predictions.json.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Output directory for report.json (and charts).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub connectivity: Option<u8>,
    #[arg(long)]
    pub min_voxels: Option<usize>,
    /// Also emit PNG bar charts of the headline metrics.
    #[arg(long)]
    pub charts: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "train")]
    pub train_split: String,
    #[arg(long, default_value = "test")]
    pub eval_split: String,
    /// Output directory; each mode gets a subdirectory.
    #[arg(long)]
    pub out: PathBuf,
    /// Training configuration JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated modes; defaults to all three.
    #[arg(long, default_value = "plain,parallel,hierarchy")]
    pub modes: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub connectivity: Option<u8>,
    #[arg(long)]
    pub min_voxels: Option<usize>,
    /// Skip flip test-time augmentation during the evaluation pass.
    #[arg(long)]
    pub no_tta: bool,
}

/// Parse "z,y,x" into dims.
pub fn parse_dims(text: &str) -> Result<Dims> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("expected three comma-separated dims, got {text:?}")));
    }
    let mut dims = [0usize; 3];
    for (slot, part) in dims.iter_mut().zip(parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad dimension {part:?} in {text:?}")))?;
    }
    Ok(dims)
}

/// Parse "name=frac,name=frac" into a split layout.
pub fn parse_splits(text: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let Some((name, frac)) = part.split_once('=') else {
            return Err(Error::Config(format!("split {part:?} is not name=fraction")));
        };
        let frac: f64 = frac
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad fraction in split {part:?}")))?;
        out.push((name.trim().to_string(), frac));
    }
    Ok(out)
}

/// Parse a comma-separated mode list.
pub fn parse_modes(text: &str) -> Result<Vec<RepresentationMode>> {
    text.split(',')
        .map(|part| match part.trim() {
            "hierarchy" => Ok(RepresentationMode::Hierarchy),
            "parallel" => Ok(RepresentationMode::Parallel),
            "plain" => Ok(RepresentationMode::Plain),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected hierarchy, parallel or plain)"
            ))),
        })
        .collect()
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let bytes = crate::util::read_bytes(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Config(format!("{what} {} does not parse: {e}", path.display())))
}

fn train_config_from(
    config: &Option<PathBuf>,
    mode: Option<RepresentationMode>,
    epochs: Option<usize>,
    steps_per_epoch: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    seed: Option<u64>,
    patch: &Option<String>,
) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match config {
        Some(path) => load_json(path, "training config")?,
        None => TrainConfig::default(),
    };
    if let Some(mode) = mode {
        cfg.model.mode = mode;
    }
    if let Some(epochs) = epochs {
        cfg.epochs = epochs;
    }
    if let Some(steps) = steps_per_epoch {
        cfg.steps_per_epoch = steps;
    }
    if let Some(batch) = batch_size {
        cfg.batch_size = batch;
    }
    if let Some(lr) = learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(patch) = patch {
        cfg.patch = parse_dims(patch)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn instance_rules(
    manifest: &Manifest,
    connectivity: Option<u8>,
    min_voxels: Option<usize>,
) -> Result<InstanceRules> {
    let mut rules = InstanceRules::for_spacing(manifest.spacing);
    if let Some(c) = connectivity {
        rules.connectivity = c;
    }
    if let Some(m) = min_voxels {
        rules.min_voxels = m;
    }
    rules.validate()?;
    Ok(rules)
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let spec: PhantomSpec = match &args.spec {
        Some(path) => load_json(path, "phantom spec")?,
        None => PhantomSpec::default(),
    };
    let taxonomy = Taxonomy::new(TaxonomySpec::preset(&args.taxonomy)?)?;
    let splits = parse_splits(&args.splits)?;
    let out = resolve_out_path(&args.out);
    let manifest = make_dataset(&out, &spec, &taxonomy, args.n, args.seed, &splits)?;
    println!("dataset: {}", out.display());
    println!("manifest hash: {}", manifest.hash_hex()?);
    for (name, _) in &splits {
        println!("  {name}: {} cases", manifest.split_cases(name).len());
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let config = train_config_from(
        &args.config,
        args.mode,
        args.epochs,
        args.steps_per_epoch,
        args.batch_size,
        args.learning_rate,
        args.seed,
        &args.patch,
    )?;
    let manifest = Manifest::load(&args.data.join("manifest.json"))?;
    let out = resolve_out_path(&args.out);
    let outcome = train(&args.data, &manifest, &args.split, &config, &out)?;
    let last = outcome.trace.last().expect("training produces at least one step");
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    println!("checkpoint hash: {}", file_sha256(&outcome.checkpoint_path)?);
    println!("trace: {}", outcome.trace_path.display());
    println!("final loss: {:.6} after {} steps", last.total, outcome.trace.len());
    Ok(())
}

fn sliding_options(
    window: Dims,
    step_frac: f64,
    sigma_frac: f64,
    no_gaussian: bool,
    no_tta: bool,
) -> SlidingOptions {
    SlidingOptions {
        window,
        step_frac,
        sigma_frac,
        gaussian: !no_gaussian,
        tta: !no_tta,
    }
}

fn cmd_infer(args: &InferArgs) -> Result<()> {
    let manifest = Manifest::load(&args.data.join("manifest.json"))?;
    let (model, train_patch) = load_checkpoint(&args.checkpoint)?;
    let window = match &args.window {
        Some(text) => parse_dims(text)?,
        None => train_patch.ok_or_else(|| {
            Error::Config(
                "checkpoint does not record a training patch; pass --window".to_string(),
            )
        })?,
    };
    let options =
        sliding_options(window, args.step_frac, args.sigma_frac, args.no_gaussian, args.no_tta);
    let rules = instance_rules(&manifest, args.connectivity, args.min_voxels)?;
    let out = resolve_out_path(&args.out);
    let checkpoint_hash = file_sha256(&args.checkpoint)?;
    let set = predict_split(
        &args.data,
        &manifest,
        &args.split,
        &model,
        &checkpoint_hash,
        &options,
        &rules,
        &out,
    )?;
    println!("predictions: {}", out.join("predictions.json").display());
    println!("cases predicted: {}", set.cases.len());
    let instances: usize = set.cases.iter().map(|c| c.instances.len()).sum();
    println!("instances found: {instances}");
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let manifest = Manifest::load(&args.data.join("manifest.json"))?;
    let predictions = PredictionSet::load(&args.predictions.join("predictions.json"))?;
    let rules = instance_rules(&manifest, args.connectivity, args.min_voxels)?;
    let report = evaluate_predictions(
        &args.data,
        &manifest,
        &args.split,
        &args.predictions,
        &predictions,
        &rules,
    )?;
    let out = resolve_out_path(&args.out);
    let report_path = out.join("report.json");
    report.save(&report_path)?;
    println!("report: {}", report_path.display());
    if args.charts {
        for path in save_report_charts(&report, &out)? {
            println!("chart: {}", path.display());
        }
    }
    for line in report.summary_lines() {
        println!("{line}");
    }
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let config = train_config_from(
        &args.config,
        None,
        args.epochs,
        args.steps_per_epoch,
        None,
        None,
        args.seed,
        &None,
    )?;
    let modes = parse_modes(&args.modes)?;
    let manifest = Manifest::load(&args.data.join("manifest.json"))?;
    let rules = instance_rules(&manifest, args.connectivity, args.min_voxels)?;
    let options = sliding_options(config.patch, 0.5, 0.25, false, args.no_tta);
    let out = resolve_out_path(&args.out);
    let report = run_ablation(
        &args.data,
        &manifest,
        &args.train_split,
        &args.eval_split,
        &config,
        &options,
        &rules,
        &modes,
        &out,
    )?;
    println!("ablation report: {}", out.join("ablation.json").display());
    print!("{}", report.render_table());
    Ok(())
}

/// Dispatch a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_parsing() {
        assert_eq!(parse_dims("16,32,32").unwrap(), [16, 32, 32]);
        assert_eq!(parse_dims(" 8 , 8 , 8 ").unwrap(), [8, 8, 8]);
        assert!(parse_dims("16,32").is_err());
        assert!(parse_dims("a,b,c").is_err());
        assert_eq!(parse_dims("x").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn splits_parsing() {
        assert_eq!(
            parse_splits("train=0.8,test=0.2").unwrap(),
            vec![("train".to_string(), 0.8), ("test".to_string(), 0.2)]
        );
        assert_eq!(parse_splits("all=1").unwrap(), vec![("all".to_string(), 1.0)]);
        assert!(parse_splits("train").is_err());
        assert!(parse_splits("train=x").is_err());
    }

    #[test]
    fn modes_parsing() {
        assert_eq!(
            parse_modes("plain,parallel,hierarchy").unwrap(),
            vec![
                RepresentationMode::Plain,
                RepresentationMode::Parallel,
                RepresentationMode::Hierarchy
            ]
        );
        assert_eq!(parse_modes("hierarchy").unwrap(), vec![RepresentationMode::Hierarchy]);
        let err = parse_modes("plain,bogus").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn command_lines_parse() {
        let cli = Cli::try_parse_from([
            "hiermask", "gen", "--out", "d", "--n", "10", "--seed", "3",
        ])
        .unwrap();
        match cli.command {
            Command::Gen(args) => {
                assert_eq!(args.n, 10);
                assert_eq!(args.seed, 3);
                assert_eq!(args.taxonomy, "four-organ");
            }
            other => panic!("wrong command {other:?}"),
        }
        let cli = Cli::try_parse_from([
            "hiermask", "train", "--data", "d", "--out", "o", "--mode", "plain",
        ])
        .unwrap();
        match cli.command {
            Command::Train(args) => assert_eq!(args.mode, Some(RepresentationMode::Plain)),
            other => panic!("wrong command {other:?}"),
        }
        // Invalid mode and unknown flags are usage errors at parse time.
        assert!(Cli::try_parse_from([
            "hiermask", "train", "--data", "d", "--out", "o", "--mode", "bogus",
        ])
        .is_err());
        assert!(Cli::try_parse_from(["hiermask", "gen", "--frobnicate"]).is_err());
        assert!(Cli::try_parse_from(["hiermask"]).is_err());
    }

    #[test]
    fn train_config_overrides_apply() {
        let cfg = train_config_from(
            &None,
            Some(RepresentationMode::Parallel),
            Some(2),
            Some(7),
            Some(1),
            Some(0.001),
            Some(9),
            &Some("8,16,16".to_string()),
        )
        .unwrap();
        assert_eq!(cfg.model.mode, RepresentationMode::Parallel);
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.steps_per_epoch, 7);
        assert_eq!(cfg.batch_size, 1);
        assert_eq!(cfg.learning_rate, 0.001);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.patch, [8, 16, 16]);
        // Overrides are validated: a non-multiple-of-8 patch is rejected.
        let err = train_config_from(
            &None,
            None,
            None,
            None,
            None,
            None,
            None,
            &Some("7,16,16".to_string()),
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn config_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let mut cfg = TrainConfig::default();
        cfg.epochs = 1;
        cfg.steps_per_epoch = 2;
        std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
        let loaded = train_config_from(
            &Some(path.clone()),
            None,
            None,
            None,
            None,
            None,
            None,
            &None,
        )
        .unwrap();
        assert_eq!(loaded, cfg);
        // Unknown keys in a config file are rejected.
        std::fs::write(&path, br#"{"momentum": 0.9}"#).unwrap();
        let err = train_config_from(&Some(path), None, None, None, None, None, None, &None)
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
