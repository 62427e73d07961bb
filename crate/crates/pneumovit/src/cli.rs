//! Command-line verbs. Exit codes: 0 success, 2 configuration, 3 data,
//! 4 runtime or I/O.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pneumovit_core::analysis;
use pneumovit_core::data;
use pneumovit_core::models::{ModelKind, ModelSpec, DECISION_THRESHOLD};
use pneumovit_core::Real;

use crate::config::{ExperimentConfig, Preset};
use crate::error::{AppError, AppResult};
use crate::experiment::{self, SystemClock};
use crate::formats;
use crate::images;
use crate::report::{self, ResultRow};

#[derive(Debug, Parser)]
#[command(
    name = "pneumovit",
    version,
    about = "Train, evaluate and analyze CNN, ViT and hybrid chest X-ray classifiers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every (model, fraction, seed) combination and write results.
    Train(TrainArgs),
    /// Score saved weights on the configured test split or an image folder.
    Evaluate(EvaluateArgs),
    /// Complexity, power-law and generalization-bound reports.
    Analyze(AnalyzeArgs),
    /// Write the synthetic dataset as class folders.
    SynthData(SynthArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML experiment file; without it the small synthetic preset is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `experiment.out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// balanced | imbalanced-text-i | imbalanced-text-ii | imbalanced-table-i | imbalanced-table-ii
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Run only this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run only this data fraction.
    #[arg(long)]
    pub fraction: Option<Real>,
    /// Run only this model: cnn | vit | hybrid.
    #[arg(long)]
    pub model: Option<String>,
    /// Override `train.max_epochs`, rescaling the stage boundaries.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Weights file written by `train`.
    #[arg(long)]
    pub weights: PathBuf,
    /// Image folder with `normal/` and `pneumonia/`; defaults to the
    /// configured test split.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = DECISION_THRESHOLD)]
    pub threshold: Real,
    /// Require the weights to match the configured spec of this model.
    #[arg(long)]
    pub model: Option<String>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Experiment file whose model specs feed the complexity table; the
    /// default specs at 128×128 otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "analysis")]
    pub out: PathBuf,
    /// CSV with `model,fraction,seconds` (or a results.csv); the built-in reference
    /// timings otherwise.
    #[arg(long)]
    pub timings: Option<PathBuf>,
    /// Capacity proxy for the generalization bound; the ViT parameter count
    /// when omitted.
    #[arg(long)]
    pub vc: Option<Real>,
    #[arg(long, default_value_t = 0.05)]
    pub delta: Real,
    #[arg(long, default_value_t = 10_000)]
    pub n: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Images per class.
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Also write a decoded dataset cache to this file.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

fn parse_model(s: &str) -> AppResult<ModelKind> {
    ModelKind::parse(s)
        .ok_or_else(|| AppError::Config(format!("--model: unknown model '{s}' (cnn, vit, hybrid)")))
}

/// Reads the file (or the synthetic preset) and applies the shared flags.
pub fn load_config(common: &Common) -> AppResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::synth_preset(),
    };
    if let Some(name) = &common.preset {
        let preset = Preset::parse(name).ok_or_else(|| {
            AppError::Config(format!(
                "--preset: unknown preset '{name}' ({})",
                Preset::NAMES.join(", ")
            ))
        })?;
        cfg.apply_preset(preset);
    }
    if let Some(out) = &common.out {
        cfg.experiment.out = out.clone();
    }
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs) -> AppResult<Vec<ResultRow>> {
    let mut cfg = load_config(&args.common)?;
    if let Some(s) = args.seed {
        cfg.experiment.seeds = vec![s];
    }
    if let Some(f) = args.fraction {
        cfg.experiment.fractions = vec![f];
    }
    if let Some(m) = &args.model {
        cfg.experiment.models = vec![parse_model(m)?];
    }
    if let Some(e) = args.epochs {
        cfg.train = cfg.train.clone().with_epochs(e);
    }
    let summary = experiment::run_grid(&cfg, &SystemClock::new())?;
    print!("{}", report::results_table(&summary.rows));
    println!("results written to {}", cfg.experiment.out.display());
    Ok(summary.rows)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> AppResult<ResultRow> {
    let cfg = load_config(&args.common)?;
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(AppError::Config(format!(
            "--threshold {} outside [0,1]",
            args.threshold
        )));
    }
    let expected: Option<ModelSpec> = match &args.model {
        Some(m) => Some(cfg.spec_for(parse_model(m)?)),
        None => None,
    };
    let model = formats::load_model(&args.weights, expected.as_ref())?;
    let images = match &args.data {
        Some(dir) => images::load_folder(dir, model.spec.input_shape[0])?,
        None => {
            cfg.validate()?;
            experiment::prepare(&cfg)?.test
        }
    };
    let report =
        experiment::evaluate_weights(&model, &images, args.threshold, cfg.train.eval_batch)?;
    let row = ResultRow::new(
        model.kind().name(),
        1.0,
        "-".into(),
        &report,
        report::now_timestamp(),
    );
    let stem = args
        .weights
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "weights".into());
    let out = cfg.experiment.out.join("evaluation");
    report::write_csv(&out.join(format!("{stem}.csv")), std::slice::from_ref(&row))?;
    report::write_json(&out.join(format!("{stem}.json")), &report)?;
    print!("{}", report::results_table(std::slice::from_ref(&row)));
    Ok(row)
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> AppResult<()> {
    let specs: Vec<ModelSpec> = match &args.config {
        Some(p) => {
            let cfg = ExperimentConfig::load(p)?;
            ModelKind::ALL.iter().map(|&k| cfg.spec_for(k)).collect()
        }
        None => ModelKind::ALL
            .iter()
            .map(|&k| ModelSpec::default_for(k))
            .collect(),
    };
    let table = analysis::complexity_table(&specs).map_err(AppError::config_from_core)?;
    let timings = match &args.timings {
        Some(p) => report::read_timings(p)?,
        None => analysis::reference_timings(),
    };
    let steps = analysis::scaling_table(&timings).map_err(|e| AppError::Data(e.to_string()))?;
    let vc = match args.vc {
        Some(v) => v,
        None => {
            let vit = specs.iter().find(|s| s.kind == ModelKind::Vit).unwrap();
            vit.parameter_count().map_err(AppError::config_from_core)? as Real
        }
    };
    let bound = analysis::generalization_bound(vc, args.delta, args.n)
        .map_err(AppError::config_from_core)?;

    let out = &args.out;
    report::write_csv(&out.join("complexity.csv"), &table)?;
    let ctext = report::complexity_text(&table);
    report::write_text(&out.join("complexity.txt"), &ctext)?;
    report::write_powerlaw_csv(&out.join("powerlaw.csv"), &steps)?;
    let ptext = report::powerlaw_text(&steps);
    report::write_text(&out.join("powerlaw.txt"), &ptext)?;
    report::write_json(&out.join("bound.json"), &bound)?;
    println!("Sequence length and complexity\n{ctext}");
    println!("Power-law exponents\n{ptext}");
    print!("{}", report::bound_text(&bound));
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> AppResult<usize> {
    let images =
        data::synth_dataset(args.n, args.size, args.seed).map_err(AppError::config_from_core)?;
    images::write_folder(&args.out, &images)?;
    if let Some(c) = &args.cache {
        formats::save_cache(c, &images)?;
    }
    println!("wrote {} images to {}", images.len(), args.out.display());
    Ok(images.len())
}

pub fn run(cli: &Cli) -> AppResult<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a).map(drop),
        Command::Evaluate(a) => cmd_evaluate(a).map(drop),
        Command::Analyze(a) => cmd_analyze(a),
        Command::SynthData(a) => cmd_synth(a).map(drop),
    }
}
