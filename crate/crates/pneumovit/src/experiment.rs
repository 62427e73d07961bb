//! Dataset preparation and the (model × fraction × seed) run grid.

use std::path::{Path, PathBuf};
use std::time::Instant;

use pneumovit_core::data::{self, DatasetSplit, LabeledImage};
use pneumovit_core::metrics::{self, MetricsReport};
use pneumovit_core::models::{Model, ModelKind};
use pneumovit_core::training::{self, Clock};
use pneumovit_core::Real;

use crate::config::{ExperimentConfig, Source};
use crate::error::{AppError, AppResult};
use crate::formats;
use crate::images::{self, FilterRules};
use crate::report::{self, ResultRow, MEAN_SEED};

/// Wall-clock seconds since construction.
pub struct SystemClock(Instant);

impl SystemClock {
    pub fn new() -> Self {
        SystemClock(Instant::now())
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// All images named by the dataset section, at the configured size.
pub fn load_images(cfg: &ExperimentConfig) -> AppResult<Vec<LabeledImage>> {
    let d = &cfg.dataset;
    let size = d.image_size;
    let path = || d.path.clone().unwrap_or_default();
    let images = match d.source {
        Source::Synth => data::synth_dataset(d.n_per_class, size, d.synth_seed)
            .map_err(AppError::config_from_core)?,
        Source::Folder => images::load_folder(&path(), size)?,
        Source::Metadata => {
            let rules = FilterRules {
                path_column: d.path_column.clone(),
                view_column: d.view_column.clone(),
                label_column: d.label_column.clone(),
                frontal_views: d.frontal_views.clone(),
            };
            images::load_metadata(&path(), &rules, size)?
        }
        Source::Cache => formats::load_cache(&path())?,
    };
    if let Some(im) = images.iter().find(|im| im.hwc() != [size, size, 3]) {
        return Err(AppError::Data(format!(
            "{} has shape {:?}, expected [{size}, {size}, 3]",
            im.source_id,
            im.hwc()
        )));
    }
    Ok(images)
}

/// The fixed test split plus the training pool every run draws from. The
/// pool is cut down to the requested class counts, then the minority class
/// is grown with augmented copies.
pub fn prepare(cfg: &ExperimentConfig) -> AppResult<DatasetSplit> {
    let d = &cfg.dataset;
    let all = load_images(cfg)?;
    let mut split = data::stratified_split(&all, d.test_frac, 0.0, d.split_seed)
        .map_err(AppError::from_core)?;
    if split.test.is_empty() || data::class_counts(&split.test).contains(&0) {
        return Err(AppError::Data(format!(
            "test split of {} images lacks a class; add data or raise dataset.test_frac",
            split.test.len()
        )));
    }
    if let Some((pos, neg)) = d.imbalance_counts() {
        split.train = data::make_imbalanced(&split.train, pos, neg, d.split_seed)
            .map_err(AppError::from_core)?;
    }
    if d.minority_growth > 0.0 {
        let [neg, pos] = data::class_counts(&split.train);
        let minority = if pos < neg { 1 } else { 0 };
        let params = cfg.train.augment.unwrap_or_default();
        split.train = data::expand_minority(
            &split.train,
            minority,
            d.minority_growth,
            &params,
            d.split_seed,
        )
        .map_err(AppError::from_core)?;
    }
    Ok(split)
}

/// File stem shared by a run's weights, history and metrics.
pub fn run_stem(model: ModelKind, fraction: Real, seed: u64) -> String {
    format!("{model}-f{:03}-s{seed}", (fraction * 100.0).round() as u32)
}

pub fn weights_path(out: &Path, model: ModelKind, fraction: Real, seed: u64) -> PathBuf {
    out.join("weights")
        .join(format!("{}.hvwt", run_stem(model, fraction, seed)))
}

/// What a `train` invocation produced.
#[derive(Debug, Default)]
pub struct TrainSummary {
    pub rows: Vec<ResultRow>,
    pub weights: Vec<PathBuf>,
}

/// Runs every (model, fraction, seed) combination in order, rewriting
/// `results.csv` after each run so completed rows survive a later failure.
pub fn run_grid(cfg: &ExperimentConfig, clock: &dyn Clock) -> AppResult<TrainSummary> {
    cfg.validate()?;
    let out = &cfg.experiment.out;
    std::fs::create_dir_all(out).map_err(|e| AppError::io(out, e))?;
    report::write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let split = prepare(cfg)?;
    let [neg, pos] = data::class_counts(&split.train);
    log::info!(
        "train pool: {} images ({pos} pneumonia, {neg} normal); test: {}",
        split.train.len(),
        split.test.len()
    );
    let mut summary = TrainSummary::default();
    let save = |rows: &[ResultRow]| -> AppResult<()> {
        report::write_csv(&out.join("results.csv"), rows)?;
        report::write_json(&out.join("results.json"), rows)
    };
    for &kind in &cfg.experiment.models {
        let spec = cfg.spec_for(kind);
        for &fraction in &cfg.experiment.fractions {
            let mut reports: Vec<MetricsReport> = Vec::new();
            for &seed in &cfg.experiment.seeds {
                let mut tc = cfg.train.clone();
                tc.seed = seed;
                tc.data_fraction = fraction;
                log::info!(
                    "training {kind} on {:.0}% with seed {seed}",
                    fraction * 100.0
                );
                let outcome =
                    training::run(&spec, &split, &tc, clock).map_err(AppError::from_core)?;
                let stem = run_stem(kind, fraction, seed);
                let wpath = weights_path(out, kind, fraction, seed);
                formats::save_weights(&wpath, &outcome.model)?;
                report::write_history(
                    &out.join("history").join(format!("{stem}.csv")),
                    &outcome.history,
                )?;
                report::write_json(
                    &out.join("metrics").join(format!("{stem}.json")),
                    &outcome.report,
                )?;
                log::info!(
                    "{stem}: accuracy {:.4} f1 {:.4} in {:.1}s ({} epochs)",
                    outcome.report.accuracy,
                    outcome.report.f1,
                    outcome.history.total_seconds,
                    outcome.history.epochs.len()
                );
                summary.rows.push(ResultRow::new(
                    kind.name(),
                    fraction,
                    seed.to_string(),
                    &outcome.report,
                    report::now_timestamp(),
                ));
                summary.weights.push(wpath);
                reports.push(outcome.report);
                save(&summary.rows)?;
            }
            let mean = metrics::aggregate(&reports).map_err(AppError::from_core)?;
            summary.rows.push(ResultRow::new(
                kind.name(),
                fraction,
                MEAN_SEED.into(),
                &mean,
                report::now_timestamp(),
            ));
            save(&summary.rows)?;
        }
    }
    report::write_text(
        &out.join("results.txt"),
        &report::results_table(&summary.rows),
    )?;
    Ok(summary)
}

/// Metrics of stored weights on `images`.
pub fn evaluate_weights(
    model: &Model,
    images: &[LabeledImage],
    threshold: Real,
    chunk: usize,
) -> AppResult<MetricsReport> {
    if images.is_empty() {
        return Err(AppError::Data("no images to evaluate".into()));
    }
    let [h, w, c] = model.spec.input_shape;
    if images[0].hwc() != [h, w, c] {
        return Err(AppError::Data(format!(
            "weights expect {h}x{w}x{c} input, data is {:?}",
            images[0].hwc()
        )));
    }
    training::evaluate(model, images, threshold, chunk).map_err(AppError::from_core)
}
