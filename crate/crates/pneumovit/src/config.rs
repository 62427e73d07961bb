//! Experiment configuration: a TOML file with `[experiment]`, `[dataset]`,
//! `[train]` and optional `[model_overrides.<kind>]` tables. Every field
//! has a default, so an empty file is a valid (synthetic) configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pneumovit_core::data::ImbalancePreset;
use pneumovit_core::models::{ModelKind, ModelSpec};
use pneumovit_core::training::TrainConfig;
use pneumovit_core::Real;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub models: Vec<ModelKind>,
    pub seeds: Vec<u64>,
    pub fractions: Vec<Real>,
    pub out: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            models: ModelKind::ALL.to_vec(),
            seeds: vec![42, 123, 456],
            fractions: vec![1.0, 0.7, 0.5],
            out: PathBuf::from("results"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Generated in memory.
    Synth,
    /// `path/normal` and `path/pneumonia` image folders.
    Folder,
    /// A metadata CSV listing image paths, views and labels.
    Metadata,
    /// A decoded dataset cache file.
    Cache,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub source: Source,
    pub path: Option<PathBuf>,
    pub image_size: usize,
    pub n_per_class: usize,
    pub synth_seed: u64,
    pub test_frac: Real,
    pub split_seed: u64,
    /// Augmented copies of the minority class, as a fraction of its size.
    pub minority_growth: Real,
    pub imbalance: Option<ImbalancePreset>,
    /// Multiplies the preset counts (rounded, at least 1).
    pub imbalance_scale: Real,
    /// Explicit `[pneumonia, normal]` training counts; overrides the preset.
    pub counts: Option<[usize; 2]>,
    pub path_column: String,
    pub view_column: String,
    pub label_column: String,
    pub frontal_views: Vec<String>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: Source::Synth,
            path: None,
            image_size: 128,
            n_per_class: 200,
            synth_seed: 7,
            test_frac: 0.08,
            split_seed: 0,
            minority_growth: 0.0,
            imbalance: None,
            imbalance_scale: 1.0,
            counts: None,
            path_column: "path".into(),
            view_column: "view".into(),
            label_column: "label".into(),
            frontal_views: vec!["frontal".into(), "pa".into()],
        }
    }
}

impl DatasetSection {
    /// Requested `(pneumonia, normal)` training counts, if any.
    pub fn imbalance_counts(&self) -> Option<(usize, usize)> {
        if let Some([p, n]) = self.counts {
            return Some((p, n));
        }
        let scale = |c: usize| ((c as Real * self.imbalance_scale).round() as usize).max(1);
        self.imbalance.map(|p| {
            let (pos, neg) = p.counts();
            (scale(pos), scale(neg))
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub dataset: DatasetSection,
    pub train: TrainConfig,
    pub model_overrides: BTreeMap<ModelKind, ModelSpec>,
}

/// Named starting points selectable with `--preset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Balanced,
    Imbalanced(ImbalancePreset),
}

impl Preset {
    pub const NAMES: [&'static str; 5] = [
        "balanced",
        "imbalanced-text-i",
        "imbalanced-text-ii",
        "imbalanced-table-i",
        "imbalanced-table-ii",
    ];

    pub fn parse(s: &str) -> Option<Self> {
        if s == "balanced" {
            return Some(Preset::Balanced);
        }
        s.strip_prefix("imbalanced-")
            .and_then(ImbalancePreset::parse)
            .map(Preset::Imbalanced)
    }
}

impl ExperimentConfig {
    /// The small synthetic setup used when no file is given: 64×64 images,
    /// 48 per class, one data fraction and a short schedule.
    pub fn synth_preset() -> Self {
        let mut c = ExperimentConfig::default();
        c.dataset.image_size = 64;
        c.dataset.n_per_class = 48;
        c.dataset.test_frac = 0.2;
        c.experiment.fractions = vec![1.0];
        c.train = TrainConfig::default().with_epochs(6);
        c.train.augment = None;
        c
    }

    /// Applies a `--preset`. The imbalanced presets keep the reference ratios
    /// and, on synthetic data, shrink them to the generated pool.
    pub fn apply_preset(&mut self, preset: Preset) {
        match preset {
            Preset::Balanced => {
                self.dataset.imbalance = None;
                self.dataset.counts = None;
            }
            Preset::Imbalanced(p) => {
                self.dataset.imbalance = Some(p);
                self.dataset.counts = None;
                if self.dataset.source == Source::Synth {
                    let pool = self.dataset.n_per_class as Real * (1.0 - self.dataset.test_frac);
                    let (pos, neg) = p.counts();
                    self.dataset.imbalance_scale = (pool / pos.max(neg) as Real).min(1.0);
                }
            }
        }
    }

    pub fn from_toml(text: &str) -> AppResult<Self> {
        toml::from_str(text).map_err(|e| AppError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            AppError::Config(m) => AppError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// The architecture used for `kind`: the override if present, else the
    /// default spec at the configured image size.
    pub fn spec_for(&self, kind: ModelKind) -> ModelSpec {
        self.model_overrides.get(&kind).cloned().unwrap_or_else(|| {
            let s = self.dataset.image_size;
            ModelSpec::default_for(kind).with_input([s, s, 3])
        })
    }

    /// Checks every field that can be checked without loading data.
    pub fn validate(&self) -> AppResult<()> {
        let bad = |field: &str, detail: String| Err(AppError::Config(format!("{field}: {detail}")));
        let e = &self.experiment;
        if e.models.is_empty() {
            return bad("experiment.models", "must name at least one model".into());
        }
        if e.seeds.is_empty() {
            return bad("experiment.seeds", "must not be empty".into());
        }
        if e.fractions.is_empty() || e.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return bad(
                "experiment.fractions",
                format!("{:?} must be nonempty and in (0,1]", e.fractions),
            );
        }
        let d = &self.dataset;
        match (d.source, &d.path) {
            (Source::Synth, _) => {
                if d.n_per_class == 0 {
                    return bad("dataset.n_per_class", "must be >= 1".into());
                }
            }
            (_, None) => {
                return bad(
                    "dataset.path",
                    format!("required for source {:?}", d.source),
                )
            }
            (_, Some(p)) if !p.exists() => {
                return bad("dataset.path", format!("{} does not exist", p.display()))
            }
            _ => {}
        }
        if d.image_size < 16 {
            return bad(
                "dataset.image_size",
                format!("{} is below 16", d.image_size),
            );
        }
        if !(d.test_frac > 0.0 && d.test_frac < 1.0) {
            return bad(
                "dataset.test_frac",
                format!("{} outside (0,1)", d.test_frac),
            );
        }
        if !(d.minority_growth >= 0.0) {
            return bad(
                "dataset.minority_growth",
                format!("{} < 0", d.minority_growth),
            );
        }
        if !(d.imbalance_scale > 0.0) {
            return bad(
                "dataset.imbalance_scale",
                format!("{} must be > 0", d.imbalance_scale),
            );
        }
        if let Some([p, n]) = d.counts {
            if p == 0 || n == 0 {
                return bad(
                    "dataset.counts",
                    "both classes need at least one image".into(),
                );
            }
        }
        self.train
            .validate()
            .map_err(|err| AppError::Config(format!("train: {err}")))?;
        for &kind in &e.models {
            let spec = self.spec_for(kind);
            if spec.kind != kind {
                return bad(
                    &format!("model_overrides.{kind}"),
                    format!("spec declares kind {}", spec.kind),
                );
            }
            let [h, w, _] = spec.input_shape;
            if (h, w) != (d.image_size, d.image_size) {
                return bad(
                    &format!("model_overrides.{kind}"),
                    format!(
                        "input {h}x{w} differs from dataset.image_size {}",
                        d.image_size
                    ),
                );
            }
            spec.validate()
                .map_err(|err| AppError::Config(format!("model {kind}: {err}")))?;
        }
        Ok(())
    }
}
