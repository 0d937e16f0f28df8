//! Experiment configuration, evaluation and result export.

pub mod eval;
pub mod results;
pub mod run;
pub mod stats;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use eval::{
    conjugation_accuracy, perplexity_factor, Condition, Evaluator, Intervention, ScopeKind, SideEffectEvaluator,
};
pub use results::{Aggregate, ExperimentResult, ResultRow, RowFilter, Status};
pub use run::{best_flipping_layer, run_experiment, run_with_models, Workbench};
pub use stats::{confidence_interval, ConfidenceInterval};

use crate::error::{Error, Result};
use crate::mlm::{ModelConfig, TrainConfig};
use crate::probe::ProbeConfig;
use crate::types::PositionRole;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    LayerSweep,
    HyperGrid,
    RedundancyBreakdown,
    UpperLayerVerbProbe,
    SideEffectPerplexity,
    SeedRobustness,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::LayerSweep,
        ExperimentKind::HyperGrid,
        ExperimentKind::RedundancyBreakdown,
        ExperimentKind::UpperLayerVerbProbe,
        ExperimentKind::SideEffectPerplexity,
        ExperimentKind::SeedRobustness,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::LayerSweep => "layer_sweep",
            ExperimentKind::HyperGrid => "hyper_grid",
            ExperimentKind::RedundancyBreakdown => "redundancy_breakdown",
            ExperimentKind::UpperLayerVerbProbe => "upper_layer_verb_probe",
            ExperimentKind::SideEffectPerplexity => "side_effect_perplexity",
            ExperimentKind::SeedRobustness => "seed_robustness",
        }
    }

    /// Scopes run when the configuration does not list any.
    pub fn default_scopes(self) -> Vec<ScopeKind> {
        match self {
            ExperimentKind::LayerSweep | ExperimentKind::SeedRobustness => {
                vec![ScopeKind::Global, ScopeKind::Subject]
            }
            ExperimentKind::HyperGrid | ExperimentKind::UpperLayerVerbProbe => vec![ScopeKind::Global],
            ExperimentKind::RedundancyBreakdown => {
                vec![ScopeKind::Global, ScopeKind::Subject, ScopeKind::SubjectVerb]
            }
            ExperimentKind::SideEffectPerplexity => vec![ScopeKind::NumberNeutral],
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_").to_ascii_lowercase();
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown experiment {s:?}")))
    }
}

/// Architecture of the toy encoder; the vocabulary size and seed are filled
/// in per model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub pre_norm: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let c = ModelConfig::new(0, 0);
        Self {
            num_layers: c.num_layers,
            hidden_dim: c.hidden_dim,
            num_heads: c.num_heads,
            ffn_dim: c.ffn_dim,
            max_len: c.max_len,
            dropout: c.dropout,
            pre_norm: c.pre_norm,
        }
    }
}

impl ModelSpec {
    pub fn config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            vocab_size,
            max_len: self.max_len,
            dropout: self.dropout,
            pre_norm: self.pre_norm,
            seed,
        }
    }
}

/// Corpus sizes. INLP sets are drawn evenly from the eight template and
/// number conditions, so their sizes must be multiples of 8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_per_condition: usize,
    pub test_per_condition: usize,
    pub inlp_train_size: usize,
    pub inlp_heldout_size: usize,
    /// Test sentences used for the perplexity measurement.
    pub side_effect_sentences: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_per_condition: 4000,
            test_per_condition: 125,
            inlp_train_size: 4000,
            inlp_heldout_size: 1000,
            side_effect_sentences: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// JSON lexicon; the built-in lexicon when absent.
    pub lexicon: Option<PathBuf>,
    pub checkpoints: PathBuf,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            lexicon: None,
            checkpoints: PathBuf::from("checkpoints"),
            out: PathBuf::from("results"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub alpha_grid: Vec<f64>,
    pub k_grid: Vec<usize>,
    pub trials: usize,
    /// Scopes to run; the experiment's defaults when empty.
    pub scopes: Vec<ScopeKind>,
    pub probe_role: PositionRole,
    /// Layers to intervene on; every layer when empty.
    pub layers: Vec<usize>,
    /// Seed for corpora and INLP resampling.
    pub seed: u64,
    /// Model seeds; all of them are used by seed robustness, the first one
    /// by every other experiment.
    pub model_seeds: Vec<u64>,
    pub include_delimiters: bool,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub probe: ProbeConfig,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::LayerSweep,
            alpha_grid: vec![2.0, 3.0, 5.0],
            k_grid: vec![2, 4, 8],
            trials: 5,
            scopes: Vec::new(),
            probe_role: PositionRole::Subject,
            layers: Vec::new(),
            seed: 0,
            model_seeds: vec![0],
            include_delimiters: true,
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            probe: ProbeConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_grid.is_empty() || self.k_grid.is_empty() {
            return Err(Error::InvalidArgument("alpha and k grids must be non-empty".into()));
        }
        if let Some(a) = self.alpha_grid.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be finite and >= 0, got {a}"
            )));
        }
        if self.k_grid.contains(&0) {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be at least 1".into()));
        }
        if self.model_seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one model seed is required".into()));
        }
        if let Some(&l) = self.layers.iter().find(|&&l| l > self.model.num_layers) {
            return Err(Error::InvalidArgument(format!(
                "layer {l} exceeds model depth {}",
                self.model.num_layers
            )));
        }
        let d = &self.data;
        if d.inlp_train_size == 0
            || !d.inlp_train_size.is_multiple_of(8)
            || d.inlp_heldout_size == 0
            || !d.inlp_heldout_size.is_multiple_of(8)
        {
            return Err(Error::InvalidArgument(
                "INLP set sizes must be positive multiples of 8".into(),
            ));
        }
        if d.train_per_condition == 0 || d.test_per_condition == 0 || d.side_effect_sentences == 0 {
            return Err(Error::InvalidArgument("corpus sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn scopes(&self) -> Vec<ScopeKind> {
        if self.scopes.is_empty() {
            self.experiment.default_scopes()
        } else {
            self.scopes.clone()
        }
    }

    pub fn layers(&self) -> Vec<usize> {
        if self.layers.is_empty() {
            (0..=self.model.num_layers).collect()
        } else {
            self.layers.clone()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_grid() {
        let c = ExperimentConfig::default();
        assert_eq!(c.alpha_grid, vec![2.0, 3.0, 5.0]);
        assert_eq!(c.k_grid, vec![2, 4, 8]);
        assert_eq!(c.trials, 5);
        assert!(c.include_delimiters);
        assert_eq!(c.layers(), (0..=6).collect::<Vec<_>>());
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = ExperimentConfig {
            experiment: ExperimentKind::HyperGrid,
            trials: 3,
            ..Default::default()
        };
        let text = c.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);
        let partial =
            "experiment = \"redundancy_breakdown\"\nscopes = [\"subject\", \"subject_verb\"]\n[train]\nsteps = 10\n";
        let p = ExperimentConfig::from_toml_str(partial).unwrap();
        assert_eq!(p.experiment, ExperimentKind::RedundancyBreakdown);
        assert_eq!(p.scopes(), vec![ScopeKind::Subject, ScopeKind::SubjectVerb]);
        assert_eq!(p.train.steps, 10);
        assert_eq!(p.k_grid, vec![2, 4, 8]);
    }

    #[test]
    fn validation() {
        for bad in [
            ExperimentConfig {
                alpha_grid: vec![],
                ..Default::default()
            },
            ExperimentConfig {
                k_grid: vec![0],
                ..Default::default()
            },
            ExperimentConfig {
                trials: 0,
                ..Default::default()
            },
            ExperimentConfig {
                alpha_grid: vec![-1.0],
                ..Default::default()
            },
            ExperimentConfig {
                layers: vec![7],
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        let mut c = ExperimentConfig::default();
        c.data.inlp_train_size = 100;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kinds_parse() {
        for k in ExperimentKind::ALL {
            assert_eq!(k.as_str().parse::<ExperimentKind>().unwrap(), k);
        }
        assert_eq!(
            "layer-sweep".parse::<ExperimentKind>().unwrap(),
            ExperimentKind::LayerSweep
        );
        for s in ScopeKind::ALL {
            assert_eq!(s.as_str().parse::<ScopeKind>().unwrap(), s);
        }
    }
}
