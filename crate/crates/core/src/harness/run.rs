//! Experiment runner.

use std::path::PathBuf;

use rayon::prelude::*;

use super::eval::{Condition, Evaluator, Intervention, ScopeKind, SideEffectEvaluator};
use super::results::{ExperimentResult, ResultRow, Status, CSV_VERSION};
use super::{ExperimentConfig, ExperimentKind};
use crate::corpus::{generate_all, AgreementSentence, Lexicon, NounPool, Vocabulary};
use crate::error::{Error, Result};
use crate::inlp::{find_number_subspace, InlpReport};
use crate::mlm::train::train_mlm_with_progress;
use crate::mlm::{extract_hidden_layers, LossPoint, TrainReport, Transformer};
use crate::probe::{LabeledVectorSet, ProbeConfig};
use crate::subspace::{random_subspace, NumberSubspace};
use crate::types::PositionRole;

const TEST_SALT: u64 = 0x7E57;
const INLP_TRAIN_SALT: u64 = 0x1A1B;
const INLP_HELDOUT_SALT: u64 = 0x4E1D;
const RANDOM_SUBSPACE_SALT: u64 = 0xAB5E;

/// Outcome of INLP for one layer; the error text is kept for failed cells.
pub type SubspaceOutcome = std::result::Result<(NumberSubspace, InlpReport), String>;

/// Lowest layer with the smallest accuracy.
pub fn best_flipping_layer(accuracies: &[(usize, f64)]) -> Option<usize> {
    accuracies
        .iter()
        .filter(|(_, a)| a.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(l, _)| *l)
}

/// Lexicon, vocabulary and test set shared by every experiment of a config.
pub struct Workbench {
    pub config: ExperimentConfig,
    pub lexicon: Lexicon,
    pub vocab: Vocabulary,
    pub test: Vec<AgreementSentence>,
}

impl Workbench {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let lexicon = match &config.paths.lexicon {
            Some(p) => Lexicon::load(p)?,
            None => Lexicon::default(),
        };
        let vocab = Vocabulary::new(&lexicon)?;
        let test = generate_all(
            &lexicon,
            &NounPool::test(&lexicon),
            config.seed ^ TEST_SALT,
            config.data.test_per_condition,
        )?;
        Ok(Self {
            config,
            lexicon,
            vocab,
            test,
        })
    }

    pub fn training_corpus(&self, model_seed: u64) -> Result<Vec<AgreementSentence>> {
        generate_all(
            &self.lexicon,
            &NounPool::train(&self.lexicon),
            model_seed,
            self.config.data.train_per_condition,
        )
    }

    pub fn train_model(&self, model_seed: u64) -> Result<(Transformer<f32>, TrainReport)> {
        self.train_model_with_progress(model_seed, |_| {})
    }

    pub fn train_model_with_progress(
        &self,
        model_seed: u64,
        progress: impl FnMut(LossPoint),
    ) -> Result<(Transformer<f32>, TrainReport)> {
        let corpus = self.training_corpus(model_seed)?;
        let mut model = Transformer::<f32>::new(self.config.model.config(self.vocab.len(), model_seed))?;
        let train = crate::mlm::TrainConfig {
            seed: model_seed,
            ..self.config.train.clone()
        };
        let report = train_mlm_with_progress(&mut model, &corpus, &self.vocab, &train, progress)?;
        Ok((model, report))
    }

    pub fn checkpoint_path(&self, model_seed: u64) -> PathBuf {
        self.config.paths.checkpoints.join(format!("model-{model_seed}.tmlm"))
    }

    pub fn load_model(&self, model_seed: u64) -> Result<Transformer<f32>> {
        let model = Transformer::<f32>::load(self.checkpoint_path(model_seed))?;
        if model.config().vocab_size != self.vocab.len() {
            return Err(Error::DimensionMismatch {
                expected: self.vocab.len(),
                found: model.config().vocab_size,
            });
        }
        Ok(model)
    }

    /// Probe seed base of a trial; INLP iteration `j` adds `j`.
    pub fn probe_config(&self, trial: usize) -> ProbeConfig {
        ProbeConfig {
            seed: self.config.probe.seed.wrapping_add(1000 * trial as u64),
            ..self.config.probe
        }
    }

    /// Freshly sampled balanced INLP training and held-out sentences for a
    /// trial. Held-out sentences use the unseen test subjects.
    pub fn inlp_sentences(&self, trial: usize) -> Result<(Vec<AgreementSentence>, Vec<AgreementSentence>)> {
        let d = &self.config.data;
        let t = trial as u64;
        let train = generate_all(
            &self.lexicon,
            &NounPool::all(&self.lexicon),
            self.config.seed ^ INLP_TRAIN_SALT.wrapping_add(t << 20),
            d.inlp_train_size / 8,
        )?;
        let heldout = generate_all(
            &self.lexicon,
            &NounPool::all(&self.lexicon),
            self.config.seed ^ INLP_HELDOUT_SALT.wrapping_add(t << 20),
            d.inlp_heldout_size / 8,
        )?;
        Ok((train, heldout))
    }

    /// Hidden-state sets `(train, heldout)` for each layer.
    pub fn inlp_data(
        &self,
        model: &Transformer<f32>,
        trial: usize,
        layers: &[usize],
        role: PositionRole,
    ) -> Result<Vec<(LabeledVectorSet, LabeledVectorSet)>> {
        let (train, heldout) = self.inlp_sentences(trial)?;
        let a = extract_hidden_layers(model, &train, layers, role)?;
        let b = extract_hidden_layers(model, &heldout, layers, role)?;
        Ok(a.into_iter().zip(b).collect())
    }

    /// Runs INLP with `k` iterations at each layer for one trial.
    pub fn find_subspaces(
        &self,
        model: &Transformer<f32>,
        trial: usize,
        layers: &[usize],
        role: PositionRole,
        k: usize,
    ) -> Result<Vec<SubspaceOutcome>> {
        let probe = self.probe_config(trial);
        Ok(self
            .inlp_data(model, trial, layers, role)?
            .par_iter()
            .map(|(train, heldout)| find_number_subspace(train, k, &probe, heldout).map_err(|e| e.to_string()))
            .collect())
    }

    pub fn random_subspace(&self, trial: usize, layer: usize, k: usize) -> Result<NumberSubspace> {
        let seed = self.config.seed ^ RANDOM_SUBSPACE_SALT.wrapping_add(((trial as u64) << 16) + layer as u64);
        random_subspace(self.config.model.hidden_dim, k, seed)
    }
}

struct RowBase {
    kind: ExperimentKind,
    model_seed: u64,
    trial: usize,
}

impl RowBase {
    #[allow(clippy::too_many_arguments)]
    fn row(
        &self,
        layer: usize,
        scope: &str,
        role: PositionRole,
        alpha: f64,
        k: usize,
        condition: &str,
        metric: &str,
        value: Option<f64>,
    ) -> ResultRow {
        ResultRow {
            version: CSV_VERSION,
            experiment: self.kind,
            model_seed: self.model_seed,
            layer,
            scope: scope.to_string(),
            probe_role: role.as_str().to_string(),
            alpha,
            k,
            condition: condition.to_string(),
            trial: self.trial,
            metric: metric.to_string(),
            value: value.unwrap_or(f64::NAN),
            status: if value.is_some() { Status::Ok } else { Status::Failed },
        }
    }
}

/// Accuracy cells over a layer x scope x alpha x k grid for one model.
#[allow(clippy::too_many_arguments)]
fn accuracy_grid(
    bench: &Workbench,
    kind: ExperimentKind,
    model_seed: u64,
    model: &Transformer<f32>,
    ev: &Evaluator<'_>,
    layers: &[usize],
    scopes: &[ScopeKind],
    roles: &[PositionRole],
    alphas: &[f64],
    ks: &[usize],
) -> Result<Vec<ResultRow>> {
    let cfg = &bench.config;
    let k_max = ks.iter().copied().max().expect("non-empty grid");
    let per_trial: Vec<Result<Vec<ResultRow>>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let base = RowBase {
                kind,
                model_seed,
                trial,
            };
            let mut rows = Vec::new();
            for condition in Condition::ALL {
                let acc = ev.accuracy_in(ev.baseline(), condition);
                rows.push(base.row(
                    0,
                    "none",
                    roles[0],
                    0.0,
                    0,
                    condition.as_str(),
                    "baseline_accuracy",
                    acc,
                ));
            }
            for &role in roles {
                let subspaces = bench.find_subspaces(model, trial, layers, role, k_max)?;
                for (&layer, outcome) in layers.iter().zip(&subspaces) {
                    for &scope in scopes {
                        for &alpha in alphas {
                            for &k in ks {
                                let correct = match outcome {
                                    Ok((s, _)) if s.k() >= k => {
                                        let iv = Intervention {
                                            layer,
                                            scope,
                                            include_delimiters: cfg.include_delimiters,
                                            subspace: s,
                                            alpha,
                                            k,
                                        };
                                        Some(ev.correct(&iv)?)
                                    }
                                    _ => None,
                                };
                                for condition in Condition::ALL {
                                    let acc = correct.as_ref().and_then(|c| ev.accuracy_in(c, condition));
                                    rows.push(base.row(
                                        layer,
                                        scope.as_str(),
                                        role,
                                        alpha,
                                        k,
                                        condition.as_str(),
                                        "accuracy",
                                        acc,
                                    ));
                                }
                            }
                        }
                    }
                }
            }
            Ok(rows)
        })
        .collect();
    let mut out = Vec::new();
    for rows in per_trial {
        out.extend(rows?);
    }
    Ok(out)
}

fn side_effect_grid(
    bench: &Workbench,
    model_seed: u64,
    model: &Transformer<f32>,
    layers: &[usize],
) -> Result<Vec<ResultRow>> {
    let cfg = &bench.config;
    let n = cfg.data.side_effect_sentences.min(bench.test.len());
    let ev = SideEffectEvaluator::new(model, &bench.vocab, &bench.test[..n])?;
    let k_max = cfg.k_grid.iter().copied().max().expect("non-empty grid");
    let per_trial: Vec<Result<Vec<ResultRow>>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let base = RowBase {
                kind: ExperimentKind::SideEffectPerplexity,
                model_seed,
                trial,
            };
            let subspaces = bench.find_subspaces(model, trial, layers, cfg.probe_role, k_max)?;
            let mut rows = Vec::new();
            for (&layer, outcome) in layers.iter().zip(&subspaces) {
                for &alpha in &cfg.alpha_grid {
                    for &k in &cfg.k_grid {
                        let random = bench.random_subspace(trial, layer, k)?;
                        let number = match outcome {
                            Ok((s, _)) if s.k() >= k => Some(ev.factor(layer, s, alpha, k)?),
                            _ => None,
                        };
                        let random = Some(ev.factor(layer, &random, alpha, k)?);
                        for (metric, value) in [("ppl_factor_number", number), ("ppl_factor_random", random)] {
                            rows.push(base.row(
                                layer,
                                ScopeKind::NumberNeutral.as_str(),
                                cfg.probe_role,
                                alpha,
                                k,
                                Condition::All.as_str(),
                                metric,
                                value,
                            ));
                        }
                    }
                }
            }
            Ok(rows)
        })
        .collect();
    let mut out = Vec::new();
    for rows in per_trial {
        out.extend(rows?);
    }
    Ok(out)
}

/// Runs the configured experiment on already loaded models, given as
/// `(model seed, model)`. Every experiment except seed robustness uses the
/// first model.
pub fn run_with_models(bench: &Workbench, models: &[(u64, &Transformer<f32>)]) -> Result<ExperimentResult> {
    let cfg = &bench.config;
    let &(seed, model) = models.first().ok_or(Error::EmptyData)?;
    let layers = cfg.layers();
    let scopes = cfg.scopes();
    let kind = cfg.experiment;
    let rows = match kind {
        ExperimentKind::LayerSweep | ExperimentKind::RedundancyBreakdown => {
            let ev = Evaluator::new(model, &bench.vocab, &bench.test)?;
            accuracy_grid(
                bench,
                kind,
                seed,
                model,
                &ev,
                &layers,
                &scopes,
                &[cfg.probe_role],
                &cfg.alpha_grid,
                &cfg.k_grid,
            )?
        }
        ExperimentKind::UpperLayerVerbProbe => {
            let ev = Evaluator::new(model, &bench.vocab, &bench.test)?;
            let roles = [PositionRole::Subject, PositionRole::MainVerb];
            accuracy_grid(
                bench,
                kind,
                seed,
                model,
                &ev,
                &layers,
                &scopes,
                &roles,
                &cfg.alpha_grid,
                &cfg.k_grid,
            )?
        }
        ExperimentKind::HyperGrid => {
            let ev = Evaluator::new(model, &bench.vocab, &bench.test)?;
            let layer = select_best_layer(bench, model, &ev, &layers)?;
            accuracy_grid(
                bench,
                kind,
                seed,
                model,
                &ev,
                &[layer],
                &scopes,
                &[cfg.probe_role],
                &cfg.alpha_grid,
                &cfg.k_grid,
            )?
        }
        ExperimentKind::SideEffectPerplexity => side_effect_grid(bench, seed, model, &layers)?,
        ExperimentKind::SeedRobustness => {
            let mut rows = Vec::new();
            for &(seed, model) in models {
                let ev = Evaluator::new(model, &bench.vocab, &bench.test)?;
                rows.extend(accuracy_grid(
                    bench,
                    kind,
                    seed,
                    model,
                    &ev,
                    &layers,
                    &scopes,
                    &[cfg.probe_role],
                    &cfg.alpha_grid,
                    &cfg.k_grid,
                )?);
            }
            rows
        }
    };
    Ok(ExperimentResult { rows })
}

/// Best flipping layer: Global intervention with the largest grid values,
/// trial 0 subspaces.
pub fn select_best_layer(
    bench: &Workbench,
    model: &Transformer<f32>,
    ev: &Evaluator<'_>,
    layers: &[usize],
) -> Result<usize> {
    let cfg = &bench.config;
    let alpha = cfg.alpha_grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let k = cfg.k_grid.iter().copied().max().expect("non-empty grid");
    let subspaces = bench.find_subspaces(model, 0, layers, cfg.probe_role, k)?;
    let mut accs = Vec::new();
    for (&layer, outcome) in layers.iter().zip(&subspaces) {
        if let Ok((s, _)) = outcome {
            if s.k() >= k {
                let iv = Intervention {
                    layer,
                    scope: ScopeKind::Global,
                    include_delimiters: cfg.include_delimiters,
                    subspace: s,
                    alpha,
                    k,
                };
                let correct = ev.correct(&iv)?;
                accs.push((layer, ev.accuracy_in(&correct, Condition::All).unwrap_or(f64::NAN)));
            }
        }
    }
    best_flipping_layer(&accs).ok_or_else(|| Error::InvalidArgument("no layer produced a usable subspace".into()))
}

/// Loads the configured checkpoints and runs the experiment.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let bench = Workbench::new(config.clone())?;
    let seeds: Vec<u64> = if config.experiment == ExperimentKind::SeedRobustness {
        config.model_seeds.clone()
    } else {
        config.model_seeds[..1].to_vec()
    };
    let models = seeds.iter().map(|&s| bench.load_model(s)).collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(u64, &Transformer<f32>)> = seeds.iter().copied().zip(models.iter()).collect();
    run_with_models(&bench, &pairs)
}
