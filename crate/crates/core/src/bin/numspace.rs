use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use numspace::corpus::write_jsonl;
use numspace::harness::{run_with_models, ExperimentConfig, ExperimentKind, ExperimentResult, ScopeKind, Workbench};
use numspace::inlp::find_number_subspace;
use numspace::mlm::{extract_hidden_layers, Transformer};
use numspace::PositionRole;

#[derive(Parser)]
#[command(name = "numspace", version, about = "Number subspaces in a toy masked LM")]
struct Cli {
    /// TOML experiment configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write training and test corpora as JSONL.
    GenerateCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the toy MLM and save a checkpoint.
    TrainMlm {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Checkpoint path; defaults to the configured checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run INLP at one layer and save the subspace with its report.
    FindSubspace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value = "subject")]
        probe_role: PositionRole,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        /// Subspace file; the report goes next to it as `.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment and write its result table.
    Run(RunArgs),
    /// Aggregate a result table into summary and figure files.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    experiment: Option<ExperimentKind>,
    #[arg(long, value_delimiter = ',')]
    alpha_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    k_grid: Option<Vec<usize>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    scope: Option<Vec<ScopeKind>>,
    #[arg(long)]
    probe_role: Option<PositionRole>,
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Model seeds (all used by seed robustness).
    #[arg(long, value_delimiter = ',')]
    model_seeds: Option<Vec<u64>>,
    /// Result CSV; defaults to `<paths.out>/<experiment>.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train and save models whose checkpoints are missing.
    #[arg(long)]
    train_missing: bool,
}

impl RunArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = self.experiment {
            cfg.experiment = v;
        }
        if let Some(v) = &self.alpha_grid {
            cfg.alpha_grid = v.clone();
        }
        if let Some(v) = &self.k_grid {
            cfg.k_grid = v.clone();
        }
        if let Some(v) = self.trials {
            cfg.trials = v;
        }
        if let Some(v) = &self.scope {
            cfg.scopes = v.clone();
        }
        if let Some(v) = self.probe_role {
            cfg.probe_role = v;
        }
        if let Some(v) = &self.layers {
            cfg.layers = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.model_seeds {
            cfg.model_seeds = v.clone();
        }
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn train_and_save(bench: &Workbench, seed: u64, path: &Path) -> anyhow::Result<Transformer<f32>> {
    let (model, report) =
        bench.train_model_with_progress(seed, |p| eprintln!("seed {seed} step {:>5} loss {:.4}", p.step, p.loss))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    model.save(path)?;
    eprintln!(
        "seed {seed}: final loss {:.4}, saved {}",
        report.final_loss,
        path.display()
    );
    Ok(model)
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenerateCorpus { out, seed } => {
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let seed = cfg.seed;
            let bench = Workbench::new(cfg)?;
            std::fs::create_dir_all(&out)?;
            let train = bench.training_corpus(seed)?;
            for (name, set) in [("train.jsonl", &train), ("test.jsonl", &bench.test)] {
                let file = std::fs::File::create(out.join(name))?;
                write_jsonl(std::io::BufWriter::new(file), set, &bench.vocab)?;
            }
            bench.lexicon.save(out.join("lexicon.json"))?;
            eprintln!(
                "{} training and {} test sentences in {}",
                train.len(),
                bench.test.len(),
                out.display()
            );
        }
        Command::TrainMlm { seed, steps, out } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let seed = seed.unwrap_or(cfg.model_seeds[0]);
            let bench = Workbench::new(cfg)?;
            let path = out.unwrap_or_else(|| bench.checkpoint_path(seed));
            train_and_save(&bench, seed, &path)?;
        }
        Command::FindSubspace {
            checkpoint,
            layer,
            probe_role,
            k,
            trial,
            out,
        } => {
            let bench = Workbench::new(cfg)?;
            let model = Transformer::<f32>::load(&checkpoint)?;
            if layer > model.config().num_layers {
                bail!("layer {layer} exceeds model depth {}", model.config().num_layers);
            }
            let (train, heldout) = bench.inlp_sentences(trial)?;
            let train = extract_hidden_layers(&model, &train, &[layer], probe_role)?.remove(0);
            let heldout = extract_hidden_layers(&model, &heldout, &[layer], probe_role)?.remove(0);
            let (subspace, report) = find_number_subspace(&train, k, &bench.probe_config(trial), &heldout)?;
            subspace.save(&out)?;
            report.save(out.with_extension("json"))?;
            for it in &report.iterations {
                eprintln!(
                    "iteration {}: train {:.3} heldout {:.3}",
                    it.basis_vector_index, it.training_accuracy, it.heldout_accuracy
                );
            }
            if let Some(why) = &report.degenerated {
                eprintln!("stopped early: {why}");
            }
        }
        Command::Run(args) => {
            args.apply(&mut cfg);
            cfg.validate()?;
            let out = args
                .out
                .clone()
                .unwrap_or_else(|| cfg.paths.out.join(format!("{}.csv", cfg.experiment)));
            let bench = Workbench::new(cfg)?;
            let cfg = &bench.config;
            let seeds: Vec<u64> = if cfg.experiment == ExperimentKind::SeedRobustness {
                cfg.model_seeds.clone()
            } else {
                cfg.model_seeds[..1].to_vec()
            };
            let mut models = Vec::new();
            for &seed in &seeds {
                let path = bench.checkpoint_path(seed);
                let model = match bench.load_model(seed) {
                    Ok(m) => m,
                    Err(numspace::Error::MissingCheckpoint(_)) if args.train_missing => {
                        train_and_save(&bench, seed, &path)?
                    }
                    Err(e) => {
                        return Err(e).with_context(|| format!("loading {} (train it with train-mlm)", path.display()));
                    }
                };
                models.push(model);
            }
            let pairs: Vec<(u64, &Transformer<f32>)> = seeds.iter().copied().zip(models.iter()).collect();
            let result = run_with_models(&bench, &pairs)?;
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            result.save(&out)?;
            let failed = result
                .rows
                .iter()
                .filter(|r| r.status == numspace::harness::Status::Failed)
                .count();
            eprintln!(
                "{} rows ({failed} failed) written to {}",
                result.rows.len(),
                out.display()
            );
        }
        Command::Report { input, out } => {
            let result = ExperimentResult::load(&input)?;
            for path in result.write_report(&out)? {
                eprintln!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}
