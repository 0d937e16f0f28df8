//! Layer sweep on a freshly trained small model: Global and Local(subject)
//! interventions at every layer, aggregated over INLP resamplings, written
//! as a result table plus report files.
//!
//! ```text
//! cargo run --release --example layer_sweep -- out/
//! ```

use std::path::PathBuf;

use numspace::harness::{run_with_models, ExperimentConfig, ExperimentKind, Workbench};

fn main() -> numspace::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "layer-sweep".into()));
    let mut cfg = ExperimentConfig {
        experiment: ExperimentKind::LayerSweep,
        alpha_grid: vec![1.0, 5.0],
        k_grid: vec![8],
        trials: 2,
        ..Default::default()
    };
    cfg.model.num_layers = 3;
    cfg.model.hidden_dim = 32;
    cfg.model.ffn_dim = 128;
    cfg.train.steps = 1500;
    cfg.data.train_per_condition = 1000;
    cfg.data.inlp_train_size = 800;
    cfg.data.inlp_heldout_size = 200;
    let bench = Workbench::new(cfg)?;
    let (model, _) = bench.train_model(0)?;
    let result = run_with_models(&bench, &[(0, &model)])?;

    println!(
        "{:<6} {:<8} {:>5} {:<14} {:>6} {:>15}",
        "layer", "scope", "alpha", "condition", "mean", "95% CI"
    );
    for a in result.aggregate().iter().filter(|a| a.metric == "accuracy") {
        println!(
            "{:<6} {:<8} {:>5} {:<14} {:>6.3} [{:.3}, {:.3}]",
            a.layer, a.scope, a.alpha, a.condition, a.mean, a.ci_low, a.ci_high
        );
    }
    std::fs::create_dir_all(&out)?;
    result.save(out.join("layer_sweep.csv"))?;
    for p in result.write_report(&out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
