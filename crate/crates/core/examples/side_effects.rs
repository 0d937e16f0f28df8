//! Perplexity on number-neutral words when they are rewritten with the
//! number subspace versus a random subspace of the same size.

use numspace::harness::{ExperimentConfig, SideEffectEvaluator, Workbench};
use numspace::PositionRole;

fn main() -> numspace::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.model.num_layers = 2;
    cfg.model.hidden_dim = 32;
    cfg.model.ffn_dim = 128;
    cfg.train.steps = 1500;
    cfg.data.train_per_condition = 1000;
    cfg.data.inlp_train_size = 800;
    cfg.data.inlp_heldout_size = 200;
    let bench = Workbench::new(cfg)?;
    let (model, _) = bench.train_model(0)?;
    let layers = [0, 1, 2];
    let subspaces = bench.find_subspaces(&model, 0, &layers, PositionRole::Subject, 8)?;
    let ev = SideEffectEvaluator::new(&model, &bench.vocab, &bench.test[..100])?;
    println!(
        "base perplexity {:.3} over {} masked tokens",
        ev.base_perplexity(),
        ev.num_tokens()
    );
    for (&layer, outcome) in layers.iter().zip(&subspaces) {
        let Ok((number, _)) = outcome else { continue };
        let random = bench.random_subspace(0, layer, 8)?;
        for alpha in [0.0, 2.0, 5.0] {
            println!(
                "layer {layer} alpha {alpha}: number factor {:.3}  random factor {:.3}",
                ev.factor(layer, number, alpha, 8)?,
                ev.factor(layer, &random, alpha, 8)?
            );
        }
    }
    Ok(())
}
