//! Intervene in the middle of one forward pass and compare copula
//! probabilities before and after.

use numspace::harness::{ExperimentConfig, Workbench};
use numspace::mlm::{InterventionSpec, Scope};
use numspace::Number;
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
    let layer = 1;
    let (subspace, _) = bench
        .find_subspaces(&model, 0, &[layer], PositionRole::Subject, 8)?
        .remove(0)
        .map_err(numspace::Error::InvalidArgument)?;

    let sentence = &bench.test[0];
    let is = bench.vocab.copula(Number::Singular) as usize;
    let are = bench.vocab.copula(Number::Plural) as usize;
    let mask = sentence.main_verb_index;
    println!("{}", sentence.text(&bench.vocab)?);
    let base = model.forward(&sentence.tokens)?.log_probs(mask);
    println!(
        "no intervention: log p(is) {:.3}  log p(are) {:.3}",
        base[is], base[are]
    );
    for alpha in [1.0, 2.0, 5.0] {
        let spec = InterventionSpec {
            layer,
            scope: &Scope::Global,
            subspace: &subspace,
            alpha,
            k: 8,
        };
        let lp = model
            .forward_with_intervention(&sentence.tokens, &spec)?
            .log_probs(mask);
        println!("alpha {alpha}: log p(is) {:.3}  log p(are) {:.3}", lp[is], lp[are]);
    }
    Ok(())
}
