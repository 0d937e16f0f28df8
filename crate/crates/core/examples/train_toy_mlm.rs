//! Train a small encoder on the agreement corpus, report its conjugation
//! accuracy and save a checkpoint.
//!
//! ```text
//! cargo run --release --example train_toy_mlm -- model.tmlm
//! ```

use numspace::harness::{Condition, Evaluator, ExperimentConfig, Workbench};
use numspace::mlm::Transformer;

fn main() -> numspace::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "toy.tmlm".into());
    let mut cfg = ExperimentConfig::default();
    cfg.model.num_layers = 2;
    cfg.model.hidden_dim = 32;
    cfg.model.ffn_dim = 128;
    cfg.train.steps = 1500;
    cfg.train.warmup_steps = 100;
    cfg.data.train_per_condition = 1000;
    let bench = Workbench::new(cfg)?;
    let (model, report) = bench.train_model_with_progress(0, |p| println!("step {:>4} loss {:.3}", p.step, p.loss))?;
    println!("final loss {:.3} after {} steps", report.final_loss, report.steps);
    let ev = Evaluator::new(&model, &bench.vocab, &bench.test)?;
    for c in Condition::ALL {
        println!(
            "accuracy ({}) {:.3}",
            c.as_str(),
            ev.accuracy_in(ev.baseline(), c).unwrap_or(f64::NAN)
        );
    }
    model.save(&out)?;
    let back = Transformer::<f32>::load(&out)?;
    assert_eq!(back.parameters(), model.parameters());
    println!("saved {out}");
    Ok(())
}
