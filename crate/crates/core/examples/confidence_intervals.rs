//! Student-t confidence intervals over resampled trials, as used for every
//! aggregated result cell.

use numspace::harness::confidence_interval;

fn main() -> numspace::Result<()> {
    let trials = [0.12, 0.18, 0.15, 0.09, 0.16];
    let ci = confidence_interval(&trials)?;
    println!(
        "mean {:.4}  95% CI [{:.4}, {:.4}]  half width {:.4}",
        ci.mean,
        ci.lo,
        ci.hi,
        ci.half_width()
    );
    Ok(())
}
