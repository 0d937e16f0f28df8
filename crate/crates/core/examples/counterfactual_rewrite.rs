//! Reflect and ablate a vector along a two-dimensional number subspace.
//!
//! ```text
//! cargo run --example counterfactual_rewrite
//! ```

use numspace::subspace::{intervene, scalar_projection, NumberSubspace};

fn main() -> numspace::Result<()> {
    let s = NumberSubspace::new(vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.6, 0.8, 0.0]])?;
    let h = [2.0, 1.0, -0.5, 3.0];
    println!("h = {h:?}");
    println!("coordinates = {:?}", s.coordinates(&h, 2)?);
    for alpha in [0.0, 1.0, 2.0, 5.0] {
        let out = intervene(&h, &s, alpha, 2)?;
        let coords: Vec<f64> = s
            .basis()
            .iter()
            .map(|b| scalar_projection(&out, b))
            .collect::<Result<_, _>>()?;
        println!("alpha {alpha}: {out:.3?}  subspace coordinates {coords:.3?}");
    }
    // Reflecting twice is the identity.
    let twice = intervene(&intervene(&h, &s, 2.0, 2)?, &s, 2.0, 2)?;
    println!("reflect twice: {twice:.3?}");
    Ok(())
}
