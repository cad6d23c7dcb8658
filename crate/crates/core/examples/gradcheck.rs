//! Finite-difference check of every parameter tensor of the small network.
//!
//! ```text
//! cargo run --release --example gradcheck
//! ```

use tcnseg::gradcheck::{gradient_check, small_config, GradCheckOptions};

fn main() -> tcnseg::Result<()> {
    let config = small_config();
    for seed in 0..5 {
        let report = gradient_check(&config, &GradCheckOptions { seed, ..Default::default() })?;
        println!("seed {seed}\n{report}\n");
    }
    Ok(())
}
