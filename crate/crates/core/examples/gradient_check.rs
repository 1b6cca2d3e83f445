//! Compare the hand-derived gradients of the combined loss against
//! central differences, then show that a 1% error is caught.
//!
//! cargo run --release --example gradient_check

use gsc::losses::{FdProblem, LossConfig};

fn main() -> gsc::Result<()> {
    let cfg = LossConfig {
        gamma: 0.5,
        ..LossConfig::default()
    };
    for seed in 0..3 {
        let p = FdProblem::random(seed, 8, &[16, 12, 6], &[10, 12, 6])?;
        let r = p.check(&cfg, 1e-5, 1e-4)?;
        println!(
            "seed {seed}: {} parameters, max relative error {:.2e} ({})",
            r.checked,
            r.max_rel_err,
            if r.pass { "ok" } else { "FAILED" }
        );
    }

    let p = FdProblem::random(0, 8, &[16, 12, 6], &[10, 12, 6])?;
    let r = p.check_scaled(&cfg, 1.01, 1e-5, 1e-4)?;
    println!(
        "gradient scaled by 1.01: max relative error {:.2e} at {}, pass = {}",
        r.max_rel_err,
        r.worst.expect("parameters checked"),
        r.pass
    );
    Ok(())
}
