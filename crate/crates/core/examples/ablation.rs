//! Compare the full method with its ablations at 40% noise, averaged over
//! a few seeds.
//!
//! cargo run --release --example ablation -- [seeds]

use gsc::synthdata::GenSpec;
use gsc::trainer::{run, Mode, Splits, TrainConfig};

fn main() -> gsc::Result<()> {
    let seeds: u64 = std::env::args().nth(1).map_or(3, |s| s.parse().expect("seed count"));
    let mut sums = vec![0.0; Mode::ALL.len()];
    for seed in 0..seeds {
        let splits = Splits::generate(&GenSpec { seed, ..GenSpec::default() }, 500, 500, 0.4)?;
        for (mode, sum) in Mode::ALL.into_iter().zip(&mut sums) {
            let cfg = TrainConfig {
                seed,
                ..TrainConfig::with_mode(mode)
            };
            let rsum = run(&cfg, &splits)?.test_report.retrieval.recall_sum;
            println!("seed {seed} {mode:>11}: {rsum:.1}");
            *sum += rsum;
        }
    }
    println!("\nmean test recall sum over {seeds} seeds");
    for (mode, sum) in Mode::ALL.into_iter().zip(sums) {
        println!("{mode:>11}: {:.2}", sum / seeds as f64);
    }
    Ok(())
}
