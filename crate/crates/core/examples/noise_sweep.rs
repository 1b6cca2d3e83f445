//! Sweep the noise rate for the full method and the baseline and print the
//! summary CSV to stdout.
//!
//! cargo run --release --example noise_sweep -- [epochs]

use gsc::evalmetrics::SummaryWriter;
use gsc::synthdata::GenSpec;
use gsc::trainer::{run, Mode, Splits, TrainConfig};

fn main() -> gsc::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(20, |s| s.parse().expect("epochs"));
    let mut csv = SummaryWriter::new(std::io::stdout().lock())?;
    for rho in [0.0, 0.2, 0.4, 0.6] {
        let splits = Splits::generate(&GenSpec::default(), 500, 500, rho)?;
        for mode in [Mode::Gsc, Mode::Baseline] {
            let cfg = TrainConfig {
                epochs,
                ..TrainConfig::with_mode(mode)
            };
            csv.write(&run(&cfg, &splits)?.test_report.summary_row())?;
        }
    }
    Ok(())
}
