//! Train the full method and the plain contrastive baseline on the same
//! noisy data and print both learning curves.
//!
//! cargo run --release --example train_gsc -- [rho] [epochs]

use gsc::synthdata::GenSpec;
use gsc::trainer::{run, Mode, Splits, TrainConfig};

fn main() -> gsc::Result<()> {
    let mut args = std::env::args().skip(1);
    let rho: f64 = args.next().map_or(0.4, |s| s.parse().expect("rho"));
    let epochs: usize = args.next().map_or(20, |s| s.parse().expect("epochs"));
    let splits = Splits::generate(&GenSpec::default(), 500, 500, rho)?;

    for mode in [Mode::Baseline, Mode::Gsc] {
        let cfg = TrainConfig {
            epochs,
            ..TrainConfig::with_mode(mode)
        };
        let result = run(&cfg, &splits)?;
        println!("== {mode} (rho {rho})");
        println!("epoch  loss_cm  loss_im  dev_rsum  det_acc  det_auc");
        for m in &result.history {
            println!(
                "{:>5}  {:>7.3}  {:>7.3}  {:>8.1}  {:>7.3}  {:>7.4}",
                m.epoch,
                m.loss_cm,
                m.loss_im,
                m.recall_sum,
                m.det_acc,
                m.det_auc.unwrap_or(f64::NAN)
            );
        }
        let r = &result.test_report.retrieval;
        println!(
            "best epoch {}; test i2t R@1/5/10 {:.1}/{:.1}/{:.1}, t2i {:.1}/{:.1}/{:.1}, rsum {:.1}\n",
            result.best_epoch, r.i2t[0], r.i2t[1], r.i2t[2], r.t2i[0], r.t2i[1], r.t2i[2], r.recall_sum
        );
    }
    Ok(())
}
