//! Warm up a network on noisy pairs, then score every training pair with
//! the cross-modal indicator and the intra-modal structure score and see
//! how well each one separates clean from mismatched pairs.
//!
//! cargo run --release --example noise_discrimination

use gsc::discrimination::{
    combine_labels, cross_modal_indicator, gmm_fit, gmm_posterior, intra_structure_score, DEFAULT_EM_ITERS,
    DEFAULT_VARIANCE_FLOOR,
};
use gsc::evalmetrics::detection_metrics;
use gsc::model::sim_matrix;
use gsc::synthdata::GenSpec;
use gsc::trainer::{warmup, Mode, RunState, Splits, TrainConfig};

fn main() -> gsc::Result<()> {
    let splits = Splits::generate(&GenSpec::default(), 500, 500, 0.4)?;
    let cfg = TrainConfig {
        warmup_epochs: 3,
        ..TrainConfig::with_mode(Mode::Baseline)
    };
    let mut state = RunState::new(&cfg, &splits.train)?;
    warmup(&mut state, &splits, &cfg)?;
    println!("after {} warm-up epochs, dev recall sum {:.1}", cfg.warmup_epochs, state.history[0].recall_sum);

    // Score in chunks the size of a training batch.
    let train = &splits.train;
    let txt = train.paired_txt();
    let net = &state.nets[0];
    let (mut cm, mut im) = (Vec::new(), Vec::new());
    let idx: Vec<usize> = (0..train.len()).collect();
    for chunk in idx.chunks(cfg.batch_size) {
        let ei = net.img.encode(&train.img_features.select_rows(chunk))?;
        let et = net.txt.encode(&txt.select_rows(chunk))?;
        cm.extend(cross_modal_indicator(&sim_matrix(&ei, &et)?, cfg.tau1)?);
        let scores = intra_structure_score(&sim_matrix(&ei, &ei)?, &sim_matrix(&et, &et)?, &vec![1.0; chunk.len()])?;
        im.extend(scores.scores);
    }
    let gmm = gmm_fit(&im, DEFAULT_EM_ITERS, DEFAULT_VARIANCE_FLOOR)?;
    println!(
        "GMM means {:.3} / {:.3}, clean component {}",
        gmm.means[0], gmm.means[1], gmm.clean
    );
    let im_post: Vec<f64> = im.iter().map(|&s| gmm_posterior(&gmm, s)).collect();
    let combined = combine_labels(&cm, &im_post)?;

    for (name, y) in [("cross-modal", &cm), ("intra-modal", &im_post), ("combined", &combined)] {
        let d = detection_metrics(y, &train.noise_mask)?;
        println!(
            "{name:>12}: accuracy {:.3}, AUC {:.4}, mean clean {:.3}, mean noisy {:.3}",
            d.accuracy,
            d.auc.unwrap_or(f64::NAN),
            d.mean_clean.unwrap_or(f64::NAN),
            d.mean_noisy.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
