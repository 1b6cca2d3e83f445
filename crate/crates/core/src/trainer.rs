//! Dual-network co-training with label purification.
//!
//! Each epoch trains network A and then network B over shuffled
//! mini-batches. While network `k` trains, the *other* network embeds the
//! same batch and produces raw correspondence estimates for `k`'s samples.
//! Training itself uses the labels frozen at the start of the epoch; the
//! accumulated estimates are folded into the label store at epoch end
//! (GMM over the intra-modal scores, momentum, minimum).

use serde::{Deserialize, Serialize};

use crate::discrimination::{
    cross_modal_indicator, ensemble_update, gmm_fit, gmm_posterior, intra_structure_score, SoftLabels,
    DEFAULT_EM_ITERS, DEFAULT_VARIANCE_FLOOR,
};
use crate::error::{invalid, GscError, Result};
use crate::evalmetrics::{assemble_report, detection_metrics, evaluate_retrieval, DetectionReport, Report, ReportMeta, RetrievalReport};
use crate::losses::{grad_total, LossConfig, PairBatch};
use crate::model::{sim_matrix, Encoder, EncoderCheckpoint, Modality};
use crate::numerics::{Matrix, Rng};
use crate::synthdata::{generate_splits, GenSpec, PairDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Full method: dual networks, both indicators, momentum.
    Gsc,
    /// Plain contrastive training, every pair trusted.
    Baseline,
    /// Labels from the cross-modal indicator only.
    CmOnly,
    /// Labels from the intra-modal GMM posterior only.
    ImOnly,
    /// One network that estimates its own labels.
    SingleNet,
    /// No momentum; a longer warm-up instead.
    NoEnsemble,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Gsc,
        Mode::Baseline,
        Mode::CmOnly,
        Mode::ImOnly,
        Mode::SingleNet,
        Mode::NoEnsemble,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Gsc => "gsc",
            Mode::Baseline => "baseline",
            Mode::CmOnly => "cm_only",
            Mode::ImOnly => "im_only",
            Mode::SingleNet => "single_net",
            Mode::NoEnsemble => "no_ensemble",
        }
    }

    pub fn network_count(self) -> usize {
        if self == Mode::SingleNet {
            1
        } else {
            2
        }
    }

    fn estimates_labels(self) -> bool {
        self != Mode::Baseline
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = GscError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown mode {s:?}")))
    }
}

/// Every hyperparameter of a run. Field names double as the keys of the
/// JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Epochs after this one (1-based) train at `lr * lr_decay`.
    pub lr_decay_epoch: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub mode: Mode,
    pub embed_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub em_iters: usize,
    pub variance_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau1: 0.07,
            tau2: 1.0,
            gamma: 0.01,
            beta1: 0.7,
            beta2: 0.7,
            batch_size: 128,
            epochs: 20,
            lr: 2e-3,
            lr_decay: 0.2,
            lr_decay_epoch: 15,
            warmup_epochs: 1,
            seed: 0,
            mode: Mode::Gsc,
            embed_dim: 32,
            hidden_dims: vec![64],
            em_iters: DEFAULT_EM_ITERS,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
        }
    }
}

pub const NO_ENSEMBLE_WARMUP: usize = 5;

impl TrainConfig {
    pub fn with_mode(mode: Mode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
        .resolved()
    }

    /// Applies the mode's fixed overrides: `no_ensemble` disables momentum
    /// (β1 = β2 = 1) and uses a 5-epoch warm-up.
    pub fn resolved(mut self) -> Self {
        if self.mode == Mode::NoEnsemble {
            self.beta1 = 1.0;
            self.beta2 = 1.0;
            self.warmup_epochs = NO_ENSEMBLE_WARMUP;
        }
        self
    }

    // negated comparisons so NaN fails too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 > 0.0 && self.tau2 > 0.0) {
            return Err(invalid("temperatures must be positive"));
        }
        if !(self.gamma >= 0.0) {
            return Err(invalid("gamma must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.beta1) || !(0.0..=1.0).contains(&self.beta2) {
            return Err(invalid("momentum coefficients must lie in [0, 1]"));
        }
        if self.batch_size < 2 {
            return Err(invalid("batch size must be at least 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0) {
            return Err(invalid("learning rate and decay factor must be positive"));
        }
        if self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(invalid("layer widths must be positive"));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau1: self.tau1,
            tau2: self.tau2,
            gamma: self.gamma,
        }
    }

    /// Learning rate for training epoch `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch > self.lr_decay_epoch {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }

    fn encoder_dims(&self, input: usize) -> Vec<usize> {
        let mut d = vec![input];
        d.extend(&self.hidden_dims);
        d.push(self.embed_dim);
        d
    }
}

/// Train, dev and test splits. Only train may carry noise.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: PairDataset,
    pub dev: PairDataset,
    pub test: PairDataset,
}

impl Splits {
    /// Generates `spec.n` samples, holds out clean dev/test splits and
    /// corrupts the train split at rate `rho`.
    pub fn generate(spec: &GenSpec, n_dev: usize, n_test: usize, rho: f64) -> Result<Self> {
        let (train, dev, test) = generate_splits(spec, n_dev, n_test, rho)?;
        Ok(Self { train, dev, test })
    }
}

/// One encoder per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub img: Encoder,
    pub txt: Encoder,
}

impl Network {
    pub fn new(cfg: &TrainConfig, d_img: usize, d_txt: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            img: Encoder::new(Modality::Image, &cfg.encoder_dims(d_img), rng)?,
            txt: Encoder::new(Modality::Text, &cfg.encoder_dims(d_txt), rng)?,
        })
    }

    pub fn similarity(&self, img: &Matrix, txt: &Matrix) -> Result<Matrix> {
        sim_matrix(&self.img.encode(img)?, &self.txt.encode(txt)?)
    }

    pub fn checkpoint(&self) -> NetworkCheckpoint {
        NetworkCheckpoint {
            img: self.img.checkpoint(),
            txt: self.txt.checkpoint(),
        }
    }

    pub fn from_checkpoint(ck: &NetworkCheckpoint) -> Result<Self> {
        Ok(Self {
            img: Encoder::from_checkpoint(&ck.img)?,
            txt: Encoder::from_checkpoint(&ck.txt)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCheckpoint {
    pub img: EncoderCheckpoint,
    pub txt: EncoderCheckpoint,
}

/// Labels consumed by network `consumer`, estimated from network `source`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelStore {
    pub consumer: usize,
    pub source: usize,
    pub labels: SoftLabels,
}

/// One line of the metrics JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mode: Mode,
    pub loss_cm: f64,
    pub loss_im: f64,
    pub dev_r1_i2t: f64,
    pub dev_r1_t2i: f64,
    pub recall_sum: f64,
    pub det_acc: f64,
    pub det_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunState {
    pub nets: Vec<Network>,
    pub stores: Vec<LabelStore>,
    /// Completed training epochs, warm-up excluded.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

impl RunState {
    /// Fresh networks (differing only in their init stream) and all-ones labels.
    pub fn new(cfg: &TrainConfig, train: &PairDataset) -> Result<Self> {
        let root = Rng::new(cfg.seed);
        let n_nets = cfg.mode.network_count();
        let nets = (0..n_nets)
            .map(|k| {
                let mut rng = root.split(INIT_STREAM + k as u64);
                Network::new(cfg, train.meta.dims.img, train.meta.dims.txt, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let stores = (0..n_nets)
            .map(|k| LabelStore {
                consumer: k,
                source: source_of(k, n_nets),
                labels: SoftLabels::ones(train.len()),
            })
            .collect();
        Ok(Self {
            nets,
            stores,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Mean of the combined labels across label stores.
    pub fn mean_labels(&self) -> Vec<f64> {
        let n = self.stores[0].labels.len();
        let k = self.stores.len() as f64;
        (0..n)
            .map(|i| self.stores.iter().map(|s| s.labels.y[i]).sum::<f64>() / k)
            .collect()
    }
}

const INIT_STREAM: u64 = 100;
const SHUFFLE_STREAM: u64 = 1_000;

/// The network whose outputs label network `k`.
pub fn source_of(k: usize, n_nets: usize) -> usize {
    if n_nets == 1 {
        k
    } else {
        1 - k
    }
}

/// Sample order for network `net` in phase `phase` (warm-up epochs,
/// estimation passes and training epochs each get their own phase number).
pub fn shuffle_order(seed: u64, phase: u64, net: usize, n: usize) -> Vec<usize> {
    Rng::new(seed)
        .split(SHUFFLE_STREAM + phase * 16 + net as u64)
        .permutation(n)
}

/// Cuts `order` into chunks of `batch_size`; a trailing chunk of one sample
/// is merged into the previous chunk.
pub fn make_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

/// Training pairs in row order: image `i` with its (possibly wrong) text.
#[derive(Debug, Clone)]
struct TrainView {
    img: Matrix,
    txt: Matrix,
}

impl TrainView {
    fn new(ds: &PairDataset) -> Self {
        Self {
            img: ds.img_features.clone(),
            txt: ds.paired_txt(),
        }
    }

    fn batch(&self, idx: &[usize]) -> PairBatch {
        PairBatch {
            img: self.img.select_rows(idx),
            txt: self.txt.select_rows(idx),
        }
    }
}

/// Raw per-sample estimates gathered over one pass.
struct Estimates {
    cm: Vec<f64>,
    im_scores: Vec<f64>,
}

fn estimate_batch(
    source: &Network,
    batch: &PairBatch,
    weights: &[f64],
    tau1: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let ei = source.img.encode(&batch.img)?;
    let et = source.txt.encode(&batch.txt)?;
    let s = sim_matrix(&ei, &et)?;
    let p = sim_matrix(&ei, &ei)?;
    let q = sim_matrix(&et, &et)?;
    let cm = cross_modal_indicator(&s, tau1)?;
    let im = intra_structure_score(&p, &q, weights)?;
    Ok((cm, im.scores))
}

fn abort(epoch: usize, batch: usize) -> impl Fn(GscError) -> GscError {
    move |e| match e {
        GscError::NonFinite { stage } => GscError::TrainingAborted { epoch, batch, stage },
        other => other,
    }
}

/// Turns raw estimates into new `(y_cm, y_im)` according to the mode.
fn finalize_estimates(cfg: &TrainConfig, est: Estimates) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = est.cm.len();
    match cfg.mode {
        Mode::CmOnly => Ok((est.cm, vec![1.0; n])),
        _ => {
            let gmm = gmm_fit(&est.im_scores, cfg.em_iters, cfg.variance_floor)?;
            let im: Vec<f64> = est.im_scores.iter().map(|&s| gmm_posterior(&gmm, s)).collect();
            if cfg.mode == Mode::ImOnly {
                Ok((vec![1.0; n], im))
            } else {
                Ok((est.cm, im))
            }
        }
    }
}

struct EpochLosses {
    cm: f64,
    im: f64,
    batches: usize,
}

/// One pass of network `k` over the train set. Optionally trains `k` and
/// optionally collects estimates for `k`'s labels from its source network.
#[allow(clippy::too_many_arguments)]
fn pass(
    state: &mut RunState,
    view: &TrainView,
    cfg: &TrainConfig,
    k: usize,
    phase: u64,
    train_lr: Option<f64>,
    weights: &[f64],
    collect: bool,
    losses: &mut EpochLosses,
) -> Result<Option<Estimates>> {
    let n = view.img.rows();
    let order = shuffle_order(cfg.seed, phase, k, n);
    let source = state.stores[k].source;
    let loss_cfg = cfg.loss_config();
    let mut est = collect.then(|| Estimates {
        cm: vec![0.0; n],
        im_scores: vec![0.0; n],
    });
    for (bi, idx) in make_batches(&order, cfg.batch_size).iter().enumerate() {
        let batch = view.batch(idx);
        let w: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
        if let Some(est) = est.as_mut() {
            let (cm, im) = estimate_batch(&state.nets[source], &batch, &w, cfg.tau1)?;
            for (j, &i) in idx.iter().enumerate() {
                est.cm[i] = cm[j];
                est.im_scores[i] = im[j];
            }
        }
        if let Some(lr) = train_lr {
            let net = &state.nets[k];
            let (report, grads) =
                grad_total(&net.img, &net.txt, &batch, &w, &loss_cfg).map_err(abort(state.epoch + 1, bi))?;
            let net = &mut state.nets[k];
            net.img.apply_grads(&grads.img, lr)?;
            net.txt.apply_grads(&grads.txt, lr)?;
            losses.cm += report.l_cm;
            losses.im += report.l_im;
            losses.batches += 1;
        }
    }
    Ok(est)
}

fn phase_of_warmup(w: usize) -> u64 {
    w as u64
}

fn phase_of_estimation(warmup: usize) -> u64 {
    warmup as u64
}

fn phase_of_epoch(cfg: &TrainConfig, epoch: usize) -> u64 {
    (cfg.warmup_epochs + epoch) as u64
}

/// Trains every network with all labels at 1 for `cfg.warmup_epochs`
/// epochs, then initialises the label stores from one estimation pass.
/// With no warm-up the labels stay at 1.
pub fn warmup(state: &mut RunState, splits: &Splits, cfg: &TrainConfig) -> Result<()> {
    let view = TrainView::new(&splits.train);
    let ones = vec![1.0; splits.train.len()];
    let mut losses = EpochLosses {
        cm: 0.0,
        im: 0.0,
        batches: 0,
    };
    for w in 0..cfg.warmup_epochs {
        for k in 0..state.nets.len() {
            pass(state, &view, cfg, k, phase_of_warmup(w), Some(cfg.lr), &ones, false, &mut losses)?;
        }
    }
    if cfg.warmup_epochs > 0 && cfg.mode.estimates_labels() {
        for k in 0..state.nets.len() {
            let est = pass(
                state,
                &view,
                cfg,
                k,
                phase_of_estimation(cfg.warmup_epochs),
                None,
                &ones,
                true,
                &mut losses,
            )?
            .expect("collect requested");
            let (cm, im) = finalize_estimates(cfg, est)?;
            state.stores[k].labels = SoftLabels::from_estimates(cm, im)?;
        }
    }
    let metrics = epoch_metrics(state, splits, cfg, 0, &losses)?;
    state.history.push(metrics);
    Ok(())
}

/// One epoch of co-training followed by the label update.
pub fn train_epoch(state: &mut RunState, splits: &Splits, cfg: &TrainConfig) -> Result<()> {
    let epoch = state.epoch + 1;
    let view = TrainView::new(&splits.train);
    let lr = cfg.lr_at(epoch);
    let phase = phase_of_epoch(cfg, epoch);
    let mut losses = EpochLosses {
        cm: 0.0,
        im: 0.0,
        batches: 0,
    };
    let collect = cfg.mode.estimates_labels();
    let mut pending = Vec::with_capacity(state.nets.len());
    for k in 0..state.nets.len() {
        let weights = state.stores[k].labels.y.clone();
        pending.push(pass(state, &view, cfg, k, phase, Some(lr), &weights, collect, &mut losses)?);
    }
    for (k, est) in pending.into_iter().enumerate() {
        if let Some(est) = est {
            let (cm, im) = finalize_estimates(cfg, est)?;
            let store = &mut state.stores[k];
            store.labels = ensemble_update(&store.labels, &cm, &im, cfg.beta1, cfg.beta2)?;
        }
    }
    state.epoch = epoch;
    let metrics = epoch_metrics(state, splits, cfg, epoch, &losses)?;
    state.history.push(metrics);
    Ok(())
}

/// Similarity averaged over all networks.
pub fn ensemble_similarity(nets: &[Network], img: &Matrix, txt: &Matrix) -> Result<Matrix> {
    let mut total: Option<Matrix> = None;
    for net in nets {
        let s = net.similarity(img, txt)?;
        match total.as_mut() {
            Some(t) => t.add_assign(&s)?,
            None => total = Some(s),
        }
    }
    let mut total = total.ok_or_else(|| invalid("no networks to evaluate"))?;
    total.scale(1.0 / nets.len() as f64);
    Ok(total)
}

/// Retrieval on a clean split using the identity correspondence.
pub fn evaluate(nets: &[Network], ds: &PairDataset) -> Result<RetrievalReport> {
    let sim = ensemble_similarity(nets, &ds.img_features, &ds.paired_txt())?;
    let gt: Vec<usize> = (0..ds.len()).collect();
    evaluate_retrieval(&sim, &gt)
}

fn epoch_metrics(
    state: &RunState,
    splits: &Splits,
    cfg: &TrainConfig,
    epoch: usize,
    losses: &EpochLosses,
) -> Result<EpochMetrics> {
    let dev = evaluate(&state.nets, &splits.dev)?;
    let det = detection_metrics(&state.mean_labels(), &splits.train.noise_mask)?;
    let denom = losses.batches.max(1) as f64;
    Ok(EpochMetrics {
        epoch,
        mode: cfg.mode,
        loss_cm: losses.cm / denom,
        loss_im: losses.im / denom,
        dev_r1_i2t: dev.i2t[0],
        dev_r1_t2i: dev.t2i[0],
        recall_sum: dev.recall_sum,
        det_acc: det.accuracy,
        det_auc: det.auc,
    })
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub history: Vec<EpochMetrics>,
    /// Epoch whose networks scored the best dev recall sum.
    pub best_epoch: usize,
    pub best_nets: Vec<Network>,
    pub final_labels: Vec<SoftLabels>,
    pub final_state: RunState,
    /// Test-split retrieval of `best_nets` and detection of the final labels.
    pub test_report: Report,
}

/// Hooks invoked after every logged epoch (epoch 0 is the post-warm-up state).
pub trait RunObserver {
    fn on_epoch(&mut self, _metrics: &EpochMetrics, _state: &RunState) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}

pub fn run(cfg: &TrainConfig, splits: &Splits) -> Result<RunResult> {
    run_with(cfg, splits, &mut ())
}

/// Warm-up, `cfg.epochs` training epochs, dev-based model selection and a
/// final test evaluation.
pub fn run_with(cfg: &TrainConfig, splits: &Splits, observer: &mut dyn RunObserver) -> Result<RunResult> {
    cfg.validate()?;
    for (name, ds) in [("dev", &splits.dev), ("test", &splits.test)] {
        if !ds.is_clean() {
            return Err(invalid(format!("{name} split must be clean")));
        }
    }
    let mut state = RunState::new(cfg, &splits.train)?;
    warmup(&mut state, splits, cfg)?;
    observer.on_epoch(state.history.last().expect("warm-up logs epoch 0"), &state)?;

    let mut best_epoch = 0;
    let mut best_sum = state.history[0].recall_sum;
    let mut best_nets = state.nets.clone();
    for _ in 0..cfg.epochs {
        train_epoch(&mut state, splits, cfg)?;
        let m = state.history.last().expect("epoch logged");
        observer.on_epoch(m, &state)?;
        if m.recall_sum > best_sum {
            best_sum = m.recall_sum;
            best_epoch = m.epoch;
            best_nets = state.nets.clone();
        }
    }

    let test = evaluate(&best_nets, &splits.test)?;
    let final_labels: Vec<SoftLabels> = state.stores.iter().map(|s| s.labels.clone()).collect();
    let detection = final_detection(&state, &splits.train)?;
    let test_report = assemble_report(
        test.i2t,
        test.t2i,
        Some(detection),
        ReportMeta {
            mode: cfg.mode.to_string(),
            noise: splits.train.meta.rho,
            seed: cfg.seed,
            best_epoch: Some(best_epoch),
        },
    );
    Ok(RunResult {
        history: state.history.clone(),
        best_epoch,
        best_nets,
        final_labels,
        final_state: state,
        test_report,
    })
}

fn final_detection(state: &RunState, train: &PairDataset) -> Result<DetectionReport> {
    detection_metrics(&state.mean_labels(), &train.noise_mask)
}
