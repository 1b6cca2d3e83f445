//! Label-weighted contrastive objectives and their analytic gradients.
//!
//! For a mini-batch of `B` pairs with embeddings `E_I`, `E_T` (unit rows):
//!
//! ```text
//! S = E_I E_Tᵀ        cross-modal similarities
//! P = E_I E_Iᵀ        image-image similarities
//! Q = E_T E_Tᵀ        text-text similarities
//!
//! L_cm = -(1/2B) [ Σ_i y_i log rowsoftmax(S/τ1)_ii + Σ_j y_j log colsoftmax(S/τ1)_jj ]
//! W    = P diag(y²) Qᵀ,   w_ij = Σ_k y_k² P_ik Q_jk
//! L_im = -(1/B) Σ_i log rowsoftmax(W/τ2)_ii
//! L    = L_cm + γ L_im
//! ```
//!
//! The labels `y` are constants here: they come from the other network and
//! are refreshed outside the gradient step.

use serde::{Deserialize, Serialize};

use crate::error::{shape, GscError, Result};
use crate::model::{sim_matrix, Encoder, EncoderGrads, Modality};
use crate::numerics::{lse_unchecked, softmax_cols, softmax_rows, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau1: 0.07,
            tau2: 1.0,
            gamma: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cm: f64,
    pub l_im: f64,
    pub total: f64,
    pub gamma: f64,
}

pub fn total_loss(l_cm: f64, l_im: f64, gamma: f64) -> LossReport {
    LossReport {
        l_cm,
        l_im,
        total: l_cm + gamma * l_im,
        gamma,
    }
}

/// Paired mini-batch: row `i` of `img` goes with row `i` of `txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub img: Matrix,
    pub txt: Matrix,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.img.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.img.rows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    pub img: EncoderGrads,
    pub txt: EncoderGrads,
}

impl GradSet {
    pub fn all_finite(&self) -> bool {
        self.img.all_finite() && self.txt.all_finite()
    }

    pub fn scale(&mut self, factor: f64) {
        self.img.scale(factor);
        self.txt.scale(factor);
    }
}

fn check_weights(n: usize, y: &[f64]) -> Result<()> {
    if y.len() != n {
        return Err(shape(format!("{} labels for a batch of {n}", y.len())));
    }
    Ok(())
}

fn check_square(m: &Matrix, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(shape(format!("{what} must be square, got {:?}", m.shape())));
    }
    Ok(())
}

/// Negative log of the diagonal softmax entries of `m / tau`, per row.
fn diag_neg_log_softmax(m: &Matrix, tau: f64) -> Vec<f64> {
    let mut buf = vec![0.0; m.cols()];
    (0..m.rows())
        .map(|i| {
            for (b, v) in buf.iter_mut().zip(m.row(i)) {
                *b = v / tau;
            }
            lse_unchecked(&buf) - m[(i, i)] / tau
        })
        .collect()
}

pub fn loss_cm(sim: &Matrix, y: &[f64], tau1: f64) -> Result<f64> {
    check_square(sim, "cross-modal similarity")?;
    check_weights(sim.rows(), y)?;
    softmax_rows(sim, tau1)?; // validates tau and finiteness
    let b = sim.rows() as f64;
    let rows = diag_neg_log_softmax(sim, tau1);
    let cols = diag_neg_log_softmax(&sim.transpose(), tau1);
    let total: f64 = y.iter().zip(rows.iter().zip(&cols)).map(|(w, (r, c))| w * (r + c)).sum();
    Ok(total / (2.0 * b))
}

/// `W = P diag(y²) Qᵀ`.
fn structure_logits(s_ii: &Matrix, s_tt: &Matrix, y: &[f64]) -> Result<Matrix> {
    let mut weighted = s_ii.clone();
    for r in 0..weighted.rows() {
        for (v, w) in weighted.row_mut(r).iter_mut().zip(y) {
            *v *= w * w;
        }
    }
    weighted.matmul_t(s_tt)
}

pub fn loss_im(s_ii: &Matrix, s_tt: &Matrix, y: &[f64], tau2: f64) -> Result<f64> {
    check_square(s_ii, "image structure")?;
    if s_ii.shape() != s_tt.shape() {
        return Err(shape(format!("structure shapes {:?} vs {:?}", s_ii.shape(), s_tt.shape())));
    }
    check_weights(s_ii.rows(), y)?;
    let w = structure_logits(s_ii, s_tt, y)?;
    softmax_rows(&w, tau2)?;
    let terms = diag_neg_log_softmax(&w, tau2);
    Ok(terms.iter().sum::<f64>() / s_ii.rows() as f64)
}

/// `dL_cm/dS = (1/2Bτ) [ y_i (R_ij − δ_ij) + y_j (C_ij − δ_ij) ]` with `R`
/// and `C` the row and column softmaxes.
fn loss_cm_grad(sim: &Matrix, y: &[f64], tau1: f64) -> Result<Matrix> {
    let rows = softmax_rows(sim, tau1)?;
    let cols = softmax_cols(sim, tau1)?;
    let n = sim.rows();
    let scale = 1.0 / (2.0 * n as f64 * tau1);
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            g[(i, j)] = scale * (y[i] * (rows[(i, j)] - delta) + y[j] * (cols[(i, j)] - delta));
        }
    }
    Ok(g)
}

/// Gradients of `L_im` with respect to `P` and `Q`.
fn loss_im_grad(s_ii: &Matrix, s_tt: &Matrix, y: &[f64], tau2: f64) -> Result<(Matrix, Matrix)> {
    let w = structure_logits(s_ii, s_tt, y)?;
    let n = w.rows();
    let mut gw = softmax_rows(&w, tau2)?;
    for i in 0..n {
        gw[(i, i)] -= 1.0;
    }
    gw.scale(1.0 / (n as f64 * tau2));

    // dP = G_W Q D, dQ = G_Wᵀ P D, with D = diag(y²) scaling columns.
    let scale_cols = |mut m: Matrix| {
        for r in 0..m.rows() {
            for (v, w) in m.row_mut(r).iter_mut().zip(y) {
                *v *= w * w;
            }
        }
        m
    };
    let dp = scale_cols(gw.matmul(s_tt)?);
    let dq = scale_cols(gw.t_matmul(s_ii)?);
    Ok((dp, dq))
}

fn finite_or(m: &Matrix, stage: &str) -> Result<()> {
    if m.all_finite() {
        Ok(())
    } else {
        Err(GscError::NonFinite { stage: stage.into() })
    }
}

/// Forward-only loss for one batch.
pub fn batch_loss(
    enc_img: &Encoder,
    enc_txt: &Encoder,
    batch: &PairBatch,
    y: &[f64],
    cfg: &LossConfig,
) -> Result<LossReport> {
    check_weights(batch.len(), y)?;
    let ei = enc_img.encode(&batch.img)?;
    let et = enc_txt.encode(&batch.txt)?;
    let s = sim_matrix(&ei, &et)?;
    let p = sim_matrix(&ei, &ei)?;
    let q = sim_matrix(&et, &et)?;
    let l_cm = loss_cm(&s, y, cfg.tau1)?;
    let l_im = loss_im(&p, &q, y, cfg.tau2)?;
    Ok(total_loss(l_cm, l_im, cfg.gamma))
}

/// Loss and analytic gradient of `L_cm + γ L_im` for both encoders.
pub fn grad_total(
    enc_img: &Encoder,
    enc_txt: &Encoder,
    batch: &PairBatch,
    y: &[f64],
    cfg: &LossConfig,
) -> Result<(LossReport, GradSet)> {
    check_weights(batch.len(), y)?;
    let (ei, cache_i) = enc_img.forward(&batch.img)?;
    let (et, cache_t) = enc_txt.forward(&batch.txt)?;
    finite_or(&ei.emb, "image embedding")?;
    finite_or(&et.emb, "text embedding")?;

    let s = sim_matrix(&ei, &et)?;
    let p = sim_matrix(&ei, &ei)?;
    let q = sim_matrix(&et, &et)?;
    let l_cm = loss_cm(&s, y, cfg.tau1)?;
    let l_im = loss_im(&p, &q, y, cfg.tau2)?;
    let report = total_loss(l_cm, l_im, cfg.gamma);
    if !report.total.is_finite() {
        return Err(GscError::NonFinite { stage: "loss".into() });
    }

    let ds = loss_cm_grad(&s, y, cfg.tau1)?;
    let (mut dp, mut dq) = loss_im_grad(&p, &q, y, cfg.tau2)?;
    // P = E Eᵀ, so dE = (dP + dPᵀ) E
    let symmetrize = |m: &mut Matrix, gamma: f64| {
        let t = m.transpose();
        m.add_assign(&t).expect("square");
        m.scale(gamma);
    };
    symmetrize(&mut dp, cfg.gamma);
    symmetrize(&mut dq, cfg.gamma);

    let mut d_ei = ds.matmul(&et.emb)?;
    d_ei.add_assign(&dp.matmul(&ei.emb)?)?;
    let mut d_et = ds.t_matmul(&ei.emb)?;
    d_et.add_assign(&dq.matmul(&et.emb)?)?;
    finite_or(&d_ei, "image embedding gradient")?;
    finite_or(&d_et, "text embedding gradient")?;

    let grads = GradSet {
        img: enc_img.backward(&cache_i, &d_ei)?,
        txt: enc_txt.backward(&cache_t, &d_et)?,
    };
    if !grads.all_finite() {
        return Err(GscError::NonFinite {
            stage: "parameter gradient".into(),
        });
    }
    Ok((report, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Address of one scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId {
    pub encoder: Modality,
    pub layer: usize,
    pub kind: ParamKind,
    pub index: usize,
}

impl std::fmt::Display for ParamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}.layer{}.{:?}[{}]", self.encoder, self.layer, self.kind, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<ParamId>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub h: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Relative error denominators never drop below this, so coordinates whose
/// true gradient is ~0 are judged on absolute error instead.
pub const FD_REL_FLOOR: f64 = 1e-7;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_REL_FLOOR)
}

/// Central-difference check of [`grad_total`] over every parameter.
pub fn fd_check(
    enc_img: &Encoder,
    enc_txt: &Encoder,
    batch: &PairBatch,
    y: &[f64],
    cfg: &LossConfig,
    h: f64,
    tol: f64,
) -> Result<FdReport> {
    let (_, analytic) = grad_total(enc_img, enc_txt, batch, y, cfg)?;
    compare_with_fd(enc_img, enc_txt, batch, y, cfg, &analytic, h, tol)
}

/// Compares a supplied gradient against central differences of the loss.
#[allow(clippy::too_many_arguments)]
pub fn compare_with_fd(
    enc_img: &Encoder,
    enc_txt: &Encoder,
    batch: &PairBatch,
    y: &[f64],
    cfg: &LossConfig,
    analytic: &GradSet,
    h: f64,
    tol: f64,
) -> Result<FdReport> {
    let mut report = FdReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        h,
        tol,
        pass: true,
    };
    for (modality, grads) in [(Modality::Image, &analytic.img), (Modality::Text, &analytic.txt)] {
        let base = if modality == Modality::Image { enc_img } else { enc_txt };
        for (li, lg) in grads.layers.iter().enumerate() {
            for (kind, values) in [(ParamKind::Weight, lg.weight.as_slice()), (ParamKind::Bias, &lg.bias[..])] {
                for (index, &a) in values.iter().enumerate() {
                    let eval = |delta: f64| -> Result<f64> {
                        let mut enc = base.clone();
                        let layer = &mut enc.layers[li];
                        match kind {
                            ParamKind::Weight => layer.weight.as_mut_slice()[index] += delta,
                            ParamKind::Bias => layer.bias[index] += delta,
                        }
                        let r = if modality == Modality::Image {
                            batch_loss(&enc, enc_txt, batch, y, cfg)?
                        } else {
                            batch_loss(enc_img, &enc, batch, y, cfg)?
                        };
                        Ok(r.total)
                    };
                    let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
                    let err = relative_error(a, numeric);
                    report.checked += 1;
                    if err > report.max_rel_err || report.worst.is_none() {
                        report.max_rel_err = err;
                        report.worst = Some(ParamId {
                            encoder: modality,
                            layer: li,
                            kind,
                            index,
                        });
                        report.worst_analytic = a;
                        report.worst_numeric = numeric;
                    }
                }
            }
        }
    }
    report.pass = tol.is_infinite() || report.max_rel_err < tol;
    Ok(report)
}

/// A small random instance for gradient checking: freshly initialised
/// encoders, standard-normal features and labels drawn from [0.1, 1].
#[derive(Debug, Clone)]
pub struct FdProblem {
    pub enc_img: Encoder,
    pub enc_txt: Encoder,
    pub batch: PairBatch,
    pub y: Vec<f64>,
}

impl FdProblem {
    pub fn random(seed: u64, batch_size: usize, img_dims: &[usize], txt_dims: &[usize]) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let enc_img = Encoder::new(Modality::Image, img_dims, &mut rng)?;
        let enc_txt = Encoder::new(Modality::Text, txt_dims, &mut rng)?;
        if enc_img.output_dim() != enc_txt.output_dim() {
            return Err(shape("encoders must share the embedding width"));
        }
        let mut features = |d: usize| {
            Matrix::from_vec(batch_size, d, (0..batch_size * d).map(|_| rng.normal()).collect())
        };
        let batch = PairBatch {
            img: features(img_dims[0])?,
            txt: features(txt_dims[0])?,
        };
        let y = (0..batch_size).map(|_| rng.uniform(0.1, 1.0)).collect();
        Ok(Self {
            enc_img,
            enc_txt,
            batch,
            y,
        })
    }

    pub fn check(&self, cfg: &LossConfig, h: f64, tol: f64) -> Result<FdReport> {
        fd_check(&self.enc_img, &self.enc_txt, &self.batch, &self.y, cfg, h, tol)
    }

    /// Checks a deliberately wrong gradient: the analytic one times `factor`.
    pub fn check_scaled(&self, cfg: &LossConfig, factor: f64, h: f64, tol: f64) -> Result<FdReport> {
        let (_, mut g) = grad_total(&self.enc_img, &self.enc_txt, &self.batch, &self.y, cfg)?;
        g.scale(factor);
        compare_with_fd(&self.enc_img, &self.enc_txt, &self.batch, &self.y, cfg, &g, h, tol)
    }
}
