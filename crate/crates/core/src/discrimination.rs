//! Per-sample correspondence estimates.
//!
//! Two independent views of whether pair `i` is genuinely matched:
//!
//! * cross-modal: how much of the row/column softmax mass of the image-text
//!   similarity matrix sits on the diagonal;
//! * intra-modal: how well the image's similarity profile against the other
//!   images agrees with the text's profile against the other texts, turned
//!   into a probability by a two-component Gaussian mixture fitted over all
//!   samples.
//!
//! The combined label is the elementwise minimum, smoothed across epochs by
//! momentum.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::numerics::{cosine, lse_unchecked, softmax_cols, softmax_rows, Matrix};

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-4;
pub const DEFAULT_EM_ITERS: usize = 50;
const EM_TOL: f64 = 1e-8;

/// `y_cm[i] = ½ (row_softmax(S/τ)[i,i] + col_softmax(S/τ)[i,i])`.
pub fn cross_modal_indicator(sim: &Matrix, tau1: f64) -> Result<Vec<f64>> {
    if !sim.is_square() {
        return Err(shape(format!("indicator needs a square matrix, got {:?}", sim.shape())));
    }
    let rows = softmax_rows(sim, tau1)?;
    let cols = softmax_cols(sim, tau1)?;
    Ok((0..sim.rows())
        .map(|i| 0.5 * (rows[(i, i)] + cols[(i, i)]))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructureScores {
    pub scores: Vec<f64>,
    /// Rows whose weighted structure vector had zero norm (score forced to 0).
    pub degenerate: Vec<bool>,
}

impl StructureScores {
    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|&&d| d).count()
    }
}

/// Label-weighted cosine between row `i` of the image-image and the
/// text-text similarity matrices. Column `j` of both rows is scaled by
/// `y[j]`, so suspected-noisy samples drop out of each structure vector.
pub fn intra_structure_score(s_ii: &Matrix, s_tt: &Matrix, y: &[f64]) -> Result<StructureScores> {
    if !s_ii.is_square() || s_ii.shape() != s_tt.shape() {
        return Err(shape(format!(
            "structure matrices must be square and equal: {:?} vs {:?}",
            s_ii.shape(),
            s_tt.shape()
        )));
    }
    if y.len() != s_ii.rows() {
        return Err(shape(format!("{} weights for {} samples", y.len(), s_ii.rows())));
    }
    let n = y.len();
    let mut scores = Vec::with_capacity(n);
    let mut degenerate = Vec::with_capacity(n);
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            u[j] = y[j] * s_ii[(i, j)];
            v[j] = y[j] * s_tt[(i, j)];
        }
        let c = cosine(&u, &v)?;
        scores.push(c.value);
        degenerate.push(c.degenerate);
    }
    Ok(StructureScores { scores, degenerate })
}

/// Two-component 1-D Gaussian mixture. `clean` indexes the higher-mean
/// component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub clean: usize,
}

impl GmmModel {
    pub fn new(weights: [f64; 2], means: [f64; 2], variances: [f64; 2]) -> Self {
        let clean = if means[1] > means[0] { 1 } else { 0 };
        Self {
            weights,
            means,
            variances,
            clean,
        }
    }

    fn log_joint(&self, s: f64) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (k, o) in out.iter_mut().enumerate() {
            let var = self.variances[k];
            let d = s - self.means[k];
            *o = self.weights[k].ln() - 0.5 * (2.0 * std::f64::consts::PI * var).ln() - d * d / (2.0 * var);
        }
        out
    }

    pub fn log_likelihood(&self, scores: &[f64]) -> f64 {
        scores.iter().map(|&s| lse_unchecked(&self.log_joint(s))).sum()
    }
}

/// Posterior probability that `s` came from the clean component.
pub fn gmm_posterior(g: &GmmModel, s: f64) -> f64 {
    let lj = g.log_joint(s);
    (lj[g.clean] - lse_unchecked(&lj)).exp()
}

/// EM fit; see [`gmm_fit_trace`].
pub fn gmm_fit(scores: &[f64], max_iters: usize, floor: f64) -> Result<GmmModel> {
    Ok(gmm_fit_trace(scores, max_iters, floor)?.0)
}

/// EM fit that also returns the log-likelihood after initialisation and
/// after every iteration.
///
/// Initialisation splits the sorted scores at the median: each half gives
/// one component's mean and variance, with equal weights. Variances never
/// drop below `floor`. Stops after `max_iters` iterations or once the
/// log-likelihood improves by less than 1e-8.
pub fn gmm_fit_trace(scores: &[f64], max_iters: usize, floor: f64) -> Result<(GmmModel, Vec<f64>)> {
    if scores.len() < 4 {
        return Err(invalid(format!("GMM fit needs at least 4 scores, got {}", scores.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(invalid("GMM scores must be finite"));
    }
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(invalid(format!("variance floor must be positive, got {floor}")));
    }

    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = sorted.split_at(sorted.len() / 2);
    let moments = |half: &[f64]| {
        let m = half.iter().sum::<f64>() / half.len() as f64;
        let v = half.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / half.len() as f64;
        (m, v.max(floor))
    };
    let (m0, v0) = moments(lo);
    let (m1, v1) = moments(hi);
    let mut model = GmmModel::new([0.5, 0.5], [m0, m1], [v0, v1]);

    let n = scores.len();
    let mut trace = vec![model.log_likelihood(scores)];
    let mut resp = vec![[0.0f64; 2]; n];
    for _ in 0..max_iters {
        for (r, &s) in resp.iter_mut().zip(scores) {
            let lj = model.log_joint(s);
            let z = lse_unchecked(&lj);
            *r = [(lj[0] - z).exp(), (lj[1] - z).exp()];
        }
        let mut next = model.clone();
        for k in 0..2 {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            if nk <= f64::MIN_POSITIVE {
                continue;
            }
            let mean = resp.iter().zip(scores).map(|(r, s)| r[k] * s).sum::<f64>() / nk;
            let var = resp
                .iter()
                .zip(scores)
                .map(|(r, s)| r[k] * (s - mean) * (s - mean))
                .sum::<f64>()
                / nk;
            next.weights[k] = (nk / n as f64).clamp(1e-12, 1.0 - 1e-12);
            next.means[k] = mean;
            next.variances[k] = var.max(floor);
        }
        let total = next.weights[0] + next.weights[1];
        next.weights = [next.weights[0] / total, next.weights[1] / total];
        next.clean = if next.means[1] > next.means[0] { 1 } else { 0 };

        let ll = next.log_likelihood(scores);
        let prev = *trace.last().expect("trace seeded");
        model = next;
        trace.push(ll);
        if ll - prev < EM_TOL {
            break;
        }
    }
    Ok((model, trace))
}

pub fn combine_labels(y_cm: &[f64], y_im: &[f64]) -> Result<Vec<f64>> {
    if y_cm.len() != y_im.len() {
        return Err(shape(format!("label lengths {} and {}", y_cm.len(), y_im.len())));
    }
    Ok(y_cm.iter().zip(y_im).map(|(a, b)| a.min(*b)).collect())
}

/// Soft correspondence labels for one training set, with the previous
/// epoch's estimates kept for momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabels {
    pub y_cm: Vec<f64>,
    pub y_im: Vec<f64>,
    pub y: Vec<f64>,
    pub prev_cm: Vec<f64>,
    pub prev_im: Vec<f64>,
    pub epoch: usize,
}

impl SoftLabels {
    /// Every pair trusted fully.
    pub fn ones(n: usize) -> Self {
        Self {
            y_cm: vec![1.0; n],
            y_im: vec![1.0; n],
            y: vec![1.0; n],
            prev_cm: vec![1.0; n],
            prev_im: vec![1.0; n],
            epoch: 0,
        }
    }

    /// Initial labels taken directly from raw estimates, no smoothing.
    pub fn from_estimates(y_cm: Vec<f64>, y_im: Vec<f64>) -> Result<Self> {
        let y = combine_labels(&y_cm, &y_im)?;
        Ok(Self {
            prev_cm: y_cm.clone(),
            prev_im: y_im.clone(),
            y_cm,
            y_im,
            y,
            epoch: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Momentum update of both estimates followed by the minimum:
/// `y_cm ← β1·new_cm + (1−β1)·y_cm`, likewise for `y_im` with `β2`.
pub fn ensemble_update(
    labels: &SoftLabels,
    new_cm: &[f64],
    new_im: &[f64],
    beta1: f64,
    beta2: f64,
) -> Result<SoftLabels> {
    for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
        if !(0.0..=1.0).contains(&b) {
            return Err(invalid(format!("{name} must lie in [0, 1], got {b}")));
        }
    }
    let n = labels.len();
    if new_cm.len() != n || new_im.len() != n {
        return Err(shape(format!(
            "estimates of length {}/{} for {n} labels",
            new_cm.len(),
            new_im.len()
        )));
    }
    let mix = |b: f64, new: &[f64], old: &[f64]| -> Vec<f64> {
        new.iter()
            .zip(old)
            .map(|(x, p)| (b * x + (1.0 - b) * p).clamp(0.0, 1.0))
            .collect()
    };
    let y_cm = mix(beta1, new_cm, &labels.y_cm);
    let y_im = mix(beta2, new_im, &labels.y_im);
    let y = combine_labels(&y_cm, &y_im)?;
    Ok(SoftLabels {
        prev_cm: labels.y_cm.clone(),
        prev_im: labels.y_im.clone(),
        y_cm,
        y_im,
        y,
        epoch: labels.epoch + 1,
    })
}

/// One line of the optional per-epoch label dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub epoch: usize,
    pub idx: usize,
    pub y_cm: f64,
    pub y_im: f64,
    pub y: f64,
    pub is_noisy_gt: bool,
}

pub fn write_label_dump<W: Write>(
    out: &mut W,
    epoch: usize,
    labels: &SoftLabels,
    noise_mask: &[bool],
) -> Result<()> {
    if noise_mask.len() != labels.len() {
        return Err(shape("noise mask length disagrees with labels"));
    }
    for (idx, &is_noisy_gt) in noise_mask.iter().enumerate() {
        let row = LabelRow {
            epoch,
            idx,
            y_cm: labels.y_cm[idx],
            y_im: labels.y_im[idx],
            y: labels.y[idx],
            is_noisy_gt,
        };
        serde_json::to_writer(&mut *out, &row)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn indicator_single_and_uniform() {
        let one = Matrix::from_rows(&[[0.3]]).unwrap();
        assert_eq!(cross_modal_indicator(&one, 0.07).unwrap(), vec![1.0]);
        let flat = Matrix::filled(4, 4, 0.2);
        for v in cross_modal_indicator(&flat, 0.07).unwrap() {
            assert_relative_eq!(v, 0.25, epsilon = 1e-15);
        }
        assert!(cross_modal_indicator(&Matrix::zeros(2, 3), 1.0).is_err());
    }

    #[test]
    fn indicator_identity_two_by_two() {
        let s = Matrix::identity(2);
        let e = std::f64::consts::E;
        for v in cross_modal_indicator(&s, 1.0).unwrap() {
            assert_relative_eq!(v, e / (e + 1.0), epsilon = 1e-15);
        }
    }

    #[test]
    fn structure_score_identical_rows() {
        let s = Matrix::from_rows(&[[1.0, 0.2, -0.1], [0.2, 1.0, 0.4], [-0.1, 0.4, 1.0]]).unwrap();
        let out = intra_structure_score(&s, &s, &[1.0; 3]).unwrap();
        for v in out.scores {
            assert_relative_eq!(v, 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn structure_score_zero_weights_is_degenerate() {
        let s = Matrix::identity(3);
        let out = intra_structure_score(&s, &s, &[0.0; 3]).unwrap();
        assert_eq!(out.scores, vec![0.0; 3]);
        assert_eq!(out.degenerate_count(), 3);
        assert!(intra_structure_score(&s, &Matrix::identity(2), &[1.0; 3]).is_err());
        assert!(intra_structure_score(&s, &s, &[1.0; 2]).is_err());
    }

    #[test]
    fn gmm_recovers_two_clusters() {
        let mut scores = vec![0.1; 50];
        scores.extend(vec![0.9; 50]);
        let g = gmm_fit(&scores, DEFAULT_EM_ITERS, DEFAULT_VARIANCE_FLOOR).unwrap();
        assert!((g.means[g.clean] - 0.9).abs() < 0.02);
        assert!((g.means[1 - g.clean] - 0.1).abs() < 0.02);
        assert!(gmm_posterior(&g, 0.9) > 0.99);
        assert!(gmm_posterior(&g, 0.1) < 0.01);
    }

    #[test]
    fn gmm_identical_scores() {
        let g = gmm_fit(&[0.42; 20], 50, 1e-4).unwrap();
        assert_eq!(g.means, [0.42, 0.42]);
        assert_eq!(g.variances, [1e-4, 1e-4]);
        for s in [0.0, 0.42, 1.0] {
            assert_relative_eq!(gmm_posterior(&g, s), 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn gmm_needs_four_scores() {
        assert!(gmm_fit(&[0.1, 0.2, 0.3], 10, 1e-4).is_err());
        assert!(gmm_fit(&[0.1, 0.2, f64::NAN, 0.3], 10, 1e-4).is_err());
    }

    #[test]
    fn posterior_symmetry_and_tail() {
        let g = GmmModel::new([0.5, 0.5], [0.2, 0.8], [0.01, 0.01]);
        assert_relative_eq!(gmm_posterior(&g, 0.5), 0.5, epsilon = 1e-12);
        assert!(gmm_posterior(&g, 0.8 + 10.0 * 0.1) > 0.999);
    }

    #[test]
    fn combine_is_min() {
        assert_eq!(combine_labels(&[1.0], &[0.3]).unwrap(), vec![0.3]);
        assert_eq!(combine_labels(&[0.4, 0.7], &[0.4, 0.7]).unwrap(), vec![0.4, 0.7]);
        assert!(combine_labels(&[1.0], &[1.0, 0.5]).is_err());
    }

    #[test]
    fn ensemble_cases() {
        let prev = SoftLabels::from_estimates(vec![0.5, 0.2], vec![0.5, 0.9]).unwrap();
        let out = ensemble_update(&prev, &[1.0, 0.2], &[1.0, 0.1], 0.7, 0.7).unwrap();
        assert_relative_eq!(out.y_cm[0], 0.85, epsilon = 1e-15);
        assert_relative_eq!(out.y_im[0], 0.85, epsilon = 1e-15);
        assert_eq!(out.prev_cm, prev.y_cm);
        assert_eq!(out.epoch, 1);
        assert_eq!(out.y, combine_labels(&out.y_cm, &out.y_im).unwrap());

        let full = ensemble_update(&prev, &[0.3, 0.6], &[0.9, 0.1], 1.0, 1.0).unwrap();
        assert_eq!(full.y_cm, vec![0.3, 0.6]);
        assert_eq!(full.y_im, vec![0.9, 0.1]);
        assert!(ensemble_update(&prev, &[0.3, 0.6], &[0.9, 0.1], 1.1, 0.5).is_err());
        assert!(ensemble_update(&prev, &[0.3], &[0.9, 0.1], 0.5, 0.5).is_err());
    }

    #[test]
    fn label_dump_lines() {
        let labels = SoftLabels::from_estimates(vec![0.9, 0.1], vec![0.8, 0.3]).unwrap();
        let mut buf = Vec::new();
        write_label_dump(&mut buf, 3, &labels, &[false, true]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<LabelRow> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].epoch, 3);
        assert!(rows[1].is_noisy_gt);
        assert_eq!(rows[0].y, 0.8);
    }
}
