//! Retrieval Recall@K and noise-detection metrics, plus report files.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::numerics::Matrix;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Percentage of queries (rows of `sim`) whose target `gt[i]` ranks in the
/// top `k` columns. Ranking is by descending similarity; equal scores rank
/// the lower column index first.
pub fn recall_at_k(sim: &Matrix, gt: &[usize], k: usize) -> Result<f64> {
    Ok(recall_at_ks(sim, gt, &[k])?[0])
}

/// Recall for several cut-offs from a single ranking pass.
pub fn recall_at_ks(sim: &Matrix, gt: &[usize], ks: &[usize]) -> Result<Vec<f64>> {
    let n = sim.rows();
    if !sim.is_square() {
        return Err(shape(format!("retrieval needs a square matrix, got {:?}", sim.shape())));
    }
    if gt.len() != n {
        return Err(shape(format!("{} targets for {n} queries", gt.len())));
    }
    for &k in ks {
        if k == 0 || k > n {
            return Err(invalid(format!("K must lie in 1..={n}, got {k}")));
        }
    }
    let mut hits = vec![0usize; ks.len()];
    for (i, &target) in gt.iter().enumerate() {
        if target >= n {
            return Err(invalid(format!("target {target} out of range")));
        }
        let row = sim.row(i);
        let t = row[target];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > t || (v == t && j < target))
            .count();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank < k {
                *h += 1;
            }
        }
    }
    Ok(hits.iter().map(|&h| 100.0 * h as f64 / n as f64).collect())
}

/// R@1/5/10 in both directions. `sim[i][j]` is image `i` vs text `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub i2t: [f64; 3],
    pub t2i: [f64; 3],
    pub recall_sum: f64,
}

impl RetrievalReport {
    pub fn from_parts(i2t: [f64; 3], t2i: [f64; 3]) -> Self {
        let recall_sum = i2t.iter().chain(&t2i).sum();
        Self { i2t, t2i, recall_sum }
    }
}

/// Evaluates image→text and text→image retrieval. `gt[i]` is the text
/// matching image `i`.
pub fn evaluate_retrieval(sim: &Matrix, gt: &[usize]) -> Result<RetrievalReport> {
    let i2t = recall_at_ks(sim, gt, &RECALL_KS)?;
    let mut inv = vec![0; gt.len()];
    for (i, &t) in gt.iter().enumerate() {
        inv[t] = i;
    }
    let t2i = recall_at_ks(&sim.transpose(), &inv, &RECALL_KS)?;
    Ok(RetrievalReport::from_parts(
        [i2t[0], i2t[1], i2t[2]],
        [t2i[0], t2i[1], t2i[2]],
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    /// Fraction of samples where `y >= 0.5` agrees with "clean".
    pub accuracy: f64,
    /// Probability a random clean sample outscores a random noisy one
    /// (ties count half). `None` when only one class is present.
    pub auc: Option<f64>,
    pub mean_clean: Option<f64>,
    pub mean_noisy: Option<f64>,
}

pub fn detection_metrics(y: &[f64], noise_mask: &[bool]) -> Result<DetectionReport> {
    if y.len() != noise_mask.len() {
        return Err(shape(format!("{} labels for {} mask entries", y.len(), noise_mask.len())));
    }
    if y.is_empty() {
        return Err(invalid("detection metrics need at least one sample"));
    }
    let correct = y
        .iter()
        .zip(noise_mask)
        .filter(|(&v, &noisy)| (v >= 0.5) == !noisy)
        .count();
    let accuracy = correct as f64 / y.len() as f64;

    let clean: Vec<f64> = y.iter().zip(noise_mask).filter(|(_, &m)| !m).map(|(&v, _)| v).collect();
    let noisy: Vec<f64> = y.iter().zip(noise_mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let auc = (!clean.is_empty() && !noisy.is_empty()).then(|| mann_whitney_auc(y, noise_mask, clean.len()));
    Ok(DetectionReport {
        accuracy,
        auc,
        mean_clean: mean(&clean),
        mean_noisy: mean(&noisy),
    })
}

/// Rank-sum AUC with mid-ranks for ties.
fn mann_whitney_auc(y: &[f64], noise_mask: &[bool], n_clean: usize) -> f64 {
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
    let mut rank_sum_clean = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && y[order[end]] == y[order[start]] {
            end += 1;
        }
        // ranks are 1-based; tied block [start, end) shares the mean rank
        let mid = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            if !noise_mask[idx] {
                rank_sum_clean += mid;
            }
        }
        start = end;
    }
    let n_noisy = y.len() - n_clean;
    let u = rank_sum_clean - (n_clean * (n_clean + 1)) as f64 / 2.0;
    u / (n_clean as f64 * n_noisy as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub mode: String,
    pub noise: f64,
    pub seed: u64,
    #[serde(default)]
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub meta: ReportMeta,
    pub retrieval: RetrievalReport,
    pub detection: Option<DetectionReport>,
}

pub fn assemble_report(
    i2t: [f64; 3],
    t2i: [f64; 3],
    detection: Option<DetectionReport>,
    meta: ReportMeta,
) -> Report {
    Report {
        meta,
        retrieval: RetrievalReport::from_parts(i2t, t2i),
        detection,
    }
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn summary_row(&self) -> SummaryRow {
        let r = &self.retrieval;
        SummaryRow {
            mode: self.meta.mode.clone(),
            noise: self.meta.noise,
            r1_i2t: r.i2t[0],
            r5_i2t: r.i2t[1],
            r10_i2t: r.i2t[2],
            r1_t2i: r.t2i[0],
            r5_t2i: r.t2i[1],
            r10_t2i: r.t2i[2],
            rsum: r.recall_sum,
            det_acc: self.detection.as_ref().map(|d| d.accuracy),
            det_auc: self.detection.as_ref().and_then(|d| d.auc),
        }
    }
}

pub const SUMMARY_HEADER: [&str; 11] = [
    "mode", "noise", "r1_i2t", "r5_i2t", "r10_i2t", "r1_t2i", "r5_t2i", "r10_t2i", "rsum", "det_acc", "det_auc",
];

/// One line of the summary CSV; field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: String,
    pub noise: f64,
    pub r1_i2t: f64,
    pub r5_i2t: f64,
    pub r10_i2t: f64,
    pub r1_t2i: f64,
    pub r5_t2i: f64,
    pub r10_t2i: f64,
    pub rsum: f64,
    pub det_acc: Option<f64>,
    pub det_auc: Option<f64>,
}

/// CSV writer that flushes after every row so partial sweeps survive.
pub struct SummaryWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> SummaryWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        inner.write_record(SUMMARY_HEADER)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &SummaryRow) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identity_similarity_gives_full_recall() {
        let s = Matrix::identity(6);
        let gt: Vec<usize> = (0..6).collect();
        assert_eq!(recall_at_k(&s, &gt, 1).unwrap(), 100.0);
    }

    #[test]
    fn constant_similarity_uses_index_tie_break() {
        let n = 20;
        let s = Matrix::filled(n, n, 0.5);
        let gt: Vec<usize> = (0..n).collect();
        for k in [1, 5, 10] {
            assert_relative_eq!(recall_at_k(&s, &gt, k).unwrap(), 100.0 * k as f64 / n as f64);
        }
    }

    #[test]
    fn k_out_of_range() {
        let s = Matrix::identity(3);
        assert!(recall_at_k(&s, &[0, 1, 2], 4).is_err());
        assert!(recall_at_k(&s, &[0, 1, 2], 0).is_err());
        assert!(recall_at_k(&Matrix::zeros(2, 3), &[0, 1], 1).is_err());
    }

    #[test]
    fn perfect_and_constant_detection() {
        let mask = [false, true, false, true, false];
        let y = [1.0, 0.0, 1.0, 0.0, 1.0];
        let d = detection_metrics(&y, &mask).unwrap();
        assert_eq!(d.accuracy, 1.0);
        assert_eq!(d.auc, Some(1.0));
        let flat = detection_metrics(&[0.7; 5], &mask).unwrap();
        assert_eq!(flat.auc, Some(0.5));
        assert_relative_eq!(flat.accuracy, 0.6);
    }

    #[test]
    fn single_class_has_no_auc() {
        let d = detection_metrics(&[0.9, 0.2, 0.8], &[false; 3]).unwrap();
        assert_eq!(d.auc, None);
        assert_relative_eq!(d.accuracy, 2.0 / 3.0);
        assert_eq!(d.mean_noisy, None);
    }

    #[test]
    fn report_sum_and_round_trip() {
        let meta = ReportMeta {
            mode: "gsc".into(),
            noise: 0.4,
            seed: 1,
            best_epoch: Some(3),
        };
        let r = assemble_report([10.0, 20.0, 30.0], [10.0, 20.0, 30.0], None, meta);
        assert_eq!(r.retrieval.recall_sum, 120.0);
        assert_eq!(Report::from_json(&r.to_json().unwrap()).unwrap(), r);
    }

    #[test]
    fn summary_csv_header() {
        let mut buf = Vec::new();
        {
            let mut w = SummaryWriter::new(&mut buf).unwrap();
            let meta = ReportMeta {
                mode: "baseline".into(),
                noise: 0.2,
                seed: 0,
                best_epoch: None,
            };
            w.write(&assemble_report([1.0, 2.0, 3.0], [4.0, 5.0, 6.0], None, meta).summary_row())
                .unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "mode,noise,r1_i2t,r5_i2t,r10_i2t,r1_t2i,r5_t2i,r10_t2i,rsum,det_acc,det_auc"
        );
        assert_eq!(lines.next().unwrap(), "baseline,0.2,1.0,2.0,3.0,4.0,5.0,6.0,21.0,,");
    }
}
