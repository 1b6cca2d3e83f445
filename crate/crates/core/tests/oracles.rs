//! Library results against direct, unoptimised re-computations.

use approx::assert_relative_eq;
use gsc::discrimination::{cross_modal_indicator, gmm_posterior, intra_structure_score, GmmModel};
use gsc::evalmetrics::{detection_metrics, recall_at_k};
use gsc::losses::{loss_cm, loss_im};
use gsc::model::{Encoder, Layer, Modality};
use gsc::numerics::{Matrix, Rng};

fn random(n: usize, m: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(n, m, (0..n * m).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn close(a: f64, b: f64, rel: f64) {
    assert!((a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300), "{a} vs {b}");
}

fn oracle_loss_cm(s: &[Vec<f64>], y: &[f64], tau: f64) -> f64 {
    let b = s.len();
    let mut total = 0.0;
    for i in 0..b {
        let row: f64 = (0..b).map(|j| (s[i][j] / tau).exp()).sum();
        let col: f64 = (0..b).map(|j| (s[j][i] / tau).exp()).sum();
        let p_row = (s[i][i] / tau).exp() / row;
        let p_col = (s[i][i] / tau).exp() / col;
        total += y[i] * p_row.ln() + y[i] * p_col.ln();
    }
    -total / (2.0 * b as f64)
}

fn oracle_loss_im(p: &[Vec<f64>], q: &[Vec<f64>], y: &[f64], tau: f64) -> f64 {
    let b = p.len();
    let w = |i: usize, j: usize| (0..b).map(|k| y[k] * y[k] * p[i][k] * q[j][k]).sum::<f64>();
    let mut total = 0.0;
    for i in 0..b {
        let denom: f64 = (0..b).map(|j| (w(i, j) / tau).exp()).sum();
        total += ((w(i, i) / tau).exp() / denom).ln();
    }
    -total / b as f64
}

#[test]
fn losses_match_direct_sums() {
    for seed in 0..10 {
        let mut rng = Rng::new(seed);
        let b = 2 + seed as usize % 7;
        let s = random(b, b, &mut rng);
        let p = random(b, b, &mut rng);
        let q = random(b, b, &mut rng);
        let y: Vec<f64> = (0..b).map(|_| rng.uniform(0.0, 1.0)).collect();
        for tau in [0.07, 0.5, 1.0] {
            close(loss_cm(&s, &y, tau).unwrap(), oracle_loss_cm(&s.to_rows(), &y, tau), 1e-12);
            close(
                loss_im(&p, &q, &y, tau).unwrap(),
                oracle_loss_im(&p.to_rows(), &q.to_rows(), &y, tau),
                1e-12,
            );
        }
    }
}

#[test]
fn indicator_matches_direct_softmax() {
    for seed in 0..10 {
        let mut rng = Rng::new(100 + seed);
        let b = 2 + seed as usize;
        let s = random(b, b, &mut rng).to_rows();
        let tau = 0.07;
        let got = cross_modal_indicator(&Matrix::from_rows(&s).unwrap(), tau).unwrap();
        for i in 0..b {
            let e = |x: f64| (x / tau).exp();
            let row = e(s[i][i]) / (0..b).map(|j| e(s[i][j])).sum::<f64>();
            let col = e(s[i][i]) / (0..b).map(|j| e(s[j][i])).sum::<f64>();
            close(got[i], 0.5 * (row + col), 1e-12);
        }
    }
}

#[test]
fn structure_score_matches_weighted_cosine() {
    for seed in 0..10 {
        let mut rng = Rng::new(200 + seed);
        let b = 3 + seed as usize;
        let p = random(b, b, &mut rng).to_rows();
        let q = random(b, b, &mut rng).to_rows();
        let y: Vec<f64> = (0..b).map(|_| rng.uniform(0.05, 1.0)).collect();
        let got = intra_structure_score(&Matrix::from_rows(&p).unwrap(), &Matrix::from_rows(&q).unwrap(), &y).unwrap();
        for i in 0..b {
            let mut uv = 0.0;
            let mut uu = 0.0;
            let mut vv = 0.0;
            for j in 0..b {
                let u = y[j] * p[i][j];
                let v = y[j] * q[i][j];
                uv += u * v;
                uu += u * u;
                vv += v * v;
            }
            close(got.scores[i], uv / (uu.sqrt() * vv.sqrt()), 1e-12);
        }
    }
}

#[test]
fn posterior_is_the_density_ratio() {
    let gauss = |x: f64, m: f64, v: f64| (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
    let g = GmmModel::new([0.3, 0.7], [0.8, 0.2], [0.01, 0.04]);
    assert_eq!(g.clean, 0);
    for s in [-0.2, 0.0, 0.3, 0.5, 0.7, 0.9, 1.2] {
        let a = 0.3 * gauss(s, 0.8, 0.01);
        let b = 0.7 * gauss(s, 0.2, 0.04);
        close(gmm_posterior(&g, s), a / (a + b), 1e-12);
    }
}

fn oracle_recall(sim: &[Vec<f64>], gt: &[usize], k: usize) -> f64 {
    let n = sim.len();
    let mut hits = 0;
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).collect();
        // stable sort keeps lower indices first among equal scores
        order.sort_by(|&a, &b| sim[i][b].partial_cmp(&sim[i][a]).unwrap());
        if order[..k].contains(&gt[i]) {
            hits += 1;
        }
    }
    100.0 * hits as f64 / n as f64
}

#[test]
fn recall_matches_full_sort() {
    for seed in 0..20 {
        let mut rng = Rng::new(300 + seed);
        let n = 12;
        // coarse values force plenty of ties
        let sim: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.below(4) as f64).collect()).collect();
        let gt = rng.permutation(n);
        let m = Matrix::from_rows(&sim).unwrap();
        for k in [1, 3, 5, 10] {
            assert_eq!(recall_at_k(&m, &gt, k).unwrap(), oracle_recall(&sim, &gt, k));
        }
    }
}

#[test]
fn auc_matches_pair_count() {
    for seed in 0..20 {
        let mut rng = Rng::new(400 + seed);
        let n = 30;
        let y: Vec<f64> = (0..n).map(|_| rng.below(6) as f64 / 5.0).collect();
        let mask: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in (0..n).filter(|&i| !mask[i]) {
            for j in (0..n).filter(|&j| mask[j]) {
                pairs += 1.0;
                if y[i] > y[j] {
                    wins += 1.0;
                } else if y[i] == y[j] {
                    wins += 0.5;
                }
            }
        }
        let d = detection_metrics(&y, &mask).unwrap();
        close(d.auc.unwrap(), wins / pairs, 1e-12);
    }
}

#[test]
fn two_layer_forward_matches_scripted_values() {
    let l0 = Layer::from_parts(
        Matrix::from_rows(&[[0.5, -0.25, 0.1], [0.2, 0.4, -0.3]]).unwrap(),
        vec![0.1, 0.0, -0.2],
    )
    .unwrap();
    let l1 = Layer::from_parts(
        Matrix::from_rows(&[[1.0, 0.5], [-0.5, 0.25], [0.3, -1.0]]).unwrap(),
        vec![0.05, -0.1],
    )
    .unwrap();
    let enc = Encoder::from_layers(Modality::Image, vec![l0.clone(), l1.clone()]).unwrap();
    let x = [[1.0, 2.0], [-0.5, 0.3]];
    let out = enc.encode(&Matrix::from_rows(&x).unwrap()).unwrap();
    for (r, xr) in x.iter().enumerate() {
        let h: Vec<f64> = (0..3)
            .map(|j| (xr[0] * l0.weight[(0, j)] + xr[1] * l0.weight[(1, j)] + l0.bias[j]).tanh())
            .collect();
        let z: Vec<f64> = (0..2)
            .map(|j| (0..3).map(|k| h[k] * l1.weight[(k, j)]).sum::<f64>() + l1.bias[j])
            .collect();
        let nz = (z[0] * z[0] + z[1] * z[1]).sqrt();
        for j in 0..2 {
            assert_relative_eq!(out.emb[(r, j)], z[j] / nz, max_relative = 1e-10);
        }
    }
}
