//! Synthetic two-modality paired data with controlled correspondence noise.
//!
//! Both modalities are noisy linear views of a shared clustered latent code,
//! so "image" row `i` and "text" row `i` describe the same underlying item.
//! Noise is injected by shuffling which text is paired with which image,
//! never by touching the features themselves.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub n: usize,
    pub d_latent: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub n_clusters: usize,
    /// Spread of latent codes around their cluster center.
    pub cluster_spread: f64,
    /// Per-view additive feature noise.
    pub view_noise: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            n: 3000,
            d_latent: 16,
            d_img: 32,
            d_txt: 24,
            n_clusters: 10,
            cluster_spread: 0.6,
            view_noise: 0.2,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d_latent == 0 || self.d_img == 0 || self.d_txt == 0 {
            return Err(invalid("sample count and all dimensions must be at least 1"));
        }
        if self.n_clusters == 0 || self.n_clusters > self.n {
            return Err(invalid(format!(
                "n_clusters must be in 1..={}, got {}",
                self.n, self.n_clusters
            )));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return Err(invalid("cluster_spread must be finite and >= 0"));
        }
        if !(self.view_noise >= 0.0 && self.view_noise.is_finite()) {
            return Err(invalid("view_noise must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub img: usize,
    pub txt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(rename = "N")]
    pub n: usize,
    pub dims: Dims,
    pub seed: u64,
    pub rho: f64,
    pub split: SplitTag,
}

/// Paired features plus ground truth. Image `i` is paired with text
/// `match_perm[i]`; the pair is noisy exactly when that is not `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub meta: DatasetMeta,
    pub img_features: Matrix,
    pub txt_features: Matrix,
    pub match_perm: Vec<usize>,
    pub noise_mask: Vec<bool>,
    pub cluster_ids: Vec<usize>,
}

/// On-disk layout: matrices are stored as nested row arrays.
#[derive(Serialize, Deserialize)]
struct DatasetFile {
    meta: DatasetMeta,
    img: Vec<Vec<f64>>,
    txt: Vec<Vec<f64>>,
    perm: Vec<usize>,
    mask: Vec<bool>,
    clusters: Vec<usize>,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.match_perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.match_perm.is_empty()
    }

    pub fn split_tag(&self) -> SplitTag {
        self.meta.split
    }

    pub fn noisy_count(&self) -> usize {
        self.noise_mask.iter().filter(|&&m| m).count()
    }

    pub fn is_clean(&self) -> bool {
        self.match_perm.iter().enumerate().all(|(i, &p)| i == p)
    }

    /// Text features reordered so that row `i` is the text paired with image `i`.
    pub fn paired_txt(&self) -> Matrix {
        self.txt_features.select_rows(&self.match_perm)
    }

    /// Checks every structural invariant; used after loading from disk.
    pub fn validate(&self) -> Result<()> {
        let n = self.img_features.rows();
        if self.txt_features.rows() != n
            || self.match_perm.len() != n
            || self.noise_mask.len() != n
            || self.cluster_ids.len() != n
            || self.meta.n != n
        {
            return Err(invalid("dataset arrays disagree on sample count"));
        }
        if self.meta.dims.img != self.img_features.cols() || self.meta.dims.txt != self.txt_features.cols() {
            return Err(invalid("dataset meta dims disagree with feature widths"));
        }
        if !self.img_features.all_finite() || !self.txt_features.all_finite() {
            return Err(invalid("dataset features contain non-finite values"));
        }
        let mut seen = vec![false; n];
        for &p in &self.match_perm {
            if p >= n || seen[p] {
                return Err(invalid("match_perm is not a permutation"));
            }
            seen[p] = true;
        }
        for (i, (&p, &m)) in self.match_perm.iter().zip(&self.noise_mask).enumerate() {
            if m != (p != i) {
                return Err(invalid(format!("noise_mask[{i}] disagrees with match_perm")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = DatasetFile {
            meta: self.meta.clone(),
            img: self.img_features.to_rows(),
            txt: self.txt_features.to_rows(),
            perm: self.match_perm.clone(),
            mask: self.noise_mask.clone(),
            clusters: self.cluster_ids.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(s)?;
        let img_features = rows_to_matrix(&file.img, file.meta.dims.img)?;
        let txt_features = rows_to_matrix(&file.txt, file.meta.dims.txt)?;
        let ds = PairDataset {
            meta: file.meta,
            img_features,
            txt_features,
            match_perm: file.perm,
            noise_mask: file.mask,
            cluster_ids: file.clusters,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    fn subset(&self, idx: &[usize], split: SplitTag) -> PairDataset {
        PairDataset {
            meta: DatasetMeta {
                n: idx.len(),
                split,
                ..self.meta.clone()
            },
            img_features: self.img_features.select_rows(idx),
            txt_features: self.txt_features.select_rows(idx),
            match_perm: (0..idx.len()).collect(),
            noise_mask: vec![false; idx.len()],
            cluster_ids: idx.iter().map(|&i| self.cluster_ids[i]).collect(),
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], cols: usize) -> Result<Matrix> {
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, cols));
    }
    Matrix::from_rows(rows)
}

/// The fixed linear maps latent → image features and latent → text
/// features for a given spec. Exposed so tests can invert them.
pub fn latent_maps(spec: &GenSpec) -> (Matrix, Matrix) {
    let mut rng = Rng::new(spec.seed).split(1);
    let scale = 1.0 / (spec.d_latent as f64).sqrt();
    let mut draw = |rows: usize| {
        let data = (0..rows * spec.d_latent).map(|_| rng.normal() * scale).collect();
        Matrix::from_vec(rows, spec.d_latent, data).expect("sized by construction")
    };
    let a = draw(spec.d_img);
    let b = draw(spec.d_txt);
    (a, b)
}

pub fn generate(spec: &GenSpec) -> Result<PairDataset> {
    spec.validate()?;
    let (map_img, map_txt) = latent_maps(spec);
    let root = Rng::new(spec.seed);

    let mut center_rng = root.split(2);
    let centers: Vec<Vec<f64>> = (0..spec.n_clusters)
        .map(|_| (0..spec.d_latent).map(|_| center_rng.normal()).collect())
        .collect();

    let mut rng = root.split(3);
    let mut img = Matrix::zeros(spec.n, spec.d_img);
    let mut txt = Matrix::zeros(spec.n, spec.d_txt);
    let mut cluster_ids = Vec::with_capacity(spec.n);
    let mut z = vec![0.0; spec.d_latent];
    for i in 0..spec.n {
        let c = i % spec.n_clusters;
        cluster_ids.push(c);
        for (zk, ck) in z.iter_mut().zip(&centers[c]) {
            *zk = ck + spec.cluster_spread * rng.normal();
        }
        project(&map_img, &z, spec.view_noise, &mut rng, img.row_mut(i));
        project(&map_txt, &z, spec.view_noise, &mut rng, txt.row_mut(i));
    }

    Ok(PairDataset {
        meta: DatasetMeta {
            n: spec.n,
            dims: Dims {
                img: spec.d_img,
                txt: spec.d_txt,
            },
            seed: spec.seed,
            rho: 0.0,
            split: SplitTag::Train,
        },
        img_features: img,
        txt_features: txt,
        match_perm: (0..spec.n).collect(),
        noise_mask: vec![false; spec.n],
        cluster_ids,
    })
}

fn project(map: &Matrix, z: &[f64], noise: f64, rng: &mut Rng, out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        let clean: f64 = map.row(r).iter().zip(z).map(|(a, b)| a * b).sum();
        *o = if noise > 0.0 { clean + noise * rng.normal() } else { clean };
    }
}

/// Number of pairs to corrupt for rate `rho` over `n` samples: `⌈ρn⌉`,
/// bumped to 2 when it would be exactly 1 (no derangement of one element
/// exists), or 0 when `n < 2`.
pub fn noisy_count_for(rho: f64, n: usize) -> usize {
    let x = rho * n as f64;
    // absorb representation error such as 0.3 * 10 = 3.0000000000000004
    let k = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() } as usize;
    match k {
        1 if n >= 2 => 2,
        1 => 0,
        k => k.min(n),
    }
}

/// Uniformly random fixed-point-free permutation of `0..k` (k != 1).
fn derangement(k: usize, rng: &mut Rng) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    loop {
        let p = rng.permutation(k);
        if p.iter().enumerate().all(|(i, &v)| i != v) {
            return p;
        }
    }
}

/// Corrupts exactly [`noisy_count_for`]`(rho, N)` pairs by deranging the
/// texts of a random subset of images.
pub fn inject_noise(ds: &PairDataset, rho: f64, rng: &mut Rng) -> Result<PairDataset> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(invalid(format!("noise rate must lie in [0, 1], got {rho}")));
    }
    if !ds.is_clean() {
        return Err(invalid("noise can only be injected into a clean dataset"));
    }
    let n = ds.len();
    let k = noisy_count_for(rho, n);
    let mut chosen = rng.permutation(n);
    chosen.truncate(k);
    chosen.sort_unstable();
    let shuffle = derangement(k, rng);

    let mut out = ds.clone();
    for (slot, &src) in chosen.iter().enumerate() {
        out.match_perm[src] = chosen[shuffle[slot]];
        out.noise_mask[src] = true;
    }
    out.meta.rho = rho;
    Ok(out)
}

/// Split sizes for fractions `(dev, test)` of `n`: both floored, train
/// takes the remainder.
pub fn split_sizes(n: usize, f_dev: f64, f_test: f64) -> (usize, usize, usize) {
    let dev = (f_dev * n as f64).floor() as usize;
    let test = (f_test * n as f64).floor() as usize;
    (n - dev - test, dev, test)
}

pub fn split(
    ds: &PairDataset,
    f_train: f64,
    f_dev: f64,
    f_test: f64,
    rng: &mut Rng,
) -> Result<(PairDataset, PairDataset, PairDataset)> {
    let fr = [f_train, f_dev, f_test];
    if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split fractions must be in [0,1] and sum to 1, got {fr:?}")));
    }
    let (_, n_dev, n_test) = split_sizes(ds.len(), f_dev, f_test);
    split_counts(ds, n_dev, n_test, rng)
}

/// Random disjoint train/dev/test partition with explicit dev and test
/// sizes. Rows keep their original relative order inside each split.
pub fn split_counts(
    ds: &PairDataset,
    n_dev: usize,
    n_test: usize,
    rng: &mut Rng,
) -> Result<(PairDataset, PairDataset, PairDataset)> {
    if !ds.is_clean() {
        return Err(invalid("split expects a clean dataset; inject noise into the train split afterwards"));
    }
    if n_dev + n_test > ds.len() {
        return Err(invalid(format!(
            "dev ({n_dev}) + test ({n_test}) exceed dataset size {}",
            ds.len()
        )));
    }
    let order = rng.permutation(ds.len());
    let mut dev: Vec<usize> = order[..n_dev].to_vec();
    let mut test: Vec<usize> = order[n_dev..n_dev + n_test].to_vec();
    let mut train: Vec<usize> = order[n_dev + n_test..].to_vec();
    for part in [&mut train, &mut dev, &mut test] {
        part.sort_unstable();
    }
    Ok((
        ds.subset(&train, SplitTag::Train),
        ds.subset(&dev, SplitTag::Dev),
        ds.subset(&test, SplitTag::Test),
    ))
}

/// Generates `spec.n` samples, holds out clean dev and test splits of the
/// given sizes and injects noise at rate `rho` into the remaining train split.
pub fn generate_splits(
    spec: &GenSpec,
    n_dev: usize,
    n_test: usize,
    rho: f64,
) -> Result<(PairDataset, PairDataset, PairDataset)> {
    let ds = generate(spec)?;
    let root = Rng::new(spec.seed);
    let (train, dev, test) = split_counts(&ds, n_dev, n_test, &mut root.split(4))?;
    let train = inject_noise(&train, rho, &mut root.split(5))?;
    Ok((train, dev, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> PairDataset {
        generate(&GenSpec {
            n,
            d_latent: 4,
            d_img: 6,
            d_txt: 5,
            n_clusters: 3.min(n),
            seed,
            ..GenSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_noise_rows_are_images_of_the_center() {
        let spec = GenSpec {
            n: 6,
            d_latent: 3,
            d_img: 4,
            d_txt: 5,
            n_clusters: 6,
            cluster_spread: 0.0,
            view_noise: 0.0,
            seed: 9,
        };
        let ds = generate(&spec).unwrap();
        let again = generate(&spec).unwrap();
        assert_eq!(ds, again);
        // Regenerating the same centers through the maps must reproduce each row exactly.
        let (a, b) = latent_maps(&spec);
        let mut crng = Rng::new(spec.seed).split(2);
        for i in 0..spec.n {
            let c: Vec<f64> = (0..spec.d_latent).map(|_| crng.normal()).collect();
            for r in 0..spec.d_img {
                let want: f64 = a.row(r).iter().zip(&c).map(|(x, y)| x * y).sum();
                assert_eq!(ds.img_features[(i, r)], want);
            }
            for r in 0..spec.d_txt {
                let want: f64 = b.row(r).iter().zip(&c).map(|(x, y)| x * y).sum();
                assert_eq!(ds.txt_features[(i, r)], want);
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            GenSpec { n: 0, ..GenSpec::default() },
            GenSpec { d_txt: 0, ..GenSpec::default() },
            GenSpec { n: 5, n_clusters: 6, ..GenSpec::default() },
            GenSpec { view_noise: -0.1, ..GenSpec::default() },
        ];
        for spec in bad {
            assert!(generate(&spec).is_err(), "{spec:?}");
        }
    }

    #[test]
    fn rho_zero_keeps_identity() {
        let ds = small(50, 1);
        let out = inject_noise(&ds, 0.0, &mut Rng::new(3)).unwrap();
        assert!(out.is_clean());
        assert_eq!(out.noisy_count(), 0);
    }

    #[test]
    fn rho_one_is_a_derangement() {
        let ds = small(30, 2);
        for seed in 0..100 {
            let out = inject_noise(&ds, 1.0, &mut Rng::new(seed)).unwrap();
            let fixed = out.match_perm.iter().enumerate().filter(|(i, &p)| *i == p).count();
            assert_eq!(fixed, 0);
            assert!(out.noise_mask.iter().all(|&m| m));
            out.validate().unwrap();
        }
    }

    #[test]
    fn exact_noisy_count() {
        let ds = small(1000, 4);
        let out = inject_noise(&ds, 0.4, &mut Rng::new(8)).unwrap();
        assert_eq!(out.noisy_count(), 400);
        out.validate().unwrap();
        assert_eq!(noisy_count_for(0.3, 10), 3);
        assert_eq!(noisy_count_for(0.01, 10), 2);
        assert_eq!(noisy_count_for(0.5, 1), 0);
        assert_eq!(noisy_count_for(0.25, 10), 3);
    }

    #[test]
    fn inject_rejects_bad_rate_and_noisy_input() {
        let ds = small(10, 4);
        assert!(inject_noise(&ds, 1.5, &mut Rng::new(0)).is_err());
        assert!(inject_noise(&ds, -0.1, &mut Rng::new(0)).is_err());
        let noisy = inject_noise(&ds, 0.5, &mut Rng::new(0)).unwrap();
        assert!(inject_noise(&noisy, 0.5, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn split_all_train_is_identity() {
        let ds = small(40, 5);
        let (train, dev, test) = split(&ds, 1.0, 0.0, 0.0, &mut Rng::new(1)).unwrap();
        assert_eq!(train.img_features, ds.img_features);
        assert_eq!(train.txt_features, ds.txt_features);
        assert!(dev.is_empty() && test.is_empty());
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let ds = small(103, 6);
        let (train, dev, test) = split(&ds, 0.5, 0.25, 0.25, &mut Rng::new(2)).unwrap();
        assert_eq!((dev.len(), test.len(), train.len()), (25, 25, 53));
        // Rows are unique random vectors, so feature rows identify source indices.
        let mut seen = std::collections::BTreeSet::new();
        for part in [&train, &dev, &test] {
            for i in 0..part.len() {
                let key: Vec<u64> = part.img_features.row(i).iter().map(|v| v.to_bits()).collect();
                assert!(seen.insert(key));
            }
        }
        assert_eq!(seen.len(), 103);
        assert!(split(&ds, 0.5, 0.5, 0.5, &mut Rng::new(2)).is_err());
    }

    #[test]
    fn json_round_trip() {
        let ds = small(12, 7);
        let noisy = inject_noise(&ds, 0.5, &mut Rng::new(1)).unwrap();
        let back = PairDataset::from_json(&noisy.to_json().unwrap()).unwrap();
        assert_eq!(back, noisy);
        let v: serde_json::Value = serde_json::from_str(&noisy.to_json().unwrap()).unwrap();
        for key in ["meta", "img", "txt", "perm", "mask", "clusters"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["meta"]["N"], 12);
    }
}
