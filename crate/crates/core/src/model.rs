//! Per-modality MLP encoders with unit-norm outputs, their manual backward
//! pass, and similarity-matrix construction.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::numerics::{adam_step, AdamState, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

/// Affine layer `x · W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub weight_opt: AdamState,
    pub bias_opt: AdamState,
}

impl Layer {
    fn new(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = (0..fan_in * fan_out).map(|_| rng.uniform(-bound, bound)).collect();
        let bias = (0..fan_out).map(|_| rng.uniform(-bound, bound)).collect();
        Self {
            weight: Matrix::from_vec(fan_in, fan_out, weight).expect("sized by construction"),
            bias,
            weight_opt: AdamState::new(fan_in * fan_out),
            bias_opt: AdamState::new(fan_out),
        }
    }

    /// Layer with given parameters and fresh optimiser state.
    pub fn from_parts(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(shape(format!("{} biases for {} outputs", bias.len(), weight.cols())));
        }
        Ok(Self {
            weight_opt: AdamState::new(weight.rows() * weight.cols()),
            bias_opt: AdamState::new(bias.len()),
            weight,
            bias,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

/// Stack of affine layers with `tanh` between them, followed by row-wise
/// L2 normalisation of the last layer's output.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub modality: Modality,
    pub layers: Vec<Layer>,
}

/// Rows of unit-norm embeddings for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub modality: Modality,
    pub emb: Matrix,
}

impl EmbeddingBatch {
    pub fn len(&self) -> usize {
        self.emb.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.emb.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.emb.cols()
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Matrix,
    /// Post-`tanh` activations of each hidden layer.
    pub hidden: Vec<Matrix>,
    /// Output of the final affine layer before normalisation.
    pub raw: Matrix,
    pub norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub layers: Vec<LayerGrad>,
}

impl EncoderGrads {
    pub fn zeros_like(enc: &Encoder) -> Self {
        Self {
            layers: enc
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.fan_in(), l.fan_out()),
                    bias: vec![0.0; l.fan_out()],
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.all_finite() && l.bias.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight.scale(factor);
            l.bias.iter_mut().for_each(|b| *b *= factor);
        }
    }

    /// Iterates every gradient entry in parameter order (layer, weight then bias).
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(&l.bias).copied())
    }
}

const NORM_FLOOR: f64 = 1e-12;

impl Encoder {
    /// `dims` lists layer widths from input to embedding, e.g. `[32, 64, 32]`.
    pub fn new(modality: Modality, dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(invalid(format!("encoder needs >= 2 positive widths, got {dims:?}")));
        }
        let layers = dims.windows(2).map(|w| Layer::new(w[0], w[1], rng)).collect();
        Ok(Self { modality, layers })
    }

    pub fn from_layers(modality: Modality, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("encoder needs at least one layer"));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].fan_out() != w[1].fan_in() {
                return Err(shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].fan_out(),
                    i + 1,
                    w[1].fan_in()
                )));
            }
        }
        for l in &layers {
            if l.bias.len() != l.fan_out() {
                return Err(shape("bias length disagrees with weight width"));
            }
        }
        Ok(Self { modality, layers })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].fan_in()];
        d.extend(self.layers.iter().map(Layer::fan_out));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::fan_out)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.fan_in() * l.fan_out() + l.fan_out()).sum()
    }

    pub fn encode(&self, x: &Matrix) -> Result<EmbeddingBatch> {
        Ok(self.forward(x)?.0)
    }

    pub fn forward(&self, x: &Matrix) -> Result<(EmbeddingBatch, ForwardCache)> {
        if x.cols() != self.input_dim() {
            return Err(shape(format!(
                "encoder expects {} input columns, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let last = self.layers.len() - 1;
        let mut hidden = Vec::with_capacity(last);
        let mut h = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = h.matmul(&layer.weight)?;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            if li < last {
                h = z.map(f64::tanh);
                hidden.push(h.clone());
            } else {
                h = z;
            }
        }
        let raw = h;
        let mut emb = raw.clone();
        let mut norms = Vec::with_capacity(raw.rows());
        for r in 0..emb.rows() {
            let row = emb.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let cache = ForwardCache {
            input: x.clone(),
            hidden,
            raw,
            norms,
        };
        Ok((
            EmbeddingBatch {
                modality: self.modality,
                emb,
            },
            cache,
        ))
    }

    /// Back-propagates `d loss / d embedding` through normalisation and the
    /// MLP, returning parameter gradients.
    pub fn backward(&self, cache: &ForwardCache, grad_emb: &Matrix) -> Result<EncoderGrads> {
        if grad_emb.shape() != cache.raw.shape() {
            return Err(shape(format!(
                "embedding gradient {:?} vs cached output {:?}",
                grad_emb.shape(),
                cache.raw.shape()
            )));
        }
        // through e = u / |u|: du = (de - e (e . de)) / |u|
        let mut g = grad_emb.clone();
        for r in 0..g.rows() {
            let n = cache.norms[r];
            let u = cache.raw.row(r);
            let proj: f64 = u.iter().zip(grad_emb.row(r)).map(|(a, b)| a * b).sum::<f64>() / n;
            for (gv, uv) in g.row_mut(r).iter_mut().zip(u) {
                *gv = (*gv - (uv / n) * proj) / n;
            }
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        for li in (0..self.layers.len()).rev() {
            let input = if li == 0 { &cache.input } else { &cache.hidden[li - 1] };
            let weight = input.t_matmul(&g)?;
            let mut bias = vec![0.0; g.cols()];
            for r in 0..g.rows() {
                for (b, v) in bias.iter_mut().zip(g.row(r)) {
                    *b += v;
                }
            }
            grads.push(LayerGrad { weight, bias });
            if li > 0 {
                let mut prev = g.matmul_t(&self.layers[li].weight)?;
                let act = &cache.hidden[li - 1];
                for (p, a) in prev.as_mut_slice().iter_mut().zip(act.as_slice()) {
                    *p *= 1.0 - a * a;
                }
                g = prev;
            }
        }
        grads.reverse();
        Ok(EncoderGrads { layers: grads })
    }

    pub fn apply_grads(&mut self, grads: &EncoderGrads, lr: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(shape("gradient layer count disagrees with encoder"));
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            adam_step(layer.weight.as_mut_slice(), g.weight.as_slice(), &mut layer.weight_opt, lr)?;
            adam_step(&mut layer.bias, &g.bias, &mut layer.bias_opt, lr)?;
        }
        Ok(())
    }

    /// Number of optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.layers.first().map_or(0, |l| l.weight_opt.step)
    }

    pub fn checkpoint(&self) -> EncoderCheckpoint {
        EncoderCheckpoint {
            modality: self.modality,
            dims: self.dims(),
            weights: self.layers.iter().map(|l| l.weight.to_rows()).collect(),
            biases: self.layers.iter().map(|l| l.bias.clone()).collect(),
            adam_state: self
                .layers
                .iter()
                .map(|l| LayerAdam {
                    weight: l.weight_opt.clone(),
                    bias: l.bias_opt.clone(),
                })
                .collect(),
            step: self.step(),
        }
    }

    pub fn from_checkpoint(ck: &EncoderCheckpoint) -> Result<Self> {
        if ck.weights.len() != ck.biases.len()
            || ck.weights.len() != ck.adam_state.len()
            || ck.dims.len() != ck.weights.len() + 1
        {
            return Err(shape("checkpoint arrays disagree on layer count"));
        }
        let mut layers = Vec::with_capacity(ck.weights.len());
        for (i, ((w, b), opt)) in ck.weights.iter().zip(&ck.biases).zip(&ck.adam_state).enumerate() {
            let weight = if w.is_empty() {
                Matrix::zeros(0, ck.dims[i + 1])
            } else {
                Matrix::from_rows(w)?
            };
            if weight.shape() != (ck.dims[i], ck.dims[i + 1])
                || opt.weight.m.len() != weight.as_slice().len()
                || opt.bias.m.len() != b.len()
            {
                return Err(shape(format!("checkpoint layer {i} has inconsistent shapes")));
            }
            layers.push(Layer {
                weight,
                bias: b.clone(),
                weight_opt: opt.weight.clone(),
                bias_opt: opt.bias.clone(),
            });
        }
        Self::from_layers(ck.modality, layers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAdam {
    pub weight: AdamState,
    pub bias: AdamState,
}

/// Serialisable encoder snapshot, optimizer state included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderCheckpoint {
    pub modality: Modality,
    pub dims: Vec<usize>,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    pub adam_state: Vec<LayerAdam>,
    pub step: u64,
}

/// Pairwise dot products between the rows of `a` and `b`. For unit-norm
/// rows this is the cosine similarity matrix.
pub fn sim_matrix(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<Matrix> {
    if a.dim() != b.dim() {
        return Err(shape(format!("embedding widths {} and {}", a.dim(), b.dim())));
    }
    a.emb.matmul_t(&b.emb)
}
