use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audit::Digest;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::text::{fnv1a, tokenize};

/// Sparse feature vector: `(index, value)` pairs with distinct indices.
pub type Features = Vec<(usize, f64)>;

/// Bag of hashed tokens, L2-normalized. Empty text maps to no features, so
/// the logits are the biases alone.
pub fn encode(text: &str, dim: usize) -> Features {
    let mut counts = std::collections::BTreeMap::new();
    for tok in tokenize(text) {
        *counts.entry((fnv1a(tok.as_bytes()) % dim as u64) as usize).or_insert(0.0) += 1.0;
    }
    let norm = counts.values().map(|c: &f64| c * c).sum::<f64>().sqrt();
    counts.into_iter().map(|(i, c)| (i, c / norm)).collect()
}

/// A feed-forward classifier with one tanh hidden layer, stored as a flat
/// parameter vector so that gradient steps and finite differences are plain
/// vector operations. With `hidden == 0` it is a linear softmax model.
///
/// Layout with a hidden layer: `W1 (hidden x dim) | b1 | W2 (classes x hidden) | b2`.
/// Without: `W (classes x dim) | b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub params: Vec<f64>,
}

/// Hidden activations kept from the forward pass for backprop.
#[derive(Clone, Debug, Default)]
pub struct Activations {
    hidden: Vec<f64>,
}

impl Mlp {
    pub fn zeros(dim: usize, hidden: usize, classes: usize) -> Self {
        let n = if hidden == 0 { classes * dim + classes } else { hidden * dim + hidden + classes * hidden + classes };
        Mlp { dim, hidden, classes, params: vec![0.0; n] }
    }

    /// Gaussian init with the given standard deviation; biases start at 0.
    pub fn gaussian(dim: usize, hidden: usize, classes: usize, std: f64, seed: u64) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("init std {std}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros(dim, hidden, classes);
        let (weights_a, weights_b) = m.weight_ranges();
        for r in [weights_a, weights_b].into_iter().flatten() {
            for p in &mut m.params[r] {
                *p = normal.sample(&mut rng);
            }
        }
        Ok(m)
    }

    pub fn from_config(cfg: &ModelConfig, std: f64, seed: u64) -> Result<Self> {
        Self::gaussian(cfg.feature_dim, cfg.hidden, cfg.n_classes, std, seed)
    }

    fn weight_ranges(&self) -> (Option<std::ops::Range<usize>>, Option<std::ops::Range<usize>>) {
        if self.hidden == 0 {
            (Some(0..self.classes * self.dim), None)
        } else {
            let w1 = 0..self.hidden * self.dim;
            let w2_start = w1.end + self.hidden;
            (Some(w1), Some(w2_start..w2_start + self.classes * self.hidden))
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Digest of the exact parameter bits.
    pub fn fingerprint(&self) -> Digest {
        let bytes: Vec<u8> = self.params.iter().flat_map(|p| p.to_bits().to_le_bytes()).collect();
        Digest::of(&bytes)
    }

    pub fn logits(&self, x: &Features) -> Vec<f64> {
        self.forward(x).0
    }

    pub fn forward(&self, x: &Features) -> (Vec<f64>, Activations) {
        let (d, h, c) = (self.dim, self.hidden, self.classes);
        let p = &self.params;
        if h == 0 {
            let b = c * d;
            let z = (0..c).map(|k| p[b + k] + x.iter().map(|&(i, v)| p[k * d + i] * v).sum::<f64>()).collect();
            return (z, Activations::default());
        }
        let b1 = h * d;
        let w2 = b1 + h;
        let b2 = w2 + c * h;
        let a: Vec<f64> =
            (0..h).map(|j| (p[b1 + j] + x.iter().map(|&(i, v)| p[j * d + i] * v).sum::<f64>()).tanh()).collect();
        let z = (0..c).map(|k| p[b2 + k] + (0..h).map(|j| p[w2 + k * h + j] * a[j]).sum::<f64>()).collect();
        (z, Activations { hidden: a })
    }

    /// Accumulates `d loss / d params` into `grad` given `dz = d loss / d logits`.
    pub fn backward(&self, x: &Features, acts: &Activations, dz: &[f64], grad: &mut [f64]) {
        let (d, h, c) = (self.dim, self.hidden, self.classes);
        if h == 0 {
            let b = c * d;
            for k in 0..c {
                for &(i, v) in x {
                    grad[k * d + i] += dz[k] * v;
                }
                grad[b + k] += dz[k];
            }
            return;
        }
        let p = &self.params;
        let b1 = h * d;
        let w2 = b1 + h;
        let b2 = w2 + c * h;
        let a = &acts.hidden;
        let mut da = vec![0.0; h];
        for k in 0..c {
            grad[b2 + k] += dz[k];
            for j in 0..h {
                grad[w2 + k * h + j] += dz[k] * a[j];
                da[j] += dz[k] * p[w2 + k * h + j];
            }
        }
        for j in 0..h {
            let du = da[j] * (1.0 - a[j] * a[j]);
            grad[b1 + j] += du;
            for &(i, v) in x {
                grad[j * d + i] += du * v;
            }
        }
    }
}
