use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MultiviewDataset;
use crate::error::{Error, Result};
use crate::model::normal_matrix;
use crate::ndmath::Matrix;

/// Parameters of the latent-factor benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactorSpec {
    pub n: usize,
    pub k_shared: usize,
    pub k_px: usize,
    pub k_py: usize,
    pub d_x: usize,
    pub d_y: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for FactorSpec {
    fn default() -> Self {
        Self {
            n: 5000,
            k_shared: 10,
            k_px: 5,
            k_py: 4,
            d_x: 32,
            d_y: 32,
            noise_sd: 0.1,
            seed: 0,
        }
    }
}

impl FactorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 samples, got {}", self.n)));
        }
        if self.k_shared == 0 || self.k_px == 0 || self.k_py == 0 {
            return Err(Error::InvalidArgument("every factor needs at least one class".into()));
        }
        if self.d_x < self.k_shared + self.k_px || self.d_y < self.k_shared + self.k_py {
            return Err(Error::InvalidArgument(format!(
                "view dims ({}, {}) must cover the one-hot widths ({}, {}) for a full-rank mixing map",
                self.d_x,
                self.d_y,
                self.k_shared + self.k_px,
                self.k_shared + self.k_py
            )));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_sd must be >= 0, got {}", self.noise_sd)));
        }
        Ok(())
    }

    pub fn meta(&self) -> BTreeMap<String, String> {
        let mut meta = BTreeMap::new();
        meta.insert("generator".into(), "factor".into());
        meta.insert("seed".into(), self.seed.to_string());
        meta.insert("n".into(), self.n.to_string());
        meta.insert("k_shared".into(), self.k_shared.to_string());
        meta.insert("k_px".into(), self.k_px.to_string());
        meta.insert("k_py".into(), self.k_py.to_string());
        meta.insert("d_x".into(), self.d_x.to_string());
        meta.insert("d_y".into(), self.d_y.to_string());
        meta.insert("noise_sd".into(), self.noise_sd.to_string());
        meta.insert("mixing".into(), "standard normal entries, one map per view".into());
        meta
    }
}

/// Draws shared class `c`, x-private class `a` and y-private class `b`
/// independently and uniformly, then emits
/// `x = [onehot(c) ‖ onehot(a)] W_x + ε` and `y = [onehot(c) ‖ onehot(b)] W_y + ε`.
pub fn gen_factor_dataset(spec: &FactorSpec) -> Result<MultiviewDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let w_x = normal_matrix(spec.k_shared + spec.k_px, spec.d_x, &mut rng);
    let w_y = normal_matrix(spec.k_shared + spec.k_py, spec.d_y, &mut rng);

    let mut shared = Vec::with_capacity(spec.n);
    let mut px = Vec::with_capacity(spec.n);
    let mut py = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        shared.push(rng.random_range(0..spec.k_shared));
        px.push(rng.random_range(0..spec.k_px));
        py.push(rng.random_range(0..spec.k_py));
    }

    let mix = |w: &Matrix, offset: usize, private: &[usize], rng: &mut ChaCha8Rng| {
        let d = w.cols();
        let noise = normal_matrix(spec.n, d, rng);
        Matrix::from_fn(spec.n, d, |i, j| {
            w.get(shared[i], j) + w.get(offset + private[i], j) + spec.noise_sd * noise.get(i, j)
        })
    };
    let x = mix(&w_x, spec.k_shared, &px, &mut rng);
    let y = mix(&w_y, spec.k_shared, &py, &mut rng);
    MultiviewDataset::new(x, y, shared, px, py, spec.meta())
}
