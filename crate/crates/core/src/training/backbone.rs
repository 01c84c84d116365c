use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::fusion::ModalityBatch;

/// Stand-in for a frozen pretrained encoder: per modality, every token goes
/// through `tanh(x . A_m + c_m)` with `A_m = gain * Q_m` for a random
/// orthogonal `Q_m`, so no input direction is lost before the tanh.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    pub seed: u64,
    pub gain: f64,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

pub const DEFAULT_GAIN: f64 = 0.5;

impl FrozenBackbone {
    pub fn new(dims: &[usize], gain: f64, seed: u64) -> Result<Self> {
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(invalid(format!("backbone gain must be positive, got {gain}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(dims.len());
        let mut biases = Vec::with_capacity(dims.len());
        for &d in dims {
            let g = Array2::from_shape_fn((d, d), |_| rng.sample::<f64, _>(StandardNormal));
            weights.push(orthonormalize(g) * gain);
            biases.push(Array1::from_shape_fn(d, |_| 0.1 * gain * rng.sample::<f64, _>(StandardNormal)));
        }
        Ok(Self {
            seed,
            gain,
            weights,
            biases,
        })
    }

    pub fn dims(&self) -> Vec<usize> {
        self.weights.iter().map(|w| w.nrows()).collect()
    }

    pub fn encode(&self, x: &ModalityBatch) -> Result<ModalityBatch> {
        if x.dims() != self.dims() {
            return Err(invalid(format!(
                "backbone expects dims {:?}, got {:?}",
                self.dims(),
                x.dims()
            )));
        }
        ModalityBatch::new(
            x.sequences()
                .iter()
                .zip(self.weights.iter().zip(&self.biases))
                .map(|(seq, (w, b))| (seq.dot(w) + b).mapv(f64::tanh))
                .collect(),
        )
    }

    /// Every weight as little-endian bytes, for exact before/after comparison.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .flat_map(|x| x.to_le_bytes())
            .collect()
    }
}

/// Modified Gram-Schmidt on the columns. Columns that collapse numerically
/// are replaced by the next unit vector that is not.
fn orthonormalize(mut a: Array2<f64>) -> Array2<f64> {
    let n = a.ncols();
    for j in 0..n {
        for k in 0..j {
            let proj = a.column(k).dot(&a.column(j));
            let qk = a.column(k).to_owned();
            a.column_mut(j).scaled_add(-proj, &qk);
        }
        let norm = a.column(j).dot(&a.column(j)).sqrt();
        if norm > 1e-8 {
            a.column_mut(j).mapv_inplace(|x| x / norm);
        } else {
            let e = (0..a.nrows())
                .map(|i| {
                    let mut e = Array1::zeros(a.nrows());
                    e[i] = 1.0;
                    for k in 0..j {
                        let qk = a.column(k).to_owned();
                        let proj = qk.dot(&e);
                        e.scaled_add(-proj, &qk);
                    }
                    e
                })
                .max_by(|x, y| x.dot(x).total_cmp(&y.dot(y)))
                .expect("non-empty");
            let norm = e.dot(&e).sqrt();
            a.column_mut(j).assign(&(e / norm));
        }
    }
    a
}
