//! Forward and backward passes for masked affine layers, ReLU and batch norm.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MaskMatrix;
use crate::quantize::{clip_weights, masked_weights, Phase, QuantMode};
use crate::tensor::{Matrix, Scalar};

static NEXT_LAYER_ID: AtomicU64 = AtomicU64::new(1);

/// Affine layer `y = x · (q(W) ∘ M) + b` over a batch of row vectors.
#[derive(Debug, Clone)]
pub struct SparseAffineLayer<T: Scalar = f32> {
    weights: Matrix<T>,
    bias: Vec<T>,
    mask: MaskMatrix,
    mask_values: Matrix<T>,
    quant: QuantMode,
    id: u64,
    version: u64,
}

/// Values retained by [`SparseAffineLayer::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache<T: Scalar = f32> {
    input: Matrix<T>,
    effective_weights: Matrix<T>,
    layer: u64,
    version: u64,
}

impl<T: Scalar> LayerCache<T> {
    pub fn input(&self) -> &Matrix<T> {
        &self.input
    }

    pub fn effective_weights(&self) -> &Matrix<T> {
        &self.effective_weights
    }
}

#[derive(Debug, Clone)]
pub struct AffineGradients<T: Scalar = f32> {
    /// Zero at every masked position.
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
    pub input: Matrix<T>,
}

impl<T: Scalar> SparseAffineLayer<T> {
    pub fn new(weights: Matrix<T>, bias: Vec<T>, mask: MaskMatrix, quant: QuantMode) -> Result<Self> {
        if weights.shape() != (mask.rows(), mask.cols()) {
            return Err(Error::shape(
                "SparseAffineLayer::new",
                format!("mask shape {}x{}", mask.rows(), mask.cols()),
                format!("weights {}x{}", weights.rows(), weights.cols()),
            ));
        }
        if bias.len() != weights.cols() {
            return Err(Error::shape("SparseAffineLayer::new", weights.cols(), bias.len()));
        }
        weights.check_finite()?;
        let mask_values = mask.to_matrix();
        Ok(SparseAffineLayer {
            weights,
            bias,
            mask,
            mask_values,
            quant,
            id: NEXT_LAYER_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (n + m))`, zero biases.
    pub fn init<R: Rng>(mask: MaskMatrix, quant: QuantMode, rng: &mut R) -> Result<Self> {
        let (n, m) = (mask.rows(), mask.cols());
        let limit = (6.0 / (n + m) as f64).sqrt();
        let weights = Matrix::from_fn(n, m, |_, _| T::of(rng.random_range(-limit..limit)));
        Self::new(weights, vec![T::zero(); m], mask, quant)
    }

    pub fn inputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.cols()
    }

    /// Stored real-valued weights, including the untouched masked entries.
    pub fn weights(&self) -> &Matrix<T> {
        &self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn mask(&self) -> &MaskMatrix {
        &self.mask
    }

    pub fn quant(&self) -> QuantMode {
        self.quant
    }

    /// Weights a pass in `phase` actually multiplies by.
    pub fn effective_weights(&self, phase: Phase) -> Matrix<T> {
        masked_weights(&self.weights, &self.mask_values, self.quant, phase)
            .expect("weights and mask shapes are checked at construction")
    }

    /// Pre-activation for a `batch x n` input; no activation is applied.
    pub fn forward(&self, x: &Matrix<T>, phase: Phase) -> Result<(Matrix<T>, LayerCache<T>)> {
        if x.cols() != self.inputs() {
            return Err(Error::shape("sparse_forward", self.inputs(), x.cols()));
        }
        let w_eff = self.effective_weights(phase);
        let mut out = x.matmul(&w_eff)?;
        out.add_row_vector(&self.bias)?;
        Ok((
            out,
            LayerCache {
                input: x.clone(),
                effective_weights: w_eff,
                layer: self.id,
                version: self.version,
            },
        ))
    }

    /// Gradients given `∂C/∂y` for the batch cached by the matching forward.
    pub fn backward(&self, cache: &LayerCache<T>, grad_out: &Matrix<T>) -> Result<AffineGradients<T>> {
        if cache.layer != self.id || cache.version != self.version {
            return Err(Error::StaleCache);
        }
        if grad_out.shape() != (cache.input.rows(), self.outputs()) {
            return Err(Error::shape(
                "sparse_backward",
                format!("{}x{}", cache.input.rows(), self.outputs()),
                format!("{}x{}", grad_out.rows(), grad_out.cols()),
            ));
        }
        let full = cache.input.transpose().matmul(grad_out)?;
        let weights = full.zip_map(&self.mask_values, "sparse_backward", |g, m| {
            if m == T::zero() {
                T::zero()
            } else {
                g
            }
        })?;
        let input = grad_out.matmul(&cache.effective_weights.transpose())?;
        Ok(AffineGradients {
            weights,
            bias: grad_out.column_sums(),
            input,
        })
    }

    /// `W -= lr * grad_W`, `b -= lr * grad_b`, then clip when quantized.
    pub fn apply_gradients(&mut self, grads: &AffineGradients<T>, lr: T) -> Result<()> {
        if grads.weights.shape() != self.weights.shape() || grads.bias.len() != self.bias.len() {
            return Err(Error::shape(
                "apply_gradients",
                format!("{}x{}", self.inputs(), self.outputs()),
                format!("{}x{}", grads.weights.rows(), grads.weights.cols()),
            ));
        }
        for (w, &g) in self.weights.data_mut().iter_mut().zip(grads.weights.data()) {
            *w -= lr * g;
        }
        for (b, &g) in self.bias.iter_mut().zip(&grads.bias) {
            *b -= lr * g;
        }
        clip_weights(&mut self.weights, self.quant);
        self.version += 1;
        Ok(())
    }

    /// Clamps stored weights into `[-1, 1]` when quantized.
    pub fn clip(&mut self) {
        clip_weights(&mut self.weights, self.quant);
    }

    #[cfg(test)]
    pub(crate) fn weights_mut(&mut self) -> &mut Matrix<T> {
        self.version += 1;
        &mut self.weights
    }
}

#[derive(Debug, Clone)]
pub struct ReluCache<T: Scalar = f32> {
    output: Matrix<T>,
}

pub fn relu_forward<T: Scalar>(x: &Matrix<T>) -> (Matrix<T>, ReluCache<T>) {
    let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
    (y.clone(), ReluCache { output: y })
}

/// Passes the gradient where the input was positive; zero at and below 0.
pub fn relu_backward<T: Scalar>(cache: &ReluCache<T>, grad_out: &Matrix<T>) -> Result<Matrix<T>> {
    cache.output.zip_map(grad_out, "relu_backward", |y, g| {
        if y > T::zero() {
            g
        } else {
            T::zero()
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnPhase {
    Train,
    Infer,
}

/// Per-feature batch normalization with learned scale and shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm<T: Scalar = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: T,
    pub momentum: T,
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct BnCache<T: Scalar = f32> {
    normalized: Matrix<T>,
    inv_std: Vec<T>,
    phase: BnPhase,
}

impl<T: Scalar> BnCache<T> {
    /// `(x - mean) / sqrt(var + eps)` before scale and shift.
    pub fn normalized(&self) -> &Matrix<T> {
        &self.normalized
    }
}

#[derive(Debug, Clone)]
pub struct BnGradients<T: Scalar = f32> {
    pub input: Matrix<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    /// Identity scale/shift, zero mean, unit variance.
    pub fn new(features: usize) -> Self {
        BatchNorm {
            gamma: vec![T::one(); features],
            beta: vec![T::zero(); features],
            running_mean: vec![T::zero(); features],
            running_var: vec![T::one(); features],
            epsilon: T::of(BN_EPSILON),
            momentum: T::of(BN_MOMENTUM),
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.features();
        if [self.beta.len(), self.running_mean.len(), self.running_var.len()]
            .iter()
            .any(|&l| l != f)
        {
            return Err(Error::InvalidConfig("batch-norm vectors differ in length".into()));
        }
        if self.epsilon.is_nan() || self.epsilon <= T::zero() {
            return Err(Error::InvalidConfig("batch-norm epsilon must be > 0".into()));
        }
        if self.running_var.iter().any(|&v| v < T::zero()) {
            return Err(Error::InvalidConfig("negative running variance".into()));
        }
        Ok(())
    }

    /// Train phase normalizes by batch statistics and updates the running
    /// averages; infer phase uses the running averages.
    pub fn forward(&mut self, x: &Matrix<T>, phase: BnPhase) -> Result<(Matrix<T>, BnCache<T>)> {
        let (batch, f) = x.shape();
        if f != self.features() {
            return Err(Error::shape("batchnorm_forward", self.features(), f));
        }
        let (mean, inv_std) = match phase {
            BnPhase::Train => {
                if batch < 2 {
                    return Err(Error::DegenerateBatch(batch));
                }
                let n = T::of(batch as f64);
                let mean: Vec<T> = x.column_sums().into_iter().map(|s| s / n).collect();
                let mut var = vec![T::zero(); f];
                for i in 0..batch {
                    for ((v, &xv), &mu) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                        let d = xv - mu;
                        *v += d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v = *v / n;
                }
                let keep = self.momentum;
                let unbias = n / (n - T::one());
                for j in 0..f {
                    self.running_mean[j] = keep * self.running_mean[j] + (T::one() - keep) * mean[j];
                    self.running_var[j] = keep * self.running_var[j] + (T::one() - keep) * var[j] * unbias;
                }
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.epsilon).sqrt()).collect();
                (mean, inv_std)
            }
            BnPhase::Infer => (
                self.running_mean.clone(),
                self.running_var
                    .iter()
                    .map(|&v| T::one() / (v + self.epsilon).sqrt())
                    .collect(),
            ),
        };
        let normalized = Matrix::from_fn(batch, f, |i, j| (x[(i, j)] - mean[j]) * inv_std[j]);
        let y = Matrix::from_fn(batch, f, |i, j| self.gamma[j] * normalized[(i, j)] + self.beta[j]);
        Ok((
            y,
            BnCache {
                normalized,
                inv_std,
                phase,
            },
        ))
    }

    /// Inference-phase output without touching any state.
    pub fn infer(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut scratch = self.clone();
        Ok(scratch.forward(x, BnPhase::Infer)?.0)
    }

    pub fn backward(&self, cache: &BnCache<T>, grad_out: &Matrix<T>) -> Result<BnGradients<T>> {
        if grad_out.shape() != cache.normalized.shape() {
            return Err(Error::shape(
                "batchnorm_backward",
                format!("{}x{}", cache.normalized.rows(), cache.normalized.cols()),
                format!("{}x{}", grad_out.rows(), grad_out.cols()),
            ));
        }
        let (batch, f) = grad_out.shape();
        let mut grad_gamma = vec![T::zero(); f];
        let grad_beta = grad_out.column_sums();
        for i in 0..batch {
            for j in 0..f {
                grad_gamma[j] += grad_out[(i, j)] * cache.normalized[(i, j)];
            }
        }
        let input = match cache.phase {
            BnPhase::Infer => Matrix::from_fn(batch, f, |i, j| {
                grad_out[(i, j)] * self.gamma[j] * cache.inv_std[j]
            }),
            BnPhase::Train => {
                // dx = inv_std / B * (B*dxh - sum(dxh) - xh * sum(dxh * xh)), dxh = g * gamma.
                // sum(dxh) = gamma * grad_beta and sum(dxh * xh) = gamma * grad_gamma.
                let n = T::of(batch as f64);
                Matrix::from_fn(batch, f, |i, j| {
                    let g = self.gamma[j];
                    let dxh = grad_out[(i, j)] * g;
                    cache.inv_std[j] / n
                        * (n * dxh - g * grad_beta[j] - cache.normalized[(i, j)] * g * grad_gamma[j])
                })
            }
        };
        Ok(BnGradients {
            input,
            gamma: grad_gamma,
            beta: grad_beta,
        })
    }

    pub fn apply_gradients(&mut self, grads: &BnGradients<T>, lr: T) {
        for (g, &d) in self.gamma.iter_mut().zip(&grads.gamma) {
            *g -= lr * d;
        }
        for (b, &d) in self.beta.iter_mut().zip(&grads.beta) {
            *b -= lr * d;
        }
    }

    pub fn cast<U: Scalar>(&self) -> BatchNorm<U> {
        let c = |v: &[T]| v.iter().map(|&x| U::of(x.as_f64())).collect();
        BatchNorm {
            gamma: c(&self.gamma),
            beta: c(&self.beta),
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
            epsilon: U::of(self.epsilon.as_f64()),
            momentum: U::of(self.momentum.as_f64()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lfsr::{LfsrConfig, LfsrMode};
    use crate::mask::{generate_mask, SngConfig};

    fn full_mask(n: usize, m: usize) -> MaskMatrix {
        let lfsr = LfsrConfig::standard(crate::mask::width_for_rows(n), 1, LfsrMode::DeBruijn).unwrap();
        generate_mask(n, m, &SngConfig::new(lfsr, 1.0).unwrap(), 1).unwrap()
    }

    /// 2x2 mask [[1,0],[1,1]], found by searching thresholds and seeds.
    fn mask_1011() -> MaskMatrix {
        let lfsr = LfsrConfig::standard(2, 1, LfsrMode::DeBruijn).unwrap();
        for threshold in 0..=4 {
            let sng = SngConfig::with_threshold(lfsr, threshold).unwrap();
            for base in 1..4 {
                let m = generate_mask(2, 2, &sng, base).unwrap();
                if m.column(0) == [true, true] && m.column(1) == [false, true] {
                    return m;
                }
            }
        }
        panic!("no register setting produces the test mask");
    }

    #[test]
    fn two_by_two_forward() {
        // Effective weights [[1,0],[3,4]]; x = [1,1] -> [4, 4].
        let w = Matrix::from_rows(&[[1.0, -2.0], [3.0, 4.0]]).unwrap();
        let layer = SparseAffineLayer::<f64>::new(w, vec![0.0, 0.0], mask_1011(), QuantMode::None).unwrap();
        let (y, _) = layer.forward(&Matrix::from_rows(&[[1.0, 1.0]]).unwrap(), Phase::Train).unwrap();
        assert_eq!(y.data(), &[4.0, 4.0]);
    }

    #[test]
    fn zero_input_yields_bias() {
        let w = Matrix::from_fn(3, 2, |i, j| (i + j) as f32);
        let layer = SparseAffineLayer::new(w, vec![0.5, -1.5], full_mask(3, 2), QuantMode::None).unwrap();
        let (y, _) = layer.forward(&Matrix::zeros(4, 3), Phase::Train).unwrap();
        for i in 0..4 {
            assert_eq!(y.row(i), &[0.5, -1.5]);
        }
    }

    #[test]
    fn all_ones_mask_matches_dense_affine() {
        let w = Matrix::from_fn(5, 3, |i, j| (i as f32 * 0.3 - j as f32 * 0.7).sin());
        let x = Matrix::from_fn(4, 5, |i, j| (i as f32 + 2.0 * j as f32).cos());
        let layer = SparseAffineLayer::new(w.clone(), vec![0.1, 0.2, 0.3], full_mask(5, 3), QuantMode::None).unwrap();
        let (y, cache) = layer.forward(&x, Phase::Train).unwrap();
        let mut dense = x.matmul(&w).unwrap();
        dense.add_row_vector(&[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(y, dense);
        let g = Matrix::from_fn(4, 3, |i, j| (i * 3 + j) as f32 * 0.01);
        let grads = layer.backward(&cache, &g).unwrap();
        assert_eq!(grads.weights, x.transpose().matmul(&g).unwrap());
        assert_eq!(grads.input, g.matmul(&w.transpose()).unwrap());
    }

    #[test]
    fn masked_gradients_are_zero_and_zero_grad_is_zero() {
        let w = Matrix::from_rows(&[[1.0, -2.0], [3.0, 4.0]]).unwrap();
        let layer = SparseAffineLayer::<f64>::new(w, vec![0.0, 0.0], mask_1011(), QuantMode::None).unwrap();
        let x = Matrix::from_rows(&[[0.3, -1.2], [2.0, 0.7]]).unwrap();
        let (_, cache) = layer.forward(&x, Phase::Train).unwrap();
        let g = Matrix::from_rows(&[[1.0, 2.0], [-0.5, 3.0]]).unwrap();
        let grads = layer.backward(&cache, &g).unwrap();
        assert_eq!(grads.weights[(0, 1)], 0.0);
        let zero = layer.backward(&cache, &Matrix::zeros(2, 2)).unwrap();
        assert!(zero.weights.data().iter().chain(&zero.bias).chain(zero.input.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_rejected() {
        let w = Matrix::from_rows(&[[1.0, -2.0], [3.0, 4.0]]).unwrap();
        let mut layer = SparseAffineLayer::<f64>::new(w, vec![0.0, 0.0], mask_1011(), QuantMode::None).unwrap();
        let x = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let (_, cache) = layer.forward(&x, Phase::Train).unwrap();
        let g = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let grads = layer.backward(&cache, &g).unwrap();
        layer.apply_gradients(&grads, 0.1).unwrap();
        assert!(matches!(layer.backward(&cache, &g), Err(Error::StaleCache)));
        let other = layer.clone();
        let (_, fresh) = other.forward(&x, Phase::Train).unwrap();
        let mut third = SparseAffineLayer::new(Matrix::zeros(2, 2), vec![0.0; 2], mask_1011(), QuantMode::None).unwrap();
        assert!(matches!(third.backward(&fresh, &g), Err(Error::StaleCache)));
        third.clip();
    }

    #[test]
    fn shape_errors() {
        let layer = SparseAffineLayer::<f32>::new(Matrix::zeros(3, 2), vec![0.0; 2], full_mask(3, 2), QuantMode::None).unwrap();
        assert!(layer.forward(&Matrix::zeros(1, 4), Phase::Train).is_err());
        assert!(SparseAffineLayer::<f32>::new(Matrix::zeros(2, 2), vec![0.0; 2], full_mask(3, 2), QuantMode::None).is_err());
        assert!(SparseAffineLayer::<f32>::new(Matrix::zeros(3, 2), vec![0.0; 3], full_mask(3, 2), QuantMode::None).is_err());
    }

    #[test]
    fn relu_cases() {
        let x = Matrix::<f64>::from_rows(&[[-1.0, 0.0, 2.0]]).unwrap();
        let (y, cache) = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&cache, &Matrix::from_rows(&[[5.0, 5.0, 5.0]]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 5.0]);
        assert_eq!(relu_forward(&y).0, y);
    }

    #[test]
    fn batchnorm_identity_on_standardized_batch() {
        let x = Matrix::<f64>::from_rows(&[[1.0, -1.0], [-1.0, 1.0]]).unwrap();
        let mut bn = BatchNorm::new(2);
        let (y, _) = bn.forward(&x, BnPhase::Train).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!((bn.running_var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_constant_feature() {
        let x = Matrix::<f64>::from_rows(&[[3.0, 1.0], [3.0, 2.0], [3.0, 4.0]]).unwrap();
        let mut bn = BatchNorm::new(2);
        let (y, cache) = bn.forward(&x, BnPhase::Train).unwrap();
        assert!(y.column(0).iter().all(|&v| v == 0.0));
        let g = bn.backward(&cache, &Matrix::filled(3, 2, 1.0)).unwrap();
        assert!(g.input.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batchnorm_rejects_single_sample_training() {
        let mut bn = BatchNorm::<f32>::new(3);
        assert!(matches!(bn.forward(&Matrix::zeros(1, 3), BnPhase::Train), Err(Error::DegenerateBatch(1))));
        assert!(bn.forward(&Matrix::zeros(1, 3), BnPhase::Infer).is_ok());
    }
}
