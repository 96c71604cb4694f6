//! Mini-batch SGD over masked networks with a squared hinge loss.
//!
//! Hidden layers are `affine -> batch norm -> ReLU`; the output layer is
//! affine only and its scores feed the loss. Each step runs the forward pass
//! on effective weights, back-propagates to every layer, and then updates the
//! stored weights with the masked gradients.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::layers::{relu_backward, relu_forward, BatchNorm, BnPhase, SparseAffineLayer};
use crate::lfsr::{LfsrConfig, LfsrMode};
use crate::mask::{column_seed, generate_mask, width_for_rows, SngConfig};
use crate::quantize::{Phase, QuantMode};
use crate::tensor::{Matrix, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Layer widths, input first: `[784, 100, 100, 10]`.
    pub shape: Vec<usize>,
    /// Sparsity degree per weight layer, or a single value for all layers.
    pub sparsity: Vec<f64>,
    pub quant: QuantMode,
    pub learning_rate: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rng_seed: u64,
    pub mask_seed: u32,
    pub lfsr_mode: LfsrMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            shape: vec![784, 512, 512, 10],
            sparsity: vec![0.0],
            quant: QuantMode::None,
            learning_rate: 0.01,
            lr_decay: 0.98,
            batch_size: 100,
            epochs: 50,
            rng_seed: 1,
            mask_seed: 1,
            lfsr_mode: LfsrMode::DeBruijn,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.shape.len() < 2 {
            return bad(format!("shape needs at least 2 widths, got {:?}", self.shape));
        }
        if self.shape.contains(&0) {
            return bad(format!("layer widths must be >= 1: {:?}", self.shape));
        }
        let layers = self.shape.len() - 1;
        if self.sparsity.len() != 1 && self.sparsity.len() != layers {
            return bad(format!(
                "{} sparsity values for {layers} layers",
                self.sparsity.len()
            ));
        }
        if let Some(p) = self.sparsity.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return bad(format!("sparsity {p} outside [0, 1)"));
        }
        if self.batch_size < 2 {
            return bad(format!("batch size {} < 2", self.batch_size));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {}", self.learning_rate));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr decay {} outside (0, 1]", self.lr_decay));
        }
        if self.mask_seed == 0 {
            return bad("mask seed must be nonzero".into());
        }
        Ok(())
    }

    pub fn layer_sparsity(&self, layer: usize) -> f64 {
        if self.sparsity.len() == 1 {
            self.sparsity[0]
        } else {
            self.sparsity[layer]
        }
    }

    /// First 8 bytes of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

/// Mean over the batch of `sum_k max(0, 1 - t_k s_k)^2` with one-vs-all
/// targets `t_k = +1` for the label and `-1` otherwise, and its gradient.
pub fn squared_hinge_loss<T: Scalar>(scores: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>)> {
    let (batch, classes) = scores.shape();
    if labels.len() != batch {
        return Err(Error::shape("squared_hinge_loss", batch, labels.len()));
    }
    if batch == 0 {
        return Err(Error::EmptyDataset);
    }
    let n = T::of(batch as f64);
    let two = T::of(2.0);
    let mut loss = T::zero();
    let mut grad = Matrix::zeros(batch, classes);
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        for k in 0..classes {
            let t = if k == label { T::one() } else { -T::one() };
            let margin = (T::one() - t * scores[(i, k)]).max(T::zero());
            loss += margin * margin;
            grad[(i, k)] = -two * t * margin / n;
        }
    }
    Ok((loss / n, grad))
}

/// Which weights inference uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Real,
    Quantized,
}

impl EvalMode {
    pub fn phase(self) -> Phase {
        match self {
            EvalMode::Real => Phase::TestReal,
            EvalMode::Quantized => Phase::TestQuantized,
        }
    }
}

/// Stack of masked affine layers with batch norm between them.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<SparseAffineLayer<f32>>,
    norms: Vec<BatchNorm<f32>>,
}

struct StepCaches {
    affine: Vec<crate::layers::LayerCache<f32>>,
    norm: Vec<crate::layers::BnCache<f32>>,
    relu: Vec<crate::layers::ReluCache<f32>>,
}

impl Network {
    /// Masks from the LFSR schedule and Glorot-uniform weights from `rng_seed`.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let mut layers = Vec::new();
        let mut offset = 0usize;
        for (l, pair) in cfg.shape.windows(2).enumerate() {
            let (n, m) = (pair[0], pair[1]);
            let width = width_for_rows(n);
            let lfsr = LfsrConfig::standard(width, 1, cfg.lfsr_mode)?;
            let sng = SngConfig::from_sparsity(lfsr, cfg.layer_sparsity(l))?;
            let base = column_seed(cfg.mask_seed, offset, width);
            let mask = generate_mask(n, m, &sng, base)?;
            layers.push(SparseAffineLayer::init(mask, cfg.quant, &mut rng)?);
            offset += m;
        }
        Self::from_parts(layers, None)
    }

    /// Assembles a network; `norms` defaults to fresh batch norms.
    pub fn from_parts(layers: Vec<SparseAffineLayer<f32>>, norms: Option<Vec<BatchNorm<f32>>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::shape("Network", pair[0].outputs(), pair[1].inputs()));
            }
        }
        let norms = match norms {
            Some(n) => n,
            None => layers[..layers.len() - 1]
                .iter()
                .map(|l| BatchNorm::new(l.outputs()))
                .collect(),
        };
        if norms.len() != layers.len() - 1
            || norms.iter().zip(&layers).any(|(bn, l)| bn.features() != l.outputs())
        {
            return Err(Error::InvalidConfig("one batch norm per hidden layer required".into()));
        }
        for bn in &norms {
            bn.validate()?;
        }
        Ok(Network { layers, norms })
    }

    pub fn layers(&self) -> &[SparseAffineLayer<f32>] {
        &self.layers
    }

    pub fn norms(&self) -> &[BatchNorm<f32>] {
        &self.norms
    }

    pub fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].inputs()];
        s.extend(self.layers.iter().map(|l| l.outputs()));
        s
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs())
    }

    /// Scores for a batch in inference mode.
    pub fn predict(&self, x: &Matrix<f32>, mode: EvalMode) -> Result<Matrix<f32>> {
        Ok(self.forward_collect(x, mode)?.pop().expect("at least one layer"))
    }

    /// Pre-activations of every layer in inference mode.
    pub fn forward_collect(&self, x: &Matrix<f32>, mode: EvalMode) -> Result<Vec<Matrix<f32>>> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (z, _) = layer.forward(&h, mode.phase())?;
            if l < self.norms.len() {
                h = relu_forward(&self.norms[l].infer(&z)?).0;
            }
            out.push(z);
        }
        Ok(out)
    }

    /// Input to layer `index` in inference mode.
    pub fn layer_input(&self, x: &Matrix<f32>, index: usize, mode: EvalMode) -> Result<Matrix<f32>> {
        if index >= self.layers.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.layers.len(),
            });
        }
        let mut h = x.clone();
        for l in 0..index {
            let (z, _) = self.layers[l].forward(&h, mode.phase())?;
            h = relu_forward(&self.norms[l].infer(&z)?).0;
        }
        Ok(h)
    }

    fn forward_train(&mut self, x: &Matrix<f32>) -> Result<(Matrix<f32>, StepCaches)> {
        let mut caches = StepCaches {
            affine: Vec::with_capacity(self.layers.len()),
            norm: Vec::with_capacity(self.norms.len()),
            relu: Vec::with_capacity(self.norms.len()),
        };
        let mut h = x.clone();
        for l in 0..self.layers.len() {
            let (z, c) = self.layers[l].forward(&h, Phase::Train)?;
            caches.affine.push(c);
            if l < self.norms.len() {
                let (n, bc) = self.norms[l].forward(&z, BnPhase::Train)?;
                let (r, rc) = relu_forward(&n);
                caches.norm.push(bc);
                caches.relu.push(rc);
                h = r;
            } else {
                h = z;
            }
        }
        Ok((h, caches))
    }

    /// One SGD step on a mini-batch; returns the batch loss.
    pub fn train_step(&mut self, x: &Matrix<f32>, labels: &[usize], lr: f32) -> Result<f32> {
        let (scores, caches) = self.forward_train(x)?;
        let (loss, mut grad) = squared_hinge_loss(&scores, labels)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch: 0,
                batch: 0,
                loss: f64::from(loss),
            });
        }
        let mut affine_grads = Vec::with_capacity(self.layers.len());
        let mut norm_grads = Vec::with_capacity(self.norms.len());
        for l in (0..self.layers.len()).rev() {
            if l < self.norms.len() {
                let g = relu_backward(&caches.relu[l], &grad)?;
                let bg = self.norms[l].backward(&caches.norm[l], &g)?;
                grad = bg.input.clone();
                norm_grads.push(bg);
            }
            let ag = self.layers[l].backward(&caches.affine[l], &grad)?;
            grad = ag.input.clone();
            affine_grads.push(ag);
        }
        affine_grads.reverse();
        norm_grads.reverse();
        for (layer, g) in self.layers.iter_mut().zip(&affine_grads) {
            layer.apply_gradients(g, lr)?;
        }
        for (bn, g) in self.norms.iter_mut().zip(&norm_grads) {
            bn.apply_gradients(g, lr);
        }
        Ok(loss)
    }

    /// Kept weights, biases and batch-norm scale/shift actually present.
    pub fn parameter_count(&self) -> ParameterCount {
        ParameterCount {
            weights: self.layers.iter().map(|l| l.mask().kept()).sum(),
            biases: self.layers.iter().map(|l| l.outputs()).sum(),
            batch_norm: self.norms.iter().map(|b| 2 * b.features()).sum(),
        }
    }

    #[cfg(test)]
    pub(crate) fn layers_mut(&mut self) -> &mut [SparseAffineLayer<f32>] {
        &mut self.layers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub weights: usize,
    pub biases: usize,
    pub batch_norm: usize,
}

impl ParameterCount {
    /// Weights plus biases, the convention of the published tables.
    pub fn weights_and_biases(&self) -> usize {
        self.weights + self.biases
    }

    pub fn total(&self) -> usize {
        self.weights + self.biases + self.batch_norm
    }
}

/// Parameter count as tabulated for sparsely-connected networks:
/// `round((1 - p) * dense weights) + biases`, with the rounding applied to
/// the network-wide weight total.
pub fn nominal_parameter_count(shape: &[usize], sparsity: f64) -> usize {
    let weights: usize = shape.windows(2).map(|p| p[0] * p[1]).sum();
    let biases: usize = shape[1..].iter().sum();
    ((1.0 - sparsity) * weights as f64).round() as usize + biases
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub learning_rate: f64,
    /// Misclassification rates in percent.
    pub val_error: f64,
    pub test_error: f64,
    /// Test error with quantized weights, for quantized training.
    pub test_error_quantized: Option<f64>,
    /// Error on an additional held-out set, when one is supplied.
    pub official_test_error: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot at the epoch with the lowest validation error.
    pub network: Network,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
}

impl TrainOutcome {
    pub fn best(&self) -> Option<&EpochMetrics> {
        self.history.iter().find(|m| m.epoch == self.best_epoch)
    }
}

/// One pass over `data` in a shuffled order; returns the mean batch loss.
///
/// The order comes from a ChaCha8 stream keyed by `(rng_seed, epoch)`.
/// Trailing samples that cannot form a batch of at least 2 are skipped.
pub fn train_epoch(network: &mut Network, data: &Dataset, cfg: &TrainConfig, epoch: usize, lr: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    let mut total = 0.0;
    let mut batches = 0usize;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        if chunk.len() < 2 {
            continue;
        }
        let x = data.images.gather_rows(chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let loss = network.train_step(&x, &labels, lr as f32).map_err(|e| match e {
            Error::Divergence { loss, .. } => Error::Divergence { epoch, batch: b, loss },
            other => other,
        })?;
        total += f64::from(loss);
        batches += 1;
    }
    Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
}

/// Mean loss over `data` in inference mode.
pub fn dataset_loss(network: &Network, data: &Dataset, mode: EvalMode) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let scores = network.predict(&data.images.slice_rows(start, end), mode)?;
        let (loss, _) = squared_hinge_loss(&scores, &data.labels[start..end])?;
        total += f64::from(loss) * (end - start) as f64;
    }
    Ok(total / data.len() as f64)
}

const EVAL_CHUNK: usize = 1000;

/// Misclassification rate in percent; ties go to the lowest class index.
pub fn evaluate(network: &Network, data: &Dataset, mode: EvalMode) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut errors = 0usize;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let scores = network.predict(&data.images.slice_rows(start, end), mode)?;
        for (i, &label) in data.labels[start..end].iter().enumerate() {
            if argmax(scores.row(i)) != label {
                errors += 1;
            }
        }
    }
    Ok(100.0 * errors as f64 / data.len() as f64)
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Runs `cfg.epochs` epochs and keeps the best-validation snapshot.
///
/// `on_epoch` sees every epoch's metrics as soon as they are computed.
pub fn fit(
    cfg: &TrainConfig,
    split: &DataSplit,
    official_test: Option<&Dataset>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let input = cfg.shape[0];
    for (name, set) in [("train", &split.train), ("validation", &split.validation), ("test", &split.test)] {
        if set.is_empty() {
            return Err(Error::InvalidConfig(format!("{name} set is empty")));
        }
        if set.images.cols() != input {
            return Err(Error::shape("fit", input, set.images.cols()));
        }
    }
    let mut network = Network::init(cfg)?;
    let mut best = network.clone();
    let mut best_epoch = 0;
    let mut best_val = f64::INFINITY;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut lr = cfg.learning_rate;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let loss = train_epoch(&mut network, &split.train, cfg, epoch, lr)?;
        let val_error = evaluate(&network, &split.validation, EvalMode::Real)?;
        let test_error = evaluate(&network, &split.test, EvalMode::Real)?;
        let test_error_quantized = match cfg.quant {
            QuantMode::None => None,
            _ => Some(evaluate(&network, &split.test, EvalMode::Quantized)?),
        };
        let official_test_error = official_test
            .map(|d| evaluate(&network, d, EvalMode::Real))
            .transpose()?;
        let metrics = EpochMetrics {
            epoch,
            loss,
            learning_rate: lr,
            val_error,
            test_error,
            test_error_quantized,
            official_test_error,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&metrics);
        history.push(metrics);
        if val_error < best_val {
            best_val = val_error;
            best_epoch = epoch;
            best = network.clone();
        }
        lr *= cfg.lr_decay;
    }
    Ok(TrainOutcome {
        network: best,
        best_epoch,
        history,
    })
}
