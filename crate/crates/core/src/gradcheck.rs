//! Central-difference gradient checks for the differentiable pieces.
//!
//! Each `*_case` builds a random small instance from a seed, takes the
//! scalar objective `sum(G * output)` for a random `G`, and compares the
//! analytic backward pass against `(f(x + h) - f(x - h)) / 2h` in f64.
//! Inputs are kept away from the ReLU and hinge kinks so the objective is
//! smooth within `h`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layers::{relu_backward, relu_forward, BatchNorm, BnPhase, SparseAffineLayer};
use crate::lfsr::{LfsrConfig, LfsrMode};
use crate::mask::{generate_mask, width_for_rows, SngConfig};
use crate::quantize::{Phase, QuantMode};
use crate::tensor::Matrix;
use crate::train::squared_hinge_loss;

pub const STEP: f64 = 1e-5;

/// Entries whose gradients are both below this are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let up = f(&probe);
            probe[k] = x[k] - h;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max_k |a_k - n_k| / max(|a_k|, |n_k|, RELATIVE_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Values in `±[gap, hi)`.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gap: f64, hi: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| {
        let v = rng.random_range(gap..hi);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn dot(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Errors for weights, bias and input of a masked affine layer.
pub fn sparse_affine_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..9);
    let m = rng.random_range(1..6);
    let batch = rng.random_range(1..5);
    let p = [0.0, 0.25, 0.5, 0.75][rng.random_range(0..4)];
    let lfsr = LfsrConfig::standard(width_for_rows(n), 1, LfsrMode::DeBruijn).expect("standard taps");
    let sng = SngConfig::from_sparsity(lfsr, p).expect("valid sparsity");
    let base = rng.random_range(1..(1u32 << lfsr.width()));
    let mask = generate_mask(n, m, &sng, base).expect("valid mask");
    let w = random_matrix(&mut rng, n, m, -1.0, 1.0);
    let b: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = random_matrix(&mut rng, batch, n, -1.0, 1.0);
    let g = random_matrix(&mut rng, batch, m, -1.0, 1.0);

    let layer = SparseAffineLayer::new(w.clone(), b.clone(), mask.clone(), QuantMode::None).expect("shapes agree");
    let (_, cache) = layer.forward(&x, Phase::Train).expect("forward");
    let grads = layer.backward(&cache, &g).expect("backward");

    let objective = |w: &Matrix<f64>, b: &[f64], x: &Matrix<f64>| {
        let l = SparseAffineLayer::new(w.clone(), b.to_vec(), mask.clone(), QuantMode::None).expect("shapes agree");
        dot(&l.forward(x, Phase::Train).expect("forward").0, &g)
    };
    let num_w = numeric_gradient(|v| objective(&Matrix::new(n, m, v.to_vec()).unwrap(), &b, &x), w.data(), STEP);
    let num_b = numeric_gradient(|v| objective(&w, v, &x), &b, STEP);
    let num_x = numeric_gradient(|v| objective(&w, &b, &Matrix::new(batch, n, v.to_vec()).unwrap()), x.data(), STEP);
    max_relative_error(grads.weights.data(), &num_w)
        .max(max_relative_error(&grads.bias, &num_b))
        .max(max_relative_error(grads.input.data(), &num_x))
}

pub fn relu_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.random_range(1..5);
    let cols = rng.random_range(1..8);
    let x = away_from_zero(&mut rng, rows, cols, 1e-3, 2.0);
    let g = random_matrix(&mut rng, rows, cols, -1.0, 1.0);
    let (_, cache) = relu_forward(&x);
    let analytic = relu_backward(&cache, &g).expect("shapes agree");
    let numeric = numeric_gradient(
        |v| dot(&relu_forward(&Matrix::new(rows, cols, v.to_vec()).unwrap()).0, &g),
        x.data(),
        STEP,
    );
    max_relative_error(analytic.data(), &numeric)
}

/// Training-mode batch norm: errors for input, scale and shift.
pub fn batch_norm_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = rng.random_range(2..7);
    let f = rng.random_range(1..5);
    let x = random_matrix(&mut rng, batch, f, -2.0, 2.0);
    let g = random_matrix(&mut rng, batch, f, -1.0, 1.0);
    let mut bn = BatchNorm::<f64>::new(f);
    bn.gamma = (0..f).map(|_| rng.random_range(0.5..1.5)).collect();
    bn.beta = (0..f).map(|_| rng.random_range(-0.5..0.5)).collect();

    let objective = |bn: &BatchNorm<f64>, x: &Matrix<f64>| {
        let mut scratch = bn.clone();
        dot(&scratch.forward(x, BnPhase::Train).expect("batch >= 2").0, &g)
    };
    let mut probe = bn.clone();
    let (_, cache) = probe.forward(&x, BnPhase::Train).expect("batch >= 2");
    let grads = bn.backward(&cache, &g).expect("shapes agree");

    let num_x = numeric_gradient(|v| objective(&bn, &Matrix::new(batch, f, v.to_vec()).unwrap()), x.data(), STEP);
    let num_gamma = numeric_gradient(
        |v| objective(&BatchNorm { gamma: v.to_vec(), ..bn.clone() }, &x),
        &bn.gamma,
        STEP,
    );
    let num_beta = numeric_gradient(
        |v| objective(&BatchNorm { beta: v.to_vec(), ..bn.clone() }, &x),
        &bn.beta,
        STEP,
    );
    max_relative_error(grads.input.data(), &num_x)
        .max(max_relative_error(&grads.gamma, &num_gamma))
        .max(max_relative_error(&grads.beta, &num_beta))
}

/// Squared hinge loss with respect to the scores.
pub fn squared_hinge_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = rng.random_range(1..5);
    let classes = rng.random_range(2..6);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    // Keep every margin 1 - t*s at least 1e-3 away from the kink.
    let s = Matrix::from_fn(batch, classes, |_, _| loop {
        let v: f64 = rng.random_range(-2.0..2.0);
        if (v.abs() - 1.0).abs() > 1e-3 {
            break v;
        }
    });
    let (_, analytic) = squared_hinge_loss(&s, &labels).expect("valid labels");
    let numeric = numeric_gradient(
        |v| squared_hinge_loss(&Matrix::new(batch, classes, v.to_vec()).unwrap(), &labels).unwrap().0,
        s.data(),
        STEP,
    );
    max_relative_error(analytic.data(), &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harness_on_known_function() {
        // f = x0^2 * x1, grad = (2 x0 x1, x0^2).
        let g = numeric_gradient(|v| v[0] * v[0] * v[1], &[3.0, -2.0], STEP);
        assert!(max_relative_error(&[-12.0, 9.0], &g) < 1e-8);
        assert!(max_relative_error(&[-12.0, 9.5], &g) > 1e-2);
    }

    #[test]
    fn floor_applies_near_zero() {
        assert_eq!(max_relative_error(&[0.0], &[0.0]), 0.0);
        assert!((max_relative_error(&[0.0], &[1e-9]) - 1e-3).abs() < 1e-12);
    }
}
