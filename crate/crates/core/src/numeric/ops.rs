//! Layer primitives with explicit forward and backward passes, plus losses.

use serde::{Deserialize, Serialize};

use super::{Matrix, NumericError};

/// Forward input retained for [`linear_backward`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearCache {
    input: Option<Vec<f64>>,
}

impl LinearCache {
    pub fn input(&self) -> Option<&[f64]> {
        self.input.as_deref()
    }
}

fn check_len(
    op: &'static str,
    operand: &'static str,
    expected: usize,
    found: usize,
) -> Result<(), NumericError> {
    if expected == found {
        Ok(())
    } else {
        Err(NumericError::Shape {
            op,
            operand,
            expected,
            found,
        })
    }
}

/// `W·x + b`
pub fn linear_forward(
    x: &[f64],
    w: &Matrix,
    b: &[f64],
) -> Result<(Vec<f64>, LinearCache), NumericError> {
    check_len("linear_forward", "x", w.cols(), x.len())?;
    check_len("linear_forward", "b", w.rows(), b.len())?;
    let mut y = w.matvec(x);
    for (yi, bi) in y.iter_mut().zip(b) {
        *yi += bi;
    }
    Ok((
        y,
        LinearCache {
            input: Some(x.to_vec()),
        },
    ))
}

/// Gradients of a linear map given the upstream gradient of its output.
///
/// Returns `(grad_x, grad_w, grad_b)` with `grad_w = upstream ⊗ x`.
pub fn linear_backward(
    cache: &LinearCache,
    w: &Matrix,
    upstream: &[f64],
) -> Result<(Vec<f64>, Matrix, Vec<f64>), NumericError> {
    let mut grad_w = Matrix::zeros(w.rows(), w.cols());
    let mut grad_b = vec![0.0; w.rows()];
    let grad_x = linear_backward_accumulate(cache, w, upstream, &mut grad_w, &mut grad_b)?;
    Ok((grad_x, grad_w, grad_b))
}

/// Same as [`linear_backward`] but sums the parameter gradients into
/// existing buffers.
pub fn linear_backward_accumulate(
    cache: &LinearCache,
    w: &Matrix,
    upstream: &[f64],
    grad_w: &mut Matrix,
    grad_b: &mut [f64],
) -> Result<Vec<f64>, NumericError> {
    let x = cache.input.as_deref().ok_or(NumericError::Contract(
        "linear_backward called without a forward cache",
    ))?;
    check_len("linear_backward", "upstream", w.rows(), upstream.len())?;
    check_len("linear_backward", "cached input", w.cols(), x.len())?;
    check_len("linear_backward", "grad_b", w.rows(), grad_b.len())?;
    if grad_w.shape() != w.shape() {
        return Err(NumericError::Shape {
            op: "linear_backward",
            operand: "grad_w",
            expected: w.len(),
            found: grad_w.len(),
        });
    }
    grad_w.add_outer(upstream, x);
    for (g, u) in grad_b.iter_mut().zip(upstream) {
        *g += u;
    }
    Ok(w.matvec_transposed(upstream))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative evaluated at the forward input `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn forward(self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| self.apply(v)).collect()
    }

    /// Multiplies `upstream` by the elementwise derivative at `input`.
    pub fn backward(self, input: &[f64], upstream: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), upstream.len());
        input
            .iter()
            .zip(upstream)
            .map(|(&x, &u)| u * self.derivative(x))
            .collect()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

/// Class-weighted cross entropy on raw logits.
///
/// `loss = w[label] · (logsumexp(logits) − logits[label])` and
/// `grad = w[label] · (softmax(logits) − onehot(label))`.
pub fn weighted_cross_entropy(logits: &[f64], label: usize, weights: &[f64]) -> (f64, Vec<f64>) {
    debug_assert!(label < logits.len());
    debug_assert_eq!(logits.len(), weights.len());
    let w = weights[label];
    let loss = w * (log_sum_exp(logits) - logits[label]);
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    grad.iter_mut().for_each(|g| *g *= w);
    (loss, grad)
}

/// Mean squared error over the components of one vector.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), NumericError> {
    check_len("mse", "target", pred.len(), target.len())?;
    let n = pred.len() as f64;
    let loss = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| 2.0 * (p - t) / n)
        .collect();
    Ok((loss, grad))
}
