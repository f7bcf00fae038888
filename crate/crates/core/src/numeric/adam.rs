use serde::{Deserialize, Serialize};

use super::{Matrix, NumericError};

/// A named trainable tensor with its gradient and Adam moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub adam_m: Matrix,
    pub adam_v: Matrix,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            name: name.into(),
            grad: Matrix::zeros(r, c),
            adam_m: Matrix::zeros(r, c),
            adam_v: Matrix::zeros(r, c),
            value,
        }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, Matrix::zeros(rows, cols))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

pub fn zero_grads<'a>(blocks: impl IntoIterator<Item = &'a mut ParamBlock>) {
    for b in blocks {
        b.zero_grad();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), NumericError> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NumericError::Contract(
                "adam requires lr > 0, betas in [0, 1) and eps > 0",
            ))
        }
    }
}

/// One bias-corrected Adam update. `t` is the 1-based step count.
///
/// Gradients are read but left in place; the caller zeroes them.
pub fn adam_step<'a>(
    blocks: impl IntoIterator<Item = &'a mut ParamBlock>,
    cfg: &AdamConfig,
    t: u64,
) -> Result<(), NumericError> {
    if t == 0 {
        return Err(NumericError::Contract("adam step count starts at 1"));
    }
    let c1 = 1.0 - cfg.beta1.powi(t.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - cfg.beta2.powi(t.min(i32::MAX as u64) as i32);
    for block in blocks {
        let ParamBlock {
            value,
            grad,
            adam_m,
            adam_v,
            ..
        } = block;
        let it = value
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
            .zip(adam_m.as_mut_slice().iter_mut().zip(adam_v.as_mut_slice()));
        for ((p, &g), (m, v)) in it {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64, g: f64) -> ParamBlock {
        let mut b = ParamBlock::new("p", Matrix::column(&[v]));
        b.grad = Matrix::column(&[g]);
        b
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut b = ParamBlock::new("w", Matrix::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]));
        let before = b.value.clone();
        adam_step([&mut b], &AdamConfig::default(), 1).unwrap();
        assert_eq!(b.value, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut b = scalar(0.0, 1.0);
        adam_step([&mut b], &AdamConfig::default(), 1).unwrap();
        // m_hat = v_hat = 1 after bias correction, so the step is lr / (1 + eps).
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((b.value.get(0, 0) - expected).abs() < 1e-15);
        assert_eq!(b.grad.get(0, 0), 1.0);
    }

    #[test]
    fn identical_blocks_update_identically() {
        let mut a = scalar(0.3, -0.7);
        let mut b = scalar(0.3, -0.7);
        for t in 1..=5 {
            adam_step([&mut a, &mut b], &AdamConfig::default(), t).unwrap();
        }
        assert_eq!(a.value.get(0, 0).to_bits(), b.value.get(0, 0).to_bits());
    }

    #[test]
    fn step_zero_is_rejected() {
        let mut b = scalar(0.0, 1.0);
        assert!(adam_step([&mut b], &AdamConfig::default(), 0).is_err());
    }
}
