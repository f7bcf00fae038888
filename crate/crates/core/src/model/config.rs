use serde::{Deserialize, Serialize};

use crate::cohort::{FeatureDims, NUM_CLASSES};
use crate::numeric::Activation;

use super::ModelError;

/// Class weights for the cross entropy term and the coefficient on the
/// auxiliary latent-reconstruction term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// CN, MCI, AD order.
    pub class_weights: [f64; 3],
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class_weights: [1.0, 1.3, 2.0],
            alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    #[default]
    Gru,
    /// Plain `tanh(W x + U h + b)` cell.
    Tanh,
}

/// How the baseline represents the horizon it appends to the hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauEncoding {
    /// The horizon in 6-month units as one float.
    #[default]
    Scalar,
    /// One slot per possible horizon `1..=max_sum_t_tau - 2`.
    OneHot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Autoregressive latent rollout.
    Flare,
    /// Horizon concatenated to the last hidden state.
    Concat,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Flare => "flare",
            ModelKind::Concat => "concat",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSizes {
    pub volumetric: Vec<usize>,
    pub demographic: Vec<usize>,
    pub cognitive: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderOut {
    pub volumetric: usize,
    pub demographic: usize,
    pub cognitive: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dims: FeatureDims,
    pub enc_hidden: EncoderSizes,
    pub enc_out: EncoderOut,
    pub rnn_hidden: usize,
    pub rho_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
    pub cell: CellKind,
    pub tau_encoding: TauEncoding,
    pub loss: LossWeights,
    pub max_t: usize,
    pub max_sum_t_tau: usize,
}

impl Default for ModelConfig {
    /// Desk-scale defaults matching the default synthetic cohort (32/3/4).
    fn default() -> Self {
        Self {
            dims: FeatureDims {
                volumetric: 32,
                demographic: 3,
                cognitive: 4,
            },
            enc_hidden: EncoderSizes {
                volumetric: vec![32, 16],
                demographic: vec![8, 8],
                cognitive: vec![8, 8],
            },
            enc_out: EncoderOut {
                volumetric: 8,
                demographic: 4,
                cognitive: 4,
            },
            rnn_hidden: 16,
            rho_hidden: vec![16],
            classifier_hidden: vec![16],
            num_classes: NUM_CLASSES,
            activation: Activation::Relu,
            cell: CellKind::Gru,
            tau_encoding: TauEncoding::Scalar,
            loss: LossWeights::default(),
            max_t: 4,
            max_sum_t_tau: 5,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration used for finite-difference gradient checks:
    /// modality dims (3, 2, 2), latent dim 6, hidden 5.
    pub fn tiny() -> Self {
        Self {
            dims: FeatureDims {
                volumetric: 3,
                demographic: 2,
                cognitive: 2,
            },
            enc_hidden: EncoderSizes {
                volumetric: vec![4, 3],
                demographic: vec![3, 3],
                cognitive: vec![3, 3],
            },
            enc_out: EncoderOut {
                volumetric: 2,
                demographic: 2,
                cognitive: 2,
            },
            rnn_hidden: 5,
            rho_hidden: vec![4],
            classifier_hidden: vec![4],
            ..Self::default()
        }
    }

    /// Latent dimension `d_f`: the three encoder outputs concatenated.
    pub fn latent_dim(&self) -> usize {
        self.enc_out.volumetric + self.enc_out.demographic + self.enc_out.cognitive
    }

    pub fn max_tau(&self) -> usize {
        self.max_sum_t_tau.saturating_sub(2)
    }

    pub fn tau_features(&self) -> usize {
        match self.tau_encoding {
            TauEncoding::Scalar => 1,
            TauEncoding::OneHot => self.max_tau(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.num_classes != NUM_CLASSES {
            return bad(format!("num_classes must be 3, got {}", self.num_classes));
        }
        if self.dims.volumetric == 0 || self.dims.demographic == 0 || self.dims.cognitive == 0 {
            return bad("every modality needs at least one feature".into());
        }
        if self.enc_out.volumetric == 0 || self.enc_out.demographic == 0 || self.enc_out.cognitive == 0
        {
            return bad("every encoder needs a positive output size".into());
        }
        let all_hidden = self
            .enc_hidden
            .volumetric
            .iter()
            .chain(&self.enc_hidden.demographic)
            .chain(&self.enc_hidden.cognitive)
            .chain(&self.rho_hidden)
            .chain(&self.classifier_hidden);
        if self.rnn_hidden == 0 || all_hidden.into_iter().any(|&h| h == 0) {
            return bad("hidden sizes must be positive".into());
        }
        if self.loss.class_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return bad("class weights must be positive".into());
        }
        if !(self.loss.alpha >= 0.0 && self.loss.alpha.is_finite()) {
            return bad("alpha must be non-negative".into());
        }
        if self.max_t < 2 || self.max_sum_t_tau < self.max_t + 1 {
            return bad(format!(
                "need max_t >= 2 and max_sum_t_tau > max_t, got {} and {}",
                self.max_t, self.max_sum_t_tau
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::tiny().latent_dim(), 6);
        assert_eq!(ModelConfig::default().max_tau(), 3);
    }

    #[test]
    fn rejects_wrong_class_count() {
        let cfg = ModelConfig {
            num_classes: 4,
            ..ModelConfig::tiny()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: ModelConfig = serde_json::from_str(r#"{"rnn_hidden": 7}"#).unwrap();
        assert_eq!(cfg.rnn_hidden, 7);
        assert_eq!(cfg.loss.class_weights, [1.0, 1.3, 2.0]);
    }
}
