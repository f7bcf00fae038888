//! The latent-rollout forecaster and the horizon-concatenation baseline.
//!
//! Both models share the same front end: three modality encoders whose
//! outputs are concatenated into a latent visit vector `f`, followed by a
//! recurrent cell. They differ in how the horizon `τ` enters:
//!
//! * [`ModelKind::Flare`] owns a feature-prediction network `ρ` mapping a
//!   hidden state to the next visit's latent. After the observed window it
//!   runs `τ` free steps `f̂ = ρ(h)`, `h = cell(f̂, h)` and classifies the
//!   final hidden state. Missing visits inside the window are filled with
//!   `ρ(h_prev)` the same way. Training adds `α · MSE(ρ(h_t), f_{t+1})` for
//!   every observed transition inside the window.
//! * [`ModelKind::Concat`] classifies `h_T ⊕ repr(τ)` directly.
//!
//! Backpropagation is hand-written and exact; see the gradient checks in
//! [`crate::gradcheck`].

mod cell;
mod config;
mod mlp;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Stage, VisitFeatures};
use crate::numeric::{
    adam_step, mse, weighted_cross_entropy, AdamConfig, Checkpoint, NumericError, ParamBlock,
};

pub use cell::{CellCache, RecurrentCell};
pub use config::{
    CellKind, EncoderOut, EncoderSizes, LossWeights, ModelConfig, ModelKind, TauEncoding,
};
pub use mlp::{Dense, Mlp, MlpCache};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("cannot encode an unobserved visit; impute it instead")]
    UnobservedVisit,
    #[error("the first visit of a window must be observed to anchor imputation")]
    ImputationAnchor,
    #[error("unsupported input: {0}")]
    UnsupportedInput(String),
    #[error("contract violation: {0}")]
    Contract(&'static str),
    #[error("trace was recorded against parameter version {trace}, parameters are now at {current}")]
    StaleTrace { trace: u64, current: u64 },
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
}

/// One window position as seen by the model: `None` for a missing visit.
pub type VisitInput<'a> = Option<&'a VisitFeatures>;

/// Where the latent fed into a recurrent step came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSource {
    /// Encoded from an observed visit.
    Encoded,
    /// Predicted by `ρ` for a missing visit inside the window.
    Imputed,
    /// Predicted by `ρ` past the end of the window.
    RolledOut,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    parts: [MlpCache; 3],
}

#[derive(Debug, Clone)]
enum InputCache {
    Encoder(EncoderCache),
    Rho(MlpCache),
}

#[derive(Debug, Clone)]
struct StepRecord {
    source: StepSource,
    input: Vec<f64>,
    input_cache: InputCache,
    cell: CellCache,
    hidden: Vec<f64>,
}

#[derive(Debug, Clone)]
struct AuxRecord {
    prediction: Vec<f64>,
    cache: MlpCache,
}

/// Everything one rollout forward pass produced.
#[derive(Debug, Clone)]
pub struct RolloutTrace {
    window_len: usize,
    tau: usize,
    steps: Vec<StepRecord>,
    /// Index `t` holds `ρ(h_t)` when visit `t + 1` of the window is observed.
    aux: Vec<Option<AuxRecord>>,
    classifier: MlpCache,
    pub logits: Vec<f64>,
    params_version: u64,
}

impl RolloutTrace {
    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    /// Number of recurrent updates performed (`T + τ`).
    pub fn rnn_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn provenance(&self) -> Vec<StepSource> {
        self.steps.iter().map(|s| s.source).collect()
    }

    pub fn imputed_count(&self) -> usize {
        self.count_source(StepSource::Imputed)
    }

    /// `ρ` evaluations on the path to the classifier: imputations plus rollout steps.
    pub fn rho_calls_on_path(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.source != StepSource::Encoded)
            .count()
    }

    /// `ρ` evaluations made only for the auxiliary loss.
    pub fn aux_rho_calls(&self) -> usize {
        self.aux.iter().flatten().count()
    }

    fn count_source(&self, src: StepSource) -> usize {
        self.steps.iter().filter(|s| s.source == src).count()
    }

    /// Latents of observed visits, in window order.
    pub fn latents(&self) -> Vec<&[f64]> {
        self.steps
            .iter()
            .filter(|s| s.source == StepSource::Encoded)
            .map(|s| s.input.as_slice())
            .collect()
    }

    /// Latents predicted by `ρ` (imputed and rolled out), in step order.
    pub fn predicted_latents(&self) -> Vec<&[f64]> {
        self.steps
            .iter()
            .filter(|s| s.source != StepSource::Encoded)
            .map(|s| s.input.as_slice())
            .collect()
    }

    /// Hidden states after each of the `T` window steps.
    pub fn hidden_states(&self) -> Vec<&[f64]> {
        self.steps[..self.window_len]
            .iter()
            .map(|s| s.hidden.as_slice())
            .collect()
    }

    /// Hidden states produced during the `τ` rollout steps.
    pub fn rolled_out_hidden(&self) -> Vec<&[f64]> {
        self.steps[self.window_len..]
            .iter()
            .map(|s| s.hidden.as_slice())
            .collect()
    }

    /// The hidden state the classifier consumed.
    pub fn final_hidden(&self) -> &[f64] {
        &self.steps.last().expect("at least one step").hidden
    }

    /// Ground-truth next-visit latents: entry `t` is `f_{t+1}` when visit
    /// `t + 1` of the window was observed.
    pub fn teacher_latents(&self) -> Vec<Option<Vec<f64>>> {
        (0..self.window_len.saturating_sub(1))
            .map(|t| {
                let next = &self.steps[t + 1];
                (next.source == StepSource::Encoded).then(|| next.input.clone())
            })
            .collect()
    }

    /// Teacher-forced predictions `ρ(h_t)`, aligned with [`Self::teacher_latents`].
    pub fn aux_predictions(&self) -> Vec<Option<&[f64]>> {
        self.aux
            .iter()
            .map(|a| a.as_ref().map(|a| a.prediction.as_slice()))
            .collect()
    }
}

/// Forward pass of the concatenation baseline.
#[derive(Debug, Clone)]
pub struct BaselineTrace {
    tau: usize,
    steps: Vec<StepRecord>,
    classifier: MlpCache,
    /// `h_T ⊕ repr(τ)`
    pub classifier_input: Vec<f64>,
    pub logits: Vec<f64>,
    params_version: u64,
}

impl BaselineTrace {
    pub fn rnn_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn hidden_states(&self) -> Vec<&[f64]> {
        self.steps.iter().map(|s| s.hidden.as_slice()).collect()
    }
}

#[derive(Debug, Clone)]
pub enum Trace {
    Flare(RolloutTrace),
    Concat(BaselineTrace),
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        match self {
            Trace::Flare(t) => &t.logits,
            Trace::Concat(t) => &t.logits,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cel: f64,
    pub aux: f64,
}

impl std::ops::AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.total += o.total;
        self.cel += o.cel;
        self.aux += o.aux;
    }
}

/// Upstream gradients of the total loss w.r.t. the trace outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub logits: Vec<f64>,
    /// W.r.t. `ρ(h_t)` of each teacher-forced prediction.
    pub aux_predictions: Vec<Option<Vec<f64>>>,
    /// W.r.t. the ground-truth latent `f_{t+1}` paired with prediction `t`.
    pub teacher_latents: Vec<Option<Vec<f64>>>,
}

impl LossGrads {
    /// All-zero upstream gradient shaped like `trace`.
    pub fn zeros(trace: &RolloutTrace) -> Self {
        let aux: Vec<Option<Vec<f64>>> = trace
            .aux
            .iter()
            .map(|a| a.as_ref().map(|a| vec![0.0; a.prediction.len()]))
            .collect();
        Self {
            logits: vec![0.0; trace.logits.len()],
            teacher_latents: aux.clone(),
            aux_predictions: aux,
        }
    }
}

/// Cross entropy plus `α ·` the summed teacher-forced reconstruction error.
///
/// Rollout steps past the window have no ground truth and contribute nothing
/// to the auxiliary term.
pub fn loss_flare(
    trace: &RolloutTrace,
    teacher_latents: &[Option<Vec<f64>>],
    label: Stage,
    weights: &LossWeights,
) -> Result<(LossBreakdown, LossGrads), ModelError> {
    let (cel, d_logits) =
        weighted_cross_entropy(&trace.logits, label.index(), &weights.class_weights);
    let mut aux = 0.0;
    let mut d_pred = Vec::with_capacity(trace.aux.len());
    let mut d_teacher = Vec::with_capacity(trace.aux.len());
    for (t, rec) in trace.aux.iter().enumerate() {
        match (rec, teacher_latents.get(t).and_then(Option::as_ref)) {
            (Some(rec), Some(target)) => {
                let (l, g) = mse(&rec.prediction, target)?;
                aux += l;
                let gp: Vec<f64> = g.iter().map(|v| weights.alpha * v).collect();
                d_teacher.push(Some(gp.iter().map(|v| -v).collect()));
                d_pred.push(Some(gp));
            }
            _ => {
                d_pred.push(None);
                d_teacher.push(None);
            }
        }
    }
    Ok((
        LossBreakdown {
            total: cel + weights.alpha * aux,
            cel,
            aux,
        },
        LossGrads {
            logits: d_logits,
            aux_predictions: d_pred,
            teacher_latents: d_teacher,
        },
    ))
}

/// Trainable parameters of either model plus a version counter that
/// detects traces recorded before the last update.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    kind: ModelKind,
    config: ModelConfig,
    pub enc_volumetric: Mlp,
    pub enc_demographic: Mlp,
    pub enc_cognitive: Mlp,
    pub cell: RecurrentCell,
    /// Present only for [`ModelKind::Flare`].
    pub rho: Option<Mlp>,
    pub classifier: Mlp,
    version: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: ModelKind,
    config: ModelConfig,
}

impl Model {
    pub fn new(kind: ModelKind, config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let act = config.activation;
        let d_f = config.latent_dim();
        let h = config.rnn_hidden;
        let enc_volumetric = Mlp::init(
            "enc_volumetric",
            config.dims.volumetric,
            &config.enc_hidden.volumetric,
            config.enc_out.volumetric,
            act,
            &mut rng,
        );
        let enc_demographic = Mlp::init(
            "enc_demographic",
            config.dims.demographic,
            &config.enc_hidden.demographic,
            config.enc_out.demographic,
            act,
            &mut rng,
        );
        let enc_cognitive = Mlp::init(
            "enc_cognitive",
            config.dims.cognitive,
            &config.enc_hidden.cognitive,
            config.enc_out.cognitive,
            act,
            &mut rng,
        );
        let cell = RecurrentCell::init(config.cell, d_f, h, &mut rng);
        let (rho, cls_in) = match kind {
            ModelKind::Flare => (
                Some(Mlp::init("rho", h, &config.rho_hidden, d_f, act, &mut rng)),
                h,
            ),
            ModelKind::Concat => (None, h + config.tau_features()),
        };
        let classifier = Mlp::init(
            "classifier",
            cls_in,
            &config.classifier_hidden,
            config.num_classes,
            act,
            &mut rng,
        );
        Ok(Self {
            kind,
            config: config.clone(),
            enc_volumetric,
            enc_demographic,
            enc_cognitive,
            cell,
            rho,
            classifier,
            version: 0,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn blocks(&self) -> Vec<&ParamBlock> {
        let mut out: Vec<&ParamBlock> = Vec::new();
        out.extend(self.enc_volumetric.blocks());
        out.extend(self.enc_demographic.blocks());
        out.extend(self.enc_cognitive.blocks());
        out.extend(self.cell.blocks());
        if let Some(rho) = &self.rho {
            out.extend(rho.blocks());
        }
        out.extend(self.classifier.blocks());
        out
    }

    /// Mutable access to every block. Marks outstanding traces as stale.
    pub fn blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        self.version += 1;
        self.blocks_mut_unversioned()
    }

    fn blocks_mut_unversioned(&mut self) -> Vec<&mut ParamBlock> {
        let mut out: Vec<&mut ParamBlock> = Vec::new();
        out.extend(self.enc_volumetric.blocks_mut());
        out.extend(self.enc_demographic.blocks_mut());
        out.extend(self.enc_cognitive.blocks_mut());
        out.extend(self.cell.blocks_mut());
        if let Some(rho) = &mut self.rho {
            out.extend(rho.blocks_mut());
        }
        out.extend(self.classifier.blocks_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|b| b.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for b in self.blocks_mut_unversioned() {
            b.zero_grad();
        }
    }

    pub fn adam_step(&mut self, cfg: &AdamConfig, t: u64) -> Result<(), ModelError> {
        adam_step(self.blocks_mut(), cfg, t)?;
        Ok(())
    }

    fn check_features(&self, x: &VisitFeatures) -> Result<(), ModelError> {
        let want = self.config.dims;
        let got = x.dims();
        if want != got {
            return Err(ModelError::UnsupportedInput(format!(
                "visit has dims {got:?}, model expects {want:?}"
            )));
        }
        Ok(())
    }

    /// `φ_i(i) ⊕ φ_s(s) ⊕ φ_c(c)`
    pub fn encode_visit(&self, x: VisitInput<'_>) -> Result<(Vec<f64>, EncoderCache), ModelError> {
        let x = x.ok_or(ModelError::UnobservedVisit)?;
        self.check_features(x)?;
        let (a, ca) = self.enc_volumetric.forward(&x.volumetric)?;
        let (b, cb) = self.enc_demographic.forward(&x.demographic)?;
        let (c, cc) = self.enc_cognitive.forward(&x.cognitive)?;
        let mut f = a;
        f.extend(b);
        f.extend(c);
        Ok((f, EncoderCache { parts: [ca, cb, cc] }))
    }

    fn encoder_backward(&mut self, cache: &EncoderCache, df: &[f64]) -> Result<(), ModelError> {
        let o = self.config.enc_out;
        let (dv, rest) = df.split_at(o.volumetric);
        let (ds, dc) = rest.split_at(o.demographic);
        self.enc_volumetric.backward(&cache.parts[0], dv)?;
        self.enc_demographic.backward(&cache.parts[1], ds)?;
        self.enc_cognitive.backward(&cache.parts[2], dc)?;
        Ok(())
    }

    pub fn rnn_step(&self, f: &[f64], h_prev: &[f64]) -> Result<(Vec<f64>, CellCache), ModelError> {
        self.cell.step(f, h_prev)
    }

    /// `ρ(h) = f̂`
    pub fn predict_next_feature(&self, h: &[f64]) -> Result<(Vec<f64>, MlpCache), ModelError> {
        let rho = self.rho.as_ref().ok_or(ModelError::UnsupportedInput(
            "the concatenation baseline has no feature predictor".into(),
        ))?;
        if h.len() != self.config.rnn_hidden {
            return Err(ModelError::Numeric(NumericError::Shape {
                op: "predict_next_feature",
                operand: "h",
                expected: self.config.rnn_hidden,
                found: h.len(),
            }));
        }
        rho.forward(h)
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<(), ModelError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(ModelError::UnsupportedInput(format!(
                "operation needs a {} model, this is {}",
                kind.as_str(),
                self.kind.as_str()
            )))
        }
    }

    /// Encodes or imputes each window visit, runs the cell over them, rolls
    /// `τ` predicted latents forward and classifies the last hidden state.
    ///
    /// With `with_aux`, also records `ρ(h_t)` for every observed next visit
    /// in the window so [`loss_flare`] can score them.
    pub fn forward_flare(
        &self,
        window: &[VisitInput<'_>],
        tau: usize,
        with_aux: bool,
    ) -> Result<RolloutTrace, ModelError> {
        self.expect_kind(ModelKind::Flare)?;
        if window.is_empty() {
            return Err(ModelError::Contract("window needs at least one visit"));
        }
        if tau < 1 {
            return Err(ModelError::Contract("horizon must be at least 1"));
        }
        if window[0].is_none() {
            return Err(ModelError::ImputationAnchor);
        }
        let t_len = window.len();
        let mut h = vec![0.0; self.config.rnn_hidden];
        let mut steps = Vec::with_capacity(t_len + tau);
        let mut aux = Vec::with_capacity(t_len.saturating_sub(1));
        for (t, visit) in window.iter().enumerate() {
            let (input, input_cache, source) = match visit {
                Some(_) => {
                    let (f, c) = self.encode_visit(*visit)?;
                    (f, InputCache::Encoder(c), StepSource::Encoded)
                }
                None => {
                    let (f, c) = self.predict_next_feature(&h)?;
                    (f, InputCache::Rho(c), StepSource::Imputed)
                }
            };
            let (next_h, cell) = self.cell.step(&input, &h)?;
            h = next_h;
            steps.push(StepRecord {
                source,
                input,
                input_cache,
                cell,
                hidden: h.clone(),
            });
            if t + 1 < t_len {
                let rec = if with_aux && window[t + 1].is_some() {
                    let (prediction, cache) = self.predict_next_feature(&h)?;
                    Some(AuxRecord { prediction, cache })
                } else {
                    None
                };
                aux.push(rec);
            }
        }
        for _ in 0..tau {
            let (input, c) = self.predict_next_feature(&h)?;
            let (next_h, cell) = self.cell.step(&input, &h)?;
            h = next_h;
            steps.push(StepRecord {
                source: StepSource::RolledOut,
                input,
                input_cache: InputCache::Rho(c),
                cell,
                hidden: h.clone(),
            });
        }
        let (logits, classifier) = self.classifier.forward(&h)?;
        Ok(RolloutTrace {
            window_len: t_len,
            tau,
            steps,
            aux,
            classifier,
            logits,
            params_version: self.version,
        })
    }

    /// Horizon representation appended to the baseline's hidden state.
    pub fn tau_repr(&self, tau: usize) -> Vec<f64> {
        match self.config.tau_encoding {
            TauEncoding::Scalar => vec![tau as f64],
            TauEncoding::OneHot => {
                let mut v = vec![0.0; self.config.max_tau()];
                if let Some(slot) = v.get_mut(tau.wrapping_sub(1)) {
                    *slot = 1.0;
                }
                v
            }
        }
    }

    /// Runs the cell over the observed window and classifies `h_T ⊕ repr(τ)`.
    pub fn forward_baseline(
        &self,
        window: &[VisitInput<'_>],
        tau: usize,
    ) -> Result<BaselineTrace, ModelError> {
        self.expect_kind(ModelKind::Concat)?;
        if window.is_empty() {
            return Err(ModelError::Contract("window needs at least one visit"));
        }
        if tau < 1 {
            return Err(ModelError::Contract("horizon must be at least 1"));
        }
        if self.config.tau_encoding == TauEncoding::OneHot && tau > self.config.max_tau() {
            return Err(ModelError::UnsupportedInput(format!(
                "horizon {tau} exceeds the one-hot range 1..={}",
                self.config.max_tau()
            )));
        }
        if window.iter().any(Option::is_none) {
            return Err(ModelError::UnsupportedInput(
                "the concatenation baseline cannot impute missing visits".into(),
            ));
        }
        let mut h = vec![0.0; self.config.rnn_hidden];
        let mut steps = Vec::with_capacity(window.len());
        for visit in window {
            let (input, c) = self.encode_visit(*visit)?;
            let (next_h, cell) = self.cell.step(&input, &h)?;
            h = next_h;
            steps.push(StepRecord {
                source: StepSource::Encoded,
                input,
                input_cache: InputCache::Encoder(c),
                cell,
                hidden: h.clone(),
            });
        }
        let mut classifier_input = h;
        classifier_input.extend(self.tau_repr(tau));
        let (logits, classifier) = self.classifier.forward(&classifier_input)?;
        Ok(BaselineTrace {
            tau,
            steps,
            classifier,
            classifier_input,
            logits,
            params_version: self.version,
        })
    }

    pub fn forward(
        &self,
        window: &[VisitInput<'_>],
        tau: usize,
        with_aux: bool,
    ) -> Result<Trace, ModelError> {
        match self.kind {
            ModelKind::Flare => self.forward_flare(window, tau, with_aux).map(Trace::Flare),
            ModelKind::Concat => self.forward_baseline(window, tau).map(Trace::Concat),
        }
    }

    fn check_fresh(&self, version: u64) -> Result<(), ModelError> {
        if version != self.version {
            return Err(ModelError::StaleTrace {
                trace: version,
                current: self.version,
            });
        }
        Ok(())
    }

    /// Backpropagation through time for a rollout trace; sums into `grad`.
    pub fn backward_flare(
        &mut self,
        trace: &RolloutTrace,
        grads: &LossGrads,
    ) -> Result<(), ModelError> {
        self.expect_kind(ModelKind::Flare)?;
        self.check_fresh(trace.params_version)?;
        let n = trace.steps.len();
        let hd = self.config.rnn_hidden;
        let mut dh = vec![vec![0.0; hd]; n];
        let mut df_teacher: Vec<Option<Vec<f64>>> = vec![None; n];

        dh[n - 1] = self.classifier.backward(&trace.classifier, &grads.logits)?;

        let rho = self.rho.as_mut().expect("flare model has rho");
        for (t, rec) in trace.aux.iter().enumerate() {
            let Some(rec) = rec else { continue };
            if let Some(Some(g)) = grads.aux_predictions.get(t) {
                let d = rho.backward(&rec.cache, g)?;
                add_into(&mut dh[t], &d);
            }
            if let Some(Some(g)) = grads.teacher_latents.get(t) {
                df_teacher[t + 1] = Some(g.clone());
            }
        }

        for k in (0..n).rev() {
            let step = &trace.steps[k];
            let (mut df, dh_prev) = self.cell.backward(&step.cell, &dh[k]);
            if k > 0 {
                add_into(&mut dh[k - 1], &dh_prev);
            }
            if let Some(extra) = &df_teacher[k] {
                add_into(&mut df, extra);
            }
            match &step.input_cache {
                InputCache::Encoder(c) => self.encoder_backward(c, &df)?,
                InputCache::Rho(c) => {
                    let rho = self.rho.as_mut().expect("flare model has rho");
                    let d = rho.backward(c, &df)?;
                    // k > 0: the first step of a window is always encoded.
                    add_into(&mut dh[k - 1], &d);
                }
            }
        }
        Ok(())
    }

    pub fn backward_baseline(
        &mut self,
        trace: &BaselineTrace,
        d_logits: &[f64],
    ) -> Result<(), ModelError> {
        self.expect_kind(ModelKind::Concat)?;
        self.check_fresh(trace.params_version)?;
        let hd = self.config.rnn_hidden;
        let d_in = self.classifier.backward(&trace.classifier, d_logits)?;
        let mut dh = d_in[..hd].to_vec();
        for step in trace.steps.iter().rev() {
            let (df, dh_prev) = self.cell.backward(&step.cell, &dh);
            if let InputCache::Encoder(c) = &step.input_cache {
                self.encoder_backward(c, &df)?;
            }
            dh = dh_prev;
        }
        Ok(())
    }

    /// Loss of one labeled sample without touching gradients.
    pub fn sample_loss(
        &self,
        window: &[VisitInput<'_>],
        tau: usize,
        label: Stage,
    ) -> Result<LossBreakdown, ModelError> {
        let weights = self.config.loss;
        match self.forward(window, tau, true)? {
            Trace::Flare(tr) => Ok(loss_flare(&tr, &tr.teacher_latents(), label, &weights)?.0),
            Trace::Concat(tr) => {
                let (cel, _) =
                    weighted_cross_entropy(&tr.logits, label.index(), &weights.class_weights);
                Ok(LossBreakdown {
                    total: cel,
                    cel,
                    aux: 0.0,
                })
            }
        }
    }

    /// Forward, loss and backward for one labeled sample; gradients are
    /// summed into the parameter blocks.
    pub fn accumulate_sample(
        &mut self,
        window: &[VisitInput<'_>],
        tau: usize,
        label: Stage,
    ) -> Result<LossBreakdown, ModelError> {
        let weights = self.config.loss;
        match self.forward(window, tau, true)? {
            Trace::Flare(tr) => {
                let (loss, grads) = loss_flare(&tr, &tr.teacher_latents(), label, &weights)?;
                self.backward_flare(&tr, &grads)?;
                Ok(loss)
            }
            Trace::Concat(tr) => {
                let (cel, g) =
                    weighted_cross_entropy(&tr.logits, label.index(), &weights.class_weights);
                self.backward_baseline(&tr, &g)?;
                Ok(LossBreakdown {
                    total: cel,
                    cel,
                    aux: 0.0,
                })
            }
        }
    }

    /// Most likely stage at the horizon.
    pub fn predict(&self, window: &[VisitInput<'_>], tau: usize) -> Result<Stage, ModelError> {
        let trace = self.forward(window, tau, false)?;
        let logits = trace.logits();
        let best = (0..logits.len())
            .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
            .expect("nonempty logits");
        Ok(Stage::from_index(best).expect("three classes"))
    }

    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let meta = CheckpointMeta {
            kind: self.kind,
            config: self.config.clone(),
        };
        Checkpoint {
            step,
            metadata: serde_json::to_string(&meta).expect("config serializes"),
            blocks: self.blocks().into_iter().cloned().collect(),
        }
    }

    /// Rebuilds a model from a checkpoint. The embedded config must equal
    /// `expected` (when given) and every block must match by name and shape.
    pub fn from_checkpoint(
        ck: &Checkpoint,
        expected: Option<(ModelKind, &ModelConfig)>,
    ) -> Result<Self, ModelError> {
        let meta: CheckpointMeta = serde_json::from_str(&ck.metadata)
            .map_err(|e| ModelError::Checkpoint(format!("unreadable metadata: {e}")))?;
        if let Some((kind, cfg)) = expected {
            if meta.kind != kind {
                return Err(ModelError::Checkpoint(format!(
                    "checkpoint holds a {} model, expected {}",
                    meta.kind.as_str(),
                    kind.as_str()
                )));
            }
            if &meta.config != cfg {
                return Err(ModelError::Checkpoint(
                    "checkpoint config differs from the requested config".into(),
                ));
            }
        }
        let mut model = Model::new(meta.kind, &meta.config, 0)?;
        let mut blocks = model.blocks_mut_unversioned();
        if blocks.len() != ck.blocks.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} blocks, found {}",
                blocks.len(),
                ck.blocks.len()
            )));
        }
        for (dst, src) in blocks.iter_mut().zip(&ck.blocks) {
            if dst.name != src.name || dst.shape() != src.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "block {} {:?} does not match {} {:?}",
                    src.name,
                    src.shape(),
                    dst.name,
                    dst.shape()
                )));
            }
            dst.value = src.value.clone();
            dst.adam_m = src.adam_m.clone();
            dst.adam_v = src.adam_v.clone();
        }
        Ok(model)
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    debug_assert_eq!(acc.len(), v.len());
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

#[cfg(test)]
mod tests;
