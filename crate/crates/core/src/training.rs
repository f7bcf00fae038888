//! Mini-batch training and bucketed evaluation over augmented samples.

use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Stage};
use crate::metrics::ReportBuilder;
use crate::model::{LossBreakdown, Model, ModelError, ModelKind};
use crate::numeric::AdamConfig;
use crate::sampling::{BatchLoader, SampleLimits, Subtrajectory};

/// Whether `model` can score `sample`: the baseline has no way to fill
/// missing visits.
pub fn is_eligible(kind: ModelKind, sample: &Subtrajectory) -> bool {
    kind == ModelKind::Flare || !sample.has_missing()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Summed over every sample seen in the epoch.
    pub loss: LossBreakdown,
    pub samples: usize,
    pub batches: usize,
    pub skipped: usize,
}

/// A model with its optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamConfig,
    /// Adam steps taken so far.
    pub step: u64,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: Model, adam: AdamConfig) -> Result<Self, ModelError> {
        adam.validate()?;
        Ok(Self {
            model,
            adam,
            step: 0,
            epoch: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One optimizer step on the summed loss of the listed samples. Returns
    /// the loss, the number of samples used and the number skipped.
    pub fn train_batch(
        &mut self,
        cohort: &Cohort,
        samples: &[Subtrajectory],
        indices: &[usize],
    ) -> Result<(LossBreakdown, usize, usize), ModelError> {
        self.model.zero_grads();
        let mut loss = LossBreakdown::default();
        let (mut used, mut skipped) = (0, 0);
        for &i in indices {
            let s = &samples[i];
            if !is_eligible(self.model.kind(), s) {
                skipped += 1;
                continue;
            }
            let window = s.window(&cohort.trajectories()[s.patient]);
            loss += self.model.accumulate_sample(&window, s.tau, s.target_label)?;
            used += 1;
        }
        if used > 0 {
            self.step += 1;
            self.model.adam_step(&self.adam, self.step)?;
        }
        Ok((loss, used, skipped))
    }

    pub fn train_epoch(
        &mut self,
        cohort: &Cohort,
        samples: &[Subtrajectory],
        loader: &mut dyn BatchLoader,
    ) -> Result<EpochStats, ModelError> {
        let mut stats = EpochStats {
            epoch: self.epoch,
            loss: LossBreakdown::default(),
            samples: 0,
            batches: 0,
            skipped: 0,
        };
        for batch in loader.next_epoch() {
            let (loss, used, skipped) = self.train_batch(cohort, samples, &batch.indices)?;
            stats.loss += loss;
            stats.samples += used;
            stats.skipped += skipped;
            stats.batches += usize::from(used > 0);
        }
        self.epoch += 1;
        Ok(stats)
    }
}

/// Predictions for every sample, `None` where the model cannot score it.
pub fn predict_all(
    model: &Model,
    cohort: &Cohort,
    samples: &[Subtrajectory],
) -> Result<Vec<Option<Stage>>, ModelError> {
    samples
        .iter()
        .map(|s| {
            if !is_eligible(model.kind(), s) {
                return Ok(None);
            }
            let window = s.window(&cohort.trajectories()[s.patient]);
            model.predict(&window, s.tau).map(Some)
        })
        .collect()
}

/// Accumulates predictions on `samples` into a report builder.
pub fn evaluate(
    model: &Model,
    cohort: &Cohort,
    samples: &[Subtrajectory],
    limits: SampleLimits,
) -> Result<ReportBuilder, ModelError> {
    let mut builder = ReportBuilder::new(limits);
    for (s, pred) in samples.iter().zip(predict_all(model, cohort, samples)?) {
        match pred {
            Some(p) => builder
                .accumulate(s.target_label, p, s.bucket())
                .map_err(|e| ModelError::UnsupportedInput(e.to_string()))?,
            None => builder.record_skipped(),
        }
    }
    Ok(builder)
}

/// Fraction of scorable samples predicted correctly.
pub fn accuracy(model: &Model, cohort: &Cohort, samples: &[Subtrajectory]) -> Result<f64, ModelError> {
    let preds = predict_all(model, cohort, samples)?;
    let (mut hit, mut n) = (0usize, 0usize);
    for (s, p) in samples.iter().zip(preds) {
        if let Some(p) = p {
            n += 1;
            hit += usize::from(p == s.target_label);
        }
    }
    Ok(if n == 0 { 0.0 } else { hit as f64 / n as f64 })
}
