//! Disease-stage forecasting with autoregressive latent rollout.
//!
//! The crate implements two forecasters over multimodal longitudinal visit
//! data: the rollout model, which predicts the next latent visit
//! representation and feeds it back into its recurrent cell until the target
//! horizon is reached, and a concatenation baseline that appends the horizon
//! to the last hidden state. Around them sit the pieces needed to train and
//! evaluate: subtrajectory augmentation, batch loaders, a synthetic cohort
//! generator, CSV ingestion, and bucketed metrics.

pub mod numeric;
pub mod cohort;
pub mod gradcheck;
pub mod model;
pub mod sampling;
pub mod synthcohort;
pub mod dataio;
pub mod metrics;
pub mod training;

pub use cohort::{Cohort, FeatureDims, Stage, Trajectory, TrajectorySource, Visit, VisitFeatures};
pub use dataio::{CohortManifest, Normalizer};
pub use metrics::{ConfusionMatrix, EvalReport, ReportBuilder};
pub use model::{LossBreakdown, Model, ModelConfig, ModelError, ModelKind};
pub use numeric::{AdamConfig, Checkpoint};
pub use sampling::{LoaderScheme, SampleLimits, SplitSpec, Subtrajectory};
pub use synthcohort::CohortSpec;
pub use training::Trainer;
