//! Shared fixtures for the benchmarks.

use flare_core::cohort::VisitFeatures;
use flare_core::model::ModelConfig;

/// A deterministic visit with values in [-1, 1].
pub fn visit(cfg: &ModelConfig, k: usize) -> VisitFeatures {
    let v = |n: usize| (0..n).map(|i| ((i * 7 + k * 3) % 11) as f64 / 5.0 - 1.0).collect();
    VisitFeatures {
        volumetric: v(cfg.dims.volumetric),
        demographic: v(cfg.dims.demographic),
        cognitive: v(cfg.dims.cognitive),
    }
}
