//! Central finite-difference verification of the hand-written backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::cohort::{FeatureDims, Stage, VisitFeatures};
use crate::model::{Model, ModelConfig, ModelError, ModelKind};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;
/// Entries whose analytic and numeric values differ by less than this are
/// accepted regardless of relative error.
pub const ABS_FLOOR: f64 = 1e-7;

/// One labeled window fed to the checker.
#[derive(Debug, Clone)]
pub struct CheckSample {
    pub window: Vec<Option<VisitFeatures>>,
    pub tau: usize,
    pub label: Stage,
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockResult {
    pub block: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub case: String,
    pub blocks: Vec<BlockResult>,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub cases: Vec<CaseReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseReport::passed)
    }

    /// `(case, block)` pairs over tolerance.
    pub fn failures(&self) -> Vec<(String, String)> {
        self.cases
            .iter()
            .flat_map(|c| {
                c.blocks
                    .iter()
                    .filter(|b| !b.passed)
                    .map(|b| (c.case.clone(), b.block.clone()))
            })
            .collect()
    }

    /// Worst relative and absolute errors seen for each block name across
    /// all cases.
    pub fn worst_by_block(&self) -> Vec<(String, f64, f64)> {
        let mut out: Vec<(String, f64, f64)> = Vec::new();
        for b in self.cases.iter().flat_map(|c| &c.blocks) {
            match out.iter_mut().find(|(n, _, _)| n == &b.block) {
                Some((_, rel, abs)) => {
                    *rel = rel.max(b.max_rel_error);
                    *abs = abs.max(b.max_abs_error);
                }
                None => out.push((b.block.clone(), b.max_rel_error, b.max_abs_error)),
            }
        }
        out
    }
}

/// Relative error with the absolute floor applied: returns 0 when the two
/// values agree to within [`ABS_FLOOR`].
pub fn entry_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

fn batch_loss(model: &Model, samples: &[CheckSample]) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for s in samples {
        let window: Vec<_> = s.window.iter().map(Option::as_ref).collect();
        total += model.sample_loss(&window, s.tau, s.label)?.total;
    }
    Ok(total)
}

/// Compares accumulated analytic gradients of the summed batch loss against
/// central differences for every parameter entry.
///
/// `corrupt_block` perturbs the analytic gradient of the named block after
/// backprop; it exists so tests can confirm the checker catches faults.
pub fn check_model(
    model: &Model,
    samples: &[CheckSample],
    corrupt_block: Option<&str>,
) -> Result<Vec<BlockResult>, ModelError> {
    let mut analytic = model.clone();
    analytic.zero_grads();
    for s in samples {
        let window: Vec<_> = s.window.iter().map(Option::as_ref).collect();
        analytic.accumulate_sample(&window, s.tau, s.label)?;
    }
    if let Some(name) = corrupt_block {
        for b in analytic.blocks_mut() {
            if b.name == name {
                for g in b.grad.as_mut_slice() {
                    *g = *g * 1.5 + 1e-3;
                }
            }
        }
    }
    let grads: Vec<(String, Vec<f64>)> = analytic
        .blocks()
        .iter()
        .map(|b| (b.name.clone(), b.grad.as_slice().to_vec()))
        .collect();

    let mut probe = model.clone();
    let mut results = Vec::with_capacity(grads.len());
    for (bi, (name, g)) in grads.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (j, &a) in g.iter().enumerate() {
            let orig = probe.blocks()[bi].value.as_slice()[j];
            probe.blocks_mut()[bi].value.as_mut_slice()[j] = orig + FD_STEP;
            let plus = batch_loss(&probe, samples)?;
            probe.blocks_mut()[bi].value.as_mut_slice()[j] = orig - FD_STEP;
            let minus = batch_loss(&probe, samples)?;
            probe.blocks_mut()[bi].value.as_mut_slice()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            max_rel = max_rel.max(entry_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        results.push(BlockResult {
            block: name.clone(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            passed: max_rel < REL_TOLERANCE,
        });
    }
    Ok(results)
}

fn random_features<R: Rng>(dims: FeatureDims, rng: &mut R) -> VisitFeatures {
    let mut draw = |n: usize| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    VisitFeatures {
        volumetric: draw(dims.volumetric),
        demographic: draw(dims.demographic),
        cognitive: draw(dims.cognitive),
    }
}

/// Two random labeled windows of length `t` with horizon `tau`. With
/// `impute`, the visit in the middle of the window (the second one for
/// `t == 2`) is missing.
pub fn random_samples(
    dims: FeatureDims,
    t: usize,
    tau: usize,
    impute: bool,
    seed: u64,
) -> Vec<CheckSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2)
        .map(|i| {
            let mut window: Vec<Option<VisitFeatures>> =
                (0..t).map(|_| Some(random_features(dims, &mut rng))).collect();
            if impute && t >= 2 {
                let hole = if t == 2 { 1 } else { t / 2 };
                window[hole] = None;
            }
            CheckSample {
                window,
                tau,
                label: Stage::from_index((i + seed as usize) % 3).expect("in range"),
            }
        })
        .collect()
}

pub const CHECK_SHAPES: [(usize, usize); 3] = [(2, 1), (3, 2), (4, 1)];

/// The full matrix: rollout model for each `(T, τ)` in [`CHECK_SHAPES`],
/// `α ∈ {0, 1}`, with and without an imputed visit; the baseline for each
/// `(T, τ)` on fully observed windows.
pub fn run_gradcheck(
    config: &ModelConfig,
    seed: u64,
    corrupt_block: Option<&str>,
) -> Result<GradcheckReport, ModelError> {
    if config.latent_dim() > 8 || config.rnn_hidden > 8 {
        return Err(ModelError::Config(format!(
            "gradcheck needs a tiny config (latent dim and hidden size <= 8), got {} and {}",
            config.latent_dim(),
            config.rnn_hidden
        )));
    }
    let mut cases = Vec::new();
    for (ci, &(t, tau)) in CHECK_SHAPES.iter().enumerate() {
        for alpha in [0.0, 1.0] {
            for impute in [false, true] {
                let mut cfg = config.clone();
                cfg.loss.alpha = alpha;
                let model = Model::new(ModelKind::Flare, &cfg, seed)?;
                let samples =
                    random_samples(cfg.dims, t, tau, impute, seed.wrapping_add(ci as u64));
                let blocks = check_model(&model, &samples, corrupt_block)?;
                cases.push(CaseReport {
                    case: format!(
                        "flare T={t} tau={tau} alpha={alpha} imputed={}",
                        if impute { "yes" } else { "no" }
                    ),
                    blocks,
                });
            }
        }
        let model = Model::new(ModelKind::Concat, config, seed)?;
        let samples = random_samples(config.dims, t, tau, false, seed.wrapping_add(ci as u64));
        let blocks = check_model(&model, &samples, corrupt_block)?;
        cases.push(CaseReport {
            case: format!("concat T={t} tau={tau}"),
            blocks,
        });
    }
    Ok(GradcheckReport {
        step: FD_STEP,
        tolerance: REL_TOLERANCE,
        cases,
    })
}
