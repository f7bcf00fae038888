//! Seeded generator of longitudinal cohorts with monotone Markov stage paths
//! and smooth, stage-conditional multimodal features.
//!
//! Each patient's volumetric and cognitive features track a latent mean that
//! moves toward the current stage's class mean by at most `drift_magnitude`
//! per component per visit, plus AR(1) noise. Demographics are fixed per
//! patient. Per-patient randomness comes from seeds derived with
//! [`patient_seed`], so a patient's record does not depend on how many
//! others were generated before it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, FeatureDims, Stage, Trajectory, Visit, VisitFeatures};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid cohort spec: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub n_patients: usize,
    /// Inclusive range of visits per patient.
    pub visits_per_patient: VisitRange,
    pub dims: FeatureDims,
    pub initial_stage_probs: [f64; 3],
    /// Per-visit transition matrix, rows CN/MCI/AD.
    pub step_transition: [[f64; 3]; 3],
    pub drift_magnitude: f64,
    pub noise_sd: f64,
    /// Lag-one autocorrelation of the feature noise.
    pub noise_persistence: f64,
    /// Per-component distance between adjacent stage means (volumetric);
    /// cognitive scores drop by twice this per stage.
    pub class_separation: f64,
    pub missing_prob: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        let (cn, mci, ad) = (805.0, 536.0, 317.0);
        let total = cn + mci + ad;
        Self {
            n_patients: 400,
            visits_per_patient: VisitRange { min: 2, max: 8 },
            dims: FeatureDims {
                volumetric: 32,
                demographic: 3,
                cognitive: 4,
            },
            initial_stage_probs: [cn / total, mci / total, ad / total],
            step_transition: [
                [1.0 - 0.03 - 0.001, 0.03, 0.001],
                [0.0, 1.0 - 0.08, 0.08],
                [0.0, 0.0, 1.0],
            ],
            drift_magnitude: 0.25,
            noise_sd: 1.0,
            noise_persistence: 0.5,
            class_separation: 0.75,
            missing_prob: 0.0,
            seed: 0,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        let probs_ok = |p: &[f64; 3]| {
            p.iter().all(|&x| (0.0..=1.0).contains(&x))
                && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-12
        };
        if !probs_ok(&self.initial_stage_probs) {
            return bad("initial_stage_probs must be a probability vector".into());
        }
        for (i, row) in self.step_transition.iter().enumerate() {
            if !probs_ok(row) {
                return bad(format!("transition row {i} is not stochastic"));
            }
            if row[..i].iter().any(|&p| p != 0.0) {
                return bad(format!(
                    "transition row {i} allows a backward transition"
                ));
            }
        }
        let VisitRange { min, max } = self.visits_per_patient;
        if min == 0 || min > max {
            return bad(format!("visit range {min}..={max} is empty"));
        }
        if self.dims.volumetric == 0 || self.dims.demographic == 0 || self.dims.cognitive == 0 {
            return bad("every modality needs at least one feature".into());
        }
        if !(self.drift_magnitude >= 0.0 && self.noise_sd >= 0.0 && self.class_separation >= 0.0) {
            return bad("drift, noise and separation must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.noise_persistence) {
            return bad("noise_persistence must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.missing_prob) {
            return bad("missing_prob must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of patient `index`: `splitmix64(cohort_seed + (index + 1) · φ64)`.
pub fn patient_seed(cohort_seed: u64, index: usize) -> u64 {
    splitmix64(cohort_seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ purpose))
}

const STAGE_STREAM: u64 = 0x5747_4147_4500_0001;
const FEATURE_STREAM: u64 = 0x4645_4154_5552_0002;
const MISSING_STREAM: u64 = 0x4d49_5353_494e_0003;
const MEANS_STREAM: u64 = 0x4d45_414e_5300_0004;

fn draw_stage<R: Rng>(probs: &[f64; 3], rng: &mut R) -> Stage {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Stage::from_index(i).expect("three stages");
        }
    }
    // u landed in the rounding gap above the cumulative sum.
    let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    Stage::from_index(last).expect("three stages")
}

/// Visit count and a monotone stage path for one patient.
pub fn sample_stage_path(spec: &CohortSpec, patient_seed: u64) -> Result<Vec<Stage>, SynthError> {
    spec.validate()?;
    let mut rng = stream(patient_seed, STAGE_STREAM);
    let VisitRange { min, max } = spec.visits_per_patient;
    let n = rng.random_range(min..=max);
    let mut path = Vec::with_capacity(n);
    let mut stage = draw_stage(&spec.initial_stage_probs, &mut rng);
    path.push(stage);
    for _ in 1..n {
        stage = draw_stage(&spec.step_transition[stage.index()], &mut rng);
        path.push(stage);
    }
    Ok(path)
}

/// Stage-conditional means shared by every patient of a cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeans {
    /// `[stage][component]` over volumetric then cognitive components.
    pub means: [Vec<f64>; 3],
}

impl ClassMeans {
    pub fn from_spec(spec: &CohortSpec) -> Self {
        let mut rng = stream(spec.seed, MEANS_STREAM);
        let dv = spec.dims.volumetric;
        let dc = spec.dims.cognitive;
        // Each volumetric component shrinks or grows with severity.
        let signs: Vec<f64> = (0..dv)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let means = [0usize, 1, 2].map(|s| {
            let sev = s as f64;
            let mut m: Vec<f64> = signs
                .iter()
                .map(|sign| sign * sev * spec.class_separation)
                .collect();
            // MMSE-like scores: start near 28 and decline linearly with severity.
            m.extend((0..dc).map(|_| 28.0 - 2.0 * spec.class_separation * sev));
            m
        });
        Self { means }
    }
}

/// Features for a stage path: latent mean drifts toward the current stage
/// mean, observations add AR(1) noise.
pub fn emit_features(
    patient_id: &str,
    stage_path: &[Stage],
    spec: &CohortSpec,
    means: &ClassMeans,
    patient_seed: u64,
) -> Trajectory {
    let mut rng = stream(patient_seed, FEATURE_STREAM);
    let dv = spec.dims.volumetric;
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let demographic: Vec<f64> = (0..spec.dims.demographic).map(|_| normal()).collect();

    let Some(first) = stage_path.first() else {
        return Trajectory {
            patient_id: patient_id.to_string(),
            visits: Vec::new(),
        };
    };
    let mut mu = means.means[first.index()].clone();
    let rho = spec.noise_persistence;
    let stationary = spec.noise_sd / (1.0 - rho * rho).sqrt();
    let mut noise: Vec<f64> = mu.iter().map(|_| stationary * normal()).collect();

    let mut visits = Vec::with_capacity(stage_path.len());
    for (t, stage) in stage_path.iter().enumerate() {
        if t > 0 {
            let target = &means.means[stage.index()];
            for (m, &goal) in mu.iter_mut().zip(target) {
                *m += (goal - *m).clamp(-spec.drift_magnitude, spec.drift_magnitude);
            }
            for e in noise.iter_mut() {
                *e = rho * *e + spec.noise_sd * normal();
            }
        }
        let x: Vec<f64> = mu.iter().zip(&noise).map(|(m, e)| m + e).collect();
        visits.push(Visit {
            index: t as u32,
            label: Some(*stage),
            features: Some(VisitFeatures {
                volumetric: x[..dv].to_vec(),
                demographic: demographic.clone(),
                cognitive: x[dv..].to_vec(),
            }),
        });
    }
    Trajectory {
        patient_id: patient_id.to_string(),
        visits,
    }
}

/// Hides the features of each non-first visit independently with
/// probability `missing_prob`; labels stay.
pub fn apply_missingness(traj: &Trajectory, missing_prob: f64, seed: u64) -> Trajectory {
    let mut rng = stream(seed, MISSING_STREAM);
    let mut out = traj.clone();
    for v in out.visits.iter_mut().skip(1) {
        // Draw for every visit so the mask for one probability nests in another.
        let u: f64 = rng.random();
        if u < missing_prob {
            v.features = None;
        }
    }
    out
}

pub fn patient_id(index: usize) -> String {
    format!("P{index:05}")
}

/// Generates the whole cohort; a pure function of `spec`.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort, SynthError> {
    spec.validate()?;
    let means = ClassMeans::from_spec(spec);
    let trajectories = (0..spec.n_patients)
        .map(|i| {
            let seed = patient_seed(spec.seed, i);
            let path = sample_stage_path(spec, seed)?;
            let traj = emit_features(&patient_id(i), &path, spec, &means, seed);
            Ok(apply_missingness(&traj, spec.missing_prob, seed))
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    Ok(Cohort::new(spec.dims, trajectories))
}

/// Stage and transition tallies of a cohort.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub patients: usize,
    pub visits: usize,
    pub observed_visits: usize,
    /// Labeled visits per stage, CN/MCI/AD.
    pub visit_stage_counts: [usize; 3],
    /// First labeled stage per patient.
    pub initial_stage_counts: [usize; 3],
    pub cn_to_mci: usize,
    pub mci_to_ad: usize,
    pub cn_to_ad: usize,
}

pub fn summarize(cohort: &Cohort) -> CohortSummary {
    let mut s = CohortSummary {
        patients: cohort.len(),
        ..Default::default()
    };
    for t in cohort.trajectories() {
        s.visits += t.visits.len();
        s.observed_visits += t.visits.iter().filter(|v| v.is_observed()).count();
        let labels: Vec<Stage> = t.visits.iter().filter_map(|v| v.label).collect();
        for l in &labels {
            s.visit_stage_counts[l.index()] += 1;
        }
        if let Some(first) = labels.first() {
            s.initial_stage_counts[first.index()] += 1;
        }
        for w in labels.windows(2) {
            match (w[0], w[1]) {
                (Stage::Cn, Stage::Mci) => s.cn_to_mci += 1,
                (Stage::Mci, Stage::Ad) => s.mci_to_ad += 1,
                (Stage::Cn, Stage::Ad) => s.cn_to_ad += 1,
                _ => {}
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> CohortSpec {
        CohortSpec::default()
    }

    #[test]
    fn default_spec_is_valid() {
        spec().validate().unwrap();
    }

    #[test]
    fn rejects_backward_transitions_and_bad_rows() {
        let mut s = spec();
        s.step_transition[1] = [0.1, 0.8, 0.1];
        assert!(s.validate().is_err());
        let mut s = spec();
        s.step_transition[0] = [0.5, 0.4, 0.2];
        assert!(s.validate().is_err());
        let mut s = spec();
        s.missing_prob = 1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn identity_transitions_give_constant_paths() {
        let mut s = spec();
        s.step_transition = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..50 {
            let p = sample_stage_path(&s, patient_seed(1, i)).unwrap();
            assert!(p.iter().all(|&x| x == p[0]));
        }
    }

    #[test]
    fn forced_cn_to_ad() {
        let mut s = spec();
        s.initial_stage_probs = [1.0, 0.0, 0.0];
        s.step_transition[0] = [0.0, 0.0, 1.0];
        s.visits_per_patient = VisitRange { min: 5, max: 5 };
        let p = sample_stage_path(&s, 3).unwrap();
        assert_eq!(p, vec![Stage::Cn, Stage::Ad, Stage::Ad, Stage::Ad, Stage::Ad]);
    }

    #[test]
    fn initial_stage_counts_match_reference_proportions() {
        let s = CohortSpec {
            n_patients: 1658,
            seed: 12,
            ..spec()
        };
        let summary = summarize(&generate_cohort(&s).unwrap());
        let n = 1658.0;
        for (count, reference) in summary.initial_stage_counts.iter().zip([805.0, 536.0, 317.0]) {
            let p: f64 = reference / n;
            let sigma = (n * p * (1.0 - p)).sqrt();
            assert!(
                (*count as f64 - reference).abs() < 3.0 * sigma,
                "{count} vs {reference}"
            );
        }
    }

    #[test]
    fn stage_paths_are_monotone() {
        let c = generate_cohort(&spec()).unwrap();
        for t in c.trajectories() {
            let labels: Vec<_> = t.visits.iter().map(|v| v.label.unwrap()).collect();
            assert!(labels.windows(2).all(|w| w[0] <= w[1]));
            let n = t.visits.len();
            assert!((2..=8).contains(&n));
        }
    }

    #[test]
    fn degenerate_process_is_constant() {
        let s = CohortSpec {
            noise_sd: 0.0,
            drift_magnitude: 0.0,
            ..spec()
        };
        let c = generate_cohort(&s).unwrap();
        for t in c.trajectories() {
            let f0 = t.visits[0].features.as_ref().unwrap();
            assert!(t.visits.iter().all(|v| v.features.as_ref().unwrap() == f0));
        }
    }

    #[test]
    fn noiseless_drift_is_bounded() {
        let s = CohortSpec {
            noise_sd: 0.0,
            n_patients: 300,
            ..spec()
        };
        let dim = (s.dims.volumetric + s.dims.cognitive) as f64;
        let bound = s.drift_magnitude * dim.sqrt();
        let c = generate_cohort(&s).unwrap();
        let mut saw_motion = false;
        for t in c.trajectories() {
            for w in t.visits.windows(2) {
                let (a, b) = (w[0].features.as_ref().unwrap(), w[1].features.as_ref().unwrap());
                let sq: f64 = a
                    .volumetric
                    .iter()
                    .chain(&a.cognitive)
                    .zip(b.volumetric.iter().chain(&b.cognitive))
                    .map(|(x, y)| (x - y).powi(2))
                    .sum();
                assert!(sq.sqrt() <= bound + 1e-12);
                saw_motion |= sq > 0.0;
                assert_eq!(a.demographic, b.demographic);
            }
        }
        assert!(saw_motion);
    }

    #[test]
    fn generation_is_pure_and_order_independent() {
        let a = generate_cohort(&spec()).unwrap();
        let b = generate_cohort(&spec()).unwrap();
        assert_eq!(a, b);
        let small = generate_cohort(&CohortSpec {
            n_patients: 10,
            ..spec()
        })
        .unwrap();
        assert_eq!(small.trajectories()[7], a.trajectories()[7]);
    }

    #[test]
    fn missingness_only_changes_the_mask() {
        let base = generate_cohort(&spec()).unwrap();
        let masked = generate_cohort(&CohortSpec {
            missing_prob: 0.3,
            ..spec()
        })
        .unwrap();
        for (a, b) in base.trajectories().iter().zip(masked.trajectories()) {
            assert!(b.visits[0].is_observed());
            for (va, vb) in a.visits.iter().zip(&b.visits) {
                assert_eq!(va.label, vb.label);
                if vb.is_observed() {
                    assert_eq!(va.features, vb.features);
                }
            }
        }
        let unchanged = apply_missingness(&base.trajectories()[0], 0.0, 5);
        assert_eq!(&unchanged, &base.trajectories()[0]);
    }

    #[test]
    fn missing_rate_matches_probability() {
        let t = Trajectory {
            patient_id: "x".into(),
            visits: (0..10_001)
                .map(|i| Visit {
                    index: i,
                    label: None,
                    features: Some(VisitFeatures {
                        volumetric: vec![],
                        demographic: vec![],
                        cognitive: vec![],
                    }),
                })
                .collect(),
        };
        let m = apply_missingness(&t, 0.3, 99);
        let missing = m.visits.iter().filter(|v| !v.is_observed()).count() as f64;
        let n = 10_000.0;
        let sigma = (n * 0.3 * 0.7f64).sqrt();
        assert!((missing - 0.3 * n).abs() < 3.0 * sigma, "{missing}");
    }

    #[test]
    fn nearest_class_mean_separates_stages() {
        let c = generate_cohort(&CohortSpec {
            seed: 4,
            ..spec()
        })
        .unwrap();
        let flat = |f: &VisitFeatures| -> Vec<f64> {
            f.volumetric.iter().chain(&f.cognitive).copied().collect()
        };
        let mut sums = vec![vec![0.0; 36]; 3];
        let mut counts = [0usize; 3];
        for t in c.trajectories() {
            for v in &t.visits {
                let s = v.label.unwrap().index();
                counts[s] += 1;
                for (a, b) in sums[s].iter_mut().zip(flat(v.features.as_ref().unwrap())) {
                    *a += b;
                }
            }
        }
        let means: Vec<Vec<f64>> = sums
            .iter()
            .zip(counts)
            .map(|(s, n)| s.iter().map(|x| x / n as f64).collect())
            .collect();
        let (mut hit, mut total) = (0, 0);
        for t in c.trajectories() {
            for v in &t.visits {
                let x = flat(v.features.as_ref().unwrap());
                let best = (0..3)
                    .min_by(|&a, &b| {
                        let d = |m: &Vec<f64>| x.iter().zip(m).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
                        d(&means[a]).total_cmp(&d(&means[b]))
                    })
                    .unwrap();
                hit += usize::from(best == v.label.unwrap().index());
                total += 1;
            }
        }
        let acc = hit as f64 / total as f64;
        assert!(acc >= 0.8, "nearest-mean accuracy {acc}");
    }
}
