//! Subtrajectory augmentation, patient-level splitting and the two
//! length-homogeneous batch loaders.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, Stage, Trajectory, VisitFeatures};

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("invalid split: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Bounds on the `(T, τ)` domain: `2 ≤ T ≤ max_t`, `τ ≥ 1`, `T + τ ≤ max_sum`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleLimits {
    pub max_t: usize,
    pub max_sum: usize,
}

impl Default for SampleLimits {
    fn default() -> Self {
        Self { max_t: 4, max_sum: 5 }
    }
}

impl SampleLimits {
    pub fn contains(&self, t: usize, tau: usize) -> bool {
        (2..=self.max_t).contains(&t) && tau >= 1 && t + tau <= self.max_sum
    }

    /// All admissible `(T, τ)` pairs, ordered by `T` then `τ`.
    pub fn buckets(&self) -> Vec<(usize, usize)> {
        (2..=self.max_t)
            .flat_map(|t| (1..=self.max_sum.saturating_sub(t)).map(move |tau| (t, tau)))
            .collect()
    }

    pub fn max_tau(&self) -> usize {
        self.max_sum.saturating_sub(2)
    }
}

/// An augmented training sample: `t` consecutive grid positions starting at
/// `window_start`, labeled by the stage `tau` steps after the last one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subtrajectory {
    pub patient_id: String,
    /// Position of the patient in the cohort the sample was drawn from.
    pub patient: usize,
    pub window_start: u32,
    pub t: usize,
    pub tau: usize,
    pub target_label: Stage,
    /// `true` where the window position has no observed features.
    pub missing_mask: Vec<bool>,
}

impl Subtrajectory {
    pub fn bucket(&self) -> (usize, usize) {
        (self.t, self.tau)
    }

    pub fn target_index(&self) -> u32 {
        self.window_start + (self.t - 1 + self.tau) as u32
    }

    pub fn has_missing(&self) -> bool {
        self.missing_mask.iter().any(|&m| m)
    }

    /// Feature vectors of the window positions (`None` where missing).
    pub fn window<'a>(&self, traj: &'a Trajectory) -> Vec<Option<&'a VisitFeatures>> {
        (0..self.t as u32)
            .map(|k| traj.features_at(self.window_start + k))
            .collect()
    }
}

/// Every admissible window of `traj`, ordered by start, then `T`, then `τ`.
///
/// A window's first position must be observed and its target position must
/// carry a label; interior positions may be missing.
pub fn enumerate_subtrajectories(
    traj: &Trajectory,
    patient: usize,
    limits: SampleLimits,
) -> Vec<Subtrajectory> {
    let Some((first, last)) = traj.span() else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for start in first..=last {
        if traj.features_at(start).is_none() {
            continue;
        }
        for t in 2..=limits.max_t {
            for tau in 1..=limits.max_sum.saturating_sub(t) {
                let target = start as u64 + (t - 1 + tau) as u64;
                if target > last as u64 {
                    break;
                }
                let Some(label) = traj.label_at(target as u32) else {
                    continue;
                };
                out.push(Subtrajectory {
                    patient_id: traj.patient_id.clone(),
                    patient,
                    window_start: start,
                    t,
                    tau,
                    target_label: label,
                    missing_mask: (0..t as u32)
                        .map(|k| traj.features_at(start + k).is_none())
                        .collect(),
                });
            }
        }
    }
    out
}

/// Augments the listed patients in the given order.
pub fn augment(cohort: &Cohort, patient_ids: &[String], limits: SampleLimits) -> Vec<Subtrajectory> {
    patient_ids
        .iter()
        .filter_map(|id| cohort.position(id))
        .flat_map(|p| enumerate_subtrajectories(&cohort.trajectories()[p], p, limits))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    pub seed: u64,
}

fn default_train_fraction() -> f64 {
    0.8
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.train_fraction > 0.0 && self.train_fraction < 1.0 {
            Ok(())
        } else {
            Err(SamplingError::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )))
        }
    }

    /// Patients assigned to training out of `n`: `floor(n · fraction)`.
    pub fn train_count(&self, n: usize) -> usize {
        // The epsilon absorbs representation error such as 0.29 * 100 = 28.999...
        ((n as f64 * self.train_fraction) + 1e-9).floor() as usize
    }
}

/// Seeded shuffle of the sorted patient ids, then a prefix split.
pub fn split_patients<'a>(
    ids: impl IntoIterator<Item = &'a str>,
    spec: &SplitSpec,
) -> Result<(Vec<String>, Vec<String>), SamplingError> {
    spec.validate()?;
    let mut ids: Vec<String> = ids.into_iter().map(str::to_string).collect();
    if ids.is_empty() {
        return Err(SamplingError::Config("cannot split an empty cohort".into()));
    }
    ids.sort();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    ids.shuffle(&mut rng);
    let n_train = spec.train_count(ids.len());
    let test = ids.split_off(n_train);
    Ok((ids, test))
}

/// Indices into the sample slice a loader was built from, all with the same `T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub epoch: usize,
    pub t: usize,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoaderScheme {
    UniformRandom,
    PerLength,
}

pub trait BatchLoader {
    fn next_epoch(&mut self) -> Vec<Batch>;
}

fn group_by_t(samples: &[Subtrajectory]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.t).or_default().push(i);
    }
    groups
}

/// Draws `T` uniformly from the lengths present, then takes the next
/// `batch_size` unseen samples of that length.
///
/// Each length keeps its own shuffled queue. An epoch ends at the first draw
/// whose queue is already exhausted, so draws stay uniform and no sample
/// repeats within an epoch; every queue is reshuffled at the next epoch.
#[derive(Debug, Clone)]
pub struct UniformRandomBatches {
    groups: Vec<(usize, Vec<usize>)>,
    batch_size: usize,
    rng: ChaCha8Rng,
    epoch: usize,
    /// Length drawn when the previous epoch ended; it opens the next one so
    /// no draw is discarded.
    carry: Option<usize>,
    pending: std::collections::VecDeque<Batch>,
}

impl UniformRandomBatches {
    pub fn new(samples: &[Subtrajectory], batch_size: usize, seed: u64) -> Self {
        Self {
            groups: group_by_t(samples).into_iter().collect(),
            batch_size: batch_size.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: 0,
            carry: None,
            pending: Default::default(),
        }
    }
}

impl BatchLoader for UniformRandomBatches {
    fn next_epoch(&mut self) -> Vec<Batch> {
        let epoch = self.epoch;
        self.epoch += 1;
        if self.groups.is_empty() {
            return Vec::new();
        }
        let mut queues: Vec<Vec<usize>> = self
            .groups
            .iter()
            .map(|(_, idx)| {
                let mut q = idx.clone();
                q.shuffle(&mut self.rng);
                q
            })
            .collect();
        let mut cursors = vec![0usize; queues.len()];
        let mut out = Vec::new();
        loop {
            let g = match self.carry.take() {
                Some(g) => g,
                None => self.rng.random_range(0..queues.len()),
            };
            let q = &mut queues[g];
            if cursors[g] >= q.len() {
                self.carry = Some(g);
                break;
            }
            let end = (cursors[g] + self.batch_size).min(q.len());
            out.push(Batch {
                epoch,
                t: self.groups[g].0,
                indices: q[cursors[g]..end].to_vec(),
            });
            cursors[g] = end;
        }
        out
    }
}

impl Iterator for UniformRandomBatches {
    type Item = Batch;

    /// Infinite stream across epochs (empty if there are no samples).
    fn next(&mut self) -> Option<Batch> {
        while self.pending.is_empty() {
            if self.groups.is_empty() {
                return None;
            }
            let e = self.next_epoch();
            self.pending.extend(e);
        }
        self.pending.pop_front()
    }
}

/// One shuffled pass per length, lengths in ascending order; every sample
/// exactly once per epoch.
#[derive(Debug, Clone)]
pub struct PerLengthBatches {
    groups: Vec<(usize, Vec<usize>)>,
    batch_size: usize,
    rng: ChaCha8Rng,
    epoch: usize,
    pending: std::collections::VecDeque<Batch>,
}

impl PerLengthBatches {
    pub fn new(samples: &[Subtrajectory], batch_size: usize, seed: u64) -> Self {
        Self {
            groups: group_by_t(samples).into_iter().collect(),
            batch_size: batch_size.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: 0,
            pending: Default::default(),
        }
    }
}

impl BatchLoader for PerLengthBatches {
    fn next_epoch(&mut self) -> Vec<Batch> {
        let epoch = self.epoch;
        self.epoch += 1;
        let mut out = Vec::new();
        for (t, idx) in &self.groups {
            let mut q = idx.clone();
            q.shuffle(&mut self.rng);
            out.extend(q.chunks(self.batch_size).map(|c| Batch {
                epoch,
                t: *t,
                indices: c.to_vec(),
            }));
        }
        out
    }
}

impl Iterator for PerLengthBatches {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        while self.pending.is_empty() {
            if self.groups.is_empty() {
                return None;
            }
            let e = self.next_epoch();
            self.pending.extend(e);
        }
        self.pending.pop_front()
    }
}

pub fn make_loader(
    scheme: LoaderScheme,
    samples: &[Subtrajectory],
    batch_size: usize,
    seed: u64,
) -> Box<dyn BatchLoader> {
    match scheme {
        LoaderScheme::UniformRandom => {
            Box::new(UniformRandomBatches::new(samples, batch_size, seed))
        }
        LoaderScheme::PerLength => Box::new(PerLengthBatches::new(samples, batch_size, seed)),
    }
}

/// One row of the augmentation report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketCount {
    pub t: usize,
    pub tau: usize,
    pub split: String,
    pub count: usize,
}

/// Sample counts per `(T, τ)` for each named split, covering the whole
/// domain (zero rows included), followed by one `total` row per split.
pub fn augmentation_report(
    limits: SampleLimits,
    splits: &[(&str, &[Subtrajectory])],
) -> Vec<BucketCount> {
    let mut rows = Vec::new();
    for (name, samples) in splits {
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for s in samples.iter() {
            *counts.entry(s.bucket()).or_default() += 1;
        }
        for (t, tau) in limits.buckets() {
            rows.push(BucketCount {
                t,
                tau,
                split: name.to_string(),
                count: counts.get(&(t, tau)).copied().unwrap_or(0),
            });
        }
    }
    rows
}

/// CSV with header `T,tau,split,count`.
pub fn write_augmentation_report<W: Write>(
    rows: &[BucketCount],
    out: W,
) -> Result<(), SamplingError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["T", "tau", "split", "count"])?;
    for r in rows {
        w.write_record([
            r.t.to_string(),
            r.tau.to_string(),
            r.split.clone(),
            r.count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{Visit, VisitFeatures};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn feats() -> VisitFeatures {
        VisitFeatures {
            volumetric: vec![0.0],
            demographic: vec![0.0],
            cognitive: vec![0.0],
        }
    }

    fn traj(observed: &[bool]) -> Trajectory {
        Trajectory {
            patient_id: "p".into(),
            visits: observed
                .iter()
                .enumerate()
                .map(|(i, &o)| Visit {
                    index: i as u32,
                    label: Some(Stage::Cn),
                    features: o.then(feats),
                })
                .collect(),
        }
    }

    #[test]
    fn worked_example_two_windows() {
        let limits = SampleLimits { max_t: 2, max_sum: 3 };
        let mut tr = traj(&[true; 4]);
        tr.visits[2].label = Some(Stage::Mci);
        tr.visits[3].label = Some(Stage::Ad);
        let s = enumerate_subtrajectories(&tr, 0, limits);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].window_start, s[0].t, s[0].tau), (0, 2, 1));
        assert_eq!(s[0].target_label, Stage::Mci);
        assert_eq!((s[1].window_start, s[1].t, s[1].tau), (1, 2, 1));
        assert_eq!(s[1].target_label, Stage::Ad);
    }

    #[test]
    fn four_visits_full_domain() {
        let s = enumerate_subtrajectories(&traj(&[true; 4]), 0, SampleLimits::default());
        let buckets: Vec<_> = s.iter().map(|s| (s.window_start, s.t, s.tau)).collect();
        assert_eq!(buckets, vec![(0, 2, 1), (0, 2, 2), (0, 3, 1), (1, 2, 1)]);
    }

    #[test]
    fn single_visit_gives_nothing() {
        assert!(enumerate_subtrajectories(&traj(&[true]), 0, SampleLimits::default()).is_empty());
        let empty = Trajectory {
            patient_id: "e".into(),
            visits: vec![],
        };
        assert!(enumerate_subtrajectories(&empty, 0, SampleLimits::default()).is_empty());
    }

    #[test]
    fn unlabeled_targets_and_unobserved_starts_are_skipped() {
        let mut tr = traj(&[true, false, true]);
        tr.visits[2].label = None;
        let s = enumerate_subtrajectories(&tr, 0, SampleLimits::default());
        // start 0 needs target 2 (unlabeled); start 1 is unobserved.
        assert!(s.is_empty());
        let mut tr = traj(&[true, false, true]);
        tr.visits[1].label = None;
        let s = enumerate_subtrajectories(&tr, 0, SampleLimits::default());
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].missing_mask, vec![false, true]);
    }

    #[test]
    fn grid_gaps_count_as_missing() {
        let mut tr = traj(&[true, true]);
        tr.visits[1].index = 3;
        let s = enumerate_subtrajectories(&tr, 0, SampleLimits::default());
        let keys: Vec<_> = s.iter().map(|s| (s.t, s.tau)).collect();
        assert_eq!(keys, vec![(2, 2), (3, 1)]);
        assert_eq!(s[1].missing_mask, vec![false, true, true]);
        assert_eq!(s[0].window(&tr).len(), 2);
    }

    #[test]
    fn split_examples() {
        let ids: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
        let spec = SplitSpec {
            train_fraction: 0.8,
            seed: 9,
        };
        let (a, b) = split_patients(ids.iter().map(String::as_str), &spec).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        assert!(a.iter().all(|x| !b.contains(x)));
        let again = split_patients(ids.iter().map(String::as_str), &spec).unwrap();
        assert_eq!((a, b), again);

        let ids: Vec<String> = (0..1652).map(|i| format!("p{i}")).collect();
        let (a, b) = split_patients(ids.iter().map(String::as_str), &spec).unwrap();
        assert_eq!((a.len(), b.len()), (1321, 331));
    }

    #[test]
    fn split_rejects_bad_fraction_and_empty_cohort() {
        for f in [0.0, 1.0, -0.2, 1.5] {
            let spec = SplitSpec {
                train_fraction: f,
                seed: 0,
            };
            assert!(split_patients(["a", "b"], &spec).is_err());
        }
        let spec = SplitSpec {
            train_fraction: 0.5,
            seed: 0,
        };
        assert!(split_patients(std::iter::empty(), &spec).is_err());
    }

    fn samples_with_counts(counts: &[(usize, usize)]) -> Vec<Subtrajectory> {
        counts
            .iter()
            .flat_map(|&(t, n)| {
                (0..n).map(move |i| Subtrajectory {
                    patient_id: format!("p{i}"),
                    patient: i,
                    window_start: 0,
                    t,
                    tau: 1,
                    target_label: Stage::Cn,
                    missing_mask: vec![false; t],
                })
            })
            .collect()
    }

    #[test]
    fn per_length_ceiling_arithmetic() {
        let s = samples_with_counts(&[(2, 5), (3, 3)]);
        let mut l = PerLengthBatches::new(&s, 2, 1);
        let e = l.next_epoch();
        let ts: Vec<_> = e.iter().map(|b| b.t).collect();
        assert_eq!(ts, vec![2, 2, 2, 3, 3]);
        let mut seen: Vec<usize> = e.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
        let mut again = PerLengthBatches::new(&s, 2, 1);
        assert_eq!(again.next_epoch(), e);
        assert_ne!(l.next_epoch()[0].epoch, e[0].epoch);
    }

    #[test]
    fn uniform_single_length() {
        let s = samples_with_counts(&[(2, 7)]);
        let batches: Vec<_> = UniformRandomBatches::new(&s, 3, 4).take(20).collect();
        assert!(batches.iter().all(|b| b.t == 2));
    }

    #[test]
    fn uniform_epoch_never_repeats_a_sample() {
        let s = samples_with_counts(&[(2, 50), (3, 20), (4, 9)]);
        let mut l = UniformRandomBatches::new(&s, 4, 2);
        for _ in 0..50 {
            let e = l.next_epoch();
            let mut seen = BTreeSet::new();
            for b in &e {
                assert!(b.indices.iter().all(|&i| s[i].t == b.t));
                for &i in &b.indices {
                    assert!(seen.insert(i), "sample {i} repeated in one epoch");
                }
            }
        }
    }

    #[test]
    fn uniform_length_frequencies() {
        let s = samples_with_counts(&[(2, 300), (3, 120), (4, 40)]);
        let n = 10_000;
        let mut counts = BTreeMap::new();
        for b in UniformRandomBatches::new(&s, 8, 77).take(n) {
            *counts.entry(b.t).or_insert(0usize) += 1;
        }
        let p = 1.0 / 3.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for t in 2..=4 {
            let c = counts[&t] as f64;
            assert!((c - n as f64 * p).abs() < 3.0 * sigma, "T={t}: {c}");
        }
    }

    #[test]
    fn report_covers_domain() {
        let s = enumerate_subtrajectories(&traj(&[true; 6]), 0, SampleLimits::default());
        let rows = augmentation_report(SampleLimits::default(), &[("train", &s)]);
        assert_eq!(rows.len(), 6);
        assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), s.len());
        let mut buf = Vec::new();
        write_augmentation_report(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("T,tau,split,count\n2,1,train,4\n"));
    }

    /// Independent count: Σ_{T=2}^{min(4,M−1)} Σ_{τ=1}^{min(5−T,M−T)} (M − T − τ + 1).
    fn closed_form(m: usize) -> usize {
        let mut total = 0;
        for t in 2..=4.min(m.saturating_sub(1)) {
            for tau in 1..=(5 - t).min(m - t) {
                total += m - t - tau + 1;
            }
        }
        total
    }

    #[test]
    fn enumeration_count_law() {
        for m in 2..=8 {
            let s = enumerate_subtrajectories(&traj(&vec![true; m]), 0, SampleLimits::default());
            assert_eq!(s.len(), closed_form(m), "M={m}");
        }
    }

    proptest! {
        #[test]
        fn per_length_visits_each_sample_once(
            counts in prop::collection::vec((2usize..5, 0usize..30), 1..4),
            batch in 1usize..10,
            seed in any::<u64>(),
        ) {
            let s = samples_with_counts(&counts);
            let e = PerLengthBatches::new(&s, batch, seed).next_epoch();
            let mut seen: Vec<usize> = e.iter().flat_map(|b| b.indices.clone()).collect();
            seen.sort();
            prop_assert_eq!(seen, (0..s.len()).collect::<Vec<_>>());
            prop_assert!(e.iter().all(|b| b.indices.iter().all(|&i| s[i].t == b.t)));
            prop_assert!(e.windows(2).all(|w| w[0].t <= w[1].t));
        }
    }
}
