//! Cohort CSV ingestion and export, and z-score normalization fitted on the
//! training split.
//!
//! The CSV has one row per recorded visit:
//!
//! ```text
//! patient_id,visit,label,observed,vol_0,..,dem_0,..,cog_0,..
//! ```
//!
//! `label` is `CN`, `MCI`, `AD` or empty; `observed` is `1`/`0`; feature
//! cells of unobserved rows are left empty. Feature columns are positional,
//! their counts come from the JSON sidecar manifest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, FeatureDims, Stage, Trajectory, TrajectorySource, Visit, VisitFeatures};
use crate::synthcohort::{CohortSpec, CohortSummary};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {message}", line.map_or_else(|| "schema".to_string(), |l| format!("line {l}")))]
    Schema { line: Option<u64>, message: String },
    #[error("cannot fit normalizer: {0}")]
    Fit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}

fn schema<T>(line: Option<u64>, message: impl Into<String>) -> Result<T, DataError> {
    Err(DataError::Schema {
        line,
        message: message.into(),
    })
}

/// Generator settings recorded next to a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthProvenance {
    pub spec: CohortSpec,
    pub summary: CohortSummary,
}

/// JSON sidecar describing a cohort CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub dim_v: usize,
    pub dim_s: usize,
    pub dim_c: usize,
    pub n_patients: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthProvenance>,
}

impl CohortManifest {
    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            volumetric: self.dim_v,
            demographic: self.dim_s,
            cognitive: self.dim_c,
        }
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

/// `cohort.csv` → `cohort.manifest.json`.
pub fn manifest_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("manifest.json")
}

const FIXED_COLUMNS: [&str; 4] = ["patient_id", "visit", "label", "observed"];

pub fn header(dims: FeatureDims) -> Vec<String> {
    let mut h: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    h.extend((0..dims.volumetric).map(|i| format!("vol_{i}")));
    h.extend((0..dims.demographic).map(|i| format!("dem_{i}")));
    h.extend((0..dims.cognitive).map(|i| format!("cog_{i}")));
    h
}

/// Loads a cohort CSV using the sidecar manifest next to it.
pub fn load_cohort_file(path: &Path) -> Result<Cohort, DataError> {
    let manifest = CohortManifest::read(&manifest_path(path))?;
    load_cohort(File::open(path)?, &manifest)
}

/// Parses a cohort CSV. Rows may come in any order; patients keep the order
/// of their first row and visits are sorted by index.
pub fn load_cohort<R: Read>(reader: R, manifest: &CohortManifest) -> Result<Cohort, DataError> {
    let dims = manifest.dims();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::None)
        .from_reader(reader);
    let head = rdr.headers()?.clone();
    let width = FIXED_COLUMNS.len() + dims.total();
    if head.len() != width {
        return schema(
            Some(1),
            format!(
                "header has {} columns, manifest implies {width}",
                head.len()
            ),
        );
    }
    for (i, name) in FIXED_COLUMNS.iter().enumerate() {
        if head[i].trim() != *name {
            return schema(Some(1), format!("column {i} must be `{name}`, found `{}`", &head[i]));
        }
    }

    let mut order: Vec<String> = Vec::new();
    let mut visits: BTreeMap<String, BTreeMap<u32, Visit>> = BTreeMap::new();
    for (row, record) in rdr.records().enumerate() {
        let line = row as u64 + 2;
        let record = record?;
        if record.len() != width {
            return schema(
                Some(line),
                format!("expected {width} fields, found {}", record.len()),
            );
        }
        let id = record[0].trim();
        if id.is_empty() {
            return schema(Some(line), "empty patient_id");
        }
        let index: u32 = match record[1].trim().parse() {
            Ok(i) => i,
            Err(_) => {
                return schema(
                    Some(line),
                    format!("visit index `{}` is not a non-negative integer", &record[1]),
                )
            }
        };
        let label = match record[2].trim() {
            "" => None,
            token => match token.parse::<Stage>() {
                Ok(s) => Some(s),
                Err(e) => return schema(Some(line), e.to_string()),
            },
        };
        let observed = match record[3].trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return schema(Some(line), format!("observed flag `{other}` is not 0/1")),
        };
        let features = if observed {
            let mut values = Vec::with_capacity(dims.total());
            for (k, cell) in record.iter().skip(FIXED_COLUMNS.len()).enumerate() {
                let column = &head[FIXED_COLUMNS.len() + k];
                let v: f64 = match cell.trim().parse() {
                    Ok(v) => v,
                    Err(_) => {
                        return schema(
                            Some(line),
                            format!("column {column}: `{cell}` is not a number"),
                        )
                    }
                };
                if !v.is_finite() {
                    return schema(Some(line), format!("column {column}: non-finite value {v}"));
                }
                values.push(v);
            }
            let cog = values.split_off(dims.volumetric + dims.demographic);
            let dem = values.split_off(dims.volumetric);
            Some(VisitFeatures {
                volumetric: values,
                demographic: dem,
                cognitive: cog,
            })
        } else {
            None
        };

        let patient = match visits.get_mut(id) {
            Some(p) => p,
            None => {
                order.push(id.to_string());
                visits.entry(id.to_string()).or_default()
            }
        };
        if patient.contains_key(&index) {
            return schema(
                Some(line),
                format!("duplicate visit {index} for patient {id}"),
            );
        }
        patient.insert(
            index,
            Visit {
                index,
                label,
                features,
            },
        );
    }

    if !order.is_empty() && order.len() != manifest.n_patients {
        return schema(
            None,
            format!(
                "manifest declares {} patients, file has {}",
                manifest.n_patients,
                order.len()
            ),
        );
    }
    let trajectories = order
        .into_iter()
        .map(|id| {
            let v = visits.remove(&id).unwrap_or_default();
            Trajectory {
                patient_id: id,
                visits: v.into_values().collect(),
            }
        })
        .collect();
    Ok(Cohort::new(dims, trajectories))
}

fn cohort_dims(cohort: &Cohort) -> Result<FeatureDims, DataError> {
    cohort
        .dims
        .or_else(|| {
            cohort
                .trajectories()
                .iter()
                .flat_map(|t| &t.visits)
                .find_map(|v| v.features.as_ref().map(VisitFeatures::dims))
        })
        .ok_or_else(|| DataError::Schema {
            line: None,
            message: "cohort has no feature dimensions".into(),
        })
}

/// Writes the CSV rows of `cohort`; floats use the shortest representation
/// that parses back to the same value.
pub fn write_cohort<W: Write>(cohort: &Cohort, writer: W) -> Result<CohortManifest, DataError> {
    let dims = cohort_dims(cohort)?;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header(dims))?;
    let mut row: Vec<String> = Vec::with_capacity(FIXED_COLUMNS.len() + dims.total());
    for t in cohort.trajectories() {
        for v in &t.visits {
            row.clear();
            row.push(t.patient_id.clone());
            row.push(v.index.to_string());
            row.push(v.label.map(|l| l.as_str().to_string()).unwrap_or_default());
            match &v.features {
                Some(f) => {
                    if f.dims() != dims {
                        return schema(
                            None,
                            format!("patient {} visit {} has wrong feature dims", t.patient_id, v.index),
                        );
                    }
                    row.push("1".into());
                    row.extend(f.modalities().iter().flat_map(|m| m.iter()).map(|x| format!("{x}")));
                }
                None => {
                    row.push("0".into());
                    row.extend(std::iter::repeat_n(String::new(), dims.total()));
                }
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(CohortManifest {
        dim_v: dims.volumetric,
        dim_s: dims.demographic,
        dim_c: dims.cognitive,
        n_patients: cohort.len(),
        synth: None,
    })
}

/// Writes `path` and its sidecar manifest.
pub fn write_cohort_file(
    cohort: &Cohort,
    path: &Path,
    synth: Option<SynthProvenance>,
) -> Result<CohortManifest, DataError> {
    let mut manifest = write_cohort(cohort, BufWriter::new(File::create(path)?))?;
    manifest.synth = synth;
    manifest.write(&manifest_path(path))?;
    Ok(manifest)
}

pub const SD_FLOOR: f64 = 1e-8;

/// Per-feature z-scoring over the concatenated modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub dims: FeatureDims,
    pub mean: Vec<f64>,
    /// Population standard deviation, floored at [`SD_FLOOR`].
    pub sd: Vec<f64>,
    pub fitted_on: String,
}

/// Fits on the observed visits of `train_ids` only; no other trajectory of
/// `source` is read.
pub fn fit_normalizer<S: TrajectorySource + ?Sized>(
    source: &S,
    train_ids: &[String],
    split_name: &str,
) -> Result<Normalizer, DataError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dims = None;
    for id in train_ids {
        let traj = source
            .trajectory(id)
            .ok_or_else(|| DataError::Fit(format!("unknown training patient {id}")))?;
        for f in traj.visits.iter().filter_map(|v| v.features.as_ref()) {
            match dims {
                None => dims = Some(f.dims()),
                Some(d) if d != f.dims() => {
                    return Err(DataError::Fit(format!("patient {id} has inconsistent feature dims")))
                }
                _ => {}
            }
            rows.push(f.modalities().iter().flat_map(|m| m.iter().copied()).collect());
        }
    }
    if rows.len() < 2 {
        return Err(DataError::Fit(format!(
            "need at least 2 observed training visits, found {}",
            rows.len()
        )));
    }
    let dims = dims.expect("rows imply dims");
    let n = rows.len() as f64;
    let width = dims.total();
    let mut mean = vec![0.0; width];
    let mut sd = vec![0.0; width];
    for j in 0..width {
        // Shifted by the first value so a constant column has an exact mean.
        let pivot = rows[0][j];
        let m = pivot + rows.iter().map(|r| r[j] - pivot).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
        mean[j] = m;
        sd[j] = var.sqrt().max(SD_FLOOR);
    }
    Ok(Normalizer {
        dims,
        mean,
        sd,
        fitted_on: split_name.to_string(),
    })
}

impl Normalizer {
    pub fn apply_features(&self, f: &VisitFeatures) -> Result<VisitFeatures, DataError> {
        if f.dims() != self.dims {
            return schema(None, "feature dims differ from the fitted normalizer");
        }
        let mut out = f.clone();
        let mut j = 0;
        for m in out.modalities_mut() {
            for x in m.iter_mut() {
                *x = (*x - self.mean[j]) / self.sd[j];
                j += 1;
            }
        }
        Ok(out)
    }

    pub fn apply(&self, traj: &Trajectory) -> Result<Trajectory, DataError> {
        let visits = traj
            .visits
            .iter()
            .map(|v| {
                Ok(Visit {
                    index: v.index,
                    label: v.label,
                    features: v.features.as_ref().map(|f| self.apply_features(f)).transpose()?,
                })
            })
            .collect::<Result<_, DataError>>()?;
        Ok(Trajectory {
            patient_id: traj.patient_id.clone(),
            visits,
        })
    }

    pub fn apply_cohort(&self, cohort: &Cohort) -> Result<Cohort, DataError> {
        let trajectories = cohort
            .trajectories()
            .iter()
            .map(|t| self.apply(t))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Cohort::new(self.dims, trajectories))
    }
}

#[cfg(test)]
mod tests {
    use std::cell::RefCell;

    use super::*;
    use crate::synthcohort::generate_cohort;

    fn small_spec() -> CohortSpec {
        CohortSpec {
            n_patients: 25,
            missing_prob: 0.2,
            seed: 8,
            ..CohortSpec::default()
        }
    }

    fn manifest(dims: FeatureDims, n: usize) -> CohortManifest {
        CohortManifest {
            dim_v: dims.volumetric,
            dim_s: dims.demographic,
            dim_c: dims.cognitive,
            n_patients: n,
            synth: None,
        }
    }

    fn tiny_dims() -> FeatureDims {
        FeatureDims {
            volumetric: 2,
            demographic: 1,
            cognitive: 1,
        }
    }

    #[test]
    fn synth_round_trip_is_exact() {
        let cohort = generate_cohort(&small_spec()).unwrap();
        let mut buf = Vec::new();
        let m = write_cohort(&cohort, &mut buf).unwrap();
        let back = load_cohort(buf.as_slice(), &m).unwrap();
        assert_eq!(back, cohort);
    }

    #[test]
    fn file_round_trip_with_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.csv");
        let spec = small_spec();
        let cohort = generate_cohort(&spec).unwrap();
        let prov = SynthProvenance {
            spec: spec.clone(),
            summary: crate::synthcohort::summarize(&cohort),
        };
        write_cohort_file(&cohort, &path, Some(prov.clone())).unwrap();
        assert!(dir.path().join("cohort.manifest.json").exists());
        assert_eq!(load_cohort_file(&path).unwrap(), cohort);
        let m = CohortManifest::read(&manifest_path(&path)).unwrap();
        assert_eq!(m.synth, Some(prov));
    }

    #[test]
    fn empty_file_gives_empty_cohort() {
        let text = "patient_id,visit,label,observed,vol_0,vol_1,dem_0,cog_0\n";
        let c = load_cohort(text.as_bytes(), &manifest(tiny_dims(), 0)).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn parses_unordered_rows_and_trimmed_labels() {
        let text = "patient_id,visit,label,observed,vol_0,vol_1,dem_0,cog_0\n\
                    B,3,AD ,1,1.5,2,3,4\n\
                    A,0,CN,1,0.1,0.2,0.3,0.4\n\
                    B,1,,0,,,,\n\
                    A,2, MCI,1,1e-3,-2,3,4\n";
        let c = load_cohort(text.as_bytes(), &manifest(tiny_dims(), 2)).unwrap();
        assert_eq!(c.patient_ids().collect::<Vec<_>>(), ["B", "A"]);
        let b = c.trajectory("B").unwrap();
        assert_eq!(b.visits.iter().map(|v| v.index).collect::<Vec<_>>(), [1, 3]);
        assert_eq!(b.label_at(3), Some(Stage::Ad));
        assert!(!b.visits[0].is_observed());
        let a = c.trajectory("A").unwrap();
        assert_eq!(a.label_at(2), Some(Stage::Mci));
        assert_eq!(a.features_at(2).unwrap().volumetric, vec![1e-3, -2.0]);
    }

    fn load_err(body: &str) -> DataError {
        let text = format!("patient_id,visit,label,observed,vol_0,vol_1,dem_0,cog_0\n{body}");
        load_cohort(text.as_bytes(), &manifest(tiny_dims(), 1)).unwrap_err()
    }

    fn line_of(e: DataError) -> Option<u64> {
        match e {
            DataError::Schema { line, .. } => line,
            other => panic!("expected schema error, got {other}"),
        }
    }

    #[test]
    fn schema_errors_carry_line_numbers() {
        assert_eq!(line_of(load_err("A,0,CN,1,1,2,3,4\nA,0,CN,1,1,2,3,4\n")), Some(3));
        assert_eq!(line_of(load_err("A,0,CN,1,1,NaN,3,4\n")), Some(2));
        assert_eq!(line_of(load_err("A,0,CN,1,1,inf,3,4\n")), Some(2));
        assert_eq!(line_of(load_err("A,0,CN,1,1,2,3,4\nA,1,Dementia,1,1,2,3,4\n")), Some(3));
        assert_eq!(line_of(load_err("A,-1,CN,1,1,2,3,4\n")), Some(2));
        assert_eq!(line_of(load_err("A,0,CN,1,1,,3,4\n")), Some(2));
    }

    #[test]
    fn rejects_header_that_disagrees_with_manifest() {
        let text = "patient_id,visit,label,observed,vol_0\n";
        assert_eq!(line_of(load_cohort(text.as_bytes(), &manifest(tiny_dims(), 0)).unwrap_err()), Some(1));
    }

    struct CountingSource<'a> {
        cohort: &'a Cohort,
        reads: RefCell<Vec<String>>,
    }

    impl TrajectorySource for CountingSource<'_> {
        fn trajectory(&self, id: &str) -> Option<&Trajectory> {
            self.reads.borrow_mut().push(id.to_string());
            self.cohort.trajectory(id)
        }
    }

    #[test]
    fn normalizer_reads_only_training_patients() {
        let cohort = generate_cohort(&small_spec()).unwrap();
        let ids: Vec<String> = cohort.patient_ids().map(String::from).collect();
        let (train, test) = ids.split_at(18);
        let src = CountingSource {
            cohort: &cohort,
            reads: RefCell::new(Vec::new()),
        };
        fit_normalizer(&src, train, "train").unwrap();
        let reads = src.reads.borrow();
        assert_eq!(reads.len(), train.len());
        assert!(reads.iter().all(|r| !test.contains(r)));
    }

    #[test]
    fn training_features_are_standardized() {
        let cohort = generate_cohort(&small_spec()).unwrap();
        let train: Vec<String> = cohort.patient_ids().take(18).map(String::from).collect();
        let norm = fit_normalizer(&cohort, &train, "train").unwrap();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); norm.dims.total()];
        for id in &train {
            let t = norm.apply(cohort.trajectory(id).unwrap()).unwrap();
            for f in t.visits.iter().filter_map(|v| v.features.as_ref()) {
                for (c, x) in cols.iter_mut().zip(f.modalities().iter().flat_map(|m| m.iter())) {
                    c.push(*x);
                }
            }
        }
        for c in &cols {
            let n = c.len() as f64;
            let m = c.iter().sum::<f64>() / n;
            let sd = (c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
            assert!(m.abs() < 1e-10, "mean {m}");
            assert!((sd - 1.0).abs() < 1e-10, "sd {sd}");
        }
    }

    fn constant_visit(index: u32, v: f64, c: f64) -> Visit {
        Visit {
            index,
            label: Some(Stage::Cn),
            features: Some(VisitFeatures {
                volumetric: vec![v, c],
                demographic: vec![c],
                cognitive: vec![v],
            }),
        }
    }

    #[test]
    fn constant_feature_maps_to_zero() {
        let traj = Trajectory {
            patient_id: "A".into(),
            visits: vec![constant_visit(0, 1.0, 0.1), constant_visit(1, 2.0, 0.1), constant_visit(2, 4.0, 0.1)],
        };
        let c = Cohort::new(tiny_dims(), vec![traj]);
        let norm = fit_normalizer(&c, &["A".to_string()], "train").unwrap();
        assert_eq!(norm.sd[1], SD_FLOOR);
        let t = norm.apply(&c.trajectories()[0]).unwrap();
        for v in &t.visits {
            let f = v.features.as_ref().unwrap();
            assert_eq!(f.volumetric[1], 0.0);
            assert_eq!(f.demographic[0], 0.0);
        }
    }

    #[test]
    fn test_split_uses_train_statistics() {
        let cohort = generate_cohort(&small_spec()).unwrap();
        let train: Vec<String> = cohort.patient_ids().map(String::from).collect();
        let norm = fit_normalizer(&cohort, &train, "train").unwrap();
        let shifted = cohort.map_trajectories(|t| {
            let mut t = t.clone();
            for f in t.visits.iter_mut().filter_map(|v| v.features.as_mut()) {
                for x in f.volumetric.iter_mut() {
                    *x += 5.0;
                }
            }
            t
        });
        let out = norm.apply_cohort(&shifted).unwrap();
        let vals: Vec<f64> = out
            .trajectories()
            .iter()
            .flat_map(|t| &t.visits)
            .filter_map(|v| v.features.as_ref())
            .map(|f| f.volumetric[0])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(mean > 1.0, "shifted test mean {mean}");
    }

    #[test]
    fn fit_needs_two_observed_visits() {
        let traj = Trajectory {
            patient_id: "A".into(),
            visits: vec![constant_visit(0, 1.0, 0.1)],
        };
        let c = Cohort::new(tiny_dims(), vec![traj]);
        assert!(matches!(
            fit_normalizer(&c, &["A".to_string()], "train"),
            Err(DataError::Fit(_))
        ));
    }
}
