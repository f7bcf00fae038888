//! Patient trajectories on the 6-month visit grid.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Diagnostic stage, ordered by severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "CN")]
    Cn = 0,
    #[serde(rename = "MCI")]
    Mci = 1,
    #[serde(rename = "AD")]
    Ad = 2,
}

pub const NUM_CLASSES: usize = 3;

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Cn, Stage::Mci, Stage::Ad];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Stage> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Cn => "CN",
            Stage::Mci => "MCI",
            Stage::Ad => "AD",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownStage(pub String);

impl fmt::Display for UnknownStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown stage label {:?}", self.0)
    }
}

impl std::error::Error for UnknownStage {}

impl FromStr for Stage {
    type Err = UnknownStage;

    /// Accepts `CN`, `MCI`, `AD` with surrounding whitespace.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "CN" => Ok(Stage::Cn),
            "MCI" => Ok(Stage::Mci),
            "AD" => Ok(Stage::Ad),
            other => Err(UnknownStage(other.to_string())),
        }
    }
}

/// Feature dimensions per modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub volumetric: usize,
    pub demographic: usize,
    pub cognitive: usize,
}

impl FeatureDims {
    pub fn total(&self) -> usize {
        self.volumetric + self.demographic + self.cognitive
    }
}

/// Feature vectors of one observed visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitFeatures {
    pub volumetric: Vec<f64>,
    pub demographic: Vec<f64>,
    pub cognitive: Vec<f64>,
}

impl VisitFeatures {
    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            volumetric: self.volumetric.len(),
            demographic: self.demographic.len(),
            cognitive: self.cognitive.len(),
        }
    }

    pub fn modalities(&self) -> [&[f64]; 3] {
        [&self.volumetric, &self.demographic, &self.cognitive]
    }

    pub fn modalities_mut(&mut self) -> [&mut Vec<f64>; 3] {
        [
            &mut self.volumetric,
            &mut self.demographic,
            &mut self.cognitive,
        ]
    }
}

/// One recorded visit. `features == None` means the visit is unobserved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    /// Position on the 6-month grid.
    pub index: u32,
    pub label: Option<Stage>,
    pub features: Option<VisitFeatures>,
}

impl Visit {
    pub fn is_observed(&self) -> bool {
        self.features.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub patient_id: String,
    /// Sorted by `index`, indices unique.
    pub visits: Vec<Visit>,
}

impl Trajectory {
    pub fn visit_at(&self, index: u32) -> Option<&Visit> {
        self.visits
            .binary_search_by_key(&index, |v| v.index)
            .ok()
            .map(|i| &self.visits[i])
    }

    pub fn features_at(&self, index: u32) -> Option<&VisitFeatures> {
        self.visit_at(index).and_then(|v| v.features.as_ref())
    }

    pub fn label_at(&self, index: u32) -> Option<Stage> {
        self.visit_at(index).and_then(|v| v.label)
    }

    /// First and last grid index, if any visit is recorded.
    pub fn span(&self) -> Option<(u32, u32)> {
        Some((self.visits.first()?.index, self.visits.last()?.index))
    }
}

/// A set of trajectories keyed by patient id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cohort {
    pub dims: Option<FeatureDims>,
    trajectories: Vec<Trajectory>,
    by_id: BTreeMap<String, usize>,
}

impl Cohort {
    pub fn new(dims: FeatureDims, trajectories: Vec<Trajectory>) -> Self {
        let by_id = trajectories
            .iter()
            .enumerate()
            .map(|(i, t)| (t.patient_id.clone(), i))
            .collect();
        Self {
            dims: Some(dims),
            trajectories,
            by_id,
        }
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn patient_ids(&self) -> impl Iterator<Item = &str> {
        self.trajectories.iter().map(|t| t.patient_id.as_str())
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn map_trajectories(&self, f: impl FnMut(&Trajectory) -> Trajectory) -> Cohort {
        Cohort {
            dims: self.dims,
            trajectories: self.trajectories.iter().map(f).collect(),
            by_id: self.by_id.clone(),
        }
    }
}

/// Read access to trajectories by patient id.
pub trait TrajectorySource {
    fn trajectory(&self, patient_id: &str) -> Option<&Trajectory>;
}

impl TrajectorySource for Cohort {
    fn trajectory(&self, patient_id: &str) -> Option<&Trajectory> {
        self.position(patient_id).map(|i| &self.trajectories[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_parsing_trims() {
        assert_eq!("AD ".parse::<Stage>().unwrap(), Stage::Ad);
        assert_eq!(" MCI".parse::<Stage>().unwrap(), Stage::Mci);
        assert!("ad".parse::<Stage>().is_err());
        assert!(Stage::Cn < Stage::Mci && Stage::Mci < Stage::Ad);
    }

    #[test]
    fn lookup_by_grid_index() {
        let t = Trajectory {
            patient_id: "p".into(),
            visits: vec![
                Visit {
                    index: 0,
                    label: Some(Stage::Cn),
                    features: None,
                },
                Visit {
                    index: 3,
                    label: Some(Stage::Mci),
                    features: None,
                },
            ],
        };
        assert_eq!(t.label_at(3), Some(Stage::Mci));
        assert!(t.visit_at(1).is_none());
        assert_eq!(t.span(), Some((0, 3)));
    }
}
