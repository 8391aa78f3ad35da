//! QE record schema, validation, aggregation and grouping.

mod io;
mod manifest;
mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{load_dataset, load_records, write_dataset, write_records, DataFormat, IngestIssue, IngestMode, IngestReport, LoadedDataset};
pub use manifest::{make_manifest_dataset, CountMismatch, Manifest, SplitCounts};
pub use synth::{make_synthetic_dataset, PlantedSignal, MARKER};

pub const MIN_ANNOTATORS: usize = 3;
pub const DA_MIN: f64 = 0.0;
pub const DA_MAX: f64 = 100.0;
/// Allowed gap between a stored DA score and the annotator mean.
pub const DA_MEAN_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("need at least {MIN_ANNOTATORS} annotator scores, got {0}")]
    TooFewAnnotators(usize),
    #[error("score {0} outside [0, 100]")]
    ScoreOutOfRange(f64),
    #[error("unknown language pair {0:?}")]
    UnknownLangPair(String),
    #[error("unknown domain {0:?}")]
    UnknownDomain(String),
    #[error("invalid record {id:?}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{count} malformed line(s) in strict mode; first: {first}")]
    Malformed { count: usize, first: String },
    #[error("id {0:?} appears in both train and test")]
    SplitOverlap(String),
    #[error("need n >= 2 records, got {0}")]
    TooFewRecords(usize),
    #[error("cannot write field containing a tab or newline in record {0:?}")]
    UnwritableField(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LangPair {
    #[serde(rename = "en-hi")]
    EnHi,
    #[serde(rename = "en-mr")]
    EnMr,
    #[serde(rename = "en-ta")]
    EnTa,
    #[serde(rename = "en-te")]
    EnTe,
    #[serde(rename = "en-gu")]
    EnGu,
}

impl LangPair {
    pub const ALL: [LangPair; 5] = [LangPair::EnHi, LangPair::EnMr, LangPair::EnTa, LangPair::EnTe, LangPair::EnGu];

    pub fn as_str(self) -> &'static str {
        match self {
            LangPair::EnHi => "en-hi",
            LangPair::EnMr => "en-mr",
            LangPair::EnTa => "en-ta",
            LangPair::EnTe => "en-te",
            LangPair::EnGu => "en-gu",
        }
    }
}

impl fmt::Display for LangPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LangPair {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LangPair::ALL.into_iter().find(|lp| lp.as_str() == s.trim()).ok_or_else(|| DataError::UnknownLangPair(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Healthcare,
    Legal,
    Tourism,
    General,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::Healthcare, Domain::Legal, Domain::Tourism, Domain::General];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Healthcare => "healthcare",
            Domain::Legal => "legal",
            Domain::Tourism => "tourism",
            Domain::General => "general",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Domain::ALL.into_iter().find(|d| d.as_str() == s.trim().to_ascii_lowercase()).ok_or_else(|| DataError::UnknownDomain(s.to_string()))
    }
}

/// Which language pairs each domain covers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainCatalog {
    pub allowed: BTreeMap<Domain, Vec<LangPair>>,
}

impl Default for DomainCatalog {
    fn default() -> Self {
        use LangPair::*;
        let allowed = BTreeMap::from([
            (Domain::Healthcare, vec![EnHi, EnMr, EnTa, EnGu]),
            (Domain::Legal, vec![EnGu, EnTa, EnTe]),
            (Domain::Tourism, vec![EnHi, EnMr, EnTe]),
            (Domain::General, vec![EnHi, EnMr, EnTa, EnTe, EnGu]),
        ]);
        Self { allowed }
    }
}

impl DomainCatalog {
    pub fn contains(&self, domain: Domain, lang_pair: LangPair) -> bool {
        self.allowed.get(&domain).is_some_and(|v| v.contains(&lang_pair))
    }

    pub fn pairs(&self, domain: Domain) -> &[LangPair] {
        self.allowed.get(&domain).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QeRecord {
    pub id: String,
    pub source: String,
    pub translation: String,
    pub lang_pair: LangPair,
    pub domain: Domain,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub annotator_scores: Vec<f64>,
    pub da_score: f64,
}

impl QeRecord {
    /// Checks every field invariant. Catalog membership is checked
    /// separately since it is a warning, not a defect of the record.
    pub fn validate(&self) -> Result<(), DataError> {
        let invalid = |reason: String| DataError::InvalidRecord { id: self.id.clone(), reason };
        if self.id.trim().is_empty() {
            return Err(invalid("empty id".into()));
        }
        if self.source.trim().is_empty() {
            return Err(invalid("empty source".into()));
        }
        if self.translation.trim().is_empty() {
            return Err(invalid("empty translation".into()));
        }
        check_score(self.da_score).map_err(|e| invalid(format!("da_score: {e}")))?;
        if !self.annotator_scores.is_empty() {
            let mean = average_annotators(&self.annotator_scores).map_err(|e| invalid(format!("annotator_scores: {e}")))?;
            if (mean - self.da_score).abs() > DA_MEAN_TOLERANCE {
                return Err(invalid(format!("da_score {} differs from annotator mean {mean}", self.da_score)));
            }
        }
        Ok(())
    }
}

fn check_score(s: f64) -> Result<(), DataError> {
    if s.is_finite() && (DA_MIN..=DA_MAX).contains(&s) {
        Ok(())
    } else {
        Err(DataError::ScoreOutOfRange(s))
    }
}

/// Arithmetic mean of at least three in-range annotator scores.
pub fn average_annotators(scores: &[f64]) -> Result<f64, DataError> {
    if scores.len() < MIN_ANNOTATORS {
        return Err(DataError::TooFewAnnotators(scores.len()));
    }
    for &s in scores {
        check_score(s)?;
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<QeRecord>,
    pub test: Vec<QeRecord>,
}

impl DatasetSplit {
    pub fn check_disjoint(&self) -> Result<(), DataError> {
        let train: HashSet<&str> = self.train.iter().map(|r| r.id.as_str()).collect();
        match self.test.iter().find(|r| train.contains(r.id.as_str())) {
            Some(r) => Err(DataError::SplitOverlap(r.id.clone())),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Partitions records by `(domain, lang_pair)`, keeping input order within
/// each group.
pub fn group_by(records: &[QeRecord]) -> BTreeMap<(Domain, LangPair), Vec<&QeRecord>> {
    let mut groups: BTreeMap<(Domain, LangPair), Vec<&QeRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.domain, r.lang_pair)).or_default().push(r);
    }
    groups
}

#[cfg(test)]
mod tests;
