//! Expected per-domain split sizes, aggregated over language pairs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::{catalog_cells, gen_record};
use super::{DataError, DatasetSplit, Domain, PlantedSignal};
use crate::rng::derive;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub domains: BTreeMap<Domain, SplitCounts>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountMismatch {
    pub domain: Domain,
    pub split: &'static str,
    pub expected: usize,
    pub actual: usize,
}

impl fmt::Display for CountMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: expected {}, found {}", self.domain, self.split, self.expected, self.actual)
    }
}

impl Manifest {
    /// Released Indic-Domain-QE split sizes.
    pub fn indic_domain_qe() -> Self {
        let counts = [
            (Domain::Healthcare, 13_280, 1_660),
            (Domain::Legal, 6_160, 770),
            (Domain::Tourism, 13_840, 1_730),
            (Domain::General, 18_880, 2_360),
        ];
        Self { domains: counts.into_iter().map(|(d, train, test)| (d, SplitCounts { train, test })).collect() }
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn expected(&self, domain: Domain) -> Option<SplitCounts> {
        self.domains.get(&domain).copied()
    }

    /// Every domain's train and test counts must match exactly; records from
    /// a domain absent from the manifest count as a mismatch against 0.
    pub fn validate(&self, split: &DatasetSplit) -> Result<(), Vec<CountMismatch>> {
        let mut mismatches = Vec::new();
        for domain in Domain::ALL {
            let expected = self.expected(domain).unwrap_or(SplitCounts { train: 0, test: 0 });
            for (name, records, want) in [("train", &split.train, expected.train), ("test", &split.test, expected.test)] {
                let actual = records.iter().filter(|r| r.domain == domain).count();
                if actual != want {
                    mismatches.push(CountMismatch { domain, split: name, expected: want, actual });
                }
            }
        }
        if mismatches.is_empty() {
            Ok(())
        } else {
            Err(mismatches)
        }
    }
}

/// Synthetic records matching `manifest` exactly, spread round-robin over
/// each domain's catalog language pairs.
pub fn make_manifest_dataset(manifest: &Manifest, seed: u64, signal: &PlantedSignal) -> Result<DatasetSplit, DataError> {
    let mut rng = derive(seed, "manifest");
    let cells = catalog_cells();
    let mut split = DatasetSplit::default();
    for (&domain, counts) in &manifest.domains {
        let pairs: Vec<_> = cells.iter().filter(|(d, _)| *d == domain).map(|&(_, lp)| lp).collect();
        if pairs.is_empty() {
            return Err(DataError::Manifest(format!("domain {domain} has no catalog language pairs")));
        }
        for (name, n, out) in [("train", counts.train, &mut split.train), ("test", counts.test, &mut split.test)] {
            for i in 0..n {
                let id = format!("{domain}-{name}-{i:06}");
                out.push(gen_record(&mut rng, id, domain, pairs[i % pairs.len()], signal));
            }
        }
    }
    Ok(split)
}
