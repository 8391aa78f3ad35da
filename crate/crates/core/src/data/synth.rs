//! Planted-signal synthetic QE data.
//!
//! Each translation is four 4-character groups over `{a, e, i, o, #}`. The
//! DA score is an affine function of the number of `#` characters plus
//! Gaussian noise, so the signal is a token count visible to any model that
//! pools over positions.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{average_annotators, DataError, DatasetSplit, Domain, DomainCatalog, LangPair, QeRecord, DA_MAX, DA_MIN};
use crate::rng::{derive, Rng};

pub const MARKER: char = '#';
const SOURCE_WORDS: [&str; 8] = ["the", "map", "sun", "dog", "red", "old", "box", "cup"];
const FILLER: [char; 4] = ['a', 'e', 'i', 'o'];
const GROUPS: usize = 4;
const GROUP_LEN: usize = 4;
const SOURCE_LEN: usize = 4;
/// Largest spread of the three synthetic annotators around the DA score.
const ANNOTATOR_SPREAD: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedSignal {
    pub intercept: f64,
    /// DA change per marker character.
    pub slope: f64,
    pub noise_std: f64,
}

impl Default for PlantedSignal {
    fn default() -> Self {
        Self { intercept: 90.0, slope: -4.5, noise_std: 2.0 }
    }
}

impl PlantedSignal {
    pub const MAX_MARKERS: usize = GROUPS * GROUP_LEN;

    pub fn feature(translation: &str) -> usize {
        translation.chars().filter(|&c| c == MARKER).count()
    }

    /// Noise-free score for a marker count.
    pub fn clean_score(&self, markers: usize) -> f64 {
        (self.intercept + self.slope * markers as f64).clamp(DA_MIN, DA_MAX)
    }

    fn validate(&self) -> Result<(), DataError> {
        if !(self.intercept.is_finite() && self.slope.is_finite() && self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(DataError::InvalidRecord { id: String::new(), reason: format!("invalid planted signal {self:?}") });
        }
        Ok(())
    }
}

pub(super) fn gen_record(rng: &mut Rng, id: String, domain: Domain, lang_pair: LangPair, signal: &PlantedSignal) -> QeRecord {
    let source = (0..SOURCE_LEN).map(|_| *SOURCE_WORDS.choose(rng).expect("nonempty")).collect::<Vec<_>>().join(" ");
    let markers = rng.random_range(0..=PlantedSignal::MAX_MARKERS);
    let mut is_marker = vec![false; PlantedSignal::MAX_MARKERS];
    for slot in rand::seq::index::sample(rng, PlantedSignal::MAX_MARKERS, markers) {
        is_marker[slot] = true;
    }
    let chars: Vec<char> = is_marker.iter().map(|&m| if m { MARKER } else { *FILLER.choose(rng).expect("nonempty") }).collect();
    let translation = chars.chunks(GROUP_LEN).map(|g| g.iter().collect::<String>()).collect::<Vec<_>>().join(" ");

    let noise = if signal.noise_std > 0.0 { Normal::new(0.0, signal.noise_std).expect("validated").sample(rng) } else { 0.0 };
    let da = (signal.intercept + signal.slope * markers as f64 + noise).clamp(DA_MIN, DA_MAX);
    let spread = rng.random_range(0.0..ANNOTATOR_SPREAD).min(da - DA_MIN).min(DA_MAX - da);
    let annotator_scores = vec![da - spread, da, da + spread];
    let da_score = average_annotators(&annotator_scores).expect("scores are in range by construction");
    QeRecord { id, source, translation, lang_pair, domain, annotator_scores, da_score }
}

/// Every `(domain, lang_pair)` cell of the default catalog.
pub(super) fn catalog_cells() -> Vec<(Domain, LangPair)> {
    let catalog = DomainCatalog::default();
    Domain::ALL.iter().flat_map(|&d| catalog.pairs(d).iter().map(move |&lp| (d, lp))).collect()
}

/// `n` records over the catalog cells, split 90/10 (at least one test
/// record). Deterministic in `seed`.
pub fn make_synthetic_dataset(n: usize, seed: u64, signal: &PlantedSignal) -> Result<DatasetSplit, DataError> {
    if n < 2 {
        return Err(DataError::TooFewRecords(n));
    }
    signal.validate()?;
    let mut rng = derive(seed, "synthetic");
    let cells = catalog_cells();
    let records: Vec<QeRecord> = (0..n)
        .map(|i| {
            let (domain, lp) = *cells.choose(&mut rng).expect("catalog is nonempty");
            gen_record(&mut rng, format!("syn-{seed}-{i:05}"), domain, lp, signal)
        })
        .collect();
    let n_test = ((n as f64 * 0.1).round() as usize).max(1);
    let mut train = records;
    let test = train.split_off(n - n_test);
    Ok(DatasetSplit { train, test })
}
