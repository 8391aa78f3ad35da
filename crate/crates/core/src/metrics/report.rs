use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{macro_average, pearson, spearman, MetricError};
use crate::data::{Domain, LangPair};

pub const REPORT_COLUMNS: [&str; 8] = ["domain", "lang_pair", "rank", "alpha", "layer", "spearman", "pearson", "n"];

/// Adapter α with a total order, so it can key a map.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Alpha(pub f64);

impl PartialEq for Alpha {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Alpha {}

impl PartialOrd for Alpha {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Alpha {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Which configuration produced a set of predictions. Prompt-only runs have
/// no rank, α or layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConfigId {
    pub rank: Option<usize>,
    pub alpha: Option<Alpha>,
    pub layer: Option<i64>,
}

impl std::hash::Hash for Alpha {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state);
    }
}

impl ConfigId {
    pub fn adapter(rank: usize, alpha: f64, layer: i64) -> Self {
        Self { rank: Some(rank), alpha: Some(Alpha(alpha)), layer: Some(layer) }
    }
}

impl fmt::Display for ConfigId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.rank, self.alpha, self.layer) {
            (None, None, None) => f.write_str("-"),
            _ => write!(f, "R={} a={} L={}", opt(self.rank), opt(self.alpha.map(|a| a.0)), opt(self.layer)),
        }
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "NA".into(), |v| v.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub spearman: f64,
    pub pearson: f64,
    pub n: usize,
}

type Key = (Domain, LangPair, ConfigId);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub entries: BTreeMap<Key, CorrelationEntry>,
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn add(&mut self, domain: Domain, lang_pair: LangPair, config: ConfigId, pred: &[f64], gold: &[f64]) -> Result<(), MetricError> {
        let entry = CorrelationEntry { spearman: spearman(pred, gold)?, pearson: pearson(pred, gold)?, n: pred.len() };
        self.entries.insert((domain, lang_pair, config), entry);
        Ok(())
    }

    /// Groups `(domain, lang_pair, pred, gold)` rows and scores each group.
    /// Groups whose correlation is undefined are returned instead of stored.
    pub fn from_predictions(
        config: ConfigId,
        rows: impl IntoIterator<Item = (Domain, LangPair, f64, f64)>,
    ) -> (Self, Vec<(Domain, LangPair, MetricError)>) {
        let mut groups: BTreeMap<(Domain, LangPair), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (d, lp, p, g) in rows {
            let e = groups.entry((d, lp)).or_default();
            e.0.push(p);
            e.1.push(g);
        }
        let mut report = Self::new();
        let mut skipped = Vec::new();
        for ((d, lp), (p, g)) in groups {
            if let Err(e) = report.add(d, lp, config, &p, &g) {
                skipped.push((d, lp, e));
            }
        }
        (report, skipped)
    }

    pub fn get(&self, domain: Domain, lang_pair: LangPair, config: ConfigId) -> Option<&CorrelationEntry> {
        self.entries.get(&(domain, lang_pair, config))
    }

    pub fn configs(&self) -> BTreeSet<ConfigId> {
        self.entries.keys().map(|k| k.2).collect()
    }

    pub fn domains(&self) -> BTreeSet<Domain> {
        self.entries.keys().map(|k| k.0).collect()
    }

    /// Macro-averaged `(spearman, pearson)` over the language pairs present
    /// for `(domain, config)`.
    pub fn domain_average(&self, domain: Domain, config: ConfigId) -> Option<(f64, f64)> {
        let (rho, r): (Vec<f64>, Vec<f64>) =
            self.entries.iter().filter(|((d, _, c), _)| *d == domain && *c == config).map(|(_, e)| (e.spearman, e.pearson)).unzip();
        Some((macro_average(&rho).ok()?, macro_average(&r).ok()?))
    }

    pub fn domain_averages(&self) -> BTreeMap<(Domain, ConfigId), (f64, f64)> {
        let keys: BTreeSet<(Domain, ConfigId)> = self.entries.keys().map(|k| (k.0, k.2)).collect();
        keys.into_iter().filter_map(|(d, c)| self.domain_average(d, c).map(|v| ((d, c), v))).collect()
    }

    /// Adds `other`'s entries; a key present in both is an error.
    pub fn merge(&mut self, other: &MetricReport) -> Result<(), (Domain, LangPair, ConfigId)> {
        if let Some(k) = other.entries.keys().find(|k| self.entries.contains_key(k)) {
            return Err(*k);
        }
        self.entries.extend(other.entries.iter().map(|(k, v)| (*k, *v)));
        Ok(())
    }

    /// Long-format CSV; floats use shortest round-trip formatting.
    pub fn write_csv(&self, w: impl Write) -> Result<(), MetricError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(REPORT_COLUMNS)?;
        for ((d, lp, c), e) in &self.entries {
            out.write_record([
                d.to_string(),
                lp.to_string(),
                c.rank.map(|v| v.to_string()).unwrap_or_default(),
                c.alpha.map(|v| v.0.to_string()).unwrap_or_default(),
                c.layer.map(|v| v.to_string()).unwrap_or_default(),
                e.spearman.to_string(),
                e.pearson.to_string(),
                e.n.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is UTF-8")
    }

    pub fn read_csv(r: impl Read) -> Result<Self, MetricError> {
        let mut rdr = csv::Reader::from_reader(r);
        if !rdr.headers()?.iter().eq(REPORT_COLUMNS) {
            return Err(MetricError::Parse { line: 1, message: format!("header must be {}", REPORT_COLUMNS.join(",")) });
        }
        let mut report = Self::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let err = |message: String| MetricError::Parse { line, message };
            let field = |i: usize| -> Result<Option<&str>, MetricError> {
                let s = rec.get(i).ok_or_else(|| err(format!("missing column {}", REPORT_COLUMNS[i])))?;
                Ok(if s.is_empty() { None } else { Some(s) })
            };
            let num = |i: usize| -> Result<f64, MetricError> {
                field(i)?.ok_or_else(|| err(format!("empty {}", REPORT_COLUMNS[i])))?.parse().map_err(|e| err(format!("{e}")))
            };
            let domain: Domain = field(0)?.unwrap_or_default().parse().map_err(|e| err(format!("{e}")))?;
            let lang_pair: LangPair = field(1)?.unwrap_or_default().parse().map_err(|e| err(format!("{e}")))?;
            let config = ConfigId {
                rank: field(2)?.map(str::parse).transpose().map_err(|e| err(format!("{e}")))?,
                alpha: field(3)?.map(str::parse).transpose().map_err(|e| err(format!("{e}")))?.map(Alpha),
                layer: field(4)?.map(str::parse).transpose().map_err(|e| err(format!("{e}")))?,
            };
            let n = field(7)?.unwrap_or_default().parse().map_err(|e| err(format!("n: {e}")))?;
            let entry = CorrelationEntry { spearman: num(5)?, pearson: num(6)?, n };
            if report.entries.insert((domain, lang_pair, config), entry).is_some() {
                return Err(err(format!("duplicate entry {domain}/{lang_pair}/{config}")));
            }
        }
        Ok(report)
    }
}
