//! Method comparison tables: one row per `(domain, method)`, one column per
//! language pair plus a macro-averaged `Avg`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::report::{ConfigId, MetricReport};
use super::sweep::Metric;
use super::{macro_average, MetricError};
use crate::data::{Domain, LangPair};

/// One run's metrics under a method label.
#[derive(Clone, Debug)]
pub struct LabeledReport {
    pub method: String,
    /// Where the run came from, used in conflict messages.
    pub source: String,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub domain: Domain,
    pub method: String,
    pub cells: Vec<Option<f64>>,
    pub avg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub metric: Metric,
    pub lang_pairs: Vec<LangPair>,
    pub rows: Vec<ComparisonRow>,
}

fn method_name(base: &str, config: ConfigId) -> String {
    if config == ConfigId::default() {
        base.to_string()
    } else {
        format!("{base} {config}")
    }
}

impl ComparisonTable {
    /// Merges runs. Two runs yielding the same `(domain, lang_pair, method)`
    /// is an error naming both sources.
    pub fn build(runs: &[LabeledReport], metric: Metric) -> Result<Self, MetricError> {
        if runs.iter().all(|r| r.report.is_empty()) {
            return Err(MetricError::EmptyReport);
        }
        let mut seen: BTreeMap<(Domain, String, LangPair), (&str, f64)> = BTreeMap::new();
        let mut methods: Vec<String> = Vec::new();
        for run in runs {
            for ((domain, lp, config), e) in &run.report.entries {
                let method = method_name(&run.method, *config);
                let value = match metric {
                    Metric::Spearman => e.spearman,
                    Metric::Pearson => e.pearson,
                };
                if let Some((first, _)) = seen.get(&(*domain, method.clone(), *lp)) {
                    return Err(MetricError::Conflict(format!("{domain}/{lp}/{method} appears in both {first} and {}", run.source)));
                }
                if !methods.contains(&method) {
                    methods.push(method.clone());
                }
                seen.insert((*domain, method, *lp), (&run.source, value));
            }
        }
        let lang_pairs = LangPair::ALL.to_vec();
        let mut rows = Vec::new();
        for domain in Domain::ALL {
            for method in &methods {
                let cells: Vec<Option<f64>> = lang_pairs.iter().map(|lp| seen.get(&(domain, method.clone(), *lp)).map(|v| v.1)).collect();
                if cells.iter().all(Option::is_none) {
                    continue;
                }
                let present: Vec<f64> = cells.iter().flatten().copied().collect();
                rows.push(ComparisonRow { domain, method: method.clone(), avg: macro_average(&present).ok(), cells });
            }
        }
        Ok(Self { metric, lang_pairs, rows })
    }

    /// Per-domain column maxima, `Avg` last.
    pub fn best(&self, domain: Domain) -> Vec<Option<f64>> {
        let rows: Vec<&ComparisonRow> = self.rows.iter().filter(|r| r.domain == domain).collect();
        (0..=self.lang_pairs.len())
            .map(|c| {
                rows.iter()
                    .filter_map(|r| if c < r.cells.len() { r.cells[c] } else { r.avg })
                    .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("domain,method");
        for lp in &self.lang_pairs {
            let _ = write!(out, ",{lp}");
        }
        out.push_str(",avg\n");
        for r in &self.rows {
            let method = if r.method.contains([',', '"']) { format!("\"{}\"", r.method.replace('"', "\"\"")) } else { r.method.clone() };
            let _ = write!(out, "{},{method}", r.domain);
            for c in r.cells.iter().chain(std::iter::once(&r.avg)) {
                match c {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push_str(",NA"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Aligned text; per-domain column maxima carry a trailing `*`.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        let _ = write!(out, "{:<12} {:<width$}", "Domain", "Method");
        for lp in &self.lang_pairs {
            let _ = write!(out, "{:>9}", lp.to_string());
        }
        out.push_str(&format!("{:>9}\n", "Avg"));
        for domain in Domain::ALL {
            let best = self.best(domain);
            for r in self.rows.iter().filter(|r| r.domain == domain) {
                let _ = write!(out, "{:<12} {:<width$}", domain.to_string(), r.method);
                for (c, b) in r.cells.iter().chain(std::iter::once(&r.avg)).zip(&best) {
                    let text = match c {
                        None => "NA".to_string(),
                        Some(v) if Some(*v) == *b => format!("{v:.3}*"),
                        Some(v) => format!("{v:.3} "),
                    };
                    let _ = write!(out, "{text:>9}");
                }
                out.push('\n');
            }
        }
        out
    }
}
