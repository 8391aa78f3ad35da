//! Layer × rank sweep tables: one section per `(R, α)`, one row per layer,
//! one column per language pair plus a macro-averaged `Avg`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::report::{ConfigId, MetricReport};
use super::{macro_average, MetricError};
use crate::adapters::DEFAULT_RANK_GRID;
use crate::data::{Domain, LangPair};

pub const DEFAULT_LAYERS: [i64; 4] = [-1, -7, -9, -11];
const NA: &str = "NA";
/// Allowed drift between a printed `Avg` and its recomputation.
const AVG_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Spearman,
    Pearson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepLayout {
    pub domains: Vec<Domain>,
    pub lang_pairs: Vec<LangPair>,
    pub configs: Vec<(usize, f64)>,
    pub layers: Vec<i64>,
    pub metric: Metric,
}

impl Default for SweepLayout {
    fn default() -> Self {
        Self {
            domains: Domain::ALL.to_vec(),
            lang_pairs: LangPair::ALL.to_vec(),
            configs: DEFAULT_RANK_GRID.to_vec(),
            layers: DEFAULT_LAYERS.to_vec(),
            metric: Metric::Spearman,
        }
    }
}

pub type SweepCell = Option<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub domain: Domain,
    pub rank: usize,
    pub alpha: f64,
    pub layer: i64,
    /// Aligned with [`SweepTable::lang_pairs`]; `None` renders as `NA`.
    pub cells: Vec<SweepCell>,
    pub avg: SweepCell,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub metric: Metric,
    pub lang_pairs: Vec<LangPair>,
    pub rows: Vec<SweepRow>,
}

fn avg_of(cells: &[SweepCell]) -> SweepCell {
    let present: Vec<f64> = cells.iter().flatten().copied().collect();
    macro_average(&present).ok()
}

pub fn emit_sweep_table(report: &MetricReport, layout: &SweepLayout) -> Result<SweepTable, MetricError> {
    if report.is_empty() {
        return Err(MetricError::EmptyReport);
    }
    let present = report.domains();
    let mut rows = Vec::new();
    for &domain in layout.domains.iter().filter(|d| present.contains(d)) {
        for &(rank, alpha) in &layout.configs {
            for &layer in &layout.layers {
                let config = ConfigId::adapter(rank, alpha, layer);
                let cells: Vec<SweepCell> = layout
                    .lang_pairs
                    .iter()
                    .map(|&lp| {
                        report.get(domain, lp, config).map(|e| match layout.metric {
                            Metric::Spearman => e.spearman,
                            Metric::Pearson => e.pearson,
                        })
                    })
                    .collect();
                let avg = avg_of(&cells);
                rows.push(SweepRow { domain, rank, alpha, layer, cells, avg });
            }
        }
    }
    let table = SweepTable { metric: layout.metric, lang_pairs: layout.lang_pairs.clone(), rows };
    table.verify(report)?;
    Ok(table)
}

fn fmt_cell(c: SweepCell) -> String {
    c.map_or_else(|| NA.to_string(), |v| v.to_string())
}

fn parse_cell(s: &str) -> Result<SweepCell, String> {
    if s == NA {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|e| format!("{s:?}: {e}"))
    }
}

impl SweepTable {
    /// Per-domain maximum of each column, `Avg` last.
    pub fn best(&self, domain: Domain) -> Vec<SweepCell> {
        let rows: Vec<&SweepRow> = self.rows.iter().filter(|r| r.domain == domain).collect();
        (0..=self.lang_pairs.len())
            .map(|c| {
                rows.iter()
                    .filter_map(|r| if c < r.cells.len() { r.cells[c] } else { r.avg })
                    .fold(None, |m: SweepCell, v| Some(m.map_or(v, |m| m.max(v))))
            })
            .collect()
    }

    /// Checks every cell against `report` bitwise and every `Avg` against an
    /// independent recomputation.
    pub fn verify(&self, report: &MetricReport) -> Result<(), MetricError> {
        for row in &self.rows {
            let config = ConfigId::adapter(row.rank, row.alpha, row.layer);
            let mut sum = 0.0;
            let mut count = 0usize;
            for (lp, cell) in self.lang_pairs.iter().zip(&row.cells) {
                let expected = report.get(row.domain, *lp, config).map(|e| match self.metric {
                    Metric::Spearman => e.spearman,
                    Metric::Pearson => e.pearson,
                });
                if expected.map(f64::to_bits) != cell.map(f64::to_bits) {
                    return Err(MetricError::Verification(format!("{} {lp} {config}: {cell:?} vs {expected:?}", row.domain)));
                }
                if let Some(v) = cell {
                    sum += v;
                    count += 1;
                }
            }
            let recomputed = (count > 0).then(|| sum / count as f64);
            let ok = match (row.avg, recomputed) {
                (Some(a), Some(b)) => (a - b).abs() <= AVG_TOLERANCE,
                (None, None) => true,
                _ => false,
            };
            if !ok {
                return Err(MetricError::Verification(format!("{} {config}: Avg {:?} vs {recomputed:?}", row.domain, row.avg)));
            }
        }
        Ok(())
    }

    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["domain", "rank", "alpha", "layer"].map(String::from).to_vec();
        h.extend(self.lang_pairs.iter().map(|lp| lp.to_string()));
        h.push("avg".into());
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = csv::Writer::from_writer(Vec::new());
        let mut write = || -> Result<(), csv::Error> {
            out.write_record(self.header())?;
            for r in &self.rows {
                let mut rec = vec![r.domain.to_string(), r.rank.to_string(), r.alpha.to_string(), r.layer.to_string()];
                rec.extend(r.cells.iter().map(|&c| fmt_cell(c)));
                rec.push(fmt_cell(r.avg));
                out.write_record(rec)?;
            }
            Ok(())
        };
        write().expect("writing to memory cannot fail");
        String::from_utf8(out.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
    }

    pub fn parse_csv(text: &str, metric: Metric) -> Result<Self, MetricError> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let headers = rdr.headers()?.clone();
        let bad = |line: usize, message: String| MetricError::Parse { line, message };
        let n = headers.len();
        if n < 5 || headers.iter().take(4).ne(["domain", "rank", "alpha", "layer"]) || &headers[n - 1] != "avg" {
            return Err(bad(1, "not a sweep table header".into()));
        }
        let lang_pairs = headers
            .iter()
            .skip(4)
            .take(n - 5)
            .map(|h| h.parse::<LangPair>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| bad(1, e.to_string()))?;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let e = |m: String| bad(line, m);
            let cells = (4..n - 1).map(|i| parse_cell(&rec[i])).collect::<Result<Vec<_>, _>>().map_err(e)?;
            rows.push(SweepRow {
                domain: rec[0].parse().map_err(|x: crate::data::DataError| e(x.to_string()))?,
                rank: rec[1].parse().map_err(|x| e(format!("rank: {x}")))?,
                alpha: rec[2].parse().map_err(|x| e(format!("alpha: {x}")))?,
                layer: rec[3].parse().map_err(|x| e(format!("layer: {x}")))?,
                cells,
                avg: parse_cell(&rec[n - 1]).map_err(e)?,
            });
        }
        Ok(Self { metric, lang_pairs, rows })
    }

    /// Human-readable layout: per domain, per `(R, α)` section, rows per
    /// layer. Per-domain column maxima carry a trailing `*`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let metric = match self.metric {
            Metric::Spearman => "spearman",
            Metric::Pearson => "pearson",
        };
        let mut domains: Vec<Domain> = self.rows.iter().map(|r| r.domain).collect();
        domains.dedup();
        for domain in domains {
            let best = self.best(domain);
            let _ = writeln!(out, "== {domain} ({metric}) ==");
            let mut section = None;
            for row in self.rows.iter().filter(|r| r.domain == domain) {
                if section != Some((row.rank, row.alpha.to_bits())) {
                    section = Some((row.rank, row.alpha.to_bits()));
                    let _ = writeln!(out, "R={} alpha={}", row.rank, row.alpha);
                    let _ = write!(out, "{:>6}", "Layer");
                    for lp in &self.lang_pairs {
                        let _ = write!(out, "{:>9}", lp.to_string());
                    }
                    let _ = writeln!(out, "{:>9}", "Avg");
                }
                let _ = write!(out, "{:>6}", row.layer);
                let cells = row.cells.iter().copied().chain(std::iter::once(row.avg));
                for (c, b) in cells.zip(&best) {
                    let text = match c {
                        None => NA.to_string(),
                        Some(v) if Some(v) == *b => format!("{v:.3}*"),
                        Some(v) => format!("{v:.3} "),
                    };
                    let _ = write!(out, "{text:>9}");
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}
