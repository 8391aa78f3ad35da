//! JSONL (canonical) and TSV ingestion and writing.
//!
//! A dataset directory holds `train.<ext>` and `test.<ext>`.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DataError, DatasetSplit, DomainCatalog, QeRecord};

pub const TSV_COLUMNS: [&str; 7] = ["id", "source", "translation", "lang_pair", "domain", "annotator_scores", "da_score"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Jsonl,
    Tsv,
}

impl DataFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DataFormat::Jsonl => "jsonl",
            DataFormat::Tsv => "tsv",
        }
    }
}

impl FromStr for DataFormat {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(DataFormat::Jsonl),
            "tsv" => Ok(DataFormat::Tsv),
            other => Err(DataError::InvalidRecord { id: String::new(), reason: format!("unknown format {other:?}") }),
        }
    }
}

/// Strict fails on any malformed line; lenient skips it and reports it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IngestMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestIssue {
    pub file: String,
    /// 1-based.
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for IngestIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}: {}", self.file, self.line, self.message)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    /// Lines that were not loaded.
    pub errors: Vec<IngestIssue>,
    /// Loaded records outside the domain catalog.
    pub warnings: Vec<IngestIssue>,
}

impl IngestReport {
    fn merge(&mut self, other: IngestReport) {
        self.errors.extend(other.errors);
        self.warnings.extend(other.warnings);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedDataset {
    pub split: DatasetSplit,
    pub report: IngestReport,
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

/// Loads `train.<ext>` and `test.<ext>` from `dir`. Ids shared between the
/// splits are reported as errors against the test file.
pub fn load_dataset(dir: &Path, format: DataFormat, mode: IngestMode) -> Result<LoadedDataset, DataError> {
    let catalog = DomainCatalog::default();
    let train_path = dir.join(format!("train.{}", format.extension()));
    let test_path = dir.join(format!("test.{}", format.extension()));
    let ((train, mut report), _) = parse_file(&train_path, format, &catalog)?;
    let ((test, test_report), test_lines) = parse_file(&test_path, format, &catalog)?;
    report.merge(test_report);

    let train_ids: HashSet<&str> = train.iter().map(|r| r.id.as_str()).collect();
    let mut kept = Vec::with_capacity(test.len());
    for (r, line) in test.into_iter().zip(test_lines) {
        if train_ids.contains(r.id.as_str()) {
            report.errors.push(IngestIssue {
                file: test_path.display().to_string(),
                line,
                message: DataError::SplitOverlap(r.id.clone()).to_string(),
            });
        } else {
            kept.push(r);
        }
    }
    finish(mode, &report)?;
    Ok(LoadedDataset { split: DatasetSplit { train, test: kept }, report })
}

fn finish(mode: IngestMode, report: &IngestReport) -> Result<(), DataError> {
    match (mode, report.errors.first()) {
        (IngestMode::Strict, Some(first)) => Err(DataError::Malformed { count: report.errors.len(), first: first.to_string() }),
        _ => Ok(()),
    }
}

pub fn load_records(
    path: &Path,
    format: DataFormat,
    mode: IngestMode,
    catalog: &DomainCatalog,
) -> Result<(Vec<QeRecord>, IngestReport), DataError> {
    let ((records, report), _) = parse_file(path, format, catalog)?;
    finish(mode, &report)?;
    Ok((records, report))
}

type Parsed = ((Vec<QeRecord>, IngestReport), Vec<usize>);

fn parse_file(path: &Path, format: DataFormat, catalog: &DomainCatalog) -> Result<Parsed, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let name = path.display().to_string();
    let rows = match format {
        DataFormat::Jsonl => jsonl_rows(BufReader::new(file)).map_err(|e| io_err(path, e))?,
        DataFormat::Tsv => tsv_rows(BufReader::new(file), &name)?,
    };
    let mut records = Vec::new();
    let mut lines = Vec::new();
    let mut report = IngestReport::default();
    let mut seen = HashSet::new();
    for (line, parsed) in rows {
        let issue = |message: String| IngestIssue { file: name.clone(), line, message };
        let record = match parsed.and_then(|r| r.validate().map(|_| r).map_err(|e| e.to_string())) {
            Ok(r) => r,
            Err(message) => {
                report.errors.push(issue(message));
                continue;
            }
        };
        if !seen.insert(record.id.clone()) {
            report.errors.push(issue(format!("duplicate id {:?}", record.id)));
            continue;
        }
        if !catalog.contains(record.domain, record.lang_pair) {
            report.warnings.push(issue(format!("({}, {}) is outside the domain catalog", record.domain, record.lang_pair)));
        }
        records.push(record);
        lines.push(line);
    }
    Ok(((records, report), lines))
}

type Row = (usize, Result<QeRecord, String>);

fn jsonl_rows(reader: impl BufRead) -> std::io::Result<Vec<Row>> {
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push((i + 1, serde_json::from_str::<QeRecord>(&line).map_err(|e| e.to_string())));
    }
    Ok(rows)
}

fn tsv_rows(reader: impl std::io::Read, name: &str) -> Result<Vec<Row>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(b'\t').quoting(false).flexible(true).has_headers(true).from_reader(reader);
    let header_ok = rdr.headers().map(|h| h.iter().eq(TSV_COLUMNS)).unwrap_or(false);
    if !header_ok {
        return Ok(vec![(1, Err(format!("{name}: header must be {}", TSV_COLUMNS.join("\\t"))))]);
    }
    let mut rows = Vec::new();
    for result in rdr.records() {
        match result {
            Ok(rec) => {
                let line = rec.position().map_or(0, |p| p.line() as usize);
                rows.push((line, tsv_record(&rec)));
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line() as usize);
                rows.push((line, Err(e.to_string())));
            }
        }
    }
    Ok(rows)
}

fn tsv_record(rec: &csv::StringRecord) -> Result<QeRecord, String> {
    if rec.len() != TSV_COLUMNS.len() {
        return Err(format!("expected {} columns, got {}", TSV_COLUMNS.len(), rec.len()));
    }
    let num = |s: &str, what: &str| s.trim().parse::<f64>().map_err(|_| format!("{what}: not a number: {s:?}"));
    let annotator_scores = if rec[5].trim().is_empty() {
        Vec::new()
    } else {
        rec[5].split(';').map(|s| num(s, "annotator_scores")).collect::<Result<_, _>>()?
    };
    Ok(QeRecord {
        id: rec[0].to_string(),
        source: rec[1].to_string(),
        translation: rec[2].to_string(),
        lang_pair: rec[3].parse().map_err(|e: DataError| e.to_string())?,
        domain: rec[4].parse().map_err(|e: DataError| e.to_string())?,
        annotator_scores,
        da_score: num(&rec[6], "da_score")?,
    })
}

pub fn write_records(path: &Path, records: &[QeRecord], format: DataFormat) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let result = match format {
        DataFormat::Jsonl => write_jsonl(&mut w, records),
        DataFormat::Tsv => write_tsv(&mut w, records),
    };
    result?;
    w.flush().map_err(|e| io_err(path, e))
}

fn write_jsonl(w: &mut impl Write, records: &[QeRecord]) -> Result<(), DataError> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n").map_err(|e| io_err(Path::new("<jsonl>"), e))?;
    }
    Ok(())
}

fn write_tsv(w: &mut impl Write, records: &[QeRecord]) -> Result<(), DataError> {
    let mut out = csv::WriterBuilder::new().delimiter(b'\t').quote_style(csv::QuoteStyle::Never).from_writer(w);
    let werr = |e: csv::Error| DataError::InvalidRecord { id: String::new(), reason: e.to_string() };
    out.write_record(TSV_COLUMNS).map_err(werr)?;
    for r in records {
        if [&r.id, &r.source, &r.translation].iter().any(|f| f.contains(['\t', '\n', '\r'])) {
            return Err(DataError::UnwritableField(r.id.clone()));
        }
        let scores = r.annotator_scores.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";");
        let da = r.da_score.to_string();
        out.write_record([
            r.id.as_str(),
            r.source.as_str(),
            r.translation.as_str(),
            r.lang_pair.as_str(),
            r.domain.as_str(),
            scores.as_str(),
            da.as_str(),
        ])
        .map_err(werr)?;
    }
    out.flush().map_err(|e| io_err(Path::new("<tsv>"), e))
}

/// Writes `train.<ext>` and `test.<ext>` into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, split: &DatasetSplit, format: DataFormat) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_records(&dir.join(format!("train.{}", format.extension())), &split.train, format)?;
    write_records(&dir.join(format!("test.{}", format.extension())), &split.test, format)
}
