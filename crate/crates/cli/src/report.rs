use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use qelab::metrics::{ComparisonTable, LabeledReport, Metric, MetricReport};

use crate::config::ExperimentConfig;
use crate::run::{RunDir, RunInfo, UsageError};

fn read_run(dir: &Path) -> anyhow::Result<LabeledReport> {
    let metrics = dir.join("metrics.csv");
    let report = MetricReport::read_csv(File::open(&metrics).with_context(|| format!("opening {}", metrics.display()))?)?;
    let info_path = dir.join("run.json");
    let method = match std::fs::read_to_string(&info_path) {
        Ok(text) => serde_json::from_str::<RunInfo>(&text).with_context(|| format!("parsing {}", info_path.display()))?.method,
        Err(_) => dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
    };
    Ok(LabeledReport { method, source: dir.display().to_string(), report })
}

/// Merges run directories into one comparison table. Unreadable runs are
/// skipped with a warning; having none left is an error.
pub fn cmd_report(cfg: &ExperimentConfig, runs: &[PathBuf]) -> anyhow::Result<PathBuf> {
    let mut labeled = Vec::new();
    for dir in runs {
        match read_run(dir) {
            Ok(r) => labeled.push(r),
            Err(e) => eprintln!("warning: skipping {}: {e:#}", dir.display()),
        }
    }
    if labeled.is_empty() {
        return Err(UsageError("no readable runs".into()).into());
    }
    let spearman = ComparisonTable::build(&labeled, Metric::Spearman).map_err(|e| UsageError(e.to_string()))?;
    let pearson = ComparisonTable::build(&labeled, Metric::Pearson).map_err(|e| UsageError(e.to_string()))?;
    let run = RunDir::create("report", cfg)?;
    let sources: Vec<&str> = labeled.iter().map(|l| l.source.as_str()).collect();
    run.write_json("inputs.json", &sources)?;
    run.write("report.csv", spearman.to_csv())?;
    run.write("report.txt", spearman.to_text())?;
    run.write("report_pearson.csv", pearson.to_csv())?;
    run.write("report_pearson.txt", pearson.to_text())?;
    run.finish("report", "report")?;
    print!("{}", spearman.to_text());
    println!("{}", run.path.display());
    Ok(run.path)
}
