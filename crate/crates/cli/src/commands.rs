use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use qelab::adapters::AdapterConfig;
use qelab::data::{load_dataset, make_manifest_dataset, make_synthetic_dataset, write_dataset, DatasetSplit, Manifest, QeRecord};
use qelab::metrics::{emit_sweep_table, ConfigId, Metric, MetricReport, SweepLayout};
use qelab::qe_head::{load_checkpoint, save_checkpoint, train, write_loss_csv, write_predictions, Prediction, TrainConfig, TrainedQeModel};
use qelab::transformer::TransformerModel;

use crate::config::{DataConfig, ExperimentConfig};
use crate::run::{RunDir, UsageError};

pub fn load_data(cfg: &DataConfig) -> anyhow::Result<DatasetSplit> {
    let split = match &cfg.dir {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(UsageError(format!("dataset directory {} does not exist", dir.display())).into());
            }
            let loaded = load_dataset(dir, cfg.format.into(), cfg.mode)?;
            for issue in loaded.report.errors.iter().chain(&loaded.report.warnings) {
                eprintln!("warning: {issue}");
            }
            loaded.split
        }
        None => make_synthetic_dataset(cfg.synthetic.n, cfg.synthetic.seed, &cfg.synthetic.signal)?,
    };
    if let Some(path) = &cfg.manifest {
        let manifest = Manifest::load(path)?;
        if let Err(mismatches) = manifest.validate(&split) {
            let list: Vec<String> = mismatches.iter().map(ToString::to_string).collect();
            return Err(UsageError(format!("dataset does not match {}: {}", path.display(), list.join("; "))).into());
        }
    }
    Ok(split)
}

fn default_method(train: &TrainConfig) -> String {
    train.adapter.kind.to_string()
}

fn config_id(train: &TrainConfig) -> ConfigId {
    ConfigId::adapter(train.adapter.rank, train.adapter.alpha, train.layer_index)
}

/// Scores predictions per `(domain, lang_pair)`; cells whose correlation is
/// undefined are reported on stderr and left out.
pub fn score_predictions(config: ConfigId, records: &[QeRecord], preds: &[Prediction]) -> MetricReport {
    let rows = records.iter().zip(preds).map(|(r, p)| (r.domain, r.lang_pair, p.prediction, p.gold));
    let (report, skipped) = MetricReport::from_predictions(config, rows);
    for (d, lp, e) in skipped {
        eprintln!("warning: no correlation for {d}/{lp}: {e}");
    }
    report
}

fn print_report(report: &MetricReport) {
    for ((domain, lp, config), e) in &report.entries {
        println!("{domain:<12} {lp:<6} {config}  spearman={:.4} pearson={:.4} n={}", e.spearman, e.pearson, e.n);
    }
}

fn write_metrics(run: &RunDir, report: &MetricReport) -> anyhow::Result<()> {
    run.write("metrics.csv", report.to_csv_string())
}

fn evaluate_and_write(run: &RunDir, model: &TrainedQeModel, test: &[QeRecord], threads: usize) -> anyhow::Result<MetricReport> {
    let preds = model.evaluate_with(test, threads)?;
    write_predictions(&preds, &run.file("predictions.jsonl"))?;
    let report = score_predictions(config_id(&model.config), test, &preds);
    write_metrics(run, &report)?;
    Ok(report)
}

pub fn cmd_train(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let split = load_data(&cfg.data)?;
    let base = TransformerModel::new(&cfg.model)?;
    let run = RunDir::create("train", cfg)?;
    let trained = train(&base, &split.train, &cfg.train)?;
    save_checkpoint(&trained, &run.file("checkpoint.json"))?;
    write_loss_csv(&trained.loss_trace, &run.file("loss.csv"))?;
    let report = evaluate_and_write(&run, &trained, &split.test, cfg.eval_threads)?;
    run.finish("train", cfg.method.as_deref().unwrap_or(&default_method(&cfg.train)))?;
    if let Some(last) = trained.loss_trace.last() {
        println!("final mean MSE {last:.6} after {} epochs", trained.loss_trace.len());
    }
    print_report(&report);
    println!("{}", run.path.display());
    Ok(run.path)
}

pub fn cmd_evaluate(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let path = cfg.checkpoint.as_ref().ok_or_else(|| UsageError("evaluate needs --checkpoint".into()))?;
    if !path.is_file() {
        return Err(UsageError(format!("checkpoint {} does not exist", path.display())).into());
    }
    let model = load_checkpoint(path)?;
    let split = load_data(&cfg.data)?;
    let run = RunDir::create("evaluate", cfg)?;
    let report = evaluate_and_write(&run, &model, &split.test, cfg.eval_threads)?;
    run.finish("evaluate", cfg.method.as_deref().unwrap_or(&default_method(&model.config)))?;
    print_report(&report);
    println!("{}", run.path.display());
    Ok(run.path)
}

fn write_sweep_tables(run: &RunDir, report: &MetricReport, cfg: &ExperimentConfig) -> anyhow::Result<Option<String>> {
    if report.is_empty() {
        return Ok(None);
    }
    let mut text = None;
    for (metric, stem) in [(Metric::Spearman, "sweep"), (Metric::Pearson, "sweep_pearson")] {
        let layout = SweepLayout { configs: cfg.grid.pairs.clone(), layers: cfg.grid.layers.clone(), metric, ..SweepLayout::default() };
        let table = emit_sweep_table(report, &layout)?;
        run.write(&format!("{stem}.csv"), table.to_csv())?;
        run.write(&format!("{stem}.txt"), table.to_text())?;
        if metric == Metric::Spearman {
            text = Some(table.to_text());
        }
    }
    Ok(text)
}

/// Trains every grid cell in order. A failing cell stops the sweep after the
/// finished cells' tables are written.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    cfg.validate_grid()?;
    let split = load_data(&cfg.data)?;
    let base = TransformerModel::new(&cfg.model)?;
    let run = RunDir::create("sweep", cfg)?;
    fs::create_dir(run.file("losses"))?;
    let mut report = MetricReport::new();
    let mut failure = None;
    'grid: for &(rank, alpha) in &cfg.grid.pairs {
        for &layer in &cfg.grid.layers {
            let train_cfg = TrainConfig {
                layer_index: layer,
                adapter: AdapterConfig { rank, alpha, ..cfg.train.adapter.clone() },
                ..cfg.train.clone()
            };
            let id = config_id(&train_cfg);
            eprintln!("training {id}");
            let cell = (|| -> anyhow::Result<MetricReport> {
                let trained = train(&base, &split.train, &train_cfg)?;
                write_loss_csv(&trained.loss_trace, &run.file(&format!("losses/R{rank}_a{alpha}_L{layer}.csv")))?;
                let preds = trained.evaluate_with(&split.test, cfg.eval_threads)?;
                Ok(score_predictions(id, &split.test, &preds))
            })();
            match cell {
                Ok(r) => report.merge(&r).map_err(|k| anyhow::anyhow!("duplicate sweep cell {k:?}"))?,
                Err(e) => {
                    failure = Some(e.context(format!("sweep cell {id} failed")));
                    break 'grid;
                }
            }
        }
    }
    write_metrics(&run, &report)?;
    let text = write_sweep_tables(&run, &report, cfg)?;
    if let Some(e) = failure {
        return Err(e.context(format!("partial results kept in {}", run.path.display())));
    }
    run.finish("sweep", cfg.method.as_deref().unwrap_or(&default_method(&cfg.train)))?;
    if let Some(text) = text {
        print!("{text}");
    }
    println!("{}", run.path.display());
    Ok(run.path)
}

/// Writes a dataset to `dest`, which must not already hold files. With a
/// manifest the split sizes follow it; otherwise `data.synthetic.n`.
pub fn cmd_synth(cfg: &ExperimentConfig, dest: &Path, manifest: Option<Manifest>) -> anyhow::Result<()> {
    if dest.exists() && fs::read_dir(dest).with_context(|| format!("reading {}", dest.display()))?.next().is_some() {
        return Err(UsageError(format!("{} is not empty", dest.display())).into());
    }
    let spec = &cfg.data.synthetic;
    let split = match &manifest {
        Some(m) => make_manifest_dataset(m, spec.seed, &spec.signal)?,
        None => make_synthetic_dataset(spec.n, spec.seed, &spec.signal)?,
    };
    write_dataset(dest, &split, cfg.data.format.into())?;
    if let Some(m) = &manifest {
        crate::run::write_new(&dest.join("manifest.json"), serde_json::to_string_pretty(m)?.as_bytes())?;
    }
    crate::run::write_new(&dest.join("config.json"), serde_json::to_string_pretty(cfg)?.as_bytes())?;
    println!("wrote {} train and {} test records to {}", split.train.len(), split.test.len(), dest.display());
    Ok(())
}
