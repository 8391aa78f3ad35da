use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Duration;

use qelab::metrics::ConfigId;
use qelab::prompting::{
    render_dataset, score_dataset, EchoTableClient, ExemplarPolicy, FixedClient, HashClient, HttpClient, ScoreOptions, ScorerClient,
};

use crate::commands::load_data;
use crate::config::{ClientKind, ExperimentConfig};
use crate::run::{sanitize, CredentialError, RunDir, UsageError};

fn jsonl<T: serde::Serialize>(items: &[T]) -> anyhow::Result<String> {
    let mut out = String::new();
    for item in items {
        let _ = writeln!(out, "{}", serde_json::to_string(item)?);
    }
    Ok(out)
}

fn method(cfg: &ExperimentConfig) -> String {
    cfg.method.clone().unwrap_or_else(|| cfg.prompt.kind.to_string())
}

fn exemplar_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seed.unwrap_or(cfg.train.seed)
}

/// Writes `prompts/<index>-<id>.txt` per test record plus an index file.
pub fn cmd_render(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let template = cfg.prompt.template()?;
    let split = load_data(&cfg.data)?;
    let prompts = render_dataset(&template, &split.test, &ExemplarPolicy { train: &split.train, seed: exemplar_seed(cfg) })?;
    let run = RunDir::create("prompt-render", cfg)?;
    std::fs::create_dir(run.file("prompts"))?;
    for (i, p) in prompts.iter().enumerate() {
        run.write(&format!("prompts/{i:05}-{}.txt", sanitize(&p.id)), &p.text)?;
    }
    run.write("prompts.jsonl", jsonl(&prompts)?)?;
    run.finish("prompt-render", &method(cfg))?;
    println!("rendered {} prompts", prompts.len());
    println!("{}", run.path.display());
    Ok(run.path)
}

fn build_client(cfg: &ExperimentConfig) -> anyhow::Result<Option<Box<dyn ScorerClient>>> {
    let p = &cfg.prompt;
    Ok(match p.client {
        ClientKind::Fixed => Some(Box::new(FixedClient(p.fixed_response.clone()))),
        ClientKind::Hash => Some(Box::new(HashClient)),
        ClientKind::Echo => None,
        ClientKind::Http => {
            let endpoint = p.endpoint.clone().ok_or_else(|| UsageError("the http client needs prompt.endpoint".into()))?;
            let client = HttpClient::from_env(endpoint, p.model_name.clone(), Duration::from_secs(p.timeout_secs))
                .map_err(|e| CredentialError(e.to_string()))?;
            Some(Box::new(client))
        }
    })
}

/// Scores the test split and writes predictions, failures and metrics.
/// Failed records are listed, never imputed.
pub fn cmd_score(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let template = cfg.prompt.template()?;
    let client = build_client(cfg)?;
    let split = load_data(&cfg.data)?;
    let policy = ExemplarPolicy { train: &split.train, seed: exemplar_seed(cfg) };
    let client: Box<dyn ScorerClient> = match client {
        Some(c) => c,
        None => {
            let prompts = render_dataset(&template, &split.test, &policy)?;
            Box::new(EchoTableClient::echo_gold(prompts.iter().map(|p| (p.text.as_str(), p.gold))))
        }
    };
    let opts = ScoreOptions { concurrency: cfg.prompt.concurrency, retry: cfg.prompt.retry.clone(), ..ScoreOptions::default() };
    let scored = score_dataset(client.as_ref(), &template, &split.test, &policy, &opts)?;
    let run = RunDir::create("prompt-score", cfg)?;
    run.write("predictions.jsonl", jsonl(&scored.records)?)?;
    run.write("failures.jsonl", jsonl(&scored.failures)?)?;
    let (report, skipped) = scored.metric_report(ConfigId::default());
    for (d, lp, e) in skipped {
        eprintln!("warning: no correlation for {d}/{lp}: {e}");
    }
    run.write("metrics.csv", report.to_csv_string())?;
    run.finish("prompt-score", &method(cfg))?;
    println!(
        "scored {} of {} records ({} failed, {} clamped)",
        scored.records.len() - scored.failures.len(),
        scored.records.len(),
        scored.failures.len(),
        scored.clamped()
    );
    for ((domain, lp, _), e) in &report.entries {
        println!("{domain:<12} {lp:<6} spearman={:.4} pearson={:.4} n={}", e.spearman, e.pearson, e.n);
    }
    println!("{}", run.path.display());
    Ok(run.path)
}
