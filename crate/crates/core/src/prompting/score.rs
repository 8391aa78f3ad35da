use std::collections::{BTreeMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::client::{call_with_retries, RetryPolicy, ScoreRequest, ScorerClient, ScorerError};
use super::{parse_score, render_prompt, select_exemplars, Exemplar, ParsedScore, PromptError, PromptTemplate};
use crate::data::{Domain, LangPair, QeRecord};
use crate::metrics::{ConfigId, MetricError, MetricReport};

/// Where few-shot exemplars come from. Exemplars are chosen once per
/// `(domain, lang_pair)` cell.
#[derive(Clone, Copy, Debug)]
pub struct ExemplarPolicy<'a> {
    pub train: &'a [QeRecord],
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub id: String,
    pub domain: Domain,
    pub lang_pair: LangPair,
    pub gold: f64,
    pub exemplar_ids: Vec<String>,
    pub text: String,
}

pub fn render_dataset(
    template: &PromptTemplate,
    records: &[QeRecord],
    policy: &ExemplarPolicy<'_>,
) -> Result<Vec<RenderedPrompt>, PromptError> {
    if records.is_empty() {
        return Err(PromptError::EmptySplit);
    }
    let evaluated: HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let mut cells: BTreeMap<(Domain, LangPair), Vec<Exemplar>> = BTreeMap::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let key = (r.domain, r.lang_pair);
        if !cells.contains_key(&key) {
            let ex = if template.kind.takes_exemplars() {
                select_exemplars(policy.train, template.exemplar_slots, r.lang_pair, r.domain, policy.seed)?
            } else {
                Vec::new()
            };
            if let Some(e) = ex.iter().find(|e| evaluated.contains(e.id.as_str())) {
                return Err(PromptError::ExemplarLeak(e.id.clone()));
            }
            cells.insert(key, ex);
        }
        let ex = &cells[&key];
        out.push(RenderedPrompt {
            id: r.id.clone(),
            domain: r.domain,
            lang_pair: r.lang_pair,
            gold: r.da_score,
            exemplar_ids: ex.iter().map(|e| e.id.clone()).collect(),
            text: render_prompt(template, &r.source, &r.translation, ex)?,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    /// Maximum requests in flight.
    pub concurrency: usize,
    pub retry: RetryPolicy,
    pub temperature: f64,
    pub max_tokens: usize,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self { concurrency: 4, retry: RetryPolicy::default(), temperature: 0.0, max_tokens: 16 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// The client gave no answer after retries.
    Client,
    /// The answer had no number in it.
    Parse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreFailure {
    pub index: usize,
    pub id: String,
    pub kind: FailureKind,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub id: String,
    pub domain: Domain,
    pub lang_pair: LangPair,
    pub gold: f64,
    /// `None` for failures, which are never imputed.
    pub parsed: Option<ParsedScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRun {
    /// Input order.
    pub records: Vec<ScoredRecord>,
    pub failures: Vec<ScoreFailure>,
}

impl ScoreRun {
    pub fn predictions(&self) -> impl Iterator<Item = (Domain, LangPair, f64, f64)> + '_ {
        self.records.iter().filter_map(|r| r.parsed.as_ref().map(|p| (r.domain, r.lang_pair, p.value, r.gold)))
    }

    pub fn clamped(&self) -> usize {
        self.records.iter().filter(|r| r.parsed.as_ref().is_some_and(|p| p.clamped)).count()
    }

    /// Correlations over successfully parsed pairs only.
    pub fn metric_report(&self, config: ConfigId) -> (MetricReport, Vec<(Domain, LangPair, MetricError)>) {
        MetricReport::from_predictions(config, self.predictions())
    }
}

/// Renders, sends and parses one prompt per record. Up to
/// `opts.concurrency` requests run at once; results keep input order.
pub fn score_dataset(
    client: &dyn ScorerClient,
    template: &PromptTemplate,
    records: &[QeRecord],
    policy: &ExemplarPolicy<'_>,
    opts: &ScoreOptions,
) -> Result<ScoreRun, PromptError> {
    let prompts = render_dataset(template, records, policy)?;
    score_prompts(client, &prompts, opts)
}

pub(crate) fn score_prompts(client: &dyn ScorerClient, prompts: &[RenderedPrompt], opts: &ScoreOptions) -> Result<ScoreRun, PromptError> {
    if prompts.is_empty() {
        return Err(PromptError::EmptySplit);
    }
    let answers: Vec<Result<String, ScorerError>> = {
        let slots: Mutex<Vec<Option<Result<String, ScorerError>>>> = Mutex::new(vec![None; prompts.len()]);
        let next = AtomicUsize::new(0);
        let work = || loop {
            let i = next.fetch_add(1, Ordering::Relaxed);
            let Some(p) = prompts.get(i) else { break };
            let req = ScoreRequest { prompt: p.text.clone(), temperature: opts.temperature, max_tokens: opts.max_tokens };
            let answer = call_with_retries(client, &req, &opts.retry);
            slots.lock().expect("no worker panics while holding the lock")[i] = Some(answer);
        };
        let workers = opts.concurrency.clamp(1, prompts.len());
        if workers == 1 {
            work();
        } else {
            std::thread::scope(|s| {
                for _ in 0..workers {
                    s.spawn(&work);
                }
            });
        }
        slots.into_inner().expect("workers joined").into_iter().map(|a| a.expect("every prompt answered")).collect()
    };

    let mut run = ScoreRun { records: Vec::with_capacity(prompts.len()), failures: Vec::new() };
    let mut last_client_error = None;
    for (index, (p, answer)) in prompts.iter().zip(answers).enumerate() {
        let parsed = match answer {
            Ok(text) => match parse_score(&text) {
                Ok(s) => Some(s),
                Err(e) => {
                    run.failures.push(ScoreFailure { index, id: p.id.clone(), kind: FailureKind::Parse, message: e.to_string() });
                    None
                }
            },
            Err(e) => {
                run.failures.push(ScoreFailure { index, id: p.id.clone(), kind: FailureKind::Client, message: e.to_string() });
                last_client_error = Some(e);
                None
            }
        };
        run.records.push(ScoredRecord { id: p.id.clone(), domain: p.domain, lang_pair: p.lang_pair, gold: p.gold, parsed });
    }
    if run.failures.iter().all(|f| f.kind == FailureKind::Client) && run.failures.len() == prompts.len() {
        if let Some(last) = last_client_error {
            return Err(PromptError::ClientUnavailable { attempted: prompts.len(), last });
        }
    }
    Ok(run)
}
