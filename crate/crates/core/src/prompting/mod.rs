//! Prompt-only baselines: template rendering, exemplar selection, scorer
//! clients and score parsing.

mod client;
mod score;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Domain, LangPair, QeRecord, DA_MAX, DA_MIN};
use crate::rng::derive;

pub use client::{
    call_with_retries, EchoTableClient, FailingClient, FixedClient, HashClient, HttpClient, RetryPolicy, ScoreRequest, ScorerClient,
    ScorerError, API_KEY_ENV,
};
pub use score::{
    render_dataset, score_dataset, ExemplarPolicy, FailureKind, RenderedPrompt, ScoreFailure, ScoreOptions, ScoreRun, ScoredRecord,
};

pub const MAX_EXEMPLARS: usize = 5;

const ZERO_SHOT: &str = include_str!("../../templates/zero_shot.txt");
const FEW_SHOT: &str = include_str!("../../templates/few_shot.txt");
const FEW_SHOT_GUIDELINES: &str = include_str!("../../templates/few_shot_guidelines.txt");
const GUIDELINES: &str = include_str!("../../templates/guidelines.txt");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("{kind} takes {expected} exemplars, got {got}")]
    ExemplarCount { kind: TemplateKind, expected: String, got: usize },
    #[error("exemplar gold score {0} outside [0, 100]")]
    ExemplarScore(f64),
    #[error("template {kind}: {message}")]
    Template { kind: TemplateKind, message: String },
    #[error("need {needed} train records for {domain}/{lang_pair} exemplars, found {available}")]
    InsufficientExemplars { domain: Domain, lang_pair: LangPair, needed: usize, available: usize },
    #[error("exemplar {0} also appears in the evaluated split")]
    ExemplarLeak(String),
    #[error("no number in scorer output {0:?}")]
    NoNumber(String),
    #[error("unknown template kind {0:?}")]
    UnknownKind(String),
    #[error("nothing to score")]
    EmptySplit,
    #[error("scorer unavailable: all {attempted} requests failed; last error: {last}")]
    ClientUnavailable { attempted: usize, last: ScorerError },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    ZeroShot,
    FewShot,
    FewShotGuidelines,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 3] = [TemplateKind::ZeroShot, TemplateKind::FewShot, TemplateKind::FewShotGuidelines];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKind::ZeroShot => "zero_shot",
            TemplateKind::FewShot => "few_shot",
            TemplateKind::FewShotGuidelines => "few_shot_guidelines",
        }
    }

    pub fn takes_exemplars(self) -> bool {
        self != TemplateKind::ZeroShot
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateKind {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| PromptError::UnknownKind(s.into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    /// Body with `{{source}}`, `{{translation}}` and, per kind,
    /// `{{exemplars}}` and `{{guidelines}}` placeholders.
    pub instruction_text: String,
    /// Present iff `kind` is [`TemplateKind::FewShotGuidelines`].
    pub guidelines_text: Option<String>,
    /// 0 for zero-shot, `1..=5` otherwise.
    pub exemplar_slots: usize,
}

const PLACEHOLDERS: [&str; 4] = ["source", "translation", "exemplars", "guidelines"];

/// Splits `text` into literal runs and `{{name}}` placeholders.
fn tokens(text: &str) -> Vec<Result<&str, &str>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("{{") {
        match rest[open + 2..].find("}}") {
            Some(close) => {
                out.push(Ok(&rest[..open]));
                out.push(Err(&rest[open + 2..open + 2 + close]));
                rest = &rest[open + 4 + close..];
            }
            None => break,
        }
    }
    out.push(Ok(rest));
    out
}

impl PromptTemplate {
    /// The shipped templates.
    pub fn builtin(kind: TemplateKind, exemplar_slots: usize) -> Result<Self, PromptError> {
        let (text, guidelines) = match kind {
            TemplateKind::ZeroShot => (ZERO_SHOT, None),
            TemplateKind::FewShot => (FEW_SHOT, None),
            TemplateKind::FewShotGuidelines => (FEW_SHOT_GUIDELINES, Some(GUIDELINES)),
        };
        Self::new(kind, text.into(), guidelines.map(String::from), exemplar_slots)
    }

    /// Reads `<kind>.txt`, plus `guidelines.txt` for the guideline kind.
    pub fn from_dir(dir: &Path, kind: TemplateKind, exemplar_slots: usize) -> Result<Self, PromptError> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|source| PromptError::Io { path: path.display().to_string(), source })
        };
        let text = read(&format!("{kind}.txt"))?;
        let guidelines = if kind == TemplateKind::FewShotGuidelines { Some(read("guidelines.txt")?) } else { None };
        Self::new(kind, text, guidelines, exemplar_slots)
    }

    pub fn new(
        kind: TemplateKind,
        instruction_text: String,
        guidelines_text: Option<String>,
        exemplar_slots: usize,
    ) -> Result<Self, PromptError> {
        let t = Self { kind, instruction_text, guidelines_text, exemplar_slots };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let kind = self.kind;
        let bad = |message: String| PromptError::Template { kind, message };
        check_count(kind, self.exemplar_slots)?;
        let names: Vec<&str> = tokens(&self.instruction_text).into_iter().filter_map(Result::err).collect();
        if let Some(n) = names.iter().find(|n| !PLACEHOLDERS.contains(n)) {
            return Err(bad(format!("unknown placeholder {{{{{n}}}}}")));
        }
        let wants_guidelines = kind == TemplateKind::FewShotGuidelines;
        for (name, required) in
            [("source", true), ("translation", true), ("exemplars", kind.takes_exemplars()), ("guidelines", wants_guidelines)]
        {
            let count = names.iter().filter(|n| **n == name).count();
            if required && count != 1 {
                return Err(bad(format!("needs exactly one {{{{{name}}}}}, found {count}")));
            }
            if !required && count != 0 {
                return Err(bad(format!("must not contain {{{{{name}}}}}")));
            }
        }
        match (&self.guidelines_text, wants_guidelines) {
            (Some(g), true) if g.trim().is_empty() => Err(bad("empty guidelines".into())),
            (None, true) => Err(bad("missing guidelines".into())),
            (Some(_), false) => Err(bad("guidelines only belong to few_shot_guidelines".into())),
            _ => Ok(()),
        }
    }
}

fn check_count(kind: TemplateKind, got: usize) -> Result<(), PromptError> {
    let ok = if kind.takes_exemplars() { (1..=MAX_EXEMPLARS).contains(&got) } else { got == 0 };
    if ok {
        Ok(())
    } else {
        let expected = if kind.takes_exemplars() { format!("1 to {MAX_EXEMPLARS}") } else { "0".into() };
        Err(PromptError::ExemplarCount { kind, expected, got })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    /// Id of the train record the exemplar came from.
    pub id: String,
    pub source: String,
    pub translation: String,
    pub gold_da: f64,
}

impl Exemplar {
    pub fn from_record(r: &QeRecord) -> Self {
        Self { id: r.id.clone(), source: r.source.clone(), translation: r.translation.clone(), gold_da: r.da_score }
    }
}

fn exemplar_block(exemplars: &[Exemplar]) -> String {
    exemplars
        .iter()
        .enumerate()
        .map(|(i, e)| {
            format!("Example {}\nSource: {}\nTranslation: {}\nScore: {}", i + 1, e.source.trim(), e.translation.trim(), e.gold_da)
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Fills the template in one pass, so text inside the inputs is never read as
/// a placeholder.
pub fn render_prompt(template: &PromptTemplate, source: &str, translation: &str, exemplars: &[Exemplar]) -> Result<String, PromptError> {
    check_count(template.kind, exemplars.len())?;
    if exemplars.len() != template.exemplar_slots {
        return Err(PromptError::ExemplarCount {
            kind: template.kind,
            expected: template.exemplar_slots.to_string(),
            got: exemplars.len(),
        });
    }
    if let Some(e) = exemplars.iter().find(|e| !(DA_MIN..=DA_MAX).contains(&e.gold_da)) {
        return Err(PromptError::ExemplarScore(e.gold_da));
    }
    let block = exemplar_block(exemplars);
    let mut out = String::with_capacity(template.instruction_text.len() + source.len() + translation.len() + block.len());
    for tok in tokens(&template.instruction_text) {
        match tok {
            Ok(lit) => out.push_str(lit),
            Err("source") => out.push_str(source.trim()),
            Err("translation") => out.push_str(translation.trim()),
            Err("exemplars") => out.push_str(&block),
            Err("guidelines") => out.push_str(template.guidelines_text.as_deref().unwrap_or_default().trim_end()),
            Err(other) => return Err(PromptError::Template { kind: template.kind, message: format!("unknown placeholder {other}") }),
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Band {
    Low,
    Mid,
    High,
}

fn band(da: f64) -> Band {
    if da < 100.0 / 3.0 {
        Band::Low
    } else if da < 200.0 / 3.0 {
        Band::Mid
    } else {
        Band::High
    }
}

/// Seeded sample of `k` in-cell train records, drawn round-robin from the
/// low, mid and high thirds of the scale.
pub fn select_exemplars(
    train: &[QeRecord],
    k: usize,
    lang_pair: LangPair,
    domain: Domain,
    seed: u64,
) -> Result<Vec<Exemplar>, PromptError> {
    let pool: Vec<&QeRecord> = train.iter().filter(|r| r.lang_pair == lang_pair && r.domain == domain).collect();
    if pool.len() < k {
        return Err(PromptError::InsufficientExemplars { domain, lang_pair, needed: k, available: pool.len() });
    }
    let mut rng = derive(seed, &format!("exemplars/{domain}/{lang_pair}"));
    let mut bands: Vec<Vec<&QeRecord>> =
        [Band::Low, Band::Mid, Band::High].iter().map(|&b| pool.iter().copied().filter(|r| band(r.da_score) == b).collect()).collect();
    for b in &mut bands {
        b.shuffle(&mut rng);
    }
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k {
        for b in bands.iter_mut() {
            if picked.len() < k {
                if let Some(r) = b.pop() {
                    picked.push(Exemplar::from_record(r));
                }
            }
        }
    }
    Ok(picked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParsedScore {
    pub value: f64,
    /// Set iff the extracted number fell outside `[0, 100]`.
    pub clamped: bool,
    pub raw_text: String,
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[-+]?\d+(?:\.\d+)?").expect("valid regex"))
}

/// First decimal number in `text`, clamped to `[0, 100]`.
pub fn parse_score(text: &str) -> Result<ParsedScore, PromptError> {
    let m = number_re().find(text).ok_or_else(|| PromptError::NoNumber(text.into()))?;
    let raw: f64 = m.as_str().parse().map_err(|_| PromptError::NoNumber(text.into()))?;
    let value = raw.clamp(DA_MIN, DA_MAX);
    Ok(ParsedScore { value, clamped: value != raw, raw_text: text.into() })
}
