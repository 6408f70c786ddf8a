//! Zero-shot prompting: prompt construction (with optional fairness
//! instructions), conversion of Yes/No token scores into class probabilities,
//! and the boundary to an external scorer (score cache file or HTTP service).
//!
//! HTTP scorer contract:
//!
//! ```text
//! POST <url>
//! {"prompts": [{"id": "...", "text": "..."}, ...], "targets": ["Yes", "No"]}
//! -> 200 {"scores": [{"id": "...", "yes_score": f64, "no_score": f64}, ...]}
//! ```
//!
//! The score cache is JSON-lines with the same `{id, yes_score, no_score}` records.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const INSTRUCTION: &str = "Categorize the comment on the basis of toxicity. If the comment is toxic (harmful, malicious, derogatory, threat, insult, identity attack, etc.) output Yes, otherwise output No.";
const BE_FAIR: &str = "Please be as fair as possible when making a decision";

pub const DEFAULT_SUPER_GROUP_PHRASE: &str = "religious groups or that mention religion";
pub const DEFAULT_TARGET_GROUP_PHRASE: &str = "Judaism or Jewish people";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("cannot build a prompt for empty text")]
    EmptyText,
    #[error("variant {kind} requires a non-empty {phrase}")]
    MissingPhrase { kind: VariantKind, phrase: &'static str },
    #[error("variant {kind} does not take a {phrase}")]
    UnexpectedPhrase { kind: VariantKind, phrase: &'static str },
    #[error("non-finite token score (yes {yes}, no {no})")]
    NonFinite { yes: f64, no: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    Base,
    Pbf,
    Pbf2sg,
    Pbf2tg,
}

impl VariantKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::Base => "base",
            VariantKind::Pbf => "pbf",
            VariantKind::Pbf2sg => "pbf2sg",
            VariantKind::Pbf2tg => "pbf2tg",
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for VariantKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(VariantKind::Base),
            "pbf" => Ok(VariantKind::Pbf),
            "pbf2sg" => Ok(VariantKind::Pbf2sg),
            "pbf2tg" => Ok(VariantKind::Pbf2tg),
            other => Err(format!("unknown prompt variant {other:?}")),
        }
    }
}

/// A prompt template plus the group phrases its fairness instruction needs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "VariantDoc", into = "VariantDoc")]
pub enum PromptVariant {
    Base,
    /// Generic "be fair" instruction.
    Pbf,
    /// Instruction naming a super-group, e.g. religious groups.
    Pbf2sg {
        super_group_phrase: String,
    },
    /// Instruction naming the target group.
    Pbf2tg {
        target_group_phrase: String,
    },
}

#[derive(Serialize, Deserialize)]
struct VariantDoc {
    kind: VariantKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_group_phrase: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    super_group_phrase: Option<String>,
}

impl TryFrom<VariantDoc> for PromptVariant {
    type Error = PromptError;

    fn try_from(doc: VariantDoc) -> Result<Self, Self::Error> {
        PromptVariant::from_parts(doc.kind, doc.target_group_phrase, doc.super_group_phrase)
    }
}

impl From<PromptVariant> for VariantDoc {
    fn from(v: PromptVariant) -> Self {
        let kind = v.kind();
        match v {
            PromptVariant::Base | PromptVariant::Pbf => VariantDoc {
                kind,
                target_group_phrase: None,
                super_group_phrase: None,
            },
            PromptVariant::Pbf2sg { super_group_phrase } => VariantDoc {
                kind,
                target_group_phrase: None,
                super_group_phrase: Some(super_group_phrase),
            },
            PromptVariant::Pbf2tg { target_group_phrase } => VariantDoc {
                kind,
                target_group_phrase: Some(target_group_phrase),
                super_group_phrase: None,
            },
        }
    }
}

impl PromptVariant {
    /// Builds a variant from a kind and optional phrases, enforcing which
    /// phrases each kind requires or forbids.
    pub fn from_parts(
        kind: VariantKind,
        target_group_phrase: Option<String>,
        super_group_phrase: Option<String>,
    ) -> Result<Self, PromptError> {
        let forbid = |phrase: &Option<String>, name| match phrase {
            Some(_) => Err(PromptError::UnexpectedPhrase { kind, phrase: name }),
            None => Ok(()),
        };
        let require = |phrase: Option<String>, name| match phrase {
            Some(p) if !p.trim().is_empty() => Ok(p),
            _ => Err(PromptError::MissingPhrase { kind, phrase: name }),
        };
        match kind {
            VariantKind::Base | VariantKind::Pbf => {
                forbid(&target_group_phrase, "target_group_phrase")?;
                forbid(&super_group_phrase, "super_group_phrase")?;
                Ok(if kind == VariantKind::Base {
                    PromptVariant::Base
                } else {
                    PromptVariant::Pbf
                })
            }
            VariantKind::Pbf2sg => {
                forbid(&target_group_phrase, "target_group_phrase")?;
                Ok(PromptVariant::Pbf2sg {
                    super_group_phrase: require(super_group_phrase, "super_group_phrase")?,
                })
            }
            VariantKind::Pbf2tg => {
                forbid(&super_group_phrase, "super_group_phrase")?;
                Ok(PromptVariant::Pbf2tg {
                    target_group_phrase: require(target_group_phrase, "target_group_phrase")?,
                })
            }
        }
    }

    /// The variant with its default phrase when the kind needs one.
    pub fn with_default_phrase(kind: VariantKind) -> Self {
        match kind {
            VariantKind::Base => PromptVariant::Base,
            VariantKind::Pbf => PromptVariant::Pbf,
            VariantKind::Pbf2sg => PromptVariant::Pbf2sg {
                super_group_phrase: DEFAULT_SUPER_GROUP_PHRASE.to_string(),
            },
            VariantKind::Pbf2tg => PromptVariant::Pbf2tg {
                target_group_phrase: DEFAULT_TARGET_GROUP_PHRASE.to_string(),
            },
        }
    }

    pub fn kind(&self) -> VariantKind {
        match self {
            PromptVariant::Base => VariantKind::Base,
            PromptVariant::Pbf => VariantKind::Pbf,
            PromptVariant::Pbf2sg { .. } => VariantKind::Pbf2sg,
            PromptVariant::Pbf2tg { .. } => VariantKind::Pbf2tg,
        }
    }

    /// Stable name used in reports and as the score-cache key prefix. Non-default
    /// phrases are included so two phrasings never share cached scores.
    pub fn key(&self) -> String {
        match self {
            PromptVariant::Pbf2sg { super_group_phrase } if super_group_phrase != DEFAULT_SUPER_GROUP_PHRASE => {
                format!("pbf2sg[{super_group_phrase}]")
            }
            PromptVariant::Pbf2tg { target_group_phrase } if target_group_phrase != DEFAULT_TARGET_GROUP_PHRASE => {
                format!("pbf2tg[{target_group_phrase}]")
            }
            other => other.kind().as_str().to_string(),
        }
    }

    /// Fairness instruction appended after the base prompt, if any.
    pub fn suffix(&self) -> Result<Option<String>, PromptError> {
        let phrase = |p: &str, name| {
            if p.trim().is_empty() {
                Err(PromptError::MissingPhrase {
                    kind: self.kind(),
                    phrase: name,
                })
            } else {
                Ok(())
            }
        };
        Ok(match self {
            PromptVariant::Base => None,
            PromptVariant::Pbf => Some(BE_FAIR.to_string()),
            PromptVariant::Pbf2sg { super_group_phrase } => {
                phrase(super_group_phrase, "super_group_phrase")?;
                Some(format!("{BE_FAIR} about comments about {super_group_phrase}"))
            }
            PromptVariant::Pbf2tg { target_group_phrase } => {
                phrase(target_group_phrase, "target_group_phrase")?;
                Some(format!("{BE_FAIR} about comments that mention {target_group_phrase}"))
            }
        })
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

/// Wraps `text` in the toxicity instruction and appends the variant's fairness
/// instruction after a single space.
pub fn wrap_prompt(text: &str, variant: &PromptVariant) -> Result<String, PromptError> {
    if text.is_empty() {
        return Err(PromptError::EmptyText);
    }
    let mut prompt = format!("'{text}' {INSTRUCTION}");
    if let Some(suffix) = variant.suffix()? {
        prompt.push(' ');
        prompt.push_str(&suffix);
    }
    Ok(prompt)
}

/// Unnormalized log-scores of the "Yes" and "No" answer tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub yes_score: f64,
    pub no_score: f64,
}

/// Two-way softmax over the Yes/No scores: `(P(toxic), P(not toxic))`.
pub fn scores_to_probs(s: ScorePair) -> Result<(f64, f64), PromptError> {
    let ScorePair { yes_score, no_score } = s;
    if !yes_score.is_finite() || !no_score.is_finite() {
        return Err(PromptError::NonFinite {
            yes: yes_score,
            no: no_score,
        });
    }
    let m = yes_score.max(no_score);
    let ey = (yes_score - m).exp();
    let en = (no_score - m).exp();
    let z = ey + en;
    Ok((ey / z, en / z))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerMode {
    File,
    Http,
}

/// Where token scores come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerBinding {
    pub mode: ScorerMode,
    /// Cache path in file mode, endpoint URL in http mode.
    pub location: String,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Maximum number of HTTP batches in flight.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Http mode only: responses are appended here and reused on later calls.
    #[serde(default)]
    pub cache: Option<PathBuf>,
}

fn default_batch_size() -> usize {
    32
}
fn default_timeout_ms() -> u64 {
    30_000
}
fn default_retries() -> u32 {
    2
}
fn default_concurrency() -> usize {
    4
}

impl ScorerBinding {
    pub fn file(path: impl AsRef<Path>) -> Self {
        ScorerBinding {
            mode: ScorerMode::File,
            location: path.as_ref().display().to_string(),
            batch_size: default_batch_size(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_retries(),
            concurrency: default_concurrency(),
            cache: None,
        }
    }

    pub fn http(url: impl Into<String>) -> Self {
        ScorerBinding {
            mode: ScorerMode::Http,
            location: url.into(),
            ..ScorerBinding::file("")
        }
    }

    pub fn validate(&self) -> Result<(), ScorerError> {
        if self.batch_size == 0 {
            return Err(ScorerError::InvalidBinding("batch_size must be positive".into()));
        }
        if self.concurrency == 0 {
            return Err(ScorerError::InvalidBinding("concurrency must be positive".into()));
        }
        match self.mode {
            ScorerMode::File => {
                if self.location.is_empty() {
                    return Err(ScorerError::InvalidBinding("file mode needs a cache path".into()));
                }
            }
            ScorerMode::Http => {
                let url = url::Url::parse(&self.location)
                    .map_err(|e| ScorerError::InvalidBinding(format!("bad URL {:?}: {e}", self.location)))?;
                if !matches!(url.scheme(), "http" | "https") {
                    return Err(ScorerError::InvalidBinding(format!(
                        "URL scheme must be http or https, got {}",
                        url.scheme()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("invalid scorer binding: {0}")]
    InvalidBinding(String),
    #[error("score cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
    #[error("no score for {} ids, e.g. {:?}", .ids.len(), .ids.iter().take(5).collect::<Vec<_>>())]
    MissingIds { ids: Vec<String> },
    #[error("batch {batch} failed after {attempts} attempts: {message}")]
    Batch {
        batch: usize,
        attempts: u32,
        message: String,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScoreRecord {
    id: String,
    yes_score: f64,
    no_score: f64,
}

/// Reads a JSON-lines score cache. A missing file reads as empty. Later lines
/// override earlier ones for the same id.
pub fn read_score_cache(path: &Path) -> Result<HashMap<String, ScorePair>, ScorerError> {
    let cache_err = |message: String| ScorerError::Cache {
        path: path.to_path_buf(),
        message,
    };
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(HashMap::new()),
        Err(e) => return Err(cache_err(e.to_string())),
    };
    let mut out = HashMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| cache_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScoreRecord = serde_json::from_str(&line).map_err(|e| cache_err(format!("line {}: {e}", idx + 1)))?;
        out.insert(
            rec.id,
            ScorePair {
                yes_score: rec.yes_score,
                no_score: rec.no_score,
            },
        );
    }
    Ok(out)
}

/// Appends score records to a JSON-lines cache in the given order.
pub fn append_score_cache<'a, I>(path: &Path, entries: I) -> Result<(), ScorerError>
where
    I: IntoIterator<Item = (&'a str, ScorePair)>,
{
    let cache_err = |e: std::io::Error| ScorerError::Cache {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(cache_err)?;
    let mut out = BufWriter::new(file);
    for (id, s) in entries {
        let line = serde_json::to_string(&ScoreRecord {
            id: id.to_string(),
            yes_score: s.yes_score,
            no_score: s.no_score,
        })
        .expect("score records always serialize");
        writeln!(out, "{line}").map_err(cache_err)?;
    }
    out.flush().map_err(cache_err)
}

#[derive(Serialize)]
struct PromptItem<'a> {
    id: &'a str,
    text: &'a str,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    prompts: Vec<PromptItem<'a>>,
    targets: [&'static str; 2],
}

#[derive(Deserialize)]
struct ScoreResponse {
    scores: Vec<ScoreRecord>,
}

fn post_batch(agent: &ureq::Agent, url: &str, batch: &[(String, String)]) -> Result<Vec<ScoreRecord>, String> {
    let request = ScoreRequest {
        prompts: batch.iter().map(|(id, text)| PromptItem { id, text }).collect(),
        targets: ["Yes", "No"],
    };
    let response = agent.post(url).send_json(&request).map_err(|e| match e {
        ureq::Error::Status(code, _) => format!("HTTP status {code}"),
        other => other.to_string(),
    })?;
    let body: ScoreResponse = response
        .into_json()
        .map_err(|e| format!("malformed response body: {e}"))?;
    let wanted: HashSet<&str> = batch.iter().map(|(id, _)| id.as_str()).collect();
    let got: HashSet<&str> = body.scores.iter().map(|r| r.id.as_str()).collect();
    if let Some(missing) = wanted.iter().find(|id| !got.contains(*id)) {
        return Err(format!("response has no score for {missing}"));
    }
    Ok(body
        .scores
        .into_iter()
        .filter(|r| wanted.contains(r.id.as_str()))
        .collect())
}

fn fetch_batch_with_retries(
    agent: &ureq::Agent,
    binding: &ScorerBinding,
    index: usize,
    batch: &[(String, String)],
) -> Result<Vec<ScoreRecord>, ScorerError> {
    let attempts = binding.max_retries + 1;
    let mut last = String::new();
    for attempt in 1..=attempts {
        match post_batch(agent, &binding.location, batch) {
            Ok(records) => return Ok(records),
            Err(message) => {
                log::warn!("scorer batch {index} attempt {attempt}/{attempts}: {message}");
                last = message;
            }
        }
    }
    Err(ScorerError::Batch {
        batch: index,
        attempts,
        message: last,
    })
}

fn fetch_http(
    binding: &ScorerBinding,
    prompts: &[(String, String)],
) -> Result<HashMap<String, ScorePair>, ScorerError> {
    let mut scores = match &binding.cache {
        Some(path) => read_score_cache(path)?,
        None => HashMap::new(),
    };
    let mut queued = HashSet::new();
    let pending: Vec<(String, String)> = prompts
        .iter()
        .filter(|(id, _)| !scores.contains_key(id) && queued.insert(id.clone()))
        .cloned()
        .collect();
    if !pending.is_empty() {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(binding.timeout_ms))
            .build();
        let batches: Vec<&[(String, String)]> = pending.chunks(binding.batch_size).collect();
        let mut fetched: Vec<ScoreRecord> = Vec::with_capacity(pending.len());
        for (wave_idx, wave) in batches.chunks(binding.concurrency).enumerate() {
            let results: Vec<Result<Vec<ScoreRecord>, ScorerError>> = std::thread::scope(|scope| {
                let handles: Vec<_> = wave
                    .iter()
                    .enumerate()
                    .map(|(i, batch)| {
                        let agent = &agent;
                        let index = wave_idx * binding.concurrency + i;
                        scope.spawn(move || fetch_batch_with_retries(agent, binding, index, batch))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("scorer worker panicked"))
                    .collect()
            });
            for result in results {
                fetched.extend(result?);
            }
        }
        // cache order follows request order, not arrival order
        let by_id: HashMap<&str, ScorePair> = fetched
            .iter()
            .map(|r| {
                (
                    r.id.as_str(),
                    ScorePair {
                        yes_score: r.yes_score,
                        no_score: r.no_score,
                    },
                )
            })
            .collect();
        let ordered: Vec<(&str, ScorePair)> = pending
            .iter()
            .map(|(id, _)| (id.as_str(), by_id[id.as_str()]))
            .collect();
        if let Some(path) = &binding.cache {
            append_score_cache(path, ordered.iter().copied())?;
        }
        for (id, s) in ordered {
            scores.insert(id.to_string(), s);
        }
    }
    collect_requested(&scores, prompts)
}

fn collect_requested(
    scores: &HashMap<String, ScorePair>,
    prompts: &[(String, String)],
) -> Result<HashMap<String, ScorePair>, ScorerError> {
    let mut out = HashMap::with_capacity(prompts.len());
    let mut missing = Vec::new();
    for (id, _) in prompts {
        match scores.get(id) {
            Some(&s) => {
                if !s.yes_score.is_finite() || !s.no_score.is_finite() {
                    return Err(PromptError::NonFinite {
                        yes: s.yes_score,
                        no: s.no_score,
                    }
                    .into());
                }
                out.insert(id.clone(), s);
            }
            None => missing.push(id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(ScorerError::MissingIds { ids: missing });
    }
    Ok(out)
}

/// Scores every `(id, prompt)` pair through `binding`.
pub fn fetch_scores(
    binding: &ScorerBinding,
    prompts: &[(String, String)],
) -> Result<HashMap<String, ScorePair>, ScorerError> {
    binding.validate()?;
    match binding.mode {
        ScorerMode::File => {
            let cache = read_score_cache(Path::new(&binding.location))?;
            collect_requested(&cache, prompts)
        }
        ScorerMode::Http => fetch_http(binding, prompts),
    }
}
