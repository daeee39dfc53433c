//! PartEval: extract part features, turn them into questions, grade, score.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::seed::sha256_hex;
use crate::taxonomy::SemanticAtom;
use crate::world::{Embedding, WorldSpec};

pub const UNSPECIFIED: &str = "unspecified";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Object,
    Part,
    Color,
    Texture,
    SpatialRelation,
}

impl AttributeKind {
    pub const ALL: [AttributeKind; 5] = [
        AttributeKind::Object,
        AttributeKind::Part,
        AttributeKind::Color,
        AttributeKind::Texture,
        AttributeKind::SpatialRelation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttributeKind::Object => "object",
            AttributeKind::Part => "part",
            AttributeKind::Color => "color",
            AttributeKind::Texture => "texture",
            AttributeKind::SpatialRelation => "spatial_relation",
        }
    }

    /// Question template; `{object}`, `{part}` and `{value}` are substituted.
    pub fn template(self) -> &'static str {
        match self {
            AttributeKind::Object => "Does the image contain a part taken from a {object}?",
            AttributeKind::Part => "Does the object have the {part} of a {object}?",
            AttributeKind::Color => "Is the {part} of the {object} {value}?",
            AttributeKind::Texture => "Does the {part} of the {object} have a {value} texture?",
            AttributeKind::SpatialRelation => "Is the {part} of the {object} {value}?",
        }
    }
}

/// Structured description of one part.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartFeature {
    pub object: String,
    pub part: String,
    pub color: String,
    pub texture: String,
    pub spatial_relation: String,
}

impl PartFeature {
    pub fn value(&self, kind: AttributeKind) -> &str {
        match kind {
            AttributeKind::Object => &self.object,
            AttributeKind::Part => &self.part,
            AttributeKind::Color => &self.color,
            AttributeKind::Texture => &self.texture,
            AttributeKind::SpatialRelation => &self.spatial_relation,
        }
    }

    pub fn is_specified(&self, kind: AttributeKind) -> bool {
        let v = self.value(kind);
        !v.is_empty() && v != UNSPECIFIED
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalQuestion {
    pub text: String,
    pub attribute: AttributeKind,
    pub expected: String,
    /// Object and part of the feature the question was generated from.
    pub object: String,
    pub part: String,
}

/// Stage 1. Object and part come from the atom; the other attributes from
/// `metadata` (`color`, `texture`, `spatial_relation`) when present.
pub fn parteval_extract(atom: &SemanticAtom, metadata: Option<&BTreeMap<String, String>>) -> PartFeature {
    let get = |key: &str| {
        metadata
            .and_then(|m| m.get(key))
            .map(|v| v.trim())
            .filter(|v| !v.is_empty())
            .unwrap_or(UNSPECIFIED)
            .to_string()
    };
    PartFeature {
        object: atom.subject.clone(),
        part: atom.part.clone(),
        color: get("color"),
        texture: get("texture"),
        spatial_relation: get("spatial_relation"),
    }
}

/// Stage 2. One question per specified attribute, in [`AttributeKind::ALL`] order.
pub fn parteval_questions(f: &PartFeature) -> Vec<EvalQuestion> {
    AttributeKind::ALL
        .iter()
        .filter(|&&k| f.is_specified(k))
        .map(|&k| EvalQuestion {
            text: k
                .template()
                .replace("{object}", &f.object)
                .replace("{part}", &f.part)
                .replace("{value}", f.value(k)),
            attribute: k,
            expected: f.value(k).to_string(),
            object: f.object.clone(),
            part: f.part.clone(),
        })
        .collect()
}

/// What is being graded: an opaque reference plus, for in-process graders,
/// the generated embedding and its slot count.
#[derive(Debug, Clone, PartialEq)]
pub struct GradeSubject {
    pub subject_ref: String,
    pub generated: Option<Embedding>,
    pub k: usize,
}

pub trait Grader {
    /// One verdict (0 or 1) per question, in order.
    fn grade(&self, subject: &GradeSubject, questions: &[EvalQuestion]) -> Result<Vec<u8>, EvalError>;
}

/// Grades against the decoded slots of the generated embedding. Object
/// questions pass when any decoded atom has that subject; all other kinds
/// pass when the exact ⟨part, subject⟩ atom is decoded.
pub struct OracleGrader<'a> {
    pub world: &'a WorldSpec,
}

impl Grader for OracleGrader<'_> {
    fn grade(&self, subject: &GradeSubject, questions: &[EvalQuestion]) -> Result<Vec<u8>, EvalError> {
        let e = subject
            .generated
            .as_ref()
            .ok_or_else(|| EvalError::InvalidArgument(format!("{}: no embedding to grade", subject.subject_ref)))?;
        let decoded = self.world.decode_parts(e, subject.k);
        Ok(questions
            .iter()
            .map(|q| {
                let hit = match q.attribute {
                    AttributeKind::Object => decoded.iter().any(|a| a.subject == q.object),
                    _ => decoded.iter().any(|a| a.subject == q.object && a.part == q.part),
                };
                u8::from(hit)
            })
            .collect())
    }
}

/// Stage 3 for one subject.
pub fn parteval_grade<G: Grader + ?Sized>(
    grader: &G,
    subject: &GradeSubject,
    questions: &[EvalQuestion],
) -> Result<GradeRecord, EvalError> {
    let verdicts = grader.grade(subject, questions)?;
    if verdicts.len() != questions.len() {
        return Err(EvalError::MalformedVerdict(format!(
            "{} verdicts for {} questions",
            verdicts.len(),
            questions.len()
        )));
    }
    GradeRecord::from_verdicts(verdicts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub verdicts: Vec<u8>,
    pub partial_score: usize,
    pub max_score: usize,
    pub normalized: f64,
}

impl GradeRecord {
    pub fn from_verdicts(verdicts: Vec<u8>) -> Result<Self, EvalError> {
        if verdicts.is_empty() {
            return Err(EvalError::InvalidArgument("no questions to grade".into()));
        }
        if let Some(v) = verdicts.iter().find(|&&v| v > 1) {
            return Err(EvalError::MalformedVerdict(format!("verdict {v} is not 0 or 1")));
        }
        let partial = verdicts.iter().map(|&v| v as usize).sum();
        let max = verdicts.len();
        Ok(GradeRecord { verdicts, partial_score: partial, max_score: max, normalized: partial as f64 / max as f64 })
    }
}

/// Mean normalized score; all records must share one question count.
pub fn parteval_score(records: &[GradeRecord]) -> Result<f64, EvalError> {
    let first = records.first().ok_or(EvalError::TooFewSamples { need: 1, got: 0 })?;
    if let Some(r) = records.iter().find(|r| r.max_score != first.max_score) {
        return Err(EvalError::MixedScale(first.max_score, r.max_score));
    }
    Ok(records.iter().map(|r| r.normalized).sum::<f64>() / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteGraderConfig {
    pub endpoint: String,
    pub token: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub timeout: Duration,
    pub backoff: Duration,
}

impl RemoteGraderConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteGraderConfig {
            endpoint: endpoint.into(),
            token: None,
            cache_dir: None,
            max_in_flight: 4,
            max_retries: 3,
            timeout: Duration::from_secs(30),
            backoff: Duration::from_millis(200),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct WireRequest<'a> {
    subject_ref: &'a str,
    question: &'a str,
    attribute: AttributeKind,
    expected: &'a str,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WireResponse {
    verdict: i64,
    #[serde(default)]
    rationale: String,
}

/// JSON-over-HTTP grader. Each question is POSTed as
/// `{subject_ref, question, attribute, expected}` and answered with
/// `{verdict: 0|1, rationale}`. Responses are cached on disk under the
/// sha256 of the request body.
pub struct RemoteGrader {
    config: RemoteGraderConfig,
    agent: ureq::Agent,
}

enum Attempt {
    Retry(String),
    Fatal(EvalError),
}

impl RemoteGrader {
    pub fn new(config: RemoteGraderConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteGrader { config, agent }
    }

    pub fn config(&self) -> &RemoteGraderConfig {
        &self.config
    }

    fn cache_path(&self, body: &[u8]) -> Option<PathBuf> {
        self.config.cache_dir.as_ref().map(|d| d.join(format!("{}.json", sha256_hex(body))))
    }

    fn parse(text: &str) -> Result<WireResponse, EvalError> {
        let r: WireResponse =
            serde_json::from_str(text).map_err(|e| EvalError::MalformedVerdict(format!("{e}: {text}")))?;
        if !(0..=1).contains(&r.verdict) {
            return Err(EvalError::MalformedVerdict(format!("verdict {} is not 0 or 1", r.verdict)));
        }
        Ok(r)
    }

    fn ask(&self, subject: &GradeSubject, q: &EvalQuestion) -> Result<u8, EvalError> {
        let req = WireRequest {
            subject_ref: &subject.subject_ref,
            question: &q.text,
            attribute: q.attribute,
            expected: &q.expected,
        };
        let body = serde_json::to_vec(&req)?;
        let cache = self.cache_path(&body);
        if let Some(text) = cache.as_ref().and_then(|p| std::fs::read_to_string(p).ok()) {
            if let Ok(r) = Self::parse(&text) {
                return Ok(r.verdict as u8);
            }
        }
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff * 2u32.saturating_pow(attempt - 1));
            }
            match self.post(&body) {
                Ok(text) => {
                    let r = Self::parse(&text)?;
                    if let Some(p) = &cache {
                        std::fs::create_dir_all(p.parent().expect("cache file has a parent"))?;
                        let tmp = p.with_extension("tmp");
                        std::fs::write(&tmp, serde_json::to_vec(&r)?)?;
                        std::fs::rename(&tmp, p)?;
                    }
                    return Ok(r.verdict as u8);
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(EvalError::GraderUnavailable(format!(
            "{} after {} attempts: {last}",
            self.config.endpoint,
            self.config.max_retries + 1
        )))
    }

    fn post(&self, body: &[u8]) -> Result<String, Attempt> {
        let mut req = self.agent.post(&self.config.endpoint).header("content-type", "application/json");
        if let Some(t) = &self.config.token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        let mut resp = req.send(body).map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| Attempt::Retry(e.to_string()))?;
        match status {
            200..=299 => Ok(text),
            429 | 500..=599 => Err(Attempt::Retry(format!("HTTP {status}"))),
            _ => Err(Attempt::Fatal(EvalError::GraderUnavailable(format!("HTTP {status}: {text}")))),
        }
    }
}

impl Grader for RemoteGrader {
    fn grade(&self, subject: &GradeSubject, questions: &[EvalQuestion]) -> Result<Vec<u8>, EvalError> {
        let workers = self.config.max_in_flight.clamp(1, questions.len().max(1));
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<u8, EvalError>>>> =
            Mutex::new((0..questions.len()).map(|_| None).collect());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(q) = questions.get(i) else { break };
                    let r = self.ask(subject, q);
                    slots.lock().expect("no worker panics while holding the lock")[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .expect("workers finished")
            .into_iter()
            .map(|r| r.expect("every question was graded"))
            .collect()
    }
}
