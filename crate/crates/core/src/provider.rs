//! Uniform gateway to model backends.
//!
//! Three backends sit behind one [`Provider`] handle: a live HTTP
//! chat-completion client (with retries, rate limiting, and response
//! caching), a deterministic scripted policy backend for offline runs, and a
//! transcript-replay backend. Every returned turn can be appended to a
//! transcript file, and a recorded transcript replays byte-for-byte.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::Rational;
use crate::domain::{ftype_of_gold, stable_seed, FType, Label, RootCause, Sample};
use crate::prompt::{
    TemplateId, JUDGE_VALIDITY_KEY, SENTINEL_INVALID, SENTINEL_VALID, VALID_JUSTIFICATION_MARKER,
};

/// Errors surfaced by the provider layer.
#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid scripted policy: {0}")]
    InvalidPolicy(String),
    #[error("backend unreachable after {attempts} attempt(s): {detail}")]
    ProviderUnreachable { attempts: u32, detail: String },
    #[error("credential environment variable {var} is not set")]
    CredentialMissing { var: String },
    #[error("transcript has no record for request tag {request_tag:?}")]
    ReplayMiss { request_tag: String },
    #[error("call budget of {limit} reached")]
    BudgetExceeded { limit: u64 },
    #[error("transcript line {line}: {detail}")]
    TranscriptError { line: usize, detail: String },
    #[error("response shape unusable: {0}")]
    MalformedResponse(String),
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Chat message role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// One chat message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
}

impl Message {
    pub fn user(text: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            text: text.into(),
        }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            text: text.into(),
        }
    }
}

/// One logical completion call.
///
/// `request_tag` keys caching, transcripts, and replay; within a run it is
/// unique per logical call. Construction validates the shape invariants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionRequest {
    pub model_name: String,
    pub messages: Vec<Message>,
    pub temperature: Rational,
    pub max_tokens: u32,
    pub request_tag: String,
}

impl CompletionRequest {
    pub fn new(
        model_name: impl Into<String>,
        messages: Vec<Message>,
        temperature: Rational,
        max_tokens: u32,
        request_tag: impl Into<String>,
    ) -> Result<Self, ProviderError> {
        let request = CompletionRequest {
            model_name: model_name.into(),
            messages,
            temperature,
            max_tokens,
            request_tag: request_tag.into(),
        };
        if request.messages.is_empty() {
            return Err(ProviderError::InvalidRequest(
                "messages must be non-empty".into(),
            ));
        }
        if request.temperature < Rational::new(0, 1) {
            return Err(ProviderError::InvalidRequest(format!(
                "temperature {} must be non-negative",
                request.temperature
            )));
        }
        if request.max_tokens == 0 {
            return Err(ProviderError::InvalidRequest(
                "max_tokens must be positive".into(),
            ));
        }
        Ok(request)
    }
}

/// Where a completion came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Scripted,
    Replay,
    Cache,
}

/// One completed model call, with the completion recorded verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelTurn {
    pub request_tag: String,
    pub raw_completion: String,
    pub latency_ms: u64,
    pub backend: BackendKind,
    pub attempt_count: u32,
}

/// Digest over the semantic request content (model, messages, temperature,
/// max_tokens). The request tag is deliberately excluded so identical calls
/// issued under different tags share a cache entry.
pub fn request_digest(request: &CompletionRequest) -> String {
    let mut hasher = Sha256::new();
    let mut frame = |bytes: &[u8]| {
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    };
    frame(request.model_name.as_bytes());
    for message in &request.messages {
        frame(message.role.as_str().as_bytes());
        frame(message.text.as_bytes());
    }
    frame(
        format!(
            "{}/{}",
            request.temperature.numer(),
            request.temperature.denom()
        )
        .as_bytes(),
    );
    frame(&request.max_tokens.to_le_bytes());
    hex::encode(hasher.finalize())
}

/// Structured form of a request tag: `phase-key|sample-id|template-code|condition`.
///
/// The first three segments may not contain `|`; the condition is the
/// remainder of the tag and uses `;`-separated `key=value` pairs, or `-`
/// when empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestTag {
    pub phase_key: String,
    pub sample_id: String,
    pub template_code: String,
    pub condition: String,
}

impl RequestTag {
    pub fn format(
        phase_key: &str,
        sample_id: &str,
        template_code: &str,
        condition: &str,
    ) -> String {
        let condition = if condition.is_empty() { "-" } else { condition };
        format!("{phase_key}|{sample_id}|{template_code}|{condition}")
    }

    pub fn parse(tag: &str) -> Result<RequestTag, ProviderError> {
        let mut parts = tag.splitn(4, '|');
        let take = |part: Option<&str>| {
            part.filter(|p| !p.is_empty())
                .map(str::to_string)
                .ok_or_else(|| {
                    ProviderError::InvalidRequest(format!(
                        "request tag {tag:?} is not phase|sample|template|condition"
                    ))
                })
        };
        Ok(RequestTag {
            phase_key: take(parts.next())?,
            sample_id: take(parts.next())?,
            template_code: take(parts.next())?,
            condition: take(parts.next())?,
        })
    }
}

/// Looks up `key` in a `;`-separated `key=value` condition string.
pub fn condition_field<'a>(condition: &'a str, key: &str) -> Option<&'a str> {
    condition
        .split(';')
        .filter_map(|pair| pair.split_once('='))
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v)
}

// ---------------------------------------------------------------------------
// Scripted backend
// ---------------------------------------------------------------------------

/// What a scripted completion should express.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Answer with the sample's gold label.
    EmitGold,
    /// Answer with a definite label that contradicts gold.
    EmitWrongDefinite,
    /// Answer `Unknown` without a usable justification.
    EmitUnknown,
    /// Answer `Unknown` and justify it with the validity marker phrase.
    EmitUnknownValidJustification,
    /// Echo the label assigned in the request condition (guidance turns).
    EmitAssigned,
}

/// Matches request phase keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseMatcher {
    Any,
    Exact(String),
    Prefix(String),
}

impl PhaseMatcher {
    pub fn matches(&self, phase_key: &str) -> bool {
        match self {
            PhaseMatcher::Any => true,
            PhaseMatcher::Exact(key) => key == phase_key,
            PhaseMatcher::Prefix(prefix) => phase_key.starts_with(prefix.as_str()),
        }
    }
}

/// One scripted policy rule: when phase and ftype match, draw an outcome
/// from the distribution. Rules are checked in order; first match wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRule {
    pub phase: PhaseMatcher,
    /// `None` matches both ftypes.
    pub ftype: Option<FType>,
    /// (outcome, probability); probabilities are exact rationals summing to 1.
    pub distribution: Vec<(Outcome, crate::domain::Rate)>,
}

impl PolicyRule {
    /// A rule that always emits one outcome.
    pub fn always(phase: PhaseMatcher, ftype: Option<FType>, outcome: Outcome) -> PolicyRule {
        PolicyRule {
            phase,
            ftype,
            distribution: vec![(outcome, crate::domain::Rate::one())],
        }
    }
}

/// Forces an outcome for one sample in matching phases; checked before rules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverrideRule {
    pub phase: PhaseMatcher,
    pub sample_id: String,
    pub outcome: Outcome,
}

/// Deterministic answer policy: same (policy, request tag) always yields the
/// same completion. The outcome draw is keyed by (seed, phase key, sample id)
/// only, so related turns of one sample within a phase agree with each other.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedPolicy {
    pub seed: u64,
    pub rules: Vec<PolicyRule>,
    #[serde(default)]
    pub overrides: Vec<OverrideRule>,
    /// Relative weights for root-cause judgments; defaults to uniform.
    #[serde(default = "default_cause_weights")]
    pub cause_weights: Vec<(RootCause, u32)>,
}

fn default_cause_weights() -> Vec<(RootCause, u32)> {
    RootCause::ALL.iter().map(|&c| (c, 1)).collect()
}

impl ScriptedPolicy {
    pub fn new(seed: u64, rules: Vec<PolicyRule>) -> ScriptedPolicy {
        ScriptedPolicy {
            seed,
            rules,
            overrides: Vec::new(),
            cause_weights: default_cause_weights(),
        }
    }

    fn validate(&self) -> Result<(), ProviderError> {
        for (i, rule) in self.rules.iter().enumerate() {
            if rule.distribution.is_empty() {
                return Err(ProviderError::InvalidPolicy(format!(
                    "rule {i} has an empty distribution"
                )));
            }
            let total: Rational = rule.distribution.iter().map(|(_, r)| r.as_ratio()).sum();
            if total != Rational::new(1, 1) {
                return Err(ProviderError::InvalidPolicy(format!(
                    "rule {i} distribution sums to {total}, expected 1"
                )));
            }
        }
        if self.cause_weights.is_empty() || self.cause_weights.iter().all(|(_, w)| *w == 0) {
            return Err(ProviderError::InvalidPolicy(
                "cause weights must include a positive weight".into(),
            ));
        }
        Ok(())
    }
}

/// Answers every request from a [`ScriptedPolicy`], phrasing completions in
/// the exact output grammar of the requested template so the parser path is
/// exercised identically offline and live.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    policy: ScriptedPolicy,
    gold_by_id: BTreeMap<String, Label>,
}

/// Gold labels keyed by sample id, as the scripted backend needs them.
pub fn sample_index(samples: &[Sample]) -> BTreeMap<String, Label> {
    samples.iter().map(|s| (s.id.clone(), s.gold)).collect()
}

impl ScriptedBackend {
    pub fn new(
        policy: ScriptedPolicy,
        gold_by_id: BTreeMap<String, Label>,
    ) -> Result<Self, ProviderError> {
        policy.validate()?;
        Ok(ScriptedBackend { policy, gold_by_id })
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        let tag = RequestTag::parse(&request.request_tag)?;
        if tag.template_code == JUDGE_VALIDITY_KEY {
            let has_marker = request
                .messages
                .iter()
                .any(|m| m.text.contains(VALID_JUSTIFICATION_MARKER));
            let verdict = if has_marker {
                SENTINEL_VALID
            } else {
                SENTINEL_INVALID
            };
            return Ok(format!("Verdict: {verdict}"));
        }
        let template = TemplateId::from_code(&tag.template_code).ok_or_else(|| {
            ProviderError::InvalidRequest(format!("unknown template code {:?}", tag.template_code))
        })?;
        if template == TemplateId::RootCauseJudge {
            return Ok(format!("Cause: {}", self.draw_cause(&tag).sentinel()));
        }

        let gold = *self.gold_by_id.get(&tag.sample_id).ok_or_else(|| {
            ProviderError::InvalidRequest(format!(
                "sample {:?} not in scripted index",
                tag.sample_id
            ))
        })?;
        let (outcome, mut rng) = self.draw_outcome(&tag, gold);
        let label = match outcome {
            Outcome::EmitGold => gold,
            Outcome::EmitWrongDefinite => gold
                .opposite_definite()
                .unwrap_or_else(|| [Label::Proved, Label::Disproved][rng.gen_range(0..2usize)]),
            Outcome::EmitUnknown | Outcome::EmitUnknownValidJustification => Label::Unknown,
            Outcome::EmitAssigned => condition_field(&tag.condition, "assigned")
                .and_then(Label::from_sentinel)
                .unwrap_or(gold),
        };
        let with_marker = outcome == Outcome::EmitUnknownValidJustification;
        Ok(scripted_completion(template, label, with_marker))
    }

    fn draw_outcome(&self, tag: &RequestTag, gold: Label) -> (Outcome, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(&[
            &self.policy.seed.to_le_bytes(),
            b"scripted-outcome",
            tag.phase_key.as_bytes(),
            tag.sample_id.as_bytes(),
        ]));
        for rule in &self.policy.overrides {
            if rule.sample_id == tag.sample_id && rule.phase.matches(&tag.phase_key) {
                return (rule.outcome, rng);
            }
        }
        let ftype = ftype_of_gold(gold);
        for rule in &self.policy.rules {
            if rule.phase.matches(&tag.phase_key) && rule.ftype.is_none_or(|f| f == ftype) {
                let outcome = draw_from_distribution(&rule.distribution, &mut rng);
                return (outcome, rng);
            }
        }
        (Outcome::EmitGold, rng)
    }

    fn draw_cause(&self, tag: &RequestTag) -> RootCause {
        let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(&[
            &self.policy.seed.to_le_bytes(),
            b"scripted-cause",
            tag.phase_key.as_bytes(),
            tag.sample_id.as_bytes(),
        ]));
        let total: u64 = self
            .policy
            .cause_weights
            .iter()
            .map(|(_, w)| u64::from(*w))
            .sum();
        let mut x = rng.gen_range(0..total);
        for (cause, weight) in &self.policy.cause_weights {
            let weight = u64::from(*weight);
            if x < weight {
                return *cause;
            }
            x -= weight;
        }
        unreachable!("weights sum to total")
    }
}

/// Exact categorical draw over rational probabilities.
fn draw_from_distribution(
    distribution: &[(Outcome, crate::domain::Rate)],
    rng: &mut ChaCha8Rng,
) -> Outcome {
    fn gcd(a: u64, b: u64) -> u64 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    let denom = distribution
        .iter()
        .map(|(_, r)| r.parts().1 as u64)
        .fold(1u64, |acc, d| acc / gcd(acc, d) * d);
    let x = rng.gen_range(0..denom);
    let mut cumulative = 0u64;
    for (outcome, rate) in distribution {
        let (n, d) = rate.parts();
        cumulative += n as u64 * (denom / d as u64);
        if x < cumulative {
            return *outcome;
        }
    }
    distribution.last().expect("validated non-empty").0
}

/// Phrases a scripted answer in the output grammar of `template`.
fn scripted_completion(template: TemplateId, label: Label, with_marker: bool) -> String {
    match template {
        TemplateId::DirectPredict => label.sentinel().to_string(),
        TemplateId::ConciseStim
        | TemplateId::DetailedStim
        | TemplateId::RtgWithRp
        | TemplateId::RtgLabelGuide => format!("Conclusion: {}", label.sentinel()),
        TemplateId::RpElicit | TemplateId::JustifyUnknown => {
            let reasoning = if with_marker && label == Label::Unknown {
                format!("Taken together, {VALID_JUSTIFICATION_MARKER}.")
            } else if label == Label::Unknown {
                "The chain of facts stops short of the hypothesis.".to_string()
            } else {
                "Chaining the stated facts yields the conclusion directly.".to_string()
            };
            format!(
                "Reasoning Process: {reasoning}\nConclusion: {}",
                label.sentinel()
            )
        }
        TemplateId::RootCauseJudge => {
            unreachable!("root-cause completions are synthesized separately")
        }
    }
}

// ---------------------------------------------------------------------------
// Live backend
// ---------------------------------------------------------------------------

/// Wire configuration for the live backend. Field names map the abstract
/// "messages in, completion text out" shape onto a concrete JSON API, so
/// OpenAI-style and similar endpoints work without code changes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LiveConfig {
    pub endpoint_url: String,
    /// Name of the environment variable holding the API credential.
    pub credential_env: Option<String>,
    pub auth_header: String,
    pub auth_prefix: String,
    pub model_field: String,
    pub messages_field: String,
    pub role_field: String,
    pub content_field: String,
    pub temperature_field: String,
    pub max_tokens_field: String,
    /// JSON pointer to the completion text in the response body.
    pub completion_path: String,
    pub timeout_ms: u64,
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
}

impl Default for LiveConfig {
    fn default() -> Self {
        LiveConfig {
            endpoint_url: String::new(),
            credential_env: None,
            auth_header: "Authorization".into(),
            auth_prefix: "Bearer ".into(),
            model_field: "model".into(),
            messages_field: "messages".into(),
            role_field: "role".into(),
            content_field: "content".into(),
            temperature_field: "temperature".into(),
            max_tokens_field: "max_tokens".into(),
            completion_path: "/choices/0/message/content".into(),
            timeout_ms: 30_000,
            max_attempts: 3,
            initial_backoff_ms: 250,
        }
    }
}

/// HTTP chat-completion client with bounded retries and backoff.
#[derive(Debug)]
pub struct LiveBackend {
    config: LiveConfig,
    client: reqwest::blocking::Client,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, ProviderError> {
        if config.endpoint_url.is_empty() {
            return Err(ProviderError::InvalidRequest(
                "live endpoint_url must be set".into(),
            ));
        }
        if config.max_attempts == 0 {
            return Err(ProviderError::InvalidRequest(
                "max_attempts must be positive".into(),
            ));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| ProviderError::ProviderUnreachable {
                attempts: 0,
                detail: e.to_string(),
            })?;
        Ok(LiveBackend { config, client })
    }

    fn body(&self, request: &CompletionRequest) -> serde_json::Value {
        let cfg = &self.config;
        let messages: Vec<serde_json::Value> = request
            .messages
            .iter()
            .map(|m| {
                serde_json::json!({
                    cfg.role_field.as_str(): m.role.as_str(),
                    cfg.content_field.as_str(): m.text,
                })
            })
            .collect();
        let temperature = *request.temperature.numer() as f64 / *request.temperature.denom() as f64;
        serde_json::json!({
            cfg.model_field.as_str(): request.model_name,
            cfg.messages_field.as_str(): messages,
            cfg.temperature_field.as_str(): temperature,
            cfg.max_tokens_field.as_str(): request.max_tokens,
        })
    }

    fn complete(&self, request: &CompletionRequest) -> Result<(String, u32), ProviderError> {
        let cfg = &self.config;
        let credential = match &cfg.credential_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| ProviderError::CredentialMissing { var: var.clone() })?,
            ),
            None => None,
        };
        let body = self.body(request);
        let mut last_detail = String::new();
        for attempt in 1..=cfg.max_attempts {
            if attempt > 1 {
                let backoff = cfg.initial_backoff_ms.saturating_mul(1 << (attempt - 2));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            let mut call = self.client.post(&cfg.endpoint_url).json(&body);
            if let Some(cred) = &credential {
                call = call.header(
                    cfg.auth_header.as_str(),
                    format!("{}{}", cfg.auth_prefix, cred),
                );
            }
            match call.send() {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        let value: serde_json::Value = response.json().map_err(|e| {
                            ProviderError::MalformedResponse(format!("response is not JSON: {e}"))
                        })?;
                        let completion = value
                            .pointer(&cfg.completion_path)
                            .and_then(serde_json::Value::as_str)
                            .ok_or_else(|| {
                                ProviderError::MalformedResponse(format!(
                                    "no string at {} in response",
                                    cfg.completion_path
                                ))
                            })?;
                        return Ok((completion.to_string(), attempt));
                    }
                    let transient = status.as_u16() == 408
                        || status.as_u16() == 429
                        || status.is_server_error();
                    last_detail = format!("HTTP {status}");
                    if !transient {
                        return Err(ProviderError::ProviderUnreachable {
                            attempts: attempt,
                            detail: last_detail,
                        });
                    }
                }
                Err(e) => last_detail = e.to_string(),
            }
        }
        Err(ProviderError::ProviderUnreachable {
            attempts: cfg.max_attempts,
            detail: last_detail,
        })
    }
}

// ---------------------------------------------------------------------------
// Transcript and replay
// ---------------------------------------------------------------------------

/// One transcript line: enough to replay the turn and to pre-warm the cache.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub digest: String,
    pub request_tag: String,
    pub raw_completion: String,
    pub latency_ms: u64,
    pub backend: BackendKind,
    pub attempt_count: u32,
}

impl TranscriptRecord {
    fn turn(&self) -> ModelTurn {
        ModelTurn {
            request_tag: self.request_tag.clone(),
            raw_completion: self.raw_completion.clone(),
            latency_ms: self.latency_ms,
            backend: self.backend,
            attempt_count: self.attempt_count,
        }
    }
}

/// Serves recorded turns verbatim, keyed by request tag, so a replayed run
/// reproduces every turn byte-for-byte.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    records: HashMap<String, TranscriptRecord>,
}

impl ReplayBackend {
    /// Later records supersede earlier ones with the same tag (a turn can be
    /// legitimately re-recorded when a run is resumed after a crash).
    pub fn from_records(records: Vec<TranscriptRecord>) -> Self {
        ReplayBackend {
            records: records
                .into_iter()
                .map(|r| (r.request_tag.clone(), r))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<ModelTurn, ProviderError> {
        self.records
            .get(&request.request_tag)
            .map(TranscriptRecord::turn)
            .ok_or_else(|| ProviderError::ReplayMiss {
                request_tag: request.request_tag.clone(),
            })
    }
}

/// Parses a transcript file strictly: every non-blank line must be a record.
pub fn load_transcript(path: &Path) -> Result<Vec<TranscriptRecord>, ProviderError> {
    let (records, tail_error) = read_transcript(path)?;
    if let Some((line, detail)) = tail_error {
        return Err(ProviderError::TranscriptError { line, detail });
    }
    Ok(records)
}

/// Parses a transcript file, tolerating one torn final line (the normal
/// artifact of a crash mid-write). Returns the records and whether a torn
/// tail was dropped. Corruption anywhere else is still an error.
pub fn load_transcript_lossy(path: &Path) -> Result<(Vec<TranscriptRecord>, bool), ProviderError> {
    let (records, tail_error) = read_transcript(path)?;
    Ok((records, tail_error.is_some()))
}

type TailError = Option<(usize, String)>;

fn read_transcript(path: &Path) -> Result<(Vec<TranscriptRecord>, TailError), ProviderError> {
    let raw = std::fs::read_to_string(path).map_err(|source| ProviderError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let lines: Vec<(usize, &str)> = raw
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    let mut records = Vec::with_capacity(lines.len());
    for (idx, (line_no, line)) in lines.iter().enumerate() {
        match serde_json::from_str::<TranscriptRecord>(line) {
            Ok(record) => records.push(record),
            Err(e) if idx + 1 == lines.len() => {
                return Ok((records, Some((*line_no, e.to_string()))))
            }
            Err(e) => {
                return Err(ProviderError::TranscriptError {
                    line: *line_no,
                    detail: e.to_string(),
                })
            }
        }
    }
    Ok((records, None))
}

// ---------------------------------------------------------------------------
// Rate limiting
// ---------------------------------------------------------------------------

/// Sliding-window limiter: at most `max_per_second` acquisitions in any
/// one-second window.
#[derive(Debug)]
pub struct RateLimiter {
    max_per_second: u32,
    issued: Mutex<VecDeque<Instant>>,
}

impl RateLimiter {
    pub fn new(max_per_second: u32) -> RateLimiter {
        RateLimiter {
            max_per_second: max_per_second.max(1),
            issued: Mutex::new(VecDeque::new()),
        }
    }

    /// Blocks until issuing one more request keeps the window under limit.
    pub fn acquire(&self) {
        let window = Duration::from_secs(1);
        loop {
            let wait = {
                let mut issued = self.issued.lock().expect("limiter lock");
                let now = Instant::now();
                while issued
                    .front()
                    .is_some_and(|t| now.duration_since(*t) >= window)
                {
                    issued.pop_front();
                }
                if issued.len() < self.max_per_second as usize {
                    issued.push_back(now);
                    return;
                }
                window - now.duration_since(issued.front().copied().expect("non-empty"))
            };
            std::thread::sleep(wait);
        }
    }
}

// ---------------------------------------------------------------------------
// Provider
// ---------------------------------------------------------------------------

/// The concrete answer source behind a [`Provider`].
///
/// One value exists per run, so the size spread between variants does not
/// justify boxing the live backend.
#[allow(clippy::large_enum_variant)]
#[derive(Debug)]
pub enum Backend {
    Live(LiveBackend),
    Scripted(ScriptedBackend),
    Replay(ReplayBackend),
}

/// Uniform, internally synchronized gateway: caching (live responses),
/// rate limiting, call budgeting, and transcript recording around a backend.
/// Shareable across threads behind `&self`.
#[derive(Debug)]
pub struct Provider {
    backend: Backend,
    cache: Mutex<HashMap<String, String>>,
    limiter: Option<RateLimiter>,
    budget: Option<u64>,
    calls_used: Mutex<u64>,
    transcript: Option<Mutex<std::io::BufWriter<std::fs::File>>>,
}

impl Provider {
    pub fn new(backend: Backend) -> Provider {
        Provider {
            backend,
            cache: Mutex::new(HashMap::new()),
            limiter: None,
            budget: None,
            calls_used: Mutex::new(0),
            transcript: None,
        }
    }

    /// Caps live request issue rate (cache hits are not throttled).
    pub fn with_rate_limit(mut self, max_per_second: u32) -> Provider {
        self.limiter = Some(RateLimiter::new(max_per_second));
        self
    }

    /// Caps the number of backend calls (cache hits do not count).
    pub fn with_budget(mut self, max_calls: u64) -> Provider {
        self.budget = Some(max_calls);
        self
    }

    /// Appends every returned turn to a transcript file at `path`.
    pub fn with_transcript(mut self, path: &Path) -> Result<Provider, ProviderError> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| ProviderError::Io {
                path: path.display().to_string(),
                source,
            })?;
        self.transcript = Some(Mutex::new(std::io::BufWriter::new(file)));
        Ok(self)
    }

    /// Seeds the response cache from previously recorded turns.
    pub fn prewarm_cache(&self, records: &[TranscriptRecord]) {
        let mut cache = self.cache.lock().expect("cache lock");
        for record in records {
            cache.insert(record.digest.clone(), record.raw_completion.clone());
        }
    }

    /// Backend calls made so far (excludes cache hits).
    pub fn calls_used(&self) -> u64 {
        *self.calls_used.lock().expect("budget lock")
    }

    /// Completes one request. Live requests are answered from the response
    /// cache when an identical request (same model, messages, temperature,
    /// max_tokens) was completed before.
    pub fn complete(&self, request: &CompletionRequest) -> Result<ModelTurn, ProviderError> {
        let digest = request_digest(request);
        if matches!(self.backend, Backend::Live(_)) {
            let hit = self.cache.lock().expect("cache lock").get(&digest).cloned();
            if let Some(raw_completion) = hit {
                let turn = ModelTurn {
                    request_tag: request.request_tag.clone(),
                    raw_completion,
                    latency_ms: 0,
                    backend: BackendKind::Cache,
                    attempt_count: 1,
                };
                self.record(&digest, &turn)?;
                return Ok(turn);
            }
        }

        {
            let mut used = self.calls_used.lock().expect("budget lock");
            if let Some(limit) = self.budget {
                if *used >= limit {
                    return Err(ProviderError::BudgetExceeded { limit });
                }
            }
            *used += 1;
        }

        let turn = match &self.backend {
            Backend::Live(live) => {
                if let Some(limiter) = &self.limiter {
                    limiter.acquire();
                }
                let started = Instant::now();
                let (raw_completion, attempt_count) = live.complete(request)?;
                let turn = ModelTurn {
                    request_tag: request.request_tag.clone(),
                    raw_completion,
                    latency_ms: started.elapsed().as_millis() as u64,
                    backend: BackendKind::Live,
                    attempt_count,
                };
                self.cache
                    .lock()
                    .expect("cache lock")
                    .insert(digest.clone(), turn.raw_completion.clone());
                turn
            }
            Backend::Scripted(scripted) => ModelTurn {
                request_tag: request.request_tag.clone(),
                raw_completion: scripted.complete(request)?,
                latency_ms: 0,
                backend: BackendKind::Scripted,
                attempt_count: 1,
            },
            Backend::Replay(replay) => replay.complete(request)?,
        };
        self.record(&digest, &turn)?;
        Ok(turn)
    }

    fn record(&self, digest: &str, turn: &ModelTurn) -> Result<(), ProviderError> {
        if let Some(writer) = &self.transcript {
            let record = TranscriptRecord {
                digest: digest.to_string(),
                request_tag: turn.request_tag.clone(),
                raw_completion: turn.raw_completion.clone(),
                latency_ms: turn.latency_ms,
                backend: turn.backend,
                attempt_count: turn.attempt_count,
            };
            let mut writer = writer.lock().expect("transcript lock");
            let io_err = |source: std::io::Error| ProviderError::Io {
                path: "transcript".to_string(),
                source,
            };
            serde_json::to_writer(&mut *writer, &record)
                .map_err(|e| io_err(std::io::Error::other(e)))?;
            writer.write_all(b"\n").map_err(io_err)?;
            writer.flush().map_err(io_err)?;
        }
        Ok(())
    }
}
