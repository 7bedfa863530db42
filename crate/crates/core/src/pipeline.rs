//! Phase orchestration with checkpointed, resumable, append-only trajectory
//! persistence.
//!
//! A run lives in one directory: `manifest.json` (config digest, seed,
//! template digests), `trajectory.jsonl` (append-only records, one per line,
//! totally ordered by sequence number), `partitions/<phase>.json` (per-phase
//! id sets; existence marks the phase complete), and `transcript.jsonl`
//! (every provider turn). Phases are strict barriers: a phase's records are
//! durable before the next phase starts, and each phase's input set comes
//! from a persisted partition of an earlier phase.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{content_digest, samples_to_jsonl, DatasetError, SampleSet};
use crate::domain::{
    classify_verdict, ftype_of, stream_seed, DomainError, FType, IdSet, Label, Phase, Rate,
    Rational, RootCause, Sample, SampleForm, StageId, Verdict,
};
use crate::prompt::{
    assign_guidance_label, parse_completion, parse_validity, render, render_judge_validity,
    ParsedCompletion, PromptError, RenderCondition, TemplateId, TemplateStore, JUDGE_VALIDITY_KEY,
    VALID_JUSTIFICATION_MARKER,
};
use crate::provider::{
    load_transcript, load_transcript_lossy, sample_index, Backend, BackendKind, CompletionRequest,
    LiveBackend, LiveConfig, Message, ModelTurn, Provider, ProviderError, ReplayBackend,
    RequestTag, ScriptedBackend, ScriptedPolicy, TranscriptRecord,
};

/// Errors raised by run orchestration.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Malformed { path: String, detail: String },
    #[error("config digest {found} does not match the run manifest ({expected})")]
    ManifestMismatch { expected: String, found: String },
    #[error("sample set digest {found} does not match the run manifest ({expected})")]
    SampleSetMismatch { expected: String, found: String },
    #[error("template {key} differs from the content pinned in the run manifest")]
    TemplateMismatch { key: String },
    #[error("phase {phase} requires completed phase {requirement}")]
    MissingPhase { phase: String, requirement: String },
    #[error("sample {sample_id}: no recorded reasoning from phase {phase}")]
    MissingReasoning { sample_id: String, phase: String },
    #[error("sample {sample_id} is not in the run's sample set")]
    UnknownSample { sample_id: String },
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("run directory is locked by another process ({path})")]
    LockHeld { path: String },
    #[error("run already initialized at {path}; resume it instead")]
    AlreadyInitialized { path: String },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Which answer source backs the run.
///
/// One value exists per run, so the size spread between variants does not
/// justify boxing the live-endpoint settings.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderConfig {
    /// Deterministic offline policy.
    Scripted { policy: ScriptedPolicy },
    /// HTTP endpoint, with optional request-per-second throttling.
    Live {
        http: LiveConfig,
        #[serde(default)]
        requests_per_second: Option<u32>,
    },
    /// Serve a previously recorded transcript verbatim.
    Replay { transcript: PathBuf },
}

/// Who judges justification validity: a local marker check, or a model call
/// through the run's provider (optionally under a different model name).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JudgeConfig {
    Scripted,
    Model {
        #[serde(default)]
        model_name: Option<String>,
    },
}

/// Stimulation phrasing style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StimStyle {
    Concise,
    Detailed,
}

/// Total mapping from sample form to stimulation style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleMap {
    pub fact: StimStyle,
    pub story: StimStyle,
}

impl Default for StyleMap {
    fn default() -> Self {
        StyleMap {
            fact: StimStyle::Detailed,
            story: StimStyle::Concise,
        }
    }
}

impl StyleMap {
    pub fn style_for(&self, form: SampleForm) -> StimStyle {
        match form {
            SampleForm::Fact => self.fact,
            SampleForm::Story => self.story,
        }
    }

    /// The inverse mapping (used by style-swap comparisons).
    pub fn swapped(&self) -> StyleMap {
        StyleMap {
            fact: self.story,
            story: self.fact,
        }
    }
}

mod rational_serde {
    use super::Rational;
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &Rational, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&format!("{}/{}", value.numer(), value.denom()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Rational, D::Error> {
        let raw = String::deserialize(deserializer)?;
        parse(&raw).ok_or_else(|| D::Error::custom(format!("not a non-negative rational: {raw:?}")))
    }

    /// Accepts `"n/d"` fractions, exact decimals (`"0.25"`), and integers.
    pub fn parse(raw: &str) -> Option<Rational> {
        let raw = raw.trim();
        if raw.starts_with('-') {
            return None;
        }
        if let Some((n, d)) = raw.split_once('/') {
            let n: i64 = n.trim().parse().ok()?;
            let d: i64 = d.trim().parse().ok()?;
            if d <= 0 {
                return None;
            }
            Some(Rational::new(n, d))
        } else if let Some((int, frac)) = raw.split_once('.') {
            if frac.is_empty() || frac.len() > 12 {
                return None;
            }
            let scale = 10i64.checked_pow(frac.len() as u32)?;
            let int: i64 = if int.is_empty() { 0 } else { int.parse().ok()? };
            let frac: i64 = frac.parse().ok()?;
            Some(Rational::new(int * scale + frac, scale))
        } else {
            Some(Rational::new(raw.parse().ok()?, 1))
        }
    }
}

fn default_misguide_grid() -> Vec<Rate> {
    vec![
        Rate::one(),
        Rate::new(2, 3).expect("2/3 is a valid rate"),
        Rate::new(1, 2).expect("1/2 is a valid rate"),
        Rate::zero(),
    ]
}

/// Full configuration of one run.
///
/// The digest of the behavioral fields is pinned in the run manifest;
/// resuming with different behavioral settings is refused. Operational knobs
/// (`concurrency_limit`, `call_budget`, `template_dir`) may change across
/// resumes — template *contents* are still pinned via their digests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    pub model_name: String,
    pub provider: ProviderConfig,
    pub judge: JudgeConfig,
    pub style_map: StyleMap,
    /// When set, stimulation turns use the reasoning-eliciting template so
    /// later phases can feed the chain back in.
    pub capture_reasoning: bool,
    pub misguide_grid: Vec<Rate>,
    pub rtg_stages: Vec<StageId>,
    pub seed: u64,
    pub concurrency_limit: usize,
    pub call_budget: Option<u64>,
    #[serde(with = "rational_serde")]
    pub temperature: Rational,
    pub max_tokens: u32,
    /// Directory of template override files, if any.
    pub template_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "run".to_string(),
            model_name: "scripted-model".to_string(),
            provider: ProviderConfig::Scripted {
                policy: ScriptedPolicy::new(0, Vec::new()),
            },
            judge: JudgeConfig::Scripted,
            style_map: StyleMap::default(),
            capture_reasoning: false,
            misguide_grid: default_misguide_grid(),
            rtg_stages: vec![StageId::One, StageId::Two],
            seed: 7,
            concurrency_limit: 4,
            call_budget: None,
            temperature: Rational::new(0, 1),
            max_tokens: 1024,
            template_dir: None,
        }
    }
}

/// The fields whose change must invalidate a resume. Operational knobs are
/// deliberately absent.
#[derive(Serialize)]
struct BehavioralView<'a> {
    run_id: &'a str,
    model_name: &'a str,
    provider: &'a ProviderConfig,
    judge: &'a JudgeConfig,
    style_map: &'a StyleMap,
    capture_reasoning: bool,
    misguide_grid: &'a [Rate],
    rtg_stages: &'a [StageId],
    seed: u64,
    #[serde(with = "rational_serde")]
    temperature: Rational,
    max_tokens: u32,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.run_id.is_empty() {
            return Err(PipelineError::Config("run_id must be non-empty".into()));
        }
        if self.model_name.is_empty() {
            return Err(PipelineError::Config("model_name must be non-empty".into()));
        }
        if self.concurrency_limit == 0 {
            return Err(PipelineError::Config(
                "concurrency_limit must be positive".into(),
            ));
        }
        if self.max_tokens == 0 {
            return Err(PipelineError::Config("max_tokens must be positive".into()));
        }
        if self.misguide_grid.is_empty() {
            return Err(PipelineError::Config(
                "misguide_grid must be non-empty".into(),
            ));
        }
        if self.rtg_stages.is_empty() {
            return Err(PipelineError::Config("rtg_stages must be non-empty".into()));
        }
        let distinct: BTreeSet<u8> = self.rtg_stages.iter().map(|s| s.number()).collect();
        if distinct.len() != self.rtg_stages.len() {
            return Err(PipelineError::Config("rtg_stages must be distinct".into()));
        }
        if self.temperature < Rational::new(0, 1) {
            return Err(PipelineError::Config(
                "temperature must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 over the canonical serialization of the behavioral fields.
    pub fn digest(&self) -> String {
        let view = BehavioralView {
            run_id: &self.run_id,
            model_name: &self.model_name,
            provider: &self.provider,
            judge: &self.judge,
            style_map: &self.style_map,
            capture_reasoning: self.capture_reasoning,
            misguide_grid: &self.misguide_grid,
            rtg_stages: &self.rtg_stages,
            seed: self.seed,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        };
        content_digest(
            serde_json::to_string(&view)
                .expect("config serialization cannot fail")
                .as_bytes(),
        )
    }

    pub fn load(path: &Path) -> Result<RunConfig, PipelineError> {
        let raw = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: RunConfig = toml::from_str(&raw).map_err(|e| PipelineError::Malformed {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }
}

// ---------------------------------------------------------------------------
// Trajectory records and partitions
// ---------------------------------------------------------------------------

/// Who produced a judgment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeBackend {
    Scripted,
    Model,
}

/// Result of a judging step attached to a trajectory record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeResult {
    /// Whether the justification was judged valid; absent on root-cause
    /// records, which judge causes rather than justifications.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub justification_valid: Option<bool>,
    /// Present only on root-cause phase records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_cause: Option<RootCause>,
    pub judge_backend: JudgeBackend,
}

/// Condition slots a turn was issued under.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordCondition {
    /// Prior answer inlined into the prompt, when the template carries one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<Label>,
    /// Guidance label assigned during remind-then-guide turns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assigned_label: Option<Label>,
    /// Whether the guidance draw picked a label different from gold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub misguide_wrong: Option<bool>,
    /// Digest of the prior reasoning chain fed back in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_reasoning_digest: Option<String>,
}

impl RecordCondition {
    fn tag_string(&self) -> String {
        let mut parts = Vec::new();
        if let Some(answer) = self.answer {
            parts.push(format!("answer={}", answer.sentinel()));
        }
        if let Some(assigned) = self.assigned_label {
            parts.push(format!("assigned={}", assigned.sentinel()));
        }
        if let Some(mis) = self.misguide_wrong {
            parts.push(format!("mis={}", u8::from(mis)));
        }
        if let Some(digest) = &self.prior_reasoning_digest {
            parts.push(format!("rp={}", &digest[..digest.len().min(12)]));
        }
        parts.join(";")
    }
}

/// One appended trajectory line.
///
/// Each sample processed in a phase yields one *main* record (carrying the
/// parsed answer, any judge result, and the verdict) followed by records for
/// any auxiliary turns (justification elicitation, model judging). Records
/// are append-only and totally ordered by `seq` within a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub seq: u64,
    pub run_id: String,
    pub phase: Phase,
    pub sample_id: String,
    pub ftype: FType,
    pub gold: Label,
    /// Template code of the turn (or the judge-validity key).
    pub template: String,
    #[serde(default, skip_serializing_if = "is_default_condition")]
    pub condition: RecordCondition,
    pub turn: ModelTurn,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<ParsedCompletion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<JudgeResult>,
    /// Verdict of the sample's main answer in this phase; absent on
    /// auxiliary records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
}

fn is_default_condition(c: &RecordCondition) -> bool {
    *c == RecordCondition::default()
}

/// A phase's input ids split into the three verdict classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePartition {
    pub phase: Phase,
    pub input_ids: IdSet,
    pub tc: IdSet,
    pub fc: IdSet,
    pub uc: IdSet,
}

impl StagePartition {
    pub fn from_verdicts(phase: Phase, verdicts: &BTreeMap<String, Verdict>) -> StagePartition {
        let mut partition = StagePartition::empty(phase);
        for (id, verdict) in verdicts {
            partition.input_ids.insert(id.clone());
            match verdict {
                Verdict::TrueConverting => partition.tc.insert(id.clone()),
                Verdict::FalseConverting => partition.fc.insert(id.clone()),
                Verdict::UnexcitedConverting => partition.uc.insert(id.clone()),
            };
        }
        partition
    }

    pub fn empty(phase: Phase) -> StagePartition {
        StagePartition {
            phase,
            input_ids: IdSet::new(),
            tc: IdSet::new(),
            fc: IdSet::new(),
            uc: IdSet::new(),
        }
    }

    /// Checks that the three classes are pairwise disjoint and cover the
    /// input set exactly.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let key = self.phase.key();
        let mut union = IdSet::new();
        for (name, set) in [("tc", &self.tc), ("fc", &self.fc), ("uc", &self.uc)] {
            for id in set {
                if !union.insert(id.clone()) {
                    return Err(PipelineError::InvariantViolation(format!(
                        "{key}: sample {id} appears in more than one class (last seen in {name})"
                    )));
                }
            }
        }
        if union != self.input_ids {
            return Err(PipelineError::InvariantViolation(format!(
                "{key}: tc, fc, uc do not partition input_ids"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }
}

/// Output of the vague-perception detection pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectSummary {
    pub partition: StagePartition,
    /// The vague-perception set: samples stuck on an unjustified `Unknown`
    /// (identical to the detect partition's UC class).
    pub vp_ids: IdSet,
    /// Fraction of all samples whose detect verdict is TC.
    pub direct_accuracy: Rate,
    /// Samples whose completion carried no sentinel and was scored `Unknown`.
    pub parse_failure_ids: IdSet,
}

/// Output of the repeat-consistency ablation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub partition: StagePartition,
    pub unchanged_ids: IdSet,
    pub unchanged_rate: Rate,
    /// True when the input was empty and the rate is vacuously 1.
    pub empty_input: bool,
}

/// Output of root-cause annotation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RootCauseSummary {
    pub assignments: BTreeMap<String, RootCause>,
    pub counts: BTreeMap<RootCause, usize>,
    /// Sample id -> failure description for samples the judge could not
    /// annotate.
    pub unannotated: BTreeMap<String, String>,
}

/// Run manifest pinned at creation time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_digest: String,
    pub sample_digest: String,
    pub seed: u64,
    pub model_name: String,
    pub template_digests: BTreeMap<String, String>,
    pub created_unix_ms: u64,
}

/// Manifest JSON with the creation timestamp zeroed, for byte comparisons.
pub fn normalized_manifest_json(raw: &str) -> Result<String, PipelineError> {
    let mut manifest: RunManifest =
        serde_json::from_str(raw).map_err(|e| PipelineError::Malformed {
            path: "manifest".into(),
            detail: e.to_string(),
        })?;
    manifest.created_unix_ms = 0;
    Ok(serde_json::to_string(&manifest).expect("manifest serialization cannot fail"))
}

fn sample_set_digest(samples: &SampleSet) -> String {
    content_digest(samples_to_jsonl(&samples.samples).as_bytes())
}

// ---------------------------------------------------------------------------
// Run directory
// ---------------------------------------------------------------------------

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> RunDir {
        RunDir {
            root: root.to_path_buf(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn trajectory_path(&self) -> PathBuf {
        self.root.join("trajectory.jsonl")
    }

    pub fn transcript_path(&self) -> PathBuf {
        self.root.join("transcript.jsonl")
    }

    pub fn partitions_dir(&self) -> PathBuf {
        self.root.join("partitions")
    }

    pub fn partition_path(&self, phase_key: &str) -> PathBuf {
        self.partitions_dir().join(format!("{phase_key}.json"))
    }

    pub fn lock_path(&self) -> PathBuf {
        self.root.join(".lock")
    }

    fn ensure_layout(&self) -> Result<(), PipelineError> {
        std::fs::create_dir_all(self.partitions_dir()).map_err(|source| PipelineError::Io {
            path: self.partitions_dir().display().to_string(),
            source,
        })
    }
}

/// Exclusive-writer lock on a run directory; released on drop. The lock file
/// holds the owner's pid; a lock whose owner no longer appears under /proc is
/// reclaimed (crashed runs stay resumable).
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &RunDir) -> Result<RunLock, PipelineError> {
        let path = dir.lock_path();
        for _ in 0..2 {
            match std::fs::OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&path)
            {
                Ok(mut file) => {
                    let _ = write!(file, "{}", std::process::id());
                    return Ok(RunLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if lock_is_stale(&path) {
                        let _ = std::fs::remove_file(&path);
                        continue;
                    }
                    return Err(PipelineError::LockHeld {
                        path: path.display().to_string(),
                    });
                }
                Err(source) => {
                    return Err(PipelineError::Io {
                        path: path.display().to_string(),
                        source,
                    })
                }
            }
        }
        Err(PipelineError::LockHeld {
            path: path.display().to_string(),
        })
    }
}

fn lock_is_stale(path: &Path) -> bool {
    let Ok(raw) = std::fs::read_to_string(path) else {
        return false;
    };
    let Ok(pid) = raw.trim().parse::<u32>() else {
        // A torn or empty lock file cannot belong to a live writer.
        return true;
    };
    if pid == std::process::id() {
        return false;
    }
    !Path::new("/proc").join(pid.to_string()).exists()
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut body = serde_json::to_string(value).map_err(|e| PipelineError::Malformed {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    body.push('\n');
    std::fs::write(path, body).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>, PipelineError> {
    let raw = match std::fs::read_to_string(path) {
        Ok(raw) => raw,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(source) => {
            return Err(PipelineError::Io {
                path: path.display().to_string(),
                source,
            })
        }
    };
    serde_json::from_str(&raw)
        .map(Some)
        .map_err(|e| PipelineError::Malformed {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
}

/// Rewrites a JSONL file to contain exactly `records`, atomically. Used to
/// drop a torn final line before new appends would otherwise merge with it.
fn rewrite_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), PipelineError> {
    let io_err = |source: std::io::Error| PipelineError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut buffer = String::new();
    for record in records {
        buffer.push_str(
            &serde_json::to_string(record).map_err(|e| PipelineError::Malformed {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?,
        );
        buffer.push('\n');
    }
    let tmp = path.with_extension("repair");
    std::fs::write(&tmp, buffer).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)
}

/// Loads a trajectory file strictly: every line must parse and sequence
/// numbers must strictly increase.
pub fn load_trajectory(path: &Path) -> Result<Vec<TrajectoryRecord>, PipelineError> {
    let (records, torn) = load_trajectory_lossy(path)?;
    if let Some((line, detail)) = torn {
        return Err(PipelineError::Malformed {
            path: format!("{}:{line}", path.display()),
            detail,
        });
    }
    Ok(records)
}

/// A torn trailing trajectory line: its 1-based line number and raw text.
pub type TornLine = (usize, String);

/// Loads a trajectory tolerating one torn final line (crash artifact).
/// Corruption anywhere else is still an error.
pub fn load_trajectory_lossy(
    path: &Path,
) -> Result<(Vec<TrajectoryRecord>, Option<TornLine>), PipelineError> {
    let raw = match std::fs::read_to_string(path) {
        Ok(raw) => raw,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), None)),
        Err(source) => {
            return Err(PipelineError::Io {
                path: path.display().to_string(),
                source,
            })
        }
    };
    let lines: Vec<(usize, &str)> = raw
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    let mut records: Vec<TrajectoryRecord> = Vec::with_capacity(lines.len());
    for (idx, (line_no, line)) in lines.iter().enumerate() {
        match serde_json::from_str::<TrajectoryRecord>(line) {
            Ok(record) => {
                if let Some(prev) = records.last() {
                    if record.seq <= prev.seq {
                        return Err(PipelineError::Malformed {
                            path: format!("{}:{line_no}", path.display()),
                            detail: format!(
                                "sequence {} does not increase past {}",
                                record.seq, prev.seq
                            ),
                        });
                    }
                }
                records.push(record);
            }
            Err(e) if idx + 1 == lines.len() => {
                return Ok((records, Some((*line_no, e.to_string()))))
            }
            Err(e) => {
                return Err(PipelineError::Malformed {
                    path: format!("{}:{line_no}", path.display()),
                    detail: e.to_string(),
                })
            }
        }
    }
    Ok((records, None))
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// In-memory view of everything the trajectory has durably recorded.
#[derive(Debug, Default)]
struct RunState {
    next_seq: u64,
    /// phase key -> sample ids with durable records.
    done: BTreeMap<String, BTreeSet<String>>,
    /// (phase key, sample id) -> verdict of the main record.
    verdicts: BTreeMap<(String, String), Verdict>,
    /// (phase key, sample id) -> effective predicted label of the main turn.
    predicted: BTreeMap<(String, String), Label>,
    /// (phase key, sample id) -> reasoning captured on the main turn.
    reasoning: BTreeMap<(String, String), String>,
    /// (phase key, sample id) -> justification text (from the main turn or a
    /// follow-up justification turn).
    justifications: BTreeMap<(String, String), String>,
    /// (phase key, sample id) -> annotated root cause.
    causes: BTreeMap<(String, String), RootCause>,
    /// phase key -> samples whose main completion carried no sentinel.
    parse_failures: BTreeMap<String, BTreeSet<String>>,
}

impl RunState {
    fn absorb(&mut self, record: &TrajectoryRecord) {
        self.next_seq = self.next_seq.max(record.seq + 1);
        let key = record.phase.key();
        let slot = (key.clone(), record.sample_id.clone());
        if let Some(verdict) = record.verdict {
            // Main record of the sample's flow in this phase.
            self.done
                .entry(key.clone())
                .or_default()
                .insert(record.sample_id.clone());
            self.verdicts.insert(slot.clone(), verdict);
            if let Some(parsed) = &record.parsed {
                self.predicted
                    .insert(slot.clone(), parsed.effective_label());
                if parsed.label.is_none() {
                    self.parse_failures
                        .entry(key.clone())
                        .or_default()
                        .insert(record.sample_id.clone());
                }
                if let Some(reasoning) = &parsed.reasoning {
                    self.reasoning.insert(slot.clone(), reasoning.clone());
                    self.justifications
                        .entry(slot.clone())
                        .or_insert_with(|| reasoning.clone());
                }
            }
        } else if record.template == TemplateId::JustifyUnknown.code() {
            if let Some(reasoning) = record.parsed.as_ref().and_then(|p| p.reasoning.as_ref()) {
                self.justifications.insert(slot.clone(), reasoning.clone());
            }
        }
        if let Some(cause) = record.judge.as_ref().and_then(|j| j.root_cause) {
            self.done
                .entry(key)
                .or_default()
                .insert(record.sample_id.clone());
            self.causes.insert(slot, cause);
        }
    }
}

/// Records produced for one sample in one phase, in turn order; `seq` is
/// assigned by the single writer at append time.
struct SampleFlow {
    records: Vec<TrajectoryRecord>,
}

/// Orchestrates one run directory end to end.
pub struct Pipeline {
    config: RunConfig,
    store: TemplateStore,
    provider: Provider,
    dir: RunDir,
    _lock: RunLock,
    samples: BTreeMap<String, Sample>,
    sample_order: Vec<String>,
    state: RunState,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("run_id", &self.config.run_id)
            .field("root", &self.dir.root())
            .field("samples", &self.samples.len())
            .finish_non_exhaustive()
    }
}

impl Pipeline {
    /// Initializes a fresh run directory and pins the manifest.
    pub fn create(
        root: &Path,
        samples: &SampleSet,
        config: RunConfig,
    ) -> Result<Pipeline, PipelineError> {
        config.validate()?;
        let dir = RunDir::new(root);
        dir.ensure_layout()?;
        if dir.manifest_path().exists() {
            return Err(PipelineError::AlreadyInitialized {
                path: root.display().to_string(),
            });
        }
        let lock = RunLock::acquire(&dir)?;
        let store = Self::build_store(&config)?;
        let manifest = RunManifest {
            run_id: config.run_id.clone(),
            config_digest: config.digest(),
            sample_digest: sample_set_digest(samples),
            seed: config.seed,
            model_name: config.model_name.clone(),
            template_digests: store.digests(),
            created_unix_ms: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        };
        write_json(&dir.manifest_path(), &manifest)?;
        Self::assemble(dir, lock, store, samples, config)
    }

    /// Opens an existing run directory, verifying that the behavioral config,
    /// the sample set, and the template contents match the pinned manifest,
    /// and restores all durable state so execution continues from the first
    /// incomplete phase without re-issuing persisted request tags.
    pub fn resume(
        root: &Path,
        samples: &SampleSet,
        config: RunConfig,
    ) -> Result<Pipeline, PipelineError> {
        config.validate()?;
        let dir = RunDir::new(root);
        let manifest: RunManifest =
            read_json(&dir.manifest_path())?.ok_or_else(|| PipelineError::Malformed {
                path: dir.manifest_path().display().to_string(),
                detail: "run directory has no manifest".into(),
            })?;
        let found = config.digest();
        if manifest.config_digest != found {
            return Err(PipelineError::ManifestMismatch {
                expected: manifest.config_digest,
                found,
            });
        }
        let found = sample_set_digest(samples);
        if manifest.sample_digest != found {
            return Err(PipelineError::SampleSetMismatch {
                expected: manifest.sample_digest,
                found,
            });
        }
        let store = Self::build_store(&config)?;
        let digests = store.digests();
        if manifest.template_digests != digests {
            let key = manifest
                .template_digests
                .iter()
                .find(|(k, v)| digests.get(*k) != Some(v))
                .map(|(k, _)| k.clone())
                .or_else(|| {
                    digests
                        .keys()
                        .find(|k| !manifest.template_digests.contains_key(*k))
                        .cloned()
                })
                .unwrap_or_else(|| "unknown".to_string());
            return Err(PipelineError::TemplateMismatch { key });
        }
        let lock = RunLock::acquire(&dir)?;
        dir.ensure_layout()?;
        Self::assemble(dir, lock, store, samples, config)
    }

    /// `create` when the directory has no manifest, `resume` otherwise.
    pub fn open(
        root: &Path,
        samples: &SampleSet,
        config: RunConfig,
    ) -> Result<Pipeline, PipelineError> {
        if RunDir::new(root).manifest_path().exists() {
            Pipeline::resume(root, samples, config)
        } else {
            Pipeline::create(root, samples, config)
        }
    }

    fn build_store(config: &RunConfig) -> Result<TemplateStore, PipelineError> {
        Ok(match &config.template_dir {
            Some(dir) => TemplateStore::with_overrides(dir)?,
            None => TemplateStore::builtin(),
        })
    }

    fn assemble(
        dir: RunDir,
        lock: RunLock,
        store: TemplateStore,
        samples: &SampleSet,
        config: RunConfig,
    ) -> Result<Pipeline, PipelineError> {
        // Repair crash artifacts (a torn final line) before any appends, so
        // new records never merge into a partial old line.
        let mut state = RunState::default();
        if dir.trajectory_path().exists() {
            let (records, torn) = load_trajectory_lossy(&dir.trajectory_path())?;
            if torn.is_some() {
                rewrite_jsonl(&dir.trajectory_path(), &records)?;
            }
            for record in &records {
                state.absorb(record);
            }
        }
        let prior_turns: Vec<TranscriptRecord> = if dir.transcript_path().exists() {
            let (turns, torn) = load_transcript_lossy(&dir.transcript_path())?;
            if torn {
                rewrite_jsonl(&dir.transcript_path(), &turns)?;
            }
            turns
        } else {
            Vec::new()
        };

        let backend = match &config.provider {
            ProviderConfig::Scripted { policy } => Backend::Scripted(ScriptedBackend::new(
                policy.clone(),
                sample_index(&samples.samples),
            )?),
            ProviderConfig::Live { http, .. } => Backend::Live(LiveBackend::new(http.clone())?),
            ProviderConfig::Replay { transcript } => {
                Backend::Replay(ReplayBackend::from_records(load_transcript(transcript)?))
            }
        };
        let mut provider = Provider::new(backend);
        if let ProviderConfig::Live {
            requests_per_second: Some(rps),
            ..
        } = &config.provider
        {
            provider = provider.with_rate_limit(*rps);
        }
        if let Some(budget) = config.call_budget {
            provider = provider.with_budget(budget);
        }
        let provider = provider.with_transcript(&dir.transcript_path())?;
        // Resumed live runs answer already-completed requests from cache
        // instead of paying for them again.
        provider.prewarm_cache(&prior_turns);

        Ok(Pipeline {
            store,
            provider,
            dir,
            _lock: lock,
            samples: samples
                .samples
                .iter()
                .map(|s| (s.id.clone(), s.clone()))
                .collect(),
            sample_order: samples.samples.iter().map(|s| s.id.clone()).collect(),
            state,
            config,
        })
    }

    pub fn run_dir(&self) -> &RunDir {
        &self.dir
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Backend calls made under this handle (cache hits are free).
    pub fn provider_calls(&self) -> u64 {
        self.provider.calls_used()
    }

    // -- phase entry points ----------------------------------------------

    /// Runs direct prediction over every sample, judging unjustified
    /// `Unknown` answers, and persists the vague-perception set.
    pub fn detect_vp(&mut self) -> Result<DetectSummary, PipelineError> {
        let phase = Phase::Detect;
        if let Some(summary) = read_json::<DetectSummary>(&self.dir.partition_path(&phase.key()))? {
            return Ok(summary);
        }
        let input: Vec<String> = self.sample_order.clone();
        self.execute_phase(&phase, &input, |this, sample| {
            this.answer_flow(
                &phase,
                TemplateId::DirectPredict,
                sample,
                RecordCondition::default(),
            )
        })?;
        let partition = self.partition_from_state(phase, &input)?;
        partition.validate()?;
        let total = partition.input_ids.len() as i64;
        let direct_accuracy = if total == 0 {
            Rate::zero()
        } else {
            Rate::new(partition.tc.len() as i64, total)?
        };
        let summary = DetectSummary {
            vp_ids: partition.uc.clone(),
            direct_accuracy,
            parse_failure_ids: self
                .state
                .parse_failures
                .get(&phase.key())
                .cloned()
                .unwrap_or_default(),
            partition,
        };
        write_json(&self.dir.partition_path(&phase.key()), &summary)?;
        Ok(summary)
    }

    /// First stimulation round over the vague-perception set.
    pub fn run_stage1(&mut self) -> Result<StagePartition, PipelineError> {
        let phase = Phase::Stage1;
        if let Some(partition) = self.load_partition(&phase)? {
            return Ok(partition);
        }
        let detect = self.require_detect(&phase)?;
        let input: Vec<String> = detect.vp_ids.iter().cloned().collect();
        self.run_stim_phase(phase, &input, Phase::Detect.key())
    }

    /// Second stimulation round over stage one's false conversions, with the
    /// stage-1 answer available to the reminder templates.
    pub fn run_stage2(&mut self) -> Result<StagePartition, PipelineError> {
        let phase = Phase::Stage2;
        if let Some(partition) = self.load_partition(&phase)? {
            return Ok(partition);
        }
        let stage1 = self.require_partition(&phase, &Phase::Stage1)?;
        let input: Vec<String> = stage1.fc.iter().cloned().collect();
        self.run_stim_phase(phase, &input, Phase::Stage1.key())
    }

    /// Remind-then-guide label conformity grid: one run per configured stage
    /// and misguide rate.
    pub fn run_rtg_label(&mut self) -> Result<BTreeMap<String, StagePartition>, PipelineError> {
        let mut out = BTreeMap::new();
        let stages = self.config.rtg_stages.clone();
        let grid = self.config.misguide_grid.clone();
        let seed = self.config.seed;
        for stage in stages {
            for misguide in &grid {
                let phase = Phase::RtgLabel {
                    stage,
                    misguide: *misguide,
                };
                if let Some(partition) = self.load_partition(&phase)? {
                    out.insert(phase.key(), partition);
                    continue;
                }
                let input = self.rtg_stage_input(&phase, stage)?;
                self.execute_phase(&phase, &input, |this, sample| {
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &phase, &sample.id));
                    let draw = assign_guidance_label(sample.gold, *misguide, &mut rng);
                    let condition = RecordCondition {
                        assigned_label: Some(draw.label),
                        misguide_wrong: Some(draw.misguided),
                        ..RecordCondition::default()
                    };
                    this.answer_flow(&phase, TemplateId::RtgLabelGuide, sample, condition)
                })?;
                let partition = self.persist_partition(phase, &input)?;
                out.insert(phase.key(), partition);
            }
        }
        Ok(out)
    }

    /// Remind-then-guide reasoning reruns: each configured stage re-answered
    /// with that stage's own recorded reasoning chain inlined.
    pub fn run_rtg_rp(&mut self) -> Result<BTreeMap<String, StagePartition>, PipelineError> {
        let mut out = BTreeMap::new();
        let stages = self.config.rtg_stages.clone();
        for stage in stages {
            let phase = Phase::RtgRp { stage };
            if let Some(partition) = self.load_partition(&phase)? {
                out.insert(phase.key(), partition);
                continue;
            }
            let source = match stage {
                StageId::One => Phase::Stage1,
                StageId::Two => Phase::Stage2,
            };
            self.require_partition(&phase, &source)?;
            let source_key = source.key();
            let input = self.rtg_stage_input(&phase, stage)?;
            self.execute_phase(&phase, &input, |this, sample| {
                let slot = (source_key.clone(), sample.id.clone());
                let reasoning = this.state.reasoning.get(&slot).ok_or_else(|| {
                    PipelineError::MissingReasoning {
                        sample_id: sample.id.clone(),
                        phase: source_key.clone(),
                    }
                })?;
                let prior = this
                    .state
                    .predicted
                    .get(&slot)
                    .copied()
                    .unwrap_or(Label::Unknown);
                let condition = RecordCondition {
                    answer: Some(prior),
                    prior_reasoning_digest: Some(content_digest(reasoning.as_bytes())),
                    ..RecordCondition::default()
                };
                this.answer_flow_with_reasoning(
                    &phase,
                    TemplateId::RtgWithRp,
                    sample,
                    condition,
                    Some(reasoning.clone()),
                )
            })?;
            let partition = self.persist_partition(phase, &input)?;
            out.insert(phase.key(), partition);
        }
        Ok(out)
    }

    /// Re-issues the identical stage-1 protocol to stage one's unexcited set
    /// and reports the fraction whose verdict stays UC.
    pub fn run_ablation_repeat(&mut self) -> Result<AblationSummary, PipelineError> {
        let phase = Phase::AblationRepeat;
        if let Some(summary) = read_json::<AblationSummary>(&self.dir.partition_path(&phase.key()))?
        {
            return Ok(summary);
        }
        let stage1 = self.require_partition(&phase, &Phase::Stage1)?;
        let input: Vec<String> = stage1.uc.iter().cloned().collect();
        self.run_stim_turns(&phase, &input, Phase::Detect.key())?;
        let partition = self.partition_from_state(phase, &input)?;
        partition.validate()?;
        let unchanged_ids = partition.uc.clone();
        let empty_input = input.is_empty();
        let unchanged_rate = if empty_input {
            Rate::one()
        } else {
            Rate::new(unchanged_ids.len() as i64, input.len() as i64)?
        };
        let summary = AblationSummary {
            partition,
            unchanged_ids,
            unchanged_rate,
            empty_input,
        };
        write_json(&self.dir.partition_path(&phase.key()), &summary)?;
        Ok(summary)
    }

    /// Classifies every vague-perception sample into a root cause. Judge
    /// failures do not abort the phase; failed samples are reported as
    /// unannotated. Budget exhaustion still aborts so the phase stays
    /// resumable.
    pub fn annotate_root_causes(&mut self) -> Result<RootCauseSummary, PipelineError> {
        let phase = Phase::RootCause;
        if let Some(summary) =
            read_json::<RootCauseSummary>(&self.dir.partition_path(&phase.key()))?
        {
            return Ok(summary);
        }
        let detect = self.require_detect(&phase)?;
        let input: Vec<String> = detect.vp_ids.iter().cloned().collect();
        let failures = self.execute_phase_collecting_failures(&phase, &input, |this, sample| {
            this.root_cause_flow(&phase, sample)
        })?;
        let key = phase.key();
        let mut summary = RootCauseSummary::default();
        for id in &input {
            match self.state.causes.get(&(key.clone(), id.clone())) {
                Some(cause) => {
                    summary.assignments.insert(id.clone(), *cause);
                    *summary.counts.entry(*cause).or_default() += 1;
                }
                None => {
                    let detail = failures
                        .get(id)
                        .cloned()
                        .unwrap_or_else(|| "not annotated".to_string());
                    summary.unannotated.insert(id.clone(), detail);
                }
            }
        }
        write_json(&self.dir.partition_path(&key), &summary)?;
        Ok(summary)
    }

    /// Runs the full protocol in order. Reasoning reruns are included only
    /// when the run captures reasoning chains.
    pub fn run_all(&mut self) -> Result<(), PipelineError> {
        self.detect_vp()?;
        self.run_stage1()?;
        self.run_stage2()?;
        self.run_rtg_label()?;
        if self.config.capture_reasoning {
            self.run_rtg_rp()?;
        }
        self.run_ablation_repeat()?;
        self.annotate_root_causes()?;
        Ok(())
    }

    // -- phase plumbing ----------------------------------------------------

    fn load_partition(&self, phase: &Phase) -> Result<Option<StagePartition>, PipelineError> {
        let loaded: Option<StagePartition> = read_json(&self.dir.partition_path(&phase.key()))?;
        if let Some(partition) = &loaded {
            partition.validate()?;
        }
        Ok(loaded)
    }

    fn require_detect(&self, phase: &Phase) -> Result<DetectSummary, PipelineError> {
        read_json::<DetectSummary>(&self.dir.partition_path(&Phase::Detect.key()))?.ok_or_else(
            || PipelineError::MissingPhase {
                phase: phase.key(),
                requirement: Phase::Detect.key(),
            },
        )
    }

    fn require_partition(
        &self,
        phase: &Phase,
        dep: &Phase,
    ) -> Result<StagePartition, PipelineError> {
        self.load_partition(dep)?
            .ok_or_else(|| PipelineError::MissingPhase {
                phase: phase.key(),
                requirement: dep.key(),
            })
    }

    /// The input id set for a remind-then-guide phase at `stage`.
    fn rtg_stage_input(&self, phase: &Phase, stage: StageId) -> Result<Vec<String>, PipelineError> {
        match stage {
            StageId::One => Ok(self.require_detect(phase)?.vp_ids.iter().cloned().collect()),
            StageId::Two => Ok(self
                .require_partition(phase, &Phase::Stage1)?
                .fc
                .iter()
                .cloned()
                .collect()),
        }
    }

    fn run_stim_phase(
        &mut self,
        phase: Phase,
        input: &[String],
        prior_phase_key: String,
    ) -> Result<StagePartition, PipelineError> {
        self.run_stim_turns(&phase, input, prior_phase_key)?;
        self.persist_partition(phase, input)
    }

    fn run_stim_turns(
        &mut self,
        phase: &Phase,
        input: &[String],
        prior_phase_key: String,
    ) -> Result<(), PipelineError> {
        self.execute_phase(phase, input, |this, sample| {
            let prior = this
                .state
                .predicted
                .get(&(prior_phase_key.clone(), sample.id.clone()))
                .copied()
                .unwrap_or(Label::Unknown);
            let template = this.stim_template(sample.form);
            let condition = RecordCondition {
                answer: Some(prior),
                ..RecordCondition::default()
            };
            this.answer_flow(phase, template, sample, condition)
        })
    }

    fn stim_template(&self, form: SampleForm) -> TemplateId {
        if self.config.capture_reasoning {
            TemplateId::RpElicit
        } else {
            match self.config.style_map.style_for(form) {
                StimStyle::Concise => TemplateId::ConciseStim,
                StimStyle::Detailed => TemplateId::DetailedStim,
            }
        }
    }

    fn persist_partition(
        &mut self,
        phase: Phase,
        input: &[String],
    ) -> Result<StagePartition, PipelineError> {
        let partition = self.partition_from_state(phase, input)?;
        partition.validate()?;
        write_json(&self.dir.partition_path(&phase.key()), &partition)?;
        Ok(partition)
    }

    fn partition_from_state(
        &self,
        phase: Phase,
        input: &[String],
    ) -> Result<StagePartition, PipelineError> {
        let key = phase.key();
        let mut verdicts = BTreeMap::new();
        for id in input {
            let verdict = self
                .state
                .verdicts
                .get(&(key.clone(), id.clone()))
                .copied()
                .ok_or_else(|| {
                    PipelineError::InvariantViolation(format!(
                        "phase {key}: no verdict recorded for input sample {id}"
                    ))
                })?;
            verdicts.insert(id.clone(), verdict);
        }
        Ok(StagePartition::from_verdicts(phase, &verdicts))
    }

    /// Runs `flow` over every not-yet-done input sample with up to
    /// `concurrency_limit` workers, then appends the finished record groups
    /// in input order. On the first error the contiguous prefix of finished
    /// groups is persisted and the error is returned, leaving the phase
    /// resumable.
    fn execute_phase<F>(
        &mut self,
        phase: &Phase,
        input: &[String],
        flow: F,
    ) -> Result<(), PipelineError>
    where
        F: Fn(&Pipeline, &Sample) -> Result<SampleFlow, PipelineError> + Sync,
    {
        let (_, first_error) = self.execute_phase_core(phase, input, false, flow)?;
        match first_error {
            Some(error) => Err(error),
            None => Ok(()),
        }
    }

    /// Like [`Self::execute_phase`], but per-sample failures are collected
    /// instead of aborting the phase. Budget exhaustion is still abortive.
    fn execute_phase_collecting_failures<F>(
        &mut self,
        phase: &Phase,
        input: &[String],
        flow: F,
    ) -> Result<BTreeMap<String, String>, PipelineError>
    where
        F: Fn(&Pipeline, &Sample) -> Result<SampleFlow, PipelineError> + Sync,
    {
        let (failures, first_error) = self.execute_phase_core(phase, input, true, flow)?;
        match first_error {
            Some(error) => Err(error),
            None => Ok(failures),
        }
    }

    fn execute_phase_core<F>(
        &mut self,
        phase: &Phase,
        input: &[String],
        collect_failures: bool,
        flow: F,
    ) -> Result<(BTreeMap<String, String>, Option<PipelineError>), PipelineError>
    where
        F: Fn(&Pipeline, &Sample) -> Result<SampleFlow, PipelineError> + Sync,
    {
        let key = phase.key();
        let done = self.state.done.get(&key).cloned().unwrap_or_default();
        let pending: Vec<Sample> = input
            .iter()
            .filter(|id| !done.contains(*id))
            .map(|id| {
                self.samples
                    .get(id)
                    .cloned()
                    .ok_or_else(|| PipelineError::UnknownSample {
                        sample_id: id.clone(),
                    })
            })
            .collect::<Result<_, _>>()?;
        if pending.is_empty() {
            return Ok((BTreeMap::new(), None));
        }

        let workers = self.config.concurrency_limit.min(pending.len()).max(1);
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let results: Mutex<BTreeMap<usize, Result<SampleFlow, PipelineError>>> =
            Mutex::new(BTreeMap::new());
        {
            let this: &Pipeline = &*self;
            let flow = &flow;
            let next = &next;
            let abort = &abort;
            let results = &results;
            let pending = &pending;
            std::thread::scope(|scope| {
                for _ in 0..workers {
                    scope.spawn(move || loop {
                        if abort.load(Ordering::Relaxed) {
                            break;
                        }
                        let index = next.fetch_add(1, Ordering::Relaxed);
                        if index >= pending.len() {
                            break;
                        }
                        let result = flow(this, &pending[index]);
                        if let Err(error) = &result {
                            if !collect_failures || is_abortive(error) {
                                abort.store(true, Ordering::Relaxed);
                            }
                        }
                        results
                            .lock()
                            .expect("phase results lock")
                            .insert(index, result);
                    });
                }
            });
        }

        let mut results = results.into_inner().expect("phase results lock");
        let mut groups: Vec<SampleFlow> = Vec::new();
        let mut failures = BTreeMap::new();
        let mut first_error: Option<PipelineError> = None;
        for (index, sample) in pending.iter().enumerate() {
            match results.remove(&index) {
                Some(Ok(group)) => groups.push(group),
                Some(Err(error)) => {
                    if collect_failures && !is_abortive(&error) {
                        failures.insert(sample.id.clone(), error.to_string());
                    } else {
                        first_error = Some(error);
                        break;
                    }
                }
                // Never claimed because of an abort: persist the prefix only.
                None => break,
            }
        }
        self.append_groups(groups)?;
        Ok((failures, first_error))
    }

    fn append_groups(&mut self, groups: Vec<SampleFlow>) -> Result<(), PipelineError> {
        if groups.is_empty() {
            return Ok(());
        }
        let path = self.dir.trajectory_path();
        let io_err = |source: std::io::Error| PipelineError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err)?;
        let mut buffer = String::new();
        let mut finalized: Vec<TrajectoryRecord> = Vec::new();
        for group in groups {
            for mut record in group.records {
                record.seq = self.state.next_seq + finalized.len() as u64;
                buffer.push_str(&serde_json::to_string(&record).map_err(|e| {
                    PipelineError::Malformed {
                        path: path.display().to_string(),
                        detail: e.to_string(),
                    }
                })?);
                buffer.push('\n');
                finalized.push(record);
            }
        }
        file.write_all(buffer.as_bytes()).map_err(io_err)?;
        file.flush().map_err(io_err)?;
        for record in &finalized {
            self.state.absorb(record);
        }
        Ok(())
    }

    // -- per-sample flows ----------------------------------------------------

    fn request(
        &self,
        phase: &Phase,
        sample_id: &str,
        template_code: &str,
        condition: &str,
        prompt_text: String,
        model_name: &str,
    ) -> Result<CompletionRequest, PipelineError> {
        let tag = RequestTag::format(&phase.key(), sample_id, template_code, condition);
        Ok(CompletionRequest::new(
            model_name,
            vec![Message::user(prompt_text)],
            self.config.temperature,
            self.config.max_tokens,
            tag,
        )?)
    }

    #[allow(clippy::too_many_arguments)]
    fn draft(
        &self,
        phase: &Phase,
        sample: &Sample,
        template: String,
        condition: RecordCondition,
        turn: ModelTurn,
        parsed: Option<ParsedCompletion>,
        judge: Option<JudgeResult>,
        verdict: Option<Verdict>,
    ) -> TrajectoryRecord {
        TrajectoryRecord {
            seq: 0,
            run_id: self.config.run_id.clone(),
            phase: *phase,
            sample_id: sample.id.clone(),
            ftype: ftype_of(sample),
            gold: sample.gold,
            template,
            condition,
            turn,
            parsed,
            judge,
            verdict,
        }
    }

    fn answer_flow(
        &self,
        phase: &Phase,
        template: TemplateId,
        sample: &Sample,
        condition: RecordCondition,
    ) -> Result<SampleFlow, PipelineError> {
        self.answer_flow_with_reasoning(phase, template, sample, condition, None)
    }

    /// One answer turn plus, for an unverifiable sample answering `Unknown`,
    /// the justification and judging turns. The main record carries the
    /// parse, the judge result, and the verdict.
    fn answer_flow_with_reasoning(
        &self,
        phase: &Phase,
        template: TemplateId,
        sample: &Sample,
        condition: RecordCondition,
        prior_reasoning: Option<String>,
    ) -> Result<SampleFlow, PipelineError> {
        let render_condition = RenderCondition {
            answer: condition.answer,
            assigned_label: condition.assigned_label,
            prior_reasoning,
            gold: None,
        };
        let rendered = render(&self.store, template, sample, &render_condition)?;
        let request = self.request(
            phase,
            &sample.id,
            template.code(),
            &condition.tag_string(),
            rendered.text,
            &self.config.model_name,
        )?;
        let turn = self.provider.complete(&request)?;
        let parsed = parse_completion(&turn.raw_completion, template.expects_reasoning());
        let predicted = parsed.effective_label();

        let mut aux_records = Vec::new();
        let judge = if ftype_of(sample) == FType::Unverifiable && predicted == Label::Unknown {
            let (result, records) = self.judge_justification(phase, sample, &parsed)?;
            aux_records = records;
            Some(result)
        } else {
            None
        };
        let verdict = classify_verdict(
            sample,
            predicted,
            judge.as_ref().and_then(|j| j.justification_valid),
        )?;

        let mut records = vec![self.draft(
            phase,
            sample,
            template.code().to_string(),
            condition,
            turn,
            Some(parsed),
            judge,
            Some(verdict),
        )];
        records.extend(aux_records);
        Ok(SampleFlow { records })
    }

    /// Obtains a justification for an `Unknown` answer (reusing the main
    /// turn's reasoning when present, otherwise eliciting one) and judges it
    /// per the configured judge.
    fn judge_justification(
        &self,
        phase: &Phase,
        sample: &Sample,
        main_parsed: &ParsedCompletion,
    ) -> Result<(JudgeResult, Vec<TrajectoryRecord>), PipelineError> {
        let mut records = Vec::new();
        let justification = match &main_parsed.reasoning {
            Some(reasoning) if !reasoning.trim().is_empty() => reasoning.clone(),
            _ => {
                let template = TemplateId::JustifyUnknown;
                let rendered = render(&self.store, template, sample, &RenderCondition::default())?;
                let request = self.request(
                    phase,
                    &sample.id,
                    template.code(),
                    "",
                    rendered.text,
                    &self.config.model_name,
                )?;
                let turn = self.provider.complete(&request)?;
                let parsed = parse_completion(&turn.raw_completion, true);
                let justification = parsed.reasoning.clone().unwrap_or_default();
                records.push(self.draft(
                    phase,
                    sample,
                    template.code().to_string(),
                    RecordCondition::default(),
                    turn,
                    Some(parsed),
                    None,
                    None,
                ));
                justification
            }
        };

        let result = match &self.config.judge {
            JudgeConfig::Scripted => JudgeResult {
                justification_valid: Some(justification.contains(VALID_JUSTIFICATION_MARKER)),
                root_cause: None,
                judge_backend: JudgeBackend::Scripted,
            },
            JudgeConfig::Model { model_name } => {
                let prompt_text = render_judge_validity(&self.store, sample, &justification)?;
                let model = model_name
                    .clone()
                    .unwrap_or_else(|| self.config.model_name.clone());
                let request = self.request(
                    phase,
                    &sample.id,
                    JUDGE_VALIDITY_KEY,
                    "",
                    prompt_text,
                    &model,
                )?;
                let turn = self.provider.complete(&request)?;
                let valid = parse_validity(&turn.raw_completion).unwrap_or(false);
                let judge_backend = judge_backend_of(turn.backend);
                records.push(self.draft(
                    phase,
                    sample,
                    JUDGE_VALIDITY_KEY.to_string(),
                    RecordCondition::default(),
                    turn,
                    None,
                    None,
                    None,
                ));
                JudgeResult {
                    justification_valid: Some(valid),
                    root_cause: None,
                    judge_backend,
                }
            }
        };
        Ok((result, records))
    }

    /// One root-cause judging turn over the sample's detect-phase answer and
    /// justification.
    fn root_cause_flow(&self, phase: &Phase, sample: &Sample) -> Result<SampleFlow, PipelineError> {
        let detect_key = Phase::Detect.key();
        let slot = (detect_key, sample.id.clone());
        let answer = self
            .state
            .predicted
            .get(&slot)
            .copied()
            .unwrap_or(Label::Unknown);
        let prior_reasoning = self
            .state
            .justifications
            .get(&slot)
            .cloned()
            .unwrap_or_else(|| "(none provided)".to_string());
        let render_condition = RenderCondition {
            answer: Some(answer),
            assigned_label: None,
            prior_reasoning: Some(prior_reasoning),
            gold: Some(sample.gold),
        };
        let template = TemplateId::RootCauseJudge;
        let rendered = render(&self.store, template, sample, &render_condition)?;
        let judge_model = match &self.config.judge {
            JudgeConfig::Model {
                model_name: Some(m),
            } => m.clone(),
            _ => self.config.model_name.clone(),
        };
        let request = self.request(
            phase,
            &sample.id,
            template.code(),
            "",
            rendered.text,
            &judge_model,
        )?;
        let turn = self.provider.complete(&request)?;
        let cause =
            parse_root_cause(&turn.raw_completion).ok_or_else(|| PipelineError::Malformed {
                path: format!("root-cause completion for {}", sample.id),
                detail: "completion contained no cause token".into(),
            })?;
        let judge_backend = judge_backend_of(turn.backend);
        let record = self.draft(
            phase,
            sample,
            template.code().to_string(),
            RecordCondition {
                answer: Some(answer),
                ..RecordCondition::default()
            },
            turn,
            None,
            Some(JudgeResult {
                justification_valid: None,
                root_cause: Some(cause),
                judge_backend,
            }),
            None,
        );
        Ok(SampleFlow {
            records: vec![record],
        })
    }
}

/// Whether an error must abort even failure-collecting phases.
fn is_abortive(error: &PipelineError) -> bool {
    matches!(
        error,
        PipelineError::Provider(ProviderError::BudgetExceeded { .. })
    )
}

/// Maps the backend that served a turn to the judge attribution recorded in
/// the trajectory. Replayed turns keep their original attribution because
/// the transcript preserves the backend that first produced them.
fn judge_backend_of(backend: BackendKind) -> JudgeBackend {
    match backend {
        BackendKind::Scripted => JudgeBackend::Scripted,
        BackendKind::Live | BackendKind::Replay | BackendKind::Cache => JudgeBackend::Model,
    }
}

/// Extracts the last root-cause sentinel token from a judge completion.
pub fn parse_root_cause(raw: &str) -> Option<RootCause> {
    RootCause::ALL
        .iter()
        .filter_map(|cause| raw.rfind(cause.sentinel()).map(|pos| (pos, *cause)))
        .max_by_key(|(pos, _)| *pos)
        .map(|(_, cause)| cause)
}

// ---------------------------------------------------------------------------
// Run-level invariant checking
// ---------------------------------------------------------------------------

fn partition_violation(partition: &StagePartition) -> Option<String> {
    partition.validate().err().map(|e| e.to_string())
}

/// Checks every cross-phase invariant a run directory must satisfy, returning
/// human-readable violation descriptions (empty means clean).
pub fn check_run_invariants(root: &Path) -> Result<Vec<String>, PipelineError> {
    let dir = RunDir::new(root);
    let mut violations = Vec::new();

    let records = load_trajectory(&dir.trajectory_path())?;

    let detect: Option<DetectSummary> = read_json(&dir.partition_path(&Phase::Detect.key()))?;
    let stage1: Option<StagePartition> = read_json(&dir.partition_path(&Phase::Stage1.key()))?;
    let stage2: Option<StagePartition> = read_json(&dir.partition_path(&Phase::Stage2.key()))?;

    if let Some(detect) = &detect {
        if let Some(v) = partition_violation(&detect.partition) {
            violations.push(v);
        }
        if detect.vp_ids != detect.partition.uc {
            violations.push("detect: vp_ids differ from the partition's UC class".into());
        }
    }
    if let Some(stage1) = &stage1 {
        if let Some(v) = partition_violation(stage1) {
            violations.push(v);
        }
        if let Some(detect) = &detect {
            if stage1.input_ids != detect.vp_ids {
                violations.push("stage1 input differs from the vague-perception set".into());
            }
        }
        // Phase barrier, checkable from the trajectory alone: stage-2 records
        // exist only for samples with a persisted stage-1 FC membership.
        for record in &records {
            if record.phase == Phase::Stage2 && !stage1.fc.contains(&record.sample_id) {
                violations.push(format!(
                    "stage2 record for {} without a stage1 FC record",
                    record.sample_id
                ));
            }
        }
    }
    if let Some(stage2) = &stage2 {
        if let Some(v) = partition_violation(stage2) {
            violations.push(v);
        }
        if let Some(stage1) = &stage1 {
            if stage2.input_ids != stage1.fc {
                violations.push("stage2 input differs from stage1.fc".into());
            }
            let overlap = stage1.tc.intersection(&stage2.tc).count();
            if overlap != 0 {
                violations.push(format!("TC1 and TC2 overlap on {overlap} samples"));
            }
        }
    }

    // Remind-then-guide partitions derive from the same persisted sets.
    if dir.partitions_dir().exists() {
        let entries =
            std::fs::read_dir(dir.partitions_dir()).map_err(|source| PipelineError::Io {
                path: dir.partitions_dir().display().to_string(),
                source,
            })?;
        for entry in entries {
            let entry = entry.map_err(|source| PipelineError::Io {
                path: dir.partitions_dir().display().to_string(),
                source,
            })?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(key) = name.strip_suffix(".json") else {
                continue;
            };
            if !key.starts_with("rtg-") {
                continue;
            }
            let Ok(phase) = Phase::from_key(key) else {
                violations.push(format!("unparsable partition file name {name}"));
                continue;
            };
            let Some(partition) = read_json::<StagePartition>(&entry.path())? else {
                continue;
            };
            if let Some(v) = partition_violation(&partition) {
                violations.push(v);
            }
            let expected = match phase {
                Phase::RtgLabel {
                    stage: StageId::One,
                    ..
                }
                | Phase::RtgRp {
                    stage: StageId::One,
                } => detect.as_ref().map(|d| d.vp_ids.clone()),
                Phase::RtgLabel {
                    stage: StageId::Two,
                    ..
                }
                | Phase::RtgRp {
                    stage: StageId::Two,
                } => stage1.as_ref().map(|s| s.fc.clone()),
                _ => None,
            };
            if let Some(expected) = expected {
                if partition.input_ids != expected {
                    violations.push(format!("{key}: input set differs from its source stage"));
                }
            }
        }
    }

    if let Some(ablation) =
        read_json::<AblationSummary>(&dir.partition_path(&Phase::AblationRepeat.key()))?
    {
        if let Some(v) = partition_violation(&ablation.partition) {
            violations.push(v);
        }
        if let Some(stage1) = &stage1 {
            if ablation.partition.input_ids != stage1.uc {
                violations.push("ablation input differs from stage1.uc".into());
            }
        }
    }

    Ok(violations)
}
