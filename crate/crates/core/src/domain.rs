//! Core vocabulary shared by every layer: entailment labels, sample records,
//! the verdict taxonomy, pipeline phases, and exact rational rates.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Exact rational number used for every internal rate computation.
/// Rounding to display precision happens only at emission time.
pub type Rational = num_rational::Ratio<i64>;

/// Sentinel token a model must emit for a `Proved` conclusion.
pub const SENTINEL_PROVED: &str = "__PROVED__";
/// Sentinel token for a `Disproved` conclusion.
pub const SENTINEL_DISPROVED: &str = "__DISPROVED__";
/// Sentinel token for an `Unknown` conclusion.
pub const SENTINEL_UNKNOWN: &str = "__UNKNOWN__";

/// Errors raised by domain-level classification and construction.
#[derive(Debug, Error)]
pub enum DomainError {
    /// An unverifiable sample answered `Unknown` but no judge assessment of the
    /// justification was supplied, so the verdict is undecidable.
    #[error(
        "sample {sample_id}: unverifiable sample answered Unknown but no judge result was supplied"
    )]
    MissingJudgeResult { sample_id: String },
    /// A rate was outside the closed interval [0, 1] or malformed.
    #[error("rate {0:?} is not a rational in [0, 1]")]
    InvalidRate(String),
    /// A phase key string did not correspond to any phase.
    #[error("unrecognized phase key {0:?}")]
    UnknownPhaseKey(String),
}

/// Three-way entailment label.
///
/// `True`/`False` style aliases found in upstream corpora are normalized to
/// `Proved`/`Disproved` at deserialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(
        rename = "PROVED",
        alias = "True",
        alias = "TRUE",
        alias = "true",
        alias = "proved"
    )]
    Proved,
    #[serde(
        rename = "DISPROVED",
        alias = "False",
        alias = "FALSE",
        alias = "false",
        alias = "disproved"
    )]
    Disproved,
    #[serde(
        rename = "UNKNOWN",
        alias = "Unknown",
        alias = "unknown",
        alias = "Uncertain"
    )]
    Unknown,
}

impl Label {
    /// Canonical uppercase name, as stored in sample records.
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Proved => "PROVED",
            Label::Disproved => "DISPROVED",
            Label::Unknown => "UNKNOWN",
        }
    }

    /// The underscore-wrapped token models are instructed to emit.
    pub fn sentinel(self) -> &'static str {
        match self {
            Label::Proved => SENTINEL_PROVED,
            Label::Disproved => SENTINEL_DISPROVED,
            Label::Unknown => SENTINEL_UNKNOWN,
        }
    }

    /// Maps a sentinel token back to its label.
    pub fn from_sentinel(token: &str) -> Option<Label> {
        match token {
            SENTINEL_PROVED => Some(Label::Proved),
            SENTINEL_DISPROVED => Some(Label::Disproved),
            SENTINEL_UNKNOWN => Some(Label::Unknown),
            _ => None,
        }
    }

    /// True for `Proved` and `Disproved`.
    pub fn is_definite(self) -> bool {
        !matches!(self, Label::Unknown)
    }

    /// The two labels other than `self`, in a fixed canonical order.
    pub fn others(self) -> [Label; 2] {
        match self {
            Label::Proved => [Label::Disproved, Label::Unknown],
            Label::Disproved => [Label::Proved, Label::Unknown],
            Label::Unknown => [Label::Proved, Label::Disproved],
        }
    }

    /// For a definite label, the opposite definite label.
    pub fn opposite_definite(self) -> Option<Label> {
        match self {
            Label::Proved => Some(Label::Disproved),
            Label::Disproved => Some(Label::Proved),
            Label::Unknown => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Whether a sample's context states facts directly or embeds them in a story.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SampleForm {
    #[serde(rename = "fact")]
    Fact,
    #[serde(rename = "story")]
    Story,
}

impl fmt::Display for SampleForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SampleForm::Fact => "fact",
            SampleForm::Story => "story",
        })
    }
}

/// Provenance of a sample: shipped with its corpus, or synthesized by
/// deleting sentences and relabeling the gold answer `Unknown`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    #[serde(rename = "native")]
    Native,
    #[serde(rename = "unknownized")]
    Unknownized,
}

/// One evaluation sample.
///
/// `removed_sentences` is present exactly when `origin` is `Unknownized` and
/// lists the deleted sentences in their original order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subcategory: Option<String>,
    pub form: SampleForm,
    pub context: String,
    pub hypothesis: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    pub gold: Label,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub removed_sentences: Option<Vec<String>>,
}

/// Whether a sample's gold label can be checked mechanically.
///
/// Verifiable samples carry a definite gold label; unverifiable samples are
/// gold-labeled `Unknown` and correctness of an `Unknown` answer additionally
/// depends on the justification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FType {
    #[serde(rename = "verifiable")]
    Verifiable,
    #[serde(rename = "unverifiable")]
    Unverifiable,
}

impl fmt::Display for FType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FType::Verifiable => "verifiable",
            FType::Unverifiable => "unverifiable",
        })
    }
}

/// Derives a sample's [`FType`] from its gold label.
pub fn ftype_of(sample: &Sample) -> FType {
    ftype_of_gold(sample.gold)
}

/// [`ftype_of`] on a bare gold label.
pub fn ftype_of_gold(gold: Label) -> FType {
    if gold == Label::Unknown {
        FType::Unverifiable
    } else {
        FType::Verifiable
    }
}

/// Outcome class of one model answer against one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Verdict {
    /// Correct conversion: the answer resolves the sample correctly.
    #[serde(rename = "TC")]
    TrueConverting,
    /// Wrong definite answer, or a definite answer to an unverifiable sample.
    #[serde(rename = "FC")]
    FalseConverting,
    /// Stuck: `Unknown` on a verifiable sample, or an `Unknown` with an
    /// invalid justification on an unverifiable one.
    #[serde(rename = "UC")]
    UnexcitedConverting,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::TrueConverting => "TC",
            Verdict::FalseConverting => "FC",
            Verdict::UnexcitedConverting => "UC",
        })
    }
}

/// Classifies one predicted label against a sample's gold label.
///
/// For unverifiable samples that answer `Unknown`, the caller must supply the
/// judge's assessment of the justification; omitting it is an error rather
/// than a silent default.
pub fn classify_verdict(
    sample: &Sample,
    predicted: Label,
    justification_valid: Option<bool>,
) -> Result<Verdict, DomainError> {
    classify_verdict_parts(&sample.id, sample.gold, predicted, justification_valid)
}

/// [`classify_verdict`] on bare parts, for callers that only hold a record.
pub fn classify_verdict_parts(
    sample_id: &str,
    gold: Label,
    predicted: Label,
    justification_valid: Option<bool>,
) -> Result<Verdict, DomainError> {
    match ftype_of_gold(gold) {
        FType::Verifiable => Ok(if predicted == gold {
            Verdict::TrueConverting
        } else if predicted == Label::Unknown {
            Verdict::UnexcitedConverting
        } else {
            Verdict::FalseConverting
        }),
        FType::Unverifiable => {
            if predicted.is_definite() {
                Ok(Verdict::FalseConverting)
            } else {
                match justification_valid {
                    Some(true) => Ok(Verdict::TrueConverting),
                    Some(false) => Ok(Verdict::UnexcitedConverting),
                    None => Err(DomainError::MissingJudgeResult {
                        sample_id: sample_id.to_string(),
                    }),
                }
            }
        }
    }
}

/// A rational in [0, 1], used for misguide rates and policy weights.
///
/// Serialized as a canonical reduced string such as `"2/3"`, `"1"`, or `"0"`.
/// Parsing accepts both fraction syntax and exact decimal syntax
/// (`"0.6667"` means 6667/10000).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rate(Rational);

impl Rate {
    pub fn new(numer: i64, denom: i64) -> Result<Self, DomainError> {
        if denom == 0 {
            return Err(DomainError::InvalidRate(format!("{numer}/{denom}")));
        }
        let r = Rational::new(numer, denom);
        if r < Rational::new(0, 1) || r > Rational::new(1, 1) {
            return Err(DomainError::InvalidRate(format!("{numer}/{denom}")));
        }
        Ok(Rate(r))
    }

    pub fn zero() -> Self {
        Rate(Rational::new(0, 1))
    }

    pub fn one() -> Self {
        Rate(Rational::new(1, 1))
    }

    pub fn as_ratio(self) -> Rational {
        self.0
    }

    /// Numerator and denominator of the reduced fraction, denominator >= 1.
    pub fn parts(self) -> (i64, i64) {
        (*self.0.numer(), *self.0.denom())
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (n, d) = self.parts();
        if d == 1 {
            write!(f, "{n}")
        } else {
            write!(f, "{n}/{d}")
        }
    }
}

impl FromStr for Rate {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DomainError::InvalidRate(s.to_string());
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n: i64 = n.trim().parse().map_err(|_| bad())?;
            let d: i64 = d.trim().parse().map_err(|_| bad())?;
            return Rate::new(n, d);
        }
        if let Some((int, frac)) = s.split_once('.') {
            let int: i64 = if int.is_empty() {
                0
            } else {
                int.parse().map_err(|_| bad())?
            };
            if frac.is_empty() || frac.len() > 12 || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            let num: i64 = frac.parse().map_err(|_| bad())?;
            let den = 10_i64.pow(frac.len() as u32);
            return Rate::new(int * den + num, den);
        }
        let n: i64 = s.parse().map_err(|_| bad())?;
        Rate::new(n, 1)
    }
}

impl Serialize for Rate {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Stimulation stage. Stage one runs on the vague-perception set; stage two
/// runs on the false-converting remainder of stage one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StageId {
    One,
    Two,
}

impl StageId {
    pub fn number(self) -> u8 {
        match self {
            StageId::One => 1,
            StageId::Two => 2,
        }
    }

    pub fn from_number(n: u8) -> Option<StageId> {
        match n {
            1 => Some(StageId::One),
            2 => Some(StageId::Two),
            _ => None,
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl Serialize for StageId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.number())
    }
}

impl<'de> Deserialize<'de> for StageId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let n = u8::deserialize(deserializer)?;
        StageId::from_number(n)
            .ok_or_else(|| serde::de::Error::custom(format!("stage must be 1 or 2, got {n}")))
    }
}

/// One pipeline phase. Every trajectory record and partition is keyed by a
/// phase; the canonical string form doubles as file and map key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    /// First pass over the full dataset: direct prediction plus justification
    /// judging, yielding the vague-perception set.
    Detect,
    /// First stimulation round over the vague-perception set.
    Stage1,
    /// Second stimulation round over stage one's false-converting set.
    Stage2,
    /// Remind-then-guide label conformity run at one misguide rate.
    RtgLabel { stage: StageId, misguide: Rate },
    /// Remind-then-guide rerun that feeds the stage-1 reasoning chain back.
    RtgRp { stage: StageId },
    /// Repeat of the stage-1 protocol on stage one's unexcited set.
    AblationRepeat,
    /// Root-cause annotation of vague-perception samples.
    RootCause,
}

impl Phase {
    /// Canonical key, safe for file names and JSON map keys.
    pub fn key(&self) -> String {
        match self {
            Phase::Detect => "detect".to_string(),
            Phase::Stage1 => "stage1".to_string(),
            Phase::Stage2 => "stage2".to_string(),
            Phase::RtgLabel { stage, misguide } => {
                let (n, d) = misguide.parts();
                format!("rtg-label-s{stage}-m{n}of{d}")
            }
            Phase::RtgRp { stage } => format!("rtg-rp-s{stage}"),
            Phase::AblationRepeat => "ablation-repeat".to_string(),
            Phase::RootCause => "root-cause".to_string(),
        }
    }

    /// Parses a canonical key back into a phase.
    pub fn from_key(key: &str) -> Result<Phase, DomainError> {
        let bad = || DomainError::UnknownPhaseKey(key.to_string());
        match key {
            "detect" => return Ok(Phase::Detect),
            "stage1" => return Ok(Phase::Stage1),
            "stage2" => return Ok(Phase::Stage2),
            "ablation-repeat" => return Ok(Phase::AblationRepeat),
            "root-cause" => return Ok(Phase::RootCause),
            _ => {}
        }
        if let Some(rest) = key.strip_prefix("rtg-rp-s") {
            let n: u8 = rest.parse().map_err(|_| bad())?;
            let stage = StageId::from_number(n).ok_or_else(bad)?;
            return Ok(Phase::RtgRp { stage });
        }
        if let Some(rest) = key.strip_prefix("rtg-label-s") {
            let (stage_part, rate_part) = rest.split_once("-m").ok_or_else(bad)?;
            let n: u8 = stage_part.parse().map_err(|_| bad())?;
            let stage = StageId::from_number(n).ok_or_else(bad)?;
            let (numer, denom) = rate_part.split_once("of").ok_or_else(bad)?;
            let numer: i64 = numer.parse().map_err(|_| bad())?;
            let denom: i64 = denom.parse().map_err(|_| bad())?;
            let misguide = Rate::new(numer, denom).map_err(|_| bad())?;
            return Ok(Phase::RtgLabel { stage, misguide });
        }
        Err(bad())
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl Serialize for Phase {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.key())
    }
}

impl<'de> Deserialize<'de> for Phase {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Phase::from_key(&s).map_err(serde::de::Error::custom)
    }
}

/// Root-cause classes for vague-perception errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootCause {
    FactUnderstanding,
    ReasoningGap,
    ExcessiveCaution,
    Else,
}

impl RootCause {
    pub const ALL: [RootCause; 4] = [
        RootCause::FactUnderstanding,
        RootCause::ReasoningGap,
        RootCause::ExcessiveCaution,
        RootCause::Else,
    ];

    /// The underscore-wrapped token the judge emits.
    pub fn sentinel(self) -> &'static str {
        match self {
            RootCause::FactUnderstanding => "__FACT_UNDERSTANDING__",
            RootCause::ReasoningGap => "__REASONING_GAP__",
            RootCause::ExcessiveCaution => "__EXCESSIVE_CAUTION__",
            RootCause::Else => "__ELSE__",
        }
    }

    pub fn from_sentinel(token: &str) -> Option<RootCause> {
        RootCause::ALL.into_iter().find(|c| c.sentinel() == token)
    }

    /// Snake-case name used in reports and serialization.
    pub fn as_str(self) -> &'static str {
        match self {
            RootCause::FactUnderstanding => "fact_understanding",
            RootCause::ReasoningGap => "reasoning_gap",
            RootCause::ExcessiveCaution => "excessive_caution",
            RootCause::Else => "else",
        }
    }
}

impl fmt::Display for RootCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Derives a 64-bit seed from framed byte parts via SHA-256.
///
/// Framing (length-prefixing each part) keeps distinct part lists from
/// colliding by concatenation.
pub fn stable_seed(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is at least 8 bytes"))
}

/// Seed for the per-sample random stream of one phase.
///
/// Keyed by (run seed, phase key, sample id) so draws are independent of
/// execution order and of the other samples in the batch.
pub fn stream_seed(run_seed: u64, phase: &Phase, sample_id: &str) -> u64 {
    stable_seed(&[
        &run_seed.to_le_bytes(),
        phase.key().as_bytes(),
        sample_id.as_bytes(),
    ])
}

/// Formats a fraction as a percentage with exactly two decimals, rounding
/// half to even. `1285/2000` renders as `"64.25"`.
pub fn format_pct_half_even(value: Rational) -> String {
    // Work on hundredths of a percent: value * 10_000, rounded half-even.
    let scaled = value * Rational::new(10_000, 1);
    let n = *scaled.numer();
    let d = *scaled.denom(); // > 0 after Ratio normalization
    let q = n.div_euclid(d);
    let r = n.rem_euclid(d); // 0 <= r < d
    let hundredths = match (2 * r).cmp(&d) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => {
            if q % 2 == 0 {
                q
            } else {
                q + 1
            }
        }
    };
    let sign = if hundredths < 0 { "-" } else { "" };
    let magnitude = hundredths.unsigned_abs();
    format!("{sign}{}.{:02}", magnitude / 100, magnitude % 100)
}

/// Sorted id set, serialized as a sorted array. Used for partitions.
pub type IdSet = BTreeSet<String>;
