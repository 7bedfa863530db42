//! Metric computation over persisted runs.
//!
//! Two independent paths produce the same [`MetricsReport`]:
//!
//! * [`engine_report`] — the incremental engine. It reads the partition and
//!   summary snapshots a run persisted and derives every rate from those id
//!   sets, consulting the trajectory only for sample types, parse-failure
//!   counts, and a duplicate-record integrity check.
//! * [`oracle_recompute`] — a brute-force cross-check. It ignores every
//!   snapshot and rebuilds all sets and rates from the trajectory alone with
//!   plain scans and explicit set construction, sharing none of the engine's
//!   derivation logic.
//!
//! Agreement between the two on a completed run is the core correctness
//! check of the whole harness.
//!
//! All arithmetic is exact: rates are 64-bit rationals from start to finish,
//! and rounding to the two-decimal display form happens only when a value is
//! formatted for output. Every rate carries an emptiness flag so a 0 that
//! means "no inputs" stays distinguishable from a computed 0; empty cells
//! display as `/`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{FType, IdSet, Phase, Rate, Rational, RootCause, StageId, Verdict};
use crate::pipeline::{
    load_trajectory, AblationSummary, DetectSummary, PipelineError, RootCauseSummary, RunDir,
    StagePartition, TrajectoryRecord,
};

/// Errors raised while computing metrics.
#[derive(Debug, Error)]
pub enum MetricsError {
    /// The trajectory could not be loaded or was corrupt.
    #[error(transparent)]
    Trajectory(#[from] PipelineError),
    /// A snapshot file could not be read.
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// A snapshot file did not parse.
    #[error("malformed snapshot {path}: {detail}")]
    Malformed { path: String, detail: String },
    /// A partition or record set breaks a structural guarantee (for example
    /// two answer records for one sample in one phase).
    #[error("partition integrity violated: {detail}")]
    PartitionViolation { detail: String },
    /// Sets required to be disjoint share members.
    #[error("sets are not disjoint; shared ids: {}", ids.join(", "))]
    DisjointnessViolation { ids: Vec<String> },
    /// A set leaked outside the set that must contain it.
    #[error("subset requirement violated; stray ids: {}", ids.join(", "))]
    SubsetViolation { ids: Vec<String> },
    /// The conformity grid lacks an entry at a required misguide rate.
    #[error("conformity grid is missing stage {stage} at misguide rate {misguide}")]
    MissingGridPoint { stage: u8, misguide: String },
    /// A derived quantity left its mathematically possible range.
    #[error("{what} is {value}, outside [0, 1]")]
    RangeViolation { what: String, value: String },
}

// ---------------------------------------------------------------------------
// Exact rate cells and display formatting
// ---------------------------------------------------------------------------

/// An exact rate plus a flag recording whether its denominator was empty.
///
/// Empty cells hold 0 (the vacuous unchanged-rate of an empty repeat run
/// holds 1 instead) and display as `/`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RateCell {
    pub value: Rational,
    pub empty: bool,
}

impl RateCell {
    /// A computed value over a non-empty denominator.
    pub fn exact(value: Rational) -> RateCell {
        RateCell {
            value,
            empty: false,
        }
    }

    /// `numer/denom`, or an empty-flagged zero when `denom` is 0.
    pub fn ratio(numer: usize, denom: usize) -> RateCell {
        if denom == 0 {
            RateCell::empty_zero()
        } else {
            RateCell {
                value: Rational::new(numer as i64, denom as i64),
                empty: false,
            }
        }
    }

    /// The empty-denominator zero cell.
    pub fn empty_zero() -> RateCell {
        RateCell {
            value: Rational::from_integer(0),
            empty: true,
        }
    }

    /// The vacuously-true rate of an empty repeat run.
    pub fn vacuous_one() -> RateCell {
        RateCell {
            value: Rational::from_integer(1),
            empty: true,
        }
    }

    /// Exact value as `n` or `n/d`.
    pub fn exact_string(&self) -> String {
        format_rational(self.value)
    }

    /// Percentage with two half-even decimals, or `/` when empty.
    pub fn display_string(&self) -> String {
        if self.empty {
            "/".to_string()
        } else {
            percent_half_even(self.value)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RateCellRepr {
    value: String,
    #[serde(default)]
    empty: bool,
}

impl Serialize for RateCell {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        RateCellRepr {
            value: format_rational(self.value),
            empty: self.empty,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RateCell {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = RateCellRepr::deserialize(deserializer)?;
        let value = parse_rational(&repr.value).map_err(serde::de::Error::custom)?;
        Ok(RateCell {
            value,
            empty: repr.empty,
        })
    }
}

/// Formats a rational as `n` (denominator 1) or `n/d`.
pub fn format_rational(value: Rational) -> String {
    if *value.denom() == 1 {
        value.numer().to_string()
    } else {
        format!("{}/{}", value.numer(), value.denom())
    }
}

/// Parses `n` or `n/d` (signed numerator, positive denominator).
pub fn parse_rational(text: &str) -> Result<Rational, String> {
    let bad = || format!("{text:?} is not a rational");
    match text.split_once('/') {
        None => {
            let n: i64 = text.trim().parse().map_err(|_| bad())?;
            Ok(Rational::from_integer(n))
        }
        Some((numer, denom)) => {
            let n: i64 = numer.trim().parse().map_err(|_| bad())?;
            let d: i64 = denom.trim().parse().map_err(|_| bad())?;
            if d <= 0 {
                return Err(bad());
            }
            Ok(Rational::new(n, d))
        }
    }
}

/// Formats a rate as a percentage with exactly two decimals, rounding exact
/// halves to the even neighbor. `0.64245` formats as `64.24`; `0.03335` as
/// `3.34`; `-0.4210` as `-42.10`.
pub fn percent_half_even(value: Rational) -> String {
    let scaled = value * Rational::from_integer(10_000);
    let negative = scaled < Rational::from_integer(0);
    let magnitude = if negative { -scaled } else { scaled };
    let whole = magnitude.floor().to_integer();
    let remainder = magnitude - Rational::from_integer(whole);
    let half = Rational::new(1, 2);
    let hundredths = match remainder.cmp(&half) {
        std::cmp::Ordering::Less => whole,
        std::cmp::Ordering::Greater => whole + 1,
        std::cmp::Ordering::Equal => {
            if whole % 2 == 0 {
                whole
            } else {
                whole + 1
            }
        }
    };
    let sign = if negative && hundredths != 0 { "-" } else { "" };
    format!("{sign}{}.{:02}", hundredths / 100, hundredths % 100)
}

// ---------------------------------------------------------------------------
// Per-stage counts and rates
// ---------------------------------------------------------------------------

/// Raw counts of one stage partition, split by outcome class and sample type.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub input: usize,
    pub input_v: usize,
    pub input_u: usize,
    pub tc: usize,
    pub tc_v: usize,
    pub tc_u: usize,
    pub fc: usize,
    pub fc_v: usize,
    pub fc_u: usize,
    pub uc: usize,
    pub uc_v: usize,
    pub uc_u: usize,
}

/// The three outcome-class rates of one denominator choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRates {
    pub tcr: RateCell,
    pub fcr: RateCell,
    pub ucr: RateCell,
}

/// All rate views of one stage partition.
///
/// `all` divides each class by the full input, so `tcr + fcr + ucr = 1` on
/// non-empty stages. The `share_*` views divide a class-and-type
/// intersection by the full input, so verifiable plus unverifiable shares
/// equal the `all` rate exactly. The `within_*` views divide by that type's
/// own slice of the input instead — the form per-type result tables quote.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub counts: StageCounts,
    pub all: ClassRates,
    pub share_v: ClassRates,
    pub share_u: ClassRates,
    pub within_v: ClassRates,
    pub within_u: ClassRates,
}

impl StageMetrics {
    /// Derives every rate view from raw counts.
    pub fn from_counts(counts: StageCounts) -> StageMetrics {
        let rates = |tc: usize, fc: usize, uc: usize, denom: usize| ClassRates {
            tcr: RateCell::ratio(tc, denom),
            fcr: RateCell::ratio(fc, denom),
            ucr: RateCell::ratio(uc, denom),
        };
        StageMetrics {
            counts,
            all: rates(counts.tc, counts.fc, counts.uc, counts.input),
            share_v: rates(counts.tc_v, counts.fc_v, counts.uc_v, counts.input),
            share_u: rates(counts.tc_u, counts.fc_u, counts.uc_u, counts.input),
            within_v: rates(counts.tc_v, counts.fc_v, counts.uc_v, counts.input_v),
            within_u: rates(counts.tc_u, counts.fc_u, counts.uc_u, counts.input_u),
        }
    }

    /// The all-zero stage with every rate empty-flagged.
    pub fn empty() -> StageMetrics {
        StageMetrics::from_counts(StageCounts::default())
    }
}

impl Default for StageMetrics {
    fn default() -> Self {
        StageMetrics::empty()
    }
}

/// Outcome rates of one guided-label rerun: one stage at one misguide rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RtgCell {
    pub stage: StageId,
    pub misguide: Rate,
    pub counts: StageCounts,
    /// Accuracy over the full input.
    pub tcr: RateCell,
    /// Accuracy over the verifiable slice of the input alone.
    pub tcr_within_v: RateCell,
    /// Accuracy over the unverifiable slice of the input alone.
    pub tcr_within_u: RateCell,
}

/// Outcome rates of one reasoning-feedback rerun (one stage).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpCell {
    pub stage: StageId,
    pub counts: StageCounts,
    pub tcr: RateCell,
}

/// Repeat-consistency outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMetrics {
    pub input: usize,
    pub unchanged: usize,
    /// Fraction of inputs still stuck; vacuously 1 (flagged) on empty input.
    pub rate: RateCell,
}

impl Default for AblationMetrics {
    fn default() -> Self {
        AblationMetrics {
            input: 0,
            unchanged: 0,
            rate: RateCell::vacuous_one(),
        }
    }
}

// ---------------------------------------------------------------------------
// The report
// ---------------------------------------------------------------------------

/// Every quantity the harness reports for one run, in exact form.
///
/// Set sizes live in the per-stage counts: the full sample set is the detect
/// input, the stuck set is the detect UC class (and the stage-1 input), and
/// the stage-2 input is stage 1's FC class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Fraction of all samples answered correctly on the first pass.
    pub direct_accuracy: RateCell,
    /// First-pass partition over the full sample set.
    pub detect: StageMetrics,
    /// First stimulation round over the stuck set.
    pub stage1: StageMetrics,
    /// Second stimulation round over stage one's wrong-answer set.
    pub stage2: StageMetrics,
    /// Fraction of the stuck set converted to correct across both rounds.
    pub ocr: RateCell,
    /// Guidance conformity swing over verifiable samples.
    pub conf_v: RateCell,
    /// Guidance conformity swing over unverifiable samples.
    pub conf_u: RateCell,
    /// Stage-2 accuracy change when prior reasoning is fed back.
    pub cgr: RateCell,
    /// Stage-1 accuracy change when prior reasoning is fed back.
    pub rpc: RateCell,
    /// Fraction of stage-1 wrong answers that fall back to Unknown in stage 2.
    pub deg: RateCell,
    /// Direct accuracy plus the dataset-level fraction of stuck samples
    /// eventually converted to correct.
    pub latent_accuracy: RateCell,
    /// Guided-label rerun cells, stage-major, misguide rate descending.
    pub rtg_label: Vec<RtgCell>,
    /// Reasoning-feedback rerun cells, stage-major.
    pub rtg_rp: Vec<RpCell>,
    pub ablation: AblationMetrics,
    /// Annotated stuck samples per root cause (observed causes only).
    pub root_causes: BTreeMap<RootCause, usize>,
    /// Stuck samples without a cause annotation.
    pub root_cause_unannotated: usize,
    /// Per-phase counts of answers that carried no parsable sentinel.
    pub parse_failures: BTreeMap<String, usize>,
}

impl MetricsReport {
    /// The report of a run with no records: all zeros, all flags set.
    pub fn empty() -> MetricsReport {
        MetricsReport {
            direct_accuracy: RateCell::empty_zero(),
            detect: StageMetrics::empty(),
            stage1: StageMetrics::empty(),
            stage2: StageMetrics::empty(),
            ocr: RateCell::empty_zero(),
            conf_v: RateCell::empty_zero(),
            conf_u: RateCell::empty_zero(),
            cgr: RateCell::empty_zero(),
            rpc: RateCell::empty_zero(),
            deg: RateCell::empty_zero(),
            latent_accuracy: RateCell::empty_zero(),
            rtg_label: Vec::new(),
            rtg_rp: Vec::new(),
            ablation: AblationMetrics::default(),
            root_causes: BTreeMap::new(),
            root_cause_unannotated: 0,
            parse_failures: BTreeMap::new(),
        }
    }

    /// Size of the full sample set.
    pub fn total(&self) -> usize {
        self.detect.counts.input
    }

    /// Size of the stuck (vague-perception) set.
    pub fn vp_count(&self) -> usize {
        self.detect.counts.uc
    }

    /// Size of stage 1's wrong-answer set, the stage-2 input.
    pub fn fc1_count(&self) -> usize {
        self.stage1.counts.fc
    }

    /// All report quantities as a flat list of keyed rows pairing the exact
    /// rational with its rounded display form. Keys are unique and emitted
    /// in a fixed order.
    pub fn flat_entries(&self) -> Vec<FlatEntry> {
        let mut rows: Vec<FlatEntry> = Vec::new();
        count_row(&mut rows, "samples.total", self.detect.counts.input);
        count_row(&mut rows, "samples.verifiable", self.detect.counts.input_v);
        count_row(
            &mut rows,
            "samples.unverifiable",
            self.detect.counts.input_u,
        );
        rate_row(&mut rows, "direct_accuracy", self.direct_accuracy);
        rate_row(&mut rows, "latent_accuracy", self.latent_accuracy);
        count_row(&mut rows, "vp.total", self.detect.counts.uc);
        count_row(&mut rows, "vp.verifiable", self.detect.counts.uc_v);
        count_row(&mut rows, "vp.unverifiable", self.detect.counts.uc_u);
        rate_row(&mut rows, "ocr", self.ocr);
        rate_row(&mut rows, "conf.verifiable", self.conf_v);
        rate_row(&mut rows, "conf.unverifiable", self.conf_u);
        rate_row(&mut rows, "cgr", self.cgr);
        rate_row(&mut rows, "rpc", self.rpc);
        rate_row(&mut rows, "deg", self.deg);
        for (name, stage) in [
            ("detect", &self.detect),
            ("stage1", &self.stage1),
            ("stage2", &self.stage2),
        ] {
            stage_rows(&mut rows, name, stage);
        }
        for cell in &self.rtg_label {
            let base = Phase::RtgLabel {
                stage: cell.stage,
                misguide: cell.misguide,
            }
            .key();
            count_row(&mut rows, format!("{base}.input"), cell.counts.input);
            count_row(
                &mut rows,
                format!("{base}.input.verifiable"),
                cell.counts.input_v,
            );
            count_row(
                &mut rows,
                format!("{base}.input.unverifiable"),
                cell.counts.input_u,
            );
            count_row(&mut rows, format!("{base}.tc"), cell.counts.tc);
            rate_row(&mut rows, format!("{base}.tcr"), cell.tcr);
            rate_row(
                &mut rows,
                format!("{base}.tcr.verifiable.within"),
                cell.tcr_within_v,
            );
            rate_row(
                &mut rows,
                format!("{base}.tcr.unverifiable.within"),
                cell.tcr_within_u,
            );
        }
        for cell in &self.rtg_rp {
            let base = Phase::RtgRp { stage: cell.stage }.key();
            count_row(&mut rows, format!("{base}.input"), cell.counts.input);
            count_row(&mut rows, format!("{base}.tc"), cell.counts.tc);
            rate_row(&mut rows, format!("{base}.tcr"), cell.tcr);
        }
        count_row(&mut rows, "ablation.input", self.ablation.input);
        count_row(&mut rows, "ablation.unchanged", self.ablation.unchanged);
        rate_row(&mut rows, "ablation.unchanged_rate", self.ablation.rate);
        for (cause, count) in &self.root_causes {
            count_row(&mut rows, format!("cause.{}", cause_key(*cause)), *count);
        }
        count_row(&mut rows, "cause.unannotated", self.root_cause_unannotated);
        for (phase, count) in &self.parse_failures {
            count_row(&mut rows, format!("parse_failures.{phase}"), *count);
        }
        rows
    }

    /// The flat document as tab-separated text with a header line.
    pub fn to_flat_text(&self) -> String {
        let mut text = String::from("metric\texact\tdisplay\n");
        for row in self.flat_entries() {
            text.push_str(&format!("{}\t{}\t{}\n", row.key, row.exact, row.display));
        }
        text
    }
}

impl Default for MetricsReport {
    fn default() -> Self {
        MetricsReport::empty()
    }
}

/// One row of the flat metric document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatEntry {
    pub key: String,
    pub exact: String,
    pub display: String,
}

fn count_row(rows: &mut Vec<FlatEntry>, key: impl Into<String>, value: usize) {
    let text = value.to_string();
    rows.push(FlatEntry {
        key: key.into(),
        exact: text.clone(),
        display: text,
    });
}

fn rate_row(rows: &mut Vec<FlatEntry>, key: impl Into<String>, cell: RateCell) {
    rows.push(FlatEntry {
        key: key.into(),
        exact: cell.exact_string(),
        display: cell.display_string(),
    });
}

fn stage_rows(rows: &mut Vec<FlatEntry>, name: &str, stage: &StageMetrics) {
    let c = stage.counts;
    for (class, n, v, u) in [
        ("input", c.input, c.input_v, c.input_u),
        ("tc", c.tc, c.tc_v, c.tc_u),
        ("fc", c.fc, c.fc_v, c.fc_u),
        ("uc", c.uc, c.uc_v, c.uc_u),
    ] {
        count_row(rows, format!("{name}.{class}"), n);
        count_row(rows, format!("{name}.{class}.verifiable"), v);
        count_row(rows, format!("{name}.{class}.unverifiable"), u);
    }
    for (class, all, share_v, share_u, within_v, within_u) in [
        (
            "tcr",
            stage.all.tcr,
            stage.share_v.tcr,
            stage.share_u.tcr,
            stage.within_v.tcr,
            stage.within_u.tcr,
        ),
        (
            "fcr",
            stage.all.fcr,
            stage.share_v.fcr,
            stage.share_u.fcr,
            stage.within_v.fcr,
            stage.within_u.fcr,
        ),
        (
            "ucr",
            stage.all.ucr,
            stage.share_v.ucr,
            stage.share_u.ucr,
            stage.within_v.ucr,
            stage.within_u.ucr,
        ),
    ] {
        rate_row(rows, format!("{name}.{class}"), all);
        rate_row(rows, format!("{name}.{class}.verifiable.share"), share_v);
        rate_row(rows, format!("{name}.{class}.unverifiable.share"), share_u);
        rate_row(rows, format!("{name}.{class}.verifiable.within"), within_v);
        rate_row(
            rows,
            format!("{name}.{class}.unverifiable.within"),
            within_u,
        );
    }
}

fn cause_key(cause: RootCause) -> &'static str {
    match cause {
        RootCause::FactUnderstanding => "fact_understanding",
        RootCause::ReasoningGap => "reasoning_gap",
        RootCause::ExcessiveCaution => "excessive_caution",
        RootCause::Else => "else",
    }
}

// ---------------------------------------------------------------------------
// Individual metric operations
// ---------------------------------------------------------------------------

/// Correct-conversion rate of one partition. The denominator is always the
/// full input; `restrict` narrows the numerator to one sample type, so the
/// verifiable and unverifiable restrictions add up to the unrestricted rate.
pub fn compute_tcr(
    partition: &StagePartition,
    ftypes: &BTreeMap<String, FType>,
    restrict: Option<FType>,
) -> Result<RateCell, MetricsError> {
    if partition.input_ids.is_empty() {
        return Ok(RateCell::empty_zero());
    }
    let mut hits = 0usize;
    for id in &partition.tc {
        let ftype = ftypes
            .get(id)
            .ok_or_else(|| MetricsError::PartitionViolation {
                detail: format!("sample {id} appears in a partition but not in the trajectory"),
            })?;
        if restrict.is_none_or(|f| *ftype == f) {
            hits += 1;
        }
    }
    Ok(RateCell::ratio(hits, partition.input_ids.len()))
}

/// Overall conversion: correct conversions from both stimulation rounds over
/// the stuck set. The two rounds must convert disjoint samples and both must
/// stay inside the stuck set.
pub fn compute_ocr(tc1: &IdSet, tc2: &IdSet, vp: &IdSet) -> Result<RateCell, MetricsError> {
    let shared: Vec<String> = tc1.intersection(tc2).cloned().collect();
    if !shared.is_empty() {
        return Err(MetricsError::DisjointnessViolation { ids: shared });
    }
    let stray: Vec<String> = tc1
        .union(tc2)
        .filter(|id| !vp.contains(*id))
        .cloned()
        .collect();
    if !stray.is_empty() {
        return Err(MetricsError::SubsetViolation { ids: stray });
    }
    if vp.is_empty() {
        return Ok(RateCell::empty_zero());
    }
    Ok(RateCell::ratio(tc1.union(tc2).count(), vp.len()))
}

/// One conformity-grid observation: a measured accuracy, or a marker that
/// the stage had no samples of the type under consideration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfEntry {
    Value(Rational),
    Empty,
}

/// Conformity swing: accuracy under fully-true guidance (misguide rate 0)
/// minus accuracy under fully-wrong guidance (misguide rate 1), averaged
/// over the stages that have observations.
///
/// The map must contain entries for both stages at misguide rates 0 and 1.
/// A stage contributes only when both of its entries carry values; a stage
/// whose entries are `Empty` is excluded from the average. When no stage
/// contributes the result is an empty-flagged zero.
pub fn compute_conf(
    tcr_at: &BTreeMap<(StageId, Rate), ConfEntry>,
) -> Result<RateCell, MetricsError> {
    let mut diffs: Vec<Rational> = Vec::new();
    for stage in [StageId::One, StageId::Two] {
        let fetch = |misguide: Rate| {
            tcr_at
                .get(&(stage, misguide))
                .ok_or(MetricsError::MissingGridPoint {
                    stage: stage.number(),
                    misguide: misguide.to_string(),
                })
        };
        let guided_true = fetch(Rate::zero())?;
        let guided_wrong = fetch(Rate::one())?;
        if let (ConfEntry::Value(t), ConfEntry::Value(w)) = (guided_true, guided_wrong) {
            diffs.push(*t - *w);
        }
    }
    if diffs.is_empty() {
        return Ok(RateCell::empty_zero());
    }
    let sum = diffs
        .iter()
        .fold(Rational::from_integer(0), |acc, d| acc + d);
    Ok(RateCell::exact(
        sum / Rational::from_integer(diffs.len() as i64),
    ))
}

/// Stage-2 accuracy change when the model's prior reasoning chain is fed
/// back: with-reasoning minus without.
pub fn compute_cgr(with_reasoning: Rational, without_reasoning: Rational) -> Rational {
    with_reasoning - without_reasoning
}

/// Stage-1 accuracy change when the model's prior reasoning chain is fed
/// back: with-reasoning minus without.
pub fn compute_rpc(with_reasoning: Rational, without_reasoning: Rational) -> Rational {
    with_reasoning - without_reasoning
}

/// Degradation: the fraction of stage-1 wrong answers that fall back to
/// Unknown in stage 2. The stage-2 classes must be disjoint and contained in
/// stage 1's wrong-answer set.
pub fn compute_deg(
    tc2: &IdSet,
    fc2: &IdSet,
    uc2: &IdSet,
    fc1: &IdSet,
) -> Result<RateCell, MetricsError> {
    for (a, b) in [(tc2, fc2), (tc2, uc2), (fc2, uc2)] {
        let shared: Vec<String> = a.intersection(b).cloned().collect();
        if !shared.is_empty() {
            return Err(MetricsError::DisjointnessViolation { ids: shared });
        }
    }
    let stray: Vec<String> = tc2
        .iter()
        .chain(fc2.iter())
        .chain(uc2.iter())
        .filter(|id| !fc1.contains(*id))
        .cloned()
        .collect();
    if !stray.is_empty() {
        return Err(MetricsError::SubsetViolation { ids: stray });
    }
    if fc1.is_empty() {
        return Ok(RateCell::empty_zero());
    }
    Ok(RateCell::ratio(uc2.len(), fc1.len()))
}

/// Latent accuracy from sets: direct accuracy plus the fraction of the full
/// sample set that the stimulation rounds converted to correct.
pub fn compute_latent_accuracy(
    direct: RateCell,
    tc1: &IdSet,
    tc2: &IdSet,
    total: usize,
) -> Result<RateCell, MetricsError> {
    let shared: Vec<String> = tc1.intersection(tc2).cloned().collect();
    if !shared.is_empty() {
        return Err(MetricsError::DisjointnessViolation { ids: shared });
    }
    if total == 0 {
        return Ok(RateCell::empty_zero());
    }
    let converted = tc1.union(tc2).count();
    let value = direct.value + Rational::new(converted as i64, total as i64);
    if value > Rational::from_integer(1) {
        return Err(MetricsError::RangeViolation {
            what: "latent accuracy".into(),
            value: format_rational(value),
        });
    }
    Ok(RateCell::exact(value))
}

/// Latent accuracy from already-computed rates: direct accuracy plus the
/// overall conversion rate scaled by the stuck fraction of the dataset.
pub fn latent_accuracy_from_rates(
    direct: Rational,
    ocr: Rational,
    vp_fraction: Rational,
) -> Result<Rational, MetricsError> {
    let value = direct + ocr * vp_fraction;
    if value < Rational::from_integer(0) || value > Rational::from_integer(1) {
        return Err(MetricsError::RangeViolation {
            what: "latent accuracy".into(),
            value: format_rational(value),
        });
    }
    Ok(value)
}

// ---------------------------------------------------------------------------
// The incremental engine
// ---------------------------------------------------------------------------

/// Computes the full metric report for a run directory from its persisted
/// partition and summary snapshots.
///
/// Phases that have not completed yet contribute empty sets, so the report
/// is best-effort on an in-progress run and complete once the run is. The
/// trajectory is consulted only for sample types, parse-failure counts, and
/// the duplicate-answer integrity check.
pub fn engine_report(root: &Path) -> Result<MetricsReport, MetricsError> {
    let dir = RunDir::new(root);
    let records = load_trajectory(&dir.trajectory_path())?;
    let scan = TrajectoryScan::build(&records)?;

    let detect: Option<DetectSummary> = load_snapshot(&dir.partition_path(&Phase::Detect.key()))?;
    let stage1: Option<StagePartition> = load_snapshot(&dir.partition_path(&Phase::Stage1.key()))?;
    let stage2: Option<StagePartition> = load_snapshot(&dir.partition_path(&Phase::Stage2.key()))?;
    let ablation: Option<AblationSummary> =
        load_snapshot(&dir.partition_path(&Phase::AblationRepeat.key()))?;
    let causes: Option<RootCauseSummary> =
        load_snapshot(&dir.partition_path(&Phase::RootCause.key()))?;

    let detect_metrics = match &detect {
        Some(summary) => stage_metrics(&summary.partition, &scan.ftypes)?,
        None => StageMetrics::empty(),
    };
    let stage1_metrics = match &stage1 {
        Some(partition) => stage_metrics(partition, &scan.ftypes)?,
        None => StageMetrics::empty(),
    };
    let stage2_metrics = match &stage2 {
        Some(partition) => stage_metrics(partition, &scan.ftypes)?,
        None => StageMetrics::empty(),
    };

    let empty_set = IdSet::new();
    let vp = detect.as_ref().map_or(&empty_set, |d| &d.partition.uc);
    let tc1 = stage1.as_ref().map_or(&empty_set, |p| &p.tc);
    let fc1 = stage1.as_ref().map_or(&empty_set, |p| &p.fc);
    let tc2 = stage2.as_ref().map_or(&empty_set, |p| &p.tc);
    let fc2 = stage2.as_ref().map_or(&empty_set, |p| &p.fc);
    let uc2 = stage2.as_ref().map_or(&empty_set, |p| &p.uc);

    let direct_accuracy = detect_metrics.all.tcr;
    let ocr = compute_ocr(tc1, tc2, vp)?;
    let deg = compute_deg(tc2, fc2, uc2, fc1)?;
    let latent_accuracy =
        compute_latent_accuracy(direct_accuracy, tc1, tc2, detect_metrics.counts.input)?;

    let (rtg_label, rtg_rp) = load_rtg_cells(&dir, &scan.ftypes)?;
    let conf_v = conf_from_cells(&rtg_label, |cell| cell.tcr_within_v)?;
    let conf_u = conf_from_cells(&rtg_label, |cell| cell.tcr_within_u)?;

    let rp1 = rtg_rp.iter().find(|cell| cell.stage == StageId::One);
    let rp2 = rtg_rp.iter().find(|cell| cell.stage == StageId::Two);
    let rpc = match rp1 {
        Some(cell) if !stage1_metrics.all.tcr.empty => {
            RateCell::exact(compute_rpc(cell.tcr.value, stage1_metrics.all.tcr.value))
        }
        _ => RateCell::empty_zero(),
    };
    let cgr = match rp2 {
        Some(cell) if !stage2_metrics.all.tcr.empty => {
            RateCell::exact(compute_cgr(cell.tcr.value, stage2_metrics.all.tcr.value))
        }
        _ => RateCell::empty_zero(),
    };

    let ablation_metrics = match &ablation {
        Some(summary) if !summary.partition.input_ids.is_empty() => AblationMetrics {
            input: summary.partition.input_ids.len(),
            unchanged: summary.partition.uc.len(),
            rate: RateCell::ratio(
                summary.partition.uc.len(),
                summary.partition.input_ids.len(),
            ),
        },
        _ => AblationMetrics::default(),
    };

    let root_causes = match &causes {
        Some(summary) => {
            let mut counts = summary.counts.clone();
            counts.retain(|_, n| *n > 0);
            counts
        }
        None => BTreeMap::new(),
    };
    let annotated: usize = root_causes.values().sum();
    let root_cause_unannotated = vp.len().saturating_sub(annotated);

    Ok(MetricsReport {
        direct_accuracy,
        detect: detect_metrics,
        stage1: stage1_metrics,
        stage2: stage2_metrics,
        ocr,
        conf_v,
        conf_u,
        cgr,
        rpc,
        deg,
        latent_accuracy,
        rtg_label,
        rtg_rp,
        ablation: ablation_metrics,
        root_causes,
        root_cause_unannotated,
        parse_failures: scan.parse_failures,
    })
}

/// Sample types and parse-failure counts extracted from the trajectory, with
/// a uniqueness check on answer-bearing records.
struct TrajectoryScan {
    ftypes: BTreeMap<String, FType>,
    parse_failures: BTreeMap<String, usize>,
}

impl TrajectoryScan {
    fn build(records: &[TrajectoryRecord]) -> Result<TrajectoryScan, MetricsError> {
        let mut ftypes = BTreeMap::new();
        let mut parse_failures: BTreeMap<String, usize> = BTreeMap::new();
        let mut primaries: BTreeSet<(Phase, String)> = BTreeSet::new();
        for record in records {
            ftypes.insert(record.sample_id.clone(), record.ftype);
            let annotates_cause = record
                .judge
                .as_ref()
                .is_some_and(|judge| judge.root_cause.is_some());
            if (record.verdict.is_some() || annotates_cause)
                && !primaries.insert((record.phase, record.sample_id.clone()))
            {
                return Err(MetricsError::PartitionViolation {
                    detail: format!(
                        "duplicate {} record for sample {}",
                        record.phase.key(),
                        record.sample_id
                    ),
                });
            }
            if record.verdict.is_some() {
                if let Some(parsed) = &record.parsed {
                    if parsed.label.is_none() {
                        *parse_failures.entry(record.phase.key()).or_default() += 1;
                    }
                }
            }
        }
        Ok(TrajectoryScan {
            ftypes,
            parse_failures,
        })
    }
}

fn load_snapshot<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>, MetricsError> {
    let raw = match std::fs::read_to_string(path) {
        Ok(raw) => raw,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(source) => {
            return Err(MetricsError::Io {
                path: path.display().to_string(),
                source,
            })
        }
    };
    serde_json::from_str(&raw)
        .map(Some)
        .map_err(|e| MetricsError::Malformed {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
}

fn split_counts(
    set: &IdSet,
    ftypes: &BTreeMap<String, FType>,
) -> Result<(usize, usize, usize), MetricsError> {
    let mut verifiable = 0usize;
    let mut unverifiable = 0usize;
    for id in set {
        match ftypes.get(id) {
            Some(FType::Verifiable) => verifiable += 1,
            Some(FType::Unverifiable) => unverifiable += 1,
            None => {
                return Err(MetricsError::PartitionViolation {
                    detail: format!("sample {id} appears in a partition but not in the trajectory"),
                })
            }
        }
    }
    Ok((set.len(), verifiable, unverifiable))
}

fn stage_counts(
    partition: &StagePartition,
    ftypes: &BTreeMap<String, FType>,
) -> Result<StageCounts, MetricsError> {
    let (input, input_v, input_u) = split_counts(&partition.input_ids, ftypes)?;
    let (tc, tc_v, tc_u) = split_counts(&partition.tc, ftypes)?;
    let (fc, fc_v, fc_u) = split_counts(&partition.fc, ftypes)?;
    let (uc, uc_v, uc_u) = split_counts(&partition.uc, ftypes)?;
    Ok(StageCounts {
        input,
        input_v,
        input_u,
        tc,
        tc_v,
        tc_u,
        fc,
        fc_v,
        fc_u,
        uc,
        uc_v,
        uc_u,
    })
}

fn stage_metrics(
    partition: &StagePartition,
    ftypes: &BTreeMap<String, FType>,
) -> Result<StageMetrics, MetricsError> {
    Ok(StageMetrics::from_counts(stage_counts(partition, ftypes)?))
}

fn rtg_cell_from_counts(stage: StageId, misguide: Rate, counts: StageCounts) -> RtgCell {
    RtgCell {
        stage,
        misguide,
        counts,
        tcr: RateCell::ratio(counts.tc, counts.input),
        tcr_within_v: RateCell::ratio(counts.tc_v, counts.input_v),
        tcr_within_u: RateCell::ratio(counts.tc_u, counts.input_u),
    }
}

/// Loads every guided-label and reasoning-feedback partition present in the
/// run directory, skipping empty inputs (a rerun over nothing measures
/// nothing). Cells come back stage-major, misguide rate descending.
fn load_rtg_cells(
    dir: &RunDir,
    ftypes: &BTreeMap<String, FType>,
) -> Result<(Vec<RtgCell>, Vec<RpCell>), MetricsError> {
    let mut label_cells: Vec<RtgCell> = Vec::new();
    let mut rp_cells: Vec<RpCell> = Vec::new();
    let partitions_dir = dir.partitions_dir();
    if partitions_dir.is_dir() {
        let entries = std::fs::read_dir(&partitions_dir).map_err(|source| MetricsError::Io {
            path: partitions_dir.display().to_string(),
            source,
        })?;
        for entry in entries {
            let entry = entry.map_err(|source| MetricsError::Io {
                path: partitions_dir.display().to_string(),
                source,
            })?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(key) = name.strip_suffix(".json") else {
                continue;
            };
            let Ok(phase) = Phase::from_key(key) else {
                continue;
            };
            match phase {
                Phase::RtgLabel { stage, misguide } => {
                    let Some(partition): Option<StagePartition> = load_snapshot(&entry.path())?
                    else {
                        continue;
                    };
                    if partition.input_ids.is_empty() {
                        continue;
                    }
                    let counts = stage_counts(&partition, ftypes)?;
                    label_cells.push(rtg_cell_from_counts(stage, misguide, counts));
                }
                Phase::RtgRp { stage } => {
                    let Some(partition): Option<StagePartition> = load_snapshot(&entry.path())?
                    else {
                        continue;
                    };
                    if partition.input_ids.is_empty() {
                        continue;
                    }
                    let counts = stage_counts(&partition, ftypes)?;
                    rp_cells.push(RpCell {
                        stage,
                        counts,
                        tcr: RateCell::ratio(counts.tc, counts.input),
                    });
                }
                _ => {}
            }
        }
    }
    label_cells.sort_by_key(|cell| {
        (
            cell.stage.number(),
            std::cmp::Reverse(cell.misguide.as_ratio()),
        )
    });
    rp_cells.sort_by_key(|cell| cell.stage.number());
    Ok((label_cells, rp_cells))
}

/// Builds the conformity grid for one accuracy view and averages the swing.
///
/// A stage enters the grid with values only when cells exist at both
/// misguide extremes and the picked view is non-empty at both; otherwise the
/// stage is marked empty and excluded. This keeps the computation total for
/// grids that never sampled an extreme.
fn conf_from_cells(
    cells: &[RtgCell],
    pick: impl Fn(&RtgCell) -> RateCell,
) -> Result<RateCell, MetricsError> {
    let mut grid: BTreeMap<(StageId, Rate), ConfEntry> = BTreeMap::new();
    for stage in [StageId::One, StageId::Two] {
        let find = |misguide: Rate| {
            cells
                .iter()
                .find(|cell| cell.stage == stage && cell.misguide == misguide)
        };
        match (find(Rate::zero()), find(Rate::one())) {
            (Some(at_zero), Some(at_one)) => {
                for (misguide, cell) in [(Rate::zero(), at_zero), (Rate::one(), at_one)] {
                    let rate = pick(cell);
                    let entry = if rate.empty {
                        ConfEntry::Empty
                    } else {
                        ConfEntry::Value(rate.value)
                    };
                    grid.insert((stage, misguide), entry);
                }
            }
            _ => {
                grid.insert((stage, Rate::zero()), ConfEntry::Empty);
                grid.insert((stage, Rate::one()), ConfEntry::Empty);
            }
        }
    }
    compute_conf(&grid)
}

// ---------------------------------------------------------------------------
// The brute-force oracle
// ---------------------------------------------------------------------------

/// Recomputes the full metric report from the trajectory alone, ignoring
/// every persisted partition.
///
/// Everything is rebuilt with plain scans and explicit set construction, so
/// the result is an independent cross-check of [`engine_report`]: on a
/// completed, untampered run the two reports are equal field for field.
pub fn oracle_recompute(trajectory_path: &Path) -> Result<MetricsReport, MetricsError> {
    fn naive_ratio(numer: usize, denom: usize) -> RateCell {
        if denom == 0 {
            RateCell {
                value: Rational::from_integer(0),
                empty: true,
            }
        } else {
            RateCell {
                value: Rational::new(numer as i64, denom as i64),
                empty: false,
            }
        }
    }

    fn type_count(set: &IdSet, types: &BTreeMap<String, FType>, wanted: FType) -> usize {
        set.iter()
            .filter(|id| types.get(*id).copied() == Some(wanted))
            .count()
    }

    fn naive_counts(
        input: &IdSet,
        tc: &IdSet,
        fc: &IdSet,
        uc: &IdSet,
        types: &BTreeMap<String, FType>,
    ) -> StageCounts {
        StageCounts {
            input: input.len(),
            input_v: type_count(input, types, FType::Verifiable),
            input_u: type_count(input, types, FType::Unverifiable),
            tc: tc.len(),
            tc_v: type_count(tc, types, FType::Verifiable),
            tc_u: type_count(tc, types, FType::Unverifiable),
            fc: fc.len(),
            fc_v: type_count(fc, types, FType::Verifiable),
            fc_u: type_count(fc, types, FType::Unverifiable),
            uc: uc.len(),
            uc_v: type_count(uc, types, FType::Verifiable),
            uc_u: type_count(uc, types, FType::Unverifiable),
        }
    }

    fn naive_stage(counts: StageCounts) -> StageMetrics {
        let rates = |tc: usize, fc: usize, uc: usize, denom: usize| ClassRates {
            tcr: naive_ratio(tc, denom),
            fcr: naive_ratio(fc, denom),
            ucr: naive_ratio(uc, denom),
        };
        StageMetrics {
            counts,
            all: rates(counts.tc, counts.fc, counts.uc, counts.input),
            share_v: rates(counts.tc_v, counts.fc_v, counts.uc_v, counts.input),
            share_u: rates(counts.tc_u, counts.fc_u, counts.uc_u, counts.input),
            within_v: rates(counts.tc_v, counts.fc_v, counts.uc_v, counts.input_v),
            within_u: rates(counts.tc_u, counts.fc_u, counts.uc_u, counts.input_u),
        }
    }

    let records = load_trajectory(trajectory_path)?;

    // Answer inventory: phase -> sample -> (verdict, parse failed). Each
    // sample may answer each phase exactly once.
    let mut answers: BTreeMap<Phase, BTreeMap<String, (Verdict, bool)>> = BTreeMap::new();
    let mut causes: BTreeMap<String, RootCause> = BTreeMap::new();
    let mut types: BTreeMap<String, FType> = BTreeMap::new();
    for record in &records {
        types.insert(record.sample_id.clone(), record.ftype);
        if let Some(verdict) = record.verdict {
            let parse_failed = record.parsed.as_ref().is_some_and(|p| p.label.is_none());
            let previous = answers
                .entry(record.phase)
                .or_default()
                .insert(record.sample_id.clone(), (verdict, parse_failed));
            if previous.is_some() {
                return Err(MetricsError::PartitionViolation {
                    detail: format!(
                        "duplicate {} record for sample {}",
                        record.phase.key(),
                        record.sample_id
                    ),
                });
            }
        }
        if let Some(cause) = record.judge.as_ref().and_then(|judge| judge.root_cause) {
            if causes.insert(record.sample_id.clone(), cause).is_some() {
                return Err(MetricsError::PartitionViolation {
                    detail: format!(
                        "duplicate root-cause record for sample {}",
                        record.sample_id
                    ),
                });
            }
        }
    }

    let class_set = |phase: Phase, class: Verdict| -> IdSet {
        answers
            .get(&phase)
            .map(|by_sample| {
                by_sample
                    .iter()
                    .filter(|(_, (verdict, _))| *verdict == class)
                    .map(|(id, _)| id.clone())
                    .collect()
            })
            .unwrap_or_default()
    };
    let input_set = |phase: Phase| -> IdSet {
        answers
            .get(&phase)
            .map(|by_sample| by_sample.keys().cloned().collect())
            .unwrap_or_default()
    };

    let detect_input = input_set(Phase::Detect);
    let detect_tc = class_set(Phase::Detect, Verdict::TrueConverting);
    let detect_fc = class_set(Phase::Detect, Verdict::FalseConverting);
    let vp = class_set(Phase::Detect, Verdict::UnexcitedConverting);
    let detect_metrics = naive_stage(naive_counts(
        &detect_input,
        &detect_tc,
        &detect_fc,
        &vp,
        &types,
    ));

    let stage1_input = input_set(Phase::Stage1);
    let tc1 = class_set(Phase::Stage1, Verdict::TrueConverting);
    let fc1 = class_set(Phase::Stage1, Verdict::FalseConverting);
    let uc1 = class_set(Phase::Stage1, Verdict::UnexcitedConverting);
    let stage1_metrics = naive_stage(naive_counts(&stage1_input, &tc1, &fc1, &uc1, &types));

    let stage2_input = input_set(Phase::Stage2);
    let tc2 = class_set(Phase::Stage2, Verdict::TrueConverting);
    let fc2 = class_set(Phase::Stage2, Verdict::FalseConverting);
    let uc2 = class_set(Phase::Stage2, Verdict::UnexcitedConverting);
    let stage2_metrics = naive_stage(naive_counts(&stage2_input, &tc2, &fc2, &uc2, &types));

    let direct_accuracy = naive_ratio(detect_tc.len(), detect_input.len());

    // Overall conversion, checked against the stuck set by hand.
    let overlap: Vec<String> = tc1.intersection(&tc2).cloned().collect();
    if !overlap.is_empty() {
        return Err(MetricsError::DisjointnessViolation { ids: overlap });
    }
    let converted: IdSet = tc1.union(&tc2).cloned().collect();
    let stray: Vec<String> = converted
        .iter()
        .filter(|id| !vp.contains(*id))
        .cloned()
        .collect();
    if !stray.is_empty() {
        return Err(MetricsError::SubsetViolation { ids: stray });
    }
    let ocr = naive_ratio(converted.len(), vp.len());

    // Degradation, with its containment check done by hand as well.
    let stage2_stray: Vec<String> = stage2_input
        .iter()
        .filter(|id| !fc1.contains(*id))
        .cloned()
        .collect();
    if !stage2_stray.is_empty() {
        return Err(MetricsError::SubsetViolation { ids: stage2_stray });
    }
    let deg = if fc1.is_empty() {
        naive_ratio(0, 0)
    } else {
        naive_ratio(uc2.len(), fc1.len())
    };

    let latent_accuracy = if detect_input.is_empty() {
        naive_ratio(0, 0)
    } else {
        let value = direct_accuracy.value
            + Rational::new(converted.len() as i64, detect_input.len() as i64);
        if value > Rational::from_integer(1) {
            return Err(MetricsError::RangeViolation {
                what: "latent accuracy".into(),
                value: format_rational(value),
            });
        }
        RateCell {
            value,
            empty: false,
        }
    };

    // Guided-label and reasoning-feedback cells straight from the records.
    let mut rtg_label: Vec<RtgCell> = Vec::new();
    let mut rtg_rp: Vec<RpCell> = Vec::new();
    for phase in answers.keys().copied().collect::<Vec<Phase>>() {
        match phase {
            Phase::RtgLabel { stage, misguide } => {
                let counts = naive_counts(
                    &input_set(phase),
                    &class_set(phase, Verdict::TrueConverting),
                    &class_set(phase, Verdict::FalseConverting),
                    &class_set(phase, Verdict::UnexcitedConverting),
                    &types,
                );
                rtg_label.push(RtgCell {
                    stage,
                    misguide,
                    counts,
                    tcr: naive_ratio(counts.tc, counts.input),
                    tcr_within_v: naive_ratio(counts.tc_v, counts.input_v),
                    tcr_within_u: naive_ratio(counts.tc_u, counts.input_u),
                });
            }
            Phase::RtgRp { stage } => {
                let counts = naive_counts(
                    &input_set(phase),
                    &class_set(phase, Verdict::TrueConverting),
                    &class_set(phase, Verdict::FalseConverting),
                    &class_set(phase, Verdict::UnexcitedConverting),
                    &types,
                );
                rtg_rp.push(RpCell {
                    stage,
                    counts,
                    tcr: naive_ratio(counts.tc, counts.input),
                });
            }
            _ => {}
        }
    }
    rtg_label.sort_by_key(|cell| {
        (
            cell.stage.number(),
            std::cmp::Reverse(cell.misguide.as_ratio()),
        )
    });
    rtg_rp.sort_by_key(|cell| cell.stage.number());

    // Conformity swings averaged by hand over the stages that measured both
    // guidance extremes.
    let conf_by = |pick: &dyn Fn(&RtgCell) -> RateCell| -> RateCell {
        let mut diffs: Vec<Rational> = Vec::new();
        for stage in [StageId::One, StageId::Two] {
            let find = |misguide: Rate| {
                rtg_label
                    .iter()
                    .find(|cell| cell.stage == stage && cell.misguide == misguide)
            };
            if let (Some(at_zero), Some(at_one)) = (find(Rate::zero()), find(Rate::one())) {
                let (true_side, wrong_side) = (pick(at_zero), pick(at_one));
                if !true_side.empty && !wrong_side.empty {
                    diffs.push(true_side.value - wrong_side.value);
                }
            }
        }
        if diffs.is_empty() {
            return naive_ratio(0, 0);
        }
        let mut sum = Rational::from_integer(0);
        for diff in &diffs {
            sum += diff;
        }
        RateCell {
            value: sum / Rational::from_integer(diffs.len() as i64),
            empty: false,
        }
    };
    let conf_v = conf_by(&|cell| cell.tcr_within_v);
    let conf_u = conf_by(&|cell| cell.tcr_within_u);

    // Reasoning-feedback differences against the unaided stages.
    let rpc = match rtg_rp.iter().find(|cell| cell.stage == StageId::One) {
        Some(cell) if !stage1_input.is_empty() => RateCell {
            value: cell.tcr.value - stage1_metrics.all.tcr.value,
            empty: false,
        },
        _ => naive_ratio(0, 0),
    };
    let cgr = match rtg_rp.iter().find(|cell| cell.stage == StageId::Two) {
        Some(cell) if !stage2_input.is_empty() => RateCell {
            value: cell.tcr.value - stage2_metrics.all.tcr.value,
            empty: false,
        },
        _ => naive_ratio(0, 0),
    };

    let ablation_input = input_set(Phase::AblationRepeat);
    let ablation_unchanged = class_set(Phase::AblationRepeat, Verdict::UnexcitedConverting);
    let ablation = if ablation_input.is_empty() {
        AblationMetrics {
            input: 0,
            unchanged: 0,
            rate: RateCell {
                value: Rational::from_integer(1),
                empty: true,
            },
        }
    } else {
        AblationMetrics {
            input: ablation_input.len(),
            unchanged: ablation_unchanged.len(),
            rate: naive_ratio(ablation_unchanged.len(), ablation_input.len()),
        }
    };

    let mut root_causes: BTreeMap<RootCause, usize> = BTreeMap::new();
    for cause in causes.values() {
        *root_causes.entry(*cause).or_default() += 1;
    }
    let root_cause_unannotated = vp.len().saturating_sub(causes.len());

    let mut parse_failures: BTreeMap<String, usize> = BTreeMap::new();
    for (phase, by_sample) in &answers {
        let failed = by_sample
            .values()
            .filter(|(_, parse_failed)| *parse_failed)
            .count();
        if failed > 0 {
            parse_failures.insert(phase.key(), failed);
        }
    }

    Ok(MetricsReport {
        direct_accuracy,
        detect: detect_metrics,
        stage1: stage1_metrics,
        stage2: stage2_metrics,
        ocr,
        conf_v,
        conf_u,
        cgr,
        rpc,
        deg,
        latent_accuracy,
        rtg_label,
        rtg_rp,
        ablation,
        root_causes,
        root_cause_unannotated,
        parse_failures,
    })
}

// ---------------------------------------------------------------------------
// Report-level consistency checks
// ---------------------------------------------------------------------------

/// Arithmetic identities every completed run's report must satisfy. Returns
/// plain descriptions of whatever fails; an empty list means consistent.
pub fn check_report_invariants(report: &MetricsReport) -> Vec<String> {
    let mut violations: Vec<String> = Vec::new();
    let one = Rational::from_integer(1);

    for (name, stage) in [
        ("detect", &report.detect),
        ("stage1", &report.stage1),
        ("stage2", &report.stage2),
    ] {
        let c = stage.counts;
        if c.tc + c.fc + c.uc != c.input {
            violations.push(format!(
                "{name}: outcome classes do not partition the input"
            ));
        }
        if c.input_v + c.input_u != c.input
            || c.tc_v + c.tc_u != c.tc
            || c.fc_v + c.fc_u != c.fc
            || c.uc_v + c.uc_u != c.uc
        {
            violations.push(format!("{name}: type splits do not add up"));
        }
        if c.input > 0 {
            if stage.all.tcr.value + stage.all.fcr.value + stage.all.ucr.value != one {
                violations.push(format!("{name}: class rates do not sum to 1"));
            }
            for (class, all, share_v, share_u) in [
                ("tcr", stage.all.tcr, stage.share_v.tcr, stage.share_u.tcr),
                ("fcr", stage.all.fcr, stage.share_v.fcr, stage.share_u.fcr),
                ("ucr", stage.all.ucr, stage.share_v.ucr, stage.share_u.ucr),
            ] {
                if share_v.value + share_u.value != all.value {
                    violations.push(format!("{name}: {class} type shares are not additive"));
                }
            }
        }
    }

    if report.direct_accuracy != report.detect.all.tcr {
        violations.push("direct accuracy differs from the first-pass correct rate".into());
    }
    if report.stage1.counts.input != report.detect.counts.uc {
        violations.push("stage1 input differs from the stuck set".into());
    }
    if report.stage2.counts.input != report.stage1.counts.fc {
        violations.push("stage2 input differs from stage1's wrong-answer set".into());
    }

    let vp = report.detect.counts.uc;
    let converted = report.stage1.counts.tc + report.stage2.counts.tc;
    if vp == 0 {
        if !report.ocr.empty {
            violations.push("ocr is not empty-flagged over an empty stuck set".into());
        }
    } else if report.ocr.value != Rational::new(converted as i64, vp as i64) {
        violations.push("ocr does not equal converted-over-stuck".into());
    }

    let fc1 = report.stage1.counts.fc;
    if fc1 == 0 {
        if !report.deg.empty {
            violations.push("deg is not empty-flagged with no stage-1 wrong answers".into());
        }
    } else {
        if report.deg.value != Rational::new(report.stage2.counts.uc as i64, fc1 as i64) {
            violations
                .push("deg does not equal stage-2 unknowns over stage-1 wrong answers".into());
        }
        if report.stage2.counts.input == fc1
            && report.deg.value + report.stage2.all.tcr.value + report.stage2.all.fcr.value != one
        {
            violations.push("deg does not complement the stage-2 conversion rates".into());
        }
    }

    let total = report.detect.counts.input;
    if total == 0 {
        if !report.latent_accuracy.empty {
            violations.push("latent accuracy is not empty-flagged on an empty run".into());
        }
    } else {
        let expected = report.direct_accuracy.value + Rational::new(converted as i64, total as i64);
        if report.latent_accuracy.value != expected {
            violations.push("latent accuracy does not decompose into direct plus converted".into());
        }
        if report.latent_accuracy.value > one
            || report.latent_accuracy.value < report.direct_accuracy.value
        {
            violations.push("latent accuracy is outside [direct accuracy, 1]".into());
        }
    }

    if report.ablation.unchanged > report.ablation.input {
        violations.push("ablation unchanged count exceeds its input".into());
    }
    if report.ablation.input == 0 {
        if !(report.ablation.rate.empty && report.ablation.rate.value == one) {
            violations.push("empty ablation is not a vacuous 1".into());
        }
    } else if report.ablation.rate.value
        != Rational::new(
            report.ablation.unchanged as i64,
            report.ablation.input as i64,
        )
    {
        violations.push("ablation rate does not equal unchanged-over-input".into());
    }

    let annotated: usize = report.root_causes.values().sum();
    if annotated + report.root_cause_unannotated != vp {
        violations.push("cause annotations do not cover the stuck set".into());
    }

    for cell in &report.rtg_label {
        let key = Phase::RtgLabel {
            stage: cell.stage,
            misguide: cell.misguide,
        }
        .key();
        let c = cell.counts;
        if c.tc + c.fc + c.uc != c.input {
            violations.push(format!("{key}: outcome classes do not partition the input"));
        }
        let expected_input = match cell.stage {
            StageId::One => vp,
            StageId::Two => fc1,
        };
        if c.input != expected_input {
            violations.push(format!("{key}: input size differs from its source stage"));
        }
        if c.input > 0 && cell.tcr.value != Rational::new(c.tc as i64, c.input as i64) {
            violations.push(format!("{key}: tcr does not equal tc-over-input"));
        }
    }
    for cell in &report.rtg_rp {
        let key = Phase::RtgRp { stage: cell.stage }.key();
        let expected_input = match cell.stage {
            StageId::One => vp,
            StageId::Two => fc1,
        };
        if cell.counts.input != expected_input {
            violations.push(format!("{key}: input size differs from its source stage"));
        }
    }

    violations
}
