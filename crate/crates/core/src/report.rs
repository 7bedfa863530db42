//! Run artifacts: comparison tables, an exact-value export, and a post-run
//! manifest.
//!
//! [`ReportBundle::build`] turns a list of tagged [`MetricsReport`]s into five
//! tables, one row per run, rows sorted by `(model, dataset)`:
//!
//! * `main` — `model, dataset, tcr_stage1, tcr_stage2, ocr, conf_v, conf_u,
//!   cgr, rpc`
//! * `degrading` — `model, dataset, tcr_stage2, deg`
//! * `vp_types` — `model, dataset, vp_overall, vp_verifiable,
//!   vp_unverifiable`
//! * `root_causes` — `model, dataset, fact_understanding, reasoning_gap,
//!   excessive_caution, else, unannotated` (shares of the stuck set)
//! * `ablation` — `model, dataset, repeat_input, repeat_unchanged,
//!   unchanged_rate`
//!
//! Every cell is either a tag, an integer count, or a rate displayed as a
//! percentage rounded half-even to two decimals; rates whose denominator was
//! empty render as `/`. [`emit_tables`] writes each table in the chosen
//! format — comma-delimited text (UTF-8, LF endings, header row first,
//! minimal quoting) or pipe-separated markup — plus `exact.json`, which
//! carries the unrounded rationals of every input report for lossless
//! downstream use.
//!
//! [`parse_delimited`] inverts the delimited writer exactly, so parsing an
//! emitted table recovers the rounded cells byte for byte. Emission contains
//! no timestamps and iterates only ordered structures, making identical
//! inputs produce byte-identical files.
//!
//! [`emit_manifest`] summarizes a run directory after the fact: identity and
//! digests from the pinned run manifest, per-phase record and input counts,
//! which phases completed (snapshot present) versus merely started, and the
//! completion sources observed in the transcript. Both of its timestamps live
//! in dedicated fields that [`normalized_report_manifest_json`] zeroes for
//! byte comparisons.

use std::collections::{BTreeMap, BTreeSet};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Phase, RootCause};
use crate::metrics::{MetricsReport, RateCell};
use crate::pipeline::{
    load_trajectory, AblationSummary, DetectSummary, PipelineError, RootCauseSummary, RunDir,
    RunManifest, StagePartition,
};
use crate::provider::{load_transcript, BackendKind, ProviderError};

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report input is empty; at least one tagged run is required")]
    EmptyInput,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Malformed { path: String, detail: String },
    #[error("{path}: not a run directory (no pinned manifest)")]
    MissingRun { path: String },
    #[error(transparent)]
    Run(#[from] PipelineError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

/// One run's metrics labeled with the model and dataset that produced them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedReport {
    pub model: String,
    pub dataset: String,
    pub metrics: MetricsReport,
}

/// Column order of the main comparison table.
pub const MAIN_COLUMNS: &[&str] = &[
    "model",
    "dataset",
    "tcr_stage1",
    "tcr_stage2",
    "ocr",
    "conf_v",
    "conf_u",
    "cgr",
    "rpc",
];

/// Column order of the degradation table.
pub const DEGRADING_COLUMNS: &[&str] = &["model", "dataset", "tcr_stage2", "deg"];

/// Column order of the stuck-set share table.
pub const VP_TYPE_COLUMNS: &[&str] = &[
    "model",
    "dataset",
    "vp_overall",
    "vp_verifiable",
    "vp_unverifiable",
];

/// Column order of the root-cause distribution table.
pub const ROOT_CAUSE_COLUMNS: &[&str] = &[
    "model",
    "dataset",
    "fact_understanding",
    "reasoning_gap",
    "excessive_caution",
    "else",
    "unannotated",
];

/// Column order of the repeat-ablation table.
pub const ABLATION_COLUMNS: &[&str] = &[
    "model",
    "dataset",
    "repeat_input",
    "repeat_unchanged",
    "unchanged_rate",
];

/// A fixed header plus one row of display cells per tagged run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    /// File stem of the emitted artifact.
    pub name: &'static str,
    pub header: &'static [&'static str],
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &'static str, header: &'static [&'static str]) -> Table {
        Table {
            name,
            header,
            rows: Vec::new(),
        }
    }
}

/// All emission-ready artifacts derived from a list of tagged runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportBundle {
    pub main: Table,
    pub degrading: Table,
    pub vp_types: Table,
    pub root_causes: Table,
    pub ablation: Table,
    /// The inputs in row order, serialized unrounded as `exact.json`.
    pub exact: Vec<TaggedReport>,
}

impl ReportBundle {
    /// Builds every table, sorting runs by `(model, dataset)`; ties keep
    /// their input order.
    pub fn build(reports: &[TaggedReport]) -> Result<ReportBundle, ReportError> {
        if reports.is_empty() {
            return Err(ReportError::EmptyInput);
        }
        let mut ordered: Vec<&TaggedReport> = reports.iter().collect();
        ordered.sort_by(|a, b| {
            (a.model.as_str(), a.dataset.as_str()).cmp(&(b.model.as_str(), b.dataset.as_str()))
        });

        let mut bundle = ReportBundle {
            main: Table::new("main", MAIN_COLUMNS),
            degrading: Table::new("degrading", DEGRADING_COLUMNS),
            vp_types: Table::new("vp_types", VP_TYPE_COLUMNS),
            root_causes: Table::new("root_causes", ROOT_CAUSE_COLUMNS),
            ablation: Table::new("ablation", ABLATION_COLUMNS),
            exact: ordered.iter().map(|&r| r.clone()).collect(),
        };
        for run in &ordered {
            let tag = |cells: Vec<String>| {
                let mut row = vec![run.model.clone(), run.dataset.clone()];
                row.extend(cells);
                row
            };
            let m = &run.metrics;
            bundle.main.rows.push(tag(vec![
                m.stage1.all.tcr.display_string(),
                m.stage2.all.tcr.display_string(),
                m.ocr.display_string(),
                m.conf_v.display_string(),
                m.conf_u.display_string(),
                m.cgr.display_string(),
                m.rpc.display_string(),
            ]));
            bundle.degrading.rows.push(tag(vec![
                m.stage2.all.tcr.display_string(),
                m.deg.display_string(),
            ]));
            bundle.vp_types.rows.push(tag(vec![
                m.detect.all.ucr.display_string(),
                m.detect.within_v.ucr.display_string(),
                m.detect.within_u.ucr.display_string(),
            ]));
            let vp = m.vp_count();
            let share = |count: usize| RateCell::ratio(count, vp).display_string();
            let mut cause_row: Vec<String> = RootCause::ALL
                .iter()
                .map(|cause| share(m.root_causes.get(cause).copied().unwrap_or(0)))
                .collect();
            cause_row.push(share(m.root_cause_unannotated));
            bundle.root_causes.rows.push(tag(cause_row));
            bundle.ablation.rows.push(tag(vec![
                m.ablation.input.to_string(),
                m.ablation.unchanged.to_string(),
                m.ablation.rate.display_string(),
            ]));
        }
        Ok(bundle)
    }

    /// The tables in emission order.
    pub fn tables(&self) -> [&Table; 5] {
        [
            &self.main,
            &self.degrading,
            &self.vp_types,
            &self.root_causes,
            &self.ablation,
        ]
    }
}

// ---------------------------------------------------------------------------
// Rendering and parsing
// ---------------------------------------------------------------------------

/// Output syntax for table emission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    /// Comma-delimited text with a header row, minimal quoting, LF endings.
    Delimited,
    /// Pipe-separated tables for human review.
    Markup,
}

impl TableFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            TableFormat::Delimited => "csv",
            TableFormat::Markup => "md",
        }
    }
}

fn escape_delimited(field: &str) -> String {
    if field.contains([',', '"', '\n', '\r']) {
        let mut quoted = String::with_capacity(field.len() + 2);
        quoted.push('"');
        for c in field.chars() {
            if c == '"' {
                quoted.push('"');
            }
            quoted.push(c);
        }
        quoted.push('"');
        quoted
    } else {
        field.to_string()
    }
}

fn push_delimited_row<'a>(out: &mut String, cells: impl Iterator<Item = &'a str>) {
    let mut first = true;
    for cell in cells {
        if !first {
            out.push(',');
        }
        out.push_str(&escape_delimited(cell));
        first = false;
    }
    out.push('\n');
}

/// Renders a table as comma-delimited text, header row first.
pub fn render_delimited(table: &Table) -> String {
    let mut out = String::new();
    push_delimited_row(&mut out, table.header.iter().copied());
    for row in &table.rows {
        push_delimited_row(&mut out, row.iter().map(String::as_str));
    }
    out
}

fn escape_markup(field: &str) -> String {
    field.replace('|', "\\|").replace('\n', " ")
}

/// Renders a table as a pipe-separated markup table.
pub fn render_markup(table: &Table) -> String {
    let mut out = String::new();
    let mut push_row = |cells: &mut dyn Iterator<Item = String>| {
        out.push('|');
        for cell in cells {
            out.push(' ');
            out.push_str(&cell);
            out.push_str(" |");
        }
        out.push('\n');
    };
    push_row(&mut table.header.iter().map(|h| escape_markup(h)));
    push_row(&mut table.header.iter().map(|_| "---".to_string()));
    for row in &table.rows {
        push_row(&mut row.iter().map(|cell| escape_markup(cell)));
    }
    out
}

/// Parses comma-delimited text produced by [`render_delimited`], returning
/// every row (header included) as a list of unescaped fields. Exact inverse
/// of the writer: parsing an emitted table recovers each cell byte for byte.
pub fn parse_delimited(text: &str) -> Result<Vec<Vec<String>>, ReportError> {
    enum State {
        /// At the start of a field, nothing consumed yet.
        FieldStart,
        /// Inside an unquoted field.
        Unquoted,
        /// Inside a quoted field.
        Quoted,
        /// Saw a quote inside a quoted field: closer or first of a pair.
        QuoteSeen,
    }
    let malformed = |detail: &str| ReportError::Malformed {
        path: "delimited input".to_string(),
        detail: detail.to_string(),
    };

    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut row: Vec<String> = Vec::new();
    let mut field = String::new();
    let mut state = State::FieldStart;
    for c in text.chars() {
        state = match state {
            State::FieldStart => match c {
                '"' => State::Quoted,
                ',' => {
                    row.push(std::mem::take(&mut field));
                    State::FieldStart
                }
                '\n' => {
                    row.push(std::mem::take(&mut field));
                    rows.push(std::mem::take(&mut row));
                    State::FieldStart
                }
                '\r' => return Err(malformed("carriage return outside a quoted field")),
                other => {
                    field.push(other);
                    State::Unquoted
                }
            },
            State::Unquoted => match c {
                ',' => {
                    row.push(std::mem::take(&mut field));
                    State::FieldStart
                }
                '\n' => {
                    row.push(std::mem::take(&mut field));
                    rows.push(std::mem::take(&mut row));
                    State::FieldStart
                }
                '"' => return Err(malformed("quote inside an unquoted field")),
                '\r' => return Err(malformed("carriage return outside a quoted field")),
                other => {
                    field.push(other);
                    State::Unquoted
                }
            },
            State::Quoted => match c {
                '"' => State::QuoteSeen,
                other => {
                    field.push(other);
                    State::Quoted
                }
            },
            State::QuoteSeen => match c {
                '"' => {
                    field.push('"');
                    State::Quoted
                }
                ',' => {
                    row.push(std::mem::take(&mut field));
                    State::FieldStart
                }
                '\n' => {
                    row.push(std::mem::take(&mut field));
                    rows.push(std::mem::take(&mut row));
                    State::FieldStart
                }
                _ => return Err(malformed("text after a closing quote")),
            },
        };
    }
    match state {
        State::Quoted => return Err(malformed("unterminated quoted field")),
        State::Unquoted | State::QuoteSeen => {
            row.push(field);
            rows.push(row);
        }
        State::FieldStart => {
            // Input ended on a comma: the final field is empty. Ended on a
            // newline (or was empty): the row is already closed.
            if !row.is_empty() {
                row.push(field);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    std::fs::write(path, bytes).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes one file per table in the chosen format plus `exact.json`, and
/// returns the written paths in emission order. Identical inputs produce
/// byte-identical files.
pub fn emit_tables(
    reports: &[TaggedReport],
    out_dir: &Path,
    format: TableFormat,
) -> Result<Vec<PathBuf>, ReportError> {
    let bundle = ReportBundle::build(reports)?;
    write_bundle(&bundle, out_dir, format)
}

/// [`emit_tables`] for an already-built bundle.
pub fn write_bundle(
    bundle: &ReportBundle,
    out_dir: &Path,
    format: TableFormat,
) -> Result<Vec<PathBuf>, ReportError> {
    std::fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let mut written = Vec::new();
    for table in bundle.tables() {
        let body = match format {
            TableFormat::Delimited => render_delimited(table),
            TableFormat::Markup => render_markup(table),
        };
        let path = out_dir.join(format!("{}.{}", table.name, format.extension()));
        write_file(&path, body.as_bytes())?;
        written.push(path);
    }
    let mut exact =
        serde_json::to_string_pretty(&bundle.exact).expect("report serialization cannot fail");
    exact.push('\n');
    let path = out_dir.join("exact.json");
    write_file(&path, exact.as_bytes())?;
    written.push(path);
    Ok(written)
}

// ---------------------------------------------------------------------------
// Post-run manifest
// ---------------------------------------------------------------------------

/// Per-phase accounting in the post-run manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseAccount {
    /// Samples the phase processed: the snapshot's input size when the phase
    /// completed, otherwise the distinct answered ids in the trajectory.
    pub input: usize,
    /// Trajectory records the phase appended, auxiliary turns included.
    pub records: usize,
    /// Whether the phase's snapshot file is present.
    pub complete: bool,
}

/// Summary of a run directory emitted after (or mid-) execution.
///
/// Identity fields are copied from the manifest pinned at creation; phase
/// accounting is recomputed from the trajectory and snapshot files, so a
/// checkpointed run shows its unfinished phases. Both timestamps sit in
/// dedicated fields so [`normalized_report_manifest_json`] can zero them for
/// byte comparison of reruns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReportManifest {
    pub tool_version: String,
    pub run_id: String,
    pub model_name: String,
    pub config_digest: String,
    pub sample_digest: String,
    pub seed: u64,
    /// Distinct completion sources observed in the transcript.
    pub provider_backends: Vec<String>,
    pub template_digests: BTreeMap<String, String>,
    pub phases: BTreeMap<String, PhaseAccount>,
    /// Phases with trajectory records but no persisted snapshot.
    pub incomplete_phases: Vec<String>,
    /// Copied from the pinned manifest.
    pub created_unix_ms: u64,
    /// When this summary was emitted.
    pub generated_unix_ms: u64,
}

/// Manifest JSON with both timestamps zeroed, for byte comparison of reruns.
pub fn normalized_report_manifest_json(raw: &str) -> Result<String, ReportError> {
    let mut manifest: RunReportManifest =
        serde_json::from_str(raw).map_err(|e| ReportError::Malformed {
            path: "run summary manifest".to_string(),
            detail: e.to_string(),
        })?;
    manifest.created_unix_ms = 0;
    manifest.generated_unix_ms = 0;
    Ok(serde_json::to_string(&manifest).expect("manifest serialization cannot fail"))
}

fn read_json_file<T: DeserializeOwned>(path: &Path) -> Result<Option<T>, ReportError> {
    let raw = match std::fs::read_to_string(path) {
        Ok(raw) => raw,
        Err(e) if e.kind() == ErrorKind::NotFound => return Ok(None),
        Err(source) => {
            return Err(ReportError::Io {
                path: path.display().to_string(),
                source,
            })
        }
    };
    serde_json::from_str(&raw)
        .map(Some)
        .map_err(|e| ReportError::Malformed {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
}

fn backend_name(kind: BackendKind) -> &'static str {
    match kind {
        BackendKind::Live => "live",
        BackendKind::Scripted => "scripted",
        BackendKind::Replay => "replay",
        BackendKind::Cache => "cache",
    }
}

/// Input size recorded in a phase's snapshot file.
fn snapshot_input(dir: &RunDir, key: &str) -> Result<usize, ReportError> {
    let path = dir.partition_path(key);
    let display = path.display().to_string();
    let phase = Phase::from_key(key).map_err(|e| ReportError::Malformed {
        path: display.clone(),
        detail: format!("unrecognized phase snapshot: {e}"),
    })?;
    let gone = || ReportError::Malformed {
        path: display.clone(),
        detail: "snapshot disappeared during emission".to_string(),
    };
    Ok(match phase {
        Phase::Detect => {
            let summary: DetectSummary = read_json_file(&path)?.ok_or_else(gone)?;
            summary.partition.input_ids.len()
        }
        Phase::Stage1 | Phase::Stage2 | Phase::RtgLabel { .. } | Phase::RtgRp { .. } => {
            let partition: StagePartition = read_json_file(&path)?.ok_or_else(gone)?;
            partition.input_ids.len()
        }
        Phase::AblationRepeat => {
            let summary: AblationSummary = read_json_file(&path)?.ok_or_else(gone)?;
            summary.partition.input_ids.len()
        }
        Phase::RootCause => {
            let summary: RootCauseSummary = read_json_file(&path)?.ok_or_else(gone)?;
            summary.assignments.len() + summary.unannotated.len()
        }
    })
}

/// Emits the post-run manifest for `run_root` to `out_path` and returns it.
pub fn emit_manifest(run_root: &Path, out_path: &Path) -> Result<RunReportManifest, ReportError> {
    let dir = RunDir::new(run_root);
    let pinned: RunManifest =
        read_json_file(&dir.manifest_path())?.ok_or_else(|| ReportError::MissingRun {
            path: run_root.display().to_string(),
        })?;

    let records = load_trajectory(&dir.trajectory_path())?;
    let mut record_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut answered: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    for record in &records {
        let key = record.phase.key();
        *record_counts.entry(key.clone()).or_insert(0) += 1;
        let carries_answer = record.verdict.is_some()
            || record
                .judge
                .as_ref()
                .is_some_and(|judge| judge.root_cause.is_some());
        if carries_answer {
            answered.entry(key).or_default().insert(&record.sample_id);
        }
    }

    let mut snapshot_keys: BTreeSet<String> = BTreeSet::new();
    match std::fs::read_dir(dir.partitions_dir()) {
        Ok(entries) => {
            for entry in entries {
                let entry = entry.map_err(|source| ReportError::Io {
                    path: dir.partitions_dir().display().to_string(),
                    source,
                })?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if let Some(stem) = name.strip_suffix(".json") {
                    snapshot_keys.insert(stem.to_string());
                }
            }
        }
        Err(e) if e.kind() == ErrorKind::NotFound => {}
        Err(source) => {
            return Err(ReportError::Io {
                path: dir.partitions_dir().display().to_string(),
                source,
            })
        }
    }

    let mut phases: BTreeMap<String, PhaseAccount> = BTreeMap::new();
    let mut incomplete_phases = Vec::new();
    let all_keys: BTreeSet<&String> = snapshot_keys.iter().chain(record_counts.keys()).collect();
    for key in all_keys {
        let complete = snapshot_keys.contains(key);
        let input = if complete {
            snapshot_input(&dir, key)?
        } else {
            answered.get(key).map_or(0, BTreeSet::len)
        };
        let account = PhaseAccount {
            input,
            records: record_counts.get(key).copied().unwrap_or(0),
            complete,
        };
        if !complete {
            incomplete_phases.push(key.clone());
        }
        phases.insert(key.clone(), account);
    }

    let mut backends: BTreeSet<&'static str> = BTreeSet::new();
    if dir.transcript_path().exists() {
        for turn in load_transcript(&dir.transcript_path())? {
            backends.insert(backend_name(turn.backend));
        }
    }

    let manifest = RunReportManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        run_id: pinned.run_id,
        model_name: pinned.model_name,
        config_digest: pinned.config_digest,
        sample_digest: pinned.sample_digest,
        seed: pinned.seed,
        provider_backends: backends.into_iter().map(str::to_string).collect(),
        template_digests: pinned.template_digests,
        phases,
        incomplete_phases,
        created_unix_ms: pinned.created_unix_ms,
        generated_unix_ms: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
    };
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|source| ReportError::Io {
                path: parent.display().to_string(),
                source,
            })?;
        }
    }
    let mut body =
        serde_json::to_string_pretty(&manifest).expect("manifest serialization cannot fail");
    body.push('\n');
    write_file(out_path, body.as_bytes())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{content_digest, SampleSet};
    use crate::domain::{FType, Label, Origin, Rate, Rational, Sample, SampleForm};
    use crate::metrics::engine_report;
    use crate::pipeline::{Pipeline, ProviderConfig, RunConfig};
    use crate::provider::{Outcome, PhaseMatcher, PolicyRule, ScriptedPolicy};

    fn sample(id: &str, gold: Label, form: SampleForm) -> Sample {
        Sample {
            id: id.into(),
            dataset: "fixture".into(),
            subcategory: None,
            form,
            context: "All observed swans are white. Pat observed a swan on the lake.".into(),
            hypothesis: "Pat observed a white swan.".into(),
            choices: None,
            gold,
            origin: Origin::Native,
            removed_sentences: None,
        }
    }

    fn fixture_set(n_verifiable: usize, n_unverifiable: usize) -> SampleSet {
        let mut samples = Vec::new();
        for i in 0..n_verifiable {
            let gold = if i % 2 == 0 {
                Label::Proved
            } else {
                Label::Disproved
            };
            samples.push(sample(&format!("v-{i:03}"), gold, SampleForm::Fact));
        }
        for i in 0..n_unverifiable {
            samples.push(sample(
                &format!("u-{i:03}"),
                Label::Unknown,
                SampleForm::Story,
            ));
        }
        SampleSet::from_samples(samples, content_digest(b"fixture")).unwrap()
    }

    fn exact(key: &str) -> PhaseMatcher {
        PhaseMatcher::Exact(key.to_string())
    }

    /// One deterministic outcome per phase: all verifiable samples get stuck
    /// on detect, stage 1 answers wrong, stage 2 recovers.
    fn deterministic_rules() -> Vec<PolicyRule> {
        vec![
            PolicyRule::always(
                exact("detect"),
                Some(FType::Verifiable),
                Outcome::EmitUnknown,
            ),
            PolicyRule::always(
                exact("detect"),
                Some(FType::Unverifiable),
                Outcome::EmitUnknownValidJustification,
            ),
            PolicyRule::always(exact("stage1"), None, Outcome::EmitWrongDefinite),
            PolicyRule::always(exact("stage2"), None, Outcome::EmitGold),
        ]
    }

    fn scripted_config(seed: u64, mut rules: Vec<PolicyRule>) -> RunConfig {
        rules.push(PolicyRule::always(
            PhaseMatcher::Any,
            None,
            Outcome::EmitGold,
        ));
        RunConfig {
            run_id: "r".into(),
            provider: ProviderConfig::Scripted {
                policy: ScriptedPolicy::new(seed, rules),
            },
            misguide_grid: vec![Rate::new(1, 1).unwrap(), Rate::new(0, 1).unwrap()],
            concurrency_limit: 3,
            ..RunConfig::default()
        }
    }

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().expect("create temp dir")
    }

    fn run_fixture(root: &Path, seed: u64) -> RunConfig {
        let config = scripted_config(seed, deterministic_rules());
        let set = fixture_set(8, 4);
        let mut pipeline = Pipeline::create(root, &set, config.clone()).unwrap();
        pipeline.run_all().unwrap();
        config
    }

    fn pct(hundredths: i64) -> RateCell {
        RateCell::exact(Rational::new(hundredths, 10_000))
    }

    /// A report carrying one distinctive value per table column.
    fn styled_report() -> MetricsReport {
        let mut m = MetricsReport::empty();
        m.direct_accuracy = pct(5017);
        m.stage1.all.tcr = pct(1261);
        m.stage2.all.tcr = pct(4210);
        m.ocr = pct(2522);
        m.conf_v = pct(6425);
        m.conf_u = pct(333);
        m.cgr = pct(-4210);
        m.rpc = pct(1084);
        m.deg = pct(1790);
        m.detect.all.ucr = pct(4000);
        m.detect.within_v.ucr = pct(7200);
        m.detect.within_u.ucr = pct(800);
        m.detect.counts.uc = 10;
        m.root_causes.insert(RootCause::FactUnderstanding, 5);
        m.root_causes.insert(RootCause::ReasoningGap, 3);
        m.root_cause_unannotated = 2;
        m.ablation.input = 40;
        m.ablation.unchanged = 38;
        m.ablation.rate = RateCell::ratio(38, 40);
        m
    }

    fn tagged(model: &str, dataset: &str, metrics: MetricsReport) -> TaggedReport {
        TaggedReport {
            model: model.into(),
            dataset: dataset.into(),
            metrics,
        }
    }

    #[test]
    fn main_table_prints_the_conformity_cell() {
        let bundle = ReportBundle::build(&[tagged("gpt", "fld", styled_report())]).unwrap();
        let rendered = render_delimited(&bundle.main);
        let rows = parse_delimited(&rendered).unwrap();
        assert_eq!(rows[0], MAIN_COLUMNS.to_vec());
        assert_eq!(
            rows[1],
            vec!["gpt", "fld", "12.61", "42.10", "25.22", "64.25", "3.33", "-42.10", "10.84"]
        );
    }

    #[test]
    fn empty_runs_render_slash_cells() {
        let bundle = ReportBundle::build(&[tagged("gpt", "fld", MetricsReport::empty())]).unwrap();
        let main = parse_delimited(&render_delimited(&bundle.main)).unwrap();
        assert_eq!(main[1][3], "/", "stage-2 conversion rate of an empty run");
        let degrading = parse_delimited(&render_delimited(&bundle.degrading)).unwrap();
        assert_eq!(&degrading[1][2..], ["/", "/"]);
        let ablation = parse_delimited(&render_delimited(&bundle.ablation)).unwrap();
        assert_eq!(&ablation[1][2..], ["0", "0", "/"]);
    }

    #[test]
    fn rows_sort_by_model_then_dataset() {
        let reports = vec![
            tagged("beta", "x", MetricsReport::empty()),
            tagged("alpha", "y", MetricsReport::empty()),
            tagged("alpha", "x", MetricsReport::empty()),
        ];
        let bundle = ReportBundle::build(&reports).unwrap();
        for table in bundle.tables() {
            let tags: Vec<(String, String)> = table
                .rows
                .iter()
                .map(|row| (row[0].clone(), row[1].clone()))
                .collect();
            assert_eq!(
                tags,
                vec![
                    ("alpha".into(), "x".into()),
                    ("alpha".into(), "y".into()),
                    ("beta".into(), "x".into()),
                ]
            );
        }
        assert_eq!(bundle.exact[0].model, "alpha");
        assert_eq!(bundle.exact[2].model, "beta");
    }

    #[test]
    fn empty_report_lists_are_rejected() {
        assert!(matches!(
            ReportBundle::build(&[]),
            Err(ReportError::EmptyInput)
        ));
        assert!(matches!(
            emit_tables(&[], tmp().path(), TableFormat::Delimited),
            Err(ReportError::EmptyInput)
        ));
    }

    #[test]
    fn delimited_tables_round_trip_every_cell() {
        let reports = vec![
            tagged("gpt", "fld", styled_report()),
            tagged("qwen", "sci", MetricsReport::empty()),
        ];
        let bundle = ReportBundle::build(&reports).unwrap();
        for table in bundle.tables() {
            let parsed = parse_delimited(&render_delimited(table)).unwrap();
            assert_eq!(parsed[0], table.header.to_vec(), "{} header", table.name);
            assert_eq!(&parsed[1..], table.rows.as_slice(), "{} rows", table.name);
        }
    }

    #[test]
    fn quoted_fields_survive_round_trips() {
        let fields = vec![
            "plain".to_string(),
            "comma, inside".into(),
            "quote \" mark".into(),
            "line\nbreak".into(),
            String::new(),
        ];
        let table = Table {
            name: "main",
            header: MAIN_COLUMNS,
            rows: vec![fields.clone()],
        };
        let rendered = render_delimited(&table);
        let parsed = parse_delimited(&rendered).unwrap();
        assert_eq!(parsed[1], fields);
        assert!(rendered.ends_with('\n'));
    }

    #[test]
    fn malformed_delimited_text_is_rejected() {
        assert!(parse_delimited("a,\"unterminated\n").is_err());
        assert!(parse_delimited("a,mid\"quote\n").is_err());
        assert!(parse_delimited("a,\"closed\"x\n").is_err());
        assert!(parse_delimited("a,b\r\n").is_err());
    }

    #[test]
    fn trailing_empty_fields_parse_correctly() {
        assert_eq!(
            parse_delimited("a,\n").unwrap(),
            vec![vec!["a".to_string(), String::new()]]
        );
        assert_eq!(
            parse_delimited("a,b").unwrap(),
            vec![vec!["a".to_string(), "b".to_string()]]
        );
        assert_eq!(parse_delimited("").unwrap(), Vec::<Vec<String>>::new());
    }

    #[test]
    fn markup_tables_carry_the_same_cells() {
        let bundle = ReportBundle::build(&[tagged("gpt", "fld", styled_report())]).unwrap();
        let rendered = render_markup(&bundle.main);
        let lines: Vec<&str> = rendered.lines().collect();
        assert_eq!(
            lines[0],
            "| model | dataset | tcr_stage1 | tcr_stage2 | ocr | conf_v | conf_u | cgr | rpc |"
        );
        assert!(lines[1].starts_with("| --- |"));
        assert_eq!(
            lines[2],
            "| gpt | fld | 12.61 | 42.10 | 25.22 | 64.25 | 3.33 | -42.10 | 10.84 |"
        );
    }

    #[test]
    fn markup_cells_escape_pipes() {
        let table = Table {
            name: "main",
            header: DEGRADING_COLUMNS,
            rows: vec![vec!["a|b".into(), "multi\nline".into()]],
        };
        let rendered = render_markup(&table);
        assert!(rendered.contains("a\\|b"));
        assert!(rendered.contains("multi line"));
    }

    #[test]
    fn emission_writes_one_file_per_table_plus_exact_export() {
        let dir = tmp();
        let reports = vec![tagged("gpt", "fld", styled_report())];
        let written = emit_tables(&reports, dir.path(), TableFormat::Delimited).unwrap();
        let names: Vec<String> = written
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(
            names,
            vec![
                "main.csv",
                "degrading.csv",
                "vp_types.csv",
                "root_causes.csv",
                "ablation.csv",
                "exact.json"
            ]
        );
        for path in &written {
            assert!(path.exists());
        }
    }

    #[test]
    fn exact_export_round_trips_unrounded_values() {
        let dir = tmp();
        let reports = vec![
            tagged("zeta", "b", styled_report()),
            tagged("alpha", "a", MetricsReport::empty()),
        ];
        emit_tables(&reports, dir.path(), TableFormat::Delimited).unwrap();
        let raw = std::fs::read_to_string(dir.path().join("exact.json")).unwrap();
        let parsed: Vec<TaggedReport> = serde_json::from_str(&raw).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].model, "alpha");
        assert_eq!(parsed[1], reports[0]);
    }

    #[test]
    fn emission_is_byte_deterministic() {
        let reports = vec![
            tagged("gpt", "fld", styled_report()),
            tagged("qwen", "sci", MetricsReport::empty()),
        ];
        let (a, b) = (tmp(), tmp());
        for format in [TableFormat::Delimited, TableFormat::Markup] {
            let first = emit_tables(&reports, a.path(), format).unwrap();
            let second = emit_tables(&reports, b.path(), format).unwrap();
            for (left, right) in first.iter().zip(&second) {
                assert_eq!(
                    std::fs::read(left).unwrap(),
                    std::fs::read(right).unwrap(),
                    "{}",
                    left.display()
                );
            }
        }
    }

    #[test]
    fn tables_built_from_a_run_parse_cleanly() {
        let root = tmp();
        run_fixture(root.path(), 5);
        let metrics = engine_report(root.path()).unwrap();
        let out = tmp();
        let written = emit_tables(
            &[tagged("scripted-model", "fixture", metrics)],
            out.path(),
            TableFormat::Delimited,
        )
        .unwrap();
        for path in written
            .iter()
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        {
            let text = std::fs::read_to_string(path).unwrap();
            let rows = parse_delimited(&text).unwrap();
            assert_eq!(rows.len(), 2, "{}", path.display());
            assert_eq!(rows[1][0], "scripted-model");
        }
    }

    #[test]
    fn manifest_accounts_for_every_phase() {
        let root = tmp();
        let config = run_fixture(root.path(), 5);
        let out = tmp().path().join("summary.json");
        let manifest = emit_manifest(root.path(), &out).unwrap();

        assert_eq!(manifest.tool_version, env!("CARGO_PKG_VERSION"));
        assert_eq!(manifest.run_id, "r");
        assert_eq!(manifest.model_name, "scripted-model");
        assert_eq!(manifest.config_digest, config.digest());
        assert_eq!(manifest.sample_digest.len(), 64);
        assert_eq!(manifest.seed, config.seed);
        assert_eq!(manifest.provider_backends, vec!["scripted".to_string()]);
        assert!(!manifest.template_digests.is_empty());
        assert!(manifest.incomplete_phases.is_empty());

        let expected_keys = [
            "ablation-repeat",
            "detect",
            "root-cause",
            "rtg-label-s1-m0of1",
            "rtg-label-s1-m1of1",
            "rtg-label-s2-m0of1",
            "rtg-label-s2-m1of1",
            "stage1",
            "stage2",
        ];
        let keys: Vec<&str> = manifest.phases.keys().map(String::as_str).collect();
        assert_eq!(keys, expected_keys);
        for (key, account) in &manifest.phases {
            assert!(account.complete, "{key} should be complete");
            assert!(account.records >= account.input, "{key} record count");
        }
        assert_eq!(manifest.phases["detect"].input, 12);
        assert_eq!(manifest.phases["stage1"].input, 8);
        assert_eq!(manifest.phases["stage2"].input, 8);
        assert_eq!(manifest.phases["ablation-repeat"].input, 0);
        assert_eq!(manifest.phases["root-cause"].input, 8);
        assert_eq!(manifest.phases["rtg-label-s1-m1of1"].input, 8);
        assert_eq!(manifest.phases["rtg-label-s2-m0of1"].input, 8);

        let reread: RunReportManifest =
            serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(reread, manifest);
    }

    #[test]
    fn manifest_marks_unfinished_phases() {
        let root = tmp();
        run_fixture(root.path(), 5);
        std::fs::remove_file(root.path().join("partitions").join("stage2.json")).unwrap();
        let out = tmp().path().join("summary.json");
        let manifest = emit_manifest(root.path(), &out).unwrap();
        assert_eq!(manifest.incomplete_phases, vec!["stage2".to_string()]);
        let stage2 = &manifest.phases["stage2"];
        assert!(!stage2.complete);
        assert_eq!(
            stage2.input, 8,
            "answered ids recovered from the trajectory"
        );
        assert!(stage2.records >= 8);
    }

    #[test]
    fn rerun_manifests_match_after_timestamp_normalization() {
        let (a, b) = (tmp(), tmp());
        run_fixture(a.path(), 5);
        run_fixture(b.path(), 5);
        let out_a = tmp().path().join("a.json");
        let out_b = tmp().path().join("b.json");
        emit_manifest(a.path(), &out_a).unwrap();
        emit_manifest(b.path(), &out_b).unwrap();
        let norm_a =
            normalized_report_manifest_json(&std::fs::read_to_string(&out_a).unwrap()).unwrap();
        let norm_b =
            normalized_report_manifest_json(&std::fs::read_to_string(&out_b).unwrap()).unwrap();
        assert_eq!(norm_a, norm_b);
    }

    #[test]
    fn directories_without_a_run_are_rejected() {
        let dir = tmp();
        let out = dir.path().join("summary.json");
        match emit_manifest(dir.path(), &out) {
            Err(ReportError::MissingRun { .. }) => {}
            other => panic!("expected MissingRun, got {other:?}"),
        }
    }
}
