//! Acceptance suite: one pass/fail line per criterion, exit 1 on any failure.
//!
//! Each criterion either reproduces a pinned reference value from fixtures
//! with exact rational arithmetic, or drives randomized scripted runs and
//! checks structural properties (oracle equivalence, invariants, determinism,
//! calibration). Tolerances and time budgets are pinned next to each check.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vpeval_core::dataset::{
    content_digest, reinsert_removed, unknownize, DeletionStrategy, SampleSet,
    DEFAULT_DELETION_COUNT,
};
use vpeval_core::domain::{Label, Origin, Rate, Rational, RootCause, Sample, SampleForm, StageId};
use vpeval_core::metrics::{
    check_report_invariants, compute_cgr, compute_conf, compute_rpc, engine_report,
    latent_accuracy_from_rates, oracle_recompute, ConfEntry, MetricsReport,
};
use vpeval_core::pipeline::{
    check_run_invariants, normalized_manifest_json, parse_root_cause, Pipeline, ProviderConfig,
    RunConfig, RunDir, StimStyle, StyleMap,
};
use vpeval_core::prompt::{assign_guidance_label, parse_completion, parse_validity};
use vpeval_core::provider::{Outcome, PhaseMatcher, PolicyRule, ScriptedPolicy};
use vpeval_core::report::{
    emit_manifest, emit_tables, normalized_report_manifest_json, TableFormat, TaggedReport,
};

type CriterionResult = Result<(), String>;

/// ±0.01 percentage points, as a fraction.
fn percent_point_tolerance() -> Rational {
    Rational::new(1, 10_000)
}

fn pct(hundredths: i64) -> Rational {
    Rational::new(hundredths, 10_000)
}

fn ensure(cond: bool, msg: String) -> CriterionResult {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

fn within(value: Rational, target: Rational, tolerance: Rational) -> bool {
    let diff = if value >= target {
        value - target
    } else {
        target - value
    };
    diff <= tolerance
}

fn fmt(r: Rational) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

// ---------------------------------------------------------------------------
// Fixture generators shared by the randomized criteria
// ---------------------------------------------------------------------------

fn make_sample(i: usize, gold: Label, form: SampleForm) -> Sample {
    Sample {
        id: format!("s-{i:04}"),
        dataset: "calibration".into(),
        subcategory: None,
        form,
        context: format!(
            "Record {i} lists a first observed fact. Record {i} lists a second observed fact."
        ),
        hypothesis: format!("Hypothesis {i} follows from the record."),
        choices: None,
        gold,
        origin: Origin::Native,
        removed_sentences: None,
    }
}

fn random_samples(rng: &mut ChaCha8Rng, n: usize) -> SampleSet {
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let gold = if rng.gen_bool(0.5) {
            if rng.gen_bool(0.5) {
                Label::Proved
            } else {
                Label::Disproved
            }
        } else {
            Label::Unknown
        };
        let form = if rng.gen_bool(0.5) {
            SampleForm::Fact
        } else {
            SampleForm::Story
        };
        samples.push(make_sample(i, gold, form));
    }
    SampleSet::from_samples(samples, content_digest(b"acceptance")).expect("valid fixture set")
}

fn random_distribution(rng: &mut ChaCha8Rng, include_assigned: bool) -> Vec<(Outcome, Rate)> {
    let mut pool = vec![
        Outcome::EmitGold,
        Outcome::EmitWrongDefinite,
        Outcome::EmitUnknown,
        Outcome::EmitUnknownValidJustification,
    ];
    if include_assigned {
        pool.push(Outcome::EmitAssigned);
    }
    loop {
        let weights: Vec<i64> = pool.iter().map(|_| rng.gen_range(0..=3)).collect();
        let total: i64 = weights.iter().sum();
        if total == 0 {
            continue;
        }
        return pool
            .iter()
            .zip(&weights)
            .filter(|(_, &w)| w > 0)
            .map(|(&outcome, &w)| (outcome, Rate::new(w, total).expect("weight in range")))
            .collect();
    }
}

fn random_policy(rng: &mut ChaCha8Rng) -> ScriptedPolicy {
    let rule = |matcher: PhaseMatcher, dist: Vec<(Outcome, Rate)>| PolicyRule {
        phase: matcher,
        ftype: None,
        distribution: dist,
    };
    let rules = vec![
        rule(
            PhaseMatcher::Exact("detect".into()),
            random_distribution(rng, false),
        ),
        rule(
            PhaseMatcher::Exact("stage1".into()),
            random_distribution(rng, false),
        ),
        rule(
            PhaseMatcher::Exact("stage2".into()),
            random_distribution(rng, false),
        ),
        rule(
            PhaseMatcher::Prefix("rtg-label".into()),
            random_distribution(rng, true),
        ),
        rule(
            PhaseMatcher::Prefix("rtg-rp".into()),
            random_distribution(rng, false),
        ),
        rule(
            PhaseMatcher::Exact("ablation-repeat".into()),
            random_distribution(rng, false),
        ),
        PolicyRule::always(PhaseMatcher::Any, None, Outcome::EmitGold),
    ];
    let mut policy = ScriptedPolicy::new(rng.gen(), rules);
    policy.cause_weights = loop {
        let weights: Vec<(RootCause, u32)> = RootCause::ALL
            .iter()
            .map(|&c| (c, rng.gen_range(0..=3)))
            .collect();
        if weights.iter().any(|(_, w)| *w > 0) {
            break weights;
        }
    };
    policy
}

/// A random guidance grid drawn from a candidate pool; many draws miss the
/// 0 and 1 extremes on purpose (the conformity cells must then come out
/// empty-flagged rather than erroring).
fn random_grid(rng: &mut ChaCha8Rng) -> Vec<Rate> {
    let candidates = [(0, 1), (1, 4), (1, 3), (1, 2), (2, 3), (3, 4), (1, 1)];
    let k = rng.gen_range(1..=4);
    let mut picked: Vec<Rate> = candidates
        .choose_multiple(rng, k)
        .map(|&(n, d)| Rate::new(n, d).expect("candidate in range"))
        .collect();
    picked.sort_by(|a, b| b.cmp(a));
    picked
}

fn random_config(rng: &mut ChaCha8Rng, run_id: &str) -> RunConfig {
    let style = |rng: &mut ChaCha8Rng| {
        if rng.gen_bool(0.5) {
            StimStyle::Concise
        } else {
            StimStyle::Detailed
        }
    };
    RunConfig {
        run_id: run_id.into(),
        provider: ProviderConfig::Scripted {
            policy: random_policy(rng),
        },
        misguide_grid: random_grid(rng),
        seed: rng.gen(),
        concurrency_limit: rng.gen_range(1..=8),
        capture_reasoning: rng.gen_bool(0.5),
        style_map: StyleMap {
            fact: style(rng),
            story: style(rng),
        },
        ..RunConfig::default()
    }
}

fn flat_diff(engine: &MetricsReport, oracle: &MetricsReport) -> Vec<String> {
    let flat = |r: &MetricsReport| -> BTreeMap<String, String> {
        r.flat_entries()
            .into_iter()
            .map(|e| (e.key, e.exact))
            .collect()
    };
    let engine = flat(engine);
    let oracle = flat(oracle);
    let keys: std::collections::BTreeSet<&String> = engine.keys().chain(oracle.keys()).collect();
    keys.into_iter()
        .filter_map(|key| {
            let left = engine.get(key).map(String::as_str).unwrap_or("<absent>");
            let right = oracle.get(key).map(String::as_str).unwrap_or("<absent>");
            (left != right).then(|| format!("{key}: engine={left} oracle={right}"))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// The randomized 50-run suite, shared by two criteria
// ---------------------------------------------------------------------------

const SUITE_RUNS: usize = 50;
const SUITE_SAMPLES: usize = 1000;

struct SuiteOutcome {
    runs_completed: usize,
    mismatches: Vec<String>,
    violations: Vec<String>,
    elapsed: Duration,
    error: Option<String>,
}

fn run_randomized_suite() -> SuiteOutcome {
    let started = Instant::now();
    let mut outcome = SuiteOutcome {
        runs_completed: 0,
        mismatches: Vec::new(),
        violations: Vec::new(),
        elapsed: Duration::ZERO,
        error: None,
    };
    let base = match tempfile::tempdir() {
        Ok(dir) => dir,
        Err(e) => {
            outcome.error = Some(format!("temp dir: {e}"));
            return outcome;
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE57);
    for i in 0..SUITE_RUNS {
        let label = format!("run {i:02}");
        let set = random_samples(&mut rng, SUITE_SAMPLES);
        let config = random_config(&mut rng, &format!("acc-{i:02}"));
        let root = base.path().join(format!("r{i:02}"));
        let step = (|| -> Result<(), String> {
            let mut pipeline = Pipeline::create(&root, &set, config.clone())
                .map_err(|e| format!("create: {e}"))?;
            pipeline.run_all().map_err(|e| format!("run_all: {e}"))?;
            let engine = engine_report(&root).map_err(|e| format!("engine: {e}"))?;
            let oracle = oracle_recompute(&RunDir::new(&root).trajectory_path())
                .map_err(|e| format!("oracle: {e}"))?;
            if engine != oracle {
                let diff = flat_diff(&engine, &oracle);
                outcome.mismatches.push(format!(
                    "{label}: {} field(s) differ; first: {:?}",
                    diff.len(),
                    diff.first()
                ));
            }
            for v in check_report_invariants(&engine) {
                outcome.violations.push(format!("{label}: {v}"));
            }
            let run_violations =
                check_run_invariants(&root).map_err(|e| format!("run invariants: {e}"))?;
            for v in run_violations {
                outcome.violations.push(format!("{label}: {v}"));
            }
            Ok(())
        })();
        match step {
            Ok(()) => outcome.runs_completed += 1,
            Err(e) => {
                outcome.error = Some(format!("{label}: {e}"));
                break;
            }
        }
        // Reclaim disk as we go; 50 trajectories of 1k samples add up.
        let _ = std::fs::remove_dir_all(&root);
    }
    outcome.elapsed = started.elapsed();
    outcome
}

// ---------------------------------------------------------------------------
// Criteria 1-3: exact arithmetic reproduction from pinned fixtures
// ---------------------------------------------------------------------------

/// Conformity swing from the reference guidance-accuracy fixtures:
/// verifiable 64.25, unverifiable 3.33, both within ±0.01 points.
fn conformity_swing_reproduction() -> CriterionResult {
    let grid = |s1_wrong: i64, s1_true: i64, s2_wrong: i64, s2_true: i64| {
        let mut m: BTreeMap<(StageId, Rate), ConfEntry> = BTreeMap::new();
        m.insert((StageId::One, Rate::one()), ConfEntry::Value(pct(s1_wrong)));
        m.insert((StageId::One, Rate::zero()), ConfEntry::Value(pct(s1_true)));
        m.insert((StageId::Two, Rate::one()), ConfEntry::Value(pct(s2_wrong)));
        m.insert((StageId::Two, Rate::zero()), ConfEntry::Value(pct(s2_true)));
        m
    };

    let conf_v = compute_conf(&grid(583, 5417, 167, 8182)).map_err(|e| e.to_string())?;
    ensure(!conf_v.empty, "verifiable conformity came out empty".into())?;
    ensure(
        within(conf_v.value, pct(6425), percent_point_tolerance()),
        format!(
            "verifiable conformity {} not within 0.01 of 64.25",
            fmt(conf_v.value)
        ),
    )?;

    let conf_u = compute_conf(&grid(333, 1000, 0, 0)).map_err(|e| e.to_string())?;
    ensure(
        !conf_u.empty,
        "unverifiable conformity came out empty".into(),
    )?;
    ensure(
        within(conf_u.value, pct(333), percent_point_tolerance()),
        format!(
            "unverifiable conformity {} not within 0.01 of 3.33",
            fmt(conf_u.value)
        ),
    )
}

/// Latent accuracy from the reference rates: direct 50.17, overall
/// conversion 25.22, stuck fraction 40% (verifiable 72.00 and unverifiable
/// 8.00 over a 1:1 split) must give 60.26 within ±0.01 points.
fn latent_accuracy_reproduction() -> CriterionResult {
    let vp_fraction = (pct(7200) + pct(800)) / Rational::from_integer(2);
    ensure(
        vp_fraction == Rational::new(2, 5),
        format!("stuck-set fraction {} is not 40%", fmt(vp_fraction)),
    )?;
    let latent =
        latent_accuracy_from_rates(pct(5017), pct(2522), vp_fraction).map_err(|e| e.to_string())?;
    ensure(
        within(latent, pct(6026), percent_point_tolerance()),
        format!("latent accuracy {} not within 0.01 of 60.26", fmt(latent)),
    )
}

/// Reasoning-feedback deltas from the reference pairs: stage-2 rate 42.10
/// against 0 with feedback gives exactly -42.10; stage-1 rate 12.61 against
/// 23.45 with feedback gives exactly +10.84.
fn reasoning_feedback_delta_reproduction() -> CriterionResult {
    let cgr = compute_cgr(Rational::from_integer(0), pct(4210));
    ensure(
        cgr == pct(-4210),
        format!("stage-2 delta {} is not exactly -42.10", fmt(cgr)),
    )?;
    let rpc = compute_rpc(pct(2345), pct(1261));
    ensure(
        rpc == pct(1084),
        format!("stage-1 delta {} is not exactly +10.84", fmt(rpc)),
    )
}

// ---------------------------------------------------------------------------
// Criteria 4-5: randomized suite properties
// ---------------------------------------------------------------------------

fn oracle_equivalence(suite: &SuiteOutcome) -> CriterionResult {
    if let Some(error) = &suite.error {
        return Err(format!("suite aborted: {error}"));
    }
    ensure(
        suite.runs_completed == SUITE_RUNS,
        format!("only {}/{SUITE_RUNS} runs completed", suite.runs_completed),
    )?;
    ensure(
        suite.mismatches.is_empty(),
        format!(
            "{} of {SUITE_RUNS} runs disagree with the oracle; first: {}",
            suite.mismatches.len(),
            suite.mismatches.first().cloned().unwrap_or_default()
        ),
    )?;
    ensure(
        suite.elapsed < Duration::from_secs(120),
        format!("suite took {:?}, budget is 2 min", suite.elapsed),
    )
}

fn partition_and_conservation_invariants(suite: &SuiteOutcome) -> CriterionResult {
    if let Some(error) = &suite.error {
        return Err(format!("suite aborted: {error}"));
    }
    ensure(
        suite.violations.is_empty(),
        format!(
            "{} invariant violation(s); first: {}",
            suite.violations.len(),
            suite.violations.first().cloned().unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 6: byte determinism
// ---------------------------------------------------------------------------

fn read_dir_files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    for entry in entries {
        let entry = entry.map_err(|e| e.to_string())?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let bytes = std::fs::read(entry.path()).map_err(|e| e.to_string())?;
        files.insert(name, bytes);
    }
    Ok(files)
}

fn byte_determinism() -> CriterionResult {
    let started = Instant::now();
    let base = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xD37E12);
    let set = random_samples(&mut rng, 60);
    let mut config = random_config(&mut rng, "det");
    config.capture_reasoning = true;

    let execute = |root: &Path| -> Result<(), String> {
        let mut pipeline =
            Pipeline::create(root, &set, config.clone()).map_err(|e| e.to_string())?;
        pipeline.run_all().map_err(|e| e.to_string())?;
        let metrics = engine_report(root).map_err(|e| e.to_string())?;
        let tagged = vec![TaggedReport {
            model: config.model_name.clone(),
            dataset: "calibration".into(),
            metrics,
        }];
        let tables = root.join("tables");
        emit_tables(&tagged, &tables, TableFormat::Delimited).map_err(|e| e.to_string())?;
        emit_tables(&tagged, &tables, TableFormat::Markup).map_err(|e| e.to_string())?;
        emit_manifest(root, &root.join("run-summary.json")).map_err(|e| e.to_string())?;
        Ok(())
    };

    let first = base.path().join("a");
    let second = base.path().join("b");
    execute(&first)?;
    execute(&second)?;

    let a = std::fs::read(first.join("trajectory.jsonl")).map_err(|e| e.to_string())?;
    let b = std::fs::read(second.join("trajectory.jsonl")).map_err(|e| e.to_string())?;
    ensure(
        a == b,
        "trajectory.jsonl differs between identical executions".into(),
    )?;

    // Transcript lines land in call-completion order, which the worker pool
    // does not fix; the recorded content itself must still match.
    let sorted_lines = |path: &Path| -> Result<Vec<String>, String> {
        let raw = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        let mut lines: Vec<String> = raw.lines().map(str::to_string).collect();
        lines.sort();
        Ok(lines)
    };
    ensure(
        sorted_lines(&first.join("transcript.jsonl"))?
            == sorted_lines(&second.join("transcript.jsonl"))?,
        "transcript contents differ between identical executions".into(),
    )?;
    let a_parts = read_dir_files(&first.join("partitions"))?;
    let b_parts = read_dir_files(&second.join("partitions"))?;
    ensure(
        a_parts == b_parts,
        "partition snapshots differ between identical executions".into(),
    )?;

    let a_tables = read_dir_files(&first.join("tables"))?;
    let b_tables = read_dir_files(&second.join("tables"))?;
    ensure(
        a_tables == b_tables,
        "emitted report tables differ between identical executions".into(),
    )?;
    ensure(
        a_tables.len() >= 11,
        format!("expected 11 report files, saw {}", a_tables.len()),
    )?;

    let normalize_manifest = |root: &Path| -> Result<String, String> {
        let raw = std::fs::read_to_string(RunDir::new(root).manifest_path())
            .map_err(|e| e.to_string())?;
        normalized_manifest_json(&raw).map_err(|e| e.to_string())
    };
    ensure(
        normalize_manifest(&first)? == normalize_manifest(&second)?,
        "run manifests differ after timestamp normalization".into(),
    )?;

    let normalize_summary = |root: &Path| -> Result<String, String> {
        let raw =
            std::fs::read_to_string(root.join("run-summary.json")).map_err(|e| e.to_string())?;
        normalized_report_manifest_json(&raw).map_err(|e| e.to_string())
    };
    ensure(
        normalize_summary(&first)? == normalize_summary(&second)?,
        "run summaries differ after timestamp normalization".into(),
    )?;

    ensure(
        started.elapsed() < Duration::from_secs(30),
        format!(
            "determinism check took {:?}, budget is 30 s",
            started.elapsed()
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 7: ablation persistence calibration
// ---------------------------------------------------------------------------

fn ablation_persistence_calibration() -> CriterionResult {
    let started = Instant::now();
    let base = tempfile::tempdir().map_err(|e| e.to_string())?;
    let samples: Vec<Sample> = (0..1000)
        .map(|i| {
            let gold = if i % 2 == 0 {
                Label::Proved
            } else {
                Label::Disproved
            };
            make_sample(i, gold, SampleForm::Fact)
        })
        .collect();
    let set = SampleSet::from_samples(samples, content_digest(b"ablation")).unwrap();

    let exact = |key: &str| PhaseMatcher::Exact(key.to_string());
    let persist = Rate::new(19, 20).unwrap();
    let convert = Rate::new(1, 20).unwrap();
    let rules = vec![
        PolicyRule::always(exact("detect"), None, Outcome::EmitUnknown),
        PolicyRule::always(exact("stage1"), None, Outcome::EmitUnknown),
        PolicyRule {
            phase: exact("ablation-repeat"),
            ftype: None,
            distribution: vec![
                (Outcome::EmitUnknown, persist),
                (Outcome::EmitGold, convert),
            ],
        },
        PolicyRule::always(PhaseMatcher::Any, None, Outcome::EmitGold),
    ];
    let config = RunConfig {
        run_id: "ablation".into(),
        provider: ProviderConfig::Scripted {
            policy: ScriptedPolicy::new(0xAB1A7E, rules),
        },
        ..RunConfig::default()
    };

    let root = base.path().join("run");
    let mut pipeline = Pipeline::create(&root, &set, config).map_err(|e| e.to_string())?;
    pipeline.detect_vp().map_err(|e| e.to_string())?;
    pipeline.run_stage1().map_err(|e| e.to_string())?;
    let summary = pipeline.run_ablation_repeat().map_err(|e| e.to_string())?;

    ensure(
        summary.partition.input_ids.len() == 1000,
        format!(
            "expected 1000 repeat inputs, saw {}",
            summary.partition.input_ids.len()
        ),
    )?;
    let rate = summary.unchanged_rate.as_ratio();
    // Binomial bound: 0.95 ± 0.02 over 1000 draws.
    ensure(
        within(rate, Rational::new(95, 100), Rational::new(2, 100)),
        format!("unchanged rate {} is outside 0.95 ± 0.02", fmt(rate)),
    )?;
    ensure(
        started.elapsed() < Duration::from_secs(30),
        format!(
            "ablation calibration took {:?}, budget is 30 s",
            started.elapsed()
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 8: parser conformance
// ---------------------------------------------------------------------------

fn parser_conformance() -> CriterionResult {
    let mut checked = 0usize;
    let mut failures: Vec<String> = Vec::new();
    let mut check = |ok: bool, what: String| {
        checked += 1;
        if !ok {
            failures.push(what);
        }
    };

    // Grammar 1: bare answer sentinels; the label sentinel occurring last in
    // the completion wins, and sentinel-free text is a parse failure.
    let bare: Vec<(&str, Option<Label>)> = vec![
        ("__UNKNOWN__", Some(Label::Unknown)),
        ("__PROVED__", Some(Label::Proved)),
        ("__DISPROVED__", Some(Label::Disproved)),
        ("The answer is __PROVED__.", Some(Label::Proved)),
        (
            "Options are __PROVED__, __DISPROVED__, or __UNKNOWN__. I conclude __DISPROVED__",
            Some(Label::Disproved),
        ),
        ("  __UNKNOWN__  \n", Some(Label::Unknown)),
        ("Conclusion: __UNKNOWN__", Some(Label::Unknown)),
        ("I cannot determine this.", None),
        ("PROVED", None),
        ("", None),
    ];
    for (raw, want) in bare {
        let parsed = parse_completion(raw, false);
        check(
            parsed.label == want,
            format!("bare grammar {raw:?}: got {:?}", parsed.label),
        );
        check(
            parsed.is_parse_failure() == want.is_none(),
            format!("bare grammar {raw:?}: failure flag mismatch"),
        );
    }

    // Grammar 2: reasoning scaffold with a conclusion line.
    let syrup_reasoning = "The facts define that materials have properties related to how they \
                           feel. Stickiness is a tactile property. Syrup is widely known to be \
                           sticky, while a silk necktie is smooth and not sticky. Thus, based on \
                           general knowledge of material properties, syrup is stickier than a \
                           silk necktie.";
    let scaffold: Vec<(String, Option<Label>, bool)> = vec![
        (
            "Reasoning Process: The premises chain from A to B.\nConclusion: __PROVED__".into(),
            Some(Label::Proved),
            true,
        ),
        (
            format!("Reasoning Process: {syrup_reasoning}\nConclusion: __PROVED__"),
            Some(Label::Proved),
            true,
        ),
        (
            "Reasoning Process: Each fact rules out the hypothesis.\nConclusion: __DISPROVED__"
                .into(),
            Some(Label::Disproved),
            true,
        ),
        (
            "Reasoning Process: No fact settles the question.\nConclusion: __UNKNOWN__".into(),
            Some(Label::Unknown),
            true,
        ),
        (
            "The hypothesis follows directly. __PROVED__".into(),
            Some(Label::Proved),
            true,
        ),
        (
            "Reasoning Process: trailing thoughts without a conclusion __UNKNOWN__".into(),
            Some(Label::Unknown),
            true,
        ),
        (
            "Reasoning Process: \nConclusion: __PROVED__".into(),
            Some(Label::Proved),
            false,
        ),
        ("I refuse to answer.".into(), None, true),
    ];
    for (raw, want, want_reasoning) in &scaffold {
        let parsed = parse_completion(raw, true);
        check(
            parsed.label == *want,
            format!("scaffold grammar {raw:?}: got {:?}", parsed.label),
        );
        check(
            parsed.reasoning.is_some() == *want_reasoning,
            format!("scaffold grammar {raw:?}: reasoning presence mismatch"),
        );
    }
    let verbatim = parse_completion(
        &format!("Reasoning Process: {syrup_reasoning}\nConclusion: __PROVED__"),
        true,
    );
    check(
        verbatim.reasoning.as_deref() == Some(syrup_reasoning),
        "scaffold grammar drops or mangles the reasoning body".into(),
    );

    // Grammar 3: justification-validity verdicts.
    let validity: Vec<(&str, Option<bool>)> = vec![
        ("__VALID__", Some(true)),
        ("__INVALID__", Some(false)),
        (
            "The justification cites removed facts, so __INVALID__",
            Some(false),
        ),
        ("__INVALID__ no wait, __VALID__", Some(true)),
        ("__VALID__ but on reflection __INVALID__", Some(false)),
        ("unclear", None),
        ("VALID", None),
    ];
    for (raw, want) in validity {
        check(
            parse_validity(raw) == want,
            format!("validity grammar {raw:?}"),
        );
    }

    // Grammar 4: root-cause verdicts.
    let causes: Vec<(&str, Option<RootCause>)> = vec![
        ("__FACT_UNDERSTANDING__", Some(RootCause::FactUnderstanding)),
        ("__REASONING_GAP__", Some(RootCause::ReasoningGap)),
        ("__EXCESSIVE_CAUTION__", Some(RootCause::ExcessiveCaution)),
        ("__ELSE__", Some(RootCause::Else)),
        (
            "Cause: __EXCESSIVE_CAUTION__",
            Some(RootCause::ExcessiveCaution),
        ),
        (
            "Maybe __FACT_UNDERSTANDING__, maybe __ELSE__",
            Some(RootCause::Else),
        ),
        ("no cause token", None),
    ];
    for (raw, want) in causes {
        check(
            parse_root_cause(raw) == want,
            format!("cause grammar {raw:?}"),
        );
    }

    ensure(
        checked >= 30,
        format!("corpus holds only {checked} checks, need at least 30"),
    )?;
    ensure(
        failures.is_empty(),
        format!(
            "{} parse mismatches; first: {}",
            failures.len(),
            failures.first().cloned().unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 9: guidance misdirection statistics
// ---------------------------------------------------------------------------

fn guidance_misdirection_statistics() -> CriterionResult {
    const DRAWS: usize = 10_000;
    let half = Rate::new(1, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6D15);
    let golds = [Label::Proved, Label::Disproved, Label::Unknown];

    let mut wrong = 0usize;
    for i in 0..DRAWS {
        let gold = golds[i % golds.len()];
        let draw = assign_guidance_label(gold, half, &mut rng);
        if draw.label != gold {
            wrong += 1;
        }
        if draw.misguided != (draw.label != gold) {
            return Err("misguided flag disagrees with the drawn label".into());
        }
    }
    let fraction = Rational::new(wrong as i64, DRAWS as i64);
    ensure(
        within(fraction, Rational::new(1, 2), Rational::new(2, 100)),
        format!(
            "wrong fraction {} at rate 1/2 is outside 0.50 ± 0.02",
            fmt(fraction)
        ),
    )?;

    for i in 0..DRAWS {
        let gold = golds[i % golds.len()];
        let draw = assign_guidance_label(gold, Rate::one(), &mut rng);
        if draw.label == gold {
            return Err(format!(
                "draw {i} emitted the gold label at misguide rate 1"
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Criterion 10: unknownization round-trip
// ---------------------------------------------------------------------------

fn unknownization_round_trip() -> CriterionResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0B57AC1E);
    let words = ["river", "ledger", "archive", "signal", "bridge", "orchard"];
    for i in 0..100 {
        let sentence_count = rng.gen_range(3..=8);
        let context: String = (0..sentence_count)
            .map(|s| {
                let w = words[rng.gen_range(0..words.len())];
                format!("Entry {s} of record {i} mentions the {w}.")
            })
            .collect::<Vec<_>>()
            .join(" ");
        let sample = Sample {
            context: context.clone(),
            ..make_sample(i, Label::Proved, SampleForm::Fact)
        };

        let strategy = DeletionStrategy::random_sentences(DEFAULT_DELETION_COUNT, rng.gen())
            .map_err(|e| e.to_string())?;
        let converted = unknownize(&sample, &strategy).map_err(|e| format!("sample {i}: {e}"))?;

        let removed = converted
            .removed_sentences
            .as_ref()
            .map(Vec::len)
            .unwrap_or(0);
        ensure(
            removed == DEFAULT_DELETION_COUNT,
            format!("sample {i}: removed {removed} sentences, default count is 2"),
        )?;
        ensure(
            converted.gold == Label::Unknown,
            format!("sample {i}: gold not Unknown"),
        )?;
        let rebuilt = reinsert_removed(&converted).map_err(|e| format!("sample {i}: {e}"))?;
        ensure(
            rebuilt == context,
            format!("sample {i}: reinserting removed sentences does not rebuild the context"),
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Harness
// ---------------------------------------------------------------------------

fn run_criterion(name: &str, f: impl FnOnce() -> CriterionResult) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|panic| {
        let detail = panic
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| panic.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {detail}"))
    });
    let elapsed = started.elapsed().as_millis();
    match outcome {
        Ok(()) => {
            println!("PASS {name} ({elapsed} ms)");
            true
        }
        Err(detail) => {
            println!("FAIL {name}: {detail}");
            false
        }
    }
}

fn main() {
    // Shared by the oracle-equivalence and invariant criteria; its wall time
    // is charged to the oracle-equivalence line.
    let suite = catch_unwind(run_randomized_suite).unwrap_or_else(|_| SuiteOutcome {
        runs_completed: 0,
        mismatches: Vec::new(),
        violations: Vec::new(),
        elapsed: Duration::ZERO,
        error: Some("randomized suite panicked".into()),
    });
    let suite_ms = suite.elapsed.as_millis();

    let mut passed = 0usize;
    let mut total = 0usize;
    let mut tally = |ok: bool| {
        total += 1;
        if ok {
            passed += 1;
        }
    };

    tally(run_criterion(
        "conformity-swing-reproduction",
        conformity_swing_reproduction,
    ));
    tally(run_criterion(
        "latent-accuracy-reproduction",
        latent_accuracy_reproduction,
    ));
    tally(run_criterion(
        "reasoning-feedback-delta-reproduction",
        reasoning_feedback_delta_reproduction,
    ));
    {
        let started = Instant::now();
        let ok = catch_unwind(AssertUnwindSafe(|| oracle_equivalence(&suite)))
            .unwrap_or_else(|_| Err("panicked".into()));
        let shown = suite_ms + started.elapsed().as_millis();
        match ok {
            Ok(()) => {
                println!("PASS oracle-equivalence-randomized-runs ({shown} ms)");
                tally(true);
            }
            Err(detail) => {
                println!("FAIL oracle-equivalence-randomized-runs: {detail}");
                tally(false);
            }
        }
    }
    tally(run_criterion("partition-conservation-invariants", || {
        partition_and_conservation_invariants(&suite)
    }));
    tally(run_criterion("byte-determinism", byte_determinism));
    tally(run_criterion(
        "ablation-persistence-calibration",
        ablation_persistence_calibration,
    ));
    tally(run_criterion("parser-conformance", parser_conformance));
    tally(run_criterion(
        "guidance-misdirection-statistics",
        guidance_misdirection_statistics,
    ));
    tally(run_criterion(
        "unknownization-round-trip",
        unknownization_round_trip,
    ));

    println!("acceptance: {passed}/{total} criteria passed");
    if passed != total {
        std::process::exit(1);
    }
}
