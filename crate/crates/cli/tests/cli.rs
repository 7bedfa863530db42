//! End-to-end tests driving the compiled binary through full protocol runs,
//! dataset preparation, oracle checks, replay, and reporting.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vpeval_core::dataset::{content_digest, load_samples, write_samples, SampleSet};
use vpeval_core::domain::{FType, Label, Origin, Rate, Sample, SampleForm};
use vpeval_core::metrics::engine_report;
use vpeval_core::pipeline::{Pipeline, ProviderConfig, RunConfig, RunDir};
use vpeval_core::provider::{Outcome, PhaseMatcher, PolicyRule, ScriptedPolicy};

fn vpeval(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vpeval"))
        .args(args)
        .output()
        .expect("spawn the binary")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is UTF-8")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr is UTF-8")
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed: status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        stdout_of(out),
        stderr_of(out)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process exited normally")
}

fn sample(id: &str, gold: Label, form: SampleForm) -> Sample {
    Sample {
        id: id.into(),
        dataset: "fixture".into(),
        subcategory: None,
        form,
        context: "All observed swans are white. Pat observed a swan on the lake. \
                  The lake sits beside the village. Records of the sighting were kept. \
                  The village archive preserves such records."
            .into(),
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

/// All verifiable samples get stuck on the first pass, answer wrong under
/// stimulation round one, and recover under round two.
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

/// Writes a sample file and a config document into `dir` and returns their
/// paths.
fn write_fixture_inputs(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let set = fixture_set(8, 4);
    let samples_path = dir.join("raw.jsonl");
    write_samples(&set.samples, &samples_path).unwrap();
    let config_path = dir.join("run.toml");
    std::fs::write(
        &config_path,
        scripted_config(seed, deterministic_rules()).to_toml(),
    )
    .unwrap();
    (samples_path, config_path)
}

/// Runs the full protocol in-process and returns the run directory root.
fn completed_run(dir: &Path, seed: u64) -> PathBuf {
    let root = dir.join("run");
    let set = fixture_set(8, 4);
    let config = scripted_config(seed, deterministic_rules());
    let mut pipeline = Pipeline::create(&root, &set, config.clone()).unwrap();
    pipeline.run_all().unwrap();
    drop(pipeline);
    std::fs::write(root.join("config.toml"), config.to_toml()).unwrap();
    write_samples(&set.samples, &root.join("samples.jsonl")).unwrap();
    root
}

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().expect("create temp dir")
}

#[test]
fn usage_errors_exit_two() {
    let missing_flag = vpeval(&["detect"]);
    assert_eq!(exit_code(&missing_flag), 2);
    assert!(stderr_of(&missing_flag).contains("--run-dir"));

    let unknown_command = vpeval(&["summon"]);
    assert_eq!(exit_code(&unknown_command), 2);

    let neither_target = vpeval(&["validate"]);
    assert_eq!(exit_code(&neither_target), 2);
}

#[test]
fn prepare_builds_a_balanced_benchmark() {
    let dir = tmp();
    let set = fixture_set(10, 0);
    let raw = dir.path().join("raw.jsonl");
    write_samples(&set.samples, &raw).unwrap();
    let out_dir = dir.path().join("bench");

    let out = vpeval(&[
        "prepare",
        "--input",
        raw.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--unknownize-half",
        "--seed",
        "7",
        "--target-size",
        "8",
    ]);
    assert_success(&out, "prepare");

    let stats: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    assert_eq!(stats["total"], 8);

    let built = load_samples(&out_dir.join("samples.jsonl")).unwrap();
    assert_eq!(built.len(), 8);
    let unverifiable: Vec<&Sample> = built
        .samples
        .iter()
        .filter(|s| s.origin == Origin::Unknownized)
        .collect();
    assert_eq!(unverifiable.len(), 4);
    for s in &unverifiable {
        assert_eq!(s.gold, Label::Unknown);
        assert_eq!(s.removed_sentences.as_ref().map(Vec::len), Some(2));
    }
    assert!(out_dir.join("manifest.json").exists());

    let rerun_dir = dir.path().join("bench2");
    let rerun = vpeval(&[
        "prepare",
        "--input",
        raw.to_str().unwrap(),
        "--out",
        rerun_dir.to_str().unwrap(),
        "--unknownize-half",
        "--seed",
        "7",
        "--target-size",
        "8",
    ]);
    assert_success(&rerun, "prepare rerun");
    assert_eq!(
        std::fs::read(out_dir.join("samples.jsonl")).unwrap(),
        std::fs::read(rerun_dir.join("samples.jsonl")).unwrap(),
        "the same seed must reproduce the same benchmark bytes"
    );
}

#[test]
fn full_scripted_flow_runs_to_green_metrics() {
    let dir = tmp();
    let (samples, config) = write_fixture_inputs(dir.path(), 11);
    let run_dir = dir.path().join("run");
    let run_dir_s = run_dir.to_str().unwrap();

    let detect = vpeval(&[
        "detect",
        "--run-dir",
        run_dir_s,
        "--config",
        config.to_str().unwrap(),
        "--samples",
        samples.to_str().unwrap(),
    ]);
    assert_success(&detect, "detect");
    let detect_out = stdout_of(&detect);
    assert!(detect_out.contains("detect input=12"), "got: {detect_out}");
    assert!(detect_out.contains("vp=8"), "got: {detect_out}");
    assert!(detect_out.contains("parse_failures=0"), "got: {detect_out}");
    assert!(
        run_dir.join("config.toml").exists() && run_dir.join("samples.jsonl").exists(),
        "creation must snapshot the effective config and sample set"
    );

    let run = vpeval(&["run", "--run-dir", run_dir_s, "--resume"]);
    assert_success(&run, "run");
    let run_out = stdout_of(&run);
    assert!(run_out.contains("stage1 input=8"), "got: {run_out}");
    assert!(run_out.contains("fc=8"), "got: {run_out}");
    assert!(run_out.contains("stage2 input=8"), "got: {run_out}");
    assert!(run_out.contains("tc=8"), "got: {run_out}");

    let rtg = vpeval(&["rtg", "--run-dir", run_dir_s, "--resume"]);
    assert_success(&rtg, "rtg");
    let rtg_out = stdout_of(&rtg);
    for key in [
        "rtg-label-s1-m1of1",
        "rtg-label-s1-m0of1",
        "rtg-label-s2-m1of1",
        "rtg-label-s2-m0of1",
    ] {
        assert!(
            rtg_out.contains(&format!("{key} input=8")),
            "missing {key} in: {rtg_out}"
        );
    }

    let ablate = vpeval(&["ablate", "--run-dir", run_dir_s, "--resume"]);
    assert_success(&ablate, "ablate");
    assert!(
        stdout_of(&ablate).contains("ablation-repeat input=0"),
        "got: {}",
        stdout_of(&ablate)
    );

    let annotate = vpeval(&["annotate", "--run-dir", run_dir_s, "--resume"]);
    assert_success(&annotate, "annotate");
    assert!(
        stdout_of(&annotate).contains("root-cause annotated="),
        "got: {}",
        stdout_of(&annotate)
    );

    let metrics = vpeval(&["metrics", "--run", run_dir_s, "--check-oracle"]);
    assert_success(&metrics, "metrics");
    let metrics_out = stdout_of(&metrics);
    assert!(
        metrics_out.contains("direct_accuracy\t"),
        "got: {metrics_out}"
    );
    assert!(stderr_of(&metrics).contains("oracle check passed"));

    let validate = vpeval(&["validate", "--run-dir", run_dir_s]);
    assert_success(&validate, "validate");
    assert!(stdout_of(&validate).contains("ok: run invariants hold"));
}

#[test]
fn oracle_check_flags_tampered_partitions() {
    let dir = tmp();
    let root = completed_run(dir.path(), 13);

    let stage2_path = RunDir::new(&root).partition_path("stage2");
    let mut snapshot: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&stage2_path).unwrap()).unwrap();
    let moved = snapshot["tc"].as_array_mut().unwrap().pop().unwrap();
    snapshot["fc"].as_array_mut().unwrap().push(moved);
    std::fs::write(&stage2_path, serde_json::to_string(&snapshot).unwrap()).unwrap();

    let out = vpeval(&["metrics", "--run", root.to_str().unwrap(), "--check-oracle"]);
    assert_eq!(exit_code(&out), 1);
    let err = stderr_of(&out);
    assert!(
        err.contains("engine=") && err.contains("oracle="),
        "no field diff in: {err}"
    );
    assert!(err.contains("mismatch"), "no mismatch notice in: {err}");

    let unchecked = vpeval(&["metrics", "--run", root.to_str().unwrap()]);
    assert_success(&unchecked, "metrics without the oracle check");
}

#[test]
fn dry_runs_write_nothing_and_count_calls() {
    let dir = tmp();
    let (samples, config) = write_fixture_inputs(dir.path(), 17);
    let run_dir = dir.path().join("never-created");

    let out = vpeval(&[
        "detect",
        "--run-dir",
        run_dir.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--samples",
        samples.to_str().unwrap(),
        "--dry-run",
    ]);
    assert_success(&out, "detect --dry-run");
    let plan = stdout_of(&out);
    assert!(plan.contains("detect\t12"), "got: {plan}");
    assert!(plan.contains("total\t12"), "got: {plan}");
    assert!(
        !run_dir.exists(),
        "a dry run must not create the run directory"
    );

    let rtg = vpeval(&[
        "rtg",
        "--run-dir",
        run_dir.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--samples",
        samples.to_str().unwrap(),
        "--dry-run",
    ]);
    assert_success(&rtg, "rtg --dry-run");
    let rtg_plan = stdout_of(&rtg);
    assert!(
        rtg_plan.contains("rtg-label-s1-m1of1\t<=12"),
        "got: {rtg_plan}"
    );
    assert!(rtg_plan.contains("total\t<=48"), "got: {rtg_plan}");
    assert!(!run_dir.exists());

    let prepare = vpeval(&[
        "prepare",
        "--input",
        samples.to_str().unwrap(),
        "--out",
        dir.path().join("bench").to_str().unwrap(),
        "--dry-run",
    ]);
    assert_success(&prepare, "prepare --dry-run");
    assert!(stdout_of(&prepare).contains("total\t0"));
    assert!(!dir.path().join("bench").exists());
}

#[test]
fn planned_counts_turn_exact_once_partitions_exist() {
    let dir = tmp();
    let root = completed_run(dir.path(), 19);

    let out = vpeval(&[
        "ablate",
        "--run-dir",
        root.to_str().unwrap(),
        "--resume",
        "--dry-run",
    ]);
    assert_success(&out, "ablate --dry-run on a finished run");
    let plan = stdout_of(&out);
    assert!(plan.contains("ablation-repeat\t0"), "got: {plan}");
    assert!(plan.contains("total\t0"), "got: {plan}");
}

#[test]
fn resuming_a_finished_run_makes_no_calls() {
    let dir = tmp();
    let root = completed_run(dir.path(), 23);

    let before = std::fs::read(RunDir::new(&root).trajectory_path()).unwrap();
    let out = vpeval(&["run", "--run-dir", root.to_str().unwrap(), "--resume"]);
    assert_success(&out, "run --resume on a finished run");
    assert!(
        stderr_of(&out).contains("provider calls used: 0"),
        "expected a zero call count, got: {}",
        stderr_of(&out)
    );
    let after = std::fs::read(RunDir::new(&root).trajectory_path()).unwrap();
    assert_eq!(
        before, after,
        "resuming finished work must not append to the trajectory"
    );
}

#[test]
fn a_live_lock_rejects_concurrent_commands() {
    let dir = tmp();
    let root = completed_run(dir.path(), 29);
    let lock_path = root.join(".lock");
    std::fs::write(&lock_path, std::process::id().to_string()).unwrap();

    let out = vpeval(&["run", "--run-dir", root.to_str().unwrap(), "--resume"]);
    assert_eq!(exit_code(&out), 1);
    assert!(
        stderr_of(&out).to_lowercase().contains("lock"),
        "got: {}",
        stderr_of(&out)
    );

    std::fs::remove_file(&lock_path).unwrap();
    let retry = vpeval(&["run", "--run-dir", root.to_str().unwrap(), "--resume"]);
    assert_success(&retry, "run after the lock cleared");
}

#[test]
fn fresh_run_dirs_require_resume_to_continue() {
    let dir = tmp();
    let root = completed_run(dir.path(), 31);

    let out = vpeval(&["run", "--run-dir", root.to_str().unwrap()]);
    assert_eq!(
        exit_code(&out),
        1,
        "without --resume an initialized directory is refused"
    );
}

#[test]
fn budget_exhaustion_is_a_domain_error() {
    let dir = tmp();
    let (samples, config) = write_fixture_inputs(dir.path(), 37);

    let out = vpeval(&[
        "detect",
        "--run-dir",
        dir.path().join("run").to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--samples",
        samples.to_str().unwrap(),
        "--budget",
        "3",
    ]);
    assert_eq!(exit_code(&out), 1);
    assert!(
        stderr_of(&out).to_lowercase().contains("budget"),
        "got: {}",
        stderr_of(&out)
    );
}

#[test]
fn replay_reproduces_partitions_and_metrics() {
    let dir = tmp();
    let root = completed_run(dir.path(), 41);
    let transcript = RunDir::new(&root).transcript_path();
    let replay_root = dir.path().join("replayed");

    let out = vpeval(&[
        "replay",
        "--transcript",
        transcript.to_str().unwrap(),
        "--run-dir",
        replay_root.to_str().unwrap(),
        "--config",
        root.join("config.toml").to_str().unwrap(),
        "--samples",
        root.join("samples.jsonl").to_str().unwrap(),
    ]);
    assert_success(&out, "replay");

    let partition_names = |r: &Path| -> Vec<String> {
        let mut names: Vec<String> = std::fs::read_dir(r.join("partitions"))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        names
    };
    let names = partition_names(&root);
    assert_eq!(names, partition_names(&replay_root));
    for name in names {
        assert_eq!(
            std::fs::read(root.join("partitions").join(&name)).unwrap(),
            std::fs::read(replay_root.join("partitions").join(&name)).unwrap(),
            "partition {name} must replay byte-for-byte"
        );
    }
    assert_eq!(
        engine_report(&root).unwrap(),
        engine_report(&replay_root).unwrap(),
        "replayed metrics must match the original run"
    );
}

#[test]
fn report_emits_tables_and_run_summaries() {
    let dir = tmp();
    let root = completed_run(dir.path(), 43);
    let out_dir = dir.path().join("tables");

    let out = vpeval(&[
        "report",
        "--run",
        &format!("fixture={}", root.display()),
        "--out",
        out_dir.to_str().unwrap(),
        "--format",
        "both",
    ]);
    assert_success(&out, "report");

    for name in [
        "main.csv",
        "degrading.csv",
        "vp_types.csv",
        "root_causes.csv",
        "ablation.csv",
        "exact.json",
        "main.md",
        "run-summary-fixture.json",
    ] {
        assert!(out_dir.join(name).exists(), "missing {name}");
    }
    let main_csv = std::fs::read_to_string(out_dir.join("main.csv")).unwrap();
    let mut lines = main_csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "model,dataset,tcr_stage1,tcr_stage2,ocr,conf_v,conf_u,cgr,rpc"
    );
    let row = lines.next().unwrap();
    assert!(row.starts_with("scripted-model,fixture,"), "got: {row}");

    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("run-summary-fixture.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["model_name"], "scripted-model");
    assert_eq!(
        summary["incomplete_phases"].as_array().map(Vec::len),
        Some(0)
    );

    let listed = stdout_of(&out);
    assert!(listed.contains("main.csv") && listed.contains("run-summary-fixture.json"));
}

#[test]
fn validate_reports_sample_stats() {
    let dir = tmp();
    let (samples, _) = write_fixture_inputs(dir.path(), 47);

    let out = vpeval(&["validate", "--input", samples.to_str().unwrap()]);
    assert_success(&out, "validate --input");
    let stats: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    assert_eq!(stats["total"], 12);

    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, "{\"id\": \"x\"}\n").unwrap();
    let bad = vpeval(&["validate", "--input", broken.to_str().unwrap()]);
    assert_eq!(exit_code(&bad), 1);
}

#[test]
fn overrides_change_the_effective_config_snapshot() {
    let dir = tmp();
    let (samples, config) = write_fixture_inputs(dir.path(), 53);
    let run_dir = dir.path().join("run");

    let out = vpeval(&[
        "detect",
        "--run-dir",
        run_dir.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--samples",
        samples.to_str().unwrap(),
        "--model",
        "renamed-model",
        "--seed",
        "99",
        "--misguide-grid",
        "1,1/2,0",
        "--style",
        "fact=concise",
    ]);
    assert_success(&out, "detect with overrides");

    let effective = RunConfig::load(&run_dir.join("config.toml")).unwrap();
    assert_eq!(effective.model_name, "renamed-model");
    assert_eq!(effective.seed, 99);
    assert_eq!(
        effective.misguide_grid,
        vec![
            Rate::new(1, 1).unwrap(),
            Rate::new(1, 2).unwrap(),
            Rate::new(0, 1).unwrap()
        ]
    );
}
