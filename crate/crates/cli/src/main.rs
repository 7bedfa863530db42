//! Command-line front end for the vague-perception evaluation pipeline.
//!
//! Subcommands map one-to-one onto dataset and pipeline operation families
//! and compose through a shared run directory: `prepare` and `validate` work
//! on sample files; `detect`, `run`, `rtg`, `ablate`, and `annotate` execute
//! protocol phases; `metrics`, `report`, and `validate --run-dir` read a run
//! directory back; `replay` re-executes the full protocol against a recorded
//! transcript.
//!
//! Exit status: 0 on success, 1 on domain errors (validation failures,
//! provider errors, invariant or oracle mismatches), 2 on usage errors.
//! Diagnostics go to standard error; data goes to files or standard output.
//!
//! Every command reads one config document (the serialized run config, TOML).
//! Flags override config keys, and the effective config plus the sample set
//! are snapshotted into the run directory on creation, so a run is
//! reconstructible from its directory alone. `--dry-run` prints the planned
//! provider-call count and exits without writing anything or making any
//! calls.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vpeval_core::dataset::{
    build_balanced_split, dataset_stats, load_samples, unknownize_half, write_samples, SampleSet,
    DEFAULT_DELETION_COUNT,
};
use vpeval_core::domain::{Phase, Rate, RootCause, StageId};
use vpeval_core::metrics::{engine_report, oracle_recompute, MetricsReport};
use vpeval_core::pipeline::{
    check_run_invariants, DetectSummary, Pipeline, ProviderConfig, RunConfig, RunDir, RunManifest,
    StagePartition, StimStyle,
};
use vpeval_core::report::{emit_manifest, emit_tables, TableFormat, TaggedReport};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

#[derive(Parser)]
#[command(
    name = "vpeval",
    version,
    about = "Evaluation pipeline probing how language models handle samples they answer with Unknown"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a benchmark file: optionally convert half the samples to
    /// unverifiable form, optionally draw a balanced split.
    Prepare(PrepareArgs),
    /// Validate a sample file, or check a run directory's invariants.
    Validate(ValidateArgs),
    /// First pass over the full set: answers plus justification judging;
    /// persists the stuck set.
    Detect(PhaseArgs),
    /// Stimulation rounds one and two over the stuck set.
    Run(PhaseArgs),
    /// Remind-then-guide reruns across the guidance grid.
    Rtg(RtgArgs),
    /// Repeat the stage-1 protocol on its unexcited set.
    Ablate(PhaseArgs),
    /// Annotate stuck samples with root causes.
    Annotate(PhaseArgs),
    /// Compute metrics from a run directory.
    Metrics(MetricsArgs),
    /// Emit comparison tables and per-run summaries.
    Report(ReportArgs),
    /// Re-execute the full protocol against a recorded transcript.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Source samples (JSON lines).
    #[arg(long)]
    input: PathBuf,
    /// Output directory for samples.jsonl and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Convert a seeded random half of the samples to unverifiable form.
    #[arg(long = "unknownize-half")]
    unknownize_half: bool,
    /// Sentences removed per converted sample.
    #[arg(long = "remove-count", default_value_t = DEFAULT_DELETION_COUNT)]
    remove_count: usize,
    /// Draw a balanced split of this size after conversion.
    #[arg(long = "target-size")]
    target_size: Option<usize>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Print planned work and exit without writing anything.
    #[arg(long = "dry-run")]
    dry_run: bool,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("target").required(true).multiple(false))]
struct ValidateArgs {
    /// Sample file to validate.
    #[arg(long, group = "target")]
    input: Option<PathBuf>,
    /// Run directory whose invariants to check.
    #[arg(long = "run-dir", group = "target")]
    run_dir: Option<PathBuf>,
    #[arg(long = "dry-run")]
    dry_run: bool,
}

#[derive(Args)]
struct PhaseArgs {
    /// Run directory holding the trajectory, snapshots, and transcript.
    #[arg(long = "run-dir")]
    run_dir: PathBuf,
    /// Config document (TOML). Defaults to <run-dir>/config.toml.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sample set (JSON lines). Defaults to <run-dir>/samples.jsonl.
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Continue an existing run directory instead of creating a fresh one.
    #[arg(long)]
    resume: bool,
    /// Print the planned provider-call count and exit without running.
    #[arg(long = "dry-run")]
    dry_run: bool,
    #[command(flatten)]
    overrides: OverrideArgs,
}

#[derive(Args)]
struct OverrideArgs {
    /// Override the provider: "replay:<transcript>" switches to replay;
    /// "scripted" or "live" asserts the configured kind.
    #[arg(long)]
    provider: Option<String>,
    /// Override the model name recorded and sent to the provider.
    #[arg(long)]
    model: Option<String>,
    /// Override stimulation styles, e.g. fact=detailed,story=concise.
    #[arg(long, value_parser = parse_style_override)]
    style: Option<StyleOverride>,
    /// Override the guidance grid, e.g. 1,0.6667,0.5,0.
    #[arg(long = "misguide-grid", value_parser = parse_misguide_grid)]
    misguide_grid: Option<MisguideGrid>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the worker-pool size.
    #[arg(long)]
    concurrency: Option<usize>,
    /// Abort after this many provider calls.
    #[arg(long)]
    budget: Option<u64>,
}

#[derive(Args)]
struct RtgArgs {
    #[command(flatten)]
    phase: PhaseArgs,
    /// Also rerun with the prior round's reasoning fed back.
    #[arg(long)]
    rp: bool,
}

#[derive(Args)]
struct MetricsArgs {
    /// Run directory to compute metrics from.
    #[arg(long, alias = "run-dir")]
    run: PathBuf,
    /// Recompute everything from the trajectory alone and fail on mismatch.
    #[arg(long = "check-oracle")]
    check_oracle: bool,
    /// Write the metric document here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "dry-run")]
    dry_run: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory, optionally tagged: [dataset=]dir. Repeatable.
    #[arg(long = "run", required = true)]
    runs: Vec<String>,
    /// Output directory for tables and run summaries.
    #[arg(long)]
    out: PathBuf,
    /// Table syntax to emit.
    #[arg(long, value_enum, default_value = "both")]
    format: EmitFormat,
    #[arg(long = "dry-run")]
    dry_run: bool,
}

#[derive(Args)]
struct ReplayArgs {
    /// Transcript to serve completions from.
    #[arg(long)]
    transcript: PathBuf,
    #[command(flatten)]
    phase: PhaseArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EmitFormat {
    Csv,
    Markup,
    Both,
}

// ---------------------------------------------------------------------------
// Flag value parsing
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct StyleOverride {
    fact: Option<StimStyle>,
    story: Option<StimStyle>,
}

fn parse_style_override(raw: &str) -> Result<StyleOverride, String> {
    let mut out = StyleOverride::default();
    for part in raw.split(',') {
        let (form, style) = part
            .split_once('=')
            .ok_or_else(|| format!("expected form=style pairs like fact=detailed, got {part:?}"))?;
        let style = match style.trim() {
            "concise" => StimStyle::Concise,
            "detailed" => StimStyle::Detailed,
            other => return Err(format!("unknown style {other:?}; use concise or detailed")),
        };
        match form.trim() {
            "fact" => out.fact = Some(style),
            "story" => out.story = Some(style),
            other => return Err(format!("unknown sample form {other:?}; use fact or story")),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct MisguideGrid(Vec<Rate>);

fn parse_misguide_grid(raw: &str) -> Result<MisguideGrid, String> {
    let rates: Result<Vec<Rate>, String> = raw
        .split(',')
        .map(|part| part.trim().parse::<Rate>().map_err(|e| e.to_string()))
        .collect();
    let rates = rates?;
    if rates.is_empty() {
        return Err("the guidance grid must list at least one rate".to_string());
    }
    Ok(MisguideGrid(rates))
}

fn apply_overrides(mut config: RunConfig, o: &OverrideArgs) -> Result<RunConfig> {
    if let Some(model) = &o.model {
        config.model_name = model.clone();
    }
    if let Some(style) = &o.style {
        if let Some(fact) = style.fact {
            config.style_map.fact = fact;
        }
        if let Some(story) = style.story {
            config.style_map.story = story;
        }
    }
    if let Some(grid) = &o.misguide_grid {
        config.misguide_grid = grid.0.clone();
    }
    if let Some(seed) = o.seed {
        config.seed = seed;
    }
    if let Some(concurrency) = o.concurrency {
        config.concurrency_limit = concurrency;
    }
    if let Some(budget) = o.budget {
        config.call_budget = Some(budget);
    }
    if let Some(provider) = &o.provider {
        config.provider = override_provider(config.provider, provider)?;
    }
    config.validate()?;
    Ok(config)
}

fn override_provider(current: ProviderConfig, flag: &str) -> Result<ProviderConfig> {
    if let Some(path) = flag
        .strip_prefix("replay:")
        .or_else(|| flag.strip_prefix("replay="))
    {
        return Ok(ProviderConfig::Replay {
            transcript: PathBuf::from(path),
        });
    }
    match flag {
        "scripted" => {
            if matches!(current, ProviderConfig::Scripted { .. }) {
                Ok(current)
            } else {
                bail!(
                    "--provider scripted needs a scripted policy, which only the config can carry"
                )
            }
        }
        "live" => {
            if matches!(current, ProviderConfig::Live { .. }) {
                Ok(current)
            } else {
                bail!("--provider live needs endpoint settings, which only the config can carry")
            }
        }
        other => bail!("unknown provider {other:?}; use scripted, live, or replay:<transcript>"),
    }
}

// ---------------------------------------------------------------------------
// Shared run-directory plumbing
// ---------------------------------------------------------------------------

const CONFIG_SNAPSHOT: &str = "config.toml";
const SAMPLES_SNAPSHOT: &str = "samples.jsonl";

struct RunInputs {
    config: RunConfig,
    samples: SampleSet,
}

fn load_inputs(args: &PhaseArgs) -> Result<RunInputs> {
    let config_path = match &args.config {
        Some(path) => path.clone(),
        None => {
            let snapshot = args.run_dir.join(CONFIG_SNAPSHOT);
            if !snapshot.exists() {
                bail!(
                    "no config: pass --config or use a run directory that carries {CONFIG_SNAPSHOT}"
                );
            }
            snapshot
        }
    };
    let config = RunConfig::load(&config_path)
        .with_context(|| format!("loading config {}", config_path.display()))?;
    let config = apply_overrides(config, &args.overrides)?;

    let samples_path = match &args.samples {
        Some(path) => path.clone(),
        None => {
            let snapshot = args.run_dir.join(SAMPLES_SNAPSHOT);
            if !snapshot.exists() {
                bail!(
                    "no samples: pass --samples or use a run directory that carries {SAMPLES_SNAPSHOT}"
                );
            }
            snapshot
        }
    };
    let samples = load_samples(&samples_path)
        .with_context(|| format!("loading samples {}", samples_path.display()))?;
    Ok(RunInputs { config, samples })
}

/// Creates or resumes the pipeline and snapshots the effective config and
/// sample set into fresh run directories.
fn open_pipeline(args: &PhaseArgs, inputs: &RunInputs) -> Result<Pipeline> {
    let pipeline = if args.resume {
        Pipeline::open(&args.run_dir, &inputs.samples, inputs.config.clone())?
    } else {
        Pipeline::create(&args.run_dir, &inputs.samples, inputs.config.clone())?
    };
    let config_snapshot = args.run_dir.join(CONFIG_SNAPSHOT);
    if !config_snapshot.exists() {
        std::fs::write(&config_snapshot, inputs.config.to_toml())
            .with_context(|| format!("writing {}", config_snapshot.display()))?;
    }
    let samples_snapshot = args.run_dir.join(SAMPLES_SNAPSHOT);
    if !samples_snapshot.exists() {
        write_samples(&inputs.samples.samples, &samples_snapshot)?;
    }
    Ok(pipeline)
}

fn partition_line(key: &str, p: &StagePartition) -> String {
    format!(
        "{key} input={} tc={} fc={} uc={}",
        p.input_ids.len(),
        p.tc.len(),
        p.fc.len(),
        p.uc.len()
    )
}

fn cause_name(cause: RootCause) -> &'static str {
    match cause {
        RootCause::FactUnderstanding => "fact_understanding",
        RootCause::ReasoningGap => "reasoning_gap",
        RootCause::ExcessiveCaution => "excessive_caution",
        RootCause::Else => "else",
    }
}

// ---------------------------------------------------------------------------
// Dry-run planning
// ---------------------------------------------------------------------------

/// A planned main-turn count: exact when the phase's input set is already
/// persisted, an upper bound otherwise.
#[derive(Clone, Copy)]
enum Bound {
    Known(usize),
    AtMost(usize),
}

impl Bound {
    fn value(self) -> usize {
        match self {
            Bound::Known(n) | Bound::AtMost(n) => n,
        }
    }

    fn known(self) -> bool {
        matches!(self, Bound::Known(_))
    }

    fn text(self) -> String {
        match self {
            Bound::Known(n) => n.to_string(),
            Bound::AtMost(n) => format!("<={n}"),
        }
    }
}

fn read_snapshot<T: serde::de::DeserializeOwned>(root: &Path, key: &str) -> Option<T> {
    let path = RunDir::new(root).partition_path(key);
    let raw = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&raw).ok()
}

struct Planner {
    root: PathBuf,
    set_len: usize,
    config: RunConfig,
}

impl Planner {
    fn vp(&self) -> Bound {
        match read_snapshot::<DetectSummary>(&self.root, &Phase::Detect.key()) {
            Some(s) => Bound::Known(s.partition.uc.len()),
            None => Bound::AtMost(self.set_len),
        }
    }

    fn fc1(&self) -> Bound {
        match read_snapshot::<StagePartition>(&self.root, &Phase::Stage1.key()) {
            Some(p) => Bound::Known(p.fc.len()),
            None => Bound::AtMost(self.vp().value()),
        }
    }

    fn uc1(&self) -> Bound {
        match read_snapshot::<StagePartition>(&self.root, &Phase::Stage1.key()) {
            Some(p) => Bound::Known(p.uc.len()),
            None => Bound::AtMost(self.vp().value()),
        }
    }

    fn stage_source(&self, stage: StageId) -> Bound {
        match stage {
            StageId::One => self.vp(),
            StageId::Two => self.fc1(),
        }
    }

    fn detect_lines(&self) -> Vec<(String, Bound)> {
        vec![(Phase::Detect.key(), Bound::Known(self.set_len))]
    }

    fn run_lines(&self) -> Vec<(String, Bound)> {
        vec![
            (Phase::Stage1.key(), self.vp()),
            (Phase::Stage2.key(), self.fc1()),
        ]
    }

    fn rtg_lines(&self, rp: bool) -> Vec<(String, Bound)> {
        let mut lines = Vec::new();
        for &stage in &self.config.rtg_stages {
            let source = self.stage_source(stage);
            for &misguide in &self.config.misguide_grid {
                lines.push((Phase::RtgLabel { stage, misguide }.key(), source));
            }
            if rp {
                lines.push((Phase::RtgRp { stage }.key(), source));
            }
        }
        lines
    }

    fn ablate_lines(&self) -> Vec<(String, Bound)> {
        vec![(Phase::AblationRepeat.key(), self.uc1())]
    }

    fn annotate_lines(&self) -> Vec<(String, Bound)> {
        vec![(Phase::RootCause.key(), self.vp())]
    }

    fn full_protocol_lines(&self) -> Vec<(String, Bound)> {
        let mut lines = self.detect_lines();
        lines.extend(self.run_lines());
        lines.extend(self.rtg_lines(self.config.capture_reasoning));
        lines.extend(self.ablate_lines());
        lines.extend(self.annotate_lines());
        lines
    }
}

fn print_plan(lines: &[(String, Bound)]) {
    let mut total = 0usize;
    let mut exact = true;
    for (phase, bound) in lines {
        println!("{phase}\t{}", bound.text());
        total += bound.value();
        exact &= bound.known();
    }
    println!(
        "total\t{}",
        if exact {
            total.to_string()
        } else {
            format!("<={total}")
        }
    );
    eprintln!(
        "dry run: counts are answer turns; justification and judge turns can add up to \
         two more calls per sample. nothing was written and no calls were made."
    );
}

/// Prints a zero-call plan for commands that never talk to a provider.
fn print_zero_plan() {
    println!("total\t0");
    eprintln!("dry run: no provider calls planned; nothing was written and no calls were made.");
}

fn dry_run_phase(
    args: &PhaseArgs,
    lines_for: impl Fn(&Planner) -> Vec<(String, Bound)>,
) -> Result<()> {
    let inputs = load_inputs(args)?;
    let planner = Planner {
        root: args.run_dir.clone(),
        set_len: inputs.samples.len(),
        config: inputs.config,
    };
    print_plan(&lines_for(&planner));
    Ok(())
}

// ---------------------------------------------------------------------------
// Command implementations
// ---------------------------------------------------------------------------

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Prepare(args) => prepare(args),
        Command::Validate(args) => validate(args),
        Command::Detect(args) => phase_command(
            args,
            |planner| planner.detect_lines(),
            |p| {
                let summary = p.detect_vp()?;
                println!(
                    "{} vp={} parse_failures={}",
                    partition_line(&Phase::Detect.key(), &summary.partition),
                    summary.vp_ids.len(),
                    summary.parse_failure_ids.len()
                );
                Ok(())
            },
        ),
        Command::Run(args) => phase_command(
            args,
            |planner| planner.run_lines(),
            |p| {
                let stage1 = p.run_stage1()?;
                println!("{}", partition_line(&Phase::Stage1.key(), &stage1));
                let stage2 = p.run_stage2()?;
                println!("{}", partition_line(&Phase::Stage2.key(), &stage2));
                Ok(())
            },
        ),
        Command::Rtg(args) => {
            let rp = args.rp;
            phase_command(
                args.phase,
                move |planner| planner.rtg_lines(rp),
                move |p| {
                    for (key, partition) in p.run_rtg_label()? {
                        println!("{}", partition_line(&key, &partition));
                    }
                    if rp {
                        for (key, partition) in p.run_rtg_rp()? {
                            println!("{}", partition_line(&key, &partition));
                        }
                    }
                    Ok(())
                },
            )
        }
        Command::Ablate(args) => phase_command(
            args,
            |planner| planner.ablate_lines(),
            |p| {
                let summary = p.run_ablation_repeat()?;
                println!(
                    "{} unchanged={} rate={}",
                    partition_line(&Phase::AblationRepeat.key(), &summary.partition),
                    summary.unchanged_ids.len(),
                    summary.unchanged_rate
                );
                Ok(())
            },
        ),
        Command::Annotate(args) => phase_command(
            args,
            |planner| planner.annotate_lines(),
            |p| {
                let summary = p.annotate_root_causes()?;
                let mut line = format!(
                    "{} annotated={} unannotated={}",
                    Phase::RootCause.key(),
                    summary.assignments.len(),
                    summary.unannotated.len()
                );
                for (cause, count) in &summary.counts {
                    line.push_str(&format!(" {}={count}", cause_name(*cause)));
                }
                println!("{line}");
                Ok(())
            },
        ),
        Command::Metrics(args) => metrics(args),
        Command::Report(args) => report(args),
        Command::Replay(args) => replay(args),
    }
}

fn phase_command(
    args: PhaseArgs,
    plan: impl Fn(&Planner) -> Vec<(String, Bound)>,
    execute: impl FnOnce(&mut Pipeline) -> Result<()>,
) -> Result<()> {
    if args.dry_run {
        return dry_run_phase(&args, plan);
    }
    let inputs = load_inputs(&args)?;
    let mut pipeline = open_pipeline(&args, &inputs)?;
    execute(&mut pipeline)?;
    eprintln!("provider calls used: {}", pipeline.provider_calls());
    Ok(())
}

fn prepare(args: PrepareArgs) -> Result<()> {
    let set = load_samples(&args.input)
        .with_context(|| format!("loading samples {}", args.input.display()))?;
    let mut samples = set.samples;
    if args.unknownize_half {
        samples = unknownize_half(&samples, args.remove_count, args.seed)?;
    }
    let out_set = match args.target_size {
        Some(target) => build_balanced_split(&samples, target, args.seed)?,
        None => SampleSet::from_samples(samples, set.manifest.source_digest.clone())?,
    };

    if args.dry_run {
        print_zero_plan();
        eprintln!(
            "dry run: would write {} samples to {}",
            out_set.len(),
            args.out.join(SAMPLES_SNAPSHOT).display()
        );
        return Ok(());
    }
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let samples_path = args.out.join(SAMPLES_SNAPSHOT);
    write_samples(&out_set.samples, &samples_path)?;
    let manifest_path = args.out.join("manifest.json");
    let mut manifest_json = serde_json::to_string_pretty(&out_set.manifest)
        .expect("manifest serialization cannot fail");
    manifest_json.push('\n');
    std::fs::write(&manifest_path, manifest_json)
        .with_context(|| format!("writing {}", manifest_path.display()))?;
    println!(
        "{}",
        serde_json::to_string_pretty(&dataset_stats(&out_set))
            .expect("stats serialization cannot fail")
    );
    eprintln!(
        "wrote {} and {}",
        samples_path.display(),
        manifest_path.display()
    );
    Ok(())
}

fn validate(args: ValidateArgs) -> Result<()> {
    if args.dry_run {
        print_zero_plan();
        return Ok(());
    }
    match (&args.input, &args.run_dir) {
        (Some(input), None) => {
            let set = load_samples(input)
                .with_context(|| format!("loading samples {}", input.display()))?;
            println!(
                "{}",
                serde_json::to_string_pretty(&dataset_stats(&set))
                    .expect("stats serialization cannot fail")
            );
            eprintln!("ok: {} samples are well formed", set.len());
            Ok(())
        }
        (None, Some(root)) => {
            let violations = check_run_invariants(root)?;
            if violations.is_empty() {
                println!("ok: run invariants hold");
                Ok(())
            } else {
                for violation in &violations {
                    println!("violation: {violation}");
                }
                bail!("{} run invariant violation(s)", violations.len())
            }
        }
        // The argument group guarantees exactly one target was given.
        _ => unreachable!("clap enforces exactly one of --input and --run-dir"),
    }
}

fn metrics(args: MetricsArgs) -> Result<()> {
    if args.dry_run {
        print_zero_plan();
        return Ok(());
    }
    let engine = engine_report(&args.run)?;
    if args.check_oracle {
        let trajectory = RunDir::new(&args.run).trajectory_path();
        let oracle = oracle_recompute(&trajectory)?;
        if engine != oracle {
            let diff = diff_reports(&engine, &oracle);
            for line in &diff {
                eprintln!("{line}");
            }
            bail!("engine/oracle mismatch in {} field(s)", diff.len());
        }
        eprintln!("oracle check passed: engine and trajectory recomputation agree");
    }
    let text = engine.to_flat_text();
    match &args.out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// Field-level differences between two reports, as `key: engine=.. oracle=..`
/// lines over the union of their flat keys.
fn diff_reports(engine: &MetricsReport, oracle: &MetricsReport) -> Vec<String> {
    let flat = |report: &MetricsReport| -> BTreeMap<String, String> {
        report
            .flat_entries()
            .into_iter()
            .map(|e| (e.key, e.exact))
            .collect()
    };
    let engine = flat(engine);
    let oracle = flat(oracle);
    let mut lines = Vec::new();
    for key in engine
        .keys()
        .chain(oracle.keys())
        .collect::<std::collections::BTreeSet<_>>()
    {
        let left = engine.get(key).map(String::as_str);
        let right = oracle.get(key).map(String::as_str);
        if left != right {
            lines.push(format!(
                "{key}: engine={} oracle={}",
                left.unwrap_or("<absent>"),
                right.unwrap_or("<absent>")
            ));
        }
    }
    lines
}

fn report(args: ReportArgs) -> Result<()> {
    if args.dry_run {
        print_zero_plan();
        return Ok(());
    }
    let mut tagged = Vec::new();
    let mut summaries: Vec<(String, PathBuf)> = Vec::new();
    let mut seen_tags: BTreeMap<String, usize> = BTreeMap::new();
    for spec in &args.runs {
        let (dataset, dir) = match spec.split_once('=') {
            Some((tag, dir)) => (tag.to_string(), PathBuf::from(dir)),
            None => {
                let dir = PathBuf::from(spec);
                let tag = dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "run".to_string());
                (tag, dir)
            }
        };
        let manifest_path = RunDir::new(&dir).manifest_path();
        let raw = std::fs::read_to_string(&manifest_path)
            .with_context(|| format!("reading {}", manifest_path.display()))?;
        let pinned: RunManifest = serde_json::from_str(&raw)
            .with_context(|| format!("parsing {}", manifest_path.display()))?;
        let metrics = engine_report(&dir)?;
        let seen = seen_tags.entry(dataset.clone()).or_insert(0);
        *seen += 1;
        let summary_name = if *seen == 1 {
            format!("run-summary-{dataset}.json")
        } else {
            format!("run-summary-{dataset}-{seen}.json")
        };
        summaries.push((summary_name, dir.clone()));
        tagged.push(TaggedReport {
            model: pinned.model_name,
            dataset,
            metrics,
        });
    }

    let mut written = Vec::new();
    if matches!(args.format, EmitFormat::Csv | EmitFormat::Both) {
        written.extend(emit_tables(&tagged, &args.out, TableFormat::Delimited)?);
    }
    if matches!(args.format, EmitFormat::Markup | EmitFormat::Both) {
        written.extend(emit_tables(&tagged, &args.out, TableFormat::Markup)?);
    }
    for (name, dir) in &summaries {
        let path = args.out.join(name);
        emit_manifest(dir, &path)?;
        written.push(path);
    }
    // Both-format emission writes exact.json once per pass; list it once.
    let mut seen = BTreeSet::new();
    written.retain(|path| seen.insert(path.clone()));
    for path in &written {
        println!("{}", path.display());
    }
    Ok(())
}

fn replay(args: ReplayArgs) -> Result<()> {
    let ReplayArgs {
        transcript,
        mut phase,
    } = args;
    if !transcript.exists() {
        bail!("transcript {} does not exist", transcript.display());
    }
    phase.overrides.provider = Some(format!("replay:{}", transcript.display()));
    phase_command(
        phase,
        |planner| planner.full_protocol_lines(),
        |p| {
            p.run_all()?;
            eprintln!("replayed the full protocol");
            Ok(())
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn style_overrides_parse_both_forms() {
        let o = parse_style_override("fact=concise,story=detailed").unwrap();
        assert_eq!(o.fact, Some(StimStyle::Concise));
        assert_eq!(o.story, Some(StimStyle::Detailed));
        let partial = parse_style_override("story=concise").unwrap();
        assert_eq!(partial.fact, None);
        assert_eq!(partial.story, Some(StimStyle::Concise));
        assert!(parse_style_override("fact=verbose").is_err());
        assert!(parse_style_override("poem=concise").is_err());
        assert!(parse_style_override("fact").is_err());
    }

    #[test]
    fn misguide_grids_parse_decimals_and_fractions() {
        let grid = parse_misguide_grid("1,0.6667,1/2,0").unwrap();
        let parts: Vec<(i64, i64)> = grid.0.iter().map(|r| r.parts()).collect();
        assert_eq!(parts, vec![(1, 1), (6667, 10_000), (1, 2), (0, 1)]);
        assert!(parse_misguide_grid("1.5").is_err());
        assert!(parse_misguide_grid("x").is_err());
    }

    #[test]
    fn provider_overrides_require_constructible_targets() {
        let scripted = RunConfig::default().provider;
        assert!(matches!(
            override_provider(scripted.clone(), "replay:t.jsonl").unwrap(),
            ProviderConfig::Replay { .. }
        ));
        assert!(override_provider(scripted.clone(), "scripted").is_ok());
        assert!(override_provider(scripted.clone(), "live").is_err());
        assert!(override_provider(scripted, "carrier-pigeon").is_err());
    }

    #[test]
    fn bounds_render_exact_and_upper_forms() {
        assert_eq!(Bound::Known(12).text(), "12");
        assert_eq!(Bound::AtMost(12).text(), "<=12");
        assert!(Bound::Known(1).known());
        assert!(!Bound::AtMost(1).known());
    }

    #[test]
    fn cli_definition_is_well_formed() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
