//! The `hide-forge` command line.
//!
//! Exit status: 0 on success, 1 on usage errors (bad flags, unreadable or
//! invalid config), 2 on data and contract errors. Diagnostics go to
//! stderr; results only ever go to files.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bench::{self, build_start, generate_suite, load_suite, run_suite, LoadedSuite, MetricsReport, SuiteConfig};
use crate::checkpoint::{self, TensorFile};
use crate::cka::{layerwise_scan, write_cka_csv, CkaRow};
use crate::continual::{
    evaluate, metrics, AccuracyMatrix, ContinualState, InferencePlan, PlanOptions, Strategy, TrainingMode,
};
use crate::error::Error;
use crate::model::Sample;

pub const MANIFEST_FILE: &str = "run-manifest.json";

#[derive(Debug, Parser)]
#[command(name = "hide-forge", version, about = "Hierarchical LoRA composition for continual instruction tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic task suite.
    GenData(GenDataArgs),
    /// Learn every task of a suite in order and save the state.
    Train(TrainArgs),
    /// Write the adapters one strategy composes for one input.
    Compose(ComposeArgs),
    /// Evaluate a trained state and write metrics reports.
    Eval(EvalArgs),
    /// Layer-wise CKA between two task checkpoints.
    Cka(CkaArgs),
    /// Run the full benchmark with every sweep.
    Sweep(SweepArgs),
    /// Merge report JSON files into one CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Suite configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `suite.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// `per-task` (fresh adapters per task) or `sequential`.
    #[arg(long, default_value = "per-task", value_parser = parse_mode)]
    mode: TrainingMode,
    /// State directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ComposeArgs {
    /// State directory written by `train`.
    #[arg(long)]
    state: PathBuf,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Strategy,
    /// JSONL file holding the input to compose for.
    #[arg(long)]
    input: PathBuf,
    /// Line of `--input` to use.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    state: PathBuf,
    /// Repeatable. Defaults to every strategy the state supports.
    #[arg(long = "strategy", value_parser = parse_strategy)]
    strategies: Vec<Strategy>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CkaArgs {
    /// State directory providing the base model and projector.
    #[arg(long)]
    state: PathBuf,
    /// Task checkpoint of the first model.
    #[arg(long)]
    left: PathBuf,
    /// Task checkpoint of the second model.
    #[arg(long)]
    right: PathBuf,
    /// Repeatable JSONL files whose samples form the probe set.
    #[arg(long = "probe", required = true)]
    probes: Vec<PathBuf>,
    #[arg(long, default_value_t = 256)]
    probe_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Generated suite to use; generated into the run directory if omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Parent directory; each invocation creates a fresh run directory in it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Run directories or report JSON files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<TrainingMode, String> {
    match s {
        "per-task" => Ok(TrainingMode::PerTask),
        "sequential" => Ok(TrainingMode::Sequential),
        _ => Err(format!("unknown training mode `{s}` (per-task, sequential)")),
    }
}

/// Why a command stopped.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Provenance of one invocation, written before any heavy work.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub created_at: String,
    pub config_hash: String,
}

/// RFC 3339 time, taken from `SOURCE_DATE_EPOCH` when set so that
/// reproducible runs can pin it.
fn now_rfc3339() -> String {
    let pinned = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse::<i64>().ok());
    let time = pinned.and_then(|s| chrono::DateTime::from_timestamp(s, 0)).unwrap_or_else(chrono::Utc::now);
    time.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn write_manifest(path: &Path, command: &str, config_path: Option<&Path>, seed: u64, out_dir: &Path, hash: String) -> CliResult<()> {
    let manifest = RunManifest {
        command: command.into(),
        config_path: config_path.map(Path::to_path_buf),
        seed,
        out_dir: out_dir.to_path_buf(),
        created_at: now_rfc3339(),
        config_hash: hash,
    };
    bench::write_json_file(path, &manifest)?;
    Ok(())
}

fn load_config(args: &ConfigArgs) -> CliResult<SuiteConfig> {
    let cfg = match &args.config {
        Some(path) => SuiteConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?,
        None => SuiteConfig::default(),
    };
    let cfg = match args.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Creates `dir`, refusing to reuse a non-empty directory.
fn fresh_dir(dir: &Path) -> CliResult<()> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
        if entries.next().is_some() {
            return Err(Failure::Usage(format!("{} already exists and is not empty", dir.display())));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    Ok(())
}

/// Refuses to overwrite an existing output file.
fn fresh_file(path: &Path) -> CliResult<()> {
    if path.exists() {
        return Err(Failure::Usage(format!("{} already exists", path.display())));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

/// Parses `argv` (including the program name), runs the command, and
/// returns the process exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `hide-forge --help` for usage");
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Compose(a) => compose(a),
        Command::Eval(a) => eval(a),
        Command::Cka(a) => cka(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    }
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    fresh_dir(&a.out)?;
    let seed = cfg.suite.seed;
    write_manifest(&a.out.join(MANIFEST_FILE), "gen-data", a.config.config.as_deref(), seed, &a.out, cfg.hash())?;
    let suite = generate_suite(&cfg)?;
    suite.write(&a.out, seed)?;
    eprintln!(
        "wrote {} tasks to {} (max checked anchor similarity {:.3})",
        suite.tasks.len(),
        a.out.display(),
        suite.separability.max_checked
    );
    Ok(())
}

fn train(a: TrainArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let seed = cfg.suite.seed;
    let suite = load_suite(&a.data, &cfg)?;
    fresh_dir(&a.out)?;
    write_manifest(&a.out.join(MANIFEST_FILE), "train", a.config.config.as_deref(), seed, &a.out, cfg.hash())?;
    let start = build_start(&cfg, &suite)?;
    for (round, log) in start.pretraining.iter().enumerate() {
        let (first, last) = log.endpoints(10);
        eprintln!("pretraining round {}: loss {first:.4} -> {last:.4}", round + 1);
    }
    let mut state = start.state(&cfg, a.mode)?;
    let mut logs = Vec::with_capacity(suite.tasks.len());
    for (stage, task) in suite.tasks.iter().enumerate() {
        let name = &task.recipe.spec.name;
        let log = state.learn_task(name, &task.train).map_err(|e| Error::stage(format!("train/{name}"), seed, e))?;
        let (first, last) = log.endpoints(10);
        eprintln!("learned {name}: loss {first:.4} -> {last:.4}");
        logs.push(log);
        // Shared projector after each stage, so `eval` can rebuild every row.
        checkpoint::projector_to_file(&state.base.config, &state.projector)
            .write(&a.out.join(format!("projector.stage{}.ckpt", stage + 1)))?;
    }
    checkpoint::save_state(&state, &a.out)?;
    bench::write_json_file(&a.out.join("training.json"), &logs)?;
    Ok(())
}

fn compose(a: ComposeArgs) -> CliResult<()> {
    let state = checkpoint::load_state(&a.state)?;
    let samples = bench::read_jsonl(&a.input)?;
    let sample = samples.get(a.index).ok_or_else(|| {
        Failure::Usage(format!("{} has {} samples, index {} requested", a.input.display(), samples.len(), a.index))
    })?;
    sample.validate(&state.base.config)?;
    if a.strategy.training_mode() != state.mode {
        return Err(Error::Contract(format!("strategy {} needs a {} state", a.strategy, a.strategy.training_mode().as_str())).into());
    }
    fresh_file(&a.out)?;
    write_manifest(&sidecar(&a.out), "compose", None, state.seed, &a.out, String::new())?;
    let plan = InferencePlan::build(&state, a.strategy, &PlanOptions::from_state(&state))?;
    let label = if a.strategy.requires_label() {
        Some(plan.task_position(&sample.task).ok_or_else(|| {
            Error::Contract(format!("sample task `{}` is not learned by this state", sample.task))
        })?)
    } else {
        None
    };
    let (projector, composed) = plan.compose(&sample.visual, &sample.instruction, label)?;
    let mut file = checkpoint::composed_to_file(&state.base.config, &composed, &projector);
    file.meta.insert("sample".into(), sample.id.clone());
    file.write(&a.out)?;
    Ok(())
}

/// The state as it stood after `stage` tasks, using the projector snapshot
/// saved by `train` when present.
fn stage_state(full: &ContinualState, dir: &Path, stage: usize) -> CliResult<ContinualState> {
    let snapshot = dir.join(format!("projector.stage{stage}.ckpt"));
    let projector = if stage < full.num_tasks() && snapshot.exists() {
        checkpoint::projector_from_file(&TensorFile::read(&snapshot)?)?
    } else {
        (*full.projector).clone()
    };
    let mut state =
        ContinualState::new(full.base.clone(), full.encoder.clone(), projector, full.mode, full.train.clone(), full.seed)?;
    state.router = full.router.clone();
    state.fusion_coefficient = full.fusion_coefficient;
    for task in &full.tasks()[..stage] {
        state.push_task(task.clone())?;
    }
    Ok(state)
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let seed = cfg.suite.seed;
    let suite = load_suite(&a.data, &cfg)?;
    let full = checkpoint::load_state(&a.state)?;
    if full.num_tasks() == 0 {
        return Err(Error::Contract("the state has no learned tasks".into()).into());
    }
    let strategies: Vec<Strategy> = if a.strategies.is_empty() {
        Strategy::ALL.into_iter().filter(|s| s.training_mode() == full.mode).collect()
    } else {
        a.strategies.clone()
    };
    if let Some(s) = strategies.iter().find(|s| s.training_mode() != full.mode) {
        return Err(Error::Contract(format!("strategy {s} needs a {} state", s.training_mode().as_str())).into());
    }
    let names: Vec<String> = full.tasks().iter().map(|t| t.anchor.task.clone()).collect();
    let tests = names
        .iter()
        .map(|n| {
            suite
                .task(n)
                .map(|t| t.test.as_slice())
                .ok_or_else(|| Error::Contract(format!("no test set for learned task `{n}`")))
        })
        .collect::<crate::Result<Vec<&[Sample]>>>()?;
    fresh_dir(&a.out)?;
    write_manifest(&a.out.join(MANIFEST_FILE), "eval", a.config.config.as_deref(), seed, &a.out, cfg.hash())?;

    let stages = (1..=full.num_tasks()).map(|t| stage_state(&full, &a.state, t)).collect::<CliResult<Vec<_>>>()?;
    for strategy in strategies {
        let mut matrix = AccuracyMatrix::default();
        let mut routing = Vec::new();
        for (t, state) in stages.iter().enumerate() {
            let plan = InferencePlan::build(state, strategy, &PlanOptions::from_state(state))?;
            let sets: Vec<(&str, &[Sample])> = names[..=t].iter().map(String::as_str).zip(tests.iter().copied()).collect();
            let row = evaluate(&state.base, &plan, &sets)?;
            matrix.push_row(row.accuracy)?;
            routing.extend(row.routing_accuracy);
        }
        let report = MetricsReport {
            config_hash: cfg.hash(),
            seed,
            strategy,
            sweep: "default".into(),
            tasks: names.clone(),
            metrics: metrics(&matrix)?,
            accuracy_matrix: matrix,
            routing_accuracy: (!routing.is_empty()).then_some(routing),
            config: cfg.clone(),
        };
        bench::write_json_file(&a.out.join(format!("{strategy}.json")), &report)?;
        eprintln!("{strategy}: last {:.2} avg {:.2}", report.metrics.last_mean, report.metrics.avg_mean);
    }
    Ok(())
}

fn single_task_state(dir: &Path, task: &Path) -> CliResult<(ContinualState, String)> {
    let mut state = checkpoint::load_state(dir)?;
    let learned = checkpoint::task_from_file(&TensorFile::read(task)?)?;
    let name = learned.adapters.task.clone();
    let mut fresh = ContinualState::new(
        state.base.clone(),
        state.encoder.clone(),
        learned.projector.as_deref().cloned().unwrap_or_else(|| (*state.projector).clone()),
        TrainingMode::PerTask,
        state.train.clone(),
        state.seed,
    )?;
    fresh.push_task(learned)?;
    std::mem::swap(&mut state, &mut fresh);
    Ok((state, name))
}

fn cka(a: CkaArgs) -> CliResult<()> {
    let (left, left_name) = single_task_state(&a.state, &a.left)?;
    let (right, right_name) = single_task_state(&a.state, &a.right)?;
    if left.base.config != right.base.config {
        return Err(Error::Contract("checkpoints belong to different models".into()).into());
    }
    // Take an equal share from each file so every source is represented.
    let per_file = a.probe_size.div_ceil(a.probes.len());
    let mut chosen: Vec<Sample> = Vec::with_capacity(a.probe_size);
    for path in &a.probes {
        chosen.extend(bench::read_jsonl(path)?.into_iter().take(per_file));
    }
    chosen.truncate(a.probe_size);
    if chosen.len() < 2 {
        return Err(Error::Contract("CKA needs at least two probe samples".into()).into());
    }
    fresh_file(&a.out)?;
    write_manifest(&sidecar(&a.out), "cka", None, left.seed, &a.out, String::new())?;
    let values = layerwise_scan(
        &left.base,
        &InferencePlan::single_task(&left, 0)?,
        &InferencePlan::single_task(&right, 0)?,
        &chosen,
        crate::model::Readout::default(),
    )?;
    write_cka_csv(&a.out, &[CkaRow { pair: format!("{left_name}-{right_name}"), values }])?;
    Ok(())
}

/// `<parent>/run-<UTC timestamp>-seed<seed>`, suffixed when the name is taken.
fn new_run_dir(parent: &Path, seed: u64) -> CliResult<PathBuf> {
    std::fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    for k in 0.. {
        let name = if k == 0 { format!("run-{stamp}-seed{seed}") } else { format!("run-{stamp}-seed{seed}-{k}") };
        let dir = parent.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(format!("creating {}", dir.display()), e).into()),
        }
    }
    unreachable!("the suffix search is unbounded")
}

fn sweep(a: SweepArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let seed = cfg.suite.seed;
    let suite: Option<LoadedSuite> = a.data.as_ref().map(|d| load_suite(d, &cfg)).transpose()?;
    let run_dir = new_run_dir(&a.out, seed)?;
    write_manifest(&run_dir.join(MANIFEST_FILE), "sweep", a.config.config.as_deref(), seed, &run_dir, cfg.hash())?;
    let suite = match suite {
        Some(s) => s,
        None => {
            let generated = generate_suite(&cfg).map_err(|e| Error::stage("gen-data", seed, e))?;
            generated.write(&run_dir.join("data"), seed)?;
            LoadedSuite::from(generated)
        }
    };
    let outcome = run_suite(&cfg, &suite, &run_dir)?;
    for r in &outcome.reports {
        eprintln!("{:>18} {:<22} last {:6.2} avg {:6.2}", r.strategy.as_str(), r.sweep, r.metrics.last_mean, r.metrics.avg_mean);
    }
    // The run directory is the one thing scripts need; print it on stdout.
    println!("{}", run_dir.display());
    Ok(())
}

fn collect_reports(inputs: &[PathBuf]) -> CliResult<Vec<(PathBuf, serde_json::Value)>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let dir = if input.join("reports").is_dir() { input.join("reports") } else { input.clone() };
            let mut found: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| Error::io(format!("reading {}", dir.display()), e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            files.extend(found);
        } else if input.is_file() {
            files.push(input.clone());
        } else {
            return Err(Failure::Usage(format!("{} does not exist", input.display())));
        }
    }
    let mut out = Vec::new();
    for path in files {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
        // Only metrics reports take part; other JSON files are skipped.
        if value.get("strategy").is_some() && value.get("metrics").is_some() {
            out.push((path, value));
        }
    }
    Ok(out)
}

fn report(a: ReportArgs) -> CliResult<()> {
    let reports = collect_reports(&a.inputs)?;
    if reports.is_empty() {
        return Err(Error::Ingestion("no metrics reports found in the given inputs".into()).into());
    }
    fresh_file(&a.out)?;
    write_manifest(&sidecar(&a.out), "report", None, 0, &a.out, String::new())?;
    let mut csv = String::from("source,seed,config_hash,strategy,sweep,task,last,avg\n");
    for (path, v) in &reports {
        let field = |k: &str| v.get(k).cloned().unwrap_or(serde_json::Value::Null);
        let text = |k: &str| field(k).as_str().map(str::to_string).ok_or_else(|| bad_report(path, k));
        let seed = field("seed").as_u64().ok_or_else(|| bad_report(path, "seed"))?;
        let (hash, strategy, sweep) = (text("config_hash")?, text("strategy")?, text("sweep")?);
        let m = field("metrics");
        let numbers = |k: &str| -> CliResult<Vec<f64>> {
            m.get(k)
                .and_then(|x| x.as_array())
                .map(|xs| xs.iter().filter_map(|x| x.as_f64()).collect())
                .ok_or_else(|| bad_report(path, k))
        };
        let (last, avg) = (numbers("last")?, numbers("avg")?);
        let tasks: Vec<String> = field("tasks")
            .as_array()
            .map(|xs| xs.iter().filter_map(|x| x.as_str().map(str::to_string)).collect())
            .ok_or_else(|| bad_report(path, "tasks"))?;
        if tasks.len() != last.len() || tasks.len() != avg.len() {
            return Err(bad_report(path, "metrics"));
        }
        let source = path.display();
        for ((task, l), g) in tasks.iter().zip(&last).zip(&avg) {
            csv.push_str(&format!("{source},{seed},{hash},{strategy},{sweep},{task},{l:.6},{g:.6}\n"));
        }
        let mean = |k: &str| m.get(k).and_then(|x| x.as_f64()).ok_or_else(|| bad_report(path, k));
        csv.push_str(&format!(
            "{source},{seed},{hash},{strategy},{sweep},mean,{:.6},{:.6}\n",
            mean("last_mean")?,
            mean("avg_mean")?
        ));
    }
    std::fs::write(&a.out, csv).map_err(|e| Error::io(format!("writing {}", a.out.display()), e))?;
    eprintln!("merged {} reports into {}", reports.len(), a.out.display());
    Ok(())
}

fn bad_report(path: &Path, field: &str) -> Failure {
    Error::Ingestion(format!("{}: missing or malformed `{field}`", path.display())).into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(dispatch(["hide-forge", "frobnicate"]), 1);
        assert_eq!(dispatch(["hide-forge", "gen-data"]), 1);
        assert_eq!(dispatch(["hide-forge", "eval", "--strategy", "hyde"]), 1);
    }

    #[test]
    fn help_exits_with_zero() {
        assert_eq!(dispatch(["hide-forge", "--help"]), 0);
    }

    #[test]
    fn sidecar_names() {
        assert_eq!(sidecar(Path::new("out/cka.csv")), PathBuf::from("out/cka.csv.manifest.json"));
    }

    #[test]
    fn pinned_timestamp() {
        // Only exercised through the formatter: the env var is process wide.
        let t = chrono::DateTime::from_timestamp(0, 0).unwrap();
        assert_eq!(t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true), "1970-01-01T00:00:00Z");
    }
}
