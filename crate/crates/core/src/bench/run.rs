use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use super::report::{parameter_csv, routing_csv, write_json, write_text, METRICS_CSV_HEADER};
use super::{pretext_recipes, write_summary_csv, LoadedSuite, MetricsReport, ParameterRow, RoutingRow, SuiteConfig};
use crate::anchors::{FrozenEncoder, RoutingMode};
use crate::cka::{layerwise_scan, write_cka_csv, CkaRow};
use crate::continual::{
    evaluate, metrics, AccuracyMatrix, ContinualState, InferencePlan, Metrics, PlanOptions, Strategy, TrainingLog,
    TrainingMode,
};
use crate::error::{Error, Result};
use crate::model::{BaseModel, Projector, Sample};
use crate::numerics::{derive_seed, SeededRng};

/// The frozen base, frozen encoder, and initial projector of a seed.
#[derive(Debug, Clone)]
pub struct Start {
    pub base: Arc<BaseModel>,
    pub encoder: Arc<FrozenEncoder>,
    pub projector: Projector,
    /// One log per pretraining round.
    pub pretraining: Vec<TrainingLog>,
}

fn seeded_base(cfg: &SuiteConfig) -> Result<BaseModel> {
    BaseModel::seeded(cfg.model.clone(), derive_seed(cfg.suite.seed, "base"))
}

/// The seed's frozen anchor encoder. It reads the embeddings of the base
/// as seeded, so pretraining never changes it.
pub fn frozen_encoder(cfg: &SuiteConfig) -> Result<FrozenEncoder> {
    let base = seeded_base(cfg)?;
    Ok(FrozenEncoder::seeded(&base, cfg.suite.feature_dim, derive_seed(cfg.suite.seed, "encoder")))
}

/// Seeds the base, encoder and projector, then pretrains the base on the
/// suite's pretext as configured.
pub fn build_start(cfg: &SuiteConfig, suite: &LoadedSuite) -> Result<Start> {
    let seed = cfg.suite.seed;
    let base = Arc::new(seeded_base(cfg)?);
    let encoder = Arc::new(FrozenEncoder::seeded(&base, cfg.suite.feature_dim, derive_seed(seed, "encoder")));
    let projector = Projector::seeded(&cfg.model, derive_seed(seed, "projector"));
    let start = Start { base, encoder, projector, pretraining: Vec::new() };
    pretrain(cfg, start, suite).map_err(|e| Error::stage("pretrain", seed, e))
}

/// Runs `pretrain.rounds` rounds: each learns a fresh adapter set (and the
/// projector) on pretext samples, then folds the adapters into the base.
/// The encoder stays as seeded.
pub fn pretrain(cfg: &SuiteConfig, mut start: Start, suite: &LoadedSuite) -> Result<Start> {
    let mut pretext_cfg = cfg.clone();
    pretext_cfg.train.lr_lora = cfg.pretrain.lr_lora;
    pretext_cfg.train.lr_projector = cfg.pretrain.lr_projector;
    for round in 0..cfg.pretrain.rounds {
        let mut rng = SeededRng::derived(cfg.suite.seed, &format!("pretrain/{round}"));
        let recipes = pretext_recipes(cfg, &suite.tasks, &mut rng)?;
        let samples: Vec<Sample> = (0..cfg.pretrain.samples)
            .map(|i| recipes[i % recipes.len()].sample(format!("pretext-{round}-{i}"), &mut rng))
            .collect();
        let mut state = start.state(&pretext_cfg, TrainingMode::PerTask)?;
        let log = state.learn_task("pretext", &samples)?;
        start.base = Arc::new(start.base.absorb(&state.tasks()[0].adapters)?);
        start.projector = (*state.projector).clone();
        start.pretraining.push(log);
    }
    Ok(start)
}

impl Start {
    pub fn state(&self, cfg: &SuiteConfig, mode: TrainingMode) -> Result<ContinualState> {
        let mut state = ContinualState::new(
            self.base.clone(),
            self.encoder.clone(),
            self.projector.clone(),
            mode,
            cfg.train.clone(),
            cfg.suite.seed,
        )?;
        state.router = cfg.router.clone();
        state.fusion_coefficient = cfg.fusion.coefficient;
        Ok(state)
    }
}

/// An inference-time setting evaluated on the same trained tasks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepPoint {
    Default,
    Fusion(f64),
    Temperature(f64),
    Routing(RoutingMode),
}

impl SweepPoint {
    pub fn label(&self) -> String {
        match self {
            SweepPoint::Default => "default".into(),
            SweepPoint::Fusion(e) => format!("fusion={e}"),
            SweepPoint::Temperature(t) => format!("temperature={t}"),
            SweepPoint::Routing(m) => format!("routing={}", m.as_str()),
        }
    }

    pub fn options(&self, state: &ContinualState) -> PlanOptions {
        let mut o = PlanOptions::from_state(state);
        match *self {
            SweepPoint::Default => {}
            SweepPoint::Fusion(e) => o.fusion_coefficient = e,
            SweepPoint::Temperature(t) => o.router.temperature = t,
            SweepPoint::Routing(m) => o.routing_mode = m,
        }
        o
    }
}

/// Accuracy matrix and routing log of one (strategy, sweep point).
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyRun {
    pub strategy: Strategy,
    pub sweep: SweepPoint,
    pub matrix: AccuracyMatrix,
    pub metrics: Metrics,
    pub routing: Option<Vec<Vec<f64>>>,
}

/// A sequence of learned tasks with every requested evaluation after
/// every stage.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub state: ContinualState,
    pub order: Vec<String>,
    pub logs: Vec<TrainingLog>,
    pub runs: Vec<StrategyRun>,
    pub parameters: Vec<ParameterRow>,
    pub stage_seconds: Vec<(String, f64)>,
}

impl TrainedRun {
    pub fn find(&self, strategy: Strategy, sweep: SweepPoint) -> Option<&StrategyRun> {
        self.runs.iter().find(|r| r.strategy == strategy && r.sweep == sweep)
    }
}

/// Learns `order` (indices into the suite) one task at a time and, after
/// each stage, evaluates every `(strategy, sweep point)` on all seen tasks.
pub fn train_and_evaluate(
    cfg: &SuiteConfig,
    start: &Start,
    suite: &LoadedSuite,
    order: &[usize],
    mode: TrainingMode,
    evaluations: &[(Strategy, SweepPoint)],
) -> Result<TrainedRun> {
    let seed = cfg.suite.seed;
    if let Some((s, _)) = evaluations.iter().find(|(s, _)| s.training_mode() != mode) {
        return Err(Error::Contract(format!("strategy {s} cannot be evaluated on a {} run", mode.as_str())));
    }
    let mut state = start.state(cfg, mode)?;
    let mut matrices: Vec<AccuracyMatrix> = vec![AccuracyMatrix::default(); evaluations.len()];
    let mut routing: Vec<Vec<Vec<f64>>> = vec![Vec::new(); evaluations.len()];
    let mut logs = Vec::with_capacity(order.len());
    let mut parameters = Vec::new();
    let mut stage_seconds = Vec::new();
    let names: Vec<String> = order.iter().map(|&i| suite.tasks[i].recipe.spec.name.clone()).collect();

    for (stage, &index) in order.iter().enumerate() {
        let task = &suite.tasks[index];
        let name = &task.recipe.spec.name;
        let clock = Instant::now();
        let stage_name = format!("{}/train/{name}", mode.as_str());
        logs.push(state.learn_task(name, &task.train).map_err(|e| Error::stage(&stage_name, seed, e))?);
        stage_seconds.push((stage_name, clock.elapsed().as_secs_f64()));

        let clock = Instant::now();
        let stage_name = format!("{}/eval/{name}", mode.as_str());
        let test_sets: Vec<(&str, &[Sample])> =
            order[..=stage].iter().map(|&i| (suite.tasks[i].recipe.spec.name.as_str(), suite.tasks[i].test.as_slice())).collect();
        for (k, (strategy, sweep)) in evaluations.iter().enumerate() {
            let plan = InferencePlan::build(&state, *strategy, &sweep.options(&state))
                .map_err(|e| Error::stage(&stage_name, seed, e))?;
            let row = evaluate(&state.base, &plan, &test_sets).map_err(|e| Error::stage(&stage_name, seed, e))?;
            matrices[k].push_row(row.accuracy)?;
            if let Some(r) = row.routing_accuracy {
                routing[k].push(r);
            }
            if *sweep == SweepPoint::Default {
                for count in plan.parameter_counts()? {
                    parameters.push(ParameterRow {
                        strategy: *strategy,
                        num_tasks: stage + 1,
                        block: count.block,
                        kind: count.kind.to_string(),
                        adapter_modules: count.adapter_modules,
                        adapter_equivalent_parameters: count.adapter_equivalent_parameters,
                        materialized_parameters: count.materialized_parameters,
                    });
                }
            }
        }
        stage_seconds.push((stage_name, clock.elapsed().as_secs_f64()));
    }

    let runs = evaluations
        .iter()
        .zip(matrices)
        .zip(routing)
        .map(|((&(strategy, sweep), matrix), routing)| {
            Ok(StrategyRun {
                strategy,
                sweep,
                metrics: metrics(&matrix)?,
                matrix,
                routing: (!routing.is_empty()).then_some(routing),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainedRun { state, order: names, logs, runs, parameters, stage_seconds })
}

/// HiDe's metrics under one task order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderRow {
    pub order: Vec<String>,
    pub last_mean: f64,
    pub avg_mean: f64,
    /// Final-stage accuracy per task, in suite order.
    pub last_by_task: Vec<(String, f64)>,
}

/// Everything a suite run produced, as written to the reports directory.
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub reports: Vec<MetricsReport>,
    pub cka: Vec<CkaRow>,
    pub parameters: Vec<ParameterRow>,
    pub routing: Vec<RoutingRow>,
    pub orders: Vec<OrderRow>,
    pub per_task: TrainedRun,
    pub sequential: Option<TrainedRun>,
}

impl SuiteOutcome {
    pub fn report(&self, strategy: Strategy, sweep: &str) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.strategy == strategy && r.sweep == sweep)
    }
}

fn evaluations(cfg: &SuiteConfig) -> Vec<(Strategy, SweepPoint)> {
    let mut out: Vec<(Strategy, SweepPoint)> = cfg
        .eval
        .strategies
        .iter()
        .filter(|s| s.training_mode() == TrainingMode::PerTask)
        .map(|&s| (s, SweepPoint::Default))
        .collect();
    let sweeps = cfg
        .sweep
        .fusion
        .iter()
        .map(|&e| SweepPoint::Fusion(e))
        .chain(cfg.sweep.temperature.iter().map(|&t| SweepPoint::Temperature(t)))
        .chain(cfg.sweep.routing_modes.iter().map(|&m| SweepPoint::Routing(m)));
    for point in sweeps {
        out.push((Strategy::HiDe, point));
    }
    out
}

/// Seeded task orders; the configured order comes first.
fn task_orders(n: usize, count: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut orders = vec![(0..n).collect::<Vec<_>>()];
    let mut rng = SeededRng::derived(seed, "suite/orders");
    let distinct_orders: usize = (1..=n).product();
    while orders.len() < count.min(distinct_orders) {
        let mut o: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut o);
        if !orders.contains(&o) {
            orders.push(o);
        }
    }
    orders.truncate(count.max(1));
    orders
}

fn probe_pair(a: &[Sample], b: &[Sample], size: usize) -> Vec<Sample> {
    let half = size / 2;
    a.iter().take(half).chain(b.iter().take(size - half.min(a.len()))).cloned().collect()
}

/// CKA at every block between consecutive tasks' single-task models.
pub fn consecutive_cka(cfg: &SuiteConfig, run: &TrainedRun, suite: &LoadedSuite) -> Result<Vec<CkaRow>> {
    let state = &run.state;
    let mut rows = Vec::new();
    for t in 0..state.num_tasks().saturating_sub(1) {
        let (na, nb) = (&run.order[t], &run.order[t + 1]);
        let a = suite.task(na).expect("ordered task exists");
        let b = suite.task(nb).expect("ordered task exists");
        let probe = probe_pair(&a.test, &b.test, cfg.cka.probe_size);
        let values = layerwise_scan(
            &state.base,
            &InferencePlan::single_task(state, t)?,
            &InferencePlan::single_task(state, t + 1)?,
            &probe,
            cfg.cka.readout,
        )?;
        rows.push(CkaRow { pair: format!("{na}-{nb}"), values });
    }
    Ok(rows)
}

/// Runs the whole benchmark and writes every artifact under `run_dir`.
/// Report files (everything in `reports/`) depend only on the config and
/// the suite; wall-clock timings go to `timings.json` beside them.
pub fn run_suite(cfg: &SuiteConfig, suite: &LoadedSuite, run_dir: &Path) -> Result<SuiteOutcome> {
    cfg.validate()?;
    let seed = cfg.suite.seed;
    let reports_dir = run_dir.join("reports");
    std::fs::create_dir_all(&reports_dir).map_err(|e| Error::io(format!("creating {}", reports_dir.display()), e))?;
    write_text(&run_dir.join("config.toml"), &cfg.to_toml())?;
    let hash = cfg.hash();
    let start = build_start(cfg, suite)?;
    let n = suite.tasks.len();
    let identity: Vec<usize> = (0..n).collect();

    let per_task = train_and_evaluate(cfg, &start, suite, &identity, TrainingMode::PerTask, &evaluations(cfg))?;
    let sequential = if cfg.eval.strategies.contains(&Strategy::SeqFinetune) {
        let evals = [(Strategy::SeqFinetune, SweepPoint::Default)];
        Some(train_and_evaluate(cfg, &start, suite, &identity, TrainingMode::Sequential, &evals)?)
    } else {
        None
    };

    let mut reports = Vec::new();
    for run in per_task.runs.iter().chain(sequential.iter().flat_map(|s| s.runs.iter())) {
        reports.push(MetricsReport {
            config_hash: hash.clone(),
            seed,
            strategy: run.strategy,
            sweep: run.sweep.label(),
            tasks: per_task.order.clone(),
            accuracy_matrix: run.matrix.clone(),
            metrics: run.metrics.clone(),
            routing_accuracy: run.routing.clone(),
            config: cfg.clone(),
        });
    }

    let cka = consecutive_cka(cfg, &per_task, suite).map_err(|e| Error::stage("cka", seed, e))?;

    let mut routing = Vec::new();
    for run in per_task.runs.iter().filter(|r| r.strategy == Strategy::HiDe) {
        let mode = match run.sweep {
            SweepPoint::Default => None,
            SweepPoint::Routing(m) => Some(m),
            _ => continue,
        };
        let mode = mode.map_or_else(|| "default".to_string(), |m| m.as_str().to_string());
        if let Some(last) = run.routing.as_ref().and_then(|r| r.last()) {
            for (task, acc) in per_task.order.iter().zip(last) {
                routing.push(RoutingRow { mode: mode.clone(), task: task.clone(), accuracy: *acc });
            }
        }
    }

    let mut orders = Vec::new();
    let mut order_seconds = Vec::new();
    for order in task_orders(n, cfg.sweep.order_permutations, seed) {
        let names: Vec<String> = order.iter().map(|&i| suite.tasks[i].recipe.spec.name.clone()).collect();
        let hide = if order == identity {
            per_task.find(Strategy::HiDe, SweepPoint::Default).cloned()
        } else if cfg.eval.strategies.contains(&Strategy::HiDe) {
            let run = train_and_evaluate(cfg, &start, suite, &order, TrainingMode::PerTask, &[(Strategy::HiDe, SweepPoint::Default)])?;
            order_seconds.extend(run.stage_seconds.iter().map(|(s, t)| (format!("order[{}]/{s}", names.join(">")), *t)));
            run.runs.into_iter().next()
        } else {
            None
        };
        if let Some(hide) = hide {
            let mut last_by_task: Vec<(String, f64)> = names.iter().cloned().zip(hide.metrics.last.iter().copied()).collect();
            let rank = |name: &str| suite.tasks.iter().position(|t| t.recipe.spec.name == name);
            last_by_task.sort_by_key(|(name, _)| rank(name));
            orders.push(OrderRow { order: names, last_mean: hide.metrics.last_mean, avg_mean: hide.metrics.avg_mean, last_by_task });
        }
    }

    let mut parameters = per_task.parameters.clone();
    if let Some(s) = &sequential {
        parameters.extend(s.parameters.iter().cloned());
    }

    // reports
    let mut metrics_csv = String::from(METRICS_CSV_HEADER);
    for r in &reports {
        let stem = format!("{}__{}", r.strategy, sweep_stem(&r.sweep));
        write_json(&reports_dir.join(format!("{stem}.json")), r)?;
        r.csv_rows(&mut metrics_csv);
    }
    write_text(&reports_dir.join("metrics.csv"), &metrics_csv)?;
    write_summary_csv(&reports_dir.join("summary.csv"), &reports)?;
    write_cka_csv(&reports_dir.join("cka.csv"), &cka)?;
    write_json(&reports_dir.join("parameters.json"), &Provenanced::new(&hash, seed, &parameters))?;
    write_text(&reports_dir.join("parameters.csv"), &parameter_csv(&parameters))?;
    write_json(&reports_dir.join("routing.json"), &Provenanced::new(&hash, seed, &routing))?;
    write_text(&reports_dir.join("routing.csv"), &routing_csv(&routing))?;
    write_json(&reports_dir.join("orders.json"), &Provenanced::new(&hash, seed, &orders))?;
    write_text(&reports_dir.join("orders.csv"), &orders_csv(&orders))?;
    write_json(&reports_dir.join("separability.json"), &Provenanced::new(&hash, seed, &suite.separability))?;
    let training: Vec<&TrainingLog> = per_task.logs.iter().chain(sequential.iter().flat_map(|s| s.logs.iter())).collect();
    write_json(&reports_dir.join("training.json"), &Provenanced::new(&hash, seed, &training))?;
    write_json(&reports_dir.join("pretraining.json"), &Provenanced::new(&hash, seed, &start.pretraining))?;
    let cka_json: Vec<(&str, &[f64])> = cka.iter().map(|r| (r.pair.as_str(), r.values.as_slice())).collect();
    write_json(&reports_dir.join("cka.json"), &Provenanced::new(&hash, seed, &cka_json))?;

    // Final per-task state, loadable by `eval`, `compose` and `cka`.
    crate::checkpoint::save_state(&per_task.state, &run_dir.join("state"))?;

    let mut timings: Vec<(String, f64)> = per_task.stage_seconds.clone();
    if let Some(s) = &sequential {
        timings.extend(s.stage_seconds.iter().cloned());
    }
    timings.extend(order_seconds);
    write_json(&run_dir.join("timings.json"), &timings)?;

    Ok(SuiteOutcome { reports, cka, parameters, routing, orders, per_task, sequential })
}

fn sweep_stem(label: &str) -> String {
    label.replace('=', "-")
}

fn orders_csv(rows: &[OrderRow]) -> String {
    let mut out = String::from("order,last_mean,avg_mean\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{:.6}", r.order.join(">"), r.last_mean, r.avg_mean);
    }
    out
}

/// Wraps a report body with the config hash and seed it came from.
#[derive(Serialize)]
struct Provenanced<'a, T: Serialize> {
    config_hash: &'a str,
    seed: u64,
    data: &'a T,
}

impl<'a, T: Serialize> Provenanced<'a, T> {
    fn new(config_hash: &'a str, seed: u64, data: &'a T) -> Self {
        Self { config_hash, seed, data }
    }
}
