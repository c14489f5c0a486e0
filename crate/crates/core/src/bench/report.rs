use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::SuiteConfig;
use crate::continual::{AccuracyMatrix, Metrics, Strategy};
use crate::error::{Error, Result};

/// One (strategy, sweep point) result: the JSON document written per run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seed: u64,
    pub strategy: Strategy,
    pub sweep: String,
    pub tasks: Vec<String>,
    pub accuracy_matrix: AccuracyMatrix,
    pub metrics: Metrics,
    /// Routing accuracy (percent) per stage and seen task, for routed plans.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub routing_accuracy: Option<Vec<Vec<f64>>>,
    pub config: SuiteConfig,
}

impl MetricsReport {
    /// CSV flattening: one line per matrix entry.
    pub fn csv_rows(&self, out: &mut String) {
        for (t, row) in self.accuracy_matrix.rows().iter().enumerate() {
            for (j, acc) in row.iter().enumerate() {
                let _ = writeln!(out, "{},{},{t},{},{acc:.6}", self.strategy, self.sweep, self.tasks[j]);
            }
        }
    }
}

/// Loaded parameters of one block under one strategy after `num_tasks` tasks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterRow {
    pub strategy: Strategy,
    pub num_tasks: usize,
    pub block: usize,
    pub kind: String,
    pub adapter_modules: usize,
    pub adapter_equivalent_parameters: usize,
    pub materialized_parameters: usize,
}

/// Routing accuracy of one mode on one task after the final stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingRow {
    pub mode: String,
    pub task: String,
    pub accuracy: f64,
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    std::fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub(crate) const METRICS_CSV_HEADER: &str = "strategy,sweep,stage,task,accuracy\n";

/// `strategy,sweep,config_hash,last_mean,avg_mean` per report, in the order given.
pub fn write_summary_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut out = String::from("strategy,sweep,config_hash,last_mean,avg_mean\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6}",
            r.strategy, r.sweep, r.config_hash, r.metrics.last_mean, r.metrics.avg_mean
        );
    }
    write_text(path, &out)
}

pub(crate) fn parameter_csv(rows: &[ParameterRow]) -> String {
    let mut out = String::from(
        "strategy,num_tasks,block,kind,adapter_modules,adapter_equivalent_parameters,materialized_parameters\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.strategy,
            r.num_tasks,
            r.block,
            r.kind,
            r.adapter_modules,
            r.adapter_equivalent_parameters,
            r.materialized_parameters
        );
    }
    out
}

pub(crate) fn routing_csv(rows: &[RoutingRow]) -> String {
    let mut out = String::from("mode,task,accuracy\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.6}", r.mode, r.task, r.accuracy);
    }
    out
}
