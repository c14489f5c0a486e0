//! Sequential task learning, inference-time adapter composition, greedy
//! evaluation, and forgetting metrics.

mod eval;
mod plan;
mod train;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use eval::{evaluate, greedy_decode, metrics, AccuracyMatrix, Metrics};
pub use plan::{compose, InferencePlan, PlanOptions};
pub use train::{AdamState, LrSchedule, ProjectorPolicy, TrainConfig, TrainingLog};

use crate::adapters::TaskAdapterSet;
use crate::anchors::{FrozenEncoder, RouterConfig, TaskAnchor};
use crate::error::{Error, Result};
use crate::model::{BaseModel, Projector};

/// How adapters are arranged at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Similarity-weighted expert mixture at the top block, fused deltas below.
    #[serde(rename = "hide")]
    HiDe,
    /// The true task's adapters at every block.
    CorrespondingAll,
    /// The true task's adapters at the top block, fused deltas below.
    OracleTop,
    /// Fused deltas at every block.
    MergeAll,
    /// A different task's adapters at the top block, fused deltas below.
    WrongTop,
    /// One adapter set fine-tuned across all tasks in sequence.
    SeqFinetune,
    /// Similarity-weighted mixtures at every block.
    ExpandAll,
    /// Mixtures below the top block, a fused delta at the top.
    ExpandRemaining,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::HiDe,
        Strategy::CorrespondingAll,
        Strategy::OracleTop,
        Strategy::MergeAll,
        Strategy::WrongTop,
        Strategy::SeqFinetune,
        Strategy::ExpandAll,
        Strategy::ExpandRemaining,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::HiDe => "hide",
            Strategy::CorrespondingAll => "corresponding-all",
            Strategy::OracleTop => "oracle-top",
            Strategy::MergeAll => "merge-all",
            Strategy::WrongTop => "wrong-top",
            Strategy::SeqFinetune => "seq-finetune",
            Strategy::ExpandAll => "expand-all",
            Strategy::ExpandRemaining => "expand-remaining",
        }
    }

    /// Oracle strategies read ground-truth task labels and exist only for
    /// the benchmark harness.
    pub fn requires_label(self) -> bool {
        matches!(self, Strategy::CorrespondingAll | Strategy::OracleTop | Strategy::WrongTop)
    }

    pub fn training_mode(self) -> TrainingMode {
        match self {
            Strategy::SeqFinetune => TrainingMode::Sequential,
            _ => TrainingMode::PerTask,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// Whether each task trains a fresh adapter set or continues one shared set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingMode {
    #[default]
    PerTask,
    Sequential,
}

impl TrainingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainingMode::PerTask => "per-task",
            TrainingMode::Sequential => "sequential",
        }
    }
}

/// Everything learned for one task.
#[derive(Debug, Clone)]
pub struct LearnedTask {
    pub adapters: Arc<TaskAdapterSet>,
    pub anchor: TaskAnchor,
    /// Projector after this task, kept under [`ProjectorPolicy::PerTask`].
    pub projector: Option<Arc<Projector>>,
}

/// The ordered record of tasks learned so far. Append-only.
#[derive(Debug, Clone)]
pub struct ContinualState {
    pub base: Arc<BaseModel>,
    pub encoder: Arc<FrozenEncoder>,
    /// The shared projector, fine-tuned by every task.
    pub projector: Arc<Projector>,
    tasks: Vec<LearnedTask>,
    pub router: RouterConfig,
    pub fusion_coefficient: f64,
    pub mode: TrainingMode,
    pub train: TrainConfig,
    pub seed: u64,
}

impl ContinualState {
    pub fn new(
        base: Arc<BaseModel>,
        encoder: Arc<FrozenEncoder>,
        projector: Projector,
        mode: TrainingMode,
        train: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        projector.check(&base.config)?;
        train.validate()?;
        Ok(Self {
            base,
            encoder,
            projector: Arc::new(projector),
            tasks: Vec::new(),
            router: RouterConfig::default(),
            fusion_coefficient: 1.0,
            mode,
            train,
            seed,
        })
    }

    pub fn tasks(&self) -> &[LearnedTask] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn anchors(&self) -> Vec<TaskAnchor> {
        self.tasks.iter().map(|t| t.anchor.clone()).collect()
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.anchor.task == name)
    }

    /// Appends a task restored from a checkpoint.
    pub fn push_task(&mut self, task: LearnedTask) -> Result<()> {
        task.adapters.check(&self.base.config)?;
        if task.adapters.task != task.anchor.task {
            return Err(Error::Config(format!(
                "adapter set for `{}` paired with anchor for `{}`",
                task.adapters.task, task.anchor.task
            )));
        }
        self.tasks.push(task);
        Ok(())
    }

    /// ε for each learned task.
    pub fn fusion_coefficients(&self) -> Vec<f64> {
        vec![self.fusion_coefficient; self.tasks.len()]
    }
}
