use std::sync::Arc;

use super::{ContinualState, Strategy};
use crate::adapters::{merge_adapters, BlockAdapters, BlockParameterCount, ComposedAdapters, MergedDelta, Site, TaskAdapterSet};
use crate::anchors::{score_tasks, FrozenEncoder, RouterConfig, Routing, RoutingMode, TaskAnchor};
use crate::error::{Error, Result};
use crate::model::{forward_prompt, BaseModel, Projector, Sample};
use crate::numerics::{argmax, Matrix};

/// Inference-time knobs swept by the benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanOptions {
    pub fusion_coefficient: f64,
    pub router: RouterConfig,
    pub routing_mode: RoutingMode,
}

impl PlanOptions {
    pub fn from_state(state: &ContinualState) -> Self {
        Self { fusion_coefficient: state.fusion_coefficient, router: state.router.clone(), routing_mode: RoutingMode::Dual }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum BlockPlan {
    Merged(Arc<MergedDelta>),
    Experts,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum WeightRule {
    /// Anchor similarity of the input.
    Routed,
    /// One-hot on the ground-truth task.
    TrueTask,
    /// One-hot on the task after the true one, cyclically.
    WrongTask,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone)]
pub(crate) struct RouterParts {
    pub encoder: Arc<FrozenEncoder>,
    pub anchors: Vec<TaskAnchor>,
    pub config: RouterConfig,
}

/// Strategy-specific arrangement of a state's adapters, with fused deltas
/// precomputed once. Per-input expert weights come from [`InferencePlan::compose`].
#[derive(Debug, Clone)]
pub struct InferencePlan {
    pub(crate) strategy: Strategy,
    pub(crate) blocks: Vec<BlockPlan>,
    pub(crate) experts: Vec<Arc<TaskAdapterSet>>,
    pub(crate) rule: WeightRule,
    pub(crate) router: Option<RouterParts>,
    pub(crate) projector: Arc<Projector>,
    /// Per-task projector snapshots; empty when the projector is shared.
    pub(crate) task_projectors: Vec<Arc<Projector>>,
}

impl InferencePlan {
    pub fn build(state: &ContinualState, strategy: Strategy, options: &PlanOptions) -> Result<Self> {
        let num_tasks = state.num_tasks();
        if num_tasks == 0 {
            return Err(Error::Contract("composition needs at least one learned task".into()));
        }
        let expected_mode = strategy.training_mode();
        if state.mode != expected_mode {
            return Err(Error::Contract(format!(
                "strategy {strategy} needs a {} state, got a {} state",
                expected_mode.as_str(),
                state.mode.as_str()
            )));
        }
        options.router.validate()?;
        let n_blocks = state.base.config.n_blocks;
        let top = n_blocks - 1;
        let sets: Vec<Arc<TaskAdapterSet>> = state.tasks().iter().map(|t| t.adapters.clone()).collect();

        let merged = |blocks: &[usize]| -> Result<Arc<MergedDelta>> {
            let refs: Vec<&TaskAdapterSet> = sets.iter().map(|s| s.as_ref()).collect();
            let sites: Vec<Site> = blocks.iter().flat_map(|&b| Site::in_block(b)).collect();
            let coefficients = vec![options.fusion_coefficient; refs.len()];
            Ok(Arc::new(merge_adapters(&refs, &coefficients, &sites)?))
        };
        let below: Vec<usize> = (0..top).collect();

        let (blocks, rule, experts) = match strategy {
            Strategy::HiDe | Strategy::OracleTop | Strategy::WrongTop => {
                let shared = merged(&below)?;
                let mut blocks: Vec<BlockPlan> = below.iter().map(|_| BlockPlan::Merged(shared.clone())).collect();
                blocks.push(BlockPlan::Experts);
                let rule = match strategy {
                    Strategy::HiDe => WeightRule::Routed,
                    Strategy::OracleTop => WeightRule::TrueTask,
                    _ => WeightRule::WrongTask,
                };
                (blocks, rule, sets.clone())
            }
            Strategy::MergeAll => {
                let all: Vec<usize> = (0..n_blocks).collect();
                let shared = merged(&all)?;
                (vec![BlockPlan::Merged(shared); n_blocks], WeightRule::Fixed(Vec::new()), Vec::new())
            }
            Strategy::CorrespondingAll => (vec![BlockPlan::Experts; n_blocks], WeightRule::TrueTask, sets.clone()),
            Strategy::ExpandAll => (vec![BlockPlan::Experts; n_blocks], WeightRule::Routed, sets.clone()),
            Strategy::ExpandRemaining => {
                let mut blocks = vec![BlockPlan::Experts; top];
                blocks.push(BlockPlan::Merged(merged(&[top])?));
                (blocks, WeightRule::Routed, sets.clone())
            }
            Strategy::SeqFinetune => {
                let last = sets.last().expect("at least one task").clone();
                (vec![BlockPlan::Experts; n_blocks], WeightRule::Fixed(vec![1.0]), vec![last])
            }
        };

        let router = (rule == WeightRule::Routed).then(|| RouterParts {
            encoder: state.encoder.clone(),
            anchors: state.anchors(),
            config: options.router.for_mode(options.routing_mode),
        });
        let task_projectors: Vec<Arc<Projector>> = state.tasks().iter().filter_map(|t| t.projector.clone()).collect();
        let task_projectors = if task_projectors.len() == num_tasks { task_projectors } else { Vec::new() };
        Ok(Self { strategy, blocks, experts, rule, router, projector: state.projector.clone(), task_projectors })
    }

    /// One learned task's adapters at every block, with no routing or
    /// fusion: the single-task fine-tuned model used by layer analyses.
    pub fn single_task(state: &ContinualState, task: usize) -> Result<Self> {
        let learned = state
            .tasks()
            .get(task)
            .ok_or_else(|| Error::Contract(format!("task index {task} out of range for {} tasks", state.num_tasks())))?;
        let projector = learned.projector.clone().unwrap_or_else(|| state.projector.clone());
        Ok(Self {
            strategy: Strategy::CorrespondingAll,
            blocks: vec![BlockPlan::Experts; state.base.config.n_blocks],
            experts: vec![learned.adapters.clone()],
            rule: WeightRule::Fixed(vec![1.0]),
            router: None,
            projector,
            task_projectors: Vec::new(),
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Anchor-similarity routing of an input; `None` for strategies that do
    /// not route.
    pub fn route(&self, visual: &[f64], instruction: &[usize]) -> Result<Option<Routing>> {
        match &self.router {
            Some(r) => score_tasks(&r.encoder, &r.anchors, visual, instruction, &r.config).map(Some),
            None => Ok(None),
        }
    }

    /// Position of a task among this plan's experts. Harness use only.
    pub fn task_position(&self, task: &str) -> Option<usize> {
        self.experts.iter().position(|e| e.task == task)
    }

    fn expert_weights(&self, visual: &[f64], instruction: &[usize], true_task: Option<usize>) -> Result<Vec<f64>> {
        let n = self.experts.len();
        let one_hot = |k: usize| {
            let mut w = vec![0.0; n];
            w[k] = 1.0;
            w
        };
        match &self.rule {
            WeightRule::Fixed(w) => Ok(w.clone()),
            WeightRule::Routed => Ok(self.route(visual, instruction)?.expect("routed plans carry a router").weights),
            WeightRule::TrueTask | WeightRule::WrongTask => {
                let label = true_task.ok_or_else(|| {
                    Error::Contract(format!("strategy {} needs the ground-truth task label", self.strategy))
                })?;
                if label >= n {
                    return Err(Error::Contract(format!("task label {label} out of range for {n} learned tasks")));
                }
                Ok(if self.rule == WeightRule::TrueTask { one_hot(label) } else { one_hot((label + 1) % n) })
            }
        }
    }

    /// Projector and per-block adapters for one input. `true_task` is read
    /// only by the label-based oracle strategies.
    pub fn compose(
        &self,
        visual: &[f64],
        instruction: &[usize],
        true_task: Option<usize>,
    ) -> Result<(Arc<Projector>, ComposedAdapters)> {
        let label = if self.strategy.requires_label() { true_task } else { None };
        let weights = self.expert_weights(visual, instruction, label)?;
        self.compose_with_weights(weights)
    }

    /// Composition with explicit expert weights.
    pub fn compose_with_weights(&self, weights: Vec<f64>) -> Result<(Arc<Projector>, ComposedAdapters)> {
        if !self.experts.is_empty() && weights.len() != self.experts.len() {
            return Err(Error::Contract(format!(
                "{} expert weights for {} experts",
                weights.len(),
                self.experts.len()
            )));
        }
        let projector = if self.task_projectors.is_empty() || weights.is_empty() {
            self.projector.clone()
        } else {
            self.task_projectors[argmax(&weights)].clone()
        };
        let blocks = self
            .blocks
            .iter()
            .map(|b| match b {
                BlockPlan::Merged(delta) => BlockAdapters::Merged(delta.clone()),
                BlockPlan::Experts => BlockAdapters::Mixture { experts: self.experts.clone(), weights: weights.clone() },
            })
            .collect();
        Ok((projector, ComposedAdapters::new(self.strategy, blocks)?))
    }

    /// Loaded parameters per block; independent of the per-input weights.
    pub fn parameter_counts(&self) -> Result<Vec<BlockParameterCount>> {
        let weights = if self.experts.is_empty() {
            Vec::new()
        } else {
            let mut w = vec![0.0; self.experts.len()];
            w[0] = 1.0;
            w
        };
        Ok(self.compose_with_weights(weights)?.1.parameter_counts())
    }

    /// Residual stream after every block for a sample's prompt (visual
    /// prefix plus instruction).
    pub fn block_outputs(&self, base: &BaseModel, sample: &Sample) -> Result<Vec<Matrix>> {
        let label = if self.strategy.requires_label() { self.task_position(&sample.task) } else { None };
        let (projector, composed) = self.compose(&sample.visual, &sample.instruction, label)?;
        let visual = sample.visual_matrix(&base.config)?;
        Ok(forward_prompt(base, &projector, &composed, &visual, &sample.instruction, true)?.block_outputs)
    }
}

/// One-shot composition for a single input.
pub fn compose(
    state: &ContinualState,
    strategy: Strategy,
    visual: &[f64],
    instruction: &[usize],
    true_task: Option<usize>,
) -> Result<(Arc<Projector>, ComposedAdapters)> {
    if strategy.requires_label() && true_task.is_none() {
        return Err(Error::Contract(format!("strategy {strategy} needs the ground-truth task label")));
    }
    InferencePlan::build(state, strategy, &PlanOptions::from_state(state))?.compose(visual, instruction, true_task)
}
