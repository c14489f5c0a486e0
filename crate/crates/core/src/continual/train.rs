use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ContinualState, LearnedTask, TrainingMode};
use crate::adapters::TaskAdapterSet;
use crate::anchors::AnchorAccumulator;
use crate::error::{Error, Result};
use crate::model::{backward, Gradients, Projector, Sample};
use crate::numerics::SeededRng;
use crate::parallel;

/// Whether the projector is one shared parameter set or snapshotted per task.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectorPolicy {
    #[default]
    Shared,
    PerTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_lora: f64,
    pub lr_projector: f64,
    pub warmup_ratio: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub projector_policy: ProjectorPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 1,
            lr_lora: 1e-3,
            lr_projector: 1e-4,
            warmup_ratio: 0.03,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            projector_policy: ProjectorPolicy::Shared,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("train.batch_size and train.epochs must be positive".into()));
        }
        if !(self.lr_lora >= 0.0 && self.lr_projector >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("train.warmup_ratio must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("invalid Adam hyper-parameters".into()));
        }
        Ok(())
    }
}

/// Linear warm-up followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn new(total_steps: usize, warmup_ratio: f64) -> Self {
        let warmup_steps = ((total_steps as f64) * warmup_ratio).ceil() as usize;
        Self { total_steps, warmup_steps: warmup_steps.min(total_steps) }
    }

    /// Multiplier on the base learning rate at `step` (0-based).
    pub fn factor(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay_steps = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = (step - self.warmup_steps) as f64 / decay_steps as f64;
        0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
    }
}

/// First and second moment estimates for every trainable parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl AdamState {
    pub fn new(adapters: &TaskAdapterSet, proj: &Projector) -> Self {
        let zeros = Gradients::zeros_like(adapters, proj);
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(
        &mut self,
        cfg: &TrainConfig,
        adapters: &mut TaskAdapterSet,
        proj: &mut Projector,
        grads: &Gradients,
        lr_lora: f64,
        lr_projector: f64,
    ) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let update = |param: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64| {
            for i in 0..param.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        };
        for (i, adapter) in adapters.adapters_mut().iter_mut().enumerate() {
            let (ga, gb) = &grads.adapters[i];
            let (ma, mb) = &mut self.m.adapters[i];
            let (va, vb) = &mut self.v.adapters[i];
            update(adapter.a.as_mut_slice(), ga.as_slice(), ma.as_mut_slice(), va.as_mut_slice(), lr_lora);
            update(adapter.b.as_mut_slice(), gb.as_slice(), mb.as_mut_slice(), vb.as_mut_slice(), lr_lora);
        }
        update(
            proj.weight.as_mut_slice(),
            grads.projector_weight.as_slice(),
            self.m.projector_weight.as_mut_slice(),
            self.v.projector_weight.as_mut_slice(),
            lr_projector,
        );
        update(&mut proj.bias, &grads.projector_bias, &mut self.m.projector_bias, &mut self.v.projector_bias, lr_projector);
    }
}

/// Per-step mean batch loss of one task's training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainingLog {
    pub task: String,
    pub step_losses: Vec<f64>,
}

impl TrainingLog {
    /// Mean loss over the first and last `window` steps.
    pub fn endpoints(&self, window: usize) -> (f64, f64) {
        let w = window.clamp(1, self.step_losses.len().max(1));
        let head = &self.step_losses[..w.min(self.step_losses.len())];
        let tail = &self.step_losses[self.step_losses.len().saturating_sub(w)..];
        (crate::numerics::mean(head), crate::numerics::mean(tail))
    }
}

impl ContinualState {
    /// Trains a new task's adapters together with the projector on the
    /// answer-span loss, extracting its anchor in the same pass, and
    /// appends the result. Earlier tasks are never touched.
    pub fn learn_task(&mut self, task: &str, dataset: &[Sample]) -> Result<TrainingLog> {
        let cfg = self.base.config.clone();
        if dataset.is_empty() {
            return Err(Error::Ingestion(format!("task `{task}` has an empty training set")));
        }
        for sample in dataset {
            sample.validate(&cfg)?;
        }
        if self.task_index(task).is_some() {
            return Err(Error::Contract(format!("task `{task}` was already learned")));
        }
        let stage = self.tasks.len();
        let mut rng = SeededRng::derived(self.seed, &format!("train/{}/{stage}/{task}", self.mode.as_str()));
        let mut adapters = match (self.mode, self.tasks.last()) {
            (TrainingMode::Sequential, Some(prev)) => {
                let mut set = (*prev.adapters).clone();
                set.task = task.to_string();
                set
            }
            _ => TaskAdapterSet::fresh(task, &cfg, &mut rng),
        };
        let mut projector = (*self.projector).clone();

        let tc = self.train.clone();
        let steps_per_epoch = dataset.len().div_ceil(tc.batch_size);
        let schedule = LrSchedule::new(steps_per_epoch * tc.epochs, tc.warmup_ratio);
        let mut adam = AdamState::new(&adapters, &projector);
        let mut anchor = AnchorAccumulator::new(task, self.encoder.feature_dim());
        let mut log = TrainingLog { task: task.to_string(), step_losses: Vec::with_capacity(schedule.total_steps) };
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut step = 0;
        for epoch in 0..tc.epochs {
            rng.shuffle(&mut order);
            for batch in order.chunks(tc.batch_size) {
                if epoch == 0 {
                    for &i in batch {
                        anchor.observe(&self.encoder, &dataset[i])?;
                    }
                }
                let base = &self.base;
                let (adapters_ref, proj_ref) = (&adapters, &projector);
                let per_sample: Vec<Result<(f64, Gradients)>> = parallel::pool()
                    .install(|| batch.par_iter().map(|&i| backward(base, proj_ref, adapters_ref, &dataset[i])).collect());
                let mut total = Gradients::zeros_like(&adapters, &projector);
                let mut loss = 0.0;
                for result in per_sample {
                    let (l, g) = result?;
                    loss += l;
                    total.add_assign(&g)?;
                }
                let inv = 1.0 / batch.len() as f64;
                total.scale(inv);
                log.step_losses.push(loss * inv);
                let factor = schedule.factor(step);
                adam.step(&tc, &mut adapters, &mut projector, &total, tc.lr_lora * factor, tc.lr_projector * factor);
                step += 1;
            }
        }
        if !adapters.adapters().iter().all(|a| a.a.is_finite() && a.b.is_finite()) {
            return Err(Error::Domain(format!("training task `{task}` diverged")));
        }
        let projector = Arc::new(projector);
        self.projector = projector.clone();
        self.tasks.push(LearnedTask {
            adapters: Arc::new(adapters),
            anchor: anchor.finish()?,
            projector: matches!(tc.projector_policy, ProjectorPolicy::PerTask).then_some(projector),
        });
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = LrSchedule::new(100, 0.03);
        assert_eq!(s.warmup_steps, 3);
        assert!((s.factor(0) - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.factor(2) - 1.0).abs() < 1e-12);
        assert!((s.factor(3) - 1.0).abs() < 1e-12);
        assert!(s.factor(50) < 1.0 && s.factor(50) > 0.0);
        assert!(s.factor(99) < 0.01);
        let no_warmup = LrSchedule::new(10, 0.0);
        assert_eq!(no_warmup.factor(0), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { warmup_ratio: 1.5, ..TrainConfig::default() }.validate().is_err());
    }
}
