use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::InferencePlan;
use crate::adapters::ComposedAdapters;
use crate::error::{Error, Result};
use crate::model::{forward_prompt, BaseModel, Projector, Sample};
use crate::numerics::{argmax, Matrix};
use crate::parallel;

/// Greedy decoding of up to `max_len` tokens after the prompt.
pub fn greedy_decode(
    base: &BaseModel,
    proj: &Projector,
    composed: &ComposedAdapters,
    visual: &Matrix,
    instruction: &[usize],
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut tokens = instruction.to_vec();
    let mut generated = Vec::with_capacity(max_len);
    for _ in 0..max_len {
        if base.config.visual_prefix_len + tokens.len() >= base.config.max_seq_len {
            break;
        }
        let logits = forward_prompt(base, proj, composed, visual, &tokens, false)?.logits;
        let next = argmax(logits.row(logits.rows() - 1));
        generated.push(next);
        tokens.push(next);
    }
    Ok(generated)
}

/// Whether greedy decoding reproduces `answer` exactly. While every earlier
/// greedy token matches, the greedy prefix equals the teacher-forced one, so
/// a single teacher-forced pass decides the outcome.
fn decodes_exactly(base: &BaseModel, proj: &Projector, composed: &ComposedAdapters, sample: &Sample) -> Result<bool> {
    let visual = sample.visual_matrix(&base.config)?;
    let logits = forward_prompt(base, proj, composed, &visual, &sample.teacher_forced_tokens(), false)?.logits;
    let first = logits.rows() - sample.answer.len();
    Ok(sample.answer.iter().enumerate().all(|(l, &expected)| argmax(logits.row(first + l)) == expected))
}

/// Accuracy (percent) per evaluated task, plus routing accuracy for plans
/// that route by anchor similarity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub accuracy: Vec<f64>,
    pub routing_accuracy: Option<Vec<f64>>,
}

/// Exact-match accuracy of `plan` on each test set. Samples are fanned out
/// over the worker pool and reduced in order.
pub fn evaluate(base: &BaseModel, plan: &InferencePlan, test_sets: &[(&str, &[Sample])]) -> Result<EvalRow> {
    let mut accuracy = Vec::with_capacity(test_sets.len());
    let mut routing: Vec<f64> = Vec::new();
    for (task, samples) in test_sets {
        if samples.is_empty() {
            return Err(Error::Contract(format!("test set for task `{task}` is empty")));
        }
        let position = plan.task_position(task);
        if plan.strategy().requires_label() && position.is_none() {
            return Err(Error::Contract(format!("task `{task}` has not been learned")));
        }
        let outcomes: Vec<Result<(bool, Option<bool>)>> = parallel::pool().install(|| {
            samples
                .par_iter()
                .map(|sample| {
                    sample.validate(&base.config)?;
                    let label = if plan.strategy().requires_label() { position } else { None };
                    let (projector, composed) = plan.compose(&sample.visual, &sample.instruction, label)?;
                    let correct = decodes_exactly(base, &projector, &composed, sample)?;
                    let routed = plan
                        .route(&sample.visual, &sample.instruction)?
                        .map(|r| Some(r.argmax()) == position);
                    Ok((correct, routed))
                })
                .collect()
        });
        let mut correct = 0usize;
        let mut routed_right = 0usize;
        let mut routed_any = false;
        for outcome in outcomes {
            let (ok, routed) = outcome?;
            correct += usize::from(ok);
            if let Some(r) = routed {
                routed_any = true;
                routed_right += usize::from(r);
            }
        }
        accuracy.push(100.0 * correct as f64 / samples.len() as f64);
        if routed_any {
            routing.push(100.0 * routed_right as f64 / samples.len() as f64);
        }
    }
    let routing_accuracy = (!routing.is_empty()).then_some(routing);
    Ok(EvalRow { accuracy, routing_accuracy })
}

/// `A[t][j]`: accuracy (percent) on task `j` after training stage `t`,
/// defined for `t ≥ j`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::default();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Appends stage `t`, which must report exactly `t + 1` tasks.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Contract(format!(
                "stage {} must report {} task accuracies, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|v| !(0.0..=100.0).contains(v)) {
            return Err(Error::Contract("accuracies must lie in [0, 100]".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn stages(&self) -> usize {
        self.rows.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub last: Vec<f64>,
    pub last_mean: f64,
    pub avg: Vec<f64>,
    pub avg_mean: f64,
}

/// `Last_j = A[T][j]`; `Avg_j` is the mean of `A[t][j]` over the stages
/// `t ≥ j` at which task `j` was evaluated. Overall values are unweighted
/// means over tasks.
pub fn metrics(matrix: &AccuracyMatrix) -> Result<Metrics> {
    let rows = matrix.rows();
    let stages = rows.len();
    if stages == 0 || rows.iter().enumerate().any(|(t, r)| r.len() != t + 1) {
        return Err(Error::Contract("metrics need a complete lower-triangular accuracy matrix".into()));
    }
    let last = rows[stages - 1].clone();
    let avg: Vec<f64> = (0..stages)
        .map(|j| {
            let column: Vec<f64> = rows[j..].iter().map(|r| r[j]).collect();
            column.iter().sum::<f64>() / column.len() as f64
        })
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(Metrics { last_mean: mean(&last), avg_mean: mean(&avg), last, avg })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_stage() {
        let m = AccuracyMatrix::from_rows(vec![vec![42.0]]).unwrap();
        let out = metrics(&m).unwrap();
        assert_eq!(out.last, vec![42.0]);
        assert_eq!(out.avg, vec![42.0]);
        assert_eq!(out.last_mean, out.avg_mean);
    }

    #[test]
    fn three_stage_example() {
        let m = AccuracyMatrix::from_rows(vec![vec![90.0], vec![80.0, 70.0], vec![75.0, 65.0, 60.0]]).unwrap();
        let out = metrics(&m).unwrap();
        assert!((out.last_mean - 200.0 / 3.0).abs() < 1e-12);
        assert!((out.avg[0] - 245.0 / 3.0).abs() < 1e-12);
        assert_eq!(out.avg[1], 67.5);
        assert_eq!(out.avg[2], 60.0);
        assert!((out.avg_mean - 69.722).abs() < 1e-3);
    }

    #[test]
    fn no_forgetting_means_last_equals_avg() {
        let m = AccuracyMatrix::from_rows(vec![vec![55.0], vec![55.0, 55.0], vec![55.0, 55.0, 55.0]]).unwrap();
        let out = metrics(&m).unwrap();
        assert_eq!(out.last_mean, out.avg_mean);
    }

    #[test]
    fn malformed_rows_are_rejected() {
        let mut m = AccuracyMatrix::default();
        assert!(metrics(&m).is_err());
        assert!(m.push_row(vec![1.0, 2.0]).is_err());
        assert!(m.push_row(vec![101.0]).is_err());
        m.push_row(vec![100.0]).unwrap();
        assert_eq!(m.stages(), 1);
    }

    #[test]
    fn single_pass_check_agrees_with_greedy_decoding() {
        use crate::adapters::TaskAdapterSet;
        use crate::continual::Strategy;
        use crate::model::ModelConfig;
        use crate::numerics::SeededRng;

        let cfg = ModelConfig { d_model: 16, d_ff: 24, n_heads: 2, n_blocks: 2, lora_rank: 2, ..ModelConfig::default() };
        let base = BaseModel::seeded(cfg.clone(), 11).unwrap();
        let proj = Projector::seeded(&cfg, 11);
        let mut rng = SeededRng::new(12);
        let mut set = TaskAdapterSet::fresh("t", &cfg, &mut rng);
        for a in set.adapters_mut() {
            a.b = Matrix::random_normal(a.b.rows(), a.b.cols(), 0.3, &mut rng);
        }
        let composed = ComposedAdapters::new(
            Strategy::CorrespondingAll,
            (0..cfg.n_blocks)
                .map(|_| crate::adapters::BlockAdapters::Mixture { experts: vec![std::sync::Arc::new(set.clone())], weights: vec![1.0] })
                .collect(),
        )
        .unwrap();
        let mut hits = 0;
        for i in 0..40 {
            let visual: Vec<f64> = (0..cfg.visual_prefix_len * cfg.visual_dim).map(|_| rng.normal()).collect();
            let instruction = vec![rng.below(64), rng.below(64), rng.below(64)];
            let vm = Matrix::from_vec(cfg.visual_prefix_len, cfg.visual_dim, visual.clone()).unwrap();
            let greedy = greedy_decode(&base, &proj, &composed, &vm, &instruction, 3).unwrap();
            // every other sample uses the model's own decode as the answer
            let answer = if i % 2 == 0 { greedy.clone() } else { vec![greedy[0], (greedy[1] + 1) % 64, greedy[2]] };
            let sample = Sample { id: format!("s{i}"), task: "t".into(), visual, instruction, answer: answer.clone() };
            let exact = decodes_exactly(&base, &proj, &composed, &sample).unwrap();
            assert_eq!(exact, greedy == answer);
            hits += usize::from(exact);
        }
        assert_eq!(hits, 20);
    }
}
