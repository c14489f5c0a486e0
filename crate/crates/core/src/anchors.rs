//! Frozen dual-modality features, per-task anchors, and router-free expert
//! weights from anchor similarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BaseModel, Sample};
use crate::numerics::{axpy, cosine_similarity, softmax_with_temperature, Matrix, SeededRng};

pub const DEFAULT_FEATURE_DIM: usize = 64;

/// Seeded random projections standing in for frozen image and text
/// encoders. Identical for every task and for both training and inference.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    /// `feat_dim × visual_dim`
    pub visual_projection: Matrix,
    /// `feat_dim × d_model`
    pub instruction_projection: Matrix,
    /// Copy of the base model's frozen token embeddings.
    pub token_embedding: Matrix,
    pub visual_prefix_len: usize,
}

impl FrozenEncoder {
    pub fn seeded(base: &BaseModel, feature_dim: usize, seed: u64) -> Self {
        let cfg = &base.config;
        let mut rng = SeededRng::derived(seed, "frozen-encoder");
        Self {
            visual_projection: Matrix::random_normal(feature_dim, cfg.visual_dim, 1.0 / (cfg.visual_dim as f64).sqrt(), &mut rng),
            instruction_projection: Matrix::random_normal(feature_dim, cfg.d_model, 1.0 / (cfg.d_model as f64).sqrt(), &mut rng),
            token_embedding: base.token_embedding.clone(),
            visual_prefix_len: cfg.visual_prefix_len,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.visual_projection.rows()
    }

    /// Projected mean of the visual prefix vectors.
    pub fn visual_features(&self, visual: &[f64]) -> Result<Vec<f64>> {
        let dim = self.visual_projection.cols();
        if visual.len() != self.visual_prefix_len * dim {
            return Err(Error::Contract(format!(
                "visual input has {} values, encoder expects {}x{dim}",
                visual.len(),
                self.visual_prefix_len
            )));
        }
        let mut pooled = vec![0.0; dim];
        for chunk in visual.chunks(dim) {
            axpy(1.0, chunk, &mut pooled);
        }
        pooled.iter_mut().for_each(|v| *v /= self.visual_prefix_len as f64);
        self.visual_projection.matvec(&pooled)
    }

    /// Projected mean of the instruction's token embeddings.
    pub fn instruction_features(&self, instruction: &[usize]) -> Result<Vec<f64>> {
        if instruction.is_empty() {
            return Err(Error::Degenerate("empty instruction has no features".into()));
        }
        let mut pooled = vec![0.0; self.token_embedding.cols()];
        for &t in instruction {
            if t >= self.token_embedding.rows() {
                return Err(Error::Contract(format!("token {t} outside vocabulary")));
            }
            axpy(1.0, self.token_embedding.row(t), &mut pooled);
        }
        pooled.iter_mut().for_each(|v| *v /= instruction.len() as f64);
        self.instruction_projection.matvec(&pooled)
    }
}

/// Mean visual and instruction features of one task's training inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskAnchor {
    pub task: String,
    pub visual: Vec<f64>,
    pub instruction: Vec<f64>,
    pub n_seen: usize,
}

/// Single-pass running mean of both modalities.
#[derive(Debug, Clone)]
pub struct AnchorAccumulator {
    task: String,
    visual: Vec<f64>,
    instruction: Vec<f64>,
    n_seen: usize,
}

impl AnchorAccumulator {
    pub fn new(task: impl Into<String>, feature_dim: usize) -> Self {
        Self { task: task.into(), visual: vec![0.0; feature_dim], instruction: vec![0.0; feature_dim], n_seen: 0 }
    }

    pub fn observe(&mut self, encoder: &FrozenEncoder, sample: &Sample) -> Result<()> {
        let fv = encoder.visual_features(&sample.visual)?;
        let fi = encoder.instruction_features(&sample.instruction)?;
        self.n_seen += 1;
        let inv = 1.0 / self.n_seen as f64;
        for (m, x) in self.visual.iter_mut().zip(&fv) {
            *m += (x - *m) * inv;
        }
        for (m, x) in self.instruction.iter_mut().zip(&fi) {
            *m += (x - *m) * inv;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<TaskAnchor> {
        if self.n_seen == 0 {
            return Err(Error::Contract(format!("no samples observed for the anchor of task `{}`", self.task)));
        }
        Ok(TaskAnchor { task: self.task, visual: self.visual, instruction: self.instruction, n_seen: self.n_seen })
    }
}

/// Anchor of a task from its full training stream.
pub fn extract_anchor<'a>(
    encoder: &FrozenEncoder,
    task: &str,
    samples: impl IntoIterator<Item = &'a Sample>,
) -> Result<TaskAnchor> {
    let mut acc = AnchorAccumulator::new(task, encoder.feature_dim());
    for sample in samples {
        acc.observe(encoder, sample)?;
    }
    acc.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.5, temperature: 0.1 }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("router.temperature must be positive, got {}", self.temperature)));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config("router.alpha and router.beta must be finite".into()));
        }
        Ok(())
    }

    /// The modality weights a routing mode actually uses.
    pub fn for_mode(&self, mode: RoutingMode) -> RouterConfig {
        match mode {
            RoutingMode::Dual => self.clone(),
            RoutingMode::VisualOnly => RouterConfig { alpha: 1.0, beta: 0.0, ..self.clone() },
            RoutingMode::TextOnly => RouterConfig { alpha: 0.0, beta: 1.0, ..self.clone() },
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingMode {
    #[default]
    Dual,
    VisualOnly,
    TextOnly,
}

impl RoutingMode {
    pub const ALL: [RoutingMode; 3] = [RoutingMode::Dual, RoutingMode::VisualOnly, RoutingMode::TextOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            RoutingMode::Dual => "dual",
            RoutingMode::VisualOnly => "visual-only",
            RoutingMode::TextOnly => "text-only",
        }
    }
}

/// Fused per-task similarity scores and the resulting expert weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Routing {
    /// Most similar task; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        crate::numerics::argmax(&self.weights)
    }
}

/// Expert weights for one input from its cosine similarity to every anchor.
/// Takes the raw inputs, never a labelled sample.
pub fn score_tasks(
    encoder: &FrozenEncoder,
    anchors: &[TaskAnchor],
    visual: &[f64],
    instruction: &[usize],
    cfg: &RouterConfig,
) -> Result<Routing> {
    if anchors.is_empty() {
        return Err(Error::Contract("routing needs at least one anchor".into()));
    }
    cfg.validate()?;
    let zv = encoder.visual_features(visual)?;
    let zi = encoder.instruction_features(instruction)?;
    let mut scores = Vec::with_capacity(anchors.len());
    for anchor in anchors {
        let mut fused = 0.0;
        if cfg.alpha != 0.0 {
            fused += cfg.alpha * cosine_similarity(&zv, &anchor.visual)?;
        }
        if cfg.beta != 0.0 {
            fused += cfg.beta * cosine_similarity(&zi, &anchor.instruction)?;
        }
        scores.push(fused);
    }
    let weights = softmax_with_temperature(&scores, cfg.temperature)?;
    Ok(Routing { scores, weights })
}

/// [`score_tasks`] with one modality switched off.
pub fn ablated_score_tasks(
    encoder: &FrozenEncoder,
    anchors: &[TaskAnchor],
    visual: &[f64],
    instruction: &[usize],
    cfg: &RouterConfig,
    mode: RoutingMode,
) -> Result<Routing> {
    score_tasks(encoder, anchors, visual, instruction, &cfg.for_mode(mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn encoder() -> FrozenEncoder {
        let cfg = ModelConfig { d_model: 8, d_ff: 8, n_heads: 2, n_blocks: 2, visual_dim: 3, visual_prefix_len: 2, ..ModelConfig::default() };
        let base = BaseModel::seeded(cfg, 1).unwrap();
        FrozenEncoder::seeded(&base, 6, 1)
    }

    fn sample(visual: Vec<f64>, instruction: Vec<usize>) -> Sample {
        Sample { id: "s".into(), task: "t".into(), visual, instruction, answer: vec![1] }
    }

    #[test]
    fn single_sample_anchor_is_its_features() {
        let enc = encoder();
        let s = sample(vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0], vec![3, 4]);
        let anchor = extract_anchor(&enc, "t", [&s]).unwrap();
        assert_eq!(anchor.visual, enc.visual_features(&s.visual).unwrap());
        assert_eq!(anchor.instruction, enc.instruction_features(&s.instruction).unwrap());
        assert_eq!(anchor.n_seen, 1);
    }

    #[test]
    fn two_point_running_mean() {
        let mut acc = AnchorAccumulator::new("t", 2);
        // Drive the mean update directly with unit vectors.
        for x in [[1.0, 0.0], [0.0, 1.0]] {
            acc.n_seen += 1;
            let inv = 1.0 / acc.n_seen as f64;
            for (m, v) in acc.visual.iter_mut().zip(&x) {
                *m += (v - *m) * inv;
            }
        }
        assert_eq!(acc.visual, vec![0.5, 0.5]);
    }

    #[test]
    fn empty_stream_is_rejected() {
        let enc = encoder();
        let none: Vec<Sample> = Vec::new();
        assert!(matches!(extract_anchor(&enc, "t", &none), Err(Error::Contract(_))));
    }

    #[test]
    fn anchor_is_order_independent() {
        let enc = encoder();
        let mut rng = SeededRng::new(5);
        let mut samples: Vec<Sample> = (0..100)
            .map(|i| sample((0..6).map(|_| rng.normal() + 1.0).collect(), vec![i % 7, (i * 3) % 11]))
            .collect();
        let a = extract_anchor(&enc, "t", &samples).unwrap();
        rng.shuffle(&mut samples);
        let b = extract_anchor(&enc, "t", &samples).unwrap();
        for (x, y) in a.visual.iter().zip(&b.visual).chain(a.instruction.iter().zip(&b.instruction)) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    fn fixed_anchor(task: &str, visual: Vec<f64>, instruction: Vec<f64>) -> TaskAnchor {
        TaskAnchor { task: task.into(), visual, instruction, n_seen: 1 }
    }

    #[test]
    fn single_task_gets_full_weight() {
        let enc = encoder();
        let s = sample(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0], vec![2]);
        let anchor = extract_anchor(&enc, "t", [&s]).unwrap();
        let r = score_tasks(&enc, &[anchor], &s.visual, &s.instruction, &RouterConfig::default()).unwrap();
        assert_eq!(r.weights, vec![1.0]);
    }

    #[test]
    fn fused_scores_follow_the_softmax() {
        // Identity-like encoder so features equal the pooled inputs.
        let mut enc = encoder();
        enc.visual_projection = Matrix::identity(3);
        enc.instruction_projection = Matrix::identity(8);
        enc.token_embedding = Matrix::identity(8);
        let visual = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let instruction = vec![0];
        // cos 0.8 and 0.6 in both modalities give fused scores 0.8 and 0.6.
        let a1 = fixed_anchor("a", vec![0.8, 0.6, 0.0], [vec![0.8, 0.6], vec![0.0; 6]].concat());
        let a2 = fixed_anchor("b", vec![0.6, 0.8, 0.0], [vec![0.6, 0.8], vec![0.0; 6]].concat());
        let r = score_tasks(&enc, &[a1.clone(), a2.clone()], &visual, &instruction, &RouterConfig::default()).unwrap();
        assert!((r.scores[0] - 0.8).abs() < 1e-12 && (r.scores[1] - 0.6).abs() < 1e-12);
        assert!((r.weights[0] - 0.880797).abs() < 1e-6);
        assert!((r.weights[1] - 0.119203).abs() < 1e-6);
        let dual = ablated_score_tasks(&enc, &[a1, a2], &visual, &instruction, &RouterConfig::default(), RoutingMode::Dual).unwrap();
        assert_eq!(dual, r);
    }

    #[test]
    fn zero_feature_is_degenerate() {
        let enc = encoder();
        let s = sample(vec![1.0; 6], vec![2]);
        let anchor = extract_anchor(&enc, "t", [&s]).unwrap();
        let err = score_tasks(&enc, &[anchor], &[0.0; 6], &[2], &RouterConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn modes_switch_weights() {
        let cfg = RouterConfig::default();
        assert_eq!(cfg.for_mode(RoutingMode::VisualOnly), RouterConfig { alpha: 1.0, beta: 0.0, temperature: 0.1 });
        assert_eq!(cfg.for_mode(RoutingMode::TextOnly), RouterConfig { alpha: 0.0, beta: 1.0, temperature: 0.1 });
        assert_eq!(cfg.for_mode(RoutingMode::Dual), cfg);
    }
}
