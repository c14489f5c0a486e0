use serde::{Deserialize, Serialize};

use super::{BaseModel, LayerNorm, Projector, Sample};
use crate::adapters::{AdapterSource, Site, SiteKind};
use crate::error::{Error, Result};
use crate::numerics::{axpy, Matrix};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Which positions of a block's output feed a similarity readout.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Readout {
    #[default]
    FinalPosition,
    MeanOverPositions,
}

impl Readout {
    pub fn apply(self, hidden: &Matrix) -> Vec<f64> {
        match self {
            Readout::FinalPosition => hidden.row(hidden.rows() - 1).to_vec(),
            Readout::MeanOverPositions => {
                let mut acc = vec![0.0; hidden.cols()];
                for i in 0..hidden.rows() {
                    axpy(1.0, hidden.row(i), &mut acc);
                }
                acc.iter_mut().for_each(|v| *v /= hidden.rows() as f64);
                acc
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `sequence length × vocab_size`
    pub logits: Matrix,
    /// Residual stream after each block; empty unless requested.
    pub block_outputs: Vec<Matrix>,
}

pub(super) struct NormCache {
    pub xhat: Matrix,
    pub rstd: Vec<f64>,
}

pub(super) struct BlockCache {
    pub ln1: NormCache,
    pub a: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// One causal `n × n` attention matrix per head.
    pub probs: Vec<Matrix>,
    pub ctx: Matrix,
    pub ln2: NormCache,
    pub c: Matrix,
    pub f1: Matrix,
    pub g: Matrix,
}

pub(super) struct Cache {
    pub visual: Matrix,
    pub blocks: Vec<BlockCache>,
    pub final_norm: NormCache,
}

/// Teacher-forced logits for a sample: visual prefix, instruction, and all
/// answer tokens but the last. The final `answer.len()` rows predict the answer.
pub fn forward(base: &BaseModel, proj: &Projector, adapters: &dyn AdapterSource, sample: &Sample) -> Result<Matrix> {
    sample.validate(&base.config)?;
    let visual = sample.visual_matrix(&base.config)?;
    Ok(run(base, proj, adapters, &visual, &sample.teacher_forced_tokens(), None, false)?.logits)
}

/// Logits (and optionally per-block hidden states) for a visual prefix
/// followed by arbitrary tokens.
pub fn forward_prompt(
    base: &BaseModel,
    proj: &Projector,
    adapters: &dyn AdapterSource,
    visual: &Matrix,
    tokens: &[usize],
    keep_block_outputs: bool,
) -> Result<ForwardOutput> {
    run(base, proj, adapters, visual, tokens, None, keep_block_outputs)
}

pub(super) fn run(
    base: &BaseModel,
    proj: &Projector,
    adapters: &dyn AdapterSource,
    visual: &Matrix,
    tokens: &[usize],
    mut cache: Option<&mut Option<Cache>>,
    keep_block_outputs: bool,
) -> Result<ForwardOutput> {
    let cfg = &base.config;
    adapters.check(cfg)?;
    proj.check(cfg)?;
    if visual.shape() != (cfg.visual_prefix_len, cfg.visual_dim) {
        return Err(Error::Contract(format!(
            "visual prefix is {:?}, model expects ({}, {})",
            visual.shape(),
            cfg.visual_prefix_len,
            cfg.visual_dim
        )));
    }
    let n = cfg.visual_prefix_len + tokens.len();
    if n > cfg.max_seq_len {
        return Err(Error::Contract(format!("sequence of {n} positions exceeds max_seq_len {}", cfg.max_seq_len)));
    }
    if let Some(t) = tokens.iter().find(|t| **t >= cfg.vocab_size) {
        return Err(Error::Contract(format!("token {t} outside vocabulary")));
    }

    let mut x = Matrix::zeros(n, cfg.d_model);
    let projected = proj.project(visual)?;
    for i in 0..cfg.visual_prefix_len {
        x.row_mut(i).copy_from_slice(projected.row(i));
    }
    for (j, &t) in tokens.iter().enumerate() {
        x.row_mut(cfg.visual_prefix_len + j).copy_from_slice(base.token_embedding.row(t));
    }
    for i in 0..n {
        axpy(1.0, base.position_embedding.row(i), x.row_mut(i));
    }

    let recording = cache.is_some();
    let mut block_caches = Vec::new();
    let mut block_outputs = Vec::new();
    for (b, weights) in base.blocks.iter().enumerate() {
        let linear = |kind: SiteKind, h: &Matrix| -> Result<Matrix> {
            let mut out = h.matmul_t(weights.weight(kind))?;
            adapters.accumulate(Site::new(b, kind), h, &mut out)?;
            Ok(out)
        };
        let (a, ln1) = layer_norm(&x, &weights.ln1);
        let q = linear(SiteKind::AttnQ, &a)?;
        let k = linear(SiteKind::AttnK, &a)?;
        let v = linear(SiteKind::AttnV, &a)?;
        let (ctx, probs) = causal_attention(&q, &k, &v, cfg.n_heads);
        let o = linear(SiteKind::AttnO, &ctx)?;
        x.add_assign(&o)?;
        let (c, ln2) = layer_norm(&x, &weights.ln2);
        let f1 = linear(SiteKind::Ff1, &c)?;
        let g = gelu(&f1);
        let f2 = linear(SiteKind::Ff2, &g)?;
        x.add_assign(&f2)?;
        if keep_block_outputs {
            block_outputs.push(x.clone());
        }
        if recording {
            block_caches.push(BlockCache { ln1, a, q, k, v, probs, ctx, ln2, c, f1, g });
        }
    }
    let (z, final_norm) = layer_norm(&x, &base.final_norm);
    let logits = z.matmul_t(&base.head)?;
    if !logits.is_finite() {
        return Err(Error::Domain("forward pass produced non-finite logits".into()));
    }
    if let Some(slot) = cache.as_mut() {
        **slot = Some(Cache { visual: visual.clone(), blocks: block_caches, final_norm });
    }
    Ok(ForwardOutput { logits, block_outputs })
}

fn layer_norm(x: &Matrix, ln: &LayerNorm) -> (Matrix, NormCache) {
    let (n, d) = x.shape();
    let mut xhat = Matrix::zeros(n, d);
    let mut y = Matrix::zeros(n, d);
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(r);
        let xh = xhat.row_mut(i);
        for (j, v) in row.iter().enumerate() {
            xh[j] = (v - mean) * r;
        }
        let yr = y.row_mut(i);
        for j in 0..d {
            yr[j] = xhat[(i, j)] * ln.gain[j] + ln.bias[j];
        }
    }
    (y, NormCache { xhat, rstd })
}

pub(super) fn layer_norm_backward(dy: &Matrix, ln: &LayerNorm, cache: &NormCache) -> Matrix {
    let (n, d) = dy.shape();
    let mut dx = Matrix::zeros(n, d);
    for i in 0..n {
        let xh = cache.xhat.row(i);
        let dxhat: Vec<f64> = dy.row(i).iter().zip(&ln.gain).map(|(g, w)| g * w).collect();
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let r = cache.rstd[i];
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

fn causal_attention(q: &Matrix, k: &Matrix, v: &Matrix, n_heads: usize) -> (Matrix, Vec<Matrix>) {
    let (n, d) = q.shape();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Matrix::zeros(n, d);
    let mut all_probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let mut probs = Matrix::zeros(n, n);
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let s = crate::numerics::dot(qi, &k.row(j)[cols.clone()]) * scale;
                probs[(i, j)] = s;
                max = max.max(s);
            }
            let mut total = 0.0;
            for j in 0..=i {
                let e = (probs[(i, j)] - max).exp();
                probs[(i, j)] = e;
                total += e;
            }
            let out = &mut ctx.row_mut(i)[cols.clone()];
            for j in 0..=i {
                probs[(i, j)] /= total;
                axpy(probs[(i, j)], &v.row(j)[cols.clone()], out);
            }
        }
        all_probs.push(probs);
    }
    (ctx, all_probs)
}

fn gelu(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    out.as_mut_slice().iter_mut().for_each(|v| {
        let u = GELU_C * (*v + 0.044715 * *v * *v * *v);
        *v = 0.5 * *v * (1.0 + u.tanh());
    });
    out
}

pub(super) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// `−Σ_l log p(answer_l | prefix)` over the answer span, which occupies the
/// last `answer.len()` rows of `logits`. Other rows never enter the loss.
pub fn autoregressive_loss(logits: &Matrix, answer: &[usize]) -> Result<f64> {
    if answer.is_empty() || logits.rows() < answer.len() {
        return Err(Error::Contract(format!(
            "logits with {} rows cannot cover an answer of {} tokens",
            logits.rows(),
            answer.len()
        )));
    }
    let first = logits.rows() - answer.len();
    let mut loss = 0.0;
    for (l, &target) in answer.iter().enumerate() {
        if target >= logits.cols() {
            return Err(Error::Contract(format!("answer token {target} outside vocabulary")));
        }
        loss -= log_softmax_row(logits.row(first + l))[target];
    }
    Ok(loss.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{NoAdapters, TaskAdapterSet};
    use crate::model::ModelConfig;
    use crate::numerics::SeededRng;

    fn small() -> (BaseModel, Projector, Sample) {
        let cfg = ModelConfig { d_model: 16, d_ff: 24, n_heads: 2, n_blocks: 2, lora_rank: 2, ..ModelConfig::default() };
        let base = BaseModel::seeded(cfg.clone(), 3).unwrap();
        let proj = Projector::seeded(&cfg, 3);
        let mut rng = SeededRng::new(4);
        let sample = Sample {
            id: "s".into(),
            task: "t".into(),
            visual: (0..cfg.visual_prefix_len * cfg.visual_dim).map(|_| rng.normal()).collect(),
            instruction: vec![5, 9, 2, 33],
            answer: vec![40, 41, 42],
        };
        (base, proj, sample)
    }

    #[test]
    fn uniform_logits_loss() {
        let logits = Matrix::zeros(1, 4);
        assert!((autoregressive_loss(&logits, &[2]).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_loss_vanishes() {
        let mut logits = Matrix::zeros(1, 4);
        logits[(0, 1)] = 800.0;
        assert!(autoregressive_loss(&logits, &[1]).unwrap() < 1e-300);
    }

    #[test]
    fn hand_evaluated_loss() {
        let logits = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]]).unwrap();
        let e = std::f64::consts::E;
        let expected = -(e / (e + 2.0)).ln() - (e * e / (e * e + 2.0)).ln();
        let loss = autoregressive_loss(&logits, &[0, 1]).unwrap();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.790989).abs() < 1e-6);
    }

    #[test]
    fn loss_needs_answer_span() {
        assert!(matches!(autoregressive_loss(&Matrix::zeros(1, 3), &[0, 1]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_init_adapters_match_base() {
        let (base, proj, sample) = small();
        let mut rng = SeededRng::new(8);
        let fresh = TaskAdapterSet::fresh("t", &base.config, &mut rng);
        let plain = forward(&base, &proj, &NoAdapters, &sample).unwrap();
        let adapted = forward(&base, &proj, &fresh, &sample).unwrap();
        assert!(plain.max_abs_diff(&adapted).unwrap() <= 1e-12);
        assert_eq!(plain.shape(), (4 + 4 + 2, base.config.vocab_size));
    }

    #[test]
    fn causal_masking_holds() {
        let (base, proj, sample) = small();
        let visual = sample.visual_matrix(&base.config).unwrap();
        let tokens = sample.teacher_forced_tokens();
        let reference = forward_prompt(&base, &proj, &NoAdapters, &visual, &tokens, false).unwrap().logits;
        let p = base.config.visual_prefix_len;
        for j in 0..tokens.len() {
            let mut perturbed = tokens.clone();
            perturbed[j] = (perturbed[j] + 7) % base.config.vocab_size;
            let out = forward_prompt(&base, &proj, &NoAdapters, &visual, &perturbed, false).unwrap().logits;
            for row in 0..p + j {
                assert_eq!(out.row(row), reference.row(row), "row {row} changed by token {j}");
            }
            assert_ne!(out.row(p + j), reference.row(p + j));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let (base, proj, sample) = small();
        let a = forward(&base, &proj, &NoAdapters, &sample).unwrap();
        let b = forward(&base, &proj, &NoAdapters, &sample).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn readouts() {
        let h = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
        assert_eq!(Readout::FinalPosition.apply(&h), vec![3.0, 6.0]);
        assert_eq!(Readout::MeanOverPositions.apply(&h), vec![2.0, 4.0]);
    }

    #[test]
    fn mismatched_adapters_are_rejected() {
        let (base, proj, sample) = small();
        let other = ModelConfig { d_model: 8, n_heads: 2, n_blocks: 2, lora_rank: 2, ..ModelConfig::default() };
        let mut rng = SeededRng::new(1);
        let wrong = TaskAdapterSet::fresh("t", &other, &mut rng);
        assert!(matches!(forward(&base, &proj, &wrong, &sample), Err(Error::Config(_))));
    }
}
