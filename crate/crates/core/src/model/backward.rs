//! Manual reverse-mode pass. Only adapter factors and the projector receive
//! gradients; frozen base weights are read, never differentiated.

use super::forward::{gelu_grad, layer_norm_backward, run, Cache};
use super::{BaseModel, Projector, Sample};
use crate::adapters::{LoraAdapter, Site, SiteKind, TaskAdapterSet};
use crate::error::Result;
use crate::numerics::{axpy, dot, Matrix};

/// Gradients of the answer-span loss for every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// `(dA, dB)` per site, in the adapter set's site order.
    pub adapters: Vec<(Matrix, Matrix)>,
    pub projector_weight: Matrix,
    pub projector_bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(adapters: &TaskAdapterSet, proj: &Projector) -> Self {
        Self {
            adapters: adapters
                .adapters()
                .iter()
                .map(|a| (Matrix::zeros(a.a.rows(), a.a.cols()), Matrix::zeros(a.b.rows(), a.b.cols())))
                .collect(),
            projector_weight: Matrix::zeros(proj.weight.rows(), proj.weight.cols()),
            projector_bias: vec![0.0; proj.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        for ((da, db), (oa, ob)) in self.adapters.iter_mut().zip(&other.adapters) {
            da.add_assign(oa)?;
            db.add_assign(ob)?;
        }
        self.projector_weight.add_assign(&other.projector_weight)?;
        axpy(1.0, &other.projector_bias, &mut self.projector_bias);
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for (da, db) in &mut self.adapters {
            da.scale(alpha);
            db.scale(alpha);
        }
        self.projector_weight.scale(alpha);
        self.projector_bias.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn max_abs(&self) -> f64 {
        self.adapters
            .iter()
            .flat_map(|(a, b)| a.as_slice().iter().chain(b.as_slice()))
            .chain(self.projector_weight.as_slice())
            .chain(&self.projector_bias)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Loss and gradients for one sample with `adapters` at every site.
pub fn backward(base: &BaseModel, proj: &Projector, adapters: &TaskAdapterSet, sample: &Sample) -> Result<(f64, Gradients)> {
    let cfg = &base.config;
    sample.validate(cfg)?;
    let visual = sample.visual_matrix(cfg)?;
    let tokens = sample.teacher_forced_tokens();
    let mut slot: Option<Cache> = None;
    let out = run(base, proj, adapters, &visual, &tokens, Some(&mut slot), false)?;
    let cache = slot.expect("forward recorded its cache");
    let logits = out.logits;
    let n = logits.rows();
    let first = n - sample.answer.len();

    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(n, cfg.vocab_size);
    for (l, &target) in sample.answer.iter().enumerate() {
        let row = logits.row(first + l);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        loss -= (row[target] - max) - total.ln();
        let drow = dlogits.row_mut(first + l);
        for (j, e) in exps.iter().enumerate() {
            drow[j] = e / total;
        }
        drow[target] -= 1.0;
    }

    let mut grads = Gradients::zeros_like(adapters, proj);
    let dz = dlogits.matmul(&base.head)?;
    let mut dx = layer_norm_backward(&dz, &base.final_norm, &cache.final_norm);

    for (b, weights) in base.blocks.iter().enumerate().rev() {
        let bc = &cache.blocks[b];
        let site = |kind: SiteKind, h: &Matrix, dy: &Matrix, grads: &mut Gradients| -> Result<Matrix> {
            let s = Site::new(b, kind);
            site_backward(weights.weight(kind), adapters.get(s), h, dy, &mut grads.adapters[s.index()])
        };

        // feed-forward half: x_out = x_mid + ff_2(gelu(ff_1(ln2(x_mid))))
        let dg = site(SiteKind::Ff2, &bc.g, &dx, &mut grads)?;
        let mut df1 = dg;
        for (d, x) in df1.as_mut_slice().iter_mut().zip(bc.f1.as_slice()) {
            *d *= gelu_grad(*x);
        }
        let dc = site(SiteKind::Ff1, &bc.c, &df1, &mut grads)?;
        dx.add_assign(&layer_norm_backward(&dc, &weights.ln2, &bc.ln2))?;

        // attention half: x_mid = x_in + attn_o(attention(q, k, v))
        let dctx = site(SiteKind::AttnO, &bc.ctx, &dx, &mut grads)?;
        let (dq, dk, dv) = attention_backward(&dctx, bc, cfg.n_heads);
        let mut da = site(SiteKind::AttnQ, &bc.a, &dq, &mut grads)?;
        da.add_assign(&site(SiteKind::AttnK, &bc.a, &dk, &mut grads)?)?;
        da.add_assign(&site(SiteKind::AttnV, &bc.a, &dv, &mut grads)?)?;
        dx.add_assign(&layer_norm_backward(&da, &weights.ln1, &bc.ln1))?;
    }

    // Visual prefix rows came from the projector.
    for i in 0..cfg.visual_prefix_len {
        let d = dx.row(i);
        let v = cache.visual.row(i);
        for (o, &g) in d.iter().enumerate() {
            axpy(g, v, grads.projector_weight.row_mut(o));
        }
        axpy(1.0, d, &mut grads.projector_bias);
    }
    Ok((loss.max(0.0), grads))
}

/// Backpropagates through `y = h Wᵀ + scaling · (h Aᵀ) Bᵀ`, accumulating the
/// adapter gradients and returning `dL/dh`.
fn site_backward(w: &Matrix, adapter: &LoraAdapter, h: &Matrix, dy: &Matrix, grad: &mut (Matrix, Matrix)) -> Result<Matrix> {
    let s = adapter.scaling;
    let mut dh = dy.matmul(w)?;
    let u = h.matmul_t(&adapter.a)?;
    grad.1.add_scaled(s, &dy.t_matmul(&u)?)?;
    let mut du = dy.matmul(&adapter.b)?;
    du.scale(s);
    grad.0.add_assign(&du.t_matmul(h)?)?;
    dh.add_assign(&du.matmul(&adapter.a)?)?;
    Ok(dh)
}

fn attention_backward(dctx: &Matrix, bc: &super::forward::BlockCache, n_heads: usize) -> (Matrix, Matrix, Matrix) {
    let (n, d) = dctx.shape();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    for (h, probs) in bc.probs.iter().enumerate() {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let dci = &dctx.row(i)[cols.clone()];
            let mut dp = vec![0.0; i + 1];
            for j in 0..=i {
                dp[j] = dot(dci, &bc.v.row(j)[cols.clone()]);
                axpy(probs[(i, j)], dci, &mut dv.row_mut(j)[cols.clone()]);
            }
            let weighted: f64 = (0..=i).map(|j| probs[(i, j)] * dp[j]).sum();
            for j in 0..=i {
                let ds = probs[(i, j)] * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                axpy(ds, &bc.k.row(j)[cols.clone()], &mut dq.row_mut(i)[cols.clone()]);
                axpy(ds, &bc.q.row(i)[cols.clone()], &mut dk.row_mut(j)[cols.clone()]);
            }
        }
    }
    (dq, dk, dv)
}
