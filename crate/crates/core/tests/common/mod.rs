//! Oracles shared by the integration targets.
#![allow(dead_code)]

use hide_forge::adapters::TaskAdapterSet;
use hide_forge::cka::{linear_cka, ActivationMatrix};
use hide_forge::model::{autoregressive_loss, backward, forward, BaseModel, ModelConfig, Projector, Sample};
use hide_forge::numerics::{Matrix, SeededRng};

/// `tr(K H L H) / (n-1)^2` with explicit Gram matrices and centring matrix.
pub fn brute_hsic(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let gram = |m: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum()).collect()).collect()
    };
    let k = gram(x);
    let l = gram(y);
    let h: Vec<Vec<f64>> =
        (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64).collect()).collect();
    let mul = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| (0..n).map(|t| a[i][t] * b[t][j]).sum()).collect()).collect()
    };
    let khlh = mul(&mul(&mul(&k, &h), &l), &h);
    (0..n).map(|i| khlh[i][i]).sum::<f64>() / ((n - 1) * (n - 1)) as f64
}

pub fn brute_cka(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    brute_hsic(x, y) / (brute_hsic(x, x) * brute_hsic(y, y)).sqrt()
}

pub fn random_rows(n: usize, p: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..p).map(|_| rng.normal()).collect()).collect()
}

pub fn cka(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let act = |rows: &[Vec<f64>]| ActivationMatrix::new(Matrix::from_rows(rows).unwrap(), 0, "m").unwrap();
    linear_cka(&act(x), &act(y)).unwrap()
}

/// Gram-Schmidt on Gaussian draws.
pub fn random_orthogonal(p: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < p {
        let mut v: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    q
}

pub fn times(x: &[Vec<f64>], q: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter().map(|row| (0..q[0].len()).map(|j| row.iter().zip(q).map(|(a, qr)| a * qr[j]).sum()).collect()).collect()
}

const H: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;

pub fn fd_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        d_model: 16,
        n_blocks: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        visual_dim: 4,
        visual_prefix_len: 2,
        lora_rank: 2,
        lora_alpha: 4.0,
    }
}

pub fn fd_sample(cfg: &ModelConfig, rng: &mut SeededRng) -> Sample {
    Sample {
        id: "fd".into(),
        task: "t".into(),
        visual: (0..cfg.visual_prefix_len * cfg.visual_dim).map(|_| rng.normal()).collect(),
        instruction: vec![3, 17, 9],
        answer: vec![25, 30, 21],
    }
}

fn loss(base: &BaseModel, proj: &Projector, adapters: &TaskAdapterSet, sample: &Sample) -> f64 {
    let logits = forward(base, proj, adapters, sample).unwrap();
    autoregressive_loss(&logits, &sample.answer).unwrap()
}

fn factor_entry(set: &mut TaskAdapterSet, site: usize, factor: usize, i: usize) -> &mut f64 {
    let a = &mut set.adapters_mut()[site];
    if factor == 0 {
        &mut a.a.as_mut_slice()[i]
    } else {
        &mut a.b.as_mut_slice()[i]
    }
}

#[derive(Debug)]
pub struct GradientReport {
    pub checked: usize,
    pub parameters: usize,
    pub worst: f64,
    /// First parameter outside tolerance, if any.
    pub failure: Option<String>,
}

/// Compares every adapter-factor and projector gradient with a central
/// difference. Relative error uses the larger magnitude; below 1e-9 both
/// values are treated as that floor, where rounding dominates.
pub fn gradient_check(seed: u64) -> GradientReport {
    let cfg = fd_config();
    let mut rng = SeededRng::new(seed);
    let base = BaseModel::seeded(cfg.clone(), seed + 1).unwrap();
    let mut proj = Projector::seeded(&cfg, seed + 2);
    let mut adapters = TaskAdapterSet::fresh("t", &cfg, &mut rng);
    for a in adapters.adapters_mut() {
        a.a = Matrix::random_normal(a.a.rows(), a.a.cols(), 0.3, &mut rng);
        a.b = Matrix::random_normal(a.b.rows(), a.b.cols(), 0.3, &mut rng);
    }
    let sample = fd_sample(&cfg, &mut rng);
    let (_, grads) = backward(&base, &proj, &adapters, &sample).unwrap();
    let mut report = GradientReport {
        checked: 0,
        parameters: adapters.parameter_count() + proj.weight.as_slice().len() + proj.bias.len(),
        worst: 0.0,
        failure: None,
    };
    let compare = |report: &mut GradientReport, what: String, analytic: f64, numeric: f64| {
        let scale = analytic.abs().max(numeric.abs()).max(1e-9);
        let err = (analytic - numeric).abs() / scale;
        report.worst = report.worst.max(err);
        report.checked += 1;
        if err > GRAD_REL_TOL && report.failure.is_none() {
            report.failure = Some(format!("{what}: analytic {analytic:e} vs numeric {numeric:e}"));
        }
    };

    for s in 0..adapters.adapters().len() {
        for factor in 0..2 {
            let len = {
                let a = &adapters.adapters()[s];
                if factor == 0 { a.a.as_slice().len() } else { a.b.as_slice().len() }
            };
            for i in 0..len {
                let x = *factor_entry(&mut adapters, s, factor, i);
                *factor_entry(&mut adapters, s, factor, i) = x + H;
                let up = loss(&base, &proj, &adapters, &sample);
                *factor_entry(&mut adapters, s, factor, i) = x - H;
                let down = loss(&base, &proj, &adapters, &sample);
                *factor_entry(&mut adapters, s, factor, i) = x;
                let (ga, gb) = &grads.adapters[s];
                let analytic = if factor == 0 { ga.as_slice()[i] } else { gb.as_slice()[i] };
                let site = adapters.adapters()[s].site;
                let name = format!("block {} {} {}[{i}]", site.block, site.kind.as_str(), ["A", "B"][factor]);
                compare(&mut report, name, analytic, (up - down) / (2.0 * H));
            }
        }
    }
    for i in 0..proj.weight.as_slice().len() {
        let x = proj.weight.as_slice()[i];
        proj.weight.as_mut_slice()[i] = x + H;
        let up = loss(&base, &proj, &adapters, &sample);
        proj.weight.as_mut_slice()[i] = x - H;
        let down = loss(&base, &proj, &adapters, &sample);
        proj.weight.as_mut_slice()[i] = x;
        compare(&mut report, format!("projector W[{i}]"), grads.projector_weight.as_slice()[i], (up - down) / (2.0 * H));
    }
    for i in 0..proj.bias.len() {
        let x = proj.bias[i];
        proj.bias[i] = x + H;
        let up = loss(&base, &proj, &adapters, &sample);
        proj.bias[i] = x - H;
        let down = loss(&base, &proj, &adapters, &sample);
        proj.bias[i] = x;
        compare(&mut report, format!("projector b[{i}]"), grads.projector_bias[i], (up - down) / (2.0 * H));
    }
    report
}
