//! Linear centered kernel alignment between layer activations.
//!
//! With `X̂`, `Ŷ` column-centered, `K_X = X̂X̂ᵀ`, `K_Y = ŶŶᵀ`,
//! `HSIC(K_X, K_Y) = tr(K_X K_Y) / (n−1)²` and
//! `CKA = HSIC(K_X, K_Y) / sqrt(HSIC(K_X, K_X) · HSIC(K_Y, K_Y))`.

use std::io::Write;
use std::path::Path;

use crate::continual::InferencePlan;
use crate::error::{Error, Result};
use crate::model::{BaseModel, Readout, Sample};
use crate::numerics::{center_columns, Matrix};

/// `n × p` activations of one layer for `n` probe inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub values: Matrix,
    pub layer: usize,
    pub model: String,
}

impl ActivationMatrix {
    pub fn new(values: Matrix, layer: usize, model: impl Into<String>) -> Result<Self> {
        if values.rows() < 2 {
            return Err(Error::Contract(format!("activation matrix needs at least 2 samples, got {}", values.rows())));
        }
        if !values.is_finite() {
            return Err(Error::Domain("activation matrix has non-finite entries".into()));
        }
        Ok(Self { values, layer, model: model.into() })
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn p(&self) -> usize {
        self.values.cols()
    }
}

/// Linear kernel `X̂X̂ᵀ` of the column-centered activations.
pub fn centered_linear_kernel(x: &Matrix) -> Result<Matrix> {
    let centered = center_columns(x)?;
    let scale = x.frobenius_norm();
    if centered.frobenius_norm() <= 1e-12 * scale || scale == 0.0 {
        return Err(Error::Degenerate("activations have zero variance".into()));
    }
    centered.matmul_t(&centered)
}

/// `tr(K_X K_Y) / (n−1)²` for symmetric kernels of `n` samples.
pub fn hsic(kx: &Matrix, ky: &Matrix) -> Result<f64> {
    if kx.shape() != ky.shape() || kx.rows() != kx.cols() {
        return Err(Error::Contract(format!("HSIC needs equal square kernels, got {:?} and {:?}", kx.shape(), ky.shape())));
    }
    let n = kx.rows();
    if n < 2 {
        return Err(Error::Contract("HSIC needs at least 2 samples".into()));
    }
    // tr(K_X K_Y) = Σ_ij K_X[i,j] K_Y[j,i]; both kernels are symmetric.
    let trace: f64 = kx.as_slice().iter().zip(ky.as_slice()).map(|(a, b)| a * b).sum();
    let denom = (n - 1) as f64;
    Ok(trace / (denom * denom))
}

pub fn linear_cka(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64> {
    if x.n() != y.n() {
        return Err(Error::Contract(format!("CKA needs matching sample counts, got {} and {}", x.n(), y.n())));
    }
    let kx = centered_linear_kernel(&x.values)?;
    let ky = centered_linear_kernel(&y.values)?;
    let xy = hsic(&kx, &ky)?;
    let xx = hsic(&kx, &kx)?;
    let yy = hsic(&ky, &ky)?;
    if xx <= 0.0 || yy <= 0.0 {
        return Err(Error::Degenerate("activations have zero variance".into()));
    }
    Ok(xy / (xx * yy).sqrt())
}

/// Per-block activations of `plan` on `probe`.
pub fn collect_activations(
    base: &BaseModel,
    plan: &InferencePlan,
    probe: &[Sample],
    readout: Readout,
    model_tag: &str,
) -> Result<Vec<ActivationMatrix>> {
    if probe.len() < 2 {
        return Err(Error::Contract(format!("CKA probe needs at least 2 samples, got {}", probe.len())));
    }
    let n_blocks = base.config.n_blocks;
    let mut per_block: Vec<Vec<f64>> = vec![Vec::with_capacity(probe.len() * base.config.d_model); n_blocks];
    for sample in probe {
        for (b, hidden) in plan.block_outputs(base, sample)?.iter().enumerate() {
            per_block[b].extend(readout.apply(hidden));
        }
    }
    per_block
        .into_iter()
        .enumerate()
        .map(|(b, values)| {
            let p = values.len() / probe.len();
            ActivationMatrix::new(Matrix::from_vec(probe.len(), p, values)?, b, model_tag)
        })
        .collect()
}

/// CKA between two models' outputs at every block, on a shared probe set.
pub fn layerwise_scan(
    base: &BaseModel,
    model_a: &InferencePlan,
    model_b: &InferencePlan,
    probe: &[Sample],
    readout: Readout,
) -> Result<Vec<f64>> {
    if model_a.n_blocks() != base.config.n_blocks || model_b.n_blocks() != base.config.n_blocks {
        return Err(Error::Contract("both models must share the base architecture".into()));
    }
    let acts_a = collect_activations(base, model_a, probe, readout, "a")?;
    let acts_b = collect_activations(base, model_b, probe, readout, "b")?;
    acts_a.iter().zip(&acts_b).map(|(x, y)| linear_cka(x, y)).collect()
}

/// One row of the CKA heatmap table.
#[derive(Debug, Clone, PartialEq)]
pub struct CkaRow {
    pub pair: String,
    pub values: Vec<f64>,
}

/// Heatmap CSV: one row per model pair, one column per block, 9 decimals.
pub fn write_cka_csv(path: &Path, rows: &[CkaRow]) -> Result<()> {
    let n_blocks = rows.iter().map(|r| r.values.len()).max().unwrap_or(0);
    let mut out = String::from("pair");
    for b in 0..n_blocks {
        out.push_str(&format!(",block{b}"));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&row.pair);
        for v in &row.values {
            out.push_str(&format!(",{v:.9}"));
        }
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn act(m: Matrix) -> ActivationMatrix {
        ActivationMatrix::new(m, 0, "m").unwrap()
    }

    #[test]
    fn self_similarity_and_scale() {
        let mut rng = SeededRng::new(2);
        let x = Matrix::random_normal(10, 4, 1.0, &mut rng);
        assert!((linear_cka(&act(x.clone()), &act(x.clone())).unwrap() - 1.0).abs() <= 1e-12);
        assert!((linear_cka(&act(x.clone()), &act(x.scaled(3.0))).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        let constant = Matrix::from_vec(3, 2, vec![1.0; 6]).unwrap();
        let mut rng = SeededRng::new(1);
        let y = Matrix::random_normal(3, 2, 1.0, &mut rng);
        assert!(matches!(linear_cka(&act(constant), &act(y.clone())), Err(Error::Degenerate(_))));
        let short = Matrix::random_normal(4, 2, 1.0, &mut rng);
        assert!(matches!(linear_cka(&act(short), &act(y)), Err(Error::Contract(_))));
        assert!(ActivationMatrix::new(Matrix::zeros(1, 3), 0, "m").is_err());
    }

    #[test]
    fn symmetric_and_bounded() {
        let mut rng = SeededRng::new(7);
        for _ in 0..20 {
            let x = act(Matrix::random_normal(12, 3, 1.0, &mut rng));
            let y = act(Matrix::random_normal(12, 5, 2.0, &mut rng));
            let xy = linear_cka(&x, &y).unwrap();
            let yx = linear_cka(&y, &x).unwrap();
            assert!((xy - yx).abs() <= 1e-12);
            assert!(xy >= -1e-12 && xy <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn hsic_keeps_its_normalization() {
        // Two samples, one feature: centered [-1, 1] so K = [[1,-1],[-1,1]],
        // tr(K K) = 4, (n-1)^2 = 1.
        let k = centered_linear_kernel(&Matrix::from_rows(&[vec![0.0], vec![2.0]]).unwrap()).unwrap();
        assert_eq!(hsic(&k, &k).unwrap(), 4.0);
    }

    #[test]
    fn csv_has_nine_decimals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cka.csv");
        write_cka_csv(&path, &[CkaRow { pair: "a|b".into(), values: vec![1.0, 0.5] }]).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text, "pair,block0,block1\na|b,1.000000000,0.500000000\n");
    }
}
