//! Dense row-major matrices, a platform-stable seeded generator, and the
//! handful of statistics the rest of the crate is built on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Contract(format!(
                "matrix of {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    /// Builds a matrix from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Contract("ragged rows".into()));
            }
            values.extend_from_slice(row);
        }
        Ok(Self { rows: rows.len(), cols, values })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Self {
        let values = (0..rows * cols).map(|_| std * rng.normal()).collect();
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.values[j * self.rows + i] = self.values[i * self.cols + j];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Contract(format!(
                "matmul shape mismatch: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.values[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, other.row(k), out_row);
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`; rows of both operands are contiguous so this is the
    /// fast path for applying a `d_out × d_in` weight to row-vector inputs.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Contract(format!(
                "matmul_t shape mismatch: {:?} x {:?}ᵀ",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.values[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Contract(format!(
                "t_matmul shape mismatch: {:?}ᵀ x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, b, &mut out.values[i * other.cols..(i + 1) * other.cols]);
            }
        }
        Ok(out)
    }

    /// Matrix-vector product `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::Contract(format!(
                "matvec length mismatch: {} columns vs vector of {}",
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        axpy(alpha, &other.values, &mut self.values);
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, values })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> Result<f64> {
        if self.rows != self.cols {
            return Err(Error::Contract("trace of a non-square matrix".into()));
        }
        Ok((0..self.rows).map(|i| self[(i, i)]).sum())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Contract(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.values[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.values[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four accumulators let the compiler vectorize without reassociating.
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        sum += x * y;
    }
    sum
}

/// `y += alpha · x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `a·b / (‖a‖‖b‖)`, clamped to [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Contract(format!(
            "cosine similarity needs equal nonzero lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let denom = norm(a) * norm(b);
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::Degenerate("degenerate feature vector".into()));
    }
    // The sum is symmetric in (a, b) term by term, so the result is exactly
    // symmetric as well.
    Ok((dot(a, b) / denom).clamp(-1.0, 1.0))
}

/// Max-shifted softmax of `scores / temperature`.
pub fn softmax_with_temperature(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Domain("softmax of an empty score vector".into()));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Domain(format!("softmax temperature must be positive, got {temperature}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Domain("softmax scores must be finite".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Subtracts each column's mean.
pub fn center_columns(x: &Matrix) -> Result<Matrix> {
    if x.rows() == 0 {
        return Err(Error::Contract("cannot center a matrix with no rows".into()));
    }
    let n = x.rows() as f64;
    let mut means = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        axpy(1.0, x.row(i), &mut means);
    }
    means.iter_mut().for_each(|m| *m /= n);
    let mut out = x.clone();
    for i in 0..out.rows() {
        axpy(-1.0, &means, out.row_mut(i));
    }
    Ok(out)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Deterministic generator; ChaCha8 produces the same stream on every
/// platform for a given seed.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent stream for a named purpose, derived from `seed`.
    pub fn derived(seed: u64, label: &str) -> Self {
        Self::new(derive_seed(seed, label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

/// Mixes a label into a seed with FNV-1a followed by a splitmix64 finalizer.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap();
        assert!((c - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let err = cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
        assert!(cosine_similarity(&[], &[]).is_err());
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_with_temperature(&[-3.7], 0.3).unwrap(), vec![1.0]);
        assert_eq!(softmax_with_temperature(&[0.5, 0.5], 0.1).unwrap(), vec![0.5, 0.5]);
        let d = softmax_with_temperature(&[0.8, 0.6], 0.1).unwrap();
        // 1 / (1 + e^-2)
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((d[0] - expected).abs() < 1e-15);
        assert!((d[0] - 0.880797).abs() < 1e-6);
        assert!((d[1] - 0.119203).abs() < 1e-6);
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(softmax_with_temperature(&[], 1.0), Err(Error::Domain(_))));
        assert!(matches!(softmax_with_temperature(&[1.0], 0.0), Err(Error::Domain(_))));
        assert!(matches!(softmax_with_temperature(&[1.0], -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_survives_large_scores() {
        let d = softmax_with_temperature(&[1000.0, 999.0], 0.01).unwrap();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn center_examples() {
        let x = Matrix::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(center_columns(&x).unwrap().as_slice(), &[-1.0, 1.0]);
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let c = center_columns(&x).unwrap();
        assert_eq!(c.as_slice(), &[-2.0, -2.0, 0.0, 0.0, 2.0, 2.0]);
        let again = center_columns(&c).unwrap();
        assert!(again.max_abs_diff(&c).unwrap() < 1e-12);
    }

    #[test]
    fn center_rejects_empty() {
        assert!(center_columns(&Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = SeededRng::new(3);
        let a = Matrix::random_normal(4, 5, 1.0, &mut rng);
        let b = Matrix::random_normal(5, 3, 1.0, &mut rng);
        let ab = a.matmul(&b).unwrap();
        let via_t = a.matmul_t(&b.transpose()).unwrap();
        let via_tm = a.transpose().t_matmul(&b).unwrap();
        assert!(ab.max_abs_diff(&via_t).unwrap() < 1e-12);
        assert!(ab.max_abs_diff(&via_tm).unwrap() < 1e-12);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn seeded_streams_repeat() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        let xs: Vec<f64> = (0..16).map(|_| a.normal()).collect();
        let ys: Vec<f64> = (0..16).map(|_| b.normal()).collect();
        assert_eq!(xs, ys);
        assert_ne!(derive_seed(1, "base"), derive_seed(1, "encoder"));
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), n in 1usize..6, m in 1usize..6, k in 1usize..6, l in 1usize..6) {
            let mut rng = SeededRng::new(seed);
            let a = Matrix::random_normal(n, m, 1.0, &mut rng);
            let b = Matrix::random_normal(m, k, 1.0, &mut rng);
            let c = Matrix::random_normal(k, l, 1.0, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let rel = left.sub(&right).unwrap().frobenius_norm() / left.frobenius_norm().max(1e-300);
            prop_assert!(rel <= 1e-9);
        }

        #[test]
        fn softmax_is_a_distribution(scores in prop::collection::vec(-50.0f64..50.0, 1..12), t in 0.05f64..5.0) {
            let d = softmax_with_temperature(&scores, t).unwrap();
            // Large gaps at low temperature underflow to exactly zero.
            prop_assert!(d.iter().all(|v| *v >= 0.0));
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (s, v) in scores.iter().zip(&d) {
                if *s == top {
                    prop_assert!(*v > 0.0);
                }
            }
        }

        #[test]
        fn cosine_is_symmetric_and_bounded(a in prop::collection::vec(-10.0f64..10.0, 1..10), seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let b: Vec<f64> = (0..a.len()).map(|_| rng.normal()).collect();
            prop_assume!(norm(&a) > 1e-6);
            let ab = cosine_similarity(&a, &b).unwrap();
            let ba = cosine_similarity(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab.abs() <= 1.0 + 1e-12);
        }

        #[test]
        fn centering_is_idempotent(seed in any::<u64>(), n in 1usize..8, p in 1usize..5) {
            let mut rng = SeededRng::new(seed);
            let x = Matrix::random_normal(n, p, 3.0, &mut rng);
            let once = center_columns(&x).unwrap();
            let twice = center_columns(&once).unwrap();
            prop_assert!(once.max_abs_diff(&twice).unwrap() <= 1e-12);
        }
    }
}
