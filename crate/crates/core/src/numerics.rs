//! Dense kernels with a fixed reduction order.
//!
//! All reductions run over ascending indices on a single thread, so
//! repeated calls on identical inputs are bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskSpec;
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[S]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = S::one();
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[S]> {
        // chunks_exact panics on zero; an empty-column matrix has no row content
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Selects rows by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if self.rows > 0 && other.rows > 0 && self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot stack {} columns on {}",
                other.cols, self.cols
            )));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_mismatch("add", self.shape(), other.shape()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(shape_mismatch("elementwise", self.shape(), other.shape()));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    pub fn cast<T: Scalar>(&self) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        if self.shape() != other.shape() {
            return Err(shape_mismatch("compare", self.shape(), other.shape()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }
}

fn shape_mismatch(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!(
        "{op}: {}x{} vs {}x{}",
        a.0, a.1, b.0, b.1
    ))
}

/// Standard matrix product. Each output element accumulates over the inner
/// index in ascending order.
pub fn matmul<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> Result<Matrix<S>> {
    if a.cols != b.rows {
        return Err(shape_mismatch("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`, used where the right operand is naturally stored row-wise.
pub fn matmul_transposed<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> Result<Matrix<S>> {
    if a.cols != b.cols {
        return Err(shape_mismatch("matmul_transposed", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a.row(i), b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b`.
pub fn transposed_matmul<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> Result<Matrix<S>> {
    if a.rows != b.rows {
        return Err(shape_mismatch("transposed_matmul", a.shape(), b.shape()));
    }
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Softmax of one row in place over the entries where `allow` is true.
/// Masked entries are set to exactly zero. Returns `false` if nothing is
/// allowed.
pub fn softmax_in_place<S: Scalar>(row: &mut [S], allow: Option<&[bool]>) -> bool {
    let visible = |j: usize| allow.is_none_or(|a| a[j]);
    let mut max = S::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if visible(j) && v > max {
            max = v;
        }
    }
    if max == S::neg_infinity() {
        return false;
    }
    let mut sum = S::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if visible(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = S::zero();
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    true
}

/// Row-wise softmax, optionally restricted to the allowed entries of `mask`.
pub fn softmax_rows<S: Scalar>(m: &Matrix<S>, mask: Option<&MaskSpec>) -> Result<Matrix<S>> {
    if let Some(mask) = mask {
        if mask.queries() != m.rows || mask.keys() != m.cols {
            return Err(Error::Shape(format!(
                "mask {}x{} does not cover scores {}x{}",
                mask.queries(),
                mask.keys(),
                m.rows,
                m.cols
            )));
        }
    }
    let mut out = m.clone();
    for r in 0..m.rows {
        let allow = mask.map(|mk| mk.row(r));
        if !softmax_in_place(out.row_mut(r), allow) {
            return Err(Error::DegenerateRow { row: r });
        }
    }
    Ok(out)
}

/// Zero-mean, unit-variance normalisation followed by `gain * x + bias`.
pub fn layer_norm<S: Scalar>(v: &[S], gain: &[S], bias: &[S], eps: S) -> Result<Vec<S>> {
    if v.len() != gain.len() || v.len() != bias.len() {
        return Err(Error::Shape(format!(
            "layer_norm: input {}, gain {}, bias {}",
            v.len(),
            gain.len(),
            bias.len()
        )));
    }
    if v.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = vec![S::zero(); v.len()];
    layer_norm_into(v, gain, bias, eps, &mut out);
    Ok(out)
}

/// Unchecked variant used by the model; returns the inverse standard
/// deviation for reuse in backward passes.
pub(crate) fn layer_norm_into<S: Scalar>(v: &[S], gain: &[S], bias: &[S], eps: S, out: &mut [S]) -> S {
    let n = S::from_usize_lossy(v.len());
    let mean = v.iter().copied().sum::<S>() / n;
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / n;
    let rstd = S::one() / (var + eps).sqrt();
    for i in 0..v.len() {
        out[i] = (v[i] - mean) * rstd * gain[i] + bias[i];
    }
    rstd
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity<S: Scalar>(a: &[S], b: &[S]) -> Result<S> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine_similarity: lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == S::zero() || nb == S::zero() {
        return Err(Error::DegenerateVector);
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-S::one()).min(S::one()))
}

const GELU_K: f64 = 0.044715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = S::lit(0.5);
    half * x * (S::one() + (c * (x + S::lit(GELU_K) * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = S::lit(GELU_K);
    let half = S::lit(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (S::one() + S::lit(3.0) * k * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f32]]) -> Matrix<f32> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_times_matrix() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Matrix::identity(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn selection_row() {
        let out = m(&[&[1.0, 0.0]]).matmul(&m(&[&[5.0], &[7.0]])).unwrap();
        assert_eq!(out, m(&[&[5.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut oracle = [[0.0f64; 2]; 3];
        for (i, row) in oracle.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                for p in 0..4 {
                    *cell += a[i * 4 + p] * b[p * 2 + j];
                }
            }
        }
        let am = Matrix::from_vec(3, 4, a.iter().map(|&v| v as f32).collect()).unwrap();
        let bm = Matrix::from_vec(4, 2, b.iter().map(|&v| v as f32).collect()).unwrap();
        let c = am.matmul(&bm).unwrap();
        for (i, row) in oracle.iter().enumerate() {
            for (j, &o) in row.iter().enumerate() {
                assert!((c.get(i, j) as f64 - o).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::<f32>::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Shape(_))));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Matrix::from_vec(3, 5, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = Matrix::from_vec(4, 5, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let c = Matrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let x: Matrix<f64> = matmul_transposed(&a, &b).unwrap();
        let y = a.matmul(&b.transpose()).unwrap();
        assert!(x.max_abs_diff(&y).unwrap() < 1e-12);
        let x = transposed_matmul(&a, &c).unwrap();
        let y = a.transpose().matmul(&c).unwrap();
        assert!(x.max_abs_diff(&y).unwrap() < 1e-12);
    }

    #[test]
    fn softmax_uniform_row() {
        let s = softmax_rows(&m(&[&[2.5, 2.5, 2.5]]), None).unwrap();
        for &v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let s = softmax_rows(&m(&[&[0.0, 3f32.ln()]]), None).unwrap();
        assert!((s.get(0, 0) - 0.25).abs() < 1e-7);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-7);
    }

    #[test]
    fn softmax_masked_entry() {
        let mask = MaskSpec::from_allow(1, 3, vec![true, true, false]).unwrap();
        let s = softmax_rows(&m(&[&[0.0, 1.0, 2.0]]), Some(&mask)).unwrap();
        let e = std::f64::consts::E;
        assert!((s.get(0, 0) as f64 - 1.0 / (1.0 + e)).abs() < 1e-7);
        assert!((s.get(0, 1) as f64 - e / (1.0 + e)).abs() < 1e-7);
        assert_eq!(s.get(0, 2), 0.0);
    }

    #[test]
    fn softmax_fully_masked_row() {
        let err = MaskSpec::from_allow(2, 2, vec![true, false, false, false]).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 1 }));
        let mut row = [0.0f32, 1.0];
        assert!(!softmax_in_place(&mut row, Some(&[false, false])));
    }

    #[test]
    fn layer_norm_cases() {
        let ones = [1.0f32; 4];
        let zeros = [0.0f32; 4];
        let out = layer_norm(&[3.0f32; 4], &ones, &zeros, 1e-5).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-6));

        let out = layer_norm(&[1.0f64, -1.0], &[1.0, 1.0], &[0.0, 0.0], 1e-12).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-9 && (out[1] + 1.0).abs() < 1e-9);

        // scalar oracle: mean 2, var 2/3
        let eps = 1e-5f64;
        let rstd = 1.0 / (2.0f64 / 3.0 + eps).sqrt();
        let expect: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|x| (x - 2.0) * rstd * 2.0 + 1.0).collect();
        let out = layer_norm(&[1.0f32, 2.0, 3.0], &[2.0; 3], &[1.0; 3], eps as f32).unwrap();
        for (o, e) in out.iter().zip(&expect) {
            assert!((*o as f64 - e).abs() <= 1e-6);
        }

        assert!(matches!(
            layer_norm(&[1.0f32, 2.0], &[1.0], &[0.0, 0.0], 1e-5),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn cosine_cases() {
        assert!((cosine_similarity(&[3.0f32, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-7);
        assert_eq!(cosine_similarity(&[1.0f32, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0f64, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 0.70711).abs() < 1e-5);
        assert!(matches!(
            cosine_similarity(&[0.0f32, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector)
        ));
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            vals in prop::collection::vec(-30.0f32..30.0, 1..12),
            mask_bits in prop::collection::vec(any::<bool>(), 12),
        ) {
            let n = vals.len();
            let mut allow: Vec<bool> = mask_bits[..n].to_vec();
            allow[n - 1] = true;
            let mask = MaskSpec::from_allow(1, n, allow.clone()).unwrap();
            let s = softmax_rows(&Matrix::from_vec(1, n, vals).unwrap(), Some(&mask)).unwrap();
            let sum: f64 = s.row(0).iter().map(|&v| v as f64).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            for (j, &v) in s.row(0).iter().enumerate() {
                prop_assert!(v >= 0.0);
                if !allow[j] { prop_assert_eq!(v, 0.0); }
            }
        }

        #[test]
        fn cosine_self_and_symmetry(
            a in prop::collection::vec(-5.0f64..5.0, 1..16),
            b in prop::collection::vec(-5.0f64..5.0, 16),
        ) {
            prop_assume!(dot(&a, &a) > 1e-6);
            let b = &b[..a.len()];
            prop_assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            if dot(b, b) > 1e-6 {
                prop_assert_eq!(cosine_similarity(&a, b).unwrap(), cosine_similarity(b, &a).unwrap());
            }
        }

        #[test]
        fn matmul_is_reproducible(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::from_vec(4, 6, (0..24).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
            let b = Matrix::from_vec(6, 3, (0..18).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
            let x = a.matmul(&b).unwrap();
            let y = a.matmul(&b).unwrap();
            prop_assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
