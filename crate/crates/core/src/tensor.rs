//! Dense row-major `f64` tensors and the handful of vector kernels the
//! adapter needs outside of a gradient tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Builds a `rows × cols` matrix, panicking on a length mismatch.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Ok(Self::matrix(rows.len(), cols, rows.concat()))
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self::matrix(1, data.len(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count of a matrix; a 1-D tensor is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::matrix(c, r, out)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Little-endian byte image of the data, in row-major order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// `a · b` for matrices of shape `[m×k]` and `[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, (k, 1), &b.data, (n, 1), &mut out, false);
    Ok(Tensor::matrix(m, n, out))
}

/// `a · bᵀ` for `[m×k]` and `[n×k]`, the layout used for `W · x` with
/// weights stored `[out × in]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, (k, 1), &b.data, (1, k), &mut out, false);
    Ok(Tensor::matrix(m, n, out))
}

/// `c (+)= A · B` where A is `m×k` and B is `k×n`, both given with explicit
/// (row, col) strides so transposes are free.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths cover every index addressed through the strides
    // (m×k for a, k×n for b, m×n for c), checked by the callers' shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `W · x` for `W: [out × in]`.
pub fn matvec(w: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() {
        return Err(Error::ShapeMismatch {
            op: "matvec",
            left: w.shape.clone(),
            right: vec![x.len()],
        });
    }
    Ok((0..w.rows())
        .map(|i| w.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect())
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyInput("softmax"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Indices of the `k` largest entries, in ascending index order. Ties go to
/// the lower index.
pub fn top_k_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::InvalidArgument(format!(
            "top-k with k={k} on a vector of length {}",
            v.len()
        )));
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    // Stable sort keeps lower indices first among equal values.
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Zeroes all but the `k` largest entries; survivors keep their value.
pub fn top_k_mask(v: &[f64], k: usize) -> Result<Vec<f64>> {
    let keep = top_k_indices(v, k)?;
    let mut out = vec![0.0; v.len()];
    for i in keep {
        out[i] = v[i];
    }
    Ok(out)
}

/// Index of the maximum entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.get(i, p) * b.get(p, j);
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    #[test]
    fn identity_times_matrix() {
        let b = Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
    }

    #[test]
    fn zero_annihilates() {
        let b = Tensor::matrix(3, 2, vec![1.5, -2.0, 3.0, 0.25, 9.0, -7.0]);
        let z = Tensor::zeros(&[4, 3]);
        assert!(matmul(&z, &b).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_against_triple_loop() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::matrix(2, 1, vec![5.0, 6.0]);
        let oracle = naive_matmul(&a, &b);
        assert_eq!(oracle.data(), &[17.0, 39.0]);
        assert_eq!(matmul(&a, &b).unwrap(), oracle);
    }

    #[test]
    fn matmul_nt_matches_transpose() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]);
        let b = Tensor::matrix(4, 3, (0..12).map(|v| v as f64 * 0.3 - 1.0).collect());
        let direct = matmul_nt(&a, &b).unwrap();
        let via = naive_matmul(&a, &b.transpose());
        assert!(direct.max_abs_diff(&via) < 1e-12);
    }

    #[test]
    fn matmul_rejects_mismatch_with_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0; 4]).unwrap(), vec![0.25; 4]);
        let p = softmax(&[1.0, 0.0]).unwrap();
        // e / (e + 1) computed independently.
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.73106).abs() < 1e-5);
        assert!((p[1] - 0.26894).abs() < 1e-5);
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[f64::NAN]).is_err());
    }

    #[test]
    fn top_k_examples() {
        let v = [0.2, 0.5, 0.3];
        assert_eq!(top_k_mask(&v, 3).unwrap(), v.to_vec());
        assert_eq!(top_k_mask(&v, 1).unwrap(), vec![0.0, 0.5, 0.0]);
        assert_eq!(top_k_mask(&[0.4, 0.4, 0.2], 1).unwrap(), vec![0.4, 0.0, 0.0]);
        assert!(top_k_mask(&v, 0).is_err());
        assert!(top_k_mask(&v, 4).is_err());
    }

    #[test]
    fn top_k_agrees_with_exhaustive_argmax() {
        // Exhaustive oracle on a small grid of 3-vectors.
        let vals = [0.0, 0.1, 0.5, 0.9];
        for &a in &vals {
            for &b in &vals {
                for &c in &vals {
                    let v = [a, b, c];
                    let mut best = 0;
                    for i in 1..3 {
                        if v[i] > v[best] {
                            best = i;
                        }
                    }
                    let mut expect = [0.0; 3];
                    expect[best] = v[best];
                    assert_eq!(top_k_mask(&v, 1).unwrap(), expect.to_vec());
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_sums_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..32)) {
                let p = softmax(&v).unwrap();
                let s: f64 = p.iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
                prop_assert!(p.iter().all(|&x| x > 0.0 || x == 0.0));
            }

            #[test]
            fn softmax_shift_invariant(v in prop::collection::vec(-20.0f64..20.0, 1..16), c in -30.0f64..30.0) {
                let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
                let a = softmax(&v).unwrap();
                let b = softmax(&shifted).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }

            #[test]
            fn top_k_idempotent_and_sparse(v in prop::collection::vec(0.0f64..1.0, 1..12), k in 1usize..12) {
                let k = k.min(v.len());
                let once = top_k_mask(&v, k).unwrap();
                let twice = top_k_mask(&once, k).unwrap();
                prop_assert_eq!(&once, &twice);
                let nonzero = v.iter().filter(|&&x| x != 0.0).count();
                prop_assert_eq!(once.iter().filter(|&&x| x != 0.0).count(), k.min(nonzero));
            }

            #[test]
            fn matmul_associative(seed in 0u64..1000) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let mut m = || Tensor::matrix(4, 4, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect());
                let (a, b, c) = (m(), m(), m());
                let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
                let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
                prop_assert!(left.max_abs_diff(&right) < 1e-9);
            }
        }
    }
}
