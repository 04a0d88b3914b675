//! Dense row-major rank-2 tensors and the forward primitives used by the
//! branch networks.
//!
//! Rows index points, columns index features or classes. Every kernel is
//! generic over [`Scalar`] so the same code runs in `f32` for experiments and
//! in `f64` for finite-difference gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// `c = a · b` for row/column-strided operands; `c` is overwritten.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

fn check_gemm_extent(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * strides.0 + (cols as isize - 1) * strides.1;
    assert!(
        strides.0 >= 0 && strides.1 >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                c: &mut [Self],
            ) {
                check_gemm_extent(a.len(), m, k, a_strides);
                check_gemm_extent(b.len(), k, n, b_strides);
                assert_eq!(c.len(), m * n, "gemm output size");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    c.fill(0.0);
                    return;
                }
                // SAFETY: operand extents were checked above against the
                // slice lengths, and `c` is a dense m×n buffer.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        0.0,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense `rows × cols` array stored row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &(self.rows, self.cols))
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Tensor::new",
                format!("{} elements for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, T::zero())
    }

    pub fn full(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a tensor from equally long rows.
    ///
    /// Panics if the rows are ragged; intended for fixtures.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// A `1 × n` row vector.
    pub fn row_vector(values: &[T]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[T] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [T] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> + '_ {
        // chunks_exact(0) panics, so guard the degenerate width
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape("zip_map", other.shape())?;
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

    pub fn expect_shape(&self, op: &'static str, shape: (usize, usize)) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::dim(
                op,
                format!("{}x{}", shape.0, shape.1),
                format!("{}x{}", self.rows, self.cols),
            ));
        }
        Ok(())
    }

    /// Sum over rows, one entry per column.
    pub fn column_sums(&self) -> Vec<T> {
        let mut sums = vec![T::zero(); self.cols];
        for row in self.iter_rows() {
            for (s, &v) in sums.iter_mut().zip(row) {
                *s = *s + v;
            }
        }
        sums
    }

    /// Row-wise argmax; ties go to the lowest column index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.iter_rows().map(argmax).collect()
    }

    /// Stacks tensors with equal column counts on top of each other.
    pub fn vstack(parts: &[&Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::dim("vstack", cols, p.cols));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Self { rows, cols, data })
    }

    /// Copies the rows at `indices` into a new tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::dim("matmul", self.cols, rhs.rows));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        T::gemm(
            self.rows,
            self.cols,
            rhs.cols,
            &self.data,
            (self.cols as isize, 1),
            &rhs.data,
            (rhs.cols as isize, 1),
            &mut out.data,
        );
        Ok(out)
    }

    /// `self · rhsᵀ`.
    pub fn matmul_nt(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(Error::dim("matmul_nt", self.cols, rhs.cols));
        }
        let mut out = Self::zeros(self.rows, rhs.rows);
        T::gemm(
            self.rows,
            self.cols,
            rhs.rows,
            &self.data,
            (self.cols as isize, 1),
            &rhs.data,
            (1, rhs.cols as isize),
            &mut out.data,
        );
        Ok(out)
    }

    /// `selfᵀ · rhs`.
    pub fn matmul_tn(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(Error::dim("matmul_tn", self.rows, rhs.rows));
        }
        let mut out = Self::zeros(self.cols, rhs.cols);
        T::gemm(
            self.cols,
            self.rows,
            rhs.cols,
            &self.data,
            (1, self.cols as isize),
            &rhs.data,
            (rhs.cols as isize, 1),
            &mut out.data,
        );
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `x · W + b` with `b` broadcast over rows.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if x.cols() != w.rows() {
        return Err(Error::dim("linear_forward", w.rows(), x.cols()));
    }
    b.expect_shape("linear_forward bias", (1, w.cols()))?;
    let mut out = x.matmul(w)?;
    for row in out.data.chunks_exact_mut(w.cols().max(1)) {
        for (o, &bias) in row.iter_mut().zip(&b.data) {
            *o = *o + bias;
        }
    }
    Ok(out)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(x.cols().max(1)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

/// Pulls a gradient with respect to softmax probabilities back to the logits:
/// `dz_j = p_j (g_j − Σ_k p_k g_k)`.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, grad_probs: &Tensor<T>) -> Result<Tensor<T>> {
    grad_probs.expect_shape("softmax_backward", probs.shape())?;
    let mut out = Tensor::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let g = grad_probs.row(i);
        let dot: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for (o, (&pj, &gj)) in out.row_mut(i).iter_mut().zip(p.iter().zip(g)) {
            *o = pj * (gj - dot);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    #[test]
    fn linear_identity_weights() {
        let x = Tensor::from_rows(&[[1.0f32, 2.0]]);
        let w = Tensor::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]);
        let b = Tensor::row_vector(&[0.0f32, 0.0]);
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_sums_products_plus_bias() {
        let x = Tensor::from_rows(&[[1.0f32, 1.0]]);
        let w = Tensor::from_rows(&[[2.0f32], [3.0]]);
        let b = Tensor::row_vector(&[1.0f32]);
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn linear_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 4, 3);
        let w = random(&mut rng, 3, 2);
        let b = random(&mut rng, 1, 2);
        let out = linear_forward(&x, &w, &b).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let mut acc = b.get(0, j);
                for k in 0..3 {
                    acc += x.get(i, k) * w.get(k, j);
                }
                assert!((out.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_rejects_shape_mismatch() {
        let x = Tensor::<f32>::zeros(2, 3);
        let w = Tensor::<f32>::zeros(2, 2);
        let b = Tensor::<f32>::zeros(1, 2);
        assert!(matches!(
            linear_forward(&x, &w, &b),
            Err(Error::Dimension { .. })
        ));
        let w = Tensor::<f32>::zeros(3, 2);
        let bad_bias = Tensor::<f32>::zeros(1, 3);
        assert!(linear_forward(&x, &w, &bad_bias).is_err());
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, 5, 3);
        let b = random(&mut rng, 4, 3);
        let c = random(&mut rng, 5, 2);
        let bt = Tensor::new(3, 4, (0..12).map(|i| b.get(i % 4, i / 4)).collect()).unwrap();
        let at = Tensor::new(3, 5, (0..15).map(|i| a.get(i % 5, i / 5)).collect()).unwrap();
        let nt = a.matmul_nt(&b).unwrap();
        let direct = a.matmul(&bt).unwrap();
        let tn = a.matmul_tn(&c).unwrap();
        let direct_tn = at.matmul(&c).unwrap();
        for (x, y) in nt.data().iter().zip(direct.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in tn.data().iter().zip(direct_tn.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::from_rows(&[[-1.0f32, 2.0]]);
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        let neg = Tensor::from_rows(&[[-1.0f32, -0.5, -3.0]]);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let p = softmax_rows(&Tensor::from_rows(&[[0.0f32, 0.0]]));
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax_rows(&Tensor::from_rows(&[[1000.0f32, 0.0]]));
        assert!(p.is_finite());
        assert!((p.get(0, 0) - 1.0).abs() < 1e-6);
        assert!(p.get(0, 1) < 1e-6);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let p = softmax_rows(&Tensor::from_rows(&[[1.0f64, 2.0, 3.0]]));
        let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (j, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((p.get(0, j) - v.exp() / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let t = Tensor::from_rows(&[[0.5f32, 0.5], [0.2, 0.8], [1.0, 1.0]]);
        assert_eq!(t.argmax_rows(), vec![0, 1, 0]);
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = random(&mut rng, 3, 4);
        let g = random(&mut rng, 3, 4);
        let f = |z: &Tensor<f64>| -> f64 {
            let p = softmax_rows(z);
            p.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let analytic = softmax_backward(&softmax_rows(&z), &g).unwrap();
        let h = 1e-6;
        for idx in 0..12 {
            let mut plus = z.clone();
            plus.data_mut()[idx] += h;
            let mut minus = z.clone();
            minus.data_mut()[idx] -= h;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            assert!((analytic.data()[idx] - numeric).abs() < 1e-8);
        }
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_are_distributions(values in proptest::collection::vec(-50.0f32..50.0, 1..40)) {
            let cols = 1 + values.len() % 5;
            let rows = values.len() / cols;
            proptest::prop_assume!(rows > 0);
            let x = Tensor::new(rows, cols, values[..rows * cols].to_vec()).unwrap();
            let p = softmax_rows(&x);
            for row in p.iter_rows() {
                let s: f32 = row.iter().sum();
                proptest::prop_assert!((s - 1.0).abs() < 1e-6);
                proptest::prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
