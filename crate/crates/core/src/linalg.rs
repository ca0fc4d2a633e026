//! Minimal dense row-major tensor and the handful of kernels the guidance
//! pipeline needs.
//!
//! Every reduction accumulates left to right in index order, so results are
//! reproducible bit-for-bit across runs and platforms. Matrix routines treat a
//! tensor of any rank as `rows x cols`, where `cols` is the last dimension and
//! `rows` is the product of the leading ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor<T>", bound(deserialize = "T: Scalar"))]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

#[derive(Deserialize)]
struct RawTensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> TryFrom<RawTensor<T>> for Tensor<T> {
    type Error = Error;

    fn try_from(raw: RawTensor<T>) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// One-dimensional tensor.
    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(
                    "Tensor::from_rows",
                    format!("row {i} has {} columns, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    /// Convenience constructor from `f64` values, converted to `T`.
    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension (1 for a rank-0 tensor).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all leading dimensions.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Matrix transpose of the `rows x cols` view.
    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..c {
            for i in 0..r {
                data.push(self.data[i * c + j]);
            }
        }
        Self {
            shape: vec![c, r],
            data,
        }
    }

    /// Copies columns `start..end` of the matrix view.
    pub fn column_block(&self, start: usize, end: usize) -> Self {
        let (r, c) = (self.rows(), self.cols());
        assert!(start <= end && end <= c, "column block out of range");
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Self {
            shape: vec![r, w],
            data,
        }
    }

    /// Sum of absolute values over all elements.
    pub fn l1(&self) -> T {
        l1(&self.data)
    }
}

pub(crate) fn l1<T: Scalar>(xs: &[T]) -> T {
    let mut acc = T::zero();
    for &x in xs {
        acc += x.abs();
    }
    acc
}

fn check_same_shape<T>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::dim(
            op,
            format!("shapes {:?} and {:?} differ", a.shape, b.shape),
        ));
    }
    Ok(())
}

/// Matrix product of `a [m x k]` and `b [k x n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if a.shape.len() != 2 || b.shape.len() != 2 || k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("cannot multiply {:?} by {:?}", a.shape, b.shape),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = T::zero();
            for (p, &av) in a_row.iter().enumerate() {
                acc += av * b.data[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let mut out = a.clone();
    let c = a.cols();
    if c == 0 {
        return out;
    }
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mut max = T::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// L1 norm of every row over the last dimension; the output drops that
/// dimension.
pub fn l1_norm_lastdim<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let c = a.cols();
    let data = if c == 0 {
        vec![T::zero(); a.rows()]
    } else {
        a.data.chunks(c).map(l1).collect()
    };
    let shape = match a.shape.len() {
        0 | 1 => vec![data.len()],
        n => a.shape[..n - 1].to_vec(),
    };
    Tensor { shape, data }
}

fn zip_with<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    check_same_shape(op, a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("hadamard", a, b, |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|x| x * s)
}

/// `(1 - w) a + w b`, evaluated as `a + w (b - a)`.
///
/// Exact at `w = 0`, at `w = 1`, and wherever `a == b`.
pub fn lerp<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, w: T) -> Result<Tensor<T>> {
    if w == T::one() {
        check_same_shape("lerp", a, b)?;
        return Ok(b.clone());
    }
    zip_with("lerp", a, b, |x, y| x + w * (y - x))
}

/// `a + s (a - b)`: the extrapolation shared by output-space and
/// attention-space guidance.
pub fn extrapolate<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>, s: T) -> Result<Tensor<T>> {
    zip_with(op, a, b, |x, y| x + s * (x - y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
    }

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_selection() {
        let b = Tensor::from_rows(&[[3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
        let sel = matmul(
            &Tensor::from_rows(&[[1.0, 0.0]]).unwrap(),
            &Tensor::from_rows(&[[2.0], [7.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(sel.data(), &[2.0]);
        assert_eq!(sel.shape(), &[1, 1]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(vec![5, 4], &mut rng);
        let b = random(vec![4, 3], &mut rng);
        let got = matmul(&a, &b).unwrap();
        for (g, e) in got.data().iter().zip(triple_loop(&a, &b)) {
            assert!((g - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax_rows(&Tensor::from_rows(&[[1000.0, 0.0]]).unwrap());
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
        assert!(s.is_finite());

        let s = softmax_rows(&Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap());
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (k, v) in s.data().iter().enumerate() {
            let direct = ((k + 1) as f64).exp() / denom;
            assert!((v - direct).abs() <= 1e-12);
        }
    }

    #[test]
    fn l1_examples() {
        let t = Tensor::from_rows(&[[4.0, -2.0]]).unwrap();
        assert_eq!(l1_norm_lastdim(&t).data(), &[6.0]);
        let z = Tensor::<f64>::zeros(vec![1, 3]);
        assert_eq!(l1_norm_lastdim(&z).data(), &[0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(vec![3, 7], &mut rng);
        let n = l1_norm_lastdim(&a);
        assert_eq!(n.shape(), &[3]);
        for i in 0..3 {
            let oracle: f64 = (0..7).map(|j| a.get(i, j).abs()).sum();
            assert!((n.data()[i] - oracle).abs() <= 1e-12);
        }
    }

    #[test]
    fn elementwise_examples() {
        let a = Tensor::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap();
        let b = Tensor::from_rows(&[[4.0, 0.0], [-1.0, 2.0]]).unwrap();
        assert_eq!(lerp(&a, &b, 0.0).unwrap(), a);
        assert_eq!(lerp(&a, &b, 1.0).unwrap(), b);
        assert_eq!(scale(&a, 0.0).data(), &[0.0, -0.0, 0.0, 0.0]);
        assert_eq!(add(&a, &b).unwrap().data(), &[5.0, -2.0, -0.5, 5.0]);
        assert_eq!(sub(&a, &b).unwrap().data(), &[-3.0, -2.0, 1.5, 1.0]);
        assert_eq!(hadamard(&a, &b).unwrap().data(), &[4.0, -0.0, -0.5, 6.0]);
        let mid = lerp(&a, &b, 0.5).unwrap();
        assert_eq!(mid.data(), &[2.5, -1.0, -0.25, 2.5]);
        assert!(add(&a, &Tensor::zeros(vec![4])).is_err());
    }

    #[test]
    fn f32_kernels_agree_with_f64() {
        let a = Tensor::<f32>::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = matmul(&a, &a).unwrap();
        assert_eq!(p.data(), &[7.0, 10.0, 15.0, 22.0]);
        let s = softmax_rows(&a);
        assert!((s.row(0).iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn deserialize_validates_shape() {
        let bad = r#"{"shape":[2,2],"data":[1.0,2.0,3.0]}"#;
        assert!(serde_json::from_str::<Tensor<f64>>(bad).is_err());
        let good = r#"{"shape":[1,2],"data":[1.0,2.0]}"#;
        let t: Tensor<f64> = serde_json::from_str(good).unwrap();
        assert_eq!(t.shape(), &[1, 2]);
    }

    fn matrix(max: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1..=max, 1..=max).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-1e4f64..1e4, r * c).prop_map(move |d| (r, c, d))
        })
    }

    proptest! {
        #[test]
        fn matmul_oracle_all_small_shapes(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(vec![m, k], &mut rng);
            let b = random(vec![k, n], &mut rng);
            let got = matmul(&a, &b).unwrap();
            for (g, e) in got.data().iter().zip(triple_loop(&a, &b)) {
                prop_assert!((g - e).abs() <= 1e-12 * e.abs().max(1.0));
            }
        }

        #[test]
        fn softmax_rows_are_distributions((r, c, d) in matrix(8)) {
            let s = softmax_rows(&Tensor::new(vec![r, c], d).unwrap());
            for i in 0..r {
                let row = s.row(i);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn l1_is_absolutely_homogeneous((r, c, d) in matrix(8), k in -100f64..100.0) {
            let a = Tensor::new(vec![r, c], d).unwrap();
            let lhs = l1_norm_lastdim(&scale(&a, k));
            let rhs = l1_norm_lastdim(&a);
            for (x, y) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((x - k.abs() * y).abs() <= 1e-12 * (k.abs() * y).max(1.0));
            }
        }
    }
}
