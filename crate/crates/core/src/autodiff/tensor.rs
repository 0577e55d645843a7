//! Dense row-major `f64` tensors of rank 0, 1, or 2.
//!
//! Every tensor is viewed as a `rows x cols` matrix for broadcasting and
//! matrix products: rank 0 is `1 x 1`, rank 1 `[n]` is a row `1 x n`.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert!(shape.len() <= 2, "only rank <= 2 tensors are supported");
        assert!(shape.iter().all(|&d| d > 0), "dimensions must be positive");
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n])
    }

    /// Build a `rows x cols` matrix from row slices.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty());
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    /// Column vector `[n, 1]`.
    pub fn column(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(vec![n, 1], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        rows_cols(&self.shape).0
    }

    pub fn cols(&self) -> usize {
        rows_cols(&self.shape).1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Rows selected by index, preserving column layout.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![idx.len(), c], data)
    }

    /// Repeat every row `times` times consecutively.
    pub fn repeat_rows(&self, times: usize) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(self.len() * times);
        for i in 0..self.rows() {
            for _ in 0..times {
                data.extend_from_slice(self.row(i));
            }
        }
        Tensor::new(vec![self.rows() * times, c], data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => unreachable!("rank > 2"),
    }
}

/// Broadcast two shapes under the `rows x cols` view.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let (ar, ac) = rows_cols(a);
    let (br, bc) = rows_cols(b);
    let r = broadcast_dim(ar, br, a, b);
    let c = broadcast_dim(ac, bc, a, b);
    match a.len().max(b.len()) {
        0 => vec![],
        1 => vec![c],
        _ => vec![r, c],
    }
}

fn broadcast_dim(x: usize, y: usize, a: &[usize], b: &[usize]) -> usize {
    if x == y || y == 1 {
        x
    } else if x == 1 {
        y
    } else {
        panic!("shapes {a:?} and {b:?} do not broadcast")
    }
}

/// Element-wise binary op with broadcasting.
pub(crate) fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape == b.shape {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(&a.shape, &b.shape);
    let (r, c) = rows_cols(&shape);
    let (ars, acs) = strides(&a.shape);
    let (brs, bcs) = strides(&b.shape);
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(f(a.data[i * ars + j * acs], b.data[i * brs + j * bcs]));
        }
    }
    Tensor { shape, data }
}

/// Row and column strides under broadcasting (0 along broadcast axes).
pub(crate) fn strides(shape: &[usize]) -> (usize, usize) {
    let (r, c) = rows_cols(shape);
    (if r == 1 { 0 } else { c }, if c == 1 { 0 } else { 1 })
}

/// Sum a gradient of shape `from` down to `to` (inverse of broadcasting).
pub(crate) fn reduce_to(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let (r, c) = rows_cols(from);
    let (tr, tc) = rows_cols(to);
    let (rs, cs) = strides(to);
    let mut out = vec![0.0; tr * tc];
    for i in 0..r {
        for j in 0..c {
            out[i * rs + j * cs] += grad[i * c + j];
        }
    }
    out
}

/// `c (+)= op(a) * op(b)` where `op` optionally transposes. Dimensions are
/// those of the product: `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths were checked against the declared dimensions and
    // the strides address exactly those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = rows_cols(&a.shape);
    let (k2, n) = rows_cols(&b.shape);
    assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", a.shape, b.shape);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, &mut out, false);
    Tensor::new(vec![m, n], out)
}

/// Concatenate along the column axis. All parts share a row count.
pub(crate) fn concat_cols(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let rows = parts[0].rows();
    assert!(parts.iter().all(|p| p.rows() == rows), "concat row mismatch");
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(vec![rows, cols], data)
}

pub(crate) fn slice_cols(t: &Tensor, start: usize, end: usize) -> Tensor {
    assert!(start < end && end <= t.cols(), "bad column slice {start}..{end}");
    let rows = t.rows();
    let mut data = Vec::with_capacity(rows * (end - start));
    for i in 0..rows {
        data.extend_from_slice(&t.row(i)[start..end]);
    }
    Tensor::new(vec![rows, end - start], data)
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// tanh(softplus(x)) = n / (n + 2) with n = e^x (e^x + 2): one exp per element.
// Beyond x = 20 the ratio is 1 to within 1e-17.
const MISH_LINEAR_ABOVE: f64 = 20.0;

pub(crate) fn mish(x: f64) -> f64 {
    if x > MISH_LINEAR_ABOVE {
        return x;
    }
    let w = x.exp();
    let n = w * (w + 2.0);
    x * n / (n + 2.0)
}

pub(crate) fn mish_grad(x: f64) -> f64 {
    if x > MISH_LINEAR_ABOVE {
        return 1.0;
    }
    let w = x.exp();
    let n = w * (w + 2.0);
    let d = n + 2.0;
    n / d + 4.0 * x * w * (1.0 + w) / (d * d)
}
