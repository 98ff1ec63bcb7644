//! A small reverse-mode autodiff engine over dense row-major matrices.
//!
//! Every value is a 2-D [`Matrix`]; vectors are `1 x n` rows. Operations are
//! recorded on a [`Tape`] in creation order, which is already a topological
//! order, so [`Tape::backward`] is a single reverse sweep.
//!
//! Attention scores are laid out one query per row, so masked softmax
//! normalises along rows.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::iter::Sum;
use core::ops::{AddAssign, MulAssign, SubAssign};

/// Scalar type of the engine: `f32` for training, `f64` for gradient checks.
pub trait Float:
    num_traits::Float + Default + fmt::Debug + fmt::Display + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + Sum
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C += A · B` for strided `m x k` and `k x n` operands.
    ///
    /// # Safety
    /// Every index reachable through the dimensions and strides must lie
    /// inside the pointed-to allocations, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_acc(m: usize, k: usize, n: usize, a: *const Self, rsa: isize, csa: isize, b: *const Self, rsb: isize, csb: isize, c: *mut Self, rsc: isize, csc: isize);
}

impl Float for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_acc(m: usize, k: usize, n: usize, a: *const Self, rsa: isize, csa: isize, b: *const Self, rsb: isize, csb: isize, c: *mut Self, rsc: isize, csc: isize) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 1.0, c, rsc, csc)
    }
}

impl Float for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_acc(m: usize, k: usize, n: usize, a: *const Self, rsa: isize, csa: isize, b: *const Self, rsb: isize, csb: isize, c: *mut Self, rsc: isize, csc: isize) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 1.0, c, rsc, csc)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorError {
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    AllMaskedRow { row: usize },
    BadTarget { target: u32, classes: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {}x{} and {}x{}", lhs.0, lhs.1, rhs.0, rhs.1)
            }
            TensorError::AllMaskedRow { row } => write!(f, "masked softmax: row {row} is fully masked"),
            TensorError::BadTarget { target, classes } => {
                write!(f, "cross entropy: target {target} out of range for {classes} classes")
            }
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Float> fmt::Debug for Matrix<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}, {:?})", self.rows, self.cols, self.data)
    }
}

impl<F: Float> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: F) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[F]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn scalar(v: F) -> Self {
        Matrix::from_vec(1, 1, vec![v])
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: F) {
        self.data[i * self.cols + j] = v;
    }

    pub fn to_scalar(&self) -> F {
        assert_eq!(self.data.len(), 1, "not a scalar");
        self.data[0]
    }

    pub fn add_assign(&mut self, other: &Matrix<F>) {
        assert_eq!(self.shape(), other.shape());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += *b);
    }

    pub fn scale(&mut self, s: F) {
        self.data.iter_mut().for_each(|a| *a *= s);
    }

    pub fn transpose(&self) -> Matrix<F> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Float>(&self) -> Matrix<G> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }
}

/// Dense kernels shared by the tape and the tape-free incremental decoder.
pub mod kernels {
    use super::{Float, Matrix};
    use alloc::vec::Vec;

    /// Dot product with eight independent accumulators in a fixed order.
    #[inline]
    pub fn dot<F: Float>(a: &[F], b: &[F]) -> F {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = [F::zero(); 8];
        let chunks = a.len() / 8;
        for c in 0..chunks {
            let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
            for l in 0..8 {
                acc[l] += x[l] * y[l];
            }
        }
        let mut tail = F::zero();
        for i in chunks * 8..a.len() {
            tail += a[i] * b[i];
        }
        ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
    }

    #[inline]
    pub fn axpy<F: Float>(alpha: F, x: &[F], y: &mut [F]) {
        debug_assert_eq!(x.len(), y.len());
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += alpha * *xi;
        }
    }

    /// `c += a · b`
    pub fn gemm_nn<F: Float>(a: &Matrix<F>, b: &Matrix<F>, c: &mut Matrix<F>) {
        let (m, k) = a.shape();
        let n = b.cols();
        assert_eq!(b.rows(), k);
        assert_eq!(c.shape(), (m, n));
        if m * k * n == 0 {
            return;
        }
        // SAFETY: shapes checked above; row-major strides stay in bounds.
        unsafe {
            F::gemm_acc(m, k, n, a.data.as_ptr(), k as isize, 1, b.data.as_ptr(), n as isize, 1, c.data.as_mut_ptr(), n as isize, 1)
        }
    }

    /// `c += a · bᵀ`
    pub fn gemm_nt<F: Float>(a: &Matrix<F>, b: &Matrix<F>, c: &mut Matrix<F>) {
        let (m, k) = a.shape();
        let n = b.rows();
        assert_eq!(b.cols(), k);
        assert_eq!(c.shape(), (m, n));
        if m * k * n == 0 {
            return;
        }
        // SAFETY: as above, with `b` read through transposed strides.
        unsafe {
            F::gemm_acc(m, k, n, a.data.as_ptr(), k as isize, 1, b.data.as_ptr(), 1, k as isize, c.data.as_mut_ptr(), n as isize, 1)
        }
    }

    /// `c += aᵀ · b`
    pub fn gemm_tn<F: Float>(a: &Matrix<F>, b: &Matrix<F>, c: &mut Matrix<F>) {
        let (k, m) = a.shape();
        let n = b.cols();
        assert_eq!(b.rows(), k);
        assert_eq!(c.shape(), (m, n));
        if m * k * n == 0 {
            return;
        }
        // SAFETY: as above, with `a` read through transposed strides.
        unsafe {
            F::gemm_acc(m, k, n, a.data.as_ptr(), 1, m as isize, b.data.as_ptr(), n as isize, 1, c.data.as_mut_ptr(), n as isize, 1)
        }
    }

    pub fn matmul<F: Float>(a: &Matrix<F>, b: &Matrix<F>) -> Matrix<F> {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        gemm_nn(a, b, &mut c);
        c
    }

    pub fn matmul_nt<F: Float>(a: &Matrix<F>, b: &Matrix<F>) -> Matrix<F> {
        let mut c = Matrix::zeros(a.rows(), b.rows());
        gemm_nt(a, b, &mut c);
        c
    }

    pub fn add_row_in_place<F: Float>(x: &mut Matrix<F>, bias: &[F]) {
        let n = x.cols();
        for row in x.data_mut().chunks_mut(n) {
            row.iter_mut().zip(bias).for_each(|(a, b)| *a += *b);
        }
    }

    /// Stable softmax of one row in place; `-inf` entries come out exactly 0.
    /// Returns false if every entry is `-inf`.
    pub fn softmax_row<F: Float>(row: &mut [F]) -> bool {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        if max == F::neg_infinity() {
            return false;
        }
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = if *v == F::neg_infinity() { F::zero() } else { (*v - max).exp() };
            sum += *v;
        }
        let inv = F::one() / sum;
        row.iter_mut().for_each(|v| *v *= inv);
        true
    }

    /// Log-softmax of one row into `out` (natural log).
    pub fn log_softmax_row<F: Float>(row: &[F], out: &mut [F]) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = v - lse;
        }
    }

    /// Row-wise layer normalisation; also returns the normalised input and
    /// the per-row inverse standard deviations.
    pub fn layernorm<F: Float>(x: &Matrix<F>, gain: &[F], bias: &[F], eps: F) -> (Matrix<F>, Matrix<F>, Vec<F>) {
        let (m, h) = x.shape();
        let hf = F::of(h as f64);
        let mut y = Matrix::zeros(m, h);
        let mut xhat = Matrix::zeros(m, h);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<F>() / hf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / hf;
            let inv = F::one() / (var + eps).sqrt();
            inv_std.push(inv);
            let xr = xhat.row_mut(i);
            for j in 0..h {
                xr[j] = (row[j] - mean) * inv;
            }
            let yr = y.row_mut(i);
            let xr = xhat.row(i);
            for j in 0..h {
                yr[j] = xr[j] * gain[j] + bias[j];
            }
        }
        (y, xhat, inv_std)
    }

    const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const GELU_A: f64 = 0.044_715;

    /// Tanh approximation of GELU, evaluated as `x · σ(2u)` with
    /// `u = c(x + a x³)`, which equals `½x(1 + tanh u)`.
    #[inline]
    pub fn gelu<F: Float>(x: F) -> F {
        let u = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
        x / (F::one() + (-(u + u)).exp())
    }

    #[inline]
    pub fn gelu_grad<F: Float>(x: F) -> F {
        let c = F::of(GELU_C);
        let a = F::of(GELU_A);
        let u = c * (x + a * x * x * x);
        let s = F::one() / (F::one() + (-(u + u)).exp());
        let du = c * (F::one() + F::of(3.0) * a * x * x);
        s + x * s * (F::one() - s) * (du + du)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p, F> {
    Owned(Matrix<F>),
    Borrowed(&'p Matrix<F>),
}

impl<F> Value<'_, F> {
    fn get(&self) -> &Matrix<F> {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

enum Op<F> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix<F>,
        inv_std: Vec<F>,
    },
    Gelu(Var),
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    Dropout {
        x: Var,
        keep: Vec<F>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Transpose(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<u32>>,
        probs: Matrix<F>,
    },
}

struct Node<'p, F> {
    value: Value<'p, F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Records operations for one forward pass; parameters are borrowed, not copied.
pub struct Tape<'p, F: Float> {
    nodes: Vec<Node<'p, F>>,
    dropout_seed: Option<u64>,
    dropout_counter: u64,
}

/// SplitMix64 finaliser, used as a counter-based generator for dropout.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl<F: Float> Default for Tape<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, F: Float> Tape<'p, F> {
    /// Inference tape: dropout is the identity.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            dropout_seed: None,
            dropout_counter: 0,
        }
    }

    /// Training tape with dropout driven by `seed`.
    pub fn training(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            dropout_seed: Some(seed),
            dropout_counter: 0,
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_seed.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<F> {
        self.nodes[v.0].value.get()
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, m: Matrix<F>) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A trainable input whose gradient is reported under `index`.
    pub fn param(&mut self, m: &'p Matrix<F>, index: usize) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(m),
            op: Op::Param(index),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.cols() != bm.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: am.shape(),
                rhs: bm.shape(),
            });
        }
        let out = kernels::matmul(am, bm);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.cols() != bm.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: am.shape(),
                rhs: bm.shape(),
            });
        }
        let out = kernels::matmul_nt(am, bm);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulNT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.shape() != bm.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: am.shape(),
                rhs: bm.shape(),
            });
        }
        let mut out = am.clone();
        out.add_assign(bm);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a `1 x n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let (xm, rm) = (self.value(x), self.value(row));
        if rm.rows() != 1 || rm.cols() != xm.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: xm.shape(),
                rhs: rm.shape(),
            });
        }
        let mut out = xm.clone();
        kernels::add_row_in_place(&mut out, rm.data());
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(out, Op::AddRow(x, row), ng))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let mut out = self.value(x).clone();
        out.scale(s);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    /// Row-wise layer normalisation with `1 x H` gain and bias.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var, TensorError> {
        let (xm, g, b) = (self.value(x), self.value(gain), self.value(bias));
        if g.shape() != (1, xm.cols()) || b.shape() != (1, xm.cols()) {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm",
                lhs: xm.shape(),
                rhs: g.shape(),
            });
        }
        let (y, xhat, inv_std) = kernels::layernorm(xm, g.data(), b.data(), eps);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let out = Matrix::from_vec(xm.rows(), xm.cols(), xm.data().iter().map(|&v| kernels::gelu(v)).collect());
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Row-wise softmax of `scores + mask`, where `mask` holds `0` or `-inf`.
    pub fn masked_softmax(&mut self, scores: Var, mask: Option<&Matrix<F>>) -> Result<Var, TensorError> {
        let mut out = self.value(scores).clone();
        if let Some(mask) = mask {
            if mask.shape() != out.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_softmax",
                    lhs: out.shape(),
                    rhs: mask.shape(),
                });
            }
            out.data_mut().iter_mut().zip(mask.data()).for_each(|(s, m)| *s += *m);
        }
        let cols = out.cols();
        for (row, chunk) in out.data_mut().chunks_mut(cols.max(1)).enumerate() {
            if !kernels::softmax_row(chunk) {
                return Err(TensorError::AllMaskedRow { row });
            }
        }
        let ng = self.ng(scores);
        Ok(self.push(out, Op::Softmax(scores), ng))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var, TensorError> {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= t.rows() {
                return Err(TensorError::BadTarget {
                    target: id,
                    classes: t.rows(),
                });
            }
            out.row_mut(i).copy_from_slice(t.row(id as usize));
        }
        let ng = self.ng(table);
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }, ng))
    }

    /// Inverted dropout. Identity on inference tapes or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let Some(seed) = self.dropout_seed.filter(|_| p > 0.0) else {
            return x;
        };
        self.dropout_counter += 1;
        let stream = mix64(seed ^ mix64(self.dropout_counter));
        let scale = F::of(1.0 / (1.0 - p));
        let xm = self.value(x);
        let keep: Vec<F> = (0..xm.len() as u64)
            .map(|i| {
                let u = (mix64(stream.wrapping_add(i)) >> 11) as f64 / (1u64 << 53) as f64;
                if u < p {
                    F::zero()
                } else {
                    scale
                }
            })
            .collect();
        let out = Matrix::from_vec(
            xm.rows(),
            xm.cols(),
            xm.data().iter().zip(&keep).map(|(&v, &k)| v * k).collect(),
        );
        let ng = self.ng(x);
        self.push(out, Op::Dropout { x, keep }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var, TensorError> {
        let xm = self.value(x);
        if start + width > xm.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                lhs: xm.shape(),
                rhs: (start, width),
            });
        }
        let mut out = Matrix::zeros(xm.rows(), width);
        for i in 0..xm.rows() {
            out.row_mut(i).copy_from_slice(&xm.row(i)[start..start + width]);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let m = self.value(p);
            if m.rows() != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape(),
                    rhs: m.shape(),
                });
            }
            cols += m.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let m = self.value(p);
                out.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
                off += m.cols();
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let ng = self.ng(x);
        self.push(out, Op::Transpose(x), ng)
    }

    /// Summed negative log-likelihood over rows of `logits`; rows whose
    /// target is `None` are ignored. Returns a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<u32>]) -> Result<Var, TensorError> {
        let lm = self.value(logits);
        if lm.rows() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: lm.shape(),
                rhs: (targets.len(), 1),
            });
        }
        let v = lm.cols();
        let mut probs = Matrix::zeros(lm.rows(), v);
        let mut total = F::zero();
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t as usize >= v {
                return Err(TensorError::BadTarget { target: t, classes: v });
            }
            let pr = probs.row_mut(i);
            kernels::log_softmax_row(lm.row(i), pr);
            total -= pr[t as usize];
            pr.iter_mut().for_each(|p| *p = p.exp());
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Matrix::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse sweep from a `1 x 1` output. Returns one gradient per
    /// parameter index in `0..n_params` (zeros for unused parameters).
    pub fn backward(&self, output: Var, n_params: usize) -> Vec<Option<Matrix<F>>> {
        let mut grads: Vec<Option<Matrix<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, F::one()));
        let mut params: Vec<Option<Matrix<F>>> = (0..n_params).map(|_| None).collect();

        fn acc<F: Float>(grads: &mut [Option<Matrix<F>>], v: Var, g: Matrix<F>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        fn acc_with<F: Float>(
            grads: &mut [Option<Matrix<F>>],
            v: Var,
            shape: (usize, usize),
            f: impl FnOnce(&mut Matrix<F>),
        ) {
            let slot = &mut grads[v.0];
            if slot.is_none() {
                *slot = Some(Matrix::zeros(shape.0, shape.1));
            }
            f(slot.as_mut().unwrap());
        }

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => match &mut params[*p] {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let (am, bm) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        acc_with(&mut grads, *a, am.shape(), |ga| kernels::gemm_nt(&g, bm, ga));
                    }
                    if self.ng(*b) {
                        acc_with(&mut grads, *b, bm.shape(), |gb| kernels::gemm_tn(am, &g, gb));
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (am, bm) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        acc_with(&mut grads, *a, am.shape(), |ga| kernels::gemm_nn(&g, bm, ga));
                    }
                    if self.ng(*b) {
                        acc_with(&mut grads, *b, bm.shape(), |gb| kernels::gemm_tn(&g, am, gb));
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::AddRow(x, row) => {
                    if self.ng(*row) {
                        let mut gr = Matrix::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            gr.data_mut().iter_mut().zip(g.row(i)).for_each(|(a, b)| *a += *b);
                        }
                        acc(&mut grads, *row, gr);
                    }
                    if self.ng(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Scale(x, s) => {
                    let mut gx = g;
                    gx.scale(*s);
                    acc(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gm = self.value(*gain);
                    let (m, h) = g.shape();
                    if self.ng(*gain) || self.ng(*bias) {
                        let mut gg = Matrix::zeros(1, h);
                        let mut gb = Matrix::zeros(1, h);
                        for i in 0..m {
                            let (gr, xr) = (g.row(i), xhat.row(i));
                            for j in 0..h {
                                gg.data_mut()[j] += gr[j] * xr[j];
                                gb.data_mut()[j] += gr[j];
                            }
                        }
                        if self.ng(*gain) {
                            acc(&mut grads, *gain, gg);
                        }
                        if self.ng(*bias) {
                            acc(&mut grads, *bias, gb);
                        }
                    }
                    if self.ng(*x) {
                        let hf = F::of(h as f64);
                        let mut gx = Matrix::zeros(m, h);
                        let mut dxhat = vec![F::zero(); h];
                        for i in 0..m {
                            let (gr, xr) = (g.row(i), xhat.row(i));
                            let mut s1 = F::zero();
                            let mut s2 = F::zero();
                            for j in 0..h {
                                dxhat[j] = gr[j] * gm.data()[j];
                                s1 += dxhat[j];
                                s2 += dxhat[j] * xr[j];
                            }
                            let k = inv_std[i] / hf;
                            let out = gx.row_mut(i);
                            for j in 0..h {
                                out[j] = k * (hf * dxhat[j] - s1 - xr[j] * s2);
                            }
                        }
                        acc(&mut grads, *x, gx);
                    }
                }
                Op::Gelu(x) => {
                    let xm = self.value(*x);
                    let mut gx = g;
                    gx.data_mut()
                        .iter_mut()
                        .zip(xm.data())
                        .for_each(|(d, &v)| *d *= kernels::gelu_grad(v));
                    acc(&mut grads, *x, gx);
                }
                Op::Softmax(x) => {
                    let y = node.value.get();
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let s: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let out = gx.row_mut(i);
                        for j in 0..yr.len() {
                            out[j] = yr[j] * (gr[j] - s);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Gather { table, ids } => {
                    let shape = self.value(*table).shape();
                    acc_with(&mut grads, *table, shape, |gt| {
                        for (i, &id) in ids.iter().enumerate() {
                            let dst = gt.row_mut(id as usize);
                            dst.iter_mut().zip(g.row(i)).for_each(|(a, b)| *a += *b);
                        }
                    });
                }
                Op::Dropout { x, keep } => {
                    let mut gx = g;
                    gx.data_mut().iter_mut().zip(keep).for_each(|(d, &k)| *d *= k);
                    acc(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let shape = self.value(*x).shape();
                    let w = g.cols();
                    acc_with(&mut grads, *x, shape, |gx| {
                        for i in 0..g.rows() {
                            gx.row_mut(i)[*start..*start + w]
                                .iter_mut()
                                .zip(g.row(i))
                                .for_each(|(a, b)| *a += *b);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.ng(p) {
                            let mut gp = Matrix::zeros(g.rows(), w);
                            for i in 0..g.rows() {
                                gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                            }
                            acc(&mut grads, p, gp);
                        }
                        off += w;
                    }
                }
                Op::Transpose(x) => acc(&mut grads, *x, g.transpose()),
                Op::CrossEntropy { logits, targets, probs } => {
                    let scale = g.to_scalar();
                    let mut gl = probs.clone();
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            gl.row_mut(i)[*t as usize] -= F::one();
                        }
                    }
                    gl.scale(scale);
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand::{RngCore, SeedableRng};

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        let data = (0..r * c)
            .map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0)
            .collect();
        Matrix::from_vec(r, c, data)
    }

    /// Central finite-difference check of `f` with respect to every entry of
    /// every input. `f` builds a scalar on a fresh tape from parameter vars.
    fn grad_check(inputs: &[Matrix<f64>], f: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, m)| tape.param(m, i)).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out, inputs.len());
        let h = 1e-5;
        for (pi, m) in inputs.iter().enumerate() {
            for k in 0..m.len() {
                let eval = |delta: f64| {
                    let mut perturbed: Vec<Matrix<f64>> = inputs.to_vec();
                    perturbed[pi].data_mut()[k] += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = perturbed.iter().enumerate().map(|(i, m)| t.param(m, i)).collect();
                    let o = f(&mut t, &vs);
                    t.value(o).to_scalar()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let analytic = grads[pi].as_ref().map_or(0.0, |g| g.data()[k]);
                let denom = numeric.abs().max(analytic.abs()).max(1e-6);
                let rel = (numeric - analytic).abs() / denom;
                assert!(rel <= 1e-6, "input {pi} entry {k}: analytic {analytic} numeric {numeric} rel {rel}");
            }
        }
    }

    /// Contracts an arbitrary matrix against fixed weights so every output
    /// entry receives a distinct upstream gradient.
    fn weigh(tape: &mut Tape<'_, f64>, x: Var) -> Var {
        let (r, c) = tape.value(x).shape();
        let w = Matrix::from_vec(r, c, (0..r * c).map(|i| 0.3 + 0.17 * i as f64).collect());
        let wv = tape.constant(w);
        let t = tape.transpose(wv);
        let prod = tape.matmul(x, t).unwrap();
        let eye = tape.constant(Matrix::from_vec(r, r, (0..r * r).map(|i| if i % (r + 1) == 0 { 1.0 } else { 0.0 }).collect()));
        let tr = tape.matmul_nt(prod, eye).unwrap();
        let ones = tape.constant(Matrix::filled(1, r, 1.0));
        let s = tape.matmul(ones, tr).unwrap();
        let ones_c = tape.constant(Matrix::filled(r, 1, 1.0));
        tape.matmul(s, ones_c).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[1.0], &[1.0]]);
        assert_eq!(kernels::matmul(&a, &b), Matrix::from_rows(&[&[3.0], &[7.0]]));
        let eye = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(kernels::matmul(&eye, &a), a);
        let mut tape = Tape::<f64>::new();
        let (x, y) = (tape.constant(a.clone()), tape.constant(a.clone()));
        let bad = tape.constant(Matrix::zeros(3, 1));
        assert!(tape.matmul(x, y).is_ok());
        assert!(matches!(tape.matmul(x, bad), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_matrix(&mut rng, 3, 4);
        let b = rand_matrix(&mut rng, 4, 2);
        grad_check(&[a, b], |t, v| {
            let p = t.matmul(v[0], v[1]).unwrap();
            weigh(t, p)
        });
        let a = rand_matrix(&mut rng, 3, 4);
        let b = rand_matrix(&mut rng, 5, 4);
        grad_check(&[a, b], |t, v| {
            let p = t.matmul_nt(v[0], v[1]).unwrap();
            weigh(t, p)
        });
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Matrix::zeros(2, 2));
        let p = tape.masked_softmax(s, None).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5, 0.5, 0.5]);

        let mask = Matrix::from_rows(&[&[0.0, f64::NEG_INFINITY, 0.0], &[0.0, 0.0, 0.0]]);
        let s = tape.constant(Matrix::from_rows(&[&[1.0, 5.0, 1.0], &[1.0, 2.0, 3.0]]));
        let p = tape.masked_softmax(s, Some(&mask)).unwrap();
        assert_eq!(tape.value(p).get(0, 1), 0.0);
        assert_eq!(tape.value(p).get(0, 0), 0.5);

        let all = Matrix::filled(1, 2, f64::NEG_INFINITY);
        let s = tape.constant(Matrix::zeros(1, 2));
        assert_eq!(tape.masked_softmax(s, Some(&all)), Err(TensorError::AllMaskedRow { row: 0 }));
    }

    #[test]
    fn softmax_rows_normalised() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let scores = rand_matrix(&mut rng, 6, 6);
            let mut mask = Matrix::zeros(6, 6);
            for i in 0..6 {
                for j in i + 1..6 {
                    mask.set(i, j, f64::NEG_INFINITY);
                }
            }
            let mut tape = Tape::new();
            let s = tape.constant(scores.cast::<f32>().cast());
            let p = tape.masked_softmax(s, Some(&mask)).unwrap();
            for i in 0..6 {
                let row = tape.value(p).row(i);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row[i + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_matrix(&mut rng, 3, 3);
        let mask = Matrix::from_rows(&[
            &[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY],
            &[0.0, 0.0, f64::NEG_INFINITY],
            &[f64::NEG_INFINITY, 0.0, 0.0],
        ]);
        grad_check(&[x], |t, v| {
            let p = t.masked_softmax(v[0], Some(&mask)).unwrap();
            weigh(t, p)
        });
    }

    #[test]
    fn layernorm_examples() {
        let g = Matrix::filled(1, 3, 1.0);
        let b = Matrix::zeros(1, 3);
        let x = Matrix::filled(1, 3, 4.0);
        let (y, _, _) = kernels::layernorm(&x, g.data(), b.data(), 1e-5);
        assert!(y.data().iter().all(|&v| v == 0.0));
        let x = Matrix::from_rows(&[&[1.0f64, -1.0]]);
        let (y, _, _) = kernels::layernorm(&x, &[1.0, 1.0], &[0.0, 0.0], 1e-12);
        assert!((y.get(0, 0) - 1.0).abs() < 1e-9 && (y.get(0, 1) + 1.0).abs() < 1e-9);
    }

    #[test]
    fn layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_matrix(&mut rng, 2, 5);
        let g = rand_matrix(&mut rng, 1, 5);
        let b = rand_matrix(&mut rng, 1, 5);
        grad_check(&[x, g, b], |t, v| {
            let y = t.layernorm(v[0], v[1], v[2], 1e-5).unwrap();
            weigh(t, y)
        });
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Matrix::from_rows(&[&[0.0, 0.0]]));
        let ce = tape.cross_entropy(l, &[Some(0)]).unwrap();
        assert!((tape.value(ce).to_scalar() - core::f64::consts::LN_2).abs() < 1e-12);

        let l = tape.constant(Matrix::from_rows(&[&[1000.0, 0.0]]));
        let ce = tape.cross_entropy(l, &[Some(0)]).unwrap();
        let v = tape.value(ce).to_scalar();
        assert!(v.is_finite() && v.abs() < 1e-12);

        let l = tape.constant(Matrix::from_rows(&[&[0.0, 0.0]]));
        assert_eq!(
            tape.cross_entropy(l, &[Some(2)]),
            Err(TensorError::BadTarget { target: 2, classes: 2 })
        );
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = Matrix::from_rows(&[&[0.5, -1.0, 2.0]]);
        let mut tape = Tape::<f64>::new();
        let l = tape.param(&logits, 0);
        let ce = tape.cross_entropy(l, &[Some(1)]).unwrap();
        let g = tape.backward(ce, 1).remove(0).unwrap();
        let z: f64 = logits.data().iter().map(|v| v.exp()).sum();
        for j in 0..3 {
            let expect = logits.get(0, j).exp() / z - if j == 1 { 1.0 } else { 0.0 };
            assert!((g.get(0, j) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_matrix(&mut rng, 3, 4);
        let r = rand_matrix(&mut rng, 1, 4);
        let table = rand_matrix(&mut rng, 5, 4);
        grad_check(&[x, r, table], |t, v| {
            let a = t.add_row(v[0], v[1]).unwrap();
            let a = t.gelu(a);
            let e = t.embedding(v[2], &[4, 0, 4]).unwrap();
            let s = t.add(a, e).unwrap();
            let left = t.slice_cols(s, 0, 1).unwrap();
            let right = t.slice_cols(s, 1, 3).unwrap();
            let c = t.concat_cols(&[right, left]).unwrap();
            let c = t.scale(c, 0.7);
            let ce = t.cross_entropy(c, &[Some(1), None, Some(3)]).unwrap();
            let w = weigh(t, s);
            t.add(ce, w).unwrap()
        });
    }

    #[test]
    fn dropout_is_seeded_and_inert_at_inference() {
        let x = Matrix::filled(4, 8, 1.0f64);
        let run = |seed| {
            let mut t = Tape::training(seed);
            let v = t.constant(x.clone());
            let d = t.dropout(v, 0.5);
            t.value(d).clone()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
        let kept = run(7).data().iter().filter(|&&v| v != 0.0).count();
        assert!(kept > 4 && kept < 28);
        assert!(run(7).data().iter().all(|&v| v == 0.0 || v == 2.0));

        let mut t = Tape::new();
        let v = t.constant(x.clone());
        assert_eq!(t.dropout(v, 0.5), v);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(kernels::gelu(0.0f64), 0.0);
        assert!((kernels::gelu(1.0f64) - 0.841_192).abs() < 1e-5);
        assert!(kernels::gelu(-10.0f64).abs() < 1e-6);
    }
}
