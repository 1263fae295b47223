//! Dense row-major `f32` kernels shared by the attention, runner and
//! profiling code.
//!
//! Every kernel is pure: it allocates its output and never mutates its
//! inputs. Matrix products go through a blocked sgemm with a fixed blocking
//! order, so results are bitwise reproducible for a given thread setting.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable capping the number of threads used by matrix
/// products. Defaults to 1.
pub const THREADS_ENV: &str = "LATENCUT_THREADS";

/// sqrt(2/pi) and the cubic coefficient of the tanh GELU approximation.
const GELU_SQRT_2_OVER_PI: f32 = 0.797_884_6;
const GELU_CUBIC: f32 = 0.044_715;

/// Below this many multiply-adds a product always runs on one thread.
const PARALLEL_MIN_WORK: usize = 1 << 18;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim(
                    "from_rows",
                    format!("row {i} has {} columns, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Matrix {
        const BLOCK: usize = 32;
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i0 in (0..self.rows).step_by(BLOCK) {
            for j0 in (0..self.cols).step_by(BLOCK) {
                for i in i0..(i0 + BLOCK).min(self.rows) {
                    for j in j0..(j0 + BLOCK).min(self.cols) {
                        out.data[j * self.rows + i] = self.data[i * self.cols + j];
                    }
                }
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of columns `start..start + width`.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, width);
        for i in 0..self.rows {
            out.row_mut(i)
                .copy_from_slice(&self.row(i)[start..start + width]);
        }
        out
    }

    /// Writes `block` into columns `start..start + block.cols()`.
    pub fn set_column_block(&mut self, start: usize, block: &Matrix) {
        for i in 0..self.rows {
            let w = block.cols;
            self.row_mut(i)[start..start + w].copy_from_slice(block.row(i));
        }
    }
}

/// Rows of `m` at `indices`, in the given order.
pub fn gather_rows(m: &Matrix, indices: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(indices.len() * m.cols);
    for &i in indices {
        data.extend_from_slice(m.row(i));
    }
    Matrix {
        rows: indices.len(),
        cols: m.cols,
        data,
    }
}

pub fn kernel_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    })
}

/// Strided view of a row-major operand, optionally transposed.
#[derive(Clone, Copy)]
struct Operand<'a> {
    data: &'a [f32],
    row_stride: isize,
    col_stride: isize,
}

/// `c = a * b` where `a` is `m x k` and `b` is `k x n` (both as strided views).
fn gemm(m: usize, k: usize, n: usize, a: Operand<'_>, b: Operand<'_>, c: &mut [f32]) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    let threads = kernel_threads();
    if threads > 1 && m >= 2 * threads && m * n * k >= PARALLEL_MIN_WORK {
        let rows_per = m.div_ceil(threads);
        std::thread::scope(|s| {
            for (chunk_idx, c_chunk) in c.chunks_mut(rows_per * n).enumerate() {
                let row0 = chunk_idx * rows_per;
                let rows = c_chunk.len() / n;
                let a_off = row0 as isize * a.row_stride;
                let a_sub = Operand {
                    data: &a.data[a_off as usize..],
                    ..a
                };
                s.spawn(move || gemm_serial(rows, k, n, a_sub, b, c_chunk));
            }
        });
    } else {
        gemm_serial(m, k, n, a, b, c);
    }
}

fn gemm_serial(m: usize, k: usize, n: usize, a: Operand<'_>, b: Operand<'_>, c: &mut [f32]) {
    let last = |rows: usize, cols: usize, op: &Operand<'_>| {
        (rows as isize - 1) * op.row_stride + (cols as isize - 1) * op.col_stride
    };
    assert!((last(m, k, &a) as usize) < a.data.len());
    assert!((last(k, n, &b) as usize) < b.data.len());
    // SAFETY: the asserts above bound the largest offset touched in `a` and
    // `b`; `c` holds exactly m*n elements with row stride n.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn plain(m: &Matrix) -> Operand<'_> {
    Operand {
        data: &m.data,
        row_stride: m.cols as isize,
        col_stride: 1,
    }
}

fn transposed(m: &Matrix) -> Operand<'_> {
    Operand {
        data: &m.data,
        row_stride: 1,
        col_stride: m.cols as isize,
    }
}

/// Standard product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::dim(
            "matmul",
            format!("{}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm(a.rows, a.cols, b.cols, plain(a), plain(b), &mut out.data);
    Ok(out)
}

/// `a * b^T` without materialising the transpose.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::dim(
            "matmul_transposed",
            format!("{}x{} * ({}x{})^T", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    gemm(a.rows, a.cols, b.rows, plain(a), transposed(b), &mut out.data);
    Ok(out)
}

/// Affine map `x * w_t + b`, with `w_t` stored as `in_features x out_features`.
pub fn affine(x: &Matrix, w_t: &Matrix, b: &[f32]) -> Result<Matrix> {
    if b.len() != w_t.cols {
        return Err(Error::dim(
            "affine",
            format!("bias of length {} for {} outputs", b.len(), w_t.cols),
        ));
    }
    let mut out = matmul(x, w_t)?;
    add_bias(&mut out, b);
    Ok(out)
}

fn add_bias(out: &mut Matrix, b: &[f32]) {
    for i in 0..out.rows {
        for (o, &bias) in out.row_mut(i).iter_mut().zip(b) {
            *o += bias;
        }
    }
}

/// Affine map `x * w^T + b`, with `w` stored as `out_features x in_features`.
pub fn linear(x: &Matrix, w: &Matrix, b: &[f32]) -> Result<Matrix> {
    if b.len() != w.rows {
        return Err(Error::dim(
            "linear",
            format!("bias of length {} for {} outputs", b.len(), w.rows),
        ));
    }
    let mut out = matmul_transposed(x, w)?;
    add_bias(&mut out, b);
    Ok(out)
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    // f64 accumulation keeps long rows stochastic to ~1e-7.
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v = (*v as f64 * inv) as f32;
    }
}

/// Softmax of each row with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i));
    }
    out
}

/// Softmax of row `i` over its first `i + 1` entries; entries above the
/// diagonal are set to exactly zero.
pub fn causal_softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let visible = (i + 1).min(row.len());
        softmax_in_place(&mut row[..visible]);
        row[visible..].fill(0.0);
    }
    out
}

pub fn layer_norm(x: &Matrix, gain: &[f32], bias: &[f32], eps: f32) -> Result<Matrix> {
    if gain.len() != x.cols || bias.len() != x.cols {
        return Err(Error::dim(
            "layer_norm",
            format!(
                "gain {} / bias {} for {} columns",
                gain.len(),
                bias.len(),
                x.cols
            ),
        ));
    }
    let mut out = x.clone();
    let n = x.cols as f64;
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = row
            .iter()
            .map(|&v| (v as f64 - mean) * (v as f64 - mean))
            .sum::<f64>()
            / n;
        let inv = (var + eps as f64).sqrt().recip();
        for ((v, &g), &b) in row.iter_mut().zip(gain).zip(bias) {
            *v = ((*v as f64 - mean) * inv) as f32 * g + b;
        }
    }
    Ok(out)
}

pub fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

/// GELU, tanh approximation.
pub fn gelu(x: &Matrix) -> Matrix {
    map(x, gelu_scalar)
}

pub fn tanh_map(x: &Matrix) -> Matrix {
    map(x, f32::tanh)
}

fn map(x: &Matrix, f: impl Fn(f32) -> f32) -> Matrix {
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

/// Elementwise sum.
pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "add",
            format!("{:?} + {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

/// Multiplies every entry by `s`.
pub fn scale(m: &Matrix, s: f32) -> Matrix {
    map(m, |v| v * s)
}
