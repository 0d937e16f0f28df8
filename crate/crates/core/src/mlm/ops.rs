//! Dense kernels shared by the forward and backward passes.

use num_traits::Float;

pub trait Real: Float + Default + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static {
    /// `C = alpha * A B + beta * C` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        // SAFETY: `gemm` checks every slice covers the strided extent.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        // SAFETY: `gemm` checks every slice covers the strided extent.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }

    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

#[inline]
pub fn r<T: Real>(x: f64) -> T {
    T::from_f64(x)
}

/// Row-major operand of shape `rows x cols`, optionally read transposed.
#[derive(Clone, Copy)]
pub struct Operand<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> Operand<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a b + beta c` where `c` is row-major `m x n`.
pub fn gemm<T: Real>(a: Operand<'_, T>, b: Operand<'_, T>, beta: T, c: &mut [T]) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "inner dimensions differ");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    assert!(c.len() >= m * n);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    T::gemm_raw(
        m,
        k,
        n,
        T::one(),
        a.data,
        rsa,
        csa,
        b.data,
        rsb,
        csb,
        beta,
        c,
        n as isize,
        1,
    );
}

/// `x W + bias` for `x` of shape `rows x in_dim` and `W` of `in_dim x out_dim`.
pub fn linear<T: Real>(x: &[T], rows: usize, w: &[T], bias: &[T], in_dim: usize, out_dim: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * out_dim);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    gemm(
        Operand::new(x, rows, in_dim),
        Operand::new(w, in_dim, out_dim),
        T::one(),
        &mut out,
    );
    out
}

/// Accumulates `dW += x^T dy` and `db += sum_rows dy`; returns `dx = dy W^T`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    dy: &[T],
    rows: usize,
    w: &[T],
    in_dim: usize,
    out_dim: usize,
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    gemm(
        Operand::new(x, rows, in_dim).t(),
        Operand::new(dy, rows, out_dim),
        T::one(),
        dw,
    );
    for row in dy.chunks_exact(out_dim) {
        for (g, v) in db.iter_mut().zip(row) {
            *g = *g + *v;
        }
    }
    let mut dx = vec![T::zero(); rows * in_dim];
    gemm(
        Operand::new(dy, rows, out_dim),
        Operand::new(w, in_dim, out_dim).t(),
        T::zero(),
        &mut dx,
    );
    dx
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Default)]
pub struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn layer_norm<T: Real>(
    x: &[T],
    dim: usize,
    gamma: &[T],
    beta: &[T],
    cache: Option<&mut LayerNormCache<T>>,
) -> Vec<T> {
    let rows = x.len() / dim;
    let mut out = vec![T::zero(); x.len()];
    let mut xhat_all = Vec::new();
    let mut inv_all = Vec::new();
    let keep = cache.is_some();
    if keep {
        xhat_all.reserve(x.len());
        inv_all.reserve(rows);
    }
    let n = r::<T>(dim as f64);
    let eps = r::<T>(LN_EPS);
    for (row, o) in x.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        for i in 0..dim {
            let xh = (row[i] - mean) * inv;
            o[i] = xh * gamma[i] + beta[i];
            if keep {
                xhat_all.push(xh);
            }
        }
        if keep {
            inv_all.push(inv);
        }
    }
    if let Some(c) = cache {
        c.xhat = xhat_all;
        c.inv_std = inv_all;
    }
    out
}

/// Returns `dx`; accumulates `dgamma` and `dbeta`.
pub fn layer_norm_backward<T: Real>(
    dy: &[T],
    dim: usize,
    gamma: &[T],
    cache: &LayerNormCache<T>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); dy.len()];
    let n = r::<T>(dim as f64);
    let mut dxhat = vec![T::zero(); dim];
    for (r_i, (dyr, dxr)) in dy.chunks_exact(dim).zip(dx.chunks_exact_mut(dim)).enumerate() {
        let xh = &cache.xhat[r_i * dim..(r_i + 1) * dim];
        let inv = cache.inv_std[r_i];
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for i in 0..dim {
            dgamma[i] = dgamma[i] + dyr[i] * xh[i];
            dbeta[i] = dbeta[i] + dyr[i];
            dxhat[i] = dyr[i] * gamma[i];
            mean_d = mean_d + dxhat[i];
            mean_dx = mean_dx + dxhat[i] * xh[i];
        }
        mean_d = mean_d / n;
        mean_dx = mean_dx / n;
        for i in 0..dim {
            dxr[i] = inv * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU, written as `x * sigmoid(2u)`.
pub fn gelu<T: Real>(x: T) -> T {
    let u = r::<T>(GELU_C) * (x + r::<T>(0.044715) * x * x * x);
    x / (T::one() + (-(u + u)).exp())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = r::<T>(GELU_C);
    let a = r::<T>(0.044715);
    let u = c * (x + a * x * x * x);
    let s = T::one() / (T::one() + (-(u + u)).exp());
    let du = c * (T::one() + r::<T>(3.0) * a * x * x);
    s + x * s * (T::one() - s) * (du + du)
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// `log(sum(exp(row)))`, computed stably.
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}
