//! Raw numeric kernels shared by the forward and backward passes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strides of a logical `rows × cols` matrix stored row-major, either as is
/// or as its transpose.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Layout {
    /// Logical matrix with `cols` columns stored row-major as is.
    pub fn plain(cols: usize) -> Self {
        Layout {
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Logical matrix that is the transpose of a stored row-major matrix
    /// with `stored_cols` columns (equal to the logical row count).
    pub fn transposed(stored_cols: usize) -> Self {
        Layout {
            row_stride: 1,
            col_stride: stored_cols,
        }
    }

    fn span(&self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.row_stride + (cols - 1) * self.col_stride + 1
    }
}

/// `C ← beta·C + A·B` for logical `A: m×k`, `B: k×n`, `C: m×n` (row-major).
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    beta: f64,
) {
    gemm_general(m, k, n, 1.0, a, la, b, lb, c, Layout::plain(n), beta);
}

/// `C ← beta·C + alpha·A·B` with arbitrary strides for all three operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_general(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    lc: Layout,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= lc.span(m, n), "gemm: output buffer too small");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * lc.row_stride + j * lc.col_stride] *= beta;
            }
        }
        return;
    }
    assert!(a.len() >= la.span(m, k), "gemm: lhs buffer too small");
    assert!(b.len() >= lb.span(k, n), "gemm: rhs buffer too small");
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.row_stride as isize,
            la.col_stride as isize,
            b.as_ptr(),
            lb.row_stride as isize,
            lb.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            lc.row_stride as isize,
            lc.col_stride as isize,
        );
    }
}

/// Pointwise nonlinearities available to the feed-forward blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Elu,
    Gelu,
    Tanh,
}

pub const LEAKY_SLOPE: f64 = 0.01;
pub const ELU_ALPHA: f64 = 1.0;
const GELU_C: f64 = 0.044_715;
// sqrt(2/pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

impl Activation {
    pub const ALL: [Activation; 5] = [
        Activation::Relu,
        Activation::LeakyRelu,
        Activation::Elu,
        Activation::Gelu,
        Activation::Tanh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Elu => "elu",
            Activation::Gelu => "gelu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    ELU_ALPHA * x.exp_m1()
                }
            }
            Activation::Gelu => gelu(x).0,
            Activation::Tanh => x.tanh(),
        }
    }

    /// Value and derivative at `x`, sharing the transcendental evaluation.
    pub fn apply_with_derivative(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Tanh => {
                let t = x.tanh();
                (t, 1.0 - t * t)
            }
            Activation::Elu if x <= 0.0 => {
                let e = x.exp_m1();
                (ELU_ALPHA * e, ELU_ALPHA * (e + 1.0))
            }
            _ => (self.apply(x), self.derivative(x)),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    ELU_ALPHA * x.exp()
                }
            }
            Activation::Gelu => gelu(x).1,
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Tanh-approximated GELU and its derivative, evaluated through the
/// identity `0.5 * (1 + tanh(u)) = sigmoid(2u)`.
fn gelu(x: f64) -> (f64, f64) {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let s = 1.0 / (1.0 + (-2.0 * u).exp());
    let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    (x * s, s + 2.0 * x * s * (1.0 - s) * du)
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "relu" => Ok(Activation::Relu),
            "leaky_relu" | "leakyrelu" => Ok(Activation::LeakyRelu),
            "elu" => Ok(Activation::Elu),
            "gelu" => Ok(Activation::Gelu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(outer, extent, inner)` strides for reducing along `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Source row indices and interpolation weight for resampling `src_len` time
/// rows onto `target_len` rows.
pub(crate) fn interp_coords(src_len: usize, target_len: usize) -> Vec<(usize, usize, f64)> {
    (0..target_len)
        .map(|i| {
            if src_len == 1 || target_len == 1 {
                return (0, 0, 0.0);
            }
            let pos = (i * (src_len - 1)) as f64 / (target_len - 1) as f64;
            let lo = (pos.floor() as usize).min(src_len - 1);
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_handles_transposed_layouts() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let expect = naive(2, 3, 4, &a, &b);
        let mut c = vec![0.0; 8];
        gemm(
            2,
            3,
            4,
            &a,
            Layout::plain(3),
            &b,
            Layout::plain(4),
            &mut c,
            0.0,
        );
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
        // bT stored as 4x3
        let mut bt = vec![0.0; 12];
        for p in 0..3 {
            for j in 0..4 {
                bt[j * 3 + p] = b[p * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 8];
        gemm(
            2,
            3,
            4,
            &a,
            Layout::plain(3),
            &bt,
            Layout::transposed(3),
            &mut c2,
            0.0,
        );
        for (x, y) in c2.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn activation_names_round_trip() {
        for kind in Activation::ALL {
            assert_eq!(kind.name().parse::<Activation>().unwrap(), kind);
        }
        assert!(matches!(
            "swish".parse::<Activation>(),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn interpolation_coordinates_hit_endpoints() {
        let c = interp_coords(2, 3);
        assert_eq!(c[0], (0, 1, 0.0));
        assert_eq!(c[1], (0, 1, 0.5));
        assert_eq!(c[2].0 as f64 + c[2].2, 1.0);
    }
}
