//! Minimal neural-network substrate: dense and LSTM layers with hand-written
//! reverse-mode gradients, BCE, Adam and finite-difference checking.
//!
//! Layers are generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for gradient checks. Batched products go through
//! `matrixmultiply`.

mod adam;
mod dense;
pub mod gradcheck;
mod loss;
mod lstm;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use dense::{dense_forward, Activation, DenseLayer, Mlp, MlpTrace, OutputGrad};
pub use loss::{bce_loss, sigmoid, PROB_CLAMP};
pub use lstm::{lstm_step, LstmLayer, LstmStack, LstmStackTrace, LstmTrace};
pub use tensor::Tensor;

use std::fmt::Debug;

use crate::error::{Error, Result};

/// Floating-point type usable for parameters.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    /// `c = alpha * a(m×k) * b(k×n) + beta * c(m×n)` with explicit strides.
    ///
    /// # Safety
    /// Strides must address memory inside the given allocations.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("representable literal")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Logistic function for hot loops; may trade a few ulps for speed.
    fn fast_sigmoid(self) -> Self {
        loss::sigmoid(self)
    }

    /// Hyperbolic tangent for hot loops; may trade a few ulps for speed.
    fn fast_tanh(self) -> Self {
        self.tanh()
    }
}

/// Branch-free `exp` for f32: `2^n * p(f)` with `n = round(x log2 e)` and a
/// degree-6 Taylor polynomial on `|f| <= 0.5` (relative error about 2e-7).
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    let t = x.clamp(-87.0, 88.0) * std::f32::consts::LOG2_E;
    let n = t.round();
    let f = (t - n) * std::f32::consts::LN_2;
    let p = 1.0
        + f * (1.0 + f * (0.5 + f * (1.0 / 6.0 + f * (1.0 / 24.0 + f * (1.0 / 120.0 + f * (1.0 / 720.0))))));
    p * f32::from_bits(((n as i32 + 127) as u32) << 23)
}

impl Scalar for f32 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    #[inline(always)]
    fn fast_sigmoid(self) -> f32 {
        1.0 / (1.0 + exp_f32(-self))
    }

    #[inline(always)]
    fn fast_tanh(self) -> f32 {
        2.0 / (1.0 + exp_f32(-2.0 * self)) - 1.0
    }
}

impl Scalar for f64 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is m×k and
/// `op(b)` is k×n. A transposed operand is stored with its dimensions swapped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: &[S],
    a_t: bool,
    b: &[S],
    b_t: bool,
    beta: S,
    c: &mut [S],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v = if beta == S::zero() { S::zero() } else { *v * beta };
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above cover every index the strides reach.
    unsafe {
        S::raw_gemm(
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
            n as isize,
            1,
        )
    }
}

/// Anything that owns an ordered list of named parameter tensors.
pub trait Params<S: Scalar = f32> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<S>)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>>;

    fn tensors(&self) -> Vec<&Tensor<S>> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

pub fn param_count<S: Scalar, P: Params<S> + ?Sized>(net: &P) -> usize {
    net.param_count()
}

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { expected: vec![expected], actual: vec![actual] })
    }
}

#[cfg(test)]
mod fast_math_tests {
    use super::Scalar;

    #[test]
    fn fast_f32_functions_track_libm() {
        let mut worst_s = 0.0f64;
        let mut worst_t = 0.0f64;
        for i in -20000..=20000 {
            let x = i as f32 * 1e-3;
            worst_s = worst_s.max((f64::from(x.fast_sigmoid()) - 1.0 / (1.0 + (-f64::from(x)).exp())).abs());
            worst_t = worst_t.max((f64::from(x.fast_tanh()) - f64::from(x).tanh()).abs());
        }
        assert!(worst_s < 1e-6, "{worst_s}");
        assert!(worst_t < 1e-6, "{worst_t}");
        assert_eq!(1000.0f32.fast_sigmoid(), 1.0);
        assert!((-1000.0f32).fast_sigmoid() < 1e-30);
        assert_eq!((-1000.0f32).fast_tanh(), -1.0);
        assert!(super::exp_f32(1.0) - std::f32::consts::E < 1e-6);
    }
}

/// Glorot-uniform bound for a `fan_out × fan_in` matrix.
pub(crate) fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) fn fill_uniform<S: Scalar>(t: &mut Tensor<S>, limit: f64, rng: &mut crate::rng::SeededRng) {
    for v in t.data_mut() {
        *v = S::lit((rng.uniform() * 2.0 - 1.0) * limit);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0f64, 2., 3., 4., 5., 6.];
        let b = [1.0f64, 0., 0., 1., 1., 1.];
        let mut c = [0.0f64; 4];
        gemm(2, 3, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [4., 5., 10., 11.]);

        // a^T stored as 3x2
        let at = [1.0f64, 4., 2., 5., 3., 6.];
        let mut c2 = [0.0f64; 4];
        gemm(2, 3, 2, 1.0, &at, true, &b, false, 0.0, &mut c2);
        assert_eq!(c2, c);

        // b^T stored as 2x3
        let bt = [1.0f64, 0., 1., 0., 1., 1.];
        let mut c3 = [1.0f64; 4];
        gemm(2, 3, 2, 1.0, &a, false, &bt, true, 1.0, &mut c3);
        assert_eq!(c3, [5., 6., 11., 12.]);
    }
}
