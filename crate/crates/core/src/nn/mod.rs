//! Minimal dense/convolutional building blocks with hand-written backward
//! passes. Activations are NHWC, row-major, single-threaded, and therefore
//! bit-reproducible on one platform. Everything is generic over [`Real`] so
//! the same code path trains in `f32` and is gradient-checked in `f64`.

mod layers;

pub use layers::{Conv3x3, Down2x2, Linear, OneHotEmbed, ResBlock, ResCache, Up2x2};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    /// `c = alpha·a·b + beta·c` with arbitrary strides, see [`matrixmultiply`].
    ///
    /// # Safety
    /// Strides and dimensions must describe memory inside the given slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
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
}

impl Real for f64 {
    unsafe fn gemm_raw(
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

/// Row-major `c (m×n) = op(a)·op(b) + beta·c` where `op(a)` is `m×k`.
/// With `trans_a` the buffer `a` holds a `k×m` matrix, likewise for `b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    trans_a: bool,
    b: &[F],
    trans_b: bool,
    beta: F,
    c: &mut [F],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index touched by the strides.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
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

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param<F> {
    pub value: Vec<F>,
    #[serde(skip)]
    pub grad: Vec<F>,
}

impl<F: Real> Param<F> {
    pub fn zeros(n: usize) -> Self {
        Self {
            value: vec![F::zero(); n],
            grad: vec![F::zero(); n],
        }
    }

    /// Uniform He initialization scaled by `gain`.
    pub fn he_uniform<R: Rng>(n: usize, fan_in: usize, gain: f64, rng: &mut R) -> Self {
        let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt();
        let value = (0..n)
            .map(|_| F::of(rng.gen_range(-bound..=bound)))
            .collect();
        Self {
            value,
            grad: vec![F::zero(); n],
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn cast<G: Real>(&self) -> Param<G> {
        Param {
            value: self.value.iter().map(|v| G::of(v.to_f64_lossy())).collect(),
            grad: vec![G::zero(); self.value.len()],
        }
    }
}

/// Visits every parameter of a module in a fixed order.
pub trait Module<F: Real> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }
}

pub fn relu_inplace<F: Real>(x: &mut [F]) {
    for v in x.iter_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// Masks `grad` by the positive entries of a ReLU output.
pub fn relu_backward<F: Real>(out: &[F], grad: &mut [F]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= F::zero() {
            *g = F::zero();
        }
    }
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Adam with bias correction. State is created lazily on the first step and
/// is laid out in the module's visit order.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters whose gradient and moments are all
    /// zero stay bit-identical.
    pub fn step<M: Module<F> + ?Sized>(&mut self, module: &mut M) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = F::of(self.beta1);
        let b2 = F::of(self.beta2);
        let one = F::one();
        let c1 = F::of(1.0 - self.beta1.powi(t));
        let c2 = F::of(1.0 - self.beta2.powi(t));
        let lr = F::of(self.learning_rate);
        let eps = F::of(self.epsilon);
        let init = self.m.is_empty();
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        module.visit_mut(&mut |p| {
            if init {
                ms.push(vec![F::zero(); p.len()]);
                vs.push(vec![F::zero(); p.len()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            idx += 1;
            for i in 0..p.value.len() {
                let g = p.grad[i];
                if g == F::zero() && m[i] == F::zero() && v[i] == F::zero() {
                    continue;
                }
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}
