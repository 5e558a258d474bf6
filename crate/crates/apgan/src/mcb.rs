//! Multimodal compact bilinear (MCB) pooling via signed count sketches.
//!
//! Two vectors are hashed into count sketches of a shared width and combined
//! by circular convolution, which equals the count sketch of their outer
//! product. The convolution runs in the frequency domain; all sketch
//! arithmetic is carried out in f64 internally regardless of the model
//! scalar type. Inner products of sketches are unbiased estimates of the
//! inner product of the original vectors, which the tests exercise.

use std::sync::Arc;

use ndarray::{Array1, ArrayView1};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::rng_from;
use rand::Rng;

/// Hash plan of one count sketch: per input coordinate, a bucket index in
/// `[0, sketch_dim)` and a sign in {-1, +1}. Regenerating with the same
/// `(input_dim, sketch_dim, seed)` reproduces identical arrays; plans are
/// immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountSketchPlan {
    pub input_dim: usize,
    pub sketch_dim: usize,
    pub bucket: Vec<usize>,
    pub sign: Vec<i8>,
    pub seed: u64,
}

pub fn make_sketch_plan(input_dim: usize, sketch_dim: usize, seed: u64) -> Result<CountSketchPlan> {
    if input_dim == 0 || sketch_dim == 0 {
        return Err(Error::invalid(format!(
            "sketch dims must be positive, got input_dim={input_dim} sketch_dim={sketch_dim}"
        )));
    }
    let mut rng = rng_from(seed);
    let bucket: Vec<usize> = (0..input_dim).map(|_| rng.gen_range(0..sketch_dim)).collect();
    let sign: Vec<i8> = (0..input_dim)
        .map(|_| if rng.gen::<bool>() { 1 } else { -1 })
        .collect();
    Ok(CountSketchPlan {
        input_dim,
        sketch_dim,
        bucket,
        sign,
        seed,
    })
}

fn check_len<T>(v: &ArrayView1<'_, T>, plan: &CountSketchPlan) -> Result<()> {
    if v.len() != plan.input_dim {
        return Err(Error::invalid(format!(
            "vector length {} does not match plan input_dim {}",
            v.len(),
            plan.input_dim
        )));
    }
    Ok(())
}

/// Project `v` through the sketch: `out[j] = sum_{i: bucket[i]=j} sign[i] * v[i]`.
pub fn count_sketch<T: Real>(v: ArrayView1<'_, T>, plan: &CountSketchPlan) -> Result<Array1<T>> {
    check_len(&v, plan)?;
    let mut out = Array1::<T>::zeros(plan.sketch_dim);
    for i in 0..plan.input_dim {
        let s = T::of(plan.sign[i] as f64);
        out[plan.bucket[i]] = out[plan.bucket[i]] + s * v[i];
    }
    Ok(out)
}

/// Adjoint of [`count_sketch`]: `grad_v[i] = sign[i] * grad_out[bucket[i]]`.
pub fn count_sketch_backward<T: Real>(
    grad_out: ArrayView1<'_, T>,
    plan: &CountSketchPlan,
) -> Result<Array1<T>> {
    if grad_out.len() != plan.sketch_dim {
        return Err(Error::invalid(format!(
            "gradient length {} does not match plan sketch_dim {}",
            grad_out.len(),
            plan.sketch_dim
        )));
    }
    let mut grad_v = Array1::<T>::zeros(plan.input_dim);
    for i in 0..plan.input_dim {
        let s = T::of(plan.sign[i] as f64);
        grad_v[i] = s * grad_out[plan.bucket[i]];
    }
    Ok(grad_v)
}

fn to_complex<T: Real>(v: &ArrayView1<'_, T>) -> Vec<Complex64> {
    v.iter().map(|&x| Complex64::new(x.to64(), 0.0)).collect()
}

/// Cached forward/inverse FFT plans for one transform length. Cheap to
/// clone and safe to share across threads.
#[derive(Clone)]
pub struct FftPair {
    pub len: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl FftPair {
    pub fn new(len: usize) -> Self {
        let mut planner = FftPlanner::<f64>::new();
        FftPair {
            len,
            fwd: planner.plan_fft_forward(len),
            inv: planner.plan_fft_inverse(len),
        }
    }
}

impl std::fmt::Debug for FftPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FftPair(len={})", self.len)
    }
}

/// Circular convolution through the frequency domain. The imaginary residue
/// of the inverse transform must stay below 1e-6 of the output magnitude or
/// the call reports a numeric failure.
pub fn circular_convolve<T: Real>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> Result<Array1<T>> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "circular convolution needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    circular_convolve_with(a, b, &FftPair::new(a.len()))
}

pub fn circular_convolve_with<T: Real>(
    a: ArrayView1<'_, T>,
    b: ArrayView1<'_, T>,
    fft: &FftPair,
) -> Result<Array1<T>> {
    let n = a.len();
    let mut fa = to_complex(&a);
    let mut fb = to_complex(&b);
    fft.fwd.process(&mut fa);
    fft.fwd.process(&mut fb);
    let mut prod: Vec<Complex64> = fa.iter().zip(fb.iter()).map(|(x, y)| x * y).collect();
    fft.inv.process(&mut prod);

    let scale = 1.0 / n as f64;
    let max_re = prod.iter().map(|c| (c.re * scale).abs()).fold(0.0, f64::max);
    let max_im = prod.iter().map(|c| (c.im * scale).abs()).fold(0.0, f64::max);
    if max_im > 1e-6 * max_re.max(1e-30) {
        return Err(Error::numeric(format!(
            "imaginary residue {max_im:e} exceeds 1e-6 of output magnitude {max_re:e}"
        )));
    }
    Ok(Array1::from_iter(prod.iter().map(|c| T::of(c.re * scale))))
}

/// O(n^2) circular convolution, kept as the independent check of the FFT
/// path: `out[k] = sum_i a[i] * b[(k - i) mod n]`.
pub fn circular_convolve_direct<T: Real>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> Array1<T> {
    let n = a.len();
    assert_eq!(n, b.len());
    let mut out = Array1::<T>::zeros(n);
    for k in 0..n {
        let mut acc = 0.0f64;
        for i in 0..n {
            acc += a[i].to64() * b[(n + k - i) % n].to64();
        }
        out[k] = T::of(acc);
    }
    out
}

/// Circular cross-correlation `out[j] = sum_k g[k] * b[(k - j) mod n]`,
/// the adjoint of convolution by `b`. Computed in the frequency domain.
fn circular_correlate<T: Real>(
    g: ArrayView1<'_, T>,
    b: ArrayView1<'_, T>,
    fft: &FftPair,
) -> Result<Array1<T>> {
    let n = g.len();
    let mut fg = to_complex(&g);
    let mut fb = to_complex(&b);
    fft.fwd.process(&mut fg);
    fft.fwd.process(&mut fb);
    let mut prod: Vec<Complex64> = fg.iter().zip(fb.iter()).map(|(x, y)| x * y.conj()).collect();
    fft.inv.process(&mut prod);
    let scale = 1.0 / n as f64;
    Ok(Array1::from_iter(prod.iter().map(|c| T::of(c.re * scale))))
}

fn check_pool_args<T>(
    a: &ArrayView1<'_, T>,
    b: &ArrayView1<'_, T>,
    plan_a: &CountSketchPlan,
    plan_b: &CountSketchPlan,
) -> Result<()> {
    if plan_a.sketch_dim != plan_b.sketch_dim {
        return Err(Error::invalid(format!(
            "plans disagree on sketch_dim: {} vs {}",
            plan_a.sketch_dim, plan_b.sketch_dim
        )));
    }
    if a.len() != plan_a.input_dim || b.len() != plan_b.input_dim {
        return Err(Error::invalid(format!(
            "input lengths ({}, {}) do not match plan input_dims ({}, {})",
            a.len(),
            b.len(),
            plan_a.input_dim,
            plan_b.input_dim
        )));
    }
    Ok(())
}

/// Compact bilinear pooling: circular convolution of the two count sketches.
pub fn mcb_pool<T: Real>(
    a: ArrayView1<'_, T>,
    b: ArrayView1<'_, T>,
    plan_a: &CountSketchPlan,
    plan_b: &CountSketchPlan,
) -> Result<Array1<T>> {
    check_pool_args(&a, &b, plan_a, plan_b)?;
    mcb_pool_with(a, b, plan_a, plan_b, &FftPair::new(plan_a.sketch_dim))
}

pub fn mcb_pool_with<T: Real>(
    a: ArrayView1<'_, T>,
    b: ArrayView1<'_, T>,
    plan_a: &CountSketchPlan,
    plan_b: &CountSketchPlan,
    fft: &FftPair,
) -> Result<Array1<T>> {
    check_pool_args(&a, &b, plan_a, plan_b)?;
    let sa = count_sketch(a, plan_a)?;
    let sb = count_sketch(b, plan_b)?;
    circular_convolve_with(sa.view(), sb.view(), fft)
}

/// Gradients of [`mcb_pool`] with respect to both inputs. The pipeline is
/// linear in each argument with the other held fixed, so the adjoint is a
/// correlation followed by the sketch adjoint.
pub fn mcb_backward<T: Real>(
    grad_out: ArrayView1<'_, T>,
    a: ArrayView1<'_, T>,
    b: ArrayView1<'_, T>,
    plan_a: &CountSketchPlan,
    plan_b: &CountSketchPlan,
) -> Result<(Array1<T>, Array1<T>)> {
    check_pool_args(&a, &b, plan_a, plan_b)?;
    mcb_backward_with(grad_out, a, b, plan_a, plan_b, &FftPair::new(plan_a.sketch_dim))
}

pub fn mcb_backward_with<T: Real>(
    grad_out: ArrayView1<'_, T>,
    a: ArrayView1<'_, T>,
    b: ArrayView1<'_, T>,
    plan_a: &CountSketchPlan,
    plan_b: &CountSketchPlan,
    fft: &FftPair,
) -> Result<(Array1<T>, Array1<T>)> {
    check_pool_args(&a, &b, plan_a, plan_b)?;
    if grad_out.len() != plan_a.sketch_dim {
        return Err(Error::invalid(format!(
            "grad length {} does not match sketch_dim {}",
            grad_out.len(),
            plan_a.sketch_dim
        )));
    }
    let sa = count_sketch(a, plan_a)?;
    let sb = count_sketch(b, plan_b)?;
    let g_sa = circular_correlate(grad_out, sb.view(), fft)?;
    let g_sb = circular_correlate(grad_out, sa.view(), fft)?;
    let grad_a = count_sketch_backward(g_sa.view(), plan_a)?;
    let grad_b = count_sketch_backward(g_sb.view(), plan_b)?;
    Ok((grad_a, grad_b))
}

/// Smoothing constant of the signed square root. For `|y| >> sqrt(DELTA)`
/// the map equals `sign(y) * sqrt(|y|)`; near zero it stays differentiable.
pub const SIGNED_SQRT_DELTA: f64 = 1e-8;

/// Signed square root `y / (y^2 + delta)^(1/4)` applied elementwise,
/// followed by L2 normalization. Returns the normalized vector plus the
/// intermediates needed by [`normalize_backward`].
pub fn signed_sqrt_l2<T: Real>(y: ArrayView1<'_, T>) -> (Array1<T>, Array1<T>, T) {
    let delta = T::of(SIGNED_SQRT_DELTA);
    let h = y.mapv(|v| v / (v * v + delta).sqrt().sqrt());
    let norm = h.iter().map(|&v| v * v).sum::<T>().sqrt();
    let floor = T::of(1e-12);
    let denom = if norm > floor { norm } else { floor };
    let z = h.mapv(|v| v / denom);
    (z, h, denom)
}

/// Backward through signed sqrt + L2 normalization.
pub fn normalize_backward<T: Real>(
    grad_z: ArrayView1<'_, T>,
    y: ArrayView1<'_, T>,
    h: ArrayView1<'_, T>,
    norm: T,
) -> Array1<T> {
    // z = h / ||h||: dL/dh = g/||h|| - h * (h . g) / ||h||^3
    let dot = h
        .iter()
        .zip(grad_z.iter())
        .map(|(&hi, &gi)| hi * gi)
        .sum::<T>();
    let n3 = norm * norm * norm;
    let delta = T::of(SIGNED_SQRT_DELTA);
    let half = T::of(0.5);
    let mut grad_y = Array1::<T>::zeros(y.len());
    for i in 0..y.len() {
        let gh = grad_z[i] / norm - h[i] * dot / n3;
        // dh/dy = (y^2/2 + delta) * (y^2 + delta)^(-5/4)
        let y2 = y[i] * y[i];
        let base = y2 + delta;
        let pow54 = base * base.sqrt().sqrt(); // base^(5/4)
        grad_y[i] = gh * (y2 * half + delta) / pow54;
    }
    grad_y
}
