//! Minimal CNN stack with explicit forward caches and hand-written backward
//! passes, generic over the model scalar. Convolutions lower to im2col +
//! matrix multiply; the transposed convolution reuses the same gather and
//! scatter kernels with the roles swapped. Everything is single-threaded
//! and deterministic for a fixed seed.

pub mod adam;
pub mod conv;
pub mod linear;
pub mod norm;

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Named gradients, in the owning network's parameter visit order.
pub type Grads<T> = Vec<(String, ArrayD<T>)>;

/// Uniform access to a network's learnable parameters and persistent
/// buffers (batch-norm running statistics). Visit order is fixed per
/// network and shared by gradients, the optimizer, and checkpoints.
pub trait ParamStore<T: Real> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>));
    fn visit_buffers(&self, _f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {}
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {}
}

pub fn param_names<T: Real, S: ParamStore<T>>(store: &S) -> Vec<String> {
    let mut names = Vec::new();
    store.visit_params(&mut |name, _| names.push(name.to_string()));
    names
}

pub fn param_sizes<T: Real, S: ParamStore<T>>(store: &S) -> Vec<(String, usize)> {
    let mut sizes = Vec::new();
    store.visit_params(&mut |name, view| sizes.push((name.to_string(), view.len())));
    sizes
}

pub fn param_count<T: Real, S: ParamStore<T>>(store: &S) -> usize {
    let mut total = 0;
    store.visit_params(&mut |_, view| total += view.len());
    total
}

/// Read one scalar parameter by (tensor name, flat index).
pub fn get_param<T: Real, S: ParamStore<T>>(store: &S, name: &str, idx: usize) -> Option<T> {
    let mut out = None;
    store.visit_params(&mut |n, view| {
        if n == name {
            out = view.as_slice().map(|s| s[idx]);
        }
    });
    out
}

/// Add `delta` to one scalar parameter; used by finite-difference checks.
pub fn nudge_param<T: Real, S: ParamStore<T>>(store: &mut S, name: &str, idx: usize, delta: T) {
    store.visit_params_mut(&mut |n, mut view| {
        if n == name {
            let s = view.as_slice_mut().expect("parameters are contiguous");
            s[idx] = s[idx] + delta;
        }
    });
}

pub fn fnv1a(bytes: &[u8], mut hash: u64) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

/// Order-sensitive hash of every parameter and buffer byte; equal seeds
/// must produce equal checksums.
pub fn checksum<T: Real, S: ParamStore<T>>(store: &S) -> u64 {
    let mut hash = 0xCBF2_9CE4_8422_2325u64;
    let mut absorb = |name: &str, view: ArrayViewD<'_, T>| {
        hash = fnv1a(name.as_bytes(), hash);
        let mut bytes = Vec::with_capacity(view.len() * T::BYTES);
        for &v in view.iter() {
            v.put_le(&mut bytes);
        }
        hash = fnv1a(&bytes, hash);
    };
    store.visit_params(&mut absorb);
    store.visit_buffers(&mut absorb);
    hash
}

/// Check that gradient names line up with the store's parameter order.
pub fn check_grad_alignment<T: Real, S: ParamStore<T>>(store: &S, grads: &Grads<T>) -> Result<()> {
    let names = param_names(store);
    if names.len() != grads.len() {
        return Err(Error::invalid(format!(
            "gradient count {} != parameter count {}",
            grads.len(),
            names.len()
        )));
    }
    for (name, (gname, _)) in names.iter().zip(grads.iter()) {
        if name != gname {
            return Err(Error::invalid(format!(
                "gradient order mismatch: {gname} where {name} expected"
            )));
        }
    }
    Ok(())
}

/// Elementwise activations used by the blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Act {
    LeakyRelu(f64),
    Relu,
    Tanh,
    Sigmoid,
}

impl Act {
    pub fn apply<T: Real, D: Dimension>(
        &self,
        x: &ndarray::Array<T, D>,
    ) -> ndarray::Array<T, D> {
        match self {
            Act::LeakyRelu(slope) => {
                let s = T::of(*slope);
                x.mapv(|v| if v > T::zero() { v } else { v * s })
            }
            Act::Relu => x.mapv(|v| if v > T::zero() { v } else { T::zero() }),
            Act::Tanh => x.mapv(|v| v.tanh()),
            Act::Sigmoid => x.mapv(|v| T::one() / (T::one() + (-v).exp())),
        }
    }

    /// Backward given the pre-activation input, the output, and the output
    /// gradient.
    pub fn backward<T: Real, D: Dimension>(
        &self,
        pre: &ndarray::Array<T, D>,
        out: &ndarray::Array<T, D>,
        gy: &ndarray::Array<T, D>,
    ) -> ndarray::Array<T, D> {
        let mut gx = gy.clone();
        match self {
            Act::LeakyRelu(slope) => {
                let s = T::of(*slope);
                ndarray::Zip::from(&mut gx).and(pre).for_each(|g, &p| {
                    if p <= T::zero() {
                        *g = *g * s;
                    }
                });
            }
            Act::Relu => {
                ndarray::Zip::from(&mut gx).and(pre).for_each(|g, &p| {
                    if p <= T::zero() {
                        *g = T::zero();
                    }
                });
            }
            Act::Tanh => {
                ndarray::Zip::from(&mut gx).and(out).for_each(|g, &y| {
                    *g = *g * (T::one() - y * y);
                });
            }
            Act::Sigmoid => {
                ndarray::Zip::from(&mut gx).and(out).for_each(|g, &y| {
                    *g = *g * y * (T::one() - y);
                });
            }
        }
        gx
    }
}

/// Forward mode of a traced pass: training draws noise and uses batch
/// statistics, eval is deterministic and uses running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn activations_match_definitions() {
        let x = array![[-2.0f64, 0.0, 3.0]];
        let leaky = Act::LeakyRelu(0.02).apply(&x);
        assert_eq!(leaky, array![[-0.04, 0.0, 3.0]]);
        let sig = Act::Sigmoid.apply(&x);
        assert!((sig[[0, 2]] - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn activation_backward_matches_finite_difference() {
        let x = array![[-0.7f64, 0.3, 1.2, -2.0]];
        let g = array![[1.0f64, -2.0, 0.5, 1.5]];
        let h = 1e-6;
        for act in [Act::LeakyRelu(0.02), Act::Relu, Act::Tanh, Act::Sigmoid] {
            let y = act.apply(&x);
            let gx = act.backward(&x, &y, &g);
            for i in 0..4 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[0, i]] += h;
                xm[[0, i]] -= h;
                let fp = act.apply(&xp).iter().zip(g.iter()).map(|(a, b)| a * b).sum::<f64>();
                let fm = act.apply(&xm).iter().zip(g.iter()).map(|(a, b)| a * b).sum::<f64>();
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (fd - gx[[0, i]]).abs() < 1e-5,
                    "{act:?} i={i}: fd {fd} vs {}",
                    gx[[0, i]]
                );
            }
        }
    }
}
