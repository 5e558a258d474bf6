//! Adam optimizer over a [`ParamStore`]'s visit order.

use ndarray::ArrayD;

use super::{check_grad_alignment, Grads, ParamStore};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone)]
pub struct AdamSlot<T> {
    pub m: ArrayD<T>,
    pub v: ArrayD<T>,
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub names: Vec<String>,
    pub slots: Vec<AdamSlot<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            names: Vec::new(),
            slots: Vec::new(),
        }
    }

    /// One update step. Gradient order must match the store's parameter
    /// visit order; slots are lazily initialized on the first call.
    pub fn step<S: ParamStore<T>>(&mut self, store: &mut S, grads: &Grads<T>, lr: f64) -> Result<()> {
        check_grad_alignment(store, grads)?;
        if self.slots.is_empty() {
            for (name, g) in grads {
                self.names.push(name.clone());
                self.slots.push(AdamSlot {
                    m: ArrayD::zeros(g.raw_dim()),
                    v: ArrayD::zeros(g.raw_dim()),
                });
            }
        } else if self.names.len() != grads.len() {
            return Err(Error::invalid(format!(
                "optimizer has {} slots but got {} gradients",
                self.names.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let bc1 = T::of(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - self.beta2.powi(self.t as i32));
        let eps = T::of(self.eps);
        let lr_t = T::of(lr);

        let mut k = 0usize;
        let slots = &mut self.slots;
        store.visit_params_mut(&mut |_, mut view| {
            let slot = &mut slots[k];
            let g = &grads[k].1;
            let p = view.as_slice_mut().expect("contiguous parameters");
            let gs = g.as_slice().expect("contiguous gradients");
            let ms = slot.m.as_slice_mut().unwrap();
            let vs = slot.v.as_slice_mut().unwrap();
            for i in 0..p.len() {
                ms[i] = b1 * ms[i] + (one - b1) * gs[i];
                vs[i] = b2 * vs[i] + (one - b2) * gs[i] * gs[i];
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                p[i] = p[i] - lr_t * mhat / (vhat.sqrt() + eps);
            }
            k += 1;
        });
        Ok(())
    }
}
