//! Dense layer and global average pooling for the attribute predictor head.

use ndarray::{Array1, Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::normal;

#[derive(Debug, Clone)]
pub struct Dense<T> {
    /// (out, in)
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Real> Dense<T> {
    pub fn init(inputs: usize, outputs: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut w = Array2::<T>::zeros((outputs, inputs));
        for v in w.iter_mut() {
            *v = normal(rng, std);
        }
        Dense {
            w,
            b: Array1::zeros(outputs),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> Result<Array2<T>> {
        if x.dim().1 != self.w.dim().1 {
            return Err(Error::invalid(format!(
                "dense expects {} inputs, got {}",
                self.w.dim().1,
                x.dim().1
            )));
        }
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        Ok(y)
    }

    /// Returns (grad_x, grad_w, grad_b); `x` is the cached forward input.
    pub fn backward(&self, x: &Array2<T>, gy: &Array2<T>) -> (Array2<T>, Array2<T>, Array1<T>) {
        let gx = gy.dot(&self.w);
        let gw = gy.t().dot(x);
        let gb = gy.sum_axis(Axis(0));
        (gx, gw, gb)
    }
}

/// Mean over the spatial axes: (N, C, H, W) -> (N, C).
pub fn global_avg_pool<T: Real>(x: &Array4<T>) -> Array2<T> {
    let (_, _, h, w) = x.dim();
    let m = T::of((h * w) as f64);
    let summed = x.sum_axis(Axis(3)).sum_axis(Axis(2));
    summed / m
}

pub fn global_avg_pool_backward<T: Real>(
    gy: &Array2<T>,
    h: usize,
    w: usize,
) -> Array4<T> {
    let (n, c) = gy.dim();
    let m = T::of((h * w) as f64);
    let mut gx = Array4::<T>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let g = gy[[ni, ci]] / m;
            gx.index_axis_mut(Axis(0), ni)
                .index_axis_mut(Axis(0), ci)
                .fill(g);
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_f64, rng_for};

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = rng_for(13, &[]);
        let mut dense = Dense::<f64>::init(4, 3, 0.3, &mut rng);
        let mut x = Array2::<f64>::zeros((2, 4));
        let mut g = Array2::<f64>::zeros((2, 3));
        for v in x.iter_mut() {
            *v = normal_f64(&mut rng);
        }
        for v in g.iter_mut() {
            *v = normal_f64(&mut rng);
        }
        let (gx, gw, gb) = dense.backward(&x, &g);
        let loss = |d: &Dense<f64>, x: &Array2<f64>| -> f64 {
            d.forward(x).unwrap().iter().zip(g.iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for idx in [[0, 0], [1, 3]] {
            let orig = x[idx];
            x[idx] = orig + h;
            let lp = loss(&dense, &x);
            x[idx] = orig - h;
            let lm = loss(&dense, &x);
            x[idx] = orig;
            assert!(((lp - lm) / (2.0 * h) - gx[idx]).abs() < 1e-7);
        }
        for idx in [[0, 0], [2, 1]] {
            let orig = dense.w[idx];
            dense.w[idx] = orig + h;
            let lp = loss(&dense, &x);
            dense.w[idx] = orig - h;
            let lm = loss(&dense, &x);
            dense.w[idx] = orig;
            assert!(((lp - lm) / (2.0 * h) - gw[idx]).abs() < 1e-7);
        }
        let orig = dense.b[2];
        dense.b[2] = orig + h;
        let lp = loss(&dense, &x);
        dense.b[2] = orig - h;
        let lm = loss(&dense, &x);
        dense.b[2] = orig;
        assert!(((lp - lm) / (2.0 * h) - gb[2]).abs() < 1e-7);
    }

    #[test]
    fn gap_and_backward_are_consistent() {
        let x = Array4::from_shape_fn((1, 2, 2, 2), |(_, c, h, w)| (c * 4 + h * 2 + w) as f64);
        let y = global_avg_pool(&x);
        assert_eq!(y[[0, 0]], 1.5);
        assert_eq!(y[[0, 1]], 5.5);
        let g = Array2::from_elem((1, 2), 1.0f64);
        let gx = global_avg_pool_backward(&g, 2, 2);
        assert!(gx.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }
}
