//! Batch normalization (with running statistics) and the instance-norm
//! fallback. Training mode normalizes with biased batch statistics and
//! updates the running buffers; eval mode normalizes with the buffers.

use ndarray::{Array1, Array2, Array4, Axis};

use super::Mode;
use crate::real::Real;

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub eps: T,
    pub momentum: T,
}

pub struct BnCache<T> {
    xhat: Array4<T>,
    inv_std: Array1<T>,
    train: bool,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: T::of(1e-5),
            momentum: T::of(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Traced forward. Training mode mutates the running statistics.
    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> (Array4<T>, BnCache<T>) {
        match mode {
            Mode::Train => {
                let (n, c, h, w) = x.dim();
                let m = T::of((n * h * w) as f64);
                let mean = x.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)) / m;
                let mut var = Array1::<T>::zeros(c);
                for ci in 0..c {
                    let mut acc = T::zero();
                    for ni in 0..n {
                        for yi in 0..h {
                            for xi in 0..w {
                                let d = x[[ni, ci, yi, xi]] - mean[ci];
                                acc += d * d;
                            }
                        }
                    }
                    var[ci] = acc / m;
                }
                let inv_std = var.mapv(|v| T::one() / (v + self.eps).sqrt());
                let mut xhat = x.clone();
                for ci in 0..c {
                    let mu = mean[ci];
                    let is = inv_std[ci];
                    xhat.index_axis_mut(Axis(1), ci)
                        .mapv_inplace(|v| (v - mu) * is);
                }
                // Unbiased variance feeds the running buffer (biased when
                // the batch has a single element).
                let count = (n * h * w) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let ub = T::of(unbias);
                let one_minus = T::one() - self.momentum;
                for ci in 0..c {
                    self.running_mean[ci] =
                        one_minus * self.running_mean[ci] + self.momentum * mean[ci];
                    self.running_var[ci] =
                        one_minus * self.running_var[ci] + self.momentum * var[ci] * ub;
                }
                let y = self.affine(&xhat);
                (
                    y,
                    BnCache {
                        xhat,
                        inv_std,
                        train: true,
                    },
                )
            }
            Mode::Eval => {
                let (y, cache) = self.forward_eval_traced(x);
                (y, cache)
            }
        }
    }

    /// Pure eval forward (running statistics, no mutation).
    pub fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        self.forward_eval_traced(x).0
    }

    fn forward_eval_traced(&self, x: &Array4<T>) -> (Array4<T>, BnCache<T>) {
        let c = self.channels();
        let inv_std = self.running_var.mapv(|v| T::one() / (v + self.eps).sqrt());
        let mut xhat = x.clone();
        for ci in 0..c {
            let mu = self.running_mean[ci];
            let is = inv_std[ci];
            xhat.index_axis_mut(Axis(1), ci)
                .mapv_inplace(|v| (v - mu) * is);
        }
        let y = self.affine(&xhat);
        (
            y,
            BnCache {
                xhat,
                inv_std,
                train: false,
            },
        )
    }

    fn affine(&self, xhat: &Array4<T>) -> Array4<T> {
        let mut y = xhat.clone();
        for ci in 0..self.channels() {
            let g = self.gamma[ci];
            let b = self.beta[ci];
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * g + b);
        }
        y
    }

    /// Returns (grad_x, grad_gamma, grad_beta).
    pub fn backward(&self, cache: &BnCache<T>, gy: &Array4<T>) -> (Array4<T>, Array1<T>, Array1<T>) {
        let (n, c, h, w) = gy.dim();
        let gbeta = gy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
        let mut ggamma = Array1::<T>::zeros(c);
        for ci in 0..c {
            let mut acc = T::zero();
            for ni in 0..n {
                for yi in 0..h {
                    for xi in 0..w {
                        acc += gy[[ni, ci, yi, xi]] * cache.xhat[[ni, ci, yi, xi]];
                    }
                }
            }
            ggamma[ci] = acc;
        }
        let mut gx = gy.clone();
        if cache.train {
            let m = T::of((n * h * w) as f64);
            for ci in 0..c {
                let scale = self.gamma[ci] * cache.inv_std[ci] / m;
                let gb = gbeta[ci];
                let gg = ggamma[ci];
                let mut lane = gx.index_axis_mut(Axis(1), ci);
                let xh = cache.xhat.index_axis(Axis(1), ci);
                ndarray::Zip::from(&mut lane).and(&xh).for_each(|g, &x| {
                    *g = scale * (m * *g - gb - x * gg);
                });
            }
        } else {
            for ci in 0..c {
                let scale = self.gamma[ci] * cache.inv_std[ci];
                gx.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * scale);
            }
        }
        (gx, ggamma, gbeta)
    }
}

/// Per-instance normalization over (H, W); affine, no running state.
/// Degenerate (zero) at 1x1 spatial size, which is why batch norm stays
/// the default.
#[derive(Debug, Clone)]
pub struct InstanceNorm2d<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub eps: T,
}

pub struct InCache<T> {
    xhat: Array4<T>,
    inv_std: Array2<T>,
}

impl<T: Real> InstanceNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        InstanceNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            eps: T::of(1e-5),
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, InCache<T>) {
        let (n, c, h, w) = x.dim();
        let m = T::of((h * w) as f64);
        let mut xhat = x.clone();
        let mut inv_std = Array2::<T>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let lane = x.index_axis(Axis(0), ni);
                let lane = lane.index_axis(Axis(0), ci);
                let mean = lane.iter().copied().sum::<T>() / m;
                let var = lane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
                let is = T::one() / (var + self.eps).sqrt();
                inv_std[[ni, ci]] = is;
                let mut out = xhat.index_axis_mut(Axis(0), ni);
                let mut out = out.index_axis_mut(Axis(0), ci);
                out.mapv_inplace(|v| (v - mean) * is);
            }
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let g = self.gamma[ci];
            let b = self.beta[ci];
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * g + b);
        }
        (y, InCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &InCache<T>, gy: &Array4<T>) -> (Array4<T>, Array1<T>, Array1<T>) {
        let (n, c, h, w) = gy.dim();
        let m = T::of((h * w) as f64);
        let gbeta = gy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
        let mut ggamma = Array1::<T>::zeros(c);
        let mut gx = gy.clone();
        for ci in 0..c {
            let mut acc = T::zero();
            for ni in 0..n {
                let gyl = gy.index_axis(Axis(0), ni);
                let gyl = gyl.index_axis(Axis(0), ci);
                let xhl = cache.xhat.index_axis(Axis(0), ni);
                let xhl = xhl.index_axis(Axis(0), ci);
                acc += gyl.iter().zip(xhl.iter()).map(|(&g, &x)| g * x).sum::<T>();
            }
            ggamma[ci] = acc;
        }
        for ni in 0..n {
            for ci in 0..c {
                let gyl = gy.index_axis(Axis(0), ni);
                let gyl = gyl.index_axis(Axis(0), ci).to_owned();
                let xhl = cache.xhat.index_axis(Axis(0), ni);
                let xhl = xhl.index_axis(Axis(0), ci).to_owned();
                let sum_g = gyl.iter().copied().sum::<T>();
                let sum_gx = gyl.iter().zip(xhl.iter()).map(|(&g, &x)| g * x).sum::<T>();
                let scale = self.gamma[ci] * cache.inv_std[[ni, ci]] / m;
                let mut out = gx.index_axis_mut(Axis(0), ni);
                let mut out = out.index_axis_mut(Axis(0), ci);
                ndarray::Zip::from(&mut out)
                    .and(&gyl)
                    .and(&xhl)
                    .for_each(|o, &g, &x| {
                        *o = scale * (m * g - sum_g - x * sum_gx);
                    });
            }
        }
        (gx, ggamma, gbeta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_f64, rng_for};

    fn rand4(dims: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = rng_for(seed, &[]);
        let mut a = Array4::zeros(dims);
        for v in a.iter_mut() {
            *v = normal_f64(&mut rng) + 0.3;
        }
        a
    }

    #[test]
    fn train_forward_standardizes_channels() {
        let mut bn = BatchNorm2d::<f64>::new(3);
        let x = rand4((4, 3, 5, 5), 1);
        let (y, _) = bn.forward(&x, Mode::Train);
        for c in 0..3 {
            let lane = y.index_axis(Axis(1), c);
            let m = lane.iter().sum::<f64>() / lane.len() as f64;
            let v = lane.iter().map(|&a| (a - m) * (a - m)).sum::<f64>() / lane.len() as f64;
            assert!(m.abs() < 1e-10, "mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "var {v}");
        }
    }

    #[test]
    fn constant_channel_stays_finite() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        let x = Array4::from_elem((4, 1, 3, 3), 5.0);
        let (y, _) = bn.forward(&x, Mode::Train);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn train_backward_matches_finite_differences() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.gamma[0] = 1.3;
        bn.beta[1] = -0.4;
        let x = rand4((3, 2, 4, 4), 2);
        let g = rand4((3, 2, 4, 4), 3);
        let (_, cache) = bn.forward(&x, Mode::Train);
        let (gx, ggamma, gbeta) = bn.backward(&cache, &g);

        let h = 1e-6;
        let loss = |bn: &mut BatchNorm2d<f64>, x: &Array4<f64>| -> f64 {
            bn.forward(x, Mode::Train)
                .0
                .iter()
                .zip(g.iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut xp = x.clone();
        for idx in [[0, 0, 0, 0], [2, 1, 3, 3], [1, 0, 2, 1]] {
            let orig = xp[idx];
            xp[idx] = orig + h;
            let lp = loss(&mut bn, &xp);
            xp[idx] = orig - h;
            let lm = loss(&mut bn, &xp);
            xp[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-5, "gx {fd} vs {}", gx[idx]);
        }
        for c in 0..2 {
            let orig = bn.gamma[c];
            bn.gamma[c] = orig + h;
            let lp = loss(&mut bn, &x);
            bn.gamma[c] = orig - h;
            let lm = loss(&mut bn, &x);
            bn.gamma[c] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - ggamma[c]).abs() < 1e-5);

            let orig = bn.beta[c];
            bn.beta[c] = orig + h;
            let lp = loss(&mut bn, &x);
            bn.beta[c] = orig - h;
            let lm = loss(&mut bn, &x);
            bn.beta[c] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - gbeta[c]).abs() < 1e-5);
        }
    }

    #[test]
    fn eval_uses_running_statistics() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        let x = rand4((8, 1, 4, 4), 4);
        for _ in 0..200 {
            bn.forward(&x, Mode::Train);
        }
        let y_eval = bn.forward_eval(&x);
        let (y_train, _) = bn.forward(&x, Mode::Train);
        // After many updates on the same batch the two paths agree closely.
        let diff = y_eval
            .iter()
            .zip(y_train.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-2, "diff {diff}");
    }

    #[test]
    fn instance_norm_backward_matches_finite_differences() {
        let inorm = InstanceNorm2d::<f64>::new(2);
        let x = rand4((2, 2, 3, 3), 5);
        let g = rand4((2, 2, 3, 3), 6);
        let (_, cache) = inorm.forward(&x);
        let (gx, _, _) = inorm.backward(&cache, &g);
        let h = 1e-6;
        let mut xp = x.clone();
        for idx in [[0, 0, 0, 0], [1, 1, 2, 2]] {
            let orig = xp[idx];
            xp[idx] = orig + h;
            let lp: f64 = inorm.forward(&xp).0.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            xp[idx] = orig - h;
            let lm: f64 = inorm.forward(&xp).0.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            xp[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-5, "gx {fd} vs {}", gx[idx]);
        }
    }
}
