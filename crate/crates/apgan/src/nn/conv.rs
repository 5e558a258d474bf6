//! Strided convolution and transposed convolution via im2col / col2im.
//!
//! Layout conventions: activations are (N, C, H, W); `Conv2d` weights are
//! (C_out, C_in, K, K); `ConvT2d` weights are (C_in, C_out, K, K). The
//! gather (`im2col`) and scatter (`col2im`) kernels are shared: convolution
//! backward-data is the transposed convolution's forward and vice versa.

use ndarray::{Array1, Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;

use super::{Grads, ParamStore};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::normal;

pub fn conv_out_size(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = n + 2 * pad;
    if padded < k {
        return Err(Error::invalid(format!(
            "spatial size {n} too small for kernel {k} with pad {pad}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

pub fn deconv_out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n - 1) * stride + k - 2 * pad
}

/// Gather sliding-window patches of `x` into a (N*rows_h*rows_w, C*K*K)
/// matrix; row (n, ry, rx) column (c, ky, kx) reads
/// `x[n, c, ry*stride + ky - pad, rx*stride + kx - pad]` (zero outside).
pub fn im2col<T: Real>(
    x: &Array4<T>,
    k: usize,
    stride: usize,
    pad: usize,
    rows_h: usize,
    rows_w: usize,
) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let ckk = c * k * k;
    let mut col = Array2::<T>::zeros((n * rows_h * rows_w, ckk));
    // Concatenated inputs may arrive in a non-standard layout.
    let x_owned;
    let xs: &[T] = match x.as_slice() {
        Some(s) => s,
        None => {
            x_owned = x.as_standard_layout().into_owned();
            x_owned.as_slice().expect("standard layout after copy")
        }
    };
    let cs = col.as_slice_mut().expect("standard layout");
    for ni in 0..n {
        for ry in 0..rows_h {
            for rx in 0..rows_w {
                let rbase = ((ni * rows_h + ry) * rows_w + rx) * ckk;
                for ci in 0..c {
                    let xbase = (ni * c + ci) * h;
                    for ky in 0..k {
                        let iy = (ry * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (xbase + iy as usize) * w;
                        let qbase = rbase + (ci * k + ky) * k;
                        for kx in 0..k {
                            let ix = (rx * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cs[qbase + kx] = xs[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add the patch matrix back into an
/// (N, C, out_h, out_w) tensor.
pub fn col2im<T: Real>(
    col: &Array2<T>,
    n: usize,
    c: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    rows_h: usize,
    rows_w: usize,
) -> Array4<T> {
    let ckk = c * k * k;
    let mut out = Array4::<T>::zeros((n, c, out_h, out_w));
    let cs = col.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("standard layout");
    for ni in 0..n {
        for ry in 0..rows_h {
            for rx in 0..rows_w {
                let rbase = ((ni * rows_h + ry) * rows_w + rx) * ckk;
                for ci in 0..c {
                    let obase = (ni * c + ci) * out_h;
                    for ky in 0..k {
                        let oy = (ry * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= out_h as isize {
                            continue;
                        }
                        let orow = (obase + oy as usize) * out_w;
                        let qbase = rbase + (ci * k + ky) * k;
                        for kx in 0..k {
                            let ox = (rx * stride + kx) as isize - pad as isize;
                            if ox < 0 || ox >= out_w as isize {
                                continue;
                            }
                            let idx = orow + ox as usize;
                            os[idx] = os[idx] + cs[qbase + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

fn nhwc_to_mat<T: Real>(x: &Array4<T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let moved = x.view().permuted_axes([0, 2, 3, 1]);
    moved
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((n * h * w, c))
        .expect("contiguous")
}

fn mat_to_nchw<T: Real>(m: Array2<T>, n: usize, h: usize, w: usize, c: usize) -> Array4<T> {
    let a = m.into_shape_with_order((n, h, w, c)).expect("contiguous");
    a.permuted_axes([0, 3, 1, 2]).as_standard_layout().to_owned()
}

fn sum_nhw<T: Real>(gy: &Array4<T>) -> Array1<T> {
    gy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0))
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub w: Array4<T>,
    pub b: Array1<T>,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache<T> {
    col: Array2<T>,
    x_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl<T: Real> Conv2d<T> {
    pub fn init(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut w = Array4::<T>::zeros((cout, cin, k, k));
        for v in w.iter_mut() {
            *v = normal(rng, std);
        }
        Conv2d {
            w,
            b: Array1::zeros(cout),
            stride,
            pad,
        }
    }

    pub fn kernel(&self) -> usize {
        self.w.dim().3
    }

    pub fn in_channels(&self) -> usize {
        self.w.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.w.dim().0
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            conv_out_size(h, self.kernel(), self.stride, self.pad)?,
            conv_out_size(w, self.kernel(), self.stride, self.pad)?,
        ))
    }

    fn check_input(&self, x: &Array4<T>) -> Result<()> {
        if x.dim().1 != self.in_channels() {
            return Err(Error::invalid(format!(
                "conv expects {} input channels, got {}",
                self.in_channels(),
                x.dim().1
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array4<T>) -> Result<(Array4<T>, ConvCache<T>)> {
        self.check_input(x)?;
        let (n, _, h, w) = x.dim();
        let k = self.kernel();
        let (oh, ow) = self.out_hw(h, w)?;
        let col = im2col(x, k, self.stride, self.pad, oh, ow);
        let (cout, cin, _, _) = self.w.dim();
        let wmat = self
            .w
            .view()
            .into_shape_with_order((cout, cin * k * k))
            .expect("contiguous");
        let mut y_mat = col.dot(&wmat.t());
        y_mat += &self.b;
        let y = mat_to_nchw(y_mat, n, oh, ow, cout);
        Ok((
            y,
            ConvCache {
                col,
                x_dim: x.dim(),
                out_hw: (oh, ow),
            },
        ))
    }

    pub fn forward_pure(&self, x: &Array4<T>) -> Result<Array4<T>> {
        Ok(self.forward(x)?.0)
    }

    /// Returns (grad_x, grad_w, grad_b).
    pub fn backward(&self, cache: &ConvCache<T>, gy: &Array4<T>) -> (Array4<T>, Array4<T>, Array1<T>) {
        let (n, cin, h, w) = cache.x_dim;
        let (oh, ow) = cache.out_hw;
        let k = self.kernel();
        let cout = self.out_channels();
        let gy_mat = nhwc_to_mat(gy);
        let wmat = self
            .w
            .view()
            .into_shape_with_order((cout, cin * k * k))
            .expect("contiguous");
        let gw = gy_mat
            .t()
            .dot(&cache.col)
            .into_shape_with_order((cout, cin, k, k))
            .expect("contiguous");
        let gb = sum_nhw(gy);
        let gcol = gy_mat.dot(&wmat);
        let gx = col2im(&gcol, n, cin, h, w, k, self.stride, self.pad, oh, ow);
        (gx, gw, gb)
    }
}

#[derive(Debug, Clone)]
pub struct ConvT2d<T> {
    pub w: Array4<T>,
    pub b: Array1<T>,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvTCache<T> {
    x_mat: Array2<T>,
    x_hw: (usize, usize),
    n: usize,
}

impl<T: Real> ConvT2d<T> {
    pub fn init(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut w = Array4::<T>::zeros((cin, cout, k, k));
        for v in w.iter_mut() {
            *v = normal(rng, std);
        }
        ConvT2d {
            w,
            b: Array1::zeros(cout),
            stride,
            pad,
        }
    }

    pub fn kernel(&self) -> usize {
        self.w.dim().3
    }

    pub fn in_channels(&self) -> usize {
        self.w.dim().0
    }

    pub fn out_channels(&self) -> usize {
        self.w.dim().1
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            deconv_out_size(h, self.kernel(), self.stride, self.pad),
            deconv_out_size(w, self.kernel(), self.stride, self.pad),
        )
    }

    pub fn forward(&self, x: &Array4<T>) -> Result<(Array4<T>, ConvTCache<T>)> {
        if x.dim().1 != self.in_channels() {
            return Err(Error::invalid(format!(
                "deconv expects {} input channels, got {}",
                self.in_channels(),
                x.dim().1
            )));
        }
        let (n, cin, h, w) = x.dim();
        let k = self.kernel();
        let cout = self.out_channels();
        let (oh, ow) = self.out_hw(h, w);
        let x_mat = nhwc_to_mat(x);
        let wmat = self
            .w
            .view()
            .into_shape_with_order((cin, cout * k * k))
            .expect("contiguous");
        let col = x_mat.dot(&wmat);
        let mut y = col2im(&col, n, cout, oh, ow, k, self.stride, self.pad, h, w);
        y += &self
            .b
            .view()
            .into_shape_with_order((cout, 1, 1))
            .expect("contiguous");
        Ok((
            y,
            ConvTCache {
                x_mat,
                x_hw: (h, w),
                n,
            },
        ))
    }

    pub fn forward_pure(&self, x: &Array4<T>) -> Result<Array4<T>> {
        Ok(self.forward(x)?.0)
    }

    /// Returns (grad_x, grad_w, grad_b).
    pub fn backward(&self, cache: &ConvTCache<T>, gy: &Array4<T>) -> (Array4<T>, Array4<T>, Array1<T>) {
        let (h, w) = cache.x_hw;
        let n = cache.n;
        let k = self.kernel();
        let cin = self.in_channels();
        let cout = self.out_channels();
        let gcol = im2col(gy, k, self.stride, self.pad, h, w);
        let wmat = self
            .w
            .view()
            .into_shape_with_order((cin, cout * k * k))
            .expect("contiguous");
        let gx_mat = gcol.dot(&wmat.t());
        let gx = mat_to_nchw(gx_mat, n, h, w, cin);
        let gw = cache
            .x_mat
            .t()
            .dot(&gcol)
            .into_shape_with_order((cin, cout, k, k))
            .expect("contiguous");
        let gb = sum_nhw(gy);
        (gx, gw, gb)
    }
}

/// Helper for single-layer stores used in tests.
pub struct SingleConv<T>(pub Conv2d<T>);

impl<T: Real> ParamStore<T> for SingleConv<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, T>)) {
        f("w", self.0.w.view().into_dyn());
        f("b", self.0.b.view().into_dyn());
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, T>)) {
        f("w", self.0.w.view_mut().into_dyn());
        f("b", self.0.b.view_mut().into_dyn());
    }
}

pub fn push_grads<T: Real>(grads: &mut Grads<T>, prefix: &str, gw: Array4<T>, gb: Array1<T>) {
    grads.push((format!("{prefix}.w"), gw.into_dyn()));
    grads.push((format!("{prefix}.b"), gb.into_dyn()));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_f64, rng_for};
    use ndarray::ArrayD;

    fn rand4(dims: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = rng_for(seed, &[]);
        let mut a = Array4::zeros(dims);
        for v in a.iter_mut() {
            *v = normal_f64(&mut rng);
        }
        a
    }

    #[test]
    fn conv_output_sizes_match_arithmetic() {
        // floor((n + 2p - k)/s) + 1 per block.
        assert_eq!(conv_out_size(256, 4, 2, 1).unwrap(), 128);
        assert_eq!(conv_out_size(32, 4, 1, 1).unwrap(), 31);
        assert_eq!(conv_out_size(4, 4, 1, 1).unwrap(), 3);
        assert!(conv_out_size(1, 4, 1, 1).is_err());
        assert_eq!(deconv_out_size(1, 4, 2, 1), 2);
        assert_eq!(deconv_out_size(128, 4, 2, 1), 256);
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng = rng_for(3, &[]);
        let conv = Conv2d::<f64>::init(2, 3, 4, 2, 1, 0.5, &mut rng);
        let x = rand4((2, 2, 6, 6), 4);
        let (y, _) = conv.forward(&x).unwrap();
        let (oh, ow) = conv.out_hw(6, 6).unwrap();
        assert_eq!(y.dim(), (2, 3, oh, ow));
        // Naive direct evaluation.
        for n in 0..2 {
            for o in 0..3 {
                for ry in 0..oh {
                    for rx in 0..ow {
                        let mut acc = conv.b[o];
                        for c in 0..2 {
                            for ky in 0..4 {
                                for kx in 0..4 {
                                    let iy = (ry * 2 + ky) as isize - 1;
                                    let ix = (rx * 2 + kx) as isize - 1;
                                    if iy < 0 || iy >= 6 || ix < 0 || ix >= 6 {
                                        continue;
                                    }
                                    acc += conv.w[[o, c, ky, kx]]
                                        * x[[n, c, iy as usize, ix as usize]];
                                }
                            }
                        }
                        assert!((acc - y[[n, o, ry, rx]]).abs() < 1e-10);
                    }
                }
            }
        }
    }

    fn fd_loss<F: Fn() -> f64>(f: F) -> f64 {
        f()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = rng_for(5, &[]);
        let mut conv = Conv2d::<f64>::init(2, 3, 4, 2, 1, 0.3, &mut rng);
        let x = rand4((2, 2, 6, 6), 6);
        let g = rand4((2, 3, 3, 3), 7);
        let (_, cache) = conv.forward(&x).unwrap();
        let (gx, gw, gb) = conv.backward(&cache, &g);

        let h = 1e-6;
        // Input gradient.
        let mut xp = x.clone();
        for idx in [[0, 0, 0, 0], [1, 1, 3, 2], [0, 1, 5, 5]] {
            let orig = xp[idx];
            xp[idx] = orig + h;
            let lp: f64 = conv.forward(&xp).unwrap().0.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            xp[idx] = orig - h;
            let lm: f64 = conv.forward(&xp).unwrap().0.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            xp[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-6, "gx {fd} vs {}", gx[idx]);
        }
        // Weight gradient.
        for idx in [[0, 0, 0, 0], [2, 1, 3, 3], [1, 0, 2, 1]] {
            let orig = conv.w[idx];
            conv.w[idx] = orig + h;
            let lp: f64 = fd_loss(|| conv.forward(&x).unwrap().0.iter().zip(g.iter()).map(|(a, b)| a * b).sum());
            conv.w[idx] = orig - h;
            let lm: f64 = fd_loss(|| conv.forward(&x).unwrap().0.iter().zip(g.iter()).map(|(a, b)| a * b).sum());
            conv.w[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - gw[idx]).abs() < 1e-6, "gw {fd} vs {}", gw[idx]);
        }
        // Bias gradient.
        let orig = conv.b[1];
        conv.b[1] = orig + h;
        let lp: f64 = fd_loss(|| conv.forward(&x).unwrap().0.iter().zip(g.iter()).map(|(a, b)| a * b).sum());
        conv.b[1] = orig - h;
        let lm: f64 = fd_loss(|| conv.forward(&x).unwrap().0.iter().zip(g.iter()).map(|(a, b)| a * b).sum());
        conv.b[1] = orig;
        assert!(((lp - lm) / (2.0 * h) - gb[1]).abs() < 1e-6);
    }

    #[test]
    fn deconv_doubles_spatial_size_and_differentiates() {
        let mut rng = rng_for(8, &[]);
        let mut deconv = ConvT2d::<f64>::init(3, 2, 4, 2, 1, 0.3, &mut rng);
        let x = rand4((2, 3, 4, 4), 9);
        let (y, cache) = deconv.forward(&x).unwrap();
        assert_eq!(y.dim(), (2, 2, 8, 8));
        let g = rand4((2, 2, 8, 8), 10);
        let (gx, gw, gb) = deconv.backward(&cache, &g);

        let h = 1e-6;
        let loss = |d: &ConvT2d<f64>, x: &Array4<f64>| -> f64 {
            d.forward(x).unwrap().0.iter().zip(g.iter()).map(|(a, b)| a * b).sum()
        };
        let mut xp = x.clone();
        for idx in [[0, 0, 0, 0], [1, 2, 3, 1]] {
            let orig = xp[idx];
            xp[idx] = orig + h;
            let lp = loss(&deconv, &xp);
            xp[idx] = orig - h;
            let lm = loss(&deconv, &xp);
            xp[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-6, "gx {fd} vs {}", gx[idx]);
        }
        for idx in [[0, 0, 0, 0], [2, 1, 3, 3]] {
            let orig = deconv.w[idx];
            deconv.w[idx] = orig + h;
            let lp = loss(&deconv, &x);
            deconv.w[idx] = orig - h;
            let lm = loss(&deconv, &x);
            deconv.w[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - gw[idx]).abs() < 1e-6, "gw {fd} vs {}", gw[idx]);
        }
        let orig = deconv.b[0];
        deconv.b[0] = orig + h;
        let lp = loss(&deconv, &x);
        deconv.b[0] = orig - h;
        let lm = loss(&deconv, &x);
        deconv.b[0] = orig;
        assert!(((lp - lm) / (2.0 * h) - gb[0]).abs() < 1e-6);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c.
        let x = rand4((1, 2, 5, 5), 11);
        let col_shape = (9, 2 * 3 * 3); // 3x3 kernel stride 2 pad 1 -> 3x3 rows
        let mut rng = rng_for(12, &[]);
        let mut c = Array2::<f64>::zeros(col_shape);
        for v in c.iter_mut() {
            *v = normal_f64(&mut rng);
        }
        let gathered = im2col(&x, 3, 2, 1, 3, 3);
        let scattered = col2im(&c, 1, 2, 5, 5, 3, 2, 1, 3, 3);
        let lhs: f64 = gathered.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(scattered.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let mut r1 = rng_for(42, &[]);
        let mut r2 = rng_for(42, &[]);
        let a = Conv2d::<f32>::init(3, 8, 4, 2, 1, 0.02, &mut r1);
        let b = Conv2d::<f32>::init(3, 8, 4, 2, 1, 0.02, &mut r2);
        let ha = crate::nn::checksum(&SingleConv(a));
        let hb = crate::nn::checksum(&SingleConv(b));
        assert_eq!(ha, hb);
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let mut rng = rng_for(1, &[]);
        let conv = Conv2d::<f64>::init(3, 4, 4, 2, 1, 0.1, &mut rng);
        let x = ArrayD::<f64>::zeros(vec![1, 2, 8, 8])
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        assert!(conv.forward(&x).is_err());
    }
}
