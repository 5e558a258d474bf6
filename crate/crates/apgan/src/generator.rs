//! U-net generator: strided conv encoder, compact bilinear fusion of the
//! bottleneck feature with the attribute vector, and a deconv decoder with
//! mirror-stage skip connections.
//!
//! Every conv/deconv uses stride 2, kernel 4, pad 1, so each encoder stage
//! halves the spatial size; with `log2(base_image_size)` stages the
//! bottleneck is 1x1 and flattens to a vector for fusion. The fused vector
//! is reshaped to (sketch_dim, 1, 1) and decoded back up; the final stage
//! ends in tanh, so outputs live in [-1, 1].

use ndarray::{Array1, Array2, Array3, Array4, ArrayViewD, ArrayViewMutD, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcb::{
    make_sketch_plan, mcb_backward_with, mcb_pool_with, normalize_backward, signed_sqrt_l2,
    CountSketchPlan, FftPair,
};
use crate::nn::conv::{Conv2d, ConvCache, ConvT2d, ConvTCache};
use crate::nn::norm::{BatchNorm2d, BnCache, InCache, InstanceNorm2d};
use crate::nn::{Act, Grads, Mode, ParamStore};
use crate::real::Real;
use crate::rng::{derive_seed, rng_from};
use crate::types::{AttributeVector, ImageTensor, Modality};

pub const LEAKY_SLOPE: f64 = 0.02;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// 3 for the polarimetric stack; 1-channel thermal input is replicated
    /// to 3 before entering the network so one architecture serves both.
    pub input_channels: usize,
    /// Power of two; must equal 2^(number of encoder stages).
    pub base_image_size: usize,
    pub encoder_channels: Vec<usize>,
    pub sketch_dim: usize,
    pub attribute_dim: usize,
    pub skip_connections: bool,
    /// Instance-norm fallback for the small-batch regime; default off.
    pub instance_norm: bool,
    /// Signed-sqrt + L2 normalization of the fused vector; default on.
    pub mcb_normalize: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            input_channels: 3,
            base_image_size: 256,
            encoder_channels: vec![64, 128, 256, 512, 512, 512, 512, 512],
            sketch_dim: 512,
            attribute_dim: 10,
            skip_connections: true,
            instance_norm: false,
            mcb_normalize: true,
        }
    }
}

impl GeneratorConfig {
    pub fn stages(&self) -> usize {
        self.encoder_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.input_channels, 1 | 3) {
            return Err(Error::invalid(format!(
                "input_channels must be 1 or 3, got {}",
                self.input_channels
            )));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.iter().any(|&c| c == 0) {
            return Err(Error::invalid("encoder_channels must be non-empty and positive"));
        }
        if self.sketch_dim == 0 {
            return Err(Error::invalid("sketch_dim must be positive"));
        }
        if self.attribute_dim == 0 {
            return Err(Error::invalid("attribute_dim must be positive"));
        }
        if !self.base_image_size.is_power_of_two() {
            return Err(Error::invalid(format!(
                "base_image_size {} is not a power of two",
                self.base_image_size
            )));
        }
        let expected = 1usize << self.stages();
        if expected != self.base_image_size {
            return Err(Error::invalid(format!(
                "{} encoder stages need base_image_size {expected} for a 1x1 bottleneck, got {}",
                self.stages(),
                self.base_image_size
            )));
        }
        Ok(())
    }

    /// Output channels of each decoder stage (mirror of the encoder, then 3).
    pub fn decoder_channels(&self) -> Vec<usize> {
        let s = self.stages();
        let mut out: Vec<usize> = (0..s - 1).map(|i| self.encoder_channels[s - 2 - i]).collect();
        out.push(3);
        out
    }
}

#[derive(Debug, Clone)]
enum Norm<T> {
    Batch(BatchNorm2d<T>),
    Instance(InstanceNorm2d<T>),
}

enum NormCache<T> {
    Batch(BnCache<T>),
    Instance(InCache<T>),
}

impl<T: Real> Norm<T> {
    fn new(channels: usize, instance: bool) -> Self {
        if instance {
            Norm::Instance(InstanceNorm2d::new(channels))
        } else {
            Norm::Batch(BatchNorm2d::new(channels))
        }
    }

    fn forward(&mut self, x: &Array4<T>, mode: Mode) -> (Array4<T>, NormCache<T>) {
        match self {
            Norm::Batch(bn) => {
                let (y, c) = bn.forward(x, mode);
                (y, NormCache::Batch(c))
            }
            Norm::Instance(inorm) => {
                let (y, c) = inorm.forward(x);
                (y, NormCache::Instance(c))
            }
        }
    }

    fn forward_pure(&self, x: &Array4<T>) -> Array4<T> {
        match self {
            Norm::Batch(bn) => bn.forward_eval(x),
            Norm::Instance(inorm) => inorm.forward(x).0,
        }
    }

    fn backward(&self, cache: &NormCache<T>, gy: &Array4<T>) -> (Array4<T>, Array1<T>, Array1<T>) {
        match (self, cache) {
            (Norm::Batch(bn), NormCache::Batch(c)) => bn.backward(c, gy),
            (Norm::Instance(inorm), NormCache::Instance(c)) => inorm.backward(c, gy),
            _ => unreachable!("norm cache kind mismatch"),
        }
    }
}

#[derive(Debug, Clone)]
struct EncBlock<T> {
    conv: Conv2d<T>,
    norm: Option<Norm<T>>,
}

struct EncCache<T> {
    conv: ConvCache<T>,
    norm: Option<NormCache<T>>,
    pre_act: Array4<T>,
}

impl<T: Real> EncBlock<T> {
    fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<(Array4<T>, EncCache<T>)> {
        let (pre, conv_cache) = self.conv.forward(x)?;
        let (pre_act, norm_cache) = match self.norm.as_mut() {
            Some(norm) => {
                let (y, c) = norm.forward(&pre, mode);
                (y, Some(c))
            }
            None => (pre, None),
        };
        let out = Act::LeakyRelu(LEAKY_SLOPE).apply(&pre_act);
        Ok((
            out,
            EncCache {
                conv: conv_cache,
                norm: norm_cache,
                pre_act,
            },
        ))
    }

    fn forward_pure(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let pre = self.conv.forward_pure(x)?;
        let pre_act = match &self.norm {
            Some(norm) => norm.forward_pure(&pre),
            None => pre,
        };
        Ok(Act::LeakyRelu(LEAKY_SLOPE).apply(&pre_act))
    }

    /// Returns (grad_x, conv grads, optional norm grads).
    #[allow(clippy::type_complexity)]
    fn backward(
        &self,
        cache: &EncCache<T>,
        out: &Array4<T>,
        gy: &Array4<T>,
    ) -> (Array4<T>, Array4<T>, Array1<T>, Option<(Array1<T>, Array1<T>)>) {
        let g_pre_act = Act::LeakyRelu(LEAKY_SLOPE).backward(&cache.pre_act, out, gy);
        let (g_conv_out, norm_grads) = match (&self.norm, &cache.norm) {
            (Some(norm), Some(nc)) => {
                let (gx, gg, gb) = norm.backward(nc, &g_pre_act);
                (gx, Some((gg, gb)))
            }
            _ => (g_pre_act, None),
        };
        let (gx, gw, gb) = self.conv.backward(&cache.conv, &g_conv_out);
        (gx, gw, gb, norm_grads)
    }
}

#[derive(Debug, Clone)]
struct DecBlock<T> {
    deconv: ConvT2d<T>,
    norm: Option<Norm<T>>,
    act: Act,
}

struct DecCache<T> {
    deconv: ConvTCache<T>,
    norm: Option<NormCache<T>>,
    pre_act: Array4<T>,
    out: Array4<T>,
}

impl<T: Real> DecBlock<T> {
    fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<(Array4<T>, DecCache<T>)> {
        let (pre, deconv_cache) = self.deconv.forward(x)?;
        let (pre_act, norm_cache) = match self.norm.as_mut() {
            Some(norm) => {
                let (y, c) = norm.forward(&pre, mode);
                (y, Some(c))
            }
            None => (pre, None),
        };
        let out = self.act.apply(&pre_act);
        Ok((
            out.clone(),
            DecCache {
                deconv: deconv_cache,
                norm: norm_cache,
                pre_act,
                out,
            },
        ))
    }

    fn forward_pure(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let pre = self.deconv.forward_pure(x)?;
        let pre_act = match &self.norm {
            Some(norm) => norm.forward_pure(&pre),
            None => pre,
        };
        Ok(self.act.apply(&pre_act))
    }

    #[allow(clippy::type_complexity)]
    fn backward(
        &self,
        cache: &DecCache<T>,
        gy: &Array4<T>,
    ) -> (Array4<T>, Array4<T>, Array1<T>, Option<(Array1<T>, Array1<T>)>) {
        let g_pre_act = self.act.backward(&cache.pre_act, &cache.out, gy);
        let (g_deconv_out, norm_grads) = match (&self.norm, &cache.norm) {
            (Some(norm), Some(nc)) => {
                let (gx, gg, gb) = norm.backward(nc, &g_pre_act);
                (gx, Some((gg, gb)))
            }
            _ => (g_pre_act, None),
        };
        let (gx, gw, gb) = self.deconv.backward(&cache.deconv, &g_deconv_out);
        (gx, gw, gb, norm_grads)
    }
}

pub struct Generator<T> {
    pub cfg: GeneratorConfig,
    enc: Vec<EncBlock<T>>,
    dec: Vec<DecBlock<T>>,
    pub plan_image: CountSketchPlan,
    pub plan_attr: CountSketchPlan,
    fft: FftPair,
}

impl<T: Real> Clone for Generator<T> {
    fn clone(&self) -> Self {
        Generator {
            cfg: self.cfg.clone(),
            enc: self.enc.clone(),
            dec: self.dec.clone(),
            plan_image: self.plan_image.clone(),
            plan_attr: self.plan_attr.clone(),
            fft: self.fft.clone(),
        }
    }
}

pub struct GenTrace<T> {
    enc_caches: Vec<EncCache<T>>,
    enc_acts: Vec<Array4<T>>,
    /// Flattened 1x1 bottleneck features, (n, c_bottleneck).
    pub bottleneck: Array2<T>,
    attrs: Array2<T>,
    fused_raw: Array2<T>,
    fused_h: Option<Array2<T>>,
    fused_norms: Option<Vec<T>>,
    dec_caches: Vec<DecCache<T>>,
    /// Channel count of the non-skip part of each decoder input.
    dec_prev_channels: Vec<usize>,
    pub output: Array4<T>,
}

pub fn build_generator<T: Real>(cfg: &GeneratorConfig, seed: u64) -> Result<Generator<T>> {
    cfg.validate()?;
    let mut rng = rng_from(derive_seed(seed, &[0x47_45_4E]));
    let stages = cfg.stages();

    let mut enc = Vec::with_capacity(stages);
    let mut cin = cfg.input_channels.max(3);
    for (i, &cout) in cfg.encoder_channels.iter().enumerate() {
        let conv = Conv2d::init(cin, cout, 4, 2, 1, INIT_STD, &mut rng);
        let norm = if i > 0 {
            Some(Norm::new(cout, cfg.instance_norm))
        } else {
            None
        };
        enc.push(EncBlock { conv, norm });
        cin = cout;
    }

    let dec_out = cfg.decoder_channels();
    let mut dec = Vec::with_capacity(stages);
    for (i, &cout) in dec_out.iter().enumerate() {
        let cin = if i == 0 {
            cfg.sketch_dim
        } else {
            let skip = if cfg.skip_connections {
                cfg.encoder_channels[stages - 1 - i]
            } else {
                0
            };
            dec_out[i - 1] + skip
        };
        let last = i == stages - 1;
        let deconv = ConvT2d::init(cin, cout, 4, 2, 1, INIT_STD, &mut rng);
        let norm = if last {
            None
        } else {
            Some(Norm::new(cout, cfg.instance_norm))
        };
        dec.push(DecBlock {
            deconv,
            norm,
            act: if last { Act::Tanh } else { Act::Relu },
        });
    }

    let bottleneck_dim = *cfg.encoder_channels.last().unwrap();
    let plan_image = make_sketch_plan(
        bottleneck_dim,
        cfg.sketch_dim,
        derive_seed(seed, &[0x504C, 0]),
    )?;
    let plan_attr = make_sketch_plan(
        cfg.attribute_dim,
        cfg.sketch_dim,
        derive_seed(seed, &[0x504C, 1]),
    )?;
    Ok(Generator {
        cfg: cfg.clone(),
        enc,
        dec,
        plan_image,
        plan_attr,
        fft: FftPair::new(cfg.sketch_dim),
    })
}

impl<T: Real> Generator<T> {
    fn check_inputs(&self, x: &Array4<T>, attrs: &Array2<T>) -> Result<()> {
        let (n, c, h, w) = x.dim();
        let expect_c = self.cfg.input_channels.max(3);
        if c != expect_c {
            return Err(Error::invalid(format!(
                "generator expects {expect_c} input channels, got {c}"
            )));
        }
        if h != self.cfg.base_image_size || w != self.cfg.base_image_size {
            return Err(Error::invalid(format!(
                "generator expects {0}x{0} input, got {h}x{w}",
                self.cfg.base_image_size
            )));
        }
        if attrs.dim() != (n, self.cfg.attribute_dim) {
            return Err(Error::invalid(format!(
                "attribute batch must be ({n}, {}), got {:?}",
                self.cfg.attribute_dim,
                attrs.dim()
            )));
        }
        Ok(())
    }

    /// Traced forward used by training and gradient checks.
    pub fn forward_t(
        &mut self,
        x: &Array4<T>,
        attrs: &Array2<T>,
        mode: Mode,
    ) -> Result<(Array4<T>, GenTrace<T>)> {
        self.check_inputs(x, attrs)?;
        let n = x.dim().0;
        let stages = self.cfg.stages();

        let mut enc_caches = Vec::with_capacity(stages);
        let mut enc_acts = Vec::with_capacity(stages);
        let mut h = x.clone();
        for block in &mut self.enc {
            let (out, cache) = block.forward(&h, mode)?;
            enc_caches.push(cache);
            enc_acts.push(out.clone());
            h = out;
        }

        let cb = *self.cfg.encoder_channels.last().unwrap();
        let bottleneck = h
            .view()
            .into_shape_with_order((n, cb))
            .expect("1x1 bottleneck")
            .to_owned();

        let d = self.cfg.sketch_dim;
        let mut fused_raw = Array2::<T>::zeros((n, d));
        for i in 0..n {
            let row = mcb_pool_with(
                bottleneck.index_axis(Axis(0), i),
                attrs.index_axis(Axis(0), i),
                &self.plan_image,
                &self.plan_attr,
                &self.fft,
            )?;
            fused_raw.index_axis_mut(Axis(0), i).assign(&row);
        }
        let (fused_out, fused_h, fused_norms) = if self.cfg.mcb_normalize {
            let mut z = Array2::<T>::zeros((n, d));
            let mut hmat = Array2::<T>::zeros((n, d));
            let mut norms = Vec::with_capacity(n);
            for i in 0..n {
                let (zi, hi, norm) = signed_sqrt_l2(fused_raw.index_axis(Axis(0), i));
                z.index_axis_mut(Axis(0), i).assign(&zi);
                hmat.index_axis_mut(Axis(0), i).assign(&hi);
                norms.push(norm);
            }
            (z, Some(hmat), Some(norms))
        } else {
            (fused_raw.clone(), None, None)
        };

        let mut h = fused_out
            .view()
            .into_shape_with_order((n, d, 1, 1))
            .expect("contiguous")
            .to_owned();
        let mut dec_caches = Vec::with_capacity(stages);
        let mut dec_prev_channels = Vec::with_capacity(stages);
        for (i, block) in self.dec.iter_mut().enumerate() {
            let input = if i > 0 && self.cfg.skip_connections {
                let skip = &enc_acts[stages - 1 - i];
                dec_prev_channels.push(h.dim().1);
                ndarray::concatenate(Axis(1), &[h.view(), skip.view()])
                    .expect("matching spatial dims")
            } else {
                dec_prev_channels.push(h.dim().1);
                h
            };
            let (out, cache) = block.forward(&input, mode)?;
            dec_caches.push(cache);
            h = out;
        }
        let output = h;
        Ok((
            output.clone(),
            GenTrace {
                enc_caches,
                enc_acts,
                bottleneck,
                attrs: attrs.clone(),
                fused_raw,
                fused_h,
                fused_norms,
                dec_caches,
                dec_prev_channels,
                output,
            },
        ))
    }

    /// Pure inference forward: batch-norm running statistics, no caches.
    pub fn forward(&self, x: &Array4<T>, attrs: &Array2<T>) -> Result<Array4<T>> {
        self.check_inputs(x, attrs)?;
        let n = x.dim().0;
        let stages = self.cfg.stages();
        let mut enc_acts = Vec::with_capacity(stages);
        let mut h = x.clone();
        for block in &self.enc {
            let out = block.forward_pure(&h)?;
            enc_acts.push(out.clone());
            h = out;
        }
        let cb = *self.cfg.encoder_channels.last().unwrap();
        let bottleneck = h
            .view()
            .into_shape_with_order((n, cb))
            .expect("1x1 bottleneck")
            .to_owned();
        let d = self.cfg.sketch_dim;
        let mut fused = Array2::<T>::zeros((n, d));
        for i in 0..n {
            let row = mcb_pool_with(
                bottleneck.index_axis(Axis(0), i),
                attrs.index_axis(Axis(0), i),
                &self.plan_image,
                &self.plan_attr,
                &self.fft,
            )?;
            if self.cfg.mcb_normalize {
                let (z, _, _) = signed_sqrt_l2(row.view());
                fused.index_axis_mut(Axis(0), i).assign(&z);
            } else {
                fused.index_axis_mut(Axis(0), i).assign(&row);
            }
        }
        let mut h = fused
            .view()
            .into_shape_with_order((n, d, 1, 1))
            .expect("contiguous")
            .to_owned();
        for (i, block) in self.dec.iter().enumerate() {
            let input = if i > 0 && self.cfg.skip_connections {
                ndarray::concatenate(Axis(1), &[h.view(), enc_acts[stages - 1 - i].view()])
                    .expect("matching spatial dims")
            } else {
                h
            };
            h = block.forward_pure(&input)?;
        }
        Ok(h)
    }

    /// Backward from an output gradient to parameter gradients plus the
    /// gradients at the thermal input and the attribute vector.
    pub fn backward(
        &self,
        trace: &GenTrace<T>,
        g_out: &Array4<T>,
    ) -> Result<(Grads<T>, Array4<T>, Array2<T>)> {
        let stages = self.cfg.stages();
        let n = trace.bottleneck.dim().0;

        // Decoder, in reverse; split concatenated gradients into the chain
        // part and the skip part.
        let mut skip_grads: Vec<Option<Array4<T>>> = vec![None; stages];
        let mut dec_grads: Vec<(Array4<T>, Array1<T>, Option<(Array1<T>, Array1<T>)>)> =
            Vec::with_capacity(stages);
        let mut g = g_out.clone();
        for i in (0..stages).rev() {
            let block = &self.dec[i];
            let (g_input, gw, gb, norm_grads) = block.backward(&trace.dec_caches[i], &g);
            dec_grads.push((gw, gb, norm_grads));
            if i > 0 && self.cfg.skip_connections {
                let prev_c = trace.dec_prev_channels[i];
                let g_prev = g_input.slice(ndarray::s![.., ..prev_c, .., ..]).to_owned();
                let g_skip = g_input.slice(ndarray::s![.., prev_c.., .., ..]).to_owned();
                skip_grads[stages - 1 - i] = Some(g_skip);
                g = g_prev;
            } else {
                g = g_input;
            }
        }
        dec_grads.reverse();

        // Through the fusion: (n, D, 1, 1) -> (n, D) -> sketch backward.
        let d = self.cfg.sketch_dim;
        let g_fused = g
            .view()
            .into_shape_with_order((n, d))
            .expect("contiguous")
            .to_owned();
        let cb = *self.cfg.encoder_channels.last().unwrap();
        let mut g_bottleneck = Array2::<T>::zeros((n, cb));
        let mut g_attrs = Array2::<T>::zeros((n, self.cfg.attribute_dim));
        for i in 0..n {
            let g_row = if self.cfg.mcb_normalize {
                let hmat = trace.fused_h.as_ref().expect("normalize cache");
                let norms = trace.fused_norms.as_ref().expect("normalize cache");
                normalize_backward(
                    g_fused.index_axis(Axis(0), i),
                    trace.fused_raw.index_axis(Axis(0), i),
                    hmat.index_axis(Axis(0), i),
                    norms[i],
                )
            } else {
                g_fused.index_axis(Axis(0), i).to_owned()
            };
            let (ga, gb) = mcb_backward_with(
                g_row.view(),
                trace.bottleneck.index_axis(Axis(0), i),
                trace.attrs.index_axis(Axis(0), i),
                &self.plan_image,
                &self.plan_attr,
                &self.fft,
            )?;
            g_bottleneck.index_axis_mut(Axis(0), i).assign(&ga);
            g_attrs.index_axis_mut(Axis(0), i).assign(&gb);
        }

        // Encoder, in reverse, accumulating skip gradients.
        let mut g = g_bottleneck
            .view()
            .into_shape_with_order((n, cb, 1, 1))
            .expect("contiguous")
            .to_owned();
        let mut enc_grads: Vec<(Array4<T>, Array1<T>, Option<(Array1<T>, Array1<T>)>)> =
            Vec::with_capacity(stages);
        for i in (0..stages).rev() {
            if let Some(sg) = &skip_grads[i] {
                g = &g + sg;
            }
            let block = &self.enc[i];
            let (gx, gw, gb, norm_grads) =
                block.backward(&trace.enc_caches[i], &trace.enc_acts[i], &g);
            enc_grads.push((gw, gb, norm_grads));
            g = gx;
        }
        enc_grads.reverse();

        let mut grads: Grads<T> = Vec::new();
        for (i, (gw, gb, ng)) in enc_grads.into_iter().enumerate() {
            grads.push((format!("enc{i}.conv.w"), gw.into_dyn()));
            grads.push((format!("enc{i}.conv.b"), gb.into_dyn()));
            if let Some((gg, gbeta)) = ng {
                grads.push((format!("enc{i}.norm.gamma"), gg.into_dyn()));
                grads.push((format!("enc{i}.norm.beta"), gbeta.into_dyn()));
            }
        }
        for (i, (gw, gb, ng)) in dec_grads.into_iter().enumerate() {
            grads.push((format!("dec{i}.deconv.w"), gw.into_dyn()));
            grads.push((format!("dec{i}.deconv.b"), gb.into_dyn()));
            if let Some((gg, gbeta)) = ng {
                grads.push((format!("dec{i}.norm.gamma"), gg.into_dyn()));
                grads.push((format!("dec{i}.norm.beta"), gbeta.into_dyn()));
            }
        }
        Ok((grads, g, g_attrs))
    }

    /// Synthesize a visible image from one thermal image and one attribute
    /// vector (pure, inference mode).
    pub fn generate(&self, x: &ImageTensor<T>, attr: &AttributeVector) -> Result<ImageTensor<T>> {
        let input = thermal_to_input(x, self.cfg.input_channels.max(3))?;
        let (c, h, w) = input.dim();
        let batch = input
            .view()
            .into_shape_with_order((1, c, h, w))
            .expect("contiguous")
            .to_owned();
        let attrs = attr
            .to_array::<T>()
            .into_shape_with_order((1, self.cfg.attribute_dim))
            .map_err(|_| Error::invalid("attribute vector length mismatch"))?;
        let out = self.forward(&batch, &attrs)?;
        let (_, oc, oh, ow) = out.dim();
        let img = out
            .into_shape_with_order((oc, oh, ow))
            .expect("batch of one");
        ImageTensor::new(img, Modality::Visible)
    }
}

/// Expand a thermal image to the generator's input channel count: the
/// polar stack passes through, a single S0 channel is replicated.
pub fn thermal_to_input<T: Real>(x: &ImageTensor<T>, channels: usize) -> Result<Array3<T>> {
    let (c, h, w) = x.data.dim();
    if x.modality == Modality::Visible {
        return Err(Error::invalid("generator input must be a thermal modality"));
    }
    if c == channels {
        return Ok(x.data.clone());
    }
    if c == 1 && channels == 3 {
        let mut out = Array3::<T>::zeros((3, h, w));
        for ch in 0..3 {
            out.index_axis_mut(Axis(0), ch)
                .assign(&x.data.index_axis(Axis(0), 0));
        }
        return Ok(out);
    }
    Err(Error::invalid(format!(
        "cannot map {c}-channel thermal input to {channels} generator channels"
    )))
}

impl<T: Real> ParamStore<T> for Generator<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        for (i, b) in self.enc.iter().enumerate() {
            f(&format!("enc{i}.conv.w"), b.conv.w.view().into_dyn());
            f(&format!("enc{i}.conv.b"), b.conv.b.view().into_dyn());
            match &b.norm {
                Some(Norm::Batch(bn)) => {
                    f(&format!("enc{i}.norm.gamma"), bn.gamma.view().into_dyn());
                    f(&format!("enc{i}.norm.beta"), bn.beta.view().into_dyn());
                }
                Some(Norm::Instance(inorm)) => {
                    f(&format!("enc{i}.norm.gamma"), inorm.gamma.view().into_dyn());
                    f(&format!("enc{i}.norm.beta"), inorm.beta.view().into_dyn());
                }
                None => {}
            }
        }
        for (i, b) in self.dec.iter().enumerate() {
            f(&format!("dec{i}.deconv.w"), b.deconv.w.view().into_dyn());
            f(&format!("dec{i}.deconv.b"), b.deconv.b.view().into_dyn());
            match &b.norm {
                Some(Norm::Batch(bn)) => {
                    f(&format!("dec{i}.norm.gamma"), bn.gamma.view().into_dyn());
                    f(&format!("dec{i}.norm.beta"), bn.beta.view().into_dyn());
                }
                Some(Norm::Instance(inorm)) => {
                    f(&format!("dec{i}.norm.gamma"), inorm.gamma.view().into_dyn());
                    f(&format!("dec{i}.norm.beta"), inorm.beta.view().into_dyn());
                }
                None => {}
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        for (i, b) in self.enc.iter_mut().enumerate() {
            f(&format!("enc{i}.conv.w"), b.conv.w.view_mut().into_dyn());
            f(&format!("enc{i}.conv.b"), b.conv.b.view_mut().into_dyn());
            match &mut b.norm {
                Some(Norm::Batch(bn)) => {
                    f(&format!("enc{i}.norm.gamma"), bn.gamma.view_mut().into_dyn());
                    f(&format!("enc{i}.norm.beta"), bn.beta.view_mut().into_dyn());
                }
                Some(Norm::Instance(inorm)) => {
                    f(&format!("enc{i}.norm.gamma"), inorm.gamma.view_mut().into_dyn());
                    f(&format!("enc{i}.norm.beta"), inorm.beta.view_mut().into_dyn());
                }
                None => {}
            }
        }
        for (i, b) in self.dec.iter_mut().enumerate() {
            f(&format!("dec{i}.deconv.w"), b.deconv.w.view_mut().into_dyn());
            f(&format!("dec{i}.deconv.b"), b.deconv.b.view_mut().into_dyn());
            match &mut b.norm {
                Some(Norm::Batch(bn)) => {
                    f(&format!("dec{i}.norm.gamma"), bn.gamma.view_mut().into_dyn());
                    f(&format!("dec{i}.norm.beta"), bn.beta.view_mut().into_dyn());
                }
                Some(Norm::Instance(inorm)) => {
                    f(&format!("dec{i}.norm.gamma"), inorm.gamma.view_mut().into_dyn());
                    f(&format!("dec{i}.norm.beta"), inorm.beta.view_mut().into_dyn());
                }
                None => {}
            }
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        for (i, b) in self.enc.iter().enumerate() {
            if let Some(Norm::Batch(bn)) = &b.norm {
                f(&format!("enc{i}.norm.running_mean"), bn.running_mean.view().into_dyn());
                f(&format!("enc{i}.norm.running_var"), bn.running_var.view().into_dyn());
            }
        }
        for (i, b) in self.dec.iter().enumerate() {
            if let Some(Norm::Batch(bn)) = &b.norm {
                f(&format!("dec{i}.norm.running_mean"), bn.running_mean.view().into_dyn());
                f(&format!("dec{i}.norm.running_var"), bn.running_var.view().into_dyn());
            }
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        for (i, b) in self.enc.iter_mut().enumerate() {
            if let Some(Norm::Batch(bn)) = &mut b.norm {
                f(&format!("enc{i}.norm.running_mean"), bn.running_mean.view_mut().into_dyn());
                f(&format!("enc{i}.norm.running_var"), bn.running_var.view_mut().into_dyn());
            }
        }
        for (i, b) in self.dec.iter_mut().enumerate() {
            if let Some(Norm::Batch(bn)) = &mut b.norm {
                f(&format!("dec{i}.norm.running_mean"), bn.running_mean.view_mut().into_dyn());
                f(&format!("dec{i}.norm.running_var"), bn.running_var.view_mut().into_dyn());
            }
        }
    }
}
