//! Attribute predictor: a small CNN that maps a visible face to the ten
//! attribute scores in [-1, 1]. It triples as (a) the source of attribute
//! vectors at train/test time, (b) the network Q behind the attribute-
//! preserving loss, and (c) the deep-feature extractor for verification
//! (penultimate embedding) and for the perceptual/identity losses (first
//! and second conv-block activations).

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, Array3, Array4, ArrayViewD, ArrayViewMutD, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv::{Conv2d, ConvCache};
use crate::nn::linear::{global_avg_pool, global_avg_pool_backward, Dense};
use crate::nn::adam::Adam;
use crate::nn::{Act, Grads, ParamStore};
use crate::real::Real;
use crate::rng::{rng_for, rng_from};
use crate::types::{AttributeVector, ATTRIBUTE_COUNT};
use rand::seq::SliceRandom;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AttrNetConfig {
    /// Conv block widths; each block is kernel 3, stride 2, pad 1 + ReLU.
    pub channels: Vec<usize>,
    /// Width of the hidden dense layer; this is the verification embedding.
    pub embed_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for AttrNetConfig {
    fn default() -> Self {
        AttrNetConfig {
            channels: vec![32, 64, 128, 256],
            embed_dim: 256,
            epochs: 30,
            lr: 1e-3,
            batch_size: 16,
        }
    }
}

impl AttrNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::invalid("attribute net needs at least one conv block"));
        }
        if self.embed_dim == 0 || self.batch_size == 0 {
            return Err(Error::invalid("embed_dim and batch_size must be positive"));
        }
        Ok(())
    }
}

pub struct AttributeNet<T> {
    pub cfg: AttrNetConfig,
    pub blocks: Vec<Conv2d<T>>,
    pub hidden: Dense<T>,
    pub head: Dense<T>,
    eval_calls: AtomicU64,
}

impl<T: Real> Clone for AttributeNet<T> {
    fn clone(&self) -> Self {
        AttributeNet {
            cfg: self.cfg.clone(),
            blocks: self.blocks.clone(),
            hidden: self.hidden.clone(),
            head: self.head.clone(),
            eval_calls: AtomicU64::new(self.eval_calls.load(Ordering::Relaxed)),
        }
    }
}

/// Which tap of the extractor feeds a feature loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureLayer {
    /// First conv-block activation (shallow, perceptual-style).
    Block1,
    /// Second conv-block activation (deeper, identity-style).
    Block2,
}

impl std::str::FromStr for FeatureLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "block1" => Ok(FeatureLayer::Block1),
            "block2" => Ok(FeatureLayer::Block2),
            other => Err(Error::invalid(format!("unknown feature layer `{other}`"))),
        }
    }
}

pub struct AttrTrace<T> {
    conv_caches: Vec<ConvCache<T>>,
    pre_acts: Vec<Array4<T>>,
    /// Post-activation block outputs; index 0 and 1 are the feature taps.
    pub acts: Vec<Array4<T>>,
    gap_hw: (usize, usize),
    gap_out: Array2<T>,
    hidden_pre: Array2<T>,
    /// Penultimate embedding (n, embed_dim).
    pub embedding: Array2<T>,
    head_pre: Array2<T>,
    /// Tanh-bounded predictions (n, 10).
    pub preds: Array2<T>,
}

impl<T: Real> AttributeNet<T> {
    pub fn build(cfg: &AttrNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(seed);
        let mut blocks = Vec::new();
        let mut cin = 3;
        for &cout in &cfg.channels {
            blocks.push(Conv2d::init(cin, cout, 3, 2, 1, 0.02, &mut rng));
            cin = cout;
        }
        let hidden = Dense::init(cin, cfg.embed_dim, 0.02, &mut rng);
        let head = Dense::init(cfg.embed_dim, ATTRIBUTE_COUNT, 0.02, &mut rng);
        Ok(AttributeNet {
            cfg: cfg.clone(),
            blocks,
            hidden,
            head,
            eval_calls: AtomicU64::new(0),
        })
    }

    /// Number of traced forward passes so far; the loss plumbing tests use
    /// this to prove the feature losses share one extractor pass.
    pub fn forward_count(&self) -> u64 {
        self.eval_calls.load(Ordering::Relaxed)
    }

    /// One full traced pass computing block taps, embedding, and predictions.
    pub fn forward(&self, x: &Array4<T>) -> Result<AttrTrace<T>> {
        if x.dim().1 != 3 {
            return Err(Error::invalid(format!(
                "attribute net expects 3-channel visible input, got {} channels",
                x.dim().1
            )));
        }
        self.eval_calls.fetch_add(1, Ordering::Relaxed);
        let mut conv_caches = Vec::new();
        let mut pre_acts = Vec::new();
        let mut acts = Vec::new();
        let mut h = x.clone();
        for conv in &self.blocks {
            let (pre, cache) = conv.forward(&h)?;
            let out = Act::Relu.apply(&pre);
            conv_caches.push(cache);
            pre_acts.push(pre);
            acts.push(out.clone());
            h = out;
        }
        let (_, _, gh, gw) = h.dim();
        let gap_out = global_avg_pool(&h);
        let hidden_pre = self.hidden.forward(&gap_out)?;
        let embedding = Act::Relu.apply(&hidden_pre);
        let head_pre = self.head.forward(&embedding)?;
        let preds = Act::Tanh.apply(&head_pre);
        Ok(AttrTrace {
            conv_caches,
            pre_acts,
            acts,
            gap_hw: (gh, gw),
            gap_out,
            hidden_pre,
            embedding,
            head_pre,
            preds,
        })
    }

    /// Backward pass accepting gradients at any combination of outputs:
    /// predictions, embedding, and the two feature taps. Returns parameter
    /// gradients plus the input-image gradient.
    pub fn backward(
        &self,
        trace: &AttrTrace<T>,
        d_preds: Option<&Array2<T>>,
        d_tap1: Option<&Array4<T>>,
        d_tap2: Option<&Array4<T>>,
    ) -> (Grads<T>, Array4<T>) {
        let n = trace.preds.dim().0;
        let zero_preds = Array2::<T>::zeros((n, ATTRIBUTE_COUNT));
        let gp = d_preds.unwrap_or(&zero_preds);
        let g_head_pre = Act::Tanh.backward(&trace.head_pre, &trace.preds, gp);
        let (g_embed, g_head_w, g_head_b) = self.head.backward(&trace.embedding, &g_head_pre);
        let g_hidden_pre = Act::Relu.backward(&trace.hidden_pre, &trace.embedding, &g_embed);
        let (g_gap, g_hidden_w, g_hidden_b) = self.hidden.backward(&trace.gap_out, &g_hidden_pre);
        let mut g = global_avg_pool_backward(&g_gap, trace.gap_hw.0, trace.gap_hw.1);

        let mut conv_grads: Vec<(Array4<T>, Array1<T>)> = Vec::with_capacity(self.blocks.len());
        for (i, conv) in self.blocks.iter().enumerate().rev() {
            if i == 1 {
                if let Some(t2) = d_tap2 {
                    g = &g + t2;
                }
            }
            if i == 0 {
                if let Some(t1) = d_tap1 {
                    g = &g + t1;
                }
            }
            let g_pre = Act::Relu.backward(&trace.pre_acts[i], &trace.acts[i], &g);
            let (gx, gw, gb) = conv.backward(&trace.conv_caches[i], &g_pre);
            conv_grads.push((gw, gb));
            g = gx;
        }
        conv_grads.reverse();

        let mut grads: Grads<T> = Vec::new();
        for (i, (gw, gb)) in conv_grads.into_iter().enumerate() {
            grads.push((format!("block{i}.w"), gw.into_dyn()));
            grads.push((format!("block{i}.b"), gb.into_dyn()));
        }
        grads.push(("hidden.w".into(), g_hidden_w.into_dyn()));
        grads.push(("hidden.b".into(), g_hidden_b.into_dyn()));
        grads.push(("head.w".into(), g_head_w.into_dyn()));
        grads.push(("head.b".into(), g_head_b.into_dyn()));
        (grads, g)
    }

    /// Predict the attribute vector of one visible image.
    pub fn predict(&self, image: &Array3<T>) -> Result<AttributeVector> {
        let batch = one_image_batch(image);
        let trace = self.forward(&batch)?;
        let mut vals = [0.0f64; ATTRIBUTE_COUNT];
        for (i, v) in vals.iter_mut().enumerate() {
            *v = trace.preds[[0, i]].to64().clamp(-1.0, 1.0);
        }
        AttributeVector::new(vals)
    }

    pub fn predict_batch(&self, images: &Array4<T>) -> Result<Array2<T>> {
        Ok(self.forward(images)?.preds)
    }

    /// Penultimate-layer embedding of one image.
    pub fn feature(&self, image: &Array3<T>) -> Result<Array1<T>> {
        let batch = one_image_batch(image);
        let trace = self.forward(&batch)?;
        Ok(trace.embedding.index_axis(Axis(0), 0).to_owned())
    }
}

pub(crate) fn one_image_batch<T: Real>(image: &Array3<T>) -> Array4<T> {
    let (c, h, w) = image.dim();
    image
        .view()
        .into_shape_with_order((1, c, h, w))
        .expect("contiguous")
        .to_owned()
}

impl<T: Real> ParamStore<T> for AttributeNet<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        for (i, conv) in self.blocks.iter().enumerate() {
            f(&format!("block{i}.w"), conv.w.view().into_dyn());
            f(&format!("block{i}.b"), conv.b.view().into_dyn());
        }
        f("hidden.w", self.hidden.w.view().into_dyn());
        f("hidden.b", self.hidden.b.view().into_dyn());
        f("head.w", self.head.w.view().into_dyn());
        f("head.b", self.head.b.view().into_dyn());
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        for (i, conv) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{i}.w"), conv.w.view_mut().into_dyn());
            f(&format!("block{i}.b"), conv.b.view_mut().into_dyn());
        }
        f("hidden.w", self.hidden.w.view_mut().into_dyn());
        f("hidden.b", self.hidden.b.view_mut().into_dyn());
        f("head.w", self.head.w.view_mut().into_dyn());
        f("head.b", self.head.b.view_mut().into_dyn());
    }
}

/// Stack f64 corpus images into a model-typed batch.
pub fn stack_images<T: Real>(images: &[&Array3<f64>]) -> Array4<T> {
    let (c, h, w) = images[0].dim();
    let mut batch = Array4::<T>::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        let mut lane = batch.index_axis_mut(Axis(0), i);
        ndarray::Zip::from(&mut lane).and(*img).for_each(|d, &s| {
            *d = T::of(s);
        });
    }
    batch
}

/// Train the predictor by minimizing mean squared error to the +-1 labels.
/// Deterministic in `seed`; returns the trained network.
pub fn train_attribute_predictor<T: Real>(
    samples: &[(&Array3<f64>, AttributeVector)],
    cfg: &AttrNetConfig,
    seed: u64,
) -> Result<AttributeNet<T>> {
    if samples.is_empty() {
        return Err(Error::invalid("attribute training corpus is empty"));
    }
    let mut net = AttributeNet::<T>::build(cfg, seed)?;
    let mut adam = Adam::new(0.9, 0.999, 1e-8);
    let n = samples.len();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(seed, &[0xA77, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<&Array3<f64>> = chunk.iter().map(|&i| samples[i].0).collect();
            let batch = stack_images::<T>(&images);
            let trace = net.forward(&batch)?;
            let mut d_preds = Array2::<T>::zeros((chunk.len(), ATTRIBUTE_COUNT));
            let scale = T::of(2.0 / (chunk.len() * ATTRIBUTE_COUNT) as f64);
            for (row, &idx) in chunk.iter().enumerate() {
                let label = samples[idx].1;
                for a in 0..ATTRIBUTE_COUNT {
                    d_preds[[row, a]] =
                        scale * (trace.preds[[row, a]] - T::of(label.0[a]));
                }
            }
            let (grads, _) = net.backward(&trace, Some(&d_preds), None, None);
            adam.step(&mut net, &grads, cfg.lr)?;
        }
    }
    Ok(net)
}

/// Per-attribute sign accuracy of the predictor on labeled samples.
pub fn sign_accuracy<T: Real>(
    net: &AttributeNet<T>,
    samples: &[(&Array3<f64>, AttributeVector)],
) -> Result<[f64; ATTRIBUTE_COUNT]> {
    let mut correct = [0usize; ATTRIBUTE_COUNT];
    for (image, label) in samples {
        let batch = stack_images::<T>(&[image]);
        let trace = net.forward(&batch)?;
        for a in 0..ATTRIBUTE_COUNT {
            let pred = trace.preds[[0, a]].to64();
            if pred.signum() == label.0[a].signum() {
                correct[a] += 1;
            }
        }
    }
    let mut acc = [0.0f64; ATTRIBUTE_COUNT];
    for a in 0..ATTRIBUTE_COUNT {
        acc[a] = correct[a] as f64 / samples.len() as f64;
    }
    Ok(acc)
}
