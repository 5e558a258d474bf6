//! Generator-side objective terms and their weighted combination, plus the
//! map-level pieces of the discriminator objective.
//!
//! Conventions: patch-map losses average over the map and batch so loss
//! scale is size-invariant; log arguments are clamped to
//! [1e-7, 1 - 1e-7]. Pixel and feature losses are means over elements by
//! default, with a strict-sum mode (per image, batch-averaged) behind
//! `LossFlags::strict_sum`.

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::attrnet::{AttributeNet, FeatureLayer};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::types::{AttributeVector, ImageTensor};

pub const LOG_CLAMP: f64 = 1e-7;

/// Weights of the combined generator objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_1: f64,
    pub lambda_p: f64,
    pub lambda_i: f64,
    pub lambda_a: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_1: 10.0,
            lambda_p: 2.5,
            lambda_i: 0.5,
            lambda_a: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_1", self.lambda_1),
            ("lambda_p", self.lambda_p),
            ("lambda_i", self.lambda_i),
            ("lambda_a", self.lambda_a),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Alternate formulations kept behind flags, all defaulting to the
/// combination used throughout training.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct LossFlags {
    /// Sum pixel/feature losses over (C, H, W) per image instead of
    /// averaging over elements.
    pub strict_sum: bool,
    /// Use the squared feature-norm for the attribute loss.
    pub squared_attribute: bool,
    /// Divide the attribute loss by the number of output neurons.
    pub attr_divide_by_n: bool,
    /// Non-saturating generator adversarial loss instead of the literal
    /// log(1 - D) form.
    pub non_saturating_g: bool,
    /// Two-term conditional discriminator loss (drop the
    /// real-image/wrong-attribute pair).
    pub literal_two_term_cond: bool,
}

fn clamped_ln<T: Real>(p: T) -> T {
    let lo = T::of(LOG_CLAMP);
    let hi = T::of(1.0 - LOG_CLAMP);
    let c = if p < lo {
        lo
    } else if p > hi {
        hi
    } else {
        p
    };
    c.ln()
}

fn mean_ln<T: Real>(map: &Array4<T>) -> T {
    let count = T::of(map.len() as f64);
    map.iter().map(|&p| clamped_ln(p)).sum::<T>() / count
}

fn mean_ln_one_minus<T: Real>(map: &Array4<T>) -> T {
    let count = T::of(map.len() as f64);
    map.iter().map(|&p| clamped_ln(T::one() - p)).sum::<T>() / count
}

/// d/ds [ weight * mean ln s ]; zero outside the clamp window.
fn grad_mean_ln<T: Real>(map: &Array4<T>, weight: f64) -> Array4<T> {
    let count = map.len() as f64;
    let lo = T::of(LOG_CLAMP);
    let hi = T::of(1.0 - LOG_CLAMP);
    let w = T::of(weight / count);
    map.mapv(|p| if p < lo || p > hi { T::zero() } else { w / p })
}

/// d/ds [ weight * mean ln (1 - s) ].
fn grad_mean_ln_one_minus<T: Real>(map: &Array4<T>, weight: f64) -> Array4<T> {
    let count = map.len() as f64;
    let lo = T::of(LOG_CLAMP);
    let hi = T::of(1.0 - LOG_CLAMP);
    let w = T::of(weight / count);
    map.mapv(|p| {
        let q = T::one() - p;
        if q < lo || q > hi {
            T::zero()
        } else {
            -w / q
        }
    })
}

/// Triplet-pair discriminator loss from the five patch score maps.
///
/// `L = L_uncond + L_cond` with
/// `L_uncond = -1/2 mean ln D(real) - 1/2 mean ln(1 - D(fake))` and, by
/// default, the fake probability mass of the conditional stream split
/// between the two fake pair types:
/// `L_cond = -1/2 mean ln D(real, a) - 1/4 mean ln(1 - D(fake, a))
///           - 1/4 mean ln(1 - D(real, wrong))`.
/// With `literal_two_term_cond` the conditional part is
/// `-1/2 mean ln D(real, a) - 1/2 mean ln(1 - D(fake, a))` and the wrong
/// map is ignored.
pub fn d_loss_from_maps<T: Real>(
    real_u: &Array4<T>,
    fake_u: &Array4<T>,
    real_c: &Array4<T>,
    fake_c: &Array4<T>,
    wrong_c: &Array4<T>,
    literal_two_term_cond: bool,
) -> T {
    let half = T::of(0.5);
    let quarter = T::of(0.25);
    let uncond = -half * mean_ln(real_u) - half * mean_ln_one_minus(fake_u);
    let cond = if literal_two_term_cond {
        -half * mean_ln(real_c) - half * mean_ln_one_minus(fake_c)
    } else {
        -half * mean_ln(real_c) - quarter * mean_ln_one_minus(fake_c)
            - quarter * mean_ln_one_minus(wrong_c)
    };
    uncond + cond
}

/// Gradients of [`d_loss_from_maps`] with respect to the five maps, in the
/// same order.
#[allow(clippy::type_complexity)]
pub fn d_loss_map_grads<T: Real>(
    real_u: &Array4<T>,
    fake_u: &Array4<T>,
    real_c: &Array4<T>,
    fake_c: &Array4<T>,
    wrong_c: &Array4<T>,
    literal_two_term_cond: bool,
) -> (Array4<T>, Array4<T>, Array4<T>, Array4<T>, Array4<T>) {
    let g_real_u = grad_mean_ln(real_u, -0.5);
    let g_fake_u = grad_mean_ln_one_minus(fake_u, -0.5);
    let g_real_c = grad_mean_ln(real_c, -0.5);
    let (g_fake_c, g_wrong_c) = if literal_two_term_cond {
        (
            grad_mean_ln_one_minus(fake_c, -0.5),
            Array4::zeros(wrong_c.raw_dim()),
        )
    } else {
        (
            grad_mean_ln_one_minus(fake_c, -0.25),
            grad_mean_ln_one_minus(wrong_c, -0.25),
        )
    };
    (g_real_u, g_fake_u, g_real_c, g_fake_c, g_wrong_c)
}

/// Generator adversarial loss from the two fake score maps. The literal
/// form `1/2 mean ln(1 - D(fake)) + 1/2 mean ln(1 - D(fake, a))` is
/// minimized; the non-saturating variant is
/// `-1/2 mean ln D(fake) - 1/2 mean ln D(fake, a)`.
pub fn g_adv_from_maps<T: Real>(fake_u: &Array4<T>, fake_c: &Array4<T>, non_saturating: bool) -> T {
    let half = T::of(0.5);
    if non_saturating {
        -half * mean_ln(fake_u) - half * mean_ln(fake_c)
    } else {
        half * mean_ln_one_minus(fake_u) + half * mean_ln_one_minus(fake_c)
    }
}

pub fn g_adv_map_grads<T: Real>(
    fake_u: &Array4<T>,
    fake_c: &Array4<T>,
    non_saturating: bool,
) -> (Array4<T>, Array4<T>) {
    if non_saturating {
        (grad_mean_ln(fake_u, -0.5), grad_mean_ln(fake_c, -0.5))
    } else {
        (
            grad_mean_ln_one_minus(fake_u, 0.5),
            grad_mean_ln_one_minus(fake_c, 0.5),
        )
    }
}

fn check_same_shape<T, D: ndarray::Dimension>(
    a: &ndarray::Array<T, D>,
    b: &ndarray::Array<T, D>,
) -> Result<()> {
    if a.raw_dim() != b.raw_dim() {
        return Err(Error::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Pixel loss over a batch: mean absolute difference (strict-sum mode sums
/// over pixels per image and averages over the batch).
pub fn l1_loss_batch<T: Real>(a: &Array4<T>, b: &Array4<T>, strict_sum: bool) -> Result<T> {
    check_same_shape(a, b)?;
    let total: T = a.iter().zip(b.iter()).map(|(&x, &y)| (x - y).abs()).sum();
    let denom = if strict_sum {
        a.dim().0 as f64
    } else {
        a.len() as f64
    };
    Ok(total / T::of(denom))
}

/// d(l1)/da for the batch form.
pub fn l1_grad_batch<T: Real>(a: &Array4<T>, b: &Array4<T>, strict_sum: bool) -> Array4<T> {
    let denom = if strict_sum {
        a.dim().0 as f64
    } else {
        a.len() as f64
    };
    let scale = T::of(1.0 / denom);
    let mut g = a.clone();
    ndarray::Zip::from(&mut g).and(b).for_each(|ga, &yb| {
        let d = *ga - yb;
        *ga = if d > T::zero() {
            scale
        } else if d < T::zero() {
            -scale
        } else {
            T::zero()
        };
    });
    g
}

/// Single-image mean absolute pixel difference.
pub fn l1_loss<T: Real>(generated: &Array3<T>, target: &Array3<T>) -> Result<T> {
    check_same_shape(generated, target)?;
    let total: T = generated
        .iter()
        .zip(target.iter())
        .map(|(&x, &y)| (x - y).abs())
        .sum();
    Ok(total / T::of(generated.len() as f64))
}

/// Squared-difference feature loss on one tap: value plus gradient with
/// respect to the generated-side features.
pub fn feature_loss_parts<T: Real>(
    f_gen: &Array4<T>,
    f_tgt: &Array4<T>,
    strict_sum: bool,
) -> (T, Array4<T>) {
    let denom = if strict_sum {
        f_gen.dim().0 as f64
    } else {
        f_gen.len() as f64
    };
    let scale = T::of(1.0 / denom);
    let mut loss = T::zero();
    let mut grad = f_gen.clone();
    ndarray::Zip::from(&mut grad).and(f_tgt).for_each(|g, &t| {
        let d = *g - t;
        loss += d * d;
        *g = T::of(2.0) * d;
    });
    (loss * scale, grad.mapv(|v| v * scale))
}

/// Attribute-preserving loss: per-image Euclidean distance between the ten
/// predictor outputs, averaged over the batch. Returns the value and the
/// gradient with respect to the generated-side predictions.
pub fn attribute_loss_parts<T: Real>(
    q_gen: &Array2<T>,
    q_tgt: &Array2<T>,
    squared: bool,
    divide_by_n: bool,
) -> (T, Array2<T>) {
    let (n, k) = q_gen.dim();
    let norm_div = if divide_by_n { k as f64 } else { 1.0 };
    let batch_scale = T::of(1.0 / (n as f64 * norm_div));
    let mut loss = T::zero();
    let mut grad = Array2::<T>::zeros((n, k));
    for i in 0..n {
        let mut ss = T::zero();
        for j in 0..k {
            let d = q_gen[[i, j]] - q_tgt[[i, j]];
            ss += d * d;
        }
        if squared {
            loss += ss;
            for j in 0..k {
                grad[[i, j]] = T::of(2.0) * (q_gen[[i, j]] - q_tgt[[i, j]]) * batch_scale;
            }
        } else {
            let norm = ss.sqrt();
            loss += norm;
            // Safe at zero distance: the loss value is exactly 0 there and
            // the (sub)gradient is taken as 0.
            let denom = norm.max(T::of(1e-12));
            for j in 0..k {
                grad[[i, j]] = (q_gen[[i, j]] - q_tgt[[i, j]]) / denom * batch_scale;
            }
        }
    }
    (loss * batch_scale, grad)
}

/// The feature extractor behind the perceptual and identity losses: the
/// attribute predictor's trunk with two named taps. A deeper pretrained
/// network can be dropped in by mapping its layers onto the same two taps.
pub struct FeatureExtractor<'a, T> {
    pub net: &'a AttributeNet<T>,
    pub perceptual_layer: FeatureLayer,
    pub identity_layer: FeatureLayer,
}

impl<'a, T: Real> FeatureExtractor<'a, T> {
    pub fn new(net: &'a AttributeNet<T>) -> Self {
        FeatureExtractor {
            net,
            perceptual_layer: FeatureLayer::Block1,
            identity_layer: FeatureLayer::Block2,
        }
    }

    fn tap(trace: &crate::attrnet::AttrTrace<T>, layer: FeatureLayer) -> &Array4<T> {
        match layer {
            FeatureLayer::Block1 => &trace.acts[0],
            FeatureLayer::Block2 => &trace.acts[1],
        }
    }
}

/// Loss on one named extractor layer for a single image pair.
pub fn feature_loss<T: Real>(
    extractor: &FeatureExtractor<'_, T>,
    layer: FeatureLayer,
    generated: &Array3<T>,
    target: &Array3<T>,
) -> Result<T> {
    check_same_shape(generated, target)?;
    let gb = crate::attrnet::one_image_batch(generated);
    let tb = crate::attrnet::one_image_batch(target);
    let tg = extractor.net.forward(&gb)?;
    let tt = extractor.net.forward(&tb)?;
    let (loss, _) = feature_loss_parts(
        FeatureExtractor::tap(&tg, layer),
        FeatureExtractor::tap(&tt, layer),
        false,
    );
    Ok(loss)
}

/// Perceptual and identity losses from one extractor pass per image.
pub fn feature_losses_both<T: Real>(
    extractor: &FeatureExtractor<'_, T>,
    generated: &Array3<T>,
    target: &Array3<T>,
) -> Result<(T, T)> {
    check_same_shape(generated, target)?;
    let gb = crate::attrnet::one_image_batch(generated);
    let tb = crate::attrnet::one_image_batch(target);
    let tg = extractor.net.forward(&gb)?;
    let tt = extractor.net.forward(&tb)?;
    let (lp, _) = feature_loss_parts(
        FeatureExtractor::tap(&tg, extractor.perceptual_layer),
        FeatureExtractor::tap(&tt, extractor.perceptual_layer),
        false,
    );
    let (li, _) = feature_loss_parts(
        FeatureExtractor::tap(&tg, extractor.identity_layer),
        FeatureExtractor::tap(&tt, extractor.identity_layer),
        false,
    );
    Ok((lp, li))
}

/// Attribute loss for one image pair: Euclidean distance of predictor
/// outputs (squared variant behind the flag).
pub fn attribute_loss<T: Real>(
    net: &AttributeNet<T>,
    generated: &Array3<T>,
    target: &Array3<T>,
    flags: &LossFlags,
) -> Result<T> {
    check_same_shape(generated, target)?;
    let gb = crate::attrnet::one_image_batch(generated);
    let tb = crate::attrnet::one_image_batch(target);
    let qg = net.forward(&gb)?.preds;
    let qt = net.forward(&tb)?.preds;
    let (loss, _) = attribute_loss_parts(&qg, &qt, flags.squared_attribute, flags.attr_divide_by_n);
    Ok(loss)
}

/// Generator adversarial loss on one fake image (eval-mode scoring).
pub fn adversarial_g_loss<T: Real>(
    disc: &Discriminator<T>,
    fake: &ImageTensor<T>,
    attr: &AttributeVector,
    non_saturating: bool,
) -> Result<T> {
    let map_u = disc.score(fake, None)?;
    let map_c = disc.score(fake, Some(attr))?;
    let (h, w) = map_u.dim();
    let u4 = map_u.into_shape_with_order((1, 1, h, w)).expect("contiguous");
    let c4 = map_c.into_shape_with_order((1, 1, h, w)).expect("contiguous");
    Ok(g_adv_from_maps(&u4, &c4, non_saturating))
}

/// Values of the five objective terms on one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub adversarial: f64,
    pub attribute: f64,
    pub perceptual: f64,
    pub identity: f64,
    pub l1: f64,
}

impl LossValues {
    pub fn total(&self, weights: &LossWeights) -> f64 {
        total_generator_loss(
            self.adversarial,
            self.attribute,
            self.perceptual,
            self.identity,
            self.l1,
            weights,
        )
    }

    pub fn all_finite(&self) -> bool {
        [
            self.adversarial,
            self.attribute,
            self.perceptual,
            self.identity,
            self.l1,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// `L = L_G + lambda_A L_A + lambda_P L_P + lambda_I L_I + lambda_1 L_1`.
pub fn total_generator_loss(
    adversarial: f64,
    attribute: f64,
    perceptual: f64,
    identity: f64,
    l1: f64,
    weights: &LossWeights,
) -> f64 {
    adversarial
        + weights.lambda_a * attribute
        + weights.lambda_p * perceptual
        + weights.lambda_i * identity
        + weights.lambda_1 * l1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attrnet::AttrNetConfig;
    use crate::rng::{normal_f64, rng_for};
    use approx::assert_abs_diff_eq;

    fn const_map(v: f64) -> Array4<f64> {
        Array4::from_elem((1, 1, 4, 4), v)
    }

    #[test]
    fn constant_half_gives_two_ln_two() {
        let m = const_map(0.5);
        let l = d_loss_from_maps(&m, &m, &m, &m, &m, false);
        assert_abs_diff_eq!(l, 2.0 * std::f64::consts::LN_2, epsilon = 1e-9);
        // Same constant under the literal two-term conditional form.
        let l2 = d_loss_from_maps(&m, &m, &m, &m, &m, true);
        assert_abs_diff_eq!(l2, 2.0 * std::f64::consts::LN_2, epsilon = 1e-9);
    }

    #[test]
    fn perfect_discriminator_loss_is_nearly_zero() {
        let ones = const_map(1.0);
        let zeros = const_map(0.0);
        let l = d_loss_from_maps(&ones, &zeros, &ones, &zeros, &zeros, false);
        assert!(l.abs() < 1e-5, "loss {l}");
    }

    #[test]
    fn mixed_maps_match_direct_arithmetic() {
        // D(real)=0.8, D(fake)=0.3, D(real,a)=0.7, D(fake,a)=0.4,
        // D(real,wrong)=0.2 =>
        // -1/2 ln 0.8 - 1/2 ln 0.7 - 1/2 ln 0.7 - 1/4 ln 0.6 - 1/4 ln 0.8.
        let l = d_loss_from_maps(
            &const_map(0.8),
            &const_map(0.3),
            &const_map(0.7),
            &const_map(0.4),
            &const_map(0.2),
            false,
        );
        let expect = -0.5 * 0.8f64.ln() - 0.5 * 0.7f64.ln() - 0.5 * 0.7f64.ln()
            - 0.25 * 0.6f64.ln()
            - 0.25 * 0.8f64.ln();
        assert_abs_diff_eq!(l, expect, epsilon = 1e-12);
        assert_abs_diff_eq!(l, 0.6517388, epsilon = 1e-6);
    }

    #[test]
    fn d_loss_is_nonnegative_for_any_map() {
        let mut rng = rng_for(3, &[]);
        for _ in 0..50 {
            let m = |rng: &mut _| {
                Array4::from_shape_fn((1, 1, 3, 3), |_| {
                    (normal_f64(rng) * 0.3 + 0.5).clamp(0.0, 1.0)
                })
            };
            let l = d_loss_from_maps(
                &m(&mut rng),
                &m(&mut rng),
                &m(&mut rng),
                &m(&mut rng),
                &m(&mut rng),
                false,
            );
            assert!(l >= 0.0);
        }
    }

    #[test]
    fn g_adv_constants() {
        let m = const_map(0.5);
        let l = g_adv_from_maps(&m, &m, false);
        assert_abs_diff_eq!(l, 0.5f64.ln(), epsilon = 1e-9);

        let fooled = const_map(1.0 - 1e-7);
        let l = g_adv_from_maps(&fooled, &fooled, false);
        assert_abs_diff_eq!(l, 1e-7f64.ln(), epsilon = 1e-3);

        let l = g_adv_from_maps(&const_map(0.2), &const_map(0.4), false);
        assert_abs_diff_eq!(l, 0.5 * 0.8f64.ln() + 0.5 * 0.6f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(l, -0.367, epsilon = 5e-4);
    }

    #[test]
    fn map_gradients_match_finite_differences() {
        let mut rng = rng_for(5, &[]);
        let mk = |rng: &mut _| {
            Array4::from_shape_fn((1, 1, 2, 2), |_| (normal_f64(rng) * 0.2 + 0.5).clamp(0.05, 0.95))
        };
        let maps: Vec<Array4<f64>> = (0..5).map(|_| mk(&mut rng)).collect();
        for literal in [false, true] {
            let grads = d_loss_map_grads(&maps[0], &maps[1], &maps[2], &maps[3], &maps[4], literal);
            let glist = [&grads.0, &grads.1, &grads.2, &grads.3, &grads.4];
            let h = 1e-7;
            for mi in 0..5 {
                let mut pert = maps.clone();
                for idx in [[0, 0, 0, 0], [0, 0, 1, 1]] {
                    let orig = pert[mi][idx];
                    pert[mi][idx] = orig + h;
                    let lp = d_loss_from_maps(&pert[0], &pert[1], &pert[2], &pert[3], &pert[4], literal);
                    pert[mi][idx] = orig - h;
                    let lm = d_loss_from_maps(&pert[0], &pert[1], &pert[2], &pert[3], &pert[4], literal);
                    pert[mi][idx] = orig;
                    let fd = (lp - lm) / (2.0 * h);
                    assert!(
                        (fd - glist[mi][idx]).abs() < 1e-5,
                        "map {mi} {idx:?}: {fd} vs {}",
                        glist[mi][idx]
                    );
                }
            }
        }
        // Generator side.
        for ns in [false, true] {
            let (gu, gc) = g_adv_map_grads(&maps[0], &maps[1], ns);
            let h = 1e-7;
            for idx in [[0, 0, 0, 0], [0, 0, 1, 0]] {
                let mut m0 = maps[0].clone();
                let orig = m0[idx];
                m0[idx] = orig + h;
                let lp = g_adv_from_maps(&m0, &maps[1], ns);
                m0[idx] = orig - h;
                let lm = g_adv_from_maps(&m0, &maps[1], ns);
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - gu[idx]).abs() < 1e-5);
                let mut m1 = maps[1].clone();
                let orig = m1[idx];
                m1[idx] = orig + h;
                let lp = g_adv_from_maps(&maps[0], &m1, ns);
                m1[idx] = orig - h;
                let lm = g_adv_from_maps(&maps[0], &m1, ns);
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - gc[idx]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn l1_matches_elementwise_oracle() {
        let mut rng = rng_for(7, &[]);
        let a = Array3::from_shape_fn((3, 4, 4), |_| normal_f64(&mut rng));
        let b = Array3::from_shape_fn((3, 4, 4), |_| normal_f64(&mut rng));
        let l = l1_loss(&a, &b).unwrap();
        let brute: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / 48.0;
        assert_abs_diff_eq!(l, brute, epsilon = 1e-12);

        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let shifted = a.mapv(|v| v + 0.5);
        assert_abs_diff_eq!(l1_loss(&shifted, &a).unwrap(), 0.5, epsilon = 1e-12);

        let bad = Array3::<f64>::zeros((3, 2, 2));
        assert!(l1_loss(&a, &bad).is_err());
    }

    #[test]
    fn l1_batch_grad_matches_finite_differences() {
        let mut rng = rng_for(8, &[]);
        let a = Array4::from_shape_fn((2, 1, 3, 3), |_| normal_f64(&mut rng));
        let b = Array4::from_shape_fn((2, 1, 3, 3), |_| normal_f64(&mut rng));
        for strict in [false, true] {
            let g = l1_grad_batch(&a, &b, strict);
            let h = 1e-7;
            let mut ap = a.clone();
            for idx in [[0, 0, 0, 0], [1, 0, 2, 2]] {
                let orig = ap[idx];
                ap[idx] = orig + h;
                let lp = l1_loss_batch(&ap, &b, strict).unwrap();
                ap[idx] = orig - h;
                let lm = l1_loss_batch(&ap, &b, strict).unwrap();
                ap[idx] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - g[idx]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn feature_loss_scaling_and_symmetry() {
        let mut rng = rng_for(9, &[]);
        let f1 = Array4::from_shape_fn((1, 2, 3, 3), |_| normal_f64(&mut rng));
        let f2 = Array4::from_shape_fn((1, 2, 3, 3), |_| normal_f64(&mut rng));
        let (l, _) = feature_loss_parts(&f1, &f2, false);
        let (l_swapped, _) = feature_loss_parts(&f2, &f1, false);
        assert_abs_diff_eq!(l, l_swapped, epsilon = 1e-12);
        // Doubling the difference quadruples the loss.
        let mid = &f2 + &(&f1 - &f2) * 2.0;
        let (l4, _) = feature_loss_parts(&mid, &f2, false);
        assert_abs_diff_eq!(l4, 4.0 * l, epsilon = 1e-9);
        let (lz, _) = feature_loss_parts(&f1, &f1, false);
        assert_eq!(lz, 0.0);
    }

    #[test]
    fn attribute_loss_examples() {
        // Single-coordinate difference of 2 gives norm 2.
        let qa = Array2::from_shape_vec((1, 10), vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let mut qb = qa.clone();
        qb[[0, 5]] = -1.0;
        let (l, _) = attribute_loss_parts(&qa, &qb, false, false);
        assert_abs_diff_eq!(l, 2.0, epsilon = 1e-12);
        let (lz, _) = attribute_loss_parts(&qa, &qa, false, false);
        assert_eq!(lz, 0.0);

        // Random pair equals sqrt of sum of squares.
        let mut rng = rng_for(10, &[]);
        let qg = Array2::from_shape_fn((1, 10), |_| normal_f64(&mut rng));
        let qt = Array2::from_shape_fn((1, 10), |_| normal_f64(&mut rng));
        let (l, _) = attribute_loss_parts(&qg, &qt, false, false);
        let brute = qg
            .iter()
            .zip(qt.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert_abs_diff_eq!(l, brute, epsilon = 1e-9);

        // Flags: squared variant and divide-by-N.
        let (lsq, _) = attribute_loss_parts(&qg, &qt, true, false);
        assert_abs_diff_eq!(lsq, brute * brute, epsilon = 1e-9);
        let (ln, _) = attribute_loss_parts(&qg, &qt, false, true);
        assert_abs_diff_eq!(ln, brute / 10.0, epsilon = 1e-9);
    }

    #[test]
    fn attribute_grad_matches_finite_differences() {
        let mut rng = rng_for(11, &[]);
        let qg = Array2::from_shape_fn((2, 10), |_| normal_f64(&mut rng));
        let qt = Array2::from_shape_fn((2, 10), |_| normal_f64(&mut rng));
        for (squared, divn) in [(false, false), (true, false), (false, true)] {
            let (_, g) = attribute_loss_parts(&qg, &qt, squared, divn);
            let h = 1e-7;
            let mut qp = qg.clone();
            for idx in [[0, 0], [1, 7]] {
                let orig = qp[idx];
                qp[idx] = orig + h;
                let lp = attribute_loss_parts(&qp, &qt, squared, divn).0;
                qp[idx] = orig - h;
                let lm = attribute_loss_parts(&qp, &qt, squared, divn).0;
                qp[idx] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - g[idx]).abs() < 1e-6, "fd {fd} vs {}", g[idx]);
            }
        }
    }

    #[test]
    fn total_loss_combination() {
        let w = LossWeights::default();
        assert_abs_diff_eq!(
            total_generator_loss(0.0, 0.0, 0.0, 0.0, 0.2, &w),
            2.0,
            epsilon = 1e-12
        );
        let zero = LossWeights {
            lambda_1: 0.0,
            lambda_p: 0.0,
            lambda_i: 0.0,
            lambda_a: 0.0,
        };
        assert_eq!(total_generator_loss(-0.5, 1.0, 2.0, 3.0, 4.0, &zero), -0.5);
        assert_abs_diff_eq!(
            total_generator_loss(-0.693, 1.0, 2.0, 2.0, 0.1, &w),
            7.307,
            epsilon = 1e-12
        );
    }

    #[test]
    fn negative_weights_are_rejected() {
        let w = LossWeights {
            lambda_1: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn both_feature_losses_share_one_pass_per_image() {
        let cfg = AttrNetConfig {
            channels: vec![4, 6],
            embed_dim: 8,
            ..Default::default()
        };
        let net = AttributeNet::<f64>::build(&cfg, 3).unwrap();
        let extractor = FeatureExtractor::new(&net);
        let mut rng = rng_for(12, &[]);
        let a = Array3::from_shape_fn((3, 8, 8), |_| normal_f64(&mut rng).tanh());
        let b = Array3::from_shape_fn((3, 8, 8), |_| normal_f64(&mut rng).tanh());
        let before = net.forward_count();
        let (lp, li) = feature_losses_both(&extractor, &a, &b).unwrap();
        let after = net.forward_count();
        assert_eq!(after - before, 2, "one extractor pass per image");
        assert!(lp > 0.0 && li > 0.0);
        let (lp0, li0) = feature_losses_both(&extractor, &a, &a).unwrap();
        assert_eq!((lp0, li0), (0.0, 0.0));

        // Unknown layer identifiers are rejected at parse time.
        assert!("block3".parse::<FeatureLayer>().is_err());
        assert!("block1".parse::<FeatureLayer>().is_ok());
    }
}
