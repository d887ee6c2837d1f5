//! Segmentation BCE plus λ-weighted BCE restricted to the edge band.
//!
//! Everything is reduced in `f64` with pairwise summation so the result does
//! not depend on thread count.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::morphology::{edge_mask, pick_k, EdgeMask};
use crate::tensor::{Mask, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    /// Probability clamp used by the probability-space entry points.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 20.0,
            epsilon: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("loss.lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!("loss.epsilon out of range: {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub seg: f64,
    pub edge: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.seg.is_finite() && self.edge.is_finite()
    }
}

/// Sum with pairwise splitting; the split points depend only on the length.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

fn check_same(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(shape_err!("{what}: {a:?} vs {b:?}"));
    }
    Ok(())
}

/// Mean of `-[t log p + (1-t) log(1-p)]` with `p` clamped to `[ε, 1-ε]`,
/// over all pixels or over those set in `weight` (0 when none are).
pub fn bce(prob: &Tensor<f32>, target: &Mask, weight: Option<&Mask>, eps: f64) -> Result<f64> {
    check_same(prob.shape(), target.shape(), "bce target")?;
    if let Some(w) = weight {
        check_same(prob.shape(), w.shape(), "bce weight")?;
    }
    let terms: Vec<f64> = prob
        .data()
        .iter()
        .zip(target.data())
        .enumerate()
        .filter(|(i, _)| weight.is_none_or(|w| w.data()[*i]))
        .map(|(_, (&p, &t))| {
            let p = (p as f64).clamp(eps, 1.0 - eps);
            if t {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .collect();
    if terms.is_empty() {
        return Ok(0.0);
    }
    Ok(pairwise_sum(&terms) / terms.len() as f64)
}

/// Probability-space objective on one canvas.
pub fn combined_loss(prob_full: &Tensor<f32>, mask: &Mask, edge: &EdgeMask, cfg: &LossConfig) -> Result<LossParts> {
    check_same(mask.shape(), edge.data.shape(), "edge mask")?;
    let seg = bce(prob_full, mask, None, cfg.epsilon)?;
    let edge = bce(prob_full, mask, Some(&edge.data), cfg.epsilon)?;
    Ok(LossParts {
        total: seg + cfg.lambda * edge,
        seg,
        edge,
    })
}

/// Numerically stable `BCE(σ(z), t)`.
#[inline]
pub fn bce_logit(z: f64, t: bool) -> f64 {
    z.max(0.0) - if t { z } else { 0.0 } + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logit-space objective on one canvas and its gradient with respect to
/// every logit.
pub fn combined_loss_logits(logits: &[f32], mask: &[bool], band: &[bool], lambda: f64) -> Result<(LossParts, Vec<f64>)> {
    if logits.len() != mask.len() || logits.len() != band.len() {
        return Err(shape_err!(
            "loss: {} logits, {} mask, {} band pixels",
            logits.len(),
            mask.len(),
            band.len()
        ));
    }
    let n = logits.len();
    if n == 0 {
        return Err(shape_err!("loss on empty canvas"));
    }
    let terms: Vec<f64> = logits.iter().zip(mask).map(|(&z, &t)| bce_logit(z as f64, t)).collect();
    let seg = pairwise_sum(&terms) / n as f64;
    let band_terms: Vec<f64> = terms.iter().zip(band).filter(|(_, &b)| b).map(|(&v, _)| v).collect();
    let nb = band_terms.len();
    let edge = if nb == 0 {
        0.0
    } else {
        pairwise_sum(&band_terms) / nb as f64
    };
    let grad = logits
        .iter()
        .zip(mask)
        .zip(band)
        .map(|((&z, &t), &b)| {
            let d = sigmoid64(z as f64) - if t { 1.0 } else { 0.0 };
            let mut g = d / n as f64;
            if b {
                g += lambda * d / nb as f64;
            }
            g
        })
        .collect();
    Ok((
        LossParts {
            total: seg + lambda * edge,
            seg,
            edge,
        },
        grad,
    ))
}

/// Ground truth of one canvas: the padded mask and its edge band.
#[derive(Clone, Debug)]
pub struct Target {
    pub mask: Mask,
    pub band: EdgeMask,
}

impl Target {
    /// Builds the band on the padded canvas mask; `k` defaults to the
    /// resolution-scaled width.
    pub fn new(mask: Mask, k: Option<usize>) -> Result<Self> {
        let k = k.unwrap_or_else(|| pick_k(&mask));
        let band = edge_mask(&mask, k)?;
        Ok(Target { mask, band })
    }
}

/// Mean objective over a batch of canvas logits `[N·H·W, 1]`, attached to
/// the tape as a scalar node.
pub fn batch_loss(graph: &mut Graph, full_logits: &Var, targets: &[Target], cfg: &LossConfig) -> Result<(Var, LossParts)> {
    let n = targets.len();
    if n == 0 || full_logits.len() % n != 0 {
        return Err(shape_err!(
            "{} logits for {} targets",
            full_logits.len(),
            n
        ));
    }
    let per = full_logits.len() / n;
    let mut sum = LossParts::default();
    let mut grad = Vec::with_capacity(full_logits.len());
    for (i, t) in targets.iter().enumerate() {
        let z = &full_logits.data()[i * per..(i + 1) * per];
        let (parts, g) = combined_loss_logits(z, t.mask.data(), t.band.data.data(), cfg.lambda)?;
        sum.total += parts.total;
        sum.seg += parts.seg;
        sum.edge += parts.edge;
        grad.extend(g.into_iter().map(|v| (v / n as f64) as f32));
    }
    let mean = LossParts {
        total: sum.total / n as f64,
        seg: sum.seg / n as f64,
        edge: sum.edge / n as f64,
    };
    let node = graph.scalar_with_grad(full_logits, mean.total as f32, grad)?;
    Ok((node, mean))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_probability_is_ln2() {
        let p = Tensor::full(&[1, 3, 3], 0.5f32);
        let t = Mask::from_fn(&[1, 3, 3], |i| i % 2 == 0);
        assert!((bce(&p, &t, None, 1e-6).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn exact_prediction_is_tiny() {
        let t = Mask::from_fn(&[1, 4, 4], |i| i % 3 == 0);
        let p = t.to_f32();
        let l = bce(&p, &t, None, 1e-6).unwrap();
        assert!(l <= -(1.0f64 - 1e-6).ln() + 1e-15);
    }

    #[test]
    fn empty_weight_is_zero() {
        let t = Mask::full(&[1, 2, 2], true);
        let w = Mask::full(&[1, 2, 2], false);
        assert_eq!(bce(&Tensor::full(&[1, 2, 2], 0.3), &t, Some(&w), 1e-6).unwrap(), 0.0);
    }

    #[test]
    fn logit_form_matches_probability_form() {
        let z: Vec<f32> = (0..16).map(|i| (i as f32 - 8.0) * 0.7).collect();
        let m: Vec<bool> = (0..16).map(|i| i % 3 == 0).collect();
        let b: Vec<bool> = (0..16).map(|i| i % 2 == 0).collect();
        let (parts, _) = combined_loss_logits(&z, &m, &b, 20.0).unwrap();
        let prob = Tensor::from_vec(&[1, 4, 4], z.iter().map(|&v| crate::model::sigmoid(v)).collect()).unwrap();
        let mask = Mask::from_vec(&[1, 4, 4], m).unwrap();
        let band = EdgeMask {
            data: Mask::from_vec(&[1, 4, 4], b).unwrap(),
            k: 1,
        };
        let p = combined_loss(&prob, &mask, &band, &LossConfig::default()).unwrap();
        assert!((p.total - parts.total).abs() < 1e-5);
    }

    #[test]
    fn logit_loss_extremes_are_finite() {
        let (p, g) = combined_loss_logits(&[1e4, -1e4], &[false, true], &[true, true], 20.0).unwrap();
        assert!(p.is_finite() && g.iter().all(|v| v.is_finite()));
    }
}
