//! Pixel-level F1 at a fixed threshold and rank-based AUC.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{shape_err, Error, Result};
use crate::model::ImlVit;
use crate::padding::{crop_to_content, pad_to_canvas};
use crate::par;
use crate::tensor::{Mask, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_prediction(prob: &Tensor<f32>, gt: &Mask, threshold: f64) -> Result<Self> {
        if prob.shape() != gt.shape() {
            return Err(shape_err!("prediction {:?} vs mask {:?}", prob.shape(), gt.shape()));
        }
        let mut c = Confusion::default();
        for (&p, &t) in prob.data().iter().zip(gt.data()) {
            match (p as f64 >= threshold, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    /// `2TP / (2TP + FP + FN)`; with no positives in the ground truth, 1 for
    /// an all-negative prediction and 0 otherwise.
    pub fn f1(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            return if self.fp == 0 { 1.0 } else { 0.0 };
        }
        2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64
    }

    pub fn recall(&self) -> Option<f64> {
        (self.tp + self.fn_ > 0).then(|| self.tp as f64 / (self.tp + self.fn_) as f64)
    }
}

pub fn f1_at_threshold(prob: &Tensor<f32>, gt: &Mask, threshold: f64) -> Result<f64> {
    Ok(Confusion::from_prediction(prob, gt, threshold)?.f1())
}

/// Probability that a random positive pixel outscores a random negative one
/// (ties count ½). `None` when the mask has a single class.
pub fn auc(prob: &Tensor<f32>, gt: &Mask) -> Result<Option<f64>> {
    if prob.shape() != gt.shape() {
        return Err(shape_err!("prediction {:?} vs mask {:?}", prob.shape(), gt.shape()));
    }
    let pos = gt.count_true() as f64;
    let neg = gt.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Ok(None);
    }
    let mut order: Vec<(f32, bool)> = prob.data().iter().copied().zip(gt.data().iter().copied()).collect();
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    // Mann-Whitney U with mid-ranks for ties
    let mut rank_sum = 0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && order[j].0 == order[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        let p = order[i..j].iter().filter(|v| v.1).count();
        rank_sum += mid * p as f64;
        i = j;
    }
    let u = rank_sum - pos * (pos + 1.0) / 2.0;
    Ok(Some(u / (pos * neg)))
}

/// F1 of predicting every pixel positive: `2ρ/(1+ρ)` for prevalence ρ.
pub fn all_positive_f1(gt: &Mask) -> f64 {
    let rho = gt.count_true() as f64 / gt.len() as f64;
    2.0 * rho / (1.0 + rho)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub source_id: String,
    pub f1: f64,
    pub auc: Option<f64>,
    pub confusion: Confusion,
}

impl ImageMetrics {
    pub fn compute(source_id: &str, prob: &Tensor<f32>, gt: &Mask, threshold: f64) -> Result<Self> {
        let confusion = Confusion::from_prediction(prob, gt, threshold)?;
        Ok(ImageMetrics {
            source_id: source_id.to_string(),
            f1: confusion.f1(),
            auc: auc(prob, gt)?,
            confusion,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub n_images: usize,
    /// Mean per-image F1.
    pub f1: f64,
    /// Mean over images where AUC is defined.
    pub auc: Option<f64>,
    pub n_auc: usize,
    pub threshold: f64,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricsReport {
    pub fn from_images(dataset: &str, threshold: f64, per_image: Vec<ImageMetrics>) -> Self {
        let n = per_image.len();
        let f1 = if n == 0 {
            0.0
        } else {
            per_image.iter().map(|m| m.f1).sum::<f64>() / n as f64
        };
        let aucs: Vec<f64> = per_image.iter().filter_map(|m| m.auc).collect();
        let auc = (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);
        MetricsReport {
            dataset: dataset.to_string(),
            n_images: n,
            f1,
            auc,
            n_auc: aucs.len(),
            threshold,
            per_image,
        }
    }

    /// Concatenates per-image results and re-aggregates.
    pub fn merge(&self, other: &MetricsReport) -> MetricsReport {
        let mut all = self.per_image.clone();
        all.extend(other.per_image.iter().cloned());
        MetricsReport::from_images(&self.dataset, self.threshold, all)
    }
}

/// Canvas probabilities cropped back to the sample's own resolution.
pub fn predict_sample(model: &ImlVit, sample: &Sample) -> Result<Tensor<f32>> {
    let padded = pad_to_canvas(sample, model.cfg.canvas)?;
    let prob = model.predict_proba(&padded.image)?;
    crop_to_content(&prob, &padded)
}

/// Pad, predict, crop and score every sample.
pub fn evaluate_dataset(model: &ImlVit, samples: &[Sample], dataset: &str, threshold: f64) -> Result<MetricsReport> {
    evaluate_with(samples, dataset, threshold, |s| predict_sample(model, s))
}

/// Scores predictions produced by `predict` for each sample.
pub fn evaluate_with(
    samples: &[Sample],
    dataset: &str,
    threshold: f64,
    predict: impl Fn(&Sample) -> Result<Tensor<f32>> + Sync,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(format!("dataset {dataset:?} is empty")));
    }
    let per = par::map_range(samples.len(), |i| {
        let s = &samples[i];
        let prob = predict(s)?;
        ImageMetrics::compute(&s.source_id, &prob, &s.mask, threshold)
    });
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_images(dataset, threshold, per))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(v: &[u8]) -> Mask {
        Mask::from_vec(&[1, 1, v.len()], v.iter().map(|&b| b == 1).collect()).unwrap()
    }

    fn p(v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(&[1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn f1_counting_case() {
        // TP=3, FP=1, FN=2
        let gt = m(&[1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let pr = p(&[0.9, 0.8, 0.5, 0.1, 0.2, 0.7, 0., 0., 0., 0., 0., 0., 0., 0., 0., 0.]);
        assert!((f1_at_threshold(&pr, &gt, 0.5).unwrap() - 6.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn f1_authentic_conventions() {
        let gt = m(&[0, 0, 0]);
        assert_eq!(f1_at_threshold(&p(&[0.1, 0.2, 0.3]), &gt, 0.5).unwrap(), 1.0);
        assert_eq!(f1_at_threshold(&p(&[0.1, 0.6, 0.3]), &gt, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&p(&[0.1, 0.2, 0.8, 0.9]), &m(&[0, 0, 1, 1])).unwrap(), Some(1.0));
        assert_eq!(auc(&p(&[0.5; 4]), &m(&[0, 0, 1, 1])).unwrap(), Some(0.5));
        assert_eq!(auc(&p(&[0.5; 3]), &m(&[1, 1, 1])).unwrap(), None);
        // one inversion out of 9 pairs
        let a = auc(&p(&[0.1, 0.2, 0.6, 0.5, 0.7, 0.9]), &m(&[0, 0, 0, 1, 1, 1])).unwrap().unwrap();
        assert!((a - 8.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn baseline_closed_form() {
        let gt = Mask::from_fn(&[1, 10, 10], |i| i < 10);
        assert!((all_positive_f1(&gt) - 0.2 / 1.1).abs() < 1e-12);
        let all = Tensor::full(&[1, 10, 10], 1.0f32);
        assert!((f1_at_threshold(&all, &gt, 0.5).unwrap() - all_positive_f1(&gt)).abs() < 1e-12);
    }

    #[test]
    fn report_mean() {
        let mk = |f1| ImageMetrics {
            source_id: "x".into(),
            f1,
            auc: None,
            confusion: Confusion::default(),
        };
        let r = MetricsReport::from_images("d", 0.5, vec![mk(1.0), mk(0.0)]);
        assert_eq!(r.f1, 0.5);
        assert_eq!(r.auc, None);
    }
}
