//! JPEG and Gaussian-blur degradation sweeps.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::ImageFormat;
use serde::{Deserialize, Serialize};

use crate::data::io::{rgb_to_tensor, tensor_to_rgb};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::imageops::gaussian_blur;
use crate::metrics::{all_positive_f1, evaluate_with, predict_sample, MetricsReport, DEFAULT_THRESHOLD};
use crate::model::ImlVit;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Jpeg,
    GaussianBlur,
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jpeg" => Ok(AttackKind::Jpeg),
            "gaussian_blur" | "blur" => Ok(AttackKind::GaussianBlur),
            other => Err(Error::InvalidArgument(format!("unknown attack kind {other:?}"))),
        }
    }
}

/// Attack kind and the strengths to sweep: JPEG qualities or blur σ values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub levels: Vec<f64>,
}

impl AttackSpec {
    pub fn default_for(kind: AttackKind) -> Self {
        let levels = match kind {
            AttackKind::Jpeg => vec![100.0, 90.0, 80.0, 70.0, 60.0, 50.0],
            AttackKind::GaussianBlur => vec![0.5, 1.0, 2.0, 3.0, 4.0],
        };
        AttackSpec { kind, levels }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidArgument("attack spec has no levels".into()));
        }
        for &l in &self.levels {
            check_level(self.kind, l)?;
        }
        Ok(())
    }
}

fn check_level(kind: AttackKind, level: f64) -> Result<()> {
    let ok = match kind {
        AttackKind::Jpeg => level.fract() == 0.0 && (1.0..=100.0).contains(&level),
        AttackKind::GaussianBlur => level > 0.0 && level.is_finite(),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("invalid {kind:?} level {level}")))
    }
}

/// JPEG encode/decode round trip at `quality`.
pub fn jpeg_round_trip(image: &Tensor<f32>, quality: u8) -> Result<Tensor<f32>> {
    let rgb = tensor_to_rgb(image)?;
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode_image(&rgb)?;
    let decoded = image::load(Cursor::new(buf), ImageFormat::Jpeg)?.to_rgb8();
    Ok(rgb_to_tensor(&decoded))
}

/// Degrades the image; the mask is left as is.
pub fn apply_attack(sample: &Sample, kind: AttackKind, level: f64) -> Result<Sample> {
    check_level(kind, level)?;
    let image = match kind {
        AttackKind::Jpeg => jpeg_round_trip(&sample.image, level as u8)?,
        AttackKind::GaussianBlur => gaussian_blur(&sample.image, level)?,
    };
    Ok(Sample {
        image,
        ..sample.clone()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub level: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub kind: AttackKind,
    pub points: Vec<CurvePoint>,
    /// Mean F1 of an all-positive prediction; depends on the masks only.
    pub baseline_f1: f64,
}

/// Mean over samples of the all-positive F1.
pub fn baseline_f1(samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| all_positive_f1(&s.mask)).sum::<f64>() / samples.len() as f64
}

/// Sweep with an arbitrary predictor.
pub fn sweep_with(
    samples: &[Sample],
    spec: &AttackSpec,
    threshold: f64,
    predict: impl Fn(&Sample) -> Result<Tensor<f32>> + Sync,
) -> Result<RobustnessCurve> {
    spec.validate()?;
    let mut points = Vec::with_capacity(spec.levels.len());
    for &level in &spec.levels {
        let attacked = samples
            .iter()
            .map(|s| apply_attack(s, spec.kind, level))
            .collect::<Result<Vec<_>>>()?;
        let r: MetricsReport = evaluate_with(&attacked, &format!("{:?}@{level}", spec.kind), threshold, &predict)?;
        points.push(CurvePoint {
            level,
            f1: r.f1,
            auc: r.auc,
        });
    }
    Ok(RobustnessCurve {
        kind: spec.kind,
        points,
        baseline_f1: baseline_f1(samples),
    })
}

pub fn sweep(model: &ImlVit, samples: &[Sample], spec: &AttackSpec) -> Result<RobustnessCurve> {
    sweep_with(samples, spec, DEFAULT_THRESHOLD, |s| predict_sample(model, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mask;

    fn sample() -> Sample {
        let img = Tensor::from_fn(&[3, 24, 24], |i| ((i * 37) % 251) as f32 / 255.0);
        let mask = Mask::from_fn(&[1, 24, 24], |i| (i % 24) < 6);
        Sample::new(img, mask, "a").unwrap()
    }

    #[test]
    fn jpeg_q100_is_close() {
        let s = sample();
        let a = apply_attack(&s, AttackKind::Jpeg, 100.0).unwrap();
        assert_eq!(a.mask, s.mask);
        let mean: f32 = a.image.data().iter().zip(s.image.data()).map(|(x, y)| (x - y).abs()).sum::<f32>()
            / s.image.len() as f32;
        assert!(mean < 0.08, "{mean}");
    }

    #[test]
    fn tiny_blur_is_identity() {
        let s = sample();
        let a = apply_attack(&s, AttackKind::GaussianBlur, 0.1).unwrap();
        assert!(a.image.max_abs_diff(&s.image) < 1e-6);
    }

    #[test]
    fn rejects_bad_levels() {
        let s = sample();
        assert!(apply_attack(&s, AttackKind::Jpeg, 0.0).is_err());
        assert!(apply_attack(&s, AttackKind::Jpeg, 50.5).is_err());
        assert!(apply_attack(&s, AttackKind::GaussianBlur, 0.0).is_err());
        let empty = AttackSpec {
            kind: AttackKind::Jpeg,
            levels: vec![],
        };
        assert!(sweep_with(&[s], &empty, 0.5, |s| Ok(s.mask.to_f32())).is_err());
    }

    #[test]
    fn baseline_ten_percent() {
        let img = Tensor::zeros(&[3, 10, 10]);
        let mask = Mask::from_fn(&[1, 10, 10], |i| i < 10);
        let s = Sample::new(img, mask, "b").unwrap();
        assert!((baseline_f1(&[s.clone(), s]) - 0.2 / 1.1).abs() < 1e-12);
    }
}
