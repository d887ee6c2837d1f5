//! Joint image/mask augmentation.
//!
//! Geometric transforms move image and mask together; masks are resampled by
//! nearest neighbour so they stay binary. Naive manipulations (copy-move,
//! inpainting) add their rectangle to the mask.

use serde::{Deserialize, Serialize};

use super::synth::{random_rect, tamper_rect, TamperKind};
use super::Sample;
use crate::error::Result;
use crate::imageops;
use crate::tensor::{Element, Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Probability of a random multiple-of-90° rotation.
    pub rot90_prob: f64,
    /// Probability of a small rotation in `[-max_rotate_deg, max_rotate_deg]`.
    pub rotate_prob: f64,
    pub max_rotate_deg: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub rescale_prob: f64,
    pub rescale_range: (f64, f64),
    pub copy_move_prob: f64,
    pub inpaint_prob: f64,
}

impl AugmentationPolicy {
    /// Leaves samples unchanged.
    pub fn identity() -> Self {
        AugmentationPolicy {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rot90_prob: 0.0,
            rotate_prob: 0.0,
            max_rotate_deg: 15.0,
            blur_prob: 0.0,
            blur_sigma: (0.5, 2.0),
            rescale_prob: 0.0,
            rescale_range: (0.75, 1.25),
            copy_move_prob: 0.0,
            inpaint_prob: 0.0,
        }
    }
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rot90_prob: 0.25,
            rotate_prob: 0.2,
            blur_prob: 0.2,
            rescale_prob: 0.2,
            copy_move_prob: 0.1,
            inpaint_prob: 0.1,
            ..Self::identity()
        }
    }
}

fn map_planes<T: Element>(
    t: &Tensor<T>,
    oh: usize,
    ow: usize,
    src_of: impl Fn(usize, usize) -> (usize, usize),
) -> Result<Tensor<T>> {
    let (c, h, w) = t.dims3()?;
    let d = t.data();
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let ch = i / (oh * ow);
        let (sy, sx) = src_of((i / ow) % oh, i % ow);
        d[(ch * h + sy) * w + sx]
    }))
}

pub fn hflip<T: Element>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = t.dims3()?;
    map_planes(t, h, w, |y, x| (y, w - 1 - x))
}

pub fn vflip<T: Element>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = t.dims3()?;
    map_planes(t, h, w, |y, x| (h - 1 - y, x))
}

/// Quarter turn clockwise: output `(C, W, H)`, `out[y][x] = in[H-1-x][y]`.
pub fn rot90<T: Element>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = t.dims3()?;
    map_planes(t, w, h, |y, x| (h - 1 - x, y))
}

/// Rotation about the image centre by `deg` (counter-clockwise), zero fill.
/// Image sampled bilinearly, mask by nearest neighbour.
pub fn rotate(sample: &Sample, deg: f64) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    let (s, c) = deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src_of = |y: usize, x: usize| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        (cy + c * dy - s * dx, cx + s * dy + c * dx)
    };
    let img = sample.image.data();
    let out = Tensor::from_fn(&[3, h, w], |i| {
        let ch = i / (h * w);
        let (sy, sx) = src_of((i / w) % h, i % w);
        let (y0, x0) = (sy.floor(), sx.floor());
        let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
        let at = |yy: f64, xx: f64| {
            if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                0.0
            } else {
                img[(ch * h + yy as usize) * w + xx as usize]
            }
        };
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
            + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0))
    });
    let m = sample.mask.data();
    let mask = Tensor::from_fn(&[1, h, w], |i| {
        let (sy, sx) = src_of(i / w, i % w);
        let (yy, xx) = (sy.round(), sx.round());
        yy >= 0.0 && xx >= 0.0 && yy < h as f64 && xx < w as f64 && m[yy as usize * w + xx as usize]
    });
    Sample::new(out, mask, sample.source_id.clone())
}

pub fn rescale(sample: &Sample, factor: f64) -> Result<Sample> {
    let h2 = ((sample.height() as f64 * factor).round() as usize).max(1);
    let w2 = ((sample.width() as f64 * factor).round() as usize).max(1);
    Sample::new(
        imageops::resize_bilinear(&sample.image, h2, w2)?,
        imageops::resize_nearest_mask(&sample.mask, h2, w2)?,
        sample.source_id.clone(),
    )
}

/// Applies the policy with draws from `rng`, in the order rescale, flips,
/// quarter turns, small rotation, blur, naive manipulations.
pub fn augment(sample: &Sample, policy: &AugmentationPolicy, rng: &mut Rng) -> Result<Sample> {
    let mut s = sample.clone();
    if rng.bernoulli(policy.rescale_prob) {
        let f = rng.range_f64(policy.rescale_range.0, policy.rescale_range.1);
        s = rescale(&s, f)?;
    }
    if rng.bernoulli(policy.hflip_prob) {
        s = Sample::new(hflip(&s.image)?, hflip(&s.mask)?, s.source_id)?;
    }
    if rng.bernoulli(policy.vflip_prob) {
        s = Sample::new(vflip(&s.image)?, vflip(&s.mask)?, s.source_id)?;
    }
    if rng.bernoulli(policy.rot90_prob) {
        for _ in 0..rng.range_usize(1, 4) {
            s = Sample::new(rot90(&s.image)?, rot90(&s.mask)?, s.source_id)?;
        }
    }
    if rng.bernoulli(policy.rotate_prob) {
        let deg = rng.range_f64(-policy.max_rotate_deg, policy.max_rotate_deg);
        s = rotate(&s, deg)?;
    }
    if rng.bernoulli(policy.blur_prob) {
        let sigma = rng.range_f64(policy.blur_sigma.0, policy.blur_sigma.1);
        s.image = imageops::gaussian_blur(&s.image, sigma)?;
    }
    let big_enough = s.height() >= 32 && s.width() >= 32;
    for (p, kind) in [
        (policy.copy_move_prob, TamperKind::CopyMove),
        (policy.inpaint_prob, TamperKind::Inpaint),
    ] {
        if big_enough && rng.bernoulli(p) {
            let rect = random_rect(s.height(), s.width(), rng);
            s = tamper_rect(&s, kind, rect, None, rng)?;
        }
    }
    Ok(s)
}
