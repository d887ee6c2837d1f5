//! Resolution-preserving canvas: content goes to the top-left of a zero
//! canvas and is only downscaled when it does not fit.

use crate::data::Sample;
use crate::error::{shape_err, Error, Result};
use crate::imageops;
use crate::tensor::{Mask, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PaddedSample {
    pub image: Tensor<f32>,
    pub mask: Mask,
    pub content_h: usize,
    pub content_w: usize,
    pub orig_h: usize,
    pub orig_w: usize,
    pub source_id: String,
}

impl PaddedSample {
    pub fn was_resized(&self) -> bool {
        (self.content_h, self.content_w) != (self.orig_h, self.orig_w)
    }

    pub fn canvas(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }

    /// Content part of the mask, `(1, content_h, content_w)`.
    pub fn content_mask(&self) -> Mask {
        crop(&self.mask, self.content_h, self.content_w)
    }
}

fn crop<T: crate::tensor::Element>(t: &Tensor<T>, ch: usize, cw: usize) -> Tensor<T> {
    let (c, _, w) = t.dims3().expect("rank 3");
    let h = t.shape()[1];
    let d = t.data();
    Tensor::from_fn(&[c, ch, cw], |i| {
        let k = i / (ch * cw);
        let y = (i / cw) % ch;
        let x = i % cw;
        d[(k * h + y) * w + x]
    })
}

fn place<T: crate::tensor::Element>(t: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (c, th, tw) = t.dims3().expect("rank 3");
    let d = t.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let k = i / (h * w);
        let y = (i / w) % h;
        let x = i % w;
        if y < th && x < tw {
            d[(k * th + y) * tw + x]
        } else {
            T::default()
        }
    })
}

/// Extent after fitting `(h, w)` into `canvas`, keeping the aspect ratio.
pub fn fitted_extent(h: usize, w: usize, canvas: (usize, usize)) -> (usize, usize) {
    let (ch, cw) = canvas;
    if h <= ch && w <= cw {
        return (h, w);
    }
    let scale = (ch as f64 / h as f64).min(cw as f64 / w as f64);
    let nh = ((h as f64 * scale).round() as usize).clamp(1, ch);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, cw);
    (nh, nw)
}

pub fn pad_to_canvas(sample: &Sample, canvas: (usize, usize)) -> Result<PaddedSample> {
    let (h, w) = (sample.height(), sample.width());
    if h == 0 || w == 0 || canvas.0 == 0 || canvas.1 == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot pad {h}x{w} image to {}x{} canvas",
            canvas.0, canvas.1
        )));
    }
    let (nh, nw) = fitted_extent(h, w, canvas);
    let (image, mask) = if (nh, nw) == (h, w) {
        (sample.image.clone(), sample.mask.clone())
    } else {
        (
            imageops::resize_bilinear(&sample.image, nh, nw)?,
            imageops::resize_nearest_mask(&sample.mask, nh, nw)?,
        )
    };
    Ok(PaddedSample {
        image: place(&image, canvas.0, canvas.1),
        mask: place(&mask, canvas.0, canvas.1),
        content_h: nh,
        content_w: nw,
        orig_h: h,
        orig_w: w,
        source_id: sample.source_id.clone(),
    })
}

/// Inverse of [`pad_to_canvas`] for a canvas-sized prediction.
pub fn crop_to_content(prediction: &Tensor<f32>, padded: &PaddedSample) -> Result<Tensor<f32>> {
    let (c, h, w) = prediction.dims3()?;
    if (h, w) != padded.canvas() {
        return Err(shape_err!(
            "prediction {:?} does not match canvas {:?}",
            prediction.shape(),
            padded.canvas()
        ));
    }
    let _ = c;
    let content = crop(prediction, padded.content_h, padded.content_w);
    if padded.was_resized() {
        imageops::resize_bilinear(&content, padded.orig_h, padded.orig_w)
    } else {
        Ok(content)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn sample(h: usize, w: usize) -> Sample {
        let img = Tensor::from_fn(&[3, h, w], |i| 0.1 + (i % 97) as f32 / 200.0);
        let mask = Tensor::from_fn(&[1, h, w], |i| (i / w) < h / 2);
        Sample::new(img, mask, "s").unwrap()
    }

    #[test]
    fn top_left_placement() {
        let p = pad_to_canvas(&sample(640, 480), (1024, 1024)).unwrap();
        assert_eq!((p.content_h, p.content_w), (640, 480));
        assert_eq!(p.image.shape(), &[3, 1024, 1024]);
        assert!(p.image.at3(0, 639, 479) > 0.0);
        for c in 0..3 {
            assert_eq!(p.image.at3(c, 640, 0), 0.0);
            assert_eq!(p.image.at3(c, 0, 480), 0.0);
            assert_eq!(p.image.at3(c, 1023, 1023), 0.0);
        }
        assert!(!p.mask.at3(0, 700, 10));
        assert!(!p.was_resized());
    }

    #[test]
    fn exact_fit_is_identity() {
        let s = sample(64, 64);
        let p = pad_to_canvas(&s, (64, 64)).unwrap();
        assert_eq!(p.image, s.image);
        assert_eq!(p.mask, s.mask);
    }

    #[test]
    fn oversize_keeps_aspect() {
        assert_eq!(fitted_extent(2048, 1024, (1024, 1024)), (1024, 512));
        assert_eq!(fitted_extent(300, 1200, (1024, 1024)), (256, 1024));
        let p = pad_to_canvas(&sample(256, 128), (64, 64)).unwrap();
        assert_eq!((p.content_h, p.content_w), (64, 32));
        let pred = p.image.channel(0).unwrap();
        let back = crop_to_content(&pred, &p).unwrap();
        assert_eq!(back.shape(), &[1, 256, 128]);
        assert!(p.mask.data().iter().all(|_| true));
    }

    #[test]
    fn crop_round_trip_exact() {
        let s = sample(37, 50);
        let p = pad_to_canvas(&s, (64, 64)).unwrap();
        let back = crop_to_content(&p.image.channel(0).unwrap(), &p).unwrap();
        assert_eq!(back, s.image.channel(0).unwrap());
        assert!(crop_to_content(&Tensor::zeros(&[1, 32, 32]), &p).is_err());
        assert!(pad_to_canvas(&s, (0, 64)).is_err());
    }

    #[test]
    fn content_independent_of_canvas() {
        let s = crate::data::synthetic_base(40, 30, &mut Rng::new(1), "x").unwrap();
        let a = pad_to_canvas(&s, (64, 64)).unwrap();
        let b = pad_to_canvas(&s, (128, 96)).unwrap();
        let ca = crop_to_content(&a.image, &a).unwrap();
        let cb = crop_to_content(&b.image, &b).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a.content_mask(), b.content_mask());
    }
}
