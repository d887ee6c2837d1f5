use std::path::Path;

use image::{GrayImage, ImageReader, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor};

fn open(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// RGB image as `(3, h, w)` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    Ok(rgb_to_tensor(&open(path)?.to_rgb8()))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        raw[p * 3 + c] as f32 / 255.0
    })
}

/// Quantizes a `(3, h, w)` tensor to 8-bit RGB.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let d = t.data();
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([q(d[p]), q(d[h * w + p]), q(d[2 * h * w + p])])
    }))
}

/// Mask image to `(1, h, w)`: luminance > 127 is manipulated.
pub fn decode_mask(path: &Path) -> Result<Mask> {
    let g = open(path)?.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    Tensor::from_vec(&[1, h, w], g.as_raw().iter().map(|&v| v > 127).collect())
}

pub(crate) fn save(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    img(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_rgb_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let img = tensor_to_rgb(t)?;
    save(|p| img.save_with_format(p, image::ImageFormat::Png), path)
}

/// Mask as an 8-bit PNG with values 0/255.
pub fn save_mask_png(m: &Mask, path: &Path) -> Result<()> {
    let (_, h, w) = m.dims3()?;
    let img = GrayImage::from_raw(
        w as u32,
        h as u32,
        m.data()[..h * w].iter().map(|&b| if b { 255 } else { 0 }).collect(),
    )
    .ok_or_else(|| Error::Shape("mask buffer".into()))?;
    save(|p| img.save_with_format(p, image::ImageFormat::Png), path)
}

/// First channel of a `(C, h, w)` tensor in `[0, 1]` as 8-bit grayscale,
/// `round(v·255)`.
pub fn save_gray_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let (_, h, w) = t.dims3()?;
    let img = GrayImage::from_raw(
        w as u32,
        h as u32,
        t.data()[..h * w]
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect(),
    )
    .ok_or_else(|| Error::Shape("gray buffer".into()))?;
    save(|p| img.save_with_format(p, image::ImageFormat::Png), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let img = GrayImage::from_fn(4, 4, |x, y| image::Luma([if (x + y) % 2 == 0 { 255 } else { 0 }]));
        img.save(&p).unwrap();
        let m = decode_mask(&p).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(m.at3(0, y, x), (x + y) % 2 == 0);
            }
        }
        let img = GrayImage::from_fn(3, 2, |x, _| image::Luma([if x == 0 { 127 } else { 128 }]));
        img.save(&p).unwrap();
        let m = decode_mask(&p).unwrap();
        assert_eq!(m.data(), &[false, true, true, false, true, true]);
        assert!(decode_mask(&dir.path().join("missing.png")).is_err());
    }

    #[test]
    fn rgb_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let t = Tensor::from_fn(&[3, 5, 4], |i| ((i * 37) % 256) as f32 / 255.0);
        save_rgb_png(&t, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert!(back.max_abs_diff(&t) < 1e-6);
    }
}
