//! Feature-map renderings, prediction overlays and robustness plots.

use image::{GrayImage, Luma, Rgb, RgbImage};

use std::path::Path;

use crate::data::io::save;
use crate::error::{shape_err, Result};
use crate::model::FeatureMap;
use crate::robustness::RobustnessCurve;
use crate::tensor::Tensor;

/// Channel mean per pixel, min-max stretched to `[0, 255]`. Constant maps
/// render as uniform 128.
pub fn visualize_feature_map(fm: &FeatureMap) -> Result<GrayImage> {
    let (c, h, w) = fm.data.dims3()?;
    let d = fm.data.data();
    let mean: Vec<f64> = (0..h * w)
        .map(|p| (0..c).map(|k| d[k * h * w + p] as f64).sum::<f64>() / c as f64)
        .collect();
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let px: Vec<u8> = if hi > lo {
        mean.iter().map(|&m| ((m - lo) / (hi - lo) * 255.0).round() as u8).collect()
    } else {
        vec![128; h * w]
    };
    GrayImage::from_raw(w as u32, h as u32, px).ok_or_else(|| shape_err!("feature map {h}x{w}"))
}

/// Nearest-neighbour enlargement so small maps stay visible.
pub fn enlarge(img: &GrayImage, factor: u32) -> GrayImage {
    let f = factor.max(1);
    GrayImage::from_fn(img.width() * f, img.height() * f, |x, y| *img.get_pixel(x / f, y / f))
}

/// Image with pixels at or above `threshold` tinted red.
pub fn overlay(image: &Tensor<f32>, prob: &Tensor<f32>, threshold: f64) -> Result<RgbImage> {
    let (c, h, w) = image.dims3()?;
    let (_, ph, pw) = prob.dims3()?;
    if c != 3 || (ph, pw) != (h, w) {
        return Err(shape_err!("overlay: image {:?}, prob {:?}", image.shape(), prob.shape()));
    }
    let (d, p) = (image.data(), prob.data());
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let hit = p[i] as f64 >= threshold;
        let px = |k: usize| {
            let v = d[k * h * w + i].clamp(0.0, 1.0);
            let v = match (hit, k) {
                (true, 0) => 0.5 * v + 0.5,
                (true, _) => 0.5 * v,
                _ => v,
            };
            (v * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    }))
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>, dash: Option<i64>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    let mut n = 0i64;
    loop {
        let on = dash.is_none_or(|d| (n / d) % 2 == 0);
        if on && x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
        n += 1;
    }
}

/// F1 against attack level (blue, with point markers) and the all-positive
/// baseline (dashed red). F1 spans `[0, 1]` vertically; levels are placed in
/// sweep order.
pub fn render_curve(curve: &RobustnessCurve, width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin = 24i64;
    let (w, h) = (width as i64, height as i64);
    let (left, right, top, bottom) = (margin, w - margin, margin, h - margin);
    let black = Rgb([0, 0, 0]);
    let grid = Rgb([220, 220, 220]);
    for k in 1..10 {
        let y = bottom - (bottom - top) * k / 10;
        line(&mut img, (left, y), (right, y), grid, None);
    }
    line(&mut img, (left, bottom), (right, bottom), black, None);
    line(&mut img, (left, top), (left, bottom), black, None);
    let to_y = |f1: f64| bottom - ((bottom - top) as f64 * f1.clamp(0.0, 1.0)).round() as i64;
    let n = curve.points.len();
    let to_x = |i: usize| {
        if n <= 1 {
            (left + right) / 2
        } else {
            left + (right - left) * i as i64 / (n as i64 - 1)
        }
    };
    let by = to_y(curve.baseline_f1);
    line(&mut img, (left, by), (right, by), Rgb([220, 30, 30]), Some(6));
    let blue = Rgb([30, 60, 200]);
    let pts: Vec<(i64, i64)> = curve.points.iter().enumerate().map(|(i, p)| (to_x(i), to_y(p.f1))).collect();
    for pair in pts.windows(2) {
        line(&mut img, pair[0], pair[1], blue, None);
    }
    for &(x, y) in &pts {
        for d in -2..=2 {
            line(&mut img, (x + d, y - 2), (x + d, y + 2), blue, None);
        }
    }
    img
}

/// Probability map `(1, H, W)` as 8-bit gray, `round(p·255)`.
pub fn probability_image(prob: &Tensor<f32>) -> Result<GrayImage> {
    let (_, h, w) = prob.dims3()?;
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = prob.data()[y as usize * w + x as usize];
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    }))
}

/// Writes a grayscale rendering as PNG.
pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    save(|p| img.save_with_format(p, image::ImageFormat::Png), path)
}

/// Writes an RGB rendering as PNG.
pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    save(|p| img.save_with_format(p, image::ImageFormat::Png), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robustness::{AttackKind, CurvePoint};

    #[test]
    fn constant_map_is_mid_gray() {
        let fm = FeatureMap {
            data: Tensor::full(&[4, 3, 5], 2.5),
            stride: 16,
        };
        let g = visualize_feature_map(&fm).unwrap();
        assert!(g.pixels().all(|p| p.0[0] == 128));
    }

    #[test]
    fn channel_mean_is_used() {
        // pixel 0 has channels {0, 2} (mean 1); pixel 1 has {3, 3}; pixel 2 {1, -1}
        let fm = FeatureMap {
            data: Tensor::from_vec(&[2, 1, 3], vec![0.0, 3.0, 1.0, 2.0, 3.0, -1.0]).unwrap(),
            stride: 1,
        };
        let g = visualize_feature_map(&fm).unwrap();
        assert_eq!(g.as_raw(), &vec![85, 255, 0]);
    }

    #[test]
    fn overlay_tints_hits() {
        let img = Tensor::full(&[3, 1, 2], 0.2f32);
        let prob = Tensor::from_vec(&[1, 1, 2], vec![0.9, 0.1]).unwrap();
        let o = overlay(&img, &prob, 0.5).unwrap();
        assert_eq!(o.get_pixel(0, 0).0, [153, 26, 26]);
        assert_eq!(o.get_pixel(1, 0).0, [51, 51, 51]);
    }

    #[test]
    fn curve_renders() {
        let c = RobustnessCurve {
            kind: AttackKind::Jpeg,
            points: vec![
                CurvePoint { level: 100.0, f1: 0.9, auc: None },
                CurvePoint { level: 50.0, f1: 0.4, auc: None },
            ],
            baseline_f1: 0.2,
        };
        let img = render_curve(&c, 200, 120);
        assert_eq!(img.dimensions(), (200, 120));
        assert!(img.pixels().any(|p| p.0 == [220, 30, 30]));
        assert!(img.pixels().any(|p| p.0 == [30, 60, 200]));
    }
}
