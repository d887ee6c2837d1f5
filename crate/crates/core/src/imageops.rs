//! Resampling and filtering on channel-major images.

use crate::autograd::graph::bilinear_taps;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Mask, Tensor};

/// Bilinear resize of a `(C, H, W)` tensor with half-pixel centers.
pub fn resize_bilinear(img: &Tensor<f32>, h2: usize, w2: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = img.dims3()?;
    if h2 == 0 || w2 == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot resize {h}x{w} to {h2}x{w2}"
        )));
    }
    if (h, w) == (h2, w2) {
        return Ok(img.clone());
    }
    let ty = bilinear_taps(h, h2);
    let tx = bilinear_taps(w, w2);
    let src = img.data();
    let mut out = vec![0f32; c * h2 * w2];
    par::for_each_chunk_mut(&mut out, w2, |row, o| {
        let ch = row / h2;
        let (y0, y1, wy0, wy1) = ty[row % h2];
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            o[ox] = wy0 * (wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1])
                + wy1 * (wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1]);
        }
    });
    Tensor::from_vec(&[c, h2, w2], out)
}

/// Nearest-neighbour source index under half-pixel centers.
fn nearest_index(o: usize, src: usize, dst: usize) -> usize {
    (((o as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1)
}

/// Nearest-neighbour resize; output stays binary.
pub fn resize_nearest_mask(mask: &Mask, h2: usize, w2: usize) -> Result<Mask> {
    let (c, h, w) = mask.dims3()?;
    if h2 == 0 || w2 == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot resize {h}x{w} to {h2}x{w2}"
        )));
    }
    let d = mask.data();
    Ok(Tensor::from_fn(&[c, h2, w2], |i| {
        let ch = i / (h2 * w2);
        let y = nearest_index((i / w2) % h2, h, h2);
        let x = nearest_index(i % w2, w, w2);
        d[(ch * h + y) * w + x]
    }))
}

fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.75;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

fn bicubic_taps(src: usize, dst: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..dst)
        .map(|o| {
            // corner-aligned sampling: output ends map onto input ends
            let s = if dst == 1 {
                0.0
            } else {
                o as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            let i = s.floor() as isize;
            let t = s - i as f64;
            let mut idx = [0usize; 4];
            let mut wts = [0f64; 4];
            for k in 0..4 {
                let off = k as isize - 1;
                idx[k] = (i + off).clamp(0, src as isize - 1) as usize;
                wts[k] = cubic_weight(t - off as f64);
            }
            (idx, wts)
        })
        .collect()
}

/// Bicubic resize of a `[h, w, c]` channels-last grid with corner alignment
/// (grid ends map onto each other exactly).
pub fn resize_bicubic_grid(
    data: &[f32],
    h: usize,
    w: usize,
    c: usize,
    h2: usize,
    w2: usize,
) -> Result<Vec<f32>> {
    if data.len() != h * w * c || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "bicubic: {} values for {h}x{w}x{c}",
            data.len()
        )));
    }
    let ty = bicubic_taps(h, h2);
    let tx = bicubic_taps(w, w2);
    let mut out = vec![0f32; h2 * w2 * c];
    for (oy, (iy, wy)) in ty.iter().enumerate() {
        for (ox, (ix, wx)) in tx.iter().enumerate() {
            let o = &mut out[(oy * w2 + ox) * c..][..c];
            for ch in 0..c {
                let mut acc = 0f64;
                for a in 0..4 {
                    for b in 0..4 {
                        acc += wy[a] * wx[b] * data[(iy[a] * w + ix[b]) * c + ch] as f64;
                    }
                }
                o[ch] = acc as f32;
            }
        }
    }
    Ok(out)
}

/// Normalized 1-D Gaussian kernel truncated at `ceil(4σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    Ok(k)
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Separable Gaussian blur with reflective borders.
pub fn gaussian_blur(img: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    let (c, h, w) = img.dims3()?;
    let k = gaussian_kernel(sigma)?;
    let r = (k.len() / 2) as isize;
    let src = img.data();
    let mut tmp = vec![0f32; c * h * w];
    par::for_each_chunk_mut(&mut tmp, w, |row, o| {
        let line = &src[row * w..(row + 1) * w];
        for (x, ov) in o.iter_mut().enumerate() {
            let mut acc = 0f64;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * line[reflect(x as isize + j as isize - r, w)] as f64;
            }
            *ov = acc as f32;
        }
    });
    let mut out = vec![0f32; c * h * w];
    par::for_each_chunk_mut(&mut out, w, |row, o| {
        let (ch, y) = (row / h, row % h);
        let plane = &tmp[ch * h * w..(ch + 1) * h * w];
        for (x, ov) in o.iter_mut().enumerate() {
            let mut acc = 0f64;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * plane[reflect(y as isize + j as isize - r, h) * w + x] as f64;
            }
            *ov = acc as f32;
        }
    });
    Tensor::from_vec(&[c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized() {
        for s in [0.1, 0.5, 1.0, 2.0, 3.7] {
            let k = gaussian_kernel(s).unwrap();
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(k.len(), 2 * (4.0 * s).ceil() as usize + 1);
        }
        assert!(gaussian_kernel(0.0).is_err());
    }

    #[test]
    fn blur_keeps_constants() {
        let img = Tensor::full(&[3, 9, 7], 0.25f32);
        let out = gaussian_blur(&img, 2.0).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let img = Tensor::from_fn(&[2, 5, 6], |i| i as f32);
        assert_eq!(resize_bilinear(&img, 5, 6).unwrap(), img);
        let c = Tensor::full(&[1, 4, 4], 3.0f32);
        let up = resize_bilinear(&c, 13, 9).unwrap();
        assert!(up.data().iter().all(|&v| (v - 3.0).abs() < 1e-6));
    }

    #[test]
    fn bicubic_reproduces_corners() {
        let (h, w) = (4, 5);
        let data: Vec<f32> = (0..h * w).map(|i| (i / w) as f32 * 2.0 + (i % w) as f32).collect();
        let out = resize_bicubic_grid(&data, h, w, 1, 9, 11).unwrap();
        assert_eq!(out[0], data[0]);
        assert_eq!(out[10], data[4]);
        assert_eq!(out[8 * 11], data[15]);
        assert_eq!(out[8 * 11 + 10], data[19]);
    }
}
