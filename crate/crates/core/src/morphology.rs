//! Binary morphology with cross structuring elements and the boundary-band
//! mask used for edge supervision.
//!
//! Pixels outside the image are treated as `false` for both operators, so an
//! all-true mask erodes along the border and gets an edge band there. This is
//! the same convention as the zero padding canvas.
//!
//! A cross is the union of a horizontal and a vertical segment, so dilation is
//! the OR of two 1-D dilations and erosion the AND of two 1-D erosions. Each
//! 1-D pass reads window counts from prefix sums, making the cost independent
//! of the radius.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Mask, Tensor};

/// `(2k+1)×(2k+1)` cross: ones on the middle row and middle column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructuringElement {
    k: usize,
    grid: Vec<bool>,
}

impl StructuringElement {
    pub fn cross(k: usize) -> Self {
        let n = 2 * k + 1;
        let grid = (0..n * n).map(|i| i / n == k || i % n == k).collect();
        StructuringElement { k, grid }
    }

    pub fn radius(&self) -> usize {
        self.k
    }

    pub fn side(&self) -> usize {
        2 * self.k + 1
    }

    pub fn at(&self, i: usize, j: usize) -> bool {
        self.grid[i * self.side() + j]
    }

    /// `(dy, dx)` offsets of the set cells.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let n = self.side();
        let k = self.k as isize;
        (0..n * n)
            .filter(|&i| self.grid[i])
            .map(|i| ((i / n) as isize - k, (i % n) as isize - k))
            .collect()
    }
}

/// Boundary band around manipulated regions.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMask {
    pub data: Mask,
    pub k: usize,
}

#[derive(Clone, Copy)]
enum Morph {
    Dilate,
    Erode,
}

fn apply(mask: &Mask, se: &StructuringElement, morph: Morph) -> Result<Mask> {
    let (c, h, w) = mask.dims3()?;
    let k = se.radius();
    let src = mask.data();
    let mut out = vec![false; c * h * w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        // row prefix counts, (w + 1) per row
        let mut rp = vec![0u32; h * (w + 1)];
        for y in 0..h {
            for x in 0..w {
                rp[y * (w + 1) + x + 1] = rp[y * (w + 1) + x] + plane[y * w + x] as u32;
            }
        }
        // column prefix counts, (h + 1) rows of w
        let mut cp = vec![0u32; (h + 1) * w];
        for y in 0..h {
            for x in 0..w {
                cp[(y + 1) * w + x] = cp[y * w + x] + plane[y * w + x] as u32;
            }
        }
        let full = (2 * k + 1) as u32;
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        par::for_each_chunk_mut(dst, w, |y, row| {
            let y0 = y.saturating_sub(k);
            let y1 = (y + k).min(h - 1);
            for (x, o) in row.iter_mut().enumerate() {
                let x0 = x.saturating_sub(k);
                let x1 = (x + k).min(w - 1);
                let hc = rp[y * (w + 1) + x1 + 1] - rp[y * (w + 1) + x0];
                let vc = cp[(y1 + 1) * w + x] - cp[y0 * w + x];
                *o = match morph {
                    Morph::Dilate => hc > 0 || vc > 0,
                    // clipped windows hold fewer than 2k+1 cells: out-of-bounds is false
                    Morph::Erode => hc == full && vc == full,
                };
            }
        });
    }
    Tensor::from_vec(mask.shape(), out)
}

/// True where any set cell of the element, centred on the pixel, hits a true pixel.
pub fn dilate(mask: &Mask, se: &StructuringElement) -> Result<Mask> {
    apply(mask, se, Morph::Dilate)
}

/// True where every set cell of the element, centred on the pixel, hits a true pixel.
pub fn erode(mask: &Mask, se: &StructuringElement) -> Result<Mask> {
    apply(mask, se, Morph::Erode)
}

/// `|erode(M) − dilate(M)|`, i.e. their XOR.
pub fn edge_mask(mask: &Mask, k: usize) -> Result<EdgeMask> {
    if k < 1 {
        return Err(Error::InvalidArgument(format!(
            "edge band radius must be >= 1, got {k}"
        )));
    }
    let se = StructuringElement::cross(k);
    let e = erode(mask, &se)?;
    let d = dilate(mask, &se)?;
    let data = Tensor::from_vec(
        mask.shape(),
        e.data().iter().zip(d.data()).map(|(a, b)| a ^ b).collect(),
    )?;
    Ok(EdgeMask { data, k })
}

/// Band radius scaled to the image: `max(1, round(5·max(h, w)/1024))`.
pub fn pick_k(mask: &Mask) -> usize {
    let s = mask.shape();
    let side = s[s.len() - 2].max(s[s.len() - 1]);
    ((5.0 * side as f64 / 1024.0).round() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        let mut v = vec![false; h * w];
        for &(y, x) in on {
            v[y * w + x] = true;
        }
        Tensor::from_vec(&[1, h, w], v).unwrap()
    }

    #[test]
    fn cross_shape() {
        let se = StructuringElement::cross(2);
        assert_eq!(se.side(), 5);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(se.at(i, j), i == 2 || j == 2);
            }
        }
        assert_eq!(se.offsets().len(), 9);
    }

    #[test]
    fn single_pixel_k1() {
        let m = mask(5, 5, &[(2, 2)]);
        let se = StructuringElement::cross(1);
        let d = dilate(&m, &se).unwrap();
        let want = mask(5, 5, &[(2, 2), (1, 2), (3, 2), (2, 1), (2, 3)]);
        assert_eq!(d, want);
        assert_eq!(erode(&m, &se).unwrap().count_true(), 0);
        let e = edge_mask(&m, 1).unwrap();
        assert_eq!(e.data, want);
        assert_eq!(e.data.count_true(), 5);
    }

    #[test]
    fn cross_erodes_to_center() {
        let m = mask(5, 5, &[(2, 2), (1, 2), (3, 2), (2, 1), (2, 3)]);
        let e = erode(&m, &StructuringElement::cross(1)).unwrap();
        assert_eq!(e, mask(5, 5, &[(2, 2)]));
    }

    #[test]
    fn all_true_erodes_border() {
        let m = Tensor::full(&[1, 10, 10], true);
        let se = StructuringElement::cross(1);
        let e = erode(&m, &se).unwrap();
        assert_eq!(e.count_true(), 64);
        assert!(!e.at3(0, 0, 5) && !e.at3(0, 5, 9) && e.at3(0, 1, 1));
        assert_eq!(dilate(&m, &se).unwrap(), m);
        // border band of width one
        assert_eq!(edge_mask(&m, 1).unwrap().data.count_true(), 36);
    }

    #[test]
    fn empty_stays_empty() {
        let m = Tensor::full(&[1, 6, 7], false);
        let se = StructuringElement::cross(2);
        assert_eq!(dilate(&m, &se).unwrap(), m);
        assert_eq!(erode(&m, &se).unwrap(), m);
        assert_eq!(edge_mask(&m, 2).unwrap().data, m);
        assert!(edge_mask(&m, 0).is_err());
    }

    #[test]
    fn k_heuristic() {
        assert_eq!(pick_k(&Tensor::full(&[1, 682, 1024], false)), 5);
        assert_eq!(pick_k(&Tensor::full(&[1, 64, 64], false)), 1);
        assert_eq!(pick_k(&Tensor::full(&[1, 1024, 1024], false)), 5);
    }
}
