//! Synthetic tampering so the pipeline runs without licensed datasets.
//!
//! Base images are procedural (gradient, shapes, sinusoidal texture and
//! per-image sensor noise). A tamper alters one axis-aligned rectangle and the
//! returned mask is true exactly on it. All pixel values are kept on the 8-bit
//! grid so writing to PNG and reading back is lossless.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io, DatasetManifest, Label, ManifestEntry, Sample, Split};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TamperKind {
    CopyMove,
    Splice,
    Inpaint,
}

impl TamperKind {
    pub const ALL: [TamperKind; 3] = [TamperKind::CopyMove, TamperKind::Splice, TamperKind::Inpaint];
}

/// Axis-aligned rectangle `[y0, y0+h) × [x0, x0+w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn new(y0: usize, x0: usize, h: usize, w: usize) -> Self {
        Rect { y0, x0, h, w }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.h && x >= self.x0 && x < self.x0 + self.w
    }

    pub fn overlaps(&self, o: &Rect) -> bool {
        self.y0 < o.y0 + o.h && o.y0 < self.y0 + self.h && self.x0 < o.x0 + o.w && o.x0 < self.x0 + self.w
    }

    pub fn area(&self) -> usize {
        self.h * self.w
    }
}

const MIN_SIDE: usize = 32;

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Procedural authentic image.
pub fn synthetic_base(h: usize, w: usize, rng: &mut Rng, source_id: &str) -> Result<Sample> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("empty synthetic image".into()));
    }
    let c0: Vec<f64> = (0..3).map(|_| rng.range_f64(0.1, 0.9)).collect();
    let c1: Vec<f64> = (0..3).map(|_| rng.range_f64(0.1, 0.9)).collect();
    let angle = rng.range_f64(0.0, std::f64::consts::TAU);
    let (ga, gb) = (angle.cos(), angle.sin());
    let freq = rng.range_f64(0.05, 0.4);
    let amp = rng.range_f64(0.02, 0.08);
    let noise = rng.range_f64(0.01, 0.04);
    let mut shapes = Vec::new();
    for _ in 0..rng.range_usize(3, 7) {
        let color: Vec<f64> = (0..3).map(|_| rng.uniform()).collect();
        let cy = rng.range_f64(0.0, h as f64);
        let cx = rng.range_f64(0.0, w as f64);
        let r = rng.range_f64(0.05, 0.25) * h.min(w) as f64;
        let circle = rng.bernoulli(0.5);
        shapes.push((color, cy, cx, r, circle));
    }
    let mut data = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let t = ((y as f64 / h as f64) * ga + (x as f64 / w as f64) * gb + 1.0) / 2.0;
            let tex = amp * ((x as f64 * freq).sin() * (y as f64 * freq * 0.7).cos());
            let mut px: Vec<f64> = (0..3).map(|c| c0[c] * (1.0 - t) + c1[c] * t + tex).collect();
            for (color, cy, cx, r, circle) in &shapes {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if *circle {
                    dy * dy + dx * dx <= r * r
                } else {
                    dy.abs() <= *r && dx.abs() <= r * 0.6
                };
                if inside {
                    px.copy_from_slice(color);
                }
            }
            for c in 0..3 {
                data[(c * h + y) * w + x] = quantize((px[c] + noise * rng.normal()) as f32);
            }
        }
    }
    Sample::authentic(Tensor::from_vec(&[3, h, w], data)?, source_id)
}

/// Random rectangle with sides in `[side/4, side/2]`.
pub fn random_rect(h: usize, w: usize, rng: &mut Rng) -> Rect {
    let rh = rng.range_usize(h / 4, h / 2 + 1).max(1);
    let rw = rng.range_usize(w / 4, w / 2 + 1).max(1);
    Rect::new(rng.range_usize(0, h - rh + 1), rng.range_usize(0, w - rw + 1), rh, rw)
}

/// Applies a random rectangular tamper of `kind`. Splicing draws pixels from
/// `donor`, which must be provided for that kind.
pub fn synthesize_tamper(
    base: &Sample,
    kind: TamperKind,
    donor: Option<&Sample>,
    rng: &mut Rng,
) -> Result<Sample> {
    check_size(base)?;
    let rect = random_rect(base.height(), base.width(), rng);
    tamper_rect(base, kind, rect, donor, rng)
}

fn check_size(base: &Sample) -> Result<()> {
    if base.height() < MIN_SIDE || base.width() < MIN_SIDE {
        return Err(Error::InvalidArgument(format!(
            "tampering needs at least {MIN_SIDE}x{MIN_SIDE}, got {}x{}",
            base.height(),
            base.width()
        )));
    }
    Ok(())
}

/// Tampers the given rectangle. Returns the altered sample; its mask is the
/// base mask united with `rect`.
pub fn tamper_rect(
    base: &Sample,
    kind: TamperKind,
    rect: Rect,
    donor: Option<&Sample>,
    rng: &mut Rng,
) -> Result<Sample> {
    check_size(base)?;
    let (h, w) = (base.height(), base.width());
    if rect.h == 0 || rect.w == 0 || rect.y0 + rect.h > h || rect.x0 + rect.w > w {
        return Err(Error::InvalidArgument(format!("{rect:?} outside {h}x{w}")));
    }
    let src = base.image.data();
    let mut img = base.image.clone();
    let out = img.data_mut();
    match kind {
        TamperKind::CopyMove => {
            let from = copy_source(h, w, rect, rng);
            for c in 0..3 {
                for dy in 0..rect.h {
                    for dx in 0..rect.w {
                        out[(c * h + rect.y0 + dy) * w + rect.x0 + dx] =
                            src[(c * h + from.y0 + dy) * w + from.x0 + dx];
                    }
                }
            }
        }
        TamperKind::Splice => {
            let d = donor.ok_or_else(|| Error::InvalidArgument("splice needs a donor image".into()))?;
            let (dh, dw) = (d.height(), d.width());
            if dh < rect.h || dw < rect.w {
                return Err(Error::InvalidArgument(format!(
                    "donor {dh}x{dw} smaller than {rect:?}"
                )));
            }
            let oy = rng.range_usize(0, dh - rect.h + 1);
            let ox = rng.range_usize(0, dw - rect.w + 1);
            let dsrc = d.image.data();
            for c in 0..3 {
                for dy in 0..rect.h {
                    for dx in 0..rect.w {
                        out[(c * h + rect.y0 + dy) * w + rect.x0 + dx] =
                            dsrc[(c * dh + oy + dy) * dw + ox + dx];
                    }
                }
            }
        }
        TamperKind::Inpaint => {
            let ring = 4;
            let y0 = rect.y0.saturating_sub(ring);
            let x0 = rect.x0.saturating_sub(ring);
            let y1 = (rect.y0 + rect.h + ring).min(h);
            let x1 = (rect.x0 + rect.w + ring).min(w);
            for c in 0..3 {
                let mut sum = 0f64;
                let mut n = 0usize;
                for y in y0..y1 {
                    for x in x0..x1 {
                        if !rect.contains(y, x) {
                            sum += src[(c * h + y) * w + x] as f64;
                            n += 1;
                        }
                    }
                }
                let mean = if n > 0 { sum / n as f64 } else { 0.5 };
                for dy in 0..rect.h {
                    for dx in 0..rect.w {
                        out[(c * h + rect.y0 + dy) * w + rect.x0 + dx] =
                            quantize((mean + 0.02 * rng.normal()) as f32);
                    }
                }
            }
        }
    }
    let base_mask = base.mask.data();
    let mask = Tensor::from_fn(&[1, h, w], |i| base_mask[i] || rect.contains(i / w, i % w));
    Sample::new(img, mask, base.source_id.clone())
}

fn copy_source(h: usize, w: usize, rect: Rect, rng: &mut Rng) -> Rect {
    let pick = |rng: &mut Rng| {
        Rect::new(
            rng.range_usize(0, h - rect.h + 1),
            rng.range_usize(0, w - rect.w + 1),
            rect.h,
            rect.w,
        )
    };
    let mut fallback = None;
    for _ in 0..64 {
        let r = pick(rng);
        if !r.overlaps(&rect) {
            return r;
        }
        if (r.y0, r.x0) != (rect.y0, rect.x0) && fallback.is_none() {
            fallback = Some(r);
        }
    }
    fallback.unwrap_or_else(|| {
        // rectangle covers the full extent on both axes; shift is impossible
        Rect::new((rect.y0 + 1) % (h - rect.h + 1), rect.x0, rect.h, rect.w)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    /// Images left untouched (all-false masks), taken from the start.
    pub authentic: usize,
    /// Every `test_every`-th image goes to the test split; 0 puts all in train.
    pub test_every: usize,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            n: 16,
            height: 128,
            width: 128,
            authentic: 0,
            test_every: 4,
            seed: 0,
        }
    }
}

/// In-memory synthetic dataset: `(sample, label, split, kind)` per image.
pub fn synthetic_samples(opts: &SynthOptions) -> Result<Vec<(Sample, Label, Split, Option<TamperKind>)>> {
    let root = Rng::new(opts.seed);
    let split_of = |i: usize| {
        if opts.test_every > 0 && i % opts.test_every == opts.test_every - 1 {
            Split::Test
        } else {
            Split::Train
        }
    };
    let bases = (0..opts.n)
        .map(|i| {
            let id = format!("images/{i:04}.png");
            synthetic_base(opts.height, opts.width, &mut root.derive(&format!("base/{i}")), &id)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(opts.n);
    for (i, base) in bases.iter().enumerate() {
        let split = split_of(i);
        if i < opts.authentic {
            out.push((base.clone(), Label::Authentic, split, None));
            continue;
        }
        let kind = TamperKind::ALL[(i - opts.authentic) % 3];
        let mut rng = root.derive(&format!("tamper/{i}"));
        let donors: Vec<usize> = (0..opts.n).filter(|&j| j != i && split_of(j) == split).collect();
        let donor = if donors.is_empty() {
            None
        } else {
            Some(&bases[donors[rng.range_usize(0, donors.len())]])
        };
        let kind = if kind == TamperKind::Splice && donor.is_none() {
            TamperKind::CopyMove
        } else {
            kind
        };
        let s = synthesize_tamper(base, kind, donor, &mut rng)?;
        out.push((s, Label::Manipulated, split, Some(kind)));
    }
    Ok(out)
}

/// Writes images, masks and `manifest.jsonl` under `dir`.
pub fn generate_dataset(dir: &Path, opts: &SynthOptions) -> Result<DatasetManifest> {
    let samples = synthetic_samples(opts)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, (s, label, split, _)) in samples.iter().enumerate() {
        let image_path = format!("images/{i:04}.png");
        io::save_rgb_png(&s.image, &dir.join(&image_path))?;
        let mask_path = if *label == Label::Manipulated {
            let p = format!("masks/{i:04}.png");
            io::save_mask_png(&s.mask, &dir.join(&p))?;
            Some(p)
        } else {
            None
        };
        entries.push(ManifestEntry {
            image_path,
            mask_path,
            label: *label,
            split: *split,
        });
    }
    let manifest = DatasetManifest::new(dir, entries);
    manifest.write(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(seed: u64) -> Sample {
        synthetic_base(128, 128, &mut Rng::new(seed), "b").unwrap()
    }

    fn single_rect(mask: &crate::tensor::Mask) -> Option<Rect> {
        let (_, h, w) = mask.dims3().unwrap();
        let on: Vec<(usize, usize)> = (0..h * w)
            .filter(|&i| mask.data()[i])
            .map(|i| (i / w, i % w))
            .collect();
        let (y0, y1) = (on.iter().map(|p| p.0).min()?, on.iter().map(|p| p.0).max()?);
        let (x0, x1) = (on.iter().map(|p| p.1).min()?, on.iter().map(|p| p.1).max()?);
        let r = Rect::new(y0, x0, y1 - y0 + 1, x1 - x0 + 1);
        (r.area() == on.len()).then_some(r)
    }

    #[test]
    fn copy_move_single_rectangle_bit_equal_source() {
        let b = base(1);
        let mut rng = Rng::new(5);
        let s = synthesize_tamper(&b, TamperKind::CopyMove, None, &mut rng).unwrap();
        let r = single_rect(&s.mask).expect("one rectangle");
        // the pasted block occurs somewhere else in the original image
        let (h, w) = (128, 128);
        let src = b.image.data();
        let out = s.image.data();
        let found = (0..=h - r.h).any(|sy| {
            (0..=w - r.w).any(|sx| {
                (sy, sx) != (r.y0, r.x0)
                    && (0..3).all(|c| {
                        (0..r.h).all(|dy| {
                            (0..r.w).all(|dx| {
                                out[(c * h + r.y0 + dy) * w + r.x0 + dx]
                                    == src[(c * h + sy + dy) * w + sx + dx]
                            })
                        })
                    })
            })
        });
        assert!(found);
        // untouched outside the rectangle
        for i in 0..3 * h * w {
            let p = i % (h * w);
            if !r.contains(p / w, p % w) {
                assert_eq!(out[i], src[i]);
            }
        }
    }

    #[test]
    fn inpaint_rectangle_count() {
        let b = base(2);
        let s = tamper_rect(&b, TamperKind::Inpaint, Rect::new(8, 8, 16, 16), None, &mut Rng::new(0)).unwrap();
        assert_eq!(s.mask.count_true(), 256);
        assert_eq!(single_rect(&s.mask), Some(Rect::new(8, 8, 16, 16)));
    }

    #[test]
    fn splice_is_deterministic() {
        let b = base(3);
        let d = base(4);
        let a1 = synthesize_tamper(&b, TamperKind::Splice, Some(&d), &mut Rng::new(9)).unwrap();
        let a2 = synthesize_tamper(&b, TamperKind::Splice, Some(&d), &mut Rng::new(9)).unwrap();
        assert_eq!(a1, a2);
        assert!(synthesize_tamper(&b, TamperKind::Splice, None, &mut Rng::new(9)).is_err());
    }

    #[test]
    fn too_small_rejected() {
        let s = synthetic_base(16, 64, &mut Rng::new(0), "s").unwrap();
        assert!(synthesize_tamper(&s, TamperKind::Inpaint, None, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let opts = SynthOptions {
            n: 6,
            height: 48,
            width: 40,
            authentic: 1,
            test_every: 3,
            seed: 42,
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_dataset(d1.path(), &opts).unwrap();
        generate_dataset(d2.path(), &opts).unwrap();
        let t1 = std::fs::read(d1.path().join("manifest.jsonl")).unwrap();
        let t2 = std::fs::read(d2.path().join("manifest.jsonl")).unwrap();
        assert_eq!(t1, t2);
        for e in &m1.entries {
            let a = std::fs::read(d1.path().join(&e.image_path)).unwrap();
            let b = std::fs::read(d2.path().join(&e.image_path)).unwrap();
            assert_eq!(a, b);
        }
        let loaded = crate::data::load_manifest(&d1.path().join("manifest.jsonl")).unwrap();
        assert_eq!(loaded.entries, m1.entries);
        // PNG storage is lossless for generated samples
        let mem = synthetic_samples(&opts).unwrap();
        for ((s, ..), e) in mem.iter().zip(&loaded.entries) {
            let disk = loaded.load_sample(e).unwrap();
            assert_eq!(disk.image, s.image);
            assert_eq!(disk.mask, s.mask);
        }
    }
}
