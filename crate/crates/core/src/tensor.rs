//! Dense row-major tensors and the seeded random generator.
//!
//! Images are channel-major `(C, H, W)`; batches prepend `N`. A [`Tensor`] is
//! an immutable value once built: the buffer sits behind an `Arc`, so clones
//! are cheap and tensors can be shared across threads.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Float64,
    Uint8,
    Bool,
}

pub trait Element: Copy + Default + Send + Sync + PartialEq + fmt::Debug + 'static {
    const DTYPE: DType;
}

impl Element for f32 {
    const DTYPE: DType = DType::Float32;
}
impl Element for f64 {
    const DTYPE: DType = DType::Float64;
}
impl Element for u8 {
    const DTYPE: DType = DType::Uint8;
}
impl Element for bool {
    const DTYPE: DType = DType::Bool;
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

/// Binary mask, `(1, h, w)` for single images.
pub type Mask = Tensor<bool>;

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} holds {} elements, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::default())
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new((0..n).map(f).collect()),
        }
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(shape_err!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(shape_err!("expected (C, H, W), got {:?}", self.shape)),
        }
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> T {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    /// Single channel `c` of a `(C, H, W)` tensor as `(1, H, W)`.
    pub fn channel(&self, c: usize) -> Result<Self> {
        let (cc, h, w) = self.dims3()?;
        if c >= cc {
            return Err(shape_err!("channel {c} out of range for {cc} channels"));
        }
        Tensor::from_vec(&[1, h, w], self.data[c * h * w..(c + 1) * h * w].to_vec())
    }
}

impl Tensor<f32> {
    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(|v| v as f64)
    }

    pub fn max_abs_diff(&self, other: &Tensor<f32>) -> f32 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

impl Tensor<bool> {
    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn not(&self) -> Self {
        self.map(|b| !b)
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        self.map(|b| if b { 1.0 } else { 0.0 })
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{:?}>{:?}", T::DTYPE, self.shape)?;
        if self.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

static DEFAULT_SEED: AtomicU64 = AtomicU64::new(0);

/// Deterministic generator: ChaCha8 keyed by a 64-bit seed.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Generator seeded from the value registered by [`seed_all`].
    pub fn from_default() -> Self {
        Rng::new(DEFAULT_SEED.load(Ordering::Relaxed))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by `(seed, key)`. Used to give every sample its
    /// own augmentation stream so worker scheduling never changes results.
    pub fn derive(&self, key: &str) -> Rng {
        Rng::new(stream_key(self.seed, key))
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..hi`.
    pub fn range_usize(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        p > 0.0 && self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(rand_distr::StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

/// Seeds the default generator used by augmentation and initialization and
/// returns a generator on that seed.
pub fn seed_all(seed: u64) -> Rng {
    DEFAULT_SEED.store(seed, Ordering::Relaxed);
    Rng::new(seed)
}

/// FNV-1a over the key, mixed with the seed through a splitmix64 finalizer.
pub fn stream_key(seed: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_checked() {
        assert!(Tensor::from_vec(&[2, 3], vec![0f32; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0f32; 5]).is_err());
        let t = Tensor::<f32>::zeros(&[3, 4, 5]);
        assert_eq!(t.reshape(&[12, 5]).unwrap().shape(), &[12, 5]);
        assert!(t.reshape(&[7]).is_err());
        assert_eq!(t.dtype(), DType::Float32);
    }

    #[test]
    fn seeded_draws_repeat() {
        let mut a = seed_all(0);
        let mut b = seed_all(0);
        let xa: Vec<f64> = (0..100).map(|_| a.uniform()).collect();
        let xb: Vec<f64> = (0..100).map(|_| b.uniform()).collect();
        assert_eq!(xa, xb);
        let mut c = seed_all(1);
        let xc: Vec<f64> = (0..100).map(|_| c.uniform()).collect();
        assert_ne!(xa, xc);
    }

    #[test]
    fn derived_streams_differ_by_key() {
        let r = Rng::new(7);
        assert_ne!(r.derive("a").seed(), r.derive("b").seed());
        assert_eq!(r.derive("a").seed(), Rng::new(7).derive("a").seed());
    }
}
