//! Encoder, feature pyramid and prediction head.

pub mod checkpoint;
pub mod config;
pub mod head;
pub mod pyramid;
pub mod vit;

use std::collections::BTreeMap;
use std::path::Path;

pub use checkpoint::{load_pretrained, LoadReport};
pub use config::{HeadConfig, ModelConfig, NormKind, PYRAMID_STRIDES};
pub use head::{predict, upsample_full};
pub use pyramid::build_pyramid;
pub use vit::{encode, WindowPartition};

use crate::autograd::{Ctx, ParamStore, ResizeGeom, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Rng, Tensor};

/// Channel-major spatial map `(C, H', W')`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub data: Tensor<f32>,
    /// Canvas pixels per cell.
    pub stride: usize,
}

/// The five pyramid levels, finest first.
#[derive(Clone, Debug)]
pub struct PyramidFeatures {
    pub maps: Vec<FeatureMap>,
}

/// `(C, H, W)` from pixel rows `[N·H·W, C]`, sample `b`.
pub fn rows_to_chw(rows: &Tensor<f32>, b: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let &[r, c] = rows.shape() else {
        return Err(shape_err!("expected rows, got {:?}", rows.shape()));
    };
    if r % (h * w) != 0 || b >= r / (h * w) {
        return Err(shape_err!("{r} rows hold no sample {b} of {h}x{w}"));
    }
    let d = &rows.data()[b * h * w * c..(b + 1) * h * w * c];
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        d[p * c + ch]
    }))
}

/// Pixel rows `[H·W, C]` from a `(C, H, W)` map.
pub fn chw_to_rows(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let (c, hw) = (s[0], s[1..].iter().product::<usize>());
    let d = t.data();
    Tensor::from_fn(&[hw, c], |i| d[(i % c) * hw + i / c])
}

/// Stacks equally sized `(3, H, W)` images into `(N, 3, H, W)`.
pub fn stack(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let Some(first) = images.first() else {
        return Err(Error::InvalidArgument("empty batch".into()));
    };
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * images.len());
    for im in images {
        if im.shape() != shape.as_slice() {
            return Err(shape_err!("batch mixes {:?} and {:?}", shape, im.shape()));
        }
        data.extend_from_slice(im.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::from_vec(&full, data)
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Forward pass products, all as pixel rows with one column.
pub struct ModelOutput {
    pub n: usize,
    /// `[N·H/4·W/4, 1]`
    pub logits: Var,
    /// `[N·H·W, 1]` bilinearly upsampled to the canvas.
    pub full: Var,
}

/// The complete localization network.
#[derive(Clone, Debug)]
pub struct ImlVit {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl ImlVit {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rng = Rng::new(seed);
        let mut params = ParamStore::new();
        vit::init_params(&cfg, &mut params, &mut rng.derive("encoder"));
        pyramid::init_params(&cfg, &mut params, &mut rng.derive("pyramid"));
        head::init_params(&cfg, &mut params, &mut rng.derive("head"));
        Ok(ImlVit { cfg, params })
    }

    /// Model plus whatever extra state the checkpoint carries.
    pub fn load(dir: &Path) -> Result<(Self, checkpoint::Checkpoint)> {
        let ck = checkpoint::load(dir)?;
        let cfg = ck.config.clone().ok_or_else(|| {
            Error::Checkpoint(format!("{}: no model config recorded", dir.display()))
        })?;
        cfg.validate()?;
        let reference = ImlVit::new(cfg.clone(), 0)?;
        for (name, t) in reference.params.params() {
            match ck.params.params().get(name) {
                Some(u) if u.shape() == t.shape() => {}
                Some(u) => {
                    return Err(Error::Checkpoint(format!(
                        "{name}: shape {:?}, config expects {:?}",
                        u.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
            }
        }
        let model = ImlVit {
            cfg,
            params: ck.params.clone(),
        };
        Ok((model, ck))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, Some(&self.cfg), &self.params, &BTreeMap::new(), serde_json::Value::Null)
    }

    /// Batched forward on `(N, 3, H, W)` canvases. The context decides
    /// whether the tape is recorded and which normalization statistics apply.
    pub fn forward(&self, ctx: &mut Ctx, images: &Tensor<f32>) -> Result<ModelOutput> {
        let cfg = &self.cfg;
        let n = match images.shape() {
            &[n, _, _, _] => n,
            &[_, _, _] => 1,
            s => return Err(shape_err!("images {:?}", s)),
        };
        let enc = vit::VitBackbone::new(cfg).forward(ctx, images)?;
        let levels = pyramid::forward(ctx, cfg, &enc, n)?;
        let logits = head::forward(ctx, cfg, &levels, n)?;
        let (oh, ow) = cfg.output_size();
        let (h, w) = cfg.canvas;
        let geom = ResizeGeom {
            n,
            c: 1,
            h: oh,
            w: ow,
            h2: h,
            w2: w,
        };
        let full = ctx.graph.resize_bilinear(&logits, geom)?;
        Ok(ModelOutput { n, logits, full })
    }

    /// Canvas-resolution logits `(1, H, W)` for one padded image.
    pub fn predict_logits(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut ctx = Ctx::eval(&self.params);
        let out = self.forward(&mut ctx, image)?;
        let (h, w) = self.cfg.canvas;
        out.full.value().reshape(&[1, h, w])
    }

    /// Manipulation probabilities `(1, H, W)` for one padded image.
    pub fn predict_proba(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.predict_logits(image)?.map(sigmoid))
    }

    /// Encoder map and pyramid of one padded image.
    pub fn features(&self, image: &Tensor<f32>) -> Result<(FeatureMap, PyramidFeatures)> {
        let cfg = &self.cfg;
        let mut ctx = Ctx::eval(&self.params);
        let enc = vit::VitBackbone::new(cfg).forward(&mut ctx, image)?;
        let (gh, gw) = cfg.grid();
        let ge = FeatureMap {
            data: rows_to_chw(enc.value(), 0, gh, gw)?,
            stride: cfg.patch_size,
        };
        let levels = pyramid::forward(&mut ctx, cfg, &enc, 1)?;
        Ok((ge, pyramid::pyramid_from_rows(&levels, 0, cfg)?))
    }
}
