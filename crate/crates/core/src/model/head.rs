//! All-MLP decoder: per-level channel unification, resize to stride 4,
//! concatenation and a two-layer fusion MLP down to one logit per pixel.

use super::config::{HeadConfig, ModelConfig, NormKind};
use super::PyramidFeatures;
use crate::autograd::{BnStats, BnUpdate, Ctx, ParamStore, ResizeGeom, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Rng, Tensor};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
const NORM_PREFIX: &str = "head.fuse_norm";

pub fn init_params(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) {
    let cs = cfg.pyramid_dim;
    let cd = cfg.head.decoder_dim;
    for j in 0..5 {
        store.init_normal(&format!("head.linear_c{j}.weight"), &[cd, cs], (1.0 / cs as f64).sqrt(), rng);
        store.init_const(&format!("head.linear_c{j}.bias"), &[cd], 0.0);
    }
    store.init_normal("head.fuse.weight", &[cd, 5 * cd], (1.0 / (5 * cd) as f64).sqrt(), rng);
    store.init_const("head.fuse.bias", &[cd], 0.0);
    if cfg.head.norm_kind != NormKind::None {
        store.init_const(&format!("{NORM_PREFIX}.weight"), &[cd], 1.0);
        store.init_const(&format!("{NORM_PREFIX}.bias"), &[cd], 0.0);
    }
    if cfg.head.norm_kind == NormKind::Batch {
        store.insert_buffer(format!("{NORM_PREFIX}.running_mean"), Tensor::zeros(&[cd]));
        store.insert_buffer(format!("{NORM_PREFIX}.running_var"), Tensor::full(&[cd], 1.0));
    }
    store.init_normal("head.pred.weight", &[1, cd], (1.0 / cd as f64).sqrt(), rng);
    store.init_const("head.pred.bias", &[1], 0.0);
}

/// Stride-4 logits as rows `[N·H/4·W/4, 1]` from batched level rows.
pub fn forward(ctx: &mut Ctx, cfg: &ModelConfig, levels: &[Var], n: usize) -> Result<Var> {
    if levels.len() != 5 {
        return Err(shape_err!("head expects 5 pyramid levels, got {}", levels.len()));
    }
    let (oh, ow) = cfg.output_size();
    let mut parts = Vec::with_capacity(5);
    for (j, lv) in levels.iter().enumerate() {
        let (h, w) = cfg.level_size(j);
        let (rows, c) = lv.dims2()?;
        if rows != n * h * w || c != cfg.pyramid_dim {
            return Err(shape_err!(
                "level {j}: expected [{}, {}], got {:?}",
                n * h * w,
                cfg.pyramid_dim,
                lv.shape()
            ));
        }
        let wt = ctx.param(&format!("head.linear_c{j}.weight"))?;
        let b = ctx.param(&format!("head.linear_c{j}.bias"))?;
        let y = ctx.graph.linear(lv, &wt, Some(&b))?;
        let y = if (h, w) == (oh, ow) {
            y
        } else {
            let geom = ResizeGeom {
                n,
                c: cfg.head.decoder_dim,
                h,
                w,
                h2: oh,
                w2: ow,
            };
            ctx.graph.resize_bilinear(&y, geom)?
        };
        parts.push(y);
    }
    let cat = ctx.graph.concat_cols(&parts)?;
    let wf = ctx.param("head.fuse.weight")?;
    let bf = ctx.param("head.fuse.bias")?;
    let mut x = ctx.graph.linear(&cat, &wf, Some(&bf))?;
    x = match cfg.head.norm_kind {
        NormKind::None => x,
        NormKind::Layer => {
            let g = ctx.param(&format!("{NORM_PREFIX}.weight"))?;
            let b = ctx.param(&format!("{NORM_PREFIX}.bias"))?;
            ctx.graph.layer_norm(&x, &g, &b, cfg.ln_eps)?
        }
        NormKind::Batch => {
            let g = ctx.param(&format!("{NORM_PREFIX}.weight"))?;
            let b = ctx.param(&format!("{NORM_PREFIX}.bias"))?;
            if ctx.is_training() {
                let rows = x.dims2()?.0;
                let (y, mean, var) = ctx.graph.batch_norm(&x, &g, &b, BnStats::Batch, BN_EPS)?;
                ctx.bn_updates.push(BnUpdate {
                    prefix: NORM_PREFIX.to_string(),
                    mean,
                    var,
                    count: rows,
                });
                y
            } else {
                let params = ctx.params();
                let mean = params.buffer(&format!("{NORM_PREFIX}.running_mean"))?;
                let var = params.buffer(&format!("{NORM_PREFIX}.running_var"))?;
                let stats = BnStats::Running {
                    mean: mean.data(),
                    var: var.data(),
                };
                ctx.graph.batch_norm(&x, &g, &b, stats, BN_EPS)?.0
            }
        }
    };
    x = ctx.graph.relu(&x)?;
    let wp = ctx.param("head.pred.weight")?;
    let bp = ctx.param("head.pred.bias")?;
    ctx.graph.linear(&x, &wp, Some(&bp))
}

/// Folds training-mode batch statistics into the running buffers
/// (`r ← (1−m)·r + m·s`, variance unbiased).
pub fn apply_bn_updates(params: &mut ParamStore, updates: &[BnUpdate]) -> Result<()> {
    for u in updates {
        let unbias = if u.count > 1 {
            u.count as f32 / (u.count - 1) as f32
        } else {
            1.0
        };
        let name = format!("{}.running_mean", u.prefix);
        let rm = params
            .buffer_mut(&name)
            .ok_or_else(|| crate::Error::Checkpoint(format!("missing buffer {name}")))?;
        for (r, &m) in rm.data_mut().iter_mut().zip(&u.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let name = format!("{}.running_var", u.prefix);
        let rv = params
            .buffer_mut(&name)
            .ok_or_else(|| crate::Error::Checkpoint(format!("missing buffer {name}")))?;
        for (r, &v) in rv.data_mut().iter_mut().zip(&u.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
        }
    }
    Ok(())
}

/// Inference-only head on one sample's pyramid: logits `(1, H/4, W/4)`.
pub fn predict(params: &ParamStore, pyramid: &PyramidFeatures, cfg: &ModelConfig) -> Result<Tensor<f32>> {
    check_head(&cfg.head)?;
    if pyramid.maps.len() != 5 {
        return Err(shape_err!("head expects 5 pyramid levels, got {}", pyramid.maps.len()));
    }
    let levels: Vec<Var> = pyramid
        .maps
        .iter()
        .map(|m| Var::constant(super::chw_to_rows(&m.data)))
        .collect();
    let mut ctx = Ctx::eval(params);
    let logits = forward(&mut ctx, cfg, &levels, 1)?;
    let (oh, ow) = cfg.output_size();
    logits.value().reshape(&[1, oh, ow])
}

fn check_head(h: &HeadConfig) -> Result<()> {
    if h.output_stride != 4 {
        return Err(shape_err!("output stride {} unsupported", h.output_stride));
    }
    Ok(())
}

/// Bilinear ×4 upsampling of `(C, h, w)` maps to `(C, 4h, 4w)`.
pub fn upsample_full(logits: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, h, w) = logits.dims3()?;
    crate::imageops::resize_bilinear(logits, 4 * h, 4 * w)
}
