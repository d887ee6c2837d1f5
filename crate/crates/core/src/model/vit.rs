//! Windowed ViT encoder.
//!
//! Patch embedding plus learned absolute positions, then pre-norm transformer
//! blocks. Blocks listed in `global_block_indexes` attend over the whole token
//! grid; the others attend inside non-overlapping windows. Both kinds share
//! the same parameter layout, so weights from a plain global ViT load as is.

use std::sync::Arc;

use super::config::ModelConfig;
use super::FeatureMap;
use crate::autograd::{gather_index, Ctx, ParamStore, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Windowed,
    Global,
}

/// Geometry of a window partition of an `n × gh × gw` token grid.
#[derive(Clone, Debug)]
pub struct WindowPartition {
    pub window: usize,
    pub padded: (usize, usize),
    pub num_windows: usize,
    /// Partitioned row → source row (`None` for padding).
    forward: Arc<Vec<u32>>,
    /// Source row → partitioned row.
    inverse: Arc<Vec<u32>>,
    /// Per partitioned row: true unless padding.
    valid: Arc<Vec<bool>>,
}

impl WindowPartition {
    pub fn new(n: usize, gh: usize, gw: usize, window: usize) -> Self {
        let (ph, pw) = (gh.div_ceil(window) * window, gw.div_ceil(window) * window);
        let (nwy, nwx) = (ph / window, pw / window);
        let mut fwd = Vec::with_capacity(n * ph * pw);
        let mut inv = vec![0usize; n * gh * gw];
        for b in 0..n {
            for wy in 0..nwy {
                for wx in 0..nwx {
                    for ty in 0..window {
                        for tx in 0..window {
                            let (y, x) = (wy * window + ty, wx * window + tx);
                            if y < gh && x < gw {
                                let src = (b * gh + y) * gw + x;
                                inv[src] = fwd.len();
                                fwd.push(Some(src));
                            } else {
                                fwd.push(None);
                            }
                        }
                    }
                }
            }
        }
        let valid = Arc::new(fwd.iter().map(Option::is_some).collect());
        WindowPartition {
            window,
            padded: (ph, pw),
            num_windows: n * nwy * nwx,
            forward: gather_index(fwd),
            inverse: gather_index(inv.into_iter().map(Some)),
            valid,
        }
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    /// Rows grouped window by window, zero rows for padding.
    pub fn partition(&self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        ctx.graph.gather_rows(x, Arc::clone(&self.forward))
    }

    /// Inverse of [`partition`](Self::partition); padding rows are dropped.
    pub fn unpartition(&self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        ctx.graph.gather_rows(x, Arc::clone(&self.inverse))
    }

    pub fn key_mask(&self) -> Arc<Vec<bool>> {
        Arc::clone(&self.valid)
    }
}

/// Registers freshly initialized encoder parameters.
pub fn init_params(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) {
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    let (gh, gw) = cfg.grid();
    let hidden = d * cfg.mlp_ratio;
    store.init_normal("patch_embed.proj.weight", &[d, 3, p, p], (1.0 / (3 * p * p) as f64).sqrt(), rng);
    store.init_const("patch_embed.proj.bias", &[d], 0.0);
    store.init_normal("pos_embed", &[1, gh * gw, d], 0.02, rng);
    for i in 0..cfg.depth {
        let b = format!("blocks.{i}");
        store.init_const(&format!("{b}.norm1.weight"), &[d], 1.0);
        store.init_const(&format!("{b}.norm1.bias"), &[d], 0.0);
        store.init_normal(&format!("{b}.attn.qkv.weight"), &[3 * d, d], 0.02, rng);
        store.init_const(&format!("{b}.attn.qkv.bias"), &[3 * d], 0.0);
        store.init_normal(&format!("{b}.attn.proj.weight"), &[d, d], 0.02, rng);
        store.init_const(&format!("{b}.attn.proj.bias"), &[d], 0.0);
        store.init_const(&format!("{b}.norm2.weight"), &[d], 1.0);
        store.init_const(&format!("{b}.norm2.bias"), &[d], 0.0);
        store.init_normal(&format!("{b}.mlp.fc1.weight"), &[hidden, d], 0.02, rng);
        store.init_const(&format!("{b}.mlp.fc1.bias"), &[hidden], 0.0);
        store.init_normal(&format!("{b}.mlp.fc2.weight"), &[d, hidden], 0.02, rng);
        store.init_const(&format!("{b}.mlp.fc2.bias"), &[d], 0.0);
    }
    store.init_const("norm.weight", &[d], 1.0);
    store.init_const("norm.bias", &[d], 0.0);
}

/// Non-overlapping `p×p` patches of `(N, 3, H, W)` images as rows
/// `[N·gh·gw, 3·p·p]`, each ordered `(channel, dy, dx)`.
pub fn extract_patches(images: &Tensor<f32>, p: usize) -> Result<Tensor<f32>> {
    let (n, c, h, w) = match images.shape() {
        &[n, c, h, w] => (n, c, h, w),
        &[c, h, w] => (1, c, h, w),
        s => return Err(shape_err!("expected (N, 3, H, W) images, got {:?}", s)),
    };
    if c != 3 || h % p != 0 || w % p != 0 {
        return Err(shape_err!(
            "image {c}x{h}x{w} is not 3 channels divisible by patch {p}"
        ));
    }
    let (gh, gw) = (h / p, w / p);
    let width = 3 * p * p;
    let d = images.data();
    Tensor::from_vec(
        &[n * gh * gw, width],
        (0..n * gh * gw * width)
            .map(|i| {
                let row = i / width;
                let col = i % width;
                let (b, gy, gx) = (row / (gh * gw), (row / gw) % gh, row % gw);
                let (ch, dy, dx) = (col / (p * p), (col / p) % p, col % p);
                d[((b * 3 + ch) * h + gy * p + dy) * w + gx * p + dx]
            })
            .collect(),
    )
}

/// Windowed/global ViT encoder.
pub struct VitBackbone<'c> {
    pub cfg: &'c ModelConfig,
}

impl<'c> VitBackbone<'c> {
    pub fn new(cfg: &'c ModelConfig) -> Self {
        VitBackbone { cfg }
    }

    fn batch_of(&self, images: &Tensor<f32>) -> Result<usize> {
        let (h, w) = self.cfg.canvas;
        match images.shape() {
            &[n, 3, hh, ww] if (hh, ww) == (h, w) => Ok(n),
            &[3, hh, ww] if (hh, ww) == (h, w) => Ok(1),
            s => Err(shape_err!("encoder expects 3x{h}x{w} inputs, got {:?}", s)),
        }
    }

    /// Token rows `[N·gh·gw, D]` with positions added.
    pub fn patch_embed(&self, ctx: &mut Ctx, images: &Tensor<f32>) -> Result<Var> {
        let n = self.batch_of(images)?;
        let cfg = self.cfg;
        let p = cfg.patch_size;
        let (gh, gw) = cfg.grid();
        let patches = Var::constant(extract_patches(images, p)?);
        let w = ctx.param_as("patch_embed.proj.weight", &[cfg.embed_dim, 3 * p * p])?;
        let b = ctx.param("patch_embed.proj.bias")?;
        let tokens = ctx.graph.linear(&patches, &w, Some(&b))?;
        let pos = ctx.param_as("pos_embed", &[gh * gw, cfg.embed_dim])?;
        debug_assert_eq!(tokens.len(), n * pos.len());
        ctx.graph.add_broadcast(&tokens, &pos)
    }

    /// Pre-norm block `i`: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
    pub fn block(
        &self,
        ctx: &mut Ctx,
        x: &Var,
        i: usize,
        mode: AttentionMode,
        n: usize,
    ) -> Result<Var> {
        let cfg = self.cfg;
        let (gh, gw) = cfg.grid();
        let eps = cfg.ln_eps;
        let name = |s: &str| format!("blocks.{i}.{s}");
        let g1 = ctx.param(&name("norm1.weight"))?;
        let b1 = ctx.param(&name("norm1.bias"))?;
        let h = ctx.graph.layer_norm(x, &g1, &b1, eps)?;
        let part = match mode {
            AttentionMode::Windowed => Some(WindowPartition::new(n, gh, gw, cfg.window_size)),
            AttentionMode::Global => None,
        };
        let (h, tokens, mask) = match &part {
            Some(wp) => (wp.partition(ctx, &h)?, wp.tokens_per_window(), Some(wp.key_mask())),
            None => (h, gh * gw, None),
        };
        let wq = ctx.param(&name("attn.qkv.weight"))?;
        let bq = ctx.param(&name("attn.qkv.bias"))?;
        let qkv = ctx.graph.linear(&h, &wq, Some(&bq))?;
        let a = ctx.graph.attention(&qkv, tokens, cfg.num_heads, mask)?;
        let wp_ = ctx.param(&name("attn.proj.weight"))?;
        let bp = ctx.param(&name("attn.proj.bias"))?;
        let a = ctx.graph.linear(&a, &wp_, Some(&bp))?;
        let a = match &part {
            Some(wp) => wp.unpartition(ctx, &a)?,
            None => a,
        };
        let x = ctx.graph.add(x, &a)?;

        let g2 = ctx.param(&name("norm2.weight"))?;
        let b2 = ctx.param(&name("norm2.bias"))?;
        let h = ctx.graph.layer_norm(&x, &g2, &b2, eps)?;
        let w1 = ctx.param(&name("mlp.fc1.weight"))?;
        let c1 = ctx.param(&name("mlp.fc1.bias"))?;
        let h = ctx.graph.linear(&h, &w1, Some(&c1))?;
        let h = ctx.graph.gelu(&h)?;
        let w2 = ctx.param(&name("mlp.fc2.weight"))?;
        let c2 = ctx.param(&name("mlp.fc2.bias"))?;
        let h = ctx.graph.linear(&h, &w2, Some(&c2))?;
        ctx.graph.add(&x, &h)
    }

    /// Full encoder: rows `[N·gh·gw, D]` after the final layer norm.
    pub fn forward(&self, ctx: &mut Ctx, images: &Tensor<f32>) -> Result<Var> {
        let n = self.batch_of(images)?;
        let mut x = self.patch_embed(ctx, images)?;
        for i in 0..self.cfg.depth {
            let mode = if self.cfg.is_global(i) {
                AttentionMode::Global
            } else {
                AttentionMode::Windowed
            };
            x = self.block(ctx, &x, i, mode, n)?;
        }
        let g = ctx.param("norm.weight")?;
        let b = ctx.param("norm.bias")?;
        ctx.graph.layer_norm(&x, &g, &b, self.cfg.ln_eps)
    }
}

/// Inference-only encoder pass on one padded canvas image.
pub fn encode(params: &ParamStore, image: &Tensor<f32>, cfg: &ModelConfig) -> Result<FeatureMap> {
    cfg.validate()?;
    let mut ctx = Ctx::eval(params);
    let rows = VitBackbone::new(cfg).forward(&mut ctx, image)?;
    let (gh, gw) = cfg.grid();
    Ok(FeatureMap {
        data: super::rows_to_chw(rows.value(), 0, gh, gw)?,
        stride: cfg.patch_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_geometry() {
        let wp = WindowPartition::new(1, 64, 64, 14);
        assert_eq!(wp.padded, (70, 70));
        assert_eq!(wp.num_windows, 25);
        let wp = WindowPartition::new(2, 14, 14, 14);
        assert_eq!(wp.padded, (14, 14));
        assert_eq!(wp.num_windows, 2);
        assert!(wp.key_mask().iter().all(|&v| v));
    }

    #[test]
    fn partition_round_trip() {
        let params = ParamStore::new();
        let mut ctx = Ctx::eval(&params);
        let (n, gh, gw, d) = (2, 5, 7, 3);
        let x = Var::constant(Tensor::from_fn(&[n * gh * gw, d], |i| i as f32));
        let wp = WindowPartition::new(n, gh, gw, 3);
        let p = wp.partition(&mut ctx, &x).unwrap();
        assert_eq!(p.shape(), &[2 * 6 * 9, 3]);
        let back = wp.unpartition(&mut ctx, &p).unwrap();
        assert_eq!(back.value(), x.value());
        // padding rows are zero
        let pad_rows = wp.key_mask().iter().filter(|v| !**v).count();
        assert_eq!(pad_rows, 2 * (6 * 9 - 35));
    }

    #[test]
    fn patches_layout() {
        let img = Tensor::from_fn(&[1, 3, 4, 4], |i| i as f32);
        let p = extract_patches(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 12]);
        // second patch (gy=0, gx=1), channel 0: pixels (0,2),(0,3),(1,2),(1,3)
        assert_eq!(&p.data()[12..16], &[2.0, 3.0, 6.0, 7.0]);
        assert!(extract_patches(&Tensor::zeros(&[1, 3, 5, 4]), 2).is_err());
    }
}
