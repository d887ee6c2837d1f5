//! Simple feature pyramid: five independent branches resampling the encoder
//! map to strides 4, 8, 16, 32 and 64.

use std::sync::Arc;

use super::config::ModelConfig;
use super::{rows_to_chw, FeatureMap, PyramidFeatures};
use crate::autograd::{gather_index, Ctx, ParamStore, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Rng;

/// Checkpoint names of the branches, finest first.
pub const BRANCH_NAMES: [&str; 5] = ["scale4", "scale2", "scale1", "scale05", "scale025"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    /// Kernel-2 stride-2 transposed convolution to the given channels.
    ConvT(usize),
    Conv1(usize),
    Conv3(usize),
    /// Channel layer norm at every pixel.
    Norm,
    Gelu,
    /// Kernel-2 stride-2 max pool.
    Pool,
}

/// Layer sequence of branch `j`.
pub fn branch_steps(cfg: &ModelConfig, j: usize) -> Vec<Step> {
    use Step::*;
    let d = cfg.embed_dim;
    let cs = cfg.pyramid_dim;
    let tail = [Conv1(cs), Norm, Conv3(cs), Norm];
    let mut s = match j {
        0 => vec![ConvT(d / 2), Norm, Gelu, ConvT(d / 4), Norm],
        1 => vec![ConvT(d / 2), Norm],
        2 => vec![],
        3 | 4 => vec![Pool],
        _ => unreachable!("pyramid has five levels"),
    };
    s.extend(tail);
    if j == 4 {
        s.push(Pool);
    }
    s
}

/// Registers freshly initialized pyramid parameters.
pub fn init_params(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) {
    for (j, name) in BRANCH_NAMES.iter().enumerate() {
        let mut c = cfg.embed_dim;
        for (i, step) in branch_steps(cfg, j).into_iter().enumerate() {
            let p = format!("sfpn.{name}.{i}");
            match step {
                Step::ConvT(co) => {
                    let std = (1.0 / c as f64).sqrt();
                    store.init_normal(&format!("{p}.weight"), &[2, 2, co, c], std, rng);
                    store.init_const(&format!("{p}.bias"), &[co], 0.0);
                    c = co;
                }
                Step::Conv1(co) => {
                    store.init_normal(&format!("{p}.weight"), &[co, c], (1.0 / c as f64).sqrt(), rng);
                    store.init_const(&format!("{p}.bias"), &[co], 0.0);
                    c = co;
                }
                Step::Conv3(co) => {
                    let std = (1.0 / (9 * c) as f64).sqrt();
                    store.init_normal(&format!("{p}.weight"), &[co, 3, 3, c], std, rng);
                    store.init_const(&format!("{p}.bias"), &[co], 0.0);
                    c = co;
                }
                Step::Norm => {
                    store.init_const(&format!("{p}.weight"), &[c], 1.0);
                    store.init_const(&format!("{p}.bias"), &[c], 0.0);
                }
                Step::Gelu | Step::Pool => {}
            }
        }
    }
}

/// Row gather turning `[N·h·w·4, C]` (sub-pixel `dy, dx` innermost) into the
/// `[N·2h·2w, C]` upsampled grid.
fn pixel_shuffle_index(n: usize, h: usize, w: usize) -> Arc<Vec<u32>> {
    let (h2, w2) = (2 * h, 2 * w);
    gather_index((0..n * h2 * w2).map(|r| {
        let (b, y, x) = (r / (h2 * w2), (r / w2) % h2, r % w2);
        Some((((b * h + y / 2) * w + x / 2) * 4) + (y % 2) * 2 + x % 2)
    }))
}

/// Pixel rows flowing through a branch.
struct Grid {
    x: Var,
    n: usize,
    h: usize,
    w: usize,
}

fn run_branch(ctx: &mut Ctx, cfg: &ModelConfig, j: usize, input: &Grid) -> Result<Grid> {
    let name = BRANCH_NAMES[j];
    let Grid { mut x, n, mut h, mut w } = Grid { x: input.x.clone(), ..*input };
    for (i, step) in branch_steps(cfg, j).into_iter().enumerate() {
        let p = format!("sfpn.{name}.{i}");
        let c = x.dims2()?.1;
        x = match step {
            Step::ConvT(co) => {
                let wt = ctx.param_as(&format!("{p}.weight"), &[4 * co, c])?;
                let b = ctx.param(&format!("{p}.bias"))?;
                let y = ctx.graph.linear(&x, &wt, None)?.reshape(&[n * h * w * 4, co])?;
                let y = ctx.graph.gather_rows(&y, pixel_shuffle_index(n, h, w))?;
                h *= 2;
                w *= 2;
                ctx.graph.add_broadcast(&y, &b)?
            }
            Step::Conv1(_) => {
                let wt = ctx.param(&format!("{p}.weight"))?;
                let b = ctx.param(&format!("{p}.bias"))?;
                ctx.graph.linear(&x, &wt, Some(&b))?
            }
            Step::Conv3(co) => {
                let wt = ctx.param_as(&format!("{p}.weight"), &[co, 9 * c])?;
                let b = ctx.param(&format!("{p}.bias"))?;
                ctx.graph.conv2d(&x, &wt, Some(&b), n, h, w, 3)?
            }
            Step::Norm => {
                let g = ctx.param(&format!("{p}.weight"))?;
                let b = ctx.param(&format!("{p}.bias"))?;
                ctx.graph.layer_norm(&x, &g, &b, cfg.ln_eps)?
            }
            Step::Gelu => ctx.graph.gelu(&x)?,
            Step::Pool => {
                let y = ctx.graph.max_pool2(&x, n, h, w)?;
                h /= 2;
                w /= 2;
                y
            }
        };
    }
    Ok(Grid { x, n, h, w })
}

/// Pyramid levels as pixel rows `[N·h_j·w_j, C_S]`, finest first.
pub fn forward(ctx: &mut Ctx, cfg: &ModelConfig, encoded: &Var, n: usize) -> Result<Vec<Var>> {
    let (gh, gw) = cfg.grid();
    let (rows, c) = encoded.dims2()?;
    if rows != n * gh * gw || c != cfg.embed_dim {
        return Err(shape_err!(
            "pyramid expects [{}, {}] encoder rows, got {:?}",
            n * gh * gw,
            cfg.embed_dim,
            encoded.shape()
        ));
    }
    let input = Grid {
        x: encoded.clone(),
        n,
        h: gh,
        w: gw,
    };
    (0..BRANCH_NAMES.len())
        .map(|j| {
            let out = run_branch(ctx, cfg, j, &input)?;
            debug_assert_eq!((out.h, out.w), cfg.level_size(j));
            Ok(out.x)
        })
        .collect()
}

/// Inference-only pyramid for one encoder map.
pub fn build_pyramid(params: &ParamStore, ge: &FeatureMap, cfg: &ModelConfig) -> Result<PyramidFeatures> {
    let (c, h, w) = ge.data.dims3()?;
    if c != cfg.embed_dim || (h, w) != cfg.grid() {
        return Err(shape_err!(
            "pyramid input {c}x{h}x{w} does not match {}x{:?}",
            cfg.embed_dim,
            cfg.grid()
        ));
    }
    let mut ctx = Ctx::eval(params);
    let rows = Var::constant(super::chw_to_rows(&ge.data));
    let levels = forward(&mut ctx, cfg, &rows, 1)?;
    pyramid_from_rows(&levels, 0, cfg)
}

/// Per-sample pyramid maps from batched level rows.
pub fn pyramid_from_rows(levels: &[Var], sample: usize, cfg: &ModelConfig) -> Result<PyramidFeatures> {
    let maps = levels
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let (h, w) = cfg.level_size(j);
            Ok(FeatureMap {
                data: rows_to_chw(v.value(), sample, h, w)?,
                stride: super::config::PYRAMID_STRIDES[j],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PyramidFeatures { maps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn shuffle_places_subpixels() {
        let idx = pixel_shuffle_index(1, 1, 2);
        // output 2x4 grid; source pixel 0 fills columns 0-1, pixel 1 columns 2-3
        assert_eq!(&idx[..], &[0, 1, 4, 5, 2, 3, 6, 7]);
    }

    #[test]
    fn branch_layouts() {
        let cfg = ModelConfig::vit_base();
        assert_eq!(branch_steps(&cfg, 2), vec![Step::Conv1(256), Step::Norm, Step::Conv3(256), Step::Norm]);
        assert_eq!(branch_steps(&cfg, 4).first(), Some(&Step::Pool));
        assert_eq!(branch_steps(&cfg, 4).last(), Some(&Step::Pool));
        assert_eq!(branch_steps(&cfg, 0)[3], Step::ConvT(192));
    }

    #[test]
    fn toy_shapes() {
        let cfg = ModelConfig::toy();
        let mut store = ParamStore::new();
        init_params(&cfg, &mut store, &mut Rng::new(0));
        let (gh, gw) = cfg.grid();
        let ge = FeatureMap {
            data: Tensor::from_fn(&[cfg.embed_dim, gh, gw], |i| (i % 7) as f32 * 0.1),
            stride: 16,
        };
        let pyr = build_pyramid(&store, &ge, &cfg).unwrap();
        let shapes: Vec<_> = pyr.maps.iter().map(|m| m.data.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![32, 32, 32], vec![32, 16, 16], vec![32, 8, 8], vec![32, 4, 4], vec![32, 2, 2]]
        );
    }
}
