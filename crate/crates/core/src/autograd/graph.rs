//! Tape-based reverse-mode differentiation over row-major `f32` matrices.
//!
//! Activations are stored channels-last as `[rows, width]` matrices (a token
//! grid or an `N·H·W` pixel grid, one row per position). Each op records just
//! enough to run its adjoint; with recording off, ops compute values only and
//! nothing is retained.

use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::linalg::{gemm, Op as G};
use crate::par;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Value flowing through the graph, optionally tracked for gradients.
#[derive(Clone, Debug)]
pub struct Var {
    id: Option<NodeId>,
    value: Tensor<f32>,
}

impl Var {
    /// Untracked value.
    pub fn constant(value: Tensor<f32>) -> Self {
        Var { id: None, value }
    }

    pub fn id(&self) -> Option<NodeId> {
        self.id
    }

    pub fn value(&self) -> &Tensor<f32> {
        &self.value
    }

    pub fn data(&self) -> &[f32] {
        self.value.data()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// `(rows, width)` of a rank-2 value.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape() {
            [r, w] => Ok((*r, *w)),
            s => Err(shape_err!("expected a [rows, width] matrix, got {:?}", s)),
        }
    }

    /// Shape change without data movement; keeps gradient tracking.
    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        Ok(Var {
            id: self.id,
            value: self.value.reshape(shape)?,
        })
    }
}

/// Normalization statistics source for [`Graph::batch_norm`].
#[derive(Clone, Debug)]
pub enum BnStats<'a> {
    /// Statistics of the current batch (training).
    Batch,
    /// Frozen running statistics (inference).
    Running { mean: &'a [f32], var: &'a [f32] },
}

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<NodeId>,
    },
    Add {
        a: Option<NodeId>,
        b: Option<NodeId>,
    },
    AddBroadcast {
        x: Option<NodeId>,
        p: Option<NodeId>,
        plen: usize,
    },
    Norm {
        x: Option<NodeId>,
        gamma: Var,
        beta: Option<NodeId>,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
        width: usize,
        kind: NormAxis,
    },
    Gelu {
        x: NodeId,
        input: Tensor<f32>,
    },
    Relu {
        x: NodeId,
        input: Tensor<f32>,
    },
    Gather {
        x: NodeId,
        idx: Arc<Vec<u32>>,
        width: usize,
    },
    Concat {
        parts: Vec<(Option<NodeId>, usize)>,
        rows: usize,
    },
    Attention {
        qkv: NodeId,
        input: Tensor<f32>,
        probs: Vec<Vec<f32>>,
        geom: AttnGeom,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Resize {
        x: NodeId,
        geom: ResizeGeom,
    },
    Scalar {
        x: NodeId,
        grad: Vec<f32>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NormAxis {
    /// Normalize each row over its width (layer norm).
    Rows,
    /// Normalize each column over all rows with batch statistics.
    ColumnsBatch,
    /// Columns with frozen statistics (affine).
    ColumnsFixed,
}

#[derive(Clone, Copy, Debug)]
struct AttnGeom {
    windows: usize,
    tokens: usize,
    heads: usize,
    head_dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ResizeGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub h2: usize,
    pub w2: usize,
}

struct Node {
    op: Op,
    len: usize,
}

/// Recording tape.
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
}

/// Gradients indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&[f32]> {
        v.id.and_then(|id| self.grads[id].as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f32>> {
        self.grads.get_mut(id).and_then(Option::take)
    }
}

const NONE_IDX: u32 = u32::MAX;

impl Graph {
    pub fn new(record: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            record,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor<f32>, op: Op, tracked: bool) -> Var {
        if !(self.record && tracked) {
            return Var::constant(value);
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            len: value.len(),
        });
        Var {
            id: Some(id),
            value,
        }
    }

    /// Tracked leaf (a parameter or an input whose gradient is wanted).
    pub fn leaf(&mut self, value: Tensor<f32>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// `y = x · wᵀ + b` with `x: [rows, din]`, `w: [dout, din]`, `b: [dout]`.
    pub fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let (rows, din) = x.dims2()?;
        let (dout, wdin) = w.dims2()?;
        if wdin != din {
            return Err(shape_err!("linear: input width {din}, weight {:?}", w.shape()));
        }
        if let Some(b) = b {
            if b.len() != dout {
                return Err(shape_err!("linear: bias len {} for {dout} outputs", b.len()));
            }
        }
        let mut y = vec![0f32; rows * dout];
        gemm(rows, din, dout, x.data(), G::N, w.data(), G::T, 0.0, &mut y);
        if let Some(b) = b {
            let bd = b.data();
            par::for_each_chunk_mut(&mut y, dout * par::chunk_len(rows, 64), |_, c| {
                for row in c.chunks_mut(dout) {
                    row.iter_mut().zip(bd).for_each(|(v, bb)| *v += bb);
                }
            });
        }
        let tracked = x.id.is_some() || w.id.is_some() || b.is_some_and(|b| b.id.is_some());
        let op = if self.record && tracked {
            Op::Linear {
                x: x.clone(),
                w: w.clone(),
                b: b.and_then(|b| b.id),
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(Tensor::from_vec(&[rows, dout], y)?, op, tracked))
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(shape_err!("add: {:?} vs {:?}", a.shape(), b.shape()));
        }
        let y: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let tracked = a.id.is_some() || b.id.is_some();
        Ok(self.push(
            Tensor::from_vec(a.shape(), y)?,
            Op::Add { a: a.id, b: b.id },
            tracked,
        ))
    }

    /// `y[i] = x[i] + p[i mod len(p)]`; `len(p)` must divide `len(x)`.
    pub fn add_broadcast(&mut self, x: &Var, p: &Var) -> Result<Var> {
        let plen = p.len();
        if plen == 0 || x.len() % plen != 0 {
            return Err(shape_err!("add_broadcast: {:?} by {:?}", x.shape(), p.shape()));
        }
        let pd = p.data();
        let y: Vec<f32> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + pd[i % plen])
            .collect();
        let tracked = x.id.is_some() || p.id.is_some();
        Ok(self.push(
            Tensor::from_vec(x.shape(), y)?,
            Op::AddBroadcast {
                x: x.id,
                p: p.id,
                plen,
            },
            tracked,
        ))
    }

    /// Layer normalization of each row.
    pub fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f32) -> Result<Var> {
        let (rows, d) = x.dims2()?;
        if gamma.len() != d || beta.len() != d {
            return Err(shape_err!("layer_norm: width {d}, affine {}", gamma.len()));
        }
        let (g, bt) = (gamma.data(), beta.data());
        let mut y = vec![0f32; rows * d];
        let mut xhat = vec![0f32; rows * d];
        let mut rstd = vec![0f32; rows];
        let xd = x.data();
        let chunk = par::chunk_len(rows, 32);
        par::for_each_chunk_pair_mut(&mut xhat, chunk * d, &mut rstd, chunk, |ci, xh, rs| {
            for (j, r) in rs.iter_mut().enumerate() {
                let row = &xd[(ci * chunk + j) * d..(ci * chunk + j + 1) * d];
                let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                let var = row
                    .iter()
                    .map(|&v| (v as f64 - mean).powi(2))
                    .sum::<f64>()
                    / d as f64;
                let s = 1.0 / (var + eps as f64).sqrt();
                *r = s as f32;
                for (o, &v) in xh[j * d..(j + 1) * d].iter_mut().zip(row) {
                    *o = ((v as f64 - mean) * s) as f32;
                }
            }
        });
        for (yr, xr) in y.chunks_mut(d).zip(xhat.chunks(d)) {
            for i in 0..d {
                yr[i] = xr[i] * g[i] + bt[i];
            }
        }
        let tracked = x.id.is_some() || gamma.id.is_some() || beta.id.is_some();
        let op = Op::Norm {
            x: x.id,
            gamma: gamma.clone(),
            beta: beta.id,
            xhat: if self.record && tracked { xhat } else { Vec::new() },
            rstd,
            width: d,
            kind: NormAxis::Rows,
        };
        Ok(self.push(Tensor::from_vec(&[rows, d], y)?, op, tracked))
    }

    /// Batch normalization of each column. With [`BnStats::Batch`], returns
    /// the batch mean and biased variance alongside the output.
    pub fn batch_norm(
        &mut self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        stats: BnStats<'_>,
        eps: f32,
    ) -> Result<(Var, Vec<f32>, Vec<f32>)> {
        let (rows, c) = x.dims2()?;
        if gamma.len() != c || beta.len() != c {
            return Err(shape_err!("batch_norm: width {c}, affine {}", gamma.len()));
        }
        let xd = x.data();
        let (mean, var, kind) = match stats {
            BnStats::Batch => {
                let mut mean = vec![0f64; c];
                let mut var = vec![0f64; c];
                for row in xd.chunks(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v as f64;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                for row in xd.chunks(c) {
                    for i in 0..c {
                        var[i] += (row[i] as f64 - mean[i]).powi(2);
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                (
                    mean.into_iter().map(|v| v as f32).collect::<Vec<_>>(),
                    var.into_iter().map(|v| v as f32).collect::<Vec<_>>(),
                    NormAxis::ColumnsBatch,
                )
            }
            BnStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err!("batch_norm: running stats width"));
                }
                (mean.to_vec(), var.to_vec(), NormAxis::ColumnsFixed)
            }
        };
        let rstd: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (gamma.data(), beta.data());
        let mut xhat = vec![0f32; rows * c];
        let mut y = vec![0f32; rows * c];
        for ((xr, hr), yr) in xd.chunks(c).zip(xhat.chunks_mut(c)).zip(y.chunks_mut(c)) {
            for i in 0..c {
                hr[i] = (xr[i] - mean[i]) * rstd[i];
                yr[i] = hr[i] * g[i] + bt[i];
            }
        }
        let tracked = x.id.is_some() || gamma.id.is_some() || beta.id.is_some();
        let op = Op::Norm {
            x: x.id,
            gamma: gamma.clone(),
            beta: beta.id,
            xhat: if self.record && tracked { xhat } else { Vec::new() },
            rstd,
            width: c,
            kind,
        };
        let out = self.push(Tensor::from_vec(&[rows, c], y)?, op, tracked);
        Ok((out, mean, var))
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, x: &Var) -> Result<Var> {
        let y: Vec<f32> = x.data().iter().map(|&v| gelu(v)).collect();
        let op = match x.id {
            Some(id) if self.record => Op::Gelu {
                x: id,
                input: x.value.clone(),
            },
            _ => Op::Leaf,
        };
        Ok(self.push(Tensor::from_vec(x.shape(), y)?, op, x.id.is_some()))
    }

    pub fn relu(&mut self, x: &Var) -> Result<Var> {
        let y: Vec<f32> = x.data().iter().map(|&v| v.max(0.0)).collect();
        let op = match x.id {
            Some(id) if self.record => Op::Relu {
                x: id,
                input: x.value.clone(),
            },
            _ => Op::Leaf,
        };
        Ok(self.push(Tensor::from_vec(x.shape(), y)?, op, x.id.is_some()))
    }

    /// Row gather: output row `r` is input row `idx[r]`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: &Var, idx: Arc<Vec<u32>>) -> Result<Var> {
        let (rows, width) = x.dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i != NONE_IDX && i as usize >= rows) {
            return Err(shape_err!("gather: index {bad} out of {rows} rows"));
        }
        let xd = x.data();
        let mut y = vec![0f32; idx.len() * width];
        let chunk = par::chunk_len(idx.len(), 64);
        par::for_each_chunk_mut(&mut y, chunk * width, |ci, c| {
            for (j, row) in c.chunks_mut(width).enumerate() {
                let s = idx[ci * chunk + j];
                if s != NONE_IDX {
                    let s = s as usize;
                    row.copy_from_slice(&xd[s * width..(s + 1) * width]);
                }
            }
        });
        let n_out = idx.len();
        let op = match x.id {
            Some(id) if self.record => Op::Gather { x: id, idx, width },
            _ => Op::Leaf,
        };
        Ok(self.push(Tensor::from_vec(&[n_out, width], y)?, op, x.id.is_some()))
    }

    /// Concatenates `[rows, w_i]` matrices along the width.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .ok_or_else(|| shape_err!("concat of nothing"))?
            .dims2()?
            .0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, w) = p.dims2()?;
            if r != rows {
                return Err(shape_err!("concat: row counts {rows} vs {r}"));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut y = vec![0f32; rows * total];
        for (r, row) in y.chunks_mut(total).enumerate() {
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                row[off..off + w].copy_from_slice(&p.data()[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let tracked = parts.iter().any(|p| p.id.is_some());
        let op = Op::Concat {
            parts: parts.iter().zip(&widths).map(|(p, &w)| (p.id, w)).collect(),
            rows,
        };
        Ok(self.push(Tensor::from_vec(&[rows, total], y)?, op, tracked))
    }

    /// Multi-head softmax attention within groups of `tokens` consecutive rows.
    ///
    /// `qkv` is `[windows·tokens, 3·dim]` laid out as `q | k | v`, each split
    /// into `heads` contiguous slices. Rows flagged `false` in `key_valid`
    /// (window padding) are never attended to. Returns `[windows·tokens, dim]`.
    pub fn attention(
        &mut self,
        qkv: &Var,
        tokens: usize,
        heads: usize,
        key_valid: Option<Arc<Vec<bool>>>,
    ) -> Result<Var> {
        let (rows, w3) = qkv.dims2()?;
        if tokens == 0 || rows % tokens != 0 || w3 % (3 * heads) != 0 {
            return Err(shape_err!(
                "attention: {:?} with {tokens} tokens, {heads} heads",
                qkv.shape()
            ));
        }
        if key_valid.as_ref().is_some_and(|k| k.len() != rows) {
            return Err(shape_err!("attention: key mask length"));
        }
        let dim = w3 / 3;
        let geom = AttnGeom {
            windows: rows / tokens,
            tokens,
            heads,
            head_dim: dim / heads,
        };
        let keep = self.record && qkv.id.is_some();
        let input = qkv.data();
        let results = par::map_range(geom.windows * heads, |bh| {
            let b = bh / heads;
            let valid = key_valid.as_deref().map(|k| &k[b * tokens..(b + 1) * tokens]);
            attention_forward(input, geom, b, bh % heads, valid, keep)
        });
        let mut y = vec![0f32; rows * dim];
        let mut probs = Vec::new();
        for (bh, (out, p)) in results.into_iter().enumerate() {
            let (b, h) = (bh / heads, bh % heads);
            let hd = geom.head_dim;
            for t in 0..tokens {
                let dst = (b * tokens + t) * dim + h * hd;
                y[dst..dst + hd].copy_from_slice(&out[t * hd..(t + 1) * hd]);
            }
            if keep {
                probs.push(p);
            }
        }
        let op = match qkv.id {
            Some(id) if keep => Op::Attention {
                qkv: id,
                input: qkv.value.clone(),
                probs,
                geom,
            },
            _ => Op::Leaf,
        };
        Ok(self.push(Tensor::from_vec(&[rows, dim], y)?, op, qkv.id.is_some()))
    }

    /// Stride-1 `k×k` convolution with zero padding `k/2` on an `N·H·W` pixel
    /// grid. `w` is `[cout, k·k·cin]` ordered `(ky, kx, cin)`.
    pub fn conv2d(
        &mut self,
        x: &Var,
        w: &Var,
        b: Option<&Var>,
        n: usize,
        h: usize,
        wd: usize,
        k: usize,
    ) -> Result<Var> {
        let (rows, cin) = x.dims2()?;
        let (cout, kk) = w.dims2()?;
        if rows != n * h * wd || kk != k * k * cin || k % 2 == 0 {
            return Err(shape_err!(
                "conv2d: input {:?} as {n}x{h}x{wd}, weight {:?}, k={k}",
                x.shape(),
                w.shape()
            ));
        }
        let geom = ConvGeom {
            n,
            h,
            w: wd,
            cin,
            cout,
            k,
        };
        let mut y = vec![0f32; rows * cout];
        let chunk = conv_chunk(rows, kk);
        par::for_each_chunk_mut(&mut y, chunk * cout, |ci, yc| {
            let r0 = ci * chunk;
            let m = yc.len() / cout;
            let mut col = vec![0f32; m * kk];
            im2col(x.data(), geom, r0, m, &mut col);
            gemm(m, kk, cout, &col, G::N, w.data(), G::T, 0.0, yc);
            if let Some(b) = b {
                for row in yc.chunks_mut(cout) {
                    row.iter_mut().zip(b.data()).for_each(|(v, bb)| *v += bb);
                }
            }
        });
        let tracked = x.id.is_some() || w.id.is_some() || b.is_some_and(|b| b.id.is_some());
        let op = if self.record && tracked {
            Op::Conv {
                x: x.clone(),
                w: w.clone(),
                b: b.and_then(|b| b.id),
                geom,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(Tensor::from_vec(&[rows, cout], y)?, op, tracked))
    }

    /// 2×2 stride-2 max pooling on an `N·H·W` pixel grid (H, W even).
    pub fn max_pool2(&mut self, x: &Var, n: usize, h: usize, w: usize) -> Result<Var> {
        let (rows, c) = x.dims2()?;
        if rows != n * h * w || h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("max_pool2: {:?} as {n}x{h}x{w}", x.shape()));
        }
        let (h2, w2) = (h / 2, w / 2);
        let xd = x.data();
        let mut y = vec![0f32; n * h2 * w2 * c];
        let mut arg = vec![0u32; n * h2 * w2 * c];
        for b in 0..n {
            for oy in 0..h2 {
                for ox in 0..w2 {
                    let o = ((b * h2 + oy) * w2 + ox) * c;
                    for ch in 0..c {
                        let mut bi = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
                        let mut best = xd[bi];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let i = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if xd[i] > best {
                                best = xd[i];
                                bi = i;
                            }
                        }
                        y[o + ch] = best;
                        arg[o + ch] = bi as u32;
                    }
                }
            }
        }
        let op = match x.id {
            Some(id) if self.record => Op::MaxPool2 { x: id, argmax: arg },
            _ => Op::Leaf,
        };
        Ok(self.push(
            Tensor::from_vec(&[n * h2 * w2, c], y)?,
            op,
            x.id.is_some(),
        ))
    }

    /// Bilinear resize of an `N·H·W` pixel grid (half-pixel centers, edge clamp).
    pub fn resize_bilinear(&mut self, x: &Var, geom: ResizeGeom) -> Result<Var> {
        let (rows, c) = x.dims2()?;
        if rows != geom.n * geom.h * geom.w || c != geom.c {
            return Err(shape_err!("resize: {:?} vs {:?}", x.shape(), geom));
        }
        let y = resize_forward(x.data(), geom);
        let op = match x.id {
            Some(id) if self.record => Op::Resize { x: id, geom },
            _ => Op::Leaf,
        };
        Ok(self.push(
            Tensor::from_vec(&[geom.n * geom.h2 * geom.w2, c], y)?,
            op,
            x.id.is_some(),
        ))
    }

    /// Scalar node whose gradient with respect to `x` was computed alongside
    /// its value (used by the loss).
    pub fn scalar_with_grad(&mut self, x: &Var, value: f32, grad: Vec<f32>) -> Result<Var> {
        if grad.len() != x.len() {
            return Err(shape_err!("scalar grad len {} for {}", grad.len(), x.len()));
        }
        let op = match x.id {
            Some(id) if self.record => Op::Scalar { x: id, grad },
            _ => Op::Leaf,
        };
        Ok(self.push(Tensor::full(&[1], value), op, x.id.is_some()))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: &Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        let Some(root) = out.id else {
            return Ok(Gradients { grads });
        };
        if out.len() != 1 {
            return Err(shape_err!("backward from non-scalar {:?}", out.shape()));
        }
        grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let Some(dy) = grads[id].take() else { continue };
            self.backprop_node(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: NodeId, dy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let mut acc = |target: Option<NodeId>, f: &mut dyn FnMut(&mut [f32])| {
            if let Some(t) = target {
                let g = grads[t].get_or_insert_with(|| vec![0f32; nodes[t].len]);
                f(g);
            }
        };
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (rows, din) = (x.shape()[0], x.shape()[1]);
                let dout = w.shape()[0];
                acc(x.id, &mut |g| {
                    gemm(rows, dout, din, dy, G::N, w.data(), G::N, 1.0, g)
                });
                acc(w.id, &mut |g| {
                    gemm(dout, rows, din, dy, G::T, x.data(), G::N, 1.0, g)
                });
                acc(*b, &mut |g| col_sum_into(dy, dout, g));
            }
            Op::Add { a, b } => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| add_into(g, dy));
            }
            Op::AddBroadcast { x, p, plen } => {
                acc(*x, &mut |g| add_into(g, dy));
                acc(*p, &mut |g| {
                    for (i, v) in dy.iter().enumerate() {
                        g[i % plen] += v;
                    }
                });
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                width,
                kind,
            } => {
                let d = *width;
                let g = gamma.data();
                acc(gamma.id, &mut |gg| {
                    for (dr, xr) in dy.chunks(d).zip(xhat.chunks(d)) {
                        for i in 0..d {
                            gg[i] += dr[i] * xr[i];
                        }
                    }
                });
                acc(*beta, &mut |gb| col_sum_into(dy, d, gb));
                acc(*x, &mut |gx| norm_backward(dy, xhat, rstd, g, d, *kind, gx));
            }
            Op::Gelu { x, input } => acc(Some(*x), &mut |g| {
                for ((gv, &d), &v) in g.iter_mut().zip(dy).zip(input.data()) {
                    *gv += d * gelu_grad(v);
                }
            }),
            Op::Relu { x, input } => acc(Some(*x), &mut |g| {
                for ((gv, &d), &v) in g.iter_mut().zip(dy).zip(input.data()) {
                    if v > 0.0 {
                        *gv += d;
                    }
                }
            }),
            Op::Gather { x, idx, width } => acc(Some(*x), &mut |g| {
                for (r, &s) in idx.iter().enumerate() {
                    if s != NONE_IDX {
                        let s = s as usize;
                        add_into(&mut g[s * width..(s + 1) * width], &dy[r * width..(r + 1) * width]);
                    }
                }
            }),
            Op::Concat { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut off = 0;
                for &(pid, w) in parts {
                    acc(pid, &mut |g| {
                        for r in 0..*rows {
                            add_into(
                                &mut g[r * w..(r + 1) * w],
                                &dy[r * total + off..r * total + off + w],
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::Attention {
                qkv,
                input,
                probs,
                geom,
            } => acc(Some(*qkv), &mut |g| {
                attention_backward(input.data(), probs, *geom, dy, g)
            }),
            Op::Conv { x, w, b, geom } => {
                conv_backward(x, w, *geom, dy, &mut acc);
                acc(*b, &mut |g| col_sum_into(dy, geom.cout, g));
            }
            Op::MaxPool2 { x, argmax } => acc(Some(*x), &mut |g| {
                for (&a, &d) in argmax.iter().zip(dy) {
                    g[a as usize] += d;
                }
            }),
            Op::Resize { x, geom } => acc(Some(*x), &mut |g| resize_backward(dy, *geom, g)),
            Op::Scalar { x, grad } => acc(Some(*x), &mut |g| {
                let s = dy[0];
                for (gv, &d) in g.iter_mut().zip(grad) {
                    *gv += s * d;
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn col_sum_into(m: &[f32], width: usize, dst: &mut [f32]) {
    for row in m.chunks(width) {
        add_into(dst, row);
    }
}

fn norm_backward(
    dy: &[f32],
    xhat: &[f32],
    rstd: &[f32],
    gamma: &[f32],
    d: usize,
    kind: NormAxis,
    gx: &mut [f32],
) {
    match kind {
        NormAxis::Rows => {
            let chunk = par::chunk_len(rstd.len(), 32);
            par::for_each_chunk_mut(gx, chunk * d, |ci, gc| {
                for (j, grow) in gc.chunks_mut(d).enumerate() {
                    let r = ci * chunk + j;
                    let dr = &dy[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0f64;
                    let mut m2 = 0f64;
                    for i in 0..d {
                        let dh = (dr[i] * gamma[i]) as f64;
                        m1 += dh;
                        m2 += dh * xr[i] as f64;
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for i in 0..d {
                        let dh = (dr[i] * gamma[i]) as f64;
                        grow[i] += (rstd[r] as f64 * (dh - m1 - xr[i] as f64 * m2)) as f32;
                    }
                }
            });
        }
        NormAxis::ColumnsBatch => {
            let rows = dy.len() / d;
            let mut m1 = vec![0f64; d];
            let mut m2 = vec![0f64; d];
            for (dr, xr) in dy.chunks(d).zip(xhat.chunks(d)) {
                for i in 0..d {
                    let dh = (dr[i] * gamma[i]) as f64;
                    m1[i] += dh;
                    m2[i] += dh * xr[i] as f64;
                }
            }
            for i in 0..d {
                m1[i] /= rows as f64;
                m2[i] /= rows as f64;
            }
            for ((gr, dr), xr) in gx.chunks_mut(d).zip(dy.chunks(d)).zip(xhat.chunks(d)) {
                for i in 0..d {
                    let dh = (dr[i] * gamma[i]) as f64;
                    gr[i] += (rstd[i] as f64 * (dh - m1[i] - xr[i] as f64 * m2[i])) as f32;
                }
            }
        }
        NormAxis::ColumnsFixed => {
            for (gr, dr) in gx.chunks_mut(d).zip(dy.chunks(d)) {
                for i in 0..d {
                    gr[i] += dr[i] * gamma[i] * rstd[i];
                }
            }
        }
    }
}

pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f32) -> f32 {
    let cdf = 0.5 * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f32::consts::PI).sqrt();
    cdf + x * pdf
}

/// Copies the `(window, head)` slice of q, k or v (`which` = 0, 1, 2).
fn head_slice(input: &[f32], g: AttnGeom, b: usize, h: usize, which: usize) -> Vec<f32> {
    let dim = g.heads * g.head_dim;
    let mut out = vec![0f32; g.tokens * g.head_dim];
    for t in 0..g.tokens {
        let src = (b * g.tokens + t) * 3 * dim + which * dim + h * g.head_dim;
        out[t * g.head_dim..(t + 1) * g.head_dim].copy_from_slice(&input[src..src + g.head_dim]);
    }
    out
}

fn attention_forward(
    input: &[f32],
    g: AttnGeom,
    b: usize,
    h: usize,
    valid: Option<&[bool]>,
    keep: bool,
) -> (Vec<f32>, Vec<f32>) {
    let (t, hd) = (g.tokens, g.head_dim);
    let q = head_slice(input, g, b, h, 0);
    let k = head_slice(input, g, b, h, 1);
    let v = head_slice(input, g, b, h, 2);
    let mut s = vec![0f32; t * t];
    gemm(t, hd, t, &q, G::N, &k, G::T, 0.0, &mut s);
    let scale = (hd as f32).powf(-0.5);
    let ok = |j: usize| valid.is_none_or(|m| m[j]);
    for row in s.chunks_mut(t) {
        let mx = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| ok(j))
            .fold(f32::NEG_INFINITY, |a, (_, &v)| a.max(v * scale));
        let mut sum = 0f32;
        for (j, v) in row.iter_mut().enumerate() {
            *v = if ok(j) { (*v * scale - mx).exp() } else { 0.0 };
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    let mut o = vec![0f32; t * hd];
    gemm(t, t, hd, &s, G::N, &v, G::N, 0.0, &mut o);
    (o, if keep { s } else { Vec::new() })
}

fn attention_backward(input: &[f32], probs: &[Vec<f32>], g: AttnGeom, dy: &[f32], dqkv: &mut [f32]) {
    let (t, hd) = (g.tokens, g.head_dim);
    let dim = g.heads * hd;
    let scale = (hd as f32).powf(-0.5);
    let parts = par::map_range(g.windows * g.heads, |bh| {
        let (b, h) = (bh / g.heads, bh % g.heads);
        let p = &probs[bh];
        let q = head_slice(input, g, b, h, 0);
        let k = head_slice(input, g, b, h, 1);
        let v = head_slice(input, g, b, h, 2);
        let mut dout = vec![0f32; t * hd];
        for tt in 0..t {
            let src = (b * t + tt) * dim + h * hd;
            dout[tt * hd..(tt + 1) * hd].copy_from_slice(&dy[src..src + hd]);
        }
        let mut dv = vec![0f32; t * hd];
        gemm(t, t, hd, p, G::T, &dout, G::N, 0.0, &mut dv);
        let mut dp = vec![0f32; t * t];
        gemm(t, hd, t, &dout, G::N, &v, G::T, 0.0, &mut dp);
        for (dr, pr) in dp.chunks_mut(t).zip(p.chunks(t)) {
            let dot: f32 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
            for (d, &pv) in dr.iter_mut().zip(pr) {
                *d = pv * (*d - dot) * scale;
            }
        }
        let mut dq = vec![0f32; t * hd];
        gemm(t, t, hd, &dp, G::N, &k, G::N, 0.0, &mut dq);
        let mut dk = vec![0f32; t * hd];
        gemm(t, t, hd, &dp, G::T, &q, G::N, 0.0, &mut dk);
        (dq, dk, dv)
    });
    for (bh, (dq, dk, dv)) in parts.into_iter().enumerate() {
        let (b, h) = (bh / g.heads, bh % g.heads);
        for tt in 0..t {
            let base = (b * t + tt) * 3 * dim + h * hd;
            for (which, src) in [&dq, &dk, &dv].into_iter().enumerate() {
                let o = base + which * dim;
                add_into(&mut dqkv[o..o + hd], &src[tt * hd..(tt + 1) * hd]);
            }
        }
    }
}

fn conv_chunk(rows: usize, kk: usize) -> usize {
    // bound the im2col scratch to roughly 16 MB per chunk
    let cap = (4 << 20) / kk.max(1);
    par::chunk_len(rows, 64).min(cap.max(64))
}

fn im2col(x: &[f32], g: ConvGeom, r0: usize, m: usize, col: &mut [f32]) {
    let kk = g.k * g.k * g.cin;
    let pad = (g.k / 2) as isize;
    for j in 0..m {
        let r = r0 + j;
        let b = r / (g.h * g.w);
        let yy = (r / g.w) % g.h;
        let xx = r % g.w;
        let dst = &mut col[j * kk..(j + 1) * kk];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let sy = yy as isize + ky as isize - pad;
                let sx = xx as isize + kx as isize - pad;
                let o = (ky * g.k + kx) * g.cin;
                if sy < 0 || sx < 0 || sy >= g.h as isize || sx >= g.w as isize {
                    dst[o..o + g.cin].fill(0.0);
                } else {
                    let s = ((b * g.h + sy as usize) * g.w + sx as usize) * g.cin;
                    dst[o..o + g.cin].copy_from_slice(&x[s..s + g.cin]);
                }
            }
        }
    }
}

fn col2im_add(dcol: &[f32], g: ConvGeom, r0: usize, m: usize, dx: &mut [f32]) {
    let kk = g.k * g.k * g.cin;
    let pad = (g.k / 2) as isize;
    for j in 0..m {
        let r = r0 + j;
        let b = r / (g.h * g.w);
        let yy = (r / g.w) % g.h;
        let xx = r % g.w;
        let src = &dcol[j * kk..(j + 1) * kk];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let sy = yy as isize + ky as isize - pad;
                let sx = xx as isize + kx as isize - pad;
                if sy < 0 || sx < 0 || sy >= g.h as isize || sx >= g.w as isize {
                    continue;
                }
                let o = (ky * g.k + kx) * g.cin;
                let s = ((b * g.h + sy as usize) * g.w + sx as usize) * g.cin;
                add_into(&mut dx[s..s + g.cin], &src[o..o + g.cin]);
            }
        }
    }
}

fn conv_backward(
    x: &Var,
    w: &Var,
    g: ConvGeom,
    dy: &[f32],
    acc: &mut dyn FnMut(Option<NodeId>, &mut dyn FnMut(&mut [f32])),
) {
    let rows = g.n * g.h * g.w;
    let kk = g.k * g.k * g.cin;
    let chunk = conv_chunk(rows, kk);
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    let mut r0 = 0;
    while r0 < rows {
        let m = chunk.min(rows - r0);
        let dyc = &dy[r0 * g.cout..(r0 + m) * g.cout];
        if w.id.is_some() {
            col.resize(m * kk, 0.0);
            im2col(x.data(), g, r0, m, &mut col);
            acc(w.id, &mut |gw| gemm(g.cout, m, kk, dyc, G::T, &col, G::N, 1.0, gw));
        }
        if x.id.is_some() {
            dcol.resize(m * kk, 0.0);
            gemm(m, g.cout, kk, dyc, G::N, w.data(), G::N, 0.0, &mut dcol);
            acc(x.id, &mut |gx| col2im_add(&dcol, g, r0, m, gx));
        }
        r0 += m;
    }
}

/// Per-axis source taps `(i0, i1, w0, w1)` for half-pixel bilinear sampling.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let l1 = (s - i0 as f64) as f32;
            let l1 = if i1 == i0 { 0.0 } else { l1 };
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

fn resize_forward(x: &[f32], g: ResizeGeom) -> Vec<f32> {
    let ty = bilinear_taps(g.h, g.h2);
    let tx = bilinear_taps(g.w, g.w2);
    let c = g.c;
    let mut y = vec![0f32; g.n * g.h2 * g.w2 * c];
    par::for_each_chunk_mut(&mut y, g.w2 * c, |row, out| {
        let b = row / g.h2;
        let (y0, y1, wy0, wy1) = ty[row % g.h2];
        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            let o = &mut out[ox * c..(ox + 1) * c];
            for (sy, wy) in [(y0, wy0), (y1, wy1)] {
                for (sx, wx) in [(x0, wx0), (x1, wx1)] {
                    let wgt = wy * wx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let s = ((b * g.h + sy) * g.w + sx) * c;
                    for (ov, &xv) in o.iter_mut().zip(&x[s..s + c]) {
                        *ov += wgt * xv;
                    }
                }
            }
        }
    });
    y
}

fn resize_backward(dy: &[f32], g: ResizeGeom, dx: &mut [f32]) {
    let ty = bilinear_taps(g.h, g.h2);
    let tx = bilinear_taps(g.w, g.w2);
    let c = g.c;
    let per_image = g.h * g.w * c;
    par::for_each_chunk_mut(dx, per_image, |b, dxi| {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let d = &dy[((b * g.h2 + oy) * g.w2 + ox) * c..][..c];
                for (sy, wy) in [(y0, wy0), (y1, wy1)] {
                    for (sx, wx) in [(x0, wx0), (x1, wx1)] {
                        let wgt = wy * wx;
                        if wgt == 0.0 {
                            continue;
                        }
                        let s = (sy * g.w + sx) * c;
                        for (gv, &dv) in dxi[s..s + c].iter_mut().zip(d) {
                            *gv += wgt * dv;
                        }
                    }
                }
            }
        }
    });
}

/// Row indices for a pixel permutation; `None` becomes a zero row.
pub fn gather_index(idx: impl IntoIterator<Item = Option<usize>>) -> Arc<Vec<u32>> {
    Arc::new(
        idx.into_iter()
            .map(|i| i.map_or(NONE_IDX, |v| v as u32))
            .collect(),
    )
}
