use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    None,
    Layer,
    Batch,
}

/// Prediction head settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub decoder_dim: usize,
    pub norm_kind: NormKind,
    pub output_stride: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            decoder_dim: 256,
            norm_kind: NormKind::Batch,
            output_stride: 4,
        }
    }
}

/// Every architectural constant of the encoder, pyramid and head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub window_size: usize,
    pub global_block_indexes: Vec<usize>,
    /// `(H, W)` of the padding canvas.
    pub canvas: (usize, usize),
    pub mlp_ratio: usize,
    pub ln_eps: f32,
    /// Channels of every pyramid level.
    pub pyramid_dim: usize,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::vit_base()
    }
}

/// Pyramid strides relative to the canvas, finest first.
pub const PYRAMID_STRIDES: [usize; 5] = [4, 8, 16, 32, 64];

impl ModelConfig {
    /// Windowed ViT-Base on a 1024×1024 canvas.
    pub fn vit_base() -> Self {
        ModelConfig {
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            window_size: 14,
            global_block_indexes: vec![2, 5, 8, 11],
            canvas: (1024, 1024),
            mlp_ratio: 4,
            ln_eps: 1e-6,
            pyramid_dim: 256,
            head: HeadConfig::default(),
        }
    }

    /// Small preset for tests and CPU runs.
    pub fn toy() -> Self {
        ModelConfig {
            patch_size: 16,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            window_size: 4,
            global_block_indexes: vec![1, 3],
            canvas: (128, 128),
            mlp_ratio: 4,
            ln_eps: 1e-6,
            pyramid_dim: 32,
            head: HeadConfig {
                decoder_dim: 32,
                ..HeadConfig::default()
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "vit_base" | "vit-base" => Ok(Self::vit_base()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!("unknown model preset {other:?}"))),
        }
    }

    /// Token grid `(H/p, W/p)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.canvas.0 / self.patch_size, self.canvas.1 / self.patch_size)
    }

    pub fn is_global(&self, block: usize) -> bool {
        self.global_block_indexes.contains(&block)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Spatial size of pyramid level `j`.
    pub fn level_size(&self, j: usize) -> (usize, usize) {
        (
            self.canvas.0 / PYRAMID_STRIDES[j],
            self.canvas.1 / PYRAMID_STRIDES[j],
        )
    }

    pub fn output_size(&self) -> (usize, usize) {
        (
            self.canvas.0 / self.head.output_stride,
            self.canvas.1 / self.head.output_stride,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size != 16 {
            // pyramid strides are fixed multiples of a stride-16 encoder
            return bad(format!("patch_size must be 16, got {}", self.patch_size));
        }
        let (h, w) = self.canvas;
        if h == 0 || w == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return bad(format!("canvas {h}x{w} not divisible by patch size {}", self.patch_size));
        }
        if h % 64 != 0 || w % 64 != 0 {
            return bad(format!("canvas {h}x{w} must be divisible by 64 for the pyramid"));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.num_heads));
        }
        if self.embed_dim % 4 != 0 {
            return bad("embed_dim must be divisible by 4".into());
        }
        if let Some(&i) = self.global_block_indexes.iter().find(|&&i| i >= self.depth) {
            return bad(format!("global block index {i} outside depth {}", self.depth));
        }
        if self.window_size == 0 || self.mlp_ratio == 0 || self.pyramid_dim == 0 {
            return bad("window_size, mlp_ratio and pyramid_dim must be positive".into());
        }
        if self.head.output_stride != 4 || self.head.decoder_dim == 0 {
            return bad("head output stride must be 4 and decoder_dim positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::vit_base().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
        assert_eq!(ModelConfig::vit_base().grid(), (64, 64));
        assert_eq!(ModelConfig::vit_base().output_size(), (256, 256));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::toy();
        c.canvas = (120, 128);
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.global_block_indexes = vec![4];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.num_heads = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = ModelConfig::vit_base();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
    }
}
