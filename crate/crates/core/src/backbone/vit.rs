use candle_core::Tensor;

use super::{Backbone, BackboneConfig, FeaturePyramid, NUM_STAGES};
use crate::error::{Error, Result};
use crate::nn::{softmax, Conv2d, LayerNorm, Linear};
use crate::params::{Init, ParamStore};

struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    fn new(store: &mut ParamStore, path: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{path}.norm1"), dim)?,
            qkv: Linear::new(store, &format!("{path}.qkv"), dim, 3 * dim)?,
            proj: Linear::new(store, &format!("{path}.proj"), dim, dim)?,
            norm2: LayerNorm::new(store, &format!("{path}.norm2"), dim)?,
            fc1: Linear::new(store, &format!("{path}.fc1"), dim, 2 * dim)?,
            fc2: Linear::new(store, &format!("{path}.fc2"), 2 * dim, dim)?,
            heads,
        })
    }

    /// `x` is `(B, T, D)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(&self.norm1.forward(x)?)?
            .reshape((b, t, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let attn = softmax(&scores)?.matmul(&v)?;
        let attn = attn.transpose(1, 2)?.reshape((b, t, d))?;
        let x = (x + self.proj.forward(&attn)?)?;
        let h = self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

/// Patch-embedding transformer whose token grids at four evenly spaced
/// blocks are reshaped into `(B, D, h, w)` stage maps.
pub struct TinyVit {
    input_size: usize,
    grid: usize,
    embed: Conv2d,
    pos: Tensor,
    blocks: Vec<Block>,
    /// Block index (0-based) after which each stage is tapped.
    taps: [usize; NUM_STAGES],
    norm: LayerNorm,
    head: Linear,
}

impl TinyVit {
    pub fn new(cfg: &BackboneConfig, num_classes: usize, store: &mut ParamStore) -> Result<Self> {
        if cfg.depth < NUM_STAGES {
            return Err(Error::config(format!(
                "tiny-vit needs depth >= {NUM_STAGES}, got {}",
                cfg.depth
            )));
        }
        if cfg.patch == 0 || cfg.input_size % cfg.patch != 0 {
            return Err(Error::config(format!(
                "tiny-vit patch {} does not divide input {}",
                cfg.patch, cfg.input_size
            )));
        }
        if cfg.heads == 0 || cfg.width % cfg.heads != 0 {
            return Err(Error::config(format!(
                "tiny-vit width {} not divisible by {} heads",
                cfg.width, cfg.heads
            )));
        }
        let dim = cfg.width;
        let grid = cfg.input_size / cfg.patch;
        let embed = Conv2d::new(store, "backbone.patch_embed", 3, dim, cfg.patch, cfg.patch, 0)?;
        let pos = store
            .var("backbone.pos_embed", &[1, grid * grid, dim], Init::Normal(0.02))?
            .as_tensor()
            .clone();
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("backbone.block{i}"), dim, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        let taps = std::array::from_fn(|j| (j + 1) * cfg.depth / NUM_STAGES - 1);
        let norm = LayerNorm::new(store, "backbone.norm", dim)?;
        let head = if cfg.zero_head {
            Linear::with_init(store, "backbone.head", dim, num_classes, Init::Zeros, Init::Zeros)?
        } else {
            Linear::new(store, "backbone.head", dim, num_classes)?
        };
        Ok(Self {
            input_size: cfg.input_size,
            grid,
            embed,
            pos,
            blocks,
            taps,
            norm,
            head,
        })
    }

    fn to_map(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, _, d) = tokens.dims3()?;
        Ok(tokens.transpose(1, 2)?.reshape((b, d, self.grid, self.grid))?)
    }

    fn to_tokens(map: &Tensor) -> Result<Tensor> {
        Ok(map.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
    }

    /// Runs blocks `from..` and the classifier. Tapped blocks round-trip through
    /// the spatial map so that stage maps sit on the gradient path.
    fn run(&self, mut x: Tensor, from: usize, taps: &mut Vec<Tensor>) -> Result<Tensor> {
        for (i, block) in self.blocks.iter().enumerate().skip(from) {
            x = block.forward(&x)?;
            if self.taps.contains(&i) {
                let map = self.to_map(&x)?;
                x = Self::to_tokens(&map)?;
                taps.push(map);
            }
        }
        let pooled = self.norm.forward(&x.mean(1)?)?;
        self.head.forward(&pooled)
    }
}

impl Backbone for TinyVit {
    fn name(&self) -> &str {
        "tiny-vit"
    }

    fn input_size(&self) -> usize {
        self.input_size
    }

    fn num_classes(&self) -> usize {
        self.head.out_dim()
    }

    fn stage_taps(&self) -> [String; NUM_STAGES] {
        std::array::from_fn(|l| format!("tokens after block {}", self.taps[l]))
    }

    fn forward(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let tokens = Self::to_tokens(&self.embed.forward(images)?)?;
        let x = tokens.broadcast_add(&self.pos)?;
        let mut taps = Vec::with_capacity(NUM_STAGES);
        let logits = self.run(x, 0, &mut taps)?;
        FeaturePyramid::new(taps, logits)
    }

    fn logits_from_stage(&self, stage: usize, features: &Tensor) -> Result<Tensor> {
        if stage >= NUM_STAGES {
            return Err(Error::invalid(format!("stage index {stage} out of range")));
        }
        let x = Self::to_tokens(features)?;
        let mut sink = Vec::new();
        self.run(x, self.taps[stage] + 1, &mut sink)
    }
}
