//! Hierarchical transformer encoders for contact maps and signal tracks.
//!
//! Both encoders share the same skeleton: a stage-0 embedding (patch
//! projection, or a convolution/max-pool frontend for tracks) plus a learned
//! positional embedding, three layers of `T` transformer blocks each followed
//! by a merging downsampler that halves the sequence (quarters it on the 2D
//! grid) and doubles the feature dimension, and a bottleneck of `T` blocks.
//! Odd sides are padded by replicating the last row/column/position, so stage
//! lengths follow ceil-halving.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::{self, check_finite, Ctx, Init, LayerNorm, Linear, TransformerBlock};
use crate::preprocessing::ContactMapWindow;

pub const STAGES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Contact window side `H = W`.
    pub window: usize,
    pub patch: usize,
    /// Base feature dimension `C`.
    pub dim: usize,
    /// Transformer blocks per layer `T`.
    pub blocks: usize,
    /// Track input length `L1`.
    pub track_length: usize,
    pub track_channels: usize,
    /// Track length after the convolution frontend `L2`.
    pub track_tokens: usize,
    pub heads: usize,
    pub dropout: f64,
    pub conv_kernel: usize,
    /// Max-pool factor after each convolution; the product must equal `L1 / L2`.
    pub pool_factors: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            window: 50,
            patch: 2,
            dim: 128,
            blocks: 2,
            track_length: 5000,
            track_channels: 2,
            track_tokens: 100,
            heads: 4,
            dropout: 0.0,
            conv_kernel: 9,
            pool_factors: vec![5, 5, 2, 1],
        }
    }
}

fn ceil_half(x: usize) -> usize {
    x.div_ceil(2)
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.window >= 1 && self.patch >= 1, "window and patch must be positive");
        ensure!(
            self.window.is_multiple_of(self.patch),
            "window {} is not divisible by patch size {}",
            self.window,
            self.patch
        );
        ensure!(self.dim >= 1 && self.heads >= 1, "dim and heads must be positive");
        ensure!(
            self.dim.is_multiple_of(self.heads),
            "feature dim {} is not divisible by {} heads",
            self.dim,
            self.heads
        );
        ensure!(self.track_channels >= 1, "at least one track channel is required");
        ensure!(self.track_tokens >= 1, "track_tokens must be positive");
        ensure!(self.conv_kernel % 2 == 1, "conv kernel width must be odd");
        ensure!(!self.pool_factors.is_empty(), "at least one convolution layer is required");
        ensure!(self.pool_factors.iter().all(|f| *f >= 1), "pool factors must be >= 1");
        let reduction: usize = self.pool_factors.iter().product();
        ensure!(
            self.track_length == self.track_tokens * reduction,
            "track length {} != track_tokens {} x pooling {}",
            self.track_length,
            self.track_tokens,
            reduction
        );
        ensure!((0.0..1.0).contains(&self.dropout), "dropout must be in [0, 1)");
        Ok(())
    }

    /// Patch count `N = (H/P)^2`.
    pub fn patches(&self) -> usize {
        self.grid_sides()[0].pow(2)
    }

    pub fn patch_size(&self) -> usize {
        self.patch * self.patch
    }

    /// Hi-C grid sides `g_0 .. g_3`.
    pub fn grid_sides(&self) -> [usize; STAGES + 1] {
        let mut g = [self.window / self.patch; STAGES + 1];
        for i in 1..=STAGES {
            g[i] = ceil_half(g[i - 1]);
        }
        g
    }

    /// Hi-C stage lengths `N, α_1, α_2, α_3`.
    pub fn hic_lengths(&self) -> [usize; STAGES + 1] {
        self.grid_sides().map(|g| g * g)
    }

    /// Track stage lengths `L2, β_1, β_2, β_3`.
    pub fn track_lengths(&self) -> [usize; STAGES + 1] {
        let mut b = [self.track_tokens; STAGES + 1];
        for i in 1..=STAGES {
            b[i] = ceil_half(b[i - 1]);
        }
        b
    }

    /// Stage dimensions `C, 2C, 4C, 8C`.
    pub fn stage_dims(&self) -> [usize; STAGES + 1] {
        [self.dim, 2 * self.dim, 4 * self.dim, 8 * self.dim]
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.stage_dims()[STAGES]
    }

    pub fn projection_dim(&self) -> usize {
        self.stage_dims()[STAGES - 1]
    }
}

/// Splits a window into row-major flattened `P×P` patches, ordered row-major
/// over the patch grid.
pub fn patchify(window: &ContactMapWindow, patch: usize) -> Result<Vec<Vec<f64>>> {
    let h = window.size;
    ensure!(patch >= 1 && h.is_multiple_of(patch), "window side {h} is not divisible by patch size {patch}");
    let g = h / patch;
    let mut out = Vec::with_capacity(g * g);
    for pr in 0..g {
        for pc in 0..g {
            let mut p = Vec::with_capacity(patch * patch);
            for r in 0..patch {
                for c in 0..patch {
                    p.push(window.get(pr * patch + r, pc * patch + c));
                }
            }
            out.push(p);
        }
    }
    Ok(out)
}

/// Batched patchify: `(B, H, W) -> (B, N, P*P)`.
pub fn patchify_tensor(maps: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, h, w) = maps.dims3()?;
    ensure!(h % patch == 0 && w % patch == 0, "map {h}x{w} is not divisible by patch size {patch}");
    let (gh, gw) = (h / patch, w / patch);
    Ok(maps
        .reshape((b, gh, patch, gw, patch))?
        .permute((0, 1, 3, 2, 4))?
        .reshape((b, gh * gw, patch * patch))?)
}

/// Replicates the last index along `dim` when its size is odd.
fn pad_odd(x: &Tensor, dim: usize) -> Result<Tensor> {
    let n = x.dim(dim)?;
    if n % 2 == 0 {
        return Ok(x.clone());
    }
    let last = x.narrow(dim, n - 1, 1)?;
    Ok(Tensor::cat(&[x, &last], dim)?)
}

/// 2×2 neighbour merge on a square token grid: `(B, g², d) -> (B, ceil(g/2)², 2d)`.
#[derive(Debug, Clone)]
pub struct PatchMerge2d {
    norm: LayerNorm,
    proj: Linear,
}

impl PatchMerge2d {
    pub fn new(init: &mut Init, dim: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&mut init.sub("norm"), 4 * dim)?,
            proj: Linear::new(&mut init.sub("proj"), 4 * dim, 2 * dim, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor, side: usize) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        ensure!(n == side * side, "token count {n} is not a {side}x{side} grid");
        let grid = x.reshape((b, side, side, d))?;
        let grid = pad_odd(&pad_odd(&grid, 1)?, 2)?;
        let half = grid.dim(1)? / 2;
        let merged = grid
            .reshape((b, half, 2, half, 2, d))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((b, half * half, 4 * d))?;
        self.proj.forward(&self.norm.forward(&merged)?)
    }
}

/// Adjacent-pair merge on a sequence: `(B, L, d) -> (B, ceil(L/2), 2d)`.
#[derive(Debug, Clone)]
pub struct PairMerge1d {
    norm: LayerNorm,
    proj: Linear,
}

impl PairMerge1d {
    pub fn new(init: &mut Init, dim: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&mut init.sub("norm"), 2 * dim)?,
            proj: Linear::new(&mut init.sub("proj"), 2 * dim, 2 * dim, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = pad_odd(x, 1)?;
        let (b, l, d) = x.dims3()?;
        let merged = x.reshape((b, l / 2, 2 * d))?;
        self.proj.forward(&self.norm.forward(&merged)?)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer<M> {
    blocks: Vec<TransformerBlock>,
    merge: M,
}

/// Per-stage outputs of one encoder: `stages[0..=3]` are `X^0..X^3`.
#[derive(Debug, Clone)]
pub struct StageOutputs {
    pub stages: Vec<Tensor>,
    pub bottleneck: Tensor,
}

impl StageOutputs {
    pub fn stage(&self, i: usize) -> &Tensor {
        &self.stages[i]
    }
}

#[derive(Debug, Clone)]
pub struct HicEncoder {
    config: EncoderConfig,
    patch_embed: Linear,
    position: candle_core::Var,
    layers: Vec<EncoderLayer<PatchMerge2d>>,
    bottleneck: Vec<TransformerBlock>,
}

impl HicEncoder {
    pub fn new(init: &mut Init, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let dims = config.stage_dims();
        let patch_embed = Linear::new(&mut init.sub("patch_embed"), config.patch_size(), config.dim, true)?;
        let position = init.normal("position", &[config.patches(), config.dim], 0.02)?;
        let mut layers = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            let mut li = init.sub(format!("layers.{i}"));
            layers.push(EncoderLayer {
                blocks: nn::blocks(&mut li, config.blocks, dims[i], config.heads)?,
                merge: PatchMerge2d::new(&mut li.sub("merge"), dims[i])?,
            });
        }
        let bottleneck = nn::blocks(&mut init.sub("bottleneck"), config.blocks, dims[STAGES], config.heads)?;
        Ok(Self {
            config: config.clone(),
            patch_embed,
            position,
            layers,
            bottleneck,
        })
    }

    /// `maps`: `(B, H, W)`.
    pub fn forward(&self, maps: &Tensor, ctx: &Ctx) -> Result<StageOutputs> {
        let (_, h, w) = maps.dims3()?;
        ensure!(
            h == self.config.window && w == self.config.window,
            "contact map {h}x{w} does not match configured window {}",
            self.config.window
        );
        let patches = patchify_tensor(maps, self.config.patch)?;
        let x0 = self
            .patch_embed
            .forward(&patches)?
            .broadcast_add(self.position.as_tensor())?;
        check_finite(&x0, "hic stage 0")?;
        let sides = self.config.grid_sides();
        let mut stages = vec![x0.clone()];
        let mut x = x0;
        for (i, layer) in self.layers.iter().enumerate() {
            let h = nn::run_blocks(&layer.blocks, &x, ctx)?;
            x = layer.merge.forward(&h, sides[i])?;
            check_finite(&x, &format!("hic stage {}", i + 1))?;
            stages.push(x.clone());
        }
        let bottleneck = nn::run_blocks(&self.bottleneck, &x, ctx)?;
        check_finite(&bottleneck, "hic bottleneck")?;
        Ok(StageOutputs { stages, bottleneck })
    }
}

#[derive(Debug, Clone)]
struct Conv1d {
    weight: candle_core::Var,
    bias: candle_core::Var,
    padding: usize,
}

impl Conv1d {
    fn new(init: &mut Init, input: usize, output: usize, kernel: usize) -> Result<Self> {
        let fan_in = input * kernel;
        Ok(Self {
            weight: init.he_uniform("weight", &[output, input, kernel], fan_in)?,
            bias: init.constant("bias", &[output], 0.0)?,
            padding: kernel / 2,
        })
    }

    /// `(B, C_in, L) -> (B, C_out, L)` as one matmul over shifted copies of
    /// the padded input. candle's native conv1d returns a wrong kernel
    /// gradient for batches larger than one.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c_in, l) = x.dims3()?;
        let (c_out, _, k) = self.weight.dims3()?;
        let padded = x.pad_with_zeros(2, self.padding, self.padding)?;
        let shifted: Vec<Tensor> = (0..k).map(|j| padded.narrow(2, j, l)).collect::<candle_core::Result<_>>()?;
        let columns = Tensor::stack(&shifted, 2)?.reshape((b, c_in * k, l))?;
        let kernel = self.weight.as_tensor().reshape((c_out, c_in * k))?;
        let y = kernel.broadcast_matmul(&columns)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, c_out, 1))?)?)
    }
}

fn max_pool1d(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, c, l) = x.dims3()?;
    ensure!(l % factor == 0, "length {l} not divisible by pool factor {factor}");
    Ok(x.reshape((b, c, l / factor, factor))?.max(D::Minus1)?)
}

#[derive(Debug, Clone)]
pub struct EpiEncoder {
    config: EncoderConfig,
    convs: Vec<Conv1d>,
    position: candle_core::Var,
    layers: Vec<EncoderLayer<PairMerge1d>>,
    bottleneck: Vec<TransformerBlock>,
}

impl EpiEncoder {
    pub fn new(init: &mut Init, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let dims = config.stage_dims();
        let mut convs = Vec::with_capacity(config.pool_factors.len());
        for i in 0..config.pool_factors.len() {
            let input = if i == 0 { config.track_channels } else { config.dim };
            convs.push(Conv1d::new(&mut init.sub(format!("conv.{i}")), input, config.dim, config.conv_kernel)?);
        }
        let position = init.normal("position", &[config.track_tokens, config.dim], 0.02)?;
        let mut layers = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            let mut li = init.sub(format!("layers.{i}"));
            layers.push(EncoderLayer {
                blocks: nn::blocks(&mut li, config.blocks, dims[i], config.heads)?,
                merge: PairMerge1d::new(&mut li.sub("merge"), dims[i])?,
            });
        }
        let bottleneck = nn::blocks(&mut init.sub("bottleneck"), config.blocks, dims[STAGES], config.heads)?;
        Ok(Self {
            config: config.clone(),
            convs,
            position,
            layers,
            bottleneck,
        })
    }

    /// `tracks`: `(B, L1, O)`.
    pub fn forward(&self, tracks: &Tensor, ctx: &Ctx) -> Result<StageOutputs> {
        let (_, l, o) = tracks.dims3()?;
        ensure!(
            l == self.config.track_length && o == self.config.track_channels,
            "track {l}x{o} does not match configured {}x{}",
            self.config.track_length,
            self.config.track_channels
        );
        let mut h = tracks.transpose(1, 2)?.contiguous()?;
        for (conv, &factor) in self.convs.iter().zip(&self.config.pool_factors) {
            h = max_pool1d(&conv.forward(&h)?.gelu()?, factor)?;
        }
        let x0 = h
            .transpose(1, 2)?
            .contiguous()?
            .broadcast_add(self.position.as_tensor())?;
        check_finite(&x0, "track stage 0")?;
        let mut stages = vec![x0.clone()];
        let mut x = x0;
        for (i, layer) in self.layers.iter().enumerate() {
            let h = nn::run_blocks(&layer.blocks, &x, ctx)?;
            x = layer.merge.forward(&h)?;
            check_finite(&x, &format!("track stage {}", i + 1))?;
            stages.push(x.clone());
        }
        let bottleneck = nn::run_blocks(&self.bottleneck, &x, ctx)?;
        check_finite(&bottleneck, "track bottleneck")?;
        Ok(StageOutputs { stages, bottleneck })
    }
}
