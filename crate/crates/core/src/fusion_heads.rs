//! Fine-tuning machinery: the contact-grounded fusion block, the U-Net style
//! track decoder and the three task heads with their losses.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::{self, Ctx, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, TransformerBlock};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before the log in BCE.
pub const BCE_CLAMP: f64 = 1e-7;

/// How the two row embeddings of the contact head are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PairwiseCombine {
    /// `(x1 + x2) + (x1 * x2)`, keeping the feature width.
    #[default]
    Sum,
    /// `[x1 + x2 : x1 * x2]`, doubling the feature width.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub pairwise_combine: PairwiseCombine,
    /// Average the predicted contact map with its transpose.
    pub symmetrize_output: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            pairwise_combine: PairwiseCombine::Sum,
            symmetrize_output: false,
        }
    }
}

/// Self-attention on the track stream, cross-attention into the contact
/// stream, then a feed-forward layer; pre-norm with residuals.
#[derive(Debug, Clone)]
pub struct FusionBlock {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_query: LayerNorm,
    norm_context: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

impl FusionBlock {
    pub fn new(init: &mut Init, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm_self: LayerNorm::new(&mut init.sub("norm_self"), dim)?,
            self_attn: MultiHeadAttention::new(&mut init.sub("self_attn"), dim, heads)?,
            norm_query: LayerNorm::new(&mut init.sub("norm_query"), dim)?,
            norm_context: LayerNorm::new(&mut init.sub("norm_context"), dim)?,
            cross_attn: MultiHeadAttention::new(&mut init.sub("cross_attn"), dim, heads)?,
            norm_ff: LayerNorm::new(&mut init.sub("norm_ff"), dim)?,
            ff: FeedForward::new(&mut init.sub("ff"), dim, 4 * dim, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, context: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = self.norm_self.forward(x)?;
        let x = (x + ctx.dropout(&self.self_attn.forward(&h, &h)?)?)?;
        let q = self.norm_query.forward(&x)?;
        let kv = self.norm_context.forward(context)?;
        let x = (&x + ctx.dropout(&self.cross_attn.forward(&q, &kv)?)?)?;
        let h = self.norm_ff.forward(&x)?;
        Ok((&x + ctx.dropout(&self.ff.forward(&h)?)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub blocks: Vec<FusionBlock>,
}

impl Fusion {
    pub fn new(init: &mut Init, count: usize, dim: usize, heads: usize) -> Result<Self> {
        let blocks = (0..count)
            .map(|i| FusionBlock::new(&mut init.sub(format!("blocks.{i}")), dim, heads))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    /// `track`: `(B, β_3, C_3)`; `contact`: `(B, S, C_3)` with any `S`.
    pub fn forward(&self, track: &Tensor, contact: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (bt, _, dt) = track.dims3()?;
        let (bc, _, dc) = contact.dims3()?;
        ensure!(bt == bc && dt == dc, "fusion inputs {:?} and {:?} disagree", track.dims(), contact.dims());
        let mut x = track.clone();
        for b in &self.blocks {
            x = b.forward(&x, contact, ctx)?;
        }
        nn::check_finite(&x, "fusion")?;
        Ok(x)
    }
}

/// `σ(x)` as `½ (1 + tanh(x/2))`, which keeps gradients finite at large `|x|`.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

#[derive(Debug, Clone)]
pub struct LoopHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl LoopHead {
    pub fn new(init: &mut Init, dim: usize) -> Result<Self> {
        ensure!(dim >= 2, "loop head needs a feature dim of at least 2");
        Ok(Self {
            fc1: Linear::new(&mut init.sub("fc1"), dim, dim / 2, true)?,
            fc2: Linear::new(&mut init.sub("fc2"), dim / 2, 1, true)?,
        })
    }

    /// Pre-sigmoid logits, `(B,)`.
    pub fn logits(&self, fused: &Tensor) -> Result<Tensor> {
        let pooled = fused.mean(1)?;
        self.fc2.forward(&self.fc1.forward(&pooled)?.gelu()?)?.squeeze(D::Minus1).map_err(Into::into)
    }

    /// Loop probabilities, `(B,)`.
    pub fn forward(&self, fused: &Tensor) -> Result<Tensor> {
        sigmoid(&self.logits(fused)?)
    }
}

/// Nearest-neighbour upsampling by 2 along the sequence axis.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, s, d) = x.dims3()?;
    Ok(x.unsqueeze(2)?.broadcast_as((b, s, 2, d))?.reshape((b, 2 * s, d))?)
}

/// Crops trailing positions, or pads by repeating the last one, to `len`.
pub fn crop_or_pad(x: &Tensor, len: usize) -> Result<Tensor> {
    let (b, s, d) = x.dims3()?;
    ensure!(s >= 1, "cannot resize an empty sequence");
    if s >= len {
        return Ok(x.narrow(1, 0, len)?);
    }
    let last = x.narrow(1, s - 1, 1)?.broadcast_as((b, len - s, d))?;
    Ok(Tensor::cat(&[x, &last.contiguous()?], 1)?)
}

#[derive(Debug, Clone)]
struct DecoderStage {
    blocks: Vec<TransformerBlock>,
    up: Linear,
    merge: Linear,
}

/// Three decoder stages mirroring the track encoder. Stage `s` (for skip
/// levels 2, 1, 0) runs `T` blocks, upsamples ×2 with a projection halving
/// the width, resizes to the skip length, concatenates the skip and merges
/// to `2·C_s`. The output is `(B, L2, 2C)`.
#[derive(Debug, Clone)]
pub struct Decoder {
    stages: Vec<DecoderStage>,
    skip_dims: Vec<usize>,
}

impl Decoder {
    /// `stage_dims` are the encoder dims `C, 2C, 4C, 8C`.
    pub fn new(init: &mut Init, stage_dims: [usize; 4], blocks: usize, heads: usize) -> Result<Self> {
        let mut stages = Vec::new();
        let mut skip_dims = Vec::new();
        let mut d = stage_dims[3];
        for s in (0..3).rev() {
            let skip = stage_dims[s];
            let mut si = init.sub(format!("stages.{}", 2 - s));
            stages.push(DecoderStage {
                blocks: nn::blocks(&mut si, blocks, d, heads)?,
                up: Linear::new(&mut si.sub("up"), d, d / 2, true)?,
                merge: Linear::new(&mut si.sub("merge"), d / 2 + skip, 2 * skip, true)?,
            });
            skip_dims.push(skip);
            d = 2 * skip;
        }
        Ok(Self { stages, skip_dims })
    }

    /// `skips` are `X_E^2, X_E^1, X_E^0` in that order.
    pub fn forward(&self, fused: &Tensor, skips: [&Tensor; 3], ctx: &Ctx) -> Result<Tensor> {
        let mut x = fused.clone();
        for ((stage, skip), &cs) in self.stages.iter().zip(skips).zip(&self.skip_dims) {
            let (bx, _, _) = x.dims3()?;
            let (bs, len, ds) = skip.dims3()?;
            ensure!(bs == bx && ds == cs, "decoder skip shape {:?} does not match width {cs}", skip.dims());
            let h = nn::run_blocks(&stage.blocks, &x, ctx)?;
            let up = crop_or_pad(&stage.up.forward(&upsample2(&h)?)?, len)?;
            x = stage.merge.forward(&Tensor::cat(&[&up, skip], D::Minus1)?)?;
        }
        nn::check_finite(&x, "decoder")?;
        Ok(x)
    }
}

/// Position-wise `2C → C → 1` regression head.
#[derive(Debug, Clone)]
pub struct CageHead {
    pub ff: FeedForward,
}

impl CageHead {
    pub fn new(init: &mut Init, dim: usize) -> Result<Self> {
        Ok(Self {
            ff: FeedForward::new(init, 2 * dim, dim, 1)?,
        })
    }

    /// `(B, L2, 2C) -> (B, L2)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.ff.forward(x)?.squeeze(D::Minus1)?)
    }
}

/// Pairwise contact head over the two halves of the decoder output.
#[derive(Debug, Clone)]
pub struct ContactHead {
    pub ff: FeedForward,
    config: HeadConfig,
}

impl ContactHead {
    pub fn new(init: &mut Init, dim: usize, config: &HeadConfig) -> Result<Self> {
        let input = match config.pairwise_combine {
            PairwiseCombine::Sum => 2 * dim,
            PairwiseCombine::Concat => 4 * dim,
        };
        Ok(Self {
            ff: FeedForward::new(init, input, dim, 1)?,
            config: config.clone(),
        })
    }

    /// `G[i, j] = (x1_i + x2_j) ⊕ (x1_i ⊙ x2_j)` for the two halves of `x`.
    pub fn pairwise(x: &Tensor, combine: PairwiseCombine) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        ensure!(l % 2 == 0, "contact head needs an even sequence length, got {l}");
        let h = l / 2;
        let x1 = x.narrow(1, 0, h)?.unsqueeze(2)?;
        let x2 = x.narrow(1, h, h)?.unsqueeze(1)?;
        let add = x1.broadcast_add(&x2)?;
        let mul = x1.broadcast_mul(&x2)?;
        let g = match combine {
            PairwiseCombine::Sum => (add + mul)?,
            PairwiseCombine::Concat => Tensor::cat(&[&add, &mul], D::Minus1)?,
        };
        debug_assert_eq!(g.dims()[..3], [b, h, h]);
        Ok(g)
    }

    /// `(B, 2H, 2C) -> (B, H, H)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = Self::pairwise(x, self.config.pairwise_combine)?;
        let map = self.ff.forward(&g)?.squeeze(D::Minus1)?;
        if self.config.symmetrize_output {
            Ok(((&map + map.transpose(1, 2)?)? * 0.5)?)
        } else {
            Ok(map)
        }
    }
}

/// Mean squared error over all elements.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    ensure!(
        pred.dims() == target.dims(),
        "prediction shape {:?} does not match target {:?}",
        pred.dims(),
        target.dims()
    );
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Binary cross-entropy on probabilities, clamped away from 0 and 1.
pub fn bce_loss(prob: &Tensor, label: &Tensor) -> Result<Tensor> {
    ensure!(
        prob.dims() == label.dims(),
        "probability shape {:?} does not match label {:?}",
        prob.dims(),
        label.dims()
    );
    let p = prob.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let pos = label.mul(&p.log()?)?;
    let neg = label.affine(-1.0, 1.0)?.mul(&p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    ensure!(pred.len() == target.len() && !pred.is_empty(), "mse inputs must have equal non-zero length");
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

pub fn bce(prob: &[f64], label: &[f64]) -> Result<f64> {
    ensure!(prob.len() == label.len() && !prob.is_empty(), "bce inputs must have equal non-zero length");
    let total: f64 = prob
        .iter()
        .zip(label)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / prob.len() as f64)
}
