//! Small layer library on top of `candle_core` tensors.
//!
//! All parameters are `f64` [`Var`]s registered in a [`ParamStore`] under
//! dotted hierarchical names (`hic.layers.0.blocks.1.attn.q.weight`). Layers
//! hold clones of their `Var`s, which share storage with the store, so an
//! optimizer or checkpoint loader updating the store updates the layers.

use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<Var> {
        let name = name.into();
        if self.vars.contains_key(&name) {
            return Err(Error::validation(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&tensor)?;
        self.vars.insert(name, var.clone());
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Copies every tensor of `other` whose name also exists here.
    /// Returns the number of tensors copied.
    pub fn load_matching(&self, other: &BTreeMap<String, Tensor>) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in other {
            if let Some(var) = self.vars.get(name) {
                if var.dims() != t.dims() {
                    return Err(Error::validation(format!(
                        "parameter {name}: shape {:?} does not match checkpoint {:?}",
                        var.dims(),
                        t.dims()
                    )));
                }
                var.set(t)?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Detached copies of all parameter values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            if !v.as_tensor().sum_all()?.to_scalar::<f64>()?.is_finite() {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Registers freshly initialised parameters under a name prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: impl std::fmt::Display) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn register(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &device())?;
        let full = self.full_name(name);
        self.store.insert(full, t)
    }

    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Var> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.register(name, values, shape)
    }

    /// He-uniform on `[-sqrt(6/fan_in), sqrt(6/fan_in)]`, variance preserving
    /// ahead of rectifying activations.
    pub fn he_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Var> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.register(name, values, shape)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::validation(e.to_string()))?;
        let n = shape.iter().product();
        let values = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.register(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        self.register(name, vec![value; n], shape)
    }
}

/// Forward-pass context: training flag and the dropout random stream.
pub struct Ctx {
    pub train: bool,
    pub dropout: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            train: false,
            dropout: 0.0,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            train: true,
            dropout,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn dropout(&self, x: &Tensor) -> Result<Tensor> {
        if !self.train || self.dropout <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.dropout;
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.dims(), x.device())?;
        Ok(x.mul(&mask)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// Stored as `(in, out)`.
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(init: &mut Init, input: usize, output: usize, bias: bool) -> Result<Self> {
        let weight = init.uniform("weight", &[input, output], input)?;
        let bias = if bias {
            Some(init.constant("bias", &[output], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // Flatten leading dims so the weight gradient is one matmul.
        let dims = x.dims();
        let input = dims[dims.len() - 1];
        let rows = x.elem_count() / input.max(1);
        let y = x.reshape((rows, input))?.matmul(self.weight.as_tensor())?;
        let mut out_dims = dims.to_vec();
        *out_dims.last_mut().expect("linear input has a feature dim") = self.output_dim();
        let y = y.reshape(out_dims)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.dims()[1]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant("gamma", &[dim], 1.0)?,
            beta: init.constant("beta", &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

/// Softmax over the last axis with the row maximum subtracted first.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// `log Σ exp(x)` over the last axis, max-shifted.
pub fn logsumexp_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(s.broadcast_add(&max)?.squeeze(D::Minus1)?)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::validation(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(&mut init.sub("q"), dim, dim, true)?,
            key: Linear::new(&mut init.sub("k"), dim, dim, true)?,
            value: Linear::new(&mut init.sub("v"), dim, dim, true)?,
            output: Linear::new(&mut init.sub("o"), dim, dim, true)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, s, d) = x.dims3()?;
        Ok(x.reshape((b, s, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Queries from `x`, keys and values from `context`.
    pub fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, s, d) = x.dims3()?;
        let q = self.split_heads(&self.query.forward(x)?)?;
        let k = self.split_heads(&self.key.forward(context)?)?;
        let v = self.split_heads(&self.value.forward(context)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, s, d))?;
        self.output.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, dim: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut init.sub("fc1"), dim, hidden, true)?,
            fc2: Linear::new(&mut init.sub("fc2"), hidden, out, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Pre-norm transformer block with a 4x feed-forward expansion.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
}

impl TransformerBlock {
    pub fn new(init: &mut Init, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut init.sub("norm1"), dim)?,
            attn: MultiHeadAttention::new(&mut init.sub("attn"), dim, heads)?,
            norm2: LayerNorm::new(&mut init.sub("norm2"), dim)?,
            ff: FeedForward::new(&mut init.sub("ff"), dim, 4 * dim, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + ctx.dropout(&self.attn.forward(&h, &h)?)?)?;
        let h = self.norm2.forward(&x)?;
        Ok((&x + ctx.dropout(&self.ff.forward(&h)?)?)?)
    }
}

pub fn blocks(init: &mut Init, count: usize, dim: usize, heads: usize) -> Result<Vec<TransformerBlock>> {
    (0..count)
        .map(|i| TransformerBlock::new(&mut init.sub(format!("blocks.{i}")), dim, heads))
        .collect()
}

pub fn run_blocks(blocks: &[TransformerBlock], x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
    let mut x = x.clone();
    for b in blocks {
        x = b.forward(&x, ctx)?;
    }
    Ok(x)
}

/// Fails with a numeric error naming `stage` when `x` holds NaN or infinity.
pub fn check_finite(x: &Tensor, stage: &str) -> Result<()> {
    let s = x.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            stage: stage.to_string(),
        })
    }
}

pub fn to_vec1(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.flatten_all()?.to_vec1::<f64>()?)
}

pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &device()).unwrap()
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[1.0, 2.0, 3.0, 1000.0, 1000.0, 1000.0], &[2, 3]);
        let s = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in &s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((s[1][0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_matches_direct() {
        let x = t(&[0.1, -0.3, 2.0], &[1, 3]);
        let got = logsumexp_last(&x).unwrap().to_vec1::<f64>().unwrap()[0];
        let want = (0.1f64.exp() + (-0.3f64).exp() + 2.0f64.exp()).ln();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn layer_norm_normalises() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ln = LayerNorm::new(&mut Init::new(&mut store, &mut rng).sub("ln"), 4).unwrap();
        let y = ln.forward(&t(&[1.0, 2.0, 3.0, 4.0], &[1, 4])).unwrap();
        let y = y.to_vec2::<f64>().unwrap().remove(0);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
        assert!(store.get("ln.gamma").is_some());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut store, &mut rng);
        init.constant("x", &[1], 0.0).unwrap();
        assert!(init.constant("x", &[1], 0.0).is_err());
    }
}
