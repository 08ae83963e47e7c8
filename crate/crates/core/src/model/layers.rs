use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::Linear;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::util::{fnv1a, mix_seed};

pub(crate) type Result<T> = candle_core::Result<T>;

/// Named trainable parameters. Each tensor is drawn from its own stream keyed
/// by `(seed, path)`, so initialization does not depend on construction order.
pub(crate) struct ParamStore {
    seed: u64,
    device: Device,
    pub(crate) vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(seed: u64, device: Device) -> Self {
        ParamStore {
            seed,
            device,
            vars: BTreeMap::new(),
        }
    }

    fn register(&mut self, path: &str, values: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        assert!(!self.vars.contains_key(path), "duplicate parameter {path}");
        let var = Var::from_tensor(&Tensor::from_vec(values, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(path.to_string(), var);
        Ok(t)
    }

    fn rng(&self, path: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(self.seed, fnv1a(path)))
    }

    pub fn uniform(&mut self, path: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let mut rng = self.rng(path);
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n = shape.iter().product();
        let values = (0..n).map(|_| dist.sample(&mut rng) as f32).collect();
        self.register(path, values, shape)
    }

    pub fn normal(&mut self, path: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let mut rng = self.rng(path);
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let values = (0..n).map(|_| dist.sample(&mut rng) as f32).collect();
        self.register(path, values, shape)
    }

    pub fn constant(&mut self, path: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let n = shape.iter().product();
        self.register(path, vec![value; n], shape)
    }

    /// Affine layer with fan-in uniform initialization of weight and bias.
    pub fn linear(&mut self, path: &str, input: usize, output: usize, bias: bool) -> Result<Linear> {
        let bound = 1.0 / (input as f64).sqrt();
        let w = self.uniform(&format!("{path}.weight"), &[output, input], bound)?;
        let b = if bias {
            Some(self.uniform(&format!("{path}.bias"), &[output], bound)?)
        } else {
            None
        };
        Ok(Linear::new(w, b))
    }

    pub fn layer_norm(&mut self, path: &str, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            weight: self.constant(&format!("{path}.weight"), &[dim], 1.0)?,
            bias: self.constant(&format!("{path}.bias"), &[dim], 0.0)?,
        })
    }
}

/// Layer normalization over the last axis, composed from differentiable primitives.
#[derive(Clone)]
pub(crate) struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

const LN_EPS: f64 = 1e-5;

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + LN_EPS)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

#[derive(Clone)]
pub(crate) struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, path: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: store.linear(&format!("{path}.fc1"), dim, hidden, true)?,
            fc2: store.linear(&format!("{path}.fc2"), hidden, dim, true)?,
        })
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Multi-head self-attention over `[batch, tokens, dim]`.
#[derive(Clone)]
pub(crate) struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    scale: f64,
}

impl Attention {
    pub fn new(store: &mut ParamStore, path: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Attention {
            qkv: store.linear(&format!("{path}.qkv"), dim, 3 * dim, true)?,
            proj: store.linear(&format!("{path}.proj"), dim, dim, true)?,
            heads,
            scale: 1.0 / ((dim / heads) as f64).sqrt(),
        })
    }

    /// `bias` is added to every score matrix (`[heads, n, n]`). `mask` is
    /// `[windows, n, n]`; the batch axis is then read as `images × windows`.
    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let dh = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut scores = (q.matmul(&k.t()?)? * self.scale)?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(&bias.unsqueeze(0)?)?;
        }
        if let Some(mask) = mask {
            let windows = mask.dim(0)?;
            scores = scores
                .reshape((b / windows, windows, self.heads, n, n))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((b, self.heads, n, n))?;
        }
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?;
        self.proj.forward(&out)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone)]
pub(crate) struct Block {
    norm1: LayerNorm,
    pub attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn new(store: &mut ParamStore, path: &str, dim: usize, heads: usize, mlp_ratio: f64) -> Result<Self> {
        let hidden = ((dim as f64) * mlp_ratio).round().max(1.0) as usize;
        Ok(Block {
            norm1: store.layer_norm(&format!("{path}.norm1"), dim)?,
            attn: Attention::new(store, &format!("{path}.attn"), dim, heads)?,
            norm2: store.layer_norm(&format!("{path}.norm2"), dim)?,
            mlp: Mlp::new(store, &format!("{path}.mlp"), dim, hidden)?,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>, mask: Option<&Tensor>) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, bias, mask)?)?;
        &x + self.mlp.forward(&self.norm2.forward(&x)?)?
    }

    /// Runs the attention branch on tokens gathered by `order`, scatters the
    /// result back with `inverse`, then applies the MLP branch in place.
    pub fn forward_windowed(
        &self,
        x: &Tensor,
        order: &Tensor,
        inverse: &Tensor,
        window_tokens: usize,
        bias: Option<&Tensor>,
        mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let windows = self
            .norm1
            .forward(x)?
            .index_select(order, 1)?
            .reshape((b * n / window_tokens, window_tokens, c))?;
        let attended = self
            .attn
            .forward(&windows, bias, mask)?
            .reshape((b, n, c))?
            .index_select(inverse, 1)?;
        let x = (x + attended)?;
        &x + self.mlp.forward(&self.norm2.forward(&x)?)?
    }
}

pub(crate) fn u32_index(values: &[usize], device: &Device) -> Result<Tensor> {
    let v: Vec<u32> = values.iter().map(|&i| i as u32).collect();
    Tensor::from_vec(v, values.len(), device)
}

pub(crate) fn f32_tensor(values: &[f64], shape: &[usize], device: &Device) -> Result<Tensor> {
    let v: Vec<f32> = values.iter().map(|&x| x as f32).collect();
    Tensor::from_vec(v, shape, device)?.to_dtype(DType::F32)
}
