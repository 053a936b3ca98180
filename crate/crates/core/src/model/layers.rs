use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::ModelError;
use crate::model::lora::LoraAdapter;
use crate::numerics::{AttentionLayout, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub(crate) fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

pub(crate) fn uniform_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
}

/// Affine map `y = x·Wᵀ + b` with `W` stored as `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
    ) -> Result<Self, ModelError> {
        let weight = store.add(format!("{name}.weight"), normal_tensor(rng, vec![out_dim, in_dim], std), true)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]), true)?;
        Ok(Linear { name: name.to_string(), weight, bias, in_dim, out_dim })
    }

    pub(crate) fn forward<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        x: Var,
        lora: &BTreeMap<String, LoraAdapter>,
    ) -> Result<Var, ModelError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul_ex(x, w, true)?;
        let mut y = g.add_bias(y, b)?;
        if let Some(adapter) = lora.get(&self.name) {
            let a = g.param(store, adapter.a);
            let bb = g.param(store, adapter.b);
            let down = g.matmul_ex(x, a, true)?;
            let up = g.matmul_ex(down, bb, true)?;
            let up = g.scale(up, adapter.scaling());
            y = g.add(y, up)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub(crate) fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self, ModelError> {
        let gain = store.add(format!("{name}.gain"), Tensor::from_fn(vec![dim], |_| T::one()), true)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![dim]), true)?;
        Ok(LayerNorm { gain, bias })
    }

    pub(crate) fn forward<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        x: Var,
    ) -> Result<Var, ModelError> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        Ok(g.layer_norm(x, gain, bias)?)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        std: f64,
        residual_std: f64,
    ) -> Result<Self, ModelError> {
        let hidden = dim * mlp_ratio;
        Ok(Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            wq: Linear::new(store, rng, &format!("{name}.attn.wq"), dim, dim, std)?,
            wk: Linear::new(store, rng, &format!("{name}.attn.wk"), dim, dim, std)?,
            wv: Linear::new(store, rng, &format!("{name}.attn.wv"), dim, dim, std)?,
            wo: Linear::new(store, rng, &format!("{name}.attn.wo"), dim, dim, residual_std)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), dim, hidden, std)?,
            fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), hidden, dim, residual_std)?,
            heads,
        })
    }

    pub fn attention_linears(&self) -> [&Linear; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        x: Var,
        seq: usize,
        lens: &[usize],
        causal: bool,
        lora: &BTreeMap<String, LoraAdapter>,
    ) -> Result<Var, ModelError> {
        let h = self.ln1.forward(g, store, x)?;
        let q = self.wq.forward(g, store, h, lora)?;
        let k = self.wk.forward(g, store, h, lora)?;
        let v = self.wv.forward(g, store, h, lora)?;
        let layout = AttentionLayout { heads: self.heads, seq, lens: lens.to_vec(), causal };
        let a = g.attention(q, k, v, layout)?;
        let o = self.wo.forward(g, store, a, lora)?;
        let x = g.add(x, o)?;
        let h = self.ln2.forward(g, store, x)?;
        let m = self.fc1.forward(g, store, h, lora)?;
        let m = g.gelu(m);
        let m = self.fc2.forward(g, store, m, lora)?;
        Ok(g.add(x, m)?)
    }
}
