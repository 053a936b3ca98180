use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::ModelError;
use crate::model::layers::{normal_tensor, Block, LayerNorm};
use crate::model::lora::LoraAdapter;
use crate::numerics::{Graph, ParamId, ParamStore, Scalar, Var};

/// Causal transformer with learned positions and an untied LM head.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: ParamId,
    pub dim: usize,
    pub context: usize,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        vocab: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        context: usize,
        mlp_ratio: usize,
        std: f64,
        head_std: f64,
    ) -> Result<Self, ModelError> {
        let tok_emb = store.add("decoder.tok_emb", normal_tensor(rng, vec![vocab, dim], std), true)?;
        let pos_emb = store.add("decoder.pos_emb", normal_tensor(rng, vec![context, dim], std), true)?;
        let residual_std = std / (2.0 * layers as f64).sqrt();
        let blocks = (0..layers)
            .map(|i| Block::new(store, rng, &format!("decoder.block{i}"), dim, heads, mlp_ratio, std, residual_std))
            .collect::<Result<Vec<_>, _>>()?;
        let ln_f = LayerNorm::new(store, "decoder.ln_f", dim)?;
        let head = store.add("decoder.lm_head.weight", normal_tensor(rng, vec![vocab, dim], head_std), true)?;
        Ok(Decoder { tok_emb, pos_emb, blocks, ln_f, head, dim, context })
    }

    /// Runs the blocks over packed `[batch * seq, dim]` input rows (token
    /// plus position embeddings already summed) and applies the final norm.
    pub(crate) fn hidden<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        mut x: Var,
        seq: usize,
        lens: &[usize],
        lora: &BTreeMap<String, LoraAdapter>,
    ) -> Result<Var, ModelError> {
        for block in &self.blocks {
            x = block.forward(g, store, x, seq, lens, true, lora)?;
        }
        self.ln_f.forward(g, store, x)
    }

    pub(crate) fn logits<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        hidden: Var,
    ) -> Result<Var, ModelError> {
        let w = g.param(store, self.head);
        Ok(g.matmul_ex(hidden, w, true)?)
    }
}
