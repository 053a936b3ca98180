use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::ModelError;
use crate::model::layers::{normal_tensor, Block, LayerNorm};
use crate::numerics::{Graph, ParamId, ParamStore, Scalar, Var};

/// Bidirectional transformer over code tokens.
#[derive(Debug, Clone)]
pub struct CodeEncoder {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub dim: usize,
    pub positions: usize,
    pub pad_id: u32,
}

/// Which hidden states the encoder returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderOutput {
    /// Output of block `n` (0-based), without the final norm.
    Block(usize),
    /// Output of the last block after the final norm.
    Final,
}

/// Padded encoder result: `rows` is `[batch * seq, dim]`.
pub struct EncodedCode {
    pub rows: Var,
    pub seq: usize,
    pub lens: Vec<usize>,
}

impl CodeEncoder {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        vocab: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        positions: usize,
        mlp_ratio: usize,
        std: f64,
        pad_id: u32,
    ) -> Result<Self, ModelError> {
        let tok_emb = store.add("encoder.tok_emb", normal_tensor(rng, vec![vocab, dim], std), true)?;
        let pos_emb = store.add("encoder.pos_emb", normal_tensor(rng, vec![positions, dim], std), true)?;
        let residual_std = std / (2.0 * layers as f64).sqrt();
        let blocks = (0..layers)
            .map(|i| Block::new(store, rng, &format!("encoder.block{i}"), dim, heads, mlp_ratio, std, residual_std))
            .collect::<Result<Vec<_>, _>>()?;
        let ln_f = LayerNorm::new(store, "encoder.ln_f", dim)?;
        Ok(CodeEncoder { tok_emb, pos_emb, blocks, ln_f, dim, positions, pad_id })
    }

    pub fn forward<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        codes: &[&[u32]],
        output: EncoderOutput,
    ) -> Result<EncodedCode, ModelError> {
        if codes.is_empty() || codes.iter().any(|c| c.is_empty()) {
            return Err(ModelError::Input("empty code sequence".into()));
        }
        let lens: Vec<usize> = codes.iter().map(|c| c.len()).collect();
        let seq = *lens.iter().max().expect("non-empty");
        if seq > self.positions {
            return Err(ModelError::Input(format!(
                "{seq} code tokens exceed the encoder's {} positions",
                self.positions
            )));
        }
        let mut ids = Vec::with_capacity(codes.len() * seq);
        let mut pos = Vec::with_capacity(codes.len() * seq);
        for c in codes {
            ids.extend(c.iter().map(|&t| t as usize));
            ids.extend(std::iter::repeat_n(self.pad_id as usize, seq - c.len()));
            pos.extend(0..seq);
        }
        let tok = g.param(store, self.tok_emb);
        let posv = g.param(store, self.pos_emb);
        let te = g.embedding(tok, &ids)?;
        let pe = g.embedding(posv, &pos)?;
        let mut x = g.add(te, pe)?;
        let stop = match output {
            EncoderOutput::Block(n) => {
                if n >= self.blocks.len() {
                    return Err(ModelError::Config(format!("encoder has no block {n}")));
                }
                n
            }
            EncoderOutput::Final => self.blocks.len() - 1,
        };
        let no_lora = BTreeMap::new();
        for block in &self.blocks[..=stop] {
            x = block.forward(g, store, x, seq, &lens, false, &no_lora)?;
        }
        if output == EncoderOutput::Final {
            x = self.ln_f.forward(g, store, x)?;
        }
        Ok(EncodedCode { rows: x, seq, lens })
    }
}
