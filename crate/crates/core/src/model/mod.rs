//! Code encoder, projector and decoder joined through a code slot in the
//! chat template.

pub(crate) mod checkpoint;
mod config;
mod decoder;
mod encoder;
mod layers;
mod lora;
mod projector;
mod sequence;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, tokenizer_path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{CodeInput, ModelConfig};
pub use decoder::Decoder;
pub use encoder::{CodeEncoder, EncodedCode, EncoderOutput};
pub use layers::{Block, LayerNorm, Linear};
pub use lora::{lora_scaling, LoraAdapter, LoraConfig};
pub use projector::Projector;
pub use sequence::{render_conversation, render_prompt, tokenize_code, Column, MultimodalSequence, RenderOptions};

use crate::error::ModelError;
use crate::numerics::{Gradients, Graph, ParamStore, Scalar, Tensor, Var};
use crate::tokenizer::TokenizerModel;

/// Training stage, which decides the freeze assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sampling {
    Greedy,
    TopK { k: usize, temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { max_new_tokens: 64, sampling: Sampling::Greedy, seed: 0 }
    }
}

/// Graph handles for a packed batch after the decoder stack.
struct BatchHidden {
    hidden: Var,
    seq: usize,
    lens: Vec<usize>,
}

/// Code rows for a batch: one `[rows, dec_dim]` node and the first row of
/// each sample inside it.
struct CodeRows {
    rows: Var,
    base: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct LlavulModel<T: Scalar = f32> {
    pub config: ModelConfig,
    pub tokenizer: TokenizerModel,
    pub params: ParamStore<T>,
    pub encoder: CodeEncoder,
    pub projector: Projector,
    pub decoder: Decoder,
    lora: BTreeMap<String, LoraAdapter>,
    stages: Vec<Stage>,
}

impl<T: Scalar> LlavulModel<T> {
    pub fn new(config: ModelConfig, tokenizer: TokenizerModel) -> Result<Self, ModelError> {
        config.validate()?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(ModelError::Config(format!(
                "tokenizer has {} tokens, config expects {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let c = &config;
        let pad = tokenizer.specials().pad;
        let encoder = CodeEncoder::new(
            &mut params,
            &mut rng,
            c.vocab_size,
            c.enc_dim,
            c.enc_layers,
            c.enc_heads,
            c.enc_positions,
            c.mlp_ratio,
            c.init_std,
            pad,
        )?;
        let projector = Projector::new(&mut params, &mut rng, c.enc_dim, c.proj_hidden, c.dec_dim)?;
        let decoder = Decoder::new(
            &mut params,
            &mut rng,
            c.vocab_size,
            c.dec_dim,
            c.dec_layers,
            c.dec_heads,
            c.context,
            c.mlp_ratio,
            c.init_std,
            c.head_init_std,
        )?;
        Ok(LlavulModel { config, tokenizer, params, encoder, projector, decoder, lora: BTreeMap::new(), stages: Vec::new() })
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> LlavulModel<U> {
        LlavulModel {
            config: self.config.clone(),
            tokenizer: self.tokenizer.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            projector: self.projector.clone(),
            decoder: self.decoder.clone(),
            lora: self.lora.clone(),
            stages: self.stages.clone(),
        }
    }

    pub fn render_options(&self, max_code_tokens: usize) -> RenderOptions {
        RenderOptions { turn_limit: None, max_code_tokens, context: self.config.context }
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn record_stage(&mut self, stage: Stage) {
        self.stages.push(stage);
    }

    pub fn adapters(&self) -> &BTreeMap<String, LoraAdapter> {
        &self.lora
    }

    /// Decoder token embedding table `[vocab, dec_dim]`.
    pub fn token_embeddings(&self) -> &Tensor<T> {
        self.params.tensor(self.decoder.tok_emb)
    }

    // ---- shape-oriented views ----

    /// Encoder features of one snippet, `[enc_dim, T₁]`.
    pub fn encode_code(&self, code: &str, max_code_tokens: usize) -> Result<Tensor<T>, ModelError> {
        let ids = tokenize_code(&self.tokenizer, code, max_code_tokens)?;
        let mut g = Graph::new();
        let enc = self.encoder.forward(&mut g, &self.params, &[&ids], self.feature_output()?)?;
        let t = g.transpose(enc.rows)?;
        Ok(g.tensor(t))
    }

    /// Projects `[enc_dim, T₁]` features to `[dec_dim, T₁]`.
    pub fn project(&self, features: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let x = g.input(features.clone(), false);
        let rows = g.transpose(x)?;
        let y = self.projector.forward(&mut g, &self.params, rows)?;
        let t = g.transpose(y)?;
        Ok(g.tensor(t))
    }

    /// Logits over the expanded sequence, `[vocab, T₁ + T₂]`.
    pub fn logits(&self, seq: &MultimodalSequence) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let out = self.hidden_batch(&mut g, &self.params, &[seq], None)?;
        let logits = self.decoder.logits(&mut g, &self.params, out.hidden)?;
        let t = g.transpose(logits)?;
        Ok(g.tensor(t))
    }

    /// Mean masked next-token cross-entropy of one sample.
    pub fn forward_loss(&self, seq: &MultimodalSequence) -> Result<T, ModelError> {
        self.batch_loss(&[seq])
    }

    /// Token-level mean loss over a batch, without gradients.
    pub fn batch_loss(&self, batch: &[&MultimodalSequence]) -> Result<T, ModelError> {
        let mut g = Graph::new();
        let loss = self.loss_var(&mut g, &self.params, batch)?;
        Ok(g.scalar(loss))
    }

    /// Builds the loss for `batch` inside an existing graph.
    pub fn loss_var<'a>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        batch: &[&MultimodalSequence],
    ) -> Result<Var, ModelError> {
        let out = self.hidden_batch(g, store, batch, None)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, seq) in batch.iter().enumerate() {
            for (p, t) in seq.targets().into_iter().enumerate() {
                if let Some(t) = t {
                    rows.push(Some(b * out.seq + p));
                    targets.push(t as usize);
                }
            }
        }
        if rows.is_empty() {
            return Err(ModelError::Numerics(crate::error::NumericsError::DegenerateBatch));
        }
        let picked = g.gather_rows(out.hidden, rows)?;
        let logits = self.decoder.logits(g, store, picked)?;
        let mask = vec![true; targets.len()];
        Ok(g.cross_entropy(logits, &targets, &mask)?)
    }

    /// Loss and parameter gradients for a batch; gradients are not applied.
    pub fn loss_and_gradients(&self, batch: &[&MultimodalSequence]) -> Result<(T, Gradients<T>), ModelError> {
        let mut g = Graph::new();
        let loss = self.loss_var(&mut g, &self.params, batch)?;
        let grads = g.backward(loss)?;
        Ok((g.scalar(loss), grads))
    }

    /// Adds this batch's gradients into the stored parameter gradients.
    pub fn accumulate_gradients(&mut self, batch: &[&MultimodalSequence]) -> Result<T, ModelError> {
        let (loss, grads) = self.loss_and_gradients(batch)?;
        grads.accumulate_into(&mut self.params);
        Ok(loss)
    }

    fn feature_output(&self) -> Result<EncoderOutput, ModelError> {
        Ok(EncoderOutput::Block(self.config.feature_block()?))
    }

    fn code_rows<'a>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        codes: &[&[u32]],
    ) -> Result<CodeRows, ModelError> {
        match self.config.code_input {
            CodeInput::Projected => {
                let enc = self.encoder.forward(g, store, codes, self.feature_output()?)?;
                let rows = self.projector.forward(g, store, enc.rows)?;
                Ok(CodeRows { rows, base: (0..codes.len()).map(|b| b * enc.seq).collect() })
            }
            CodeInput::InlineText => {
                let mut ids = Vec::new();
                let mut base = Vec::with_capacity(codes.len());
                for c in codes {
                    if c.is_empty() {
                        return Err(ModelError::Input("empty code sequence".into()));
                    }
                    base.push(ids.len());
                    ids.extend(c.iter().map(|&t| t as usize));
                }
                let table = g.param(store, self.decoder.tok_emb);
                Ok(CodeRows { rows: g.embedding(table, &ids)?, base })
            }
        }
    }

    /// Splices code rows into the text embeddings and runs the decoder.
    /// `given` supplies precomputed code rows (one block per sample).
    fn hidden_batch<'a>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        batch: &[&MultimodalSequence],
        given: Option<(&Tensor<T>, &[usize])>,
    ) -> Result<BatchHidden, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let lens: Vec<usize> = batch.iter().map(|s| s.expanded_len()).collect();
        let seq = *lens.iter().max().expect("non-empty");
        if seq > self.config.context {
            return Err(ModelError::ContextOverflow { needed: seq, limit: self.config.context });
        }
        let code = match given {
            Some((t, base)) => CodeRows { rows: g.input(t.clone(), false), base: base.to_vec() },
            None => {
                let codes: Vec<&[u32]> = batch.iter().map(|s| s.code_ids.as_slice()).collect();
                self.code_rows(g, store, &codes)?
            }
        };
        let code_total = g.shape(code.rows)[0];
        let mut text_ids = Vec::new();
        let mut index = Vec::with_capacity(batch.len() * seq);
        for (b, s) in batch.iter().enumerate() {
            let text_base = code_total + text_ids.len();
            let mut text_pos = 0;
            for (i, &id) in s.ids.iter().enumerate() {
                if i == s.slot {
                    index.extend((0..s.code_len()).map(|j| Some(code.base[b] + j)));
                } else {
                    index.push(Some(text_base + text_pos));
                    text_ids.push(id as usize);
                    text_pos += 1;
                }
            }
            index.extend(std::iter::repeat_n(None, seq - lens[b]));
        }
        let table = g.param(store, self.decoder.tok_emb);
        let text = g.embedding(table, &text_ids)?;
        let all = g.concat_rows(&[code.rows, text])?;
        let x = g.gather_rows(all, index)?;
        let pos_table = g.param(store, self.decoder.pos_emb);
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq).collect();
        let pos = g.embedding(pos_table, &positions)?;
        let x = g.add(x, pos)?;
        let hidden = self.decoder.hidden(g, store, x, seq, &lens, &self.lora)?;
        Ok(BatchHidden { hidden, seq, lens })
    }

    // ---- generation ----

    /// Answers one question about one snippet.
    pub fn generate(&self, code: &str, question: &str, max_code_tokens: usize, cfg: &DecodeConfig) -> Result<String, ModelError> {
        let prompt = render_prompt(&self.tokenizer, code, question, max_code_tokens)?;
        Ok(self.generate_batch(&[prompt], cfg)?.pop().expect("one output"))
    }

    /// Decodes continuations for several prompts at once. Sampling draws
    /// from one seeded stream, so results depend on the batch composition.
    pub fn generate_batch(&self, prompts: &[MultimodalSequence], cfg: &DecodeConfig) -> Result<Vec<String>, ModelError> {
        if prompts.is_empty() {
            return Ok(Vec::new());
        }
        for p in prompts {
            if p.expanded_len() > self.config.context {
                return Err(ModelError::ContextOverflow { needed: p.expanded_len(), limit: self.config.context });
            }
        }
        let sp = self.tokenizer.specials();
        let mut outputs: Vec<Vec<u32>> = vec![Vec::new(); prompts.len()];
        if cfg.max_new_tokens == 0 {
            return Ok(vec![String::new(); prompts.len()]);
        }
        let (code_tensor, base) = {
            let mut g = Graph::new();
            let codes: Vec<&[u32]> = prompts.iter().map(|s| s.code_ids.as_slice()).collect();
            let rows = self.code_rows(&mut g, &self.params, &codes)?;
            (g.tensor(rows.rows), rows.base)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut seqs: Vec<MultimodalSequence> = prompts.to_vec();
        let mut active: Vec<bool> = vec![true; prompts.len()];
        for _ in 0..cfg.max_new_tokens {
            let live: Vec<usize> = (0..seqs.len()).filter(|&i| active[i]).collect();
            if live.is_empty() {
                break;
            }
            let batch: Vec<&MultimodalSequence> = live.iter().map(|&i| &seqs[i]).collect();
            let bases: Vec<usize> = live.iter().map(|&i| base[i]).collect();
            let mut g = Graph::new();
            let out = self.hidden_batch(&mut g, &self.params, &batch, Some((&code_tensor, &bases)))?;
            let last: Vec<Option<usize>> = (0..live.len()).map(|b| Some(b * out.seq + out.lens[b] - 1)).collect();
            let picked = g.gather_rows(out.hidden, last)?;
            let logits = self.decoder.logits(&mut g, &self.params, picked)?;
            let vocab = self.config.vocab_size;
            let values = g.value(logits);
            for (b, &i) in live.iter().enumerate() {
                let row = &values[b * vocab..(b + 1) * vocab];
                let next = pick_token(row, cfg.sampling, &mut rng);
                if next == sp.eos {
                    active[i] = false;
                    continue;
                }
                outputs[i].push(next);
                seqs[i].ids.push(next);
                seqs[i].loss_mask.push(false);
                if seqs[i].expanded_len() >= self.config.context {
                    active[i] = false;
                }
            }
        }
        outputs
            .iter()
            .map(|ids| {
                let plain: Vec<u32> = ids.iter().copied().filter(|&t| !self.tokenizer.is_special(t)).collect();
                Ok(self.tokenizer.decode(&plain)?)
            })
            .collect()
    }

    // ---- LoRA ----

    /// Attention projections of every decoder block.
    pub fn default_lora_targets(&self) -> Vec<String> {
        self.decoder
            .blocks
            .iter()
            .flat_map(|b| b.attention_linears().into_iter().map(|l| l.name.clone()))
            .collect()
    }

    fn find_linear(&self, name: &str) -> Option<&Linear> {
        let enc = self.encoder.blocks.iter();
        let dec = self.decoder.blocks.iter();
        enc.chain(dec)
            .flat_map(|b| [&b.wq, &b.wk, &b.wv, &b.wo, &b.fc1, &b.fc2])
            .chain([&self.projector.fc1, &self.projector.fc2])
            .find(|l| l.name == name)
    }

    /// Attaches zero-initialised adapters; the forward pass is unchanged.
    pub fn lora_attach(&mut self, targets: &[String], cfg: LoraConfig) -> Result<(), ModelError> {
        if cfg.rank == 0 || cfg.alpha.is_nan() || cfg.alpha <= 0.0 {
            return Err(ModelError::Config("LoRA rank and alpha must be positive".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in targets {
            if self.lora.contains_key(t) || !seen.insert(t) {
                return Err(ModelError::Config(format!("duplicate LoRA adapter on {t}")));
            }
            if self.find_linear(t).is_none() {
                return Err(ModelError::Config(format!("no linear layer named {t}")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x10_4a_a0);
        for t in targets {
            let lin = self.find_linear(t).expect("checked").clone();
            let bound = 1.0 / (lin.in_dim as f64).sqrt();
            let a = layers::uniform_tensor(&mut rng, vec![cfg.rank, lin.in_dim], bound);
            let a = self.params.add(format!("{t}.lora_a"), a, true)?;
            let b = self.params.add(format!("{t}.lora_b"), Tensor::zeros(vec![lin.out_dim, cfg.rank]), true)?;
            self.lora.insert(t.clone(), LoraAdapter { target: t.clone(), rank: cfg.rank, alpha: cfg.alpha, a, b });
        }
        Ok(())
    }

    /// Folds every adapter into its base weight and removes the adapters.
    pub fn lora_merge(&mut self) -> Result<(), ModelError> {
        let adapters = std::mem::take(&mut self.lora);
        for (target, ad) in adapters {
            let weight = self.find_linear(&target).expect("adapter target exists").weight;
            let a = self.params.tensor(ad.a).clone();
            let b = self.params.tensor(ad.b).clone();
            let delta = crate::numerics::matmul(&b, &a)?;
            let s = ad.scaling();
            let w = &mut self.params.get_mut(weight).tensor;
            if w.shape() != delta.shape() {
                return Err(ModelError::Internal(format!("adapter shape mismatch on {target}")));
            }
            for (x, d) in w.data_mut().iter_mut().zip(delta.data()) {
                *x = T::of(x.as_f64() + s * d.as_f64());
            }
            self.params.remove(ad.a);
            self.params.remove(ad.b);
        }
        Ok(())
    }

    pub(crate) fn set_stages(&mut self, stages: Vec<Stage>) {
        self.stages = stages;
    }

    // ---- freezing ----

    /// Applies the stage's freeze assignment and returns the trainable names.
    ///
    /// Pretraining trains only the projector. Fine-tuning trains the
    /// projector and the LoRA matrices; in inline-text mode the projector is
    /// unused and stays frozen.
    pub fn set_stage_freeze(&mut self, stage: Stage) -> Vec<String> {
        let projected = self.config.code_input == CodeInput::Projected;
        self.params.set_trainable_where(|name| {
            let proj = name.starts_with("projector.");
            let lora = name.ends_with(".lora_a") || name.ends_with(".lora_b");
            match stage {
                Stage::Pretrain => proj,
                Stage::Finetune => lora || (proj && projected),
            }
        });
        self.params.trainable_names()
    }
}

fn pick_token(row: &[impl Scalar], sampling: Sampling, rng: &mut ChaCha8Rng) -> u32 {
    let argmax = || {
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if v.as_f64() > row[best].as_f64() {
                best = i;
            }
        }
        best as u32
    };
    match sampling {
        Sampling::Greedy => argmax(),
        Sampling::TopK { k, temperature } => {
            if k <= 1 || temperature <= 0.0 {
                return argmax();
            }
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].as_f64().total_cmp(&row[a].as_f64()).then(a.cmp(&b)));
            idx.truncate(k.min(row.len()));
            let max = row[idx[0]].as_f64();
            let weights: Vec<f64> = idx.iter().map(|&i| ((row[i].as_f64() - max) / temperature).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (w, &i) in weights.iter().zip(&idx) {
                if u < *w {
                    return i as u32;
                }
                u -= w;
            }
            *idx.last().expect("k >= 1") as u32
        }
    }
}
