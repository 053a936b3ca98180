//! Encoder-only binary classification: mean-pooled final encoder states and a
//! two-way linear head.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledCode;
use crate::error::{ClassifierError, ModelError};
use crate::metrics::{classification_metrics, ClassificationReport};
use crate::model::checkpoint::{load_tokenizer_beside, read_container, tokenizer_path, write_container, RawContainer};
use crate::model::{tokenize_code, CodeEncoder, EncoderOutput, LlavulModel, Linear, ModelConfig};
use crate::numerics::{AdamWConfig, AdamWState, Graph, ParamStore, Scalar, Var};
use crate::tokenizer::TokenizerModel;
use crate::trainer::build_batches;

/// Positive-class probability at or above this is labelled vulnerable.
pub const THRESHOLD: f64 = 0.5;

/// Downsamples the majority class to the minority count and shuffles.
pub fn balance_corpus(samples: &[LabeledCode], seed: u64) -> Result<Vec<LabeledCode>, ClassifierError> {
    if let Some(bad) = samples.iter().find(|s| s.label > 1) {
        return Err(ClassifierError::Corpus(format!("record {} has label {}", bad.id, bad.label)));
    }
    let (mut pos, mut neg): (Vec<&LabeledCode>, Vec<&LabeledCode>) = samples.iter().partition(|s| s.label == 1);
    if pos.is_empty() || neg.is_empty() {
        return Err(ClassifierError::Corpus(format!(
            "both classes are required ({} positive, {} negative)",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = pos.len().min(neg.len());
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut out: Vec<LabeledCode> = pos[..n].iter().chain(&neg[..n]).map(|s| (*s).clone()).collect();
    out.shuffle(&mut rng);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub max_code_tokens: usize,
    pub max_steps: Option<usize>,
    /// Stop after this much wall time; checked between steps.
    pub time_budget_secs: Option<f64>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            epochs: 3,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            max_code_tokens: 512,
            max_steps: None,
            time_budget_secs: None,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.epochs == 0 || self.batch_size == 0 || self.max_code_tokens == 0 {
            return Err(ClassifierError::Corpus("epochs, batch_size and max_code_tokens must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(ClassifierError::Corpus("lr must be positive and finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub losses: Vec<f64>,
    pub steps: usize,
    pub epochs_completed: usize,
    pub wall_time_secs: f64,
    pub train_size: usize,
    pub positives: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub label: u8,
    pub probability: f64,
}

impl Classification {
    fn from_logits(neg: f64, pos: f64) -> Self {
        let probability = 1.0 / (1.0 + (neg - pos).exp());
        Classification { label: u8::from(probability >= THRESHOLD), probability }
    }
}

/// One prediction line: `{id, label, probability}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: u8,
    pub probability: f64,
}

/// The code encoder plus a `[2, enc_dim]` head. Holds no decoder or
/// projector weights.
#[derive(Debug, Clone)]
pub struct VulnClassifier<T: Scalar = f32> {
    pub config: ModelConfig,
    pub tokenizer: TokenizerModel,
    pub params: ParamStore<T>,
    pub encoder: CodeEncoder,
    pub head: Linear,
    pub max_code_tokens: usize,
}

const CLASSIFIER_KIND: &str = "llavul-classifier";

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    kind: String,
    config: ModelConfig,
    max_code_tokens: usize,
    tokenizer: String,
}

impl<T: Scalar> VulnClassifier<T> {
    /// Fresh encoder and head, initialised from `config.seed`.
    pub fn new(config: ModelConfig, tokenizer: TokenizerModel) -> Result<Self, ClassifierError> {
        config.validate()?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(ModelError::Config(format!(
                "tokenizer has {} ids, config expects {}",
                tokenizer.vocab_size(),
                config.vocab_size
            ))
            .into());
        }
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = CodeEncoder::new(
            &mut params,
            &mut rng,
            config.vocab_size,
            config.enc_dim,
            config.enc_layers,
            config.enc_heads,
            config.enc_positions,
            config.mlp_ratio,
            config.init_std,
            tokenizer.specials().pad,
        )?;
        let mut head_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xc1a55);
        let head = Linear::new(&mut params, &mut head_rng, "classifier.head", config.enc_dim, 2, config.init_std)?;
        Ok(VulnClassifier { config, tokenizer, params, encoder, head, max_code_tokens: 512 })
    }

    /// Starts from the encoder weights of a (pre)trained model.
    pub fn from_model(model: &LlavulModel<T>) -> Result<Self, ClassifierError> {
        let mut clf = Self::new(model.config.clone(), model.tokenizer.clone())?;
        let names: Vec<String> = clf
            .params
            .iter()
            .map(|(_, p)| p.name.clone())
            .filter(|n| n.starts_with("encoder."))
            .collect();
        for name in names {
            let src = model
                .params
                .by_name(&name)
                .ok_or_else(|| ModelError::Internal(format!("model lacks {name}")))?;
            let id = clf.params.id(&name).expect("listed");
            clf.params.get_mut(id).tensor = src.tensor.clone();
        }
        Ok(clf)
    }

    fn logits_var<'a>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        codes: &[&[u32]],
    ) -> Result<Var, ClassifierError> {
        let enc = self.encoder.forward(g, store, codes, EncoderOutput::Final)?;
        let groups = enc.lens.iter().enumerate().map(|(b, &l)| (b * enc.seq, l)).collect();
        let pooled = g.mean_rows(enc.rows, groups)?;
        Ok(self.head.forward(g, store, pooled, &Default::default())?)
    }

    fn ids(&self, code: &str) -> Result<Vec<u32>, ClassifierError> {
        Ok(tokenize_code(&self.tokenizer, code, self.max_code_tokens)?)
    }

    pub fn classify(&self, code: &str) -> Result<Classification, ClassifierError> {
        Ok(self.classify_batch(&[code])?[0])
    }

    pub fn classify_batch(&self, codes: &[&str]) -> Result<Vec<Classification>, ClassifierError> {
        let ids = codes.iter().map(|c| self.ids(c)).collect::<Result<Vec<_>, _>>()?;
        let mut out = Vec::with_capacity(codes.len());
        for chunk in ids.chunks(32) {
            let refs: Vec<&[u32]> = chunk.iter().map(|v| v.as_slice()).collect();
            let mut g = Graph::new();
            let logits = self.logits_var(&mut g, &self.params, &refs)?;
            let v = g.value(logits);
            out.extend(v.chunks_exact(2).map(|r| Classification::from_logits(r[0].as_f64(), r[1].as_f64())));
        }
        Ok(out)
    }

    /// Mean cross-entropy of the two-way softmax over a batch; identical to
    /// binary cross-entropy on the positive-class probability.
    pub fn batch_loss(&self, codes: &[&[u32]], labels: &[u8]) -> Result<T, ClassifierError> {
        let mut g = Graph::new();
        let loss = self.loss_var(&mut g, &self.params, codes, labels)?;
        Ok(g.scalar(loss))
    }

    fn loss_var<'a>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        codes: &[&[u32]],
        labels: &[u8],
    ) -> Result<Var, ClassifierError> {
        let logits = self.logits_var(g, store, codes)?;
        let targets: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        Ok(g.cross_entropy(logits, &targets, &vec![true; targets.len()])?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        let meta = ClassifierMeta {
            kind: CLASSIFIER_KIND.into(),
            config: self.config.clone(),
            max_code_tokens: self.max_code_tokens,
            tokenizer: tokenizer_path(path).file_name().expect("has file name").to_string_lossy().into_owned(),
        };
        write_container(path, meta, &self.params, &self.tokenizer).map_err(ModelError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        let raw: RawContainer<ClassifierMeta> = read_container(path).map_err(ModelError::from)?;
        if raw.meta.kind != CLASSIFIER_KIND {
            return Err(ClassifierError::Corpus(format!(
                "expected a {CLASSIFIER_KIND} checkpoint, found {}",
                raw.meta.kind
            )));
        }
        let tokenizer = load_tokenizer_beside(path, &raw.meta.tokenizer)?;
        let mut clf = Self::new(raw.meta.config.clone(), tokenizer)?;
        clf.max_code_tokens = raw.meta.max_code_tokens;
        raw.fill(&mut clf.params).map_err(ModelError::from)?;
        Ok(clf)
    }
}

/// Jointly trains encoder and head on `corpus` (expected to be balanced).
pub fn train_classifier<T: Scalar>(
    clf: &mut VulnClassifier<T>,
    corpus: &[LabeledCode],
    cfg: &ClassifierConfig,
) -> Result<ClassifierReport, ClassifierError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(ClassifierError::Corpus("empty corpus".into()));
    }
    if let Some(bad) = corpus.iter().find(|s| s.label > 1) {
        return Err(ClassifierError::Corpus(format!("record {} has label {}", bad.id, bad.label)));
    }
    clf.max_code_tokens = cfg.max_code_tokens;
    let ids = corpus.iter().map(|s| clf.ids(&s.code)).collect::<Result<Vec<_>, _>>()?;
    clf.params.set_trainable_where(|_| true);
    let mut opt = AdamWState::<T>::new(AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() });
    let start = Instant::now();
    let mut losses = Vec::new();
    let mut epochs_completed = 0;
    'epochs: for epoch in 0..cfg.epochs {
        for batch in build_batches(corpus.len(), cfg.batch_size, cfg.seed, epoch) {
            if cfg.max_steps.is_some_and(|m| losses.len() >= m)
                || cfg.time_budget_secs.is_some_and(|b| start.elapsed().as_secs_f64() >= b)
            {
                break 'epochs;
            }
            let codes: Vec<&[u32]> = batch.iter().map(|&i| ids[i].as_slice()).collect();
            let labels: Vec<u8> = batch.iter().map(|&i| corpus[i].label).collect();
            clf.params.zero_grads();
            let (loss, grads) = {
                let mut g = Graph::new();
                let loss = clf.loss_var(&mut g, &clf.params, &codes, &labels)?;
                (g.scalar(loss).as_f64(), g.backward(loss)?)
            };
            grads.accumulate_into(&mut clf.params);
            opt.step(&mut clf.params)?;
            losses.push(loss);
        }
        epochs_completed = epoch + 1;
    }
    clf.params.zero_grads();
    Ok(ClassifierReport {
        steps: losses.len(),
        losses,
        epochs_completed,
        wall_time_secs: start.elapsed().as_secs_f64(),
        train_size: corpus.len(),
        positives: corpus.iter().filter(|s| s.label == 1).count(),
    })
}

/// Classifies every record and scores the labels.
pub fn evaluate_classifier<T: Scalar>(
    clf: &VulnClassifier<T>,
    samples: &[LabeledCode],
) -> Result<(ClassificationReport, Vec<Prediction>), ClassifierError> {
    let codes: Vec<&str> = samples.iter().map(|s| s.code.as_str()).collect();
    let out = clf.classify_batch(&codes)?;
    let preds: Vec<u8> = out.iter().map(|c| c.label).collect();
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let report = classification_metrics(&preds, &labels).map_err(|e| ClassifierError::Corpus(e.to_string()))?;
    let predictions = samples
        .iter()
        .zip(&out)
        .map(|(s, c)| Prediction { id: s.id.clone(), label: c.label, probability: c.probability })
        .collect();
    Ok((report, predictions))
}
