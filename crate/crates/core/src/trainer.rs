//! Two-stage training loop: batching, the freeze contract, AdamW, and
//! checkpoint cadence.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ConversationSample;
use crate::error::{ModelError, TrainError};
use crate::metrics::{evaluate_corpus, MetricReport, TableEmbedder};
use crate::model::{
    render_conversation, save_checkpoint, CodeInput, DecodeConfig, LlavulModel, LoraConfig, ModelConfig,
    MultimodalSequence, Stage,
};
use crate::numerics::{AdamWConfig, AdamWState, Scalar};
use crate::tokenizer::TokenizerModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub max_code_tokens: usize,
    /// Keep only the first `turn_limit` turns of every sample.
    pub turn_limit: Option<usize>,
    /// Stop after this many optimizer steps, whatever the epoch count.
    pub max_steps: Option<usize>,
    /// Stop once the mean loss of the last `early_stop_window` steps drops below this.
    pub target_loss: Option<f64>,
    pub early_stop_window: usize,
    /// Save a checkpoint every N steps (and always at the end) when a directory is given.
    pub checkpoint_every: Option<usize>,
    pub grad_accum: usize,
    pub grad_clip: Option<f64>,
    pub lora: LoraConfig,
    /// Adapter targets; `None` means every decoder attention projection.
    pub lora_targets: Option<Vec<String>>,
    /// Allow fine-tuning a model that never went through pretraining.
    pub from_scratch: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig::pretrain()
    }
}

impl StageConfig {
    pub fn pretrain() -> Self {
        StageConfig {
            stage: Stage::Pretrain,
            epochs: 1,
            batch_size: 10,
            lr: 2e-5,
            weight_decay: 0.0,
            seed: 0,
            max_code_tokens: 1000,
            turn_limit: None,
            max_steps: None,
            target_loss: None,
            early_stop_window: 8,
            checkpoint_every: None,
            grad_accum: 1,
            grad_clip: None,
            lora: LoraConfig::default(),
            lora_targets: None,
            from_scratch: false,
        }
    }

    pub fn finetune() -> Self {
        StageConfig { stage: Stage::Finetune, epochs: 3, batch_size: 5, ..StageConfig::pretrain() }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Pretrain => Self::pretrain(),
            Stage::Finetune => Self::finetune(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.epochs == 0 || self.grad_accum == 0 {
            return Err(TrainError::Config("epochs, batch_size and grad_accum must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(TrainError::Config("lr must be positive and finite".into()));
        }
        if self.max_code_tokens == 0 {
            return Err(TrainError::Config("max_code_tokens must be positive".into()));
        }
        if self.grad_clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(TrainError::Config("grad_clip must be positive".into()));
        }
        if self.early_stop_window == 0 {
            return Err(TrainError::Config("early_stop_window must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub losses: Vec<f64>,
    pub steps: usize,
    pub epochs_completed: usize,
    pub wall_time_secs: f64,
    pub trainable_params: usize,
    pub trainable_names: Vec<String>,
    pub skipped_samples: usize,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Index batches for one epoch, shuffled with a seed derived from
/// `(seed, epoch)`. Every index appears exactly once; the last batch may be
/// short.
pub fn build_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64));
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Renders samples for training; samples that cannot fit the context are
/// counted and dropped.
pub fn render_corpus<T: Scalar>(
    model: &LlavulModel<T>,
    corpus: &[ConversationSample],
    max_code_tokens: usize,
    turn_limit: Option<usize>,
) -> Result<(Vec<MultimodalSequence>, usize), TrainError> {
    let mut opts = model.render_options(max_code_tokens);
    opts.turn_limit = turn_limit;
    let mut out = Vec::with_capacity(corpus.len());
    let mut skipped = 0;
    for s in corpus {
        match render_conversation(&model.tokenizer, s, opts) {
            Ok(seq) => out.push(seq),
            Err(ModelError::ContextOverflow { .. }) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    Ok((out, skipped))
}

/// Progress callback: `(step, loss)` after every optimizer step.
pub type StepHook<'h> = &'h mut dyn FnMut(usize, f64);

/// Runs one training stage in place.
///
/// Fine-tuning requires a completed pretraining stage unless
/// `cfg.from_scratch` is set, attaches LoRA adapters when none exist, and
/// re-applies the stage freeze before every step.
pub fn run_stage<T: Scalar>(
    model: &mut LlavulModel<T>,
    corpus: &[ConversationSample],
    cfg: &StageConfig,
    checkpoint_dir: Option<&Path>,
    mut hook: Option<StepHook<'_>>,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if cfg.stage == Stage::Finetune {
        if !model.stages().contains(&Stage::Pretrain) && !cfg.from_scratch {
            return Err(TrainError::StageOrder(
                "fine-tuning needs a pretrained checkpoint (or an explicit from-scratch override)".into(),
            ));
        }
        if model.adapters().is_empty() {
            let targets = cfg.lora_targets.clone().unwrap_or_else(|| model.default_lora_targets());
            model.lora_attach(&targets, cfg.lora)?;
        }
    }
    let (seqs, skipped) = render_corpus(model, corpus, cfg.max_code_tokens, cfg.turn_limit)?;
    if seqs.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let trainable_names = model.set_stage_freeze(cfg.stage);
    let trainable_params = model.params.trainable_count();
    let mut opt = AdamWState::<T>::new(AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() });
    let start = Instant::now();
    let mut losses = Vec::new();
    let mut checkpoints = Vec::new();
    let mut epochs_completed = 0;
    let mut done = false;
    'epochs: for epoch in 0..cfg.epochs {
        let batches = build_batches(seqs.len(), cfg.batch_size, cfg.seed, epoch);
        for group in batches.chunks(cfg.grad_accum) {
            model.set_stage_freeze(cfg.stage);
            model.params.zero_grads();
            let mut loss_sum = 0.0;
            for idx in group {
                let batch: Vec<&MultimodalSequence> = idx.iter().map(|&i| &seqs[i]).collect();
                loss_sum += model.accumulate_gradients(&batch)?.as_f64();
            }
            if group.len() > 1 {
                model.params.scale_grads(1.0 / group.len() as f64);
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = model.params.grad_norm();
                if norm > clip {
                    model.params.scale_grads(clip / norm);
                }
            }
            opt.step(&mut model.params)?;
            let loss = loss_sum / group.len() as f64;
            losses.push(loss);
            if let Some(h) = hook.as_mut() {
                h(losses.len(), loss);
            }
            if let (Some(every), Some(dir)) = (cfg.checkpoint_every, checkpoint_dir) {
                if losses.len() % every == 0 {
                    let path = dir.join(format!("{}-step{}.ckpt", cfg.stage, losses.len()));
                    save_checkpoint(model, &path)?;
                    checkpoints.push(path);
                }
            }
            if cfg.max_steps.is_some_and(|m| losses.len() >= m) {
                done = true;
            }
            if let Some(target) = cfg.target_loss {
                let w = cfg.early_stop_window;
                if losses.len() >= w && losses[losses.len() - w..].iter().sum::<f64>() / (w as f64) < target {
                    done = true;
                }
            }
            if done {
                break 'epochs;
            }
        }
        epochs_completed = epoch + 1;
    }
    model.params.zero_grads();
    model.record_stage(cfg.stage);
    if let Some(dir) = checkpoint_dir {
        let path = dir.join(format!("{}.ckpt", cfg.stage));
        save_checkpoint(model, &path)?;
        checkpoints.push(path);
    }
    Ok(TrainReport {
        stage: cfg.stage,
        steps: losses.len(),
        losses,
        epochs_completed,
        wall_time_secs: start.elapsed().as_secs_f64(),
        trainable_params,
        trainable_names,
        skipped_samples: skipped,
        checkpoints,
    })
}

/// One row of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Both stages, full code length.
    Full,
    /// Both stages with code cut to this many tokens for training and evaluation.
    TruncatedCode(usize),
    /// The stage-1 model evaluated directly.
    OnlyPretraining,
    /// No encoder or projector: code is inlined as text and only the
    /// fine-tuning stage runs.
    OnlyLlmTextInline,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::TruncatedCode(n) => write!(f, "truncated_code:{n}"),
            Variant::OnlyPretraining => f.write_str("only_pretraining"),
            Variant::OnlyLlmTextInline => f.write_str("only_llm_text_inline"),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, TrainError> {
        let s = s.trim();
        let unknown = || TrainError::Config(format!("unknown ablation variant {s:?}"));
        match s {
            "full" => Ok(Variant::Full),
            "only_pretraining" => Ok(Variant::OnlyPretraining),
            "only_llm_text_inline" => Ok(Variant::OnlyLlmTextInline),
            _ => {
                let n = s
                    .strip_prefix("truncated_code:")
                    .or_else(|| s.strip_prefix("truncated_code(").and_then(|r| r.strip_suffix(')')))
                    .ok_or_else(unknown)?;
                match n.trim().parse::<usize>() {
                    Ok(n) if n > 0 => Ok(Variant::TruncatedCode(n)),
                    _ => Err(unknown()),
                }
            }
        }
    }
}

/// Parses a comma-separated variant list.
pub fn parse_variants(list: &str) -> Result<Vec<Variant>, TrainError> {
    let out = list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<Vec<_>, _>>()?;
    if out.is_empty() {
        return Err(TrainError::Config("no ablation variants given".into()));
    }
    Ok(out)
}

/// Everything shared by the variants of one ablation run.
#[derive(Debug, Clone)]
pub struct AblationSetup<'a> {
    pub model: ModelConfig,
    pub tokenizer: &'a TokenizerModel,
    pub pretrain_corpus: &'a [ConversationSample],
    pub train: &'a [ConversationSample],
    pub test: &'a [ConversationSample],
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub decode: DecodeConfig,
}

#[derive(Debug, Clone)]
pub struct VariantOutcome {
    pub variant: Variant,
    pub model: LlavulModel<f32>,
    pub pretrain: Option<TrainReport>,
    pub finetune: Option<TrainReport>,
    pub metrics: MetricReport,
}

/// Trains and evaluates each variant from the same initialization.
///
/// The semantic score uses the untrained decoder embedding table, which no
/// stage updates, so every row is scored with the same embedder.
pub fn ablation_run(
    setup: &AblationSetup<'_>,
    variants: &[Variant],
    mut on_variant: impl FnMut(&VariantOutcome),
) -> Result<Vec<VariantOutcome>, TrainError> {
    if variants.is_empty() {
        return Err(TrainError::Config("no ablation variants given".into()));
    }
    let fresh = |code_input| LlavulModel::<f32>::new(ModelConfig { code_input, ..setup.model.clone() }, setup.tokenizer.clone());
    let embedder = TableEmbedder::from_model(&fresh(CodeInput::Projected)?);
    let mut out = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut pre = setup.pretrain.clone();
        let mut fine = setup.finetune.clone();
        if let Variant::TruncatedCode(n) = variant {
            pre.max_code_tokens = n;
            fine.max_code_tokens = n;
        }
        let input = if variant == Variant::OnlyLlmTextInline { CodeInput::InlineText } else { CodeInput::Projected };
        let mut model = fresh(input)?;
        let pretrain = match variant {
            Variant::OnlyLlmTextInline => None,
            _ => Some(run_stage(&mut model, setup.pretrain_corpus, &pre, None, None)?),
        };
        let finetune = match variant {
            Variant::OnlyPretraining => None,
            Variant::OnlyLlmTextInline => {
                let cfg = StageConfig { from_scratch: true, ..fine.clone() };
                Some(run_stage(&mut model, setup.train, &cfg, None, None)?)
            }
            _ => Some(run_stage(&mut model, setup.train, &fine, None, None)?),
        };
        let metrics = evaluate_corpus(&model, setup.test, &setup.decode, fine.max_code_tokens, &embedder, false)?;
        let outcome = VariantOutcome { variant, model, pretrain, finetune, metrics };
        on_variant(&outcome);
        out.push(outcome);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_sample_once_per_epoch() {
        for epoch in 0..3 {
            let batches = build_batches(23, 5, 7, epoch);
            let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..23).collect::<Vec<_>>());
            assert_eq!(batches.len(), 5);
        }
        assert_ne!(build_batches(23, 5, 7, 0), build_batches(23, 5, 7, 1));
        assert_eq!(build_batches(23, 5, 7, 2), build_batches(23, 5, 7, 2));
        assert!(build_batches(4, 1, 0, 0).iter().all(|b| b.len() == 1));
    }

    #[test]
    fn defaults_follow_the_stage() {
        let p = StageConfig::pretrain();
        let f = StageConfig::finetune();
        assert_eq!((p.epochs, p.batch_size, p.lr), (1, 10, 2e-5));
        assert_eq!((f.epochs, f.batch_size, f.lr), (3, 5, 2e-5));
        assert!(StageConfig { batch_size: 0, ..p }.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        let v = parse_variants("full,truncated_code:100,only_pretraining,only_llm_text_inline").unwrap();
        assert_eq!(
            v,
            [Variant::Full, Variant::TruncatedCode(100), Variant::OnlyPretraining, Variant::OnlyLlmTextInline]
        );
        for x in &v {
            assert_eq!(&x.to_string().parse::<Variant>().unwrap(), x);
        }
        assert_eq!("truncated_code(7)".parse::<Variant>().unwrap(), Variant::TruncatedCode(7));
        for bad in ["half", "truncated_code:0", "truncated_code:x", ""] {
            assert!(parse_variants(bad).is_err(), "{bad}");
        }
    }
}
