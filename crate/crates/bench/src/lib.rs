//! Shared fixtures for the criterion benches.

use llavul::model::{render_conversation, MultimodalSequence};
use llavul::synthetic::{overfit_corpus, tokenizer_corpus};
use llavul::{LlavulModel, ModelConfig, TokenizerModel};

/// Desk-size model and its rendered overfit corpus.
pub fn desk_model() -> (LlavulModel<f32>, Vec<MultimodalSequence>) {
    let corpus = overfit_corpus();
    let tok = TokenizerModel::train(&tokenizer_corpus(&corpus), 512).expect("tokenizer trains");
    let cfg = ModelConfig { vocab_size: tok.vocab_size(), ..ModelConfig::default() };
    let model = LlavulModel::new(cfg, tok).expect("valid config");
    let opts = model.render_options(1000);
    let seqs = corpus.iter().map(|s| render_conversation(&model.tokenizer, s, opts).expect("fits")).collect();
    (model, seqs)
}
