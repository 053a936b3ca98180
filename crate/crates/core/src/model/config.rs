use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// How code reaches the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeInput {
    /// Encoder features mapped through the projector (the multimodal path).
    #[default]
    Projected,
    /// Code token ids embedded by the decoder's own table, as plain text.
    InlineText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub enc_dim: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    /// Position table size of the encoder; bounds the code length.
    pub enc_positions: usize,
    /// Python-style index into the encoder block outputs.
    pub feature_layer: i32,
    pub proj_hidden: usize,
    pub dec_dim: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub context: usize,
    pub mlp_ratio: usize,
    pub init_std: f64,
    pub head_init_std: f64,
    pub code_input: CodeInput,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: crate::tokenizer::DEFAULT_VOCAB_SIZE,
            enc_dim: 64,
            enc_layers: 2,
            enc_heads: 4,
            enc_positions: 1024,
            feature_layer: -2,
            proj_hidden: 256,
            dec_dim: 128,
            dec_layers: 4,
            dec_heads: 4,
            context: 512,
            mlp_ratio: 4,
            init_std: 0.02,
            head_init_std: 0.1,
            code_input: CodeInput::Projected,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.vocab_size == 0 || self.enc_dim == 0 || self.dec_dim == 0 || self.proj_hidden == 0 {
            return bad("dimensions must be positive");
        }
        if self.enc_heads == 0 || !self.enc_dim.is_multiple_of(self.enc_heads) {
            return bad("enc_dim must be divisible by enc_heads");
        }
        if self.dec_heads == 0 || !self.dec_dim.is_multiple_of(self.dec_heads) {
            return bad("dec_dim must be divisible by dec_heads");
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("encoder and decoder need at least one block");
        }
        if self.context < 4 || self.enc_positions == 0 {
            return bad("context too small");
        }
        self.feature_block()?;
        Ok(())
    }

    /// Resolves `feature_layer` to a block index.
    pub fn feature_block(&self) -> Result<usize, ModelError> {
        let l = self.enc_layers as i32;
        let idx = if self.feature_layer < 0 { l + self.feature_layer } else { self.feature_layer };
        if (0..l).contains(&idx) {
            Ok(idx as usize)
        } else {
            Err(ModelError::Config(format!(
                "feature_layer {} out of range for {} encoder blocks",
                self.feature_layer, self.enc_layers
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_to_last_of_two_blocks_is_block_zero() {
        assert_eq!(ModelConfig::default().feature_block().unwrap(), 0);
        let six = ModelConfig { enc_layers: 6, ..Default::default() };
        assert_eq!(six.feature_block().unwrap(), 4);
        let bad = ModelConfig { feature_layer: -3, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
