use serde::{Deserialize, Serialize};

use crate::numerics::ParamId;

/// Low-rank update `(alpha / rank) · B·A` on one linear map.
///
/// `A` is `[rank, in]` and `B` is `[out, rank]`; `B` starts at zero so a
/// freshly attached adapter leaves the forward pass unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
    pub a: ParamId,
    pub b: ParamId,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        lora_scaling(self.rank, self.alpha)
    }
}

pub fn lora_scaling(rank: usize, alpha: f64) -> f64 {
    alpha / rank as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 16, alpha: 16.0 }
    }
}
