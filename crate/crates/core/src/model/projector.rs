use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::ModelError;
use crate::model::layers::Linear;
use crate::numerics::{Graph, ParamStore, Scalar, Var};

/// Two affine maps with a GELU between them, applied to every code token.
#[derive(Debug, Clone)]
pub struct Projector {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Projector {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Result<Self, ModelError> {
        Ok(Projector {
            fc1: Linear::new(store, rng, "projector.fc1", in_dim, hidden, (1.0 / in_dim as f64).sqrt())?,
            fc2: Linear::new(store, rng, "projector.fc2", hidden, out_dim, (1.0 / hidden as f64).sqrt())?,
        })
    }

    /// Maps `[tokens, in_dim]` rows to `[tokens, out_dim]`.
    pub fn forward<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        rows: Var,
    ) -> Result<Var, ModelError> {
        let cols = g.shape(rows).get(1).copied().unwrap_or(0);
        if cols != self.fc1.in_dim {
            return Err(ModelError::Numerics(crate::error::NumericsError::Shape(format!(
                "projector expects {}-dim code features, got {cols}",
                self.fc1.in_dim
            ))));
        }
        let none = BTreeMap::new();
        let h = self.fc1.forward(g, store, rows, &none)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h, &none)
    }
}
