use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::ProblemKind;

/// Raw per-node input features: x, y and demand / capacity.
pub const INPUT_FEATURES: usize = 3;

/// Pointer logits are squashed to `[-C, C]` with `C · tanh(·)`.
pub const LOGIT_CLIP: f64 = 10.0;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub feedforward_dim: usize,
    pub problem_kind: ProblemKind,
}

impl ArchSpec {
    pub fn new(problem_kind: ProblemKind, embed_dim: usize) -> Self {
        Self {
            embed_dim,
            n_heads: 4,
            n_encoder_layers: 2,
            feedforward_dim: 4 * embed_dim,
            problem_kind,
        }
    }

    pub fn teacher(problem_kind: ProblemKind) -> Self {
        Self::new(problem_kind, 32)
    }

    /// Half the teacher's embedding width, everything else scaled alike.
    pub fn student(problem_kind: ProblemKind) -> Self {
        Self::new(problem_kind, 16)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0
            || self.n_heads == 0
            || self.n_encoder_layers == 0
            || self.feedforward_dim == 0
        {
            return Err(Error::Config(format!("architecture sizes must be positive: {self:?}")));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    /// Parameters of the node-input projection (weights, bias, depot embedding).
    pub fn input_layer_params(&self) -> usize {
        (INPUT_FEATURES + 2) * self.embed_dim
    }

    /// Closed-form parameter count; matches `PolicyParams::n_params`.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let f = self.feedforward_dim;
        let per_layer = 4 * d * d + 2 * d * f + f + d + 4 * d;
        let decoder = 6 * d * d + 2 * d;
        self.input_layer_params() + self.n_encoder_layers * per_layer + decoder
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heads_must_divide_width() {
        let mut a = ArchSpec::teacher(ProblemKind::Tsp);
        assert!(a.validate().is_ok());
        a.embed_dim = 30;
        assert!(a.validate().is_err());
    }

    #[test]
    fn desk_scale_counts() {
        assert_eq!(ArchSpec::teacher(ProblemKind::Tsp).param_count(), 31_520);
        assert_eq!(ArchSpec::student(ProblemKind::Tsp).param_count(), 8_080);
    }
}
