//! Dimensions of the built-in transformer and the canonical tensor names.
//!
//! Every weight is stored `[out_features, in_features]`. Tensor names:
//!
//! | name                         | shape                  |
//! |------------------------------|------------------------|
//! | `embed.w`                    | `[d_model, d_model]`   |
//! | `block.{i}.attn.{wq,wk,wv}`  | `[d_model, d_model]`   |
//! | `block.{i}.attn.wo`          | `[d_model, d_model]`   |
//! | `block.{i}.mlp.w1`           | `[d_hidden, d_model]`  |
//! | `block.{i}.mlp.b1`           | `[d_hidden]`           |
//! | `block.{i}.mlp.w2`           | `[d_model, d_hidden]`  |
//! | `block.{i}.mlp.b2`           | `[d_model]`            |
//! | `ln.{i}.{attn,mlp}.{g,b}`    | `[d_model]`            |
//! | `ln.final.{g,b}`             | `[d_model]`            |
//! | `head.w`                     | `[n_classes, d_model]` |
//! | `head.b`                     | `[n_classes]`          |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyArchSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub n_classes: usize,
    pub seq_len: usize,
}

impl ToyArchSpec {
    /// Two blocks, width 16: fast enough for exhaustive property tests.
    pub const TINY: ToyArchSpec = ToyArchSpec {
        n_layers: 2,
        d_model: 16,
        d_hidden: 32,
        n_heads: 2,
        d_k: 8,
        n_classes: 4,
        seq_len: 4,
    };

    /// The configuration used by the merge experiments.
    pub const TOY: ToyArchSpec = ToyArchSpec {
        n_layers: 2,
        d_model: 32,
        d_hidden: 64,
        n_heads: 4,
        d_k: 8,
        n_classes: 4,
        seq_len: 8,
    };

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::TINY),
            "toy" => Some(Self::TOY),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.n_layers,
            self.d_model,
            self.d_hidden,
            self.n_heads,
            self.d_k,
            self.n_classes,
            self.seq_len,
        ];
        if extents.contains(&0) {
            return Err(Error::InvalidArch(format!("all extents must be >= 1: {self:?}")));
        }
        if self.n_heads * self.d_k != self.d_model {
            return Err(Error::InvalidArch(format!(
                "n_heads * d_k = {} but d_model = {}",
                self.n_heads * self.d_k,
                self.d_model
            )));
        }
        Ok(())
    }

    /// Every required tensor with its shape, in lexicographic name order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h, c) = (self.d_model, self.d_hidden, self.n_classes);
        let mut out = vec![
            ("embed.w".to_string(), vec![d, d]),
            ("head.w".to_string(), vec![c, d]),
            ("head.b".to_string(), vec![c]),
            ("ln.final.g".to_string(), vec![d]),
            ("ln.final.b".to_string(), vec![d]),
        ];
        for i in 0..self.n_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((attn(i, w), vec![d, d]));
            }
            out.push((mlp(i, "w1"), vec![h, d]));
            out.push((mlp(i, "b1"), vec![h]));
            out.push((mlp(i, "w2"), vec![d, h]));
            out.push((mlp(i, "b2"), vec![d]));
            for sub in ["attn", "mlp"] {
                out.push((ln(i, sub, "g"), vec![d]));
                out.push((ln(i, sub, "b"), vec![d]));
            }
        }
        out.sort();
        out
    }

    /// Layer slot used by layer-wise merging: block tensors and their layer
    /// norms map to their block index; `embed`, `head` and `ln.final` map to
    /// the extra slot `n_layers`.
    pub fn layer_of(&self, name: &str) -> usize {
        let mut parts = name.split('.');
        match (parts.next(), parts.next().and_then(|p| p.parse::<usize>().ok())) {
            (Some("block" | "ln"), Some(i)) if i < self.n_layers => i,
            _ => self.n_layers,
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

pub fn attn(layer: usize, w: &str) -> String {
    format!("block.{layer}.attn.{w}")
}

pub fn mlp(layer: usize, w: &str) -> String {
    format!("block.{layer}.mlp.{w}")
}

pub fn ln(layer: usize, sub: &str, p: &str) -> String {
    format!("ln.{layer}.{sub}.{p}")
}

/// Which tensors a distance or attack considers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    All,
    /// `w1`, `b1`, `w2`, `b2` of every block.
    Mlp,
    /// `wq`, `wk`, `wv`, `wo` of every block.
    Attn,
}

impl Scope {
    pub fn contains(self, name: &str) -> bool {
        match self {
            Scope::All => true,
            Scope::Mlp => name.starts_with("block.") && name.contains(".mlp."),
            Scope::Attn => name.starts_with("block.") && name.contains(".attn."),
        }
    }
}
