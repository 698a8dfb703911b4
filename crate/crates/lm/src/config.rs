use pkm_core::{AdamConfig, KeyKind, MemoryConfig};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Product-key memory hyperparameters shared by every memory position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorySpec {
    pub n_sub: usize,
    pub heads: usize,
    pub k: usize,
    pub query_dim: usize,
    pub batch_norm: bool,
    pub keys: KeyKind,
}

impl Default for MemorySpec {
    fn default() -> Self {
        MemorySpec {
            n_sub: 64,
            heads: 4,
            k: 32,
            query_dim: 32,
            batch_norm: true,
            keys: KeyKind::Product,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub dim: usize,
    pub attn_heads: usize,
    pub context: usize,
    /// FFN hidden width is `ffn_mult · dim`.
    pub ffn_mult: usize,
    /// 1-based layer indices whose FFN is replaced by a memory.
    pub memory_positions: Vec<usize>,
    pub memory: MemorySpec,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.n_layers == 0 || self.dim == 0 || self.context == 0 || self.ffn_mult == 0 {
            return invalid(format!("model dimensions must be positive: {self:?}"));
        }
        if self.attn_heads == 0 || self.dim % self.attn_heads != 0 {
            return invalid(format!("dim {} is not divisible by {} attention heads", self.dim, self.attn_heads));
        }
        let mut seen = self.memory_positions.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.memory_positions.len() {
            return invalid(format!("duplicate memory positions {:?}", self.memory_positions));
        }
        if let Some(&p) = self.memory_positions.iter().find(|&&p| p < 1 || p > self.n_layers) {
            return invalid(format!("memory position {p} outside layers 1..={}", self.n_layers));
        }
        if !self.memory_positions.is_empty() {
            self.memory_config().validate()?;
        }
        Ok(())
    }

    pub fn memory_config(&self) -> MemoryConfig {
        MemoryConfig {
            input_dim: self.dim,
            query_dim: self.memory.query_dim,
            n_sub: self.memory.n_sub,
            heads: self.memory.heads,
            k: self.memory.k,
            batch_norm: self.memory.batch_norm,
            keys: self.memory.keys,
        }
    }

    pub fn has_memory_at(&self, layer: usize) -> bool {
        self.memory_positions.contains(&layer)
    }
}

/// Optimization settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    /// Peak learning rate for every dense parameter (keys and query networks included).
    pub lr_main: f64,
    /// Constant learning rate of the sparse value optimizer.
    pub lr_values: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Linear warmup length of the inverse-square-root schedule; 0 disables it.
    pub warmup_steps: u64,
    pub clip_norm: f64,
    /// Seeds batch sampling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            steps: 1000,
            lr_main: 2.5e-4,
            lr_values: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            warmup_steps: 400,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return invalid("batch size must be positive");
        }
        if !(self.lr_main >= 0.0 && self.lr_values >= 0.0 && self.clip_norm > 0.0) {
            return invalid(format!("bad optimizer settings: {self:?}"));
        }
        Ok(())
    }

    pub fn dense_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_main,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn values_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_values,
            ..self.dense_adam()
        }
    }

    /// `lr_main · min(s / w, √(w / s))` at 1-based step `s`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        if self.warmup_steps == 0 {
            return self.lr_main;
        }
        let w = self.warmup_steps as f64;
        self.lr_main * (s / w).min((w / s).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup() {
        let cfg = TrainConfig::default();
        assert!((cfg.learning_rate(400) - cfg.lr_main).abs() < 1e-18);
        assert!((cfg.learning_rate(200) - cfg.lr_main / 2.0).abs() < 1e-18);
        assert!((cfg.learning_rate(1600) - cfg.lr_main / 2.0).abs() < 1e-18);
        let flat = TrainConfig { warmup_steps: 0, ..cfg };
        assert_eq!(flat.learning_rate(7), cfg.lr_main);
    }
}
