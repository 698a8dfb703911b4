use pkm_core::{sparse_value_update, Adam, Mode, Parameters, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::corpus::sample_batch;
use crate::error::{invalid, LmError, Result};
use crate::model::{MixerGrads, Transformer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Model plus everything needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub model: Transformer<T>,
    pub config: TrainConfig,
    /// Every dense tensor of the model, values excluded.
    pub dense: Adam<T>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<StepLog>,
    /// Total value rows updated by the sparse optimizer.
    pub value_row_updates: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        let model = Transformer::new(model_config)?;
        Self::from_model(model, config)
    }

    pub fn from_model(model: Transformer<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(TrainState {
            model,
            dense: Adam::new(config.dense_adam()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            step: 0,
            history: Vec::new(),
            value_row_updates: 0,
        })
    }

    /// One optimizer step on `windows` of `context + 1` tokens; returns the
    /// pre-update loss.
    pub fn train_step(&mut self, windows: &[Vec<u32>]) -> Result<f64> {
        let step = self.step + 1;
        let (loss, mut grads, cache) = self.model.loss_and_grads(windows, Mode::Train)?;
        if !loss.is_finite() {
            return Err(LmError::TrainingDiverged {
                step,
                loss,
                diagnostic: self.diagnostic(),
            });
        }
        self.model.commit(&cache);

        let grad_norm = grads.global_norm();
        if !grad_norm.is_finite() {
            return Err(LmError::TrainingDiverged {
                step,
                loss,
                diagnostic: format!("gradient norm {grad_norm}; {}", self.diagnostic()),
            });
        }
        if grad_norm > self.config.clip_norm {
            grads.scale_all(T::from_f64_lossy(self.config.clip_norm / grad_norm));
        }

        let lr = self.config.learning_rate(step);
        {
            let grad_list = grads.named_params("");
            let grad_refs: Vec<_> = grad_list.iter().map(|(_, g)| *g).collect();
            let params: Vec<_> = self.model.named_params_mut("").into_iter().map(|(_, p)| p).collect();
            self.dense.update(params, &grad_refs, lr)?;
        }

        let values_config = self.config.values_adam();
        let mut memory_grads = grads.blocks.iter().filter_map(|b| match &b.mixer {
            MixerGrads::Memory(m) => Some(m),
            MixerGrads::Dense(_) => None,
        });
        for (_, memory) in self.model.memories_mut() {
            let g = memory_grads.next().ok_or_else(|| LmError::InvalidArgument("gradient layout mismatch".into()))?;
            sparse_value_update(&mut memory.values, &g.values, &values_config)?;
            self.value_row_updates += g.values.touched() as u64;
        }

        self.step = step;
        self.history.push(StepLog { step, loss, lr, grad_norm });
        Ok(loss)
    }

    /// Runs `steps` steps on batches sampled from `tokens` with the state's RNG.
    pub fn train(&mut self, tokens: &[u32], steps: u64) -> Result<f64> {
        if steps == 0 {
            return invalid("steps must be positive");
        }
        let mut last = f64::NAN;
        for _ in 0..steps {
            let batch = sample_batch(&mut self.rng, tokens, self.config.batch_size, self.model.config.context)?;
            last = self.train_step(&batch)?;
        }
        Ok(last)
    }

    fn diagnostic(&self) -> String {
        let bad: Vec<String> = self
            .model
            .named_params("")
            .into_iter()
            .filter(|(_, t)| !t.all_finite())
            .map(|(n, _)| n)
            .collect();
        let recent: Vec<String> = self
            .history
            .iter()
            .rev()
            .take(5)
            .map(|l| format!("{}:{:.4}", l.step, l.loss))
            .collect();
        format!("non-finite tensors {bad:?}; recent losses {recent:?}")
    }
}
