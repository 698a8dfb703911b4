//! Decoder-only pre-norm transformer.
//!
//! Each block computes `x ← x + Attn(LN(x))` followed by
//! `x ← x + FFN(LN(x))`, or `x ← x + PKM(LN(x))` at memory positions.

use pkm_core::params::{join, Named, NamedMut};
use pkm_core::scalar::lit;
use pkm_core::tensor::axpy;
use pkm_core::{init_memory, MemoryForwardRecord, MemoryGrads, MemoryLayer, Mode, Parameters, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::layers::{
    uniform, Attention, AttentionCache, FeedForward, FeedForwardCache, LayerNorm, LayerNormCache, Linear,
};

pub const EMBED_BOUND: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub enum Mixer<T> {
    Dense(FeedForward<T>),
    Memory(MemoryLayer<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub mixer: Mixer<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_f: LayerNorm<T>,
    pub head: Linear<T>,
}

#[derive(Debug, Clone)]
pub enum MixerCache<T> {
    Dense(FeedForwardCache<T>),
    Memory(MemoryForwardRecord<T>),
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    pub mixer: MixerCache<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub inputs: Vec<u32>,
    pub batch: usize,
    pub time: usize,
    pub blocks: Vec<BlockCache<T>>,
    ln_f: LayerNormCache<T>,
    final_hidden: Tensor<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Memory records in layer order, with 1-based positions.
    pub fn memory_records(&self) -> impl Iterator<Item = (usize, &MemoryForwardRecord<T>)> {
        self.blocks.iter().enumerate().filter_map(|(i, b)| match &b.mixer {
            MixerCache::Memory(r) => Some((i + 1, r)),
            MixerCache::Dense(_) => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MixerGrads<T> {
    Dense(FeedForward<T>),
    Memory(MemoryGrads<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads<T> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub mixer: MixerGrads<T>,
}

/// Gradients laid out like [`Transformer`]; memory values are row-sparse.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<BlockGrads<T>>,
    pub ln_f: LayerNorm<T>,
    pub head: Linear<T>,
}

impl<T: Scalar> ModelGrads<T> {
    /// Global L2 norm over dense and sparse gradients.
    pub fn global_norm(&self) -> f64 {
        let sparse: f64 = self
            .blocks
            .iter()
            .map(|b| match &b.mixer {
                MixerGrads::Memory(m) => m.values.sum_squares(),
                MixerGrads::Dense(_) => 0.0,
            })
            .sum();
        (self.params_sum_squares() + sparse).sqrt()
    }

    pub fn scale_all(&mut self, factor: T) {
        self.scale_params(factor);
        for b in &mut self.blocks {
            if let MixerGrads::Memory(m) = &mut b.mixer {
                m.values.scale(factor);
            }
        }
    }

    /// Number of distinct value rows touched, summed over memory layers.
    pub fn touched_value_rows(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match &b.mixer {
                MixerGrads::Memory(m) => m.values.touched(),
                MixerGrads::Dense(_) => 0,
            })
            .sum()
    }
}

/// Mean token cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[u32]) -> Result<(f64, Tensor<T>)> {
    let (sum, mut grad) = cross_entropy_sum(logits, targets)?;
    let n = targets.len();
    grad.scale(lit::<T>(1.0 / n as f64));
    Ok((sum / n as f64, grad))
}

/// Summed negative log-likelihood (nats) and the gradient of that sum.
pub fn cross_entropy_sum<T: Scalar>(logits: &Tensor<T>, targets: &[u32]) -> Result<(f64, Tensor<T>)> {
    if logits.rows() != targets.len() || targets.is_empty() {
        return invalid(format!("{} logit rows for {} targets", logits.rows(), targets.len()));
    }
    let v = logits.cols();
    let mut grad = Tensor::zeros(&[targets.len(), v]);
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t as usize >= v {
            return invalid(format!("target {t} outside vocabulary of {v}"));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&l| (l - max).exp()).sum();
        let lse = max + z.ln();
        total += (lse - row[t as usize]).as_f64();
        let g = grad.row_mut(r);
        for (gi, &l) in g.iter_mut().zip(row) {
            *gi = (l - lse).exp();
        }
        g[t as usize] -= T::one();
    }
    Ok((total, grad))
}

impl<T: Scalar> Transformer<T> {
    /// Builds and initializes a model; deterministic in `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d) = (config.vocab_size, config.dim);
        let tok_emb = uniform(&mut rng, &[v, d], EMBED_BOUND);
        let pos_emb = uniform(&mut rng, &[config.context, d], EMBED_BOUND);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for layer in 1..=config.n_layers {
            let attn = Attention::new(&mut rng, d, config.attn_heads);
            let mixer = if config.has_memory_at(layer) {
                Mixer::Memory(init_memory(rng.gen(), config.memory_config())?)
            } else {
                Mixer::Dense(FeedForward::new(&mut rng, d, config.ffn_mult * d))
            };
            blocks.push(Block {
                ln1: LayerNorm::new(d),
                attn,
                ln2: LayerNorm::new(d),
                mixer,
            });
        }
        // small output weights keep initial predictions close to uniform
        let head = Linear::with_bound(&mut rng, d, v, EMBED_BOUND);
        Ok(Transformer {
            config,
            tok_emb,
            pos_emb,
            blocks,
            ln_f: LayerNorm::new(d),
            head,
        })
    }

    pub fn memories(&self) -> impl Iterator<Item = (usize, &MemoryLayer<T>)> {
        self.blocks.iter().enumerate().filter_map(|(i, b)| match &b.mixer {
            Mixer::Memory(m) => Some((i + 1, m)),
            Mixer::Dense(_) => None,
        })
    }

    pub fn memories_mut(&mut self) -> impl Iterator<Item = (usize, &mut MemoryLayer<T>)> {
        self.blocks.iter_mut().enumerate().filter_map(|(i, b)| match &mut b.mixer {
            Mixer::Memory(m) => Some((i + 1, m)),
            Mixer::Dense(_) => None,
        })
    }

    /// Dense parameters plus memory values.
    pub fn total_param_count(&self) -> usize {
        self.param_count() + self.memories().map(|(_, m)| m.values.values.len()).sum::<usize>()
    }

    /// Logits `(batch · time, vocab)` for equally long token sequences.
    pub fn forward(&self, inputs: &[Vec<u32>], mode: Mode) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let batch = inputs.len();
        let time = inputs.first().map_or(0, Vec::len);
        if batch == 0 || time == 0 {
            return invalid("empty batch");
        }
        if inputs.iter().any(|s| s.len() != time) {
            return invalid("sequences in a batch must have equal length");
        }
        if time > self.config.context {
            return invalid(format!("sequence length {time} exceeds context {}", self.config.context));
        }
        let d = self.config.dim;
        let flat: Vec<u32> = inputs.iter().flatten().copied().collect();
        if let Some(&t) = flat.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return invalid(format!("token {t} outside vocabulary of {}", self.config.vocab_size));
        }
        let mut x = Tensor::zeros(&[batch * time, d]);
        for (r, &tok) in flat.iter().enumerate() {
            let row = x.row_mut(r);
            row.copy_from_slice(self.tok_emb.row(tok as usize));
            axpy(T::one(), self.pos_emb.row(r % time), row);
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (h1, ln1) = block.ln1.forward(&x);
            let (a, attn) = block.attn.forward(&h1, batch, time);
            x.add_assign(&a);
            let (h2, ln2) = block.ln2.forward(&x);
            let (f, mixer) = match &block.mixer {
                Mixer::Dense(ff) => {
                    let (f, c) = ff.forward(&h2);
                    (f, MixerCache::Dense(c))
                }
                Mixer::Memory(mem) => {
                    let (f, rec) = mem.forward(&h2, mode)?;
                    (f, MixerCache::Memory(rec))
                }
            };
            x.add_assign(&f);
            caches.push(BlockCache { ln1, attn, ln2, mixer });
        }
        let (final_hidden, ln_f) = self.ln_f.forward(&x);
        let logits = self.head.forward(&final_hidden);
        let cache = ForwardCache {
            inputs: flat,
            batch,
            time,
            blocks: caches,
            ln_f,
            final_hidden,
        };
        Ok((logits, cache))
    }

    /// Applies running-statistics updates recorded by a train-mode forward.
    pub fn commit(&mut self, cache: &ForwardCache<T>) {
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks) {
            if let (Mixer::Memory(mem), MixerCache::Memory(rec)) = (&mut block.mixer, &bc.mixer) {
                mem.commit(rec);
            }
        }
    }

    pub fn zero_grads(&self) -> ModelGrads<T> {
        let zero_ln = || LayerNorm {
            gamma: Tensor::zeros(&[self.config.dim]),
            beta: Tensor::zeros(&[self.config.dim]),
        };
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let mut attn = b.attn.clone();
                attn.zero_params();
                let mixer = match &b.mixer {
                    Mixer::Dense(ff) => {
                        let mut g = ff.clone();
                        g.zero_params();
                        MixerGrads::Dense(g)
                    }
                    Mixer::Memory(m) => MixerGrads::Memory(m.zero_grads()),
                };
                BlockGrads {
                    ln1: zero_ln(),
                    attn,
                    ln2: zero_ln(),
                    mixer,
                }
            })
            .collect();
        let mut head = self.head.clone();
        head.zero_params();
        ModelGrads {
            tok_emb: Tensor::zeros(self.tok_emb.shape()),
            pos_emb: Tensor::zeros(self.pos_emb.shape()),
            blocks,
            ln_f: zero_ln(),
            head,
        }
    }

    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &Tensor<T>) -> Result<ModelGrads<T>> {
        let rows = cache.batch * cache.time;
        if grad_logits.shape() != [rows, self.config.vocab_size] {
            return invalid(format!("logit gradient is {:?}, expected [{rows}, {}]", grad_logits.shape(), self.config.vocab_size));
        }
        let mut grads = self.zero_grads();
        let dh = self.head.backward(&cache.final_hidden, grad_logits, &mut grads.head);
        let mut dx = self.ln_f.backward(&cache.ln_f, &dh, &mut grads.ln_f);
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[i];
            let bg = &mut grads.blocks[i];
            let dh2 = match (&block.mixer, &bc.mixer, &mut bg.mixer) {
                (Mixer::Dense(ff), MixerCache::Dense(c), MixerGrads::Dense(g)) => ff.backward(c, &dx, g),
                (Mixer::Memory(mem), MixerCache::Memory(rec), MixerGrads::Memory(g)) => {
                    let (mg, dh2) = mem.backward(rec, &dx)?;
                    *g = mg;
                    dh2
                }
                _ => return invalid("forward cache does not match model layout"),
            };
            dx.add_assign(&block.ln2.backward(&bc.ln2, &dh2, &mut bg.ln2));
            let dh1 = block.attn.backward(&bc.attn, &dx, &mut bg.attn);
            dx.add_assign(&block.ln1.backward(&bc.ln1, &dh1, &mut bg.ln1));
        }
        for (r, &tok) in cache.inputs.iter().enumerate() {
            axpy(T::one(), dx.row(r), grads.tok_emb.row_mut(tok as usize));
            axpy(T::one(), dx.row(r), grads.pos_emb.row_mut(r % cache.time));
        }
        Ok(grads)
    }

    /// Mean next-token loss over `windows` of length `time + 1`, with gradients.
    pub fn loss_and_grads(&self, windows: &[Vec<u32>], mode: Mode) -> Result<(f64, ModelGrads<T>, ForwardCache<T>)> {
        let (inputs, targets) = split_windows(windows)?;
        let (logits, cache) = self.forward(&inputs, mode)?;
        let (loss, dlogits) = cross_entropy(&logits, &targets)?;
        let grads = self.backward(&cache, &dlogits)?;
        Ok((loss, grads, cache))
    }

    /// Mean next-token loss without gradients.
    pub fn loss(&self, windows: &[Vec<u32>], mode: Mode) -> Result<f64> {
        let (inputs, targets) = split_windows(windows)?;
        let (logits, _) = self.forward(&inputs, mode)?;
        Ok(cross_entropy_sum(&logits, &targets)?.0 / targets.len() as f64)
    }
}

/// Splits `time + 1` windows into model inputs and flattened targets.
pub fn split_windows(windows: &[Vec<u32>]) -> Result<(Vec<Vec<u32>>, Vec<u32>)> {
    if windows.iter().any(|w| w.len() < 2) {
        return invalid("each window needs at least two tokens");
    }
    let inputs = windows.iter().map(|w| w[..w.len() - 1].to_vec()).collect();
    let targets = windows.iter().flat_map(|w| w[1..].iter().copied()).collect();
    Ok((inputs, targets))
}

macro_rules! impl_block_params {
    ($block:ident, $mixer:ident, $dense:path, $memory:path) => {
        impl<T: Scalar> Parameters<T> for $mixer<T> {
            fn named_params(&self, prefix: &str) -> Named<'_, T> {
                match self {
                    $dense(f) => f.named_params(&join(prefix, "ffn")),
                    $memory(m) => m.named_params(&join(prefix, "memory")),
                }
            }

            fn named_params_mut(&mut self, prefix: &str) -> NamedMut<'_, T> {
                match self {
                    $dense(f) => f.named_params_mut(&join(prefix, "ffn")),
                    $memory(m) => m.named_params_mut(&join(prefix, "memory")),
                }
            }
        }

        impl<T: Scalar> Parameters<T> for $block<T> {
            fn named_params(&self, prefix: &str) -> Named<'_, T> {
                let mut out = self.ln1.named_params(&join(prefix, "ln1"));
                out.extend(self.attn.named_params(&join(prefix, "attn")));
                out.extend(self.ln2.named_params(&join(prefix, "ln2")));
                out.extend(self.mixer.named_params(prefix));
                out
            }

            fn named_params_mut(&mut self, prefix: &str) -> NamedMut<'_, T> {
                let mut out = self.ln1.named_params_mut(&join(prefix, "ln1"));
                out.extend(self.attn.named_params_mut(&join(prefix, "attn")));
                out.extend(self.ln2.named_params_mut(&join(prefix, "ln2")));
                out.extend(self.mixer.named_params_mut(prefix));
                out
            }
        }
    };
}

impl_block_params!(Block, Mixer, Mixer::Dense, Mixer::Memory);
impl_block_params!(BlockGrads, MixerGrads, MixerGrads::Dense, MixerGrads::Memory);

macro_rules! impl_model_params {
    ($model:ident $(, $extra:item)*) => {
        impl<T: Scalar> Parameters<T> for $model<T> {
            $($extra)*

            fn named_params(&self, prefix: &str) -> Named<'_, T> {
                let mut out = vec![(join(prefix, "tok_emb"), &self.tok_emb), (join(prefix, "pos_emb"), &self.pos_emb)];
                for (i, b) in self.blocks.iter().enumerate() {
                    out.extend(b.named_params(&join(prefix, &format!("block{}", i + 1))));
                }
                out.extend(self.ln_f.named_params(&join(prefix, "ln_f")));
                out.extend(self.head.named_params(&join(prefix, "head")));
                out
            }

            fn named_params_mut(&mut self, prefix: &str) -> NamedMut<'_, T> {
                let mut out = vec![
                    (join(prefix, "tok_emb"), &mut self.tok_emb),
                    (join(prefix, "pos_emb"), &mut self.pos_emb),
                ];
                for (i, b) in self.blocks.iter_mut().enumerate() {
                    out.extend(b.named_params_mut(&join(prefix, &format!("block{}", i + 1))));
                }
                out.extend(self.ln_f.named_params_mut(&join(prefix, "ln_f")));
                out.extend(self.head.named_params_mut(&join(prefix, "head")));
                out
            }
        }
    };
}

impl_model_params!(
    Transformer,
    /// Batch-norm running statistics of every memory layer.
    fn named_buffers(&self, prefix: &str) -> Named<'_, T> {
        self.memories()
            .flat_map(|(pos, m)| m.named_buffers(&join(prefix, &format!("block{pos}.memory"))))
            .collect()
    },
    fn named_buffers_mut(&mut self, prefix: &str) -> NamedMut<'_, T> {
        self.memories_mut()
            .flat_map(|(pos, m)| m.named_buffers_mut(&join(prefix, &format!("block{pos}.memory"))))
            .collect()
    }
);
impl_model_params!(ModelGrads);
