use pkm_core::{AccessAccumulator, Mode, Scalar};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{cross_entropy_sum, split_windows, Transformer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    /// 1-based layer index.
    pub position: usize,
    pub usage: f64,
    pub kl: f64,
    /// Share of distinct selected keys picked by two or more heads, averaged over tokens.
    pub head_overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: f64,
    pub nll: f64,
    pub tokens: usize,
    pub memory: Vec<MemoryReport>,
}

struct Partial {
    nll: f64,
    tokens: usize,
    accumulators: Vec<AccessAccumulator>,
    overlap: Vec<(f64, usize)>,
}

/// Sequential `context + 1` windows overlapping by one token, so every token
/// after the first is predicted once. The last window may be shorter.
pub fn eval_windows(tokens: &[u32], context: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + context + 1).min(tokens.len());
        out.push(tokens[start..end].to_vec());
        start += context;
    }
    out
}

/// Eval-mode pass over `tokens`: perplexity plus, per memory layer, usage
/// and KL from a fresh accumulator.
pub fn evaluate<T: Scalar>(model: &Transformer<T>, tokens: &[u32], batch_size: usize) -> Result<EvalReport> {
    if tokens.len() < 2 {
        return invalid(format!("evaluation split has {} tokens, need at least 2", tokens.len()));
    }
    if batch_size == 0 {
        return invalid("batch size must be positive");
    }
    let windows = eval_windows(tokens, model.config.context);
    let mut batches: Vec<&[Vec<u32>]> = Vec::new();
    let full = windows.iter().take_while(|w| w.len() == model.config.context + 1).count();
    batches.extend(windows[..full].chunks(batch_size));
    if full < windows.len() {
        batches.push(&windows[full..]);
    }
    let positions: Vec<(usize, usize)> = model.memories().map(|(p, m)| (p, m.config.key_count())).collect();

    let partials: Vec<Partial> = batches
        .par_iter()
        .map(|batch| -> Result<Partial> {
            let (inputs, targets) = split_windows(batch)?;
            let (logits, cache) = model.forward(&inputs, Mode::Eval)?;
            let (nll, _) = cross_entropy_sum(&logits, &targets)?;
            let mut accumulators: Vec<_> = positions.iter().map(|&(_, n)| AccessAccumulator::new(n)).collect();
            let mut overlap = Vec::new();
            for ((_, record), acc) in cache.memory_records().zip(&mut accumulators) {
                acc.accumulate(record)?;
                overlap.push((record.head_overlap() * record.rows() as f64, record.rows()));
            }
            Ok(Partial {
                nll,
                tokens: targets.len(),
                accumulators,
                overlap,
            })
        })
        .collect::<Result<_>>()?;

    let mut nll = 0.0;
    let mut count = 0;
    let mut accumulators: Vec<_> = positions.iter().map(|&(_, n)| AccessAccumulator::new(n)).collect();
    let mut overlap = vec![(0.0, 0usize); positions.len()];
    for p in &partials {
        nll += p.nll;
        count += p.tokens;
        for (acc, other) in accumulators.iter_mut().zip(&p.accumulators) {
            acc.merge(other)?;
        }
        for (o, &(s, n)) in overlap.iter_mut().zip(&p.overlap) {
            o.0 += s;
            o.1 += n;
        }
    }
    let memory = positions
        .iter()
        .zip(&accumulators)
        .zip(&overlap)
        .map(|((&(position, _), acc), &(s, n))| {
            Ok(MemoryReport {
                position,
                usage: acc.usage()?,
                kl: acc.kl_uniform()?,
                head_overlap: s / n as f64,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        perplexity: pkm_core::perplexity(nll, count)?,
        nll,
        tokens: count,
        memory,
    })
}
