//! Memory-layer search throughput in isolation, with an exactness check.

use std::time::Instant;

use pkm_core::pk_index::{flat_search_batch, product_search_batch};
use pkm_core::scalar::lit;
use pkm_core::{
    flat_search, flat_search_instrumented, product_search, product_search_instrumented, top_k, KeyKind, OpCounter, ProductKeyIndex, Scalar,
    Tensor, TopKSelection,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::records::Record;

pub const DEFAULT_FLAT_CEILING: usize = 1 << 18;
pub const MIN_EXACT_SAMPLES: usize = 256;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("flat search over {key_count} keys exceeds the ceiling of {ceiling}; raise --flat-ceiling or use --mode product")]
    FlatCeiling { key_count: usize, ceiling: usize },
    #[error("invalid bench configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Memory(#[from] pkm_core::PkmError),
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub subkeys: Vec<usize>,
    pub query_dim: usize,
    pub k: usize,
    pub heads: usize,
    pub modes: Vec<KeyKind>,
    /// Queries per timed pass.
    pub queries: usize,
    pub exact_samples: usize,
    pub flat_ceiling: usize,
    /// Minimum timed wall time per variant.
    pub min_seconds: f64,
    /// Worker cap for the multi-threaded variant.
    pub threads: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            subkeys: vec![128, 256, 512],
            query_dim: 64,
            k: 16,
            heads: 1,
            modes: vec![KeyKind::Product, KeyKind::Flat],
            queries: 512,
            exact_samples: MIN_EXACT_SAMPLES,
            flat_ceiling: DEFAULT_FLAT_CEILING,
            min_seconds: 0.2,
            threads: None,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Invalid(m));
        if self.subkeys.is_empty() {
            return bad("no sub-key counts given".into());
        }
        if self.query_dim == 0 || self.query_dim % 2 != 0 {
            return bad(format!("query dimension {} must be positive and even", self.query_dim));
        }
        if self.heads == 0 || self.queries == 0 {
            return bad("heads and queries must be positive".into());
        }
        if self.exact_samples < MIN_EXACT_SAMPLES {
            return bad(format!("exactness sampling needs at least {MIN_EXACT_SAMPLES} queries"));
        }
        if let Some(&c) = self.subkeys.iter().find(|&&c| self.k < 1 || self.k > c) {
            return bad(format!("k = {} must lie in [1, {c}]", self.k));
        }
        if self.modes.contains(&KeyKind::Flat) {
            if let Some(&c) = self.subkeys.iter().find(|&&c| c * c > self.flat_ceiling) {
                return Err(BenchError::FlatCeiling {
                    key_count: c * c,
                    ceiling: self.flat_ceiling,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub key_count: usize,
    pub n_sub: usize,
    pub query_dim: usize,
    pub k: usize,
    pub heads: usize,
    pub mode: KeyKind,
    pub qps_single: f64,
    pub qps_multi: f64,
    pub threads: usize,
    /// Per query, summed over heads.
    pub ops: OpCounter,
    pub ops_match_formula: bool,
    pub exact_checked: usize,
    pub mismatches: usize,
}

impl BenchRow {
    pub fn exact(&self) -> bool {
        self.mismatches == 0
    }

    pub fn record(&self, precision: &str) -> Record {
        Record::new("bench")
            .with("keys", self.key_count)
            .with("subkeys", self.n_sub)
            .with("dq", self.query_dim)
            .with("k", self.k)
            .with("heads", self.heads)
            .with(
                "mode",
                match self.mode {
                    KeyKind::Product => "product",
                    KeyKind::Flat => "flat",
                },
            )
            .with("precision", precision)
            .with("qps_single", format!("{:.1}", self.qps_single))
            .with("qps_multi", format!("{:.1}", self.qps_multi))
            .with("threads", self.threads)
            .with("mul_adds", self.ops.mul_adds)
            .with("candidate_adds", self.ops.candidate_adds)
            .with("ops_match", self.ops_match_formula)
            .with("exact_checked", self.exact_checked)
            .with("mismatches", self.mismatches)
            .with("exact", self.exact())
    }
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| lit::<T>(rng.gen_range(-bound..=bound))).collect();
    Tensor::from_vec(&[rows, cols], data).expect("shape by construction")
}

/// Random index with the memory layer's sub-key initialization.
pub fn random_index<T: Scalar>(rng: &mut ChaCha8Rng, n_sub: usize, query_dim: usize) -> ProductKeyIndex<T> {
    let half = query_dim / 2;
    let bound = 1.0 / (half as f64).sqrt();
    ProductKeyIndex::from_tensors(uniform(rng, n_sub, half, bound), uniform(rng, n_sub, half, bound))
        .expect("valid random codebooks")
}

pub fn random_queries<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, query_dim: usize) -> Tensor<T> {
    uniform(rng, n, query_dim, 1.0)
}

/// Repeats `pass` until `min_seconds` have elapsed; returns seconds per pass.
pub fn time_passes(min_seconds: f64, mut pass: impl FnMut()) -> f64 {
    pass();
    let start = Instant::now();
    let mut n = 0u32;
    loop {
        pass();
        n += 1;
        let elapsed = start.elapsed().as_secs_f64();
        if elapsed >= min_seconds {
            return elapsed / n as f64;
        }
    }
}

/// Exact top-k over all `|C|·|C′|` half-score sums, without pruning.
pub fn enumerated_oracle(query: &[f64], index: &ProductKeyIndex<f64>, k: usize) -> pkm_core::Result<TopKSelection<f64>> {
    let (q1, q2) = query.split_at(index.sub_dim());
    let s1: Vec<f64> = (0..index.codebook_1().n_sub()).map(|i| pkm_core::tensor::dot(q1, index.codebook_1().row(i))).collect();
    let s2: Vec<f64> = (0..index.codebook_2().n_sub()).map(|j| pkm_core::tensor::dot(q2, index.codebook_2().row(j))).collect();
    let all: Vec<f64> = s1.iter().flat_map(|a| s2.iter().map(move |b| a + b)).collect();
    top_k(&all, k)
}

/// Whether two selections agree, allowing index swaps only between scores
/// equal within `tol`.
pub fn same_selection(a: &TopKSelection<f64>, b: &TopKSelection<f64>, tol: f64) -> bool {
    a.indices.len() == b.indices.len()
        && a.indices.iter().zip(&b.indices).zip(a.scores.iter().zip(&b.scores)).all(|((ia, ib), (sa, sb))| {
            (sa - sb).abs() <= tol && (ia == ib || b.scores.iter().zip(&b.indices).any(|(s, i)| i == ia && (s - sa).abs() <= tol))
        })
}

/// Compares product search against an exhaustive oracle in double precision.
/// Returns the number of mismatching queries.
pub fn exactness_check<T: Scalar>(
    index: &ProductKeyIndex<T>,
    queries: &Tensor<T>,
    k: usize,
    flat_ceiling: usize,
) -> pkm_core::Result<usize> {
    let index = ProductKeyIndex::<f64>::from_tensors(index.codebook_1().vectors().cast(), index.codebook_2().vectors().cast())?;
    let queries: Tensor<f64> = queries.cast();
    let flat = (index.key_count() <= flat_ceiling).then(|| index.materialize());
    let mut mismatches = 0;
    for r in 0..queries.rows() {
        let q = queries.row(r);
        let got = product_search(q, &index, k)?;
        let want = match &flat {
            Some(keys) => flat_search(q, keys, k)?,
            None => enumerated_oracle(q, &index, k)?,
        };
        let tol = 4.0 * f64::EPSILON * q.iter().map(|v| v.abs()).sum::<f64>();
        if !same_selection(&got, &want, tol) {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool, BenchError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| BenchError::Pool(e.to_string()))
}

pub fn run_bench<T: Scalar>(config: &BenchConfig) -> Result<Vec<BenchRow>, BenchError> {
    config.validate()?;
    let single = pool(Some(1))?;
    let multi = pool(config.threads)?;
    let mut rows = Vec::new();
    for &n_sub in &config.subkeys {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (n_sub as u64).rotate_left(32));
        let (dq, k) = (config.query_dim, config.k);
        let indices: Vec<ProductKeyIndex<T>> = (0..config.heads).map(|_| random_index(&mut rng, n_sub, dq)).collect();
        let queries = random_queries::<T>(&mut rng, config.queries, dq);
        let samples = random_queries::<T>(&mut rng, config.exact_samples, dq);
        for &mode in &config.modes {
            let (secs_single, secs_multi, ops, ops_match, mismatches, checked) = match mode {
                KeyKind::Product => {
                    let pass = || {
                        for idx in &indices {
                            std::hint::black_box(product_search_batch(&queries, idx, k).expect("validated"));
                        }
                    };
                    let t1 = single.install(|| time_passes(config.min_seconds, pass));
                    let tn = multi.install(|| time_passes(config.min_seconds, pass));
                    let mut ops = OpCounter::default();
                    let mut one = OpCounter::default();
                    for idx in &indices {
                        product_search_instrumented(queries.row(0), idx, k, &mut one)?;
                        ops.mul_adds += one.mul_adds;
                        ops.candidate_adds += one.candidate_adds;
                    }
                    let expected = OpCounter::expected_product(n_sub, n_sub, dq, k);
                    let matches = ops.mul_adds == expected.mul_adds * config.heads as u64
                        && ops.candidate_adds == expected.candidate_adds * config.heads as u64;
                    let mut mismatches = 0;
                    for idx in &indices {
                        mismatches += exactness_check(idx, &samples, k, config.flat_ceiling)?;
                    }
                    (t1, tn, ops, matches, mismatches, samples.rows() * config.heads)
                }
                KeyKind::Flat => {
                    let keys: Vec<Tensor<T>> = indices.iter().map(|i| i.materialize()).collect();
                    let pass = || {
                        for key in &keys {
                            std::hint::black_box(flat_search_batch(&queries, key, k).expect("validated"));
                        }
                    };
                    let t1 = single.install(|| time_passes(config.min_seconds, pass));
                    let tn = multi.install(|| time_passes(config.min_seconds, pass));
                    let mut ops = OpCounter::default();
                    let mut one = OpCounter::default();
                    for key in &keys {
                        flat_search_instrumented(queries.row(0), key, k, &mut one)?;
                        ops.mul_adds += one.mul_adds;
                    }
                    let matches = ops.mul_adds == OpCounter::expected_flat(n_sub * n_sub, dq).mul_adds * config.heads as u64;
                    (t1, tn, ops, matches, 0, 0)
                }
            };
            let n = config.queries as f64;
            rows.push(BenchRow {
                key_count: n_sub * n_sub,
                n_sub,
                query_dim: dq,
                k,
                heads: config.heads,
                mode,
                qps_single: n / secs_single,
                qps_multi: n / secs_multi,
                threads: multi.current_num_threads(),
                ops,
                ops_match_formula: ops_match,
                exact_checked: checked,
                mismatches,
            });
        }
    }
    Ok(rows)
}
