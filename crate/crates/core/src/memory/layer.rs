//! The multi-head product-key memory layer.
//!
//! Each head owns a query network and a key set; all heads read from one
//! shared value table. Per head and input row:
//!
//! ```text
//! I    = top-k key indices for q(x)
//! w    = softmax(q(x) · k_i, i ∈ I)
//! m(x) = Σ_heads Σ_{i∈I} w_i v_i
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, PkmError, Result};
use crate::memory::query::{QueryCache, QueryNetwork};
use crate::optim::{SparseRows, ValueTable};
use crate::params::{join, Mode, Named, NamedMut, Parameters};
use crate::pk_index::{flat_search, product_search, ProductKeyIndex, TopKSelection};
use crate::scalar::{lit, Scalar};
use crate::tensor::{axpy, dot, softmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyKind {
    /// Cartesian product of two sub-key codebooks.
    Product,
    /// `|K|` explicit keys searched exhaustively (ablation baseline).
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryConfig {
    /// Model dimension `d` (query input and value width).
    pub input_dim: usize,
    /// Query dimension `dq`; must be even.
    pub query_dim: usize,
    /// Sub-keys per codebook `|C|`; the layer has `|C|²` slots.
    pub n_sub: usize,
    pub heads: usize,
    pub k: usize,
    pub batch_norm: bool,
    pub keys: KeyKind,
}

impl MemoryConfig {
    pub fn key_count(&self) -> usize {
        self.n_sub * self.n_sub
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.query_dim == 0 || self.n_sub == 0 || self.heads == 0 {
            return invalid_arg(format!("memory dimensions must be positive: {self:?}"));
        }
        if self.query_dim % 2 != 0 {
            return invalid_arg(format!("query dimension {} must be even", self.query_dim));
        }
        if self.k < 1 || self.k > self.n_sub {
            return invalid_arg(format!("k = {} must lie in [1, {}]", self.k, self.n_sub));
        }
        Ok(())
    }

    /// Trainable parameter count, values included.
    pub fn param_count(&self) -> usize {
        let (d, dq, h) = (self.input_dim, self.query_dim, self.heads);
        let query = dq * d + dq + if self.batch_norm { 2 * dq } else { 0 };
        let keys = match self.keys {
            KeyKind::Product => 2 * self.n_sub * dq / 2,
            KeyKind::Flat => self.key_count() * dq,
        };
        h * (query + keys) + self.key_count() * d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KeyStore<T> {
    Product(ProductKeyIndex<T>),
    /// Shape `(|K|, dq)`.
    Flat(Tensor<T>),
}

impl<T: Scalar> KeyStore<T> {
    pub fn key_count(&self) -> usize {
        match self {
            KeyStore::Product(index) => index.key_count(),
            KeyStore::Flat(keys) => keys.rows(),
        }
    }

    pub fn search(&self, query: &[T], k: usize) -> Result<TopKSelection<T>> {
        match self {
            KeyStore::Product(index) => product_search(query, index, k),
            KeyStore::Flat(keys) => flat_search(query, keys, k),
        }
    }

    /// Same keys, stored explicitly.
    pub fn to_flat(&self) -> KeyStore<T> {
        match self {
            KeyStore::Product(index) => KeyStore::Flat(index.materialize()),
            KeyStore::Flat(keys) => KeyStore::Flat(keys.clone()),
        }
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.named_params_mut("").into_iter().for_each(|(_, t)| t.fill_zero());
        z
    }

    fn named_params_mut(&mut self, prefix: &str) -> NamedMut<'_, T> {
        match self {
            KeyStore::Product(index) => {
                let (c1, c2) = index.codebooks_mut();
                vec![
                    (join(prefix, "subkeys_1"), c1.vectors_mut()),
                    (join(prefix, "subkeys_2"), c2.vectors_mut()),
                ]
            }
            KeyStore::Flat(keys) => vec![(join(prefix, "keys"), keys)],
        }
    }

    fn named_params(&self, prefix: &str) -> Named<'_, T> {
        match self {
            KeyStore::Product(index) => vec![
                (join(prefix, "subkeys_1"), index.codebook_1().vectors()),
                (join(prefix, "subkeys_2"), index.codebook_2().vectors()),
            ],
            KeyStore::Flat(keys) => vec![(join(prefix, "keys"), keys)],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryHead<T> {
    pub query: QueryNetwork<T>,
    pub keys: KeyStore<T>,
}

impl<T: Scalar> Parameters<T> for MemoryHead<T> {
    fn named_params(&self, prefix: &str) -> Named<'_, T> {
        let mut out = self.query.named_params(&join(prefix, "query"));
        out.extend(self.keys.named_params(prefix));
        out
    }

    fn named_params_mut(&mut self, prefix: &str) -> NamedMut<'_, T> {
        let mut out = self.query.named_params_mut(&join(prefix, "query"));
        out.extend(self.keys.named_params_mut(prefix));
        out
    }

    fn named_buffers(&self, prefix: &str) -> Named<'_, T> {
        self.query.named_buffers(&join(prefix, "query"))
    }

    fn named_buffers_mut(&mut self, prefix: &str) -> NamedMut<'_, T> {
        self.query.named_buffers_mut(&join(prefix, "query"))
    }
}

fn heads_named<'a, T: Scalar>(heads: &'a [MemoryHead<T>], prefix: &str) -> Named<'a, T> {
    heads
        .iter()
        .enumerate()
        .flat_map(|(h, head)| head.named_params(&join(prefix, &format!("head{h}"))))
        .collect()
}

fn heads_named_mut<'a, T: Scalar>(heads: &'a mut [MemoryHead<T>], prefix: &str) -> NamedMut<'a, T> {
    heads
        .iter_mut()
        .enumerate()
        .flat_map(|(h, head)| head.named_params_mut(&join(prefix, &format!("head{h}"))))
        .collect()
}

/// Per-head selections of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRecord<T> {
    /// `(n, dq)` queries after batch norm.
    pub queries: Tensor<T>,
    /// `n · k` flat key indices, row-major by input row.
    pub indices: Vec<usize>,
    /// Pre-softmax scores aligned with `indices`.
    pub scores: Vec<T>,
    /// Softmax weights aligned with `indices`.
    pub weights: Vec<T>,
    pub query_cache: QueryCache<T>,
}

/// Everything the backward pass and the access metrics need.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryForwardRecord<T> {
    pub mode: Mode,
    pub k: usize,
    pub key_count: usize,
    pub input: Tensor<T>,
    pub heads: Vec<HeadRecord<T>>,
}

impl<T: Scalar> MemoryForwardRecord<T> {
    pub fn rows(&self) -> usize {
        self.input.rows()
    }

    /// Selected `(indices, weights)` of head `h` for input row `r`.
    pub fn selection(&self, h: usize, r: usize) -> (&[usize], &[T]) {
        let k = self.k;
        let head = &self.heads[h];
        (&head.indices[r * k..(r + 1) * k], &head.weights[r * k..(r + 1) * k])
    }

    /// Mean over rows of the fraction of selected slots picked by at least two heads.
    pub fn head_overlap(&self) -> f64 {
        if self.heads.len() < 2 || self.rows() == 0 {
            return 0.0;
        }
        let mut total = 0.0;
        for r in 0..self.rows() {
            let mut picked: Vec<usize> = (0..self.heads.len()).flat_map(|h| self.selection(h, r).0.to_vec()).collect();
            picked.sort_unstable();
            let mut distinct = 0usize;
            let mut shared = 0usize;
            let mut i = 0;
            while i < picked.len() {
                let mut j = i;
                while j < picked.len() && picked[j] == picked[i] {
                    j += 1;
                }
                distinct += 1;
                if j - i >= 2 {
                    shared += 1;
                }
                i = j;
            }
            total += shared as f64 / distinct as f64;
        }
        total / self.rows() as f64
    }
}

/// Gradients of one memory layer. Head gradients reuse the head type.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryGrads<T> {
    pub heads: Vec<MemoryHead<T>>,
    pub values: SparseRows<T>,
}

impl<T: Scalar> Parameters<T> for MemoryGrads<T> {
    fn named_params(&self, prefix: &str) -> Named<'_, T> {
        heads_named(&self.heads, prefix)
    }

    fn named_params_mut(&mut self, prefix: &str) -> NamedMut<'_, T> {
        heads_named_mut(&mut self.heads, prefix)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryLayer<T> {
    pub config: MemoryConfig,
    pub heads: Vec<MemoryHead<T>>,
    pub values: ValueTable<T>,
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| lit::<T>(rng.gen_range(-bound..=bound))).collect();
    Tensor::from_vec(shape, data).expect("shape by construction")
}

/// Builds a memory layer deterministically from `seed`.
///
/// Sub-keys are uniform in `±1/√(dq/2)` (flat keys: `±1/√dq`); query weights
/// and values are uniform in `±1/√d`; query biases start at zero.
pub fn init_memory<T: Scalar>(seed: u64, config: MemoryConfig) -> Result<MemoryLayer<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, dq, n_sub) = (config.input_dim, config.query_dim, config.n_sub);
    let fan_in = 1.0 / (d as f64).sqrt();
    let mut heads = Vec::with_capacity(config.heads);
    for _ in 0..config.heads {
        let query = QueryNetwork::new(uniform(&mut rng, &[dq, d], fan_in), Tensor::zeros(&[dq]), config.batch_norm)?;
        let keys = match config.keys {
            KeyKind::Product => {
                let bound = 1.0 / ((dq / 2) as f64).sqrt();
                let c1 = uniform(&mut rng, &[n_sub, dq / 2], bound);
                let c2 = uniform(&mut rng, &[n_sub, dq / 2], bound);
                KeyStore::Product(ProductKeyIndex::from_tensors(c1, c2)?)
            }
            KeyKind::Flat => KeyStore::Flat(uniform(&mut rng, &[config.key_count(), dq], 1.0 / (dq as f64).sqrt())),
        };
        heads.push(MemoryHead { query, keys });
    }
    let values = ValueTable::new(uniform(&mut rng, &[config.key_count(), d], fan_in));
    MemoryLayer::new(config, heads, values)
}

impl<T: Scalar> MemoryLayer<T> {
    pub fn new(config: MemoryConfig, heads: Vec<MemoryHead<T>>, values: ValueTable<T>) -> Result<Self> {
        config.validate()?;
        if heads.len() != config.heads {
            return invalid_arg(format!("expected {} heads, got {}", config.heads, heads.len()));
        }
        for (h, head) in heads.iter().enumerate() {
            if head.keys.key_count() != config.key_count() {
                return invalid_arg(format!("head {h} has {} keys, expected {}", head.keys.key_count(), config.key_count()));
            }
            if head.query.query_dim() != config.query_dim || head.query.input_dim() != config.input_dim {
                return invalid_arg(format!("head {h} query network shape does not match config"));
            }
        }
        if values.rows() != config.key_count() || values.dim() != config.input_dim {
            return invalid_arg(format!(
                "value table is {}x{}, expected {}x{}",
                values.rows(),
                values.dim(),
                config.key_count(),
                config.input_dim
            ));
        }
        Ok(MemoryLayer { config, heads, values })
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    /// Forward pass without side effects on running statistics.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, MemoryForwardRecord<T>)> {
        let (n, d) = (x.rows(), self.config.input_dim);
        if x.shape().len() != 2 || x.cols() != d {
            return invalid_arg(format!("memory input must be (n, {d}), got {:?}", x.shape()));
        }
        if !x.all_finite() {
            return Err(PkmError::InvalidInput("memory input contains non-finite entries".into()));
        }
        let k = self.config.k;
        let mut out = Tensor::zeros(&[n, d]);
        let mut records = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (queries, query_cache) = head.query.forward(x, mode)?;
            if !queries.all_finite() {
                return Err(PkmError::InvalidInput("query network produced non-finite queries".into()));
            }
            let selections: Vec<TopKSelection<T>> = (0..n)
                .into_par_iter()
                .map(|r| head.keys.search(queries.row(r), k))
                .collect::<Result<_>>()?;
            let mut indices = Vec::with_capacity(n * k);
            let mut scores = Vec::with_capacity(n * k);
            let mut weights = Vec::with_capacity(n * k);
            let mut head_out = Tensor::zeros(&[n, d]);
            for (r, sel) in selections.into_iter().enumerate() {
                let w = softmax(&sel.scores);
                let row = head_out.row_mut(r);
                for (&i, &wi) in sel.indices.iter().zip(&w) {
                    axpy(wi, self.values.row(i), row);
                }
                indices.extend(sel.indices);
                scores.extend(sel.scores);
                weights.extend(w);
            }
            out.add_assign(&head_out);
            records.push(HeadRecord {
                queries,
                indices,
                scores,
                weights,
                query_cache,
            });
        }
        let record = MemoryForwardRecord {
            mode,
            k,
            key_count: self.config.key_count(),
            input: x.clone(),
            heads: records,
        };
        Ok((out, record))
    }

    /// Applies the running-statistics updates of a train-mode forward.
    pub fn commit(&mut self, record: &MemoryForwardRecord<T>) {
        for (head, rec) in self.heads.iter_mut().zip(&record.heads) {
            head.query.commit(&rec.query_cache);
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, MemoryForwardRecord<T>)> {
        let (out, record) = self.forward(x, Mode::Train)?;
        self.commit(&record);
        Ok((out, record))
    }

    /// Eval-mode forward; read-only.
    pub fn infer(&self, x: &Tensor<T>) -> Result<(Tensor<T>, MemoryForwardRecord<T>)> {
        self.forward(x, Mode::Eval)
    }

    pub fn zero_grads(&self) -> MemoryGrads<T> {
        MemoryGrads {
            heads: self
                .heads
                .iter()
                .map(|h| MemoryHead {
                    query: h.query.zeros_like(),
                    keys: h.keys.zeros_like(),
                })
                .collect(),
            values: SparseRows::new(self.config.input_dim),
        }
    }

    /// Gradients of `Σ grad_out ⊙ m(x)`; returns parameter gradients and `d/dx`.
    ///
    /// Selections are constants: gradients reach keys and queries only through
    /// the selected scores.
    pub fn backward(&self, record: &MemoryForwardRecord<T>, grad_out: &Tensor<T>) -> Result<(MemoryGrads<T>, Tensor<T>)> {
        let (n, d, k) = (record.rows(), self.config.input_dim, record.k);
        if grad_out.shape() != [n, d] {
            return invalid_arg(format!("grad_out is {:?}, expected [{n}, {d}]", grad_out.shape()));
        }
        if record.heads.len() != self.heads.len() || k != self.config.k {
            return invalid_arg("forward record does not belong to this layer");
        }
        let mut grads = self.zero_grads();
        let mut dx = Tensor::zeros(&[n, d]);
        let mut dw = vec![T::zero(); k];
        for (h, (head, rec)) in self.heads.iter().zip(&record.heads).enumerate() {
            let dq = self.config.query_dim;
            let mut grad_q = Tensor::zeros(&[n, dq]);
            let gkeys = &mut grads.heads[h].keys;
            let gvalues = &mut grads.values;
            for r in 0..n {
                let g = grad_out.row(r);
                let sel = &rec.indices[r * k..(r + 1) * k];
                let w = &rec.weights[r * k..(r + 1) * k];
                for j in 0..k {
                    dw[j] = dot(g, self.values.row(sel[j]));
                    gvalues.accumulate(sel[j], w[j], g);
                }
                let mean: T = (0..k).map(|j| w[j] * dw[j]).sum();
                let q = rec.queries.row(r);
                for j in 0..k {
                    let ds = w[j] * (dw[j] - mean);
                    if ds == T::zero() {
                        continue;
                    }
                    match (&head.keys, &mut *gkeys) {
                        (KeyStore::Product(index), KeyStore::Product(gindex)) => {
                            let (a, b) = index.decompose_index(sel[j])?;
                            let half = index.sub_dim();
                            let gq = grad_q.row_mut(r);
                            axpy(ds, index.codebook_1().row(a), &mut gq[..half]);
                            axpy(ds, index.codebook_2().row(b), &mut gq[half..]);
                            let (g1, g2) = gindex.codebooks_mut();
                            axpy(ds, &q[..half], g1.vectors_mut().row_mut(a));
                            axpy(ds, &q[half..], g2.vectors_mut().row_mut(b));
                        }
                        (KeyStore::Flat(keys), KeyStore::Flat(gkeys)) => {
                            axpy(ds, keys.row(sel[j]), grad_q.row_mut(r));
                            axpy(ds, q, gkeys.row_mut(sel[j]));
                        }
                        _ => unreachable!("gradient keys mirror layer keys"),
                    }
                }
            }
            let dx_head = head.query.backward(&record.input, &rec.query_cache, &grad_q, &mut grads.heads[h].query);
            dx.add_assign(&dx_head);
        }
        Ok((grads, dx))
    }
}

impl<T: Scalar> Parameters<T> for MemoryLayer<T> {
    /// Values are excluded: they belong to the sparse value optimizer.
    fn named_params(&self, prefix: &str) -> Named<'_, T> {
        heads_named(&self.heads, prefix)
    }

    fn named_params_mut(&mut self, prefix: &str) -> NamedMut<'_, T> {
        heads_named_mut(&mut self.heads, prefix)
    }

    fn named_buffers(&self, prefix: &str) -> Named<'_, T> {
        self.heads
            .iter()
            .enumerate()
            .flat_map(|(h, head)| head.named_buffers(&join(prefix, &format!("head{h}"))))
            .collect()
    }

    fn named_buffers_mut(&mut self, prefix: &str) -> NamedMut<'_, T> {
        self.heads
            .iter_mut()
            .enumerate()
            .flat_map(|(h, head)| head.named_buffers_mut(&join(prefix, &format!("head{h}"))))
            .collect()
    }
}
