//! Exact top-k maximum inner product search over product keys.
//!
//! A product key is the concatenation `(c_i ∥ c'_j)` of one row from each of two
//! sub-key codebooks, so `|K| = |C| · |C'|` keys exist without being stored.
//! The top-k product keys of a query are always among the `k²` pairs formed by
//! the top-k rows of each codebook against the matching query half, which is
//! what [`product_search`] exploits.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, PkmError, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, Tensor};

/// One factor of the product key set: `n_sub` rows of half query dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubKeyCodebook<T> {
    vectors: Tensor<T>,
}

impl<T: Scalar> SubKeyCodebook<T> {
    pub fn new(vectors: Tensor<T>) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() == 0 || vectors.cols() == 0 {
            return invalid_arg(format!("codebook must be a non-empty matrix, got shape {:?}", vectors.shape()));
        }
        if !vectors.all_finite() {
            return Err(PkmError::InvalidInput("codebook contains non-finite entries".into()));
        }
        Ok(SubKeyCodebook { vectors })
    }

    pub fn n_sub(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.vectors.row(i)
    }

    pub fn vectors(&self) -> &Tensor<T> {
        &self.vectors
    }

    /// Mutable access for training updates. Callers must keep entries finite.
    pub fn vectors_mut(&mut self) -> &mut Tensor<T> {
        &mut self.vectors
    }

    fn scores(&self, sub_query: &[T], counter: &mut Option<&mut OpCounter>) -> Vec<T> {
        if let Some(c) = counter.as_deref_mut() {
            c.mul_adds += (self.n_sub() * self.dim()) as u64;
        }
        (0..self.n_sub()).map(|i| dot(sub_query, self.row(i))).collect()
    }
}

/// Two codebooks whose Cartesian product is the key set.
///
/// Flat key numbering is row-major: `(i, j) ↦ i · |C'| + j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductKeyIndex<T> {
    codebook_1: SubKeyCodebook<T>,
    codebook_2: SubKeyCodebook<T>,
}

impl<T: Scalar> ProductKeyIndex<T> {
    pub fn new(codebook_1: SubKeyCodebook<T>, codebook_2: SubKeyCodebook<T>) -> Result<Self> {
        if codebook_1.dim() != codebook_2.dim() {
            return invalid_arg(format!(
                "codebooks disagree on sub-key dimension: {} vs {}",
                codebook_1.dim(),
                codebook_2.dim()
            ));
        }
        Ok(ProductKeyIndex { codebook_1, codebook_2 })
    }

    /// Convenience constructor from two row-major matrices.
    pub fn from_tensors(c1: Tensor<T>, c2: Tensor<T>) -> Result<Self> {
        Self::new(SubKeyCodebook::new(c1)?, SubKeyCodebook::new(c2)?)
    }

    pub fn codebook_1(&self) -> &SubKeyCodebook<T> {
        &self.codebook_1
    }

    pub fn codebook_2(&self) -> &SubKeyCodebook<T> {
        &self.codebook_2
    }

    pub fn codebooks_mut(&mut self) -> (&mut SubKeyCodebook<T>, &mut SubKeyCodebook<T>) {
        (&mut self.codebook_1, &mut self.codebook_2)
    }

    pub fn key_count(&self) -> usize {
        self.codebook_1.n_sub() * self.codebook_2.n_sub()
    }

    pub fn sub_dim(&self) -> usize {
        self.codebook_1.dim()
    }

    pub fn query_dim(&self) -> usize {
        2 * self.sub_dim()
    }

    pub fn compose_index(&self, i: usize, j: usize) -> Result<usize> {
        let (n1, n2) = (self.codebook_1.n_sub(), self.codebook_2.n_sub());
        if i >= n1 || j >= n2 {
            return invalid_arg(format!("sub-key pair ({i}, {j}) out of range for {n1}x{n2} codebooks"));
        }
        Ok(i * n2 + j)
    }

    pub fn decompose_index(&self, flat: usize) -> Result<(usize, usize)> {
        if flat >= self.key_count() {
            return invalid_arg(format!("flat index {flat} out of range for {} keys", self.key_count()));
        }
        let n2 = self.codebook_2.n_sub();
        Ok((flat / n2, flat % n2))
    }

    /// Explicit `(|K|, dq)` key matrix. Only for oracles and the flat baseline.
    pub fn materialize(&self) -> Tensor<T> {
        let (n1, n2, h) = (self.codebook_1.n_sub(), self.codebook_2.n_sub(), self.sub_dim());
        let mut keys = Vec::with_capacity(n1 * n2 * 2 * h);
        for i in 0..n1 {
            for j in 0..n2 {
                keys.extend_from_slice(self.codebook_1.row(i));
                keys.extend_from_slice(self.codebook_2.row(j));
            }
        }
        Tensor::from_vec(&[n1 * n2, 2 * h], keys).expect("shape by construction")
    }
}

/// Selected indices with their scores, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKSelection<T> {
    pub indices: Vec<usize>,
    pub scores: Vec<T>,
}

impl<T> TopKSelection<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Scalar work performed by one instrumented search.
///
/// `mul_adds` counts multiply-accumulates of inner products; `candidate_adds`
/// counts the additions that score the `k²` candidate pairs from sub-scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub mul_adds: u64,
    pub candidate_adds: u64,
}

impl OpCounter {
    pub fn reset(&mut self) {
        *self = OpCounter::default();
    }

    pub fn total(&self) -> u64 {
        self.mul_adds + self.candidate_adds
    }

    /// Closed-form cost of [`product_search`].
    pub fn expected_product(n_sub_1: usize, n_sub_2: usize, query_dim: usize, k: usize) -> OpCounter {
        OpCounter {
            mul_adds: ((n_sub_1 + n_sub_2) * (query_dim / 2)) as u64,
            candidate_adds: (k * k) as u64,
        }
    }

    /// Closed-form cost of [`flat_search`].
    pub fn expected_flat(key_count: usize, query_dim: usize) -> OpCounter {
        OpCounter {
            mul_adds: (key_count * query_dim) as u64,
            candidate_adds: 0,
        }
    }
}

/// Score descending, then index ascending.
#[inline]
fn rank_order<T: Scalar>(a: &(usize, T), b: &(usize, T)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// Top-k of `scores`, where position `p` stands for key `index_of(p)`.
/// Ties go to the lower key index.
///
/// Items are buffered up to `2k`; each time the buffer fills it is cut back
/// to its best `k`, and the `k`-th item becomes a rejection threshold.
fn select_top<T: Scalar>(scores: &[T], k: usize, index_of: impl Fn(usize) -> usize) -> TopKSelection<T> {
    let cap = 2 * k;
    let head = cap.min(scores.len());
    let mut buf: Vec<(usize, T)> = Vec::with_capacity(head);
    buf.extend(scores[..head].iter().enumerate().map(|(p, &v)| (index_of(p), v)));
    if head < scores.len() {
        buf.select_nth_unstable_by(k - 1, rank_order);
        buf.truncate(k);
        let (mut ki, mut kv) = buf[k - 1];
        for (p, &v) in scores.iter().enumerate().skip(head) {
            if v < kv {
                continue;
            }
            let i = index_of(p);
            if v == kv && i > ki {
                continue;
            }
            buf.push((i, v));
            if buf.len() == cap {
                buf.select_nth_unstable_by(k - 1, rank_order);
                buf.truncate(k);
                (ki, kv) = buf[k - 1];
            }
        }
    }
    if buf.len() > k {
        buf.select_nth_unstable_by(k - 1, rank_order);
        buf.truncate(k);
    }
    buf.sort_unstable_by(rank_order);
    let (indices, scores) = buf.into_iter().unzip();
    TopKSelection { indices, scores }
}

/// Indices of the `k` largest scores, best first, lower index on ties.
pub fn top_k<T: Scalar>(scores: &[T], k: usize) -> Result<TopKSelection<T>> {
    if k < 1 || k > scores.len() {
        return invalid_arg(format!("k = {k} must lie in [1, {}]", scores.len()));
    }
    if let Some(pos) = scores.iter().position(|s| !s.is_finite()) {
        return Err(PkmError::InvalidInput(format!("score at position {pos} is not finite")));
    }
    Ok(select_top(scores, k, |p| p))
}

fn check_query<T: Scalar>(query: &[T], dim: usize) -> Result<()> {
    if query.len() != dim {
        return invalid_arg(format!("query has dimension {}, expected {dim}", query.len()));
    }
    if query.iter().any(|v| !v.is_finite()) {
        return Err(PkmError::InvalidInput("query contains non-finite entries".into()));
    }
    Ok(())
}

fn flat_search_impl<T: Scalar>(
    query: &[T],
    keys: &Tensor<T>,
    k: usize,
    counter: Option<&mut OpCounter>,
) -> Result<TopKSelection<T>> {
    if keys.shape().len() != 2 {
        return invalid_arg("keys must be a matrix");
    }
    check_query(query, keys.cols())?;
    if let Some(c) = counter {
        c.mul_adds += (keys.rows() * keys.cols()) as u64;
    }
    let scores: Vec<T> = (0..keys.rows()).map(|i| dot(query, keys.row(i))).collect();
    top_k(&scores, k)
}

/// Exhaustive top-k over an explicit key matrix of shape `(n, dq)`.
pub fn flat_search<T: Scalar>(query: &[T], keys: &Tensor<T>, k: usize) -> Result<TopKSelection<T>> {
    flat_search_impl(query, keys, k, None)
}

pub fn flat_search_instrumented<T: Scalar>(
    query: &[T],
    keys: &Tensor<T>,
    k: usize,
    counter: &mut OpCounter,
) -> Result<TopKSelection<T>> {
    counter.reset();
    flat_search_impl(query, keys, k, Some(counter))
}

fn product_search_impl<T: Scalar>(
    query: &[T],
    index: &ProductKeyIndex<T>,
    k: usize,
    mut counter: Option<&mut OpCounter>,
) -> Result<TopKSelection<T>> {
    check_query(query, index.query_dim())?;
    let (n1, n2) = (index.codebook_1.n_sub(), index.codebook_2.n_sub());
    if k < 1 || k > n1.min(n2) {
        return invalid_arg(format!("k = {k} must lie in [1, min({n1}, {n2})]"));
    }
    let (q1, q2) = query.split_at(index.sub_dim());
    let top_1 = top_k(&index.codebook_1.scores(q1, &mut counter), k)?;
    let top_2 = top_k(&index.codebook_2.scores(q2, &mut counter), k)?;

    let mut sums = Vec::with_capacity(k * k);
    for &s1 in &top_1.scores {
        sums.extend(top_2.scores.iter().map(|&s2| s1 + s2));
    }
    if let Some(c) = counter {
        c.candidate_adds += sums.len() as u64;
    }
    Ok(select_top(&sums, k, |p| top_1.indices[p / k] * n2 + top_2.indices[p % k]))
}

/// Exact top-k product keys of `query`; indices are flat product-key indices.
pub fn product_search<T: Scalar>(query: &[T], index: &ProductKeyIndex<T>, k: usize) -> Result<TopKSelection<T>> {
    product_search_impl(query, index, k, None)
}

pub fn product_search_instrumented<T: Scalar>(
    query: &[T],
    index: &ProductKeyIndex<T>,
    k: usize,
    counter: &mut OpCounter,
) -> Result<TopKSelection<T>> {
    counter.reset();
    product_search_impl(query, index, k, Some(counter))
}

/// Searches every row of `queries` in parallel.
pub fn product_search_batch<T: Scalar>(
    queries: &Tensor<T>,
    index: &ProductKeyIndex<T>,
    k: usize,
) -> Result<Vec<TopKSelection<T>>> {
    (0..queries.rows())
        .into_par_iter()
        .map(|r| product_search(queries.row(r), index, k))
        .collect()
}

pub fn flat_search_batch<T: Scalar>(queries: &Tensor<T>, keys: &Tensor<T>, k: usize) -> Result<Vec<TopKSelection<T>>> {
    (0..queries.rows())
        .into_par_iter()
        .map(|r| flat_search(queries.row(r), keys, k))
        .collect()
}
