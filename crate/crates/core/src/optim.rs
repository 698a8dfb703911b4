//! Adam, dense and row-sparse.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{axpy, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Dense parameters: lr 2.5e-4, β = (0.9, 0.98).
    pub fn dense_default() -> Self {
        AdamConfig {
            lr: 2.5e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }

    /// Memory values get the higher rate of 1e-3.
    pub fn values_default() -> Self {
        AdamConfig {
            lr: 1e-3,
            ..Self::dense_default()
        }
    }
}

#[inline]
fn adam_elem<T: Scalar>(p: &mut T, m: &mut T, v: &mut T, g: T, cfg: &AdamConfig, lr: f64, t: i32) {
    let (b1, b2) = (lit::<T>(cfg.beta1), lit::<T>(cfg.beta2));
    *m = b1 * *m + (T::one() - b1) * g;
    *v = b2 * *v + (T::one() - b2) * g * g;
    let m_hat = *m / (T::one() - b1.powi(t));
    let v_hat = *v / (T::one() - b2.powi(t));
    *p -= lit::<T>(lr) * m_hat / (v_hat.sqrt() + lit::<T>(cfg.eps));
}

/// Dense Adam with one shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// One update at learning rate `lr`; `params` and `grads` are matched by position.
    pub fn update(&mut self, params: Vec<&mut Tensor<T>>, grads: &[&Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return invalid_arg(format!("{} parameters but {} gradients", params.len(), grads.len()));
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != params.len() {
            return invalid_arg("optimizer state does not match parameter list");
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[i].shape() {
                return invalid_arg(format!("shape mismatch for parameter #{i}: {:?} vs {:?}", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step.min(i32::MAX as u64) as i32;
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                adam_elem(pi, mi, vi, gi, &self.config, lr, t);
            }
        }
        Ok(())
    }
}

/// Gradient rows keyed by row index; untouched rows are implicitly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows<T> {
    dim: usize,
    rows: BTreeMap<usize, Vec<T>>,
}

impl<T: Scalar> SparseRows<T> {
    pub fn new(dim: usize) -> Self {
        SparseRows {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `row += alpha * x`
    pub fn accumulate(&mut self, row: usize, alpha: T, x: &[T]) {
        let dim = self.dim;
        let entry = self.rows.entry(row).or_insert_with(|| vec![T::zero(); dim]);
        axpy(alpha, x, entry);
    }

    pub fn insert(&mut self, row: usize, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.dim {
            return invalid_arg(format!("row gradient has width {}, expected {}", grad.len(), self.dim));
        }
        self.rows.insert(row, grad);
        Ok(())
    }

    pub fn get(&self, row: usize) -> Option<&[T]> {
        self.rows.get(&row).map(Vec::as_slice)
    }

    pub fn touched(&self) -> usize {
        self.rows.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.rows.iter().map(|(&r, g)| (r, g.as_slice()))
    }

    pub fn merge(&mut self, other: &SparseRows<T>) {
        for (r, g) in other.iter() {
            self.accumulate(r, T::one(), g);
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.rows.values().flatten().map(|v| (*v * *v).as_f64()).sum()
    }

    pub fn scale(&mut self, factor: T) {
        self.rows.values_mut().flatten().for_each(|v| *v *= factor);
    }
}

/// Value rows with lazily updated per-row Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable<T> {
    pub values: Tensor<T>,
    pub first_moment: Tensor<T>,
    pub second_moment: Tensor<T>,
    pub steps: Vec<u32>,
}

impl<T: Scalar> ValueTable<T> {
    pub fn new(values: Tensor<T>) -> Self {
        let shape = values.shape().to_vec();
        ValueTable {
            steps: vec![0; values.rows()],
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.values.row(i)
    }
}

/// Adam step applied only to the rows present in `grads`.
///
/// Each row keeps its own step count for bias correction. Rows absent from
/// `grads` keep their moments untouched (no decay catch-up).
pub fn sparse_value_update<T: Scalar>(table: &mut ValueTable<T>, grads: &SparseRows<T>, config: &AdamConfig) -> Result<()> {
    if grads.dim() != table.dim() {
        return invalid_arg(format!("gradient width {} does not match value width {}", grads.dim(), table.dim()));
    }
    if let Some((r, _)) = grads.iter().find(|(r, _)| *r >= table.rows()) {
        return invalid_arg(format!("gradient row {r} out of range for {} values", table.rows()));
    }
    for (r, g) in grads.iter() {
        table.steps[r] = table.steps[r].saturating_add(1);
        let t = table.steps[r].min(i32::MAX as u32) as i32;
        let p = table.values.row_mut(r);
        let m = table.first_moment.row_mut(r);
        let v = table.second_moment.row_mut(r);
        for c in 0..g.len() {
            adam_elem(&mut p[c], &mut m[c], &mut v[c], g[c], config, config.lr, t);
        }
    }
    Ok(())
}
