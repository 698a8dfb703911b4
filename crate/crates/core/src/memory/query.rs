//! Query network: a linear map `d → dq` optionally followed by batch normalization.

use crate::error::{invalid_arg, PkmError, Result};
use crate::params::{join, Mode, Named, NamedMut, Parameters};
use crate::scalar::{lit, Scalar};
use crate::tensor::{linear_backward, linear_forward, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

/// What the backward pass needs from a batch-norm forward.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormCache<T> {
    pub mode: Mode,
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: Tensor::from_vec(&[dim], vec![T::one(); dim]).expect("1-D"),
            beta: Tensor::zeros(&[dim]),
            running_mean: Tensor::zeros(&[dim]),
            running_var: Tensor::from_vec(&[dim], vec![T::one(); dim]).expect("1-D"),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, z: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        let (n, c) = (z.rows(), z.cols());
        if c != self.dim() {
            return invalid_arg(format!("batch norm over {} features got width {c}", self.dim()));
        }
        let eps = lit::<T>(self.epsilon);
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(PkmError::DegenerateBatch { rows: n });
                }
                let nf = lit::<T>(n as f64);
                let mut mean = vec![T::zero(); c];
                for r in 0..n {
                    for (m, &v) in mean.iter_mut().zip(z.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= nf);
                let mut var = vec![T::zero(); c];
                for r in 0..n {
                    for ((s, &v), &m) in var.iter_mut().zip(z.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= nf);
                (mean, var)
            }
            Mode::Eval => (self.running_mean.data().to_vec(), self.running_var.data().to_vec()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut normalized = Tensor::zeros(&[n, c]);
        let mut out = Tensor::zeros(&[n, c]);
        for r in 0..n {
            let zr = z.row(r);
            let xr = normalized.row_mut(r);
            for j in 0..c {
                xr[j] = (zr[j] - mean[j]) * inv_std[j];
            }
            let yr = out.row_mut(r);
            for j in 0..c {
                yr[j] = self.gamma.data()[j] * normalized.row(r)[j] + self.beta.data()[j];
            }
        }
        let cache = BatchNormCache {
            mode,
            normalized,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        };
        Ok((out, cache))
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, cache: &BatchNormCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let n = cache.normalized.rows();
        let m = lit::<T>(self.momentum);
        let unbias = lit::<T>(n as f64 / (n as f64 - 1.0));
        for j in 0..self.dim() {
            let rm = &mut self.running_mean.data_mut()[j];
            *rm = (T::one() - m) * *rm + m * cache.batch_mean[j];
            let rv = &mut self.running_var.data_mut()[j];
            *rv = (T::one() - m) * *rv + m * cache.batch_var[j] * unbias;
        }
    }

    /// Accumulates gamma/beta gradients into `grads` and returns `d/dz`.
    pub fn backward(&self, cache: &BatchNormCache<T>, grad_out: &Tensor<T>, grads: &mut BatchNorm<T>) -> Tensor<T> {
        let (n, c) = (grad_out.rows(), grad_out.cols());
        let xhat = &cache.normalized;
        let mut dxhat = Tensor::zeros(&[n, c]);
        for r in 0..n {
            let (g, x) = (grad_out.row(r), xhat.row(r));
            for j in 0..c {
                grads.gamma.data_mut()[j] += g[j] * x[j];
                grads.beta.data_mut()[j] += g[j];
                dxhat.row_mut(r)[j] = g[j] * self.gamma.data()[j];
            }
        }
        let mut dz = Tensor::zeros(&[n, c]);
        match cache.mode {
            Mode::Eval => {
                for r in 0..n {
                    for j in 0..c {
                        dz.row_mut(r)[j] = dxhat.row(r)[j] * cache.inv_std[j];
                    }
                }
            }
            Mode::Train => {
                let nf = lit::<T>(n as f64);
                let mut sum_d = vec![T::zero(); c];
                let mut sum_dx = vec![T::zero(); c];
                for r in 0..n {
                    for j in 0..c {
                        sum_d[j] += dxhat.row(r)[j];
                        sum_dx[j] += dxhat.row(r)[j] * xhat.row(r)[j];
                    }
                }
                for r in 0..n {
                    for j in 0..c {
                        let v = nf * dxhat.row(r)[j] - sum_d[j] - xhat.row(r)[j] * sum_dx[j];
                        dz.row_mut(r)[j] = v * cache.inv_std[j] / nf;
                    }
                }
            }
        }
        dz
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryNetwork<T> {
    /// Shape `(dq, d)`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub bn: Option<BatchNorm<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryCache<T> {
    pub bn: Option<BatchNormCache<T>>,
}

impl<T: Scalar> QueryNetwork<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, batch_norm: bool) -> Result<Self> {
        if weight.shape().len() != 2 || bias.len() != weight.rows() {
            return invalid_arg(format!(
                "query weight {:?} and bias {:?} disagree",
                weight.shape(),
                bias.shape()
            ));
        }
        if weight.rows() % 2 != 0 {
            return invalid_arg(format!("query dimension {} must be even", weight.rows()));
        }
        if !weight.all_finite() || !bias.all_finite() {
            return Err(PkmError::InvalidInput("query network has non-finite parameters".into()));
        }
        let bn = batch_norm.then(|| BatchNorm::new(weight.rows()));
        Ok(QueryNetwork { weight, bias, bn })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn query_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero_params();
        g
    }

    /// `q(x) = BN(Wx + b)`, or `Wx + b` without batch norm. Does not touch running stats.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, QueryCache<T>)> {
        if x.cols() != self.input_dim() {
            return invalid_arg(format!("input width {} does not match query network input {}", x.cols(), self.input_dim()));
        }
        let z = linear_forward(x, &self.weight, Some(&self.bias));
        match &self.bn {
            None => Ok((z, QueryCache { bn: None })),
            Some(bn) => {
                let (q, cache) = bn.forward(&z, mode)?;
                Ok((q, QueryCache { bn: Some(cache) }))
            }
        }
    }

    pub fn commit(&mut self, cache: &QueryCache<T>) {
        if let (Some(bn), Some(c)) = (self.bn.as_mut(), cache.bn.as_ref()) {
            bn.update_running_stats(c);
        }
    }

    /// Forward in train mode, updating running statistics.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, QueryCache<T>)> {
        let (q, cache) = self.forward(x, Mode::Train)?;
        self.commit(&cache);
        Ok((q, cache))
    }

    pub fn backward(&self, x: &Tensor<T>, cache: &QueryCache<T>, grad_q: &Tensor<T>, grads: &mut QueryNetwork<T>) -> Tensor<T> {
        let dz = match (&self.bn, &cache.bn, grads.bn.as_mut()) {
            (Some(bn), Some(c), Some(gbn)) => bn.backward(c, grad_q, gbn),
            _ => grad_q.clone(),
        };
        linear_backward(x, &self.weight, &dz, &mut grads.weight, Some(&mut grads.bias))
    }
}

impl<T: Scalar> Parameters<T> for QueryNetwork<T> {
    fn named_params(&self, prefix: &str) -> Named<'_, T> {
        let mut out = vec![(join(prefix, "weight"), &self.weight), (join(prefix, "bias"), &self.bias)];
        if let Some(bn) = &self.bn {
            out.push((join(prefix, "bn.gamma"), &bn.gamma));
            out.push((join(prefix, "bn.beta"), &bn.beta));
        }
        out
    }

    fn named_params_mut(&mut self, prefix: &str) -> NamedMut<'_, T> {
        let mut out = vec![(join(prefix, "weight"), &mut self.weight), (join(prefix, "bias"), &mut self.bias)];
        if let Some(bn) = &mut self.bn {
            out.push((join(prefix, "bn.gamma"), &mut bn.gamma));
            out.push((join(prefix, "bn.beta"), &mut bn.beta));
        }
        out
    }

    fn named_buffers(&self, prefix: &str) -> Named<'_, T> {
        match &self.bn {
            Some(bn) => vec![
                (join(prefix, "bn.running_mean"), &bn.running_mean),
                (join(prefix, "bn.running_var"), &bn.running_var),
            ],
            None => Vec::new(),
        }
    }

    fn named_buffers_mut(&mut self, prefix: &str) -> NamedMut<'_, T> {
        match &mut self.bn {
            Some(bn) => vec![
                (join(prefix, "bn.running_mean"), &mut bn.running_mean),
                (join(prefix, "bn.running_var"), &mut bn.running_var),
            ],
            None => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_without_bn() {
        let w = Tensor::from_rows(&[vec![1.0f64, 0.0], vec![0.0, 1.0]]).unwrap();
        let net = QueryNetwork::new(w, Tensor::zeros(&[2]), false).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let (q, _) = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(q.data(), &[1.0, -2.0]);
    }

    #[test]
    fn eval_bn_with_unit_stats_is_near_identity() {
        let w = Tensor::from_rows(&[vec![1.0f64, 0.0], vec![0.0, 1.0]]).unwrap();
        let net = QueryNetwork::new(w, Tensor::zeros(&[2]), true).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let (q, _) = net.forward(&x, Mode::Eval).unwrap();
        let scale = 1.0 / (1.0 + BN_EPSILON).sqrt();
        for (a, b) in q.data().iter().zip(x.data()) {
            assert!((a - b * scale).abs() < 1e-15);
        }
    }

    #[test]
    fn train_bn_standardizes_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d, dq, n) = (6, 4, 32);
        let mut net = QueryNetwork::new(random(&mut rng, &[dq, d]), random(&mut rng, &[dq]), true).unwrap();
        // isolate the standardization from the epsilon shift
        net.bn.as_mut().unwrap().epsilon = 1e-12;
        let x = random(&mut rng, &[n, d]);
        let (q, _) = net.forward(&x, Mode::Train).unwrap();
        for j in 0..dq {
            let col: Vec<f64> = (0..n).map(|r| q.row(r)[j]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn train_bn_variance_before_epsilon_is_one() {
        // Direct oracle: normalized column has variance var/(var+eps).
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bn = BatchNorm::<f64>::new(3);
        let z = random(&mut rng, &[32, 3]);
        let (_, cache) = bn.forward(&z, Mode::Train).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = (0..32).map(|r| z.row(r)[j]).collect();
            let mean = col.iter().sum::<f64>() / 32.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            let xs: Vec<f64> = (0..32).map(|r| cache.normalized.row(r)[j]).collect();
            let xv = xs.iter().map(|v| v * v).sum::<f64>() / 32.0;
            assert!((xv - var / (var + BN_EPSILON)).abs() < 1e-12);
            assert!((cache.batch_mean[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn single_row_train_batch_is_rejected() {
        let bn = BatchNorm::<f32>::new(2);
        let z = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(bn.forward(&z, Mode::Train).unwrap_err(), PkmError::DegenerateBatch { rows: 1 });
        assert!(bn.forward(&z, Mode::Eval).is_ok());
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = QueryNetwork::new(random(&mut rng, &[2, 3]), Tensor::zeros(&[2]), true).unwrap();
        let x = random(&mut rng, &[8, 3]);
        let (_, cache) = net.forward_train(&x).unwrap();
        let bn = net.bn.as_ref().unwrap();
        let c = cache.bn.as_ref().unwrap();
        for j in 0..2 {
            assert!((bn.running_mean.data()[j] - 0.1 * c.batch_mean[j]).abs() < 1e-15);
            let expected = 0.9 + 0.1 * c.batch_var[j] * 8.0 / 7.0;
            assert!((bn.running_var.data()[j] - expected).abs() < 1e-15);
            assert!(bn.running_var.data()[j] >= 0.0);
        }
    }

    #[test]
    fn odd_query_dim_rejected() {
        assert!(QueryNetwork::<f32>::new(Tensor::zeros(&[3, 4]), Tensor::zeros(&[3]), false).is_err());
    }
}
