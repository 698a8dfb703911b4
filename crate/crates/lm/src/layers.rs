//! Transformer building blocks with hand-written backward passes.
//!
//! Activations are `(rows, features)` tensors where rows enumerate
//! `batch × time` positions, sequence-major.

use pkm_core::params::{join, Named, NamedMut};
use pkm_core::scalar::lit;
use pkm_core::tensor::{axpy, dot, linear_backward, linear_forward, softmax};
use pkm_core::{Parameters, Scalar, Tensor};
use rand::Rng;

pub(crate) fn uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| lit::<T>(rng.gen_range(-bound..=bound))).collect();
    Tensor::from_vec(shape, data).expect("shape by construction")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `(out, in)`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    /// Fan-in scaled uniform weights, zero bias.
    pub fn new(rng: &mut impl Rng, input: usize, output: usize) -> Self {
        Self::with_bound(rng, input, output, 1.0 / (input as f64).sqrt())
    }

    pub fn with_bound(rng: &mut impl Rng, input: usize, output: usize, bound: f64) -> Self {
        Linear {
            weight: uniform(rng, &[output, input], bound),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        linear_forward(x, &self.weight, Some(&self.bias))
    }

    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>, grads: &mut Linear<T>) -> Tensor<T> {
        linear_backward(x, &self.weight, grad_out, &mut grads.weight, Some(&mut grads.bias))
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn named_params(&self, prefix: &str) -> Named<'_, T> {
        vec![(join(prefix, "weight"), &self.weight), (join(prefix, "bias"), &self.bias)]
    }

    fn named_params_mut(&mut self, prefix: &str) -> NamedMut<'_, T> {
        vec![(join(prefix, "weight"), &mut self.weight), (join(prefix, "bias"), &mut self.bias)]
    }
}

pub const LN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::from_vec(&[dim], vec![T::one(); dim]).expect("1-D"),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, LayerNormCache<T>) {
        let (n, d) = (x.rows(), x.cols());
        let df = lit::<T>(d as f64);
        let eps = lit::<T>(LN_EPSILON);
        let mut normalized = Tensor::zeros(&[n, d]);
        let mut out = Tensor::zeros(&[n, d]);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let xr = x.row(r);
            let mean = xr.iter().copied().sum::<T>() / df;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let nr = normalized.row_mut(r);
            for (o, &v) in nr.iter_mut().zip(xr) {
                *o = (v - mean) * is;
            }
            let yr = out.row_mut(r);
            for j in 0..d {
                yr[j] = self.gamma.data()[j] * normalized.row(r)[j] + self.beta.data()[j];
            }
        }
        (out, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, grad_out: &Tensor<T>, grads: &mut LayerNorm<T>) -> Tensor<T> {
        let (n, d) = (grad_out.rows(), grad_out.cols());
        let df = lit::<T>(d as f64);
        let mut dx = Tensor::zeros(&[n, d]);
        let mut dxhat = vec![T::zero(); d];
        for r in 0..n {
            let (g, xh) = (grad_out.row(r), cache.normalized.row(r));
            for j in 0..d {
                grads.gamma.data_mut()[j] += g[j] * xh[j];
                grads.beta.data_mut()[j] += g[j];
                dxhat[j] = g[j] * self.gamma.data()[j];
            }
            let sum_d: T = dxhat.iter().copied().sum();
            let sum_dx = dot(&dxhat, xh);
            let is = cache.inv_std[r];
            let dr = dx.row_mut(r);
            for j in 0..d {
                dr[j] = is / df * (df * dxhat[j] - sum_d - xh[j] * sum_dx);
            }
        }
        dx
    }
}

impl<T: Scalar> Parameters<T> for LayerNorm<T> {
    fn named_params(&self, prefix: &str) -> Named<'_, T> {
        vec![(join(prefix, "gamma"), &self.gamma), (join(prefix, "beta"), &self.beta)]
    }

    fn named_params_mut(&mut self, prefix: &str) -> NamedMut<'_, T> {
        vec![(join(prefix, "gamma"), &mut self.gamma), (join(prefix, "beta"), &mut self.beta)]
    }
}

/// Causal multi-head self-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub heads: usize,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    input: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Attention probabilities, `[batch][head][i]` rows of length `i + 1`.
    probs: Vec<Vec<T>>,
    mixed: Tensor<T>,
    batch: usize,
    time: usize,
}

impl<T: Scalar> Attention<T> {
    pub fn new(rng: &mut impl Rng, dim: usize, heads: usize) -> Self {
        Attention {
            heads,
            query: Linear::new(rng, dim, dim),
            key: Linear::new(rng, dim, dim),
            value: Linear::new(rng, dim, dim),
            output: Linear::new(rng, dim, dim),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, batch: usize, time: usize) -> (Tensor<T>, AttentionCache<T>) {
        let d = x.cols();
        let dh = d / self.heads;
        let scale = lit::<T>(1.0 / (dh as f64).sqrt());
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let mut mixed = Tensor::zeros(&[batch * time, d]);
        let mut probs = Vec::with_capacity(batch * self.heads * time);
        for b in 0..batch {
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..time {
                    let qi = &q.row(b * time + i)[cols.clone()];
                    let scores: Vec<T> = (0..=i).map(|j| dot(qi, &k.row(b * time + j)[cols.clone()]) * scale).collect();
                    let p = softmax(&scores);
                    let out = &mut mixed.row_mut(b * time + i)[cols.clone()];
                    for (j, &pj) in p.iter().enumerate() {
                        axpy(pj, &v.row(b * time + j)[cols.clone()], out);
                    }
                    probs.push(p);
                }
            }
        }
        let y = self.output.forward(&mixed);
        let cache = AttentionCache {
            input: x.clone(),
            q,
            k,
            v,
            probs,
            mixed,
            batch,
            time,
        };
        (y, cache)
    }

    pub fn backward(&self, cache: &AttentionCache<T>, grad_out: &Tensor<T>, grads: &mut Attention<T>) -> Tensor<T> {
        let (batch, time) = (cache.batch, cache.time);
        let d = grad_out.cols();
        let dh = d / self.heads;
        let scale = lit::<T>(1.0 / (dh as f64).sqrt());
        let dmixed = self.output.backward(&cache.mixed, grad_out, &mut grads.output);
        let mut dq = Tensor::zeros(&[batch * time, d]);
        let mut dk = Tensor::zeros(&[batch * time, d]);
        let mut dv = Tensor::zeros(&[batch * time, d]);
        let mut dp = Vec::with_capacity(time);
        for b in 0..batch {
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..time {
                    let p = &cache.probs[(b * self.heads + h) * time + i];
                    let go = &dmixed.row(b * time + i)[cols.clone()];
                    dp.clear();
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &cache.v.row(b * time + j)[cols.clone()];
                        dp.push(dot(go, vj));
                        axpy(pj, go, &mut dv.row_mut(b * time + j)[cols.clone()]);
                    }
                    let mean: T = p.iter().zip(&dp).map(|(&a, &g)| a * g).sum();
                    let qi = cache.q.row(b * time + i)[cols.clone()].to_vec();
                    for (j, &pj) in p.iter().enumerate() {
                        let ds = pj * (dp[j] - mean) * scale;
                        axpy(ds, &cache.k.row(b * time + j)[cols.clone()], &mut dq.row_mut(b * time + i)[cols.clone()]);
                        axpy(ds, &qi, &mut dk.row_mut(b * time + j)[cols.clone()]);
                    }
                }
            }
        }
        let mut dx = self.query.backward(&cache.input, &dq, &mut grads.query);
        dx.add_assign(&self.key.backward(&cache.input, &dk, &mut grads.key));
        dx.add_assign(&self.value.backward(&cache.input, &dv, &mut grads.value));
        dx
    }
}

impl<T: Scalar> Parameters<T> for Attention<T> {
    fn named_params(&self, prefix: &str) -> Named<'_, T> {
        let mut out = self.query.named_params(&join(prefix, "query"));
        out.extend(self.key.named_params(&join(prefix, "key")));
        out.extend(self.value.named_params(&join(prefix, "value")));
        out.extend(self.output.named_params(&join(prefix, "output")));
        out
    }

    fn named_params_mut(&mut self, prefix: &str) -> NamedMut<'_, T> {
        let mut out = self.query.named_params_mut(&join(prefix, "query"));
        out.extend(self.key.named_params_mut(&join(prefix, "key")));
        out.extend(self.value.named_params_mut(&join(prefix, "value")));
        out.extend(self.output.named_params_mut(&join(prefix, "output")));
        out
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = lit::<T>(GELU_C);
    let a = lit::<T>(0.044715);
    lit::<T>(0.5) * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = lit::<T>(GELU_C);
    let a = lit::<T>(0.044715);
    let half = lit::<T>(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + lit::<T>(3.0) * a * x * x)
}

/// Two-layer GELU feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
    act: Tensor<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new(rng: &mut impl Rng, dim: usize, hidden: usize) -> Self {
        FeedForward {
            up: Linear::new(rng, dim, hidden),
            down: Linear::new(rng, hidden, dim),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, FeedForwardCache<T>) {
        let pre = self.up.forward(x);
        let mut act = pre.clone();
        act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let y = self.down.forward(&act);
        (
            y,
            FeedForwardCache {
                input: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &FeedForwardCache<T>, grad_out: &Tensor<T>, grads: &mut FeedForward<T>) -> Tensor<T> {
        let mut dact = self.down.backward(&cache.act, grad_out, &mut grads.down);
        for (g, &p) in dact.data_mut().iter_mut().zip(cache.pre.data()) {
            *g *= gelu_grad(p);
        }
        self.up.backward(&cache.input, &dact, &mut grads.up)
    }
}

impl<T: Scalar> Parameters<T> for FeedForward<T> {
    fn named_params(&self, prefix: &str) -> Named<'_, T> {
        let mut out = self.up.named_params(&join(prefix, "up"));
        out.extend(self.down.named_params(&join(prefix, "down")));
        out
    }

    fn named_params_mut(&mut self, prefix: &str) -> NamedMut<'_, T> {
        let mut out = self.up.named_params_mut(&join(prefix, "up"));
        out.extend(self.down.named_params_mut(&join(prefix, "down")));
        out
    }
}
