//! Memory access diagnostics (usage, KL to uniform) and perplexity.

use crate::error::{invalid_arg, PkmError, Result};
use crate::memory::MemoryForwardRecord;
use crate::scalar::Scalar;

/// Running sum `z'` of access weights over a dataset.
///
/// Head weights are deposited as-is (no division by the head count).
#[derive(Debug, Clone, PartialEq)]
pub struct AccessAccumulator {
    z_prime: Vec<f64>,
    examples_seen: u64,
}

impl AccessAccumulator {
    pub fn new(key_count: usize) -> Self {
        AccessAccumulator {
            z_prime: vec![0.0; key_count],
            examples_seen: 0,
        }
    }

    pub fn key_count(&self) -> usize {
        self.z_prime.len()
    }

    pub fn examples_seen(&self) -> u64 {
        self.examples_seen
    }

    pub fn z_prime(&self) -> &[f64] {
        &self.z_prime
    }

    /// Adds one example's selected `(index, weight)` pairs, all heads concatenated.
    pub fn deposit(&mut self, indices: &[usize], weights: &[f64]) -> Result<()> {
        if indices.len() != weights.len() {
            return invalid_arg("indices and weights differ in length");
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= self.z_prime.len()) {
            return invalid_arg(format!("slot {i} out of range for {} keys", self.z_prime.len()));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(PkmError::InvalidInput(format!("access weight {w} is not a non-negative number")));
        }
        for (&i, &w) in indices.iter().zip(weights) {
            self.z_prime[i] += w;
        }
        self.examples_seen += 1;
        Ok(())
    }

    pub fn accumulate<T: Scalar>(&mut self, record: &MemoryForwardRecord<T>) -> Result<()> {
        if record.key_count != self.z_prime.len() {
            return invalid_arg(format!(
                "record addresses {} keys, accumulator holds {}",
                record.key_count,
                self.z_prime.len()
            ));
        }
        let mut indices = Vec::with_capacity(record.heads.len() * record.k);
        let mut weights = Vec::with_capacity(indices.capacity());
        for r in 0..record.rows() {
            indices.clear();
            weights.clear();
            for h in 0..record.heads.len() {
                let (idx, w) = record.selection(h, r);
                indices.extend_from_slice(idx);
                weights.extend(w.iter().map(|v| v.as_f64()));
            }
            self.deposit(&indices, &weights)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &AccessAccumulator) -> Result<()> {
        if other.z_prime.len() != self.z_prime.len() {
            return invalid_arg("cannot merge accumulators over different key counts");
        }
        for (a, b) in self.z_prime.iter_mut().zip(&other.z_prime) {
            *a += b;
        }
        self.examples_seen += other.examples_seen;
        Ok(())
    }

    /// Percentage of slots with nonzero accumulated weight.
    pub fn usage(&self) -> Result<f64> {
        if self.examples_seen == 0 {
            return Err(PkmError::Precondition("usage of an empty accumulator".into()));
        }
        let used = self.z_prime.iter().filter(|&&z| z != 0.0).count();
        Ok(100.0 * used as f64 / self.z_prime.len() as f64)
    }

    /// `ln|K| + Σ z_i ln z_i` for `z = z' / ‖z'‖₁`, natural log.
    pub fn kl_uniform(&self) -> Result<f64> {
        let total: f64 = self.z_prime.iter().sum();
        if !(total > 0.0) {
            return Err(PkmError::Precondition("KL of an all-zero accumulator".into()));
        }
        let neg_entropy: f64 = self
            .z_prime
            .iter()
            .filter(|&&z| z > 0.0)
            .map(|&z| {
                let p = z / total;
                p * p.ln()
            })
            .sum();
        Ok(((self.z_prime.len() as f64).ln() + neg_entropy).max(0.0))
    }
}

/// `exp(total_nll / token_count)`.
pub fn perplexity(total_nll: f64, token_count: usize) -> Result<f64> {
    if token_count == 0 {
        return invalid_arg("perplexity over zero tokens");
    }
    Ok((total_nll / token_count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_deposit() {
        let mut acc = AccessAccumulator::new(8);
        acc.deposit(&[3, 7], &[0.6, 0.4]).unwrap();
        let mut expected = vec![0.0; 8];
        expected[3] = 0.6;
        expected[7] = 0.4;
        assert_eq!(acc.z_prime(), &expected[..]);
    }

    #[test]
    fn usage_examples() {
        let mut acc = AccessAccumulator::new(8);
        acc.deposit(&[0, 2, 5], &[0.2, 0.3, 0.5]).unwrap();
        assert_eq!(acc.usage().unwrap(), 37.5);
        acc.deposit(&[1, 3, 4, 6, 7], &[0.2; 5]).unwrap();
        assert_eq!(acc.usage().unwrap(), 100.0);

        let mut big = AccessAccumulator::new(262_144);
        let slots: Vec<usize> = (0..32).map(|i| i * 97).collect();
        for _ in 0..10 {
            big.deposit(&slots, &[1.0 / 32.0; 32]).unwrap();
        }
        assert!((big.usage().unwrap() - 100.0 * 32.0 / 262_144.0).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let mut uniform = AccessAccumulator::new(16);
        uniform.deposit(&(0..16).collect::<Vec<_>>(), &[0.25; 16]).unwrap();
        assert!(uniform.kl_uniform().unwrap().abs() < 1e-12);

        let mut single = AccessAccumulator::new(262_144);
        single.deposit(&[12], &[1.0]).unwrap();
        assert!((single.kl_uniform().unwrap() - 18.0 * 2f64.ln()).abs() < 1e-9);

        let mut two = AccessAccumulator::new(4);
        two.deposit(&[0, 1], &[0.5, 0.5]).unwrap();
        assert!((two.kl_uniform().unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_accumulator_errors() {
        let acc = AccessAccumulator::new(4);
        assert!(matches!(acc.usage(), Err(PkmError::Precondition(_))));
        assert!(matches!(acc.kl_uniform(), Err(PkmError::Precondition(_))));
        let mut acc = AccessAccumulator::new(4);
        assert!(acc.deposit(&[4], &[1.0]).is_err());
    }

    #[test]
    fn perplexity_examples() {
        assert_eq!(perplexity(0.0, 10).unwrap(), 1.0);
        assert!((perplexity(2f64.ln() * 7.0, 7).unwrap() - 2.0).abs() < 1e-12);
        let v = 37.0f64;
        assert!((perplexity(v.ln() * 100.0, 100).unwrap() - v).abs() < 1e-10);
        assert!(perplexity(1.0, 0).is_err());
    }
}
