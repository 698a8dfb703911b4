use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Whether a forward pass uses batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub type Named<'a, T> = Vec<(String, &'a Tensor<T>)>;
pub type NamedMut<'a, T> = Vec<(String, &'a mut Tensor<T>)>;

/// Named tensors in a fixed order.
///
/// A gradient container for a module lists its tensors in the same order as
/// the module itself, which is what lets optimizers zip parameters with their
/// gradients by position.
pub trait Parameters<T: Scalar> {
    /// Dense tensors trained by the main optimizer.
    fn named_params(&self, prefix: &str) -> Named<'_, T>;
    fn named_params_mut(&mut self, prefix: &str) -> NamedMut<'_, T>;

    /// Non-trained persistent state, e.g. running statistics.
    fn named_buffers(&self, _prefix: &str) -> Named<'_, T> {
        Vec::new()
    }

    fn named_buffers_mut(&mut self, _prefix: &str) -> NamedMut<'_, T> {
        Vec::new()
    }

    fn param_count(&self) -> usize {
        self.named_params("").iter().map(|(_, t)| t.len()).sum()
    }

    fn zero_params(&mut self) {
        self.named_params_mut("").into_iter().for_each(|(_, t)| t.fill_zero());
    }

    fn params_sum_squares(&self) -> f64 {
        self.named_params("").iter().map(|(_, t)| t.sum_squares().as_f64()).sum()
    }

    fn scale_params(&mut self, factor: T) {
        self.named_params_mut("").into_iter().for_each(|(_, t)| t.scale(factor));
    }
}
