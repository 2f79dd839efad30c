//! Named trainable parameters and the Adam optimizer.

use std::collections::HashMap;

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a parameter in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// One trainable tensor with a hierarchical name (e.g. `extractor.conv1.weight`).
/// The name encodes the owning layer, so per-layer parameter counting is a
/// pure aggregation over name prefixes.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone)]
pub struct ParamSet<T: Scalar> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name '{}'",
            name
        );
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total element count across all parameters.
    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Element count over parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Accumulate a gradient contribution into a parameter's buffer.
    pub fn accumulate_grad(&mut self, id: ParamId, contribution: &[T]) {
        let p = &mut self.params[id.0];
        debug_assert_eq!(contribution.len(), p.value.numel());
        match &mut p.grad {
            Some(existing) => {
                for (e, &v) in existing.iter_mut().zip(contribution) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reset every gradient buffer.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter index, so
/// the optimizer must be used with the parameter set it was created for.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            eps,
            step_count: 0,
            first_moment: params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect(),
        }
    }

    pub fn with_defaults(params: &ParamSet<T>, learning_rate: f64) -> Self {
        Self::new(params, learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over every parameter. Errors if any parameter has no
    /// gradient buffer.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<(), TensorError> {
        for p in params.iter() {
            if p.grad.is_none() {
                return Err(TensorError::MissingGradient(p.name.clone()));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let lr = T::from_f64(self.learning_rate);
        let eps = T::from_f64(self.eps);
        let bias1 = one - b1.powi(t);
        let bias2 = one - b2.powi(t);

        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad.as_ref().expect("checked above");
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let mut new_value = p.value.data().to_vec();
            for j in 0..grad.len() {
                let gj = grad[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                new_value[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.value = Tensor::new(p.value.dims(), new_value).expect("same shape");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> ParamSet<f64> {
        let mut set = ParamSet::new();
        set.add("w", Tensor::new(&[1], vec![v]).unwrap());
        set
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut set = single_param(0.3);
        let mut adam = Adam::with_defaults(&set, 1e-4);
        for _ in 0..5 {
            set.accumulate_grad(ParamId(0), &[0.0]);
            adam.step(&mut set).unwrap();
            set.zero_grads();
        }
        assert_eq!(set.get(ParamId(0)).value.data()[0], 0.3);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_lr() {
        // m_hat = v_hat = 1 after one step with g = 1, so the update is
        // -lr / (1 + eps).
        let mut set = single_param(1.0);
        let mut adam = Adam::with_defaults(&set, 1e-4);
        set.accumulate_grad(ParamId(0), &[1.0]);
        adam.step(&mut set).unwrap();
        let moved = 1.0 - set.get(ParamId(0)).value.data()[0];
        assert!((moved - 1e-4).abs() < 1e-9, "step was {}", moved);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut set = single_param(1.0);
        let mut adam = Adam::with_defaults(&set, 1e-4);
        assert!(matches!(
            adam.step(&mut set).unwrap_err(),
            TensorError::MissingGradient(_)
        ));
    }

    #[test]
    fn identical_streams_give_bitwise_identical_trajectories() {
        let run = || {
            let mut set = single_param(0.5);
            let mut adam = Adam::with_defaults(&set, 1e-3);
            let mut out = Vec::new();
            for k in 0..20 {
                set.accumulate_grad(ParamId(0), &[(k as f64 * 0.37).sin()]);
                adam.step(&mut set).unwrap();
                set.zero_grads();
                out.push(set.get(ParamId(0)).value.data()[0].to_bits());
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grad_accumulates_until_zeroed() {
        let mut set = single_param(0.0);
        set.accumulate_grad(ParamId(0), &[1.0]);
        set.accumulate_grad(ParamId(0), &[2.0]);
        assert_eq!(set.get(ParamId(0)).grad.as_deref(), Some(&[3.0][..]));
        set.zero_grads();
        assert!(set.get(ParamId(0)).grad.is_none());
    }
}
