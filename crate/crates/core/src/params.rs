//! Named trainable tensors and their binding onto a tape.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Element = f32> {
    pub path: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Insertion-ordered map from hierarchical path to [`Parameter`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Element = f32> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let path = path.into();
        if self.index.contains_key(&path) {
            return Err(Error::Config(format!("duplicate parameter path {path}")));
        }
        self.index.insert(path.clone(), self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { path, value, grad });
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Parameter<T>> {
        self.index.get(path).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Parameter<T>> {
        self.index.get(path).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.path.as_str())
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Scalar count of every parameter whose path starts with `prefix.`.
    pub fn num_elements_under(&self, prefix: &str) -> usize {
        let dotted = format!("{prefix}.");
        self.params
            .iter()
            .filter(|p| p.path.starts_with(&dotted))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    path: p.path.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Records every parameter on `tape`. With `trainable == false` they are
    /// constants and backward skips them.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        BoundParams {
            index: self.index.clone(),
            vars,
        }
    }

    /// Adds the gradients of every bound parameter into `grad`.
    pub fn accumulate_grads(&mut self, bound: &BoundParams, grads: &Gradients<T>) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(v) {
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
        }
    }

    /// Kaiming-uniform weight of shape `(out_c, in_c, kh, kw)` with negative
    /// slope `√5`: `U(−b, b)` with `b = 1 / sqrt(fan_in)`. Linear chains stay
    /// contractive under this bound; normalized layers are indifferent to it.
    pub fn kaiming_uniform(shape: Shape, rng: &mut impl Rng) -> Tensor<T> {
        let fan_in = shape.c * shape.h * shape.w;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_, _, _, _| T::lit(rng.random_range(-bound..bound)))
    }
}

/// Tape vars for a [`ParamStore`], looked up by path.
#[derive(Clone, Debug)]
pub struct BoundParams {
    index: HashMap<String, usize>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, path: &str) -> Result<Var> {
        self.index
            .get(path)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter {path}")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.index.contains_key(path)
    }

    /// Points `path` at a different var, e.g. a grad-check input.
    pub fn rebind(&mut self, path: &str, var: Var) -> Result<()> {
        let i = *self
            .index
            .get(path)
            .ok_or_else(|| Error::Config(format!("missing parameter {path}")))?;
        self.vars[i] = var;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_paths_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a.weight", Tensor::zeros([1, 1, 1, 1])).unwrap();
        assert!(store.insert("a.weight", Tensor::zeros([1, 1, 1, 1])).is_err());
    }

    #[test]
    fn grads_flow_back_into_store() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::full([1, 1, 1, 2], 3.0)).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, true);
        let w = bound.var("w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        store.accumulate_grads(&bound, &grads);
        store.accumulate_grads(&bound, &grads);
        assert_eq!(store.get("w").unwrap().grad.data(), &[12.0, 12.0]);
        store.zero_grad();
        assert_eq!(store.get("w").unwrap().grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn kaiming_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = ParamStore::<f32>::kaiming_uniform(Shape::new(8, 4, 3, 3), &mut rng);
        let b = 1.0f32 / 6.0;
        assert!(w.data().iter().all(|v| v.abs() <= b));
        assert!(w.data().iter().any(|v| v.abs() > b * 0.5));
    }
}
