//! Named learnable parameters with accumulated-gradient buffers, plus the
//! glue that binds them onto a [`GradGraph`] for one forward/backward pass.

use crate::error::{Error, Result, TensorError};
use crate::tensor::{Element, GradGraph, Gradients, Shape4, Tensor4, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Stable handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

pub struct Parameter<E> {
    pub name: String,
    pub value: Tensor4<E>,
    pub grad: Tensor4<E>,
}

pub struct ParamStore<E> {
    params: Vec<Parameter<E>>,
    by_name: HashMap<String, usize>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4<E>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor4::zeros(value.shape());
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn total_values(&self) -> u64 {
        self.params.iter().map(|p| p.value.numel() as u64).sum()
    }

    pub fn value(&self, id: ParamId) -> &Tensor4<E> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor4<E>) -> Result<()> {
        if value.shape() != self.params[id.0].value.shape() {
            return Err(TensorError::shape(
                "set_value",
                self.params[id.0].value.shape(),
                value.shape(),
            )
            .into());
        }
        self.params[id.0].value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor4<E> {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<E>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor4::zeros(p.value.shape());
        }
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter<E>] {
        &mut self.params
    }
}

/// One graph leaf per parameter, bound in store order. Re-created per pass.
pub struct ParamBindings {
    vars: Vec<Var>,
}

impl ParamBindings {
    pub fn bind<E: Element>(graph: &mut GradGraph<E>, store: &ParamStore<E>) -> Self {
        let vars = store
            .params
            .iter()
            .map(|p| graph.leaf(p.value.clone()))
            .collect();
        ParamBindings { vars }
    }

    /// Bind all parameters, substituting `var` for parameter `id`. Used by
    /// gradient checks that probe a single parameter.
    pub fn bind_with_override<E: Element>(
        graph: &mut GradGraph<E>,
        store: &ParamStore<E>,
        id: ParamId,
        var: Var,
    ) -> Self {
        let vars = store
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i == id.0 {
                    var
                } else {
                    graph.leaf(p.value.clone())
                }
            })
            .collect();
        ParamBindings { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Add this pass's gradients into the store accumulators.
    pub fn accumulate<E: Element>(
        &self,
        store: &mut ParamStore<E>,
        grads: &Gradients<E>,
    ) {
        for (i, param) in store.params_mut().iter_mut().enumerate() {
            if let Some(g) = grads.wrt(self.vars[i]) {
                for (a, b) in param.grad.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
        }
    }
}

/// Deterministic initializers. All sampling goes through one seeded stream in
/// construction order, so the same seed reproduces the same bytes.
pub mod init {
    use super::*;

    /// Standard normal via Box-Muller on the uniform stream.
    pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
        loop {
            let u1: f64 = rng.gen::<f64>();
            let u2: f64 = rng.gen::<f64>();
            if u1 > f64::MIN_POSITIVE {
                return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            }
        }
    }

    /// Kaiming fan-in scaling: N(0, sqrt(2 / fan_in)).
    pub fn kaiming<E: Element>(shape: Shape4, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor4<E> {
        let std = (2.0 / fan_in as f64).sqrt();
        let data = (0..shape.numel())
            .map(|_| E::from_f64(standard_normal(rng) * std))
            .collect();
        Tensor4::new(shape, data).expect("shape is valid")
    }

    pub fn zeros<E: Element>(shape: Shape4) -> Tensor4<E> {
        Tensor4::zeros(shape)
    }

    pub fn ones<E: Element>(shape: Shape4) -> Tensor4<E> {
        Tensor4::full(shape, E::one())
    }
}
