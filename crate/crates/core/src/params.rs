//! Named trainable parameters partitioned into optimizer groups.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Encoder,
    Decoder,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::Encoder, Group::Decoder];

    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Decoder => "decoder",
        }
    }
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// false for frozen buffers (e.g. batch-norm statistics)
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            group,
            value,
            grad,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    /// Non-trainable tensor that travels with the parameters.
    pub fn add_buffer(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> ParamId {
        let id = self.add(name, group, value);
        self.params[id.0].trainable = false;
        id
    }

    /// Matrix initialized uniform(−r, r) with r = 1/√fan_in.
    pub fn add_matrix(
        &mut self,
        name: &str,
        group: Group,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let r = 1.0 / (fan_in.max(1) as f64).sqrt();
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| T::of(rng.gen_range(-r..r))).collect();
        let value = Tensor::new(shape.to_vec(), data).expect("shape matches data");
        self.add(name, group, value)
    }

    pub fn add_zeros(&mut self, name: &str, group: Group, shape: &[usize]) -> ParamId {
        self.add(name, group, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).map(ParamId).collect()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids_in(&self, group: Group) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    /// Place parameter `id` into `graph` as a leaf. Buffers never require
    /// a gradient.
    pub fn bind(&self, graph: &mut Graph<T>, id: ParamId, requires_grad: bool) -> Var {
        let p = &self.params[id.0];
        graph.param_leaf(p.value.clone(), id.0, requires_grad && p.trainable)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Add every parameter-leaf gradient recorded in `graph` into the store.
    pub fn accumulate_from(&mut self, graph: &Graph<T>) {
        for (id, g) in graph.param_grads() {
            for (acc, &x) in self.params[id].grad.data_mut().iter_mut().zip(g.data()) {
                *acc += x;
            }
        }
    }

    /// L2 norm of the accumulated gradient over one group.
    pub fn grad_norm(&self, group: Group) -> f64 {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g.as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Replace a parameter value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    /// Snapshot of all values, used for restoring the best early-stopping point.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<T>]) {
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.value = v.clone();
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}
