//! Named, ordered parameter storage and per-pass staging.
//!
//! Parameters live outside any tape in a [`ParameterStore`]; each training
//! step stages the ones a forward pass touches onto a fresh tape as leaf
//! tensors (see [`Forward`]) and harvests their gradients after the
//! backward pass.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tape::{Tape, TensorId};
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to one parameter in a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether the optimizer may update this parameter. Training stages
    /// toggle this to freeze one network while the other learns.
    pub trainable: bool,
}

/// Ordered collection of named parameters. Order is creation order and is
/// stable for a given configuration, which makes checkpoints and
/// determinism checks straightforward.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<T> {
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore { params: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        self.params.push(Param { name, value, trainable: true });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.shape().numel()).sum()
    }

    /// Mark exactly the parameters whose name starts with `prefix` as
    /// trainable.
    pub fn set_trainable_by_prefix(&mut self, prefix: &str) {
        for p in &mut self.params {
            p.trainable = p.name.starts_with(prefix);
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Byte-exact snapshot of the parameters matching a name prefix, for
    /// freeze verification and determinism checks.
    pub fn snapshot_bytes(&self, prefix: &str) -> Vec<u8> {
        let mut out = Vec::new();
        for p in &self.params {
            if p.name.starts_with(prefix) {
                for &v in p.value.data() {
                    v.write_le(&mut out);
                }
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast::<U>(),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Creates parameters with dotted path names and Kaiming-uniform init.
///
/// Weights for a conv of fan-in `cin * k * k` are drawn uniformly from
/// [-sqrt(6 / fan_in), sqrt(6 / fan_in)] (ReLU gain), biases start at
/// zero. Draws happen in creation order from the builder's generator, so
/// a seed fully determines every parameter.
pub struct ParamBuilder<'a, T> {
    pub store: &'a mut ParameterStore<T>,
    pub rng: &'a mut SplitMix64,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParameterStore<T>, rng: &'a mut SplitMix64) -> Self {
        ParamBuilder { store, rng }
    }

    /// Conv weight (cout, cin, k, k) plus zero bias (1, cout, 1, 1),
    /// registered as `<name>.weight` / `<name>.bias`.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Result<ConvParams> {
        self.conv_scaled(name, cin, cout, k, 1.0)
    }

    /// Like [`ParamBuilder::conv`] with the drawn weights multiplied by
    /// `scale`. Residual branches use a small scale so that deep stacks
    /// start near the identity instead of amplifying activations
    /// exponentially with depth; the draw sequence is unchanged.
    pub fn conv_scaled(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        scale: f64,
    ) -> Result<ConvParams> {
        let fan_in = (cin * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let mut weight: Tensor<T> =
            Tensor::uniform(Shape::new(cout, cin, k, k), -bound, bound, self.rng);
        if scale != 1.0 {
            weight = weight.map(|v| T::from_f64(v.to_f64() * scale));
        }
        let bias = Tensor::zeros(Shape::new(1, cout, 1, 1));
        Ok(ConvParams {
            weight: self.store.add(format!("{name}.weight"), weight)?,
            bias: self.store.add(format!("{name}.bias"), bias)?,
        })
    }
}

/// The two parameters of a conv layer.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// One forward pass: a tape plus lazy staging of store parameters onto
/// it. Parameters are staged at most once per pass; when `with_grads` is
/// set, trainable parameters are staged as gradient-requiring leaves.
pub struct Forward<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParameterStore<T>,
    staged: Vec<Option<TensorId>>,
    with_grads: bool,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParameterStore<T>, with_grads: bool) -> Self {
        let staged = vec![None; store.len()];
        Forward { tape, store, staged, with_grads }
    }

    /// Tape id of a parameter, staging it on first use.
    pub fn param(&mut self, id: ParamId) -> TensorId {
        if let Some(t) = self.staged[id.index()] {
            return t;
        }
        let p = self.store.get(id);
        let rg = self.with_grads && p.trainable;
        let t = self.tape.leaf(p.value.clone(), rg);
        self.staged[id.index()] = Some(t);
        t
    }

    /// Convolution through a [`ConvParams`] pair.
    pub fn conv(
        &mut self,
        layer: ConvParams,
        x: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let w = self.param(layer.weight);
        let b = self.param(layer.bias);
        self.tape.conv2d(x, w, b, stride, padding)
    }

    /// Harvest parameter gradients after `tape.backward`. Returns one
    /// entry per staged, gradient-requiring parameter.
    pub fn take_grads(&self) -> GradMap<T> {
        let mut grads = vec![None; self.store.len()];
        for (i, staged) in self.staged.iter().enumerate() {
            if let Some(tid) = staged {
                if let Some(g) = self.tape.grad(*tid) {
                    grads[i] = Some(g.to_vec());
                }
            }
        }
        GradMap { grads }
    }
}

/// Gradients keyed by [`ParamId`], aligned with a store.
pub struct GradMap<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradMap<T> {
    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(id.index()).and_then(|g| g.as_deref())
    }

    pub fn merge(&mut self, other: GradMap<T>) {
        for (slot, incoming) in self.grads.iter_mut().zip(other.grads) {
            if let Some(inc) = incoming {
                match slot {
                    Some(g) => {
                        for (a, b) in g.iter_mut().zip(inc) {
                            *a = a.add(b);
                        }
                    }
                    None => *slot = Some(inc),
                }
            }
        }
    }
}
