//! Parameter binding and initialization shared by the network modules.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::{hash_str, mix, XorShift64Star};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Parameters of a [`ParamStore`] recorded as leaves on one tape.
#[derive(Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Binds every parameter; `trainable` controls whether they receive
    /// gradients.
    pub fn bind(tape: &mut Tape, store: &ParamStore, trainable: bool) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in store.iter() {
            vars.insert(name.clone(), tape.leaf(t.clone(), trainable)?);
        }
        Ok(Self { vars })
    }

    /// Wraps variables already on a tape under the given names.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::usage(format!("missing parameter '{name}'")))
    }

    /// Gradients after `tape.backward`, for parameters the loss reached.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| tape.grad(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

/// How a weight tensor is scaled at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-√(6/fan_in), √(6/fan_in))`, for layers followed by a relu.
    HeUniform,
    /// `U(-√(3/fan_in), √(3/fan_in))`.
    LecunUniform,
    Zeros,
}

/// Fills a weight deterministically from `(seed, name)` so that adding or
/// removing other parameters never changes this one.
pub fn init_weight(
    store: &mut ParamStore,
    name: &str,
    shape: &[usize],
    fan_in: usize,
    init: Init,
    seed: u64,
) {
    let bound = match init {
        Init::HeUniform => (6.0 / fan_in as f64).sqrt(),
        Init::LecunUniform => (3.0 / fan_in as f64).sqrt(),
        Init::Zeros => 0.0,
    };
    let mut rng = XorShift64Star::new(mix(seed, hash_str(name)));
    let t = if bound == 0.0 {
        Tensor::zeros(shape)
    } else {
        Tensor::from_fn(shape, |_| rng.uniform(-bound, bound))
    };
    store.insert(name, t);
}

pub fn init_bias(store: &mut ParamStore, name: &str, len: usize) {
    store.insert(name, Tensor::zeros(&[len]));
}

/// `W·x + b` for `W` of shape `out×in`, `x` of shape `in×L`.
pub fn dense(tape: &mut Tape, w: Var, b: Var, x: Var) -> Result<Var> {
    let y = tape.matmul(w, x)?;
    tape.bias_add(y, b, 0)
}

/// 1×1 convolution of a `C×H×W` map expressed as a matrix product over
/// the flattened spatial axis; returns `out×(H·W)`.
pub fn pointwise(tape: &mut Tape, w: Var, b: Var, map2d: Var) -> Result<Var> {
    dense(tape, w, b, map2d)
}
