//! The forward stack: embedding lookup, BiGRU ensemble, capsules with dynamic
//! routing, flatten, and the dense softmax head.

pub mod capsule;
pub mod gru;
pub mod head;
pub(crate) mod init;
pub mod model;

use rand_chacha::ChaCha8Rng;

pub use capsule::{
    dynamic_routing, flatten_capsules, predict_vectors, primary_capsules, PrimaryCapsules,
    RoutedCapsules, Routing,
};
pub use gru::{bigru_forward, gru_step, run_sequence, BiGru, Gru, GruEnsemble, GruVars};
pub use head::{head_forward, HeadVars};
pub use head::DenseHead;
pub use model::{Batch, Extractor, Model, Router, STAGES};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named parameters in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Artifact(format!("unknown parameter {name:?}")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim("assign parameter", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix) && (p.trainable || !trainable_only))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

/// Dropout configuration of one forward pass.
pub enum Mode {
    Eval,
    Train { dropout: f64, rng: ChaCha8Rng },
}

/// A tape with the model parameters bound as leaves.
pub struct Graph<T: Scalar> {
    pub tape: Tape<T>,
    params: Vec<Var>,
    mode: Mode,
}

impl<T: Scalar> Graph<T> {
    /// Binds every parameter; trainable ones are tracked when `track` is set.
    pub fn bind(store: &ParamStore<T>, mode: Mode, track: bool) -> Self {
        let mut tape = Tape::new();
        let params = store
            .iter()
            .map(|p| {
                if track && p.trainable {
                    tape.variable(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Self { tape, params, mode }
    }

    pub fn eval(store: &ParamStore<T>) -> Self {
        Self::bind(store, Mode::Eval, false)
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    pub fn is_training(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    /// A fresh recurrent dropout mask of `[rows × cols]`, or `None` when inactive.
    pub fn dropout_mask(&mut self, rows: usize, cols: usize) -> Option<Var> {
        let Mode::Train { dropout, rng } = &mut self.mode else {
            return None;
        };
        if *dropout == 0.0 {
            return None;
        }
        let mask = crate::training::recurrent_dropout_mask::<T>(&[rows, cols], *dropout, Some(rng));
        Some(self.tape.constant(mask))
    }

    /// Gradients of the bound parameters, in store order.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.params
            .iter()
            .map(|&v| {
                if self.tape.requires_grad(v) {
                    Some(grads.take(v).unwrap_or_else(|| Tensor::zeros(self.tape.shape(v).to_vec())))
                } else {
                    None
                }
            })
            .collect()
    }
}

/// `x·w + b` for `x: [rows × in]`, `w: [in × out]`, `b: [out]`.
pub(crate) fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let rows = tape.shape(x)[0];
    let xw = tape.matmul(x, w)?;
    let bias = tape.repeat(b, rows)?;
    tape.add(xw, bias)
}
