//! Two fully connected layers ending in a softmax over classes.

use rand_chacha::ChaCha8Rng;

use super::init::glorot;
use super::{linear, Graph, ParamId, ParamStore};
use crate::config::Activation;
use crate::error::Result;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Tape handles of the head's weights.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `softmax(act(x·w1 + b1)·w2 + b2)` for `x: [N × F]`, giving `[N × C]`.
pub fn head_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &HeadVars,
    activation: Activation,
) -> Result<Var> {
    let hidden = linear(tape, x, p.w1, p.b1)?;
    let hidden = match activation {
        Activation::Relu => tape.relu(hidden),
        Activation::Selu => tape.selu(hidden),
    };
    let logits = linear(tape, hidden, p.w2, p.b2)?;
    tape.softmax(logits, 1)
}

#[derive(Clone, Debug)]
pub struct DenseHead {
    pub activation: Activation,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl DenseHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        input: usize,
        hidden: usize,
        classes: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w1 = store.add("head.w1", glorot(&[input, hidden], input, hidden, rng), true);
        let b1 = store.add("head.b1", Tensor::zeros([hidden]), true);
        let w2 = store.add("head.w2", glorot(&[hidden, classes], hidden, classes, rng), true);
        let b2 = store.add("head.b2", Tensor::zeros([classes]), true);
        Self {
            activation,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn vars<T: Scalar>(&self, g: &Graph<T>) -> HeadVars {
        HeadVars {
            w1: g.p(self.w1),
            b1: g.p(self.b1),
            w2: g.p(self.w2),
            b2: g.p(self.b2),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let vars = self.vars(g);
        head_forward(&mut g.tape, x, &vars, self.activation)
    }
}
