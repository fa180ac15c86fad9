//! Gated recurrent units, their bidirectional pairing, and the two-BiGRU ensemble.
//!
//! Each gate matrix acts on the concatenation `[h_{t-1}, x_t]`, so it has
//! `hidden + input` rows: the first `hidden` rows multiply the state, the rest the
//! input.
//!
//! ```text
//! z_t = σ(W_z·[h_{t-1}, x_t] + b_z)
//! r_t = σ(W_r·[h_{t-1}, x_t] + b_r)
//! h̃_t = tanh(W_h·[r_t ⊙ h_{t-1}, x_t] + b_h)
//! h_t = (1 − z_t) ⊙ h_{t-1} + z_t ⊙ h̃_t
//! ```

use rand_chacha::ChaCha8Rng;

use super::init::glorot;
use super::{linear, Graph, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Tape handles of one GRU's weights.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

impl GruVars {
    /// Hidden size implied by the bias shape.
    pub fn hidden<T: Scalar>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.b_z)[0]
    }
}

/// One GRU step on a batch: `x_t: [N × in]`, `h_prev: [N × H]` → `[N × H]`.
///
/// `mask` (recurrent dropout) scales the state wherever it feeds a gate; the
/// final interpolation uses the unmasked state.
pub fn gru_step<T: Scalar>(
    tape: &mut Tape<T>,
    x_t: Var,
    h_prev: Var,
    p: &GruVars,
    mask: Option<Var>,
) -> Result<Var> {
    let hidden = p.hidden(tape);
    let (sx, sh) = (tape.shape(x_t), tape.shape(h_prev));
    if sx.len() != 2 || sh != [sx[0], hidden] || tape.shape(p.w_z)[0] != hidden + sx[1] {
        return Err(Error::dim("gru_step", sx, sh));
    }
    let h_in = match mask {
        Some(m) => tape.mul(h_prev, m)?,
        None => h_prev,
    };
    let hx = tape.concat(&[h_in, x_t], 1)?;
    let z = linear(tape, hx, p.w_z, p.b_z)?;
    let z = tape.sigmoid(z);
    let r = linear(tape, hx, p.w_r, p.b_r)?;
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h_in)?;
    let rhx = tape.concat(&[rh, x_t], 1)?;
    let cand = linear(tape, rhx, p.w_h, p.b_h)?;
    let cand = tape.tanh(cand);
    let keep = tape.affine(z, -1.0, 1.0);
    let carried = tape.mul(keep, h_prev)?;
    let updated = tape.mul(z, cand)?;
    tape.add(carried, updated)
}

/// Runs a GRU over `x: [N × T × in]` from `h_0 = 0`, returning `[N × T × H]`.
///
/// With `reverse`, steps run from the last position to the first; output
/// position `t` always holds the state after consuming `x[:, t]`.
///
/// Equivalent to iterating [`gru_step`], but the input-side projections of all
/// positions are computed in one product.
pub fn run_sequence<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &GruVars,
    reverse: bool,
    mask: Option<Var>,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let hidden = p.hidden(tape);
    if shape.len() != 3 || tape.shape(p.w_z)[0] != hidden + shape[2] {
        return Err(Error::dim("gru sequence", &shape, tape.shape(p.w_z)));
    }
    let (n, steps, input) = (shape[0], shape[1], shape[2]);

    let wzx = tape.slice(p.w_z, 0, hidden, input)?;
    let wrx = tape.slice(p.w_r, 0, hidden, input)?;
    let whx = tape.slice(p.w_h, 0, hidden, input)?;
    let wx = tape.concat(&[wzx, wrx, whx], 1)?;
    let bx = tape.concat(&[p.b_z, p.b_r, p.b_h], 0)?;
    let flat = tape.reshape(x, &[n * steps, input])?;
    let xp = linear(tape, flat, wx, bx)?;
    let xp = tape.reshape(xp, &[n, steps, 3 * hidden])?;

    let wzh = tape.slice(p.w_z, 0, 0, hidden)?;
    let wrh = tape.slice(p.w_r, 0, 0, hidden)?;
    let whh = tape.slice(p.w_h, 0, 0, hidden)?;
    let wzr = tape.concat(&[wzh, wrh], 1)?;
    tape.gru_recurrence(xp, wzr, whh, mask, reverse)
}

/// A unidirectional GRU layer.
#[derive(Clone, Debug)]
pub struct Gru {
    pub input: usize,
    pub hidden: usize,
    w_z: ParamId,
    w_r: ParamId,
    w_h: ParamId,
    b_z: ParamId,
    b_r: ParamId,
    b_h: ParamId,
}

impl Gru {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let rows = hidden + input;
        let mut weight = |name: &str, rng: &mut ChaCha8Rng| {
            store.add(format!("{prefix}.{name}"), glorot(&[rows, hidden], rows, hidden, rng), true)
        };
        let w_z = weight("w_z", rng);
        let w_r = weight("w_r", rng);
        let w_h = weight("w_h", rng);
        let b_z = store.add(format!("{prefix}.b_z"), Tensor::zeros([hidden]), true);
        let b_r = store.add(format!("{prefix}.b_r"), Tensor::zeros([hidden]), true);
        let b_h = store.add(format!("{prefix}.b_h"), Tensor::zeros([hidden]), true);
        Self {
            input,
            hidden,
            w_z,
            w_r,
            w_h,
            b_z,
            b_r,
            b_h,
        }
    }

    pub fn vars<T: Scalar>(&self, g: &Graph<T>) -> GruVars {
        GruVars {
            w_z: g.p(self.w_z),
            w_r: g.p(self.w_r),
            w_h: g.p(self.w_h),
            b_z: g.p(self.b_z),
            b_r: g.p(self.b_r),
            b_h: g.p(self.b_h),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, reverse: bool) -> Result<Var> {
        let n = g.tape.shape(x)[0];
        let mask = g.dropout_mask(n, self.hidden);
        let vars = self.vars(g);
        run_sequence(&mut g.tape, x, &vars, reverse, mask)
    }
}

/// Forward and backward GRUs with per-position concatenation `[h→_t ; h←_t]`.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub forward: Gru,
    pub backward: Gru,
}

impl BiGru {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            forward: Gru::new(store, &format!("{prefix}.fwd"), input, hidden, rng),
            backward: Gru::new(store, &format!("{prefix}.bwd"), input, hidden, rng),
        }
    }

    pub fn output_width(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }

    pub fn run<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let f = self.forward.forward(g, x, false)?;
        let b = self.backward.forward(g, x, true)?;
        g.tape.concat(&[f, b], 2)
    }
}

/// Bidirectional pass over explicit weights, for use outside a [`Graph`].
pub fn bigru_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    fwd: &GruVars,
    bwd: &GruVars,
) -> Result<Var> {
    let f = run_sequence(tape, x, fwd, false, None)?;
    let b = run_sequence(tape, x, bwd, true, None)?;
    tape.concat(&[f, b], 2)
}

/// Several BiGRUs over the same input, concatenated along the feature axis.
#[derive(Clone, Debug)]
pub struct GruEnsemble {
    pub members: Vec<BiGru>,
}

impl GruEnsemble {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        input: usize,
        sizes: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let members = sizes
            .iter()
            .enumerate()
            .map(|(i, &h)| BiGru::new(store, &format!("bigru{i}"), input, h, rng))
            .collect();
        Self { members }
    }

    pub fn output_width(&self) -> usize {
        self.members.iter().map(BiGru::output_width).sum()
    }

    /// `[N × T × in]` → `[N × T × Σ 2·H_k]`.
    pub fn run<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let outs = self
            .members
            .iter()
            .map(|m| m.run(g, x))
            .collect::<Result<Vec<_>>>()?;
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        g.tape.concat(&outs, 2)
    }
}
