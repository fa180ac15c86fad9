//! Primary capsules, prediction vectors, and dynamic routing by agreement.
//!
//! Batched layouts used throughout:
//!
//! * capsules `u`: `[N × I × D]`
//! * predictions `û`: `[N × J × I × D']`, with `û[n, j, i] = u[n, i]ᵀ · W_i[:, j·D'..(j+1)·D']`
//! * routed outputs `v`: `[N × J × D']`
//! * routing logits and couplings are kept as `[N × J × I]` on the tape and
//!   reported as `[N × I × J]`.

use rand_chacha::ChaCha8Rng;

use super::init::glorot;
use super::{linear, Graph, ParamId, ParamStore};
use crate::config::SoftmaxAxis;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// A learned per-position projection of features into `per_position` capsules of `dim`.
#[derive(Clone, Debug)]
pub struct PrimaryCapsules {
    pub per_position: usize,
    pub dim: usize,
    w: ParamId,
    b: ParamId,
}

impl PrimaryCapsules {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        features: usize,
        per_position: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let out = per_position * dim;
        let w = store.add("primary.w", glorot(&[features, out], features, out, rng), true);
        let b = store.add("primary.b", Tensor::zeros([out]), true);
        Self {
            per_position,
            dim,
            w,
            b,
        }
    }

    /// `[N × T × F]` → squashed capsules `[N × T·P × D]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.p(self.w), g.p(self.b));
        primary_capsules(&mut g.tape, x, w, b, self.dim)
    }
}

/// Projects each position of `x: [N × T × F]` with `w: [F × P·D]`, `b: [P·D]`,
/// stacks positions into `T·P` capsules and squashes each.
pub fn primary_capsules<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    b: Var,
    dim: usize,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let out = tape.shape(w).get(1).copied().unwrap_or(0);
    if shape.len() != 3 || dim == 0 || out % dim != 0 {
        return Err(Error::Config(format!(
            "primary capsules: projection width {out} is not a multiple of capsule dim {dim}"
        )));
    }
    let (n, t, f) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(x, &[n * t, f])?;
    let proj = linear(tape, flat, w, b)?;
    let caps = tape.reshape(proj, &[n, t * out / dim, dim])?;
    tape.squash(caps)
}

/// Prediction vectors `û = Wᵀu` for capsules `u: [N × I × D]`.
///
/// `w: [G × D × J·D']` holds `G` weight banks. With `G = I` every input capsule
/// has its own bank (one matrix per `(i, j)` pair); with `G < I` the capsules are
/// read as `I/G` position groups of `G` and capsule `i` uses bank `i mod G`.
/// Returns `[N × J × I × D']`.
pub fn predict_vectors<T: Scalar>(
    tape: &mut Tape<T>,
    u: Var,
    w: Var,
    out_caps: usize,
) -> Result<Var> {
    let us = tape.shape(u).to_vec();
    let ws = tape.shape(w).to_vec();
    let consistent = us.len() == 3
        && ws.len() == 3
        && ws[1] == us[2]
        && out_caps > 0
        && ws[2] % out_caps == 0
        && us[1] % ws[0] == 0;
    if !consistent {
        return Err(Error::dim("predict_vectors", &us, &ws));
    }
    let (n, i_caps, d) = (us[0], us[1], us[2]);
    let groups = ws[0];
    let positions = i_caps / groups;
    let d_out = ws[2] / out_caps;
    let grouped = tape.reshape(u, &[n * positions, groups, d])?;
    let grouped = tape.permute(grouped, &[1, 0, 2])?;
    let pred = tape.bmm(grouped, w)?;
    let pred = tape.reshape(pred, &[groups, n, positions, out_caps, d_out])?;
    let pred = tape.permute(pred, &[1, 3, 2, 0, 4])?;
    tape.reshape(pred, &[n, out_caps, i_caps, d_out])
}

/// Result of [`dynamic_routing`].
#[derive(Clone, Debug)]
pub struct Routing<T: Scalar> {
    /// Routed capsules `v: [N × J × D']`.
    pub outputs: Var,
    /// Coupling coefficients `c: [N × I × J]` after each iteration's softmax.
    pub couplings: Vec<Tensor<T>>,
}

impl<T: Scalar> Routing<T> {
    /// The couplings the final outputs were computed with.
    pub fn final_couplings(&self) -> &Tensor<T> {
        self.couplings.last().expect("routing runs at least one iteration")
    }
}

/// Routing by agreement over predictions `û: [N × J × I × D']`, fully unrolled.
///
/// Starting from zero logits, each of `iters` rounds computes couplings
/// `c = softmax(b)`, outputs `v_j = squash(Σ_i c_ij û_{j|i})`, and (except after
/// the last round, where it cannot affect the result) `b_ij += û_{j|i}·v_j`.
/// `axis` picks whether couplings normalise over output or input capsules.
pub fn dynamic_routing<T: Scalar>(
    tape: &mut Tape<T>,
    predictions: Var,
    iters: usize,
    axis: SoftmaxAxis,
) -> Result<Routing<T>> {
    if iters == 0 {
        return Err(Error::Contract("routing needs at least one iteration".into()));
    }
    let shape = tape.shape(predictions).to_vec();
    if shape.len() != 4 {
        return Err(Error::dim("dynamic_routing", &shape, &[4]));
    }
    let (n, j_caps, i_caps, d_out) = (shape[0], shape[1], shape[2], shape[3]);
    let norm_axis = match axis {
        SoftmaxAxis::OutputCaps => 1,
        SoftmaxAxis::InputCaps => 2,
    };
    let u = tape.reshape(predictions, &[n * j_caps, i_caps, d_out])?;
    let mut b = tape.constant(Tensor::zeros([n, j_caps, i_caps]));
    let mut couplings = Vec::with_capacity(iters);
    let mut v = b;
    for round in 0..iters {
        let c = tape.softmax(b, norm_axis)?;
        couplings.push(report_layout(tape.value(c)));
        let c_rows = tape.reshape(c, &[n * j_caps, 1, i_caps])?;
        let s = tape.bmm(c_rows, u)?;
        let s = tape.reshape(s, &[n, j_caps, d_out])?;
        v = tape.squash(s)?;
        if round + 1 < iters {
            let v_col = tape.reshape(v, &[n * j_caps, d_out, 1])?;
            let agreement = tape.bmm(u, v_col)?;
            let agreement = tape.reshape(agreement, &[n, j_caps, i_caps])?;
            b = tape.add(b, agreement)?;
        }
    }
    Ok(Routing {
        outputs: v,
        couplings,
    })
}

/// `[N × J × I]` → `[N × I × J]`.
fn report_layout<T: Scalar>(c: &Tensor<T>) -> Tensor<T> {
    let s = c.shape();
    let (n, j, i) = (s[0], s[1], s[2]);
    let src = c.data();
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for jj in 0..j {
            for ii in 0..i {
                out[b * i * j + ii * j + jj] = src[b * j * i + jj * i + ii];
            }
        }
    }
    Tensor::from_parts(vec![n, i, j], out)
}

/// `[N × J × D']` → `[N × J·D']`, row-major.
pub fn flatten_capsules<T: Scalar>(tape: &mut Tape<T>, v: Var) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    if s.len() != 3 {
        return Err(Error::dim("flatten_capsules", &s, &[3]));
    }
    tape.reshape(v, &[s[0], s[1] * s[2]])
}

/// Prediction weights plus routing settings: capsules in, flattened routed capsules out.
#[derive(Clone, Debug)]
pub struct RoutedCapsules {
    pub out_caps: usize,
    pub out_dim: usize,
    pub iters: usize,
    pub axis: SoftmaxAxis,
    w: ParamId,
}

impl RoutedCapsules {
    /// `banks` is the number of weight banks (see [`predict_vectors`]).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        banks: usize,
        in_dim: usize,
        out_caps: usize,
        out_dim: usize,
        iters: usize,
        axis: SoftmaxAxis,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(
            "routing.w",
            glorot(&[banks, in_dim, out_caps * out_dim], in_dim, out_dim, rng),
            true,
        );
        Self {
            out_caps,
            out_dim,
            iters,
            axis,
            w,
        }
    }

    /// Capsules `[N × I × D]` → `[N × J·D']`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, u: Var) -> Result<Var> {
        let w = g.p(self.w);
        let pred = predict_vectors(&mut g.tape, u, w, self.out_caps)?;
        let routing = dynamic_routing(&mut g.tape, pred, self.iters, self.axis)?;
        flatten_capsules(&mut g.tape, routing.outputs)
    }
}
