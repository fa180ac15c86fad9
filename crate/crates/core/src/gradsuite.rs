//! The finite-difference gradient suite: every differentiable operation on
//! small random inputs, then the whole model of each variant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ablation::conv1d_same;
use crate::config::{Activation, ModelConfig, SoftmaxAxis, Variant};
use crate::error::Result;
use crate::layers::{
    bigru_forward, dynamic_routing, gru_step, head_forward, predict_vectors, primary_capsules,
    Batch, GruVars, HeadVars, Model,
};
use crate::tensor::gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
use crate::tensor::{Tape, Tensor, Var};
use crate::text::{keyword_corpus, tokenize_docs, EmbeddingTable, Vocabulary};
use crate::training::{cross_entropy, model_grad_check};

/// One named check.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
}

/// `Σ w ⊙ y` with fixed random `w`, so every output element has its own adjoint.
fn weighted_sum(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w = tape.constant(random(&mut rng, tape.shape(y), 1.0));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn gru_params(rng: &mut ChaCha8Rng, hidden: usize, input: usize) -> Vec<Tensor<f64>> {
    let rows = hidden + input;
    let mut out: Vec<Tensor<f64>> = (0..3).map(|_| random(rng, &[rows, hidden], 0.8)).collect();
    out.extend((0..3).map(|_| random(rng, &[hidden], 0.5)));
    out
}

fn gru_vars(v: &[Var]) -> GruVars {
    GruVars {
        w_z: v[0],
        w_r: v[1],
        w_h: v[2],
        b_z: v[3],
        b_r: v[4],
        b_h: v[5],
    }
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Per-operation checks at tolerance `tol`.
pub fn operation_checks(tol: f64, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(&str, Vec<Tensor<f64>>, OpFn)> = Vec::new();
    let r = &mut rng;

    cases.push(("matmul", vec![random(r, &[3, 4], 1.0), random(r, &[4, 2], 1.0)], Box::new(|t, v| {
        let y = t.matmul(v[0], v[1])?;
        Ok(t.sum(y))
    })));
    cases.push(("bmm", vec![random(r, &[2, 3, 4], 1.0), random(r, &[2, 4, 2], 1.0)], Box::new(|t, v| {
        let y = t.bmm(v[0], v[1])?;
        weighted_sum(t, y)
    })));
    for name in ["sigmoid", "tanh", "relu", "selu"] {
        cases.push((name, vec![random(r, &[3, 5], 2.0)], Box::new(move |t, v| {
            let y = match name {
                "sigmoid" => t.sigmoid(v[0]),
                "tanh" => t.tanh(v[0]),
                "relu" => t.relu(v[0]),
                _ => t.selu(v[0]),
            };
            weighted_sum(t, y)
        })));
    }
    cases.push(("add_sub_mul_scale", vec![random(r, &[4, 3], 1.0), random(r, &[4, 3], 1.0)], Box::new(|t, v| {
        let a = t.add(v[0], v[1])?;
        let s = t.sub(a, v[1])?;
        let m = t.mul(s, v[1])?;
        let y = t.scale(m, -1.5);
        weighted_sum(t, y)
    })));
    for axis in [0, 1] {
        cases.push((if axis == 0 { "softmax_axis0" } else { "softmax_axis1" }, vec![random(r, &[3, 4], 2.0)], Box::new(move |t, v| {
            let y = t.softmax(v[0], axis)?;
            weighted_sum(t, y)
        })));
    }
    cases.push(("squash", vec![random(r, &[20], 1.0)], Box::new(|t, v| {
        let y = t.squash(v[0])?;
        weighted_sum(t, y)
    })));
    cases.push(("structural", vec![random(r, &[2, 3], 1.0), random(r, &[2, 2], 1.0)], Box::new(|t, v| {
        let c = t.concat(&[v[0], v[1]], 1)?;
        let s = t.slice(c, 1, 1, 3)?;
        let tr = t.transpose(s)?;
        let rs = t.reshape(tr, &[6])?;
        let n = t.norm(c, 1)?;
        let rsum = t.reduce_sum(c, 0)?;
        let (a, b, d) = (weighted_sum(t, rs)?, weighted_sum(t, n)?, weighted_sum(t, rsum)?);
        let ab = t.add(a, b)?;
        t.add(ab, d)
    })));
    cases.push(("gru_step", {
        let mut p = gru_params(r, 3, 2);
        p.push(random(r, &[2, 2], 1.0));
        p.push(random(r, &[2, 3], 1.0));
        p
    }, Box::new(|t, v| {
        let h = gru_step(t, v[6], v[7], &gru_vars(v), None)?;
        weighted_sum(t, h)
    })));
    cases.push(("bigru_forward", {
        let mut p = gru_params(r, 2, 3);
        p.extend(gru_params(r, 2, 3));
        p.push(random(r, &[2, 4, 3], 1.0));
        p
    }, Box::new(|t, v| {
        let y = bigru_forward(t, v[12], &gru_vars(&v[..6]), &gru_vars(&v[6..12]))?;
        weighted_sum(t, y)
    })));
    cases.push(("primary_capsules", vec![random(r, &[2, 3, 5], 1.0), random(r, &[5, 6], 1.0), random(r, &[6], 0.5)], Box::new(|t, v| {
        let c = primary_capsules(t, v[0], v[1], v[2], 3)?;
        weighted_sum(t, c)
    })));
    cases.push(("predict_vectors", vec![random(r, &[1, 2, 3], 1.0), random(r, &[2, 3, 6], 1.0)], Box::new(|t, v| {
        let p = predict_vectors(t, v[0], v[1], 3)?;
        weighted_sum(t, p)
    })));
    for axis in [SoftmaxAxis::OutputCaps, SoftmaxAxis::InputCaps] {
        let name = match axis {
            SoftmaxAxis::OutputCaps => "dynamic_routing",
            SoftmaxAxis::InputCaps => "dynamic_routing_input_axis",
        };
        cases.push((name, vec![random(r, &[2, 3, 4, 5], 1.0)], Box::new(move |t, v| {
            let routed = dynamic_routing(t, v[0], 3, axis)?;
            weighted_sum(t, routed.outputs)
        })));
    }
    cases.push(("conv1d", vec![random(r, &[2, 6, 3], 1.0), random(r, &[9, 4], 1.0), random(r, &[4], 0.5)], Box::new(|t, v| {
        let y = conv1d_same(t, v[0], v[1], v[2], 3)?;
        weighted_sum(t, y)
    })));
    cases.push(("max_pool", vec![random(r, &[2, 8, 3], 1.0)], Box::new(|t, v| {
        let y = t.max_pool(v[0], 4)?;
        weighted_sum(t, y)
    })));
    for act in [Activation::Relu, Activation::Selu] {
        let name = match act {
            Activation::Relu => "dense_head_relu",
            Activation::Selu => "dense_head_selu",
        };
        cases.push((name, vec![
            random(r, &[3, 5], 1.0),
            random(r, &[5, 4], 1.0),
            random(r, &[4], 0.5),
            random(r, &[4, 3], 1.0),
            random(r, &[3], 0.5),
        ], Box::new(move |t, v| {
            let p = HeadVars { w1: v[1], b1: v[2], w2: v[3], b2: v[4] };
            let probs = head_forward(t, v[0], &p, act)?;
            weighted_sum(t, probs)
        })));
    }
    cases.push(("cross_entropy", vec![random(r, &[3, 4], 2.0)], Box::new(|t, v| {
        let probs = t.softmax(v[0], 1)?;
        cross_entropy(t, probs, &[1, 3, 0])
    })));

    cases
        .into_iter()
        .map(|(name, inputs, f)| {
            Ok(SuiteEntry {
                name: name.to_owned(),
                report: grad_check(f, &inputs, DEFAULT_STEP, tol)?,
            })
        })
        .collect()
}

/// Configuration of the composite check: tiny widths, short documents, every
/// parameter group trainable.
pub fn composite_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        max_len: 8,
        embed_dim: 3,
        embed_trainable: true,
        bigru_sizes: vec![2, 2],
        caps_dim: 3,
        routed_caps: 2,
        routed_dim: 3,
        dense_hidden: 4,
        cnn_widths: vec![2, 3],
        cnn_filters: 2,
        ..ModelConfig::toy(2)
    }
}

/// Whole-model loss gradient on a 2-document batch for each variant.
pub fn composite_checks(tol: f64, seed: u64) -> Result<Vec<SuiteEntry>> {
    let docs = keyword_corpus(2, seed);
    let vocab = Vocabulary::from_texts(docs.iter().map(|d| d.text.as_str()));
    let mut out = Vec::new();
    for variant in [Variant::Bgcapsule, Variant::BigruMaxpool, Variant::CnnCapsule] {
        let cfg = composite_config(variant);
        let table = EmbeddingTable::random(&vocab, cfg.embed_dim, seed);
        let tokens = tokenize_docs(&docs, &vocab, cfg.max_len, cfg.truncation);
        let batch = Batch::from_docs(&tokens.iter().collect::<Vec<_>>())?;
        let mut model = Model::<f32>::new(&cfg, &table)?.cast::<f64>();
        // generic (nonzero) biases keep ReLU inputs off their kink over padding
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
        for p in model.params.iter_mut().filter(|p| p.value.rank() == 1) {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
        out.push(SuiteEntry {
            name: format!("model_{}", variant.name()),
            report: model_grad_check(&model, &batch, DEFAULT_STEP, tol)?,
        });
    }
    Ok(out)
}

/// Both parts of the suite.
pub fn run_suite(op_tol: f64, composite_tol: f64, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut all = operation_checks(op_tol, seed)?;
    all.extend(composite_checks(composite_tol, seed)?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_default_tolerances() {
        let entries = run_suite(1e-4, 1e-3, 1).unwrap();
        assert!(entries.len() >= 20);
        for e in &entries {
            assert!(e.report.passed(), "{}: {}", e.name, e.report);
            assert!(e.report.checked > 0, "{}", e.name);
        }
    }
}
