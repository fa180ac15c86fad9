//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Every expected value is computed here by an independent plain-loop
//! reimplementation or a closed-form derivation, never by the library under
//! test. Criteria that need external corpora read their location from an
//! environment variable and report BLOCKED (nothing checked) or PARTIAL (the
//! data-free parts checked) when it is unset; neither is reported as a pass.
//!
//! * `BGC_MR_DIR`       — directory with `rt-polarity.pos` / `rt-polarity.neg`
//! * `BGC_GLOVE_50D`    — optional 50-d GloVe text file for the MR smoke test
//! * `BGC_AG_NEWS_DIR`  — AG's News `train.csv` / `test.csv`
//! * `BGC_DBPEDIA_DIR`  — DBpedia `train.csv` / `test.csv`

use std::path::PathBuf;
use std::time::{Duration, Instant};

use bgcapsule::artifact;
use bgcapsule::gradsuite::run_suite;
use bgcapsule::layers::{dynamic_routing, gru_step, Batch, GruVars};
use bgcapsule::tensor::gradcheck::DEFAULT_STEP;
use bgcapsule::text::{
    encode_text, holdout, keyword_corpus, kfold_split, load_dataset, load_glove, pad_prepend,
    tokenize_docs, DatasetFormat, EmbeddingTable, ExpectedCounts, TokenizedDoc, Truncation,
    Vocabulary,
};
use bgcapsule::training::{evaluate, train};
use bgcapsule::{Model, ModelConfig, SoftmaxAxis, Tape, Tensor, Variant, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- tolerances and budgets -------------------------------------------------

const GRAD_OP_TOL: f64 = 1e-4;
const GRAD_MODEL_TOL: f64 = 1e-3;
const GRAD_STEP: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(120);

const SQUASH_TOL: f64 = 1e-6;
const SQUASH_RANDOM: usize = 1000;

const ROUTING_TOL: f64 = 1e-5;
const COUPLING_SUM_TOL: f64 = 1e-6;
const PERMUTATION_TOL: f64 = 1e-6;
const UNIFORM_ROUTE_TOL: f64 = 1e-12;

const GRU_TOL: f64 = 1e-6;
const GRU_CASES: usize = 100;

const E2E_DOCS: usize = 200;
const E2E_MIN_ACC: f64 = 0.95;
const E2E_EPOCHS: usize = 10;
const E2E_BUDGET: Duration = Duration::from_secs(60);

const MR_MIN_ACC: f64 = 0.70;
const MR_EPOCHS: usize = 25;
const MR_BUDGET: Duration = Duration::from_secs(30 * 60);

const PAD_LEN: usize = 200;

// ---- harness ---------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass,
    Fail,
    Partial,
    Blocked,
}

struct Verdict {
    status: Status,
    detail: String,
}

impl Verdict {
    fn from_checks(checks: &Checks, extra: impl Into<String>) -> Self {
        let extra = extra.into();
        if checks.failures.is_empty() {
            Self { status: Status::Pass, detail: extra }
        } else {
            Self {
                status: Status::Fail,
                detail: format!("{extra}; {}", checks.failures.join("; ")),
            }
        }
    }
}

/// Collects failed expectations instead of stopping at the first.
#[derive(Default)]
struct Checks {
    failures: Vec<String>,
}

impl Checks {
    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok && self.failures.len() < 8 {
            self.failures.push(what());
        }
    }
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("gradient suite", criterion_1),
        ("squash law", criterion_2),
        ("routing oracle", criterion_3),
        ("GRU cell", criterion_4),
        ("end-to-end learning", criterion_5),
        ("MR smoke test", criterion_6),
        ("determinism & persistence", criterion_7),
        ("pipeline contracts", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = std::panic::catch_unwind(run).unwrap_or_else(|e| Verdict {
            status: Status::Fail,
            detail: format!(
                "panicked: {}",
                e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
            ),
        });
        let tag = match verdict.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::Partial => "PARTIAL",
            Status::Blocked => "BLOCKED",
        };
        println!(
            "criterion {}: {tag} {name} [{:.1}s] {}",
            i + 1,
            start.elapsed().as_secs_f64(),
            verdict.detail
        );
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

// ---- 1. gradient suite -----------------------------------------------------

fn criterion_1() -> Verdict {
    let mut c = Checks::default();
    c.check(DEFAULT_STEP == GRAD_STEP, || format!("finite-difference step {DEFAULT_STEP}"));
    let start = Instant::now();
    let entries = run_suite(GRAD_OP_TOL, GRAD_MODEL_TOL, 1).expect("suite runs");
    let elapsed = start.elapsed();
    let required = [
        "matmul", "sigmoid", "tanh", "relu", "selu", "softmax_axis1", "squash", "gru_step",
        "bigru_forward", "predict_vectors", "dynamic_routing", "dense_head_relu",
        "cross_entropy", "model_bgcapsule", "model_bigru_maxpool", "model_cnn_capsule",
    ];
    for name in required {
        c.check(entries.iter().any(|e| e.name == name), || format!("no check for {name}"));
    }
    let mut worst_op: f64 = 0.0;
    let mut worst_model: f64 = 0.0;
    for e in &entries {
        let composite = e.name.starts_with("model_");
        let tol = if composite { GRAD_MODEL_TOL } else { GRAD_OP_TOL };
        c.check(e.report.checked > 0, || format!("{}: nothing checked", e.name));
        c.check(e.report.max_err <= tol && e.report.failures.is_empty(), || format!("{}: {}", e.name, e.report));
        if composite {
            worst_model = worst_model.max(e.report.max_err);
        } else {
            worst_op = worst_op.max(e.report.max_err);
        }
    }
    c.check(elapsed < GRAD_BUDGET, || format!("took {elapsed:?}"));
    Verdict::from_checks(
        &c,
        format!(
            "{} checks, worst op err {worst_op:.2e} (tol {GRAD_OP_TOL:.0e}), worst model err {worst_model:.2e} (tol {GRAD_MODEL_TOL:.0e}), {:.1}s",
            entries.len(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---- 2. squash -------------------------------------------------------------

fn squash(s: &[f64]) -> Vec<f64> {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![s.len()], s.to_vec()).unwrap());
    let y = tape.squash(x).unwrap();
    tape.value(y).data().to_vec()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn with_norm(dir: &[f64], target: f64) -> Vec<f64> {
    let n = norm(dir);
    dir.iter().map(|x| x / n * target).collect()
}

fn criterion_2() -> Verdict {
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut vectors: Vec<Vec<f64>> = (0..SQUASH_RANDOM)
        .map(|_| {
            let dim = rng.gen_range(1..=16);
            let dir: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            with_norm(&dir, 10f64.powf(rng.gen_range(-7.0..7.0)))
        })
        .collect();
    let base: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for target in [1e-6, 1.0, 10.0, 1e6] {
        vectors.push(with_norm(&base, target));
    }
    vectors.push(vec![0.0; 8]);

    for s in &vectors {
        let v = squash(s);
        let (ns, nv) = (norm(s), norm(&v));
        c.check(nv < 1.0, || format!("‖squash‖ = {nv} at ‖s‖ = {ns:e}"));
        if ns > 0.0 {
            let cos = s.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / (ns * nv);
            c.check((cos - 1.0).abs() <= SQUASH_TOL, || format!("cosine {cos} at ‖s‖ = {ns:e}"));
        } else {
            c.check(v.iter().all(|&x| x == 0.0), || "squash(0) ≠ 0".into());
        }
    }
    let at = |n: f64| norm(&squash(&with_norm(&base, n)));
    c.check((at(1.0) - 0.5).abs() <= SQUASH_TOL, || format!("‖squash‖ at 1 = {}", at(1.0)));
    c.check((at(10.0) - 100.0 / 101.0).abs() <= SQUASH_TOL, || format!("‖squash‖ at 10 = {}", at(10.0)));
    let grid: Vec<f64> = (0..=240).map(|k| 10f64.powf(-6.0 + 0.05 * k as f64)).collect();
    let norms: Vec<f64> = grid.iter().map(|&n| at(n)).collect();
    for w in grid.windows(2).zip(norms.windows(2)) {
        c.check(w.1[1] > w.1[0], || format!("not increasing between ‖s‖ = {:e} and {:e}", w.0[0], w.0[1]));
    }
    Verdict::from_checks(&c, format!("{} vectors, 241-point monotonicity sweep 1e-6..1e6", vectors.len()))
}

// ---- 3. routing ------------------------------------------------------------

/// Plain-loop routing by agreement: `u[j][i][d]`, returns outputs `[j][d]` and
/// couplings `c[i][j]` after every round.
fn oracle_routing(u: &[Vec<Vec<f64>>], iters: usize, over_outputs: bool) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let (jn, inn, dn) = (u.len(), u[0].len(), u[0][0].len());
    let mut b = vec![vec![0.0; jn]; inn];
    let mut history = Vec::new();
    let mut v = vec![vec![0.0; dn]; jn];
    for it in 0..iters {
        let mut cpl = vec![vec![0.0; jn]; inn];
        if over_outputs {
            for i in 0..inn {
                let m = b[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = b[i].iter().map(|x| (x - m).exp()).sum();
                for j in 0..jn {
                    cpl[i][j] = (b[i][j] - m).exp() / z;
                }
            }
        } else {
            for j in 0..jn {
                let m = (0..inn).map(|i| b[i][j]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..inn).map(|i| (b[i][j] - m).exp()).sum();
                for i in 0..inn {
                    cpl[i][j] = (b[i][j] - m).exp() / z;
                }
            }
        }
        for j in 0..jn {
            let mut s = vec![0.0; dn];
            for i in 0..inn {
                for d in 0..dn {
                    s[d] += cpl[i][j] * u[j][i][d];
                }
            }
            let n2: f64 = s.iter().map(|x| x * x).sum();
            let n = n2.sqrt();
            v[j] = if n == 0.0 { vec![0.0; dn] } else { s.iter().map(|x| n2 / (1.0 + n2) * x / n).collect() };
        }
        history.push(cpl);
        if it + 1 < iters {
            for i in 0..inn {
                for j in 0..jn {
                    b[i][j] += (0..dn).map(|d| u[j][i][d] * v[j][d]).sum::<f64>();
                }
            }
        }
    }
    (v, history)
}

fn production_routing(u: &[Vec<Vec<f64>>], iters: usize, axis: SoftmaxAxis) -> (Vec<f64>, Vec<Tensor<f64>>) {
    let (jn, inn, dn) = (u.len(), u[0].len(), u[0][0].len());
    let flat: Vec<f64> = u.iter().flatten().flatten().copied().collect();
    let mut tape = Tape::<f64>::new();
    let pred = tape.constant(Tensor::new(vec![1, jn, inn, dn], flat).unwrap());
    let routed = dynamic_routing(&mut tape, pred, iters, axis).unwrap();
    (tape.value(routed.outputs).data().to_vec(), routed.couplings)
}

fn criterion_3() -> Verdict {
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for inn in 1..=5 {
        for jn in 1..=4 {
            for dn in [2, 8] {
                for iters in 1..=3 {
                    let u: Vec<Vec<Vec<f64>>> = (0..jn)
                        .map(|_| (0..inn).map(|_| (0..dn).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect())
                        .collect();
                    for axis in [SoftmaxAxis::OutputCaps, SoftmaxAxis::InputCaps] {
                        cases += 1;
                        let over_outputs = axis == SoftmaxAxis::OutputCaps;
                        let (want_v, want_c) = oracle_routing(&u, iters, over_outputs);
                        let (got_v, got_c) = production_routing(&u, iters, axis);
                        let label = format!("I={inn} J={jn} D={dn} r={iters} {axis:?}");
                        for (g, w) in got_v.iter().zip(want_v.iter().flatten()) {
                            worst = worst.max((g - w).abs());
                            c.check((g - w).abs() <= ROUTING_TOL, || format!("{label}: output {g} vs {w}"));
                        }
                        c.check(got_c.len() == iters, || format!("{label}: {} coupling snapshots", got_c.len()));
                        for (round, (gc, wc)) in got_c.iter().zip(&want_c).enumerate() {
                            c.check(gc.shape() == [1, inn, jn], || format!("{label}: coupling shape {:?}", gc.shape()));
                            for (g, w) in gc.data().iter().zip(wc.iter().flatten()) {
                                c.check((g - w).abs() <= ROUTING_TOL, || format!("{label} round {round}: coupling {g} vs {w}"));
                            }
                            let sums: Vec<f64> = if over_outputs {
                                gc.data().chunks(jn).map(|r| r.iter().sum()).collect()
                            } else {
                                (0..jn).map(|j| (0..inn).map(|i| gc.data()[i * jn + j]).sum()).collect()
                            };
                            for s in sums {
                                c.check((s - 1.0).abs() <= COUPLING_SUM_TOL, || format!("{label} round {round}: couplings sum {s}"));
                            }
                        }
                        // input capsules are an unordered set
                        let perm: Vec<usize> = (0..inn).rev().collect();
                        let permuted: Vec<Vec<Vec<f64>>> = u.iter().map(|row| perm.iter().map(|&i| row[i].clone()).collect()).collect();
                        let (pv, _) = production_routing(&permuted, iters, axis);
                        for (a, b) in pv.iter().zip(&got_v) {
                            c.check((a - b).abs() <= PERMUTATION_TOL, || format!("{label}: permutation moved output by {}", (a - b).abs()));
                        }
                    }
                    if iters == 1 {
                        // zero logits: c = 1/J, so v_j = squash((1/J) Σ_i u_{j|i})
                        let (got_v, _) = production_routing(&u, 1, SoftmaxAxis::OutputCaps);
                        for j in 0..jn {
                            let s: Vec<f64> = (0..dn).map(|d| (0..inn).map(|i| u[j][i][d]).sum::<f64>() / jn as f64).collect();
                            let n2: f64 = s.iter().map(|x| x * x).sum();
                            for d in 0..dn {
                                let want = n2 / (1.0 + n2) * s[d] / n2.sqrt();
                                let got = got_v[j * dn + d];
                                c.check((got - want).abs() <= UNIFORM_ROUTE_TOL, || format!("r=1 closed form: {got} vs {want}"));
                            }
                        }
                    }
                }
            }
        }
    }
    Verdict::from_checks(&c, format!("{cases} grid cases, worst output diff {worst:.1e}"))
}

// ---- 4. GRU ----------------------------------------------------------------

struct Cell {
    hidden: usize,
    // row-major (hidden + input) × hidden, h rows first
    w: [Vec<f64>; 3],
    b: [Vec<f64>; 3],
}

impl Cell {
    fn step(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        let hd = self.hidden;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let affine = |g: usize, left: &[f64], k: usize| {
            left.iter().chain(x).enumerate().map(|(row, v)| v * self.w[g][row * hd + k]).sum::<f64>() + self.b[g][k]
        };
        let z: Vec<f64> = (0..hd).map(|k| sig(affine(0, h, k))).collect();
        let r: Vec<f64> = (0..hd).map(|k| sig(affine(1, h, k))).collect();
        let rh: Vec<f64> = (0..hd).map(|k| r[k] * h[k]).collect();
        (0..hd)
            .map(|k| {
                let cand = affine(2, &rh, k).tanh();
                (1.0 - z[k]) * h[k] + z[k] * cand
            })
            .collect()
    }

    fn production(&self, x: &[f64], h: &[f64], input: usize) -> Vec<f64> {
        let hd = self.hidden;
        let mut tape = Tape::<f64>::new();
        let mut c = |shape: Vec<usize>, v: &[f64]| tape.constant(Tensor::new(shape, v.to_vec()).unwrap());
        let rows = hd + input;
        let mut vars: Vec<Var> = (0..3).map(|g| c(vec![rows, hd], &self.w[g])).collect();
        vars.extend((0..3).map(|g| c(vec![hd], &self.b[g])));
        let xv = c(vec![1, input], x);
        let hv = c(vec![1, hd], h);
        let p = GruVars { w_z: vars[0], w_r: vars[1], w_h: vars[2], b_z: vars[3], b_r: vars[4], b_h: vars[5] };
        let out = gru_step(&mut tape, xv, hv, &p, None).unwrap();
        tape.value(out).data().to_vec()
    }
}

fn criterion_4() -> Verdict {
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (hd, input) = (rng.gen_range(1..6), rng.gen_range(1..5));
        let h: Vec<f64> = (0..hd).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x: Vec<f64> = (0..input).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let zero = Cell {
            hidden: hd,
            w: std::array::from_fn(|_| vec![0.0; (hd + input) * hd]),
            b: std::array::from_fn(|_| vec![0.0; hd]),
        };
        // z = r = σ(0) = ½, candidate = tanh(0) = 0  ⇒  h' = ½ h
        for (got, prev) in zero.production(&x, &h, input).iter().zip(&h) {
            c.check((got - 0.5 * prev).abs() <= GRU_TOL, || format!("zero params: {got} vs {}", 0.5 * prev));
        }
        let mut carry = Cell {
            hidden: hd,
            w: std::array::from_fn(|_| (0..(hd + input) * hd).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            b: std::array::from_fn(|_| (0..hd).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        };
        carry.b[0] = vec![-1e6; hd];
        c.check(carry.production(&x, &h, input) == h, || "saturated update gate changed the state".into());
    }
    for _ in 0..GRU_CASES {
        let (hd, input) = (rng.gen_range(1..8), rng.gen_range(1..8));
        let cell = Cell {
            hidden: hd,
            w: std::array::from_fn(|_| (0..(hd + input) * hd).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            b: std::array::from_fn(|_| (0..hd).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        };
        let h: Vec<f64> = (0..hd).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..input).map(|_| rng.gen_range(-3.0..3.0)).collect();
        for (g, w) in cell.production(&x, &h, input).iter().zip(cell.step(&x, &h)) {
            worst = worst.max((g - w).abs());
            c.check((g - w).abs() <= GRU_TOL, || format!("scalar oracle: {g} vs {w}"));
        }
    }
    Verdict::from_checks(&c, format!("20 zero/saturation cases, {GRU_CASES} scalar cases, worst diff {worst:.1e}"))
}

// ---- 5. end-to-end ---------------------------------------------------------

fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = bgcapsule_cli::run(std::iter::once("bgc").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn field<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    line.split(' ').find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
}

fn criterion_5() -> Verdict {
    let mut c = Checks::default();
    let cfg = ModelConfig::toy(2);
    c.check(
        cfg.embed_dim == 8 && cfg.bigru_sizes == [4, 3] && cfg.caps_dim == 4 && cfg.routed_caps == 3 && cfg.epochs == E2E_EPOCHS,
        || format!("toy config is not the stated toy dims: {cfg:?}"),
    );
    let docs = keyword_corpus(E2E_DOCS, 5);
    let vocab = Vocabulary::from_texts(docs.iter().map(|d| d.text.as_str()));
    let table = EmbeddingTable::random(&vocab, cfg.embed_dim, cfg.seed);
    let tokens = tokenize_docs(&docs, &vocab, cfg.max_len, cfg.truncation);
    let start = Instant::now();
    let mut model = Model::<f32>::new(&cfg, &table).unwrap();
    train(&mut model, &tokens, None, |_| {}).unwrap();
    let elapsed = start.elapsed();
    let acc = evaluate(&model, &tokens).unwrap().accuracy;
    c.check(acc >= E2E_MIN_ACC, || format!("BGCapsule train acc {acc}"));
    c.check(elapsed < E2E_BUDGET, || format!("BGCapsule took {elapsed:?}"));

    // all three variants through the ablate command
    let start = Instant::now();
    let (code, out, err) = cli(&["ablate", "--preset", "toy", "--synthetic", &E2E_DOCS.to_string()]);
    let ablate_time = start.elapsed();
    c.check(code == 0, || format!("ablate exit {code}: {err}"));
    c.check(out.lines().next().is_some_and(|h| h.contains("BiGRU + Max Pooling") && h.contains("CNN + Capsule Network") && h.contains("BGCapsule")), || "ablate table header".into());
    let mut summary = vec![format!("bgcapsule={acc:.3} in {:.1}s", elapsed.as_secs_f64())];
    for v in Variant::ALL {
        let line = err
            .lines()
            .find(|l| l.starts_with(&format!("variant={} train_acc=", v.name())))
            .unwrap_or_default();
        let train_acc: f64 = field(line, "train_acc").and_then(|s| s.parse().ok()).unwrap_or(-1.0);
        let epochs = err.lines().filter(|l| l.starts_with(&format!("variant={} epoch=", v.name()))).count();
        c.check(train_acc >= E2E_MIN_ACC, || format!("ablate {}: train acc {train_acc}", v.name()));
        c.check(epochs == E2E_EPOCHS, || format!("ablate {}: {epochs} epochs", v.name()));
        summary.push(format!("ablate {}={train_acc:.3}", v.name()));
    }
    c.check(ablate_time < 3 * E2E_BUDGET, || format!("ablate took {ablate_time:?}"));
    summary.push(format!("ablate {:.1}s", ablate_time.as_secs_f64()));
    Verdict::from_checks(&c, summary.join(", "))
}

// ---- 6. MR -----------------------------------------------------------------

fn env_dir(var: &str) -> Option<PathBuf> {
    std::env::var_os(var).map(PathBuf::from).filter(|p| p.is_dir())
}

fn criterion_6() -> Verdict {
    let Some(dir) = env_dir("BGC_MR_DIR") else {
        return Verdict {
            status: Status::Blocked,
            detail: "MR corpus not available (set BGC_MR_DIR); nothing checked".into(),
        };
    };
    let mut c = Checks::default();
    let split = load_dataset(&dir, DatasetFormat::MrPolarity, Some(ExpectedCounts::MR)).unwrap();
    let cfg = ModelConfig {
        embed_dim: 50,
        embed_trainable: true,
        bigru_sizes: vec![32, 24],
        dense_hidden: 32,
        dropout: 0.25,
        batch_size: 50,
        epochs: MR_EPOCHS,
        lr: 2e-3,
        seed: 6,
        ..ModelConfig::toy(2)
    };
    let fold = holdout(split.train.len(), 0.1, cfg.seed).unwrap();
    let pick = |idx: &[usize]| idx.iter().map(|&i| split.train[i].clone()).collect::<Vec<_>>();
    let (train_docs, test_docs) = (pick(&fold.train), pick(&fold.validation));
    let vocab = Vocabulary::from_texts(train_docs.iter().map(|d| d.text.as_str()));
    let (table, source) = match std::env::var_os("BGC_GLOVE_50D") {
        Some(p) => {
            let (t, cov) = load_glove(&PathBuf::from(p), &vocab, cfg.embed_dim, cfg.seed).unwrap();
            (t, format!("glove {cov}"))
        }
        None => (EmbeddingTable::random(&vocab, cfg.embed_dim, cfg.seed), "random fine-tuned embeddings".into()),
    };
    let tok = |d: &[bgcapsule::text::Document]| tokenize_docs(d, &vocab, cfg.max_len, cfg.truncation);
    let (train_tok, test_tok) = (tok(&train_docs), tok(&test_docs));
    let start = Instant::now();
    let mut model = Model::<f32>::new(&cfg, &table).unwrap();
    train(&mut model, &train_tok, None, |r| eprintln!("mr {r}")).unwrap();
    let elapsed = start.elapsed();
    let acc = evaluate(&model, &test_tok).unwrap().accuracy;
    c.check(acc >= MR_MIN_ACC, || format!("test acc {acc}"));
    c.check(elapsed < MR_BUDGET, || format!("took {elapsed:?}"));
    Verdict::from_checks(&c, format!("hold-out acc {acc:.4} after {MR_EPOCHS} epochs, {source}, {:.0}s", elapsed.as_secs_f64()))
}

// ---- 7. determinism, persistence, folds -------------------------------------

fn criterion_7() -> Verdict {
    let mut c = Checks::default();
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("det.cfg");
    std::fs::write(&cfg_path, "dropout = 0.25\nepochs = 3\n").unwrap();
    let train_to = |name: &str, seed: &str| {
        let p = dir.path().join(name);
        let (code, _, err) = cli(&["train", "--preset", "toy", "--config", cfg_path.to_str().unwrap(), "--synthetic", "60", "--seed", seed, "--out", p.to_str().unwrap()]);
        assert_eq!(code, 0, "{err}");
        std::fs::read(p).unwrap()
    };
    let (a, b, other) = (train_to("a.bgc", "7"), train_to("b.bgc", "7"), train_to("c.bgc", "8"));
    c.check(a == b, || "same seed gave different model files".into());
    c.check(a != other, || "different seeds gave the same model file".into());

    // save → load keeps evaluation outputs bitwise
    let (model, vocab) = artifact::from_bytes(&a).unwrap();
    let docs = keyword_corpus(30, 70);
    let tokens = tokenize_docs(&docs, &vocab, model.config.max_len, model.config.truncation);
    let batch = Batch::from_docs(&tokens.iter().collect::<Vec<_>>()).unwrap();
    let before = model.predict(&batch).unwrap();
    let image = artifact::to_bytes(&model, &vocab).unwrap();
    c.check(image == a, || "re-serialising changed the file".into());
    let (back, _) = artifact::from_bytes(&image).unwrap();
    let after = back.predict(&batch).unwrap();
    let same_bits = before.data().iter().zip(after.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    c.check(same_bits, || "reloaded model predicts different bits".into());
    c.check(back.config == model.config, || "config changed across save/load".into());

    // fold partitions are exhaustive and disjoint
    for (n, k) in [(10, 10), (37, 3), (100, 10), (10_662, 10), (5, 2)] {
        let folds = kfold_split(n, k, 11).unwrap();
        let mut seen = vec![0usize; n];
        for f in &folds {
            for &i in &f.validation {
                seen[i] += 1;
            }
            let mut all: Vec<usize> = f.train.iter().chain(&f.validation).copied().collect();
            all.sort_unstable();
            c.check(all == (0..n).collect::<Vec<_>>(), || format!("n={n} k={k}: train ∪ held-out is not the corpus"));
        }
        c.check(folds.len() == k && seen.iter().all(|&s| s == 1), || format!("n={n} k={k}: held-out folds not a partition"));
        let sizes: Vec<usize> = folds.iter().map(|f| f.validation.len()).collect();
        c.check(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1, || format!("n={n} k={k}: fold sizes {sizes:?}"));
    }

    // cv report: mean is the fold average, best is the fold maximum
    let (code, out, err) = cli(&["cv", "--preset", "toy", "--config", cfg_path.to_str().unwrap(), "--synthetic", "40", "--k", "10"]);
    c.check(code == 0, || format!("cv exit {code}: {err}"));
    let folds: Vec<f64> = out.lines().filter(|l| l.starts_with("fold=")).filter_map(|l| field(l, "acc")?.parse().ok()).collect();
    let summary = out.lines().find(|l| l.starts_with("mean=")).unwrap_or_default();
    let mean: f64 = field(summary, "mean").and_then(|s| s.parse().ok()).unwrap_or(f64::NAN);
    let best: f64 = field(summary, "best").and_then(|s| s.parse().ok()).unwrap_or(f64::NAN);
    c.check(folds.len() == 10, || format!("{} fold lines", folds.len()));
    let avg = folds.iter().sum::<f64>() / folds.len() as f64;
    let max = folds.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    c.check(rel_err(mean, avg) <= 1e-6 && (best - max).abs() <= 1e-6 && best >= mean, || format!("mean {mean} best {best} vs folds {folds:?}"));
    c.check(out.contains("Mean of 10FCV: "), || "missing 10FCV summary".into());
    Verdict::from_checks(&c, format!("artifacts {} bytes, cv mean {mean:.3} best {best:.3}", a.len()))
}

// ---- 8. pipeline -----------------------------------------------------------

fn criterion_8() -> Verdict {
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..500 {
        let n = rng.gen_range(0..=600);
        let toks: Vec<u32> = (0..n).map(|_| rng.gen_range(1..1000)).collect();
        for trunc in [Truncation::KeepFirst, Truncation::KeepLast] {
            let p = pad_prepend(&toks, PAD_LEN, trunc);
            c.check(p.len() == PAD_LEN, || format!("length {} for {n} tokens", p.len()));
            let want: Vec<u32> = if n <= PAD_LEN {
                std::iter::repeat(0).take(PAD_LEN - n).chain(toks.iter().copied()).collect()
            } else if trunc == Truncation::KeepFirst {
                toks[..PAD_LEN].to_vec()
            } else {
                toks[n - PAD_LEN..].to_vec()
            };
            c.check(p == want, || format!("{n} tokens, {trunc:?}: wrong padding"));
        }
    }
    let vocab = Vocabulary::from_texts(["a b c"]);
    for text in ["", "a", "zzz", &"b ".repeat(450)] {
        let e = encode_text(&vocab, text, PAD_LEN, Truncation::KeepFirst);
        c.check(e.len() == PAD_LEN, || format!("encode_text length {}", e.len()));
    }

    // padding row stays zero through fine-tuning with dropout
    let cfg = ModelConfig { embed_trainable: true, dropout: 0.25, epochs: 2, ..ModelConfig::toy(2) };
    let docs = keyword_corpus(40, 80);
    let vocab = Vocabulary::from_texts(docs.iter().map(|d| d.text.as_str()));
    let table = EmbeddingTable::random(&vocab, cfg.embed_dim, 1);
    c.check(table.row(0).iter().all(|&v| v == 0.0), || "fresh table has a nonzero pad row".into());
    let tokens: Vec<TokenizedDoc> = tokenize_docs(&docs, &vocab, cfg.max_len, cfg.truncation);
    for variant in Variant::ALL {
        let mut model = Model::<f32>::new(&ModelConfig { variant, ..cfg.clone() }, &table).unwrap();
        train(&mut model, &tokens, None, |_| {}).unwrap();
        let emb = model.embedding_table();
        c.check(emb.data()[..cfg.embed_dim].iter().all(|&v| v == 0.0), || format!("{}: pad row moved", variant.name()));
        c.check(emb.data()[cfg.embed_dim..] != table.vectors().data()[cfg.embed_dim..], || format!("{}: embeddings not fine-tuned", variant.name()));
    }

    // corpus counts, when the corpora are present
    let corpora = [
        ("BGC_AG_NEWS_DIR", DatasetFormat::ZhangCsv, ExpectedCounts::AG_NEWS, "AG's News"),
        ("BGC_DBPEDIA_DIR", DatasetFormat::ZhangCsv, ExpectedCounts::DBPEDIA, "DBpedia"),
        ("BGC_MR_DIR", DatasetFormat::MrPolarity, ExpectedCounts::MR, "MR"),
    ];
    let mut verified = Vec::new();
    let mut missing = Vec::new();
    for (var, format, expect, name) in corpora {
        let Some(dir) = env_dir(var) else {
            missing.push(format!("{name} ({var})"));
            continue;
        };
        match load_dataset(&dir, format, Some(expect)) {
            Ok(split) => {
                if format == DatasetFormat::MrPolarity {
                    let h = split.class_histogram();
                    c.check(h == [5331, 5331], || format!("MR class counts {h:?}"));
                }
                verified.push(name);
            }
            Err(e) => c.check(false, || format!("{name}: {e}")),
        }
    }
    let mut v = Verdict::from_checks(&c, format!("pad/encode/pad-row checks; counts verified for {verified:?}"));
    if v.status == Status::Pass && !missing.is_empty() {
        v.status = Status::Partial;
        v.detail.push_str(&format!("; counts UNVERIFIED, corpora not available: {}", missing.join(", ")));
    }
    v
}
