//! Comparison architectures: a CNN feature extractor in place of the BiGRU
//! ensemble, and fixed max pooling in place of capsule routing; plus a harness
//! that trains every variant under the same budget.

use std::fmt::{self, Write as _};

use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::layers::init::glorot;
use crate::layers::{linear, Graph, Model, ParamId, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::text::{EmbeddingTable, TokenizedDoc};
use crate::training::{evaluate, train};

/// Non-overlapping max over windows of `window` positions of `[N × T × F]`.
pub fn max_pool_routing<T: Scalar>(tape: &mut Tape<T>, features: Var, window: usize) -> Result<Var> {
    tape.max_pool(features, window)
}

/// Same-length 1-D convolutions of several widths with ReLU, concatenated on channels.
#[derive(Clone, Debug)]
pub struct CnnExtractor {
    pub widths: Vec<usize>,
    pub filters: usize,
    kernels: Vec<(ParamId, ParamId)>,
}

impl CnnExtractor {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        input: usize,
        widths: &[usize],
        filters: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let kernels = widths
            .iter()
            .map(|&k| {
                let fan_in = k * input;
                let w = store.add(format!("cnn.w{k}"), glorot(&[fan_in, filters], fan_in, filters, rng), true);
                let b = store.add(format!("cnn.b{k}"), Tensor::zeros([filters]), true);
                (w, b)
            })
            .collect();
        Self {
            widths: widths.to_vec(),
            filters,
            kernels,
        }
    }

    pub fn output_width(&self) -> usize {
        self.widths.len() * self.filters
    }

    /// `[N × T × E]` → `[N × T × widths·filters]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let outs = self
            .widths
            .iter()
            .zip(&self.kernels)
            .map(|(&k, &(w, b))| {
                let (w, b) = (g.p(w), g.p(b));
                conv1d_same(&mut g.tape, x, w, b, k)
            })
            .collect::<Result<Vec<_>>>()?;
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        g.tape.concat(&outs, 2)
    }
}

/// ReLU convolution of `x: [N × T × E]` with a width-`k` kernel
/// `w: [k·E × F]` (row `o·E + e` weighs offset `o`, channel `e`).
///
/// The sequence is zero-padded by `(k−1)/2` in front and the rest behind, so
/// output position `t` is centred on input position `t` and `T` is preserved.
pub fn conv1d_same<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var, k: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if k == 0 || s.len() != 3 || tape.shape(w)[0] != k * s[2] {
        return Err(Error::Config(format!(
            "convolution width {k} does not fit kernel {:?} on input {s:?}",
            tape.shape(w)
        )));
    }
    let (n, t, e) = (s[0], s[1], s[2]);
    let filters = tape.shape(w)[1];
    let before = (k - 1) / 2;
    let padded = if k > 1 { tape.pad(x, 1, before, k - 1 - before)? } else { x };
    let windows = (0..k)
        .map(|o| tape.slice(padded, 1, o, t))
        .collect::<Result<Vec<_>>>()?;
    let cols = if k > 1 { tape.concat(&windows, 2)? } else { windows[0] };
    let cols = tape.reshape(cols, &[n * t, k * e])?;
    let out = linear(tape, cols, w, b)?;
    let out = tape.relu(out);
    tape.reshape(out, &[n, t, filters])
}

/// Outcome of one variant on one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantResult {
    pub variant: Variant,
    /// Held-out accuracy, or training accuracy when no held-out set was given.
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub trainable_params: usize,
    pub stage_params: Vec<(&'static str, usize)>,
}

/// All variants on one dataset, in [`Variant::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub dataset: String,
    pub results: Vec<VariantResult>,
}

/// Trains every variant from `base` with the same seed, data order and budget.
pub fn run_ablation(
    dataset: &str,
    base: &ModelConfig,
    table: &EmbeddingTable,
    train_docs: &[TokenizedDoc],
    test_docs: Option<&[TokenizedDoc]>,
    mut log: impl FnMut(&str),
) -> Result<AblationRow> {
    let mut results = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let cfg = ModelConfig {
            variant,
            ..base.clone()
        };
        let mut model = Model::<f32>::new(&cfg, table)?;
        train(&mut model, train_docs, None, |r| log(&format!("variant={} {r}", variant.name())))?;
        let train_accuracy = evaluate(&model, train_docs)?.accuracy;
        let accuracy = match test_docs.filter(|d| !d.is_empty()) {
            Some(test) => evaluate(&model, test)?.accuracy,
            None => train_accuracy,
        };
        log(&format!("variant={} train_acc={train_accuracy:.6} acc={accuracy:.6}", variant.name()));
        results.push(VariantResult {
            variant,
            accuracy,
            train_accuracy,
            trainable_params: model.trainable_count(),
            stage_params: model.stage_counts(true),
        });
    }
    Ok(AblationRow {
        dataset: dataset.to_owned(),
        results,
    })
}

/// Column heading of each variant in the comparison table.
pub fn variant_title(v: Variant) -> &'static str {
    match v {
        Variant::BigruMaxpool => "BiGRU + Max Pooling",
        Variant::CnnCapsule => "CNN + Capsule Network",
        Variant::Bgcapsule => "BGCapsule",
    }
}

/// An aligned plain-text table: one row per dataset, one accuracy column per variant.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut header = vec!["Dataset".to_owned()];
    header.extend(Variant::ALL.iter().map(|&v| variant_title(v).to_owned()));
    let mut cells = vec![header];
    for row in rows {
        let mut line = vec![row.dataset.clone()];
        line.extend(Variant::ALL.iter().map(|&v| {
            row.results
                .iter()
                .find(|r| r.variant == v)
                .map_or_else(|| "-".to_owned(), |r| format!("{:.2}", 100.0 * r.accuracy))
        }));
        cells.push(line);
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, &w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", line.join(" | ").trim_end());
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            let _ = writeln!(out, "{}", rule.join("-+-"));
        }
    }
    out
}

/// `dataset,variant,accuracy` records with a header line.
pub fn format_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("dataset,variant,accuracy\n");
    for row in rows {
        for r in &row.results {
            let _ = writeln!(out, "{},{},{:.6}", row.dataset, r.variant.name(), r.accuracy);
        }
    }
    out
}

/// Per-variant parameter counts, split by stage.
pub struct ParamSummary<'a>(pub &'a AblationRow);

impl fmt::Display for ParamSummary<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.0.results {
            write!(f, "variant={} trainable_params={}", r.variant.name(), r.trainable_params)?;
            for (stage, n) in &r.stage_params {
                write!(f, " {stage}={n}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooled_window_maximum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([1, 4, 1], &[1.0, 3.0, 2.0, 0.0]).unwrap());
        let y = max_pool_routing(&mut tape, x, 4).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0]);
        let c = tape.constant(Tensor::full([2, 8, 3], 0.7));
        let y = max_pool_routing(&mut tape, c, 4).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
        assert!(matches!(max_pool_routing(&mut tape, c, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn width_one_is_a_linear_map() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let w = tape.constant(Tensor::eye(2));
        let b = tape.constant(Tensor::zeros([2]));
        let y = conv1d_same(&mut tape, x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn width_three_peaks_at_the_spike_centre() {
        let mut tape = Tape::<f64>::new();
        // one channel; tokens 3..=5 carry the pattern [1, 2, 1]
        let mut seq = vec![0.0; 10];
        seq[3] = 1.0;
        seq[4] = 2.0;
        seq[5] = 1.0;
        let x = tape.constant(Tensor::from_f64([1, 10, 1], &seq).unwrap());
        let w = tape.constant(Tensor::from_f64([3, 1], &[1.0, 2.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros([1]));
        let y = conv1d_same(&mut tape, x, w, b, 3).unwrap();
        let out = tape.value(y).data().to_vec();
        assert_eq!(out.len(), 10);
        let peak = (0..10).max_by(|&a, &b| out[a].total_cmp(&out[b])).unwrap();
        assert_eq!(peak, 4);
        assert_eq!(out[4], 6.0);
    }

    #[test]
    fn same_padding_keeps_length() {
        for k in [2, 3, 4, 5] {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::ones([2, 200, 3]));
            let w = tape.constant(Tensor::ones([3 * k, 4]));
            let b = tape.constant(Tensor::zeros([4]));
            let y = conv1d_same(&mut tape, x, w, b, k).unwrap();
            assert_eq!(tape.shape(y), &[2, 200, 4]);
        }
    }

    #[test]
    fn table_layouts() {
        let row = AblationRow {
            dataset: "synthetic".into(),
            results: Variant::ALL
                .iter()
                .zip([0.5, 0.75, 1.0])
                .map(|(&variant, accuracy)| VariantResult {
                    variant,
                    accuracy,
                    train_accuracy: accuracy,
                    trainable_params: 1,
                    stage_params: vec![],
                })
                .collect(),
        };
        let table = format_table(std::slice::from_ref(&row));
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("Dataset"));
        assert!(lines[2].starts_with("synthetic") && lines[2].ends_with("100.00"));
        assert_eq!(
            format_csv(&[row]),
            "dataset,variant,accuracy\nsynthetic,bigru_maxpool,0.500000\nsynthetic,cnn_capsule,0.750000\nsynthetic,bgcapsule,1.000000\n"
        );
    }
}
