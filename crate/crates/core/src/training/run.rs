use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cross_entropy, Adam, PROB_FLOOR};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{Batch, Mode, Model};
use crate::tensor::gradcheck::GradCheckReport;
use crate::tensor::{Scalar, Tensor};
use crate::text::{kfold_split, EmbeddingTable, TokenizedDoc};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// One line of training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub acc: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} split={} loss={:.6} acc={:.6}",
            self.epoch, self.split, self.loss, self.acc
        )
    }
}

/// Loss and accuracy over a document set.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// Mean cross-entropy.
    pub loss: f64,
    /// Fraction of documents whose arg-max class is the label.
    pub accuracy: f64,
    pub count: usize,
    pub per_class_total: Vec<usize>,
    pub per_class_correct: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (the last one without validation data).
    pub best_epoch: usize,
    pub best_val_acc: Option<f64>,
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

fn batch_of(docs: &[TokenizedDoc], idx: &[usize]) -> Result<Batch> {
    let refs: Vec<&TokenizedDoc> = idx.iter().map(|&i| &docs[i]).collect();
    Batch::from_docs(&refs)
}

/// Mini-batch Adam over seeded shuffles of `train`.
///
/// Each epoch logs a `train` record (running means over the epoch's batches)
/// and, when `val` is given, a `val` record in evaluation mode; the parameters
/// of the best validation epoch are restored at the end.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train: &[TokenizedDoc],
    val: Option<&[TokenizedDoc]>,
    mut log: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    let cfg = model.config.clone();
    if cfg.epochs == 0 {
        return Err(Error::Contract("training needs at least one epoch".into()));
    }
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let val = val.filter(|v| !v.is_empty());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);

    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, _)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = batch_of(train, chunk)?;
            let mode = if cfg.dropout > 0.0 {
                Mode::Train {
                    dropout: cfg.dropout,
                    rng: ChaCha8Rng::seed_from_u64(dropout_rng.gen()),
                }
            } else {
                Mode::Eval
            };
            let mut g = model.graph(mode, true);
            let probs = model.forward(&mut g, &batch)?;
            let loss = cross_entropy(&mut g.tape, probs, &batch.labels)?;
            let loss_value = g.tape.value(loss).item().to_f64().unwrap_or(f64::NAN);
            if !loss_value.is_finite() {
                return Err(Error::Contract(format!("non-finite loss in epoch {epoch}")));
            }
            loss_sum += loss_value * batch.n as f64;
            let c = g.tape.shape(probs)[1];
            correct += g
                .tape
                .value(probs)
                .data()
                .chunks(c)
                .zip(&batch.labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            let mut grads = g.tape.backward(loss)?;
            let param_grads = g.param_grads(&mut grads);
            drop(g);
            adam.step(&mut model.params, &param_grads)?;
        }
        let record = EpochRecord {
            epoch,
            split: Split::Train,
            loss: loss_sum / train.len() as f64,
            acc: correct as f64 / train.len() as f64,
        };
        log(&record);
        history.push(record);

        if let Some(val) = val {
            let m = evaluate(model, val)?;
            let record = EpochRecord {
                epoch,
                split: Split::Val,
                loss: m.loss,
                acc: m.accuracy,
            };
            log(&record);
            history.push(record);
            if best.as_ref().is_none_or(|(acc, _, _)| m.accuracy > *acc) {
                best = Some((m.accuracy, epoch, model.params.clone()));
            }
        }
    }
    let (best_epoch, best_val_acc) = match best {
        Some((acc, epoch, params)) => {
            model.params = params;
            (epoch, Some(acc))
        }
        None => (cfg.epochs, None),
    };
    Ok(TrainReport {
        history,
        best_epoch,
        best_val_acc,
    })
}

/// Eval-mode loss and accuracy over `docs`.
pub fn evaluate<T: Scalar>(model: &Model<T>, docs: &[TokenizedDoc]) -> Result<Metrics> {
    if docs.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty document set".into()));
    }
    let classes = model.config.class_count;
    let mut per_class_total = vec![0; classes];
    let mut per_class_correct = vec![0; classes];
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..docs.len()).collect();
    for chunk in idx.chunks(model.config.batch_size) {
        let batch = batch_of(docs, chunk)?;
        if let Some(&bad) = batch.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        let probs = model.predict(&batch)?;
        for (row, &label) in probs.data().chunks(classes).zip(&batch.labels) {
            let p = row[label].to_f64().unwrap_or(0.0);
            loss_sum -= p.max(PROB_FLOOR).ln();
            per_class_total[label] += 1;
            if argmax(row) == label {
                per_class_correct[label] += 1;
            }
        }
    }
    let correct: usize = per_class_correct.iter().sum();
    Ok(Metrics {
        loss: loss_sum / docs.len() as f64,
        accuracy: correct as f64 / docs.len() as f64,
        count: docs.len(),
        per_class_total,
        per_class_correct,
    })
}

/// Seed of fold `fold` derived from the run's base seed.
pub fn fold_seed(base: u64, fold: usize) -> u64 {
    base ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Per-fold accuracies with their mean and maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct CvReport {
    pub fold_acc: Vec<f64>,
    pub mean: f64,
    pub best: f64,
}

impl CvReport {
    pub fn from_folds(fold_acc: Vec<f64>) -> Self {
        let mean = fold_acc.iter().sum::<f64>() / fold_acc.len() as f64;
        let best = fold_acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            fold_acc,
            mean,
            best,
        }
    }
}

impl fmt::Display for CvReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, acc) in self.fold_acc.iter().enumerate() {
            writeln!(f, "fold={} acc={acc:.6}", i + 1)?;
        }
        write!(f, "mean={:.6} best={:.6}", self.mean, self.best)
    }
}

/// Trains one fresh model per fold of a seeded `k`-fold partition and scores it
/// on the held-out fold. Fold `i` trains with seed [`fold_seed`]`(config.seed, i)`
/// for the full epoch budget; the held-out fold is never used for model selection.
pub fn cross_validate(
    config: &ModelConfig,
    table: &EmbeddingTable,
    docs: &[TokenizedDoc],
    k: usize,
    mut log: impl FnMut(&str),
) -> Result<CvReport> {
    let folds = kfold_split(docs.len(), k, config.seed)?;
    let mut accs = Vec::with_capacity(k);
    for (i, fold) in folds.iter().enumerate() {
        let cfg = ModelConfig {
            seed: fold_seed(config.seed, i),
            ..config.clone()
        };
        let pick = |idx: &[usize]| idx.iter().map(|&j| docs[j].clone()).collect::<Vec<_>>();
        let (train_docs, test_docs) = (pick(&fold.train), pick(&fold.validation));
        let mut model = Model::<f32>::new(&cfg, table)?;
        train(&mut model, &train_docs, None, |r| log(&format!("fold={} {r}", i + 1)))?;
        let acc = evaluate(&model, &test_docs)?.accuracy;
        log(&format!("fold={} acc={acc:.6}", i + 1));
        accs.push(acc);
    }
    Ok(CvReport::from_folds(accs))
}

/// Central-difference check of the batch loss against every trainable
/// parameter element of `model` (evaluation mode).
///
/// Row 0 of the embedding table is skipped: it is the padding vector and is
/// excluded from gradients by contract.
pub fn model_grad_check(
    model: &Model<f64>,
    batch: &Batch,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let loss_of = |m: &Model<f64>, track: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut g = m.graph(Mode::Eval, track);
        let probs = m.forward(&mut g, batch)?;
        let loss = cross_entropy(&mut g.tape, probs, &batch.labels)?;
        let value = g.tape.value(loss).item();
        if !track {
            return Ok((value, Vec::new()));
        }
        let mut grads = g.tape.backward(loss)?;
        Ok((value, g.param_grads(&mut grads)))
    };
    let (_, analytic) = loss_of(model, true)?;
    let mut report = GradCheckReport::new(tol);
    let mut probe = model.clone();
    for (k, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        let param = model.params.iter().nth(k).expect("one gradient slot per parameter");
        let skip = if param.name == "embedding" { param.value.shape()[1] } else { 0 };
        for index in skip..grad.len() {
            let orig = param.value.data()[index];
            poke(&mut probe, k, index, orig + step);
            let plus = loss_of(&probe, false)?.0;
            poke(&mut probe, k, index, orig - step);
            let minus = loss_of(&probe, false)?.0;
            poke(&mut probe, k, index, orig);
            report.record(k, index, grad.data()[index], (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}

fn poke(model: &mut Model<f64>, param: usize, index: usize, value: f64) {
    let p = model.params.iter_mut().nth(param).expect("same parameter layout");
    p.value.data_mut()[index] = value;
}
