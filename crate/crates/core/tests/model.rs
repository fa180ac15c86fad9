//! Whole-model contracts: shapes, determinism, gradients, training guarantees.

use bgcapsule::layers::{Batch, Mode};
use bgcapsule::tensor::gradcheck::DEFAULT_STEP;
use bgcapsule::text::{keyword_corpus, kfold_split, tokenize_docs, EmbeddingTable, TokenizedDoc, Vocabulary};
use bgcapsule::training::{cross_validate, evaluate, model_grad_check, train};
use bgcapsule::{Error, Model, ModelConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus(cfg: &ModelConfig, n: usize) -> (Vec<TokenizedDoc>, EmbeddingTable) {
    let docs = keyword_corpus(n, 3);
    let vocab = Vocabulary::from_texts(docs.iter().map(|d| d.text.as_str()));
    let table = EmbeddingTable::random(&vocab, cfg.embed_dim, 99);
    (tokenize_docs(&docs, &vocab, cfg.max_len, cfg.truncation), table)
}

fn batch(docs: &[TokenizedDoc]) -> Batch {
    Batch::from_docs(&docs.iter().collect::<Vec<_>>()).unwrap()
}

#[test]
fn default_shape_chain() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.ensemble_width(), 912);
    let (docs, table) = corpus(&cfg, 2);
    let model = Model::<f32>::new(&cfg, &table).unwrap();
    let b = batch(&docs);
    assert_eq!((b.n, b.len), (2, 200));
    let probs = model.predict(&b).unwrap();
    assert_eq!(probs.shape(), &[2, cfg.class_count]);
    for row in probs.data().chunks(cfg.class_count) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
    assert_eq!(model.predict(&b).unwrap(), probs, "eval mode is deterministic");
    let counts = model.stage_counts(false);
    assert_eq!(counts[0], ("embedding", table.rows() * 300));
    assert!(counts.iter().all(|&(_, n)| n > 0));
}

#[test]
fn shared_stages_match_between_bgcapsule_and_maxpool() {
    let base = ModelConfig::toy(2);
    let (_, table) = corpus(&base, 10);
    let caps = Model::<f32>::new(&base, &table).unwrap();
    let pool = Model::<f32>::new(&ModelConfig { variant: Variant::BigruMaxpool, ..base.clone() }, &table).unwrap();
    let (a, b) = (caps.stage_counts(true), pool.stage_counts(true));
    assert_eq!(a[0], b[0]);
    assert_eq!(a[1], b[1]);
    assert_eq!(b[2], ("routing", 0));
}

fn tiny(variant: Variant) -> ModelConfig {
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
        pool_window: 4,
        cnn_widths: vec![2, 3],
        cnn_filters: 2,
        ..ModelConfig::toy(2)
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for variant in Variant::ALL {
        for share in [true, false] {
            let cfg = ModelConfig {
                share_routing_weights: share,
                ..tiny(variant)
            };
            let (docs, table) = corpus(&cfg, 2);
            let mut model = Model::<f32>::new(&cfg, &table).unwrap().cast::<f64>();
            // nonzero biases keep ReLU inputs over all-padding windows off the kink at 0
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            for p in model.params.iter_mut().filter(|p| p.name.contains(".b")) {
                p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            }
            let report = model_grad_check(&model, &batch(&docs), DEFAULT_STEP, 1e-3).unwrap();
            assert!(report.checked > 50);
            assert!(report.passed(), "{} share={share}: {report}", variant.name());
        }
    }
}

#[test]
fn padding_row_stays_zero_and_frozen_table_is_untouched() {
    for trainable in [true, false] {
        let cfg = ModelConfig {
            embed_trainable: trainable,
            epochs: 2,
            ..ModelConfig::toy(2)
        };
        let (docs, table) = corpus(&cfg, 40);
        let mut model = Model::<f32>::new(&cfg, &table).unwrap();
        let before = model.embedding_table().clone();
        train(&mut model, &docs, None, |_| {}).unwrap();
        let after = model.embedding_table();
        assert!(after.data()[..cfg.embed_dim].iter().all(|&v| v == 0.0));
        if trainable {
            assert_ne!(after, &before);
        } else {
            assert_eq!(after, &before);
        }
    }
}

#[test]
fn training_is_reproducible_and_descends() {
    let cfg = ModelConfig {
        dropout: 0.25,
        epochs: 3,
        ..ModelConfig::toy(2)
    };
    let (docs, table) = corpus(&cfg, 60);
    let run = || {
        let mut model = Model::<f32>::new(&cfg, &table).unwrap();
        let report = train(&mut model, &docs, Some(&docs[..20]), |_| {}).unwrap();
        (model.params, report, ())
    };
    let (pa, ra, _) = run();
    let (pb, rb, _) = run();
    assert_eq!(pa, pb);
    assert_eq!(ra, rb);
    assert_eq!(ra.history.len(), 6);

    assert!(ra.best_val_acc.is_some());

    let plain = ModelConfig { dropout: 0.0, epochs: 8, ..cfg.clone() };
    let mut model = Model::<f32>::new(&plain, &table).unwrap();
    let initial = evaluate(&model, &docs).unwrap().loss;
    train(&mut model, &docs, None, |_| {}).unwrap();
    let after = evaluate(&model, &docs).unwrap().loss;
    assert!(after < initial, "{after} vs {initial}");
    assert!(ra.history.iter().all(|r| (0.0..=1.0).contains(&r.acc)));
}

#[test]
fn eval_metrics_ignore_dropout_rate() {
    let (docs, table) = corpus(&ModelConfig::toy(2), 30);
    let eval_with = |dropout| {
        let cfg = ModelConfig { dropout, ..ModelConfig::toy(2) };
        evaluate(&Model::<f32>::new(&cfg, &table).unwrap(), &docs).unwrap()
    };
    assert_eq!(eval_with(0.0), eval_with(0.5));
}

#[test]
fn dropout_changes_training_passes_only() {
    let cfg = ModelConfig { dropout: 0.5, ..ModelConfig::toy(2) };
    let (docs, table) = corpus(&cfg, 4);
    let model = Model::<f32>::new(&cfg, &table).unwrap();
    let b = batch(&docs);
    let mut g = model.graph(
        Mode::Train {
            dropout: 0.5,
            rng: rand::SeedableRng::seed_from_u64(1),
        },
        false,
    );
    let p = model.forward(&mut g, &b).unwrap();
    assert_ne!(g.tape.value(p), &model.predict(&b).unwrap());
}

#[test]
fn training_contracts() {
    let cfg = ModelConfig::toy(2);
    let (docs, table) = corpus(&cfg, 10);
    let mut model = Model::<f32>::new(&cfg, &table).unwrap();
    assert!(matches!(train(&mut model, &[], None, |_| {}), Err(Error::Contract(_))));
    model.config.epochs = 0;
    assert!(matches!(train(&mut model, &docs, None, |_| {}), Err(Error::Contract(_))));
    assert!(matches!(evaluate(&model, &[]), Err(Error::Contract(_))));
    let bad = ModelConfig { epochs: 0, ..cfg };
    assert!(matches!(Model::<f32>::new(&bad, &table), Err(Error::Config(_))));
}

#[test]
fn evaluation_is_deterministic_and_memorises() {
    let cfg = ModelConfig { epochs: 15, batch_size: 5, ..ModelConfig::toy(2) };
    let (docs, table) = corpus(&cfg, 10);
    let mut model = Model::<f32>::new(&cfg, &table).unwrap();
    train(&mut model, &docs, None, |_| {}).unwrap();
    let m = evaluate(&model, &docs).unwrap();
    assert_eq!(m, evaluate(&model, &docs).unwrap());
    assert_eq!(m.accuracy, 1.0);
    assert_eq!(m.per_class_total, vec![5, 5]);
}

#[test]
fn uniform_predictor_scores_chance() {
    let mut cfg = ModelConfig::toy(2);
    cfg.epochs = 1;
    let (docs, table) = corpus(&cfg, 40);
    let mut model = Model::<f32>::new(&cfg, &table).unwrap();
    for p in model.params.iter_mut().filter(|p| p.name.starts_with("head.w2")) {
        p.value = bgcapsule::Tensor::zeros(p.value.shape().to_vec());
    }
    let m = evaluate(&model, &docs).unwrap();
    // ties resolve to class 0, which holds half of the balanced corpus
    assert_eq!(m.accuracy, 0.5);
    assert!((m.loss - 2f64.ln()).abs() < 1e-6);
}

#[test]
fn cross_validation_report() {
    let cfg = ModelConfig { epochs: 2, ..ModelConfig::toy(2) };
    let (docs, table) = corpus(&cfg, 40);
    let mut lines = Vec::new();
    let report = cross_validate(&cfg, &table, &docs, 4, |l| lines.push(l.to_owned())).unwrap();
    assert_eq!(report.fold_acc.len(), 4);
    let mean = report.fold_acc.iter().sum::<f64>() / 4.0;
    assert!((report.mean - mean).abs() < 1e-15);
    assert!(report.best >= report.mean);
    assert_eq!(report, cross_validate(&cfg, &table, &docs, 4, |_| {}).unwrap());
    let text = report.to_string();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().last().unwrap().starts_with("mean="));
    assert!(lines.iter().any(|l| l.starts_with("fold=1 acc=")));

    let folds = kfold_split(docs.len(), 4, cfg.seed).unwrap();
    let mut seen = vec![0; docs.len()];
    for f in &folds {
        for &i in &f.validation {
            seen[i] += 1;
        }
        assert_eq!(f.train.len() + f.validation.len(), docs.len());
    }
    assert!(seen.iter().all(|&c| c == 1));
}
