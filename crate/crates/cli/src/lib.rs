//! The `bgc` command line: train, evaluate, predict, ablate, cv, gradcheck.
//!
//! Exit codes are a stable contract: 0 success, 1 check failure, 2 I/O or
//! invalid file, 3 configuration or usage error, 4 model/data mismatch.

use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use bgcapsule::ablation::{format_csv, format_table, run_ablation, ParamSummary};
use bgcapsule::artifact;
use bgcapsule::gradsuite::run_suite;
use bgcapsule::text::{
    encode_text, holdout, keyword_corpus, load_dataset, load_glove, tokenize_docs, DatasetFormat,
    DatasetSplit, Document, EmbeddingTable, TokenizedDoc, Vocabulary,
};
use bgcapsule::training::{cross_validate, evaluate, train};
use bgcapsule::{Batch, Error, Model, ModelConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;

/// Fraction of the training documents held out for validation when a corpus
/// has no test split.
pub const VAL_FRACTION: f64 = 0.1;

/// A failed command: exit code plus message.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl CliError {
    fn new(code: i32, msg: impl Display) -> Self {
        Self { code, msg: msg.to_string() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Parse { .. } | Error::Artifact(_) => EXIT_IO,
            Error::Config(_) | Error::Contract(_) => EXIT_CONFIG,
            Error::Data(_) | Error::Dimension { .. } => EXIT_MISMATCH,
        };
        Self::new(code, e)
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "bgc", version, about = "BiGRU-ensemble capsule network text classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write it to a model file.
    Train {
        #[command(flatten)]
        setup: Setup,
        /// Where to write the model file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Report accuracy of a model file on a corpus's test split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        source: Source,
    },
    /// Classify one text.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        text: String,
    },
    /// Train every architecture variant under one budget and compare.
    Ablate {
        #[command(flatten)]
        setup: Setup,
        /// Dataset name in the comparison table.
        #[arg(long)]
        name: Option<String>,
        /// Also write the CSV records here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Seeded k-fold cross-validation over all documents of a corpus.
    Cv {
        #[command(flatten)]
        setup: Setup,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Finite-difference check of every differentiable operation and the full models.
    Gradcheck {
        /// Tolerance of the per-operation checks.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Tolerance of the whole-model checks.
        #[arg(long, default_value_t = 1e-3)]
        composite_tol: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print the effective configuration in config-file form.
    Config {
        #[arg(long, value_enum, default_value_t = Preset::Default)]
        preset: Preset,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// The published architecture.
    Default,
    /// The published architecture with the full-scale batch size.
    Full,
    /// Tiny dimensions that train in seconds.
    Toy,
}

#[derive(Args, Debug)]
struct Source {
    /// Corpus directory.
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Corpus layout: zhang_csv or mr_polarity.
    #[arg(long)]
    format: Option<String>,
    /// Use a generated two-class keyword corpus of this many training documents.
    #[arg(long)]
    synthetic: Option<usize>,
}

#[derive(Args, Debug)]
struct Setup {
    #[command(flatten)]
    source: Source,
    /// Flat `key = value` config file applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// GloVe text file; without it embeddings are seeded random vectors.
    #[arg(long)]
    glove: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.msg);
            e.code
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    match cmd {
        Command::Train { setup, out: path } => cmd_train(&setup, &path, out),
        Command::Evaluate { model, source } => cmd_evaluate(&model, &source, out),
        Command::Predict { model, text } => cmd_predict(&model, &text, out),
        Command::Ablate { setup, name, csv } => cmd_ablate(&setup, name, csv.as_deref(), out, err),
        Command::Cv { setup, k } => cmd_cv(&setup, k, out, err),
        Command::Gradcheck { tol, composite_tol, seed } => cmd_gradcheck(tol, composite_tol, seed, out, err),
        Command::Config { preset, config } => {
            let (cfg, _) = load_config(preset, config.as_deref())?;
            cfg.validate()?;
            emit(out, cfg.to_text().trim_end())
        }
    }
}

fn emit(out: &mut dyn Write, line: impl Display) -> CliResult {
    writeln!(out, "{line}").map_err(|e| CliError::new(EXIT_IO, format!("writing output: {e}")))
}

fn load_config(preset: Preset, path: Option<&Path>) -> CliResult<(ModelConfig, bool)> {
    let mut cfg = match preset {
        Preset::Default => ModelConfig::default(),
        Preset::Full => ModelConfig::full_scale(2),
        Preset::Toy => ModelConfig::toy(2),
    };
    let mut classes_set = false;
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|e| CliError::from(Error::io(path, e)))?;
        let keys = cfg
            .apply_text(&text)
            .map_err(|e| CliError::new(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
        classes_set = keys.contains("class_count");
    }
    Ok((cfg, classes_set))
}

/// Seeds of the generated corpus; fixed so that every command sees the same data.
const SYNTHETIC_TRAIN_SEED: u64 = 0x5157_0001;
const SYNTHETIC_TEST_SEED: u64 = 0x5157_0002;

fn load_source(source: &Source) -> CliResult<(DatasetSplit, String)> {
    let format = source.format.as_deref().map(str::parse::<DatasetFormat>).transpose()?;
    if let Some(n) = source.synthetic {
        let split = DatasetSplit {
            train: keyword_corpus(n, SYNTHETIC_TRAIN_SEED),
            test: keyword_corpus(n.div_ceil(4), SYNTHETIC_TEST_SEED),
            class_count: 2,
        };
        return Ok((split, "synthetic".into()));
    }
    let dir = source.data.as_deref().expect("clap requires --data without --synthetic");
    let format = format.ok_or_else(|| CliError::new(EXIT_CONFIG, "--format is required with --data"))?;
    if !dir.is_dir() {
        return Err(CliError::new(EXIT_IO, format!("{}: not a directory", dir.display())));
    }
    let split = load_dataset(dir, format, None)?;
    let name = dir
        .file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok((split, name))
}

/// Everything a training-style command needs.
struct Prepared {
    cfg: ModelConfig,
    vocab: Vocabulary,
    table: EmbeddingTable,
    train: Vec<TokenizedDoc>,
    test: Vec<TokenizedDoc>,
    name: String,
}

fn prepare(setup: &Setup, out: &mut dyn Write) -> CliResult<Prepared> {
    let (mut cfg, classes_set) = load_config(setup.preset, setup.config.as_deref())?;
    let (split, name) = load_source(&setup.source)?;
    if let Some(seed) = setup.seed {
        cfg.seed = seed;
    }
    if !classes_set {
        cfg.class_count = split.class_count.max(2);
    }
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(CliError::new(EXIT_IO, "corpus has no training documents"));
    }
    check_labels(&split.train, cfg.class_count)?;
    check_labels(&split.test, cfg.class_count)?;

    let vocab = Vocabulary::from_texts(split.train.iter().map(|d| d.text.as_str()));
    let table = match &setup.glove {
        Some(path) => {
            let (table, coverage) = load_glove(path, &vocab, cfg.embed_dim, cfg.seed)?;
            emit(out, format_args!("glove {coverage}"))?;
            table
        }
        None => EmbeddingTable::random(&vocab, cfg.embed_dim, cfg.seed),
    };
    let tok = |docs: &[Document]| tokenize_docs(docs, &vocab, cfg.max_len, cfg.truncation);
    let (train, test) = (tok(&split.train), tok(&split.test));
    Ok(Prepared {
        cfg,
        vocab,
        table,
        train,
        test,
        name,
    })
}

fn check_labels(docs: &[Document], classes: usize) -> CliResult {
    match docs.iter().map(|d| d.label).max() {
        Some(max) if max >= classes => Err(CliError::new(
            EXIT_MISMATCH,
            format!("data has class {} but the model has {classes} classes", max + 1),
        )),
        _ => Ok(()),
    }
}

fn pick(docs: &[TokenizedDoc], idx: &[usize]) -> Vec<TokenizedDoc> {
    idx.iter().map(|&i| docs[i].clone()).collect()
}

/// Training and validation documents: the test split when the corpus has one,
/// otherwise a seeded hold-out of the training documents.
fn train_val(p: &Prepared) -> CliResult<(Vec<TokenizedDoc>, Vec<TokenizedDoc>)> {
    if !p.test.is_empty() {
        return Ok((p.train.clone(), p.test.clone()));
    }
    let fold = holdout(p.train.len(), VAL_FRACTION, p.cfg.seed)?;
    Ok((pick(&p.train, &fold.train), pick(&p.train, &fold.validation)))
}

fn cmd_train(setup: &Setup, path: &Path, out: &mut dyn Write) -> CliResult {
    let p = prepare(setup, out)?;
    let (train_docs, val_docs) = train_val(&p)?;
    let mut model = Model::<f32>::new(&p.cfg, &p.table)?;
    emit(
        out,
        format_args!(
            "variant={} train_docs={} val_docs={} vocab={} trainable_params={}",
            p.cfg.variant.name(),
            train_docs.len(),
            val_docs.len(),
            p.vocab.len(),
            model.trainable_count()
        ),
    )?;
    let mut lines = Vec::new();
    let report = train(&mut model, &train_docs, Some(&val_docs), |r| lines.push(r.to_string()))?;
    for line in &lines {
        emit(out, line)?;
    }
    let train_acc = evaluate(&model, &train_docs)?.accuracy;
    let val_acc = report.best_val_acc.unwrap_or(f64::NAN);
    artifact::save(path, &model, &p.vocab)?;
    emit(
        out,
        format_args!(
            "final best_epoch={} train_acc={train_acc:.6} val_acc={val_acc:.6}",
            report.best_epoch
        ),
    )?;
    emit(out, format_args!("saved {}", path.display()))
}

fn cmd_evaluate(model_path: &Path, source: &Source, out: &mut dyn Write) -> CliResult {
    let (model, vocab) = artifact::load(model_path)?;
    let (split, _) = load_source(source)?;
    let docs = if split.test.is_empty() && !is_zhang(source) {
        split.train
    } else {
        split.test
    };
    if docs.is_empty() {
        return Err(CliError::new(EXIT_IO, "no documents to evaluate (empty test file)"));
    }
    let cfg = &model.config;
    check_labels(&docs, cfg.class_count)?;
    let tokens = tokenize_docs(&docs, &vocab, cfg.max_len, cfg.truncation);
    if tokens.iter().all(|d| d.tokens.iter().all(|&t| t == 0))
        && docs.iter().any(|d| !d.text.trim().is_empty())
    {
        return Err(CliError::new(
            EXIT_MISMATCH,
            "vocabulary mismatch: no token of the data is known to the model",
        ));
    }
    let m = evaluate(&model, &tokens)?;
    emit(out, format_args!("acc={:.6} loss={:.6} docs={}", m.accuracy, m.loss, m.count))?;
    for (c, (&total, &correct)) in m.per_class_total.iter().zip(&m.per_class_correct).enumerate() {
        emit(out, format_args!("class={c} correct={correct} total={total}"))?;
    }
    Ok(())
}

fn is_zhang(source: &Source) -> bool {
    source.format.as_deref() == Some("zhang_csv")
}

fn cmd_predict(model_path: &Path, text: &str, out: &mut dyn Write) -> CliResult {
    let (model, vocab) = artifact::load(model_path)?;
    let cfg = &model.config;
    let doc = TokenizedDoc {
        tokens: encode_text(&vocab, text, cfg.max_len, cfg.truncation),
        label: 0,
    };
    let probs = model.predict(&Batch::from_docs(&[&doc])?)?;
    let row = probs.data();
    let class = (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best });
    let list: Vec<String> = row.iter().map(|p| format!("{p:.6}")).collect();
    emit(out, format_args!("class={class} probs={}", list.join(",")))
}

fn cmd_ablate(
    setup: &Setup,
    name: Option<String>,
    csv: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CliResult {
    let p = prepare(setup, out)?;
    let (train_docs, test_docs) = train_val(&p)?;
    let dataset = name.unwrap_or_else(|| p.name.clone());
    let row = run_ablation(&dataset, &p.cfg, &p.table, &train_docs, Some(&test_docs), |l| {
        let _ = writeln!(err, "{l}");
    })?;
    let rows = [row];
    emit(out, format_table(&rows).trim_end())?;
    emit(out, "")?;
    let records = format_csv(&rows);
    emit(out, records.trim_end())?;
    emit(out, "")?;
    emit(out, ParamSummary(&rows[0]).to_string().trim_end())?;
    if let Some(path) = csv {
        fs::write(path, records).map_err(|e| CliError::from(Error::io(path, e)))?;
    }
    Ok(())
}

fn cmd_cv(setup: &Setup, k: usize, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let p = prepare(setup, out)?;
    let docs: Vec<TokenizedDoc> = p.train.iter().chain(&p.test).cloned().collect();
    let report = cross_validate(&p.cfg, &p.table, &docs, k, |l| {
        let _ = writeln!(err, "{l}");
    })?;
    emit(out, &report)?;
    emit(out, format_args!("best fold: {:.2}", 100.0 * report.best))?;
    emit(out, format_args!("Mean of {k}FCV: {:.2}", 100.0 * report.mean))
}

fn cmd_gradcheck(tol: f64, composite_tol: f64, seed: u64, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let entries = run_suite(tol, composite_tol, seed)?;
    let mut failing = Vec::new();
    for e in &entries {
        let ok = e.report.passed() && e.report.checked > 0;
        emit(out, format_args!("op={} {} {}", e.name, e.report, if ok { "ok" } else { "FAIL" }))?;
        if !ok {
            failing.push(e.name.clone());
        }
    }
    emit(
        out,
        format_args!("gradcheck passed={} failed={}", entries.len() - failing.len(), failing.len()),
    )?;
    if failing.is_empty() {
        Ok(())
    } else {
        let _ = writeln!(err, "failing ops: {}", failing.join(","));
        Err(CliError::new(EXIT_CHECK, format!("gradient check failed for {}", failing.join(", "))))
    }
}
