//! The assembled classifier and its input batches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::capsule::RoutedCapsules;
use super::{DenseHead, Graph, GruEnsemble, Mode, ParamId, ParamStore, PrimaryCapsules};
use crate::ablation::CnnExtractor;
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};
use crate::text::{EmbeddingTable, TokenizedDoc};

/// Token ids of `n` equally long documents, flattened row-major, plus labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub n: usize,
    pub len: usize,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_docs(docs: &[&TokenizedDoc]) -> Result<Self> {
        let Some(first) = docs.first() else {
            return Err(Error::Contract("empty batch".into()));
        };
        let len = first.tokens.len();
        if len == 0 {
            return Err(Error::Contract("documents must have at least one position".into()));
        }
        let mut ids = Vec::with_capacity(docs.len() * len);
        for d in docs {
            if d.tokens.len() != len {
                return Err(Error::dim("batch", &[len], &[d.tokens.len()]));
            }
            ids.extend(d.tokens.iter().map(|&t| t as usize));
        }
        Ok(Self {
            ids,
            n: docs.len(),
            len,
            labels: docs.iter().map(|d| d.label).collect(),
        })
    }
}

/// Per-position feature extractor.
#[derive(Clone, Debug)]
pub enum Extractor {
    Ensemble(GruEnsemble),
    Cnn(CnnExtractor),
}

/// Stage between the features and the head.
#[derive(Clone, Debug)]
pub enum Router {
    Capsules {
        primary: PrimaryCapsules,
        routed: RoutedCapsules,
    },
    MaxPool {
        window: usize,
    },
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    embedding: ParamId,
    extractor: Extractor,
    router: Router,
    head: DenseHead,
}

/// Parameter-name prefixes of each stage, in forward order.
pub const STAGES: [(&str, &[&str]); 4] = [
    ("embedding", &["embedding"]),
    ("extractor", &["bigru", "cnn"]),
    ("routing", &["primary", "routing"]),
    ("head", &["head"]),
];

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialised model around `table`, seeded by `config.seed`.
    pub fn new(config: &ModelConfig, table: &EmbeddingTable) -> Result<Self> {
        config.validate()?;
        if table.dim() != config.embed_dim {
            return Err(Error::Config(format!(
                "embedding table has dimension {}, config expects {}",
                table.dim(),
                config.embed_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let embedding = params.add("embedding", table.vectors().cast(), config.embed_trainable);

        let extractor = match config.variant {
            Variant::Bgcapsule | Variant::BigruMaxpool => Extractor::Ensemble(GruEnsemble::new(
                &mut params,
                config.embed_dim,
                &config.bigru_sizes,
                &mut rng,
            )),
            Variant::CnnCapsule => Extractor::Cnn(CnnExtractor::new(
                &mut params,
                config.embed_dim,
                &config.cnn_widths,
                config.cnn_filters,
                &mut rng,
            )),
        };
        let features = match &extractor {
            Extractor::Ensemble(e) => e.output_width(),
            Extractor::Cnn(c) => c.output_width(),
        };

        let (router, head_input) = match config.variant {
            Variant::BigruMaxpool => (
                Router::MaxPool {
                    window: config.pool_window,
                },
                (config.max_len / config.pool_window) * features,
            ),
            Variant::Bgcapsule | Variant::CnnCapsule => {
                let primary = PrimaryCapsules::new(
                    &mut params,
                    features,
                    config.caps_per_position,
                    config.caps_dim,
                    &mut rng,
                );
                let banks = if config.share_routing_weights {
                    config.caps_per_position
                } else {
                    config.caps_per_position * config.max_len
                };
                let routed = RoutedCapsules::new(
                    &mut params,
                    banks,
                    config.caps_dim,
                    config.routed_caps,
                    config.routed_dim,
                    config.routing_iters,
                    config.softmax_axis,
                    &mut rng,
                );
                (
                    Router::Capsules { primary, routed },
                    config.routed_caps * config.routed_dim,
                )
            }
        };
        let head = DenseHead::new(
            &mut params,
            head_input,
            config.dense_hidden,
            config.class_count,
            config.head_activation,
            &mut rng,
        );
        Ok(Self {
            config: config.clone(),
            params,
            embedding,
            extractor,
            router,
            head,
        })
    }

    /// Binds the parameters onto a fresh tape.
    pub fn graph(&self, mode: Mode, track: bool) -> Graph<T> {
        Graph::bind(&self.params, mode, track)
    }

    /// Class probabilities `[N × C]` for `batch`.
    pub fn forward(&self, g: &mut Graph<T>, batch: &Batch) -> Result<Var> {
        if batch.len != self.config.max_len {
            return Err(Error::Data(format!(
                "documents have {} positions, model expects {}",
                batch.len, self.config.max_len
            )));
        }
        let table = g.p(self.embedding);
        let rows = g.tape.gather_rows(table, &batch.ids, true)?;
        let x = g.tape.reshape(rows, &[batch.n, batch.len, self.config.embed_dim])?;
        let features = match &self.extractor {
            Extractor::Ensemble(e) => e.run(g, x)?,
            Extractor::Cnn(c) => c.forward(g, x)?,
        };
        let flat = match &self.router {
            Router::Capsules { primary, routed } => {
                let caps = primary.forward(g, features)?;
                routed.forward(g, caps)?
            }
            Router::MaxPool { window } => {
                let pooled = crate::ablation::max_pool_routing(&mut g.tape, features, *window)?;
                let s = g.tape.shape(pooled).to_vec();
                g.tape.reshape(pooled, &[s[0], s[1] * s[2]])?
            }
        };
        self.head.forward(g, flat)
    }

    /// Eval-mode probabilities.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor<T>> {
        let mut g = self.graph(Mode::Eval, false);
        let probs = self.forward(&mut g, batch)?;
        Ok(g.tape.value(probs).clone())
    }

    /// The same model with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            embedding: self.embedding,
            extractor: self.extractor.clone(),
            router: self.router.clone(),
            head: self.head.clone(),
        }
    }

    pub fn embedding_table(&self) -> &Tensor<T> {
        &self.params.get(self.embedding).value
    }

    /// Scalar parameter counts per stage (see [`STAGES`]).
    pub fn stage_counts(&self, trainable_only: bool) -> Vec<(&'static str, usize)> {
        STAGES
            .iter()
            .map(|(stage, prefixes)| {
                let n = prefixes
                    .iter()
                    .map(|p| self.params.count(p, trainable_only))
                    .sum();
                (*stage, n)
            })
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.count("", true)
    }
}
