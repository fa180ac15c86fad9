//! Corpus loading and preprocessing: lowercase tokenization, vocabulary indexing,
//! fixed-length pre-padding, pretrained embeddings, and fold splitting.

mod dataset;
mod embedding;
mod folds;
mod synthetic;
mod tokenize;
mod vocab;

pub use dataset::{
    load_dataset, load_mr_polarity, load_zhang_csv, DatasetFormat, DatasetSplit, Document,
    ExpectedCounts,
};
pub use embedding::{load_glove, Coverage, EmbeddingTable};
pub use folds::{holdout, kfold_split, Fold};
pub use synthetic::{keyword_corpus, MARKERS};
pub use tokenize::tokenize_lower;
pub use vocab::Vocabulary;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fixed document length used throughout.
pub const MAX_LEN: usize = 200;

/// Which end of an over-long document survives truncation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    #[default]
    KeepFirst,
    KeepLast,
}

/// A document as a fixed-length index sequence plus its class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedDoc {
    pub tokens: Vec<u32>,
    pub label: usize,
}

/// Left-pads with zeros (or truncates) to exactly `len` entries.
pub fn pad_prepend(tokens: &[u32], len: usize, truncation: Truncation) -> Vec<u32> {
    if tokens.len() >= len {
        return match truncation {
            Truncation::KeepFirst => tokens[..len].to_vec(),
            Truncation::KeepLast => tokens[tokens.len() - len..].to_vec(),
        };
    }
    let mut out = vec![0; len - tokens.len()];
    out.extend_from_slice(tokens);
    out
}

/// Tokenizes, indexes and pads one text. Tokens missing from `vocab` are dropped.
pub fn encode_text(vocab: &Vocabulary, text: &str, len: usize, truncation: Truncation) -> Vec<u32> {
    let ids: Vec<u32> = tokenize_lower(text)
        .iter()
        .filter_map(|t| vocab.get(t))
        .collect();
    pad_prepend(&ids, len, truncation)
}

pub fn tokenize_docs(
    docs: &[Document],
    vocab: &Vocabulary,
    len: usize,
    truncation: Truncation,
) -> Vec<TokenizedDoc> {
    docs.iter()
        .map(|d| TokenizedDoc {
            tokens: encode_text(vocab, &d.text, len, truncation),
            label: d.label,
        })
        .collect()
}

/// Looks every token up in `table`, giving `[N × len × dim]`.
pub fn encode_batch(docs: &[&TokenizedDoc], table: &EmbeddingTable) -> Result<Tensor<f32>> {
    let Some(first) = docs.first() else {
        return Err(Error::Contract("encode_batch needs at least one document".into()));
    };
    let len = first.tokens.len();
    let dim = table.dim();
    let rows = table.rows();
    let src = table.vectors().data();
    let mut out = Vec::with_capacity(docs.len() * len * dim);
    for doc in docs {
        if doc.tokens.len() != len {
            return Err(Error::Data(format!(
                "documents in a batch must share one length ({} vs {len})",
                doc.tokens.len()
            )));
        }
        for &id in &doc.tokens {
            let id = id as usize;
            if id >= rows {
                return Err(Error::Data(format!(
                    "token index {id} outside embedding table with {rows} rows"
                )));
            }
            out.extend_from_slice(&src[id * dim..(id + 1) * dim]);
        }
    }
    Tensor::new(vec![docs.len(), len, dim], out)
}
