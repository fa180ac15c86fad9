use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Half-width of the uniform range for vectors of tokens missing from the file.
pub const OOV_RANGE: f32 = 0.05;

/// `(|V|+1) × dim` lookup table; row 0 is the padding vector and is all zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    vectors: Tensor<f32>,
}

impl EmbeddingTable {
    /// Seeded uniform(-0.05, 0.05) rows for every token.
    pub fn random(vocab: &Vocabulary, dim: usize, seed: u64) -> Self {
        let rows = vocab.len() + 1;
        let mut data = vec![0.0f32; rows * dim];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in &mut data[dim..] {
            *x = rng.gen_range(-OOV_RANGE..OOV_RANGE);
        }
        Self {
            vectors: Tensor::from_parts(vec![rows, dim], data),
        }
    }

    /// Wraps an existing matrix, zeroing row 0.
    pub fn from_tensor(mut vectors: Tensor<f32>) -> Result<Self> {
        if vectors.rank() != 2 {
            return Err(Error::dim("embedding table", vectors.shape(), &[2]));
        }
        let dim = vectors.shape()[1];
        if vectors.data()[..dim].iter().any(|&x| x != 0.0) {
            vectors.data_mut()[..dim].fill(0.0);
        }
        Ok(Self { vectors })
    }

    pub fn vectors(&self) -> &Tensor<f32> {
        &self.vectors
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.vectors
    }

    pub fn rows(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn row(&self, index: usize) -> &[f32] {
        let d = self.dim();
        &self.vectors.data()[index * d..(index + 1) * d]
    }
}

/// How many vocabulary tokens were found in a pretrained file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coverage {
    pub found: usize,
    pub oov: usize,
}

impl Coverage {
    pub fn oov_rate(&self) -> f64 {
        let total = self.found + self.oov;
        if total == 0 {
            0.0
        } else {
            self.oov as f64 / total as f64
        }
    }
}

impl fmt::Display for Coverage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "found={} oov={} oov_rate={:.6}", self.found, self.oov, self.oov_rate())
    }
}

/// Reads a GloVe text file (`token v1 … v_dim` per line) for the tokens of `vocab`.
///
/// Tokens absent from the file keep their seeded random row from
/// [`EmbeddingTable::random`], so the result is a pure function of the file, the
/// vocabulary and `seed`.
pub fn load_glove(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<(EmbeddingTable, Coverage)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut table = EmbeddingTable::random(vocab, dim, seed);
    let mut seen = vec![false; vocab.len() + 1];
    let data = table.vectors.data_mut();
    let mut line = String::new();
    let mut reader = BufReader::new(file);
    let mut lineno = 0;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        lineno += 1;
        let trimmed = line.trim_end_matches(['\n', '\r']);
        if trimmed.is_empty() {
            continue;
        }
        let mut fields = trimmed.split(' ').filter(|f| !f.is_empty());
        let token = fields.next().unwrap_or_default();
        let values: Vec<&str> = fields.collect();
        if lineno == 1 && values.len() != dim {
            return Err(Error::Config(format!(
                "{}: embedding file has dimension {}, configured {dim}",
                path.display(),
                values.len()
            )));
        }
        if values.len() != dim {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: lineno,
                msg: format!("expected {} fields, found {}", dim + 1, values.len() + 1),
            });
        }
        let Some(index) = vocab.get(token) else {
            continue;
        };
        let index = index as usize;
        let row = &mut data[index * dim..(index + 1) * dim];
        for (dst, v) in row.iter_mut().zip(&values) {
            *dst = v.parse().map_err(|_| Error::Parse {
                path: path.to_owned(),
                line: lineno,
                msg: format!("not a number: {v:?}"),
            })?;
        }
        seen[index] = true;
    }
    let found = seen.iter().filter(|&&s| s).count();
    Ok((
        table,
        Coverage {
            found,
            oov: vocab.len() - found,
        },
    ))
}
