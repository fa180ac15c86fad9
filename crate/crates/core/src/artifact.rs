//! Self-contained model files.
//!
//! Layout (all integers little-endian `u64`):
//!
//! ```text
//! "BGC1"
//! header length, header bytes   JSON {"version":1,"config":{..},"vocab":[..]}
//! record count
//! per record: name length, name bytes, rank, dims…, f32 LE payload
//! ```
//!
//! Every parameter, including the (possibly frozen) embedding table, is stored,
//! so a file is all that prediction needs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::Model;
use crate::tensor::Tensor;
use crate::text::{EmbeddingTable, Vocabulary};

pub const MAGIC: &[u8; 4] = b"BGC1";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    vocab: Vec<String>,
}

/// Serialises `model` and its vocabulary.
pub fn to_bytes(model: &Model<f32>, vocab: &Vocabulary) -> Result<Vec<u8>> {
    let header = Header {
        version: VERSION,
        config: model.config.clone(),
        vocab: vocab.tokens().to_vec(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Artifact(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + 4 * model.params.count("", false) + 64);
    out.extend_from_slice(MAGIC);
    put_u64(&mut out, json.len());
    out.extend_from_slice(&json);
    put_u64(&mut out, model.params.len());
    for p in model.params.iter() {
        put_u64(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u64(&mut out, p.value.rank());
        for &d in p.value.shape() {
            put_u64(&mut out, d);
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a model file image; nothing is returned unless the whole image is valid.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model<f32>, Vocabulary)> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Artifact("not a model file (bad magic)".into()));
    }
    let header_len = r.u64()?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Artifact(format!("header: {e}")))?;
    if header.version != VERSION {
        return Err(Error::Artifact(format!("unsupported model file version {}", header.version)));
    }
    let count = r.u64()?;
    let mut records = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u64()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Artifact("parameter name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u64()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Artifact(format!("{name}: shape overflows")))?;
        let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Artifact("payload overflows".into()))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Artifact(format!("{name}: {e}")))?;
        records.push((name, tensor));
    }
    if r.at != bytes.len() {
        return Err(Error::Artifact(format!("{} trailing bytes", bytes.len() - r.at)));
    }

    let vocab = Vocabulary::from_tokens(header.vocab);
    let (_, embedding) = records
        .iter()
        .find(|(n, _)| n == "embedding")
        .ok_or_else(|| Error::Artifact("missing embedding record".into()))?;
    if embedding.shape().first() != Some(&(vocab.len() + 1)) {
        return Err(Error::Artifact(format!(
            "embedding has {:?} rows for a vocabulary of {} tokens",
            embedding.shape().first(),
            vocab.len()
        )));
    }
    let table = EmbeddingTable::from_tensor(embedding.clone())?;
    let mut model = Model::<f32>::new(&header.config, &table)?;
    if records.len() != model.params.len() {
        return Err(Error::Artifact(format!(
            "{} parameter records, model has {}",
            records.len(),
            model.params.len()
        )));
    }
    for (name, tensor) in records {
        model.params.assign(&name, tensor)?;
    }
    Ok((model, vocab))
}

pub fn save(path: &Path, model: &Model<f32>, vocab: &Vocabulary) -> Result<()> {
    fs::write(path, to_bytes(model, vocab)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model<f32>, Vocabulary)> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Artifact("model file is truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        let v = u64::from_le_bytes(b.try_into().expect("eight bytes"));
        usize::try_from(v).map_err(|_| Error::Artifact(format!("length {v} too large")))
    }
}
