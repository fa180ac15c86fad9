use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A raw labelled text; `label` is 0-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub text: String,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// Directory with `train.csv` and `test.csv` of `"class","title","description"` records.
    ZhangCsv,
    /// Directory with `rt-polarity.pos` and `rt-polarity.neg`, one review per line.
    MrPolarity,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zhang_csv" => Ok(Self::ZhangCsv),
            "mr_polarity" => Ok(Self::MrPolarity),
            other => Err(Error::Config(format!(
                "unknown dataset format {other:?} (expected zhang_csv or mr_polarity)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit<D = Document> {
    pub train: Vec<D>,
    pub test: Vec<D>,
    pub class_count: usize,
}

impl<D> DatasetSplit<D> {
    pub fn map<E>(self, mut f: impl FnMut(Vec<D>) -> Vec<E>) -> DatasetSplit<E> {
        DatasetSplit {
            train: f(self.train),
            test: f(self.test),
            class_count: self.class_count,
        }
    }
}

impl DatasetSplit<Document> {
    /// Number of documents per class over train and test.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for d in self.train.iter().chain(&self.test) {
            h[d.label] += 1;
        }
        h
    }
}

/// Document and class counts a corpus is expected to have.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpectedCounts {
    pub train: usize,
    pub test: usize,
    pub classes: usize,
}

impl ExpectedCounts {
    pub const AG_NEWS: Self = Self { train: 120_000, test: 7_600, classes: 4 };
    pub const DBPEDIA: Self = Self { train: 560_000, test: 70_000, classes: 14 };
    pub const YELP_POLARITY: Self = Self { train: 560_000, test: 38_000, classes: 2 };
    pub const YELP_FULL: Self = Self { train: 650_000, test: 50_000, classes: 5 };
    /// Both polarity files, before any fold or hold-out split.
    pub const MR: Self = Self { train: 10_662, test: 0, classes: 2 };

    fn check<D>(&self, split: &DatasetSplit<D>) -> Result<()> {
        if split.train.len() != self.train || split.test.len() != self.test {
            return Err(Error::Data(format!(
                "expected {} train / {} test documents, found {} / {}",
                self.train,
                self.test,
                split.train.len(),
                split.test.len()
            )));
        }
        if split.class_count != self.classes {
            return Err(Error::Data(format!(
                "expected {} classes, found {}",
                self.classes, split.class_count
            )));
        }
        Ok(())
    }
}

/// Reads one Zhang-style CSV file (1-based class in the first column).
///
/// Title and description (or the single text column of the Yelp files) are
/// joined with a space. `max_class` bounds the class index when known.
pub fn load_zhang_csv(path: &Path, max_class: Option<usize>) -> Result<Vec<Document>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut docs = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let recno = n + 1;
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() < 2 {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: recno,
                msg: format!("record has {} field(s), expected class and text", record.len()),
            });
        }
        let class: usize = record[0].trim().parse().map_err(|_| Error::Parse {
            path: path.to_owned(),
            line: recno,
            msg: format!("class index {:?} is not a positive integer", &record[0]),
        })?;
        if class == 0 || max_class.is_some_and(|m| class > m) {
            return Err(Error::Data(format!(
                "{}: record {recno}: class index {class} out of range",
                path.display()
            )));
        }
        let text = record.iter().skip(1).collect::<Vec<_>>().join(" ");
        docs.push(Document {
            text,
            label: class - 1,
        });
    }
    Ok(docs)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.record() as usize + 1);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Parse {
            path: path.to_owned(),
            line,
            msg: format!("{kind:?}"),
        },
    }
}

/// Decodes UTF-8, falling back to Latin-1 (the encoding of the original polarity files).
fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(match String::from_utf8(bytes) {
        Ok(s) => s,
        Err(e) => e.into_bytes().iter().map(|&b| b as char).collect(),
    })
}

/// Reads the two polarity files; negative reviews get label 0, positive label 1.
///
/// Everything lands in `train`; callers pick a fold or hold-out protocol.
pub fn load_mr_polarity(positive: &Path, negative: &Path) -> Result<DatasetSplit> {
    let mut train = Vec::new();
    for (path, label) in [(negative, 0), (positive, 1)] {
        for line in read_text(path)?.lines() {
            if line.trim().is_empty() {
                continue;
            }
            train.push(Document {
                text: line.to_owned(),
                label,
            });
        }
    }
    Ok(DatasetSplit {
        train,
        test: Vec::new(),
        class_count: 2,
    })
}

/// Loads a corpus directory in `format`, checking counts against `expect` if given.
pub fn load_dataset(
    dir: &Path,
    format: DatasetFormat,
    expect: Option<ExpectedCounts>,
) -> Result<DatasetSplit> {
    let split = match format {
        DatasetFormat::ZhangCsv => {
            let max_class = expect.map(|e| e.classes);
            let train = load_zhang_csv(&dir.join("train.csv"), max_class)?;
            let test_path = dir.join("test.csv");
            let test = if test_path.exists() {
                load_zhang_csv(&test_path, max_class)?
            } else {
                Vec::new()
            };
            let class_count = train
                .iter()
                .chain(&test)
                .map(|d| d.label + 1)
                .max()
                .unwrap_or(0);
            DatasetSplit {
                train,
                test,
                class_count: max_class.unwrap_or(class_count),
            }
        }
        DatasetFormat::MrPolarity => load_mr_polarity(
            &dir.join("rt-polarity.pos"),
            &dir.join("rt-polarity.neg"),
        )?,
    };
    if let Some(e) = expect {
        e.check(&split)?;
    }
    Ok(split)
}
