//! Architecture and training hyperparameters.
//!
//! The on-disk form is flat `key = value` text, one field per line, `#` comments.
//! Lists are comma separated. Every key must be a [`ModelConfig`] field.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::Truncation;

/// Which architecture a run trains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// BiGRU ensemble, primary capsules, dynamic routing.
    #[default]
    Bgcapsule,
    /// BiGRU ensemble followed by max pooling instead of capsules.
    BigruMaxpool,
    /// Convolutional n-gram features followed by capsules.
    CnnCapsule,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::BigruMaxpool, Variant::CnnCapsule, Variant::Bgcapsule];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Bgcapsule => "bgcapsule",
            Variant::BigruMaxpool => "bigru_maxpool",
            Variant::CnnCapsule => "cnn_capsule",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Selu,
}

/// Axis along which routing logits are normalised into couplings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxAxis {
    /// Each input capsule distributes a unit of coupling over the output capsules.
    #[default]
    OutputCaps,
    /// Each output capsule's couplings sum to one over input capsules.
    InputCaps,
}

macro_rules! named_enum {
    ($t:ty { $($name:literal => $v:expr),+ $(,)? }) => {
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($v),)+
                    other => Err(Error::Config(format!(
                        "invalid value {other:?}; expected one of: {}",
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let name = match self { $(x if *x == $v => $name,)+ _ => unreachable!() };
                f.write_str(name)
            }
        }
    };
}

named_enum!(Variant {
    "bgcapsule" => Variant::Bgcapsule,
    "bigru_maxpool" => Variant::BigruMaxpool,
    "cnn_capsule" => Variant::CnnCapsule,
});
named_enum!(Activation { "relu" => Activation::Relu, "selu" => Activation::Selu });
named_enum!(SoftmaxAxis {
    "output_caps" => SoftmaxAxis::OutputCaps,
    "input_caps" => SoftmaxAxis::InputCaps,
});
named_enum!(Truncation {
    "keep_first" => Truncation::KeepFirst,
    "keep_last" => Truncation::KeepLast,
});

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub max_len: usize,
    pub truncation: Truncation,
    pub embed_dim: usize,
    pub embed_trainable: bool,
    /// Hidden size of each BiGRU in the ensemble (per direction).
    pub bigru_sizes: Vec<usize>,
    /// Dimension of primary capsules.
    pub caps_dim: usize,
    /// Primary capsules produced at each sequence position.
    pub caps_per_position: usize,
    /// Number of routed (upper layer) capsules.
    pub routed_caps: usize,
    pub routed_dim: usize,
    pub routing_iters: usize,
    /// Share prediction matrices across positions; off gives one matrix per capsule pair.
    pub share_routing_weights: bool,
    pub softmax_axis: SoftmaxAxis,
    pub dense_hidden: usize,
    pub head_activation: Activation,
    pub class_count: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub pool_window: usize,
    pub cnn_widths: Vec<usize>,
    /// Filters per convolution width.
    pub cnn_filters: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Bgcapsule,
            max_len: 200,
            truncation: Truncation::KeepFirst,
            embed_dim: 300,
            embed_trainable: false,
            bigru_sizes: vec![256, 200],
            caps_dim: 20,
            caps_per_position: 1,
            routed_caps: 10,
            routed_dim: 20,
            routing_iters: 3,
            share_routing_weights: true,
            softmax_axis: SoftmaxAxis::OutputCaps,
            dense_hidden: 128,
            head_activation: Activation::Relu,
            class_count: 2,
            dropout: 0.25,
            batch_size: 32,
            epochs: 20,
            lr: 1e-3,
            seed: 0,
            pool_window: 4,
            cnn_widths: vec![3, 4, 5],
            cnn_filters: 304,
        }
    }
}

const KEYS: &[&str] = &[
    "variant",
    "max_len",
    "truncation",
    "embed_dim",
    "embed_trainable",
    "bigru_sizes",
    "caps_dim",
    "caps_per_position",
    "routed_caps",
    "routed_dim",
    "routing_iters",
    "share_routing_weights",
    "softmax_axis",
    "dense_hidden",
    "head_activation",
    "class_count",
    "dropout",
    "batch_size",
    "epochs",
    "lr",
    "seed",
    "pool_window",
    "cnn_widths",
    "cnn_filters",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| parse(key, s.trim()))
        .collect()
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    /// The published full-scale batch size.
    pub const FULL_SCALE_BATCH_SIZE: usize = 1000;

    /// Settings as used for the full-scale experiments.
    pub fn full_scale(class_count: usize) -> Self {
        Self {
            class_count,
            batch_size: Self::FULL_SCALE_BATCH_SIZE,
            ..Self::default()
        }
    }

    /// Tiny dimensions that train in seconds on one core.
    pub fn toy(class_count: usize) -> Self {
        Self {
            embed_dim: 8,
            embed_trainable: true,
            bigru_sizes: vec![4, 3],
            caps_dim: 4,
            routed_caps: 3,
            routed_dim: 4,
            dense_hidden: 32,
            class_count,
            dropout: 0.0,
            batch_size: 20,
            epochs: 10,
            lr: 0.01,
            cnn_filters: 5,
            ..Self::default()
        }
    }

    /// Applies one `key`/`value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "variant" => self.variant = v.parse()?,
            "max_len" => self.max_len = parse(key, v)?,
            "truncation" => self.truncation = v.parse()?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "embed_trainable" => self.embed_trainable = parse(key, v)?,
            "bigru_sizes" => self.bigru_sizes = parse_list(key, v)?,
            "caps_dim" => self.caps_dim = parse(key, v)?,
            "caps_per_position" => self.caps_per_position = parse(key, v)?,
            "routed_caps" => self.routed_caps = parse(key, v)?,
            "routed_dim" => self.routed_dim = parse(key, v)?,
            "routing_iters" => self.routing_iters = parse(key, v)?,
            "share_routing_weights" => self.share_routing_weights = parse(key, v)?,
            "softmax_axis" => self.softmax_axis = v.parse()?,
            "dense_hidden" => self.dense_hidden = parse(key, v)?,
            "head_activation" => self.head_activation = v.parse()?,
            "class_count" => self.class_count = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "pool_window" => self.pool_window = parse(key, v)?,
            "cnn_widths" => self.cnn_widths = parse_list(key, v)?,
            "cnn_filters" => self.cnn_filters = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses the flat text form over the defaults, returning the keys that were set.
    pub fn parse_text(text: &str) -> Result<(Self, BTreeSet<String>)> {
        let mut cfg = Self::default();
        let seen = cfg.apply_text(text)?;
        cfg.validate()?;
        Ok((cfg, seen))
    }

    /// Applies the flat text form on top of `self` (without validating the
    /// result), returning the keys that were set.
    pub fn apply_text(&mut self, text: &str) -> Result<BTreeSet<String>> {
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", n + 1)));
            };
            let key = key.trim();
            if !seen.insert(key.to_owned()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(seen)
    }

    /// Every field in the flat text form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for &key in KEYS {
            let value = match key {
                "variant" => self.variant.to_string(),
                "max_len" => self.max_len.to_string(),
                "truncation" => self.truncation.to_string(),
                "embed_dim" => self.embed_dim.to_string(),
                "embed_trainable" => self.embed_trainable.to_string(),
                "bigru_sizes" => join(&self.bigru_sizes),
                "caps_dim" => self.caps_dim.to_string(),
                "caps_per_position" => self.caps_per_position.to_string(),
                "routed_caps" => self.routed_caps.to_string(),
                "routed_dim" => self.routed_dim.to_string(),
                "routing_iters" => self.routing_iters.to_string(),
                "share_routing_weights" => self.share_routing_weights.to_string(),
                "softmax_axis" => self.softmax_axis.to_string(),
                "dense_hidden" => self.dense_hidden.to_string(),
                "head_activation" => self.head_activation.to_string(),
                "class_count" => self.class_count.to_string(),
                "dropout" => self.dropout.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "epochs" => self.epochs.to_string(),
                "lr" => self.lr.to_string(),
                "seed" => self.seed.to_string(),
                "pool_window" => self.pool_window.to_string(),
                "cnn_widths" => join(&self.cnn_widths),
                "cnn_filters" => self.cnn_filters.to_string(),
                _ => unreachable!(),
            };
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_len", self.max_len),
            ("embed_dim", self.embed_dim),
            ("caps_dim", self.caps_dim),
            ("caps_per_position", self.caps_per_position),
            ("routed_caps", self.routed_caps),
            ("routed_dim", self.routed_dim),
            ("routing_iters", self.routing_iters),
            ("dense_hidden", self.dense_hidden),
            ("class_count", self.class_count),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("pool_window", self.pool_window),
            ("cnn_filters", self.cnn_filters),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{key} must be positive")));
        }
        if self.bigru_sizes.is_empty() || self.bigru_sizes.contains(&0) {
            return Err(Error::Config("bigru_sizes must be non-empty and positive".into()));
        }
        if self.cnn_widths.is_empty() || self.cnn_widths.contains(&0) {
            return Err(Error::Config("cnn_widths must be non-empty and positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.variant == Variant::BigruMaxpool && self.max_len < self.pool_window {
            return Err(Error::Config(format!(
                "pool_window {} exceeds max_len {}",
                self.pool_window, self.max_len
            )));
        }
        Ok(())
    }

    /// Feature width the BiGRU ensemble emits per position.
    pub fn ensemble_width(&self) -> usize {
        2 * self.bigru_sizes.iter().sum::<usize>()
    }
}
