//! Utterance encoders: the graph model or a fixed classical pooling.

use std::fmt;
use std::str::FromStr;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::dataio::FeatureStack;
use crate::diffcore::Real;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::pooling::{self, PoolingKind};

/// Which pooling turns frames into an embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EncoderKind {
    #[default]
    Graph,
    Pooling(PoolingKind),
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderKind::Graph => f.write_str("gnn"),
            EncoderKind::Pooling(k) => k.fmt(f),
        }
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gnn" => Ok(EncoderKind::Graph),
            other => other.parse().map(EncoderKind::Pooling),
        }
    }
}

impl Serialize for EncoderKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EncoderKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(de::Error::custom)
    }
}

/// Bring a stack to the layer count an encoder consumes. Multi-layer input
/// to a single-layer consumer is averaged over layers.
pub fn fit_layers(stack: &FeatureStack, layers: usize) -> Result<FeatureStack> {
    match (stack.layers(), layers) {
        (a, b) if a == b => Ok(stack.clone()),
        (_, 1) => Ok(stack.average_layers()),
        (a, b) => Err(Error::Data(format!("stack has {a} layers, expected {b}"))),
    }
}

/// Embedding function with its parameters.
#[derive(Clone, Debug)]
pub enum Encoder<T: Real> {
    Graph(Model<T>),
    Pooling(PoolingKind),
}

impl<T: Real> Encoder<T> {
    pub fn kind(&self) -> EncoderKind {
        match self {
            Encoder::Graph(_) => EncoderKind::Graph,
            Encoder::Pooling(k) => EncoderKind::Pooling(*k),
        }
    }

    /// Embedding width for `feature_dim`-wide frames.
    pub fn output_dim(&self, feature_dim: usize) -> usize {
        output_dim(self.kind(), &self.model_config(feature_dim))
    }

    fn model_config(&self, feature_dim: usize) -> ModelConfig {
        match self {
            Encoder::Graph(m) => m.config.clone(),
            Encoder::Pooling(_) => ModelConfig {
                feature_dim,
                ..ModelConfig::default()
            },
        }
    }

    /// Layers expected after [`fit_layers`].
    pub fn input_layers(&self) -> usize {
        match self {
            Encoder::Graph(m) => m.config.input_layers(),
            Encoder::Pooling(_) => 1,
        }
    }

    pub fn embed(&self, stack: &FeatureStack) -> Result<Vec<f64>> {
        let stack = fit_layers(stack, self.input_layers())?;
        match self {
            Encoder::Graph(m) => Ok(m.embed(&stack)?.into_iter().map(Real::as_f64).collect()),
            Encoder::Pooling(k) => pooling::pool(*k, stack.layer_as::<f64>(0).view()),
        }
    }
}

/// Embedding width produced by `kind` under `config`.
pub fn output_dim(kind: EncoderKind, config: &ModelConfig) -> usize {
    match kind {
        EncoderKind::Graph => config.projected(),
        EncoderKind::Pooling(k) => k.output_dim(config.feature_dim),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_kinds() {
        assert_eq!("gnn".parse::<EncoderKind>().unwrap(), EncoderKind::Graph);
        assert_eq!(
            "mean".parse::<EncoderKind>().unwrap(),
            EncoderKind::Pooling(PoolingKind::Mean)
        );
        assert!("bogus".parse::<EncoderKind>().is_err());
        assert_eq!(EncoderKind::Pooling(PoolingKind::MeanStd).to_string(), "mean_std");
    }

    #[test]
    fn layer_fitting() {
        let s = FeatureStack::new(2, 1, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let one = fit_layers(&s, 1).unwrap();
        assert_eq!(one.values(), &[2.0, 4.0]);
        assert_eq!(fit_layers(&s, 2).unwrap(), s);
        assert!(matches!(fit_layers(&s, 3), Err(Error::Data(_))));
    }

    #[test]
    fn pooling_encoder_averages_layers() {
        let s = FeatureStack::new(2, 2, 1, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let e = Encoder::<f64>::Pooling(PoolingKind::Mean);
        assert_eq!(e.embed(&s).unwrap(), vec![4.0]);
        assert_eq!(e.output_dim(1), 1);
    }
}
