//! Flat JSON run configuration.
//!
//! One JSON object carries every training, schedule, optimizer, model and
//! loss key. Keys are routed to their section by name; anything unknown is
//! rejected.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::aam::AamConfig;
use crate::encoder::EncoderKind;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{AdamConfig, OneCycle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Samples per gradient task; results are independent of worker count.
    pub micro_batch: usize,
    pub crop_frames: usize,
    pub epochs: usize,
    /// Total optimizer steps; `None` runs `epochs` full passes.
    pub steps: Option<usize>,
    pub seed: u64,
    /// 32 or 64.
    pub precision: u32,
    pub pooling: EncoderKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 48,
            micro_batch: 8,
            crop_frames: 149,
            epochs: 5,
            steps: None,
            seed: 0,
            precision: 32,
            pooling: EncoderKind::Graph,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub schedule: OneCycle,
    pub adam: AdamConfig,
    pub model: ModelConfig,
    pub aam: AamConfig,
}

const SCHEDULE_KEYS: &[&str] = &["max_lr", "div_factor", "final_div", "warmup_fraction"];
const ADAM_KEYS: &[&str] = &["beta1", "beta2", "adam_eps"];
const MODEL_KEYS: &[&str] = &[
    "feature_dim",
    "projected_dim",
    "rounds",
    "mlp_hidden",
    "activation",
    "use_layer_weighting",
    "thin",
    "layers",
];
const AAM_KEYS: &[&str] = &["margin", "scale"];

fn section<T: DeserializeOwned>(map: Map<String, Value>) -> Result<T> {
    serde_json::from_value(Value::Object(map)).map_err(|e| Error::Usage(format!("config: {e}")))
}

fn flatten<T: Serialize>(value: &T, into: &mut Map<String, Value>) {
    if let Value::Object(m) = serde_json::to_value(value).expect("plain struct") {
        into.extend(m);
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let map: Map<String, Value> =
            serde_json::from_str(text).map_err(|e| Error::Usage(format!("config: {e}")))?;
        let mut parts: [Map<String, Value>; 5] = Default::default();
        for (k, v) in map {
            let slot = if SCHEDULE_KEYS.contains(&k.as_str()) {
                1
            } else if ADAM_KEYS.contains(&k.as_str()) {
                2
            } else if MODEL_KEYS.contains(&k.as_str()) {
                3
            } else if AAM_KEYS.contains(&k.as_str()) {
                4
            } else {
                0
            };
            parts[slot].insert(k, v);
        }
        let [train, schedule, adam, model, aam] = parts;
        let config = RunConfig {
            train: section(train)?,
            schedule: section(schedule)?,
            adam: section(adam)?,
            model: section(model)?,
            aam: section(aam)?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        let mut map = Map::new();
        flatten(&self.train, &mut map);
        flatten(&self.schedule, &mut map);
        flatten(&self.adam, &mut map);
        flatten(&self.model, &mut map);
        flatten(&self.aam, &mut map);
        serde_json::to_string_pretty(&Value::Object(map)).expect("plain values")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.batch_size == 0 || t.micro_batch == 0 || t.crop_frames == 0 || t.epochs == 0 {
            return Err(Error::Usage(
                "batch_size, micro_batch, crop_frames and epochs must be positive".into(),
            ));
        }
        if t.steps == Some(0) {
            return Err(Error::Usage("steps must be positive".into()));
        }
        if t.precision != 32 && t.precision != 64 {
            return Err(Error::Usage(format!("precision {} is not 32 or 64", t.precision)));
        }
        self.schedule.validate()?;
        self.model.validate()?;
        self.aam.validate()
    }

    /// Encoder kind, with random selection seeded from the run seed.
    pub fn encoder_kind(&self) -> EncoderKind {
        match self.train.pooling {
            EncoderKind::Pooling(k) => EncoderKind::Pooling(k.with_seed(self.train.seed)),
            g => g,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;
    use crate::pooling::PoolingKind;

    #[test]
    fn defaults_from_empty_object() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.batch_size, 48);
        assert_eq!(c.model.rounds, 2);
        assert_eq!(c.aam.margin, 0.2);
    }

    #[test]
    fn keys_route_to_sections() {
        let c = RunConfig::from_json(
            r#"{"batch_size": 4, "max_lr": 0.01, "beta2": 0.99, "adam_eps": 1e-6,
                "thin": true, "activation": "gelu", "scale": 10, "pooling": "mean", "seed": 3}"#,
        )
        .unwrap();
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.schedule.max_lr, 0.01);
        assert_eq!(c.adam.beta2, 0.99);
        assert_eq!(c.adam.eps, 1e-6);
        assert!(c.model.thin);
        assert_eq!(c.model.activation, Activation::Gelu);
        assert_eq!(c.aam.scale, 10.0);
        assert_eq!(c.train.pooling, EncoderKind::Pooling(PoolingKind::Mean));
    }

    #[test]
    fn round_trips_through_json() {
        let mut c = RunConfig::default();
        c.train.steps = Some(7);
        c.model.projected_dim = Some(5);
        c.train.pooling = EncoderKind::Pooling(PoolingKind::MeanStd);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            r#"{"bogus": 1}"#,
            r#"{"batch_size": 0}"#,
            r#"{"precision": 16}"#,
            r#"{"warmup_fraction": 1.5}"#,
            r#"{"rounds": 0}"#,
            r#"{"pooling": "nope"}"#,
            "[1]",
            "{",
        ] {
            assert!(matches!(RunConfig::from_json(text), Err(Error::Usage(_))), "{text}");
        }
    }

    #[test]
    fn random_pooling_takes_run_seed() {
        let c = RunConfig::from_json(r#"{"pooling": "random", "seed": 9}"#).unwrap();
        assert_eq!(c.encoder_kind(), EncoderKind::Pooling(PoolingKind::Random { seed: 9 }));
    }
}
