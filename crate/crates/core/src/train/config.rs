use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::AugmentationPolicy;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub micro_batch: usize,
    pub accumulate: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Stop after this many optimizer updates (the epoch is still evaluated).
    pub max_steps: Option<usize>,
    /// Edge band radius; resolution-scaled when unset.
    pub edge_k: Option<usize>,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            min_lr: 5e-7,
            betas: (0.9, 0.95),
            adam_eps: 1e-8,
            weight_decay: 0.05,
            epochs: 200,
            warmup_epochs: 4,
            micro_batch: 1,
            accumulate: 32,
            early_stop_patience: 15,
            seed: 0,
            max_steps: None,
            edge_k: None,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return bad(format!("need 0 <= min_lr <= base_lr, got {} and {}", self.min_lr, self.base_lr));
        }
        if self.accumulate == 0 || self.micro_batch == 0 {
            return bad("accumulate and micro_batch must be >= 1".into());
        }
        if self.epochs == 0 || self.warmup_epochs > self.epochs {
            return bad(format!("warmup_epochs {} exceeds epochs {}", self.warmup_epochs, self.epochs));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("betas out of [0, 1): {:?}", self.betas));
        }
        if self.weight_decay < 0.0 || self.adam_eps <= 0.0 {
            return bad("weight_decay must be >= 0 and adam_eps > 0".into());
        }
        if self.edge_k == Some(0) {
            return bad("edge_k must be >= 1".into());
        }
        Ok(())
    }
}

/// Everything a run needs, as read from a JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub augment: AugmentationPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::vit_base(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentationPolicy::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }

    /// Applies `key.path=value` overrides in order. Values are parsed as JSON
    /// and fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, key, value)?;
        }
        serde_json::from_value(v).map_err(|e| Error::Config(format!("after overrides: {e}")))
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p:?} is not inside an object")))?;
        if !obj.contains_key(*p) {
            return Err(Error::Config(format!("unknown config key {key}")));
        }
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*p).expect("checked");
    }
    Err(Error::Config("empty override key".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_in_order() {
        let c = RunConfig::default()
            .with_overrides(&["train.base_lr=0.001", "loss.lambda=0", "train.base_lr=0.002"])
            .unwrap();
        assert_eq!(c.train.base_lr, 0.002);
        assert_eq!(c.loss.lambda, 0.0);
        let c = RunConfig::default().with_overrides(&["model.head.norm_kind=layer"]).unwrap();
        assert_eq!(c.model.head.norm_kind, crate::model::NormKind::Layer);
    }

    #[test]
    fn bad_overrides() {
        let c = RunConfig::default();
        assert!(c.with_overrides(&["train.nope=1"]).is_err());
        assert!(c.with_overrides(&["train.base_lr"]).is_err());
        assert!(c.with_overrides(&["train.epochs=\"x\""]).is_err());
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = RunConfig::from_json(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.accumulate, 32);
        assert_eq!(c.loss.lambda, 20.0);
    }
}
