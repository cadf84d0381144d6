use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::par::Parallelism;
use crate::synth::SynthSpec;

/// Flat JSON run description: data source, model and optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// `hfl-1` corpus; when absent the corpus is generated from the fields below.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    pub dialogues: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub gamma: f64,
    pub beta: f64,
    pub sigma: f64,
    pub lag: usize,
    pub rho: f64,
    pub data_seed: u64,

    #[serde(flatten)]
    pub model: ModelConfig,

    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub dialogues_per_step: usize,
    /// Training-time dropout on fused inputs and on the classifier input.
    pub dropout: f64,
    pub patience: usize,
    pub lr_factor: f64,
    pub min_lr: f64,
    /// Train, dev and test fractions.
    pub split: [f64; 3],
    /// Derive inverse-frequency class weights from the training split.
    pub balance_classes: bool,
    pub parallelism: Parallelism,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthSpec::default();
        Self {
            corpus: None,
            dialogues: s.dialogues,
            len_min: s.len_min,
            len_max: s.len_max,
            gamma: s.gamma,
            beta: s.beta,
            sigma: s.sigma,
            lag: s.lag,
            rho: s.rho,
            data_seed: s.seed,
            model: ModelConfig::default(),
            epochs: 40,
            lr: 1e-3,
            seed: 0,
            dialogues_per_step: 1,
            dropout: 0.0,
            patience: 5,
            lr_factor: 0.5,
            min_lr: 1e-5,
            split: [0.7, 0.1, 0.2],
            balance_classes: false,
            parallelism: Parallelism::default(),
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| Error::Config("run config must be a JSON object".into()))?;
        let mut known: BTreeSet<String> = match serde_json::to_value(RunConfig::default())? {
            serde_json::Value::Object(m) => m.keys().cloned().collect(),
            _ => unreachable!("struct serializes to an object"),
        };
        known.extend(["corpus", "out_dir", "class_weights"].map(String::from));
        if let Some(k) = obj.keys().find(|k| !known.contains(*k)) {
            return Err(Error::Config(format!("unknown config key `{k}`")));
        }
        let config: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_json(&text)?;
        if let (Some(corpus), Some(dir)) = (&config.corpus, path.parent()) {
            if corpus.is_relative() {
                config.corpus = Some(dir.join(corpus));
            }
        }
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.corpus.is_none() {
            self.synth_spec().validate()?;
        }
        if !(self.lr > 0.0 && self.min_lr > 0.0 && self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return Err(Error::Config("need lr > 0, min_lr > 0 and 0 < lr_factor ≤ 1".into()));
        }
        if self.dialogues_per_step == 0 || self.patience == 0 {
            return Err(Error::Config("dialogues_per_step and patience must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        if self.split.iter().any(|f| !(*f >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split {:?} must be non-negative and sum to 1", self.split)));
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            classes: self.model.classes,
            dialogues: self.dialogues,
            len_min: self.len_min,
            len_max: self.len_max,
            dim_t: self.model.dim_t,
            dim_a: self.model.dim_a,
            dim_v: self.model.dim_v,
            gamma: self.gamma,
            beta: self.beta,
            sigma: self.sigma,
            lag: self.lag,
            rho: self.rho,
            seed: self.data_seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AblationMode;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn flat_keys_reach_nested_settings() {
        let c = RunConfig::from_json(r#"{"ablation":"hgf","window_past":2,"lambda":0,"epochs":3,"experts":8,"corpus":"x.jsonl"}"#).unwrap();
        assert_eq!(c.model.ablation, AblationMode::Hgf);
        assert_eq!(c.model.graph.window_past, 2);
        assert_eq!(c.model.lambda, 0.0);
        assert_eq!(c.model.experts, 8);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.corpus, Some(PathBuf::from("x.jsonl")));
    }

    #[test]
    fn rejects_bad_configs() {
        for bad in [r#"{"epoch":3}"#, r#"{"lambda":-1}"#, r#"{"split":[0.5,0.5,0.5]}"#, r#"{"ablation":"moa"}"#, "[1]", r#"{"top_k":0}"#, r#"{"dropout":1}"#] {
            assert!(RunConfig::from_json(bad).is_err(), "{bad}");
        }
    }
}
