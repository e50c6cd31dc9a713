//! Flat JSON run configuration. Every key is optional; unknown keys are
//! rejected. Command-line flags override file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssn_core::losses::KlMode;
use ssn_core::trainer::Precision;
use ssn_core::{Result, SsnError, TrainConfig, Variant};

pub const KEYS_HELP: &str = "\
Config file keys (flat JSON object, all optional):
  variant                 ssn | baseline | ssn-ir-l | ssn-ir0-l | ssn-ir-lplus   [ssn]
  batch_size              triplets per step, last partial batch dropped      [128]
  epochs                  training epochs                                     [50]
  lr                      AdamW learning rate                                 [5e-5]
  lr_decay_factor         step-decay multiplier                               [0.1]
  lr_decay_every          epochs between decays, 0 disables                   [10]
  weight_decay            decoupled weight decay                              [0.01]
  temperature             similarity scale inside the softmax                 [100]
  use_kl                  add the KL regularizer                              [true]
  kl_margin               hinge margin on the separation term                 [1]
  kl_mode                 hinge | raw                                         [hinge]
  share_decompose_params  one gate for text and image                         [false]
  heads                   attention heads in the fusion layer                 [8]
  ffn_hidden              fusion feed-forward width, null means d             [null]
  seed                    initialization and shuffling seed                   [0]
  precision               f32 | f64 (f64 only for gradcheck)                  [f32]
  train_data              SSNF file with training triplets                    [null]
  eval_data               SSNF file with evaluation triplets                  [null]
  out_dir                 directory for artifacts                             [runs]
  recall_ks               Recall@K cutoffs                                    [[1,5,10,50]]
  subset_ks               Recall_subset@K cutoffs                             [[1,2,3]]
  exclude_reference       drop the reference image from its own ranking       [false]
  heatmap                 eval also writes image-gate heatmaps                [false]
  heatmap_upscale         nearest-neighbour upscale of heatmap pixels         [1]";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub variant: Variant,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    pub temperature: f64,
    pub use_kl: bool,
    pub kl_margin: f64,
    pub kl_mode: KlMode,
    pub share_decompose_params: bool,
    pub heads: usize,
    pub ffn_hidden: Option<usize>,
    pub seed: u64,
    pub precision: Precision,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub recall_ks: Vec<usize>,
    pub subset_ks: Vec<usize>,
    pub exclude_reference: bool,
    pub heatmap: bool,
    pub heatmap_upscale: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            variant: t.variant,
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr: t.lr,
            lr_decay_factor: t.lr_decay_factor,
            lr_decay_every: t.lr_decay_every,
            weight_decay: t.weight_decay,
            temperature: t.temperature,
            use_kl: t.use_kl,
            kl_margin: t.kl_margin,
            kl_mode: t.kl_mode,
            share_decompose_params: t.share_decompose_params,
            heads: t.heads,
            ffn_hidden: t.ffn_hidden,
            seed: t.seed,
            precision: t.precision,
            train_data: None,
            eval_data: None,
            out_dir: PathBuf::from("runs"),
            recall_ks: ssn_core::retrieval::RECALL_KS.to_vec(),
            subset_ks: ssn_core::retrieval::SUBSET_KS.to_vec(),
            exclude_reference: false,
            heatmap: false,
            heatmap_upscale: 1,
        }
    }
}

/// A parsed config together with whether it named a seed.
pub struct Loaded {
    pub config: RunConfig,
    pub has_seed: bool,
}

pub fn parse(text: &str) -> Result<Loaded> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| SsnError::Config(format!("config json: {e}")))?;
    let has_seed = value.get("seed").is_some();
    let config =
        serde_json::from_value(value).map_err(|e| SsnError::Config(e.to_string()))?;
    Ok(Loaded { config, has_seed })
}

pub fn load(path: Option<&Path>) -> Result<Loaded> {
    match path {
        None => Ok(Loaded {
            config: RunConfig::default(),
            has_seed: false,
        }),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| SsnError::Config(format!("cannot read config {}: {e}", p.display())))?;
            parse(&text)
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            variant: self.variant,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr: self.lr,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_every: self.lr_decay_every,
            weight_decay: self.weight_decay,
            temperature: self.temperature,
            use_kl: self.use_kl,
            kl_margin: self.kl_margin,
            kl_mode: self.kl_mode,
            share_decompose_params: self.share_decompose_params,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            seed: self.seed,
            precision: self.precision,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.recall_ks.iter().chain(&self.subset_ks).any(|&k| k == 0) {
            return Err(SsnError::Config("recall cutoffs must be at least 1".into()));
        }
        if self.heatmap_upscale == 0 {
            return Err(SsnError::Config("heatmap_upscale must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let l = parse("{}").unwrap();
        assert_eq!(l.config, RunConfig::default());
        assert!(!l.has_seed);
        assert_eq!(l.config.train_config(), TrainConfig::default());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = parse(r#"{"epochs": 3, "learning_rate": 0.1}"#).err().unwrap();
        assert!(matches!(err, SsnError::Config(_)));
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn every_train_key_is_a_run_key_and_documented() {
        let train = serde_json::to_value(TrainConfig::default()).unwrap();
        let run = serde_json::to_value(RunConfig::default()).unwrap();
        for key in train.as_object().unwrap().keys() {
            assert!(run.get(key).is_some(), "{key}");
        }
        for key in run.as_object().unwrap().keys() {
            assert!(KEYS_HELP.contains(&format!("  {key} ")), "{key} undocumented");
        }
    }

    #[test]
    fn values_flow_into_train_config() {
        let l = parse(r#"{"variant": "baseline", "lr": 0.003, "seed": 9, "kl_mode": "raw"}"#).unwrap();
        let t = l.config.train_config();
        assert!(l.has_seed);
        assert_eq!((t.variant, t.lr, t.seed, t.kl_mode), (Variant::Baseline, 0.003, 9, KlMode::Raw));
    }
}
