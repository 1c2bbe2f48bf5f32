//! Experiment configuration: one JSON file plus dotted-path overrides.
//! Unknown keys are rejected at every level; omitted keys take defaults.

use std::path::Path;

use recttt_core::data::{CorruptionKind, RenderConfig};
use recttt_core::losses::{KlDirection, LossWeights};
use recttt_core::model::{AdaptOptions, ModelConfig};
use recttt_core::nn::BackboneDims;
use recttt_core::training::Schedule;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Base seed; run `i` uses `seeds[i]`.
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub corruptions: CorruptionConfig,
    pub method: String,
    pub ablation: AblationConfig,
    pub simsiam: SimSiamSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            data: DataConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            corruptions: CorruptionConfig::default(),
            method: "recttt".into(),
            ablation: AblationConfig::default(),
            simsiam: SimSiamSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub image_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_size: 4000,
            test_size: 1000,
            image_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub stem_channels: usize,
    pub widths: Vec<usize>,
    pub bn_momentum: f32,
    /// `symmetric` or `forward`.
    pub kl_direction: String,
    pub weight_ce: f32,
    pub weight_aux: f32,
    pub weight_kl: f32,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            widths: vec![32, 64, 128],
            bn_momentum: 0.1,
            kl_direction: "symmetric".into(),
            weight_ce: 1.0,
            weight_aux: 1.0,
            weight_kl: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Source pretraining of the frozen encoder.
    pub pretrain_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Epochs at which the learning rate is multiplied by `gamma`. Pretraining
    /// scales them by `pretrain_epochs / epochs`.
    pub milestones: Vec<usize>,
    pub gamma: f32,
    /// Also train the SimSiam baseline.
    pub with_simsiam: bool,
    /// Also train the single-encoder variant (ensemble ablation).
    pub with_single_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 40,
            epochs: 40,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![25, 35],
            gamma: 0.1,
            with_simsiam: true,
            with_single_encoder: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub iterations: usize,
    pub lr: f32,
    pub momentum: f32,
    pub depth: usize,
    /// Running-statistic momentum of adapted batch-norm layers.
    pub bn_momentum: f32,
    pub batch_size: usize,
    /// Iterations at which `dump-features` records pooled features.
    pub feature_iters: Vec<usize>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            lr: 0.005,
            momentum: 0.0,
            depth: 3,
            bn_momentum: 1.0,
            batch_size: 64,
            feature_iters: vec![0, 10, 20],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    pub kinds: Vec<String>,
    pub severity: u8,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            kinds: CorruptionKind::ALL
                .iter()
                .map(|k| k.name().to_string())
                .collect(),
            severity: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Report first-encoder predictions instead of the ensemble.
    pub single_encoder_inference: bool,
    pub kl_off: bool,
    pub aux_off: bool,
    pub iterations: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub depths: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            single_encoder_inference: false,
            kl_off: false,
            aux_off: false,
            iterations: vec![0, 1, 5, 10, 20, 50],
            batch_sizes: vec![8, 32, 64, 128],
            depths: vec![1, 2, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSiamSection {
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub pred_hidden: usize,
    pub ssl_weight: f32,
}

impl Default for SimSiamSection {
    fn default() -> Self {
        Self {
            proj_hidden: 128,
            proj_out: 64,
            pred_hidden: 64,
            ssl_weight: 1.0,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

/// Sets `path` (dot-separated) in a JSON tree. The value is parsed as JSON
/// and falls back to a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| cfg_err(format!("override `{assignment}` is not key=value")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| cfg_err(format!("`{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(cfg_err("empty override path"))
}

impl ExperimentConfig {
    /// Parses JSON text, applies overrides and validates.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: Value = serde_json::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        if !root.is_object() {
            return Err(cfg_err("top level must be an object"));
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: Self = serde_json::from_value(root).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(cfg_err("seeds must not be empty"));
        }
        if self.data.train_size < 2 || self.data.test_size < 1 {
            return Err(cfg_err("train_size must be >= 2 and test_size >= 1"));
        }
        self.dims().validate().map_err(|e| cfg_err(e.to_string()))?;
        self.kl_direction()?;
        self.kinds()?;
        if !(1..=5).contains(&self.corruptions.severity) {
            return Err(cfg_err("corruptions.severity must be in 1..=5"));
        }
        if self.adapt.depth == 0 || self.adapt.depth > self.model.widths.len() {
            return Err(cfg_err("adapt.depth must be in 1..=len(model.widths)"));
        }
        if self.adapt.batch_size < 2 || self.train.batch_size < 2 {
            return Err(cfg_err("batch sizes must be >= 2"));
        }
        if self.ablation.batch_sizes.iter().any(|&b| b < 2) {
            return Err(cfg_err("ablation.batch_sizes must be >= 2"));
        }
        if self
            .ablation
            .depths
            .iter()
            .any(|&d| d == 0 || d > self.model.widths.len())
        {
            return Err(cfg_err("ablation.depths out of range"));
        }
        self.method.parse::<recttt_core::baselines::Method>()?;
        Ok(())
    }

    pub fn dims(&self) -> BackboneDims {
        BackboneDims {
            stem_channels: self.model.stem_channels,
            widths: self.model.widths.clone(),
            image_size: self.data.image_size,
            ..Default::default()
        }
    }

    pub fn render(&self) -> RenderConfig {
        RenderConfig {
            image_size: self.data.image_size,
            ..Default::default()
        }
    }

    pub fn kl_direction(&self) -> Result<KlDirection> {
        match self.model.kl_direction.as_str() {
            "symmetric" => Ok(KlDirection::Symmetric),
            "forward" => Ok(KlDirection::Forward),
            other => Err(cfg_err(format!("unknown kl_direction `{other}`"))),
        }
    }

    pub fn kinds(&self) -> Result<Vec<CorruptionKind>> {
        if self.corruptions.kinds.is_empty() {
            return Err(cfg_err("corruptions.kinds must not be empty"));
        }
        self.corruptions
            .kinds
            .iter()
            .map(|k| {
                k.parse()
                    .map_err(|e: recttt_core::Error| cfg_err(e.to_string()))
            })
            .collect()
    }

    pub fn model_config(&self, two_encoders: bool) -> ModelConfig {
        ModelConfig {
            dims: self.dims(),
            two_encoders,
            weights: LossWeights {
                ce: self.model.weight_ce,
                aux: self.model.weight_aux,
                kl: self.model.weight_kl,
            },
            kl_direction: self.kl_direction().unwrap_or(KlDirection::Symmetric),
            use_aux: !self.ablation.aux_off,
            use_kl: !self.ablation.kl_off,
            bn_momentum: self.model.bn_momentum,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            milestones: self.train.milestones.clone(),
            gamma: self.train.gamma,
        }
    }

    pub fn pretrain_schedule(&self) -> Schedule {
        let mut s = self.schedule();
        s.epochs = self.train.pretrain_epochs;
        let e = self.train.epochs.max(1);
        s.milestones = self
            .train
            .milestones
            .iter()
            .map(|m| m * self.train.pretrain_epochs / e)
            .collect();
        s
    }

    pub fn adapt_options(&self) -> AdaptOptions {
        AdaptOptions {
            iterations: self.adapt.iterations,
            lr: self.adapt.lr,
            momentum: self.adapt.momentum,
            depth: self.adapt.depth,
            bn_momentum: self.adapt.bn_momentum,
            track_aux_after: true,
            feature_iters: Vec::new(),
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = ExperimentConfig::from_json("{}", &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.train.milestones, vec![25, 35]);
        assert_eq!(c.adapt.iterations, 20);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"sedes": [1]}"#, &[]).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"epoch": 3}}"#, &[]).is_err());
        assert!(ExperimentConfig::from_json("{}", &["adapt.iters=3".into()]).is_err());
    }

    #[test]
    fn dotted_overrides() {
        let c = ExperimentConfig::from_json(
            "{}",
            &[
                "adapt.iterations=5".into(),
                "seeds=[1,2,3]".into(),
                "method=ptbn".into(),
                "corruptions.kinds=[\"contrast\"]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.adapt.iterations, 5);
        assert_eq!(c.seeds, vec![1, 2, 3]);
        assert_eq!(c.method, "ptbn");
        assert_eq!(c.kinds().unwrap(), vec![CorruptionKind::Contrast]);
    }

    #[test]
    fn validation_errors() {
        for o in [
            "corruptions.severity=6",
            "adapt.depth=4",
            "method=tent",
            "corruptions.kinds=[\"fog\"]",
            "model.kl_direction=reverse",
            "data.image_size=30",
        ] {
            let e = ExperimentConfig::from_json("{}", &[o.into()]).unwrap_err();
            assert_eq!(e.exit_code(), crate::error::EXIT_CONFIG, "{o}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.adapt.lr = 0.01;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn pretrain_milestones_scale() {
        let c = ExperimentConfig::from_json("{}", &["train.pretrain_epochs=8".into()]).unwrap();
        assert_eq!(c.pretrain_schedule().milestones, vec![5, 7]);
    }
}
