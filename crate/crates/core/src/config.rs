//! The JSON run configuration shared by the command-line tools.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::features::{CmvnStats, FeatureConfig};
use crate::models::{BackboneConfig, BackboneKind, KwsModel};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub features: FeatureConfig,
    pub model: BackboneConfig,
    pub num_keywords: usize,
    /// Keyword names; generated when empty.
    pub keywords: Vec<String>,
    pub train: TrainConfig,
    pub detector: DetectorConfig,
    /// Precomputed CMVN statistics; computed from the training manifest when absent.
    pub cmvn: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            model: BackboneConfig::default_for(BackboneKind::Dstcn),
            num_keywords: 1,
            keywords: Vec::new(),
            train: TrainConfig::default(),
            detector: DetectorConfig::default(),
            cmvn: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.num_keywords == 0 {
            return Err(Error::InvalidConfig("num_keywords must be at least 1".into()));
        }
        if !self.keywords.is_empty() && self.keywords.len() != self.num_keywords {
            return Err(Error::InvalidConfig(format!(
                "{} keyword names for {} keywords",
                self.keywords.len(),
                self.num_keywords
            )));
        }
        if self.features.num_mels != self.model.input_dim {
            return Err(Error::InvalidConfig(format!(
                "features.num_mels {} != model.input_dim {}",
                self.features.num_mels, self.model.input_dim
            )));
        }
        if self.detector.thresholds.len() > self.num_keywords || self.detector.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidConfig("detector thresholds must be in [0, 1], one per keyword at most".into()));
        }
        Ok(())
    }

    /// A freshly initialised model carrying this configuration's features, names and thresholds.
    pub fn build_model(&self, cmvn: CmvnStats) -> Result<KwsModel<f32>> {
        let mut model = KwsModel::build(self.model.clone(), self.num_keywords, cmvn, self.train.seed)?;
        model.feature_config = self.features.clone();
        if !self.keywords.is_empty() {
            model.meta.keywords = self.keywords.clone();
        }
        for (t, &v) in model.meta.thresholds.iter_mut().zip(&self.detector.thresholds) {
            *t = v;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_recipes_load() {
        for text in [
            include_str!("../../../configs/dstcn_max_pooling.json"),
            include_str!("../../../configs/mdtc_max_pooling.json"),
        ] {
            let cfg = RunConfig::from_json(text).unwrap();
            assert_eq!(cfg.keywords.len(), cfg.num_keywords);
            assert_eq!(cfg.model, BackboneConfig::default_for(cfg.model.kind));
        }
    }

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.seed, 777);
        assert_eq!(cfg.train.epochs, 80);
    }

    #[test]
    fn unknown_keys_fail_fast() {
        for doc in [
            r#"{"epochs": 3}"#,
            r#"{"train": {"epoch": 3}}"#,
            r#"{"train": {"loss": {"kind": "max_pooling", "typo": 1}}}"#,
            r#"{"features": {"num_mel": 40}}"#,
            r#"{"model": {"kind": "DSTCN", "hidden_channels": 8, "kernel_size": 3, "dilations": [1], "extra": 0}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(doc), Err(Error::InvalidConfig(_))), "{doc}");
        }
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig {
            num_keywords: 2,
            keywords: vec!["a".into(), "b".into()],
            ..RunConfig::default()
        };
        cfg.detector.thresholds = vec![0.3];
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let model = back.build_model(CmvnStats::identity(40)).unwrap();
        assert_eq!(model.meta.keywords, vec!["a", "b"]);
        assert_eq!(model.meta.thresholds, vec![0.3, 0.5]);
    }

    #[test]
    fn inconsistent_dims_are_rejected() {
        let doc = r#"{"features": {"num_mels": 20}}"#;
        assert!(RunConfig::from_json(doc).is_err());
        assert!(RunConfig::from_json(r#"{"num_keywords": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"num_keywords": 2, "keywords": ["x"]}"#).is_err());
    }
}
