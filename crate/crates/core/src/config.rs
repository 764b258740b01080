//! Run configuration: one TOML document holding every hyperparameter,
//! profile and seed of a run.
//!
//! Sections left out, and keys left out of a section, take the preset
//! defaults of the selected `pipeline.mode` (aerial unless stated). The
//! only key without a default is `train.steps`.
//!
//! ```toml
//! [data]
//! manifest = "fixture/manifest.toml"
//! split = "train"
//!
//! [data.gt]
//! mode = "gsd_adaptive"
//!
//! [pipeline]
//! mode = "aerial"
//! rng_seed = 7
//!
//! [train]
//! steps = 200
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::dataset::Split;
use crate::density::GtMode;
use crate::error::{Error, Result};
use crate::inference::{CountHead, InferenceConfig};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::patches::{PipelineMode, PipelineProfile};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default)]
    pub gt: GtMode,
    /// Records scored during training when `train.validate_every > 0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_split: Option<Split>,
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default)]
    pub count_head: CountHead,
    /// Minimum peak separation for detection; defaults to the GT σ.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_sep_px: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub pipeline: PipelineProfile,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub evaluation: EvaluationConfig,
}

fn defaults_for(mode: PipelineMode) -> Result<Value> {
    let (pipeline, train) = match mode {
        PipelineMode::Aerial => (PipelineProfile::aerial(), TrainConfig::aerial(0)),
        PipelineMode::Cctv => (PipelineProfile::cctv(), TrainConfig::cctv(0)),
    };
    let mut train = Value::try_from(train).map_err(ser_err)?;
    if let Some(t) = train.as_table_mut() {
        t.remove("steps");
    }
    let mut root = toml::Table::new();
    root.insert("pipeline".into(), Value::try_from(pipeline).map_err(ser_err)?);
    root.insert("model".into(), Value::try_from(ModelConfig::default()).map_err(ser_err)?);
    root.insert("loss".into(), Value::try_from(LossConfig::default()).map_err(ser_err)?);
    root.insert("train".into(), train);
    root.insert("inference".into(), Value::try_from(InferenceConfig::default()).map_err(ser_err)?);
    root.insert("evaluation".into(), Value::try_from(EvaluationConfig::default()).map_err(ser_err)?);
    Ok(Value::Table(root))
}

fn ser_err(e: toml::ser::Error) -> Error {
    Error::Config(vec![e.to_string()])
}

/// Overlays `top` onto `base`, recursing into tables.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Parses a configuration document, filling defaults and validating.
    /// Relative paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let user: Value = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let mode = match user.get("pipeline").and_then(|p| p.get("mode")) {
            Some(v) => PipelineMode::deserialize(v.clone())
                .map_err(|e| Error::Config(vec![format!("pipeline.mode: {e}")]))?,
            None => PipelineMode::Aerial,
        };
        let mut doc = defaults_for(mode)?;
        merge(&mut doc, user);
        let mut cfg = RunConfig::deserialize(doc).map_err(|e| Error::Config(vec![e.to_string()]))?;
        if cfg.data.manifest.is_relative() {
            cfg.data.manifest = base_dir.join(&cfg.data.manifest);
        }
        if let Some(p) = &cfg.model.pretrained_path {
            if p.is_relative() {
                cfg.model.pretrained_path = Some(base_dir.join(p));
            }
        }
        let v = cfg.violations();
        if !v.is_empty() {
            return Err(Error::Config(v));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    /// Every problem with the configuration.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        v.extend(self.pipeline.violations());
        v.extend(self.model.violations());
        v.extend(self.loss.violations());
        v.extend(self.train.violations());
        v.extend(self.inference.violations());
        if self.train.steps == 0 {
            v.push("train.steps must be at least 1".into());
        }
        if self.pipeline.grayscale && self.model.input_channels != 3 && self.model.input_channels != 1 {
            v.push("model.input_channels must be 1 or 3 for grayscale input".into());
        }
        if self.train.validate_every > 0 && self.data.validation_split.is_none() {
            v.push("train.validate_every needs data.validation_split".into());
        }
        v
    }

    /// The resolved configuration with every default spelled out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(ser_err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::from_toml_str(text, Path::new("/base"))
    }

    const MINIMAL: &str = "[data]\nmanifest = \"m.toml\"\n[train]\nsteps = 5\n";

    #[test]
    fn defaults_fill_missing_sections() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.data.manifest, PathBuf::from("/base/m.toml"));
        assert_eq!(c.loss.lambda, 1e-4);
        assert_eq!(c.train.learning_rate, 3e-6);
        assert_eq!(c.train.batch_size, 60);
        assert_eq!(c.pipeline, PipelineProfile::aerial());
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.data.gt, GtMode::GsdAdaptive);
        assert!(c.to_toml().unwrap().contains("lambda = 0.0001"));
    }

    #[test]
    fn cctv_mode_selects_its_presets() {
        let c = parse(&format!("{MINIMAL}[pipeline]\nmode = \"cctv\"\ncrops_per_tile_or_image = 4\n")).unwrap();
        assert_eq!(c.train.batch_size, 40);
        assert!(c.pipeline.grayscale);
        assert_eq!(c.pipeline.crops_per_tile_or_image, 4);
    }

    #[test]
    fn knn_gt_mode_parses() {
        let c = parse(&format!("{MINIMAL}[data.gt]\nmode = \"knn_adaptive\"\n")).unwrap();
        assert_eq!(c.data.gt, GtMode::knn_default());
    }

    #[test]
    fn steps_have_no_default() {
        let e = parse("[data]\nmanifest = \"m.toml\"\n").unwrap_err();
        assert!(e.to_string().contains("steps"), "{e}");
    }

    #[test]
    fn all_violations_reported_together() {
        let text = format!("{MINIMAL}[loss]\nlambda = -1.0\n[inference]\ntile = 100\n[pipeline]\ncrop_size = 250\n");
        match parse(&text) {
            Err(Error::Config(v)) => assert_eq!(v.len(), 3, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(parse(&format!("{MINIMAL}[loss]\nlamda = 0.1\n")).is_err());
    }

    #[test]
    fn effective_config_round_trips() {
        let c = parse(MINIMAL).unwrap();
        let again = parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, again);
    }
}
