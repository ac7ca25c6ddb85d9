//! Versioned JSON run configuration.
//!
//! Every section is optional; missing keys take their defaults, unknown keys
//! are rejected, and all invariants are checked before any work starts. Errors
//! from every section are collected into one [`Error::Config`].

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::autoencoder::{AutoencoderConfig, AutoencoderTrainConfig, SemanticConfig};
use crate::datagen::DatasetConfig;
use crate::diffusion::{SamplerConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::nets::ModelConfig;
use crate::pipeline::WindowConfig;
use crate::training::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub schema_version: u32,
    pub data: DatasetConfig,
    pub autoencoder: AutoencoderConfig,
    pub semantic: SemanticConfig,
    pub autoencoder_training: AutoencoderTrainConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub sampler: SamplerConfig,
    pub window: WindowConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            data: DatasetConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            semantic: SemanticConfig::default(),
            autoencoder_training: AutoencoderTrainConfig::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            stage1: TrainConfig::stage1(),
            stage2: TrainConfig::stage2(),
            sampler: SamplerConfig::default(),
            window: WindowConfig::default(),
        }
    }
}

/// Recursively overlays `user` onto `base`; non-object values replace.
fn merge(base: &mut Value, user: &Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

fn section<T: Serialize + DeserializeOwned>(name: &str, default: T, user: Option<&Value>, errs: &mut Vec<String>) -> T {
    let Some(user) = user else { return default };
    if !user.is_object() {
        errs.push(format!("{name} must be an object"));
        return default;
    }
    let mut merged = serde_json::to_value(&default).expect("defaults serialize");
    merge(&mut merged, user);
    match serde_json::from_value(merged) {
        Ok(v) => v,
        Err(e) => {
            errs.push(format!("{name}: {e}"));
            default
        }
    }
}

impl Config {
    /// Parses a JSON value, filling defaults and validating every section.
    pub fn from_value(v: &Value) -> Result<Self> {
        let empty = Map::new();
        let obj = match v {
            Value::Object(o) => o,
            Value::Null => &empty,
            _ => return Err(Error::Config(vec!["config root must be a JSON object".into()])),
        };
        let d = Config::default();
        let mut errs = Vec::new();
        let known = [
            "schema_version",
            "data",
            "autoencoder",
            "semantic",
            "autoencoder_training",
            "model",
            "schedule",
            "stage1",
            "stage2",
            "sampler",
            "window",
        ];
        for k in obj.keys() {
            if !known.contains(&k.as_str()) {
                errs.push(format!("{k}: unknown section"));
            }
        }
        let schema_version = match obj.get("schema_version") {
            None => SCHEMA_VERSION,
            Some(v) => match v.as_u64() {
                Some(n) if n == SCHEMA_VERSION as u64 => SCHEMA_VERSION,
                _ => {
                    errs.push(format!("schema_version must be {SCHEMA_VERSION}"));
                    SCHEMA_VERSION
                }
            },
        };
        let cfg = Config {
            schema_version,
            data: section("data", d.data, obj.get("data"), &mut errs),
            autoencoder: section("autoencoder", d.autoencoder, obj.get("autoencoder"), &mut errs),
            semantic: section("semantic", d.semantic, obj.get("semantic"), &mut errs),
            autoencoder_training: section(
                "autoencoder_training",
                d.autoencoder_training,
                obj.get("autoencoder_training"),
                &mut errs,
            ),
            model: section("model", d.model, obj.get("model"), &mut errs),
            schedule: section("schedule", d.schedule, obj.get("schedule"), &mut errs),
            stage1: section("stage1", d.stage1, obj.get("stage1"), &mut errs),
            stage2: section("stage2", d.stage2, obj.get("stage2"), &mut errs),
            sampler: section("sampler", d.sampler, obj.get("sampler"), &mut errs),
            window: section("window", d.window, obj.get("window"), &mut errs),
        };
        cfg.validate_into(&mut errs);
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    fn validate_into(&self, errs: &mut Vec<String>) {
        if self.data.clips == 0 || self.data.frames == 0 {
            errs.push("data: clips and frames must be > 0".into());
        }
        if self.data.resolution < 16 {
            errs.push("data.resolution must be >= 16".into());
        }
        if self.data.motion_amplitude.is_nan() || self.data.motion_amplitude < 0.0 {
            errs.push("data.motion_amplitude must be >= 0".into());
        }
        self.autoencoder.validate(errs, "autoencoder");
        self.semantic.validate(errs, "semantic");
        self.autoencoder_training.validate(errs, "autoencoder_training");
        self.model.validate(errs, "model");
        self.schedule.validate(errs, "schedule");
        self.stage1.validate(errs, "stage1");
        if self.stage1.stage != 1 {
            errs.push(format!("stage1.stage must be 1, got {}", self.stage1.stage));
        }
        self.stage2.validate(errs, "stage2");
        if self.stage2.stage != 2 {
            errs.push(format!("stage2.stage must be 2, got {}", self.stage2.stage));
        }
        self.sampler.validate(errs, "sampler", self.schedule.num_timesteps);
        self.window.validate(errs, "window");
        if self.model.unet.latent_channels != self.autoencoder.latent_channels {
            errs.push("model.unet.latent_channels must equal autoencoder.latent_channels".into());
        }
        if self.model.unet.token_dim != self.semantic.d_emb {
            errs.push("model.unet.token_dim must equal semantic.d_emb".into());
        }
        if self.model.pose_guider.total_stride() != self.autoencoder.factor() {
            errs.push("model.pose_guider.strides must multiply to the autoencoder factor".into());
        }
    }

    /// Re-checks invariants after flag overrides.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        self.validate_into(&mut errs);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Canonical pretty JSON with every field present.
    pub fn dump(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

pub fn parse_config(text: &str) -> Result<Config> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("invalid JSON: {e}")]))?;
    Config::from_value(&v)
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_fills_defaults() {
        let c = parse_config("{}").unwrap();
        assert_eq!(c.sampler.num_steps, 20);
        assert_eq!(c, Config::default());
    }

    #[test]
    fn partial_section_keeps_other_defaults() {
        let c = parse_config(r#"{"stage2": {"steps": 5}}"#).unwrap();
        assert_eq!(c.stage2.steps, 5);
        assert_eq!(c.stage2.clip_length, 8);
        assert_eq!(c.stage2.stage, 2);
    }

    #[test]
    fn every_violation_listed() {
        let err = parse_config(r#"{"stage1": {"stage": 3}, "sampler": {"num_steps": 0}, "bogus": 1}"#).unwrap_err();
        match err {
            Error::Config(list) => {
                let joined = list.join("\n");
                assert!(joined.contains("stage1.stage"), "{joined}");
                assert!(joined.contains("sampler.num_steps"), "{joined}");
                assert!(joined.contains("bogus"), "{joined}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_field_in_section_rejected() {
        assert!(matches!(
            parse_config(r#"{"sampler": {"stepz": 3}}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dump_roundtrip_is_canonical() {
        let c = parse_config(r#"{"data": {"clips": 3}}"#).unwrap();
        let text = c.dump();
        let again = parse_config(&text).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.dump(), text);
    }
}
