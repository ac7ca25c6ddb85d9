//! Checkpoint archive: a safetensors file whose `__metadata__` carries the JSON
//! header under the key `marionette`.
//!
//! Tensors keep their in-memory dtype, so `load(save(b))` is bitwise exact.
//! Names are the parameter-store names (`vae.*`, `semantic.*`, `unet.*`,
//! `reference.*`, `pose_guider.*`, `temporal.*`).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::autoencoder::{AutoencoderConfig, Encoders, SemanticConfig, SEMANTIC_PREFIX, VAE_PREFIX};
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::layers::{hash_tensors, ParamStore};
use crate::nets::{AnimationModel, ModelConfig, TEMPORAL_PREFIX};

pub const FORMAT_NAME: &str = "marionette-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_KEY: &str = "marionette";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    /// 0: encoders only; 1: image model; 2: image model + temporal layers.
    pub stage: u8,
    pub autoencoder: AutoencoderConfig,
    pub semantic: SemanticConfig,
    pub model: Option<ModelConfig>,
    pub schedule: ScheduleConfig,
    pub dtype: String,
    pub seed: u64,
    pub crate_version: String,
}

impl CheckpointHeader {
    pub fn new(stage: u8, encoders_cfg: (&AutoencoderConfig, &SemanticConfig), dtype: DType, seed: u64) -> Self {
        Self {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            stage,
            autoencoder: encoders_cfg.0.clone(),
            semantic: encoders_cfg.1.clone(),
            model: None,
            schedule: ScheduleConfig::default(),
            dtype: dtype_name(dtype).into(),
            seed,
            crate_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

fn dtype_name(dtype: DType) -> &'static str {
    match dtype {
        DType::F64 => "f64",
        _ => "f32",
    }
}

fn parse_dtype(name: &str) -> Option<DType> {
    match name {
        "f32" => Some(DType::F32),
        "f64" => Some(DType::F64),
        _ => None,
    }
}

#[derive(Debug, Clone)]
pub struct CheckpointBundle {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

impl CheckpointBundle {
    /// Stage-0 bundle holding only the frozen encoders.
    pub fn from_encoders(enc: &Encoders, seed: u64) -> Self {
        let header = CheckpointHeader::new(0, (&enc.vae.config, &enc.semantic.config), enc.dtype(), seed);
        Self {
            header,
            tensors: enc.store.snapshot(""),
        }
    }

    /// Full bundle: encoders plus the animation model at `stage`.
    pub fn from_model(enc: &Encoders, model: &AnimationModel, schedule: &ScheduleConfig, stage: u8, seed: u64) -> Self {
        let mut header = CheckpointHeader::new(stage, (&enc.vae.config, &enc.semantic.config), model.dtype(), seed);
        header.model = Some(model.config.clone());
        header.schedule = schedule.clone();
        let mut tensors = enc.store.snapshot("");
        tensors.extend(model.store.snapshot(""));
        Self { header, tensors }
    }

    pub fn dtype(&self) -> Result<DType> {
        parse_dtype(&self.header.dtype).ok_or_else(|| Error::invalid(format!("unknown dtype {}", self.header.dtype)))
    }

    /// Hash over every tensor whose name starts with one of `prefixes`.
    pub fn hash_prefixes(&self, prefixes: &[&str]) -> Result<String> {
        hash_tensors(
            self.tensors
                .iter()
                .filter(|(n, _)| prefixes.iter().any(|p| has_prefix(n, p)))
                .map(|(n, t)| (n.as_str(), t)),
        )
    }

    /// Hash over every tensor not under any of `prefixes`.
    pub fn hash_excluding(&self, prefixes: &[&str]) -> Result<String> {
        hash_tensors(
            self.tensors
                .iter()
                .filter(|(n, _)| !prefixes.iter().any(|p| has_prefix(n, p)))
                .map(|(n, t)| (n.as_str(), t)),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_string(&self.header).expect("header serializes");
        let meta: HashMap<String, String> = [(HEADER_KEY.to_string(), header)].into();
        let bytes = safetensors::serialize(self.tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(meta))
            .map_err(|e| Error::format(path, e))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::format(path, e))?;
        let header_text = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY))
            .ok_or_else(|| Error::format(path, "missing checkpoint header"))?;
        let header: CheckpointHeader = serde_json::from_str(header_text).map_err(|e| Error::format(path, e))?;
        if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint {} v{}", header.format, header.version),
            ));
        }
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)
            .map_err(|e| Error::format(path, e))?
            .into_iter()
            .collect();
        Ok(Self { header, tensors })
    }

    /// Rebuilds the frozen encoders and checks every tensor name and shape.
    pub fn encoders(&self) -> Result<Encoders> {
        let enc = Encoders::new(
            &self.header.autoencoder,
            &self.header.semantic,
            self.dtype()?,
            self.header.seed,
        )?;
        load_into(&enc.store, &self.tensors, &[VAE_PREFIX, SEMANTIC_PREFIX])?;
        Ok(enc)
    }

    /// Rebuilds the animation model (stage >= 1).
    pub fn model(&self) -> Result<AnimationModel> {
        let cfg = match (&self.header.model, self.header.stage) {
            (Some(cfg), 1 | 2) => cfg,
            _ => {
                return Err(Error::invalid(format!(
                    "checkpoint at stage {} carries no animation model",
                    self.header.stage
                )))
            }
        };
        let mut model = AnimationModel::new(cfg, self.dtype()?, self.header.seed)?;
        if self.header.stage == 2 {
            model.init_temporal_zero()?;
        }
        load_into(
            &model.store,
            &self.tensors,
            &[
                crate::nets::UNET_PREFIX,
                crate::nets::REFERENCE_PREFIX,
                crate::nets::POSE_GUIDER_PREFIX,
                TEMPORAL_PREFIX,
            ],
        )?;
        Ok(model)
    }
}

fn has_prefix(name: &str, prefix: &str) -> bool {
    prefix.is_empty() || name == prefix || name.starts_with(&format!("{prefix}."))
}

/// Assigns every store variable from `tensors`; the set of names under
/// `prefixes` must match the store exactly.
fn load_into(store: &ParamStore, tensors: &BTreeMap<String, Tensor>, prefixes: &[&str]) -> Result<()> {
    let want: Vec<&str> = store.names().collect();
    let have: Vec<&str> = tensors
        .keys()
        .map(String::as_str)
        .filter(|n| prefixes.iter().any(|p| has_prefix(n, p)))
        .collect();
    if want != have {
        let missing: Vec<_> = want.iter().filter(|n| !have.contains(n)).take(3).collect();
        let extra: Vec<_> = have.iter().filter(|n| !want.contains(n)).take(3).collect();
        return Err(Error::invalid(format!(
            "checkpoint does not match config (missing {missing:?}, unexpected {extra:?})"
        )));
    }
    for name in want {
        store.assign(name, &tensors[name])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise() {
        let enc = Encoders::new(&AutoencoderConfig::default(), &SemanticConfig::default(), DType::F32, 3).unwrap();
        let model = AnimationModel::new(&ModelConfig::default(), DType::F32, 4).unwrap();
        let b = CheckpointBundle::from_model(&enc, &model, &ScheduleConfig::default(), 1, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        b.save(&path).unwrap();
        let l = CheckpointBundle::load(&path).unwrap();
        assert_eq!(l.header, b.header);
        assert_eq!(l.hash_prefixes(&[""]).unwrap(), b.hash_prefixes(&[""]).unwrap());
        assert_eq!(
            l.model().unwrap().store.hash_prefix("").unwrap(),
            model.store.hash_prefix("").unwrap()
        );
        assert_eq!(l.encoders().unwrap().hash().unwrap(), enc.hash().unwrap());
    }

    #[test]
    fn missing_file_is_io_error() {
        match CheckpointBundle::load(Path::new("/nonexistent/ck.safetensors")) {
            Err(Error::Io { path, .. }) => assert!(path.ends_with("ck.safetensors")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stage0_has_no_model() {
        let enc = Encoders::new(&AutoencoderConfig::default(), &SemanticConfig::default(), DType::F32, 3).unwrap();
        let b = CheckpointBundle::from_encoders(&enc, 3);
        assert!(matches!(b.model(), Err(Error::InvalidArgument(_))));
    }
}
