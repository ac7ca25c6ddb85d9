//! Two-stage training over the synthetic dataset and a finite-difference
//! gradient checker.
//!
//! Stage 1 trains the denoiser, ReferenceNet and Pose Guider on single frames,
//! each paired with a reference frame drawn uniformly from the same clip.
//! Stage 2 freezes all of that and trains only the temporal layers on short
//! consecutive runs of frames. The frozen encoders are never touched; their
//! outputs are precomputed once per clip.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::Encoders;
use crate::checkpoint::CheckpointBundle;
use crate::datagen::{load_clip, load_png};
use crate::diffusion::{training_loss, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::imaging::images_to_batch;
use crate::nets::{AnimationModel, POSE_GUIDER_PREFIX, REFERENCE_PREFIX, TEMPORAL_PREFIX, UNET_PREFIX};

pub const PAPER_LEARNING_RATE: f64 = 1e-5;
pub const PAPER_RESOLUTION: u32 = 768;
pub const PAPER_STAGE1_BATCH: usize = 64;
pub const PAPER_STAGE2_BATCH: usize = 4;
pub const PAPER_STAGE1_STEPS: usize = 30_000;
pub const PAPER_STAGE2_STEPS: usize = 10_000;
pub const PAPER_CLIP_LENGTH: usize = 24;

/// Learning rate used when none is configured. From-scratch training at this
/// scale barely moves at `PAPER_LEARNING_RATE` within a desk budget.
pub const DEFAULT_LEARNING_RATE: f64 = 2e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Frames per training sample in stage 2.
    pub clip_length: usize,
    pub resolution: u32,
    pub seed: u64,
    pub init_checkpoint: Option<PathBuf>,
    pub output_checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            steps: 2000,
            batch_size: 8,
            learning_rate: DEFAULT_LEARNING_RATE,
            clip_length: 1,
            resolution: 64,
            seed: 0,
            init_checkpoint: None,
            output_checkpoint: None,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: 2,
            steps: 1000,
            batch_size: 2,
            clip_length: 8,
            ..Self::stage1()
        }
    }

    pub fn validate(&self, errs: &mut Vec<String>, prefix: &str) {
        if self.stage != 1 && self.stage != 2 {
            errs.push(format!("{prefix}.stage must be 1 or 2, got {}", self.stage));
        }
        if self.batch_size == 0 {
            errs.push(format!("{prefix}.batch_size must be > 0"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            errs.push(format!("{prefix}.learning_rate must be a positive number"));
        }
        if self.stage == 2 && self.clip_length < 2 {
            errs.push(format!("{prefix}.clip_length must be >= 2 in stage 2"));
        }
        if self.resolution < 16 || !self.resolution.is_multiple_of(8) {
            errs.push(format!("{prefix}.resolution must be a multiple of 8 and >= 16"));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub step: usize,
    pub loss: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub entries: Vec<LossEntry>,
}

impl LossRecord {
    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }

    /// Mean loss over the first and last `k` entries.
    pub fn window_means(&self, k: usize) -> Option<(f64, f64)> {
        let l = self.losses();
        if l.is_empty() || k == 0 {
            return None;
        }
        let k = k.min(l.len());
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&l[..k]), mean(&l[l.len() - k..])))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,elapsed_s\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{:.3}\n", e.step, e.loss, e.elapsed_s));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Frames and skeleton renders of one clip, in memory.
#[derive(Debug, Clone)]
pub struct ClipImages {
    pub frames: Vec<RgbImage>,
    pub skeletons: Vec<RgbImage>,
}

impl ClipImages {
    pub fn load(dir: &Path) -> Result<Self> {
        let rec = load_clip(dir)?;
        let frames = rec
            .frame_paths
            .iter()
            .map(|p| load_png(&dir.join(p)))
            .collect::<Result<Vec<_>>>()?;
        let skeletons = rec
            .skeleton_paths
            .iter()
            .map(|p| load_png(&dir.join(p)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { frames, skeletons })
    }
}

/// Frozen-encoder outputs of one clip.
#[derive(Debug, Clone)]
pub struct ClipTensors {
    /// `(n, c_lat, h, w)` scaled latents.
    pub latents: Tensor,
    /// `(n, n_tok, d_emb)` semantic tokens of every frame (any may serve as reference).
    pub tokens: Tensor,
    /// `(n, 3, H, W)` skeleton renders in [0, 1].
    pub skeletons: Tensor,
}

impl ClipTensors {
    pub fn len(&self) -> usize {
        self.latents.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn prepare_clips(clips: &[ClipImages], encoders: &Encoders) -> Result<Vec<ClipTensors>> {
    clips
        .iter()
        .map(|c| {
            if c.frames.is_empty() || c.frames.len() != c.skeletons.len() {
                return Err(Error::invalid("clip needs matching, nonempty frames and skeletons"));
            }
            let mut lat = Vec::new();
            let mut tok = Vec::new();
            for chunk in c.frames.chunks(8) {
                lat.push(encoders.encode_images(chunk)?);
                tok.push(encoders.semantic_tokens(chunk)?);
            }
            Ok(ClipTensors {
                latents: Tensor::cat(&lat, 0)?,
                tokens: Tensor::cat(&tok, 0)?,
                skeletons: images_to_batch(&c.skeletons, encoders.dtype(), encoders.device())?,
            })
        })
        .collect()
}

fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?)
}

fn check_data(model: &AnimationModel, encoders: &Encoders, data: &[ClipTensors], resolution: u32) -> Result<()> {
    if data.is_empty() || data.iter().any(ClipTensors::is_empty) {
        return Err(Error::invalid("training needs at least one nonempty clip"));
    }
    for clip in data {
        let (_, _, h, w) = clip.skeletons.dims4()?;
        if (h, w) != (resolution as usize, resolution as usize) {
            return Err(Error::invalid(format!(
                "clip resolution {w}x{h} differs from the configured {resolution}x{resolution}"
            )));
        }
    }
    if encoders.vae.config.latent_channels != model.config.unet.latent_channels
        || encoders.semantic.config.d_emb != model.config.unet.token_dim
        || encoders.dtype() != model.dtype()
    {
        return Err(Error::Precondition(
            "frozen encoders do not match the model configuration".into(),
        ));
    }
    Ok(())
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Stage 1: joint training of denoiser, ReferenceNet and Pose Guider on single
/// frames. `on_step(step, loss)` is called after every update.
pub fn train_stage1(
    model: &mut AnimationModel,
    encoders: &Encoders,
    data: &[ClipTensors],
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<LossRecord> {
    let mut errs = Vec::new();
    cfg.validate(&mut errs, "stage1");
    if cfg.stage != 1 {
        errs.push("stage1.stage must be 1".into());
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    check_data(model, encoders, data, cfg.resolution)?;
    let vars = model
        .store
        .vars_with_prefixes(&[UNET_PREFIX, REFERENCE_PREFIX, POSE_GUIDER_PREFIX]);
    let mut opt = adam(vars, cfg.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut record = LossRecord::default();
    let start = Instant::now();
    let lat_c = model.config.unet.latent_channels;
    for step in 0..cfg.steps {
        let mut z0 = Vec::new();
        let mut refs = Vec::new();
        let mut toks = Vec::new();
        let mut sks = Vec::new();
        for _ in 0..cfg.batch_size {
            let c = rng.random_range(0..data.len());
            let clip = &data[c];
            let i = rng.random_range(0..clip.len());
            let r = rng.random_range(0..clip.len());
            z0.push(clip.latents.narrow(0, i, 1)?);
            refs.push(clip.latents.narrow(0, r, 1)?);
            toks.push(clip.tokens.narrow(0, r, 1)?);
            sks.push(clip.skeletons.narrow(0, i, 1)?);
        }
        let z0 = Tensor::cat(&z0, 0)?.unsqueeze(1)?;
        let refs = Tensor::cat(&refs, 0)?;
        let toks = Tensor::cat(&toks, 0)?;
        let sks = Tensor::cat(&sks, 0)?;
        let (b, _, _, h, w) = z0.dims5()?;
        let model_ref: &AnimationModel = model;
        let loss = training_loss(&z0, schedule, &mut rng, |noisy, ts| {
            let cache = model_ref.reference_forward(&refs, &toks)?;
            let pose = model_ref.pose_features(&sks)?.reshape((b, 1, lat_c, h, w))?;
            model_ref.denoise_forward(noisy, ts, Some(&cache), &toks, &pose, false)
        })?;
        opt.backward_step(&loss)?;
        let l = scalar(&loss)?;
        if !l.is_finite() {
            return Err(Error::Precondition(format!("loss diverged at step {step}")));
        }
        record.entries.push(LossEntry {
            step,
            loss: l,
            elapsed_s: start.elapsed().as_secs_f64(),
        });
        on_step(step, l);
    }
    Ok(record)
}

/// Rebuilds a stage-1 model from its checkpoint and adds zero-initialized
/// temporal layers.
pub fn stage2_model(bundle: &CheckpointBundle) -> Result<AnimationModel> {
    if bundle.header.stage != 1 {
        return Err(Error::invalid(format!(
            "stage 2 starts from a stage-1 checkpoint, got stage {}",
            bundle.header.stage
        )));
    }
    let mut model = bundle.model()?;
    model.init_temporal_zero()?;
    Ok(model)
}

/// Stage 2: only the temporal layers are updated, on runs of
/// `cfg.clip_length` consecutive frames.
pub fn train_stage2(
    model: &mut AnimationModel,
    encoders: &Encoders,
    data: &[ClipTensors],
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<LossRecord> {
    let mut errs = Vec::new();
    cfg.validate(&mut errs, "stage2");
    if cfg.stage != 2 {
        errs.push("stage2.stage must be 2".into());
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    check_data(model, encoders, data, cfg.resolution)?;
    if model.temporal.is_none() {
        return Err(Error::invalid("stage 2 needs a model with temporal layers"));
    }
    let len = cfg.clip_length;
    if data.iter().any(|c| c.len() < len) {
        return Err(Error::invalid(format!("every clip needs at least {len} frames")));
    }
    let mut opt = adam(model.store.vars_with_prefixes(&[TEMPORAL_PREFIX]), cfg.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut record = LossRecord::default();
    let start = Instant::now();
    let lat_c = model.config.unet.latent_channels;
    for step in 0..cfg.steps {
        let mut z0 = Vec::new();
        let mut refs = Vec::new();
        let mut toks = Vec::new();
        let mut sks = Vec::new();
        for _ in 0..cfg.batch_size {
            let clip = &data[rng.random_range(0..data.len())];
            let s = rng.random_range(0..=clip.len() - len);
            let r = rng.random_range(0..clip.len());
            z0.push(clip.latents.narrow(0, s, len)?.unsqueeze(0)?);
            refs.push(clip.latents.narrow(0, r, 1)?);
            toks.push(clip.tokens.narrow(0, r, 1)?);
            sks.push(clip.skeletons.narrow(0, s, len)?);
        }
        let z0 = Tensor::cat(&z0, 0)?;
        let refs = Tensor::cat(&refs, 0)?;
        let toks = Tensor::cat(&toks, 0)?;
        let sks = Tensor::cat(&sks, 0)?;
        let (b, t, _, h, w) = z0.dims5()?;
        let model_ref: &AnimationModel = model;
        // Frozen branches carry no gradient.
        let cache = model_ref.reference_forward(&refs, &toks)?.detach();
        let pose = model_ref.pose_features(&sks)?.detach().reshape((b, t, lat_c, h, w))?;
        let loss = training_loss(&z0, schedule, &mut rng, |noisy, ts| {
            model_ref.denoise_forward(noisy, ts, Some(&cache), &toks, &pose, true)
        })?;
        opt.backward_step(&loss)?;
        let l = scalar(&loss)?;
        if !l.is_finite() {
            return Err(Error::Precondition(format!("loss diverged at step {step}")));
        }
        record.entries.push(LossEntry {
            step,
            loss: l,
            elapsed_s: start.elapsed().as_secs_f64(),
        });
        on_step(step, l);
    }
    Ok(record)
}

pub mod gradcheck;
