//! Trains all three stages on a single synthetic clip, then animates it with
//! its own reference and poses and reports PSNR / SSIM against the clip.
//!
//! Usage: `overfit [work_dir]` (default `target/overfit`). Each stage's
//! checkpoint is cached in `work_dir` and reused on the next run; delete it to
//! retrain. Step counts and learning rates can be overridden with `VAE_STEPS`,
//! `S1_STEPS`, `S2_STEPS`, `S1_LR`, `S2_LR`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use image::RgbImage;
use marionette::autoencoder::{train_autoencoder, AutoencoderConfig, AutoencoderTrainConfig, Encoders, SemanticConfig};
use marionette::checkpoint::CheckpointBundle;
use marionette::datagen::{gen_character, gen_character_motion, render_frame, render_skeleton, PoseSequence};
use marionette::diffusion::{DiffusionSchedule, SamplerConfig, ScheduleConfig};
use marionette::metrics::{psnr, ssim, FloatImage};
use marionette::nets::{AnimationModel, ModelConfig};
use marionette::pipeline::{animate, AnimationRequest};
use marionette::training::{prepare_clips, train_stage1, train_stage2, ClipImages, TrainConfig};

fn env<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

#[allow(clippy::too_many_arguments)]
fn report(
    label: &str,
    frames: &[RgbImage],
    poses: &PoseSequence,
    enc: &Encoders,
    model: &AnimationModel,
    schedule: &DiffusionSchedule,
    seed: u64,
    out: Option<&Path>,
) -> marionette::Result<()> {
    let request = AnimationRequest {
        reference_image: frames[0].clone(),
        driving: poses.clone(),
        reference_pose: None,
        seed,
        window: 8,
        overlap: 2,
    };
    let video = animate(&request, enc, model, schedule, &SamplerConfig::default())?;
    let mut per_frame = Vec::new();
    let (mut p, mut s) = (0.0, 0.0);
    for (a, b) in video.frames.iter().zip(frames) {
        let fp = psnr(&FloatImage::from_rgb(a), &FloatImage::from_rgb(b))?;
        p += fp;
        s += ssim(&FloatImage::from_rgb(a), &FloatImage::from_rgb(b))?;
        per_frame.push(format!("{fp:.1}"));
    }
    let n = frames.len() as f64;
    println!("{label} seed {seed}: psnr {:.2} ssim {:.4}", p / n, s / n);
    println!("  per-frame psnr {}", per_frame.join(" "));
    if let Some(dir) = out {
        video.write(dir)?;
    }
    Ok(())
}

fn main() -> marionette::Result<()> {
    let work = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/overfit".into()));
    std::fs::create_dir_all(&work).map_err(|e| marionette::Error::io(&work, e))?;
    let t0 = Instant::now();
    let character = gen_character(7);
    let poses = gen_character_motion(&character, 7, 24, 0.04)?;
    let frames = poses
        .frames
        .iter()
        .map(|p| render_frame(&character, p, 64))
        .collect::<marionette::Result<Vec<_>>>()?;
    let skeletons = poses
        .frames
        .iter()
        .map(|p| render_skeleton(p, 64))
        .collect::<marionette::Result<Vec<_>>>()?;
    let schedule_cfg = ScheduleConfig::default();
    let schedule = schedule_cfg.build()?;

    let vae_path = work.join("vae.safetensors");
    let enc = if vae_path.exists() {
        CheckpointBundle::load(&vae_path)?.encoders()?
    } else {
        let mut enc = Encoders::new(&AutoencoderConfig::default(), &SemanticConfig::default(), DType::F32, 1)?;
        let cfg = AutoencoderTrainConfig {
            steps: env("VAE_STEPS", 1500),
            ..Default::default()
        };
        let every = (cfg.steps / 10).max(1);
        train_autoencoder(&mut enc, &frames, &cfg, |s, l| {
            if s % every == 0 {
                println!("vae {s} {l:.5} ({:.0}s)", t0.elapsed().as_secs_f64());
            }
        })?;
        CheckpointBundle::from_encoders(&enc, 1).save(&vae_path)?;
        enc
    };
    let mse = enc.reconstruction_mse(&frames)?;
    println!("vae recon psnr {:.2} dB", -10.0 * mse.log10());

    let clips = vec![ClipImages {
        frames: frames.clone(),
        skeletons,
    }];
    let data = prepare_clips(&clips, &enc)?;

    let s1_path = work.join("stage1.safetensors");
    let mut model = if s1_path.exists() {
        CheckpointBundle::load(&s1_path)?.model()?
    } else {
        let mut model = AnimationModel::new(&ModelConfig::default(), DType::F32, 2)?;
        let cfg = TrainConfig {
            steps: env("S1_STEPS", 6000),
            learning_rate: env("S1_LR", 5e-4),
            ..TrainConfig::stage1()
        };
        let every = (cfg.steps / 20).max(1);
        train_stage1(&mut model, &enc, &data, &schedule, &cfg, |s, l| {
            if s % every == 0 {
                println!("s1 {s} {l:.5} ({:.0}s)", t0.elapsed().as_secs_f64());
            }
        })?;
        CheckpointBundle::from_model(&enc, &model, &schedule_cfg, 1, 2).save(&s1_path)?;
        model
    };
    report("stage1", &frames, &poses, &enc, &model, &schedule, 3, None)?;

    let s2_path = work.join("stage2.safetensors");
    if s2_path.exists() {
        model = CheckpointBundle::load(&s2_path)?.model()?;
    } else {
        model.init_temporal_zero()?;
        let cfg = TrainConfig {
            steps: env("S2_STEPS", 1500),
            learning_rate: env("S2_LR", TrainConfig::stage2().learning_rate),
            ..TrainConfig::stage2()
        };
        let every = (cfg.steps / 10).max(1);
        train_stage2(&mut model, &enc, &data, &schedule, &cfg, |s, l| {
            if s % every == 0 {
                println!("s2 {s} {l:.5} ({:.0}s)", t0.elapsed().as_secs_f64());
            }
        })?;
        CheckpointBundle::from_model(&enc, &model, &schedule_cfg, 2, 2).save(&s2_path)?;
    }
    for seed in [3, 4] {
        let out = (seed == 3).then(|| work.join("video"));
        report("stage2", &frames, &poses, &enc, &model, &schedule, seed, out.as_deref())?;
    }
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
    Ok(())
}
