//! `marionette` command line: data generation, the three training stages,
//! animation and evaluation.
//!
//! Exit codes map 1:1 to error classes (see [`exit_code`]). Every successful
//! run writes a `RunManifest` next to its outputs.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use image::RgbImage;
use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autoencoder::{train_autoencoder, Encoders};
use crate::checkpoint::CheckpointBundle;
use crate::config::{load_config, Config};
use crate::datagen::{gen_dataset, list_clips, load_clip, load_png};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::nets::AnimationModel;
use crate::pipeline::{animate, AnimationRequest};
use crate::training::{prepare_clips, stage2_model, train_stage1, train_stage2, ClipImages};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;
pub const EXIT_INVALID_ARGUMENT: i32 = 5;
pub const EXIT_PRECONDITION: i32 = 6;
pub const EXIT_FORMAT: i32 = 7;

pub const DEVICE_ENV: &str = "MARIONETTE_DEVICE";
pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const LOSS_FILE: &str = "loss.csv";

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::Config(_) => EXIT_CONFIG,
        Error::InvalidArgument(_) => EXIT_INVALID_ARGUMENT,
        Error::Precondition(_) => EXIT_PRECONDITION,
        Error::Format { .. } => EXIT_FORMAT,
        Error::Tensor(_) => EXIT_INTERNAL,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "marionette",
    version,
    about = "Pose-guided character animation at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic clip dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        resolution: Option<u32>,
        #[arg(long)]
        amplitude: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the latent autoencoder and semantic encoder (stage 0).
    TrainVae {
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint, loss log and manifest.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train denoiser, ReferenceNet and Pose Guider on single frames.
    TrainStage1 {
        #[arg(long)]
        data: PathBuf,
        /// Stage-0 checkpoint (file or output directory) holding the frozen encoders.
        #[arg(long)]
        vae: PathBuf,
        /// Output directory for the checkpoint, loss log and manifest.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the temporal layers only, starting from a stage-1 checkpoint.
    TrainStage2 {
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint (file or output directory).
        #[arg(long)]
        ckpt: PathBuf,
        /// Output directory for the checkpoint, loss log and manifest.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        clip_length: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Animate a reference image with a pose sequence.
    Animate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Reference image (PNG).
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Driving poses: a clip directory or its clip.json.
        #[arg(long)]
        poses: PathBuf,
        /// Clip whose reference-frame pose sets the target skeleton size.
        #[arg(long)]
        ref_pose: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare generated frames against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Checkpoint whose semantic encoder backs the feature metrics.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "eval_report")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Serialize)]
struct Artifact {
    path: PathBuf,
    sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    command: String,
    argv: Vec<String>,
    config: serde_json::Value,
    seed: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<Artifact>,
    started_at: String,
    finished_at: String,
    crate_version: String,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Run {
    command: String,
    argv: Vec<String>,
    started_at: String,
}

impl Run {
    fn finish(
        self,
        manifest_path: &Path,
        cfg: &Config,
        seed: u64,
        inputs: Vec<PathBuf>,
        outputs: &[PathBuf],
    ) -> Result<()> {
        let outputs = outputs
            .iter()
            .map(|p| {
                Ok(Artifact {
                    path: p.clone(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let m = RunManifest {
            command: self.command,
            argv: self.argv,
            config: serde_json::to_value(cfg).expect("config serializes"),
            seed,
            inputs,
            outputs,
            started_at: self.started_at,
            finished_at: chrono::Utc::now().to_rfc3339(),
            crate_version: env!("CARGO_PKG_VERSION").into(),
        };
        if let Some(dir) = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_atomic(
            manifest_path,
            &serde_json::to_string_pretty(&m).expect("manifest serializes"),
        )
    }
}

fn check_device() -> Result<()> {
    match std::env::var(DEVICE_ENV) {
        Ok(v) if !v.eq_ignore_ascii_case("cpu") => Err(Error::Config(vec![format!(
            "{DEVICE_ENV}={v}: only \"cpu\" is supported"
        )])),
        _ => Ok(()),
    }
}

fn base_config(common: &Common) -> Result<Config> {
    match &common.config {
        Some(p) => load_config(p),
        None => Ok(Config::default()),
    }
}

/// A checkpoint argument may name the file or the training output directory
/// holding it.
fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn create_out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn load_clips(data: &Path) -> Result<(Vec<PathBuf>, Vec<ClipImages>)> {
    let dirs = list_clips(data)?;
    if dirs.is_empty() {
        return Err(Error::invalid(format!("no clips under {}", data.display())));
    }
    let clips = dirs.iter().map(|d| ClipImages::load(d)).collect::<Result<Vec<_>>>()?;
    Ok((dirs, clips))
}

fn progress(stage: &str, total: usize) -> impl FnMut(usize, f64) + '_ {
    let every = (total / 20).max(1);
    move |step, loss| {
        if step % every == 0 || step + 1 == total {
            info!("{stage} step {}/{total} loss {loss:.5}", step + 1);
        }
    }
}

fn require_stage(bundle: &CheckpointBundle, path: &Path, ok: &[u8]) -> Result<()> {
    if ok.contains(&bundle.header.stage) {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "{} is a stage-{} checkpoint, expected stage {:?}",
            path.display(),
            bundle.header.stage,
            ok
        )))
    }
}

/// Runs one command; returns the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let run = Run {
        command: argv
            .get(1)
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        argv: argv.iter().map(|s| s.to_string_lossy().into_owned()).collect(),
        started_at: chrono::Utc::now().to_rfc3339(),
    };
    match check_device().and_then(|_| dispatch(cli.command, run)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command, run: Run) -> Result<()> {
    match command {
        Command::GenData {
            out,
            clips,
            frames,
            resolution,
            amplitude,
            common,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(v) = clips {
                cfg.data.clips = v;
            }
            if let Some(v) = frames {
                cfg.data.frames = v;
            }
            if let Some(v) = resolution {
                cfg.data.resolution = v;
            }
            if let Some(v) = amplitude {
                cfg.data.motion_amplitude = v;
            }
            if let Some(v) = common.seed {
                cfg.data.seed = v;
            }
            cfg.validate()?;
            let clips = gen_dataset(&out, &cfg.data)?;
            let mut outputs = Vec::new();
            for (dir, rec) in &clips {
                outputs.push(dir.join(crate::datagen::MANIFEST_NAME));
                outputs.push(dir.join("ref.png"));
                outputs.extend(rec.frame_paths.iter().map(|p| dir.join(p)));
                outputs.extend(rec.skeleton_paths.iter().map(|p| dir.join(p)));
            }
            info!("wrote {} clips to {}", clips.len(), out.display());
            let seed = cfg.data.seed;
            run.finish(&out.join(MANIFEST_FILE), &cfg, seed, vec![], &outputs)
        }
        Command::TrainVae {
            data,
            out,
            steps,
            batch_size,
            lr,
            common,
        } => {
            let mut cfg = base_config(&common)?;
            let t = &mut cfg.autoencoder_training;
            if let Some(v) = steps {
                t.steps = v;
            }
            if let Some(v) = batch_size {
                t.batch_size = v;
            }
            if let Some(v) = lr {
                t.learning_rate = v;
            }
            if let Some(v) = common.seed {
                t.seed = v;
            }
            cfg.validate()?;
            let (dirs, clips) = load_clips(&data)?;
            let frames: Vec<RgbImage> = clips.into_iter().flat_map(|c| c.frames).collect();
            let seed = cfg.autoencoder_training.seed;
            let mut enc = Encoders::new(&cfg.autoencoder, &cfg.semantic, DType::F32, seed)?;
            let steps = cfg.autoencoder_training.steps;
            let losses = train_autoencoder(&mut enc, &frames, &cfg.autoencoder_training, progress("vae", steps))?;
            create_out_dir(&out)?;
            let ckpt = out.join(CHECKPOINT_FILE);
            CheckpointBundle::from_encoders(&enc, seed).save(&ckpt)?;
            let csv = out.join(LOSS_FILE);
            let mut text = String::from("step,loss\n");
            for (i, l) in losses.iter().enumerate() {
                text.push_str(&format!("{i},{l}\n"));
            }
            fs::write(&csv, text).map_err(|e| Error::io(&csv, e))?;
            run.finish(&out.join(MANIFEST_FILE), &cfg, seed, dirs, &[ckpt, csv])
        }
        Command::TrainStage1 {
            data,
            vae,
            out,
            steps,
            batch_size,
            lr,
            common,
        } => {
            let mut cfg = base_config(&common)?;
            let t = &mut cfg.stage1;
            if let Some(v) = steps {
                t.steps = v;
            }
            if let Some(v) = batch_size {
                t.batch_size = v;
            }
            if let Some(v) = lr {
                t.learning_rate = v;
            }
            if let Some(v) = common.seed {
                t.seed = v;
            }
            let vae = checkpoint_path(&vae);
            t.init_checkpoint = Some(vae.clone());
            t.output_checkpoint = Some(out.join(CHECKPOINT_FILE));
            cfg.validate()?;
            let frozen = CheckpointBundle::load(&vae).map_err(|e| match e {
                Error::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => {
                    Error::Precondition(format!("frozen encoders not found at {}", path.display()))
                }
                other => other,
            })?;
            require_stage(&frozen, &vae, &[0, 1, 2])?;
            let enc = frozen.encoders()?;
            let (dirs, clips) = load_clips(&data)?;
            let tensors = prepare_clips(&clips, &enc)?;
            let seed = cfg.stage1.seed;
            let schedule = cfg.schedule.build()?;
            let mut model = AnimationModel::new(&cfg.model, enc.dtype(), seed)?;
            let record = train_stage1(
                &mut model,
                &enc,
                &tensors,
                &schedule,
                &cfg.stage1,
                progress("stage1", cfg.stage1.steps),
            )?;
            create_out_dir(&out)?;
            let ckpt = out.join(CHECKPOINT_FILE);
            CheckpointBundle::from_model(&enc, &model, &cfg.schedule, 1, seed).save(&ckpt)?;
            let csv = out.join(LOSS_FILE);
            record.write_csv(&csv)?;
            let mut inputs = vec![vae];
            inputs.extend(dirs);
            run.finish(&out.join(MANIFEST_FILE), &cfg, seed, inputs, &[ckpt, csv])
        }
        Command::TrainStage2 {
            data,
            ckpt,
            out,
            steps,
            batch_size,
            lr,
            clip_length,
            common,
        } => {
            let mut cfg = base_config(&common)?;
            let t = &mut cfg.stage2;
            if let Some(v) = steps {
                t.steps = v;
            }
            if let Some(v) = batch_size {
                t.batch_size = v;
            }
            if let Some(v) = lr {
                t.learning_rate = v;
            }
            if let Some(v) = clip_length {
                t.clip_length = v;
            }
            if let Some(v) = common.seed {
                t.seed = v;
            }
            let ckpt = checkpoint_path(&ckpt);
            t.init_checkpoint = Some(ckpt.clone());
            t.output_checkpoint = Some(out.join(CHECKPOINT_FILE));
            cfg.validate()?;
            let bundle = CheckpointBundle::load(&ckpt)?;
            require_stage(&bundle, &ckpt, &[1])?;
            let enc = bundle.encoders()?;
            let mut model = stage2_model(&bundle)?;
            let (dirs, clips) = load_clips(&data)?;
            let tensors = prepare_clips(&clips, &enc)?;
            let schedule = bundle.header.schedule.build()?;
            let record = train_stage2(
                &mut model,
                &enc,
                &tensors,
                &schedule,
                &cfg.stage2,
                progress("stage2", cfg.stage2.steps),
            )?;
            let seed = bundle.header.seed;
            create_out_dir(&out)?;
            let out_ckpt = out.join(CHECKPOINT_FILE);
            CheckpointBundle::from_model(&enc, &model, &bundle.header.schedule, 2, seed).save(&out_ckpt)?;
            let csv = out.join(LOSS_FILE);
            record.write_csv(&csv)?;
            let mut inputs = vec![ckpt];
            inputs.extend(dirs);
            run.finish(
                &out.join(MANIFEST_FILE),
                &cfg,
                cfg.stage2.seed,
                inputs,
                &[out_ckpt, csv],
            )
        }
        Command::Animate {
            ckpt,
            reference,
            poses,
            ref_pose,
            out,
            steps,
            eta,
            window,
            overlap,
            common,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(v) = steps {
                cfg.sampler.num_steps = v;
            }
            if let Some(v) = eta {
                cfg.sampler.eta = v;
            }
            if let Some(v) = common.seed {
                cfg.sampler.seed = v;
            }
            if let Some(v) = window {
                cfg.window.window = v;
            }
            if let Some(v) = overlap {
                cfg.window.overlap = v;
            }
            let ckpt = checkpoint_path(&ckpt);
            let bundle = CheckpointBundle::load(&ckpt)?;
            require_stage(&bundle, &ckpt, &[1, 2])?;
            cfg.schedule = bundle.header.schedule.clone();
            cfg.validate()?;
            let enc = bundle.encoders()?;
            let model = bundle.model()?;
            let schedule = bundle.header.schedule.build()?;
            let clip_dir = |p: &Path| {
                if p.is_dir() {
                    p.to_path_buf()
                } else {
                    p.parent().map(Path::to_path_buf).unwrap_or_default()
                }
            };
            let driving = load_clip(&clip_dir(&poses))?.poses;
            let reference_pose = match &ref_pose {
                Some(p) => {
                    let rec = load_clip(&clip_dir(p))?;
                    Some(rec.poses.frames[rec.reference_index].clone())
                }
                None => None,
            };
            let request = AnimationRequest {
                reference_image: load_png(&reference)?,
                driving,
                reference_pose,
                seed: cfg.sampler.seed,
                window: cfg.window.window,
                overlap: cfg.window.overlap,
            };
            let video = animate(&request, &enc, &model, &schedule, &cfg.sampler)?;
            let outputs = video.write(&out)?;
            info!("wrote {} frames to {}", video.frames.len(), out.display());
            let mut inputs = vec![ckpt, reference, poses];
            inputs.extend(ref_pose);
            run.finish(&out.join(MANIFEST_FILE), &cfg, cfg.sampler.seed, inputs, &outputs)
        }
        Command::Eval {
            pred,
            gt,
            ckpt,
            out,
            common,
        } => {
            let cfg = base_config(&common)?;
            let p = load_videos(&pred)?;
            let g = load_videos(&gt)?;
            let ckpt = ckpt.as_deref().map(checkpoint_path);
            let enc = match &ckpt {
                Some(c) => Some(CheckpointBundle::load(c)?.encoders()?),
                None => None,
            };
            let enc_ref = match &enc {
                Some(e) => Some((&e.semantic, e.hash()?)),
                None => None,
            };
            let report = evaluate(&p, &g, enc_ref)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let path = out.join("report.json");
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
            println!(
                "ssim {:.6} psnr {:.4} perceptual_dist {} fvd_proxy {}",
                report.ssim,
                report.psnr,
                report.perceptual_dist.map_or("n/a".into(), |v| format!("{v:.6}")),
                report.fvd_proxy.map_or("n/a".into(), |v| format!("{v:.6}"))
            );
            let mut inputs = vec![pred, gt];
            inputs.extend(ckpt);
            run.finish(
                &out.join(MANIFEST_FILE),
                &cfg,
                common.seed.unwrap_or(0),
                inputs,
                &[path],
            )
        }
    }
}

fn pngs_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    v.sort();
    Ok(v)
}

/// A dataset root (`clips/*/frames`), a video directory (`frames/`), or a
/// flat directory of PNGs.
pub fn load_videos(root: &Path) -> Result<Vec<Vec<RgbImage>>> {
    let load = |dir: &Path| -> Result<Vec<RgbImage>> { pngs_in(dir)?.iter().map(|p| load_png(p)).collect() };
    if root.join("clips").is_dir() {
        list_clips(root)?.iter().map(|c| load(&c.join("frames"))).collect()
    } else if root.join("frames").is_dir() {
        Ok(vec![load(&root.join("frames"))?])
    } else {
        Ok(vec![load(root)?])
    }
}
