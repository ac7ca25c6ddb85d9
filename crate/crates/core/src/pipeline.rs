//! Pose rescaling, long-video windowing and reference-conditioned generation.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::autoencoder::Encoders;
use crate::datagen::{derive_seed, render_skeleton, PoseFrame, PoseSequence, BONES};
use crate::diffusion::{ddim_sample_from, initial_noise, DiffusionSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::imaging::{images_to_batch, tensor_to_image};
use crate::nets::AnimationModel;

/// Scales every frame about its own pelvis by
/// `s = height(reference) / height(driving frame 0)`.
///
/// The pelvis trajectory is kept; only root-relative offsets change.
pub fn rescale_pose(driving: &PoseSequence, ref_pose: &PoseFrame) -> Result<PoseSequence> {
    let first = driving
        .frames
        .first()
        .ok_or_else(|| Error::invalid("driving sequence is empty"))?;
    if ref_pose.joints.len() != first.joints.len() {
        return Err(Error::invalid("reference and driving topologies differ"));
    }
    let (h_ref, h_drv) = (ref_pose.height(), first.height());
    if !(h_ref > 0.0 && h_drv > 0.0) || !h_ref.is_finite() || !h_drv.is_finite() {
        return Err(Error::invalid(format!(
            "degenerate skeleton height (reference {h_ref}, driving {h_drv})"
        )));
    }
    let s = h_ref / h_drv;
    let frames = driving
        .frames
        .iter()
        .map(|f| {
            let r = f.root();
            PoseFrame::new(
                f.joints
                    .iter()
                    .map(|j| [r[0] + s * (j[0] - r[0]), r[1] + s * (j[1] - r[1])])
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PoseSequence {
        frames,
        fps: driving.fps,
    })
}

/// Mean bone length ratio helper used by callers checking rescaling.
pub fn bone_length_ratios(a: &PoseFrame, b: &PoseFrame) -> Vec<f64> {
    (0..BONES.len()).map(|i| a.bone_length(i) / b.bone_length(i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowWeight {
    pub window: usize,
    pub weight: f64,
}

/// Windows `[start, end)` over `num_frames` frames and per-frame blend weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationPlan {
    pub num_frames: usize,
    pub window: usize,
    pub overlap: usize,
    pub windows: Vec<(usize, usize)>,
    pub weights: Vec<Vec<WindowWeight>>,
}

impl AggregationPlan {
    pub fn is_single_window(&self) -> bool {
        self.windows.len() == 1
    }
}

/// Windows at stride `W - V`, the last one right-aligned to end at `n`.
///
/// Each window's raw weight ramps linearly over `V + 1` frames at edges shared
/// with a neighbour. Per frame, weights are normalized and the last covering
/// window takes `1 - (sum of the others)`, so the sequential sum is exactly 1.
pub fn plan_windows(n: usize, window: usize, overlap: usize) -> Result<AggregationPlan> {
    if n < 1 {
        return Err(Error::invalid("cannot plan windows for zero frames"));
    }
    if window < 2 || overlap >= window {
        return Err(Error::invalid(format!(
            "window {window} / overlap {overlap} must satisfy W >= 2 and 0 <= V < W"
        )));
    }
    let windows: Vec<(usize, usize)> = if n <= window {
        vec![(0, n)]
    } else {
        let stride = window - overlap;
        let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|s| s + window < n).collect();
        starts.push(n - window);
        starts.dedup();
        starts.into_iter().map(|s| (s, s + window)).collect()
    };
    let last = windows.len() - 1;
    let ramp = (overlap + 1) as f64;
    let raw = |k: usize, i: usize| -> f64 {
        let (s, e) = windows[k];
        let mut w: f64 = 1.0;
        if k > 0 {
            w = w.min((i - s + 1) as f64 / ramp);
        }
        if k < last {
            w = w.min((e - i) as f64 / ramp);
        }
        w
    };
    let weights = (0..n)
        .map(|i| {
            let covering: Vec<usize> = (0..windows.len())
                .filter(|&k| windows[k].0 <= i && i < windows[k].1)
                .collect();
            let total: f64 = covering.iter().map(|&k| raw(k, i)).sum();
            let mut out = Vec::with_capacity(covering.len());
            let mut acc = 0.0;
            for (j, &k) in covering.iter().enumerate() {
                let weight = if j + 1 == covering.len() {
                    1.0 - acc
                } else {
                    raw(k, i) / total
                };
                acc += weight;
                out.push(WindowWeight { window: k, weight });
            }
            out
        })
        .collect();
    Ok(AggregationPlan {
        num_frames: n,
        window,
        overlap,
        windows,
        weights,
    })
}

/// Blends per-window latents `(1, len_k, c, h, w)` into `(1, n, c, h, w)`.
///
/// A frame covered by one window gets weight exactly 1, so its latent is
/// copied unchanged.
pub fn blend_latents(plan: &AggregationPlan, window_latents: &[Tensor]) -> Result<Tensor> {
    if window_latents.len() != plan.windows.len() {
        return Err(Error::invalid("one latent block per window required"));
    }
    if plan.is_single_window() {
        return Ok(window_latents[0].clone());
    }
    let frames = plan
        .weights
        .iter()
        .enumerate()
        .map(|(i, ws)| {
            let mut acc: Option<Tensor> = None;
            for ww in ws {
                let start = plan.windows[ww.window].0;
                let f = (window_latents[ww.window].narrow(1, i - start, 1)? * ww.weight)?;
                acc = Some(match acc {
                    None => f,
                    Some(a) => (a + f)?,
                });
            }
            Ok(acc.expect("every frame is covered"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&frames, 1)?)
}

#[derive(Debug, Clone)]
pub struct AnimationRequest {
    pub reference_image: RgbImage,
    pub driving: PoseSequence,
    /// When present, driving poses are rescaled to this skeleton's height.
    pub reference_pose: Option<PoseFrame>,
    pub seed: u64,
    pub window: usize,
    pub overlap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub window: usize,
    pub overlap: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { window: 8, overlap: 2 }
    }
}

impl WindowConfig {
    pub fn validate(&self, errs: &mut Vec<String>, prefix: &str) {
        if self.window < 2 || self.overlap >= self.window {
            errs.push(format!("{prefix}: need window >= 2 and overlap < window"));
        }
    }
}

#[derive(Debug, Clone)]
pub struct VideoResult {
    pub frames: Vec<RgbImage>,
    /// Blended latents `(1, n, c, h, w)` before decoding.
    pub latents: Tensor,
    pub plan: AggregationPlan,
    pub seed: u64,
    pub sampler: SamplerConfig,
}

#[derive(Serialize)]
struct ResultJson<'a> {
    seed: u64,
    num_frames: usize,
    sampler: &'a SamplerConfig,
    plan: PlanJson<'a>,
    provenance: &'a [Vec<WindowWeight>],
    frames: Vec<PathBuf>,
}

#[derive(Serialize)]
struct PlanJson<'a> {
    window: usize,
    overlap: usize,
    windows: &'a [(usize, usize)],
}

impl VideoResult {
    /// Writes `frames/%05d.png` and `result.json` under `out_dir`; returns the
    /// written paths.
    pub fn write(&self, out_dir: &Path) -> Result<Vec<PathBuf>> {
        let frames_dir = out_dir.join("frames");
        fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
        let mut written = Vec::new();
        let mut rel = Vec::new();
        for (i, f) in self.frames.iter().enumerate() {
            let r = PathBuf::from(format!("frames/{i:05}.png"));
            let p = out_dir.join(&r);
            f.save_with_format(&p, image::ImageFormat::Png).map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(&p, io),
                other => Error::format(&p, other),
            })?;
            written.push(p);
            rel.push(r);
        }
        let json = ResultJson {
            seed: self.seed,
            num_frames: self.frames.len(),
            sampler: &self.sampler,
            plan: PlanJson {
                window: self.plan.window,
                overlap: self.plan.overlap,
                windows: &self.plan.windows,
            },
            provenance: &self.plan.weights,
            frames: rel,
        };
        let p = out_dir.join("result.json");
        let text = serde_json::to_string_pretty(&json).expect("result serializes");
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(written)
    }
}

/// Skeleton renders for a pose sequence as a `(n, 3, r, r)` batch.
pub fn skeleton_batch(
    poses: &PoseSequence,
    resolution: u32,
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    let imgs = poses
        .frames
        .iter()
        .map(|p| render_skeleton(p, resolution))
        .collect::<Result<Vec<_>>>()?;
    images_to_batch(&imgs, dtype, device)
}

/// Generates one frame per driving pose.
///
/// The reference is encoded once and the ReferenceNet runs once; every window
/// reuses that cache. Window `k` starts from noise seeded with
/// `derive_seed(seed, k)`.
pub fn animate(
    request: &AnimationRequest,
    encoders: &Encoders,
    model: &AnimationModel,
    schedule: &DiffusionSchedule,
    sampler: &SamplerConfig,
) -> Result<VideoResult> {
    let (w, h) = request.reference_image.dimensions();
    let f = encoders.vae.factor() as u32;
    if w != h || w % f != 0 || w < 16 {
        return Err(Error::invalid(format!(
            "reference image {w}x{h} must be square, at least 16 px and divisible by {f}"
        )));
    }
    if request.driving.is_empty() {
        return Err(Error::invalid("driving pose sequence is empty"));
    }
    if encoders.dtype() != model.dtype() {
        return Err(Error::invalid("encoder and model dtypes differ"));
    }
    let lat_c = encoders.vae.config.latent_channels;
    if lat_c != model.config.unet.latent_channels {
        return Err(Error::invalid(format!(
            "checkpoint mismatch: autoencoder has {lat_c} latent channels, model expects {}",
            model.config.unet.latent_channels
        )));
    }
    if encoders.semantic.config.d_emb != model.config.unet.token_dim {
        return Err(Error::invalid(
            "checkpoint mismatch: semantic width differs from model token width",
        ));
    }
    let poses = match &request.reference_pose {
        Some(rp) => rescale_pose(&request.driving, rp)?,
        None => request.driving.clone(),
    };
    let n = poses.len();
    let plan = plan_windows(n, request.window, request.overlap)?;
    let (dtype, device) = (model.dtype(), model.device().clone());

    let ref_latent = encoders.encode_images(std::slice::from_ref(&request.reference_image))?;
    let tokens = encoders.semantic_tokens(std::slice::from_ref(&request.reference_image))?;
    let cache = model.reference_forward(&ref_latent, &tokens)?;
    let (_, _, lh, lw) = ref_latent.dims4()?;
    let skeletons = skeleton_batch(&poses, w, dtype, &device)?;
    let use_temporal = model.temporal.is_some();

    let mut window_latents = Vec::with_capacity(plan.windows.len());
    for (k, &(s, e)) in plan.windows.iter().enumerate() {
        let len = e - s;
        let pose = model
            .pose_features(&skeletons.narrow(0, s, len)?)?
            .reshape((1, len, lat_c, lh, lw))?;
        let z_t = initial_noise(derive_seed(request.seed, k as u64), &[1, len, lat_c, lh, lw], &device)?;
        let cfg = SamplerConfig {
            seed: derive_seed(request.seed, k as u64),
            ..sampler.clone()
        };
        let z0 = ddim_sample_from(
            |z, t| model.denoise_forward(z, &[t], Some(&cache), &tokens, &pose, use_temporal),
            &cfg,
            schedule,
            &z_t,
            dtype,
        )?;
        window_latents.push(z0.detach());
    }
    let latents = blend_latents(&plan, &window_latents)?;
    let flat = latents.reshape((n, lat_c, lh, lw))?;
    let mut frames = Vec::with_capacity(n);
    for i in (0..n).step_by(8) {
        let chunk = encoders.vae.decode(&flat.narrow(0, i, 8.min(n - i))?)?;
        for j in 0..chunk.dim(0)? {
            frames.push(tensor_to_image(&chunk.get(j)?)?);
        }
    }
    Ok(VideoResult {
        frames,
        latents,
        plan,
        seed: request.seed,
        sampler: sampler.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gen_pose_sequence;

    #[test]
    fn spec_windows() {
        let p = plan_windows(48, 24, 8).unwrap();
        assert_eq!(p.windows, vec![(0, 24), (16, 40), (24, 48)]);
        for ws in &p.weights {
            let sum: f64 = ws.iter().map(|w| w.weight).sum();
            assert_eq!(sum, 1.0);
            assert!(ws.iter().all(|w| w.weight > 0.0));
        }
        let single = plan_windows(8, 24, 8).unwrap();
        assert_eq!(single.windows, vec![(0, 8)]);
        let exact = plan_windows(24, 24, 8).unwrap();
        assert_eq!(exact.windows, vec![(0, 24)]);
        assert!(exact.weights.iter().all(|w| w.len() == 1 && w[0].weight == 1.0));
    }

    #[test]
    fn bad_plans_rejected() {
        assert!(plan_windows(0, 8, 2).is_err());
        assert!(plan_windows(10, 1, 0).is_err());
        assert!(plan_windows(10, 8, 8).is_err());
    }

    #[test]
    fn rescale_identity_and_halving() {
        let seq = gen_pose_sequence(3, 4, 0.02).unwrap();
        let same = rescale_pose(&seq, &seq.frames[0]).unwrap();
        for (a, b) in same.frames.iter().zip(&seq.frames) {
            for (ja, jb) in a.joints.iter().zip(&b.joints) {
                assert!((ja[0] - jb[0]).abs() < 1e-15 && (ja[1] - jb[1]).abs() < 1e-15);
            }
        }
        // A reference half as tall halves every bone.
        let r = seq.frames[0].root();
        let half = PoseFrame::new(
            seq.frames[0]
                .joints
                .iter()
                .map(|j| [r[0] + 0.5 * (j[0] - r[0]), r[1] + 0.5 * (j[1] - r[1])])
                .collect(),
        )
        .unwrap();
        let out = rescale_pose(&seq, &half).unwrap();
        for (o, i) in out.frames.iter().zip(&seq.frames) {
            for ratio in bone_length_ratios(o, i) {
                assert!((ratio - 0.5).abs() < 1e-12);
            }
        }
        assert_eq!(out.frames[0].root(), seq.frames[0].root());
    }

    #[test]
    fn degenerate_height_rejected() {
        let seq = gen_pose_sequence(3, 2, 0.0).unwrap();
        let flat = PoseFrame::new(vec![[0.5, 0.5]; 13]).unwrap();
        assert!(rescale_pose(&seq, &flat).is_err());
    }
}
