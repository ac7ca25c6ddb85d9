//! Denoising UNet, ReferenceNet, reference feature cache and Pose Guider.
//!
//! The ReferenceNet is a second instance of the UNet body with its own weights.
//! It runs once on the clean reference latent (timestep 0) and records the
//! normalized spatial-attention input of every Res-Trans block. The denoiser
//! fuses entry `i` of that cache at its own block `i`; both networks walk their
//! blocks in the same order (down levels, middle, up levels), so the shapes
//! line up by construction.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::{ReferenceFeature, ResBlock, ResTransBlock, TemporalLayer};
use crate::error::{Error, Result};
use crate::layers::{sinusoidal_embedding, Conv2d, GroupNorm, Init, Linear, Padding, ParamStore, Scope};

pub const UNET_PREFIX: &str = "unet";
pub const REFERENCE_PREFIX: &str = "reference";
pub const POSE_GUIDER_PREFIX: &str = "pose_guider";
pub const TEMPORAL_PREFIX: &str = "temporal";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    /// Number of resolution levels; must equal `channel_mult.len()`.
    pub levels: usize,
    /// Levels whose blocks carry attention (Res-Trans blocks); others are
    /// plain residual blocks.
    pub attention_levels: Vec<usize>,
    pub heads: usize,
    pub latent_channels: usize,
    pub temb_dim: usize,
    /// Width of the semantic tokens consumed by cross-attention.
    pub token_dim: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_mult: vec![1, 2],
            levels: 2,
            attention_levels: vec![0, 1],
            heads: 4,
            latent_channels: 4,
            temb_dim: 128,
            token_dim: 64,
            groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self, errs: &mut Vec<String>, prefix: &str) {
        if self.levels < 1 {
            errs.push(format!("{prefix}.levels must be >= 1"));
        }
        if self.channel_mult.len() != self.levels {
            errs.push(format!("{prefix}.channel_mult must have one entry per level"));
        }
        if self.channel_mult.contains(&0) {
            errs.push(format!("{prefix}.channel_mult entries must be positive"));
        }
        if self.attention_levels.iter().any(|&l| l >= self.levels) {
            errs.push(format!("{prefix}.attention_levels must index existing levels"));
        }
        if self.base_channels == 0 || self.heads == 0 {
            errs.push(format!("{prefix}.base_channels and heads must be positive"));
        } else {
            for &m in &self.channel_mult {
                let c = self.base_channels * m;
                if !c.is_multiple_of(self.heads) {
                    errs.push(format!("{prefix}.heads must divide every level width ({c})"));
                }
                if self.groups == 0 || !c.is_multiple_of(self.groups.min(c)) {
                    errs.push(format!("{prefix}.groups must divide every level width ({c})"));
                }
            }
        }
        if self.latent_channels == 0 || self.temb_dim < 2 || self.token_dim == 0 {
            errs.push(format!(
                "{prefix}: latent_channels, temb_dim, token_dim must be positive"
            ));
        }
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    /// `(level, channels)` of every fusion site in block order.
    pub fn fusion_sites(&self) -> Vec<(usize, usize)> {
        let has = |l: usize| self.attention_levels.contains(&l);
        let mut sites = Vec::new();
        for l in 0..self.levels {
            if has(l) {
                sites.push((l, self.level_channels(l)));
            }
        }
        let deepest = self.levels - 1;
        if has(deepest) {
            sites.push((deepest, self.level_channels(deepest)));
        }
        for l in (0..self.levels).rev() {
            if has(l) {
                sites.push((l, self.level_channels(l)));
            }
        }
        sites
    }

    /// Spatial size must halve cleanly at every level below the top.
    pub fn check_latent_size(&self, h: usize, w: usize) -> Result<()> {
        let div = 1 << (self.levels - 1);
        if !h.is_multiple_of(div) || !w.is_multiple_of(div) || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "latent size {h}x{w} must be divisible by {div}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Block {
    Trans(ResTransBlock),
    Res(ResBlock),
}

impl Block {
    fn new(s: &mut Scope, cfg: &UNetConfig, level: usize, c_in: usize, c_out: usize) -> Result<Self> {
        if cfg.attention_levels.contains(&level) {
            Ok(Block::Trans(ResTransBlock::new(
                s,
                c_in,
                c_out,
                cfg.temb_dim,
                cfg.token_dim,
                cfg.heads,
                cfg.groups,
            )?))
        } else {
            Ok(Block::Res(ResBlock::new(
                &mut s.pp("res"),
                c_in,
                c_out,
                cfg.temb_dim,
                cfg.groups,
            )?))
        }
    }
}

/// Per-forward inputs shared by every block.
struct BlockContext<'a> {
    b: usize,
    t: usize,
    temb: &'a Tensor,
    tokens: &'a Tensor,
    cache: Option<&'a ReferenceCache>,
    temporal: Option<&'a [TemporalLayer]>,
    capture: bool,
}

struct SiteCursor {
    next: usize,
    captured: Vec<ReferenceFeature>,
}

impl BlockContext<'_> {
    fn run(&self, block: &Block, x: &Tensor, cursor: &mut SiteCursor) -> Result<Tensor> {
        match block {
            Block::Res(r) => r.forward(x, self.temb),
            Block::Trans(tb) => {
                let site = cursor.next;
                cursor.next += 1;
                let reference = match self.cache {
                    Some(c) => Some(
                        c.features
                            .get(site)
                            .ok_or_else(|| Error::invalid(format!("reference cache has no entry for site {site}")))?,
                    ),
                    None => None,
                };
                let temporal = match self.temporal {
                    Some(layers) => Some(
                        layers
                            .get(site)
                            .ok_or_else(|| Error::invalid(format!("no temporal layer for site {site}")))?,
                    ),
                    None => None,
                };
                let out = tb.forward(
                    x,
                    self.b,
                    self.t,
                    self.temb,
                    reference,
                    self.tokens,
                    temporal,
                    self.capture,
                )?;
                if let Some(f) = out.captured {
                    cursor.captured.push(f);
                }
                Ok(out.hidden)
            }
        }
    }
}

/// UNet body shared by the denoiser and the ReferenceNet.
#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UNetConfig,
    conv_in: Conv2d,
    time_1: Linear,
    time_2: Linear,
    down: Vec<Block>,
    downsample: Vec<Conv2d>,
    mid: Block,
    up: Vec<Block>,
    upsample: Vec<Conv2d>,
    head: Option<(GroupNorm, Conv2d)>,
}

impl UNet {
    /// `with_head = false` omits the output projection (ReferenceNet).
    pub fn new(s: &mut Scope, cfg: &UNetConfig, with_head: bool) -> Result<Self> {
        let mut errs = Vec::new();
        cfg.validate(&mut errs, "unet");
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let lv = cfg.levels;
        let ch = |l: usize| cfg.level_channels(l);
        let conv_in = Conv2d::same3(&mut s.pp("conv_in"), cfg.latent_channels, cfg.base_channels)?;
        let time_1 = Linear::new(&mut s.pp("time_1"), cfg.temb_dim, cfg.temb_dim, true, Init::FanIn(1.0))?;
        let time_2 = Linear::new(&mut s.pp("time_2"), cfg.temb_dim, cfg.temb_dim, true, Init::FanIn(1.0))?;
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut prev = cfg.base_channels;
        for l in 0..lv {
            down.push(Block::new(&mut s.pp(format!("down.{l}")), cfg, l, prev, ch(l))?);
            prev = ch(l);
            if l + 1 < lv {
                downsample.push(Conv2d::new(
                    &mut s.pp(format!("downsample.{l}")),
                    prev,
                    prev,
                    3,
                    2,
                    Padding::Same(1),
                    Init::FanIn(1.0),
                )?);
            }
        }
        let mid = Block::new(&mut s.pp("mid"), cfg, lv - 1, ch(lv - 1), ch(lv - 1))?;
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        let mut prev = ch(lv - 1);
        for l in (0..lv).rev() {
            up.push(Block::new(&mut s.pp(format!("up.{l}")), cfg, l, prev + ch(l), ch(l))?);
            prev = ch(l);
            if l > 0 {
                upsample.push(Conv2d::same3(&mut s.pp(format!("upsample.{l}")), prev, prev)?);
            }
        }
        let head = if with_head {
            Some((
                GroupNorm::new(&mut s.pp("norm_out"), cfg.groups.min(ch(0)), ch(0))?,
                Conv2d::same3(&mut s.pp("conv_out"), ch(0), cfg.latent_channels)?,
            ))
        } else {
            None
        };
        Ok(Self {
            config: cfg.clone(),
            conv_in,
            time_1,
            time_2,
            down,
            downsample,
            mid,
            up,
            upsample,
            head,
        })
    }

    /// Timestep embedding, `(n, temb_dim)` for `n` timesteps.
    pub fn time_embedding(&self, timesteps: &[f64], dtype: DType, device: &Device) -> Result<Tensor> {
        let e = sinusoidal_embedding(timesteps, self.config.temb_dim, 10_000.0, dtype, device)?;
        self.time_2.forward(&self.time_1.forward(&e)?.silu()?)
    }

    /// Runs the body on `x (b*t, c_lat, h, w)`; returns the head output (if
    /// any) and captured features.
    fn run(&self, x: &Tensor, ctx: &BlockContext) -> Result<(Option<Tensor>, Vec<ReferenceFeature>)> {
        let mut cursor = SiteCursor {
            next: 0,
            captured: Vec::new(),
        };
        let lv = self.config.levels;
        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(lv);
        for l in 0..lv {
            h = ctx.run(&self.down[l], &h, &mut cursor)?;
            skips.push(h.clone());
            if l + 1 < lv {
                h = self.downsample[l].forward(&h)?;
            }
        }
        h = ctx.run(&self.mid, &h, &mut cursor)?;
        for (i, l) in (0..lv).rev().enumerate() {
            h = Tensor::cat(&[&h, &skips[l]], 1)?;
            h = ctx.run(&self.up[i], &h, &mut cursor)?;
            if l > 0 {
                let (_, _, hh, ww) = h.dims4()?;
                h = self.upsample[i].forward(&h.upsample_nearest2d(hh * 2, ww * 2)?)?;
            }
        }
        let out = match &self.head {
            Some((norm, conv)) => Some(conv.forward(&norm.forward(&h)?.silu()?)?),
            None => None,
        };
        Ok((out, cursor.captured))
    }
}

/// One reference feature per fusion site, computed once per reference image.
#[derive(Debug, Clone)]
pub struct ReferenceCache {
    pub features: Vec<ReferenceFeature>,
}

impl ReferenceCache {
    /// Bitwise comparison helper.
    pub fn to_vecs(&self) -> Result<Vec<Vec<f64>>> {
        self.features
            .iter()
            .map(|f| Ok(f.0.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?))
            .collect()
    }

    pub fn detach(&self) -> Self {
        Self {
            features: self.features.iter().map(|f| ReferenceFeature(f.0.detach())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseGuiderConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub init_std: f64,
}

impl Default for PoseGuiderConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 128],
            // Three halvings match the autoencoder's factor of 8.
            strides: vec![2, 2, 2, 1],
            kernel: 4,
            init_std: 0.02,
        }
    }
}

impl PoseGuiderConfig {
    pub fn validate(&self, errs: &mut Vec<String>, prefix: &str) {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            errs.push(format!(
                "{prefix}: channels and strides must be nonempty and equal length"
            ));
        }
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            errs.push(format!("{prefix}.strides entries must be 1 or 2"));
        }
        if self.kernel != 4 {
            errs.push(format!("{prefix}.kernel must be 4"));
        }
        if self.init_std.is_nan() || self.init_std <= 0.0 {
            errs.push(format!("{prefix}.init_std must be > 0"));
        }
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    /// Weights plus biases of every conv, including the zero projection.
    pub fn parameter_count(&self, out_channels: usize) -> usize {
        let k2 = self.kernel * self.kernel;
        let mut prev = 3;
        let mut total = 0;
        for &c in &self.channels {
            total += k2 * prev * c + c;
            prev = c;
        }
        total + 9 * prev * out_channels + out_channels
    }
}

/// Four 4x4 convs lifting a skeleton render to latent resolution, closed by a
/// zero-initialized projection so the guider starts as an exact no-op.
#[derive(Debug, Clone)]
pub struct PoseGuider {
    pub config: PoseGuiderConfig,
    convs: Vec<Conv2d>,
    proj: Conv2d,
}

impl PoseGuider {
    pub fn new(s: &mut Scope, cfg: &PoseGuiderConfig, out_channels: usize) -> Result<Self> {
        let mut errs = Vec::new();
        cfg.validate(&mut errs, "pose_guider");
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut convs = Vec::new();
        let mut prev = 3;
        for (i, (&c, &stride)) in cfg.channels.iter().zip(&cfg.strides).enumerate() {
            let padding = if stride == 2 {
                Padding::Same(1)
            } else {
                Padding::Split { before: 1, after: 2 }
            };
            convs.push(Conv2d::new(
                &mut s.pp(format!("conv.{i}")),
                prev,
                c,
                cfg.kernel,
                stride,
                padding,
                Init::Normal(cfg.init_std),
            )?);
            prev = c;
        }
        let proj = Conv2d::new(
            &mut s.pp("proj"),
            prev,
            out_channels,
            3,
            1,
            Padding::Same(1),
            Init::Zeros,
        )?;
        Ok(Self {
            config: cfg.clone(),
            convs,
            proj,
        })
    }

    pub fn num_params(&self) -> usize {
        self.convs.iter().map(Conv2d::num_params).sum::<usize>() + self.proj.num_params()
    }

    /// `(n, 3, H, W)` skeleton renders in [0, 1] to `(n, c_lat, H/s, W/s)`.
    pub fn forward(&self, skeletons: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = skeletons.dims4()?;
        let s = self.config.total_stride();
        if c != 3 || h % s != 0 || w % s != 0 {
            return Err(Error::invalid(format!(
                "skeleton batch {c}x{h}x{w} must be RGB with sides divisible by {s}"
            )));
        }
        let mut x = skeletons.clone();
        for conv in &self.convs {
            x = conv.forward(&x)?.silu()?;
        }
        self.proj.forward(&x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub pose_guider: PoseGuiderConfig,
}

impl ModelConfig {
    pub fn validate(&self, errs: &mut Vec<String>, prefix: &str) {
        self.unet.validate(errs, &format!("{prefix}.unet"));
        self.pose_guider.validate(errs, &format!("{prefix}.pose_guider"));
    }
}

/// Denoising UNet + ReferenceNet + Pose Guider (+ temporal layers once added),
/// all parameters in one store.
pub struct AnimationModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub unet: UNet,
    pub reference: UNet,
    pub pose_guider: PoseGuider,
    pub temporal: Option<Vec<TemporalLayer>>,
    reference_calls: AtomicUsize,
}

impl std::fmt::Debug for AnimationModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AnimationModel")
            .field("config", &self.config)
            .field("store", &self.store)
            .field("temporal", &self.temporal.is_some())
            .finish()
    }
}

impl AnimationModel {
    pub fn new(config: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        let mut errs = Vec::new();
        config.validate(&mut errs, "model");
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut store = ParamStore::new(dtype, seed);
        let unet = UNet::new(&mut store.scope(UNET_PREFIX), &config.unet, true)?;
        let reference = UNet::new(&mut store.scope(REFERENCE_PREFIX), &config.unet, false)?;
        let pose_guider = PoseGuider::new(
            &mut store.scope(POSE_GUIDER_PREFIX),
            &config.pose_guider,
            config.unet.latent_channels,
        )?;
        Ok(Self {
            config: config.clone(),
            store,
            unet,
            reference,
            pose_guider,
            temporal: None,
            reference_calls: AtomicUsize::new(0),
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Adds temporal layers (one per fusion site) with zeroed output
    /// projections, or re-zeroes existing ones. Nothing else changes.
    pub fn init_temporal_zero(&mut self) -> Result<()> {
        if self.temporal.is_none() {
            let sites = self.config.unet.fusion_sites();
            let heads = self.config.unet.heads;
            let mut layers = Vec::with_capacity(sites.len());
            for (i, (_, c)) in sites.iter().enumerate() {
                layers.push(TemporalLayer::new(
                    &mut self.store.scope(&format!("{TEMPORAL_PREFIX}.{i}")),
                    *c,
                    heads,
                )?);
            }
            self.temporal = Some(layers);
        } else {
            let names: Vec<String> = self
                .store
                .names()
                .filter(|n| n.starts_with(TEMPORAL_PREFIX) && n.contains(".to_out."))
                .map(String::from)
                .collect();
            for name in names {
                let var = self.store.get(&name).expect("listed");
                let zeros = var.as_tensor().zeros_like()?;
                self.store.assign(&name, &zeros)?;
            }
        }
        Ok(())
    }

    pub fn reference_calls(&self) -> usize {
        self.reference_calls.load(Ordering::SeqCst)
    }

    pub fn reset_reference_calls(&self) {
        self.reference_calls.store(0, Ordering::SeqCst);
    }

    /// ReferenceNet pass over `(b, c_lat, h, w)` clean reference latents with
    /// tokens `(b, n, d)`, at timestep 0.
    pub fn reference_forward(&self, ref_latent: &Tensor, tokens: &Tensor) -> Result<ReferenceCache> {
        let (b, c, h, w) = ref_latent.dims4()?;
        if c != self.config.unet.latent_channels {
            return Err(Error::invalid(format!(
                "reference latent has {c} channels, expected {}",
                self.config.unet.latent_channels
            )));
        }
        self.config.unet.check_latent_size(h, w)?;
        self.reference_calls.fetch_add(1, Ordering::SeqCst);
        let temb = self
            .reference
            .time_embedding(&vec![0.0; b], self.dtype(), self.device())?;
        let ctx = BlockContext {
            b,
            t: 1,
            temb: &temb,
            tokens,
            cache: None,
            temporal: None,
            capture: true,
        };
        let (_, features) = self.reference.run(ref_latent, &ctx)?;
        Ok(ReferenceCache { features })
    }

    /// Pose Guider over `(n, 3, H, W)` skeleton renders.
    pub fn pose_features(&self, skeletons: &Tensor) -> Result<Tensor> {
        self.pose_guider.forward(skeletons)
    }

    /// Predicts the noise in `noisy (b, t, c, h, w)`.
    ///
    /// `timesteps` has one entry per batch element, `pose_feat` matches
    /// `noisy` and is added to it before the first block. Without a cache the
    /// spatial layers fall back to plain self-attention (semantic tokens only).
    pub fn denoise_forward(
        &self,
        noisy: &Tensor,
        timesteps: &[f64],
        cache: Option<&ReferenceCache>,
        tokens: &Tensor,
        pose_feat: &Tensor,
        use_temporal: bool,
    ) -> Result<Tensor> {
        let (b, t, c, h, w) = noisy.dims5()?;
        if pose_feat.dims() != noisy.dims() {
            return Err(Error::invalid(format!(
                "pose features {:?} do not match noisy latents {:?}",
                pose_feat.dims(),
                noisy.dims()
            )));
        }
        if c != self.config.unet.latent_channels {
            return Err(Error::invalid(format!("latent has {c} channels")));
        }
        if timesteps.len() != b {
            return Err(Error::invalid("need one timestep per batch element"));
        }
        if tokens.dim(0)? != b {
            return Err(Error::invalid("token batch does not match latent batch"));
        }
        self.config.unet.check_latent_size(h, w)?;
        if let Some(cache) = cache {
            let sites = self.config.unet.fusion_sites();
            if cache.features.len() != sites.len() {
                return Err(Error::invalid(format!(
                    "cache has {} entries, model has {} fusion sites",
                    cache.features.len(),
                    sites.len()
                )));
            }
        }
        let temporal = if use_temporal {
            Some(
                self.temporal
                    .as_deref()
                    .ok_or_else(|| Error::Precondition("model has no temporal layers".into()))?,
            )
        } else {
            None
        };
        let x = (noisy + pose_feat)?.reshape((b * t, c, h, w))?;
        let per_frame: Vec<f64> = timesteps.iter().flat_map(|&ts| std::iter::repeat_n(ts, t)).collect();
        let temb = self.unet.time_embedding(&per_frame, self.dtype(), self.device())?;
        let ctx = BlockContext {
            b,
            t,
            temb: &temb,
            tokens,
            cache,
            temporal,
            capture: false,
        };
        let (out, _) = self.unet.run(&x, &ctx)?;
        Ok(out.expect("denoiser has a head").reshape((b, t, c, h, w))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::randn_seeded;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            unet: UNetConfig {
                base_channels: 8,
                channel_mult: vec![1, 2],
                levels: 2,
                attention_levels: vec![0, 1],
                heads: 2,
                latent_channels: 4,
                temb_dim: 16,
                token_dim: 12,
                groups: 4,
            },
            pose_guider: PoseGuiderConfig::default(),
        }
    }

    fn rand(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        randn_seeded(rng, dims, DType::F32, &Device::Cpu).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    }

    #[test]
    fn pose_guider_zero_at_init_and_aligned() {
        let m = AnimationModel::new(&tiny(), DType::F32, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sk = rand(&mut rng, &[2, 3, 64, 64]).abs().unwrap();
        let out = m.pose_features(&sk).unwrap();
        assert_eq!(out.dims(), &[2, 4, 8, 8]);
        assert!(flat(&out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pose_guider_rejects_indivisible_input() {
        let m = AnimationModel::new(&tiny(), DType::F32, 0).unwrap();
        let sk = Tensor::zeros((1, 3, 60, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(m.pose_features(&sk), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn pose_guider_parameter_count_matches_formula() {
        let m = AnimationModel::new(&tiny(), DType::F32, 0).unwrap();
        // 4x4 convs 3->16->32->64->128 plus a 3x3 128->4 projection, with biases.
        let by_hand =
            (16 * 3 * 16 + 16) + (16 * 16 * 32 + 32) + (16 * 32 * 64 + 64) + (16 * 64 * 128 + 128) + (9 * 128 * 4 + 4);
        assert_eq!(m.pose_guider.num_params(), by_hand);
        assert_eq!(m.store.num_elements_with_prefix(POSE_GUIDER_PREFIX), by_hand);
        assert_eq!(m.config.pose_guider.parameter_count(4), by_hand);
    }

    #[test]
    fn cache_shapes_follow_levels() {
        let m = AnimationModel::new(&tiny(), DType::F32, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = rand(&mut rng, &[1, 4, 8, 8]);
        let tok = rand(&mut rng, &[1, 3, 12]);
        let cache = m.reference_forward(&z, &tok).unwrap();
        let sites = m.config.unet.fusion_sites();
        assert_eq!(cache.features.len(), sites.len());
        for (f, (level, c)) in cache.features.iter().zip(sites) {
            assert_eq!(f.0.dims(), &[1, 8 >> level, 8 >> level, c]);
        }
        let again = m.reference_forward(&z, &tok).unwrap();
        assert_eq!(cache.to_vecs().unwrap(), again.to_vecs().unwrap());
        assert_eq!(m.reference_calls(), 2);
    }

    #[test]
    fn denoise_shape_and_pose_invariance_at_init() {
        let m = AnimationModel::new(&tiny(), DType::F32, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noisy = rand(&mut rng, &[1, 4, 4, 8, 8]);
        let tok = rand(&mut rng, &[1, 3, 12]);
        let cache = m.reference_forward(&rand(&mut rng, &[1, 4, 8, 8]), &tok).unwrap();
        let sk_a = rand(&mut rng, &[4, 3, 64, 64]);
        let sk_b = rand(&mut rng, &[4, 3, 64, 64]);
        let pa = m.pose_features(&sk_a).unwrap().reshape((1, 4, 4, 8, 8)).unwrap();
        let pb = m.pose_features(&sk_b).unwrap().reshape((1, 4, 4, 8, 8)).unwrap();
        let ya = m
            .denoise_forward(&noisy, &[500.0], Some(&cache), &tok, &pa, false)
            .unwrap();
        let yb = m
            .denoise_forward(&noisy, &[500.0], Some(&cache), &tok, &pb, false)
            .unwrap();
        assert_eq!(ya.dims(), &[1, 4, 4, 8, 8]);
        assert_eq!(flat(&ya), flat(&yb));
    }

    #[test]
    fn image_path_treats_identical_frames_identically() {
        let m = AnimationModel::new(&tiny(), DType::F32, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frame = rand(&mut rng, &[1, 1, 4, 8, 8]);
        let noisy = frame.broadcast_as((1, 3, 4, 8, 8)).unwrap().contiguous().unwrap();
        let tok = rand(&mut rng, &[1, 3, 12]);
        let zeros = noisy.zeros_like().unwrap();
        let y = m.denoise_forward(&noisy, &[10.0], None, &tok, &zeros, false).unwrap();
        let f0 = flat(&y.narrow(1, 0, 1).unwrap());
        for i in 1..3 {
            assert_eq!(f0, flat(&y.narrow(1, i, 1).unwrap()));
        }
    }

    #[test]
    fn temporal_zero_init_keeps_outputs_and_other_weights() {
        let mut m = AnimationModel::new(&tiny(), DType::F32, 0).unwrap();
        let before = m.store.hash_prefix("").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noisy = rand(&mut rng, &[1, 3, 4, 8, 8]);
        let tok = rand(&mut rng, &[1, 3, 12]);
        let cache = m.reference_forward(&rand(&mut rng, &[1, 4, 8, 8]), &tok).unwrap();
        let pose = rand(&mut rng, &[1, 3, 4, 8, 8]);
        let y1 = m
            .denoise_forward(&noisy, &[300.0], Some(&cache), &tok, &pose, false)
            .unwrap();
        m.init_temporal_zero().unwrap();
        let y2 = m
            .denoise_forward(&noisy, &[300.0], Some(&cache), &tok, &pose, true)
            .unwrap();
        assert_eq!(flat(&y1), flat(&y2));
        for p in [UNET_PREFIX, REFERENCE_PREFIX, POSE_GUIDER_PREFIX] {
            assert!(m.store.num_elements_with_prefix(p) > 0);
        }
        let non_temporal: Vec<_> = m
            .store
            .iter()
            .filter(|(n, _)| !n.starts_with(TEMPORAL_PREFIX))
            .map(|(n, v)| (n.to_string(), v.as_tensor().clone()))
            .collect();
        let h = crate::layers::hash_tensors(non_temporal.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        assert_eq!(h, before);
    }

    #[test]
    fn cache_mismatch_rejected() {
        let m = AnimationModel::new(&tiny(), DType::F32, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tok = rand(&mut rng, &[1, 3, 12]);
        let mut cache = m.reference_forward(&rand(&mut rng, &[1, 4, 8, 8]), &tok).unwrap();
        cache.features.pop();
        let noisy = rand(&mut rng, &[1, 1, 4, 8, 8]);
        let r = m.denoise_forward(&noisy, &[1.0], Some(&cache), &tok, &noisy.zeros_like().unwrap(), false);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }
}
