//! Latent autoencoder (downsample factor 8) and the small semantic image
//! encoder that supplies cross-attention tokens.
//!
//! Both are trained together once on sprite frames and then frozen: every
//! later stage only ever reads them.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use image::RgbImage;
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::images_to_batch;
use crate::layers::{randn_seeded, Conv2d, Init, LayerNorm, Linear, Padding, ParamStore, Scope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    /// Width of the full-resolution stem.
    pub base_channels: usize,
    /// Output width of each stride-2 stage; the stage count sets the factor.
    pub stage_channels: Vec<usize>,
    pub latent_channels: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            stage_channels: vec![32, 64, 64],
            latent_channels: 4,
        }
    }
}

impl AutoencoderConfig {
    pub fn factor(&self) -> usize {
        1 << self.stage_channels.len()
    }

    pub fn validate(&self, errs: &mut Vec<String>, prefix: &str) {
        if self.base_channels == 0 {
            errs.push(format!("{prefix}.base_channels must be > 0"));
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            errs.push(format!("{prefix}.stage_channels must be nonempty and positive"));
        }
        if self.latent_channels == 0 {
            errs.push(format!("{prefix}.latent_channels must be > 0"));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemanticConfig {
    /// Every input is resized to this square resolution first.
    pub input_resolution: usize,
    pub channels: Vec<usize>,
    pub n_tokens: usize,
    pub d_emb: usize,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            input_resolution: 32,
            channels: vec![16, 32],
            n_tokens: 8,
            d_emb: 64,
        }
    }
}

impl SemanticConfig {
    fn grid(&self) -> usize {
        self.input_resolution >> (self.channels.len() + 1)
    }

    pub fn validate(&self, errs: &mut Vec<String>, prefix: &str) {
        let stages = self.channels.len() + 1;
        if self.input_resolution == 0 || !self.input_resolution.is_multiple_of(1 << stages) {
            errs.push(format!(
                "{prefix}.input_resolution must be a positive multiple of {}",
                1 << stages
            ));
        }
        if self.n_tokens == 0 {
            errs.push(format!("{prefix}.n_tokens must be > 0"));
        }
        if self.d_emb == 0 {
            errs.push(format!("{prefix}.d_emb must be > 0"));
        }
    }
}

/// `x + conv(silu(conv(silu(x))))`
#[derive(Debug, Clone)]
struct PlainResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl PlainResBlock {
    fn new(s: &mut Scope, c: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::same3(&mut s.pp("conv1"), c, c)?,
            conv2: Conv2d::same3(&mut s.pp("conv2"), c, c)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&x.silu()?)?;
        let h = self.conv2.forward(&h.silu()?)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub config: AutoencoderConfig,
    enc_in: Conv2d,
    enc_down: Vec<Conv2d>,
    enc_mid: PlainResBlock,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_mid: PlainResBlock,
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
    /// Multiplies posterior means so diffusion latents have roughly unit scale.
    latent_scale: Tensor,
}

/// Posterior parameters of the encoder, both `(n, c_lat, h/f, w/f)`, unscaled.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub mean: Tensor,
    pub logvar: Tensor,
}

impl Autoencoder {
    pub fn new(s: &mut Scope, config: &AutoencoderConfig) -> Result<Self> {
        let c0 = config.base_channels;
        let deepest = *config.stage_channels.last().expect("validated nonempty");
        let enc_in = Conv2d::same3(&mut s.pp("enc_in"), 3, c0)?;
        let mut enc_down = Vec::new();
        let mut prev = c0;
        for (i, &c) in config.stage_channels.iter().enumerate() {
            enc_down.push(Conv2d::new(
                &mut s.pp(format!("enc_down.{i}")),
                prev,
                c,
                3,
                2,
                Padding::Same(1),
                Init::FanIn(1.0),
            )?);
            prev = c;
        }
        let enc_mid = PlainResBlock::new(&mut s.pp("enc_mid"), deepest)?;
        let enc_out = Conv2d::same3(&mut s.pp("enc_out"), deepest, 2 * config.latent_channels)?;
        let dec_in = Conv2d::same3(&mut s.pp("dec_in"), config.latent_channels, deepest)?;
        let dec_mid = PlainResBlock::new(&mut s.pp("dec_mid"), deepest)?;
        let mut dec_up = Vec::new();
        let mut prev = deepest;
        let n = config.stage_channels.len();
        for i in (0..n).rev() {
            let out = if i == 0 { c0 } else { config.stage_channels[i - 1] };
            dec_up.push(Conv2d::same3(&mut s.pp(format!("dec_up.{}", n - 1 - i)), prev, out)?);
            prev = out;
        }
        let dec_out = Conv2d::same3(&mut s.pp("dec_out"), c0, 3)?;
        let latent_scale = s.param("latent_scale", &[1], Init::Ones)?;
        Ok(Self {
            config: config.clone(),
            enc_in,
            enc_down,
            enc_mid,
            enc_out,
            dec_in,
            dec_mid,
            dec_up,
            dec_out,
            latent_scale,
        })
    }

    pub fn factor(&self) -> usize {
        self.config.factor()
    }

    pub fn latent_scale(&self) -> Result<f64> {
        Ok(self.latent_scale.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
    }

    fn check_image_batch(&self, images: &Tensor) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = images.dims4()?;
        let f = self.factor();
        if c != 3 {
            return Err(Error::invalid(format!("expected RGB input, got {c} channels")));
        }
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "image size {h}x{w} not divisible by downsample factor {f}"
            )));
        }
        Ok((n, h, w))
    }

    /// Posterior of a `(n, 3, h, w)` batch of [0, 1] images.
    pub fn posterior(&self, images: &Tensor) -> Result<Posterior> {
        self.check_image_batch(images)?;
        let x = ((images * 2.0)? - 1.0)?;
        let mut h = self.enc_in.forward(&x)?;
        for d in &self.enc_down {
            h = d.forward(&h.silu()?)?;
        }
        let h = self.enc_mid.forward(&h)?;
        let h = self.enc_out.forward(&h.silu()?)?;
        let chunks = h.chunk(2, 1)?;
        Ok(Posterior {
            mean: chunks[0].clone(),
            logvar: chunks[1].clamp(-30.0, 20.0)?,
        })
    }

    /// Deterministic encoding: the scaled posterior mean.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let p = self.posterior(images)?;
        Ok(p.mean.broadcast_mul(&self.latent_scale)?)
    }

    /// Decodes scaled latents `(n, c_lat, h, w)` into `(n, 3, h*f, w*f)` images
    /// in [0, 1] scale (not clamped).
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = latents.dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::invalid(format!(
                "latent has {c} channels, autoencoder expects {}",
                self.config.latent_channels
            )));
        }
        let z = latents.broadcast_div(&self.latent_scale)?;
        self.decode_unscaled(&z)
    }

    fn decode_unscaled(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.dec_in.forward(z)?;
        h = self.dec_mid.forward(&h)?;
        for up in &self.dec_up {
            let (_, _, hh, ww) = h.dims4()?;
            h = up.forward(&h.silu()?.upsample_nearest2d(hh * 2, ww * 2)?)?;
        }
        let y = self.dec_out.forward(&h.silu()?)?;
        Ok(((y + 1.0)? * 0.5)?)
    }

    /// Training reconstruction from a sampled posterior; returns `(recon, kl)`.
    fn sample_reconstruct(&self, images: &Tensor, noise: &Tensor) -> Result<(Tensor, Tensor)> {
        let p = self.posterior(images)?;
        let std = (&p.logvar * 0.5)?.exp()?;
        let z = (&p.mean + (std * noise)?)?;
        let recon = self.decode_unscaled(&z)?;
        let kl = (((p.mean.sqr()? + p.logvar.exp()?)? - 1.0)? - &p.logvar)?
            .mean_all()?
            .affine(0.5, 0.0)?;
        Ok((recon, kl))
    }
}

#[derive(Debug, Clone)]
pub struct SemanticEncoder {
    pub config: SemanticConfig,
    convs: Vec<Conv2d>,
    pool: Linear,
    norm: LayerNorm,
    /// Training-only head predicting a coarse thumbnail from the tokens.
    head: Linear,
}

pub const SEMANTIC_THUMB: usize = 8;

impl SemanticEncoder {
    pub fn new(s: &mut Scope, config: &SemanticConfig) -> Result<Self> {
        let mut convs = Vec::new();
        let mut prev = 3;
        let widths: Vec<usize> = config
            .channels
            .iter()
            .copied()
            .chain(std::iter::once(config.d_emb))
            .collect();
        for (i, &c) in widths.iter().enumerate() {
            convs.push(Conv2d::new(
                &mut s.pp(format!("conv.{i}")),
                prev,
                c,
                3,
                2,
                Padding::Same(1),
                Init::FanIn(1.0),
            )?);
            prev = c;
        }
        let g = config.grid();
        let pool = Linear::new(&mut s.pp("pool"), g * g, config.n_tokens, false, Init::FanIn(1.0))?;
        let norm = LayerNorm::new(&mut s.pp("norm"), config.d_emb)?;
        let head = Linear::new(
            &mut s.pp("head"),
            config.n_tokens * config.d_emb,
            3 * SEMANTIC_THUMB * SEMANTIC_THUMB,
            true,
            Init::FanIn(1.0),
        )?;
        Ok(Self {
            config: config.clone(),
            convs,
            pool,
            norm,
            head,
        })
    }

    pub fn dtype(&self) -> DType {
        self.convs[0].weight.dtype()
    }

    /// Resizes a `(n, 3, h, w)` batch to the fixed encoder input resolution:
    /// box filtering for integer downscale factors, bilinear otherwise.
    pub fn resize_input(&self, images: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        let r = self.config.input_resolution;
        if h == r && w == r {
            Ok(images.clone())
        } else if h % r == 0 && w % r == 0 && h / r == w / r {
            Ok(images.avg_pool2d(h / r)?)
        } else {
            Ok(images.upsample_bilinear2d(r, r, false)?)
        }
    }

    /// Intermediate feature maps of the conv tower, shallow to deep.
    pub fn feature_maps(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = ((self.resize_input(images)? * 2.0)? - 1.0)?;
        let mut maps = Vec::with_capacity(self.convs.len());
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(&h)?;
            if i + 1 < self.convs.len() {
                h = h.silu()?;
            }
            maps.push(h.clone());
        }
        Ok(maps)
    }

    /// `(n, n_tok, d_emb)` tokens for a `(n, 3, h, w)` batch.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let maps = self.feature_maps(images)?;
        let last = maps.last().expect("at least one conv");
        let (n, c, g, _) = last.dims4()?;
        // (n, c, g*g) -> learned spatial pooling -> (n, c, n_tok) -> (n, n_tok, c)
        let flat = last.reshape((n, c, g * g))?;
        let pooled = self.pool.forward(&flat)?.transpose(1, 2)?.contiguous()?;
        self.norm.forward(&pooled)
    }

    fn thumbnail_prediction(&self, tokens: &Tensor) -> Result<Tensor> {
        let (n, t, d) = tokens.dims3()?;
        let y = self.head.forward(&tokens.reshape((n, t * d))?)?;
        Ok(y.reshape((n, 3, SEMANTIC_THUMB, SEMANTIC_THUMB))?)
    }
}

/// The frozen image-side components: latent autoencoder plus semantic encoder.
#[derive(Debug)]
pub struct Encoders {
    pub store: ParamStore,
    pub vae: Autoencoder,
    pub semantic: SemanticEncoder,
}

pub const VAE_PREFIX: &str = "vae";
pub const SEMANTIC_PREFIX: &str = "semantic";

impl Encoders {
    pub fn new(vae: &AutoencoderConfig, semantic: &SemanticConfig, dtype: DType, seed: u64) -> Result<Self> {
        let mut errs = Vec::new();
        vae.validate(&mut errs, "vae");
        semantic.validate(&mut errs, "semantic");
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut store = ParamStore::new(dtype, seed);
        let vae = Autoencoder::new(&mut store.scope(VAE_PREFIX), vae)?;
        let semantic = SemanticEncoder::new(&mut store.scope(SEMANTIC_PREFIX), semantic)?;
        Ok(Self { store, vae, semantic })
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Hash over every frozen parameter.
    pub fn hash(&self) -> Result<String> {
        self.store.hash_prefix("")
    }

    pub fn encode_images(&self, imgs: &[RgbImage]) -> Result<Tensor> {
        let batch = images_to_batch(imgs, self.dtype(), self.device())?;
        Ok(self.vae.encode(&batch)?.detach())
    }

    pub fn semantic_tokens(&self, imgs: &[RgbImage]) -> Result<Tensor> {
        let batch = images_to_batch(imgs, self.dtype(), self.device())?;
        Ok(self.semantic.encode(&batch)?.detach())
    }

    /// Mean squared reconstruction error of `decode(encode(x))` over `imgs`.
    pub fn reconstruction_mse(&self, imgs: &[RgbImage]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in imgs.chunks(16) {
            let x = images_to_batch(chunk, self.dtype(), self.device())?;
            let y = self.vae.decode(&self.vae.encode(&x)?)?;
            let mse = (y - &x)?.sqr()?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            total += mse * chunk.len() as f64;
        }
        Ok(total / imgs.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kl_weight: f64,
    pub semantic_weight: f64,
    pub seed: u64,
}

impl Default for AutoencoderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 2e-3,
            kl_weight: 1e-6,
            semantic_weight: 1.0,
            seed: 0,
        }
    }
}

impl AutoencoderTrainConfig {
    pub fn validate(&self, errs: &mut Vec<String>, prefix: &str) {
        if self.batch_size == 0 {
            errs.push(format!("{prefix}.batch_size must be > 0"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            errs.push(format!("{prefix}.learning_rate must be > 0"));
        }
        if self.kl_weight < 0.0 || self.semantic_weight < 0.0 {
            errs.push(format!("{prefix}: loss weights must be >= 0"));
        }
    }
}

/// Trains both encoders on `frames`; returns per-step losses.
///
/// After training, the latent scale is set to the inverse standard deviation of
/// the posterior means over the training frames.
pub fn train_autoencoder(
    encoders: &mut Encoders,
    frames: &[RgbImage],
    cfg: &AutoencoderTrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if frames.is_empty() {
        return Err(Error::invalid("autoencoder training needs at least one frame"));
    }
    let mut errs = Vec::new();
    cfg.validate(&mut errs, "train");
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    let dtype = encoders.dtype();
    let device = encoders.device().clone();
    let data = images_to_batch(frames, dtype, &device)?;
    let thumbs = data.avg_pool2d(data.dim(2)? / SEMANTIC_THUMB)?;
    let vars: Vec<_> = encoders
        .store
        .iter()
        .filter(|(n, _)| !n.ends_with("latent_scale"))
        .map(|(_, v)| v.clone())
        .collect();
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<u32> = (0..frames.len() as u32).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    let f = encoders.vae.factor();
    let (_, _, h, w) = data.dims4()?;
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size.min(frames.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let ids = Tensor::new(idx.as_slice(), &device)?;
        let x = data.index_select(&ids, 0)?;
        let target_thumb = thumbs.index_select(&ids, 0)?;
        let noise = randn_seeded(
            &mut rng,
            &[idx.len(), encoders.vae.config.latent_channels, h / f, w / f],
            dtype,
            &device,
        )?;
        let (recon, kl) = encoders.vae.sample_reconstruct(&x, &noise)?;
        let rec_loss = (recon - &x)?.sqr()?.mean_all()?;
        let tokens = encoders.semantic.encode(&x)?;
        let thumb = encoders.semantic.thumbnail_prediction(&tokens)?;
        let sem_loss = (thumb - target_thumb)?.sqr()?.mean_all()?;
        let loss = ((rec_loss + (kl * cfg.kl_weight)?)? + (sem_loss * cfg.semantic_weight)?)?;
        opt.backward_step(&loss)?;
        let l = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        on_step(step, l);
        losses.push(l);
    }
    calibrate_latent_scale(encoders, &data)?;
    Ok(losses)
}

fn calibrate_latent_scale(encoders: &Encoders, data: &Tensor) -> Result<()> {
    let n = data.dim(0)?;
    let mut means = Vec::new();
    for start in (0..n).step_by(16) {
        let len = 16.min(n - start);
        let p = encoders.vae.posterior(&data.narrow(0, start, len)?)?;
        means.push(p.mean.flatten_all()?.to_dtype(DType::F64)?);
    }
    let all = Tensor::cat(&means, 0)?;
    let mean = all.mean_all()?.to_scalar::<f64>()?;
    let var = all.affine(1.0, -mean)?.sqr()?.mean_all()?.to_scalar::<f64>()?;
    let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
    let name = format!("{VAE_PREFIX}.latent_scale");
    encoders
        .store
        .assign(&name, &Tensor::new(&[scale], encoders.device())?)?;
    Ok(())
}

/// Mean over the token axis, `(n, d_emb)`.
pub fn pooled_tokens(tokens: &Tensor) -> Result<Tensor> {
    Ok(tokens.mean(D::Minus2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{solid, upscale_nearest};

    fn small() -> Encoders {
        Encoders::new(&AutoencoderConfig::default(), &SemanticConfig::default(), DType::F32, 1).unwrap()
    }

    #[test]
    fn encode_decode_shapes() {
        let enc = small();
        let x = Tensor::zeros((2, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let z = enc.vae.encode(&x).unwrap();
        assert_eq!(z.dims(), &[2, 4, 8, 8]);
        let y = enc.vae.decode(&z).unwrap();
        assert_eq!(y.dims(), &[2, 3, 64, 64]);
    }

    #[test]
    fn indivisible_image_rejected() {
        let enc = small();
        let x = Tensor::zeros((1, 3, 60, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.vae.encode(&x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn decode_rejects_channel_mismatch() {
        let enc = small();
        let z = Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.vae.decode(&z), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn encoding_and_zero_decoding_are_deterministic() {
        let enc = small();
        let img = solid(64, 64, [200, 30, 90]);
        let a = enc.encode_images(std::slice::from_ref(&img)).unwrap();
        let b = enc.encode_images(&[img]).unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let z = Tensor::zeros((1, 4, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let d1 = enc
            .vae
            .decode(&z)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let d2 = enc
            .vae
            .decode(&z)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn semantic_tokens_shape_and_determinism() {
        let enc = small();
        let img = solid(64, 64, [10, 200, 90]);
        let t = enc.semantic_tokens(std::slice::from_ref(&img)).unwrap();
        assert_eq!(t.dims(), &[1, 8, 64]);
        let t2 = enc.semantic_tokens(&[img]).unwrap();
        assert_eq!(
            t.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            t2.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn semantic_tokens_respect_configured_shape() {
        let cfg = SemanticConfig {
            n_tokens: 5,
            d_emb: 12,
            ..Default::default()
        };
        let enc = Encoders::new(&AutoencoderConfig::default(), &cfg, DType::F32, 0).unwrap();
        let t = enc.semantic_tokens(&[solid(48, 40, [1, 2, 3])]).unwrap();
        assert_eq!(t.dims(), &[1, 5, 12]);
    }

    #[test]
    fn semantic_tokens_stable_under_upscaling() {
        let enc = small();
        let c = crate::datagen::gen_character(2);
        let img = crate::datagen::render_frame(&c, &c.rest_pose(), 64).unwrap();
        let big = upscale_nearest(&img, 4);
        let a = enc.semantic_tokens(&[img]).unwrap();
        let b = enc.semantic_tokens(&[big]).unwrap();
        let mad = (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .mean_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(mad < 1e-5, "mad {mad}");
    }

    #[test]
    fn zero_steps_leaves_params_untouched() {
        let mut enc = small();
        let before = enc.hash().unwrap();
        let frames = vec![solid(64, 64, [1, 2, 3])];
        let cfg = AutoencoderTrainConfig {
            steps: 0,
            ..Default::default()
        };
        train_autoencoder(&mut enc, &frames, &cfg, |_, _| {}).unwrap();
        assert_eq!(before, enc.hash().unwrap());
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut enc = small();
        let r = train_autoencoder(&mut enc, &[], &AutoencoderTrainConfig::default(), |_, _| {});
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }
}
