//! Central finite-difference gradient checks at f64 on tiny configurations.
//!
//! Each component is built with every dimension at most 4, all of its
//! parameters are re-drawn from a unit-scale Gaussian (so zero-initialized
//! projections do not hide upstream gradients), and the probe loss is a fixed
//! random projection of the output. At most `max_per_tensor` elements per
//! parameter are perturbed, chosen by a seeded RNG.

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    cross_attention, spatial_attention_fuse, temporal_attention, AttentionParams, FeatureMap, ReferenceFeature,
    ResTransBlock, TemporalLayer,
};
use crate::autoencoder::{AutoencoderConfig, Encoders, SemanticConfig};
use crate::error::{Error, Result};
use crate::layers::{randn_seeded, Conv2d, Init, Padding, ParamStore};
use crate::nets::{AnimationModel, ModelConfig, PoseGuiderConfig, UNetConfig};

/// Relative errors use `max(|analytic|, |numeric|, REL_FLOOR)` as denominator.
pub const REL_FLOOR: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GradComponent {
    Conv,
    SpatialFusion,
    CrossAttention,
    TemporalAttention,
    ResTransBlock,
    PoseGuider,
    AutoencoderEncode,
    AutoencoderDecode,
    Denoiser,
    /// `0.5 ||w||^2`, whose gradient is `w`.
    Quadratic,
    /// Output independent of the parameters.
    Constant,
}

impl GradComponent {
    pub const ALL: [GradComponent; 11] = [
        GradComponent::Conv,
        GradComponent::SpatialFusion,
        GradComponent::CrossAttention,
        GradComponent::TemporalAttention,
        GradComponent::ResTransBlock,
        GradComponent::PoseGuider,
        GradComponent::AutoencoderEncode,
        GradComponent::AutoencoderDecode,
        GradComponent::Denoiser,
        GradComponent::Quadratic,
        GradComponent::Constant,
    ];
}

#[derive(Debug, Clone, Serialize)]
pub struct GradEntry {
    pub name: String,
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub component: String,
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn max_abs_grad(&self) -> f64 {
        self.entries.iter().map(|e| e.max_abs_grad).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        !self.entries.is_empty() && self.max_rel_err() < tol
    }
}

fn values(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

fn eval(loss: &dyn Fn() -> Result<Tensor>) -> Result<f64> {
    Ok(loss()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Compares autograd against central differences for each named var.
pub fn check_vars(
    component: &str,
    loss: &dyn Fn() -> Result<Tensor>,
    vars: &[(String, Var)],
    max_per_tensor: usize,
    seed: u64,
) -> Result<GradReport> {
    if vars.iter().any(|(_, v)| v.dtype() != DType::F64) {
        return Err(Error::invalid("gradient checks run at f64"));
    }
    let l = loss()?;
    let grads = l.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (name, var) in vars {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => values(g)?,
            None => vec![0.0; var.elem_count()],
        };
        let base = values(var.as_tensor())?;
        let n = base.len();
        let picks: Vec<usize> = if n <= max_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, max_per_tensor).into_vec()
        };
        let shape = var.shape().clone();
        let mut entry = GradEntry {
            name: name.clone(),
            checked: picks.len(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            max_abs_grad: 0.0,
        };
        for i in picks {
            let mut probe = base.clone();
            probe[i] = base[i] + FD_STEP;
            var.set(&Tensor::from_vec(probe.clone(), &shape, &Device::Cpu)?)?;
            let up = eval(loss)?;
            probe[i] = base[i] - FD_STEP;
            var.set(&Tensor::from_vec(probe, &shape, &Device::Cpu)?)?;
            let down = eval(loss)?;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            entry.max_abs_err = entry.max_abs_err.max(abs);
            entry.max_rel_err = entry.max_rel_err.max(rel);
            entry.max_abs_grad = entry.max_abs_grad.max(a.abs());
        }
        var.set(&Tensor::from_vec(base, &shape, &Device::Cpu)?)?;
        entries.push(entry);
    }
    Ok(GradReport {
        component: component.to_string(),
        entries,
    })
}

fn randomize(store: &ParamStore, rng: &mut ChaCha8Rng, scale: f64) -> Result<()> {
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names {
        let dims = store.get(&n).expect("listed").dims().to_vec();
        let t = (randn_seeded(rng, &dims, DType::F64, &Device::Cpu)? * scale)?;
        store.assign(&n, &t)?;
    }
    Ok(())
}

fn named(store: &ParamStore) -> Vec<(String, Var)> {
    store.iter().map(|(n, v)| (n.to_string(), v.clone())).collect()
}

fn input_var(rng: &mut ChaCha8Rng, name: &str, dims: &[usize]) -> Result<(String, Var)> {
    let t = randn_seeded(rng, dims, DType::F64, &Device::Cpu)?;
    Ok((name.to_string(), Var::from_tensor(&t)?))
}

/// Loss `sum(out * p)` for a fixed random `p` shaped like `out`.
fn projection(rng: &mut ChaCha8Rng, dims: &[usize]) -> Result<Tensor> {
    randn_seeded(rng, dims, DType::F64, &Device::Cpu)
}

fn project(out: &Tensor, p: &Tensor) -> Result<Tensor> {
    Ok((out * p)?.sum_all()?)
}

pub fn grad_check(component: GradComponent, max_per_tensor: usize, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let label = format!("{component:?}");
    match component {
        GradComponent::Conv => {
            let mut st = ParamStore::new(DType::F64, seed);
            let conv = Conv2d::new(&mut st.scope("conv"), 3, 4, 3, 2, Padding::Same(1), Init::FanIn(1.0))?;
            let conv4 = Conv2d::new(
                &mut st.scope("conv4"),
                4,
                2,
                4,
                1,
                Padding::Split { before: 1, after: 2 },
                Init::FanIn(1.0),
            )?;
            randomize(&st, &mut rng, 0.5)?;
            let (xn, x) = input_var(&mut rng, "input", &[1, 3, 4, 4])?;
            let p = projection(&mut rng, &[1, 2, 2, 2])?;
            let mut vars = named(&st);
            vars.push((xn, x.clone()));
            let f = || project(&conv4.forward(&conv.forward(x.as_tensor())?)?, &p);
            check_vars(&label, &f, &vars, max_per_tensor, seed)
        }
        GradComponent::SpatialFusion => {
            let mut st = ParamStore::new(DType::F64, seed);
            let attn = AttentionParams::new(&mut st.scope("attn"), 4, 4, 4, 2, Init::FanIn(1.0))?;
            randomize(&st, &mut rng, 0.5)?;
            let (n1, x1) = input_var(&mut rng, "x1", &[1, 2, 2, 2, 4])?;
            let (n2, x2) = input_var(&mut rng, "x2", &[1, 2, 2, 4])?;
            let p = projection(&mut rng, &[1, 2, 2, 2, 4])?;
            let mut vars = named(&st);
            vars.push((n1, x1.clone()));
            vars.push((n2, x2.clone()));
            let f = || {
                let out = spatial_attention_fuse(
                    &FeatureMap(x1.as_tensor().clone()),
                    &ReferenceFeature(x2.as_tensor().clone()),
                    &attn,
                    false,
                )?;
                project(&out.0, &p)
            };
            check_vars(&label, &f, &vars, max_per_tensor, seed)
        }
        GradComponent::CrossAttention => {
            let mut st = ParamStore::new(DType::F64, seed);
            let attn = AttentionParams::new(&mut st.scope("attn"), 4, 3, 4, 2, Init::FanIn(1.0))?;
            randomize(&st, &mut rng, 0.5)?;
            let (n1, x) = input_var(&mut rng, "x", &[1, 2, 2, 2, 4])?;
            let (n2, tok) = input_var(&mut rng, "tokens", &[1, 3, 3])?;
            let p = projection(&mut rng, &[1, 2, 2, 2, 4])?;
            let mut vars = named(&st);
            vars.push((n1, x.clone()));
            vars.push((n2, tok.clone()));
            let f = || {
                let out = cross_attention(&FeatureMap(x.as_tensor().clone()), tok.as_tensor(), &attn)?;
                project(&out.0, &p)
            };
            check_vars(&label, &f, &vars, max_per_tensor, seed)
        }
        GradComponent::TemporalAttention => {
            let mut st = ParamStore::new(DType::F64, seed);
            let layer = TemporalLayer::new(&mut st.scope("temporal"), 4, 2)?;
            randomize(&st, &mut rng, 0.5)?;
            let (n1, x) = input_var(&mut rng, "x", &[1, 3, 2, 2, 4])?;
            let p = projection(&mut rng, &[1, 3, 2, 2, 4])?;
            let mut vars = named(&st);
            vars.push((n1, x.clone()));
            let f = || project(&temporal_attention(&FeatureMap(x.as_tensor().clone()), &layer)?.0, &p);
            check_vars(&label, &f, &vars, max_per_tensor, seed)
        }
        GradComponent::ResTransBlock => {
            let mut st = ParamStore::new(DType::F64, seed);
            let block = ResTransBlock::new(&mut st.scope("block"), 4, 4, 4, 3, 2, 2)?;
            let layer = TemporalLayer::new(&mut st.scope("temporal"), 4, 2)?;
            randomize(&st, &mut rng, 0.5)?;
            let (n1, x) = input_var(&mut rng, "x", &[2, 4, 2, 2])?;
            let (n2, r) = input_var(&mut rng, "reference", &[1, 2, 2, 4])?;
            let temb = randn_seeded(&mut rng, &[2, 4], DType::F64, &Device::Cpu)?;
            let tok = randn_seeded(&mut rng, &[1, 2, 3], DType::F64, &Device::Cpu)?;
            let p = projection(&mut rng, &[2, 4, 2, 2])?;
            let mut vars = named(&st);
            vars.push((n1, x.clone()));
            vars.push((n2, r.clone()));
            let f = || {
                let out = block.forward(
                    x.as_tensor(),
                    1,
                    2,
                    &temb,
                    Some(&ReferenceFeature(r.as_tensor().clone())),
                    &tok,
                    Some(&layer),
                    false,
                )?;
                project(&out.hidden, &p)
            };
            check_vars(&label, &f, &vars, max_per_tensor, seed)
        }
        GradComponent::PoseGuider => {
            let cfg = ModelConfig {
                unet: tiny_unet(),
                pose_guider: PoseGuiderConfig {
                    channels: vec![2, 3, 4, 4],
                    ..Default::default()
                },
            };
            let model = AnimationModel::new(&cfg, DType::F64, seed)?;
            randomize(&model.store, &mut rng, 0.5)?;
            let sk = randn_seeded(&mut rng, &[1, 3, 16, 16], DType::F64, &Device::Cpu)?;
            let p = projection(&mut rng, &[1, 2, 2, 2])?;
            let vars: Vec<_> = named(&model.store)
                .into_iter()
                .filter(|(n, _)| n.starts_with(crate::nets::POSE_GUIDER_PREFIX))
                .collect();
            let f = || project(&model.pose_features(&sk)?, &p);
            check_vars(&label, &f, &vars, max_per_tensor, seed)
        }
        GradComponent::AutoencoderEncode | GradComponent::AutoencoderDecode => {
            let enc = Encoders::new(&tiny_autoencoder(), &tiny_semantic(), DType::F64, seed)?;
            randomize(&enc.store, &mut rng, 0.3)?;
            let vars: Vec<_> = named(&enc.store)
                .into_iter()
                .filter(|(n, _)| n.starts_with(crate::autoencoder::VAE_PREFIX))
                .collect();
            if component == GradComponent::AutoencoderEncode {
                let x = ((randn_seeded(&mut rng, &[1, 3, 16, 16], DType::F64, &Device::Cpu)?.tanh()? * 0.5)? + 0.5)?;
                let p = projection(&mut rng, &[1, 2, 2, 2])?;
                let f = || project(&enc.vae.encode(&x)?, &p);
                check_vars(&label, &f, &vars, max_per_tensor, seed)
            } else {
                let (nz, z) = input_var(&mut rng, "latent", &[1, 2, 2, 2])?;
                let p = projection(&mut rng, &[1, 3, 16, 16])?;
                let mut vars = vars;
                vars.push((nz, z.clone()));
                let f = || project(&enc.vae.decode(z.as_tensor())?, &p);
                check_vars(&label, &f, &vars, max_per_tensor, seed)
            }
        }
        GradComponent::Denoiser => {
            let cfg = ModelConfig {
                unet: tiny_unet(),
                pose_guider: PoseGuiderConfig {
                    channels: vec![2, 2, 2, 2],
                    ..Default::default()
                },
            };
            let mut model = AnimationModel::new(&cfg, DType::F64, seed)?;
            model.init_temporal_zero()?;
            randomize(&model.store, &mut rng, 0.5)?;
            let (nz, z) = input_var(&mut rng, "noisy", &[1, 2, 2, 4, 4])?;
            let reference = randn_seeded(&mut rng, &[1, 2, 4, 4], DType::F64, &Device::Cpu)?;
            let tok = randn_seeded(&mut rng, &[1, 2, 4], DType::F64, &Device::Cpu)?;
            let sk = randn_seeded(&mut rng, &[2, 3, 32, 32], DType::F64, &Device::Cpu)?;
            let p = projection(&mut rng, &[1, 2, 2, 4, 4])?;
            let mut vars = named(&model.store);
            vars.push((nz, z.clone()));
            let f = || {
                let cache = model.reference_forward(&reference, &tok)?;
                let pose = model.pose_features(&sk)?.reshape((1, 2, 2, 4, 4))?;
                let out = model.denoise_forward(z.as_tensor(), &[37.0], Some(&cache), &tok, &pose, true)?;
                project(&out, &p)
            };
            check_vars(&label, &f, &vars, max_per_tensor, seed)
        }
        GradComponent::Quadratic => {
            let (n, w) = input_var(&mut rng, "w", &[3, 4])?;
            let f = || Ok((w.as_tensor().sqr()?.sum_all()? * 0.5)?);
            check_vars(&label, &f, &[(n, w.clone())], max_per_tensor, seed)
        }
        GradComponent::Constant => {
            let (n, w) = input_var(&mut rng, "w", &[2, 2])?;
            let c = Tensor::new(3.5f64, &Device::Cpu)?;
            let f = || Ok(((w.as_tensor() * 0.0)?.sum_all()? + &c)?);
            check_vars(&label, &f, &[(n, w.clone())], max_per_tensor, seed)
        }
    }
}

fn tiny_unet() -> UNetConfig {
    UNetConfig {
        base_channels: 2,
        channel_mult: vec![1, 2],
        levels: 2,
        attention_levels: vec![0, 1],
        heads: 2,
        latent_channels: 2,
        temb_dim: 4,
        token_dim: 4,
        groups: 2,
    }
}

fn tiny_autoencoder() -> AutoencoderConfig {
    AutoencoderConfig {
        base_channels: 2,
        stage_channels: vec![2, 4, 4],
        latent_channels: 2,
    }
}

fn tiny_semantic() -> SemanticConfig {
    SemanticConfig {
        input_resolution: 8,
        channels: vec![2],
        n_tokens: 2,
        d_emb: 4,
    }
}
