//! Noise schedule, forward diffusion, the epsilon-prediction loss and the DDIM
//! sampler.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::derive_seed;
use crate::error::{Error, Result};
use crate::layers::randn_seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self, errs: &mut Vec<String>, prefix: &str) {
        if self.num_timesteps < 1 {
            errs.push(format!("{prefix}.num_timesteps must be >= 1"));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            errs.push(format!("{prefix}: need 0 < beta_start <= beta_end < 1"));
        }
    }

    pub fn build(&self) -> Result<DiffusionSchedule> {
        build_schedule(self.num_timesteps, self.beta_start, self.beta_end, self.kind)
    }
}

/// Betas and cumulative alpha products indexed by timestep `1..=T`;
/// `alpha_bar(0) == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn build_schedule(
    num_timesteps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<DiffusionSchedule> {
    if num_timesteps < 1 {
        return Err(Error::invalid("schedule needs at least one timestep"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "beta range [{beta_start}, {beta_end}] must satisfy 0 < start <= end < 1"
        )));
    }
    let ScheduleKind::Linear = kind;
    let last = (num_timesteps - 1).max(1) as f64;
    let betas: Vec<f64> = (0..num_timesteps)
        .map(|i| {
            // Written as a convex combination so both endpoints are exact.
            let f = i as f64 / last;
            beta_start * (1.0 - f) + beta_end * f
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(num_timesteps);
    let mut acc = 1.0;
    for b in &betas {
        let next = acc * (1.0 - b);
        if !(next > 0.0 && next < acc) {
            return Err(Error::invalid(format!(
                "beta range [{beta_start}, {beta_end}] over {num_timesteps} steps drives alpha_bar below f64 resolution"
            )));
        }
        acc = next;
        alpha_bars.push(acc);
    }
    Ok(DiffusionSchedule { betas, alpha_bars })
}

impl DiffusionSchedule {
    pub fn num_timesteps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.num_timesteps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside [0, {}]",
                self.num_timesteps()
            )));
        }
        Ok(())
    }

    /// DDIM timesteps, descending: `T - floor(k T / S)` for `k < S`.
    pub fn ddim_timesteps(&self, num_steps: usize) -> Result<Vec<usize>> {
        let t_max = self.num_timesteps();
        if num_steps < 1 || num_steps > t_max {
            return Err(Error::invalid(format!(
                "num_steps {num_steps} must lie in [1, {t_max}]"
            )));
        }
        Ok((0..num_steps).map(|k| t_max - k * t_max / num_steps).collect())
    }
}

/// `sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`. `t = 0` returns `z0`.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    if z0.dims() != eps.dims() {
        return Err(Error::invalid(format!(
            "z0 {:?} and eps {:?} differ in shape",
            z0.dims(),
            eps.dims()
        )));
    }
    let ab = schedule.alpha_bar(t);
    Ok(((z0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// Per-batch-element `q_sample` for `z0 (b, ...)` with `ts.len() == b`.
pub fn q_sample_batch(z0: &Tensor, ts: &[usize], eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    let b = z0.dim(0)?;
    if ts.len() != b {
        return Err(Error::invalid("need one timestep per batch element"));
    }
    let rows = ts
        .iter()
        .enumerate()
        .map(|(i, &t)| q_sample(&z0.narrow(0, i, 1)?, t, &eps.narrow(0, i, 1)?, schedule))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&rows, 0)?)
}

/// Mean squared error between sampled noise and the prediction for a random
/// timestep per batch element.
///
/// `predict(noisy, timesteps)` returns a tensor shaped like `z0`.
pub fn training_loss<F>(z0: &Tensor, schedule: &DiffusionSchedule, rng: &mut ChaCha8Rng, predict: F) -> Result<Tensor>
where
    F: FnOnce(&Tensor, &[f64]) -> Result<Tensor>,
{
    let b = z0.dim(0)?;
    let t_max = schedule.num_timesteps();
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=t_max)).collect();
    let eps = randn_seeded(rng, z0.dims(), z0.dtype(), z0.device())?;
    let noisy = q_sample_batch(z0, &ts, &eps, schedule)?;
    let tsf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    let pred = predict(&noisy, &tsf)?;
    if pred.dims() != z0.dims() {
        return Err(Error::invalid(format!(
            "prediction {:?} does not match latent {:?}",
            pred.dims(),
            z0.dims()
        )));
    }
    Ok((eps - pred)?.sqr()?.mean_all()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub eta: f64,
    pub seed: u64,
}

pub const PAPER_DDIM_STEPS: usize = 20;

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: PAPER_DDIM_STEPS,
            eta: 0.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, errs: &mut Vec<String>, prefix: &str, num_timesteps: usize) {
        if self.num_steps < 1 || self.num_steps > num_timesteps {
            errs.push(format!("{prefix}.num_steps must lie in [1, {num_timesteps}]"));
        }
        if self.eta.is_nan() || self.eta < 0.0 {
            errs.push(format!("{prefix}.eta must be >= 0"));
        }
    }
}

/// Initial noise for a sampler run.
pub fn initial_noise(seed: u64, shape: &[usize], device: &Device) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    randn_seeded(&mut rng, shape, DType::F64, device)
}

/// DDIM from noise drawn with `cfg.seed`. See [`ddim_sample_from`].
pub fn ddim_sample<F>(
    predict: F,
    cfg: &SamplerConfig,
    schedule: &DiffusionSchedule,
    shape: &[usize],
    dtype: DType,
    device: &Device,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    let z_t = initial_noise(cfg.seed, shape, device)?;
    ddim_sample_from(predict, cfg, schedule, &z_t, dtype)
}

/// Runs DDIM from `z_t` (the state at timestep T).
///
/// The state is carried in f64; `predict(z, t)` receives it cast to `dtype`.
/// The step after the smallest DDIM timestep targets `alpha_bar = 1`, so the
/// last update returns the model's clean-latent estimate.
pub fn ddim_sample_from<F>(
    mut predict: F,
    cfg: &SamplerConfig,
    schedule: &DiffusionSchedule,
    z_t: &Tensor,
    dtype: DType,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if cfg.eta.is_nan() || cfg.eta < 0.0 {
        return Err(Error::invalid("eta must be >= 0"));
    }
    let steps = schedule.ddim_timesteps(cfg.num_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xDD1));
    let mut z = z_t.to_dtype(DType::F64)?;
    for (k, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(k + 1).copied().unwrap_or(0);
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t_prev);
        let eps = predict(&z.to_dtype(dtype)?, t as f64)?.to_dtype(DType::F64)?;
        if eps.dims() != z.dims() {
            return Err(Error::invalid(format!(
                "noise prediction {:?} does not match latent {:?}",
                eps.dims(),
                z.dims()
            )));
        }
        let x0 = ((&z - (&eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
        let sigma = if cfg.eta > 0.0 {
            cfg.eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt()
        } else {
            0.0
        };
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let mut next = ((&x0 * ab_prev.sqrt())? + (&eps * dir)?)?;
        if sigma > 0.0 {
            let noise = randn_seeded(&mut rng, z.dims(), DType::F64, z.device())?;
            next = (next + (noise * sigma)?)?;
        }
        z = next;
    }
    Ok(z.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> DiffusionSchedule {
        ScheduleConfig::default().build().unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all()
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .to_vec1()
            .unwrap()
    }

    #[test]
    fn endpoints_exact_and_monotone() {
        let s = sched();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.02);
        for w in s.alpha_bars().windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn bad_ranges_rejected() {
        for (a, b) in [(0.0, 0.1), (0.2, 0.1), (0.1, 1.0), (-1.0, 0.5)] {
            assert!(build_schedule(10, a, b, ScheduleKind::Linear).is_err());
        }
        assert!(build_schedule(0, 0.1, 0.2, ScheduleKind::Linear).is_err());
        assert_eq!(build_schedule(1, 0.1, 0.2, ScheduleKind::Linear).unwrap().beta(1), 0.1);
    }

    #[test]
    fn ddim_timesteps_uniform() {
        let s = sched();
        let ts = s.ddim_timesteps(20).unwrap();
        assert_eq!(ts.len(), 20);
        assert_eq!(ts[0], 1000);
        assert_eq!(ts[19], 50);
        assert!(s.ddim_timesteps(0).is_err());
        assert!(s.ddim_timesteps(1001).is_err());
        let odd = s.ddim_timesteps(7).unwrap();
        assert!(odd.windows(2).all(|w| w[0] > w[1]) && *odd.last().unwrap() >= 1);
    }

    #[test]
    fn q_sample_limits_and_range() {
        let s = sched();
        let z0 = Tensor::new(&[1.0f64, -2.0, 3.0], &Device::Cpu).unwrap();
        let eps = Tensor::new(&[0.5f64, 0.25, -1.0], &Device::Cpu).unwrap();
        assert_eq!(vals(&q_sample(&z0, 0, &eps, &s).unwrap()), vals(&z0));
        assert!(q_sample(&z0, 1001, &eps, &s).is_err());
        let bad = Tensor::new(&[0.5f64], &Device::Cpu).unwrap();
        assert!(q_sample(&z0, 5, &bad, &s).is_err());
    }

    #[test]
    fn sampler_is_deterministic() {
        let s = sched();
        let cfg = SamplerConfig {
            num_steps: 5,
            eta: 0.5,
            seed: 9,
        };
        let model = |z: &Tensor, _t: f64| Ok((z * 0.1)?);
        let a = ddim_sample(model, &cfg, &s, &[1, 2, 2], DType::F32, &Device::Cpu).unwrap();
        let b = ddim_sample(model, &cfg, &s, &[1, 2, 2], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(vals(&a), vals(&b));
        assert_eq!(a.dims(), &[1, 2, 2]);
    }

    #[test]
    fn oracle_loss_is_zero_and_zero_model_matches_eps_energy() {
        let s = sched();
        let z0 = Tensor::zeros((4, 3), DType::F64, &Device::Cpu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // With z0 = 0 the noisy input is sqrt(1 - ab) * eps, so eps is recoverable.
        let loss = training_loss(&z0, &s, &mut rng, |noisy, ts| {
            let rows = ts
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    let ab = s.alpha_bar(t as usize);
                    Ok((noisy.narrow(0, i, 1)? / (1.0 - ab).sqrt())?)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::cat(&rows, 0)?)
        })
        .unwrap();
        assert!(loss.to_scalar::<f64>().unwrap() < 1e-24);
    }
}
