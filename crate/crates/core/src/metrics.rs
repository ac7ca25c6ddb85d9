//! SSIM, PSNR, a feature-space perceptual distance and a Fréchet distance over
//! pooled clip features.
//!
//! `perceptual_dist` and `fvd_proxy` use the frozen semantic encoder; their
//! values are only comparable between runs of this crate.

use candle_core::{DType, Tensor};
use image::RgbImage;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autoencoder::{pooled_tokens, SemanticEncoder};
use crate::error::{Error, Result};
use crate::imaging::image_to_tensor;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_WINDOW: usize = 11;

/// Row-major `height x width x channels` image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels || channels == 0 {
            return Err(Error::invalid("pixel buffer does not match dimensions"));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            width: w as usize,
            height: h as usize,
            channels: 3,
            data: img.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        }
    }

    fn plane(&self, ch: usize) -> Vec<f64> {
        self.data.iter().skip(ch).step_by(self.channels).copied().collect()
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if (self.width, self.height, self.channels) != (other.width, other.height, other.channels) {
            return Err(Error::invalid(format!(
                "image shapes differ: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )));
        }
        Ok(())
    }
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|x| (-((x * x) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Symmetric reflection (`dcba|abcd|dcba`) of an out-of-range index.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian filter with reflected borders.
fn filter(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * plane[y * w + reflect(x as i64 + j as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[reflect(y as i64 + j as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let k = gaussian_kernel();
    let mul = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let ux = filter(a, w, h, &k);
    let uy = filter(b, w, h, &k);
    let uxx = filter(&mul(a, a), w, h, &k);
    let uyy = filter(&mul(b, b), w, h, &k);
    let uxy = filter(&mul(a, b), w, h, &k);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let pad = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in pad..h - pad {
        for x in pad..w - pad {
            let i = y * w + x;
            let vx = uxx[i] - ux[i] * ux[i];
            let vy = uyy[i] - uy[i] * uy[i];
            let vxy = uxy[i] - ux[i] * uy[i];
            let num = (2.0 * ux[i] * uy[i] + c1) * (2.0 * vxy + c2);
            let den = (ux[i] * ux[i] + uy[i] * uy[i] + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    total / count as f64
}

/// Mean SSIM over channels: Gaussian window (sigma 1.5, 11 taps), data range 1,
/// population covariances, reflected borders, border of 5 px excluded.
pub fn ssim(a: &FloatImage, b: &FloatImage) -> Result<f64> {
    a.same_shape(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    let per: f64 = (0..a.channels)
        .map(|c| ssim_plane(&a.plane(c), &b.plane(c), a.width, a.height))
        .sum();
    Ok(per / a.channels as f64)
}

/// `10 log10(1 / mse)`, capped at [`PSNR_CAP_DB`] (returned for identical inputs).
pub fn psnr(a: &FloatImage, b: &FloatImage) -> Result<f64> {
    a.same_shape(b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn image_tensor(img: &RgbImage, enc: &SemanticEncoder) -> Result<Tensor> {
    let dtype = enc.dtype();
    image_to_tensor(img, dtype, &candle_core::Device::Cpu)?
        .unsqueeze(0)
        .map_err(Into::into)
}

/// Sum over encoder layers of the mean squared difference between
/// channel-normalized feature maps.
pub fn perceptual_dist(a: &RgbImage, b: &RgbImage, enc: &SemanticEncoder) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::invalid("image shapes differ"));
    }
    if a == b {
        return Ok(0.0);
    }
    let fa = enc.feature_maps(&image_tensor(a, enc)?)?;
    let fb = enc.feature_maps(&image_tensor(b, enc)?)?;
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let nx = unit_channels(x)?;
        let ny = unit_channels(y)?;
        let d = (nx - ny)?.sqr()?.sum(1)?.mean_all()?;
        total += d.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(total)
}

fn unit_channels(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)?.sqrt()? + 1e-10)?;
    Ok(x.broadcast_div(&norm)?)
}

/// Per-clip feature: mean pooled token vector over frames, concatenated with
/// the mean absolute frame-to-frame difference.
pub fn clip_features(frames: &[RgbImage], enc: &SemanticEncoder) -> Result<Vec<f64>> {
    if frames.is_empty() {
        return Err(Error::invalid("clip has no frames"));
    }
    let per_frame = frames
        .iter()
        .map(|f| {
            let tok = enc.encode(&image_tensor(f, enc)?)?;
            Ok(pooled_tokens(&tok)?
                .flatten_all()?
                .to_dtype(DType::F64)?
                .to_vec1::<f64>()?)
        })
        .collect::<Result<Vec<_>>>()?;
    let d = per_frame[0].len();
    let n = per_frame.len() as f64;
    let mut feat = vec![0.0; 2 * d];
    for f in &per_frame {
        for (i, v) in f.iter().enumerate() {
            feat[i] += v / n;
        }
    }
    if per_frame.len() > 1 {
        let m = (per_frame.len() - 1) as f64;
        for w in per_frame.windows(2) {
            for i in 0..d {
                feat[d + i] += (w[1][i] - w[0][i]).abs() / m;
            }
        }
    }
    Ok(feat)
}

/// Mean and unbiased covariance of row samples.
pub fn gaussian_fit(samples: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if samples.len() < 2 {
        return Err(Error::invalid("need at least two samples to fit a Gaussian"));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::invalid("feature dimensions differ"));
    }
    let n = samples.len();
    let x = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`, clamped at 0.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    if mu1.len() != mu2.len() || s1.shape() != s2.shape() || s1.nrows() != mu1.len() {
        return Err(Error::invalid("Gaussian dimensions differ"));
    }
    let r1 = psd_sqrt(s1);
    let inner = &r1 * s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = inner.symmetric_eigenvalues().iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_cross;
    Ok(d.max(0.0))
}

/// Fréchet distance between Gaussians fitted to per-clip features of two clip
/// sets (each needs at least two clips).
pub fn fvd_proxy(set_a: &[Vec<RgbImage>], set_b: &[Vec<RgbImage>], enc: &SemanticEncoder) -> Result<f64> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(Error::invalid("fvd_proxy needs at least two clips per set"));
    }
    let fa = set_a
        .iter()
        .map(|c| clip_features(c, enc))
        .collect::<Result<Vec<_>>>()?;
    let fb = set_b
        .iter()
        .map(|c| clip_features(c, enc))
        .collect::<Result<Vec<_>>>()?;
    let (m1, s1) = gaussian_fit(&fa)?;
    let (m2, s2) = gaussian_fit(&fb)?;
    frechet_distance(&m1, &s1, &m2, &s2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub ssim: f64,
    pub psnr: f64,
    pub perceptual_dist: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub psnr_cap_db: f64,
    /// Hash of the frozen encoder used for the feature metrics, if any.
    pub encoder_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim: f64,
    pub psnr: f64,
    pub perceptual_dist: Option<f64>,
    pub fvd_proxy: Option<f64>,
    pub per_frame: Vec<FrameMetrics>,
    pub config: MetricConfig,
}

/// Frame-aligned metrics over paired videos; `fvd_proxy` is filled when an
/// encoder is given and both sides hold at least two videos.
pub fn evaluate(
    pred: &[Vec<RgbImage>],
    gt: &[Vec<RgbImage>],
    encoder: Option<(&SemanticEncoder, String)>,
) -> Result<MetricReport> {
    if pred.len() != gt.len() || pred.iter().zip(gt).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::invalid("prediction and ground truth frame counts differ"));
    }
    let mut per_frame = Vec::new();
    for (p, g) in pred.iter().flatten().zip(gt.iter().flatten()) {
        let (fp, fg) = (FloatImage::from_rgb(p), FloatImage::from_rgb(g));
        per_frame.push(FrameMetrics {
            ssim: ssim(&fp, &fg)?,
            psnr: psnr(&fp, &fg)?,
            perceptual_dist: match &encoder {
                Some((enc, _)) => Some(perceptual_dist(p, g, enc)?),
                None => None,
            },
        });
    }
    if per_frame.is_empty() {
        return Err(Error::invalid("no frames to evaluate"));
    }
    let n = per_frame.len() as f64;
    let mean = |f: &dyn Fn(&FrameMetrics) -> f64| per_frame.iter().map(f).sum::<f64>() / n;
    let perceptual = encoder.as_ref().map(|_| mean(&|m| m.perceptual_dist.unwrap_or(0.0)));
    let fvd = match &encoder {
        Some((enc, _)) if pred.len() >= 2 => Some(fvd_proxy(pred, gt, enc)?),
        _ => None,
    };
    Ok(MetricReport {
        ssim: mean(&|m| m.ssim),
        psnr: mean(&|m| m.psnr),
        perceptual_dist: perceptual,
        fvd_proxy: fvd,
        config: MetricConfig {
            ssim_window: SSIM_WINDOW,
            ssim_sigma: SSIM_SIGMA,
            psnr_cap_db: PSNR_CAP_DB,
            encoder_hash: encoder.map(|(_, h)| h),
        },
        per_frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: usize, h: usize, f: impl Fn(usize) -> f64) -> FloatImage {
        FloatImage::new(w, h, 1, (0..w * h).map(f).collect()).unwrap()
    }

    #[test]
    fn identity_and_caps() {
        let a = img(16, 16, |i| (i % 7) as f64 / 7.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_closed_form() {
        let a = img(12, 12, |_| 0.5);
        let b = img(12, 12, |_| 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn constant_images_match_formula() {
        let (c1, c2) = (0.2, 0.7);
        let a = img(20, 20, |_| c1);
        let b = img(20, 20, |_| c2);
        let k1 = (SSIM_K1).powi(2);
        let expected = (2.0 * c1 * c2 + k1) / (c1 * c1 + c2 * c2 + k1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_and_small_rejected() {
        let a = img(16, 16, |_| 0.0);
        let b = img(16, 12, |_| 0.0);
        assert!(ssim(&a, &b).is_err());
        assert!(psnr(&a, &b).is_err());
        let tiny = img(8, 8, |_| 0.0);
        assert!(ssim(&tiny, &tiny).is_err());
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 0);
        assert_eq!(reflect(-2, 5), 1);
        assert_eq!(reflect(5, 5), 4);
        assert_eq!(reflect(6, 5), 3);
        assert_eq!(reflect(2, 5), 2);
    }

    #[test]
    fn frechet_identical_and_diagonal() {
        let mu = DVector::from_vec(vec![0.3, -1.0]);
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert!(frechet_distance(&mu, &s, &mu, &s).unwrap() < 1e-10);
        let s1 = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let s2 = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 9.0]));
        let mu2 = DVector::from_vec(vec![1.3, -1.0]);
        // Commuting diagonal covariances: sum of (sqrt(a) - sqrt(b))^2.
        let closed = 1.0 + (2.0f64 - 1.0).powi(2) + (1.0f64 - 3.0).powi(2);
        assert!((frechet_distance(&mu, &s1, &mu2, &s2).unwrap() - closed).abs() < 1e-12);
    }

    #[test]
    fn gaussian_fit_needs_two() {
        assert!(gaussian_fit(&[vec![1.0]]).is_err());
    }
}
