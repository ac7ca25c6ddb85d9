//! Conversions between 8-bit RGB images and `(3, h, w)` float tensors in [0, 1].

use candle_core::{DType, Device, Tensor};
use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub fn image_to_tensor(img: &RgbImage, dtype: DType, device: &Device) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok(Tensor::from_vec(data, (h as usize, w as usize, 3), device)?
        .permute((2, 0, 1))?
        .contiguous()?
        .to_dtype(dtype)?)
}

/// Stacks images into `(n, 3, h, w)`.
pub fn images_to_batch(imgs: &[RgbImage], dtype: DType, device: &Device) -> Result<Tensor> {
    if imgs.is_empty() {
        return Err(Error::invalid("empty image batch"));
    }
    let ts = imgs
        .iter()
        .map(|i| image_to_tensor(i, dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

/// Clamps to [0, 1] and quantizes a `(3, h, w)` tensor.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::invalid(format!("expected 3 channels, got {c}")));
    }
    let data = t
        .to_dtype(DType::F32)?
        .permute((1, 2, 0))?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let bytes: Vec<u8> = data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer size matches"))
}

/// Pixels of an image as `[0, 1]` floats in HWC order.
pub fn image_to_f64(img: &RgbImage) -> Vec<f64> {
    img.as_raw().iter().map(|&v| v as f64 / 255.0).collect()
}

/// Nearest-neighbour upscale by an integer factor.
pub fn upscale_nearest(img: &RgbImage, factor: u32) -> RgbImage {
    RgbImage::from_fn(img.width() * factor, img.height() * factor, |x, y| {
        *img.get_pixel(x / factor, y / factor)
    })
}

pub fn solid(w: u32, h: u32, color: [u8; 3]) -> RgbImage {
    RgbImage::from_pixel(w, h, Rgb(color))
}
