//! Image file io and pixel-space helpers.
//!
//! Images live in tensors of shape (3, H, W) with values in [0, 1]. PNG and
//! PPM files are supported on both ends; the format is picked from the file
//! extension.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Loads a PNG or PPM file into a (3, H, W) tensor in [0, 1].
pub fn load_image(path: impl AsRef<Path>, device: &Device) -> Result<Tensor> {
    let img = image::open(path.as_ref())
        .map_err(|e| Error::Image(format!("{}: {e}", path.as_ref().display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, pixel) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = pixel.0[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), device)?)
}

/// Writes a (3, H, W) tensor in [0, 1] to a PNG or PPM file.
pub fn save_image(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (c, h, w) = t.dims3().map_err(|_| Error::Shape {
        context: "image tensor".to_string(),
        expected: "(3, H, W)".to_string(),
        got: format!("{:?}", t.dims()),
    })?;
    if c != 3 {
        return Err(Error::Shape {
            context: "image tensor".to_string(),
            expected: "3 channels".to_string(),
            got: format!("{c} channels"),
        });
    }
    let data: Vec<f32> = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ch: usize| {
                let v = data[ch * h * w + y * w + x].clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            };
            buf.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    buf.save(path.as_ref())
        .map_err(|e| Error::Image(format!("{}: {e}", path.as_ref().display())))
}

/// Mean squared error between two equally shaped tensors.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape {
            context: "mse".to_string(),
            expected: format!("{:?}", a.dims()),
            got: format!("{:?}", b.dims()),
        });
    }
    crate::nn::scalar(&(a - b)?.sqr()?.mean_all()?)
}

/// Peak signal-to-noise ratio for [0, 1] pixels: 10 log10(1 / MSE).
/// Identical inputs give +infinity.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / err).log10())
}

/// PSNR rendered for CSV output; infinite values become the string "inf".
pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}
