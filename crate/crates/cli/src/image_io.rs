//! 8-bit RGB PNG reading and writing.

use std::path::Path;

use famamba_core::{Real, Tensor};
use image::{DynamicImage, ImageFormat, RgbImage};

use crate::{CliError, CliResult};

/// Reads an 8-bit RGB PNG as `[1, 3, H, W]` with values `k / 255`.
pub fn load_rgb<T: Real>(path: &Path) -> CliResult<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| CliError::Io(format!("{}: malformed PNG: {e}", path.display())))?;
    let rgb = match img {
        DynamicImage::ImageRgb8(b) => b,
        other => {
            return Err(CliError::Io(format!(
                "{}: expected 8-bit RGB, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Ok(from_rgb(&rgb))
}

pub fn from_rgb<T: Real>(rgb: &RgbImage) -> Tensor<T> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    Tensor::from_fn([1, 3, h, w], |k| {
        let (c, p) = (k / (h * w), k % (h * w));
        T::c(raw[p * 3 + c] as f64 / 255.0)
    })
}

/// Round-half-up quantization of a `[0, 1]` value; out-of-range values saturate.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn to_rgb<T: Real>(image: &Tensor<T>) -> CliResult<RgbImage> {
    let (n, c, h, w) = image.dims4()?;
    if n != 1 || c != 3 {
        return Err(CliError::Usage(format!("expected a [1, 3, H, W] image, got {:?}", image.shape())));
    }
    if !image.is_finite() {
        return Err(CliError::Numeric("image contains non-finite values".into()));
    }
    let d = image.data();
    let mut raw = vec![0u8; h * w * 3];
    for (p, px) in raw.chunks_exact_mut(3).enumerate() {
        for (ch, v) in px.iter_mut().enumerate() {
            *v = quantize(d[ch * h * w + p].as_f64());
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer length"))
}

pub fn save_rgb<T: Real>(path: &Path, image: &Tensor<T>) -> CliResult<()> {
    to_rgb(image)?
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
