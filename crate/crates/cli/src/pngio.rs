use std::path::Path;

use anyhow::Context;
use garment_edit::{ImageBuffer, PixelRange};

/// Reads an 8-bit PNG as a `[0, 1]` image; alpha is dropped.
pub fn read_png(path: &Path) -> anyhow::Result<ImageBuffer> {
    let img = image::open(path)
        .with_context(|| format!("reading image {}", path.display()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Ok(ImageBuffer::from_vec(h as usize, w as usize, data, PixelRange::Unit)?)
}

/// Writes an 8-bit RGB PNG, rounding to the nearest level.
pub fn write_png(path: &Path, img: &ImageBuffer) -> anyhow::Result<()> {
    let bytes: Vec<u8> = img
        .to_unit()?
        .to_vec()?
        .into_iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .context("image buffer size mismatch")?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", path.display()))
}
