//! Differentiable sRGB → XYZ (D65) → CIELAB.

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, PixelRange};
use crate::mask::RegionMask;

/// Linear sRGB to CIE XYZ, D65 reference white.
pub const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const DELTA: f64 = 6.0 / 29.0;

/// Reference white: the XYZ of linear `(1, 1, 1)` under [`SRGB_TO_XYZ`], so
/// that sRGB white lands exactly on `L* = 100`.
pub fn white_point() -> [f64; 3] {
    SRGB_TO_XYZ.map(|row| row.iter().sum())
}

/// An `(H, W, 3)` image with `(L*, a*, b*)` channels.
#[derive(Debug, Clone)]
pub struct LabImage {
    pixels: Tensor,
}

impl LabImage {
    pub fn tensor(&self) -> &Tensor {
        &self.pixels
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.pixels.flatten_all()?.to_vec1::<f64>()?)
    }
}

/// Clamp to `[0, 1]` in value, identity in gradient.
fn straight_through_clamp(t: &Tensor) -> Result<Tensor> {
    let clamped = t.clamp(0.0, 1.0)?;
    Ok((t + (clamped - t)?.detach())?)
}

/// sRGB electro-optical transfer (IEC 61966-2-1).
fn linearize(c: &Tensor) -> Result<Tensor> {
    let linear = c.affine(1.0 / 12.92, 0.0)?;
    // Guard keeps the power branch finite where it is masked out.
    let curved = c
        .maximum(0.04045)?
        .affine(1.0 / 1.055, 0.055 / 1.055)?
        .powf(2.4)?;
    Ok(c.le(0.04045)?.where_cond(&linear, &curved)?)
}

fn lab_f(t: &Tensor) -> Result<Tensor> {
    let knot = DELTA * DELTA * DELTA;
    let cube_root = t.maximum(knot)?.powf(1.0 / 3.0)?;
    let linear = t.affine(1.0 / (3.0 * DELTA * DELTA), 4.0 / 29.0)?;
    Ok(t.gt(knot)?.where_cond(&cube_root, &linear)?)
}

/// CIELAB of a `(..., 3)` tensor of sRGB values already in `[0, 1]`.
pub fn lab_from_unit_rgb(rgb: &Tensor) -> Result<Tensor> {
    let dims = rgb.dims().to_vec();
    if dims.last() != Some(&3) {
        return Err(Error::Shape(format!("expected trailing RGB axis, got {dims:?}")));
    }
    let flat = rgb.reshape(((), 3))?;
    let linear = linearize(&flat)?;
    let m = Tensor::new(&SRGB_TO_XYZ, &Device::Cpu)?;
    let white = Tensor::new(&white_point(), &Device::Cpu)?;
    let xyz = linear.matmul(&m.t()?)?.broadcast_div(&white)?;
    let f = lab_f(&xyz)?;
    let fx = f.narrow(1, 0, 1)?;
    let fy = f.narrow(1, 1, 1)?;
    let fz = f.narrow(1, 2, 1)?;
    let l = fy.affine(116.0, -16.0)?;
    let a = (fx - &fy)?.affine(500.0, 0.0)?;
    let b = (fy - fz)?.affine(200.0, 0.0)?;
    Ok(Tensor::cat(&[l, a, b], 1)?.reshape(dims)?)
}

/// Converts a `UNIT`-range image; values are clamped to `[0, 1]` with a
/// straight-through gradient.
pub fn srgb_to_lab(img: &ImageBuffer) -> Result<LabImage> {
    if img.range() != PixelRange::Unit {
        return Err(Error::Range(format!(
            "srgb_to_lab expects a UNIT image, got {:?}",
            img.range()
        )));
    }
    Ok(LabImage {
        pixels: lab_from_unit_rgb(&straight_through_clamp(img.tensor())?)?,
    })
}

/// CIELAB of an image in either range (signed images are remapped first).
pub fn image_to_lab(img: &ImageBuffer) -> Result<LabImage> {
    srgb_to_lab(&img.to_unit()?)
}

/// Mask-weighted mean `(L*, a*, b*)`: `Σ lab·m / Σ m` per channel.
///
/// The mask weights the LAB values; pixels are not blacked out before
/// conversion, so background never leaks into the average.
pub fn masked_mean_lab(img: &ImageBuffer, mask: &RegionMask) -> Result<Tensor> {
    if mask.height() != img.height() || mask.width() != img.width() {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match image {}x{}",
            mask.height(),
            mask.width(),
            img.height(),
            img.width()
        )));
    }
    let total = mask.sum()?;
    if total <= 0.0 {
        return Err(Error::EmptyRegion("masked_mean_lab: mask has no foreground".into()));
    }
    let lab = image_to_lab(img)?;
    let weighted = lab.tensor().broadcast_mul(&mask.channel_broadcast()?)?;
    Ok(weighted.sum((0, 1))?.affine(1.0 / total, 0.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent scalar conversion written straight from the published formulas.
    fn oracle(rgb: [f64; 3]) -> [f64; 3] {
        let lin = |c: f64| {
            if c <= 0.04045 {
                c / 12.92
            } else {
                ((c + 0.055) / 1.055).powf(2.4)
            }
        };
        let (r, g, b) = (lin(rgb[0]), lin(rgb[1]), lin(rgb[2]));
        let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
        let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
        let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
        let f = |t: f64| {
            let d: f64 = 6.0 / 29.0;
            if t > d.powi(3) {
                t.cbrt()
            } else {
                t / (3.0 * d * d) + 4.0 / 29.0
            }
        };
        let (fx, fy, fz) = (f(x / 0.9504700), f(y / 1.0000001), f(z / 1.0888300));
        [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
    }

    fn lab_of(rgb: [f64; 3]) -> Vec<f64> {
        let img = ImageBuffer::solid(1, 1, rgb, PixelRange::Unit).unwrap();
        srgb_to_lab(&img).unwrap().to_vec().unwrap()
    }

    #[test]
    fn endpoints() {
        let white = lab_of([1.0, 1.0, 1.0]);
        let black = lab_of([0.0, 0.0, 0.0]);
        for (got, want) in white.iter().zip([100.0, 0.0, 0.0]) {
            assert!((got - want).abs() < 1e-6, "{white:?}");
        }
        for got in &black {
            assert!(got.abs() < 1e-6, "{black:?}");
        }
    }

    #[test]
    fn red_matches_reference() {
        let red = lab_of([1.0, 0.0, 0.0]);
        let o = oracle([1.0, 0.0, 0.0]);
        for ((got, want), published) in red.iter().zip(o).zip([53.24, 80.09, 67.20]) {
            assert!((got - want).abs() < 0.05);
            assert!((got - published).abs() < 0.05);
        }
    }

    #[test]
    fn gray_has_no_chroma() {
        for g in [0.01, 0.2, 0.5, 0.73, 0.99] {
            let lab = lab_of([g, g, g]);
            assert!(lab[1].abs() < 1e-6 && lab[2].abs() < 1e-6, "{lab:?}");
            assert!((lab[0] - oracle([g, g, g])[0]).abs() < 1e-4);
        }
    }

    #[test]
    fn rejects_signed_images_and_empty_masks() {
        let img = ImageBuffer::solid(2, 2, [0.0; 3], PixelRange::SignedUnit).unwrap();
        assert!(srgb_to_lab(&img).is_err());
        assert!(image_to_lab(&img).is_ok());
        let empty = RegionMask::empty(2, 2).unwrap();
        assert!(matches!(masked_mean_lab(&img, &empty), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn masked_mean_of_constant_image_ignores_mask_extent() {
        let img = ImageBuffer::solid(4, 4, [0.3, 0.6, 0.1], PixelRange::Unit).unwrap();
        let full = masked_mean_lab(&img, &RegionMask::full(4, 4).unwrap()).unwrap();
        let half = masked_mean_lab(
            &img,
            &RegionMask::rect(4, 4, crate::mask::Rect::new(0, 0, 2, 4)).unwrap(),
        )
        .unwrap();
        let (a, b) = (full.to_vec1::<f64>().unwrap(), half.to_vec1::<f64>().unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
