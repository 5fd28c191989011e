use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed past the declared range (generator outputs are `tanh`-bounded
/// but may round onto the boundary).
pub const RANGE_TOLERANCE: f64 = 1e-5;

/// Declared value range of an [`ImageBuffer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PixelRange {
    /// `[-1, 1]`, the generator's native output.
    #[serde(rename = "SIGNED_UNIT")]
    SignedUnit,
    /// `[0, 1]`.
    #[serde(rename = "UNIT")]
    Unit,
}

impl PixelRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            PixelRange::SignedUnit => (-1.0, 1.0),
            PixelRange::Unit => (0.0, 1.0),
        }
    }

    /// Peak-to-peak width, used as `MAX` in PSNR and SSIM.
    pub fn width(self) -> f64 {
        let (lo, hi) = self.bounds();
        hi - lo
    }
}

/// An `(H, W, 3)` RGB image with a declared range.
#[derive(Debug, Clone)]
pub struct ImageBuffer {
    pixels: Tensor,
    range: PixelRange,
}

impl ImageBuffer {
    pub fn new(pixels: Tensor, range: PixelRange) -> Result<Self> {
        let dims = pixels.dims();
        if dims.len() != 3 || dims[2] != 3 || dims[0] == 0 || dims[1] == 0 {
            return Err(Error::Shape(format!("image must be (H, W, 3), got {dims:?}")));
        }
        let pixels = pixels.to_dtype(DType::F64)?;
        let (lo, hi) = range.bounds();
        let flat = pixels.flatten_all()?.to_vec1::<f64>()?;
        for (i, v) in flat.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("pixel entry {i} is {v}")));
            }
            if *v < lo - RANGE_TOLERANCE || *v > hi + RANGE_TOLERANCE {
                return Err(Error::Range(format!(
                    "pixel entry {i} = {v} outside {range:?} [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { pixels, range })
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>, range: PixelRange) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {height}x{width}x3 image",
                data.len()
            )));
        }
        Self::new(Tensor::from_vec(data, (height, width, 3), &Device::Cpu)?, range)
    }

    /// A constant-colour image.
    pub fn solid(height: usize, width: usize, rgb: [f64; 3], range: PixelRange) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::from_vec(height, width, data, range)
    }

    pub fn height(&self) -> usize {
        self.pixels.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.dims()[1]
    }

    pub fn range(&self) -> PixelRange {
        self.range
    }

    pub fn tensor(&self) -> &Tensor {
        &self.pixels
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.pixels.flatten_all()?.to_vec1::<f64>()?)
    }

    pub fn detach(&self) -> ImageBuffer {
        ImageBuffer {
            pixels: self.pixels.detach(),
            range: self.range,
        }
    }

    /// Affine remap into `[0, 1]`; differentiable, no clamping.
    pub fn unit_tensor(&self) -> Result<Tensor> {
        Ok(match self.range {
            PixelRange::Unit => self.pixels.clone(),
            PixelRange::SignedUnit => self.pixels.affine(0.5, 0.5)?,
        })
    }

    pub fn to_unit(&self) -> Result<ImageBuffer> {
        Ok(ImageBuffer {
            pixels: self.unit_tensor()?,
            range: PixelRange::Unit,
        })
    }

    pub fn to_signed(&self) -> Result<ImageBuffer> {
        Ok(match self.range {
            PixelRange::SignedUnit => self.clone(),
            PixelRange::Unit => ImageBuffer {
                pixels: self.pixels.affine(2.0, -1.0)?,
                range: PixelRange::SignedUnit,
            },
        })
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> Result<()> {
        if self.pixels.dims() != other.pixels.dims() {
            return Err(Error::Shape(format!(
                "images differ in shape: {:?} vs {:?}",
                self.pixels.dims(),
                other.pixels.dims()
            )));
        }
        Ok(())
    }

    pub fn same_range(&self, other: &ImageBuffer) -> Result<()> {
        if self.range != other.range {
            return Err(Error::Range(format!(
                "images declare different ranges: {:?} vs {:?}",
                self.range, other.range
            )));
        }
        Ok(())
    }
}
