//! Soft foreground masks and their algebra.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Per-pixel foreground indicator in `[0, 1]`, shape `(H, W)`.
///
/// Binary masks are the common case; soft values come from probabilistic
/// parsers. Masks never carry gradients.
#[derive(Debug, Clone)]
pub struct RegionMask {
    mask: Tensor,
}

impl RegionMask {
    pub fn new(mask: Tensor) -> Result<Self> {
        let dims = mask.dims();
        if dims.len() != 2 || dims[0] == 0 || dims[1] == 0 {
            return Err(Error::Shape(format!("mask must be (H, W), got {dims:?}")));
        }
        let mask = mask.to_dtype(DType::F64)?.detach();
        let flat = mask.flatten_all()?.to_vec1::<f64>()?;
        if let Some(v) = flat.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Self { mask })
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {height}x{width} mask",
                data.len()
            )));
        }
        Self::new(Tensor::from_vec(data, (height, width), &Device::Cpu)?)
    }

    pub fn full(height: usize, width: usize) -> Result<Self> {
        Self::new(Tensor::ones((height, width), DType::F64, &Device::Cpu)?)
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(Tensor::zeros((height, width), DType::F64, &Device::Cpu)?)
    }

    /// Ones inside rows `[top, bottom)` and columns `[left, right)`, clipped to the image.
    pub fn rect(height: usize, width: usize, rect: Rect) -> Result<Self> {
        let mut data = vec![0.0; height * width];
        for r in rect.top.min(height)..rect.bottom.min(height) {
            for c in rect.left.min(width)..rect.right.min(width) {
                data[r * width + c] = 1.0;
            }
        }
        Self::from_vec(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.mask.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.mask.dims()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.mask
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.mask.flatten_all()?.to_vec1::<f64>()?)
    }

    pub fn sum(&self) -> Result<f64> {
        Ok(self.mask.sum_all()?.to_scalar::<f64>()?)
    }

    fn check_same(&self, other: &RegionMask) -> Result<()> {
        if self.mask.dims() != other.mask.dims() {
            return Err(Error::Shape(format!(
                "masks differ in shape: {:?} vs {:?}",
                self.mask.dims(),
                other.mask.dims()
            )));
        }
        Ok(())
    }

    /// `1 - m`.
    pub fn complement(&self) -> Result<RegionMask> {
        Ok(RegionMask {
            mask: self.mask.affine(-1.0, 1.0)?,
        })
    }

    /// Elementwise `max`.
    pub fn union(&self, other: &RegionMask) -> Result<RegionMask> {
        self.check_same(other)?;
        Ok(RegionMask {
            mask: self.mask.maximum(&other.mask)?,
        })
    }

    /// Elementwise `min`.
    pub fn intersection(&self, other: &RegionMask) -> Result<RegionMask> {
        self.check_same(other)?;
        Ok(RegionMask {
            mask: self.mask.minimum(&other.mask)?,
        })
    }

    /// The `(H, W, 1)` view used to broadcast a mask over colour channels.
    pub fn channel_broadcast(&self) -> Result<Tensor> {
        Ok(self.mask.unsqueeze(2)?)
    }
}

/// Pixels outside both foregrounds: `min(1 - a, 1 - b)`, i.e. the
/// complement of the union of the two foregrounds.
pub fn mask_background(a: &RegionMask, b: &RegionMask) -> Result<RegionMask> {
    a.complement()?.intersection(&b.complement()?)
}

/// Half-open pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, bottom: usize, right: usize) -> Self {
        Rect {
            top,
            left,
            bottom,
            right,
        }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.bottom).contains(&row) && (self.left..self.right).contains(&col)
    }
}
