//! Plain CPU image and perturbation containers.
//!
//! Models consume batched `candle` tensors of shape `(B, C, H, W)`; everything
//! that leaves or enters the library (files, defenses, metrics) goes through
//! the owned containers here.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// A `C×H×W` image with every entry in `[0, 1]`, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image has an empty side".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "image data",
                channels * height * width,
                data.len(),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(if v.is_finite() {
                Error::InvalidArgument(format!("pixel value {v} outside [0, 1]"))
            } else {
                Error::NonFinite("image data".into())
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Image with every entry set to `value` (clamped into `[0, 1]`).
    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            vec![value.clamp(0.0, 1.0); channels * height * width],
        )
    }

    /// Builds an image from arbitrary values, clamping them into `[0, 1]`.
    pub fn from_clamped(
        channels: usize,
        height: usize,
        width: usize,
        mut data: Vec<f32>,
    ) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image data".into()));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(channels, height, width, data)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// One channel as a contiguous `H×W` slice.
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(
            &self.data,
            (self.channels, self.height, self.width),
            device,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Reads a `(C, H, W)` tensor, rejecting values outside `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(c, h, w, data)
    }
}

/// Stacks equally shaped images into a `(B, C, H, W)` tensor.
pub fn stack_images(images: &[ImageTensor], device: &Device, dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::EmptyInput("image batch".into()))?;
    let shape = first.shape();
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if img.shape() != shape {
            return Err(Error::shape("image batch", shape, img.shape()));
        }
        data.extend_from_slice(&img.data);
    }
    let t = Tensor::from_vec(data, (images.len(), shape.0, shape.1, shape.2), device)?;
    Ok(t.to_dtype(dtype)?)
}

/// Splits a `(B, C, H, W)` tensor of `[0, 1]` values back into images.
pub fn unstack_images(batch: &Tensor) -> Result<Vec<ImageTensor>> {
    let (b, c, h, w) = batch.dims4()?;
    let flat = batch.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let n = c * h * w;
    (0..b)
        .map(|i| ImageTensor::new(c, h, w, flat[i * n..(i + 1) * n].to_vec()))
        .collect()
}

/// A generated perturbation `δ` with `‖δ‖∞ ≤ budget`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    budget: f32,
}

impl Perturbation {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        budget: f32,
    ) -> Result<Self> {
        if !(budget > 0.0 && budget <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "perturbation budget must lie in (0, 1], got {budget}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "perturbation data",
                channels * height * width,
                data.len(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("perturbation".into()));
        }
        if let Some(v) = data.iter().find(|v| v.abs() > budget) {
            return Err(Error::InvalidArgument(format!(
                "perturbation entry {v} exceeds budget {budget}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            budget,
        })
    }

    /// Reads a `(C, H, W)` tensor as a perturbation with the given budget.
    pub fn from_tensor(t: &Tensor, budget: f32) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(c, h, w, data, budget)
    }

    pub fn zeros(channels: usize, height: usize, width: usize, budget: f32) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            vec![0.0; channels * height * width],
            budget,
        )
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn budget(&self) -> f32 {
        self.budget
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn linf(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(
            &self.data,
            (self.channels, self.height, self.width),
            device,
        )?;
        Ok(t.to_dtype(dtype)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(ImageTensor::new(1, 1, 2, vec![0.5, 1.5]).is_err());
        assert!(matches!(
            ImageTensor::new(1, 1, 1, vec![f32::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(ImageTensor::new(2, 1, 1, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn stack_roundtrip() {
        let a = ImageTensor::filled(3, 2, 2, 0.25).unwrap();
        let b = ImageTensor::filled(3, 2, 2, 0.75).unwrap();
        let t = stack_images(&[a.clone(), b.clone()], &Device::Cpu, DType::F32).unwrap();
        assert_eq!(t.dims(), &[2, 3, 2, 2]);
        assert_eq!(unstack_images(&t).unwrap(), vec![a, b]);
    }

    #[test]
    fn perturbation_budget_is_enforced() {
        assert!(Perturbation::new(1, 1, 2, vec![0.1, -0.1], 0.1).is_ok());
        assert!(Perturbation::new(1, 1, 2, vec![0.1, -0.2], 0.1).is_err());
        assert!(Perturbation::new(1, 1, 1, vec![0.0], 0.0).is_err());
    }
}
