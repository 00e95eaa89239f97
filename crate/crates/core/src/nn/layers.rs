use candle_core::{Tensor, D};
use rand::Rng;

use super::ParamStore;
use crate::error::Result;

/// 2D convolution with bias, fan-in uniform initialization.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let weight = store.uniform(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            bound,
            rng,
        )?;
        let bias = store.uniform(&format!("{name}.bias"), &[c_out], bound, rng)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// He-uniform weights (`bound = √(6 / fan_in)`) and zero bias, for plain
    /// ReLU stacks without normalization.
    #[allow(clippy::too_many_arguments)]
    pub fn he(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = (6.0 / (c_in * kernel * kernel) as f64).sqrt();
        let weight = store.uniform(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            bound,
            rng,
        )?;
        let bias = store.constant(&format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Wraps existing `(c_out, c_in, k, k)` weights and `(c_out,)` bias.
    pub fn from_tensors(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (c_out, _, _, _) = weight.dims4()?;
        if bias.dims() != [c_out] {
            return Err(crate::Error::shape("conv bias", [c_out], bias.dims()));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let b = self.bias.reshape((1, self.out_channels(), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// Transposed 2D convolution with bias.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        // torch convention: fan-in of a transposed conv is computed on dim 1.
        let bound = 1.0 / ((c_out * kernel * kernel) as f64).sqrt();
        let weight = store.uniform(
            &format!("{name}.weight"),
            &[c_in, c_out, kernel, kernel],
            bound,
            rng,
        )?;
        let bias = store.uniform(&format!("{name}.bias"), &[c_out], bound, rng)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c_out = self.weight.dims()[1];
        let y = x.conv_transpose2d(&self.weight, self.padding, 0, self.stride, 1)?;
        let b = self.bias.reshape((1, c_out, 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// Affine map over the last axis: `y = x Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[d_out, d_in], bound, rng)?;
        let bias = store.uniform(&format!("{name}.bias"), &[d_out], bound, rng)?;
        Ok(Self { weight, bias })
    }

    /// He-uniform weights and zero bias.
    pub fn he(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = (6.0 / d_in as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[d_out, d_in], bound, rng)?;
        let bias = store.constant(&format!("{name}.bias"), &[d_out], 0.0)?;
        Ok(Self { weight, bias })
    }

    /// Wraps existing `(d_out, d_in)` weights and `(d_out,)` bias.
    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (d_out, _) = weight.dims2()?;
        if bias.dims() != [d_out] {
            return Err(crate::Error::shape("linear bias", [d_out], bias.dims()));
        }
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

/// Per-sample, per-channel normalization over the spatial axes with a learned affine.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.gamma"), &[channels], 1.0)?,
            beta: store.constant(&format!("{name}.beta"), &[channels], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let flat = x.reshape((b, c, h * w))?;
        let mean = flat.mean_keepdim(D::Minus1)?;
        let centered = flat.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let g = self.gamma.reshape((1, c, 1))?;
        let bt = self.beta.reshape((1, c, 1))?;
        Ok(normed
            .broadcast_mul(&g)?
            .broadcast_add(&bt)?
            .reshape((b, c, h, w))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::keyed_rng;
    use candle_core::{DType, Device};

    #[test]
    fn conv_shapes() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = keyed_rng("t", &[0]);
        let conv = Conv2d::new(&mut store, "c", 3, 8, 3, 2, 1, &mut rng).unwrap();
        let up = ConvTranspose2d::new(&mut store, "u", 8, 4, 4, 2, 1, &mut rng).unwrap();
        let x = Tensor::zeros((2, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 8, 8, 8]);
        assert_eq!(up.forward(&y).unwrap().dims(), &[2, 4, 16, 16]);
    }

    #[test]
    fn instance_norm_standardizes() {
        let mut store = ParamStore::new(DType::F64);
        let norm = InstanceNorm::new(&mut store, "n", 2).unwrap();
        let x = Tensor::arange(0f64, 32.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 2, 4, 4))
            .unwrap();
        let y = norm.forward(&x).unwrap().flatten_from(2).unwrap();
        let m = y.mean(2).unwrap().to_vec2::<f64>().unwrap();
        let v = y.sqr().unwrap().mean(2).unwrap().to_vec2::<f64>().unwrap();
        for c in 0..2 {
            assert!(m[0][c].abs() < 1e-12);
            assert!((v[0][c] - 1.0).abs() < 1e-4);
        }
    }
}
