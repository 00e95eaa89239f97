//! Fusion of image features with the projected target latent.

use candle_core::Tensor;
use rand::Rng;

use super::attention::{ChannelAttention, CrossAttention, SelfAttention};
use crate::error::{Error, Result};
use crate::latent::LATENT_CHANNELS;
use crate::nn::{Conv2d, ParamStore};

fn batch_latent(z_c: &Tensor, batch: usize) -> Result<Tensor> {
    let (bz, c, h, w) = z_c.dims4()?;
    if bz == batch {
        Ok(z_c.clone())
    } else if bz == 1 {
        Ok(z_c.broadcast_as((batch, c, h, w))?.contiguous()?)
    } else {
        Err(Error::shape("latent batch", batch, bz))
    }
}

/// Concatenates `x ∥ z_c` along channels and maps back to `x`'s width with a
/// 1×1 convolution.
pub fn fuse_cbf(x: &Tensor, z_c: &Tensor, conv: &Conv2d) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (_, _, zh, zw) = z_c.dims4()?;
    if (h, w) != (zh, zw) {
        return Err(Error::shape("fusion spatial dims", (h, w), (zh, zw)));
    }
    if conv.in_channels() != c + z_c.dims()[1] {
        return Err(Error::shape(
            "fusion conv input width",
            c + z_c.dims()[1],
            conv.in_channels(),
        ));
    }
    let z = batch_latent(z_c, b)?;
    let joined = Tensor::cat(&[x, &z], 1)?;
    conv.forward(&joined)
}

/// Convolution-based fusion block.
#[derive(Debug, Clone)]
pub struct CbfFusion {
    conv: Conv2d,
}

impl CbfFusion {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                channels + LATENT_CHANNELS,
                channels,
                1,
                1,
                0,
                rng,
            )?,
        })
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    pub fn forward(&self, x: &Tensor, z_c: &Tensor) -> Result<Tensor> {
        fuse_cbf(x, z_c, &self.conv)
    }
}

/// Transformer-based fusion: condition alignment, channel gating, then
/// self-attention followed by cross-attention onto the condition.
#[derive(Debug, Clone)]
pub struct TbfFusion {
    align: Conv2d,
    channel: ChannelAttention,
    self_attn: SelfAttention,
    cross_attn: CrossAttention,
}

impl TbfFusion {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        key_dim: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            align: Conv2d::new(
                store,
                &format!("{name}.align"),
                LATENT_CHANNELS,
                channels,
                1,
                1,
                0,
                rng,
            )?,
            channel: ChannelAttention::new(store, &format!("{name}.channel"), channels, reduction, rng)?,
            self_attn: SelfAttention::new(store, &format!("{name}.self"), channels, key_dim, rng)?,
            cross_attn: CrossAttention::new(store, &format!("{name}.cross"), channels, key_dim, rng)?,
        })
    }

    pub fn align(&self) -> &Conv2d {
        &self.align
    }

    pub fn channel_attention(&self) -> &ChannelAttention {
        &self.channel
    }

    pub fn self_attention(&self) -> &SelfAttention {
        &self.self_attn
    }

    pub fn cross_attention(&self) -> &CrossAttention {
        &self.cross_attn
    }

    /// Condition features `z_t` on the channel width of the image stream.
    pub fn align_condition(&self, z_c: &Tensor) -> Result<Tensor> {
        self.align.forward(z_c)
    }

    pub fn forward(&self, x_c: &Tensor, z_c: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x_c.dims4()?;
        let (_, _, zh, zw) = z_c.dims4()?;
        if (h, w) != (zh, zw) {
            return Err(Error::shape("fusion spatial dims", (h, w), (zh, zw)));
        }
        let z_t = self.align_condition(z_c)?;
        let x_ca = self.channel.forward(x_c)?;
        let x_sa = self.self_attn.forward(&x_ca)?;
        self.cross_attn.forward(&x_sa, &z_t)
    }

    /// Softmax weights of both attention stages, for inspection.
    pub fn attention_weights(&self, x_c: &Tensor, z_c: &Tensor) -> Result<(Tensor, Tensor)> {
        let z_t = self.align_condition(z_c)?;
        let x_ca = self.channel.forward(x_c)?;
        let (x_sa, w_sa) = self.self_attn.forward_with_weights(&x_ca)?;
        let (_, w_ca) = self.cross_attn.forward_with_weights(&x_sa, &z_t)?;
        Ok((w_sa, w_ca))
    }
}
