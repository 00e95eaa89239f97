//! Channel gating and single-head scaled dot-product attention over the
//! spatial positions of a feature map.

use candle_core::Tensor;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{sigmoid, softmax_last_dim, Linear, ParamStore};

/// Squeeze-and-excitation gate: `x ⊙ σ(W₂·ReLU(W₁·avgpool(x)))`.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    squeeze: Linear,
    excite: Linear,
}

impl ChannelAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::InvalidArgument(format!(
                "reduction {reduction} must divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            squeeze: Linear::new(store, &format!("{name}.squeeze"), channels, hidden, rng)?,
            excite: Linear::new(store, &format!("{name}.excite"), hidden, channels, rng)?,
        })
    }

    pub fn from_parts(squeeze: Linear, excite: Linear) -> Self {
        Self { squeeze, excite }
    }

    /// Per-sample channel gate, shape `(B, C)`, entries in `[0, 1]`.
    pub fn gate(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = x.mean((2, 3))?;
        let hidden = self.squeeze.forward(&pooled)?.relu()?;
        sigmoid(&self.excite.forward(&hidden)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let g = self.gate(x)?.reshape((b, c, 1, 1))?;
        Ok(x.broadcast_mul(&g)?)
    }
}

/// `(B, C, H, W)` → `(B, H·W, C)` token matrix.
fn to_tokens(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

/// `(B, T, C)` tokens back onto a `(B, C, H, W)` grid.
fn from_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = t.dims3()?;
    Ok(t.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Query/key/value projections shared by both attention flavours.
#[derive(Debug, Clone)]
pub struct QkvProjection {
    query: Linear,
    key: Linear,
    value: Linear,
    key_dim: usize,
}

impl QkvProjection {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        key_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), channels, key_dim, rng)?,
            key: Linear::new(store, &format!("{name}.key"), channels, key_dim, rng)?,
            value: Linear::new(store, &format!("{name}.value"), channels, channels, rng)?,
            key_dim,
        })
    }

    pub fn from_parts(query: Linear, key: Linear, value: Linear) -> Result<Self> {
        let key_dim = query.weight().dims2()?.0;
        Ok(Self {
            query,
            key,
            value,
            key_dim,
        })
    }

    pub fn value(&self) -> &Linear {
        &self.value
    }

    /// Attends from `queries` (B, C, H, W) to `context` (B or 1, C, H', W').
    ///
    /// Returns the attended map on the query grid and the `(B, T, T')` weights.
    fn attend(&self, queries: &Tensor, context: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, cq, h, w) = queries.dims4()?;
        let (_, ck, _, _) = context.dims4()?;
        if cq != ck {
            return Err(Error::shape("attention channels", cq, ck));
        }
        let q = self.query.forward(&to_tokens(queries)?)?;
        let ctx = to_tokens(context)?;
        let k = self.key.forward(&ctx)?;
        let v = self.value.forward(&ctx)?;
        let scores = q
            .broadcast_matmul(&k.transpose(1, 2)?.contiguous()?)?
            .affine(1.0 / (self.key_dim as f64).sqrt(), 0.0)?;
        let weights = softmax_last_dim(&scores)?;
        let out = weights.broadcast_matmul(&v)?;
        Ok((from_tokens(&out, h, w)?, weights))
    }
}

/// `Softmax(Q Kᵀ / √d_k) V` with Q, K, V all projected from the input.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    proj: QkvProjection,
}

impl SelfAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        key_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            proj: QkvProjection::new(store, name, channels, key_dim, rng)?,
        })
    }

    pub fn from_projection(proj: QkvProjection) -> Self {
        Self { proj }
    }

    pub fn projection(&self) -> &QkvProjection {
        &self.proj
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.proj.attend(x, x)?.0)
    }

    pub fn forward_with_weights(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.proj.attend(x, x)
    }
}

/// Queries from the image stream, keys and values from the condition stream.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    proj: QkvProjection,
}

impl CrossAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        key_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            proj: QkvProjection::new(store, name, channels, key_dim, rng)?,
        })
    }

    pub fn from_projection(proj: QkvProjection) -> Self {
        Self { proj }
    }

    pub fn projection(&self) -> &QkvProjection {
        &self.proj
    }

    pub fn forward(&self, x: &Tensor, condition: &Tensor) -> Result<Tensor> {
        Ok(self.proj.attend(x, condition)?.0)
    }

    pub fn forward_with_weights(&self, x: &Tensor, condition: &Tensor) -> Result<(Tensor, Tensor)> {
        self.proj.attend(x, condition)
    }
}
