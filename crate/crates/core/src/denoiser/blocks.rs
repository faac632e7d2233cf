use candle_core::{Tensor, D};
use candle_nn::{conv2d, group_norm, linear, Conv2d, Conv2dConfig, GroupNorm, Linear, Module, VarBuilder};

use crate::error::Result;

const NORM_EPS: f64 = 1e-5;

/// Convolution run one batch item at a time. With batched input, candle 0.8
/// computes a wrong kernel gradient on CPU.
#[derive(Debug, Clone)]
pub(crate) struct Conv(Conv2d);

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let b = x.dim(0)?;
        if b == 1 {
            return self.0.forward(x);
        }
        let parts = (0..b)
            .map(|i| self.0.forward(&x.narrow(0, i, 1)?))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Tensor::cat(&parts, 0)
    }
}

fn conv3x3(c_in: usize, c_out: usize, stride: usize, vb: VarBuilder) -> Result<Conv> {
    let cfg = Conv2dConfig {
        padding: 1,
        stride,
        ..Default::default()
    };
    Ok(Conv(conv2d(c_in, c_out, 3, cfg, vb)?))
}

/// Residual block with the fused time/granularity embedding added after the
/// first convolution.
#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    emb_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub(crate) fn new(c_in: usize, c_out: usize, emb_dim: usize, groups: usize, vb: VarBuilder) -> Result<Self> {
        let skip = if c_in != c_out {
            Some(Conv(conv2d(c_in, c_out, 1, Default::default(), vb.pp("skip"))?))
        } else {
            None
        };
        Ok(Self {
            norm1: group_norm(groups, c_in, NORM_EPS, vb.pp("norm1"))?,
            conv1: conv3x3(c_in, c_out, 1, vb.pp("conv1"))?,
            emb_proj: linear(emb_dim, c_out, vb.pp("emb_proj"))?,
            norm2: group_norm(groups, c_out, NORM_EPS, vb.pp("norm2"))?,
            conv2: conv3x3(c_out, c_out, 1, vb.pp("conv2"))?,
            skip,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let e = self.emb_proj.forward(&emb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&e)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let x = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((x + h)?)
    }
}

/// Multi-head cross-attention from spatial features to the text embedding.
#[derive(Debug, Clone)]
pub(crate) struct CrossAttention {
    norm: GroupNorm,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    heads: usize,
}

impl CrossAttention {
    pub(crate) fn new(
        channels: usize,
        context_dim: usize,
        heads: usize,
        groups: usize,
        vb: VarBuilder,
    ) -> Result<Self> {
        Ok(Self {
            norm: group_norm(groups, channels, NORM_EPS, vb.pp("norm"))?,
            to_q: linear(channels, channels, vb.pp("to_q"))?,
            to_k: linear(context_dim, channels, vb.pp("to_k"))?,
            to_v: linear(context_dim, channels, vb.pp("to_v"))?,
            to_out: linear(channels, channels, vb.pp("to_out"))?,
            heads,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let l = context.dim(1)?;
        let dh = c / self.heads;
        let tokens = self
            .norm
            .forward(x)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let split = |t: Tensor, n: usize| -> Result<Tensor> {
            Ok(t.reshape((b, n, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.to_q.forward(&tokens)?, h * w)?;
        let k = split(self.to_k.forward(context)?, l)?;
        let v = split(self.to_v.forward(context)?, l)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, h * w, c))?;
        let out = self
            .to_out
            .forward(&out)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, c, h, w))?;
        Ok((x + out)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct DownStage {
    pub(crate) res: ResBlock,
    pub(crate) attn: Option<CrossAttention>,
    pub(crate) downsample: Option<Conv>,
}

#[derive(Debug, Clone)]
pub(crate) struct UpStage {
    pub(crate) res: ResBlock,
    pub(crate) attn: Option<CrossAttention>,
    pub(crate) upsample: Option<Conv>,
    /// Output head, present on the last stage only.
    pub(crate) head: Option<(GroupNorm, Conv)>,
}

impl DownStage {
    pub(crate) fn forward(&self, x: &Tensor, emb: &Tensor, context: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut h = self.res.forward(x, emb)?;
        if let Some(attn) = &self.attn {
            h = attn.forward(&h, context)?;
        }
        let skip = h.clone();
        if let Some(down) = &self.downsample {
            h = down.forward(&h)?;
        }
        Ok((h, skip))
    }
}

impl UpStage {
    pub(crate) fn forward(&self, x: &Tensor, skip: &Tensor, emb: &Tensor, context: &Tensor) -> Result<Tensor> {
        let h = Tensor::cat(&[x, skip], 1)?;
        let mut h = self.res.forward(&h, emb)?;
        if let Some(attn) = &self.attn {
            h = attn.forward(&h, context)?;
        }
        if let Some(up) = &self.upsample {
            let (_, _, hh, ww) = h.dims4()?;
            h = up.forward(&h.upsample_nearest2d(2 * hh, 2 * ww)?)?;
        }
        if let Some((norm, conv)) = &self.head {
            h = conv.forward(&norm.forward(&h)?.silu()?)?;
        }
        Ok(h)
    }
}

pub(crate) fn stage_conv(c_in: usize, c_out: usize, stride: usize, vb: VarBuilder) -> Result<Conv> {
    conv3x3(c_in, c_out, stride, vb)
}

pub(crate) fn head_norm(groups: usize, channels: usize, vb: VarBuilder) -> Result<GroupNorm> {
    Ok(group_norm(groups, channels, NORM_EPS, vb)?)
}
