//! Gate Control with Adapter: extracts task-specific features from shared
//! encoder features and fuses the two streams through a clipped, learned
//! gate, `out = shared + gate * (task - shared)`, to limit negative transfer
//! between tasks. One independent instance exists per scale and per branch.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, conv2d, conv_block, Conv2d, ConvBlock, ConvSpec};
use crate::varstore::Scope;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GcaConfig {
    pub channels: usize,
    /// Bottleneck reduction of the channel-attention branch.
    pub reduction_ratio: usize,
    /// Hard clamp bounds of the fusion gate.
    pub gate_clip: (f64, f64),
}

impl GcaConfig {
    pub fn new(channels: usize) -> Self {
        GcaConfig {
            channels,
            reduction_ratio: 16,
            gate_clip: (0.05, 0.95),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || 2 * self.channels % self.reduction_ratio != 0 {
            return Err(Error::config(format!(
                "2*channels ({}) must be divisible by the reduction ratio {}",
                2 * self.channels,
                self.reduction_ratio
            )));
        }
        let (lo, hi) = self.gate_clip;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::config(format!(
                "gate clip ({lo}, {hi}) must satisfy 0 < lo < hi < 1"
            )));
        }
        Ok(())
    }
}

/// Global average pool over the spatial dims: [B,C,H,W] -> [B,C,1,1].
fn gap(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim(2)?.mean_keepdim(3)?)
}

pub struct Gca {
    cfg: GcaConfig,
    // Adapter: 1x1 cross-channel transform then a depthwise-separable conv.
    ad_pw: ConvBlock,
    ad_dw: Conv2d,
    ad_pw2: Conv2d,
    ad_bn: nn::BatchNorm2d,
    // Channel attention (squeeze-and-excitation on the concatenated pair).
    ca_fc1: Conv2d,
    ca_fc2: Conv2d,
    // Spatial attention over pooled channel statistics.
    sa_conv: Conv2d,
    // Feature-gating module: per-channel blend between CA and SA.
    fg_fc: Conv2d,
}

pub fn gca(scope: &Scope, cfg: &GcaConfig) -> Result<Gca> {
    cfg.validate()?;
    let c = cfg.channels;
    let r = cfg.reduction_ratio;
    Ok(Gca {
        cfg: *cfg,
        ad_pw: conv_block(&scope.pp("adapter.pw"), c, c, 1, ConvSpec::default())?,
        ad_dw: conv2d(
            &scope.pp("adapter.dw"),
            c,
            c,
            3,
            ConvSpec {
                padding: 1,
                groups: c,
                bias: false,
                ..Default::default()
            },
        )?,
        ad_pw2: conv2d(
            &scope.pp("adapter.pw2"),
            c,
            c,
            1,
            ConvSpec {
                bias: false,
                ..Default::default()
            },
        )?,
        ad_bn: nn::batch_norm2d(&scope.pp("adapter.bn"), c)?,
        ca_fc1: conv2d(&scope.pp("ca.fc1"), 2 * c, 2 * c / r, 1, ConvSpec::default())?,
        ca_fc2: conv2d(&scope.pp("ca.fc2"), 2 * c / r, c, 1, ConvSpec::default())?,
        sa_conv: conv2d(
            &scope.pp("sa.conv"),
            2,
            1,
            7,
            ConvSpec {
                padding: 3,
                ..Default::default()
            },
        )?,
        fg_fc: conv2d(&scope.pp("fg.fc"), 2 * c, c, 1, ConvSpec::default())?,
    })
}

impl Gca {
    pub fn config(&self) -> &GcaConfig {
        &self.cfg
    }

    fn check_channels(&self, x: &Tensor) -> Result<()> {
        if x.dim(1)? != self.cfg.channels {
            return Err(Error::config(format!(
                "expected {} channels, got {}",
                self.cfg.channels,
                x.dim(1)?
            )));
        }
        Ok(())
    }

    /// Task-specific feature extraction:
    /// SiLU(BN(separable-conv(SiLU(BN(1x1-conv(x)))))), shape-preserving.
    pub fn adapter_forward(&self, shared: &Tensor, train: bool) -> Result<Tensor> {
        self.check_channels(shared)?;
        let h = self.ad_pw.forward(shared, train)?;
        let h = self.ad_pw2.forward(&self.ad_dw.forward(&h)?)?;
        Ok(self.ad_bn.forward(&h, train)?.silu()?)
    }

    /// Channel attention: SE bottleneck on the pooled concatenated pair,
    /// broadcast over space. [B, C, 1, 1].
    fn channel_attention(&self, pair: &Tensor) -> Result<Tensor> {
        let h = self.ca_fc1.forward(&gap(pair)?)?.silu()?;
        nn::sigmoid(&self.ca_fc2.forward(&h)?)
    }

    /// Spatial attention: 7x7 conv on the channel-mean and channel-max maps
    /// of the concatenated pair, broadcast over channels. [B, 1, H, W].
    fn spatial_attention(&self, pair: &Tensor) -> Result<Tensor> {
        let mean = pair.mean_keepdim(1)?;
        let max = pair.max_keepdim(1)?;
        let stats = Tensor::cat(&[mean, max], 1)?;
        nn::sigmoid(&self.sa_conv.forward(&stats)?)
    }

    /// Per-channel blending factor between CA and SA. [B, C, 1, 1].
    fn feature_gate(&self, pair: &Tensor) -> Result<Tensor> {
        nn::sigmoid(&self.fg_fc.forward(&gap(pair)?)?)
    }

    /// The fused gate: FG * CA + (1 - FG) * SA, clipped to the configured
    /// bounds. [B, C, H, W], every element inside [lo, hi].
    pub fn compute_gate(&self, shared: &Tensor, task: &Tensor) -> Result<Tensor> {
        if shared.dims() != task.dims() {
            return Err(Error::invalid_input(format!(
                "shared {:?} and task {:?} shapes differ",
                shared.dims(),
                task.dims()
            )));
        }
        self.check_channels(shared)?;
        let pair = Tensor::cat(&[shared, task], 1)?;
        let ca = self.channel_attention(&pair)?;
        let sa = self.spatial_attention(&pair)?;
        let fg = self.feature_gate(&pair)?;
        combine_and_clip(&fg, &ca, &sa, self.cfg.gate_clip)
    }

    /// Full fusion: out = shared + gate * (task - shared).
    pub fn fuse(&self, shared: &Tensor, train: bool) -> Result<Tensor> {
        let task = self.adapter_forward(shared, train)?;
        let gate = self.compute_gate(shared, &task)?;
        Ok((shared + gate.broadcast_mul(&(&task - shared)?)?)?)
    }
}

/// Pure gate combination, exposed for endpoint verification:
/// clip(FG * CA + (1 - FG) * SA). FG/CA broadcast as [B,C,1,1] against
/// SA's [B,1,H,W] (or any mutually broadcastable shapes).
pub fn combine_and_clip(
    fg: &Tensor,
    ca: &Tensor,
    sa: &Tensor,
    clip: (f64, f64),
) -> Result<Tensor> {
    let raw = (fg.broadcast_mul(ca)?).broadcast_add(&(1.0 - fg)?.broadcast_mul(sa)?)?;
    Ok(raw.clamp(clip.0, clip.1)?)
}
