//! Unified adaptive segmentation decoder. Each pyramid scale is projected to
//! a common width, aligned to stride-8 resolution, and blended per task with
//! a learnable row-softmax weight matrix; a shared transposed-convolution
//! trunk recovers full resolution, and per-task refinement heads emit one
//! logit map each (drivable area and lane line).

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::lane_eval::BinaryMask;
use crate::nn::{
    self, conv2d, conv_block, conv_transpose2d, Conv2d, ConvBlock, ConvSpec, ConvTranspose2d,
};
use crate::varstore::{Init, Scope};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegTask {
    Drivable,
    Lane,
}

impl SegTask {
    pub fn row(self) -> usize {
        match self {
            SegTask::Drivable => 0,
            SegTask::Lane => 1,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "drivable" => Ok(SegTask::Drivable),
            "lane" => Ok(SegTask::Lane),
            other => Err(Error::invalid_input(format!("unknown segmentation task `{other}`"))),
        }
    }
}

/// Learnable 2x3 (task x scale) logits, row-softmax-normalized into
/// per-task blending weights over the three scales {S3, S4, F5}.
#[derive(Clone)]
pub struct ScaleWeights {
    logits: Tensor,
}

pub fn scale_weights(scope: &Scope) -> Result<ScaleWeights> {
    Ok(ScaleWeights {
        // Zero logits start at uniform (1/3, 1/3, 1/3) rows.
        logits: scope.get((2, 3), "logits", Init::Zeros)?,
    })
}

impl ScaleWeights {
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        if logits.dims() != [2, 3] {
            return Err(Error::invalid_input("scale-weight logits must be 2x3"));
        }
        Ok(ScaleWeights { logits })
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// Row-stochastic weights: softmax over the scale dimension.
    pub fn weights(&self) -> Result<Tensor> {
        Ok(candle_nn::ops::softmax(&self.logits, D::Minus1)?)
    }

    /// One task's weight row as an [3] tensor.
    pub fn row(&self, task: SegTask) -> Result<Tensor> {
        Ok(self.weights()?.narrow(0, task.row(), 1)?.squeeze(0)?)
    }
}

/// Probability maps for both tasks plus the operating thresholds.
#[derive(Clone, Debug)]
pub struct SegMasks {
    /// [B, H, W] unit-interval maps.
    pub drivable_prob: Tensor,
    pub lane_prob: Tensor,
    pub thresholds: (f64, f64),
}

impl SegMasks {
    /// Binarize one batch item: (drivable, lane) masks.
    pub fn binary_masks(&self, batch_idx: usize) -> Result<(BinaryMask, BinaryMask)> {
        let da = threshold_mask(&self.drivable_prob.get(batch_idx)?, self.thresholds.0)?;
        let ll = threshold_mask(&self.lane_prob.get(batch_idx)?, self.thresholds.1)?;
        Ok((da, ll))
    }
}

/// Binarize a [H, W] probability map: foreground where prob >= threshold.
pub fn threshold_mask(prob: &Tensor, threshold: f64) -> Result<BinaryMask> {
    validate_threshold(threshold)?;
    let (h, w) = prob.dims2()?;
    let p: Vec<f64> = prob
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1()?;
    let data = p.iter().map(|&v| u8::from(v >= threshold)).collect();
    BinaryMask::from_data(w, h, data)
}

pub fn validate_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::config(format!("threshold {t} must lie in (0, 1)")));
    }
    Ok(())
}

struct DeconvStage {
    up: ConvTranspose2d,
    bn: nn::BatchNorm2d,
}

impl DeconvStage {
    fn new(scope: &Scope, cin: usize, cout: usize) -> Result<Self> {
        Ok(DeconvStage {
            up: conv_transpose2d(&scope.pp("up"), cin, cout, 4, 2, 1, false)?,
            bn: nn::batch_norm2d(&scope.pp("bn"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward(&self.up.forward(x)?, train)?.silu()?)
    }
}

struct RefineHead {
    conv: ConvBlock,
    out: Conv2d,
}

impl RefineHead {
    fn new(scope: &Scope, c: usize) -> Result<Self> {
        Ok(RefineHead {
            conv: conv_block(&scope.pp("conv"), c, c, 3, ConvSpec::k3(1))?,
            out: conv2d(&scope.pp("out"), c, 1, 1, ConvSpec::default())?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.out.forward(&self.conv.forward(x, train)?)
    }
}

pub struct SegDecoder {
    proj: [Conv2d; 3],
    sw: ScaleWeights,
    trunk: [DeconvStage; 3],
    heads: [RefineHead; 2],
    proj_width: usize,
}

/// `channels` is the pyramid width; `proj_width` (C', divisible by 4) is the
/// decoder's internal width.
pub fn seg_decoder(scope: &Scope, channels: usize, proj_width: usize) -> Result<SegDecoder> {
    if proj_width % 4 != 0 || proj_width == 0 {
        return Err(Error::config("projection width must be a positive multiple of 4"));
    }
    let cp = proj_width;
    Ok(SegDecoder {
        proj: [
            conv2d(&scope.pp("proj_s3"), channels, cp, 1, ConvSpec::default())?,
            conv2d(&scope.pp("proj_s4"), channels, cp, 1, ConvSpec::default())?,
            conv2d(&scope.pp("proj_f5"), channels, cp, 1, ConvSpec::default())?,
        ],
        sw: scale_weights(&scope.pp("alpha"))?,
        trunk: [
            DeconvStage::new(&scope.pp("deconv0"), cp, cp / 2)?,
            DeconvStage::new(&scope.pp("deconv1"), cp / 2, cp / 4)?,
            DeconvStage::new(&scope.pp("deconv2"), cp / 4, cp / 4)?,
        ],
        heads: [
            RefineHead::new(&scope.pp("head_drivable"), cp / 4)?,
            RefineHead::new(&scope.pp("head_lane"), cp / 4)?,
        ],
        proj_width: cp,
    })
}

impl SegDecoder {
    pub fn scale_weights(&self) -> &ScaleWeights {
        &self.sw
    }

    /// Project each scale to C' channels, bilinearly align S4/F5 to S3
    /// resolution, and stack: [B, 3, C', H/8, W/8].
    pub fn project_align_stack(&self, p: &FeaturePyramid) -> Result<Tensor> {
        p.validate()?;
        let (_, _, h3, w3) = p.s3.dims4()?;
        let s3 = self.proj[0].forward(&p.s3)?;
        let s4 = nn::upsample_bilinear(&self.proj[1].forward(&p.s4)?, h3, w3)?;
        let f5 = nn::upsample_bilinear(&self.proj[2].forward(&p.s5)?, h3, w3)?;
        Ok(Tensor::stack(&[s3, s4, f5], 1)?)
    }

    /// Weighted sum over the scale dimension with the task's softmax row.
    pub fn fuse_scales(&self, stacked: &Tensor, task: SegTask) -> Result<Tensor> {
        let (_, k, _, _, _) = stacked.dims5()?;
        if k != 3 {
            return Err(Error::invalid_input("stacked tensor must have 3 scales"));
        }
        let row = self.sw.row(task)?.reshape((1, 3, 1, 1, 1))?;
        Ok(stacked.broadcast_mul(&row)?.sum(1)?)
    }

    /// Three stride-2 transposed-conv stages (8x) and the task's refinement
    /// head: [B, C', H/8, W/8] -> [B, 1, H, W] logits.
    pub fn upsample_refine(&self, fused: &Tensor, task: SegTask, train: bool) -> Result<Tensor> {
        if fused.dim(1)? != self.proj_width {
            return Err(Error::invalid_input(format!(
                "fused map has {} channels, decoder expects {}",
                fused.dim(1)?,
                self.proj_width
            )));
        }
        let mut x = fused.clone();
        for stage in &self.trunk {
            x = stage.forward(&x, train)?;
        }
        self.heads[task.row()].forward(&x, train)
    }

    /// Full per-task forward to full-resolution logits.
    pub fn forward(&self, p: &FeaturePyramid, task: SegTask, train: bool) -> Result<Tensor> {
        let stacked = self.project_align_stack(p)?;
        let fused = self.fuse_scales(&stacked, task)?;
        self.upsample_refine(&fused, task, train)
    }

    /// Inference: sigmoid probabilities for both tasks plus thresholds.
    pub fn predict_masks(
        &self,
        p: &FeaturePyramid,
        thresholds: (f64, f64),
    ) -> Result<SegMasks> {
        validate_threshold(thresholds.0)?;
        validate_threshold(thresholds.1)?;
        let da = nn::sigmoid(&self.forward(p, SegTask::Drivable, false)?)?.squeeze(1)?;
        let ll = nn::sigmoid(&self.forward(p, SegTask::Lane, false)?)?.squeeze(1)?;
        Ok(SegMasks {
            drivable_prob: da,
            lane_prob: ll,
            thresholds,
        })
    }
}
