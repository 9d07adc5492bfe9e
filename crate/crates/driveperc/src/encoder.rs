//! Shared multi-scale encoder: a small strided-convolution backbone emitting
//! stride-8/16/32 features, intra-scale self-attention on the deepest scale
//! (AIFI), and cross-scale convolutional fusion (CCFM).

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, conv2d, conv_block, multi_head_attention, Conv2d, ConvBlock, ConvSpec, Linear,
    MultiHeadAttention,
};
use crate::varstore::Scope;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Input image size (height, width); both divisible by 32.
    pub input_size: (usize, usize),
    /// Common channel width of the pyramid features.
    pub channel_width: usize,
    /// Residual blocks per backbone stage.
    pub backbone_depths: [usize; 4],
    /// Raw backbone stage widths before projection to `channel_width`.
    pub backbone_widths: [usize; 4],
    pub attention_heads: usize,
    pub attention_layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: (640, 640),
            channel_width: 256,
            backbone_depths: [1, 1, 1, 1],
            backbone_widths: [32, 64, 128, 256],
            attention_heads: 8,
            attention_layers: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::invalid_input(format!(
                "input size {h}x{w} must be divisible by 32"
            )));
        }
        if self.channel_width % self.attention_heads != 0 {
            return Err(Error::config(format!(
                "channel width {} not divisible by {} attention heads",
                self.channel_width, self.attention_heads
            )));
        }
        if self.channel_width % 4 != 0 {
            return Err(Error::config("channel width must be divisible by 4"));
        }
        Ok(())
    }

    /// Token count of the flattened pyramid: H/8*W/8 + H/16*W/16 + H/32*W/32.
    pub fn token_count(&self) -> usize {
        let (h, w) = self.input_size;
        (h / 8) * (w / 8) + (h / 16) * (w / 16) + (h / 32) * (w / 32)
    }
}

/// Stride-8/16/32 feature maps sharing one channel width, `[B, C, H_k, W_k]`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub s3: Tensor,
    pub s4: Tensor,
    pub s5: Tensor,
}

impl FeaturePyramid {
    pub fn channel_width(&self) -> Result<usize> {
        let c = self.s3.dim(1)?;
        if self.s4.dim(1)? != c || self.s5.dim(1)? != c {
            return Err(Error::invalid_input("pyramid channel widths differ"));
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channel_width()?;
        let (_, _, h3, w3) = self.s3.dims4()?;
        let (_, c4, h4, w4) = self.s4.dims4()?;
        let (_, c5, h5, w5) = self.s5.dims4()?;
        if (h3, w3) != (2 * h4, 2 * w4) || (h4, w4) != (2 * h5, 2 * w5) || c4 != c || c5 != c {
            return Err(Error::invalid_input(
                "pyramid levels must halve spatially and share channels",
            ));
        }
        Ok(())
    }
}

struct ResBlock {
    c1: ConvBlock,
    c2: ConvBlock,
}

impl ResBlock {
    fn new(scope: &Scope, c: usize) -> Result<Self> {
        Ok(ResBlock {
            c1: conv_block(&scope.pp("c1"), c, c, 3, ConvSpec::k3(1))?,
            c2: conv_block(&scope.pp("c2"), c, c, 3, ConvSpec::k3(1))?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok((x + self.c2.forward(&self.c1.forward(x, train)?, train)?)?)
    }
}

struct Stage {
    down: ConvBlock,
    blocks: Vec<ResBlock>,
}

impl Stage {
    fn new(scope: &Scope, cin: usize, cout: usize, depth: usize) -> Result<Self> {
        let mut blocks = Vec::with_capacity(depth);
        for i in 0..depth {
            blocks.push(ResBlock::new(&scope.pp(&format!("block{i}")), cout)?);
        }
        Ok(Stage {
            down: conv_block(&scope.pp("down"), cin, cout, 3, ConvSpec::k3(2))?,
            blocks,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = self.down.forward(x, train)?;
        for b in &self.blocks {
            h = b.forward(&h, train)?;
        }
        Ok(h)
    }
}

struct AifiLayer {
    norm1: nn::LayerNorm,
    attn: MultiHeadAttention,
    norm2: nn::LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
}

impl AifiLayer {
    fn new(scope: &Scope, dim: usize, heads: usize) -> Result<Self> {
        Ok(AifiLayer {
            norm1: nn::layer_norm(&scope.pp("norm1"), dim)?,
            attn: multi_head_attention(&scope.pp("attn"), dim, heads)?,
            norm2: nn::layer_norm(&scope.pp("norm2"), dim)?,
            ffn1: nn::linear(&scope.pp("ffn1"), dim, dim * 4, true)?,
            ffn2: nn::linear(&scope.pp("ffn2"), dim * 4, dim, true)?,
        })
    }

    /// Pre-norm encoder layer; the position embedding is added to the
    /// queries and keys only, not to the values.
    fn forward(&self, x: &Tensor, pos: &Tensor) -> Result<Tensor> {
        let n = self.norm1.forward(x)?;
        let qk = n.broadcast_add(pos)?;
        let x = (x + self.attn.forward(&qk, &qk, &n, None)?)?;
        let n = self.norm2.forward(&x)?;
        let f = self.ffn2.forward(&self.ffn1.forward(&n)?.silu()?)?;
        Ok((x + f)?)
    }
}

/// Residual fusion branch used by CCFM: 1x1 bottleneck on the concatenated
/// pair, a depthwise 3x3, and a 1x1 back to C with BN but no activation, so
/// a zeroed final conv makes the whole block contribute exactly zero.
struct FuseBlock {
    pw1: ConvBlock,
    dw: ConvBlock,
    pw2: Conv2d,
    bn2: nn::BatchNorm2d,
}

impl FuseBlock {
    fn new(scope: &Scope, c: usize) -> Result<Self> {
        Ok(FuseBlock {
            pw1: conv_block(&scope.pp("pw1"), 2 * c, c, 1, ConvSpec::default())?,
            dw: conv_block(
                &scope.pp("dw"),
                c,
                c,
                3,
                ConvSpec {
                    padding: 1,
                    groups: c,
                    ..Default::default()
                },
            )?,
            pw2: conv2d(
                &scope.pp("pw2"),
                c,
                c,
                1,
                ConvSpec {
                    bias: false,
                    ..Default::default()
                },
            )?,
            bn2: nn::batch_norm2d(&scope.pp("bn2"), c)?,
        })
    }

    fn forward(&self, a: &Tensor, b: &Tensor, train: bool) -> Result<Tensor> {
        let x = Tensor::cat(&[a, b], 1)?;
        let h = self.pw1.forward(&x, train)?;
        let h = self.dw.forward(&h, train)?;
        Ok(self.bn2.forward(&self.pw2.forward(&h)?, train)?)
    }
}

/// Cross-scale convolutional fusion: one top-down and one bottom-up pass,
/// each a residual correction so identity initialization is reachable.
pub struct Ccfm {
    fuse4_td: FuseBlock,
    fuse3_td: FuseBlock,
    down3: ConvBlock,
    fuse4_bu: FuseBlock,
    down4: ConvBlock,
    fuse5_bu: FuseBlock,
}

pub fn ccfm(scope: &Scope, c: usize) -> Result<Ccfm> {
    Ok(Ccfm {
        fuse4_td: FuseBlock::new(&scope.pp("fuse4_td"), c)?,
        fuse3_td: FuseBlock::new(&scope.pp("fuse3_td"), c)?,
        down3: conv_block(&scope.pp("down3"), c, c, 3, ConvSpec::k3(2))?,
        fuse4_bu: FuseBlock::new(&scope.pp("fuse4_bu"), c)?,
        down4: conv_block(&scope.pp("down4"), c, c, 3, ConvSpec::k3(2))?,
        fuse5_bu: FuseBlock::new(&scope.pp("fuse5_bu"), c)?,
    })
}

impl Ccfm {
    pub fn forward(&self, p: &FeaturePyramid, train: bool) -> Result<FeaturePyramid> {
        p.validate()?;
        let (_, _, h4, w4) = p.s4.dims4()?;
        let (_, _, h3, w3) = p.s3.dims4()?;
        // Top-down: coarse context flows into finer scales.
        let u4 = nn::upsample_bilinear(&p.s5, h4, w4)?;
        let t4 = (&p.s4 + self.fuse4_td.forward(&u4, &p.s4, train)?)?;
        let u3 = nn::upsample_bilinear(&t4, h3, w3)?;
        let t3 = (&p.s3 + self.fuse3_td.forward(&u3, &p.s3, train)?)?;
        // Bottom-up: refined detail flows back to coarser scales.
        let d4 = self.down3.forward(&t3, train)?;
        let o4 = (&t4 + self.fuse4_bu.forward(&d4, &t4, train)?)?;
        let d5 = self.down4.forward(&o4, train)?;
        let o5 = (&p.s5 + self.fuse5_bu.forward(&d5, &p.s5, train)?)?;
        Ok(FeaturePyramid {
            s3: t3,
            s4: o4,
            s5: o5,
        })
    }
}

pub struct Encoder {
    cfg: EncoderConfig,
    stem: ConvBlock,
    stages: Vec<Stage>,
    proj: [Conv2d; 3],
    aifi: Vec<AifiLayer>,
    ccfm: Ccfm,
}

pub fn encoder(scope: &Scope, cfg: &EncoderConfig) -> Result<Encoder> {
    cfg.validate()?;
    let widths = cfg.backbone_widths;
    let stem = conv_block(&scope.pp("stem"), 3, widths[0], 3, ConvSpec::k3(2))?;
    let mut stages = Vec::with_capacity(4);
    let mut cin = widths[0];
    for (i, (&w, &d)) in widths.iter().zip(&cfg.backbone_depths).enumerate() {
        stages.push(Stage::new(&scope.pp(&format!("stage{i}")), cin, w, d)?);
        cin = w;
    }
    let c = cfg.channel_width;
    let proj = [
        conv2d(&scope.pp("proj3"), widths[1], c, 1, ConvSpec::default())?,
        conv2d(&scope.pp("proj4"), widths[2], c, 1, ConvSpec::default())?,
        conv2d(&scope.pp("proj5"), widths[3], c, 1, ConvSpec::default())?,
    ];
    let mut aifi = Vec::with_capacity(cfg.attention_layers);
    for i in 0..cfg.attention_layers {
        aifi.push(AifiLayer::new(
            &scope.pp(&format!("aifi{i}")),
            c,
            cfg.attention_heads,
        )?);
    }
    let ccfm = ccfm(&scope.pp("ccfm"), c)?;
    Ok(Encoder {
        cfg: cfg.clone(),
        stem,
        stages,
        proj,
        aifi,
        ccfm,
    })
}

impl Encoder {
    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Backbone forward: `[B, 3, H, W]` image to the raw stride-8/16/32
    /// pyramid, already projected to the common channel width.
    pub fn extract_pyramid(&self, image: &Tensor, train: bool) -> Result<FeaturePyramid> {
        let (_, ch, h, w) = image.dims4()?;
        if ch != 3 || (h, w) != self.cfg.input_size {
            return Err(Error::invalid_input(format!(
                "expected [B, 3, {}, {}] input, got [B, {ch}, {h}, {w}]",
                self.cfg.input_size.0, self.cfg.input_size.1
            )));
        }
        let mut x = self.stem.forward(image, train)?;
        let mut taps = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward(&x, train)?;
            if i >= 1 {
                taps.push(x.clone());
            }
        }
        let s3 = self.proj[0].forward(&taps[0])?;
        let s4 = self.proj[1].forward(&taps[1])?;
        let s5 = self.proj[2].forward(&taps[2])?;
        let p = FeaturePyramid { s3, s4, s5 };
        p.validate()?;
        Ok(p)
    }

    /// Intra-scale self-attention on the deepest scale; shape-preserving.
    pub fn aifi_forward(&self, s5: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = s5.dims4()?;
        let pos = nn::position_embedding_2d(h, w, c, 10_000.0, s5.dtype(), s5.device())?;
        // [B, C, H, W] -> [B, H*W, C] row-major tokens.
        let mut x = s5.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        for layer in &self.aifi {
            x = layer.forward(&x, &pos)?;
        }
        Ok(x.transpose(1, 2)?.reshape((b, c, h, w))?)
    }

    pub fn ccfm_fuse(&self, p: &FeaturePyramid, train: bool) -> Result<FeaturePyramid> {
        self.ccfm.forward(p, train)
    }

    /// Full encoder: backbone, AIFI on the deepest scale, CCFM fusion.
    pub fn forward(&self, image: &Tensor, train: bool) -> Result<FeaturePyramid> {
        let p = self.extract_pyramid(image, train)?;
        let s5 = self.aifi_forward(&p.s5)?;
        self.ccfm_fuse(
            &FeaturePyramid {
                s3: p.s3,
                s4: p.s4,
                s5,
            },
            train,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use crate::varstore::VarStore;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            input_size: (64, 64),
            channel_width: 16,
            backbone_depths: [1, 1, 1, 1],
            backbone_widths: [4, 8, 8, 8],
            attention_heads: 4,
            attention_layers: 1,
        }
    }

    fn build(cfg: &EncoderConfig) -> (VarStore, Encoder) {
        let vs = VarStore::new(Device::Cpu, DType::F32, 9);
        let enc = encoder(&vs.root().pp("encoder"), cfg).unwrap();
        (vs, enc)
    }

    #[test]
    fn stride_arithmetic() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.token_count(), 8400);
        let toy = EncoderConfig {
            input_size: (320, 320),
            ..cfg
        };
        assert_eq!(toy.token_count(), 2100);

        let (vs, enc) = build(&tiny_cfg());
        let _ = vs;
        let x = Tensor::rand(0f32, 1.0, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let p = enc.extract_pyramid(&x, false).unwrap();
        assert_eq!(p.s3.dims(), &[1, 16, 8, 8]);
        assert_eq!(p.s4.dims(), &[1, 16, 4, 4]);
        assert_eq!(p.s5.dims(), &[1, 16, 2, 2]);
    }

    #[test]
    fn indivisible_input_rejected() {
        let bad = EncoderConfig {
            input_size: (641, 640),
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        // And a mismatching image against a valid config.
        let (_vs, enc) = build(&tiny_cfg());
        let x = Tensor::zeros((1, 3, 32, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(enc.extract_pyramid(&x, false).is_err());
    }

    #[test]
    fn aifi_preserves_shape_and_residual_identity() {
        let (vs, enc) = build(&tiny_cfg());
        let s5 = Tensor::rand(0f32, 1.0, (2, 16, 2, 2), &Device::Cpu).unwrap();
        let y = enc.aifi_forward(&s5).unwrap();
        assert_eq!(y.dims(), s5.dims());

        // Zero the attention output projection and the FFN's second linear:
        // both residual branches vanish, so AIFI becomes the identity.
        let dev = &Device::Cpu;
        for name in ["encoder.aifi0.attn.o.weight", "encoder.aifi0.ffn2.weight"] {
            let shape = vs.get_var(name).unwrap().as_tensor().shape().clone();
            vs.set_var(name, &Tensor::zeros(shape, DType::F32, dev).unwrap())
                .unwrap();
        }
        for name in ["encoder.aifi0.attn.o.bias", "encoder.aifi0.ffn2.bias"] {
            let shape = vs.get_var(name).unwrap().as_tensor().shape().clone();
            vs.set_var(name, &Tensor::zeros(shape, DType::F32, dev).unwrap())
                .unwrap();
        }
        let y = enc.aifi_forward(&s5).unwrap();
        let diff: f32 = (&y - &s5)
            .unwrap()
            .abs()
            .unwrap()
            .max_keepdim(0)
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar()
            .unwrap();
        assert!(diff < 1e-6, "residual identity violated by {diff}");
    }

    fn rand_pyramid(c: usize, h3: usize) -> FeaturePyramid {
        let dev = &Device::Cpu;
        FeaturePyramid {
            s3: Tensor::rand(0f32, 1.0, (1, c, h3, h3), dev).unwrap(),
            s4: Tensor::rand(0f32, 1.0, (1, c, h3 / 2, h3 / 2), dev).unwrap(),
            s5: Tensor::rand(0f32, 1.0, (1, c, h3 / 4, h3 / 4), dev).unwrap(),
        }
    }

    #[test]
    fn ccfm_preserves_shapes() {
        let vs = VarStore::new(Device::Cpu, DType::F32, 1);
        let m = ccfm(&vs.root().pp("ccfm"), 8).unwrap();
        let p = rand_pyramid(8, 8);
        let out = m.forward(&p, true).unwrap();
        assert_eq!(out.s3.dims(), p.s3.dims());
        assert_eq!(out.s4.dims(), p.s4.dims());
        assert_eq!(out.s5.dims(), p.s5.dims());
    }

    #[test]
    fn ccfm_identity_when_fusion_zeroed() {
        let vs = VarStore::new(Device::Cpu, DType::F32, 2);
        let m = ccfm(&vs.root().pp("ccfm"), 8).unwrap();
        for blk in ["fuse4_td", "fuse3_td", "fuse4_bu", "fuse5_bu"] {
            let name = format!("ccfm.{blk}.pw2.weight");
            let shape = vs.get_var(&name).unwrap().as_tensor().shape().clone();
            vs.set_var(&name, &Tensor::zeros(shape, DType::F32, &Device::Cpu).unwrap())
                .unwrap();
        }
        let p = rand_pyramid(8, 8);
        // Eval mode so BN uses its identity-initialized running statistics.
        let out = m.forward(&p, false).unwrap();
        for (a, b) in [(&out.s3, &p.s3), (&out.s4, &p.s4), (&out.s5, &p.s5)] {
            let diff: f32 = (a - b)
                .unwrap()
                .abs()
                .unwrap()
                .flatten_all()
                .unwrap()
                .max(0)
                .unwrap()
                .to_scalar()
                .unwrap();
            assert!(diff < 1e-6, "identity violated by {diff}");
        }
    }

    #[test]
    fn ccfm_gradient_reaches_all_scales() {
        let vs = VarStore::new(Device::Cpu, DType::F32, 3);
        let m = ccfm(&vs.root().pp("ccfm"), 4).unwrap();
        let dev = &Device::Cpu;
        let s3 = Var::from_tensor(&Tensor::rand(0f32, 1.0, (1, 4, 8, 8), dev).unwrap()).unwrap();
        let s4 = Var::from_tensor(&Tensor::rand(0f32, 1.0, (1, 4, 4, 4), dev).unwrap()).unwrap();
        let s5 = Var::from_tensor(&Tensor::rand(0f32, 1.0, (1, 4, 2, 2), dev).unwrap()).unwrap();
        let run = |s3: &Tensor, s4: &Tensor, s5: &Tensor| -> f32 {
            let p = FeaturePyramid {
                s3: s3.clone(),
                s4: s4.clone(),
                s5: s5.clone(),
            };
            let out = m.forward(&p, false).unwrap();
            ((out.s3.sum_all().unwrap() + out.s4.sum_all().unwrap()).unwrap()
                + out.s5.sum_all().unwrap())
            .unwrap()
            .to_scalar()
            .unwrap()
        };
        // Autograd: every input scale receives a nonzero gradient.
        let p = FeaturePyramid {
            s3: s3.as_tensor().clone(),
            s4: s4.as_tensor().clone(),
            s5: s5.as_tensor().clone(),
        };
        let out = m.forward(&p, false).unwrap();
        let loss = ((out.s3.sum_all().unwrap() + out.s4.sum_all().unwrap()).unwrap()
            + out.s5.sum_all().unwrap())
        .unwrap();
        let grads = loss.backward().unwrap();
        for (name, var) in [("s3", &s3), ("s4", &s4), ("s5", &s5)] {
            let g = grads.get(var.as_tensor()).expect("gradient present");
            let norm: f32 = g.sqr().unwrap().sum_all().unwrap().to_scalar().unwrap();
            assert!(norm > 0.0, "no gradient into {name}");
        }
        // Finite-difference cross-check on one element per scale.
        let base = run(s3.as_tensor(), s4.as_tensor(), s5.as_tensor());
        let h = 1e-2f32;
        for var in [&s3, &s4, &s5] {
            let t = var.as_tensor();
            let mut bumped: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
            bumped[0] += h;
            let tb = Tensor::from_vec(bumped, t.shape().clone(), dev).unwrap();
            let l = if std::ptr::eq(var, &s3) {
                run(&tb, s4.as_tensor(), s5.as_tensor())
            } else if std::ptr::eq(var, &s4) {
                run(s3.as_tensor(), &tb, s5.as_tensor())
            } else {
                run(s3.as_tensor(), s4.as_tensor(), &tb)
            };
            assert!((l - base).abs() > 0.0, "loss insensitive to an input scale");
        }
    }

    #[test]
    fn full_forward_is_deterministic() {
        let (_vs, enc) = build(&tiny_cfg());
        let x = Tensor::rand(0f32, 1.0, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let a = enc.forward(&x, false).unwrap();
        let b = enc.forward(&x, false).unwrap();
        let diff: f32 = (&a.s3 - &b.s3)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar()
            .unwrap();
        assert!(diff <= 1e-6);
    }
}
