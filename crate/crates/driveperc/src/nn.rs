//! Minimal layer library on top of candle tensors.
//!
//! Layers hold tensor handles created through a [`Scope`], so the owning
//! [`crate::varstore::VarStore`] keeps the canonical named parameters for
//! optimization, checkpointing, and gradient analysis.

use candle_core::{DType, Tensor, Var, D};

use crate::error::Result;
use crate::varstore::{Init, Scope};

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
            bias: true,
        }
    }
}

impl ConvSpec {
    pub fn k3(stride: usize) -> Self {
        ConvSpec {
            stride,
            padding: 1,
            ..Default::default()
        }
    }
}

#[derive(Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    spec: ConvSpec,
}

pub fn conv2d(scope: &Scope, cin: usize, cout: usize, k: usize, spec: ConvSpec) -> Result<Conv2d> {
    let fan_in = (cin / spec.groups) * k * k;
    let weight = scope.get(
        (cout, cin / spec.groups, k, k),
        "weight",
        Init::FanIn { fan_in },
    )?;
    let bias = if spec.bias {
        Some(scope.get(cout, "bias", Init::FanIn { fan_in })?)
    } else {
        None
    };
    Ok(Conv2d { weight, bias, spec })
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = &self.spec;
        let y = x.conv2d(&self.weight, s.padding, s.stride, s.dilation, s.groups)?;
        Ok(match &self.bias {
            Some(b) => {
                let c = b.dims1()?;
                y.broadcast_add(&b.reshape((1, c, 1, 1))?)?
            }
            None => y,
        })
    }
}

#[derive(Clone)]
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

pub fn conv_transpose2d(
    scope: &Scope,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    bias: bool,
) -> Result<ConvTranspose2d> {
    let fan_in = cin * k * k;
    let weight = scope.get((cin, cout, k, k), "weight", Init::FanIn { fan_in })?;
    let bias = if bias {
        Some(scope.get(cout, "bias", Init::FanIn { fan_in })?)
    } else {
        None
    };
    Ok(ConvTranspose2d {
        weight,
        bias,
        stride,
        padding,
    })
}

impl ConvTranspose2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, self.padding, 0, self.stride, 1)?;
        Ok(match &self.bias {
            Some(b) => {
                let c = b.dims1()?;
                y.broadcast_add(&b.reshape((1, c, 1, 1))?)?
            }
            None => y,
        })
    }
}

#[derive(Clone)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

pub fn batch_norm2d(scope: &Scope, channels: usize) -> Result<BatchNorm2d> {
    Ok(BatchNorm2d {
        gamma: scope.get(channels, "gamma", Init::Ones)?,
        beta: scope.get(channels, "beta", Init::Zeros)?,
        running_mean: scope.buffer(channels, "running_mean", Init::Zeros)?,
        running_var: scope.buffer(channels, "running_var", Init::Ones)?,
        eps: 1e-5,
        momentum: 0.1,
    })
}

impl BatchNorm2d {
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let n = (b * h * w) as f64;
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered
                .sqr()?
                .mean_keepdim(0)?
                .mean_keepdim(2)?
                .mean_keepdim(3)?;
            // Track running statistics with the unbiased variance.
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().reshape(c)? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (var.detach().reshape(c)? * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let xhat = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        xhat.broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)
            .map_err(Into::into)
    }
}

/// Conv + BN + SiLU, the basic block used across the encoder.
#[derive(Clone)]
pub struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

pub fn conv_block(
    scope: &Scope,
    cin: usize,
    cout: usize,
    k: usize,
    spec: ConvSpec,
) -> Result<ConvBlock> {
    let spec = ConvSpec { bias: false, ..spec };
    Ok(ConvBlock {
        conv: conv2d(&scope.pp("conv"), cin, cout, k, spec)?,
        bn: batch_norm2d(&scope.pp("bn"), cout)?,
    })
}

impl ConvBlock {
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, train)?.silu()?)
    }
}

#[derive(Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

pub fn linear(scope: &Scope, cin: usize, cout: usize, bias: bool) -> Result<Linear> {
    Ok(Linear {
        weight: scope.get((cout, cin), "weight", Init::FanIn { fan_in: cin })?,
        bias: if bias {
            Some(scope.get(cout, "bias", Init::FanIn { fan_in: cin })?)
        } else {
            None
        },
    })
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let cin = *dims.last().expect("linear input must have a last dim");
        let n: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((n, cin))?.matmul(&self.weight.t()?)?;
        let cout = self.weight.dim(0)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = cout;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

pub fn layer_norm(scope: &Scope, dim: usize) -> Result<LayerNorm> {
    Ok(LayerNorm {
        gamma: scope.get(dim, "gamma", Init::Ones)?,
        beta: scope.get(dim, "beta", Init::Zeros)?,
        eps: 1e-5,
    })
}

impl LayerNorm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let xhat = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        xhat.broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)
            .map_err(Into::into)
    }
}

#[derive(Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    head_dim: usize,
}

pub fn multi_head_attention(scope: &Scope, dim: usize, heads: usize) -> Result<MultiHeadAttention> {
    assert_eq!(dim % heads, 0, "dim must be divisible by heads");
    Ok(MultiHeadAttention {
        q: linear(&scope.pp("q"), dim, dim, true)?,
        k: linear(&scope.pp("k"), dim, dim, true)?,
        v: linear(&scope.pp("v"), dim, dim, true)?,
        o: linear(&scope.pp("o"), dim, dim, true)?,
        heads,
        head_dim: dim / heads,
    })
}

impl MultiHeadAttention {
    /// `mask` is an additive attention mask of shape `[Tq, Tk]` (0 to keep,
    /// a large negative number to block).
    pub fn forward(
        &self,
        q_in: &Tensor,
        k_in: &Tensor,
        v_in: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (b, tq, c) = q_in.dims3()?;
        let tk = k_in.dim(1)?;
        let split = |t: Tensor, tt: usize| -> candle_core::Result<Tensor> {
            t.reshape((b, tt, self.heads, self.head_dim))?
                .permute((0, 2, 1, 3))?
                .contiguous()
        };
        let q = split(self.q.forward(q_in)?, tq)?;
        let k = split(self.k.forward(k_in)?, tk)?;
        let v = split(self.v.forward(v_in)?, tk)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut att = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
        if let Some(m) = mask {
            att = att.broadcast_add(&m.reshape((1, 1, tq, tk))?)?;
        }
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let out = att.matmul(&v)?;
        let out = out.permute((0, 2, 1, 3))?.reshape((b, tq, c))?;
        self.o.forward(&out)
    }
}

/// Two-layer feed-forward block with SiLU.
#[derive(Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

pub fn mlp(scope: &Scope, dims: &[usize]) -> Result<Mlp> {
    mlp_impl(scope, dims, false)
}

/// An MLP whose final projection starts at zero, so residual refinements
/// begin as the identity.
pub fn mlp_zero_init_last(scope: &Scope, dims: &[usize]) -> Result<Mlp> {
    mlp_impl(scope, dims, true)
}

fn mlp_impl(scope: &Scope, dims: &[usize], zero_last: bool) -> Result<Mlp> {
    assert!(dims.len() >= 2);
    let mut layers = Vec::new();
    for i in 0..dims.len() - 1 {
        let sc = scope.pp(&format!("fc{i}"));
        let last = i == dims.len() - 2;
        if zero_last && last {
            layers.push(Linear {
                weight: sc.get((dims[i + 1], dims[i]), "weight", Init::Zeros)?,
                bias: Some(sc.get(dims[i + 1], "bias", Init::Zeros)?),
            });
        } else {
            layers.push(linear(&sc, dims[i], dims[i + 1], true)?);
        }
    }
    Ok(Mlp { layers })
}

impl Mlp {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.silu()?;
            }
        }
        Ok(h)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

pub fn inverse_sigmoid(x: &Tensor) -> Result<Tensor> {
    let eps = 1e-5;
    let x = x.clamp(eps, 1.0 - eps)?;
    Ok((x.clone() / (1.0 - x)?)?.log()?)
}

/// Interpolation matrix for 1-D bilinear resampling with half-pixel centers
/// (`align_corners=false`).
pub fn bilinear_matrix(
    in_len: usize,
    out_len: usize,
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    let scale = in_len as f64 / out_len as f64;
    let mut data = vec![0f64; out_len * in_len];
    for o in 0..out_len {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let x0 = src.floor();
        let frac = src - x0;
        let i0 = (x0 as isize).clamp(0, in_len as isize - 1) as usize;
        let i1 = ((x0 as isize) + 1).clamp(0, in_len as isize - 1) as usize;
        data[o * in_len + i0] += 1.0 - frac;
        data[o * in_len + i1] += frac;
    }
    Ok(Tensor::from_vec(data, (out_len, in_len), device)?.to_dtype(dtype)?)
}

/// Bilinear upsampling of a `[B, C, H, W]` map via two interpolation matmuls.
pub fn upsample_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let wr = bilinear_matrix(h, oh, x.dtype(), x.device())?.reshape((1, oh, h))?;
    let wc = bilinear_matrix(w, ow, x.dtype(), x.device())?
        .t()?
        .reshape((1, w, ow))?
        .contiguous()?;
    let flat = x.reshape((b * c, h, w))?;
    let rows = wr.broadcast_matmul(&flat)?;
    let out = rows.broadcast_matmul(&wc)?;
    Ok(out.reshape((b, c, oh, ow))?)
}

/// Sinusoidal 2-D position embedding, `[H*W, C]` with row-major token order.
pub fn position_embedding_2d(
    h: usize,
    w: usize,
    c: usize,
    temperature: f64,
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    assert_eq!(c % 4, 0, "embedding width must be divisible by 4");
    let quarter = c / 4;
    let mut data = vec![0f64; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let tok = y * w + x;
            for i in 0..quarter {
                let omega = 1.0 / temperature.powf(i as f64 / quarter as f64);
                let base = tok * c;
                data[base + i] = (x as f64 * omega).sin();
                data[base + quarter + i] = (x as f64 * omega).cos();
                data[base + 2 * quarter + i] = (y as f64 * omega).sin();
                data[base + 3 * quarter + i] = (y as f64 * omega).cos();
            }
        }
    }
    Ok(Tensor::from_vec(data, (h * w, c), device)?.to_dtype(dtype)?)
}

pub fn is_finite_scalar(t: &Tensor) -> Result<bool> {
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use crate::varstore::VarStore;

    fn store() -> VarStore {
        VarStore::new(Device::Cpu, DType::F32, 42)
    }

    #[test]
    fn bilinear_fixture_half_pixel() {
        // 2x2 map [[0,1],[0,1]] -> 4x4 rows [0, 0.25, 0.75, 1].
        let x = Tensor::from_vec(vec![0f32, 1.0, 0.0, 1.0], (1, 1, 2, 2), &Device::Cpu).unwrap();
        let y = upsample_bilinear(&x, 4, 4).unwrap();
        let rows: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        let expected = [0.0, 0.25, 0.75, 1.0];
        for r in 0..4 {
            for c in 0..4 {
                assert!((rows[r * 4 + c] - expected[c]).abs() < 1e-6, "({r},{c})");
            }
        }
    }

    #[test]
    fn bilinear_preserves_constants() {
        let x = Tensor::full(3.5f32, (1, 2, 3, 5), &Device::Cpu).unwrap();
        let y = upsample_bilinear(&x, 9, 10).unwrap();
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|&e| (e - 3.5).abs() < 1e-6));
    }

    #[test]
    fn conv_block_shape_and_finite() {
        let s = store();
        let blk = conv_block(&s.root().pp("b"), 3, 8, 3, ConvSpec::k3(2)).unwrap();
        let x = Tensor::rand(0f32, 1.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let y = blk.forward(&x, true).unwrap();
        assert_eq!(y.dims(), &[2, 8, 8, 8]);
        assert!(is_finite_scalar(&y).unwrap());
    }

    #[test]
    fn batch_norm_normalizes_in_train_mode() {
        let s = store();
        let bn = batch_norm2d(&s.root().pp("bn"), 4).unwrap();
        let x = Tensor::rand(-2f32, 5.0, (3, 4, 6, 6), &Device::Cpu).unwrap();
        let y = bn.forward(&x, true).unwrap();
        let mean = y
            .mean_keepdim(0)
            .unwrap()
            .mean_keepdim(2)
            .unwrap()
            .mean_keepdim(3)
            .unwrap();
        let m: Vec<f32> = mean.flatten_all().unwrap().to_vec1().unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn attention_shape_and_mask() {
        let s = store();
        let mha = multi_head_attention(&s.root().pp("att"), 16, 4).unwrap();
        let x = Tensor::rand(0f32, 1.0, (2, 5, 16), &Device::Cpu).unwrap();
        let y = mha.forward(&x, &x, &x, None).unwrap();
        assert_eq!(y.dims(), &[2, 5, 16]);
        let mask = Tensor::full(-1e9f32, (5, 5), &Device::Cpu).unwrap();
        // Fully-masked attention still produces finite output (uniform rows).
        let y2 = mha.forward(&x, &x, &x, Some(&mask)).unwrap();
        assert!(is_finite_scalar(&y2).unwrap());
    }

    #[test]
    fn inverse_sigmoid_roundtrip() {
        let p = Tensor::from_vec(vec![0.1f32, 0.5, 0.9], (3,), &Device::Cpu).unwrap();
        let x = inverse_sigmoid(&p).unwrap();
        let back = sigmoid(&x).unwrap();
        let v: Vec<f32> = back.to_vec1().unwrap();
        for (a, b) in v.iter().zip([0.1, 0.5, 0.9]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn linear_on_3d_input() {
        let s = store();
        let l = linear(&s.root().pp("l"), 8, 3, true).unwrap();
        let x = Tensor::rand(0f32, 1.0, (2, 5, 8), &Device::Cpu).unwrap();
        let y = l.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 5, 3]);
    }
}
