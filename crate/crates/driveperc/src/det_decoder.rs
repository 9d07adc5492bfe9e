//! Query-based detection decoder. The detection-branch pyramid is flattened
//! into one token sequence; an encoder head scores every token and the top-N
//! become initial queries with anchor boxes; L decoder layers of
//! self-attention, multi-scale deformable cross-attention, and FFN refine
//! boxes and class logits. No NMS anywhere: the matching loss makes
//! predictions one-to-one.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{
    self, linear, mlp, mlp_zero_init_last, multi_head_attention, LayerNorm, Linear, Mlp,
    MultiHeadAttention,
};
use crate::varstore::{Init, Scope};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DetConfig {
    /// Fixed number of object queries (N).
    pub num_queries: usize,
    /// Decoder layer count (L).
    pub layers: usize,
    pub heads: usize,
    /// Deformable sampling points per scale.
    pub points: usize,
    /// Denoising groups (G); the training-time query count is N + G*M.
    pub dn_groups: usize,
}

impl Default for DetConfig {
    fn default() -> Self {
        DetConfig {
            num_queries: 300,
            layers: 6,
            heads: 8,
            points: 4,
            dn_groups: 100,
        }
    }
}

impl DetConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.num_queries == 0 || self.layers == 0 || self.points == 0 {
            return Err(Error::config("queries, layers, and points must be positive"));
        }
        if channels % self.heads != 0 {
            return Err(Error::config(format!(
                "channel width {channels} not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Flattened multi-scale tokens. `raw` is the pure flatten (row-major S3,
/// then S4, then S5) so it can be inverted; `embedded` additionally carries
/// sinusoidal position and learnable level encodings.
#[derive(Clone, Debug)]
pub struct Tokens {
    pub raw: Tensor,
    pub embedded: Tensor,
    pub shapes: [(usize, usize); 3],
}

impl Tokens {
    pub fn count(&self) -> usize {
        self.shapes.iter().map(|&(h, w)| h * w).sum()
    }

    /// Invert the flatten: recover the three [B, C, H_k, W_k] maps from
    /// `raw`.
    pub fn unflatten(&self) -> Result<[Tensor; 3]> {
        let (b, _, c) = self.raw.dims3()?;
        let mut out = Vec::with_capacity(3);
        let mut start = 0;
        for &(h, w) in &self.shapes {
            let level = self.raw.narrow(1, start, h * w)?;
            out.push(level.transpose(1, 2)?.reshape((b, c, h, w))?);
            start += h * w;
        }
        Ok([out[0].clone(), out[1].clone(), out[2].clone()])
    }
}

/// Selected initial queries.
#[derive(Clone, Debug)]
pub struct QuerySelection {
    /// Token indices per batch item, unique, descending score order.
    pub indices: Vec<Vec<u32>>,
    /// Selection scores aligned with `indices`.
    pub scores: Vec<Vec<f32>>,
    /// Initial content queries [B, N, C], detached.
    pub content: Tensor,
    /// Initial boxes [B, N, 4] normalized cxcywh, detached.
    pub boxes: Tensor,
}

/// Encoder-head outputs over all tokens, kept for the selection aux loss.
#[derive(Clone, Debug)]
pub struct EncOutputs {
    pub logits: Tensor, // [B, T]
    pub boxes: Tensor,  // [B, T, 4]
}

#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub boxes: Tensor,  // [B, K, 4]
    pub logits: Tensor, // [B, K]
}

struct DecoderLayer {
    box_embed: Mlp,
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    // Deformable cross-attention.
    value_proj: Linear,
    offset: Linear,
    attn_weight: Linear,
    out_proj: Linear,
    norm2: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    norm3: LayerNorm,
    // Per-layer prediction heads.
    cls: Linear,
    box_head: Mlp,
}

impl DecoderLayer {
    fn new(scope: &Scope, c: usize, heads: usize, points: usize) -> Result<Self> {
        Ok(DecoderLayer {
            box_embed: mlp(&scope.pp("box_embed"), &[4, c, c])?,
            self_attn: multi_head_attention(&scope.pp("self_attn"), c, heads)?,
            norm1: nn::layer_norm(&scope.pp("norm1"), c)?,
            value_proj: linear(&scope.pp("value_proj"), c, c, true)?,
            offset: linear(&scope.pp("offset"), c, heads * 3 * points * 2, true)?,
            attn_weight: linear(&scope.pp("attn_weight"), c, heads * 3 * points, true)?,
            out_proj: linear(&scope.pp("out_proj"), c, c, true)?,
            norm2: nn::layer_norm(&scope.pp("norm2"), c)?,
            ffn1: linear(&scope.pp("ffn1"), c, c * 2, true)?,
            ffn2: linear(&scope.pp("ffn2"), c * 2, c, true)?,
            norm3: nn::layer_norm(&scope.pp("norm3"), c)?,
            cls: linear(&scope.pp("cls"), c, 1, true)?,
            box_head: mlp_zero_init_last(&scope.pp("box_head"), &[c, c, 4])?,
        })
    }
}

pub struct DetDecoder {
    cfg: DetConfig,
    channels: usize,
    level_embed: Tensor,
    enc_cls: Linear,
    enc_box: Mlp,
    layers: Vec<DecoderLayer>,
}

pub fn det_decoder(scope: &Scope, channels: usize, cfg: &DetConfig) -> Result<DetDecoder> {
    cfg.validate(channels)?;
    let mut layers = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        layers.push(DecoderLayer::new(
            &scope.pp(&format!("layer{i}")),
            channels,
            cfg.heads,
            cfg.points,
        )?);
    }
    Ok(DetDecoder {
        cfg: *cfg,
        channels,
        level_embed: scope.get((3, channels), "level_embed", Init::Normal { std: 0.02 })?,
        enc_cls: linear(&scope.pp("enc_cls"), channels, 1, true)?,
        enc_box: mlp_zero_init_last(&scope.pp("enc_box"), &[channels, channels, 4])?,
        layers,
    })
}

/// Anchor boxes for every token: cell centers with a per-level base extent
/// of 0.05 * 2^level, normalized cxcywh, in token order.
pub fn anchor_boxes(
    shapes: &[(usize, usize); 3],
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    let mut data = Vec::new();
    for (lvl, &(h, w)) in shapes.iter().enumerate() {
        let extent = 0.05 * f64::powi(2.0, lvl as i32);
        for y in 0..h {
            for x in 0..w {
                data.push((x as f64 + 0.5) / w as f64);
                data.push((y as f64 + 0.5) / h as f64);
                data.push(extent);
                data.push(extent);
            }
        }
    }
    let t = data.len() / 4;
    Ok(Tensor::from_vec(data, (t, 4), device)?.to_dtype(dtype)?)
}

impl DetDecoder {
    pub fn config(&self) -> &DetConfig {
        &self.cfg
    }

    /// Flatten the pyramid into one token sequence, S3 row-major first.
    pub fn flatten_concat(&self, p: &FeaturePyramid) -> Result<Tokens> {
        p.validate()?;
        let (b, c, h3, w3) = p.s3.dims4()?;
        if c != self.channels {
            return Err(Error::config(format!(
                "pyramid width {c} does not match decoder width {}",
                self.channels
            )));
        }
        let (_, _, h4, w4) = p.s4.dims4()?;
        let (_, _, h5, w5) = p.s5.dims4()?;
        let shapes = [(h3, w3), (h4, w4), (h5, w5)];
        let flat = |x: &Tensor, h: usize, w: usize| -> Result<Tensor> {
            Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
        };
        let raw = Tensor::cat(
            &[
                flat(&p.s3, h3, w3)?,
                flat(&p.s4, h4, w4)?,
                flat(&p.s5, h5, w5)?,
            ],
            1,
        )?;
        let mut embedded_levels = Vec::with_capacity(3);
        let mut start = 0;
        for (lvl, &(h, w)) in shapes.iter().enumerate() {
            let pos = nn::position_embedding_2d(h, w, c, 10_000.0, raw.dtype(), raw.device())?;
            let lev = self
                .level_embed
                .narrow(0, lvl, 1)?
                .to_dtype(raw.dtype())?;
            let tok = raw
                .narrow(1, start, h * w)?
                .broadcast_add(&pos.unsqueeze(0)?)?
                .broadcast_add(&lev.unsqueeze(0)?)?;
            embedded_levels.push(tok);
            start += h * w;
        }
        Ok(Tokens {
            raw,
            embedded: Tensor::cat(&embedded_levels, 1)?,
            shapes,
        })
    }

    /// Score every token and pick the top-N as initial queries. Ties break
    /// toward the lower token index; N > T is a config error.
    pub fn select_queries(&self, tokens: &Tokens, n: usize) -> Result<(QuerySelection, EncOutputs)> {
        let t = tokens.count();
        if n > t {
            return Err(Error::config(format!(
                "cannot select {n} queries from {t} tokens"
            )));
        }
        let (b, _, c) = tokens.raw.dims3()?;
        let logits = self.enc_cls.forward(&tokens.embedded)?.squeeze(2)?; // [B, T]
        let anchors = anchor_boxes(&tokens.shapes, tokens.raw.dtype(), tokens.raw.device())?;
        let delta = self.enc_box.forward(&tokens.embedded)?; // [B, T, 4]
        let boxes = nn::sigmoid(
            &delta.broadcast_add(&nn::inverse_sigmoid(&anchors.unsqueeze(0)?)?)?,
        )?;

        let scores = nn::sigmoid(&logits)?;
        let score_rows: Vec<Vec<f32>> = scores.to_dtype(DType::F32)?.to_vec2()?;
        let mut indices = Vec::with_capacity(b);
        let mut sel_scores = Vec::with_capacity(b);
        for row in &score_rows {
            let mut order: Vec<usize> = (0..t).collect();
            // Stable sort by descending score keeps lower indices first on ties.
            order.sort_by(|&a, &bb| row[bb].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
            let top = &order[..n];
            indices.push(top.iter().map(|&i| i as u32).collect::<Vec<u32>>());
            sel_scores.push(top.iter().map(|&i| row[i]).collect::<Vec<f32>>());
        }

        // Gather per batch item; content and boxes start detached.
        let mut content_rows = Vec::with_capacity(b);
        let mut box_rows = Vec::with_capacity(b);
        for (bi, idx) in indices.iter().enumerate() {
            let it = Tensor::from_vec(idx.clone(), n, tokens.raw.device())?;
            content_rows.push(tokens.raw.get(bi)?.index_select(&it, 0)?.reshape((1, n, c))?);
            box_rows.push(boxes.get(bi)?.index_select(&it, 0)?.reshape((1, n, 4))?);
        }
        let selection = QuerySelection {
            indices,
            scores: sel_scores,
            content: Tensor::cat(&content_rows, 0)?.detach(),
            boxes: Tensor::cat(&box_rows, 0)?.detach(),
        };
        Ok((selection, EncOutputs { logits, boxes }))
    }

    /// Multi-scale deformable attention: each query samples `points`
    /// bilinear taps per scale and head around its box, weighted by a
    /// softmax over all taps.
    fn deformable_attention(
        &self,
        layer: &DecoderLayer,
        queries: &Tensor, // [B, K, C]
        boxes: &Tensor,   // [B, K, 4]
        tokens: &Tokens,
    ) -> Result<Tensor> {
        let (b, k, c) = queries.dims3()?;
        let heads = self.cfg.heads;
        let points = self.cfg.points;
        let dh = c / heads;

        // Values split by head: [B*H, T, Dh].
        let value = layer.value_proj.forward(&tokens.raw)?;
        let t = tokens.count();
        let value = value
            .reshape((b, t, heads, dh))?
            .permute((0, 2, 1, 3))?
            .reshape((b * heads, t, dh))?
            .contiguous()?;

        // Offsets [B, K, H, 3, P, 2] and tap weights [B, K, H, 3*P].
        let offsets = layer
            .offset
            .forward(queries)?
            .reshape((b, k, heads, 3, points, 2))?;
        let weights = candle_nn::ops::softmax(
            &layer
                .attn_weight
                .forward(queries)?
                .reshape((b, k, heads, 3 * points))?,
            candle_core::D::Minus1,
        )?
        .reshape((b, k, heads, 3, points))?;

        let cx = boxes.narrow(2, 0, 1)?.reshape((b, k, 1, 1))?;
        let cy = boxes.narrow(2, 1, 1)?.reshape((b, k, 1, 1))?;
        let bw = boxes.narrow(2, 2, 1)?.reshape((b, k, 1, 1))?;
        let bh = boxes.narrow(2, 3, 1)?.reshape((b, k, 1, 1))?;

        let mut acc: Option<Tensor> = None;
        let mut level_start = 0usize;
        for (lvl, &(h, w)) in tokens.shapes.iter().enumerate() {
            let hw = h * w;
            let val_l = value.narrow(1, level_start, hw)?.contiguous()?;
            level_start += hw;

            // Normalized sample locations: box center plus half-extent-scaled
            // offsets. [B, K, H, P]
            let off = offsets.narrow(3, lvl, 1)?.squeeze(3)?; // [B,K,H,P,2]
            let ox = off.narrow(4, 0, 1)?.squeeze(4)?;
            let oy = off.narrow(4, 1, 1)?.squeeze(4)?;
            let px_n = cx.broadcast_add(&ox.broadcast_mul(&(&bw * 0.5)?)?)?;
            let py_n = cy.broadcast_add(&oy.broadcast_mul(&(&bh * 0.5)?)?)?;
            // To feature-grid coordinates with half-pixel centers.
            let px = ((px_n * w as f64)? - 0.5)?;
            let py = ((py_n * h as f64)? - 0.5)?;

            // [B, K, H, P] -> [B*H, K*P]
            let regroup = |z: &Tensor| -> Result<Tensor> {
                Ok(z.permute((0, 2, 1, 3))?
                    .reshape((b * heads, k * points))?
                    .contiguous()?)
            };
            let px = regroup(&px)?;
            let py = regroup(&py)?;

            // Corner indices are constants; fractions stay differentiable.
            let x0f = px.detach().floor()?;
            let y0f = py.detach().floor()?;
            let fx = (&px - &x0f)?.reshape((b * heads, k * points, 1))?;
            let fy = (&py - &y0f)?.reshape((b * heads, k * points, 1))?;
            let clamp_idx = |f: &Tensor, max: usize| -> Result<Tensor> {
                Ok(f.clamp(0f64, (max - 1) as f64)?.to_dtype(DType::U32)?)
            };
            let x0 = clamp_idx(&x0f, w)?;
            let x1 = clamp_idx(&(&x0f + 1.0)?, w)?;
            let y0 = clamp_idx(&y0f, h)?;
            let y1 = clamp_idx(&(&y0f + 1.0)?, h)?;

            let gather_at = |yi: &Tensor, xi: &Tensor| -> Result<Tensor> {
                let idx = ((yi.to_dtype(DType::F32)? * w as f64)?
                    + xi.to_dtype(DType::F32)?)?
                .to_dtype(DType::U32)?
                .reshape((b * heads, k * points, 1))?
                .expand((b * heads, k * points, dh))?
                .contiguous()?;
                Ok(val_l.gather(&idx, 1)?)
            };
            let v00 = gather_at(&y0, &x0)?;
            let v01 = gather_at(&y0, &x1)?;
            let v10 = gather_at(&y1, &x0)?;
            let v11 = gather_at(&y1, &x1)?;
            let one_fx = (1.0 - &fx)?;
            let one_fy = (1.0 - &fy)?;
            let top = (v00.broadcast_mul(&one_fx)? + v01.broadcast_mul(&fx)?)?;
            let bot = (v10.broadcast_mul(&one_fx)? + v11.broadcast_mul(&fx)?)?;
            let sample = (top.broadcast_mul(&one_fy)? + bot.broadcast_mul(&fy)?)?;

            // Tap weights for this level: [B,K,H,P] -> [B*H, K*P, 1].
            let w_l = weights.narrow(3, lvl, 1)?.squeeze(3)?;
            let w_l = regroup(&w_l)?.reshape((b * heads, k * points, 1))?;
            let contrib = sample.broadcast_mul(&w_l)?;
            acc = Some(match acc {
                Some(a) => (a + contrib)?,
                None => contrib,
            });
        }
        let acc = acc.expect("three pyramid levels");
        // Sum over points, re-merge heads: [B*H, K, P, Dh] -> [B, K, C].
        let out = acc
            .reshape((b, heads, k, points, dh))?
            .sum(3)?
            .permute((0, 2, 1, 3))?
            .reshape((b, k, c))?;
        layer.out_proj.forward(&out)
    }

    /// Run all decoder layers. `attn_mask` is an additive [K, K] mask for
    /// the self-attention (used to isolate denoising groups).
    pub fn decode_layers(
        &self,
        content: &Tensor, // [B, K, C]
        init_boxes: &Tensor, // [B, K, 4]
        tokens: &Tokens,
        attn_mask: Option<&Tensor>,
    ) -> Result<Vec<LayerOutput>> {
        let mut q = content.clone();
        let mut boxes = init_boxes.clone();
        let mut outputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            // Self-attention with box-derived positional embedding.
            let pos = layer.box_embed.forward(&boxes)?;
            let n1 = layer.norm1.forward(&q)?;
            let qk = (&n1 + &pos)?;
            q = (&q + layer.self_attn.forward(&qk, &qk, &n1, attn_mask)?)?;
            // Deformable cross-attention over the multi-scale tokens.
            let n2 = layer.norm2.forward(&q)?;
            q = (&q + self.deformable_attention(layer, &n2, &boxes, tokens)?)?;
            // FFN.
            let n3 = layer.norm3.forward(&q)?;
            q = (&q + layer.ffn2.forward(&layer.ffn1.forward(&n3)?.silu()?)?)?;
            // Heads: iterative box refinement from the detached reference.
            let delta = layer.box_head.forward(&q)?;
            let new_boxes = nn::sigmoid(&(delta + nn::inverse_sigmoid(&boxes)?)?)?;
            let logits = layer.cls.forward(&q)?.squeeze(2)?;
            outputs.push(LayerOutput {
                boxes: new_boxes.clone(),
                logits,
            });
            boxes = new_boxes.detach();
        }
        Ok(outputs)
    }

    /// Inference path: flatten, select, decode; returns per-layer outputs
    /// (the last layer is the prediction).
    pub fn forward(&self, p: &FeaturePyramid) -> Result<Vec<LayerOutput>> {
        let tokens = self.flatten_concat(p)?;
        let (sel, _enc) = self.select_queries(&tokens, self.cfg.num_queries)?;
        self.decode_layers(&sel.content, &sel.boxes, &tokens, None)
    }
}

/// Additive self-attention mask isolating the denoising queries from the
/// main queries and the denoising groups from each other. Layout: the first
/// `n_main` queries are the main ones, followed by `groups` blocks of
/// `group_size` denoising queries.
pub fn denoising_attention_mask(
    n_main: usize,
    groups: usize,
    group_size: usize,
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    let k = n_main + groups * group_size;
    let neg = -1e9f64;
    let mut data = vec![0f64; k * k];
    for i in 0..k {
        for j in 0..k {
            let gi = if i < n_main { None } else { Some((i - n_main) / group_size) };
            let gj = if j < n_main { None } else { Some((j - n_main) / group_size) };
            // Main queries must not see any denoising query (leakage), and
            // each denoising group only sees itself and the main queries...
            let blocked = match (gi, gj) {
                (None, Some(_)) => true,          // main -> dn: blocked
                (Some(a), Some(b)) => a != b,     // dn -> other dn group: blocked
                (Some(_), None) => false,         // dn -> main: allowed
                (None, None) => false,
            };
            if blocked {
                data[i * k + j] = neg;
            }
        }
    }
    Ok(Tensor::from_vec(data, (k, k), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use crate::varstore::VarStore;

    fn pyramid(c: usize, h3: usize, seed: f32) -> FeaturePyramid {
        let dev = &Device::Cpu;
        FeaturePyramid {
            s3: Tensor::rand(seed, seed + 1.0, (1, c, h3, h3), dev).unwrap(),
            s4: Tensor::rand(seed, seed + 1.0, (1, c, h3 / 2, h3 / 2), dev).unwrap(),
            s5: Tensor::rand(seed, seed + 1.0, (1, c, h3 / 4, h3 / 4), dev).unwrap(),
        }
    }

    fn build(c: usize, cfg: DetConfig, seed: u64) -> (VarStore, DetDecoder) {
        let vs = VarStore::new(Device::Cpu, DType::F32, seed);
        let d = det_decoder(&vs.root().pp("det"), c, &cfg).unwrap();
        (vs, d)
    }

    fn small_cfg() -> DetConfig {
        DetConfig {
            num_queries: 10,
            layers: 2,
            heads: 2,
            points: 2,
            dn_groups: 4,
        }
    }

    #[test]
    fn token_count_arithmetic() {
        // 640x640 -> 80^2 + 40^2 + 20^2 = 8400; 320x320 -> 2100.
        assert_eq!(80 * 80 + 40 * 40 + 20 * 20, 8400);
        assert_eq!(40 * 40 + 20 * 20 + 10 * 10, 2100);
        let (_vs, d) = build(8, small_cfg(), 0);
        let t = d.flatten_concat(&pyramid(8, 8, 0.0)).unwrap();
        assert_eq!(t.count(), 64 + 16 + 4);
        assert_eq!(t.raw.dims(), &[1, 84, 8]);
        assert_eq!(t.embedded.dims(), &[1, 84, 8]);
    }

    #[test]
    fn flatten_round_trip() {
        let (_vs, d) = build(8, small_cfg(), 1);
        let p = pyramid(8, 8, 0.0);
        let t = d.flatten_concat(&p).unwrap();
        let [r3, r4, r5] = t.unflatten().unwrap();
        for (a, b) in [(&r3, &p.s3), (&r4, &p.s4), (&r5, &p.s5)] {
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
            assert_eq!(diff, 0.0);
        }
    }

    #[test]
    fn select_all_tokens_and_tie_break() {
        let (_vs, d) = build(8, small_cfg(), 2);
        let t = d.flatten_concat(&pyramid(8, 8, 0.0)).unwrap();
        // N = T: every token selected.
        let (sel, _) = d.select_queries(&t, 84).unwrap();
        let mut sorted = sel.indices[0].clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..84).collect::<Vec<u32>>());
        // N > T rejected.
        assert!(d.select_queries(&t, 85).is_err());
        // Identical tokens -> identical scores -> tie-break by lower index.
        let dev = &Device::Cpu;
        let flat = FeaturePyramid {
            s3: Tensor::ones((1, 8, 8, 8), DType::F32, dev).unwrap(),
            s4: Tensor::ones((1, 8, 4, 4), DType::F32, dev).unwrap(),
            s5: Tensor::ones((1, 8, 2, 2), DType::F32, dev).unwrap(),
        };
        // Strip the position/level embeddings so scores are exactly tied.
        let mut t2 = d.flatten_concat(&flat).unwrap();
        t2.embedded = t2.raw.clone();
        let (sel, _) = d.select_queries(&t2, 5).unwrap();
        // All S3 tokens are identical, so the first five indices must be 0..5.
        assert_eq!(sel.indices[0][..5], [0, 1, 2, 3, 4]);
        // Scores descend.
        for w in sel.scores[0].windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn per_layer_outputs_and_box_validity() {
        let (_vs, d) = build(8, small_cfg(), 3);
        let p = pyramid(8, 8, -0.5);
        let outs = d.forward(&p).unwrap();
        assert_eq!(outs.len(), 2);
        for o in &outs {
            assert_eq!(o.boxes.dims(), &[1, 10, 4]);
            assert_eq!(o.logits.dims(), &[1, 10]);
            let v: Vec<f32> = o.boxes.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
            // Positive extents.
            let rows: Vec<Vec<f32>> = o.boxes.get(0).unwrap().to_vec2().unwrap();
            assert!(rows.iter().all(|r| r[2] > 0.0 && r[3] > 0.0));
        }
    }

    #[test]
    fn single_layer_zero_refinement_returns_anchors() {
        // With the zero-initialized box heads (enc and decoder), the initial
        // boxes are the anchors and one decoder layer returns them unchanged.
        let cfg = DetConfig {
            layers: 1,
            ..small_cfg()
        };
        let (_vs, d) = build(8, cfg, 4);
        let t = d.flatten_concat(&pyramid(8, 8, 0.0)).unwrap();
        let (sel, _) = d.select_queries(&t, 84).unwrap();
        let anchors = anchor_boxes(&t.shapes, DType::F32, &Device::Cpu).unwrap();
        // Reorder anchors by the selection indices.
        let idx = Tensor::from_vec(sel.indices[0].clone(), 84, &Device::Cpu).unwrap();
        let expect = anchors.index_select(&idx, 0).unwrap();
        let outs = d
            .decode_layers(&sel.content, &sel.boxes, &t, None)
            .unwrap();
        let diff: f32 = (&outs[0].boxes.get(0).unwrap() - &expect)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar()
            .unwrap();
        assert!(diff < 1e-5, "anchor identity violated by {diff}");
    }

    #[test]
    fn anchors_are_cell_centers() {
        let a = anchor_boxes(&[(2, 2), (1, 1), (1, 1)], DType::F32, &Device::Cpu).unwrap();
        let rows: Vec<Vec<f32>> = a.to_vec2().unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(&rows[0][..2], &[0.25, 0.25]);
        assert_eq!(&rows[3][..2], &[0.75, 0.75]);
        assert!((rows[0][2] - 0.05).abs() < 1e-6);
        assert!((rows[4][2] - 0.1).abs() < 1e-6); // level 1 extent
        assert!((rows[5][2] - 0.2).abs() < 1e-6); // level 2 extent
    }

    #[test]
    fn denoising_mask_blocks_leakage() {
        let m = denoising_attention_mask(2, 2, 2, DType::F32, &Device::Cpu).unwrap();
        let rows: Vec<Vec<f32>> = m.to_vec2().unwrap();
        let blocked = |i: usize, j: usize| rows[i][j] < -1e8;
        // Main queries (0,1) cannot attend to any denoising query (2..6).
        for i in 0..2 {
            for j in 2..6 {
                assert!(blocked(i, j), "main {i} sees dn {j}");
            }
            for j in 0..2 {
                assert!(!blocked(i, j));
            }
        }
        // Group 0 (2,3) is isolated from group 1 (4,5) both ways.
        assert!(blocked(2, 4) && blocked(3, 5) && blocked(4, 2) && blocked(5, 3));
        // Denoising queries may see the main queries and themselves.
        assert!(!blocked(2, 0) && !blocked(2, 3) && !blocked(4, 5));
    }

    #[test]
    fn gradients_flow_into_tokens() {
        let (_vs, d) = build(8, small_cfg(), 5);
        let dev = &Device::Cpu;
        let s3 = candle_core::Var::from_tensor(
            &Tensor::rand(0f32, 1.0, (1, 8, 8, 8), dev).unwrap(),
        )
        .unwrap();
        let p = FeaturePyramid {
            s3: s3.as_tensor().clone(),
            s4: Tensor::rand(0f32, 1.0, (1, 8, 4, 4), dev).unwrap(),
            s5: Tensor::rand(0f32, 1.0, (1, 8, 2, 2), dev).unwrap(),
        };
        let outs = d.forward(&p).unwrap();
        let last = outs.last().unwrap();
        let loss = (last.logits.sqr().unwrap().sum_all().unwrap()
            + last.boxes.sqr().unwrap().sum_all().unwrap())
        .unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(s3.as_tensor()).expect("gradient into s3 tokens");
        let n: f32 = g.sqr().unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert!(n > 0.0);
    }
}
