//! The full training objective: bipartite-matching detection loss with
//! auxiliary (per-layer) and denoising branches, plus focal/BCE/Tversky
//! segmentation losses, combined as an unweighted sum
//! `L = L_det + L_segda + L_segll`.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{self, CostMatrix};

/// Weights of the individual loss terms.
///
/// `alpha`/`beta`/`gamma` scale the classification, L1 and GIoU detection
/// terms; `lambda_*` scale the segmentation terms. Note `alpha` here is the
/// classification weight, unrelated to the learnable scale weights of the
/// segmentation decoder.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_fl: f64,
    pub lambda_bce: f64,
    pub lambda_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 5.0,
            gamma: 2.0,
            lambda_fl: 24.0,
            lambda_bce: 8.0,
            lambda_tv: 8.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha,
            self.beta,
            self.gamma,
            self.lambda_fl,
            self.lambda_bce,
            self.lambda_tv,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Ground-truth boxes for one image, normalized (cx, cy, w, h).
#[derive(Clone, Debug, Default)]
pub struct GroundTruth {
    pub boxes: Vec<[f64; 4]>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// One decoder layer's output for a single image: `boxes` is [N, 4]
/// normalized cxcywh, `logits` is [N] single-class scores before sigmoid.
#[derive(Clone, Debug)]
pub struct LayerPrediction {
    pub boxes: Tensor,
    pub logits: Tensor,
}

/// Optimal one-to-one matching between ground truth and predictions.
#[derive(Clone, Debug)]
pub struct MatchResult {
    /// `(gt index, prediction index)` pairs; injective in both components.
    pub assignment: Vec<(usize, usize)>,
    /// Prediction indices left unmatched (N - M of them).
    pub unmatched: Vec<usize>,
}

fn cxcywh_to_xyxy_scalar(b: &[f64; 4]) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

/// Plain IoU on xyxy boxes; degenerate boxes are treated as points (IoU 0).
pub fn iou_xyxy(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU on xyxy boxes: IoU minus the fraction of the enclosing
/// box not covered by the union. Lies in (-1, 1].
pub fn giou_xyxy(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let cw = a[2].max(b[2]) - a[0].min(b[0]);
    let ch = a[3].max(b[3]) - a[1].min(b[1]);
    let area_c = cw * ch;
    if area_c > 0.0 {
        iou - (area_c - union) / area_c
    } else {
        iou
    }
}

const EPS: f64 = 1e-9;

fn split_cxcywh(b: &Tensor) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let cx = b.narrow(1, 0, 1)?.squeeze(1)?;
    let cy = b.narrow(1, 1, 1)?.squeeze(1)?;
    let w = b.narrow(1, 2, 1)?.squeeze(1)?;
    let h = b.narrow(1, 3, 1)?.squeeze(1)?;
    Ok((cx, cy, w, h))
}

fn to_xyxy(b: &Tensor) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let (cx, cy, w, h) = split_cxcywh(b)?;
    let half_w = (&w * 0.5)?;
    let half_h = (&h * 0.5)?;
    Ok((
        (&cx - &half_w)?,
        (&cy - &half_h)?,
        (&cx + &half_w)?,
        (&cy + &half_h)?,
    ))
}

/// Differentiable pairwise GIoU of two aligned [M, 4] cxcywh tensors,
/// returning an [M] tensor. A small epsilon guards the divisions.
pub fn giou_pairs(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ax1, ay1, ax2, ay2) = to_xyxy(a)?;
    let (bx1, by1, bx2, by2) = to_xyxy(b)?;
    let iw = (ax2.minimum(&bx2)? - ax1.maximum(&bx1)?)?.relu()?;
    let ih = (ay2.minimum(&by2)? - ay1.maximum(&by1)?)?.relu()?;
    let inter = (&iw * &ih)?;
    let area_a = ((&ax2 - &ax1)?.relu()? * (&ay2 - &ay1)?.relu()?)?;
    let area_b = ((&bx2 - &bx1)?.relu()? * (&by2 - &by1)?.relu()?)?;
    let union = ((&area_a + &area_b)? - &inter)?;
    let iou = (&inter / (&union + EPS)?)?;
    let cw = (ax2.maximum(&bx2)? - ax1.minimum(&bx1)?)?;
    let ch = (ay2.maximum(&by2)? - ay1.minimum(&by1)?)?;
    let area_c = (&cw * &ch)?;
    let gap = ((&area_c - &union)? / (&area_c + EPS)?)?;
    Ok((iou - gap)?)
}

/// Numerically stable softplus: log(1 + exp(x)) = relu(x) + log(1 + exp(-|x|)).
fn softplus(x: &Tensor) -> Result<Tensor> {
    let stable = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + stable)?)
}

/// Mean binary cross-entropy computed from logits.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.shape() != targets.shape() {
        return Err(Error::invalid_input(format!(
            "bce shape mismatch: {:?} vs {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    let per_elem = (softplus(logits)? - (logits * targets)?)?;
    Ok(per_elem.mean_all()?)
}

/// Sum (not mean) variant used by the detection terms, which carry their own
/// 1/M or 1/(N-M) normalizers.
fn bce_with_logits_sum(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let per_elem = (softplus(logits)? - (logits * targets)?)?;
    Ok(per_elem.sum_all()?)
}

/// Mean focal loss over a binary target map, computed from logits:
/// -alpha_t * (1 - p_t)^gamma * log(p_t).
pub fn focal_loss(logits: &Tensor, targets: &Tensor, gamma_f: f64, alpha_f: f64) -> Result<Tensor> {
    if logits.shape() != targets.shape() {
        return Err(Error::invalid_input(format!(
            "focal shape mismatch: {:?} vs {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    let p = crate::nn::sigmoid(logits)?;
    let one_minus_t = (1.0 - targets)?;
    let pt = ((&p * targets)? + ((1.0 - &p)? * &one_minus_t)?)?;
    let alpha_t = ((targets * alpha_f)? + (&one_minus_t * (1.0 - alpha_f))?)?;
    // log(p_t) assembled from softplus for stability at saturated logits.
    let log_pt = ((softplus(&logits.neg()?)? * targets)? + (softplus(logits)? * &one_minus_t)?)?
        .neg()?;
    let modulator = (1.0 - pt)?.powf(gamma_f)?;
    Ok((alpha_t * modulator)?.mul(&log_pt.neg()?)?.mean_all()?)
}

/// Tversky loss on probabilities: 1 - (TP+s)/(TP + a*FP + b*FN + s).
/// With a = b = 0.5 this is soft Dice; b > a penalizes false negatives more.
pub fn tversky_loss(
    probs: &Tensor,
    targets: &Tensor,
    alpha_tv: f64,
    beta_tv: f64,
    smoothing: f64,
) -> Result<Tensor> {
    if probs.shape() != targets.shape() {
        return Err(Error::invalid_input(format!(
            "tversky shape mismatch: {:?} vs {:?}",
            probs.shape(),
            targets.shape()
        )));
    }
    let tp = (probs * targets)?.sum_all()?;
    let fp = (probs * (1.0 - targets)?)?.sum_all()?;
    let fn_ = ((1.0 - probs)? * targets)?.sum_all()?;
    let num = (&tp + smoothing)?;
    let den = (((&tp + (fp * alpha_tv)?)? + (fn_ * beta_tv)?)? + smoothing)?;
    Ok((1.0 - (num / den)?)?)
}

fn boxes_to_vec(boxes: &Tensor) -> Result<Vec<[f64; 4]>> {
    let v: Vec<Vec<f64>> = boxes.to_dtype(candle_core::DType::F64)?.to_vec2()?;
    Ok(v.into_iter().map(|r| [r[0], r[1], r[2], r[3]]).collect())
}

/// Hungarian matching of ground truth to the predictions of one layer.
/// Pair cost: alpha * (-p_hat) + beta * L1 + gamma * (1 - GIoU), using the
/// class probability (not log-probability).
pub fn hungarian_match(
    pred: &LayerPrediction,
    gt: &GroundTruth,
    w: &LossWeights,
) -> Result<MatchResult> {
    let n = pred.boxes.dim(0)?;
    let m = gt.len();
    if m > n {
        return Err(Error::Infeasible(format!(
            "{m} ground-truth boxes exceed {n} predictions"
        )));
    }
    if m == 0 {
        return Ok(MatchResult {
            assignment: vec![],
            unmatched: (0..n).collect(),
        });
    }
    let pred_boxes = boxes_to_vec(&pred.boxes.detach())?;
    let probs: Vec<f64> = crate::nn::sigmoid(&pred.logits.detach())?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1()?;
    let mut costs = Vec::with_capacity(m * n);
    for gb in &gt.boxes {
        let g_xyxy = cxcywh_to_xyxy_scalar(gb);
        for (i, pb) in pred_boxes.iter().enumerate() {
            let l1: f64 = pb.iter().zip(gb).map(|(a, b)| (a - b).abs()).sum();
            let g = giou_xyxy(&cxcywh_to_xyxy_scalar(pb), &g_xyxy);
            costs.push(w.alpha * (-probs[i]) + w.beta * l1 + w.gamma * (1.0 - g));
        }
    }
    let solved = matching::solve(&CostMatrix::new(m, n, costs)?)?;
    let assignment: Vec<(usize, usize)> = solved
        .assignment
        .iter()
        .enumerate()
        .map(|(j, &i)| (j, i))
        .collect();
    let used: std::collections::HashSet<usize> = solved.assignment.iter().copied().collect();
    let unmatched = (0..n).filter(|i| !used.contains(i)).collect();
    Ok(MatchResult {
        assignment,
        unmatched,
    })
}

/// Core per-layer loss under a fixed matching:
/// alpha/M * sum matched L_cls + beta/M * sum L1 + gamma/M * sum (1 - GIoU)
/// + alpha/(N-M) * sum unmatched L_cls(background). The matched L_cls is an
/// IoU-aware BCE whose target is the (detached) IoU of the predicted box with
/// its ground truth; when N = M the unmatched term is an empty sum (zero).
pub fn core_loss_with_match(
    pred: &LayerPrediction,
    gt: &GroundTruth,
    mr: &MatchResult,
    w: &LossWeights,
) -> Result<Tensor> {
    // IoU-aware classification targets, detached from the graph.
    let boxes = boxes_to_vec(&pred.boxes.detach())?;
    let q: Vec<f64> = mr
        .assignment
        .iter()
        .map(|&(j, i)| {
            iou_xyxy(
                &cxcywh_to_xyxy_scalar(&boxes[i]),
                &cxcywh_to_xyxy_scalar(&gt.boxes[j]),
            )
            .clamp(0.0, 1.0)
        })
        .collect();
    core_loss_with_targets(pred, gt, mr, w, &q)
}

/// Same as [`core_loss_with_match`] but with the matched classification
/// targets supplied by the caller (they are constants to autograd either
/// way, which matters for finite-difference verification).
pub fn core_loss_with_targets(
    pred: &LayerPrediction,
    gt: &GroundTruth,
    mr: &MatchResult,
    w: &LossWeights,
    cls_targets: &[f64],
) -> Result<Tensor> {
    let device = pred.boxes.device();
    let dtype = pred.boxes.dtype();
    let m = mr.assignment.len();
    if cls_targets.len() != m {
        return Err(Error::invalid_input(
            "one classification target per matched pair required",
        ));
    }
    let mut loss = Tensor::zeros((), dtype, device)?;
    if m > 0 {
        let gt_rows: Vec<f64> = mr
            .assignment
            .iter()
            .flat_map(|&(j, _)| gt.boxes[j])
            .collect();
        let gt_t = Tensor::from_vec(gt_rows, (m, 4), device)?.to_dtype(dtype)?;
        let pred_idx: Vec<u32> = mr.assignment.iter().map(|&(_, i)| i as u32).collect();
        let idx = Tensor::from_vec(pred_idx, m, device)?;
        let matched_boxes = pred.boxes.index_select(&idx, 0)?;
        let matched_logits = pred.logits.index_select(&idx, 0)?;

        let l1 = (&matched_boxes - &gt_t)?.abs()?.sum_all()?;
        let giou_sum = giou_pairs(&matched_boxes, &gt_t)?.sum_all()?;
        let giou_term = ((m as f64) - giou_sum)?;

        let q_t = Tensor::from_vec(cls_targets.to_vec(), m, device)?.to_dtype(dtype)?;
        let cls_matched = bce_with_logits_sum(&matched_logits, &q_t)?;

        let inv_m = 1.0 / m as f64;
        loss = (loss
            + ((cls_matched * (w.alpha * inv_m))?
                + ((l1 * (w.beta * inv_m))? + (giou_term * (w.gamma * inv_m))?)?)?)?;
    }
    if !mr.unmatched.is_empty() {
        let idx: Vec<u32> = mr.unmatched.iter().map(|&i| i as u32).collect();
        let k = idx.len();
        let idx = Tensor::from_vec(idx, k, device)?;
        let bg_logits = pred.logits.index_select(&idx, 0)?;
        let zeros = Tensor::zeros(k, dtype, device)?;
        let cls_bg = bce_with_logits_sum(&bg_logits, &zeros)?;
        loss = (loss + (cls_bg * (w.alpha / k as f64))?)?;
    }
    Ok(loss)
}

/// Full detection loss over all decoder layers. The final layer carries the
/// core loss; the first L-1 layers contribute the auxiliary loss, each with
/// its own re-computed Hungarian matching.
pub fn detection_loss(
    per_layer: &[LayerPrediction],
    gt: &GroundTruth,
    w: &LossWeights,
) -> Result<Tensor> {
    if per_layer.is_empty() {
        return Err(Error::invalid_input("detection loss needs at least one layer"));
    }
    let device = per_layer[0].boxes.device();
    let dtype = per_layer[0].boxes.dtype();
    let mut loss = Tensor::zeros((), dtype, device)?;
    for layer in per_layer {
        let mr = hungarian_match(layer, gt, w)?;
        loss = (loss + core_loss_with_match(layer, gt, &mr, w)?)?;
    }
    Ok(loss)
}

/// One noisy query of a denoising group.
#[derive(Clone, Copy, Debug)]
pub struct DnQuery {
    /// Jittered box, normalized cxcywh, clamped to validity.
    pub bbox: [f64; 4],
    /// Source ground-truth index (static assignment).
    pub gt_index: usize,
    /// Positive queries reconstruct their GT; negative ones are supervised
    /// to background.
    pub positive: bool,
}

/// K = G x M noisy ground-truth copies with a static query -> GT map.
#[derive(Clone, Debug, Default)]
pub struct DenoisingGroup {
    pub queries: Vec<DnQuery>,
    pub groups: usize,
}

impl DenoisingGroup {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Box jitter magnitudes and the label-flip probability for negative groups.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DnNoise {
    /// Center jitter: uniform in +/- box_scale * (w, h).
    pub box_scale: f64,
    /// Probability that a negative query keeps its background label flipped
    /// off (i.e. is treated as positive anyway).
    pub label_flip_prob: f64,
}

impl Default for DnNoise {
    fn default() -> Self {
        DnNoise {
            box_scale: 0.5,
            label_flip_prob: 0.5,
        }
    }
}

/// Build G groups of M noisy ground-truth copies (K = G*M queries total).
/// Even groups are positive, odd groups negative; each query is statically
/// assigned to its source GT. M = 0 yields an empty group.
pub fn build_denoising_group<R: Rng>(
    gt: &GroundTruth,
    groups: usize,
    noise: DnNoise,
    rng: &mut R,
) -> DenoisingGroup {
    let m = gt.len();
    if m == 0 || groups == 0 {
        return DenoisingGroup::default();
    }
    let mut queries = Vec::with_capacity(groups * m);
    for g in 0..groups {
        let group_positive = g % 2 == 0;
        for (j, b) in gt.boxes.iter().enumerate() {
            let [cx, cy, w, h] = *b;
            let jit = |rng: &mut R, extent: f64| rng.gen_range(-1.0..1.0) * noise.box_scale * extent;
            let scale = |rng: &mut R| 1.0 + rng.gen_range(-1.0..1.0) * noise.box_scale;
            let bbox = [
                (cx + jit(rng, w)).clamp(1e-4, 1.0 - 1e-4),
                (cy + jit(rng, h)).clamp(1e-4, 1.0 - 1e-4),
                (w * scale(rng)).clamp(1e-4, 1.0),
                (h * scale(rng)).clamp(1e-4, 1.0),
            ];
            let positive = if group_positive {
                true
            } else {
                // Negative halves keep their positive label with the flip
                // probability, making some "negatives" harder positives.
                rng.gen_bool(noise.label_flip_prob.clamp(0.0, 1.0))
            };
            queries.push(DnQuery {
                bbox,
                gt_index: j,
                positive,
            });
        }
    }
    DenoisingGroup { queries, groups }
}

/// Denoising loss: the core loss form applied to every decoder layer's
/// outputs on the noisy queries, with the Hungarian matching replaced by the
/// group's static assignment. Positive queries are supervised to their GT,
/// negative ones to background.
pub fn denoising_loss(
    per_layer: &[LayerPrediction],
    group: &DenoisingGroup,
    gt: &GroundTruth,
    w: &LossWeights,
) -> Result<Tensor> {
    if per_layer.is_empty() {
        return Err(Error::invalid_input("denoising loss needs at least one layer"));
    }
    let device = per_layer[0].boxes.device();
    let dtype = per_layer[0].boxes.dtype();
    if group.is_empty() {
        return Ok(Tensor::zeros((), dtype, device)?);
    }
    let assignment: Vec<(usize, usize)> = group
        .queries
        .iter()
        .enumerate()
        .filter(|(_, q)| q.positive)
        .map(|(i, q)| (q.gt_index, i))
        .collect();
    let unmatched: Vec<usize> = group
        .queries
        .iter()
        .enumerate()
        .filter(|(_, q)| !q.positive)
        .map(|(i, _)| i)
        .collect();
    let mut loss = Tensor::zeros((), dtype, device)?;
    for layer in per_layer {
        let k = layer.boxes.dim(0)?;
        if k != group.len() {
            return Err(Error::invalid_input(format!(
                "denoising layer has {k} queries but the group has {}",
                group.len()
            )));
        }
        loss = (loss
            + core_loss_with_match(
                layer,
                gt,
                &MatchResult {
                    assignment: assignment.clone(),
                    unmatched: unmatched.clone(),
                },
                w,
            )?)?;
    }
    Ok(loss)
}

/// Combined segmentation losses for the two dense tasks:
/// drivable area = lambda_fl * focal + lambda_bce * BCE;
/// lane line = lambda_fl * focal + lambda_tv * Tversky.
pub fn segmentation_losses(
    da_logits: &Tensor,
    da_gt: &Tensor,
    ll_logits: &Tensor,
    ll_gt: &Tensor,
    w: &LossWeights,
) -> Result<(Tensor, Tensor)> {
    if da_logits.shape() != da_gt.shape() || ll_logits.shape() != ll_gt.shape() {
        return Err(Error::invalid_input("segmentation logits/target shape mismatch"));
    }
    let (gamma_f, alpha_f) = (2.0, 0.25);
    let (alpha_tv, beta_tv, smooth) = (0.3, 0.7, 1.0);
    let da = ((focal_loss(da_logits, da_gt, gamma_f, alpha_f)? * w.lambda_fl)?
        + (bce_with_logits(da_logits, da_gt)? * w.lambda_bce)?)?;
    let ll_probs = crate::nn::sigmoid(ll_logits)?;
    let ll = ((focal_loss(ll_logits, ll_gt, gamma_f, alpha_f)? * w.lambda_fl)?
        + (tversky_loss(&ll_probs, ll_gt, alpha_tv, beta_tv, smooth)? * w.lambda_tv)?)?;
    Ok((da, ll))
}

/// Unweighted total: L = L_det + L_segda + L_segll. Any non-finite component
/// aborts training with the offending component named.
pub fn total_loss(det: &Tensor, segda: &Tensor, segll: &Tensor) -> Result<Tensor> {
    for (name, t) in [("detection", det), ("drivable-area", segda), ("lane-line", segll)] {
        if !crate::nn::is_finite_scalar(t)? {
            return Err(Error::TrainingAbort {
                component: name.to_string(),
            });
        }
    }
    Ok(((det + segda)? + segll)?)
}
