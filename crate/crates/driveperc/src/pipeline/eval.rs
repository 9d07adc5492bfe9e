//! Evaluation: detection recall/mAP50, drivable-region mIoU, lane IoU and
//! LineAccuracy against dilated ground truth, throughput, and the
//! confidence-threshold sweep. Probability maps are cached per sample so a
//! sweep re-thresholds without re-running the model.

use std::time::Instant;

use candle_core::{DType, Tensor};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grad_analysis::TaskId;
use crate::lane_eval::{
    confusion_counts, lane_metrics, measure_fps, region_miou, ConfusionCounts, ScoredBox,
    SCORE_FLOOR,
};
use crate::pipeline::model::PerceptionModel;
use crate::pipeline::synth::Sample;
use crate::seg_decoder::SegTask;

/// Everything the metrics need from the model for one sample, with
/// segmentation kept as probabilities so thresholds can be swept cheaply.
#[derive(Clone, Debug)]
pub struct SamplePrediction {
    pub boxes: Vec<ScoredBox>,
    /// Row-major [H*W] drivable probability map; empty if the branch is off.
    pub da_prob: Vec<f32>,
    /// Row-major [H*W] lane probability map; empty if the branch is off.
    pub ll_prob: Vec<f32>,
    pub width: usize,
    pub height: usize,
}

fn prob_vec(logits: &Tensor) -> Result<Vec<f32>> {
    Ok(crate::nn::sigmoid(logits)?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1()?)
}

/// Run the model on one sample (eval mode).
pub fn predict_sample(model: &PerceptionModel, sample: &Sample) -> Result<SamplePrediction> {
    let device = model.varstore().device().clone();
    let dtype = model.varstore().dtype();
    let image = sample.image_tensor(&device)?.unsqueeze(0)?.to_dtype(dtype)?;
    let p = model.encode(&image, false)?;
    let m = &model.config().model;

    let da_prob = if m.task_drivable {
        let pd = model.task_pyramid(&p, TaskId::Drivable, false)?;
        prob_vec(&model.seg_logits(&pd, SegTask::Drivable, false)?)?
    } else {
        Vec::new()
    };
    let ll_prob = if m.task_lane {
        let pl = model.task_pyramid(&p, TaskId::Lane, false)?;
        prob_vec(&model.seg_logits(&pl, SegTask::Lane, false)?)?
    } else {
        Vec::new()
    };
    let boxes = if m.task_detection {
        let pd = model.task_pyramid(&p, TaskId::Detection, false)?;
        let layers = model.det_forward(&pd)?;
        let last = layers.last().expect("decoder has at least one layer");
        let b: Vec<f64> = last
            .boxes
            .squeeze(0)?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1()?;
        let s: Vec<f64> = crate::nn::sigmoid(&last.logits.squeeze(0)?)?
            .to_dtype(DType::F64)?
            .to_vec1()?;
        s.iter()
            .enumerate()
            .filter(|(_, &sc)| sc >= SCORE_FLOOR)
            .map(|(i, &sc)| ScoredBox {
                bbox: [b[4 * i], b[4 * i + 1], b[4 * i + 2], b[4 * i + 3]],
                score: sc,
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(SamplePrediction {
        boxes,
        da_prob,
        ll_prob,
        width: sample.width,
        height: sample.height,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EvalMetrics {
    pub recall: Option<f64>,
    pub map50: Option<f64>,
    pub miou: Option<f64>,
    pub lane_iou: Option<f64>,
    pub lane_acc: Option<f64>,
    pub fps: f64,
}

fn binarize(prob: &[f32], threshold: f64) -> Vec<u8> {
    prob.iter().map(|&p| u8::from(p as f64 >= threshold)).collect()
}

fn mask_from(prob: &[f32], w: usize, h: usize, t: f64) -> Result<crate::lane_eval::BinaryMask> {
    crate::lane_eval::BinaryMask::from_data(w, h, binarize(prob, t))
}

/// Combine cached predictions with ground truth. Lane confusion counts are
/// aggregated over the whole dataset before the metric is computed; the
/// drivable metric is a per-image two-class mIoU; lane ground truth is the
/// dilated mask.
pub fn aggregate_metrics(
    preds: &[SamplePrediction],
    samples: &[Sample],
    thresholds: (f64, f64),
    fps: f64,
) -> Result<EvalMetrics> {
    if preds.is_empty() || preds.len() != samples.len() {
        return Err(Error::invalid_input(
            "need one prediction per sample and at least one sample",
        ));
    }
    crate::seg_decoder::validate_threshold(thresholds.0)?;
    crate::seg_decoder::validate_threshold(thresholds.1)?;
    let has_da = preds.iter().all(|p| !p.da_prob.is_empty());
    let has_ll = preds.iter().all(|p| !p.ll_prob.is_empty());
    let has_det = samples.iter().any(|s| !s.boxes.is_empty());

    let mut da_counts: Vec<ConfusionCounts> = Vec::new();
    let mut ll_total = ConfusionCounts::default();
    for (p, s) in preds.iter().zip(samples) {
        if has_da {
            let m = mask_from(&p.da_prob, p.width, p.height, thresholds.0)?;
            da_counts.push(confusion_counts(&m, &s.da_mask)?);
        }
        if has_ll {
            let m = mask_from(&p.ll_prob, p.width, p.height, thresholds.1)?;
            ll_total.add(&confusion_counts(&m, &s.ll_mask_dilated)?);
        }
    }
    let miou = if has_da { Some(region_miou(&da_counts)?) } else { None };
    let (lane_iou, lane_acc) = if has_ll {
        let lm = lane_metrics(&ll_total);
        (Some(lm.iou), Some(lm.line_accuracy))
    } else {
        (None, None)
    };
    let (recall, map50) = if has_det {
        let pb: Vec<Vec<ScoredBox>> = preds.iter().map(|p| p.boxes.clone()).collect();
        let gb: Vec<Vec<[f64; 4]>> = samples.iter().map(|s| s.boxes.clone()).collect();
        let dm = crate::lane_eval::detection_metrics(&pb, &gb, 0.5)?;
        (Some(dm.recall), Some(dm.map50))
    } else {
        (None, None)
    };
    Ok(EvalMetrics {
        recall,
        map50,
        miou,
        lane_iou,
        lane_acc,
        fps,
    })
}

/// Full evaluation: run the model over the dataset (timing the forward
/// passes for FPS) and aggregate.
pub fn evaluate(
    model: &PerceptionModel,
    samples: &[Sample],
    thresholds: (f64, f64),
) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let start = Instant::now();
    let preds: Vec<SamplePrediction> = samples
        .iter()
        .map(|s| predict_sample(model, s))
        .collect::<Result<_>>()?;
    let fps = measure_fps(samples.len(), start.elapsed().as_secs_f64().max(1e-9))?;
    aggregate_metrics(&preds, samples, thresholds, fps)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub miou: f64,
    pub lane_iou: f64,
    pub lane_acc: f64,
    pub lane_foreground: usize,
}

/// The published sweep grid: 0.40 to 0.95 in steps of 0.05 (12 rows).
pub fn default_grid() -> Vec<f64> {
    (0..12).map(|i| 0.40 + 0.05 * i as f64).collect()
}

/// Re-threshold cached probability maps over a grid applied to both
/// segmentation tasks.
pub fn sweep_thresholds(
    preds: &[SamplePrediction],
    samples: &[Sample],
    grid: &[f64],
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::invalid_input("sweep grid is empty"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &t in grid {
        let m = aggregate_metrics(preds, samples, (t, t), 0.0)?;
        let lane_foreground = preds
            .iter()
            .map(|p| binarize(&p.ll_prob, t).iter().map(|&v| v as usize).sum::<usize>())
            .sum();
        rows.push(SweepRow {
            threshold: t,
            miou: m.miou.unwrap_or(f64::NAN),
            lane_iou: m.lane_iou.unwrap_or(f64::NAN),
            lane_acc: m.lane_acc.unwrap_or(f64::NAN),
            lane_foreground,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("threshold,miou,lane_iou,lane_acc,lane_foreground\n");
    for r in rows {
        out.push_str(&format!(
            "{:.2},{:.4},{:.4},{:.4},{}\n",
            r.threshold, r.miou, r.lane_iou, r.lane_acc, r.lane_foreground
        ));
    }
    out
}
