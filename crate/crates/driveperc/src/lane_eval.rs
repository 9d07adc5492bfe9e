//! Lane-label dilation and the fairness-corrected evaluation toolkit.
//!
//! Lane-line ground truth ships as thin (nominally 2-pixel) rasterized
//! polylines while models are trained against 8-pixel-wide labels. Scoring a
//! well-trained model against the thin labels inflates false positives and
//! misranks models. This module provides the bit-exact dilation that widens
//! thin labels to the training convention, confusion-matrix based metrics,
//! detection mAP/recall, FPS, and a side-by-side fairness report.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// A binary raster mask, row-major, values restricted to {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid_input(format!(
                "mask data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid_input("mask values must be 0 or 1"));
        }
        Ok(BinaryMask { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v.min(1);
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&a, &b)| a == 0 || b == 1)
    }

    /// Load from an 8-bit grayscale PNG; any nonzero pixel is foreground.
    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.into_raw().into_iter().map(|v| u8::from(v > 0)).collect();
        BinaryMask::from_data(w, h, data)
    }

    /// Write as an 8-bit grayscale PNG, 0 = background, 255 = foreground.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.data.iter().map(|&v| v * 255).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("raw buffer matches dimensions");
        img.save(path)?;
        Ok(())
    }

    /// Nearest-neighbor resample, preserving binarity.
    pub fn resize_nearest(&self, width: usize, height: usize) -> BinaryMask {
        let mut out = BinaryMask::new(width, height);
        for y in 0..height {
            let sy = (y * self.height) / height;
            for x in 0..width {
                let sx = (x * self.width) / width;
                out.set(x, y, self.get(sx, sy));
            }
        }
        out
    }
}

/// The frozen 7x7 elliptical structuring element (33 active cells).
#[derive(Clone, Debug)]
pub struct StructuringElement7 {
    offsets: Vec<(i32, i32)>,
}

/// Active-cell bitmap, rows top to bottom, origin at the center.
pub const ELEM7_FOOTPRINT: [[u8; 7]; 7] = [
    [0, 0, 0, 1, 0, 0, 0],
    [0, 1, 1, 1, 1, 1, 0],
    [1, 1, 1, 1, 1, 1, 1],
    [1, 1, 1, 1, 1, 1, 1],
    [1, 1, 1, 1, 1, 1, 1],
    [0, 1, 1, 1, 1, 1, 0],
    [0, 0, 0, 1, 0, 0, 0],
];

impl Default for StructuringElement7 {
    fn default() -> Self {
        let mut offsets = Vec::with_capacity(33);
        for (r, row) in ELEM7_FOOTPRINT.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if v == 1 {
                    offsets.push((c as i32 - 3, r as i32 - 3));
                }
            }
        }
        StructuringElement7 { offsets }
    }
}

impl StructuringElement7 {
    pub fn active_cells(&self) -> usize {
        self.offsets.len()
    }
}

/// Morphological dilation with zero padding at the borders.
pub fn dilate_mask(mask: &BinaryMask, elem: &StructuringElement7) -> BinaryMask {
    let (w, h) = (mask.width as i32, mask.height as i32);
    let mut out = BinaryMask::new(mask.width, mask.height);
    for y in 0..h {
        for x in 0..w {
            if mask.data[(y * w + x) as usize] == 0 {
                continue;
            }
            for &(dx, dy) in &elem.offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && nx < w && ny >= 0 && ny < h {
                    out.data[(ny * w + nx) as usize] = 1;
                }
            }
        }
    }
    out
}

/// Dilate every 0/255 PNG mask in `in_dir` into `out_dir`, preserving
/// filenames. Returns the number of masks processed.
pub fn dilate_directory(in_dir: &Path, out_dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(out_dir)?;
    let elem = StructuringElement7::default();
    let mut count = 0;
    let mut entries: Vec<_> = std::fs::read_dir(in_dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    entries.sort();
    for path in entries {
        let mask = BinaryMask::read_png(&path)?;
        let dilated = dilate_mask(&mask, &elem);
        let name = path.file_name().expect("file has a name");
        dilated.write_png(&out_dir.join(name))?;
        count += 1;
    }
    Ok(count)
}

/// Per-pixel confusion tallies for one mask pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tp: u64,
}

impl ConfusionCounts {
    pub fn new(tn: u64, fp: u64, fn_: u64, tp: u64) -> Self {
        ConfusionCounts { tn, fp, fn_, tp }
    }

    pub fn total(&self) -> u64 {
        self.tn + self.fp + self.fn_ + self.tp
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tp += other.tp;
    }
}

pub fn confusion_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::invalid_input(format!(
            "mask dimensions differ: {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (1, 1) => c.tp += 1,
            _ => unreachable!("masks hold only 0/1"),
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct LaneMetrics {
    pub iou: f64,
    pub line_accuracy: f64,
    /// Set when the pair had no foreground anywhere, so the 0-valued metrics
    /// are sentinels rather than measurements.
    pub all_background: bool,
}

/// IoU = TP/(TP+FN+FP); LineAccuracy = TP/(TP+FN), which does not penalize
/// over-segmentation.
pub fn lane_metrics(c: &ConfusionCounts) -> LaneMetrics {
    let iou_den = c.tp + c.fn_ + c.fp;
    let acc_den = c.tp + c.fn_;
    LaneMetrics {
        iou: if iou_den > 0 {
            c.tp as f64 / iou_den as f64
        } else {
            0.0
        },
        line_accuracy: if acc_den > 0 {
            c.tp as f64 / acc_den as f64
        } else {
            0.0
        },
        all_background: iou_den == 0,
    }
}

/// Class-mean IoU over foreground/background, averaged over the dataset.
/// Classes absent from both prediction and ground truth in an image are
/// skipped to avoid 0/0.
pub fn region_miou(per_image: &[ConfusionCounts]) -> Result<f64> {
    if per_image.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    let mut images = 0usize;
    for c in per_image {
        let mut ious = Vec::with_capacity(2);
        let fg_den = c.tp + c.fp + c.fn_;
        if fg_den > 0 {
            ious.push(c.tp as f64 / fg_den as f64);
        }
        let bg_den = c.tn + c.fp + c.fn_;
        if bg_den > 0 {
            ious.push(c.tn as f64 / bg_den as f64);
        }
        if !ious.is_empty() {
            total += ious.iter().sum::<f64>() / ious.len() as f64;
            images += 1;
        }
    }
    if images == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(total / images as f64)
}

/// A detection candidate: normalized (cx, cy, w, h) plus confidence.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ScoredBox {
    pub bbox: [f64; 4],
    pub score: f64,
}

fn cxcywh_to_xyxy(b: &[f64; 4]) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

pub fn box_iou_xyxy(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Minimum confidence considered during metric computation.
pub const SCORE_FLOOR: f64 = 0.001;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DetectionMetrics {
    pub map50: f64,
    pub recall: f64,
}

/// Greedy score-ordered matching at `iou_thresh`, all-points interpolated AP.
/// `predictions[i]` and `ground_truth[i]` belong to image `i`; ground-truth
/// boxes are normalized cxcywh.
pub fn detection_metrics(
    predictions: &[Vec<ScoredBox>],
    ground_truth: &[Vec<[f64; 4]>],
    iou_thresh: f64,
) -> Result<DetectionMetrics> {
    let total_gt: usize = ground_truth.iter().map(|g| g.len()).sum();
    if total_gt == 0 {
        return Err(Error::invalid_input(
            "detection metrics are undefined with zero ground-truth boxes",
        ));
    }
    // (score, image index, box) sorted by descending score; ties keep input order.
    let mut flat: Vec<(f64, usize, [f64; 4])> = Vec::new();
    for (img, preds) in predictions.iter().enumerate() {
        for p in preds {
            if p.score >= SCORE_FLOOR {
                flat.push((p.score, img, cxcywh_to_xyxy(&p.bbox)));
            }
        }
    }
    flat.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    let gts_xyxy: Vec<Vec<[f64; 4]>> = ground_truth
        .iter()
        .map(|g| g.iter().map(cxcywh_to_xyxy).collect())
        .collect();
    let mut matched: Vec<Vec<bool>> = gts_xyxy.iter().map(|g| vec![false; g.len()]).collect();

    let mut tps = Vec::with_capacity(flat.len());
    for &(_, img, ref pb) in &flat {
        let mut best = (0usize, 0.0f64);
        for (j, gb) in gts_xyxy[img].iter().enumerate() {
            if matched[img][j] {
                continue;
            }
            let iou = box_iou_xyxy(pb, gb);
            if iou > best.1 {
                best = (j, iou);
            }
        }
        if best.1 >= iou_thresh {
            matched[img][best.0] = true;
            tps.push(true);
        } else {
            tps.push(false);
        }
    }

    // Precision-recall curve and its all-points interpolation.
    let mut tp_cum = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(tps.len()); // (recall, precision)
    for (i, &is_tp) in tps.iter().enumerate() {
        if is_tp {
            tp_cum += 1;
        }
        points.push((tp_cum as f64 / total_gt as f64, tp_cum as f64 / (i + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        if r > prev_recall {
            let max_prec = points[i..]
                .iter()
                .map(|&(_, p)| p)
                .fold(0.0f64, f64::max);
            ap += (r - prev_recall) * max_prec;
            prev_recall = r;
        }
    }
    let recall = tp_cum as f64 / total_gt as f64;
    Ok(DetectionMetrics { map50: ap, recall })
}

/// Frames per second from a frame count and elapsed wall time.
pub fn measure_fps(frame_count: usize, elapsed_secs: f64) -> Result<f64> {
    if frame_count == 0 {
        return Err(Error::invalid_input("frame count must be at least 1"));
    }
    if elapsed_secs <= 0.0 {
        return Err(Error::invalid_input("elapsed time must be positive"));
    }
    Ok(frame_count as f64 / elapsed_secs)
}

#[derive(Clone, Debug, Serialize)]
pub struct FairnessReport {
    /// Metrics of the predictions against the raw thin ground truth.
    pub raw: LaneMetrics,
    pub raw_counts: ConfusionCounts,
    /// Metrics of the same predictions against the dilated ground truth.
    pub dilated: LaneMetrics,
    pub dilated_counts: ConfusionCounts,
    /// Confusion of the ideal prediction (dilated GT) against the raw GT;
    /// for clean axis-aligned lanes the widening ratio TP:FP is 1:3.
    pub ideal_counts: ConfusionCounts,
    pub ideal_fp_per_tp: f64,
}

/// Evaluate prediction masks against raw thin labels and against their
/// dilated counterparts side by side.
pub fn fairness_report(pairs: &[(BinaryMask, BinaryMask)]) -> Result<FairnessReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let elem = StructuringElement7::default();
    let mut raw_counts = ConfusionCounts::default();
    let mut dilated_counts = ConfusionCounts::default();
    let mut ideal_counts = ConfusionCounts::default();
    for (pred, gt2px) in pairs {
        let gt8px = dilate_mask(gt2px, &elem);
        raw_counts.add(&confusion_counts(pred, gt2px)?);
        dilated_counts.add(&confusion_counts(pred, &gt8px)?);
        ideal_counts.add(&confusion_counts(&gt8px, gt2px)?);
    }
    Ok(FairnessReport {
        raw: lane_metrics(&raw_counts),
        raw_counts,
        dilated: lane_metrics(&dilated_counts),
        dilated_counts,
        ideal_fp_per_tp: if ideal_counts.tp > 0 {
            ideal_counts.fp as f64 / ideal_counts.tp as f64
        } else {
            0.0
        },
        ideal_counts,
    })
}
