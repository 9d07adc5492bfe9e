//! Single-image inference artifacts: detection JSON lines, the two
//! segmentation mask PNGs, and a composited overlay. Re-running overwrites
//! the same files deterministically.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::eval::{predict_sample, SamplePrediction};
use crate::pipeline::model::PerceptionModel;
use crate::pipeline::synth::Sample;

/// Minimum confidence for a detection to be written (the metric-level floor
/// is far lower; this is a visualization cut).
pub const OUTPUT_SCORE_THRESHOLD: f64 = 0.25;

#[derive(Serialize)]
struct DetectionLine<'a> {
    image_id: &'a str,
    class: u32,
    bbox: [f64; 4],
    score: f64,
}

pub struct InferOutputs {
    pub detections: PathBuf,
    pub da_mask: PathBuf,
    pub ll_mask: PathBuf,
    pub overlay: PathBuf,
}

/// Read and letterbox-free resize an image to the model's input size,
/// wrapped as a label-less sample.
pub fn load_image_as_sample(path: &Path, input_size: (usize, usize)) -> Result<Sample> {
    let (h, w) = input_size;
    let img = image::open(path)?.to_rgb8();
    let resized =
        image::imageops::resize(&img, w as u32, h as u32, image::imageops::FilterType::Triangle);
    let mut image = vec![0f32; 3 * w * h];
    for (x, y, px) in resized.enumerate_pixels() {
        for c in 0..3 {
            image[c * w * h + y as usize * w + x as usize] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(Sample {
        image,
        width: w,
        height: h,
        boxes: vec![],
        da_mask: crate::lane_eval::BinaryMask::new(w, h),
        ll_mask_raw: crate::lane_eval::BinaryMask::new(w, h),
        ll_mask_dilated: crate::lane_eval::BinaryMask::new(w, h),
    })
}

fn overlay_image(sample: &Sample, pred: &SamplePrediction, thresholds: (f64, f64)) -> image::RgbImage {
    let (w, h) = (sample.width, sample.height);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    let px = |c: usize, i: usize| (sample.image[c * w * h + i].clamp(0.0, 1.0) * 255.0) as u8;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut rgb = [px(0, i), px(1, i), px(2, i)];
            if !pred.da_prob.is_empty() && pred.da_prob[i] as f64 >= thresholds.0 {
                rgb[1] = rgb[1].saturating_add(90); // green drivable tint
            }
            if !pred.ll_prob.is_empty() && pred.ll_prob[i] as f64 >= thresholds.1 {
                rgb = [255, 60, 60]; // red lane overlay
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(rgb));
        }
    }
    // Blue box outlines.
    for b in &pred.boxes {
        if b.score < OUTPUT_SCORE_THRESHOLD {
            continue;
        }
        let x0 = (((b.bbox[0] - b.bbox[2] / 2.0) * w as f64).max(0.0) as usize).min(w - 1);
        let x1 = (((b.bbox[0] + b.bbox[2] / 2.0) * w as f64).max(0.0) as usize).min(w - 1);
        let y0 = (((b.bbox[1] - b.bbox[3] / 2.0) * h as f64).max(0.0) as usize).min(h - 1);
        let y1 = (((b.bbox[1] + b.bbox[3] / 2.0) * h as f64).max(0.0) as usize).min(h - 1);
        for x in x0..=x1 {
            img.put_pixel(x as u32, y0 as u32, image::Rgb([60, 120, 255]));
            img.put_pixel(x as u32, y1 as u32, image::Rgb([60, 120, 255]));
        }
        for y in y0..=y1 {
            img.put_pixel(x0 as u32, y as u32, image::Rgb([60, 120, 255]));
            img.put_pixel(x1 as u32, y as u32, image::Rgb([60, 120, 255]));
        }
    }
    img
}

pub fn infer(
    model: &PerceptionModel,
    image_path: &Path,
    out_dir: &Path,
) -> Result<InferOutputs> {
    std::fs::create_dir_all(out_dir)?;
    let cfg = model.config();
    let sample = load_image_as_sample(
        image_path,
        (cfg.model.input_size[0], cfg.model.input_size[1]),
    )?;
    let pred = predict_sample(model, &sample)?;
    let thresholds = (cfg.train.da_threshold, cfg.train.ll_threshold);
    let image_id = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image");

    let detections = out_dir.join("detections.jsonl");
    let mut lines = String::new();
    for b in &pred.boxes {
        if b.score < OUTPUT_SCORE_THRESHOLD {
            continue;
        }
        let line = DetectionLine {
            image_id,
            class: 0,
            bbox: b.bbox,
            score: b.score,
        };
        lines.push_str(
            &serde_json::to_string(&line).map_err(|e| Error::invalid_input(e.to_string()))?,
        );
        lines.push('\n');
    }
    std::fs::write(&detections, lines)?;

    let da_mask_path = out_dir.join("da_mask.png");
    let ll_mask_path = out_dir.join("ll_mask.png");
    if !pred.da_prob.is_empty() {
        let m = crate::lane_eval::BinaryMask::from_data(
            sample.width,
            sample.height,
            pred.da_prob.iter().map(|&p| u8::from(p as f64 >= thresholds.0)).collect(),
        )?;
        m.write_png(&da_mask_path)?;
    }
    if !pred.ll_prob.is_empty() {
        let m = crate::lane_eval::BinaryMask::from_data(
            sample.width,
            sample.height,
            pred.ll_prob.iter().map(|&p| u8::from(p as f64 >= thresholds.1)).collect(),
        )?;
        m.write_png(&ll_mask_path)?;
    }
    let overlay = out_dir.join("overlay.png");
    overlay_image(&sample, &pred, thresholds).save(&overlay)?;
    Ok(InferOutputs {
        detections,
        da_mask: da_mask_path,
        ll_mask: ll_mask_path,
        overlay,
    })
}
