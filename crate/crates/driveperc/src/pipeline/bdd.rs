//! BDD100K-format ingestion: JPEG/PNG images, per-image 0/255 mask PNGs,
//! and JSON-lines detection annotations with category strings and
//! pixel-space boxes. Car, bus, truck and train all merge into the single
//! vehicle class; lane labels are dilated at load time so the training
//! labels follow the 8-px convention.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::lane_eval::{dilate_mask, BinaryMask, StructuringElement7};
use crate::pipeline::synth::Sample;

/// Vehicle-class merge: the four vehicle categories map to class 0; other
/// categories carry no box.
pub fn vehicle_class(category: &str) -> Option<u32> {
    matches!(category, "car" | "bus" | "truck" | "train").then_some(0)
}

#[derive(Deserialize)]
struct Box2d {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

#[derive(Deserialize)]
struct Label {
    category: String,
    box2d: Option<Box2d>,
}

#[derive(Deserialize)]
struct Annotation {
    name: String,
    #[serde(default)]
    labels: Vec<Label>,
}

#[derive(Debug)]
pub struct BddReport {
    pub samples: Vec<Sample>,
    /// Images skipped for a missing mask.
    pub skipped: usize,
}

fn image_to_chw(img: &image::RgbImage) -> Vec<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0f32; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[c * w * h + y as usize * w + x as usize] = px.0[c] as f32 / 255.0;
        }
    }
    out
}

/// Load a subset: one JSON annotation per line. A missing drivable or lane
/// mask skips the image (with a warning); a malformed annotation line is an
/// error carrying its line number.
pub fn load_bdd_subset(
    image_dir: &Path,
    annotations: &Path,
    da_mask_dir: &Path,
    ll_mask_dir: &Path,
    input_size: (usize, usize),
) -> Result<BddReport> {
    let (h, w) = input_size;
    let text = std::fs::read_to_string(annotations)?;
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ann: Annotation = serde_json::from_str(line).map_err(|e| Error::Annotation {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let image_path = image_dir.join(&ann.name);
        let stem = Path::new(&ann.name)
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Annotation {
                line: i + 1,
                msg: format!("bad image name `{}`", ann.name),
            })?;
        let da_path = da_mask_dir.join(format!("{stem}.png"));
        let ll_path = ll_mask_dir.join(format!("{stem}.png"));
        if !da_path.exists() || !ll_path.exists() {
            eprintln!("warning: skipping {} (missing mask)", ann.name);
            skipped += 1;
            continue;
        }
        let img = image::open(&image_path)?.to_rgb8();
        let (src_w, src_h) = (img.width() as f64, img.height() as f64);
        let resized =
            image::imageops::resize(&img, w as u32, h as u32, image::imageops::FilterType::Triangle);
        let da_mask = BinaryMask::read_png(&da_path)?.resize_nearest(w, h);
        let ll_raw = BinaryMask::read_png(&ll_path)?.resize_nearest(w, h);
        let ll_dilated = dilate_mask(&ll_raw, &StructuringElement7::default());
        let mut boxes = Vec::new();
        for l in &ann.labels {
            if vehicle_class(&l.category).is_none() {
                continue;
            }
            let Some(b) = &l.box2d else { continue };
            let cx = ((b.x1 + b.x2) / 2.0 / src_w).clamp(0.0, 1.0);
            let cy = ((b.y1 + b.y2) / 2.0 / src_h).clamp(0.0, 1.0);
            let bw = ((b.x2 - b.x1).abs() / src_w).clamp(1e-4, 1.0);
            let bh = ((b.y2 - b.y1).abs() / src_h).clamp(1e-4, 1.0);
            boxes.push([cx, cy, bw, bh]);
        }
        let sample = Sample {
            image: image_to_chw(&resized),
            width: w,
            height: h,
            boxes,
            da_mask,
            ll_mask_raw: ll_raw,
            ll_mask_dilated: ll_dilated,
        };
        sample.validate()?;
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(BddReport { samples, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(dir: &Path, with_second_masks: bool) {
        let images = dir.join("images");
        let da = dir.join("da");
        let ll = dir.join("ll");
        for d in [&images, &da, &ll] {
            std::fs::create_dir_all(d).unwrap();
        }
        for name in ["a", "b"] {
            let img = image::RgbImage::from_pixel(64, 48, image::Rgb([100, 120, 140]));
            img.save(images.join(format!("{name}.jpg"))).unwrap();
        }
        let mut mask = BinaryMask::new(64, 48);
        for x in 10..30 {
            mask.set(x, 40, 1);
        }
        mask.write_png(&da.join("a.png")).unwrap();
        mask.write_png(&ll.join("a.png")).unwrap();
        if with_second_masks {
            mask.write_png(&da.join("b.png")).unwrap();
            mask.write_png(&ll.join("b.png")).unwrap();
        } else {
            mask.write_png(&da.join("b.png")).unwrap(); // lane mask missing
        }
        let ann = concat!(
            r#"{"name":"a.jpg","labels":[{"category":"car","box2d":{"x1":8,"y1":8,"x2":24,"y2":20}},"#,
            r#"{"category":"traffic light","box2d":{"x1":0,"y1":0,"x2":4,"y2":4}},"#,
            r#"{"category":"bus","box2d":{"x1":30,"y1":10,"x2":60,"y2":30}}]}"#,
            "\n",
            r#"{"name":"b.jpg","labels":[{"category":"truck","box2d":{"x1":1,"y1":1,"x2":10,"y2":10}}]}"#,
            "\n"
        );
        std::fs::write(dir.join("ann.jsonl"), ann).unwrap();
    }

    #[test]
    fn vehicle_merge_rule() {
        for c in ["car", "bus", "truck", "train"] {
            assert_eq!(vehicle_class(c), Some(0));
        }
        for c in ["person", "rider", "traffic sign", "motorcycle"] {
            assert_eq!(vehicle_class(c), None);
        }
    }

    #[test]
    fn loads_resizes_and_merges_categories() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), true);
        let report = load_bdd_subset(
            &dir.path().join("images"),
            &dir.path().join("ann.jsonl"),
            &dir.path().join("da"),
            &dir.path().join("ll"),
            (32, 32),
        )
        .unwrap();
        assert_eq!(report.samples.len(), 2);
        assert_eq!(report.skipped, 0);
        let a = &report.samples[0];
        assert_eq!((a.width, a.height), (32, 32));
        // Two vehicles kept, the traffic light dropped.
        assert_eq!(a.boxes.len(), 2);
        assert!(a.ll_mask_raw.is_subset_of(&a.ll_mask_dilated));
        // Box normalized against the 64x48 source.
        let b = a.boxes[0];
        assert!((b[0] - 16.0 / 64.0).abs() < 1e-9);
        assert!((b[3] - 12.0 / 48.0).abs() < 1e-9);
    }

    #[test]
    fn missing_mask_skips_with_count() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), false);
        let report = load_bdd_subset(
            &dir.path().join("images"),
            &dir.path().join("ann.jsonl"),
            &dir.path().join("da"),
            &dir.path().join("ll"),
            (32, 32),
        )
        .unwrap();
        assert_eq!(report.samples.len(), 1);
        assert_eq!(report.skipped, 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), true);
        std::fs::write(
            dir.path().join("ann.jsonl"),
            "{\"name\":\"a.jpg\",\"labels\":[]}\nnot json at all\n",
        )
        .unwrap();
        let err = load_bdd_subset(
            &dir.path().join("images"),
            &dir.path().join("ann.jsonl"),
            &dir.path().join("da"),
            &dir.path().join("ll"),
            (32, 32),
        )
        .unwrap_err();
        match err {
            Error::Annotation { line, .. } => assert_eq!(line, 2),
            other => panic!("expected annotation error, got {other}"),
        }
    }
}
