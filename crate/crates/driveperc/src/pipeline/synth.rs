//! Procedural road-scene generator: a trapezoidal drivable region, thin
//! (2-px) lane polylines stored both raw and dilated, and rectangular
//! "vehicles" with normalized boxes. Deterministic per seed.

use std::path::Path;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lane_eval::{dilate_mask, BinaryMask, StructuringElement7};

/// One training/evaluation sample. The image is CHW RGB in [0, 1]; boxes
/// are normalized (cx, cy, w, h) of the single "vehicle" class; the lane
/// mask is kept both thin (as annotated) and dilated (as trained/evaluated).
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Vec<f32>,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<[f64; 4]>,
    pub da_mask: BinaryMask,
    pub ll_mask_raw: BinaryMask,
    pub ll_mask_dilated: BinaryMask,
}

impl Sample {
    pub fn image_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.image.clone(),
            (3, self.height, self.width),
            device,
        )?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.len() != 3 * self.width * self.height {
            return Err(Error::invalid_input("image buffer size mismatch"));
        }
        for m in [&self.da_mask, &self.ll_mask_raw, &self.ll_mask_dilated] {
            if m.width() != self.width || m.height() != self.height {
                return Err(Error::invalid_input("mask dims differ from image dims"));
            }
        }
        for b in &self.boxes {
            if b.iter().any(|v| !(0.0..=1.0).contains(v)) || b[2] <= 0.0 || b[3] <= 0.0 {
                return Err(Error::invalid_input(format!("invalid box {b:?}")));
            }
        }
        Ok(())
    }
}

struct Painter<'a> {
    image: &'a mut [f32],
    w: usize,
    h: usize,
}

impl Painter<'_> {
    fn put(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        if x < self.w && y < self.h {
            for (c, v) in rgb.iter().enumerate() {
                self.image[c * self.w * self.h + y * self.w + x] = *v;
            }
        }
    }
}

/// Generate `n` deterministic scenes of `height x width` pixels.
pub fn generate_synthetic_dataset(
    n: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::invalid_input("sample count must be at least 1"));
    }
    let (h, w) = size;
    if h < 16 || w < 16 {
        return Err(Error::invalid_input("scene size must be at least 16x16"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| generate_scene(h, w, &mut rng)).collect()
}

fn generate_scene(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let mut image = vec![0f32; 3 * h * w];
    // Sky/ground background gradient.
    for y in 0..h {
        let t = y as f32 / h as f32;
        let rgb = [0.35 + 0.1 * t, 0.45 - 0.1 * t, 0.6 - 0.3 * t];
        for x in 0..w {
            for c in 0..3 {
                image[c * w * h + y * w + x] = rgb[c];
            }
        }
    }
    let mut p = Painter { image: &mut image, w, h };

    // Trapezoidal drivable region from a horizon line down to the bottom.
    let y0 = (h as f64 * rng.gen_range(0.35..0.5)) as usize;
    let bottom_l = w as f64 * rng.gen_range(0.02..0.12);
    let bottom_r = w as f64 * rng.gen_range(0.88..0.98);
    let top_c = w as f64 * rng.gen_range(0.40..0.60);
    let top_half = w as f64 * rng.gen_range(0.04..0.10);
    let mut da_mask = BinaryMask::new(w, h);
    let span = (h - 1 - y0).max(1) as f64;
    let edges = |y: usize| {
        let t = (y - y0) as f64 / span;
        let xl = (top_c - top_half) * (1.0 - t) + bottom_l * t;
        let xr = (top_c + top_half) * (1.0 - t) + bottom_r * t;
        (xl, xr)
    };
    for y in y0..h {
        let (xl, xr) = edges(y);
        for x in xl.max(0.0) as usize..=(xr.min(w as f64 - 1.0) as usize) {
            da_mask.set(x, y, 1);
            p.put(x, y, [0.30, 0.32, 0.34]);
        }
    }

    // Thin 2-px lane lines at fixed fractions of the road width.
    let lane_count = rng.gen_range(2..=3usize);
    let mut ll_raw = BinaryMask::new(w, h);
    for k in 0..lane_count {
        let f = (k as f64 + 1.0) / (lane_count as f64 + 1.0)
            + rng.gen_range(-0.05..0.05);
        for y in y0..h {
            let (xl, xr) = edges(y);
            let x = (xl + f * (xr - xl)).round() as isize;
            for dx in 0..2isize {
                let xi = x + dx;
                if xi >= 0 && (xi as usize) < w {
                    ll_raw.set(xi as usize, y, 1);
                }
            }
        }
    }
    let ll_dilated = dilate_mask(&ll_raw, &StructuringElement7::default());
    // Paint lanes with the trained (dilated) footprint so the cue the model
    // sees matches the label convention.
    for y in 0..h {
        for x in 0..w {
            if ll_dilated.get(x, y) == 1 {
                p.put(x, y, [0.95, 0.95, 0.9]);
            }
        }
    }

    // Rectangular vehicles on the road.
    let vehicles = rng.gen_range(1..=3usize);
    let mut boxes = Vec::with_capacity(vehicles);
    for _ in 0..vehicles {
        let bw = rng.gen_range(0.12..0.28);
        let bh = rng.gen_range(0.10..0.22);
        let cx = rng.gen_range(bw / 2.0..1.0 - bw / 2.0);
        let cy = rng.gen_range((y0 as f64 / h as f64).max(bh / 2.0)..1.0 - bh / 2.0);
        let color = [0.85, rng.gen_range(0.05..0.25) as f32, rng.gen_range(0.05..0.25) as f32];
        let x0 = ((cx - bw / 2.0) * w as f64) as usize;
        let x1 = ((cx + bw / 2.0) * w as f64) as usize;
        let y0p = ((cy - bh / 2.0) * h as f64) as usize;
        let y1p = ((cy + bh / 2.0) * h as f64) as usize;
        for y in y0p..y1p.min(h) {
            for x in x0..x1.min(w) {
                p.put(x, y, color);
            }
        }
        boxes.push([cx, cy, bw, bh]);
    }

    let sample = Sample {
        image,
        width: w,
        height: h,
        boxes,
        da_mask,
        ll_mask_raw: ll_raw,
        ll_mask_dilated: ll_dilated,
    };
    sample.validate()?;
    Ok(sample)
}

/// Write one sample to disk: RGB image, drivable mask, raw and dilated lane
/// masks, and a JSON box list.
pub fn write_sample(sample: &Sample, dir: &Path, index: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (w, h) = (sample.width as u32, sample.height as u32);
    let mut img = image::RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            let px = |c: usize| {
                (sample.image[c * (w * h) as usize + i].clamp(0.0, 1.0) * 255.0) as u8
            };
            img.put_pixel(x, y, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(dir.join(format!("{index:05}_image.png")))?;
    sample.da_mask.write_png(&dir.join(format!("{index:05}_da.png")))?;
    sample
        .ll_mask_raw
        .write_png(&dir.join(format!("{index:05}_ll.png")))?;
    sample
        .ll_mask_dilated
        .write_png(&dir.join(format!("{index:05}_ll_dilated.png")))?;
    let boxes = serde_json::to_string(&sample.boxes)
        .map_err(|e| Error::invalid_input(format!("box encode: {e}")))?;
    std::fs::write(dir.join(format!("{index:05}_boxes.json")), boxes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic_dataset(4, (64, 64), 7).unwrap();
        let b = generate_synthetic_dataset(4, (64, 64), 7).unwrap();
        for (s, t) in a.iter().zip(&b) {
            assert_eq!(
                s.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                t.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            assert_eq!(s.boxes, t.boxes);
            assert_eq!(s.da_mask.data(), t.da_mask.data());
            assert_eq!(s.ll_mask_raw.data(), t.ll_mask_raw.data());
        }
        let c = generate_synthetic_dataset(4, (64, 64), 8).unwrap();
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn lane_masks_nested_and_boxes_valid() {
        for s in generate_synthetic_dataset(10, (96, 64), 3).unwrap() {
            assert!(s.ll_mask_raw.is_subset_of(&s.ll_mask_dilated));
            assert!(s.ll_mask_raw.count_foreground() > 0);
            assert!(s.da_mask.count_foreground() > 0);
            assert!(!s.boxes.is_empty());
            s.validate().unwrap();
        }
    }

    #[test]
    fn rejects_degenerate_requests() {
        assert!(generate_synthetic_dataset(0, (64, 64), 0).is_err());
        assert!(generate_synthetic_dataset(1, (8, 8), 0).is_err());
    }

    #[test]
    fn writes_sample_files() {
        let dir = tempfile::tempdir().unwrap();
        let s = &generate_synthetic_dataset(1, (32, 32), 0).unwrap()[0];
        write_sample(s, dir.path(), 0).unwrap();
        for suffix in ["image", "da", "ll", "ll_dilated"] {
            assert!(dir.path().join(format!("00000_{suffix}.png")).exists());
        }
        assert!(dir.path().join("00000_boxes.json").exists());
    }
}
