//! Gradient-conflict diagnostics: per-task gradients on the shared
//! parameter set, pairwise cosine similarities, and similarity histograms.
//! Negative cosines between task gradients indicate conflicting descent
//! directions (negative transfer), which gated fusion is meant to reduce.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::Tensor;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::varstore::VarStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum TaskId {
    Detection,
    Drivable,
    Lane,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Detection, TaskId::Drivable, TaskId::Lane];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Detection => "detection",
            TaskId::Drivable => "drivable",
            TaskId::Lane => "lane",
        }
    }
}

/// One task's flattened gradient over the shared parameters at one step.
#[derive(Clone, Debug)]
pub struct GradRecord {
    pub step: usize,
    pub task: TaskId,
    pub vector: Vec<f64>,
    /// Set when the backward pass produced any non-finite entry; flagged
    /// records are excluded from similarity statistics.
    pub flagged: bool,
}

/// The shared-parameter name set: every trainable parameter under `prefix`,
/// sorted by name. The fixed order makes gradient vectors comparable across
/// tasks and steps.
pub fn shared_param_names(vs: &VarStore, prefix: &str) -> Vec<String> {
    vs.trainable_vars()
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| n.starts_with(prefix))
        .collect()
}

/// Flatten the gradient over `names` from an existing backward pass (zeros
/// for parameters the loss does not reach). The flag is set when any entry
/// is non-finite.
pub fn vector_from_grads(
    grads: &candle_core::backprop::GradStore,
    vs: &VarStore,
    names: &[String],
) -> Result<(Vec<f64>, bool)> {
    let mut vector = Vec::new();
    let mut flagged = false;
    for name in names {
        let var = vs
            .get_var(name)
            .ok_or_else(|| Error::config(format!("unknown shared parameter `{name}`")))?;
        match grads.get(var.as_tensor()) {
            Some(g) => {
                let v: Vec<f64> = g
                    .to_dtype(candle_core::DType::F64)?
                    .flatten_all()?
                    .to_vec1()?;
                if v.iter().any(|x| !x.is_finite()) {
                    flagged = true;
                }
                vector.extend(v);
            }
            None => vector.extend(std::iter::repeat(0.0).take(var.as_tensor().elem_count())),
        }
    }
    Ok((vector, flagged))
}

/// Backpropagate one task loss and capture the gradient over `names` as a
/// flat vector. Parameters themselves are left untouched.
pub fn capture_gradient(
    loss: &Tensor,
    vs: &VarStore,
    names: &[String],
    step: usize,
    task: TaskId,
) -> Result<GradRecord> {
    let grads = loss.backward()?;
    let (vector, flagged) = vector_from_grads(&grads, vs, names)?;
    Ok(GradRecord {
        step,
        task,
        vector,
        flagged,
    })
}

/// Cosine similarity; `None` when either vector has zero norm (the sample
/// is skipped rather than reported).
pub fn pairwise_cosine(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::invalid_input(format!(
            "gradient lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(None);
    }
    Ok(Some((dot / (na * nb)).clamp(-1.0, 1.0)))
}

#[derive(Clone, Debug, Serialize)]
pub struct SimilarityHistogram {
    /// `bins + 1` edges partitioning [-1, 1].
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub fraction_negative: f64,
    pub samples: usize,
}

/// Equal-width histogram over [-1, 1]; values on a bin boundary go to the
/// upper bin (so 0 with two bins lands in the second).
pub fn build_histogram(samples: &[f64], bins: usize) -> Result<SimilarityHistogram> {
    if samples.is_empty() {
        return Err(Error::invalid_input("histogram needs at least one sample"));
    }
    if bins == 0 {
        return Err(Error::config("bin count must be positive"));
    }
    let width = 2.0 / bins as f64;
    let mut counts = vec![0usize; bins];
    for &s in samples {
        if !(-1.0..=1.0).contains(&s) {
            return Err(Error::invalid_input(format!("sample {s} outside [-1, 1]")));
        }
        let idx = (((s + 1.0) / width).floor() as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let negative = samples.iter().filter(|&&s| s < 0.0).count();
    Ok(SimilarityHistogram {
        bin_edges: (0..=bins).map(|i| -1.0 + i as f64 * width).collect(),
        counts,
        mean,
        fraction_negative: negative as f64 / samples.len() as f64,
        samples: samples.len(),
    })
}

/// CSV rows: `bin_lo,bin_hi,count`.
pub fn histogram_csv(h: &SimilarityHistogram) -> String {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for (i, &c) in h.counts.iter().enumerate() {
        let _ = writeln!(out, "{:.4},{:.4},{c}", h.bin_edges[i], h.bin_edges[i + 1]);
    }
    out
}

/// Render the histogram as a simple bar chart PNG.
pub fn render_histogram_png(h: &SimilarityHistogram, path: &Path) -> Result<()> {
    let bar_w = 8u32;
    let width = h.counts.len() as u32 * bar_w + 2;
    let height = 220u32;
    let plot_h = 200u32;
    let max = *h.counts.iter().max().unwrap_or(&1) as f64;
    let mut img = image::GrayImage::from_pixel(width, height, image::Luma([255u8]));
    for (i, &c) in h.counts.iter().enumerate() {
        let bar = if max > 0.0 {
            ((c as f64 / max) * plot_h as f64).round() as u32
        } else {
            0
        };
        for dx in 0..bar_w - 1 {
            let x = 1 + i as u32 * bar_w + dx;
            for dy in 0..bar {
                img.put_pixel(x, height - 10 - dy, image::Luma([40u8]));
            }
        }
    }
    // Baseline axis.
    for x in 0..width {
        img.put_pixel(x, height - 9, image::Luma([0u8]));
    }
    img.save(path)?;
    Ok(())
}

/// Per-pair similarity streams for the three task pairs.
#[derive(Clone, Debug, Default, Serialize)]
pub struct PairwiseSimilarities {
    pub det_drivable: Vec<f64>,
    pub det_lane: Vec<f64>,
    pub drivable_lane: Vec<f64>,
    pub skipped: usize,
}

impl PairwiseSimilarities {
    /// Fold one step's three task records into the pair streams. Flagged
    /// (non-finite) records and zero-norm samples are skipped.
    pub fn push_step(
        &mut self,
        det: &GradRecord,
        da: &GradRecord,
        ll: &GradRecord,
    ) -> Result<()> {
        let mut add = |target: &mut Vec<f64>, a: &GradRecord, b: &GradRecord| -> Result<()> {
            if a.flagged || b.flagged {
                self.skipped += 1;
                return Ok(());
            }
            match pairwise_cosine(&a.vector, &b.vector)? {
                Some(c) => target.push(c),
                None => self.skipped += 1,
            }
            Ok(())
        };
        let mut dd = std::mem::take(&mut self.det_drivable);
        add(&mut dd, det, da)?;
        self.det_drivable = dd;
        let mut dl = std::mem::take(&mut self.det_lane);
        add(&mut dl, det, ll)?;
        self.det_lane = dl;
        let mut al = std::mem::take(&mut self.drivable_lane);
        add(&mut al, da, ll)?;
        self.drivable_lane = al;
        Ok(())
    }

    pub fn all_samples(&self) -> Vec<f64> {
        let mut v = self.det_drivable.clone();
        v.extend(&self.det_lane);
        v.extend(&self.drivable_lane);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use crate::varstore::{Init, VarStore};

    #[test]
    fn toy_model_analytic_gradients() {
        // Single parameter theta; L1 = sum(theta) has gradient 1,
        // L2 = -sum(theta) has gradient -1.
        let vs = VarStore::new(Device::Cpu, DType::F64, 0);
        let theta = vs.root().get((1,), "shared.theta", Init::Const(0.3)).unwrap();
        let names = shared_param_names(&vs, "shared.");
        assert_eq!(names, vec!["shared.theta"]);

        let l1 = theta.sum_all().unwrap();
        let l2 = theta.sum_all().unwrap().neg().unwrap();
        let g1 = capture_gradient(&l1, &vs, &names, 0, TaskId::Detection).unwrap();
        let g2 = capture_gradient(&l2, &vs, &names, 0, TaskId::Lane).unwrap();
        assert_eq!(g1.vector, vec![1.0]);
        assert_eq!(g2.vector, vec![-1.0]);
        assert!(!g1.flagged && !g2.flagged);
        // Opposite directions: cosine -1.
        assert_eq!(pairwise_cosine(&g1.vector, &g2.vector).unwrap(), Some(-1.0));
        // Capture is read-only.
        let v: Vec<f64> = theta.to_vec1().unwrap();
        assert_eq!(v, vec![0.3]);
    }

    #[test]
    fn identical_losses_give_identical_vectors() {
        let vs = VarStore::new(Device::Cpu, DType::F64, 1);
        let theta = vs.root().get((4,), "shared.w", Init::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
        let names = shared_param_names(&vs, "shared.");
        let loss = || theta.sqr().unwrap().sum_all().unwrap();
        let a = capture_gradient(&loss(), &vs, &names, 0, TaskId::Detection).unwrap();
        let b = capture_gradient(&loss(), &vs, &names, 0, TaskId::Drivable).unwrap();
        assert_eq!(a.vector, b.vector);
        assert_eq!(pairwise_cosine(&a.vector, &b.vector).unwrap(), Some(1.0));
    }

    #[test]
    fn missing_gradient_becomes_zeros() {
        let vs = VarStore::new(Device::Cpu, DType::F64, 2);
        let used = vs.root().get((2,), "shared.a", Init::Ones).unwrap();
        let _unused = vs.root().get((3,), "shared.b", Init::Ones).unwrap();
        let names = shared_param_names(&vs, "shared.");
        let loss = used.sum_all().unwrap();
        let g = capture_gradient(&loss, &vs, &names, 0, TaskId::Lane).unwrap();
        assert_eq!(g.vector, vec![1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cosine_fixtures() {
        assert_eq!(pairwise_cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), Some(0.0));
        assert_eq!(pairwise_cosine(&[2.0, 0.0], &[1.0, 0.0]).unwrap(), Some(1.0));
        assert_eq!(pairwise_cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), None);
        assert!(pairwise_cosine(&[1.0], &[1.0, 2.0]).is_err());
        // Symmetry on a random pair.
        let a = [0.3, -0.7, 0.2];
        let b = [-0.5, 0.1, 0.9];
        assert_eq!(
            pairwise_cosine(&a, &b).unwrap(),
            pairwise_cosine(&b, &a).unwrap()
        );
    }

    #[test]
    fn histogram_boundary_rule_and_summary() {
        let h = build_histogram(&[-1.0, 0.0, 1.0], 2).unwrap();
        assert_eq!(h.counts, vec![1, 2]);
        assert_eq!(h.samples, 3);
        let h = build_histogram(&[0.5, 0.5], 4).unwrap();
        assert_eq!(h.fraction_negative, 0.0);
        let h = build_histogram(&[-0.5, 0.5], 4).unwrap();
        assert_eq!(h.mean, 0.0);
        assert_eq!(h.fraction_negative, 0.5);
        assert!(build_histogram(&[], 4).is_err());
        assert!(build_histogram(&[2.0], 4).is_err());
        // 50 bins: edges span [-1, 1].
        let h = build_histogram(&[0.0], 50).unwrap();
        assert_eq!(h.bin_edges.len(), 51);
        assert_eq!(h.bin_edges[0], -1.0);
        assert!((h.bin_edges[50] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_and_png_outputs() {
        let h = build_histogram(&[-0.9, -0.1, 0.3, 0.3, 0.8], 4).unwrap();
        let csv = histogram_csv(&h);
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines[0], "bin_lo,bin_hi,count");
        assert_eq!(lines.len(), 5);
        let total: usize = h.counts.iter().sum();
        assert_eq!(total, 5);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hist.png");
        render_histogram_png(&h, &path).unwrap();
        assert!(path.exists());
        let img = image::open(&path).unwrap();
        assert_eq!(img.height(), 220);
    }

    #[test]
    fn pair_streams_skip_flagged_and_zero_norm() {
        let rec = |v: Vec<f64>, flagged| GradRecord {
            step: 0,
            task: TaskId::Detection,
            vector: v,
            flagged,
        };
        let mut p = PairwiseSimilarities::default();
        p.push_step(
            &rec(vec![1.0, 0.0], false),
            &rec(vec![0.0, 1.0], false),
            &rec(vec![0.0, 0.0], false),
        )
        .unwrap();
        assert_eq!(p.det_drivable, vec![0.0]);
        assert!(p.det_lane.is_empty());
        assert_eq!(p.skipped, 2);
        let mut p = PairwiseSimilarities::default();
        p.push_step(
            &rec(vec![1.0], true),
            &rec(vec![1.0], false),
            &rec(vec![1.0], false),
        )
        .unwrap();
        assert_eq!(p.drivable_lane, vec![1.0]);
        assert_eq!(p.skipped, 2);
    }
}
