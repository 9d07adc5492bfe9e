//! SGD training with linear warmup into a cosine decay, per-step losses
//! derived statelessly from (seed, step) so a resumed run reproduces an
//! uninterrupted one, and the gradient-conflict analysis loop.

use std::collections::HashMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grad_analysis::{
    build_histogram, shared_param_names, vector_from_grads, GradRecord, PairwiseSimilarities,
    SimilarityHistogram, TaskId,
};
use crate::losses::{denoising_loss, detection_loss, segmentation_losses, total_loss, GroundTruth};
use crate::pipeline::bdd;
use crate::pipeline::config::Config;
use crate::pipeline::model::PerceptionModel;
use crate::pipeline::synth::{generate_synthetic_dataset, Sample};
use crate::encoder::FeaturePyramid;
use crate::seg_decoder::SegTask;

/// Momentum SGD with the published schedule: linear warmup (weights from 0,
/// biases from `warmup_bias_lr`, momentum from `warmup_momentum`) into a
/// cosine decay to 1% of the base rate. Weight decay applies only to
/// parameters with more than one dimension (weights, not biases/norms).
pub struct Sgd {
    pub lr_base: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub warmup_momentum: f64,
    pub warmup_bias_lr: f64,
    /// Global gradient-norm ceiling; gradients are rescaled when the joint
    /// norm exceeds it. Early detection losses can be orders of magnitude
    /// above steady state, and with a warmup bias rate of 0.1 an unclipped
    /// first update can blow the parameters up.
    pub clip_grad_norm: f64,
    velocity: HashMap<String, Tensor>,
}

/// Final cosine learning-rate fraction of the base rate.
pub const LR_FINAL_FRACTION: f64 = 0.01;

impl Sgd {
    pub fn new(cfg: &Config, steps_per_epoch: usize) -> Sgd {
        let t = &cfg.train;
        Sgd {
            lr_base: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            warmup_steps: t.warmup_epochs * steps_per_epoch,
            total_steps: (t.epochs * steps_per_epoch).max(1),
            warmup_momentum: t.warmup_momentum,
            warmup_bias_lr: t.warmup_bias_lr,
            clip_grad_norm: t.clip_grad_norm,
            velocity: HashMap::new(),
        }
    }

    /// (weight lr, bias lr, momentum) at a given step.
    pub fn schedule(&self, step: usize) -> (f64, f64, f64) {
        if step < self.warmup_steps {
            let t = (step + 1) as f64 / self.warmup_steps as f64;
            let lr = self.lr_base * t;
            let lr_bias = self.warmup_bias_lr + (self.lr_base - self.warmup_bias_lr) * t;
            let mu = self.warmup_momentum + (self.momentum - self.warmup_momentum) * t;
            (lr, lr_bias, mu)
        } else {
            let span = (self.total_steps.saturating_sub(self.warmup_steps)).max(1) as f64;
            let u = ((step - self.warmup_steps) as f64 / span).clamp(0.0, 1.0);
            let frac =
                LR_FINAL_FRACTION + (1.0 - LR_FINAL_FRACTION) * 0.5 * (1.0 + (std::f64::consts::PI * u).cos());
            let lr = self.lr_base * frac;
            (lr, lr, self.momentum)
        }
    }

    /// Apply one update; `lookup` maps a parameter to its gradient (missing
    /// gradients leave the parameter untouched).
    pub fn step(
        &mut self,
        vs: &crate::varstore::VarStore,
        step_idx: usize,
        lookup: &dyn Fn(&Var) -> Option<Tensor>,
    ) -> Result<()> {
        let (lr, lr_bias, mu) = self.schedule(step_idx);
        // Gather gradients once (detached so the velocity buffer never
        // retains a step's autograd graph — gradient tensors reference the
        // whole forward pass) and measure the global norm for clipping.
        let mut grads: Vec<(String, Var, Tensor)> = Vec::new();
        let mut sq_norm = 0f64;
        for (name, var) in vs.trainable_vars() {
            let Some(grad) = lookup(&var) else { continue };
            let g = grad.detach().to_dtype(var.as_tensor().dtype())?;
            sq_norm += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            grads.push((name, var, g));
        }
        let norm = sq_norm.sqrt();
        let scale = if self.clip_grad_norm > 0.0 && norm > self.clip_grad_norm {
            self.clip_grad_norm / norm
        } else {
            1.0
        };
        for (name, var, grad) in grads {
            let p = var.as_tensor();
            let mut g = if scale != 1.0 { (grad * scale)? } else { grad };
            if self.weight_decay > 0.0 && p.dims().len() > 1 {
                g = (g + (p.detach() * self.weight_decay)?)?;
            }
            let v = match self.velocity.get(&name) {
                Some(prev) => ((prev * mu)? + &g)?.detach(),
                None => g.detach(),
            };
            let rate = if name.ends_with(".bias") && p.dims().len() == 1 {
                lr_bias
            } else {
                lr
            };
            let updated = (p - (&v * rate)?)?;
            vs.set_var(&name, &updated)?;
            self.velocity.insert(name, v);
        }
        Ok(())
    }

    pub fn velocities(&self) -> &HashMap<String, Tensor> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, name: String, v: Tensor) {
        self.velocity.insert(name, v);
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub det_loss: f64,
    pub da_loss: f64,
    pub ll_loss: f64,
    pub dn_loss: f64,
    pub lr: f64,
    /// Total denoising queries this step (sum of G*M over the batch).
    pub dn_queries: usize,
    /// Total ground-truth boxes this step.
    pub gt_count: usize,
}

struct BatchLosses {
    det: Tensor,
    da: Tensor,
    ll: Tensor,
    dn_value: f64,
    dn_queries: usize,
    gt_count: usize,
}

pub fn load_dataset(cfg: &Config) -> Result<Vec<Sample>> {
    match cfg.data.dataset.as_str() {
        "synthetic" => generate_synthetic_dataset(
            cfg.data.samples,
            (cfg.model.input_size[0], cfg.model.input_size[1]),
            cfg.data.seed,
        ),
        "bdd" => {
            let need = |o: &Option<String>, what: &str| {
                o.clone()
                    .ok_or_else(|| Error::config(format!("bdd dataset requires data.{what}")))
            };
            let report = bdd::load_bdd_subset(
                Path::new(&need(&cfg.data.image_dir, "image_dir")?),
                Path::new(&need(&cfg.data.annotations, "annotations")?),
                Path::new(&need(&cfg.data.da_mask_dir, "da_mask_dir")?),
                Path::new(&need(&cfg.data.ll_mask_dir, "ll_mask_dir")?),
                (cfg.model.input_size[0], cfg.model.input_size[1]),
            )?;
            Ok(report.samples)
        }
        other => Err(Error::config(format!("unknown dataset `{other}`"))),
    }
}

fn narrow_pyramid(p: &FeaturePyramid, b: usize) -> Result<FeaturePyramid> {
    Ok(FeaturePyramid {
        s3: p.s3.narrow(0, b, 1)?,
        s4: p.s4.narrow(0, b, 1)?,
        s5: p.s5.narrow(0, b, 1)?,
    })
}

fn mask_tensor(samples: &[&Sample], lane: bool, device: &Device, dtype: DType) -> Result<Tensor> {
    let (h, w) = (samples[0].height, samples[0].width);
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        let m = if lane { &s.ll_mask_dilated } else { &s.da_mask };
        data.extend(m.data().iter().map(|&v| v as f32));
    }
    Ok(Tensor::from_vec(data, (samples.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

pub struct Trainer {
    pub model: PerceptionModel,
    pub opt: Sgd,
    cfg: Config,
    data: Vec<Sample>,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: &Config, data: Vec<Sample>) -> Result<Trainer> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let model = PerceptionModel::new(cfg, &Device::Cpu, DType::F32, cfg.train.seed)?;
        let steps_per_epoch = data.len().div_ceil(cfg.train.batch_size).max(1);
        let opt = Sgd::new(cfg, steps_per_epoch);
        Ok(Trainer {
            model,
            opt,
            cfg: cfg.clone(),
            data,
            step: 0,
        })
    }

    pub fn from_config(cfg: &Config) -> Result<Trainer> {
        let data = load_dataset(cfg)?;
        Trainer::new(cfg, data)
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn data(&self) -> &[Sample] {
        &self.data
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    /// Override the cosine horizon (for fixed-step runs).
    pub fn set_total_steps(&mut self, total: usize) {
        self.opt.total_steps = total.max(1);
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.cfg.train.batch_size).max(1)
    }

    /// The batch for a step, derived statelessly from (seed, step).
    fn step_rng(&self, step: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(
            self.cfg
                .train
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(step as u64),
        )
    }

    fn batch_indices(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..self.cfg.train.batch_size.min(self.data.len()))
            .map(|_| rng.gen_range(0..self.data.len()))
            .collect()
    }

    fn compute_losses(&self, indices: &[usize], rng: &mut ChaCha8Rng) -> Result<BatchLosses> {
        let device = self.model.varstore().device().clone();
        let dtype = self.model.varstore().dtype();
        let samples: Vec<&Sample> = indices.iter().map(|&i| &self.data[i]).collect();
        let b = samples.len();
        let (h, w) = (samples[0].height, samples[0].width);
        let mut image_data = Vec::with_capacity(b * 3 * h * w);
        for s in &samples {
            image_data.extend_from_slice(&s.image);
        }
        let images = Tensor::from_vec(image_data, (b, 3, h, w), &device)?.to_dtype(dtype)?;
        let p = self.model.encode(&images, true)?;
        let m = &self.cfg.model;
        let zero = Tensor::zeros((), dtype, &device)?;
        let w_loss = &self.cfg.train.loss;

        // Segmentation: one gated (or shared) pyramid per task, batched.
        let tiny = Tensor::zeros((1, 1, 1, 1), dtype, &device)?;
        let (da_logits, da_gt) = if m.task_drivable {
            let pd = self.model.task_pyramid(&p, TaskId::Drivable, true)?;
            (
                self.model.seg_logits(&pd, SegTask::Drivable, true)?,
                mask_tensor(&samples, false, &device, dtype)?,
            )
        } else {
            (tiny.clone(), tiny.clone())
        };
        let (ll_logits, ll_gt) = if m.task_lane {
            let pl = self.model.task_pyramid(&p, TaskId::Lane, true)?;
            (
                self.model.seg_logits(&pl, SegTask::Lane, true)?,
                mask_tensor(&samples, true, &device, dtype)?,
            )
        } else {
            (tiny.clone(), tiny.clone())
        };
        let (da_raw, ll_raw) = segmentation_losses(&da_logits, &da_gt, &ll_logits, &ll_gt, w_loss)?;
        let da = if m.task_drivable { da_raw } else { zero.clone() };
        let ll = if m.task_lane { ll_raw } else { zero.clone() };

        // Detection: per image, with denoising groups and the encoder-head
        // selection auxiliary.
        let mut det = zero.clone();
        let mut dn_value = 0.0;
        let mut dn_queries = 0;
        let mut gt_count = 0;
        if m.task_detection {
            let pd = self.model.task_pyramid(&p, TaskId::Detection, true)?;
            for (bi, s) in samples.iter().enumerate() {
                let p_item = narrow_pyramid(&pd, bi)?;
                let gt = GroundTruth {
                    boxes: s.boxes.clone(),
                };
                gt_count += gt.len();
                let out = self.model.det_forward_train(&p_item, &gt, rng)?;
                dn_queries += out.dn_group.len();
                let mut l = detection_loss(&out.main_layers, &gt, w_loss)?;
                l = (l + detection_loss(std::slice::from_ref(&out.enc_pred), &gt, w_loss)?)?;
                if !out.dn_group.is_empty() {
                    let dn = denoising_loss(&out.dn_layers, &out.dn_group, &gt, w_loss)?;
                    dn_value += dn.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                    l = (l + dn)?;
                }
                det = (det + l)?;
            }
            det = (det / b as f64)?;
            dn_value /= b as f64;
        }
        Ok(BatchLosses {
            det,
            da,
            ll,
            dn_value,
            dn_queries,
            gt_count,
        })
    }

    /// One optimizer step; the batch and all noise are derived from
    /// (seed, step) only.
    pub fn step(&mut self) -> Result<StepLog> {
        let idx = self.step;
        let mut rng = self.step_rng(idx);
        let indices = self.batch_indices(&mut rng);
        let losses = self.compute_losses(&indices, &mut rng)?;
        let total = total_loss(&losses.det, &losses.da, &losses.ll).map_err(|e| {
            eprintln!(
                "training aborted at step {idx}: {e} (batch {indices:?}, lr {:.5})",
                self.opt.schedule(idx).0
            );
            e
        })?;
        let grads = total.backward()?;
        self.opt
            .step(self.model.varstore(), idx, &|v| grads.get(v.as_tensor()).cloned())?;
        self.step += 1;
        Ok(self.log_from(idx, &losses, &total)?)
    }

    fn log_from(&self, step: usize, l: &BatchLosses, total: &Tensor) -> Result<StepLog> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar()?) };
        Ok(StepLog {
            step,
            loss: f(total)?,
            det_loss: f(&l.det)?,
            da_loss: f(&l.da)?,
            ll_loss: f(&l.ll)?,
            dn_loss: l.dn_value,
            lr: self.opt.schedule(step).0,
            dn_queries: l.dn_queries,
            gt_count: l.gt_count,
        })
    }

    pub fn run_steps(&mut self, n: usize) -> Result<Vec<StepLog>> {
        (0..n).map(|_| self.step()).collect()
    }

    /// One analysis step: capture per-task gradients on the shared
    /// parameters, then update with their sum (plus task-branch gradients).
    pub fn analyze_step(&mut self, names: &[String]) -> Result<[GradRecord; 3]> {
        let idx = self.step;
        let mut rng = self.step_rng(idx);
        let indices = self.batch_indices(&mut rng);
        let losses = self.compute_losses(&indices, &mut rng)?;
        let vs = self.model.varstore();
        let stores: Vec<GradStore> = [&losses.det, &losses.da, &losses.ll]
            .iter()
            .map(|l| Ok(l.backward()?))
            .collect::<Result<_>>()?;
        let mut records = Vec::with_capacity(3);
        for (store, task) in stores.iter().zip(TaskId::ALL) {
            let (vector, flagged) = vector_from_grads(store, vs, names)?;
            records.push(GradRecord {
                step: idx,
                task,
                vector,
                flagged,
            });
        }
        let lookup = |v: &Var| -> Option<Tensor> {
            let mut acc: Option<Tensor> = None;
            for s in &stores {
                if let Some(g) = s.get(v.as_tensor()) {
                    acc = Some(match acc {
                        Some(a) => (a + g).ok()?,
                        None => g.clone(),
                    });
                }
            }
            acc
        };
        self.opt.step(vs, idx, &lookup)?;
        self.step += 1;
        Ok([records[0].clone(), records[1].clone(), records[2].clone()])
    }
}

/// Result of a gradient-conflict analysis run.
pub struct AnalysisRun {
    pub similarities: PairwiseSimilarities,
    pub histogram: SimilarityHistogram,
}

/// Train for `steps` while recording pairwise gradient cosine similarities
/// on the shared (backbone + hybrid encoder) parameters.
pub fn analyze_gradients(cfg: &Config, steps: usize) -> Result<AnalysisRun> {
    if steps == 0 {
        return Err(Error::invalid_input("analysis needs at least one step"));
    }
    let mut trainer = Trainer::from_config(cfg)?;
    trainer.set_total_steps(steps);
    let names = shared_param_names(trainer.model.varstore(), "encoder.");
    let mut sims = PairwiseSimilarities::default();
    for _ in 0..steps {
        let [det, da, ll] = trainer.analyze_step(&names)?;
        sims.push_step(&det, &da, &ll)?;
    }
    let samples = sims.all_samples();
    let histogram = build_histogram(&samples, 50)?;
    Ok(AnalysisRun {
        similarities: sims,
        histogram,
    })
}

/// Outcome of a full `train` invocation.
pub struct TrainOutcome {
    pub logs: Vec<StepLog>,
    pub last_checkpoint: std::path::PathBuf,
    pub best_checkpoint: std::path::PathBuf,
}

/// Full training entry point: epochs of steps, JSONL step log, best (lowest
/// training loss) and last checkpoints. `epochs = 0` writes an initialized
/// checkpoint and an empty log.
pub fn train(cfg: &Config, out_dir: &Path) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let mut trainer = Trainer::from_config(cfg)?;
    let total = cfg.train.epochs * trainer.steps_per_epoch();
    let mut logs = Vec::with_capacity(total);
    let mut best = f64::INFINITY;
    let last_path = out_dir.join("last.safetensors");
    let best_path = out_dir.join("best.safetensors");
    crate::pipeline::checkpoint::save_checkpoint(&last_path, &trainer, 0)?;
    if total == 0 {
        crate::pipeline::checkpoint::save_checkpoint(&best_path, &trainer, 0)?;
        std::fs::write(out_dir.join("train_log.jsonl"), "")?;
        return Ok(TrainOutcome {
            logs,
            last_checkpoint: last_path,
            best_checkpoint: best_path,
        });
    }
    let mut log_text = String::new();
    for _ in 0..total {
        let log = trainer.step()?;
        log_text.push_str(
            &serde_json::to_string(&log).map_err(|e| Error::invalid_input(e.to_string()))?,
        );
        log_text.push('\n');
        if log.loss < best {
            best = log.loss;
            crate::pipeline::checkpoint::save_checkpoint(&best_path, &trainer, log.step + 1)?;
        }
        logs.push(log);
    }
    crate::pipeline::checkpoint::save_checkpoint(&last_path, &trainer, total)?;
    std::fs::write(out_dir.join("train_log.jsonl"), log_text)?;
    Ok(TrainOutcome {
        logs,
        last_checkpoint: last_path,
        best_checkpoint: best_path,
    })
}
