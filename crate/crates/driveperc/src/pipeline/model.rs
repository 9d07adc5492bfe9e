//! The assembled multi-task network: shared encoder, optional per-task
//! gated fusion, segmentation decoder, and detection decoder, with task
//! flags covering every ablation row (single task, segmentation-only,
//! vanilla multi-task, multi-task + gated fusion).

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::det_decoder::{det_decoder, DetDecoder, EncOutputs, LayerOutput};
use crate::encoder::{encoder, Encoder, FeaturePyramid};
use crate::error::{Error, Result};
use crate::gca::{gca, Gca, GcaConfig};
use crate::grad_analysis::TaskId;
use crate::losses::{build_denoising_group, DenoisingGroup, DnNoise, GroundTruth, LayerPrediction};
use crate::nn::{linear, Linear};
use crate::pipeline::config::Config;
use crate::seg_decoder::{seg_decoder, SegDecoder, SegMasks, SegTask};
use crate::varstore::{Scope, VarStore};

/// Per-task gated fusion at each pyramid scale.
struct GcaBank {
    scales: [Gca; 3],
}

impl GcaBank {
    fn new(scope: &Scope, channels: usize) -> Result<Self> {
        let cfg = GcaConfig::new(channels);
        Ok(GcaBank {
            scales: [
                gca(&scope.pp("s3"), &cfg)?,
                gca(&scope.pp("s4"), &cfg)?,
                gca(&scope.pp("s5"), &cfg)?,
            ],
        })
    }

    fn fuse(&self, p: &FeaturePyramid, train: bool) -> Result<FeaturePyramid> {
        Ok(FeaturePyramid {
            s3: self.scales[0].fuse(&p.s3, train)?,
            s4: self.scales[1].fuse(&p.s4, train)?,
            s5: self.scales[2].fuse(&p.s5, train)?,
        })
    }
}

/// Training-time detection outputs for one image.
pub struct DetTrainOutput {
    /// Per-decoder-layer predictions on the N main queries.
    pub main_layers: Vec<LayerPrediction>,
    /// Per-decoder-layer predictions on the K = G*M denoising queries.
    pub dn_layers: Vec<LayerPrediction>,
    pub dn_group: DenoisingGroup,
    /// Encoder-head predictions over all tokens, used as a selection
    /// auxiliary loss so classification scores track localization quality.
    pub enc_pred: LayerPrediction,
}

pub struct PerceptionModel {
    vs: VarStore,
    cfg: Config,
    encoder: Encoder,
    gca_det: Option<GcaBank>,
    gca_drivable: Option<GcaBank>,
    gca_lane: Option<GcaBank>,
    seg: Option<SegDecoder>,
    det: Option<DetDecoder>,
    /// Content embedding of denoising queries, one row per label polarity.
    dn_embed: Option<Linear>,
}

impl PerceptionModel {
    pub fn new(cfg: &Config, device: &Device, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vs = VarStore::new(device.clone(), dtype, seed);
        let root = vs.root();
        let enc = encoder(&root.pp("encoder"), &cfg.encoder_config())?;
        let c = cfg.model.channel_width;
        let mk_bank = |task: TaskId| -> Result<Option<GcaBank>> {
            if cfg.model.gca {
                Ok(Some(GcaBank::new(&root.pp("gca").pp(task.name()), c)?))
            } else {
                Ok(None)
            }
        };
        let gca_det = if cfg.model.task_detection { mk_bank(TaskId::Detection)? } else { None };
        let gca_drivable = if cfg.model.task_drivable { mk_bank(TaskId::Drivable)? } else { None };
        let gca_lane = if cfg.model.task_lane { mk_bank(TaskId::Lane)? } else { None };
        let seg = if cfg.model.task_drivable || cfg.model.task_lane {
            Some(seg_decoder(&root.pp("seg"), c, cfg.model.seg_proj_width)?)
        } else {
            None
        };
        let (det, dn_embed) = if cfg.model.task_detection {
            let d = det_decoder(&root.pp("det"), c, &cfg.det_config())?;
            let e = linear(&root.pp("det").pp("dn_embed"), 2, c, false)?;
            (Some(d), Some(e))
        } else {
            (None, None)
        };
        Ok(PerceptionModel {
            vs,
            cfg: cfg.clone(),
            encoder: enc,
            gca_det,
            gca_drivable,
            gca_lane,
            seg,
            det,
            dn_embed,
        })
    }

    pub fn varstore(&self) -> &VarStore {
        &self.vs
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn seg_decoder(&self) -> Option<&SegDecoder> {
        self.seg.as_ref()
    }

    pub fn det_decoder(&self) -> Option<&DetDecoder> {
        self.det.as_ref()
    }

    /// Shared trunk: backbone + hybrid encoder.
    pub fn encode(&self, images: &Tensor, train: bool) -> Result<FeaturePyramid> {
        self.encoder.forward(images, train)
    }

    /// Task-specific view of the shared pyramid: gated fusion per scale
    /// when enabled, otherwise the shared features unchanged.
    pub fn task_pyramid(
        &self,
        p: &FeaturePyramid,
        task: TaskId,
        train: bool,
    ) -> Result<FeaturePyramid> {
        let bank = match task {
            TaskId::Detection => &self.gca_det,
            TaskId::Drivable => &self.gca_drivable,
            TaskId::Lane => &self.gca_lane,
        };
        match bank {
            Some(b) => b.fuse(p, train),
            None => Ok(p.clone()),
        }
    }

    /// Segmentation logits [B, 1, H, W] for one task from its pyramid.
    pub fn seg_logits(&self, p_task: &FeaturePyramid, task: SegTask, train: bool) -> Result<Tensor> {
        let seg = self
            .seg
            .as_ref()
            .ok_or_else(|| Error::config("segmentation branch disabled in this config"))?;
        seg.forward(p_task, task, train)
    }

    /// Inference-time segmentation probabilities for both tasks.
    pub fn predict_masks(&self, p: &FeaturePyramid, thresholds: (f64, f64)) -> Result<SegMasks> {
        let seg = self
            .seg
            .as_ref()
            .ok_or_else(|| Error::config("segmentation branch disabled in this config"))?;
        seg.predict_masks(p, thresholds)
    }

    /// Inference-time detection: per-layer outputs on the main queries.
    pub fn det_forward(&self, p_det: &FeaturePyramid) -> Result<Vec<LayerOutput>> {
        let det = self
            .det
            .as_ref()
            .ok_or_else(|| Error::config("detection branch disabled in this config"))?;
        det.forward(p_det)
    }

    /// Training-time detection pass for a single image (batch dim 1):
    /// selects N main queries, appends K = G*M denoising queries with a
    /// block-diagonal attention mask, and splits the per-layer outputs.
    pub fn det_forward_train<R: Rng>(
        &self,
        p_det: &FeaturePyramid,
        gt: &GroundTruth,
        rng: &mut R,
    ) -> Result<DetTrainOutput> {
        let det = self
            .det
            .as_ref()
            .ok_or_else(|| Error::config("detection branch disabled in this config"))?;
        let b = p_det.s3.dim(0)?;
        if b != 1 {
            return Err(Error::invalid_input(
                "training detection pass expects batch dimension 1",
            ));
        }
        let n = det.config().num_queries;
        let groups = det.config().dn_groups;
        let tokens = det.flatten_concat(p_det)?;
        let (sel, enc) = det.select_queries(&tokens, n)?;
        let group = build_denoising_group(gt, groups, DnNoise::default(), rng);
        let m = gt.len();
        let k = group.len();

        let (content, boxes, mask) = if k == 0 {
            (sel.content.clone(), sel.boxes.clone(), None)
        } else {
            let dev = self.vs.device().clone();
            let dtype = self.vs.dtype();
            // One-hot polarity rows through the embedding: row 1 for
            // positive queries, row 0 for negatives.
            let onehot: Vec<f64> = group
                .queries
                .iter()
                .flat_map(|q| if q.positive { [0.0, 1.0] } else { [1.0, 0.0] })
                .collect();
            let onehot = Tensor::from_vec(onehot, (k, 2), &dev)?.to_dtype(dtype)?;
            let dn_content = self
                .dn_embed
                .as_ref()
                .expect("dn_embed exists whenever det does")
                .forward(&onehot)?
                .unsqueeze(0)?;
            let dn_boxes: Vec<f64> = group.queries.iter().flat_map(|q| q.bbox).collect();
            let dn_boxes = Tensor::from_vec(dn_boxes, (1, k, 4), &dev)?.to_dtype(dtype)?;
            let content = Tensor::cat(&[&sel.content, &dn_content], 1)?;
            let boxes = Tensor::cat(&[&sel.boxes, &dn_boxes], 1)?;
            let mask = crate::det_decoder::denoising_attention_mask(n, groups, m, dtype, &dev)?;
            (content, boxes, Some(mask))
        };

        let outputs = det.decode_layers(&content, &boxes, &tokens, mask.as_ref())?;
        let mut main_layers = Vec::with_capacity(outputs.len());
        let mut dn_layers = Vec::with_capacity(outputs.len());
        for out in &outputs {
            main_layers.push(LayerPrediction {
                boxes: out.boxes.narrow(1, 0, n)?.squeeze(0)?,
                logits: out.logits.narrow(1, 0, n)?.squeeze(0)?,
            });
            if k > 0 {
                dn_layers.push(LayerPrediction {
                    boxes: out.boxes.narrow(1, n, k)?.squeeze(0)?,
                    logits: out.logits.narrow(1, n, k)?.squeeze(0)?,
                });
            }
        }
        let enc_pred = enc_prediction(&enc)?;
        Ok(DetTrainOutput {
            main_layers,
            dn_layers,
            dn_group: group,
            enc_pred,
        })
    }

    /// Sorted trainable parameter names.
    pub fn param_names(&self) -> Vec<String> {
        self.vs
            .trainable_vars()
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    }
}

fn enc_prediction(enc: &EncOutputs) -> Result<LayerPrediction> {
    Ok(LayerPrediction {
        boxes: enc.boxes.squeeze(0)?,
        logits: enc.logits.squeeze(0)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn micro() -> Config {
        let mut c = Config::micro();
        c.model.input_size = [32, 32];
        c.model.channel_width = 8;
        c.model.backbone_widths = [4, 8, 8, 8];
        c.model.num_queries = 6;
        c.model.det_layers = 1;
        c.model.dn_groups = 2;
        c.model.seg_proj_width = 8;
        c
    }

    fn image(c: &Config) -> Tensor {
        Tensor::zeros(
            (1, 3, c.model.input_size[0], c.model.input_size[1]),
            DType::F32,
            &Device::Cpu,
        )
        .unwrap()
    }

    #[test]
    fn forward_shapes_all_tasks() {
        let cfg = micro();
        let m = PerceptionModel::new(&cfg, &Device::Cpu, DType::F32, 0).unwrap();
        let p = m.encode(&image(&cfg), false).unwrap();
        let p_det = m.task_pyramid(&p, TaskId::Detection, false).unwrap();
        let p_da = m.task_pyramid(&p, TaskId::Drivable, false).unwrap();
        let logits = m.seg_logits(&p_da, SegTask::Drivable, false).unwrap();
        assert_eq!(logits.dims(), [1, 1, 32, 32]);
        let layers = m.det_forward(&p_det).unwrap();
        assert_eq!(layers.len(), 1);
        assert_eq!(layers[0].boxes.dims(), [1, 6, 4]);
    }

    #[test]
    fn gca_param_diff_is_exactly_the_gca_set() {
        let mut plain = micro();
        plain.model.gca = false;
        let mut gated = micro();
        gated.model.gca = true;
        let a: BTreeSet<String> = PerceptionModel::new(&plain, &Device::Cpu, DType::F32, 0)
            .unwrap()
            .param_names()
            .into_iter()
            .collect();
        let b: BTreeSet<String> = PerceptionModel::new(&gated, &Device::Cpu, DType::F32, 0)
            .unwrap()
            .param_names()
            .into_iter()
            .collect();
        assert!(a.is_subset(&b));
        let diff: Vec<&String> = b.difference(&a).collect();
        assert!(!diff.is_empty());
        assert!(diff.iter().all(|n| n.starts_with("gca.")));
    }

    #[test]
    fn train_pass_has_dn_split_and_k_equals_gm() {
        let cfg = micro();
        let m = PerceptionModel::new(&cfg, &Device::Cpu, DType::F32, 1).unwrap();
        let p = m.encode(&image(&cfg), true).unwrap();
        let p_det = m.task_pyramid(&p, TaskId::Detection, true).unwrap();
        let gt = GroundTruth {
            boxes: vec![[0.5, 0.5, 0.2, 0.2], [0.3, 0.6, 0.1, 0.2]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m.det_forward_train(&p_det, &gt, &mut rng).unwrap();
        assert_eq!(out.dn_group.len(), cfg.model.dn_groups * gt.len());
        assert_eq!(out.main_layers.len(), cfg.model.det_layers);
        assert_eq!(out.dn_layers.len(), cfg.model.det_layers);
        assert_eq!(out.main_layers[0].boxes.dims(), [6, 4]);
        assert_eq!(out.dn_layers[0].boxes.dims(), [4, 4]);
        // Empty ground truth: no denoising branch at all.
        let out = m
            .det_forward_train(&p_det, &GroundTruth::default(), &mut rng)
            .unwrap();
        assert!(out.dn_group.is_empty());
        assert!(out.dn_layers.is_empty());
    }

    #[test]
    fn task_flags_drop_branches() {
        let mut cfg = micro();
        cfg.model.task_detection = false;
        let m = PerceptionModel::new(&cfg, &Device::Cpu, DType::F32, 0).unwrap();
        assert!(m.param_names().iter().all(|n| !n.starts_with("det.")));
        let p = m.encode(&image(&cfg), false).unwrap();
        assert!(m.det_forward(&p).is_err());

        let mut cfg = micro();
        cfg.model.task_drivable = false;
        cfg.model.task_lane = false;
        let m = PerceptionModel::new(&cfg, &Device::Cpu, DType::F32, 0).unwrap();
        assert!(m.param_names().iter().all(|n| !n.starts_with("seg.")));
        let p = m.encode(&image(&cfg), false).unwrap();
        assert!(m.seg_logits(&p, SegTask::Lane, false).is_err());
    }
}
