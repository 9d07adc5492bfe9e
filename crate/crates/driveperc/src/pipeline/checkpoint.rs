//! Single-archive checkpoints (safetensors): every parameter and buffer by
//! hierarchical name, optimizer momentum under an `optim.` prefix, the
//! config snapshot as JSON bytes, and the step counter — everything needed
//! to resume a run exactly.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::pipeline::config::Config;
use crate::pipeline::train::Trainer;

const CONFIG_KEY: &str = "meta.config";
const STEP_KEY: &str = "meta.step";

pub fn save_checkpoint(path: &Path, trainer: &Trainer, step: usize) -> Result<()> {
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    for (name, var) in trainer.model.varstore().all_vars() {
        tensors.insert(name, var.as_tensor().clone());
    }
    for (name, v) in trainer.opt.velocities() {
        tensors.insert(format!("optim.{name}"), v.clone());
    }
    let cfg_json = serde_json::to_vec(trainer.config())
        .map_err(|e| Error::Checkpoint(format!("config encode: {e}")))?;
    let n = cfg_json.len();
    tensors.insert(
        CONFIG_KEY.to_string(),
        Tensor::from_vec(cfg_json, n, &Device::Cpu)?,
    );
    tensors.insert(
        STEP_KEY.to_string(),
        Tensor::from_vec(vec![step as u32], 1, &Device::Cpu)?,
    );
    candle_core::safetensors::save(&tensors, path)?;
    Ok(())
}

/// Read only the config snapshot and step counter.
pub fn read_meta(path: &Path) -> Result<(Config, usize)> {
    let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
    let cfg_bytes: Vec<u8> = tensors
        .get(CONFIG_KEY)
        .ok_or_else(|| Error::Checkpoint("missing config snapshot".into()))?
        .to_vec1()?;
    let cfg: Config = serde_json::from_slice(&cfg_bytes)
        .map_err(|e| Error::Checkpoint(format!("config decode: {e}")))?;
    let step: Vec<u32> = tensors
        .get(STEP_KEY)
        .ok_or_else(|| Error::Checkpoint("missing step counter".into()))?
        .to_vec1()?;
    Ok((cfg, step[0] as usize))
}

/// Restore parameters, buffers, momentum, and the step counter into a
/// trainer built from the checkpoint's own config.
pub fn load_into(path: &Path, trainer: &mut Trainer) -> Result<usize> {
    let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
    let vs = trainer.model.varstore().clone();
    for name in vs.names() {
        let t = tensors
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter `{name}`")))?;
        vs.set_var(&name, &t.to_dtype(vs.dtype())?)?;
    }
    for (key, t) in &tensors {
        if let Some(name) = key.strip_prefix("optim.") {
            trainer.opt.set_velocity(name.to_string(), t.clone());
        }
    }
    let step: Vec<u32> = tensors
        .get(STEP_KEY)
        .ok_or_else(|| Error::Checkpoint("missing step counter".into()))?
        .to_vec1()?;
    let step = step[0] as usize;
    trainer.set_step(step);
    Ok(step)
}

/// Rebuild a trainer from a checkpoint (config, data, parameters, momentum,
/// step), ready to continue exactly where the saved run stopped.
pub fn resume(path: &Path) -> Result<Trainer> {
    let (cfg, _) = read_meta(path)?;
    let mut trainer = Trainer::from_config(&cfg)?;
    load_into(path, &mut trainer)?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> Config {
        let mut c = Config::micro();
        c.model.input_size = [32, 32];
        c.model.channel_width = 8;
        c.model.backbone_widths = [4, 8, 8, 8];
        c.model.num_queries = 6;
        c.model.det_layers = 1;
        c.model.dn_groups = 2;
        c.model.seg_proj_width = 8;
        c.data.samples = 4;
        c.train.batch_size = 2;
        c
    }

    #[test]
    fn round_trip_preserves_config_step_and_params() {
        let cfg = tiny_cfg();
        let mut t = Trainer::from_config(&cfg).unwrap();
        t.set_total_steps(20);
        t.run_steps(2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.safetensors");
        save_checkpoint(&path, &t, 2).unwrap();

        let (cfg2, step) = read_meta(&path).unwrap();
        assert_eq!(step, 2);
        assert_eq!(cfg2.model.input_size, cfg.model.input_size);

        let mut fresh = Trainer::from_config(&cfg).unwrap();
        load_into(&path, &mut fresh).unwrap();
        assert_eq!(fresh.step_count(), 2);
        for (name, var) in t.model.varstore().all_vars() {
            let a: Vec<f32> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = fresh
                .model
                .varstore()
                .get_var(&name)
                .unwrap()
                .as_tensor()
                .flatten_all()
                .unwrap()
                .to_vec1()
                .unwrap();
            assert_eq!(a, b, "parameter {name} differs after reload");
        }
    }

    #[test]
    fn resumed_run_reproduces_next_step_loss() {
        let cfg = tiny_cfg();
        // Uninterrupted run: 3 steps.
        let mut full = Trainer::from_config(&cfg).unwrap();
        full.set_total_steps(20);
        full.run_steps(2).unwrap();
        let reference = full.step().unwrap().loss;

        // Interrupted run: 2 steps, save, resume, 1 step.
        let mut part = Trainer::from_config(&cfg).unwrap();
        part.set_total_steps(20);
        part.run_steps(2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.safetensors");
        save_checkpoint(&path, &part, 2).unwrap();
        let mut resumed = resume(&path).unwrap();
        resumed.set_total_steps(20);
        let loss = resumed.step().unwrap().loss;
        let rel = (loss - reference).abs() / reference.abs().max(1e-12);
        assert!(rel < 1e-6, "resume mismatch: {loss} vs {reference}");
    }

    #[test]
    fn missing_parameter_is_an_error() {
        let cfg = tiny_cfg();
        let t = Trainer::from_config(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.safetensors");
        save_checkpoint(&path, &t, 0).unwrap();
        // A bigger model cannot load from the smaller checkpoint.
        let mut big_cfg = tiny_cfg();
        big_cfg.model.det_layers = 2;
        let mut big = Trainer::from_config(&big_cfg).unwrap();
        assert!(load_into(&path, &mut big).is_err());
    }
}
