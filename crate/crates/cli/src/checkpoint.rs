//! Checkpoint persistence: a JSON manifest (config, step, named-tensor
//! index with offsets and checksums, RNG state) plus one little-endian
//! `f32` blob. Round trips are bit-exact, so resumed training follows the
//! uninterrupted run step for step.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use mogen_core::error::{CoreError, Result};
use mogen_core::hash::fnv1a64_hex;
use mogen_core::model::Denoiser;
use mogen_core::numerics::{OptimizerState, Tensor};
use mogen_core::rng::RngState;

use crate::config::RunConfig;

const MANIFEST_FILE: &str = "manifest.json";
const BLOB_FILE: &str = "weights.bin";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
    /// Element count.
    count: usize,
    checksum: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    step: u64,
    opt_step: u64,
    config: RunConfig,
    rng_state: RngState,
    tensors: Vec<TensorEntry>,
    blob_len: usize,
    blob_checksum: String,
}

/// Everything a resumed run needs.
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Denoiser<f32>,
    pub optimizer: OptimizerState<f32>,
    pub step: u64,
    pub rng_state: RngState,
}

/// Write model parameters and optimizer state under `dir`
/// (`manifest.json` + `weights.bin`). Files are written to temporary names
/// first so a crash cannot leave a half-written checkpoint behind.
pub fn save_checkpoint(
    dir: &Path,
    model: &Denoiser<f32>,
    optimizer: &OptimizerState<f32>,
    config: &RunConfig,
    step: u64,
    rng_state: RngState,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, t: &Tensor<f32>| {
        let bytes = t.to_le_bytes_f32();
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: blob.len(),
            count: t.numel(),
            checksum: fnv1a64_hex(&bytes),
        });
        blob.extend_from_slice(&bytes);
    };
    for (name, tensor) in model.params.iter() {
        push(name.to_string(), tensor);
    }
    for (i, (name, _)) in model.params.iter().enumerate() {
        push(format!("opt.m.{name}"), &optimizer.m[i]);
    }
    for (i, (name, _)) in model.params.iter().enumerate() {
        push(format!("opt.v.{name}"), &optimizer.v[i]);
    }

    let manifest = Manifest {
        version: 1,
        step,
        opt_step: optimizer.step,
        config: config.clone(),
        rng_state,
        tensors,
        blob_len: blob.len(),
        blob_checksum: fnv1a64_hex(&blob),
    };

    let blob_tmp = dir.join(format!("{BLOB_FILE}.tmp"));
    fs::write(&blob_tmp, &blob)?;
    fs::rename(&blob_tmp, dir.join(BLOB_FILE))?;
    let manifest_tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    fs::write(&manifest_tmp, serde_json::to_string_pretty(&manifest)?)?;
    fs::rename(&manifest_tmp, dir.join(MANIFEST_FILE))?;
    Ok(())
}

/// Load and verify a checkpoint directory. The blob checksum is verified
/// before any tensor is materialized; nothing loads partially.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    if blob.len() != manifest.blob_len || fnv1a64_hex(&blob) != manifest.blob_checksum {
        return Err(CoreError::Checksum(format!(
            "{} (expected {} bytes, found {})",
            dir.join(BLOB_FILE).display(),
            manifest.blob_len,
            blob.len()
        )));
    }
    manifest.config.validate()?;

    let read_tensor = |entry: &TensorEntry| -> Result<Tensor<f32>> {
        let end = entry.offset + entry.count * 4;
        if end > blob.len() {
            return Err(CoreError::Checksum(format!("tensor `{}` overruns blob", entry.name)));
        }
        let bytes = &blob[entry.offset..end];
        if fnv1a64_hex(bytes) != entry.checksum {
            return Err(CoreError::Checksum(format!("tensor `{}`", entry.name)));
        }
        Tensor::from_le_bytes_f32(entry.shape.clone(), bytes)
    };

    // Fresh model defines the parameter order; tensors load by name.
    let mut model = Denoiser::<f32>::new(manifest.config.model.clone(), 0)?;
    let mut m = Vec::with_capacity(model.params.len());
    let mut v = Vec::with_capacity(model.params.len());
    let by_name: std::collections::HashMap<&str, &TensorEntry> = manifest
        .tensors
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();
    let names: Vec<String> = model.params.names().to_vec();
    for name in &names {
        let entry = by_name
            .get(name.as_str())
            .ok_or_else(|| CoreError::contract(format!("checkpoint missing tensor `{name}`")))?;
        let tensor = read_tensor(entry)?;
        let id = model
            .params
            .by_name(name)
            .map(|(id, _)| id)
            .expect("name from registry");
        model.params.set(id, tensor)?;

        let m_entry = by_name
            .get(format!("opt.m.{name}").as_str())
            .ok_or_else(|| CoreError::contract(format!("checkpoint missing tensor `opt.m.{name}`")))?;
        m.push(read_tensor(m_entry)?);
        let v_entry = by_name
            .get(format!("opt.v.{name}").as_str())
            .ok_or_else(|| CoreError::contract(format!("checkpoint missing tensor `opt.v.{name}`")))?;
        v.push(read_tensor(v_entry)?);
    }

    Ok(Checkpoint {
        config: manifest.config,
        model,
        optimizer: OptimizerState {
            m,
            v,
            step: manifest.opt_step,
        },
        step: manifest.step,
        rng_state: manifest.rng_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use mogen_core::rng::Rng;

    fn tiny_run_config() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.model.feature_dim = 14;
        cfg.model.attention.latent_per_group = 4;
        cfg.model.attention.templates_per_group = 2;
        cfg.model.attention.experts = 2;
        cfg.model.attention.active_experts = 1;
        cfg.model.attention.text_width = 6;
        cfg.model.text.width = 6;
        cfg.model.text.layers = 1;
        cfg.model.layers = 1;
        cfg.model.time_embed_dim = 8;
        cfg.data.shape.feature_dim = 14;
        cfg
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let cfg = tiny_run_config();
        let model = Denoiser::<f32>::new(cfg.model.clone(), 42).unwrap();
        let mut opt = OptimizerState::new(model.params.tensors());
        opt.step = 17;
        // Give the moments non-trivial values.
        for t in opt.m.iter_mut().chain(opt.v.iter_mut()) {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = (i as f32 * 0.37).sin();
            }
        }
        let rng_state = Rng::new(9).export_state();
        let dir = std::env::temp_dir().join(format!("mogen_ckpt_{}", std::process::id()));
        save_checkpoint(&dir, &model, &opt, &cfg, 123, rng_state).unwrap();
        let loaded = load_checkpoint(&dir).unwrap();
        assert_eq!(loaded.step, 123);
        assert_eq!(loaded.optimizer.step, 17);
        assert_eq!(loaded.rng_state, rng_state);
        for (a, b) in model.params.tensors().iter().zip(loaded.model.params.tensors()) {
            assert_eq!(a, b, "parameter tensors differ");
        }
        for (a, b) in opt.m.iter().zip(loaded.optimizer.m.iter()) {
            assert_eq!(a, b);
        }
        for (a, b) in opt.v.iter().zip(loaded.optimizer.v.iter()) {
            assert_eq!(a, b);
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_blob_fails_checksum_without_partial_load() {
        let cfg = tiny_run_config();
        let model = Denoiser::<f32>::new(cfg.model.clone(), 1).unwrap();
        let opt = OptimizerState::new(model.params.tensors());
        let dir = std::env::temp_dir().join(format!("mogen_ckpt_trunc_{}", std::process::id()));
        save_checkpoint(&dir, &model, &opt, &cfg, 1, Rng::new(1).export_state()).unwrap();
        let blob_path = dir.join(BLOB_FILE);
        let blob = fs::read(&blob_path).unwrap();
        fs::write(&blob_path, &blob[..blob.len() - 8]).unwrap();
        match load_checkpoint(&dir) {
            Err(CoreError::Checksum(_)) => {}
            other => panic!("expected checksum failure, got {:?}", other.map(|_| ())),
        }
        fs::remove_dir_all(&dir).ok();
    }
}
