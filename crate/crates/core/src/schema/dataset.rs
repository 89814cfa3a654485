//! Synthetic dataset generation and on-disk persistence.
//!
//! A dataset is a directory holding one JSON script and one little-endian
//! `f32` frame blob per entry, plus a manifest recording shapes, the
//! partition, and per-blob checksums.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::hash::fnv1a64_hex;
use crate::numerics::{Scalar, Tensor};
use crate::rng::Rng;

use super::{
    script_from_json, script_to_json, synthesize_motion, BodyPartPartition, FineGrainedScript,
    MotionSequence, Stage, SyntheticVocabulary, DEFAULT_FPS, NUM_PARTS,
};

/// Train/validation membership, assigned by script hash (90/10).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone)]
pub struct DatasetEntry<S> {
    pub script: FineGrainedScript,
    pub motion: MotionSequence<S>,
    pub split: Split,
}

pub type Dataset<S> = Vec<DatasetEntry<S>>;

/// Knobs for the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub feature_dim: usize,
    pub fps: u32,
    pub min_stage_frames: usize,
    pub max_stage_frames: usize,
    pub max_stages: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            feature_dim: 448,
            fps: DEFAULT_FPS,
            min_stage_frames: 18,
            max_stage_frames: 30,
            max_stages: 4,
        }
    }
}

fn split_of(script: &FineGrainedScript) -> Split {
    let h = crate::hash::fnv1a64(script_to_json(script).as_bytes());
    if h % 10 == 0 {
        Split::Val
    } else {
        Split::Train
    }
}

/// Sample `size` (script, motion) pairs. Scripts draw stage counts uniformly
/// from `1..=max_stages` and slot words uniformly from the vocabulary; the
/// whole corpus is deterministic per seed.
pub fn build_dataset<S: Scalar>(
    size: usize,
    vocab: &SyntheticVocabulary,
    partition: &BodyPartPartition,
    cfg: &DatasetConfig,
    seed: u64,
) -> Result<Dataset<S>> {
    if size == 0 {
        return Err(CoreError::contract("dataset size must be at least 1"));
    }
    let master = Rng::new(seed);
    let mut out = Vec::with_capacity(size);
    for i in 0..size {
        let mut rng = master.derive(i as u64);
        let n_stages = 1 + rng.below(cfg.max_stages);
        let stages = (0..n_stages)
            .map(|_| {
                let frames = cfg.min_stage_frames
                    + rng.below(cfg.max_stage_frames - cfg.min_stage_frames + 1);
                let words: Vec<String> = (0..NUM_PARTS)
                    .map(|_| vocab.words()[rng.below(vocab.num_words())].clone())
                    .collect();
                let overall = words.join(" ");
                // Half the slots carry a style modifier so token sequences
                // vary in length like free-form annotations.
                let parts: Vec<String> = words
                    .iter()
                    .map(|w| {
                        if rng.uniform() < 0.5 {
                            format!("{w} {}", super::MODIFIERS[rng.below(super::MODIFIERS.len())])
                        } else {
                            w.clone()
                        }
                    })
                    .collect();
                Stage {
                    frames,
                    overall,
                    parts,
                }
            })
            .collect();
        let script = FineGrainedScript {
            fps: cfg.fps,
            stages,
        };
        let motion_seed = rng.next_u64();
        let motion = synthesize_motion(&script, vocab, partition, motion_seed)?;
        let split = split_of(&script);
        out.push(DatasetEntry {
            script,
            motion,
            split,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: usize,
    split: Split,
    script_file: String,
    frames_file: String,
    shape: Vec<usize>,
    fps: u32,
    checksum: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    size: usize,
    fps: u32,
    feature_dim: usize,
    partition: BodyPartPartition,
    entries: Vec<ManifestEntry>,
}

/// Write a dataset as `manifest.json` + `scripts/NNNNNN.json` +
/// `frames/NNNNNN.bin` under `dir`.
pub fn save_dataset<S: Scalar>(
    dir: &Path,
    dataset: &Dataset<S>,
    partition: &BodyPartPartition,
) -> Result<()> {
    fs::create_dir_all(dir.join("scripts"))?;
    fs::create_dir_all(dir.join("frames"))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, e) in dataset.iter().enumerate() {
        let script_file = format!("scripts/{i:06}.json");
        let frames_file = format!("frames/{i:06}.bin");
        fs::write(dir.join(&script_file), script_to_json(&e.script))?;
        let bytes = e.motion.frames.to_le_bytes_f32();
        let checksum = fnv1a64_hex(&bytes);
        fs::write(dir.join(&frames_file), &bytes)?;
        entries.push(ManifestEntry {
            id: i,
            split: e.split,
            script_file,
            frames_file,
            shape: e.motion.frames.shape().to_vec(),
            fps: e.motion.fps,
            checksum,
        });
    }
    let manifest = Manifest {
        size: dataset.len(),
        fps: dataset.first().map(|e| e.motion.fps).unwrap_or(DEFAULT_FPS),
        feature_dim: partition.dim(),
        partition: partition.clone(),
        entries,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Load a dataset directory, verifying every blob checksum.
pub fn load_dataset<S: Scalar>(dir: &Path) -> Result<(Dataset<S>, BodyPartPartition)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let script = script_from_json(&fs::read_to_string(dir.join(&e.script_file))?)?;
        let bytes = fs::read(dir.join(&e.frames_file))?;
        if fnv1a64_hex(&bytes) != e.checksum {
            return Err(CoreError::Checksum(e.frames_file.clone()));
        }
        let frames = Tensor::from_le_bytes_f32(e.shape.clone(), &bytes)?;
        out.push(DatasetEntry {
            script,
            motion: MotionSequence::new(frames, e.fps)?,
            split: e.split,
        });
    }
    Ok((out, manifest.partition))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (SyntheticVocabulary, BodyPartPartition, DatasetConfig) {
        let partition = BodyPartPartition::default_partition(28).unwrap();
        let cfg = DatasetConfig {
            feature_dim: 28,
            ..DatasetConfig::default()
        };
        (SyntheticVocabulary::standard(NUM_PARTS), partition, cfg)
    }

    fn corpus_checksum(ds: &Dataset<f32>) -> u64 {
        let mut bytes = Vec::new();
        for e in ds {
            bytes.extend_from_slice(script_to_json(&e.script).as_bytes());
            bytes.extend_from_slice(&e.motion.frames.to_le_bytes_f32());
        }
        crate::hash::fnv1a64(&bytes)
    }

    #[test]
    fn reproducible_corpus_checksum() {
        let (vocab, partition, cfg) = setup();
        let a: Dataset<f32> = build_dataset(64, &vocab, &partition, &cfg, 77).unwrap();
        let b: Dataset<f32> = build_dataset(64, &vocab, &partition, &cfg, 77).unwrap();
        assert_eq!(corpus_checksum(&a), corpus_checksum(&b));
        let c: Dataset<f32> = build_dataset(64, &vocab, &partition, &cfg, 78).unwrap();
        assert_ne!(corpus_checksum(&a), corpus_checksum(&c));
    }

    #[test]
    fn train_and_val_scripts_disjoint() {
        let (vocab, partition, cfg) = setup();
        let ds: Dataset<f32> = build_dataset(256, &vocab, &partition, &cfg, 3).unwrap();
        let train: std::collections::HashSet<String> = ds
            .iter()
            .filter(|e| e.split == Split::Train)
            .map(|e| script_to_json(&e.script))
            .collect();
        let val: Vec<String> = ds
            .iter()
            .filter(|e| e.split == Split::Val)
            .map(|e| script_to_json(&e.script))
            .collect();
        assert!(!val.is_empty(), "val split empty at size 256");
        for v in val {
            assert!(!train.contains(&v), "script in both splits");
        }
    }

    #[test]
    fn word_frequencies_near_uniform() {
        // Count oracle: slot words are multinomial-uniform; each word's
        // count over all slots stays within 3 sigma of expectation.
        let (vocab, partition, _) = setup();
        let cfg = DatasetConfig {
            feature_dim: 28,
            min_stage_frames: 2,
            max_stage_frames: 3,
            ..DatasetConfig::default()
        };
        let ds: Dataset<f32> = build_dataset(10_000, &vocab, &partition, &cfg, 99).unwrap();
        let mut counts = vec![0usize; vocab.num_words()];
        let mut total = 0usize;
        for e in &ds {
            for s in &e.script.stages {
                for p in &s.parts {
                    counts[vocab.match_description(p).unwrap()] += 1;
                    total += 1;
                }
            }
        }
        let p = 1.0 / vocab.num_words() as f64;
        let expected = total as f64 * p;
        let sigma = (total as f64 * p * (1.0 - p)).sqrt();
        for (w, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - expected).abs();
            assert!(
                dev <= 3.0 * sigma,
                "word {w} count {c} deviates {dev:.1} > 3 sigma ({:.1})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn save_load_roundtrip_with_checksum() {
        let (vocab, partition, cfg) = setup();
        let ds: Dataset<f32> = build_dataset(8, &vocab, &partition, &cfg, 5).unwrap();
        let dir = std::env::temp_dir().join(format!("mogen_ds_{}", std::process::id()));
        save_dataset(&dir, &ds, &partition).unwrap();
        let (back, part2) = load_dataset::<f32>(&dir).unwrap();
        assert_eq!(part2, partition);
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.iter().zip(back.iter()) {
            assert_eq!(a.script, b.script);
            assert_eq!(a.motion.frames, b.motion.frames);
            assert_eq!(a.split, b.split);
        }

        // Corrupt one blob: load must fail with a checksum error.
        let victim = dir.join("frames/000003.bin");
        let mut bytes = fs::read(&victim).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&victim, bytes).unwrap();
        match load_dataset::<f32>(&dir) {
            Err(CoreError::Checksum(f)) => assert!(f.contains("000003")),
            other => panic!("expected checksum error, got {other:?}"),
        }
        fs::remove_dir_all(&dir).ok();
    }
}
