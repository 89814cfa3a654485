//! Motion representation: body-part partition, fine-grained scripts, motion
//! sequences, and the synthetic dataset that provides verifiable
//! text-to-motion ground truth.

mod dataset;
mod vocab;

pub use dataset::{
    build_dataset, load_dataset, save_dataset, Dataset, DatasetConfig, DatasetEntry, Split,
};
pub use vocab::{synthesize_motion, SyntheticVocabulary, WordParams, CROSS_FADE_FRAMES, MODIFIERS, WORD_SEPARATION};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numerics::{Scalar, Tensor};

/// Number of body parts in the canonical partition.
pub const NUM_PARTS: usize = 7;

/// Canonical body-part order; also the key names of the script wire format.
pub const PART_NAMES: [&str; NUM_PARTS] = [
    "head",
    "spine",
    "left_arm",
    "right_arm",
    "left_leg",
    "right_leg",
    "pelvis_trajectory",
];

/// Default frames per second for every sequence in the pipeline.
pub const DEFAULT_FPS: u32 = 30;

/// Ordered body parts, each owning a contiguous range of feature columns.
/// Ranges are disjoint and cover `[0, dim)` exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BodyPartPartition {
    parts: Vec<PartRange>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartRange {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl BodyPartPartition {
    /// Split `dim` feature columns evenly over the seven canonical parts.
    pub fn default_partition(dim: usize) -> Result<Self> {
        if dim == 0 || dim % NUM_PARTS != 0 {
            return Err(CoreError::contract(format!(
                "feature width {dim} cannot be covered by {NUM_PARTS} equal part ranges"
            )));
        }
        let w = dim / NUM_PARTS;
        let parts = PART_NAMES
            .iter()
            .enumerate()
            .map(|(i, name)| PartRange {
                name: name.to_string(),
                start: i * w,
                end: (i + 1) * w,
            })
            .collect();
        Ok(BodyPartPartition { parts })
    }

    /// Construct from explicit ranges, checking the cover invariant.
    pub fn new(parts: Vec<PartRange>) -> Result<Self> {
        if parts.is_empty() {
            return Err(CoreError::contract("partition needs at least one part"));
        }
        let mut expected = 0;
        for p in &parts {
            if p.start != expected || p.end <= p.start {
                return Err(CoreError::contract(format!(
                    "part `{}` range [{}, {}) breaks the contiguous cover at column {}",
                    p.name, p.start, p.end, expected
                )));
            }
            expected = p.end;
        }
        Ok(BodyPartPartition { parts })
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn dim(&self) -> usize {
        self.parts.last().map(|p| p.end).unwrap_or(0)
    }

    pub fn range(&self, part: usize) -> Range<usize> {
        self.parts[part].start..self.parts[part].end
    }

    pub fn name(&self, part: usize) -> &str {
        &self.parts[part].name
    }

    pub fn part_index(&self, name: &str) -> Option<usize> {
        self.parts.iter().position(|p| p.name == name)
    }

    pub fn parts(&self) -> &[PartRange] {
        &self.parts
    }
}

/// One temporal stage: a duration in frames, an overall sentence, and one
/// description per body part (empty string = no fine-grained text, fall back
/// to the overall sentence).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    pub frames: usize,
    pub overall: String,
    pub parts: Vec<String>,
}

impl Stage {
    pub fn uniform(frames: usize, word: &str) -> Self {
        Stage {
            frames,
            overall: word.to_string(),
            parts: vec![word.to_string(); NUM_PARTS],
        }
    }
}

/// The description matrix: `stages.len()` stages by [`NUM_PARTS`] parts,
/// with per-stage frame counts. Frame ranges are derived cumulatively, so
/// stages are contiguous and ordered by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FineGrainedScript {
    pub fps: u32,
    pub stages: Vec<Stage>,
}

impl FineGrainedScript {
    pub fn single_stage(frames: usize, parts: Vec<String>, overall: String) -> Self {
        FineGrainedScript {
            fps: DEFAULT_FPS,
            stages: vec![Stage {
                frames,
                overall,
                parts,
            }],
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn total_frames(&self) -> usize {
        self.stages.iter().map(|s| s.frames).sum()
    }

    /// Frame range `[start, end)` of stage `i`.
    pub fn stage_range(&self, i: usize) -> Range<usize> {
        let start: usize = self.stages[..i].iter().map(|s| s.frames).sum();
        start..start + self.stages[i].frames
    }

    /// Center time of stage `i`, in seconds.
    pub fn stage_center_seconds(&self, i: usize) -> f64 {
        let r = self.stage_range(i);
        (r.start as f64 + r.end as f64) / 2.0 / self.fps as f64
    }

    /// Effective description for slot `(stage, part)`: the fine-grained text
    /// when present, otherwise the stage's overall sentence.
    pub fn slot_text(&self, stage: usize, part: usize) -> &str {
        let s = &self.stages[stage];
        let t = &s.parts[part];
        if t.trim().is_empty() {
            &s.overall
        } else {
            t
        }
    }

    /// Structural check. An empty list means the script is well formed.
    pub fn validate(&self) -> Vec<String> {
        let mut violations = Vec::new();
        if self.fps == 0 {
            violations.push("fps must be positive".to_string());
        }
        if self.stages.is_empty() {
            violations.push("script has no stages".to_string());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.frames == 0 {
                violations.push(format!("empty stage {i}: non-positive duration"));
            }
            if s.parts.len() != NUM_PARTS {
                violations.push(format!(
                    "stage {i}: missing part: expected {NUM_PARTS} part slots, found {}",
                    s.parts.len()
                ));
            }
        }
        violations
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation(v))
        }
    }
}

/// A motion sequence: `num_frames x dim` pose-feature matrix at a fixed
/// frame rate. Column meaning follows the configured [`BodyPartPartition`];
/// within each part the first half of the columns are position-like signals
/// and the second half their time derivatives (velocity features).
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence<S> {
    pub frames: Tensor<S>,
    pub fps: u32,
}

impl<S: Scalar> MotionSequence<S> {
    pub fn new(frames: Tensor<S>, fps: u32) -> Result<Self> {
        if frames.shape().len() != 2 || frames.shape()[0] == 0 {
            return Err(CoreError::contract(format!(
                "motion sequence needs a non-empty frame matrix, got {:?}",
                frames.shape()
            )));
        }
        if !frames.all_finite() {
            return Err(CoreError::numeric("motion_sequence", "non-finite frame value"));
        }
        Ok(MotionSequence { frames, fps })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    /// Time of frame `k` in seconds.
    pub fn frame_time(&self, k: usize) -> f64 {
        k as f64 / self.fps as f64
    }

    pub fn cast<T: Scalar>(&self) -> MotionSequence<T> {
        MotionSequence {
            frames: self.frames.cast(),
            fps: self.fps,
        }
    }

    /// CSV export, one frame per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.num_frames() {
            let row = self.frames.row(r);
            let cells: Vec<String> = row.iter().map(|v| format!("{}", v)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Script wire format (documented JSON shape)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ScriptWire {
    fps: u32,
    stages: Vec<StageWire>,
}

#[derive(Serialize, Deserialize)]
struct StageWire {
    frames: usize,
    overall: String,
    parts: serde_json::Map<String, serde_json::Value>,
}

/// Serialize a script to its documented JSON shape:
/// `{"fps": 30, "stages": [{"frames": N, "overall": "...", "parts": {"head": ..}}]}`.
pub fn script_to_json(script: &FineGrainedScript) -> String {
    let stages = script
        .stages
        .iter()
        .map(|s| {
            let mut parts = serde_json::Map::new();
            for (name, text) in PART_NAMES.iter().zip(s.parts.iter()) {
                parts.insert(name.to_string(), serde_json::Value::String(text.clone()));
            }
            StageWire {
                frames: s.frames,
                overall: s.overall.clone(),
                parts,
            }
        })
        .collect();
    let wire = ScriptWire {
        fps: script.fps,
        stages,
    };
    serde_json::to_string_pretty(&wire).expect("script serialization")
}

/// Parse a script from the documented JSON shape, reporting missing or
/// unknown part slots by name.
pub fn script_from_json(text: &str) -> Result<FineGrainedScript> {
    let wire: ScriptWire = serde_json::from_str(text)
        .map_err(|e| CoreError::SchemaMismatch(format!("script JSON: {e}")))?;
    let mut stages = Vec::with_capacity(wire.stages.len());
    for (i, s) in wire.stages.into_iter().enumerate() {
        let mut parts = Vec::with_capacity(NUM_PARTS);
        for name in PART_NAMES {
            match s.parts.get(name) {
                Some(serde_json::Value::String(t)) => parts.push(t.clone()),
                Some(_) => {
                    return Err(CoreError::SchemaMismatch(format!(
                        "stage {i}: part slot `{name}` must be a string"
                    )))
                }
                None => {
                    return Err(CoreError::SchemaMismatch(format!(
                        "stage {i}: missing part slot `{name}`"
                    )))
                }
            }
        }
        for key in s.parts.keys() {
            if !PART_NAMES.contains(&key.as_str()) {
                return Err(CoreError::SchemaMismatch(format!(
                    "stage {i}: unknown part slot `{key}`"
                )));
            }
        }
        stages.push(Stage {
            frames: s.frames,
            overall: s.overall,
            parts,
        });
    }
    let script = FineGrainedScript {
        fps: wire.fps,
        stages,
    };
    script.ensure_valid()?;
    Ok(script)
}
