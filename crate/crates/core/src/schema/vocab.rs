//! Synthetic motion vocabulary and the deterministic trajectory generator.
//!
//! Each word maps to a parametric trajectory over a body part's feature
//! columns: position columns carry `offset + A * sin(w * t + phase)` and
//! velocity columns carry the matching time derivative (scaled by a fixed
//! reference frequency to keep magnitudes near unit scale). Distinct words
//! are separated in feature space by construction, which makes the
//! nearest-trajectory classifier a usable oracle for generated motion.

use crate::error::{CoreError, Result};
use crate::numerics::{Scalar, Tensor};
use crate::rng::Rng;

use super::{BodyPartPartition, FineGrainedScript, MotionSequence};

/// Frames blended across each stage boundary. Sized so that a worst-case
/// word switch spreads over enough frames to keep boundary steps within a
/// small multiple of ordinary frame-to-frame motion.
pub const CROSS_FADE_FRAMES: usize = 10;

/// Lower bound on the mean per-frame feature distance between any two
/// distinct words of one part (verified by test over the full vocabulary).
pub const WORD_SEPARATION: f64 = 0.3;

/// Velocity columns store `d/dt position / VELOCITY_REF_FREQ` so that
/// velocity magnitudes stay comparable to positions.
pub const VELOCITY_REF_FREQ: f64 = 3.0;

/// Trajectory parameters of one word on one body part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WordParams {
    pub offset: f64,
    pub amplitude: f64,
    /// Angular frequency in rad/s.
    pub frequency: f64,
    pub phase: f64,
}

/// The shared eight-word motion vocabulary with per-part parameter
/// variations.
#[derive(Debug, Clone)]
pub struct SyntheticVocabulary {
    words: Vec<String>,
    /// `params[part][word]`
    params: Vec<Vec<WordParams>>,
}

const WORDS: [&str; 8] = [
    "hold", "raise", "lower", "wave", "swing", "circle", "twist", "stretch",
];

/// Style words appended to slot descriptions by the dataset generator.
/// They carry no trajectory semantics; they exist so text sequences vary in
/// length and content the way free-form annotations would.
pub const MODIFIERS: [&str; 8] = [
    "gently", "sharply", "slowly", "quickly", "widely", "slightly", "steadily", "loosely",
];

// (offset, amplitude, angular frequency, phase) per word; "hold" is the
// flat zero trajectory. Offsets are kept small relative to per-frame motion
// so stage boundaries stay gentle, and frequencies stay moderate so the
// trajectories are easy to reproduce; words separate through the joint
// (offset, amplitude, frequency, phase) signature.
const BASE: [(f64, f64, f64, f64); 8] = [
    (0.0, 0.0, 0.0, 0.0),    // hold
    (0.3, 0.6, 1.8, 0.6),    // raise
    (-0.3, 0.6, 2.2, 1.6),   // lower
    (0.1, 0.7, 3.0, 0.8),    // wave
    (-0.1, 0.7, 2.6, 2.4),   // swing
    (0.5, 0.55, 2.9, 3.2),   // circle
    (-0.5, 0.55, 2.4, 4.0),  // twist
    (0.75, 0.5, 1.4, 4.8),   // stretch
];

const GOLDEN_ANGLE: f64 = 2.399963229728653;

impl SyntheticVocabulary {
    pub fn standard(num_parts: usize) -> Self {
        let words = WORDS.iter().map(|w| w.to_string()).collect();
        let params = (0..num_parts)
            .map(|p| {
                BASE.iter()
                    .map(|&(offset, amplitude, frequency, phase)| WordParams {
                        offset,
                        amplitude,
                        // Slight per-part detune keeps parts visually distinct
                        // without moving words closer together.
                        frequency: frequency * (1.0 + 0.02 * p as f64),
                        phase: phase + 0.35 * p as f64,
                    })
                    .collect()
            })
            .collect();
        SyntheticVocabulary { words, params }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn word_index(&self, word: &str) -> Option<usize> {
        let lower = word.to_lowercase();
        self.words.iter().position(|w| *w == lower)
    }

    /// First vocabulary word found in a free-text description.
    pub fn match_description(&self, text: &str) -> Option<usize> {
        text.split_whitespace().find_map(|tok| self.word_index(tok))
    }

    pub fn params(&self, part: usize, word: usize) -> WordParams {
        self.params[part][word]
    }

    /// Largest velocity-feature magnitude any word can produce, including
    /// the amplitude jitter headroom.
    pub fn velocity_bound(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .map(|p| p.amplitude * 1.05 * p.frequency / VELOCITY_REF_FREQ)
            .fold(0.0, f64::max)
    }

    /// Evaluate word `word` for part columns of width `width` at local time
    /// `tau` seconds. The first `ceil(width/2)` columns are positions, the
    /// rest velocities.
    pub fn eval_columns(
        &self,
        part: usize,
        word: usize,
        width: usize,
        tau: f64,
        jitter: &Jitter,
    ) -> Vec<f64> {
        let p = self.params[part][word];
        let amp = p.amplitude * jitter.amplitude_factor;
        let offset = p.offset + jitter.offset_shift;
        let phase = p.phase + jitter.phase_shift;
        let n_pos = width.div_ceil(2);
        let mut out = Vec::with_capacity(width);
        for c in 0..n_pos {
            let col_phase = GOLDEN_ANGLE * c as f64;
            let spread = if n_pos > 1 {
                1.0 + 0.15 * c as f64 / (n_pos - 1) as f64
            } else {
                1.0
            };
            out.push(offset * spread + amp * (p.frequency * tau + phase + col_phase).sin());
        }
        for c in 0..width - n_pos {
            let col_phase = GOLDEN_ANGLE * c as f64;
            out.push(
                amp * p.frequency * (p.frequency * tau + phase + col_phase).cos()
                    / VELOCITY_REF_FREQ,
            );
        }
        out
    }

    /// Jitter-free reference trajectory for the classifier oracle: the full
    /// part feature block over `frames` frames starting at local time zero.
    pub fn reference_block(&self, part: usize, word: usize, width: usize, frames: usize, fps: u32) -> Vec<Vec<f64>> {
        let jitter = Jitter::none();
        (0..frames)
            .map(|f| self.eval_columns(part, word, width, f as f64 / fps as f64, &jitter))
            .collect()
    }
}

/// Small per-(stage, part) randomization applied by the generator. Derived
/// only from the synthesis seed and the (stage, part) slot, never from word
/// content, so editing one slot's word cannot disturb other columns.
#[derive(Debug, Clone, Copy)]
pub struct Jitter {
    pub amplitude_factor: f64,
    pub phase_shift: f64,
    pub offset_shift: f64,
}

impl Jitter {
    pub fn none() -> Self {
        Jitter {
            amplitude_factor: 1.0,
            phase_shift: 0.0,
            offset_shift: 0.0,
        }
    }

    fn from_rng(rng: &mut Rng) -> Self {
        Jitter {
            amplitude_factor: rng.uniform_range(0.95, 1.05),
            phase_shift: rng.uniform_range(-0.15, 0.15),
            offset_shift: rng.uniform_range(-0.03, 0.03),
        }
    }
}

/// Generate the ground-truth motion for a script. Deterministic given
/// `(script, seed)`. Within stage `i`, part `j`'s columns follow the
/// trajectory of the slot's word; the first [`CROSS_FADE_FRAMES`] frames of
/// each later stage linearly blend the previous stage's signal into the new
/// one so boundaries stay continuous.
pub fn synthesize_motion<S: Scalar>(
    script: &FineGrainedScript,
    vocab: &SyntheticVocabulary,
    partition: &BodyPartPartition,
    seed: u64,
) -> Result<MotionSequence<S>> {
    script.ensure_valid()?;
    let num_parts = partition.num_parts();

    // Resolve every slot's word up front so unknown words fail loudly.
    let mut slot_words = vec![vec![0usize; num_parts]; script.num_stages()];
    let mut unknown = Vec::new();
    for (si, row) in slot_words.iter_mut().enumerate() {
        for (pi, slot) in row.iter_mut().enumerate() {
            let text = script.slot_text(si, pi);
            match vocab.match_description(text) {
                Some(w) => *slot = w,
                None => unknown.push(format!(
                    "stage {si}, part {}: no vocabulary word in \"{text}\"",
                    partition.name(pi)
                )),
            }
        }
    }
    if !unknown.is_empty() {
        return Err(CoreError::Validation(unknown));
    }

    let master = Rng::new(seed);
    let jitters: Vec<Vec<Jitter>> = (0..script.num_stages())
        .map(|si| {
            (0..num_parts)
                .map(|pi| {
                    let mut r = master.derive((si * 64 + pi) as u64);
                    Jitter::from_rng(&mut r)
                })
                .collect()
        })
        .collect();

    let total = script.total_frames();
    let dim = partition.dim();
    let fps = script.fps;
    let mut data = vec![0.0f64; total * dim];

    for si in 0..script.num_stages() {
        let range = script.stage_range(si);
        for frame in range.clone() {
            let tau = (frame - range.start) as f64 / fps as f64;
            // Blend weight toward the current stage inside the fade window.
            let blend = if si > 0 && frame - range.start < CROSS_FADE_FRAMES {
                (frame - range.start + 1) as f64 / (CROSS_FADE_FRAMES + 1) as f64
            } else {
                1.0
            };
            for pi in 0..num_parts {
                let cols = partition.range(pi);
                let width = cols.len();
                let cur =
                    vocab.eval_columns(pi, slot_words[si][pi], width, tau, &jitters[si][pi]);
                let row = &mut data[frame * dim..(frame + 1) * dim];
                if blend < 1.0 {
                    // Previous stage's signal continued past its end.
                    let prev_range = script.stage_range(si - 1);
                    let prev_tau = (frame - prev_range.start) as f64 / fps as f64;
                    let prev = vocab.eval_columns(
                        pi,
                        slot_words[si - 1][pi],
                        width,
                        prev_tau,
                        &jitters[si - 1][pi],
                    );
                    for (k, c) in cols.enumerate() {
                        row[c] = (1.0 - blend) * prev[k] + blend * cur[k];
                    }
                } else {
                    for (k, c) in cols.enumerate() {
                        row[c] = cur[k];
                    }
                }
            }
        }
    }

    let frames = Tensor::new(vec![total, dim], data.into_iter().map(S::of).collect())?;
    MotionSequence::new(frames, fps)
}
