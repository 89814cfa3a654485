//! Script editing loop: structured edit commands, prompt rendering for an
//! LLM intermediary, lenient response parsing, and an atomic session that
//! regenerates motion from scratch after every accepted edit.

mod llm;

pub use llm::{FailingClient, HttpLlmClient, LlmClient, MockLlmClient};

use crate::diffusion::{sample, NoiseSchedule, SamplerConfig};
use crate::error::{CoreError, Result};
use crate::model::Denoiser;
use crate::numerics::Scalar;
use crate::schema::{
    script_from_json, script_to_json, FineGrainedScript, MotionSequence, Stage, NUM_PARTS,
    PART_NAMES,
};

// ---------------------------------------------------------------------------
// Structured commands
// ---------------------------------------------------------------------------

/// A structured script rewrite. Stage and part indices are zero-based and
/// validated against the script at apply time.
#[derive(Debug, Clone, PartialEq)]
pub enum EditCommand {
    SetDescription {
        stage: usize,
        part: usize,
        text: String,
    },
    SetOverall {
        stage: usize,
        text: String,
    },
    /// Grow or shrink a stage; later stages shift accordingly.
    AdjustDuration {
        stage: usize,
        delta_frames: i64,
    },
    InsertStage {
        at: usize,
        stage: Stage,
    },
    DeleteStage {
        at: usize,
    },
}

/// Apply a structured command, returning the rewritten script. Exactly the
/// referenced slots change and the result always validates.
pub fn apply_edit_command(
    script: &FineGrainedScript,
    cmd: &EditCommand,
) -> Result<FineGrainedScript> {
    let mut out = script.clone();
    let check_stage = |s: usize| -> Result<()> {
        if s >= script.num_stages() {
            Err(CoreError::Validation(vec![format!(
                "stage {s} out of range (script has {} stages)",
                script.num_stages()
            )]))
        } else {
            Ok(())
        }
    };
    match cmd {
        EditCommand::SetDescription { stage, part, text } => {
            check_stage(*stage)?;
            if *part >= NUM_PARTS {
                return Err(CoreError::Validation(vec![format!(
                    "part {part} out of range"
                )]));
            }
            out.stages[*stage].parts[*part] = text.clone();
        }
        EditCommand::SetOverall { stage, text } => {
            check_stage(*stage)?;
            out.stages[*stage].overall = text.clone();
        }
        EditCommand::AdjustDuration {
            stage,
            delta_frames,
        } => {
            check_stage(*stage)?;
            let current = out.stages[*stage].frames as i64;
            let updated = current + delta_frames;
            if updated <= 0 {
                return Err(CoreError::Validation(vec![format!(
                    "stage {stage} duration {current} + {delta_frames} leaves an empty stage"
                )]));
            }
            out.stages[*stage].frames = updated as usize;
        }
        EditCommand::InsertStage { at, stage } => {
            if *at > out.stages.len() {
                return Err(CoreError::Validation(vec![format!(
                    "insert position {at} out of range"
                )]));
            }
            out.stages.insert(*at, stage.clone());
        }
        EditCommand::DeleteStage { at } => {
            check_stage(*at)?;
            if out.stages.len() == 1 {
                return Err(CoreError::Validation(vec![
                    "cannot delete the only stage".to_string(),
                ]));
            }
            out.stages.remove(*at);
        }
    }
    out.ensure_valid()?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Prompt rendering
// ---------------------------------------------------------------------------

/// Instruction used to create a fresh description from a sentence.
pub const CREATION_TEMPLATE: &str = "Can you help me create some motion sequences. \
I will give you a sentence about what I want to do. You should help me divide this \
action into several different stages. For each stage, you should tell me: 1) the \
specific action; 2) 7 detailed description about head, spine, left upper limb, \
right upper limb, left lower limb, right lower limb, and trajectory; 3) the \
lasting frames (30 frames per second)";

/// Decoration applied to a user's edit command.
pub const EDIT_TEMPLATE_PREFIX: &str =
    "Based on current description you provided, I want to modify it by the command \"";
pub const EDIT_TEMPLATE_SUFFIX: &str = "\". Please give me the modified description.";

const WIRE_SHAPE_NOTE: &str = "Respond with a single JSON object shaped like \
{\"fps\": 30, \"stages\": [{\"frames\": 30, \"overall\": \"...\", \"parts\": \
{\"head\": \"...\", \"spine\": \"...\", \"left_arm\": \"...\", \"right_arm\": \
\"...\", \"left_leg\": \"...\", \"right_leg\": \"...\", \"pelvis_trajectory\": \
\"...\"}}]}.";

/// A rendered LLM request: creation (no current script) or edit.
#[derive(Debug, Clone, PartialEq)]
pub enum RenderedPrompt {
    Creation(String),
    Edit(String),
}

impl RenderedPrompt {
    pub fn text(&self) -> &str {
        match self {
            RenderedPrompt::Creation(t) | RenderedPrompt::Edit(t) => t,
        }
    }
}

/// Instantiate the prompt templates: a creation prompt when no script
/// exists yet, otherwise an edit prompt carrying the current script as
/// documented JSON and the command verbatim between quote markers.
pub fn render_prompt(
    script: Option<&FineGrainedScript>,
    user_command: &str,
) -> Result<RenderedPrompt> {
    if user_command.trim().is_empty() {
        return Err(CoreError::contract("empty instruction"));
    }
    match script {
        None => Ok(RenderedPrompt::Creation(format!(
            "{CREATION_TEMPLATE}\n\n{WIRE_SHAPE_NOTE}\n\nThe sentence: \"{user_command}\""
        ))),
        Some(s) => Ok(RenderedPrompt::Edit(format!(
            "Current description:\n{}\n\n{EDIT_TEMPLATE_PREFIX}{user_command}{EDIT_TEMPLATE_SUFFIX} \
             {WIRE_SHAPE_NOTE}",
            script_to_json(s)
        ))),
    }
}

// ---------------------------------------------------------------------------
// Response parsing
// ---------------------------------------------------------------------------

/// Extract the first balanced JSON object in a text, tolerating surrounding
/// prose and code fences.
pub fn extract_first_json(text: &str) -> Result<&str> {
    let bytes = text.as_bytes();
    let start = text.find('{').ok_or(CoreError::NoJsonFound)?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Ok(&text[start..=i]);
                }
            }
            _ => {}
        }
    }
    Err(CoreError::NoJsonFound)
}

/// Parse a script out of an LLM response: find the first JSON object, map
/// it onto the documented wire shape, and validate it. Failure modes are
/// reported distinctly (no JSON, schema mismatch, validation).
pub fn parse_script_response(text: &str) -> Result<FineGrainedScript> {
    let json = extract_first_json(text)?;
    script_from_json(json)
}

// ---------------------------------------------------------------------------
// Edit session
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct HistoryEntry {
    pub command: String,
    pub script: FineGrainedScript,
}

#[derive(Debug, Clone, Copy)]
pub struct SessionConfig {
    pub sampler: SamplerConfig,
    /// Base of the per-step regeneration seeds. Step `n` (zero-based,
    /// successful steps only) regenerates with `base_seed + n + 1`.
    pub base_seed: u64,
}

/// Mutable editing state: the current script plus the command history.
/// Every accepted step regenerates the full motion from scratch with a
/// fresh seed; any failure leaves the session untouched.
pub struct EditSession<'m, S> {
    model: &'m Denoiser<S>,
    schedule: NoiseSchedule,
    cfg: SessionConfig,
    script: FineGrainedScript,
    history: Vec<HistoryEntry>,
    steps_taken: u64,
}

impl<'m, S: Scalar> EditSession<'m, S> {
    /// Open a session on an existing script and generate its initial motion.
    pub fn new(
        model: &'m Denoiser<S>,
        schedule: NoiseSchedule,
        cfg: SessionConfig,
        script: FineGrainedScript,
    ) -> Result<(Self, MotionSequence<S>)> {
        script.ensure_valid()?;
        let motion = sample(model, &script, None, &schedule, &cfg.sampler, cfg.base_seed)?;
        Ok((
            EditSession {
                model,
                schedule,
                cfg,
                script,
                history: Vec::new(),
                steps_taken: 0,
            },
            motion,
        ))
    }

    /// Open a session from a natural-language sentence: the client turns it
    /// into a script via the creation prompt.
    pub fn create(
        model: &'m Denoiser<S>,
        schedule: NoiseSchedule,
        cfg: SessionConfig,
        sentence: &str,
        client: &dyn LlmClient,
    ) -> Result<(Self, MotionSequence<S>)> {
        let prompt = render_prompt(None, sentence)?;
        let response = client.complete(prompt.text())?;
        let script = parse_script_response(&response)?;
        let (mut session, motion) = Self::new(model, schedule, cfg, script)?;
        session.history.push(HistoryEntry {
            command: sentence.to_string(),
            script: session.script.clone(),
        });
        Ok((session, motion))
    }

    pub fn script(&self) -> &FineGrainedScript {
        &self.script
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    fn next_seed(&self) -> u64 {
        self.cfg.base_seed + self.steps_taken + 1
    }

    fn commit(
        &mut self,
        command: String,
        script: FineGrainedScript,
    ) -> Result<MotionSequence<S>> {
        // Everything fallible happens before any state mutation.
        let motion = sample(
            self.model,
            &script,
            None,
            &self.schedule,
            &self.cfg.sampler,
            self.next_seed(),
        )?;
        self.script = script.clone();
        self.history.push(HistoryEntry { command, script });
        self.steps_taken += 1;
        Ok(motion)
    }

    /// One natural-language editing step: render the edit prompt, ask the
    /// client, parse and validate its script, regenerate from scratch with
    /// a fresh seed, then commit. Atomic on failure.
    pub fn step(
        &mut self,
        command: &str,
        client: &dyn LlmClient,
    ) -> Result<(FineGrainedScript, MotionSequence<S>)> {
        let prompt = render_prompt(Some(&self.script), command)?;
        let response = client.complete(prompt.text())?;
        let script = parse_script_response(&response)?;
        script.ensure_valid()?;
        let motion = self.commit(command.to_string(), script.clone())?;
        Ok((script, motion))
    }

    /// Apply a structured command directly (no LLM round trip) and
    /// regenerate. Atomic on failure.
    pub fn apply(
        &mut self,
        cmd: &EditCommand,
    ) -> Result<(FineGrainedScript, MotionSequence<S>)> {
        let script = apply_edit_command(&self.script, cmd)?;
        let motion = self.commit(format!("{cmd:?}"), script.clone())?;
        Ok((script, motion))
    }
}

/// Resolve a user-facing part phrase ("left arm", "pelvis") to its index.
pub fn part_index_from_phrase(phrase: &str) -> Option<usize> {
    let norm = phrase.trim().to_lowercase().replace(' ', "_");
    if let Some(i) = PART_NAMES.iter().position(|p| *p == norm) {
        return Some(i);
    }
    match norm.as_str() {
        "pelvis" | "trajectory" => Some(6),
        "torso" => Some(1),
        _ => None,
    }
}

#[cfg(test)]
mod tests;
