//! LLM clients: the replaceable completion contract, a deterministic mock
//! with a small command grammar, a failure injector for atomicity tests,
//! and a generic chat-completion HTTP client.

use std::cell::Cell;

use crate::error::{CoreError, Result};
use crate::schema::{script_to_json, FineGrainedScript, Stage, NUM_PARTS};

use super::{
    apply_edit_command, extract_first_json, part_index_from_phrase, script_from_json, EditCommand,
    EDIT_TEMPLATE_PREFIX, EDIT_TEMPLATE_SUFFIX,
};

/// A chat-completion backend: one prompt in, one text response out.
pub trait LlmClient {
    fn complete(&self, prompt: &str) -> Result<String>;
}

// ---------------------------------------------------------------------------
// Deterministic mock
// ---------------------------------------------------------------------------

const MOTION_WORDS: [&str; 8] = [
    "hold", "raise", "lower", "wave", "swing", "circle", "twist", "stretch",
];

const PART_PHRASES: [(&str, usize); 9] = [
    ("head", 0),
    ("spine", 1),
    ("torso", 1),
    ("left arm", 2),
    ("right arm", 3),
    ("left leg", 4),
    ("right leg", 5),
    ("pelvis", 6),
    ("trajectory", 6),
];

/// Pure-function mock client. Creation prompts are answered by splitting
/// the sentence on "then" into stages and assigning motion words to the
/// parts they mention; edit prompts are answered by parsing the embedded
/// script, applying a fixed command grammar, and returning the rewritten
/// script wrapped in prose.
#[derive(Debug, Default)]
pub struct MockLlmClient;

impl MockLlmClient {
    pub fn new() -> Self {
        MockLlmClient
    }

    fn answer_creation(&self, sentence: &str) -> Result<String> {
        let sentence = sentence.to_lowercase();
        let stages: Vec<Stage> = sentence
            .split(" then ")
            .map(|chunk| {
                let frames = parse_duration_frames(chunk).unwrap_or(30);
                let words: Vec<&str> = MOTION_WORDS
                    .iter()
                    .copied()
                    .filter(|w| chunk.split_whitespace().any(|tok| tok.trim_matches(',') == *w))
                    .collect();
                let mentioned: Vec<(usize, &str)> = PART_PHRASES
                    .iter()
                    .filter(|(phrase, _)| chunk.contains(phrase))
                    .map(|&(phrase, idx)| (idx, phrase))
                    .collect();
                let mut parts = vec!["hold".to_string(); NUM_PARTS];
                if mentioned.is_empty() {
                    // No part named: the whole body performs the words.
                    if let Some(w) = words.first() {
                        parts = vec![w.to_string(); NUM_PARTS];
                    }
                } else {
                    for (slot, (idx, _)) in mentioned.iter().enumerate() {
                        let w = words.get(slot).or_else(|| words.first());
                        if let Some(w) = w {
                            parts[*idx] = w.to_string();
                        }
                    }
                }
                Stage {
                    frames,
                    overall: chunk.trim().to_string(),
                    parts,
                }
            })
            .collect();
        let script = FineGrainedScript { fps: 30, stages };
        script.ensure_valid()?;
        Ok(wrap_script(&script))
    }

    fn answer_edit(&self, prompt: &str) -> Result<String> {
        let json = extract_first_json(prompt)?;
        let script = script_from_json(json)?;
        let command = prompt
            .split(EDIT_TEMPLATE_PREFIX)
            .nth(1)
            .and_then(|rest| rest.split(EDIT_TEMPLATE_SUFFIX).next())
            .ok_or_else(|| CoreError::Client("edit prompt missing command slot".into()))?;
        let cmd = parse_mock_command(command, &script)?;
        let rewritten = apply_edit_command(&script, &cmd)?;
        Ok(wrap_script(&rewritten))
    }
}

fn wrap_script(script: &FineGrainedScript) -> String {
    format!(
        "Sure. Here is the description you asked for:\n```json\n{}\n```\nLet me know if \
         anything should change.",
        script_to_json(script)
    )
}

impl LlmClient for MockLlmClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        if prompt.contains(EDIT_TEMPLATE_PREFIX) {
            self.answer_edit(prompt)
        } else {
            let sentence = prompt
                .rsplit("The sentence: \"")
                .next()
                .map(|s| s.trim_end_matches('"'))
                .ok_or_else(|| CoreError::Client("creation prompt missing sentence".into()))?;
            self.answer_creation(sentence)
        }
    }
}

/// Duration phrases: "for N seconds" / "lasting N frames" and variants.
fn parse_duration_frames(text: &str) -> Option<usize> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    for i in 0..toks.len() {
        if let Ok(n) = toks[i].parse::<f64>() {
            if let Some(&unit) = toks.get(i + 1) {
                let unit = unit.trim_matches(|c: char| !c.is_alphabetic());
                if unit.starts_with("second") {
                    return Some((n * 30.0).round().max(1.0) as usize);
                }
                if unit.starts_with("frame") {
                    return Some(n.round().max(1.0) as usize);
                }
            }
        }
    }
    None
}

/// The mock's command grammar. Stage numbers are one-based in commands.
///
///   extend stage N by X seconds|frames
///   shorten stage N by X seconds|frames
///   set stage N <part> to <text>
///   set stage N overall to <text>
///   make the <part> <word> in stage N
///   insert stage at N lasting X frames|seconds
///   append stage lasting X frames|seconds
///   delete stage N
fn parse_mock_command(command: &str, script: &FineGrainedScript) -> Result<EditCommand> {
    let lower = command.trim().to_lowercase();
    let toks: Vec<&str> = lower.split_whitespace().collect();
    let unrecognized = || CoreError::Client(format!("mock grammar: unrecognized command \"{command}\""));

    let stage_after = |keyword: &str| -> Option<usize> {
        let pos = toks.iter().position(|&t| t == keyword)?;
        let n: usize = toks.get(pos + 1)?.trim_matches(',').parse().ok()?;
        n.checked_sub(1)
    };

    if toks.first() == Some(&"extend") || toks.first() == Some(&"shorten") {
        let stage = stage_after("stage").ok_or_else(unrecognized)?;
        let delta = parse_duration_frames(&lower).ok_or_else(unrecognized)? as i64;
        let signed = if toks[0] == "extend" { delta } else { -delta };
        return Ok(EditCommand::AdjustDuration {
            stage,
            delta_frames: signed,
        });
    }

    if lower.starts_with("set stage") {
        let stage = stage_after("stage").ok_or_else(unrecognized)?;
        let rest = lower
            .splitn(4, ' ')
            .nth(3)
            .ok_or_else(unrecognized)?;
        let (target, text) = rest.split_once(" to ").ok_or_else(unrecognized)?;
        let text = text.trim().trim_matches('"').to_string();
        if target.trim() == "overall" {
            return Ok(EditCommand::SetOverall { stage, text });
        }
        let part = part_index_from_phrase(target).ok_or_else(unrecognized)?;
        return Ok(EditCommand::SetDescription { stage, part, text });
    }

    if lower.starts_with("make the ") {
        // make the <part> <word> in stage N
        let stage = stage_after("stage").ok_or_else(unrecognized)?;
        let body = lower
            .strip_prefix("make the ")
            .and_then(|r| r.split(" in stage").next())
            .ok_or_else(unrecognized)?;
        let (phrase, word) = body.rsplit_once(' ').ok_or_else(unrecognized)?;
        let part = part_index_from_phrase(phrase).ok_or_else(unrecognized)?;
        return Ok(EditCommand::SetDescription {
            stage,
            part,
            text: word.to_string(),
        });
    }

    if lower.starts_with("insert stage at ") || lower.starts_with("append stage") {
        let at = if lower.starts_with("append") {
            script.num_stages()
        } else {
            stage_after("at").ok_or_else(unrecognized)?
        };
        let frames = parse_duration_frames(&lower).ok_or_else(unrecognized)?;
        return Ok(EditCommand::InsertStage {
            at,
            stage: Stage::uniform(frames, "hold"),
        });
    }

    if lower.starts_with("delete stage") {
        let at = stage_after("stage").ok_or_else(unrecognized)?;
        return Ok(EditCommand::DeleteStage { at });
    }

    Err(unrecognized())
}

// ---------------------------------------------------------------------------
// Failure injection
// ---------------------------------------------------------------------------

/// Wraps a client and fails the Nth call (zero-based); other calls pass
/// through. For exercising session atomicity.
pub struct FailingClient<C> {
    inner: C,
    fail_at: usize,
    calls: Cell<usize>,
}

impl<C> FailingClient<C> {
    pub fn new(inner: C, fail_at: usize) -> Self {
        FailingClient {
            inner,
            fail_at,
            calls: Cell::new(0),
        }
    }
}

impl<C: LlmClient> LlmClient for FailingClient<C> {
    fn complete(&self, prompt: &str) -> Result<String> {
        let n = self.calls.get();
        self.calls.set(n + 1);
        if n == self.fail_at {
            return Err(CoreError::Client("injected failure".into()));
        }
        self.inner.complete(prompt)
    }
}

// ---------------------------------------------------------------------------
// HTTP chat-completion client
// ---------------------------------------------------------------------------

/// Generic chat-completion client. The request body is
/// `{"model": ..., "messages": [{"role": "user", "content": <prompt>}]}`
/// and the response is expected to carry the text at
/// `choices[0].message.content`. The bearer token is read from the
/// configured environment variable at call time.
pub struct HttpLlmClient {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl HttpLlmClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        HttpLlmClient {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: "MOGEN_LLM_API_KEY".to_string(),
            timeout_secs: 60,
        }
    }
}

impl LlmClient for HttpLlmClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let key = std::env::var(&self.api_key_env).map_err(|_| {
            CoreError::Client(format!(
                "missing API key: set the {} environment variable",
                self.api_key_env
            ))
        })?;
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        let response = ureq::post(&self.endpoint)
            .set("Authorization", &format!("Bearer {key}"))
            .set("Content-Type", "application/json")
            .timeout(std::time::Duration::from_secs(self.timeout_secs))
            .send_json(body)
            .map_err(|e| CoreError::Client(format!("chat completion request failed: {e}")))?;
        let parsed: serde_json::Value = response
            .into_json()
            .map_err(|e| CoreError::Client(format!("malformed completion response: {e}")))?;
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(|s| s.to_string())
            .ok_or_else(|| {
                CoreError::Client("completion response missing choices[0].message.content".into())
            })
    }
}
