//! Binary action-quality labels for dataset steps: from the environment
//! oracle, a noise-injected oracle, or an external chat-completion service
//! with record/replay transcripts. Replay mode is pure and network-free.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Trajectory;
use crate::env::{EnvSpec, Oracle};
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("API key environment variable {0} is not set")]
    MissingKey(String),
    #[error("http error: {0}")]
    Http(String),
    #[error("unparseable response for step {step_key} after {retries} retries")]
    Unparseable { step_key: String, retries: u32 },
    #[error("transcript has no entry for step {0}")]
    MissingTranscript(String),
    #[error("parse error in {what}: {message}")]
    Parse { what: String, message: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Annotator verdict for one step: 1 = suboptimal, 2 = optimal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub rating: u8,
    #[serde(default)]
    pub explanation: Option<String>,
}

impl Rating {
    pub fn validate(&self) -> Result<(), AnnotateError> {
        if self.rating == 1 || self.rating == 2 {
            Ok(())
        } else {
            Err(AnnotateError::Parse {
                what: "rating".into(),
                message: format!("rating must be 1 or 2, got {}", self.rating),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Oracle,
    Noisy,
    Llm,
    Replay,
}

/// One labeled step, in dataset order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub step_key: String,
    pub ell: u8,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rating: Option<u8>,
    pub source: LabelSource,
    /// Line offset into the transcript, for llm/replay labels.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub transcript_offset: Option<usize>,
}

/// rating 2 -> ell 1, rating 1 -> ell 0.
pub fn rating_to_label(r: &Rating) -> u8 {
    u8::from(r.rating == 2)
}

/// Labels every step by shortest-path optimality. Equals the recorded
/// reward field on any step collected in the same environment.
pub fn annotate_oracle(
    env: &EnvSpec,
    oracle: &Oracle,
    dataset: &[Trajectory],
) -> Vec<Label> {
    let mut out = Vec::new();
    for t in dataset {
        for rec in &t.steps {
            let ell = u8::from(oracle.is_optimal(env, &rec.state(), &rec.action()));
            out.push(Label {
                step_key: rec.step_key(),
                ell,
                rating: Some(if ell == 1 { 2 } else { 1 }),
                source: LabelSource::Oracle,
                transcript_offset: None,
            });
        }
    }
    out
}

/// Independently flips each label with probability `1 - agreement_rate`.
pub fn annotate_noisy(
    labels: &[Label],
    agreement_rate: f64,
    seed: u64,
) -> Result<Vec<Label>, AnnotateError> {
    if !(0.0..=1.0).contains(&agreement_rate) {
        return Err(AnnotateError::InvalidConfig(format!(
            "agreement_rate out of [0,1]: {agreement_rate}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "annotate-noisy"));
    Ok(labels
        .iter()
        .map(|l| {
            let flip = rng.gen::<f64>() >= agreement_rate;
            let ell = if flip { 1 - l.ell } else { l.ell };
            Label {
                step_key: l.step_key.clone(),
                ell,
                rating: Some(if ell == 1 { 2 } else { 1 }),
                source: LabelSource::Noisy,
                transcript_offset: None,
            }
        })
        .collect())
}

/// Prompt template with `{task}`, `{history}`, `{current}` placeholders.
/// The annotator must answer with a single JSON object
/// `{"rating": int, "explanation": str}`.
pub const DEFAULT_PROMPT_TEMPLATE: &str = r#"You are grading one step taken by a GUI navigation agent.

Task instruction: {task}

Actions taken before this step:
{history}

The action being graded, with the interface state it was taken in:
{current}

Rate the action on this scale:
- 1: the action is counterproductive or wasted; it does not move the agent
  toward finishing the task.
- 2: the action is a correct step that helps complete the task.

Reply with exactly one JSON object and nothing else, in the form
{"rating": int, "explanation": str}.
"#;

/// Renders the prompt for one step.
pub fn render_prompt(template: &str, task: &str, history: &str, current: &str) -> String {
    template
        .replace("{task}", task)
        .replace("{history}", history)
        .replace("{current}", current)
}

/// Text rendering of a recorded step for the annotation prompt.
pub fn render_step(env: &EnvSpec, rec: &crate::dataset::StepRecord) -> (String, String) {
    let state = rec.state();
    let screen = env.screen(state.screen_id);
    let mut widgets = String::new();
    for w in &screen.widgets {
        if screen.widget_visible(w, state.scroll_offset) {
            widgets.push_str(&format!(
                "  - {:?} \"{}\" at ({:.2}, {:.2})\n",
                w.kind,
                w.widget_id,
                w.rect.center()[0],
                w.rect.center()[1]
            ));
        }
    }
    let history = if rec.history.is_empty() {
        "(none)".to_string()
    } else {
        rec.history
            .iter()
            .map(|a| a.action_type.wire_name().to_string())
            .collect::<Vec<_>>()
            .join(", ")
    };
    let mut current = format!(
        "Screen {} with visible widgets:\n{widgets}Typed text so far: \"{}\"\n",
        state.screen_id, state.typed_buffer
    );
    current.push_str(&format!("Action: {}", rec.action_type.wire_name()));
    if let Some(p) = rec.click_point {
        current.push_str(&format!(" at click_point [{:.3}, {:.3}]", p[0], p[1]));
    }
    if let Some(t) = &rec.typed_text {
        current.push_str(&format!(" with text \"{t}\""));
    }
    (history, current)
}

/// Parses a chat response body as a strict `{"rating": int, "explanation":
/// str}` object.
pub fn parse_rating(content: &str) -> Option<Rating> {
    let r: Rating = serde_json::from_str(content.trim()).ok()?;
    r.validate().ok()?;
    Some(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Drop the step from the labeled set.
    Skip,
    /// Fall back to the environment oracle.
    Oracle,
    /// Label ell = 0.
    Ell0,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub temperature: f64,
    /// Name of the environment variable holding the API key. The value is
    /// read at request time and never logged or stored.
    pub api_key_env: String,
    pub max_retries: u32,
    pub fallback: Fallback,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            endpoint_url: "https://api.openai.com/v1/chat/completions".into(),
            model_name: "gpt-4o".into(),
            temperature: 0.0,
            api_key_env: "ANNOTATOR_API_KEY".into(),
            max_retries: 3,
            fallback: Fallback::Skip,
        }
    }
}

/// One transcript line: request and response bodies plus timing. Requests
/// never contain credentials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub step_key: String,
    pub request: serde_json::Value,
    pub response: serde_json::Value,
    pub latency_ms: u64,
}

fn chat_request(cfg: &LlmConfig, prompt: &str) -> serde_json::Value {
    serde_json::json!({
        "model": cfg.model_name,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": cfg.temperature,
    })
}

fn response_content(response: &serde_json::Value) -> Option<&str> {
    response
        .get("choices")?
        .get(0)?
        .get("message")?
        .get("content")?
        .as_str()
}

fn fallback_label(
    fallback: Fallback,
    env: &EnvSpec,
    oracle: &Oracle,
    rec: &crate::dataset::StepRecord,
    offset: Option<usize>,
    source: LabelSource,
) -> Option<Label> {
    let ell = match fallback {
        Fallback::Skip => return None,
        Fallback::Oracle => u8::from(oracle.is_optimal(env, &rec.state(), &rec.action())),
        Fallback::Ell0 => 0,
    };
    Some(Label {
        step_key: rec.step_key(),
        ell,
        rating: None,
        source,
        transcript_offset: offset,
    })
}

/// Annotates by calling a chat-completion endpoint. Every request/response
/// pair is appended to `transcript_path` so the run can be replayed
/// bit-exactly with [`annotate_replay`].
pub fn annotate_llm(
    cfg: &LlmConfig,
    env: &EnvSpec,
    oracle: &Oracle,
    dataset: &[Trajectory],
    template: &str,
    transcript_path: &Path,
) -> Result<Vec<Label>, AnnotateError> {
    let api_key = std::env::var(&cfg.api_key_env)
        .map_err(|_| AnnotateError::MissingKey(cfg.api_key_env.clone()))?;
    let client = reqwest::blocking::Client::new();
    let mut transcript = OpenOptions::new()
        .create(true)
        .append(true)
        .open(transcript_path)?;
    let mut out = Vec::new();
    let mut offset = 0usize;
    for t in dataset {
        for rec in &t.steps {
            let (history, current) = render_step(env, rec);
            let prompt = render_prompt(template, &rec.instruction, &history, &current);
            let request = chat_request(cfg, &prompt);
            let mut label = None;
            for attempt in 0..cfg.max_retries.max(1) {
                let start = Instant::now();
                let resp = client
                    .post(&cfg.endpoint_url)
                    .bearer_auth(&api_key)
                    .json(&request)
                    .send()
                    .and_then(|r| r.json::<serde_json::Value>());
                let latency_ms = start.elapsed().as_millis() as u64;
                let response = match resp {
                    Ok(v) => v,
                    Err(e) => {
                        if attempt + 1 == cfg.max_retries.max(1) {
                            return Err(AnnotateError::Http(e.to_string()));
                        }
                        continue;
                    }
                };
                let entry = TranscriptEntry {
                    step_key: rec.step_key(),
                    request: request.clone(),
                    response: response.clone(),
                    latency_ms,
                };
                serde_json::to_writer(&mut transcript, &entry).map_err(|e| {
                    AnnotateError::Parse { what: "transcript".into(), message: e.to_string() }
                })?;
                transcript.write_all(b"\n")?;
                let this_offset = offset;
                offset += 1;
                if let Some(rating) =
                    response_content(&response).and_then(parse_rating)
                {
                    label = Some(Label {
                        step_key: rec.step_key(),
                        ell: rating_to_label(&rating),
                        rating: Some(rating.rating),
                        source: LabelSource::Llm,
                        transcript_offset: Some(this_offset),
                    });
                    break;
                }
            }
            match label {
                Some(l) => out.push(l),
                None => {
                    if let Some(l) = fallback_label(
                        cfg.fallback,
                        env,
                        oracle,
                        rec,
                        Some(offset.saturating_sub(1)),
                        LabelSource::Llm,
                    ) {
                        out.push(l);
                    } else if cfg.fallback == Fallback::Skip {
                        // Skipped; nothing recorded in the label file.
                    }
                }
            }
        }
    }
    transcript.flush()?;
    Ok(out)
}

pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptEntry>, AnnotateError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| AnnotateError::Parse {
            what: format!("transcript line {}", i + 1),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Replays a recorded transcript: labels are reproduced from the logged
/// responses through the same parser, with no network access. The last
/// logged attempt per step wins, matching live retry semantics.
pub fn annotate_replay(
    env: &EnvSpec,
    oracle: &Oracle,
    dataset: &[Trajectory],
    transcript: &[TranscriptEntry],
    fallback: Fallback,
) -> Result<Vec<Label>, AnnotateError> {
    let mut out = Vec::new();
    for t in dataset {
        for rec in &t.steps {
            let key = rec.step_key();
            let entries: Vec<(usize, &TranscriptEntry)> = transcript
                .iter()
                .enumerate()
                .filter(|(_, e)| e.step_key == key)
                .collect();
            if entries.is_empty() {
                return Err(AnnotateError::MissingTranscript(key));
            }
            let mut label = None;
            for (off, e) in &entries {
                if let Some(rating) = response_content(&e.response).and_then(parse_rating) {
                    label = Some(Label {
                        step_key: key.clone(),
                        ell: rating_to_label(&rating),
                        rating: Some(rating.rating),
                        source: LabelSource::Replay,
                        transcript_offset: Some(*off),
                    });
                    break;
                }
            }
            match label {
                Some(l) => out.push(l),
                None => {
                    let off = entries.last().map(|(o, _)| *o);
                    if let Some(l) =
                        fallback_label(fallback, env, oracle, rec, off, LabelSource::Replay)
                    {
                        out.push(l);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn write_labels(labels: &[Label], path: &Path) -> Result<(), AnnotateError> {
    let mut f = File::create(path)?;
    for l in labels {
        serde_json::to_writer(&mut f, l).map_err(|e| AnnotateError::Parse {
            what: "label file".into(),
            message: e.to_string(),
        })?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<Label>, AnnotateError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| AnnotateError::Parse {
            what: format!("label file line {}", i + 1),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// ell values in dataset order for a labeled set that covers every step
/// (oracle/noisy modes, or llm with a non-skip fallback).
pub fn ells_in_dataset_order(
    dataset: &[Trajectory],
    labels: &[Label],
) -> Result<Vec<u8>, AnnotateError> {
    let by_key: std::collections::HashMap<&str, u8> =
        labels.iter().map(|l| (l.step_key.as_str(), l.ell)).collect();
    let mut out = Vec::new();
    for t in dataset {
        for rec in &t.steps {
            let key = rec.step_key();
            match by_key.get(key.as_str()) {
                Some(ell) => out.push(*ell),
                None => return Err(AnnotateError::MissingTranscript(key)),
            }
        }
    }
    Ok(out)
}
