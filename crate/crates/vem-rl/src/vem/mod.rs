//! Value-model training: encodes `(state, action)` pairs into dense feature
//! vectors and fits `Q(s,a)` to binary action-quality labels by MSE
//! regression. Trained models are frozen behind a prediction-only handle.

mod model;
mod train;

pub use model::{FrozenValueModel, ModelKind, ValueModel, VemIoError};
pub use train::{
    batch_grad, batch_loss, batch_mse, classify_metrics, encode_labeled, f1_from,
    grad_check_vem, init_model, train_vem, ClassificationMetrics, TrainReport, VemTrainConfig,
    VemTrainError,
};

use serde::{Deserialize, Serialize};

use crate::env::{Action, ActionType, EnvSpec, SimKey, State};
use crate::util::stable_hash64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Click-cell grid resolution G; DUAL_POINT actions map onto G x G cells.
    pub grid: usize,
    /// Task-id hash buckets.
    pub task_buckets: usize,
    /// History length encoded as last-k action-type one-hots. `None` uses
    /// the environment's own `history_k`.
    pub history_k: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { grid: 14, task_buckets: 16, history_k: None }
    }
}

impl EncoderConfig {
    pub fn history_len(&self, env: &EnvSpec) -> usize {
        self.history_k.unwrap_or(env.history_k)
    }
}

pub fn task_bucket(task_id: &str, buckets: usize) -> usize {
    (stable_hash64(task_id.as_bytes()) % buckets as u64) as usize
}

/// Grid cell of a click point: `floor(y*G)*G + floor(x*G)`, clamped to the
/// grid so points on the far edge stay in range.
pub fn click_cell(point: [f64; 2], grid: usize) -> usize {
    let g = grid as f64;
    let col = ((point[0] * g).floor() as usize).min(grid - 1);
    let row = ((point[1] * g).floor() as usize).min(grid - 1);
    row * grid + col
}

/// Feature dimension of [`encode`] for a given environment and config.
/// Focused-widget hash buckets in [`encode`].
pub const FOCUS_BUCKETS: usize = 8;

pub fn encode_dim(env: &EnvSpec, cfg: &EncoderConfig) -> usize {
    let k = cfg.history_len(env);
    env.screens.len() + cfg.task_buckets + k * ActionType::ALL.len()
        + 3 + 1 + FOCUS_BUCKETS + 1
        + ActionType::ALL.len()
        + cfg.grid * cfg.grid
        + 1
}

/// Dense encoding of a `(state, action)` pair: one-hot screen, task hash
/// bucket, last-k action types, typed-buffer class, focus, scroll, action
/// type, click cell, typed-text match flag. Deterministic, and injective on
/// the enumerable state-action space for tabular-compatible configs.
pub fn encode(env: &EnvSpec, state: &State, action: &Action, cfg: &EncoderConfig) -> Vec<f64> {
    let mut v = vec![0.0; encode_dim(env, cfg)];
    let mut off = 0;

    v[off + state.screen_id as usize] = 1.0;
    off += env.screens.len();

    v[off + task_bucket(&state.task_id, cfg.task_buckets)] = 1.0;
    off += cfg.task_buckets;

    let k = cfg.history_len(env);
    let n_types = ActionType::ALL.len();
    let hist = &state.history;
    let take = hist.len().min(k);
    for (slot, a) in hist[hist.len() - take..].iter().enumerate() {
        v[off + slot * n_types + a.action_type.index()] = 1.0;
    }
    off += k * n_types;

    let goal_text = env
        .task(&state.task_id)
        .ok()
        .and_then(|t| t.goal.requires_text.clone());
    let class = if state.typed_buffer.is_empty() {
        0
    } else if goal_text.as_deref() == Some(state.typed_buffer.as_str()) {
        1
    } else {
        2
    };
    v[off + class] = 1.0;
    off += 3;

    if let Some(wid) = state.focused_widget {
        v[off] = 1.0;
        v[off + 1 + (wid as usize % FOCUS_BUCKETS)] = 1.0;
    }
    off += 1 + FOCUS_BUCKETS;

    v[off] = f64::from(state.scroll_offset);
    off += 1;

    v[off + action.action_type.index()] = 1.0;
    off += n_types;

    if let Some(p) = action.click_point {
        v[off + click_cell(p, cfg.grid)] = 1.0;
    }
    off += cfg.grid * cfg.grid;

    let expected = env
        .task(&state.task_id)
        .ok()
        .and_then(|t| t.goal.requires_text.clone());
    if action.action_type == ActionType::Type
        && action.typed_text.as_deref() == expected.as_deref()
        && expected.is_some()
    {
        v[off] = 1.0;
    }
    off += 1;

    debug_assert_eq!(off, v.len());
    v
}

/// State-only features for parametric policies: screen, task bucket,
/// last-k action types, buffer-match flag, focus flag, scroll position.
pub fn encode_state(env: &EnvSpec, state: &State, cfg: &EncoderConfig) -> Vec<f64> {
    let k = cfg.history_len(env);
    let n_types = ActionType::ALL.len();
    let dim = env.screens.len() + cfg.task_buckets + k * n_types + 3;
    let mut v = vec![0.0; dim];
    let mut off = 0;

    v[off + state.screen_id as usize] = 1.0;
    off += env.screens.len();
    v[off + task_bucket(&state.task_id, cfg.task_buckets)] = 1.0;
    off += cfg.task_buckets;
    let hist = &state.history;
    let take = hist.len().min(k);
    for (slot, a) in hist[hist.len() - take..].iter().enumerate() {
        v[off + slot * n_types + a.action_type.index()] = 1.0;
    }
    off += k * n_types;

    let expected = env
        .task(&state.task_id)
        .ok()
        .and_then(|t| t.goal.requires_text.clone());
    if expected.is_some() && expected.as_deref() == Some(state.typed_buffer.as_str()) {
        v[off] = 1.0;
    }
    v[off + 1] = if state.focused_widget.is_some() { 1.0 } else { 0.0 };
    v[off + 2] = f64::from(state.scroll_offset);
    v
}

/// Stable hash of a feature vector; tabular cell key.
pub fn feature_key(features: &[f64]) -> u64 {
    stable_hash64(&crate::util::f64s_to_le_bytes(features))
}

/// Stable hash of the dynamics-relevant state identity, including task and
/// truncated history action types. Keys tabular policies and Q tables.
pub fn state_cell_key(env: &EnvSpec, state: &State) -> u64 {
    let task = match env.task(&state.task_id) {
        Ok(t) => t,
        Err(_) => return stable_hash64(state.task_id.as_bytes()),
    };
    let key = SimKey::of_state(task, state);
    let mut bytes = Vec::new();
    bytes.extend_from_slice(state.task_id.as_bytes());
    bytes.push(0xff);
    bytes.extend_from_slice(&serde_json::to_vec(&key).unwrap());
    let k = env.history_k;
    let hist = &state.history;
    let take = hist.len().min(k);
    for a in &hist[hist.len() - take..] {
        bytes.push(a.action_type.index() as u8);
    }
    stable_hash64(&bytes)
}

/// Stable hash of the dynamics-relevant state identity ignoring history;
/// used by exact solvers where the Markov key excludes history.
pub fn sim_state_key(env: &EnvSpec, state: &State) -> u64 {
    let task = match env.task(&state.task_id) {
        Ok(t) => t,
        Err(_) => return stable_hash64(state.task_id.as_bytes()),
    };
    let key = SimKey::of_state(task, state);
    let mut bytes = Vec::new();
    bytes.extend_from_slice(state.task_id.as_bytes());
    bytes.push(0xff);
    bytes.extend_from_slice(&serde_json::to_vec(&key).unwrap());
    stable_hash64(&bytes)
}
