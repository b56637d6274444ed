//! Synthetic GUI-navigation MDPs: screens, widgets, tasks, and the step
//! dynamics that stand in for a real Android environment.
//!
//! An [`EnvSpec`] is immutable after generation and safe to share across
//! concurrent rollouts; [`State`] is a value owned by the caller and
//! [`step`] has no hidden mutable state besides the caller-supplied
//! [`RandomStream`].

mod generator;
mod oracle;

pub use generator::{generate_env, GeneratorConfig};
pub use oracle::{
    apply_intended, candidate_actions, concrete_action, resolve_concrete, CandidateAction,
    Oracle, SimKey, TypedClass,
};

use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Current on-disk schema version for serialized environments.
pub const ENV_VERSION: u32 = 1;

/// Global counter of [`step`] invocations. Policy training is contractually
/// offline; tests read this counter before and after training to assert that
/// zero environment steps happened.
pub static STEP_CALLS: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown task id: {0}")]
    UnknownTask(String),
    #[error("stepping a terminal state is not allowed")]
    SteppedDoneState,
    #[error("malformed action: {0}")]
    MalformedAction(String),
    #[error("state space enumeration cap of {cap} exceeded")]
    CapExceeded { cap: usize },
    #[error("environment generation failed after {retries} retries: {reason}")]
    GenerationFailed { retries: u32, reason: String },
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
}

/// The 11 GUI action types.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionType {
    DualPoint,
    Type,
    PressBack,
    PressHome,
    PressEnter,
    StatusTaskComplete,
    StatusTaskImpossible,
    ScrollDown,
    ScrollUp,
    ScrollLeft,
    ScrollRight,
}

impl ActionType {
    pub const ALL: [ActionType; 11] = [
        ActionType::DualPoint,
        ActionType::Type,
        ActionType::PressBack,
        ActionType::PressHome,
        ActionType::PressEnter,
        ActionType::StatusTaskComplete,
        ActionType::StatusTaskImpossible,
        ActionType::ScrollDown,
        ActionType::ScrollUp,
        ActionType::ScrollLeft,
        ActionType::ScrollRight,
    ];

    /// Payload-free types, in declaration order. `DualPoint` and `Type`
    /// carry payloads and are excluded.
    pub const PAYLOAD_FREE: [ActionType; 9] = [
        ActionType::PressBack,
        ActionType::PressHome,
        ActionType::PressEnter,
        ActionType::StatusTaskComplete,
        ActionType::StatusTaskImpossible,
        ActionType::ScrollDown,
        ActionType::ScrollUp,
        ActionType::ScrollLeft,
        ActionType::ScrollRight,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|t| *t == self).unwrap()
    }

    /// Serialized name, e.g. `DUAL_POINT`.
    pub fn wire_name(self) -> &'static str {
        match self {
            ActionType::DualPoint => "DUAL_POINT",
            ActionType::Type => "TYPE",
            ActionType::PressBack => "PRESS_BACK",
            ActionType::PressHome => "PRESS_HOME",
            ActionType::PressEnter => "PRESS_ENTER",
            ActionType::StatusTaskComplete => "STATUS_TASK_COMPLETE",
            ActionType::StatusTaskImpossible => "STATUS_TASK_IMPOSSIBLE",
            ActionType::ScrollDown => "SCROLL_DOWN",
            ActionType::ScrollUp => "SCROLL_UP",
            ActionType::ScrollLeft => "SCROLL_LEFT",
            ActionType::ScrollRight => "SCROLL_RIGHT",
        }
    }
}

/// A concrete GUI action. Exactly the payload required by `action_type`
/// must be present; [`Action::validate`] enforces this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub action_type: ActionType,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub click_point: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub typed_text: Option<String>,
}

impl Action {
    pub fn simple(action_type: ActionType) -> Self {
        Action { action_type, click_point: None, typed_text: None }
    }

    pub fn click(x: f64, y: f64) -> Self {
        Action {
            action_type: ActionType::DualPoint,
            click_point: Some([x, y]),
            typed_text: None,
        }
    }

    pub fn type_text(text: impl Into<String>) -> Self {
        Action {
            action_type: ActionType::Type,
            click_point: None,
            typed_text: Some(text.into()),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        match self.action_type {
            ActionType::DualPoint => {
                let p = self.click_point.ok_or_else(|| {
                    EnvError::MalformedAction("DUAL_POINT requires click_point".into())
                })?;
                if self.typed_text.is_some() {
                    return Err(EnvError::MalformedAction(
                        "DUAL_POINT must not carry typed_text".into(),
                    ));
                }
                if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                    return Err(EnvError::MalformedAction(format!(
                        "click_point out of [0,1]^2: [{}, {}]",
                        p[0], p[1]
                    )));
                }
            }
            ActionType::Type => {
                if self.typed_text.is_none() {
                    return Err(EnvError::MalformedAction(
                        "TYPE requires typed_text".into(),
                    ));
                }
                if self.click_point.is_some() {
                    return Err(EnvError::MalformedAction(
                        "TYPE must not carry click_point".into(),
                    ));
                }
            }
            _ => {
                if self.click_point.is_some() || self.typed_text.is_some() {
                    return Err(EnvError::MalformedAction(format!(
                        "{:?} takes no payload",
                        self.action_type
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidgetKind {
    Button,
    Link,
    Textfield,
    Ad,
}

/// Axis-aligned rectangle in normalized [0,1]^2 screen coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0]
    }

    pub fn overlaps(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Widget {
    pub widget_id: u32,
    pub rect: Rect,
    pub kind: WidgetKind,
    /// Screen this widget navigates to when clicked, if any. Textfields
    /// have no target; clicking them focuses the field instead.
    pub target: Option<u32>,
    /// Layout row; gates visibility under scrolling.
    pub row: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Screen {
    pub screen_id: u32,
    pub widgets: Vec<Widget>,
    pub is_ad: bool,
    /// Maximum vertical scroll offset; 0 means everything fits.
    pub max_scroll: u8,
    /// Number of widget rows visible at one scroll position.
    pub visible_rows: u8,
}

impl Screen {
    /// A widget is clickable only while its row is inside the visible window.
    pub fn widget_visible(&self, widget: &Widget, scroll_offset: u8) -> bool {
        let top = scroll_offset;
        let bottom = scroll_offset.saturating_add(self.visible_rows);
        widget.row >= top && widget.row < bottom
    }
}

/// Declarative goal condition, decidable from state alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalPredicate {
    pub screen: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub requires_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub instruction: String,
    pub goal: GoalPredicate,
    pub max_steps: u32,
}

/// Non-click navigation keys of the transition table.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Nav {
    Click(u32),
    Back,
    Enter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionEntry {
    pub screen: u32,
    pub nav: Nav,
    pub target: u32,
}

/// A complete synthetic GUI environment. Immutable after generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub env_version: u32,
    pub env_id: String,
    pub screens: Vec<Screen>,
    pub tasks: Vec<Task>,
    /// Sorted by (screen, nav); lookups binary-search this list.
    pub transitions: Vec<TransitionEntry>,
    pub home_screen: u32,
    pub distractor_prob: f64,
    pub gamma: f64,
    /// History truncation length carried into records and features.
    pub history_k: usize,
    /// Global TYPE vocabulary; behavior policies and action templates draw
    /// typed text from here.
    pub text_vocab: Vec<String>,
    pub seed: u64,
}

impl EnvSpec {
    pub fn screen(&self, id: u32) -> &Screen {
        &self.screens[id as usize]
    }

    pub fn task(&self, task_id: &str) -> Result<&Task, EnvError> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| EnvError::UnknownTask(task_id.to_string()))
    }

    pub fn ad_screens(&self) -> Vec<u32> {
        self.screens
            .iter()
            .filter(|s| s.is_ad)
            .map(|s| s.screen_id)
            .collect()
    }

    pub fn transition(&self, screen: u32, nav: Nav) -> Option<u32> {
        self.transitions
            .binary_search_by(|e| (e.screen, e.nav).cmp(&(screen, nav)))
            .ok()
            .map(|i| self.transitions[i].target)
    }

    /// Resolves a click point to the visible widget containing it, if any.
    pub fn widget_at(&self, screen: u32, scroll: u8, x: f64, y: f64) -> Option<&Widget> {
        let sc = self.screen(screen);
        sc.widgets
            .iter()
            .find(|w| sc.widget_visible(w, scroll) && w.rect.contains(x, y))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("EnvSpec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Full simulation state for one task episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub task_id: String,
    pub screen_id: u32,
    /// Truncated to the last `history_k` actions of the environment.
    pub history: Vec<Action>,
    pub typed_buffer: String,
    pub step_index: u32,
    pub done: bool,
    pub succeeded: bool,
    #[serde(default)]
    pub scroll_offset: u8,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub focused_widget: Option<u32>,
}

/// Source of stochastic click-hijack outcomes. Parallel rollouts must each
/// own an independent stream.
#[derive(Debug, Clone)]
pub enum RandomStream {
    /// Seeded generator; the normal path.
    Seeded(ChaCha8Rng),
    /// Replays previously recorded hijack events verbatim.
    Replay { events: Vec<Option<u32>>, cursor: usize },
    /// Never hijacks. Valid whenever `distractor_prob == 0`.
    Off,
}

impl RandomStream {
    pub fn seeded(seed: u64) -> Self {
        RandomStream::Seeded(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn replay(events: Vec<Option<u32>>) -> Self {
        RandomStream::Replay { events, cursor: 0 }
    }

    /// Draws the hijack outcome for a click: `Some(ad_screen_id)` when the
    /// click is hijacked.
    fn hijack(&mut self, prob: f64, ad_screens: &[u32]) -> Option<u32> {
        if prob <= 0.0 || ad_screens.is_empty() {
            // Still consume a replay slot so traces stay aligned.
            if let RandomStream::Replay { events, cursor } = self {
                let ev = events.get(*cursor).copied().flatten();
                *cursor += 1;
                return ev;
            }
            return None;
        }
        match self {
            RandomStream::Seeded(rng) => {
                let roll: f64 = rng.gen();
                if roll < prob {
                    let idx = rng.gen_range(0..ad_screens.len());
                    Some(ad_screens[idx])
                } else {
                    None
                }
            }
            RandomStream::Replay { events, cursor } => {
                let ev = events.get(*cursor).copied().flatten();
                *cursor += 1;
                ev
            }
            RandomStream::Off => None,
        }
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: State,
    pub reward: u8,
    pub done: bool,
    /// The hijack event consumed by this step, for exact replay.
    pub hijack: Option<u32>,
}

/// Initial state of a task episode: home screen, empty history.
pub fn reset(env: &EnvSpec, task_id: &str) -> Result<State, EnvError> {
    let task = env.task(task_id)?;
    Ok(State {
        task_id: task.task_id.clone(),
        screen_id: env.home_screen,
        history: Vec::new(),
        typed_buffer: String::new(),
        step_index: 0,
        done: false,
        succeeded: false,
        scroll_offset: 0,
        focused_widget: None,
    })
}

/// Whether the task goal holds in `state`.
pub fn goal_satisfied(env: &EnvSpec, state: &State) -> bool {
    let task = match env.task(&state.task_id) {
        Ok(t) => t,
        Err(_) => return false,
    };
    if state.screen_id != task.goal.screen {
        return false;
    }
    match &task.goal.requires_text {
        Some(text) => state.typed_buffer == *text,
        None => true,
    }
}

/// Applies `action` to `state`. Reward is 1 iff the action is a member of
/// the optimal set for this state, 0 otherwise. With probability
/// `distractor_prob`, a click on a non-ad widget is hijacked to an ad screen
/// drawn from `rng`.
pub fn step(
    env: &EnvSpec,
    state: &State,
    action: &Action,
    oracle: &Oracle,
    rng: &mut RandomStream,
) -> Result<StepOutcome, EnvError> {
    STEP_CALLS.fetch_add(1, Ordering::Relaxed);
    if state.done {
        return Err(EnvError::SteppedDoneState);
    }
    action.validate()?;

    let reward = u8::from(oracle.is_optimal(env, state, action));

    let mut next = state.clone();
    next.step_index += 1;
    let mut hijack_event = None;

    match action.action_type {
        ActionType::DualPoint => {
            let [x, y] = action.click_point.unwrap();
            let hit = env
                .widget_at(state.screen_id, state.scroll_offset, x, y)
                .cloned();
            match hit {
                Some(w) => {
                    let non_ad = w.kind != WidgetKind::Ad;
                    let ads = env.ad_screens();
                    if non_ad {
                        hijack_event = rng.hijack(env.distractor_prob, &ads);
                    }
                    if let Some(ad) = hijack_event {
                        move_to(&mut next, ad);
                    } else {
                        match w.kind {
                            WidgetKind::Textfield => {
                                next.focused_widget = Some(w.widget_id);
                            }
                            _ => {
                                if let Some(t) =
                                    env.transition(state.screen_id, Nav::Click(w.widget_id))
                                {
                                    move_to(&mut next, t);
                                } else if let Some(t) = w.target {
                                    move_to(&mut next, t);
                                }
                            }
                        }
                    }
                }
                None => {
                    // Click on empty space: no effect.
                }
            }
        }
        ActionType::Type => {
            let focused_on_field = state.focused_widget.is_some_and(|fid| {
                env.screen(state.screen_id)
                    .widgets
                    .iter()
                    .any(|w| w.widget_id == fid && w.kind == WidgetKind::Textfield)
            });
            if focused_on_field {
                next.typed_buffer = action.typed_text.clone().unwrap();
            }
        }
        ActionType::PressBack => {
            if let Some(t) = env.transition(state.screen_id, Nav::Back) {
                move_to(&mut next, t);
            }
        }
        ActionType::PressHome => {
            move_to(&mut next, env.home_screen);
        }
        ActionType::PressEnter => {
            if let Some(t) = env.transition(state.screen_id, Nav::Enter) {
                move_to(&mut next, t);
            }
        }
        ActionType::StatusTaskComplete => {
            next.done = true;
            next.succeeded = goal_satisfied(env, state);
        }
        ActionType::StatusTaskImpossible => {
            next.done = true;
            next.succeeded = false;
        }
        ActionType::ScrollDown => {
            let max = env.screen(state.screen_id).max_scroll;
            next.scroll_offset = (state.scroll_offset + 1).min(max);
        }
        ActionType::ScrollUp => {
            next.scroll_offset = state.scroll_offset.saturating_sub(1);
        }
        ActionType::ScrollLeft | ActionType::ScrollRight => {
            // No horizontal layout model; these are no-ops.
        }
    }

    next.history.push(action.clone());
    let k = env.history_k;
    if next.history.len() > k {
        let drop = next.history.len() - k;
        next.history.drain(..drop);
    }

    let done = next.done;
    Ok(StepOutcome { state: next, reward, done, hijack: hijack_event })
}

fn move_to(state: &mut State, screen: u32) {
    state.screen_id = screen;
    state.scroll_offset = 0;
    state.focused_widget = None;
}

/// Exhaustive, deterministic, duplicate-free enumeration of reachable
/// states across all tasks, identified by their dynamics-relevant key.
/// Histories on returned states are the shortest template paths that reach
/// each key, truncated to `history_k`.
pub fn enumerate_states(env: &EnvSpec, cap: usize) -> Result<Vec<State>, EnvError> {
    let oracle = Oracle::build(env);
    let mut out = Vec::new();
    for task in &env.tasks {
        let states = oracle.reachable_states(env, &task.task_id);
        out.extend(states);
        if out.len() > cap {
            return Err(EnvError::CapExceeded { cap });
        }
    }
    Ok(out)
}

/// Convenience: fresh seeded rng for an episode, derived from a run seed
/// and an episode label. Deterministic.
pub fn episode_stream(seed: u64, label: &str) -> RandomStream {
    RandomStream::seeded(crate::util::derive_seed(seed, label))
}

/// Number of environment steps taken so far in this process.
pub fn step_call_count() -> u64 {
    STEP_CALLS.load(Ordering::Relaxed)
}
