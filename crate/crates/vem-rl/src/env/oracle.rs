//! Shortest-path optimality oracle over the finite, dynamics-relevant state
//! space of one environment.
//!
//! The Markov key of a state is `(screen, scroll, typed class, focus, done,
//! succeeded)` per task; interaction history does not change the dynamics
//! and is kept on [`State`] only for records and features.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{
    Action, ActionType, EnvSpec, Nav, State, Task, WidgetKind,
};

/// Relation of the typed buffer to the task's expected text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TypedClass {
    Empty,
    Match,
    Other,
}

/// Dynamics-relevant projection of a [`State`], per task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SimKey {
    pub screen: u32,
    pub scroll: u8,
    pub typed: TypedClass,
    pub focus: Option<u32>,
    pub done: bool,
    pub succeeded: bool,
}

impl SimKey {
    pub fn of_state(task: &Task, state: &State) -> SimKey {
        SimKey {
            screen: state.screen_id,
            scroll: state.scroll_offset,
            typed: typed_class(task, &state.typed_buffer),
            focus: state.focused_widget,
            done: state.done,
            succeeded: state.succeeded,
        }
    }
}

pub fn typed_class(task: &Task, buffer: &str) -> TypedClass {
    if buffer.is_empty() {
        TypedClass::Empty
    } else if task.goal.requires_text.as_deref() == Some(buffer) {
        TypedClass::Match
    } else {
        TypedClass::Other
    }
}

/// Abstract action used for graph construction; maps 1:1 onto canonical
/// concrete actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateAction {
    Simple(ActionType),
    Click(u32),
    TypeWord(usize),
}

struct TaskOracle {
    /// Minimum number of actions (including the final STATUS_TASK_COMPLETE)
    /// to reach terminal success, for every reachable non-done key.
    dist: HashMap<SimKey, u32>,
    /// Reachable keys paired with a shortest representative action path.
    reachable: Vec<(SimKey, Vec<Action>)>,
}

/// Per-environment optimality oracle. Build once, share freely.
pub struct Oracle {
    tasks: HashMap<String, TaskOracle>,
}

impl Oracle {
    pub fn build(env: &EnvSpec) -> Oracle {
        let mut tasks = HashMap::new();
        for task in &env.tasks {
            tasks.insert(task.task_id.clone(), build_task_oracle(env, task));
        }
        Oracle { tasks }
    }

    fn task_oracle(&self, task_id: &str) -> &TaskOracle {
        self.tasks
            .get(task_id)
            .unwrap_or_else(|| panic!("oracle missing task {task_id}"))
    }

    /// Steps-to-success for a key, if the goal is reachable from it.
    pub fn distance(&self, task_id: &str, key: &SimKey) -> Option<u32> {
        self.task_oracle(task_id).dist.get(key).copied()
    }

    /// Whether `action` lies on a shortest path to goal satisfaction from
    /// `state`. On goal-satisfied states only STATUS_TASK_COMPLETE is
    /// optimal.
    pub fn is_optimal(&self, env: &EnvSpec, state: &State, action: &Action) -> bool {
        if state.done || action.validate().is_err() {
            return false;
        }
        let task = match env.task(&state.task_id) {
            Ok(t) => t,
            Err(_) => return false,
        };
        let key = SimKey::of_state(task, state);
        if goal_key_satisfied(env, task, &key) {
            return action.action_type == ActionType::StatusTaskComplete;
        }
        let here = match self.distance(&state.task_id, &key) {
            Some(d) => d,
            None => return false,
        };
        let cand = match resolve_concrete(env, &key, action) {
            Some(c) => c,
            None => return false,
        };
        let next = apply_intended(env, task, &key, &cand);
        if next.done {
            return false;
        }
        match self.distance(&state.task_id, &next) {
            Some(d_next) => 1 + d_next == here,
            None => false,
        }
    }

    /// The full set of canonical optimal actions at `state`: clicks at
    /// widget centers, TYPE over the env vocabulary, and the payload-free
    /// actions, filtered by shortest-path membership.
    pub fn optimal_actions(&self, env: &EnvSpec, state: &State) -> Vec<Action> {
        let task = match env.task(&state.task_id) {
            Ok(t) => t,
            Err(_) => return Vec::new(),
        };
        if state.done {
            return Vec::new();
        }
        let key = SimKey::of_state(task, state);
        candidate_actions(env, &key)
            .into_iter()
            .map(|c| concrete_action(env, &key, &c))
            .filter(|a| self.is_optimal(env, state, a))
            .collect()
    }

    /// Reachable states for one task, BFS order, one per key, with a
    /// shortest representative history (truncated to `history_k`).
    pub fn reachable_states(&self, env: &EnvSpec, task_id: &str) -> Vec<State> {
        let task = env.task(task_id).expect("task exists");
        self.task_oracle(task_id)
            .reachable
            .iter()
            .map(|(key, path)| state_from_key(env, task, key, path))
            .collect()
    }
}

fn goal_key_satisfied(_env: &EnvSpec, task: &Task, key: &SimKey) -> bool {
    if key.done || key.screen != task.goal.screen {
        return false;
    }
    match task.goal.requires_text {
        Some(_) => key.typed == TypedClass::Match,
        None => true,
    }
}

/// All candidate actions available at a key, in a fixed deterministic order:
/// payload-free, then clicks by widget id, then TYPE by vocabulary index.
pub fn candidate_actions(env: &EnvSpec, key: &SimKey) -> Vec<CandidateAction> {
    let mut out: Vec<CandidateAction> = ActionType::PAYLOAD_FREE
        .iter()
        .map(|t| CandidateAction::Simple(*t))
        .collect();
    let screen = env.screen(key.screen);
    for w in &screen.widgets {
        if screen.widget_visible(w, key.scroll) {
            out.push(CandidateAction::Click(w.widget_id));
        }
    }
    let focused_on_field = key.focus.is_some_and(|fid| {
        screen
            .widgets
            .iter()
            .any(|w| w.widget_id == fid && w.kind == WidgetKind::Textfield)
    });
    if focused_on_field {
        for i in 0..env.text_vocab.len() {
            out.push(CandidateAction::TypeWord(i));
        }
    }
    out
}

/// Canonical concrete action for a candidate: clicks land on the widget
/// rect center.
pub fn concrete_action(env: &EnvSpec, key: &SimKey, cand: &CandidateAction) -> Action {
    match cand {
        CandidateAction::Simple(t) => Action::simple(*t),
        CandidateAction::Click(wid) => {
            let w = env
                .screen(key.screen)
                .widgets
                .iter()
                .find(|w| w.widget_id == *wid)
                .expect("widget exists");
            let [x, y] = w.rect.center();
            Action::click(x, y)
        }
        CandidateAction::TypeWord(i) => Action::type_text(env.text_vocab[*i].clone()),
    }
}

/// Resolves a concrete action back into candidate form under a key's screen
/// and scroll. Returns None when the action has no effect channel (e.g. a
/// click on empty space), which still yields a well-defined no-op candidate
/// in the intended dynamics: we model it as `None` and treat it as "stay".
pub fn resolve_concrete(env: &EnvSpec, key: &SimKey, action: &Action) -> Option<CandidateAction> {
    match action.action_type {
        ActionType::DualPoint => {
            let [x, y] = action.click_point?;
            env.widget_at(key.screen, key.scroll, x, y)
                .map(|w| CandidateAction::Click(w.widget_id))
        }
        ActionType::Type => {
            let text = action.typed_text.as_deref()?;
            env.text_vocab
                .iter()
                .position(|w| w == text)
                .map(CandidateAction::TypeWord)
        }
        t => Some(CandidateAction::Simple(t)),
    }
}

/// Deterministic intended transition (no distractor hijack).
pub fn apply_intended(env: &EnvSpec, task: &Task, key: &SimKey, cand: &CandidateAction) -> SimKey {
    let mut next = *key;
    match cand {
        CandidateAction::Click(wid) => {
            let screen = env.screen(key.screen);
            let w = screen
                .widgets
                .iter()
                .find(|w| w.widget_id == *wid)
                .expect("widget exists");
            if !screen.widget_visible(w, key.scroll) {
                return next;
            }
            match w.kind {
                WidgetKind::Textfield => {
                    next.focus = Some(w.widget_id);
                }
                _ => {
                    let target = env
                        .transition(key.screen, Nav::Click(w.widget_id))
                        .or(w.target);
                    if let Some(t) = target {
                        next = move_key(next, t);
                    }
                }
            }
        }
        CandidateAction::TypeWord(i) => {
            let screen = env.screen(key.screen);
            let focused_on_field = key.focus.is_some_and(|fid| {
                screen
                    .widgets
                    .iter()
                    .any(|w| w.widget_id == fid && w.kind == WidgetKind::Textfield)
            });
            if focused_on_field {
                next.typed = typed_class(task, &env.text_vocab[*i]);
            }
        }
        CandidateAction::Simple(t) => match t {
            ActionType::PressBack => {
                if let Some(tgt) = env.transition(key.screen, Nav::Back) {
                    next = move_key(next, tgt);
                }
            }
            ActionType::PressHome => {
                next = move_key(next, env.home_screen);
            }
            ActionType::PressEnter => {
                if let Some(tgt) = env.transition(key.screen, Nav::Enter) {
                    next = move_key(next, tgt);
                }
            }
            ActionType::StatusTaskComplete => {
                next.done = true;
                next.succeeded = goal_key_satisfied(env, task, key);
            }
            ActionType::StatusTaskImpossible => {
                next.done = true;
                next.succeeded = false;
            }
            ActionType::ScrollDown => {
                let max = env.screen(key.screen).max_scroll;
                next.scroll = (key.scroll + 1).min(max);
            }
            ActionType::ScrollUp => {
                next.scroll = key.scroll.saturating_sub(1);
            }
            ActionType::ScrollLeft | ActionType::ScrollRight => {}
            _ => unreachable!("payload-carrying types are not Simple"),
        },
    }
    next
}

fn move_key(mut key: SimKey, screen: u32) -> SimKey {
    key.screen = screen;
    key.scroll = 0;
    key.focus = None;
    key
}

/// Hijack-reachable ad keys from a click on a non-ad widget.
fn hijack_successors(env: &EnvSpec, key: &SimKey, cand: &CandidateAction) -> Vec<SimKey> {
    if env.distractor_prob <= 0.0 {
        return Vec::new();
    }
    if let CandidateAction::Click(wid) = cand {
        let screen = env.screen(key.screen);
        let w = screen.widgets.iter().find(|w| w.widget_id == *wid).unwrap();
        if screen.widget_visible(w, key.scroll) && w.kind != WidgetKind::Ad {
            return env
                .ad_screens()
                .into_iter()
                .map(|ad| move_key(*key, ad))
                .collect();
        }
    }
    Vec::new()
}

fn reset_key() -> SimKey {
    SimKey {
        screen: 0,
        scroll: 0,
        typed: TypedClass::Empty,
        focus: None,
        done: false,
        succeeded: false,
    }
}

fn build_task_oracle(env: &EnvSpec, task: &Task) -> TaskOracle {
    // Forward BFS over intended + hijack edges for reachability.
    let start = SimKey { screen: env.home_screen, ..reset_key() };
    let mut seen: HashMap<SimKey, Vec<Action>> = HashMap::new();
    let mut order: Vec<SimKey> = Vec::new();
    let mut queue = VecDeque::new();
    seen.insert(start, Vec::new());
    order.push(start);
    queue.push_back(start);
    while let Some(key) = queue.pop_front() {
        if key.done {
            continue;
        }
        let path = seen[&key].clone();
        for cand in candidate_actions(env, &key) {
            let mut nexts = vec![apply_intended(env, task, &key, &cand)];
            nexts.extend(hijack_successors(env, &key, &cand));
            for next in nexts {
                if !seen.contains_key(&next) {
                    let mut p = path.clone();
                    p.push(concrete_action(env, &key, &cand));
                    seen.insert(next, p);
                    order.push(next);
                    queue.push_back(next);
                }
            }
        }
    }

    // Backward induction for steps-to-success over intended edges.
    let mut dist: HashMap<SimKey, u32> = HashMap::new();
    let mut frontier: Vec<SimKey> = Vec::new();
    for key in &order {
        if !key.done && goal_key_satisfied(env, task, key) {
            dist.insert(*key, 1);
            frontier.push(*key);
        }
    }
    // Predecessor adjacency over intended edges between reachable keys.
    let mut preds: HashMap<SimKey, Vec<SimKey>> = HashMap::new();
    for key in &order {
        if key.done {
            continue;
        }
        for cand in candidate_actions(env, key) {
            let next = apply_intended(env, task, key, &cand);
            if !next.done && next != *key {
                preds.entry(next).or_default().push(*key);
            }
        }
    }
    let mut d = 1;
    while !frontier.is_empty() {
        let mut next_frontier = Vec::new();
        for key in &frontier {
            if let Some(ps) = preds.get(key) {
                for p in ps {
                    if !dist.contains_key(p) && !goal_key_satisfied(env, task, p) {
                        dist.insert(*p, d + 1);
                        next_frontier.push(*p);
                    }
                }
            }
        }
        frontier = next_frontier;
        d += 1;
    }

    let reachable = order
        .into_iter()
        .map(|k| {
            let path = seen[&k].clone();
            (k, path)
        })
        .collect();
    TaskOracle { dist, reachable }
}

fn state_from_key(env: &EnvSpec, task: &Task, key: &SimKey, path: &[Action]) -> State {
    let k = env.history_k;
    let truncated: Vec<Action> = if path.len() > k {
        path[path.len() - k..].to_vec()
    } else {
        path.to_vec()
    };
    let typed_buffer = match key.typed {
        TypedClass::Empty => String::new(),
        TypedClass::Match => task.goal.requires_text.clone().unwrap_or_default(),
        TypedClass::Other => {
            // Any vocabulary word that is not the expected text.
            env.text_vocab
                .iter()
                .find(|w| task.goal.requires_text.as_deref() != Some(w.as_str()))
                .cloned()
                .unwrap_or_else(|| "?".to_string())
        }
    };
    State {
        task_id: task.task_id.clone(),
        screen_id: key.screen,
        history: truncated.clone(),
        typed_buffer,
        step_index: truncated.len() as u32,
        done: key.done,
        succeeded: key.succeeded,
        scroll_offset: key.scroll,
        focused_widget: key.focus,
    }
}
