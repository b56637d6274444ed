//! Dual evaluation: offline action matching against held-out reference
//! trajectories (teacher forcing), and online greedy rollouts with a step
//! cap.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Trajectory;
use crate::env::{self, Action, ActionType, EnvError, EnvSpec, Oracle};
use crate::policy::{ActionPolicy, TemplateSpace};
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty test set")]
    EmptyTestSet,
    #[error("no tasks to evaluate")]
    NoTasks,
    #[error("environment error: {0}")]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMatch {
    Exact,
    CaseInsensitive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    /// Euclidean threshold in normalized screen units.
    pub click_distance_threshold: f64,
    pub text_match: TextMatch,
    pub scroll_match_by_direction: bool,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            click_distance_threshold: 0.14,
            text_match: TextMatch::CaseInsensitive,
            scroll_match_by_direction: true,
        }
    }
}

/// Whether a predicted action matches a reference action. Types must agree;
/// clicks match within the distance threshold, TYPE by text equality,
/// scrolls by direction.
pub fn match_action(predicted: &Action, reference: &Action, cfg: &MatcherConfig) -> bool {
    if predicted.action_type != reference.action_type {
        return false;
    }
    match predicted.action_type {
        ActionType::DualPoint => {
            let (Some(p), Some(r)) = (predicted.click_point, reference.click_point) else {
                return false;
            };
            let d = ((p[0] - r[0]).powi(2) + (p[1] - r[1]).powi(2)).sqrt();
            d <= cfg.click_distance_threshold
        }
        ActionType::Type => {
            let (Some(p), Some(r)) = (&predicted.typed_text, &reference.typed_text) else {
                return false;
            };
            match cfg.text_match {
                TextMatch::Exact => p == r,
                TextMatch::CaseInsensitive => p.eq_ignore_ascii_case(r),
            }
        }
        // Scroll directions are distinct ActionTypes, so type equality
        // already matches by direction.
        _ => true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub episodes: u64,
    pub successes: u64,
    pub steps_matched: u64,
    pub steps_total: u64,
    pub step_lengths: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step_sr: f64,
    pub task_sr: f64,
    pub avg_step_length: f64,
    pub n_tasks: usize,
    pub per_task: Vec<TaskResult>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    /// One CSV row in the summary layout
    /// `method,domain,step_sr,task_sr,avg_step_length`.
    pub fn csv_row(&self, method: &str, domain: &str) -> String {
        format!(
            "{method},{domain},{:.4},{:.4},{:.4}",
            self.step_sr, self.task_sr, self.avg_step_length
        )
    }

    pub fn csv_header() -> &'static str {
        "method,domain,step_sr,task_sr,avg_step_length"
    }
}

/// Teacher-forced offline evaluation: the policy's greedy action at every
/// recorded state is matched against the reference action.
pub fn offline_eval(
    policy: &dyn ActionPolicy,
    env: &EnvSpec,
    ts: &TemplateSpace,
    test: &[Trajectory],
    matcher: &MatcherConfig,
) -> Result<EvalReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let mut per_task: Vec<TaskResult> = Vec::new();
    let mut matched_total = 0u64;
    let mut steps_total = 0u64;
    let mut tasks_matched = 0u64;
    for t in test {
        let mut all = true;
        let mut matched = 0u64;
        for rec in &t.steps {
            let state = rec.state();
            let probs = policy.action_probs(env, ts, &state);
            let greedy = argmax_low(&probs);
            let predicted = ts.decode(env, greedy);
            if match_action(&predicted, &rec.action(), matcher) {
                matched += 1;
            } else {
                all = false;
            }
        }
        matched_total += matched;
        steps_total += t.steps.len() as u64;
        if all && !t.steps.is_empty() {
            tasks_matched += 1;
        }
        let entry = per_task.iter_mut().find(|r| r.task_id == t.task_id);
        let r = match entry {
            Some(r) => r,
            None => {
                per_task.push(TaskResult {
                    task_id: t.task_id.clone(),
                    episodes: 0,
                    successes: 0,
                    steps_matched: 0,
                    steps_total: 0,
                    step_lengths: Vec::new(),
                });
                per_task.last_mut().unwrap()
            }
        };
        r.episodes += 1;
        r.steps_matched += matched;
        r.steps_total += t.steps.len() as u64;
        r.step_lengths.push(t.steps.len() as u32);
        if all && !t.steps.is_empty() {
            r.successes += 1;
        }
    }
    let n_eps: u64 = per_task.iter().map(|r| r.episodes).sum();
    let total_len: u64 = per_task
        .iter()
        .flat_map(|r| r.step_lengths.iter().map(|l| u64::from(*l)))
        .sum();
    Ok(EvalReport {
        step_sr: matched_total as f64 / steps_total.max(1) as f64,
        task_sr: tasks_matched as f64 / test.len() as f64,
        avg_step_length: total_len as f64 / n_eps.max(1) as f64,
        n_tasks: per_task.len(),
        per_task,
        warnings: Vec::new(),
    })
}

fn argmax_low(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in probs.iter().enumerate() {
        if *v > probs[best] {
            best = i;
        }
    }
    best
}

/// Online greedy rollouts: one episode per (task, seed), success judged by
/// the goal predicate on STATUS_TASK_COMPLETE within `max_steps`. Duplicate
/// tasks are dropped with a warning. Failed episodes count their full
/// length.
pub fn online_eval(
    policy: &dyn ActionPolicy,
    env: &EnvSpec,
    ts: &TemplateSpace,
    oracle: &Oracle,
    task_ids: &[String],
    max_steps: u32,
    seeds: &[u64],
) -> Result<EvalReport, EvalError> {
    let mut warnings = Vec::new();
    let mut seen = BTreeSet::new();
    let mut tasks = Vec::new();
    for t in task_ids {
        if seen.insert(t.clone()) {
            tasks.push(t.clone());
        } else {
            warnings.push(format!("duplicate task removed: {t}"));
        }
    }
    if tasks.is_empty() || seeds.is_empty() {
        return Err(EvalError::NoTasks);
    }
    let mut per_task = Vec::new();
    let mut successes_total = 0u64;
    let mut episodes_total = 0u64;
    let mut length_total = 0u64;
    for task_id in &tasks {
        let mut r = TaskResult {
            task_id: task_id.clone(),
            episodes: 0,
            successes: 0,
            steps_matched: 0,
            steps_total: 0,
            step_lengths: Vec::new(),
        };
        for seed in seeds {
            let mut stream =
                env::episode_stream(*seed, &format!("online-{task_id}"));
            let mut state = env::reset(env, task_id)?;
            let mut len = 0u32;
            let mut success = false;
            for _ in 0..max_steps {
                let probs = policy.action_probs(env, ts, &state);
                let action = ts.decode(env, argmax_low(&probs));
                let outcome = env::step(env, &state, &action, oracle, &mut stream)?;
                len += 1;
                state = outcome.state;
                if outcome.done {
                    success = state.succeeded;
                    break;
                }
            }
            r.episodes += 1;
            r.step_lengths.push(len);
            r.steps_total += u64::from(len);
            if success {
                r.successes += 1;
            }
            episodes_total += 1;
            length_total += u64::from(len);
            if success {
                successes_total += 1;
            }
        }
        per_task.push(r);
    }
    Ok(EvalReport {
        step_sr: successes_total as f64 / episodes_total as f64,
        task_sr: successes_total as f64 / episodes_total as f64,
        avg_step_length: length_total as f64 / episodes_total as f64,
        n_tasks: per_task.len(),
        per_task,
        warnings,
    })
}

/// Convenience: derives per-(seed, task) rollout streams identically to
/// `online_eval`, for independent re-rollout oracles in tests.
pub fn rollout_stream_seed(seed: u64, task_id: &str) -> u64 {
    derive_seed(seed, &format!("online-{task_id}"))
}
