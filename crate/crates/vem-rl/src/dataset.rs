//! Offline trajectory collection and the JSONL record format.
//!
//! One JSON object per line, one line per step; lines of the same episode
//! share an `episode_index`. Every record carries `format_version` and the
//! hijack event its step consumed, so replay through the simulator is exact.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{self, Action, EnvSpec, Oracle, RandomStream, State};
use crate::policy::{ActionPolicy, TemplateSpace};
use crate::util::derive_seed;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported format_version {found} at line {line} (expected {expected})")]
    Version { line: usize, found: u32, expected: u32 },
    #[error("environment error: {0}")]
    Env(#[from] env::EnvError),
    #[error("need at least 2 distinct tasks to split, found {0}")]
    TooFewTasks(usize),
    #[error("train_fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
}

/// One `(s, a, r, s')` record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub format_version: u32,
    pub episode_index: u64,
    pub task_id: String,
    pub instruction: String,
    pub step_index: u32,
    pub screen_id: u32,
    pub typed_buffer: String,
    #[serde(default)]
    pub scroll_offset: u8,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub focused_widget: Option<u32>,
    pub history: Vec<Action>,
    pub action_type: crate::env::ActionType,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub click_point: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub typed_text: Option<String>,
    pub reward: u8,
    pub next_screen_id: u32,
    /// Hijack event consumed by this step (`null` = none).
    pub rng_trace: Option<u32>,
    /// Set on every line of an episode once its outcome is known.
    pub terminal_succeeded: bool,
}

impl StepRecord {
    pub fn action(&self) -> Action {
        Action {
            action_type: self.action_type,
            click_point: self.click_point,
            typed_text: self.typed_text.clone(),
        }
    }

    /// Reconstructs the pre-action simulator state this record was taken in.
    pub fn state(&self) -> State {
        State {
            task_id: self.task_id.clone(),
            screen_id: self.screen_id,
            history: self.history.clone(),
            typed_buffer: self.typed_buffer.clone(),
            step_index: self.step_index,
            done: false,
            succeeded: false,
            scroll_offset: self.scroll_offset,
            focused_widget: self.focused_widget,
        }
    }

    /// Stable identifier of this step within a dataset.
    pub fn step_key(&self) -> String {
        format!("ep{}:s{}", self.episode_index, self.step_index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_index: u64,
    pub task_id: String,
    pub instruction: String,
    pub steps: Vec<StepRecord>,
    pub terminal_succeeded: bool,
}

/// The behavior-policy family used for offline collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BehaviorPolicyConfig {
    /// Uniform over the shortest-path optimal template set at each state.
    ScriptedOptimal,
    /// With probability `1 - epsilon` scripted-optimal, else uniform over
    /// the full template space. Per step.
    EpsilonScripted { epsilon: f64 },
    /// Uniform over the full template space.
    UniformRandom,
    /// Per-episode draw among components; weights must sum to 1.
    Mixture { components: Vec<(BehaviorPolicyConfig, f64)> },
}

impl BehaviorPolicyConfig {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            BehaviorPolicyConfig::EpsilonScripted { epsilon } => {
                if !(0.0..=1.0).contains(epsilon) {
                    return Err(format!("epsilon out of [0,1]: {epsilon}"));
                }
            }
            BehaviorPolicyConfig::Mixture { components } => {
                let total: f64 = components.iter().map(|(_, w)| w).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(format!("mixture weights sum to {total}, expected 1"));
                }
                for (c, _) in components {
                    c.validate()?;
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Behavior policy bound to an environment and oracle; exposes exact
/// per-state template probabilities for the theory module.
pub struct BehaviorPolicy<'a> {
    pub env: &'a EnvSpec,
    pub oracle: &'a Oracle,
    pub config: BehaviorPolicyConfig,
}

impl BehaviorPolicy<'_> {
    fn component_probs(
        &self,
        cfg: &BehaviorPolicyConfig,
        ts: &TemplateSpace,
        state: &State,
    ) -> Vec<f64> {
        let n = ts.len();
        match cfg {
            BehaviorPolicyConfig::ScriptedOptimal => {
                let optimal = ts.optimal_template_set(self.env, self.oracle, state);
                let mut probs = vec![0.0; n];
                if optimal.is_empty() {
                    // No path to goal: fall back to uniform so the
                    // distribution stays valid.
                    probs.iter_mut().for_each(|p| *p = 1.0 / n as f64);
                } else {
                    let w = 1.0 / optimal.len() as f64;
                    for idx in optimal {
                        probs[idx] = w;
                    }
                }
                probs
            }
            BehaviorPolicyConfig::EpsilonScripted { epsilon } => {
                let scripted =
                    self.component_probs(&BehaviorPolicyConfig::ScriptedOptimal, ts, state);
                scripted
                    .into_iter()
                    .map(|p| (1.0 - epsilon) * p + epsilon / n as f64)
                    .collect()
            }
            BehaviorPolicyConfig::UniformRandom => vec![1.0 / n as f64; n],
            BehaviorPolicyConfig::Mixture { components } => {
                let mut probs = vec![0.0; n];
                for (c, w) in components {
                    let sub = self.component_probs(c, ts, state);
                    for (p, s) in probs.iter_mut().zip(sub) {
                        *p += w * s;
                    }
                }
                probs
            }
        }
    }
}

impl ActionPolicy for BehaviorPolicy<'_> {
    fn action_probs(&self, _env: &EnvSpec, ts: &TemplateSpace, state: &State) -> Vec<f64> {
        self.component_probs(&self.config, ts, state)
    }
}

/// Rolls out `n_episodes` under the behavior policy. Episodes cycle through
/// the task list; each owns an independent derived rng stream, so output is
/// a pure function of `(env, behavior, n_episodes, seed)`.
pub fn collect(
    env: &EnvSpec,
    oracle: &Oracle,
    behavior: &BehaviorPolicyConfig,
    n_episodes: u64,
    seed: u64,
) -> Result<Vec<Trajectory>, DatasetError> {
    behavior
        .validate()
        .map_err(|m| DatasetError::Parse { line: 0, message: m })?;
    let ts = TemplateSpace::for_env(env);
    let mut out = Vec::with_capacity(n_episodes as usize);
    for ep in 0..n_episodes {
        let task = &env.tasks[(ep % env.tasks.len() as u64) as usize];
        let mut policy_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("behavior-{ep}")));
        let mut stream = RandomStream::seeded(derive_seed(seed, &format!("env-{ep}")));

        // Per-episode component resolution for mixtures.
        let component = resolve_component(behavior, &mut policy_rng);
        let policy = BehaviorPolicy { env, oracle, config: component };

        let mut state = env::reset(env, &task.task_id)?;
        let mut steps = Vec::new();
        let mut succeeded = false;
        for _ in 0..task.max_steps {
            let probs = policy.action_probs(env, &ts, &state);
            let dist = WeightedIndex::new(&probs).expect("valid distribution");
            let template = dist.sample(&mut policy_rng);
            let action = ts.decode(env, template);
            let outcome = env::step(env, &state, &action, oracle, &mut stream)?;
            steps.push(StepRecord {
                format_version: FORMAT_VERSION,
                episode_index: ep,
                task_id: task.task_id.clone(),
                instruction: task.instruction.clone(),
                step_index: state.step_index,
                screen_id: state.screen_id,
                typed_buffer: state.typed_buffer.clone(),
                scroll_offset: state.scroll_offset,
                focused_widget: state.focused_widget,
                history: state.history.clone(),
                action_type: action.action_type,
                click_point: action.click_point,
                typed_text: action.typed_text.clone(),
                reward: outcome.reward,
                next_screen_id: outcome.state.screen_id,
                rng_trace: outcome.hijack,
                terminal_succeeded: false,
            });
            state = outcome.state;
            if outcome.done {
                succeeded = state.succeeded;
                break;
            }
        }
        for s in &mut steps {
            s.terminal_succeeded = succeeded;
        }
        out.push(Trajectory {
            episode_index: ep,
            task_id: task.task_id.clone(),
            instruction: task.instruction.clone(),
            steps,
            terminal_succeeded: succeeded,
        });
    }
    Ok(out)
}

fn resolve_component(
    cfg: &BehaviorPolicyConfig,
    rng: &mut ChaCha8Rng,
) -> BehaviorPolicyConfig {
    match cfg {
        BehaviorPolicyConfig::Mixture { components } => {
            let weights: Vec<f64> = components.iter().map(|(_, w)| *w).collect();
            let dist = WeightedIndex::new(&weights).expect("valid weights");
            let idx = dist.sample(rng);
            resolve_component(&components[idx].0, rng)
        }
        other => {
            // Keep rng usage uniform across kinds so traces stay comparable.
            let _ = rng.gen::<u64>();
            other.clone()
        }
    }
}

pub fn write_jsonl(trajectories: &[Trajectory], path: &Path) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in trajectories {
        for s in &t.steps {
            serde_json::to_writer(&mut w, s).map_err(|e| DatasetError::Parse {
                line: 0,
                message: e.to_string(),
            })?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Trajectory>, DatasetError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records: Vec<StepRecord> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        if rec.format_version != FORMAT_VERSION {
            return Err(DatasetError::Version {
                line: i + 1,
                found: rec.format_version,
                expected: FORMAT_VERSION,
            });
        }
        records.push(rec);
    }
    Ok(group_records(records))
}

/// Groups step records into trajectories by episode index, preserving order.
pub fn group_records(records: Vec<StepRecord>) -> Vec<Trajectory> {
    let mut out: Vec<Trajectory> = Vec::new();
    for rec in records {
        match out.last_mut() {
            Some(t) if t.episode_index == rec.episode_index => {
                t.terminal_succeeded = rec.terminal_succeeded;
                t.steps.push(rec);
            }
            _ => out.push(Trajectory {
                episode_index: rec.episode_index,
                task_id: rec.task_id.clone(),
                instruction: rec.instruction.clone(),
                terminal_succeeded: rec.terminal_succeeded,
                steps: vec![rec],
            }),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub episodes: u64,
    pub steps: u64,
    /// ell = 0 steps, when labels are supplied.
    pub level1_count: u64,
    /// ell = 1 steps, when labels are supplied.
    pub level2_count: u64,
}

/// Exact counts over a dataset; label counts come from an optional parallel
/// label sequence (ell per step, dataset order).
pub fn stats(trajectories: &[Trajectory], labels: Option<&[u8]>) -> Manifest {
    let episodes = trajectories.len() as u64;
    let steps: u64 = trajectories.iter().map(|t| t.steps.len() as u64).sum();
    let (mut l1, mut l2) = (0u64, 0u64);
    if let Some(ells) = labels {
        for ell in ells {
            if *ell == 0 {
                l1 += 1;
            } else {
                l2 += 1;
            }
        }
    }
    Manifest { episodes, steps, level1_count: l1, level2_count: l2 }
}

/// Partitions trajectories by task so no task appears in both splits.
pub fn split(
    trajectories: &[Trajectory],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<Trajectory>, Vec<Trajectory>), DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::BadFraction(train_fraction));
    }
    let tasks: BTreeSet<String> =
        trajectories.iter().map(|t| t.task_id.clone()).collect();
    if tasks.len() < 2 {
        return Err(DatasetError::TooFewTasks(tasks.len()));
    }
    let mut task_list: Vec<String> = tasks.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split"));
    // Fisher-Yates over the sorted task list.
    for i in (1..task_list.len()).rev() {
        let j = rng.gen_range(0..=i);
        task_list.swap(i, j);
    }
    let n_train = ((task_list.len() as f64) * train_fraction).round() as usize;
    let n_train = n_train.clamp(1, task_list.len() - 1);
    let train_tasks: BTreeSet<&String> = task_list[..n_train].iter().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for t in trajectories {
        if train_tasks.contains(&t.task_id) {
            train.push(t.clone());
        } else {
            test.push(t.clone());
        }
    }
    Ok((train, test))
}

/// Fraction of enumerable (state, template) pairs present in the dataset.
pub fn coverage(
    env: &EnvSpec,
    trajectories: &[Trajectory],
    cap: usize,
) -> Result<f64, DatasetError> {
    let ts = TemplateSpace::for_env(env);
    let states = env::enumerate_states(env, cap)?;
    let total: usize = states.iter().filter(|s| !s.done).count() * ts.len();
    if total == 0 {
        return Ok(0.0);
    }
    let mut seen = BTreeSet::new();
    for t in trajectories {
        for s in &t.steps {
            if let Some(idx) = ts.encode_action(env, &s.state(), &s.action()) {
                let key = crate::vem::state_cell_key(env, &s.state());
                seen.insert((key, idx));
            }
        }
    }
    Ok(seen.len() as f64 / total as f64)
}
