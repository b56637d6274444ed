//! Discrete action templates and offline policy optimization against a
//! frozen value model (PPO-style clipped updates, behavior cloning, and the
//! exact greedy policy used by the theory module).

mod ppo;

pub use ppo::{
    build_samples, grad_check_ppo, greedy_policy_from_q, ppo_objective, ppo_update,
    probs_are_valid, surrogate_value_exact, surrogate_value_mc, train_bc, train_policy,
    DiagnosticsRow, PolicyError, PpoConfig, PpoDiagnostics, StateSamples, TrainPolicyReport,
};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{Action, ActionType, EnvSpec, Oracle, State};
use crate::util::{content_hash_hex, f64s_from_le_bytes, f64s_to_le_bytes};
use crate::vem::{click_cell, encode_state, state_cell_key, EncoderConfig, VemIoError};

pub const DEFAULT_TEMPLATE_GRID: usize = 7;

/// Discretized action space: the 9 payload-free types, then `G x G` click
/// cells for DUAL_POINT, then TYPE over the environment vocabulary. Index
/// and concrete action are in bijection given `(env, grid)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSpace {
    pub grid: usize,
    pub vocab: Vec<String>,
}

impl TemplateSpace {
    pub fn for_env(env: &EnvSpec) -> TemplateSpace {
        TemplateSpace { grid: DEFAULT_TEMPLATE_GRID, vocab: env.text_vocab.clone() }
    }

    pub fn with_grid(env: &EnvSpec, grid: usize) -> TemplateSpace {
        TemplateSpace { grid, vocab: env.text_vocab.clone() }
    }

    pub fn len(&self) -> usize {
        ActionType::PAYLOAD_FREE.len() + self.grid * self.grid + self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Action type of a template index.
    pub fn template_type(&self, idx: usize) -> ActionType {
        let free = ActionType::PAYLOAD_FREE.len();
        if idx < free {
            ActionType::PAYLOAD_FREE[idx]
        } else if idx < free + self.grid * self.grid {
            ActionType::DualPoint
        } else {
            ActionType::Type
        }
    }

    /// Concrete action for a template index; clicks land on cell centers.
    pub fn decode(&self, _env: &EnvSpec, idx: usize) -> Action {
        let free = ActionType::PAYLOAD_FREE.len();
        if idx < free {
            return Action::simple(ActionType::PAYLOAD_FREE[idx]);
        }
        let cells = self.grid * self.grid;
        if idx < free + cells {
            let cell = idx - free;
            let (row, col) = (cell / self.grid, cell % self.grid);
            let g = self.grid as f64;
            return Action::click((col as f64 + 0.5) / g, (row as f64 + 0.5) / g);
        }
        let wi = idx - free - cells;
        Action::type_text(self.vocab[wi].clone())
    }

    /// Template index of a concrete action, if it falls inside this space.
    pub fn encode_action(&self, _env: &EnvSpec, _state: &State, action: &Action) -> Option<usize> {
        let free = ActionType::PAYLOAD_FREE.len();
        match action.action_type {
            ActionType::DualPoint => {
                let p = action.click_point?;
                if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                    return None;
                }
                Some(free + click_cell(p, self.grid))
            }
            ActionType::Type => {
                let text = action.typed_text.as_deref()?;
                self.vocab
                    .iter()
                    .position(|w| w == text)
                    .map(|i| free + self.grid * self.grid + i)
            }
            t => ActionType::PAYLOAD_FREE.iter().position(|x| *x == t),
        }
    }

    /// Sorted template indices whose decoded actions are shortest-path
    /// optimal at `state`. Exact: every template is checked.
    pub fn optimal_template_set(&self, env: &EnvSpec, oracle: &Oracle, state: &State) -> Vec<usize> {
        (0..self.len())
            .filter(|i| oracle.is_optimal(env, state, &self.decode(env, *i)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Tabular,
    Linear,
    Mlp,
    Greedy,
}

/// Softmax policy over templates. `Greedy` is the exact point-mass policy
/// produced by [`greedy_policy_from_q`]; the other kinds are trainable and
/// keep every probability strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyParams {
    Tabular {
        n: usize,
        /// state cell key -> logits; absent keys mean uniform.
        logits: BTreeMap<u64, Vec<f64>>,
    },
    Linear {
        n: usize,
        dim: usize,
        encoder: EncoderConfig,
        /// n x dim row-major.
        w: Vec<f64>,
        b: Vec<f64>,
    },
    Mlp {
        n: usize,
        dim: usize,
        hidden: usize,
        encoder: EncoderConfig,
        w1: Vec<f64>,
        b1: Vec<f64>,
        /// n x hidden row-major.
        w2: Vec<f64>,
        b2: Vec<f64>,
    },
    Greedy {
        n: usize,
        /// sim state key -> chosen template; absent keys mean uniform.
        choice: BTreeMap<u64, u32>,
    },
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl PolicyParams {
    pub fn kind(&self) -> PolicyKind {
        match self {
            PolicyParams::Tabular { .. } => PolicyKind::Tabular,
            PolicyParams::Linear { .. } => PolicyKind::Linear,
            PolicyParams::Mlp { .. } => PolicyKind::Mlp,
            PolicyParams::Greedy { .. } => PolicyKind::Greedy,
        }
    }

    pub fn n_templates(&self) -> usize {
        match self {
            PolicyParams::Tabular { n, .. }
            | PolicyParams::Linear { n, .. }
            | PolicyParams::Mlp { n, .. }
            | PolicyParams::Greedy { n, .. } => *n,
        }
    }

    pub fn uniform_tabular(n: usize) -> PolicyParams {
        PolicyParams::Tabular { n, logits: BTreeMap::new() }
    }

    pub fn zero_linear(n: usize, env: &EnvSpec, encoder: EncoderConfig) -> PolicyParams {
        let dim = encode_state(env, &probe_state(env), &encoder).len();
        PolicyParams::Linear { n, dim, encoder, w: vec![0.0; n * dim], b: vec![0.0; n] }
    }

    pub fn zero_mlp(
        n: usize,
        hidden: usize,
        env: &EnvSpec,
        encoder: EncoderConfig,
        seed: u64,
    ) -> PolicyParams {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let dim = encode_state(env, &probe_state(env), &encoder).len();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let scale = (1.0 / dim as f64).sqrt();
        let w1 = (0..hidden * dim)
            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
            .collect();
        PolicyParams::Mlp {
            n,
            dim,
            hidden,
            encoder,
            w1,
            b1: vec![0.0; hidden],
            // Zero output weights: the initial distribution is exactly uniform.
            w2: vec![0.0; n * hidden],
            b2: vec![0.0; n],
        }
    }

    /// Raw logits at a state (softmax kinds only).
    pub fn logits(&self, env: &EnvSpec, state: &State) -> Vec<f64> {
        match self {
            PolicyParams::Tabular { n, logits } => {
                let key = state_cell_key(env, state);
                logits.get(&key).cloned().unwrap_or_else(|| vec![0.0; *n])
            }
            PolicyParams::Linear { n, dim, encoder, w, b } => {
                let x = encode_state(env, state, encoder);
                debug_assert_eq!(x.len(), *dim);
                (0..*n)
                    .map(|k| {
                        b[k] + w[k * dim..(k + 1) * dim]
                            .iter()
                            .zip(&x)
                            .map(|(wi, xi)| wi * xi)
                            .sum::<f64>()
                    })
                    .collect()
            }
            PolicyParams::Mlp { n, dim, hidden, encoder, w1, b1, w2, b2 } => {
                let x = encode_state(env, state, encoder);
                debug_assert_eq!(x.len(), *dim);
                let acts: Vec<f64> = (0..*hidden)
                    .map(|h| {
                        (b1[h]
                            + w1[h * dim..(h + 1) * dim]
                                .iter()
                                .zip(&x)
                                .map(|(wi, xi)| wi * xi)
                                .sum::<f64>())
                        .tanh()
                    })
                    .collect();
                (0..*n)
                    .map(|k| {
                        b2[k]
                            + w2[k * hidden..(k + 1) * hidden]
                                .iter()
                                .zip(&acts)
                                .map(|(wi, ai)| wi * ai)
                                .sum::<f64>()
                    })
                    .collect()
            }
            PolicyParams::Greedy { .. } => panic!("greedy policies have no logits"),
        }
    }

    /// Distribution over templates at a state. Sums to 1 within 1e-9.
    pub fn probs(&self, env: &EnvSpec, state: &State) -> Vec<f64> {
        match self {
            PolicyParams::Greedy { n, choice } => {
                let key = crate::vem::sim_state_key(env, state);
                match choice.get(&key) {
                    Some(idx) => {
                        let mut p = vec![0.0; *n];
                        p[*idx as usize] = 1.0;
                        p
                    }
                    None => vec![1.0 / *n as f64; *n],
                }
            }
            _ => softmax(&self.logits(env, state)),
        }
    }

    /// Greedy template at a state, ties broken by lowest index.
    pub fn argmax(&self, env: &EnvSpec, state: &State) -> usize {
        let p = self.probs(env, state);
        let mut best = 0;
        for (i, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = i;
            }
        }
        best
    }

    fn param_block(&self) -> Vec<f64> {
        match self {
            PolicyParams::Tabular { logits, .. } => {
                logits.values().flatten().copied().collect()
            }
            PolicyParams::Linear { w, b, .. } => {
                let mut p = w.clone();
                p.extend_from_slice(b);
                p
            }
            PolicyParams::Mlp { w1, b1, w2, b2, .. } => {
                let mut p = w1.clone();
                p.extend_from_slice(b1);
                p.extend_from_slice(w2);
                p.extend_from_slice(b2);
                p
            }
            PolicyParams::Greedy { choice, .. } => {
                choice.values().map(|v| f64::from(*v)).collect()
            }
        }
    }

    /// Content hash of the serialized parameter block.
    pub fn content_hash(&self) -> String {
        content_hash_hex(&f64s_to_le_bytes(&self.param_block()))
    }

    pub fn save(&self, path: &Path) -> Result<(), VemIoError> {
        let block = f64s_to_le_bytes(&self.param_block());
        let header = PolicyHeader {
            kind: self.kind(),
            n: self.n_templates(),
            dim: match self {
                PolicyParams::Linear { dim, .. } | PolicyParams::Mlp { dim, .. } => *dim,
                _ => 0,
            },
            hidden: match self {
                PolicyParams::Mlp { hidden, .. } => *hidden,
                _ => 0,
            },
            encoder: match self {
                PolicyParams::Linear { encoder, .. } | PolicyParams::Mlp { encoder, .. } => {
                    Some(encoder.clone())
                }
                _ => None,
            },
            state_keys: match self {
                PolicyParams::Tabular { logits, .. } => logits.keys().copied().collect(),
                PolicyParams::Greedy { choice, .. } => choice.keys().copied().collect(),
                _ => Vec::new(),
            },
            content_hash: content_hash_hex(&block),
        };
        let mut bytes =
            serde_json::to_vec(&header).map_err(|e| VemIoError::Malformed(e.to_string()))?;
        bytes.push(b'\n');
        bytes.extend_from_slice(&block);
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PolicyParams, VemIoError> {
        let bytes = fs::read(path)?;
        let nl = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| VemIoError::Malformed("missing header newline".into()))?;
        let header: PolicyHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| VemIoError::Malformed(e.to_string()))?;
        let raw = &bytes[nl + 1..];
        if content_hash_hex(raw) != header.content_hash {
            return Err(VemIoError::Malformed("content hash mismatch".into()));
        }
        let block = f64s_from_le_bytes(raw)
            .ok_or_else(|| VemIoError::Malformed("parameter block not 8-byte aligned".into()))?;
        let n = header.n;
        Ok(match header.kind {
            PolicyKind::Tabular => {
                if block.len() != header.state_keys.len() * n {
                    return Err(VemIoError::Malformed("tabular block size mismatch".into()));
                }
                let logits = header
                    .state_keys
                    .iter()
                    .zip(block.chunks_exact(n.max(1)))
                    .map(|(k, l)| (*k, l.to_vec()))
                    .collect();
                PolicyParams::Tabular { n, logits }
            }
            PolicyKind::Linear => {
                let dim = header.dim;
                if block.len() != n * dim + n {
                    return Err(VemIoError::Malformed("linear block size mismatch".into()));
                }
                let encoder = header
                    .encoder
                    .ok_or_else(|| VemIoError::Malformed("missing encoder config".into()))?;
                PolicyParams::Linear {
                    n,
                    dim,
                    encoder,
                    w: block[..n * dim].to_vec(),
                    b: block[n * dim..].to_vec(),
                }
            }
            PolicyKind::Mlp => {
                let (dim, h) = (header.dim, header.hidden);
                let expect = h * dim + h + n * h + n;
                if block.len() != expect {
                    return Err(VemIoError::Malformed("mlp block size mismatch".into()));
                }
                let encoder = header
                    .encoder
                    .ok_or_else(|| VemIoError::Malformed("missing encoder config".into()))?;
                PolicyParams::Mlp {
                    n,
                    dim,
                    hidden: h,
                    encoder,
                    w1: block[..h * dim].to_vec(),
                    b1: block[h * dim..h * dim + h].to_vec(),
                    w2: block[h * dim + h..h * dim + h + n * h].to_vec(),
                    b2: block[h * dim + h + n * h..].to_vec(),
                }
            }
            PolicyKind::Greedy => {
                if block.len() != header.state_keys.len() {
                    return Err(VemIoError::Malformed("greedy block size mismatch".into()));
                }
                let choice = header
                    .state_keys
                    .iter()
                    .zip(block)
                    .map(|(k, v)| (*k, v as u32))
                    .collect();
                PolicyParams::Greedy { n, choice }
            }
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PolicyHeader {
    kind: PolicyKind,
    n: usize,
    dim: usize,
    hidden: usize,
    encoder: Option<EncoderConfig>,
    state_keys: Vec<u64>,
    content_hash: String,
}

fn probe_state(env: &EnvSpec) -> State {
    State {
        task_id: env.tasks[0].task_id.clone(),
        screen_id: env.home_screen,
        history: Vec::new(),
        typed_buffer: String::new(),
        step_index: 0,
        done: false,
        succeeded: false,
        scroll_offset: 0,
        focused_widget: None,
    }
}

/// Anything that yields a template distribution at a state. The interface
/// cannot step the environment, which is how offline training stays offline.
pub trait ActionPolicy {
    fn action_probs(&self, env: &EnvSpec, ts: &TemplateSpace, state: &State) -> Vec<f64>;
}

impl ActionPolicy for PolicyParams {
    fn action_probs(&self, env: &EnvSpec, _ts: &TemplateSpace, state: &State) -> Vec<f64> {
        self.probs(env, state)
    }
}
