//! PPO-style clipped policy updates against a frozen value model, plus
//! behavior cloning and the exact greedy policy. Entirely offline: the
//! environment is used only to decode templates, never stepped.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Trajectory;
use crate::env::{self, ActionType, EnvSpec, EnvError, State};
use crate::util::derive_seed;
use crate::vem::{encode_state, state_cell_key, EncoderConfig, FrozenValueModel};

use super::{PolicyParams, TemplateSpace};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("empty state batch")]
    EmptyBatch,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("update diverged at iteration {iteration} (non-finite {what})")]
    Diverged { iteration: usize, what: &'static str },
    #[error("support mask empty at state key {state_key}")]
    EmptySupport { state_key: u64 },
    #[error("greedy policies cannot be updated")]
    NotTrainable,
    #[error("environment error: {0}")]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    /// Sampled actions per state, m.
    pub actions_per_state: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub entropy_coef: f64,
    pub seed: u64,
    /// Feature config used for the frozen model's Q queries.
    pub encoder: EncoderConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_epsilon: 0.2,
            actions_per_state: 8,
            epochs: 5,
            batch_size: 32,
            learning_rate: 1e-3,
            entropy_coef: 0.01,
            seed: 0,
            encoder: EncoderConfig::default(),
        }
    }
}

impl PpoConfig {
    fn validate(&self) -> Result<(), PolicyError> {
        if self.clip_epsilon <= 0.0 {
            return Err(PolicyError::InvalidConfig("clip_epsilon must be > 0".into()));
        }
        if self.actions_per_state < 1 || self.batch_size < 1 {
            return Err(PolicyError::InvalidConfig(
                "actions_per_state and batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoDiagnostics {
    pub loss: f64,
    pub mean_advantage: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    /// Mean sampled Q over the batch, the Monte-Carlo J estimate.
    pub j_estimate: f64,
}

/// Exact J(pi) = mean over states of sum_a pi(a|s) Q(s,a).
pub fn surrogate_value_exact(
    policy: &PolicyParams,
    vem: &FrozenValueModel,
    env: &EnvSpec,
    ts: &TemplateSpace,
    states: &[State],
    encoder: &EncoderConfig,
) -> Result<f64, PolicyError> {
    if states.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let mut total = 0.0;
    for s in states {
        let probs = policy.probs(env, s);
        for (a, p) in probs.iter().enumerate() {
            if *p > 0.0 {
                total += p * vem.predict_sa(env, ts, s, a, encoder);
            }
        }
    }
    Ok(total / states.len() as f64)
}

/// Monte-Carlo J(pi) with m sampled actions per state.
pub fn surrogate_value_mc(
    policy: &PolicyParams,
    vem: &FrozenValueModel,
    env: &EnvSpec,
    ts: &TemplateSpace,
    states: &[State],
    encoder: &EncoderConfig,
    m: usize,
    seed: u64,
) -> Result<f64, PolicyError> {
    if states.is_empty() || m == 0 {
        return Err(PolicyError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for s in states {
        let probs = policy.probs(env, s);
        let dist = WeightedIndex::new(&probs).expect("valid distribution");
        for _ in 0..m {
            let a = dist.sample(&mut rng);
            total += vem.predict_sa(env, ts, s, a, encoder);
        }
    }
    Ok(total / (states.len() * m) as f64)
}

/// Per-state sampled material for one update: snapshot probabilities and m
/// `(template, advantage)` draws.
pub struct StateSamples {
    pub state: State,
    pub snap_probs: Vec<f64>,
    pub draws: Vec<(usize, f64)>,
    pub mean_q: f64,
}

pub fn build_samples(
    snapshot: &PolicyParams,
    vem: &FrozenValueModel,
    env: &EnvSpec,
    ts: &TemplateSpace,
    states: &[State],
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<StateSamples> {
    states
        .iter()
        .map(|s| {
            let snap_probs = snapshot.probs(env, s);
            let dist = WeightedIndex::new(&snap_probs).expect("valid distribution");
            let m = cfg.actions_per_state;
            let templates: Vec<usize> = (0..m).map(|_| dist.sample(rng)).collect();
            let qs: Vec<f64> = templates
                .iter()
                .map(|a| vem.predict_sa(env, ts, s, *a, &cfg.encoder))
                .collect();
            let baseline = qs.iter().sum::<f64>() / m as f64;
            let draws = templates
                .into_iter()
                .zip(qs.iter().map(|q| q - baseline))
                .collect();
            StateSamples { state: s.clone(), snap_probs, draws, mean_q: baseline }
        })
        .collect()
}

fn get_flat(policy: &PolicyParams) -> Vec<f64> {
    match policy {
        PolicyParams::Tabular { logits, .. } => logits.values().flatten().copied().collect(),
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
        PolicyParams::Greedy { .. } => panic!("greedy policies have no flat params"),
    }
}

fn set_flat(policy: &mut PolicyParams, p: &[f64]) {
    match policy {
        PolicyParams::Tabular { n, logits } => {
            for (chunk, l) in p.chunks_exact(*n).zip(logits.values_mut()) {
                l.copy_from_slice(chunk);
            }
        }
        PolicyParams::Linear { n, dim, w, b, .. } => {
            w.copy_from_slice(&p[..*n * *dim]);
            b.copy_from_slice(&p[*n * *dim..]);
        }
        PolicyParams::Mlp { n, dim, hidden, w1, b1, w2, b2, .. } => {
            let (d, h, n) = (*dim, *hidden, *n);
            w1.copy_from_slice(&p[..h * d]);
            b1.copy_from_slice(&p[h * d..h * d + h]);
            w2.copy_from_slice(&p[h * d + h..h * d + h + n * h]);
            b2.copy_from_slice(&p[h * d + h + n * h..]);
        }
        PolicyParams::Greedy { .. } => panic!("greedy policies have no flat params"),
    }
}

/// Inserts zero-logit rows for every batch state so tabular gradients have a
/// stable flat layout. No-op for parametric kinds.
fn materialize_keys(policy: &mut PolicyParams, env: &EnvSpec, states: &[State]) {
    if let PolicyParams::Tabular { n, logits } = policy {
        for s in states {
            logits.entry(state_cell_key(env, s)).or_insert_with(|| vec![0.0; *n]);
        }
    }
}

/// Clipped-surrogate objective (ascent direction positive) plus entropy
/// bonus, with clip fraction and mean entropy, over prepared samples.
pub fn ppo_objective(
    policy: &PolicyParams,
    env: &EnvSpec,
    samples: &[StateSamples],
    clip: f64,
    entropy_coef: f64,
) -> (f64, f64, f64) {
    let mut obj = 0.0;
    let mut clipped = 0usize;
    let mut draws_total = 0usize;
    let mut entropy_sum = 0.0;
    for ss in samples {
        let probs = policy.probs(env, &ss.state);
        let h: f64 = -probs
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>();
        entropy_sum += h;
        for (a, adv) in &ss.draws {
            let ratio = probs[*a] / ss.snap_probs[*a];
            let unclipped = ratio * adv;
            let clipped_term = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
            if clipped_term < unclipped {
                clipped += 1;
            }
            obj += unclipped.min(clipped_term);
            draws_total += 1;
        }
    }
    let n_states = samples.len().max(1) as f64;
    let mean_entropy = entropy_sum / n_states;
    let objective = obj / draws_total.max(1) as f64 + entropy_coef * mean_entropy;
    (objective, clipped as f64 / draws_total.max(1) as f64, mean_entropy)
}

/// Analytic gradient of [`ppo_objective`] in the flat layout of `get_flat`.
/// The clipped branch contributes zero, matching the min envelope a.e.
pub fn ppo_gradient(
    policy: &PolicyParams,
    env: &EnvSpec,
    samples: &[StateSamples],
    clip: f64,
    entropy_coef: f64,
) -> Vec<f64> {
    let n = policy.n_templates();
    let mut grad = vec![0.0; get_flat(policy).len()];
    let draws_total: usize = samples.iter().map(|s| s.draws.len()).sum();
    let n_states = samples.len().max(1) as f64;

    // Tabular flat layout: key order of the BTreeMap.
    let key_offsets: Option<BTreeMap<u64, usize>> = match policy {
        PolicyParams::Tabular { logits, .. } => Some(
            logits.keys().enumerate().map(|(i, k)| (*k, i * n)).collect(),
        ),
        _ => None,
    };

    for ss in samples {
        let probs = policy.probs(env, &ss.state);
        let mut gz = vec![0.0; n];

        for (a, adv) in &ss.draws {
            let ratio = probs[*a] / ss.snap_probs[*a];
            let unclipped = ratio * adv;
            let clipped_term = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
            if unclipped <= clipped_term {
                // Active branch: d(ratio*A)/dz_k = A * ratio * (1{k=a} - pi_k).
                let c = adv * ratio / draws_total.max(1) as f64;
                for (k, gzk) in gz.iter_mut().enumerate() {
                    let ind = if k == *a { 1.0 } else { 0.0 };
                    *gzk += c * (ind - probs[k]);
                }
            }
        }

        if entropy_coef != 0.0 {
            let h: f64 = -probs
                .iter()
                .filter(|p| **p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>();
            for (k, gzk) in gz.iter_mut().enumerate() {
                let logp = if probs[k] > 0.0 { probs[k].ln() } else { 0.0 };
                *gzk += entropy_coef * (-probs[k] * (logp + h)) / n_states;
            }
        }

        scatter_state_grad(policy, env, &ss.state, &gz, &mut grad, key_offsets.as_ref());
    }
    grad
}

fn scatter_state_grad(
    policy: &PolicyParams,
    env: &EnvSpec,
    state: &State,
    gz: &[f64],
    grad: &mut [f64],
    key_offsets: Option<&BTreeMap<u64, usize>>,
) {
    match policy {
        PolicyParams::Tabular { .. } => {
            let key = state_cell_key(env, state);
            let off = *key_offsets
                .expect("tabular offsets")
                .get(&key)
                .expect("batch keys materialized before update");
            for (k, g) in gz.iter().enumerate() {
                grad[off + k] += g;
            }
        }
        PolicyParams::Linear { n, dim, encoder, .. } => {
            let x = encode_state(env, state, encoder);
            let (n, d) = (*n, *dim);
            for (k, g) in gz.iter().enumerate() {
                for (j, xj) in x.iter().enumerate() {
                    grad[k * d + j] += g * xj;
                }
                grad[n * d + k] += g;
            }
        }
        PolicyParams::Mlp { n, dim, hidden, encoder, w1, b1, w2, .. } => {
            let x = encode_state(env, state, encoder);
            let (n, d, h) = (*n, *dim, *hidden);
            let acts: Vec<f64> = (0..h)
                .map(|i| {
                    (b1[i]
                        + w1[i * d..(i + 1) * d]
                            .iter()
                            .zip(&x)
                            .map(|(wi, xi)| wi * xi)
                            .sum::<f64>())
                    .tanh()
                })
                .collect();
            let (gw1, rest) = grad.split_at_mut(h * d);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(n * h);
            let mut da = vec![0.0; h];
            for (k, g) in gz.iter().enumerate() {
                gb2[k] += g;
                for i in 0..h {
                    gw2[k * h + i] += g * acts[i];
                    da[i] += g * w2[k * h + i];
                }
            }
            for i in 0..h {
                let di = da[i] * (1.0 - acts[i] * acts[i]);
                gb1[i] += di;
                for (j, xj) in x.iter().enumerate() {
                    gw1[i * d + j] += di * xj;
                }
            }
        }
        PolicyParams::Greedy { .. } => panic!("greedy policies are not trainable"),
    }
}

/// One clipped-surrogate ascent step against the frozen model.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    policy: &mut PolicyParams,
    snapshot: &PolicyParams,
    vem: &FrozenValueModel,
    env: &EnvSpec,
    ts: &TemplateSpace,
    state_batch: &[State],
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PpoDiagnostics, PolicyError> {
    cfg.validate()?;
    if state_batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    if matches!(policy, PolicyParams::Greedy { .. }) {
        return Err(PolicyError::NotTrainable);
    }
    materialize_keys(policy, env, state_batch);
    let samples = build_samples(snapshot, vem, env, ts, state_batch, cfg, rng);
    let (obj, clip_fraction, entropy) =
        ppo_objective(policy, env, &samples, cfg.clip_epsilon, cfg.entropy_coef);
    let grad = ppo_gradient(policy, env, &samples, cfg.clip_epsilon, cfg.entropy_coef);
    if !obj.is_finite() {
        return Err(PolicyError::Diverged { iteration: 0, what: "objective" });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(PolicyError::Diverged { iteration: 0, what: "gradient" });
    }
    let mut params = get_flat(policy);
    for (p, g) in params.iter_mut().zip(&grad) {
        *p += cfg.learning_rate * g;
    }
    set_flat(policy, &params);

    let n_draws: usize = samples.iter().map(|s| s.draws.len()).sum();
    let mean_advantage = samples
        .iter()
        .flat_map(|s| s.draws.iter().map(|(_, a)| *a))
        .sum::<f64>()
        / n_draws.max(1) as f64;
    let j_estimate =
        samples.iter().map(|s| s.mean_q).sum::<f64>() / samples.len() as f64;
    Ok(PpoDiagnostics { loss: -obj, mean_advantage, clip_fraction, entropy, j_estimate })
}

/// Directional finite-difference check of the surrogate gradient; returns
/// the maximum relative error over `trials` random directions.
pub fn grad_check_ppo(
    policy: &PolicyParams,
    env: &EnvSpec,
    samples: &[StateSamples],
    clip: f64,
    entropy_coef: f64,
    trials: usize,
    seed: u64,
) -> f64 {
    let h = 1e-5;
    let base = get_flat(policy);
    let grad = ppo_gradient(policy, env, samples, clip, entropy_coef);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let dir: Vec<f64> = (0..base.len()).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dir: Vec<f64> = dir.iter().map(|v| v / norm).collect();
        let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();

        let mut m = policy.clone();
        let plus: Vec<f64> = base.iter().zip(&dir).map(|(p, d)| p + h * d).collect();
        set_flat(&mut m, &plus);
        let lp = ppo_objective(&m, env, samples, clip, entropy_coef).0;
        let minus: Vec<f64> = base.iter().zip(&dir).map(|(p, d)| p - h * d).collect();
        set_flat(&mut m, &minus);
        let lm = ppo_objective(&m, env, samples, clip, entropy_coef).0;
        let numeric = (lp - lm) / (2.0 * h);

        let denom = analytic.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub iteration: usize,
    pub j_estimate: f64,
    pub loss: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    pub mean_advantage: f64,
    /// Fraction of batch states whose greedy action has each action type,
    /// in `ActionType::ALL` order.
    pub type_histogram: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPolicyReport {
    pub rows: Vec<DiagnosticsRow>,
    pub initial_j: f64,
    pub final_j: f64,
}

impl TrainPolicyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "iteration,j_estimate,loss,clip_fraction,entropy,mean_advantage",
        );
        for t in ActionType::ALL {
            s.push_str(&format!(",hist_{}", t.wire_name()));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}",
                r.iteration, r.j_estimate, r.loss, r.clip_fraction, r.entropy, r.mean_advantage
            ));
            for v in &r.type_histogram {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

fn type_histogram(policy: &PolicyParams, env: &EnvSpec, ts: &TemplateSpace, states: &[State]) -> Vec<f64> {
    let mut hist = vec![0.0; ActionType::ALL.len()];
    for s in states {
        let t = ts.template_type(policy.argmax(env, s));
        hist[t.index()] += 1.0;
    }
    let n = states.len().max(1) as f64;
    hist.iter_mut().for_each(|v| *v /= n);
    hist
}

/// Full offline PPO training over dataset states: epochs of shuffled
/// batches, behavior snapshot refreshed per epoch. Never steps the
/// environment.
pub fn train_policy(
    states: &[State],
    vem: &FrozenValueModel,
    env: &EnvSpec,
    ts: &TemplateSpace,
    init: PolicyParams,
    cfg: &PpoConfig,
) -> Result<(PolicyParams, TrainPolicyReport), PolicyError> {
    cfg.validate()?;
    if states.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let mut policy = init;
    materialize_keys(&mut policy, env, states);
    let initial_j =
        surrogate_value_exact(&policy, vem, env, ts, states, &cfg.encoder)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "ppo"));
    let mut order: Vec<usize> = (0..states.len()).collect();
    let mut rows = Vec::new();
    let mut iteration = 0usize;
    for _epoch in 0..cfg.epochs {
        let snapshot = policy.clone();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<State> = chunk.iter().map(|i| states[*i].clone()).collect();
            let diag =
                ppo_update(&mut policy, &snapshot, vem, env, ts, &batch, cfg, &mut rng)
                    .map_err(|e| match e {
                        PolicyError::Diverged { what, .. } => {
                            PolicyError::Diverged { iteration, what }
                        }
                        other => other,
                    })?;
            rows.push(DiagnosticsRow {
                iteration,
                j_estimate: diag.j_estimate,
                loss: diag.loss,
                clip_fraction: diag.clip_fraction,
                entropy: diag.entropy,
                mean_advantage: diag.mean_advantage,
                type_histogram: type_histogram(&policy, env, ts, &batch),
            });
            iteration += 1;
        }
    }
    let final_j = surrogate_value_exact(&policy, vem, env, ts, states, &cfg.encoder)?;
    Ok((policy, TrainPolicyReport { rows, initial_j, final_j }))
}

/// Exact greedy policy over the enumerable state space: a point mass on
/// argmax_a Q(s,a) per state, optionally restricted to a support mask
/// (sim state key -> allowed templates). Ties break to the lowest index.
pub fn greedy_policy_from_q(
    vem: &FrozenValueModel,
    env: &EnvSpec,
    ts: &TemplateSpace,
    encoder: &EncoderConfig,
    support: Option<&BTreeMap<u64, Vec<bool>>>,
    cap: usize,
) -> Result<PolicyParams, PolicyError> {
    let states = env::enumerate_states(env, cap)?;
    let n = ts.len();
    let mut choice = BTreeMap::new();
    for s in &states {
        if s.done {
            continue;
        }
        let key = crate::vem::sim_state_key(env, s);
        let allowed = support.and_then(|m| m.get(&key));
        let mut best: Option<(usize, f64)> = None;
        for a in 0..n {
            if let Some(mask) = allowed {
                if !mask.get(a).copied().unwrap_or(false) {
                    continue;
                }
            }
            let q = vem.predict_sa(env, ts, s, a, encoder);
            match best {
                Some((_, bq)) if q <= bq => {}
                _ => best = Some((a, q)),
            }
        }
        match best {
            Some((a, _)) => {
                choice.insert(key, a as u32);
            }
            None => return Err(PolicyError::EmptySupport { state_key: key }),
        }
    }
    Ok(PolicyParams::Greedy { n, choice })
}

/// Tabular behavior cloning: per-state template counts with Laplace
/// smoothing `alpha`, stored as log-count logits.
pub fn train_bc(
    env: &EnvSpec,
    ts: &TemplateSpace,
    trajectories: &[Trajectory],
    alpha: f64,
) -> PolicyParams {
    let n = ts.len();
    let mut counts: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for t in trajectories {
        for rec in &t.steps {
            let state = rec.state();
            if let Some(idx) = ts.encode_action(env, &state, &rec.action()) {
                let key = state_cell_key(env, &state);
                counts.entry(key).or_insert_with(|| vec![0.0; n])[idx] += 1.0;
            }
        }
    }
    let logits = counts
        .into_iter()
        .map(|(k, c)| (k, c.iter().map(|v| (v + alpha).ln()).collect()))
        .collect();
    PolicyParams::Tabular { n, logits }
}

/// Softmax-probability sanity helper used by property tests.
pub fn probs_are_valid(p: &[f64], tol: f64) -> bool {
    p.iter().all(|v| v.is_finite() && *v >= 0.0)
        && ((p.iter().sum::<f64>()) - 1.0).abs() <= tol
}
