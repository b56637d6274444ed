//! Exact solvers over the enumerable MDP: optimal Q, policy evaluation,
//! discounted occupancy, sup-norm model error, distribution shift, and the
//! empirical performance-bound check
//! `J(pi*) - J(pi_hat) <= c (epsilon + ||pi_hat - beta||)`.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Trajectory;
use crate::env::{
    self, apply_intended, resolve_concrete, ActionType, CandidateAction, EnvError, EnvSpec,
    Oracle, SimKey, State, WidgetKind,
};
use crate::policy::{ActionPolicy, PolicyParams, TemplateSpace};
use crate::util::derive_seed;
use crate::vem::{sim_state_key, EncoderConfig, FrozenValueModel};

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("environment error: {0}")]
    Env(#[from] EnvError),
    #[error("no exact Q entry for state key {state_key}, template {template}")]
    PairMissing { state_key: u64, template: u32 },
    #[error("value iteration did not converge within {0} sweeps")]
    NoConvergence(usize),
    #[error("empty suite")]
    EmptySuite,
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// One enumerated state of the product MDP (all tasks of one environment).
pub struct Node {
    pub state: State,
    /// `sim_state_key` of the state; unique per node.
    pub key: u64,
    pub done: bool,
}

/// Finite MDP over templates: per-node successor distributions and rewards,
/// mirroring the simulator's dynamics exactly (including distractor
/// hijacks). Done nodes are absorbing.
pub struct StateGraph {
    pub nodes: Vec<Node>,
    pub index: HashMap<u64, usize>,
    /// Reset node per task, in task order.
    pub resets: Vec<usize>,
    /// `[node][template] -> (successor, probability)` pairs; empty for done
    /// nodes.
    pub trans: Vec<Vec<Vec<(usize, f64)>>>,
    pub rewards: Vec<Vec<f64>>,
    pub n_templates: usize,
}

impl StateGraph {
    pub fn build(env: &EnvSpec, oracle: &Oracle, ts: &TemplateSpace) -> StateGraph {
        let mut nodes: Vec<Node> = Vec::new();
        let mut index = HashMap::new();
        for task in &env.tasks {
            for state in oracle.reachable_states(env, &task.task_id) {
                let key = sim_state_key(env, &state);
                if !index.contains_key(&key) {
                    index.insert(key, nodes.len());
                    nodes.push(Node { done: state.done, state, key });
                }
            }
        }
        let resets: Vec<usize> = env
            .tasks
            .iter()
            .map(|t| {
                let key = sim_state_key(env, &env::reset(env, &t.task_id).unwrap());
                index[&key]
            })
            .collect();

        let n = ts.len();
        let ads = env.ad_screens();
        let p_hijack = if ads.is_empty() { 0.0 } else { env.distractor_prob };
        let mut trans = Vec::with_capacity(nodes.len());
        let mut rewards = Vec::with_capacity(nodes.len());
        for node in &nodes {
            if node.done {
                trans.push(Vec::new());
                rewards.push(Vec::new());
                continue;
            }
            let task = env.task(&node.state.task_id).unwrap();
            let key = SimKey::of_state(task, &node.state);
            let mut node_trans = Vec::with_capacity(n);
            let mut node_rewards = Vec::with_capacity(n);
            for a in 0..n {
                let action = ts.decode(env, a);
                node_rewards.push(f64::from(oracle.is_optimal(env, &node.state, &action)));
                let cand = resolve_concrete(env, &key, &action);
                let intended = match &cand {
                    Some(c) => apply_intended(env, task, &key, c),
                    None => key,
                };
                let hijackable = matches!(&cand, Some(CandidateAction::Click(wid)) if {
                    let screen = env.screen(key.screen);
                    screen.widgets.iter().any(|w| {
                        w.widget_id == *wid
                            && screen.widget_visible(w, key.scroll)
                            && w.kind != WidgetKind::Ad
                    })
                });
                let mut succ: Vec<(usize, f64)> = Vec::new();
                let intended_idx = index[&key_of(env, task, &intended, &node.state)];
                if hijackable && p_hijack > 0.0 {
                    succ.push((intended_idx, 1.0 - p_hijack));
                    let w = p_hijack / ads.len() as f64;
                    for ad in &ads {
                        let mut hk = key;
                        hk.screen = *ad;
                        hk.scroll = 0;
                        hk.focus = None;
                        let idx = index[&key_of(env, task, &hk, &node.state)];
                        merge_succ(&mut succ, idx, w);
                    }
                } else {
                    succ.push((intended_idx, 1.0));
                }
                node_trans.push(succ);
            }
            trans.push(node_trans);
            rewards.push(node_rewards);
        }
        StateGraph { nodes, index, resets, trans, rewards, n_templates: n }
    }

    pub fn node_of_state(&self, env: &EnvSpec, state: &State) -> Option<usize> {
        self.index.get(&sim_state_key(env, state)).copied()
    }
}

fn merge_succ(succ: &mut Vec<(usize, f64)>, idx: usize, w: f64) {
    match succ.iter_mut().find(|(i, _)| *i == idx) {
        Some((_, p)) => *p += w,
        None => succ.push((idx, w)),
    }
}

/// sim_state_key of a SimKey under a task, via a scratch state.
fn key_of(env: &EnvSpec, task: &env::Task, key: &SimKey, proto: &State) -> u64 {
    let mut s = proto.clone();
    s.task_id = task.task_id.clone();
    s.screen_id = key.screen;
    s.scroll_offset = key.scroll;
    s.focused_widget = key.focus;
    s.done = key.done;
    s.succeeded = key.succeeded;
    s.typed_buffer = match key.typed {
        env::TypedClass::Empty => String::new(),
        env::TypedClass::Match => task.goal.requires_text.clone().unwrap_or_default(),
        env::TypedClass::Other => env
            .text_vocab
            .iter()
            .find(|w| task.goal.requires_text.as_deref() != Some(w.as_str()))
            .cloned()
            .unwrap_or_else(|| "?".to_string()),
    };
    sim_state_key(env, &s)
}

/// Optimal state-action values over the enumerable MDP.
pub struct ExactQ {
    /// (sim state key, template) -> Q*.
    pub table: BTreeMap<(u64, u32), f64>,
    pub gamma: f64,
    pub tol: f64,
    /// V* per node, graph order.
    pub v: Vec<f64>,
}

impl ExactQ {
    pub fn lookup(&self, state_key: u64, template: u32) -> Result<f64, TheoryError> {
        self.table
            .get(&(state_key, template))
            .copied()
            .ok_or(TheoryError::PairMissing { state_key, template })
    }

    /// Frozen exact-table value model (default 0 outside the table).
    pub fn to_frozen(&self) -> FrozenValueModel {
        FrozenValueModel::from_q_entries(self.table.iter().map(|(k, v)| (*k, *v)), 0.0)
    }

    /// Max Bellman residual of the stored table; the fixed-point
    /// certificate asserted by tests.
    pub fn residual(&self, graph: &StateGraph) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, node) in graph.nodes.iter().enumerate() {
            if node.done {
                continue;
            }
            for a in 0..graph.n_templates {
                let backup = graph.rewards[i][a]
                    + self.gamma
                        * graph.trans[i][a]
                            .iter()
                            .map(|(j, p)| p * self.v[*j])
                            .sum::<f64>();
                let stored = self.table[&(node.key, a as u32)];
                worst = worst.max((backup - stored).abs());
            }
        }
        worst
    }
}

const MAX_SWEEPS: usize = 1_000_000;

/// Value iteration to sup-norm error <= tol: sweeps stop once the residual
/// drops below `tol (1-gamma) / (2 gamma)`.
pub fn value_iteration(
    graph: &StateGraph,
    gamma: f64,
    tol: f64,
) -> Result<ExactQ, TheoryError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(TheoryError::Invalid(format!("gamma out of [0,1): {gamma}")));
    }
    if tol <= 0.0 {
        return Err(TheoryError::Invalid("tol must be > 0".into()));
    }
    let threshold = if gamma > 0.0 {
        tol * (1.0 - gamma) / (2.0 * gamma)
    } else {
        f64::INFINITY
    };
    let n = graph.nodes.len();
    let mut v = vec![0.0; n];
    let mut sweeps = 0;
    loop {
        let mut residual: f64 = 0.0;
        let mut new_v = vec![0.0; n];
        for (i, node) in graph.nodes.iter().enumerate() {
            if node.done {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            for a in 0..graph.n_templates {
                let q = graph.rewards[i][a]
                    + gamma
                        * graph.trans[i][a]
                            .iter()
                            .map(|(j, p)| p * v[*j])
                            .sum::<f64>();
                best = best.max(q);
            }
            new_v[i] = best;
            residual = residual.max((best - v[i]).abs());
        }
        v = new_v;
        sweeps += 1;
        if residual < threshold || gamma == 0.0 {
            break;
        }
        if sweeps >= MAX_SWEEPS {
            return Err(TheoryError::NoConvergence(sweeps));
        }
    }
    let mut table = BTreeMap::new();
    for (i, node) in graph.nodes.iter().enumerate() {
        if node.done {
            continue;
        }
        for a in 0..graph.n_templates {
            let q = graph.rewards[i][a]
                + gamma
                    * graph.trans[i][a]
                        .iter()
                        .map(|(j, p)| p * v[*j])
                        .sum::<f64>();
            table.insert((node.key, a as u32), q);
        }
    }
    Ok(ExactQ { table, gamma, tol, v })
}

fn policy_probs(
    policy: &dyn ActionPolicy,
    env: &EnvSpec,
    ts: &TemplateSpace,
    graph: &StateGraph,
) -> Vec<Vec<f64>> {
    graph
        .nodes
        .iter()
        .map(|n| {
            if n.done {
                Vec::new()
            } else {
                policy.action_probs(env, ts, &n.state)
            }
        })
        .collect()
}

/// Exact expected discounted return of a policy from the task-uniform
/// initial distribution, to sup error <= tol.
pub fn policy_eval(
    env: &EnvSpec,
    ts: &TemplateSpace,
    graph: &StateGraph,
    policy: &dyn ActionPolicy,
    gamma: f64,
    tol: f64,
) -> Result<f64, TheoryError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(TheoryError::Invalid(format!("gamma out of [0,1): {gamma}")));
    }
    let probs = policy_probs(policy, env, ts, graph);
    let threshold = if gamma > 0.0 {
        tol * (1.0 - gamma) / (2.0 * gamma)
    } else {
        f64::INFINITY
    };
    let n = graph.nodes.len();
    let mut v = vec![0.0; n];
    let mut sweeps = 0;
    loop {
        let mut residual: f64 = 0.0;
        let mut new_v = vec![0.0; n];
        for (i, node) in graph.nodes.iter().enumerate() {
            if node.done {
                continue;
            }
            let mut acc = 0.0;
            for (a, pa) in probs[i].iter().enumerate() {
                if *pa == 0.0 {
                    continue;
                }
                acc += pa
                    * (graph.rewards[i][a]
                        + gamma
                            * graph.trans[i][a]
                                .iter()
                                .map(|(j, p)| p * v[*j])
                                .sum::<f64>());
            }
            new_v[i] = acc;
            residual = residual.max((acc - v[i]).abs());
        }
        v = new_v;
        sweeps += 1;
        if residual < threshold || gamma == 0.0 {
            break;
        }
        if sweeps >= MAX_SWEEPS {
            return Err(TheoryError::NoConvergence(sweeps));
        }
    }
    Ok(graph.resets.iter().map(|i| v[*i]).sum::<f64>() / graph.resets.len() as f64)
}

/// Normalized discounted state-action occupancy
/// `d(s,a) = (1-gamma) sum_t gamma^t Pr(s_t=s, a_t=a)`. Done states absorb;
/// their geometric tail is attributed to template 0.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMeasure {
    pub mass: BTreeMap<(u64, u32), f64>,
    pub gamma: f64,
}

impl OccupancyMeasure {
    pub fn total(&self) -> f64 {
        self.mass.values().sum()
    }

    /// State marginal d(s).
    pub fn state_marginal(&self) -> BTreeMap<u64, f64> {
        let mut out = BTreeMap::new();
        for ((k, _), m) in &self.mass {
            *out.entry(*k).or_insert(0.0) += m;
        }
        out
    }
}

pub fn occupancy(
    env: &EnvSpec,
    ts: &TemplateSpace,
    graph: &StateGraph,
    policy: &dyn ActionPolicy,
    gamma: f64,
) -> Result<OccupancyMeasure, TheoryError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(TheoryError::Invalid(format!("gamma out of [0,1): {gamma}")));
    }
    let probs = policy_probs(policy, env, ts, graph);
    let n = graph.nodes.len();
    let mut rho = vec![0.0; n];
    for i in &graph.resets {
        rho[*i] += 1.0 / graph.resets.len() as f64;
    }
    let mut mass: BTreeMap<(u64, u32), f64> = BTreeMap::new();
    let mut coef = 1.0 - gamma;
    let mut discount = 1.0;
    loop {
        // Deposit this step's discounted visitation.
        for (i, node) in graph.nodes.iter().enumerate() {
            if rho[i] == 0.0 {
                continue;
            }
            if node.done {
                *mass.entry((node.key, 0)).or_insert(0.0) += coef * rho[i];
            } else {
                for (a, pa) in probs[i].iter().enumerate() {
                    if *pa > 0.0 {
                        *mass.entry((node.key, a as u32)).or_insert(0.0) +=
                            coef * rho[i] * pa;
                    }
                }
            }
        }
        // Advance one step.
        let mut next = vec![0.0; n];
        let mut moved = 0.0f64;
        for (i, node) in graph.nodes.iter().enumerate() {
            if rho[i] == 0.0 {
                continue;
            }
            if node.done {
                next[i] += rho[i];
            } else {
                moved += rho[i];
                for (a, pa) in probs[i].iter().enumerate() {
                    if *pa > 0.0 {
                        for (j, p) in &graph.trans[i][a] {
                            next[*j] += rho[i] * pa * p;
                        }
                    }
                }
            }
        }
        discount *= gamma;
        coef *= gamma;
        // All remaining mass absorbed: deposit the geometric tail exactly.
        if moved < 1e-15 || discount < 1e-16 {
            let tail = discount; // (1-gamma) * gamma^t / (1-gamma)
            for (i, node) in graph.nodes.iter().enumerate() {
                if next[i] > 0.0 && node.done {
                    *mass.entry((node.key, 0)).or_insert(0.0) += tail * next[i];
                }
            }
            break;
        }
        rho = next;
    }
    Ok(OccupancyMeasure { mass, gamma })
}

/// Sup over distinct dataset (state, template) pairs of |Q_model - Q*|.
pub fn epsilon_sup(
    vem: &FrozenValueModel,
    exact: &ExactQ,
    env: &EnvSpec,
    ts: &TemplateSpace,
    dataset: &[Trajectory],
    encoder: &EncoderConfig,
) -> Result<f64, TheoryError> {
    let mut seen = std::collections::BTreeSet::new();
    let mut worst: f64 = 0.0;
    for t in dataset {
        for rec in &t.steps {
            let state = rec.state();
            let template = match ts.encode_action(env, &state, &rec.action()) {
                Some(i) => i,
                None => continue,
            };
            let key = sim_state_key(env, &state);
            if !seen.insert((key, template as u32)) {
                continue;
            }
            let q_star = exact.lookup(key, template as u32)?;
            let q_hat = vem.predict_sa(env, ts, &state, template, encoder);
            worst = worst.max((q_hat - q_star).abs());
        }
    }
    Ok(worst)
}

/// Distribution shift `sum_s d_beta(s) TV(pi_hat(.|s), beta(.|s))`; in
/// [0, 1].
pub fn policy_shift(
    env: &EnvSpec,
    ts: &TemplateSpace,
    graph: &StateGraph,
    pi_hat: &dyn ActionPolicy,
    beta: &dyn ActionPolicy,
    d_beta: &OccupancyMeasure,
) -> f64 {
    let marginal = d_beta.state_marginal();
    let mut shift = 0.0;
    for node in &graph.nodes {
        if node.done {
            continue;
        }
        let Some(m) = marginal.get(&node.key) else { continue };
        let p = pi_hat.action_probs(env, ts, &node.state);
        let q = beta.action_probs(env, ts, &node.state);
        let tv = 0.5 * p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>();
        shift += m * tv;
    }
    shift
}

/// Support inclusion: wherever pi_hat puts mass, beta must too. Returns the
/// violating (state key, template) pairs.
pub fn coverage_check(
    env: &EnvSpec,
    ts: &TemplateSpace,
    graph: &StateGraph,
    pi_hat: &dyn ActionPolicy,
    beta: &dyn ActionPolicy,
) -> (bool, Vec<(u64, u32)>) {
    let mut violations = Vec::new();
    for node in &graph.nodes {
        if node.done {
            continue;
        }
        let p = pi_hat.action_probs(env, ts, &node.state);
        let q = beta.action_probs(env, ts, &node.state);
        for (a, (pa, qa)) in p.iter().zip(&q).enumerate() {
            if *pa > 1e-12 && *qa <= 1e-12 {
                violations.push((node.key, a as u32));
            }
        }
    }
    (violations.is_empty(), violations)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub env_id: String,
    pub epsilon: f64,
    pub shift: f64,
    pub j_star: f64,
    pub j_hat: f64,
    pub gap: f64,
    /// Right-hand side under the reported theoretical constant.
    pub bound_rhs_theory: f64,
    pub holds_theory: bool,
    /// epsilon + shift <= tol: checked as a zero-gap case instead of
    /// entering the c fit.
    pub zero_gap: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub reports: Vec<BoundReport>,
    /// max gap / (epsilon + shift) over non-zero-gap tuples; None if all
    /// tuples are zero-gap.
    pub c_fit: Option<f64>,
    pub c_theory: f64,
    /// (env_id, reason) for tuples excluded by coverage failure.
    pub excluded: Vec<(String, String)>,
}

/// One tuple of the bound-verification suite.
pub struct BoundCase<'a> {
    pub env_id: String,
    pub env: &'a EnvSpec,
    pub ts: &'a TemplateSpace,
    pub graph: &'a StateGraph,
    pub exact: &'a ExactQ,
    pub vem: &'a FrozenValueModel,
    pub encoder: &'a EncoderConfig,
    pub pi_hat: &'a PolicyParams,
    pub beta: &'a dyn ActionPolicy,
    pub dataset: &'a [Trajectory],
}

pub fn verify_bound(
    cases: &[BoundCase<'_>],
    solver_tol: f64,
    zero_tol: f64,
) -> Result<SuiteReport, TheoryError> {
    if cases.is_empty() {
        return Err(TheoryError::EmptySuite);
    }
    let mut reports = Vec::new();
    let mut excluded = Vec::new();
    let mut c_fit: Option<f64> = None;
    let mut c_theory_max = 0.0f64;
    for case in cases {
        let (ok, violations) =
            coverage_check(case.env, case.ts, case.graph, case.pi_hat, case.beta);
        if !ok {
            excluded.push((
                case.env_id.clone(),
                format!("coverage failure at {} state-action pairs", violations.len()),
            ));
            continue;
        }
        let gamma = case.exact.gamma;
        let c_theory = 2.0 / ((1.0 - gamma) * (1.0 - gamma));
        c_theory_max = c_theory_max.max(c_theory);
        let epsilon = epsilon_sup(
            case.vem, case.exact, case.env, case.ts, case.dataset, case.encoder,
        )?;
        let d_beta = occupancy(case.env, case.ts, case.graph, case.beta, gamma)?;
        let shift =
            policy_shift(case.env, case.ts, case.graph, case.pi_hat, case.beta, &d_beta);
        let j_star =
            case.graph.resets.iter().map(|i| case.exact.v[*i]).sum::<f64>()
                / case.graph.resets.len() as f64;
        let j_hat = policy_eval(
            case.env, case.ts, case.graph, case.pi_hat, gamma, solver_tol,
        )?;
        let gap = j_star - j_hat;
        let zero_gap = epsilon + shift <= zero_tol;
        if !zero_gap {
            let ratio = gap.max(0.0) / (epsilon + shift);
            c_fit = Some(c_fit.map_or(ratio, |c: f64| c.max(ratio)));
        }
        reports.push(BoundReport {
            env_id: case.env_id.clone(),
            epsilon,
            shift,
            j_star,
            j_hat,
            gap,
            bound_rhs_theory: c_theory * (epsilon + shift),
            holds_theory: gap <= c_theory * (epsilon + shift) + 2.0 * solver_tol,
            zero_gap,
        });
    }
    Ok(SuiteReport { reports, c_fit, c_theory: c_theory_max, excluded })
}

/// Exact table plus uniform noise of the given magnitude, under common
/// random numbers: the per-entry draw depends on `(seed, entry)` only, so
/// sweeping the magnitude scales the same noise realization.
pub fn noisy_q(exact: &ExactQ, magnitude: f64, seed: u64) -> FrozenValueModel {
    let entries = exact.table.iter().map(|((k, a), q)| {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("noise-{k}-{a}")));
        let u: f64 = rng.gen();
        ((*k, *a), q + magnitude * (2.0 * u - 1.0))
    });
    FrozenValueModel::from_q_entries(entries, 0.0)
}

/// The always-optimal reference policy: uniform over the oracle's optimal
/// template set at every state.
pub struct OraclePolicy<'a> {
    pub oracle: &'a Oracle,
}

impl ActionPolicy for OraclePolicy<'_> {
    fn action_probs(&self, env: &EnvSpec, ts: &TemplateSpace, state: &State) -> Vec<f64> {
        let n = ts.len();
        let optimal = ts.optimal_template_set(env, self.oracle, state);
        if optimal.is_empty() {
            // Unsolvable from here: declare impossible.
            let mut p = vec![0.0; n];
            let idx = ActionType::PAYLOAD_FREE
                .iter()
                .position(|t| *t == ActionType::StatusTaskImpossible)
                .unwrap();
            p[idx] = 1.0;
            return p;
        }
        let mut p = vec![0.0; n];
        let w = 1.0 / optimal.len() as f64;
        for i in optimal {
            p[i] = w;
        }
        p
    }
}
