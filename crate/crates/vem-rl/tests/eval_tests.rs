mod common;

use std::collections::BTreeMap;

use vem_rl::dataset::{collect, BehaviorPolicyConfig, Trajectory};
use vem_rl::env::{self, Action, ActionType, Oracle};
use vem_rl::eval::{
    match_action, offline_eval, online_eval, EvalError, EvalReport, MatcherConfig,
};
use vem_rl::policy::{ActionPolicy, PolicyParams, TemplateSpace};
use vem_rl::theory::OraclePolicy;
use vem_rl::vem::sim_state_key;

#[test]
fn match_action_click_threshold() {
    let cfg = MatcherConfig::default();
    let a = Action::click(0.5, 0.5);
    assert!(match_action(&a, &a, &cfg));
    // Offset (0.05, 0.05): distance 0.0707, inside the 0.14 threshold.
    assert!(match_action(&Action::click(0.55, 0.55), &a, &cfg));
    // Offset (0.2, 0.2): distance 0.2828, outside.
    assert!(!match_action(&Action::click(0.7, 0.7), &a, &cfg));
    // Type mismatch never matches regardless of payload.
    assert!(!match_action(&Action::simple(ActionType::PressBack), &a, &cfg));
}

#[test]
fn match_action_text_case_insensitive() {
    let cfg = MatcherConfig::default();
    let a = Action::type_text("Alpha");
    let b = Action::type_text("alpha");
    assert!(match_action(&a, &b, &cfg));
    assert!(!match_action(&Action::type_text("bravo"), &b, &cfg));
}

#[test]
fn match_action_is_reflexive_and_symmetric() {
    let cfg = MatcherConfig::default();
    let actions = [
        Action::click(0.3, 0.6),
        Action::click(0.35, 0.62),
        Action::simple(ActionType::StatusTaskComplete),
        Action::type_text("alpha"),
    ];
    for a in &actions {
        assert!(match_action(a, a, &cfg));
        for b in &actions {
            assert_eq!(match_action(a, b, &cfg), match_action(b, a, &cfg));
        }
    }
}

/// A greedy policy that reproduces each recorded action template, keyed on
/// the recorded states.
fn replay_policy(
    env: &vem_rl::env::EnvSpec,
    ts: &TemplateSpace,
    trajs: &[Trajectory],
) -> PolicyParams {
    let mut choice = BTreeMap::new();
    for t in trajs {
        for rec in &t.steps {
            let s = rec.state();
            let idx = ts.encode_action(env, &s, &rec.action()).expect("on-template action");
            choice.insert(sim_state_key(env, &s), idx as u32);
        }
    }
    PolicyParams::Greedy { n: ts.len(), choice }
}

#[test]
fn offline_replay_policy_matches_everything() {
    let env = common::chain3_env();
    let oracle = Oracle::build(&env);
    let ts = TemplateSpace::for_env(&env);
    let trajs = collect(&env, &oracle, &BehaviorPolicyConfig::ScriptedOptimal, 1, 0).unwrap();
    let policy = replay_policy(&env, &ts, &trajs);
    let r = offline_eval(&policy, &env, &ts, &trajs, &MatcherConfig::default()).unwrap();
    assert_eq!(r.step_sr, 1.0);
    assert_eq!(r.task_sr, 1.0);
}

#[test]
fn offline_always_home_matches_nothing() {
    let env = common::chain3_env();
    let oracle = Oracle::build(&env);
    let ts = TemplateSpace::for_env(&env);
    let trajs = collect(&env, &oracle, &BehaviorPolicyConfig::ScriptedOptimal, 5, 0).unwrap();
    let home = (0..ts.len())
        .find(|i| ts.decode(&env, *i).action_type == ActionType::PressHome)
        .unwrap();
    let mut choice = BTreeMap::new();
    for t in &trajs {
        for rec in &t.steps {
            choice.insert(sim_state_key(&env, &rec.state()), home as u32);
        }
    }
    let policy = PolicyParams::Greedy { n: ts.len(), choice };
    let r = offline_eval(&policy, &env, &ts, &trajs, &MatcherConfig::default()).unwrap();
    assert_eq!(r.step_sr, 0.0);
    assert_eq!(r.task_sr, 0.0);
}

#[test]
fn offline_partial_match_rates_and_recount() {
    let env = common::chain3_env();
    let oracle = Oracle::build(&env);
    let ts = TemplateSpace::for_env(&env);
    let clean = collect(&env, &oracle, &BehaviorPolicyConfig::ScriptedOptimal, 1, 0)
        .unwrap()
        .remove(0);
    let policy = replay_policy(&env, &ts, std::slice::from_ref(&clean));

    // 10 copies; tamper one click in 7 of them so those trajectories carry
    // exactly one unmatched step each.
    let mut trajs = Vec::new();
    for i in 0..10u64 {
        let mut t = clean.clone();
        t.episode_index = i;
        for s in &mut t.steps {
            s.episode_index = i;
        }
        if i >= 3 {
            let rec = t
                .steps
                .iter_mut()
                .find(|r| r.action_type == ActionType::DualPoint)
                .unwrap();
            rec.click_point = Some([0.98, 0.98]);
        }
        trajs.push(t);
    }
    let r = offline_eval(&policy, &env, &ts, &trajs, &MatcherConfig::default()).unwrap();
    assert!((r.task_sr - 0.30).abs() < 1e-12, "task_sr {}", r.task_sr);
    let steps_total: usize = trajs.iter().map(|t| t.steps.len()).sum();
    let expected_step_sr = (steps_total - 7) as f64 / steps_total as f64;
    assert!((r.step_sr - expected_step_sr).abs() < 1e-12);

    // Independent recount straight from match_action.
    let mut matched = 0usize;
    for t in &trajs {
        for rec in &t.steps {
            let s = rec.state();
            let pred = ts.decode(&env, policy.argmax(&env, &s));
            if match_action(&pred, &rec.action(), &MatcherConfig::default()) {
                matched += 1;
            }
        }
    }
    assert_eq!(matched, steps_total - 7);
    assert_eq!(r.avg_step_length, clean.steps.len() as f64);
}

#[test]
fn offline_empty_test_set_errors() {
    let env = common::chain3_env();
    let ts = TemplateSpace::for_env(&env);
    let policy = PolicyParams::uniform_tabular(ts.len());
    assert!(matches!(
        offline_eval(&policy, &env, &ts, &[], &MatcherConfig::default()),
        Err(EvalError::EmptyTestSet)
    ));
}

#[test]
fn online_oracle_policy_solves_distractor_free_env() {
    let env = common::chain3_env();
    let oracle = Oracle::build(&env);
    let ts = TemplateSpace::for_env(&env);
    let pi = OraclePolicy { oracle: &oracle };
    let r = online_eval(
        &pi,
        &env,
        &ts,
        &oracle,
        &["t0".to_string()],
        10,
        &[0, 1, 2],
    )
    .unwrap();
    assert_eq!(r.task_sr, 1.0);
    // Two clicks plus the completion action.
    assert_eq!(r.avg_step_length, 3.0);
    assert!(r.warnings.is_empty());
}

#[test]
fn online_episode_lengths_capped_at_max_steps() {
    let env = common::chain3_env();
    let oracle = Oracle::build(&env);
    let ts = TemplateSpace::for_env(&env);
    // Always scroll down: never terminates, every episode hits the cap.
    let idx = (0..ts.len())
        .find(|i| ts.decode(&env, *i).action_type == ActionType::ScrollDown)
        .unwrap();
    let mut logits = BTreeMap::new();
    let states = env::enumerate_states(&env, 100_000).unwrap();
    for s in states.iter().filter(|s| !s.done) {
        let mut z = vec![0.0; ts.len()];
        z[idx] = 10.0;
        logits.insert(vem_rl::vem::state_cell_key(&env, s), z);
    }
    let policy = PolicyParams::Tabular { n: ts.len(), logits };
    let r = online_eval(&policy, &env, &ts, &oracle, &["t0".to_string()], 6, &[0, 1]).unwrap();
    assert_eq!(r.task_sr, 0.0);
    for t in &r.per_task {
        assert!(t.step_lengths.iter().all(|l| *l == 6));
    }
}

#[test]
fn online_duplicate_tasks_warn_and_drop() {
    let env = common::chain3_env();
    let oracle = Oracle::build(&env);
    let ts = TemplateSpace::for_env(&env);
    let pi = OraclePolicy { oracle: &oracle };
    let tasks = vec!["t0".to_string(), "t0".to_string()];
    let r = online_eval(&pi, &env, &ts, &oracle, &tasks, 10, &[0]).unwrap();
    assert_eq!(r.n_tasks, 1);
    assert_eq!(r.warnings.len(), 1);
}

#[test]
fn online_rollouts_match_independent_replay() {
    // Stochastic env: the report must agree with a from-scratch greedy
    // rollout using the same derived episode streams.
    let env = common::ad_env();
    let oracle = Oracle::build(&env);
    let ts = TemplateSpace::for_env(&env);
    let pi = OraclePolicy { oracle: &oracle };
    let seeds: Vec<u64> = (0..20).collect();
    let r = online_eval(&pi, &env, &ts, &oracle, &["t0".to_string()], 10, &seeds).unwrap();

    let mut successes = 0u64;
    let mut lengths = Vec::new();
    for seed in &seeds {
        let mut stream = env::episode_stream(*seed, "online-t0");
        let mut state = env::reset(&env, "t0").unwrap();
        let mut len = 0u32;
        let mut success = false;
        for _ in 0..10 {
            let action = ts.decode(&env, pi_argmax(&pi, &env, &ts, &state));
            let out = env::step(&env, &state, &action, &oracle, &mut stream).unwrap();
            len += 1;
            state = out.state;
            if out.done {
                success = state.succeeded;
                break;
            }
        }
        lengths.push(len);
        if success {
            successes += 1;
        }
    }
    let t = &r.per_task[0];
    assert_eq!(t.successes, successes);
    assert_eq!(t.step_lengths, lengths);
}

fn pi_argmax(
    pi: &dyn ActionPolicy,
    env: &vem_rl::env::EnvSpec,
    ts: &TemplateSpace,
    state: &vem_rl::env::State,
) -> usize {
    let p = pi.action_probs(env, ts, state);
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

#[test]
fn csv_row_layout() {
    assert_eq!(EvalReport::csv_header(), "method,domain,step_sr,task_sr,avg_step_length");
    let r = EvalReport {
        step_sr: 0.5,
        task_sr: 0.25,
        avg_step_length: 3.75,
        n_tasks: 1,
        per_task: Vec::new(),
        warnings: Vec::new(),
    };
    assert_eq!(r.csv_row("ppo", "synthetic"), "ppo,synthetic,0.5000,0.2500,3.7500");
}
