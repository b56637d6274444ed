mod common;

use std::collections::{BTreeSet, HashSet, VecDeque};

use vem_rl::env::{
    enumerate_states, generate_env, goal_satisfied, reset, step, Action, ActionType, EnvError,
    EnvSpec, GeneratorConfig, Nav, Oracle, RandomStream, SimKey,
};
use vem_rl::policy::TemplateSpace;

fn no_rng() -> RandomStream {
    RandomStream::Off
}

#[test]
fn generate_minimal_two_screen_env() {
    let cfg = GeneratorConfig {
        screens: 2,
        tasks: 1,
        distractor_prob: 0.0,
        ..GeneratorConfig::default()
    };
    let env = generate_env(&cfg, 7).unwrap();
    assert_eq!(env.screens.len(), 2);
    let goal = env.tasks[0].goal.screen;
    assert!(env
        .transitions
        .iter()
        .any(|t| t.screen == env.home_screen && matches!(t.nav, Nav::Click(_)) && t.target == goal));
}

#[test]
fn generate_is_deterministic() {
    let cfg = GeneratorConfig {
        screens: 10,
        tasks: 5,
        distractor_prob: 0.2,
        ..GeneratorConfig::default()
    };
    let a = generate_env(&cfg, 42).unwrap();
    let b = generate_env(&cfg, 42).unwrap();
    assert_eq!(a.to_json(), b.to_json());
}

/// Independent BFS over the click/back transition graph, ignoring typing:
/// every navigation goal screen must be reachable within max_steps - 1
/// clicks (the last step is the completion action).
#[test]
fn generated_tasks_reachable_by_independent_bfs() {
    let cfg = GeneratorConfig {
        screens: 10,
        tasks: 5,
        distractor_prob: 0.0,
        ..GeneratorConfig::default()
    };
    let env = generate_env(&cfg, 42).unwrap();
    let mut dist = vec![u32::MAX; env.screens.len()];
    dist[env.home_screen as usize] = 0;
    let mut q = VecDeque::from([env.home_screen]);
    while let Some(s) = q.pop_front() {
        for t in &env.transitions {
            if t.screen == s && dist[t.target as usize] == u32::MAX {
                dist[t.target as usize] = dist[s as usize] + 1;
                q.push_back(t.target);
            }
        }
    }
    for task in &env.tasks {
        let d = dist[task.goal.screen as usize];
        assert!(d != u32::MAX, "goal unreachable for {}", task.task_id);
        // Clicks to reach the screen, maybe focus+type, then the status action.
        let budget = task.max_steps;
        let needed = d + if task.goal.requires_text.is_some() { 3 } else { 1 };
        assert!(needed <= budget, "task {} needs {needed} > {budget}", task.task_id);
    }
}

#[test]
fn reset_returns_home_at_step_zero() {
    let env = common::two_screen_env();
    let s = reset(&env, "t0").unwrap();
    assert_eq!(s.screen_id, env.home_screen);
    assert_eq!(s.step_index, 0);
    assert!(!s.done);
    let s2 = reset(&env, "t0").unwrap();
    assert_eq!(s, s2);
}

#[test]
fn reset_unknown_task_errors() {
    let env = common::two_screen_env();
    assert!(matches!(reset(&env, "missing"), Err(EnvError::UnknownTask(_))));
}

#[test]
fn status_complete_on_goal_screen_succeeds() {
    let env = common::two_screen_env();
    let oracle = Oracle::build(&env);
    let s0 = reset(&env, "t0").unwrap();
    let click = Action::click(0.5, common::row_rect(0).center()[1]);
    let out = step(&env, &s0, &click, &oracle, &mut no_rng()).unwrap();
    assert_eq!(out.state.screen_id, 1);
    assert!(goal_satisfied(&env, &out.state));
    let done = step(
        &env,
        &out.state,
        &Action::simple(ActionType::StatusTaskComplete),
        &oracle,
        &mut no_rng(),
    )
    .unwrap();
    assert!(done.done);
    assert!(done.state.succeeded);
    assert_eq!(done.reward, 1);
}

#[test]
fn click_hits_widget_containing_point() {
    // Point (0.524, 0.06) lies inside the row-0 widget rect.
    let env = common::two_screen_env();
    let oracle = Oracle::build(&env);
    let s0 = reset(&env, "t0").unwrap();
    let w = env.widget_at(0, 0, 0.524, 0.06).expect("widget under click point");
    assert_eq!(w.widget_id, 0);
    let out = step(&env, &s0, &Action::click(0.524, 0.06), &oracle, &mut no_rng()).unwrap();
    assert_eq!(out.state.screen_id, 1);
}

#[test]
fn only_correct_click_rewarded_on_two_screen_env() {
    let env = common::two_screen_env();
    let oracle = Oracle::build(&env);
    let ts = TemplateSpace::for_env(&env);
    let s0 = reset(&env, "t0").unwrap();
    let mut rewarded = Vec::new();
    for idx in 0..ts.len() {
        let action = ts.decode(&env, idx);
        let out = step(&env, &s0, &action, &oracle, &mut no_rng()).unwrap();
        if out.reward == 1 {
            rewarded.push(action.clone());
        }
    }
    assert!(!rewarded.is_empty());
    for a in &rewarded {
        assert_eq!(a.action_type, ActionType::DualPoint);
        let p = a.click_point.unwrap();
        assert!(env.widget_at(0, 0, p[0], p[1]).is_some_and(|w| w.widget_id == 0));
    }
}

#[test]
fn optimal_actions_on_satisfied_goal_is_status_complete_only() {
    let env = common::satisfied_env();
    let oracle = Oracle::build(&env);
    let s = reset(&env, "t0").unwrap();
    assert!(goal_satisfied(&env, &s));
    let opt = oracle.optimal_actions(&env, &s);
    assert_eq!(opt.len(), 1);
    assert_eq!(opt[0].action_type, ActionType::StatusTaskComplete);
}

#[test]
fn ad_screen_optimal_actions_contain_back_or_home() {
    let env = common::ad_env();
    let oracle = Oracle::build(&env);
    let s0 = reset(&env, "t0").unwrap();
    // Click the ad widget; its intended target is the ad screen.
    let ad = Action::click(0.5, common::row_rect(1).center()[1]);
    let out = step(&env, &s0, &ad, &oracle, &mut no_rng()).unwrap();
    assert!(env.screen(out.state.screen_id).is_ad);
    let opt = oracle.optimal_actions(&env, &out.state);
    assert!(opt
        .iter()
        .any(|a| matches!(a.action_type, ActionType::PressBack | ActionType::PressHome)));
}

/// Brute force over all action sequences (by template) up to max_steps on
/// the 3-screen chain; the unique optimal first action per state must match
/// the oracle.
#[test]
fn chain_optimal_actions_match_brute_force() {
    let env = common::chain3_env();
    let oracle = Oracle::build(&env);
    let ts = TemplateSpace::for_env(&env);

    fn shortest(
        env: &EnvSpec,
        ts: &TemplateSpace,
        oracle: &Oracle,
        state: &vem_rl::env::State,
        depth: u32,
    ) -> Option<u32> {
        if state.done {
            return if state.succeeded { Some(0) } else { None };
        }
        if depth == 0 {
            return None;
        }
        let mut best = None;
        for idx in 0..ts.len() {
            let a = ts.decode(env, idx);
            let out = step(env, state, &a, oracle, &mut RandomStream::Off).unwrap();
            if let Some(d) = shortest(env, ts, oracle, &out.state, depth - 1) {
                best = Some(best.map_or(d + 1, |b: u32| b.min(d + 1)));
            }
        }
        best
    }

    let mut state = reset(&env, "t0").unwrap();
    loop {
        let opt = oracle.optimal_actions(&env, &state);
        let here = shortest(&env, &ts, &oracle, &state, 4).unwrap();
        for a in &opt {
            let out = step(&env, &state, a, &oracle, &mut no_rng()).unwrap();
            let after = if out.state.done {
                if out.state.succeeded {
                    Some(0)
                } else {
                    None
                }
            } else {
                shortest(&env, &ts, &oracle, &out.state, 4)
            };
            assert_eq!(after, Some(here - 1), "optimal action must reduce distance");
        }
        let out = step(&env, &state, &opt[0], &oracle, &mut no_rng()).unwrap();
        if out.state.done {
            assert!(out.state.succeeded);
            break;
        }
        state = out.state;
    }
}

#[test]
fn enumerate_states_matches_independent_traversal() {
    let env = common::two_screen_env();
    let states = enumerate_states(&env, 10_000).unwrap();

    // Independent BFS over sim keys per task using only step().
    let oracle = Oracle::build(&env);
    let ts = TemplateSpace::for_env(&env);
    let task = &env.tasks[0];
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut frontier = vec![reset(&env, "t0").unwrap()];
    seen.insert(serde_json::to_string(&SimKey::of_state(task, &frontier[0])).unwrap());
    while let Some(s) = frontier.pop() {
        if s.done {
            continue;
        }
        for idx in 0..ts.len() {
            let a = ts.decode(&env, idx);
            let out = step(&env, &s, &a, &oracle, &mut no_rng()).unwrap();
            let key = serde_json::to_string(&SimKey::of_state(task, &out.state)).unwrap();
            if seen.insert(key) {
                frontier.push(out.state);
            }
        }
    }
    let enumerated: HashSet<String> = states
        .iter()
        .map(|s| serde_json::to_string(&SimKey::of_state(task, s)).unwrap())
        .collect();
    assert_eq!(enumerated.len(), states.len(), "enumeration has duplicate keys");
    assert_eq!(enumerated, seen.into_iter().collect::<HashSet<_>>());
}

#[test]
fn enumerate_states_is_deterministic() {
    let env = common::chain3_env();
    let a = enumerate_states(&env, 10_000).unwrap();
    let b = enumerate_states(&env, 10_000).unwrap();
    assert_eq!(a, b);
}

#[test]
fn enumerate_states_cap_exceeded() {
    let env = common::chain3_env();
    assert!(matches!(
        enumerate_states(&env, 1),
        Err(EnvError::CapExceeded { cap: 1 })
    ));
}

#[test]
fn env_spec_json_round_trip() {
    let cfg = GeneratorConfig { distractor_prob: 0.2, ..GeneratorConfig::default() };
    let env = generate_env(&cfg, 9).unwrap();
    let round = EnvSpec::from_json(&env.to_json()).unwrap();
    assert_eq!(env.to_json(), round.to_json());
}

#[test]
fn hijack_replay_reproduces_episode() {
    let env = common::ad_env();
    let oracle = Oracle::build(&env);
    let s0 = reset(&env, "t0").unwrap();
    let click = Action::click(0.5, common::row_rect(0).center()[1]);

    let mut hijacks = Vec::new();
    let mut outcomes = Vec::new();
    for seed in 0..50u64 {
        let mut stream = RandomStream::seeded(seed);
        let out = step(&env, &s0, &click, &oracle, &mut stream).unwrap();
        hijacks.push(out.hijack);
        outcomes.push(out.state.screen_id);
    }
    assert!(hijacks.iter().any(|h| h.is_some()), "no hijack in 50 seeds");
    assert!(hijacks.iter().any(|h| h.is_none()), "hijack every time");

    for (h, screen) in hijacks.iter().zip(&outcomes) {
        let mut replay = RandomStream::replay(vec![*h]);
        let out = step(&env, &s0, &click, &oracle, &mut replay).unwrap();
        assert_eq!(out.hijack, *h);
        assert_eq!(out.state.screen_id, *screen);
    }
}
