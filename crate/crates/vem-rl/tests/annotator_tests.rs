mod common;

use serde_json::json;

use vem_rl::annotator::{
    annotate_noisy, annotate_oracle, annotate_replay, parse_rating, rating_to_label,
    read_labels, render_prompt, render_step, write_labels, Fallback, Label, LabelSource, Rating,
    TranscriptEntry, DEFAULT_PROMPT_TEMPLATE,
};
use vem_rl::dataset::{collect, BehaviorPolicyConfig};
use vem_rl::env::{reset, step, Action, ActionType, Oracle, RandomStream};

#[test]
fn rating_to_label_is_the_level_bijection() {
    assert_eq!(rating_to_label(&Rating { rating: 2, explanation: None }), 1);
    assert_eq!(rating_to_label(&Rating { rating: 1, explanation: None }), 0);
}

#[test]
fn oracle_labels_status_complete_on_satisfied_goal() {
    let env = common::satisfied_env();
    let oracle = Oracle::build(&env);
    let trajs = collect(&env, &oracle, &BehaviorPolicyConfig::ScriptedOptimal, 1, 0).unwrap();
    assert_eq!(trajs[0].steps[0].action_type, ActionType::StatusTaskComplete);
    let labels = annotate_oracle(&env, &oracle, &trajs);
    assert_eq!(labels[0].ell, 1);
}

#[test]
fn oracle_labels_ad_click_zero() {
    let env = common::ad_env();
    let oracle = Oracle::build(&env);
    // Force one uniform episode whose first action we overwrite with the ad
    // widget click, replaying the trace so dynamics stay consistent.
    let mut trajs =
        collect(&env, &oracle, &BehaviorPolicyConfig::UniformRandom, 1, 0).unwrap();
    let s0 = reset(&env, "t0").unwrap();
    let ad_click = Action::click(0.5, common::row_rect(1).center()[1]);
    let out = step(&env, &s0, &ad_click, &oracle, &mut RandomStream::Off).unwrap();
    assert!(env.screen(out.state.screen_id).is_ad);
    let rec = &mut trajs[0].steps[0];
    rec.action_type = ActionType::DualPoint;
    rec.click_point = ad_click.click_point;
    rec.typed_text = None;
    let labels = annotate_oracle(&env, &oracle, &trajs);
    assert_eq!(labels[0].ell, 0, "ad-widget click must be labeled level 1");
}

#[test]
fn oracle_labels_equal_step_rewards_exhaustively() {
    let env = common::chain3_env();
    let oracle = Oracle::build(&env);
    let ts = vem_rl::policy::TemplateSpace::for_env(&env);
    for state in oracle.reachable_states(&env, "t0") {
        if state.done {
            continue;
        }
        for idx in 0..ts.len() {
            let a = ts.decode(&env, idx);
            let out = step(&env, &state, &a, &oracle, &mut RandomStream::Off).unwrap();
            let expected = u8::from(oracle.is_optimal(&env, &state, &a));
            assert_eq!(out.reward, expected);
        }
    }
}

fn base_labels(n: usize) -> Vec<Label> {
    (0..n)
        .map(|i| Label {
            step_key: format!("ep{}:s0", i),
            ell: (i % 2) as u8,
            rating: None,
            source: LabelSource::Oracle,
            transcript_offset: None,
        })
        .collect()
}

#[test]
fn noisy_agreement_one_is_identity() {
    let labels = base_labels(200);
    let noisy = annotate_noisy(&labels, 1.0, 5).unwrap();
    for (a, b) in labels.iter().zip(&noisy) {
        assert_eq!(a.ell, b.ell);
    }
}

#[test]
fn noisy_agreement_zero_flips_everything() {
    let labels = base_labels(200);
    let noisy = annotate_noisy(&labels, 0.0, 5).unwrap();
    for (a, b) in labels.iter().zip(&noisy) {
        assert_eq!(a.ell, 1 - b.ell);
    }
}

#[test]
fn noisy_agreement_rate_within_binomial_bound() {
    // 10,000 Bernoulli(0.9) agreements: 3 sigma = 3*sqrt(0.9*0.1/10000) = 0.009.
    let labels = base_labels(10_000);
    let noisy = annotate_noisy(&labels, 0.9, 5).unwrap();
    let agree = labels
        .iter()
        .zip(&noisy)
        .filter(|(a, b)| a.ell == b.ell)
        .count() as f64
        / labels.len() as f64;
    assert!((0.891..=0.909).contains(&agree), "agreement {agree}");
}

#[test]
fn parse_rating_accepts_contract_json() {
    let r = parse_rating(r#"{"rating": 2, "explanation": "moves toward the goal"}"#).unwrap();
    assert_eq!(r.rating, 2);
    assert_eq!(rating_to_label(&r), 1);
    assert!(parse_rating("rating: two").is_none());
    assert!(parse_rating(r#"{"rating": 3, "explanation": "x"}"#).is_none());
}

#[test]
fn prompt_render_substitutes_placeholders() {
    let env = common::two_screen_env();
    let oracle = Oracle::build(&env);
    let trajs = collect(&env, &oracle, &BehaviorPolicyConfig::ScriptedOptimal, 1, 0).unwrap();
    let (history, current) = render_step(&env, &trajs[0].steps[1]);
    let prompt = render_prompt(
        DEFAULT_PROMPT_TEMPLATE,
        &trajs[0].instruction,
        &history,
        &current,
    );
    assert!(prompt.contains(&trajs[0].instruction));
    assert!(prompt.contains(&current));
    assert!(!prompt.contains("{task}"));
    assert!(!prompt.contains("{history}"));
    assert!(!prompt.contains("{current}"));
}

fn chat_response(content: &str) -> serde_json::Value {
    json!({ "choices": [ { "message": { "role": "assistant", "content": content } } ] })
}

#[test]
fn replay_reproduces_labels_without_network() {
    let env = common::chain3_env();
    let oracle = Oracle::build(&env);
    let trajs = collect(&env, &oracle, &BehaviorPolicyConfig::ScriptedOptimal, 2, 0).unwrap();
    let mut transcript = Vec::new();
    for t in &trajs {
        for (i, rec) in t.steps.iter().enumerate() {
            // First entry unparseable, second valid: replay must use the
            // first parseable entry.
            transcript.push(TranscriptEntry {
                step_key: rec.step_key(),
                request: json!({"model": "test"}),
                response: chat_response("rating: two"),
                latency_ms: 10,
            });
            transcript.push(TranscriptEntry {
                step_key: rec.step_key(),
                request: json!({"model": "test"}),
                response: chat_response(&format!(
                    "{{\"rating\": {}, \"explanation\": \"replayed\"}}",
                    if i % 2 == 0 { 2 } else { 1 }
                )),
                latency_ms: 10,
            });
        }
    }
    let a = annotate_replay(&env, &oracle, &trajs, &transcript, Fallback::Skip).unwrap();
    let b = annotate_replay(&env, &oracle, &trajs, &transcript, Fallback::Skip).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.len(), trajs.iter().map(|t| t.steps.len()).sum::<usize>());
    let expected: Vec<u8> = trajs
        .iter()
        .flat_map(|t| (0..t.steps.len()).map(|i| if i % 2 == 0 { 1 } else { 0 }))
        .collect();
    for (l, want) in a.iter().zip(expected) {
        assert_eq!(l.source, LabelSource::Replay);
        assert_eq!(l.ell, want);
    }
}

#[test]
fn replay_fallback_paths() {
    let env = common::two_screen_env();
    let oracle = Oracle::build(&env);
    let trajs = collect(&env, &oracle, &BehaviorPolicyConfig::ScriptedOptimal, 1, 0).unwrap();
    let transcript: Vec<TranscriptEntry> = trajs[0]
        .steps
        .iter()
        .map(|rec| TranscriptEntry {
            step_key: rec.step_key(),
            request: json!({}),
            response: chat_response("not json at all"),
            latency_ms: 1,
        })
        .collect();
    let skipped =
        annotate_replay(&env, &oracle, &trajs, &transcript, Fallback::Skip).unwrap();
    assert!(skipped.is_empty());
    let zeroed = annotate_replay(&env, &oracle, &trajs, &transcript, Fallback::Ell0).unwrap();
    assert!(zeroed.iter().all(|l| l.ell == 0));
    let oracled =
        annotate_replay(&env, &oracle, &trajs, &transcript, Fallback::Oracle).unwrap();
    let reference = annotate_oracle(&env, &oracle, &trajs);
    assert_eq!(
        oracled.iter().map(|l| l.ell).collect::<Vec<_>>(),
        reference.iter().map(|l| l.ell).collect::<Vec<_>>()
    );
}

#[test]
fn labels_round_trip() {
    let labels = base_labels(25);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.jsonl");
    write_labels(&labels, &path).unwrap();
    let round = read_labels(&path).unwrap();
    assert_eq!(labels, round);
}
