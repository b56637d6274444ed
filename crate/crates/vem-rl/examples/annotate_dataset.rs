//! Label every dataset step with a binary action-quality flag, three ways:
//! the environment oracle, a noisy rater with fixed agreement, and a
//! bit-exact replay of a recorded chat-completion transcript.
//!
//! A live annotator run would use `annotate_llm` with an `LlmConfig`; the
//! API key is read from the env var named in `api_key_env` and never
//! logged. This example stays offline.

use vem_rl::annotator::{
    annotate_noisy, annotate_oracle, annotate_replay, parse_rating, render_prompt, render_step,
    write_labels, Fallback, TranscriptEntry, DEFAULT_PROMPT_TEMPLATE,
};
use vem_rl::dataset::{collect, BehaviorPolicyConfig};
use vem_rl::env::{generate_env, GeneratorConfig, Oracle};

fn main() {
    let env = generate_env(&GeneratorConfig::default(), 42).unwrap();
    let oracle = Oracle::build(&env);
    let trajs = collect(&env, &oracle, &BehaviorPolicyConfig::UniformRandom, 50, 7).unwrap();

    let clean = annotate_oracle(&env, &oracle, &trajs);
    let noisy = annotate_noisy(&clean, 0.9, 3).unwrap();
    let agree = clean
        .iter()
        .zip(&noisy)
        .filter(|(a, b)| a.ell == b.ell)
        .count();
    println!("steps           : {}", clean.len());
    println!("positives       : {}", clean.iter().filter(|l| l.ell == 1).count());
    println!("noisy agreement : {:.3}", agree as f64 / clean.len() as f64);

    // Show the prompt the live annotator would send for the first step.
    let rec = &trajs[0].steps[0];
    let (history, current) = render_step(&env, rec);
    let task = env.tasks.iter().find(|t| t.task_id == trajs[0].task_id).unwrap();
    let prompt = render_prompt(DEFAULT_PROMPT_TEMPLATE, &task.instruction, &history, &current);
    println!("--- prompt for step 0 ---\n{prompt}\n---");

    // Replay a synthetic transcript: same transcript, same labels, no network.
    let transcript: Vec<TranscriptEntry> = trajs
        .iter()
        .flat_map(|t| t.steps.iter())
        .zip(&clean)
        .map(|(rec, label)| TranscriptEntry {
            step_key: rec.step_key(),
            request: serde_json::json!({"model": "recorded"}),
            response: serde_json::json!({"choices": [{"message": {
                "role": "assistant",
                "content": format!(
                    "{{\"rating\": {}, \"explanation\": \"recorded\"}}",
                    if label.ell == 1 { 2 } else { 1 }
                ),
            }}]}),
            latency_ms: 0,
        })
        .collect();
    let replayed = annotate_replay(&env, &oracle, &trajs, &transcript, Fallback::Skip).unwrap();
    println!("replayed labels : {}", replayed.len());
    println!(
        "replay == oracle: {}",
        replayed.iter().zip(&clean).all(|(a, b)| a.ell == b.ell)
    );
    assert!(parse_rating("{\"rating\": 2, \"explanation\": \"ok\"}").is_some());

    let path = std::env::temp_dir().join("vem_rl_labels.jsonl");
    write_labels(&noisy, &path).unwrap();
    println!("wrote {}", path.display());
}
