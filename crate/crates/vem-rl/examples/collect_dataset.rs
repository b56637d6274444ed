//! Roll out a behavior mixture (mostly random, occasionally scripted) in a
//! generated environment and write the trajectories to JSONL.

use vem_rl::dataset::{collect, write_jsonl, BehaviorPolicyConfig};
use vem_rl::env::{generate_env, GeneratorConfig, Oracle};

fn main() {
    let env = generate_env(&GeneratorConfig::default(), 42).unwrap();
    let oracle = Oracle::build(&env);

    let behavior = BehaviorPolicyConfig::Mixture {
        components: vec![
            (BehaviorPolicyConfig::ScriptedOptimal, 0.1),
            (BehaviorPolicyConfig::UniformRandom, 0.9),
        ],
    };
    let trajs = collect(&env, &oracle, &behavior, 200, 7).unwrap();

    let steps: usize = trajs.iter().map(|t| t.steps.len()).sum();
    let successes = trajs.iter().filter(|t| t.terminal_succeeded).count();
    println!("episodes   : {}", trajs.len());
    println!("steps      : {steps}");
    println!("success    : {}/{}", successes, trajs.len());
    println!(
        "avg length : {:.2}",
        steps as f64 / trajs.len() as f64
    );

    let path = std::env::temp_dir().join("vem_rl_data.jsonl");
    write_jsonl(&trajs, &path).unwrap();
    println!("wrote {}", path.display());
}
