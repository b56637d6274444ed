//! Evaluate a trained policy offline (step/task match against held-out
//! trajectories) and online (fresh rollouts), next to behavior-cloning and
//! oracle references.

use vem_rl::annotator::{annotate_oracle, ells_in_dataset_order};
use vem_rl::dataset::{collect, BehaviorPolicyConfig};
use vem_rl::env::{generate_env, GeneratorConfig, Oracle};
use vem_rl::eval::{offline_eval, online_eval, MatcherConfig};
use vem_rl::policy::{train_bc, train_policy, PolicyParams, PpoConfig, TemplateSpace};
use vem_rl::theory::OraclePolicy;
use vem_rl::vem::{
    encode_labeled, train_vem, EncoderConfig, FrozenValueModel, ModelKind, VemTrainConfig,
};

fn main() {
    let cfg = GeneratorConfig { distractor_prob: 0.2, history_k: 0, ..GeneratorConfig::default() };
    let env = generate_env(&cfg, 42).unwrap();
    let oracle = Oracle::build(&env);
    let behavior = BehaviorPolicyConfig::Mixture {
        components: vec![
            (BehaviorPolicyConfig::ScriptedOptimal, 0.1),
            (BehaviorPolicyConfig::UniformRandom, 0.9),
        ],
    };
    let enc = EncoderConfig { history_k: Some(0), ..EncoderConfig::default() };
    let ts = TemplateSpace::for_env(&env);

    let trajs = collect(&env, &oracle, &behavior, 500, 7).unwrap();
    let labels = annotate_oracle(&env, &oracle, &trajs);
    let ells = ells_in_dataset_order(&trajs, &labels).unwrap();
    let (xs, ys) = encode_labeled(&env, &trajs, &ells, &enc);
    let vcfg = VemTrainConfig { kind: ModelKind::Tabular, ..VemTrainConfig::default() };
    let (model, _) = train_vem(&xs, &ys, &vcfg).unwrap();
    let vem = FrozenValueModel::freeze(model);
    let states: Vec<_> =
        trajs.iter().flat_map(|t| t.steps.iter().map(|r| r.state())).collect();
    let pcfg = PpoConfig {
        actions_per_state: 24,
        epochs: 60,
        batch_size: 64,
        learning_rate: 20.0,
        entropy_coef: 0.0005,
        seed: 5,
        encoder: enc,
        ..PpoConfig::default()
    };
    let (policy, _) = train_policy(
        &states,
        &vem,
        &env,
        &ts,
        PolicyParams::uniform_tabular(ts.len()),
        &pcfg,
    )
    .unwrap();
    let bc = train_bc(&env, &ts, &trajs, 0.1);

    // Offline: match the policy's choices against clean reference episodes.
    let reference = collect(&env, &oracle, &BehaviorPolicyConfig::ScriptedOptimal, 30, 99).unwrap();
    let off = offline_eval(&policy, &env, &ts, &reference, &MatcherConfig::default()).unwrap();
    println!(
        "offline : step_sr {:.3}  task_sr {:.3}  avg len {:.2}",
        off.step_sr, off.task_sr, off.avg_step_length
    );

    // Online: fresh rollouts for every task.
    let tasks: Vec<String> = env.tasks.iter().map(|t| t.task_id.clone()).collect();
    let max_steps = env.tasks.iter().map(|t| t.max_steps).max().unwrap();
    let seeds = [0u64, 1, 2];
    for (name, rep) in [
        ("trained", online_eval(&policy, &env, &ts, &oracle, &tasks, max_steps, &seeds).unwrap()),
        ("bc", online_eval(&bc, &env, &ts, &oracle, &tasks, max_steps, &seeds).unwrap()),
        (
            "oracle",
            online_eval(&OraclePolicy { oracle: &oracle }, &env, &ts, &oracle, &tasks, max_steps, &seeds)
                .unwrap(),
        ),
    ] {
        println!(
            "online {name:<8}: task_sr {:.3}  avg len {:.2}",
            rep.task_sr, rep.avg_step_length
        );
        println!("  csv: {}", rep.csv_row(name, "synthetic"));
    }
}
