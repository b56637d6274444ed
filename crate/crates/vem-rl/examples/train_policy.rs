//! Optimize a policy against a frozen value model with clipped surrogate
//! updates. The environment is never stepped during training; the value
//! model supplies all reward signal.

use vem_rl::annotator::{annotate_oracle, ells_in_dataset_order};
use vem_rl::dataset::{collect, BehaviorPolicyConfig};
use vem_rl::env::{generate_env, step_call_count, GeneratorConfig, Oracle};
use vem_rl::policy::{train_policy, PolicyParams, PpoConfig, TemplateSpace};
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

    let trajs = collect(&env, &oracle, &behavior, 500, 7).unwrap();
    let labels = annotate_oracle(&env, &oracle, &trajs);
    let ells = ells_in_dataset_order(&trajs, &labels).unwrap();
    let (xs, ys) = encode_labeled(&env, &trajs, &ells, &enc);
    let vcfg = VemTrainConfig { kind: ModelKind::Tabular, ..VemTrainConfig::default() };
    let (model, _) = train_vem(&xs, &ys, &vcfg).unwrap();
    let vem = FrozenValueModel::freeze(model);
    let vem_hash = vem.content_hash();

    let ts = TemplateSpace::for_env(&env);
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

    let steps_before = step_call_count();
    let (policy, diag) = train_policy(
        &states,
        &vem,
        &env,
        &ts,
        PolicyParams::uniform_tabular(ts.len()),
        &pcfg,
    )
    .unwrap();
    println!("surrogate J across training:");
    let stride = (diag.rows.len() / 10).max(1);
    for row in diag.rows.iter().step_by(stride) {
        println!(
            "  iter {:>5}  J {:.4}  clip {:.3}",
            row.iteration, row.j_estimate, row.clip_fraction
        );
    }
    println!("initial J        : {:.4}", diag.initial_j);
    println!("final J          : {:.4}", diag.final_j);
    println!("env steps used   : {}", step_call_count() - steps_before);
    println!("vem hash stable  : {}", vem.content_hash() == vem_hash);

    let path = std::env::temp_dir().join("vem_rl_policy.bin");
    policy.save(&path).unwrap();
    println!("wrote {}", path.display());
}
