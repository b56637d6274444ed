//! Train a frozen value model on labeled steps by MSE regression and report
//! held-out classification quality at threshold 0.5.

use vem_rl::annotator::{annotate_oracle, ells_in_dataset_order};
use vem_rl::dataset::{collect, BehaviorPolicyConfig};
use vem_rl::env::{generate_env, GeneratorConfig, Oracle};
use vem_rl::vem::{
    classify_metrics, encode, encode_labeled, train_vem, EncoderConfig, FrozenValueModel,
    ModelKind, VemTrainConfig,
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

    let train = collect(&env, &oracle, &behavior, 500, 7).unwrap();
    let labels = annotate_oracle(&env, &oracle, &train);
    let ells = ells_in_dataset_order(&train, &labels).unwrap();
    let (xs, ys) = encode_labeled(&env, &train, &ells, &enc);
    println!("train steps : {}", xs.len());

    for kind in [ModelKind::Tabular, ModelKind::Mlp] {
        let vcfg = VemTrainConfig {
            kind,
            epochs: 150,
            batch_size: 256,
            learning_rate: 0.01,
            adam: true,
            hidden: 32,
            ..VemTrainConfig::default()
        };
        let (model, diag) = train_vem(&xs, &ys, &vcfg).unwrap();
        let frozen = FrozenValueModel::freeze(model);

        // Fresh held-out episodes scored against the oracle.
        let test = collect(&env, &oracle, &behavior, 100, 9000).unwrap();
        let test_labels = annotate_oracle(&env, &oracle, &test);
        let test_ells = ells_in_dataset_order(&test, &test_labels).unwrap();
        let preds: Vec<f64> = test
            .iter()
            .flat_map(|t| t.steps.iter())
            .map(|rec| {
                let f = encode(&env, &rec.state(), &rec.action(), &enc);
                frozen.predict_features(&f).unwrap()
            })
            .collect();
        let m = classify_metrics(&preds, &test_ells, 0.5);
        println!(
            "{kind:?}: final mse {:.4}  held-out f1 {:.3} acc {:.3} p {:.3} r {:.3}",
            diag.final_mse,
            m.f1,
            m.accuracy,
            m.precision,
            m.recall
        );
    }
}
