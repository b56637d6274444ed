//! End-to-end pipeline: generate -> collect -> annotate -> train-vem ->
//! train-policy -> evaluate -> theory-check, driven by one TOML config and
//! one global seed, with content-addressed stage caching.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::{self, Fallback, LlmConfig};
use crate::dataset::{self, BehaviorPolicyConfig, Trajectory};
use crate::env::{generate_env, EnvSpec, GeneratorConfig, Oracle};
use crate::eval::{self, MatcherConfig};
use crate::policy::{self, PolicyParams, PpoConfig, TemplateSpace};
use crate::theory::{self, BoundCase, OraclePolicy};
use crate::util::{content_hash_hex, derive_seed};
use crate::vem::{self, EncoderConfig, FrozenValueModel, ModelKind, VemTrainConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),
}

impl PipelineError {
    fn stage(stage: &'static str, e: impl std::fmt::Display) -> PipelineError {
        PipelineError::Stage { stage, message: e.to_string() }
    }
}

fn de_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvSection {
    pub screens: usize,
    pub tasks: usize,
    pub distractor_prob: f64,
    pub gamma: f64,
    pub history_k: usize,
    pub max_steps: u32,
    pub typing_task_fraction: f64,
    /// Overrides the derived stage seed when set.
    pub seed: Option<u64>,
}

impl Default for EnvSection {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        EnvSection {
            screens: g.screens,
            tasks: g.tasks,
            distractor_prob: g.distractor_prob,
            gamma: g.gamma,
            history_k: g.history_k,
            max_steps: g.max_steps,
            typing_task_fraction: g.typing_task_fraction,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectSection {
    pub episodes: u64,
    /// scripted_optimal | epsilon_scripted | uniform_random | mixture
    pub behavior: String,
    pub epsilon: f64,
    /// Weights for behavior = "mixture": scripted vs uniform components.
    pub mixture_scripted: f64,
    pub mixture_uniform: f64,
}

impl Default for CollectSection {
    fn default() -> Self {
        CollectSection {
            episodes: 100,
            behavior: "epsilon_scripted".into(),
            epsilon: 0.3,
            mixture_scripted: 0.1,
            mixture_uniform: 0.9,
        }
    }
}

impl CollectSection {
    pub fn behavior_config(&self) -> Result<BehaviorPolicyConfig, PipelineError> {
        Ok(match self.behavior.as_str() {
            "scripted_optimal" => BehaviorPolicyConfig::ScriptedOptimal,
            "epsilon_scripted" => {
                BehaviorPolicyConfig::EpsilonScripted { epsilon: self.epsilon }
            }
            "uniform_random" => BehaviorPolicyConfig::UniformRandom,
            "mixture" => BehaviorPolicyConfig::Mixture {
                components: vec![
                    (BehaviorPolicyConfig::ScriptedOptimal, self.mixture_scripted),
                    (BehaviorPolicyConfig::UniformRandom, self.mixture_uniform),
                ],
            },
            other => {
                return Err(PipelineError::Config(format!(
                    "unknown behavior kind: {other}"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotateSection {
    /// oracle | noisy | llm | replay
    pub mode: String,
    pub agreement_rate: f64,
    pub transcript: Option<String>,
    pub fallback: String,
    pub endpoint_url: Option<String>,
    pub model_name: Option<String>,
    pub temperature: f64,
    pub api_key_env: String,
}

impl Default for AnnotateSection {
    fn default() -> Self {
        AnnotateSection {
            mode: "oracle".into(),
            agreement_rate: 0.9,
            transcript: None,
            fallback: "skip".into(),
            endpoint_url: None,
            model_name: None,
            temperature: 0.0,
            api_key_env: "ANNOTATOR_API_KEY".into(),
        }
    }
}

impl AnnotateSection {
    fn fallback(&self) -> Result<Fallback, PipelineError> {
        Ok(match self.fallback.as_str() {
            "skip" => Fallback::Skip,
            "oracle" => Fallback::Oracle,
            "ell0" => Fallback::Ell0,
            other => {
                return Err(PipelineError::Config(format!("unknown fallback: {other}")))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VemSection {
    /// tabular | linear | mlp
    pub kind: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub hidden: usize,
    pub grid: usize,
    pub task_buckets: usize,
    pub history_k: Option<usize>,
    /// Task-level train fraction for held-out metrics.
    pub train_fraction: f64,
}

impl Default for VemSection {
    fn default() -> Self {
        VemSection {
            kind: "mlp".into(),
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            l2: 0.0,
            hidden: 64,
            grid: 14,
            task_buckets: 16,
            history_k: None,
            train_fraction: 0.7,
        }
    }
}

impl VemSection {
    pub fn model_kind(&self) -> Result<ModelKind, PipelineError> {
        Ok(match self.kind.as_str() {
            "tabular" => ModelKind::Tabular,
            "linear" => ModelKind::Linear,
            "mlp" => ModelKind::Mlp,
            other => {
                return Err(PipelineError::Config(format!("unknown vem kind: {other}")))
            }
        })
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            grid: self.grid,
            task_buckets: self.task_buckets,
            history_k: self.history_k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicySection {
    /// tabular | linear | mlp
    pub kind: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_epsilon: f64,
    pub entropy_coef: f64,
    pub actions_per_state: usize,
    pub hidden: usize,
    pub template_grid: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        let p = PpoConfig::default();
        PolicySection {
            kind: "tabular".into(),
            epochs: p.epochs,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            clip_epsilon: p.clip_epsilon,
            entropy_coef: p.entropy_coef,
            actions_per_state: p.actions_per_state,
            hidden: 32,
            template_grid: policy::DEFAULT_TEMPLATE_GRID,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub max_steps: u32,
    pub seeds: Vec<u64>,
    pub train_fraction: f64,
    pub click_distance_threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            max_steps: 10,
            seeds: vec![0, 1, 2, 3, 4],
            train_fraction: 0.7,
            click_distance_threshold: 0.14,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TheorySection {
    pub tol: f64,
    pub noise_levels: Vec<f64>,
    pub noise_seeds: u64,
    #[serde(default = "de_true")]
    pub enabled: bool,
}

impl Default for TheorySection {
    fn default() -> Self {
        TheorySection {
            tol: 1e-6,
            noise_levels: vec![0.0, 0.1, 0.2],
            noise_seeds: 10,
            enabled: true,
        }
    }
}

/// The full experiment config, parsed from a `[section] key = value` file
/// (TOML grammar).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: Option<String>,
    pub env: EnvSection,
    pub collect: CollectSection,
    pub annotate: AnnotateSection,
    pub vem: VemSection,
    pub policy: PolicySection,
    pub eval: EvalSection,
    pub theory: TheorySection,
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<ExperimentConfig, PipelineError> {
        toml::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig, PipelineError> {
        let s = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&s)
    }

    /// Stage seed derivation: `hash(global_seed, stage_name)`.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn config_hash(&self) -> String {
        content_hash_hex(serde_json::to_string(self).expect("serializes").as_bytes())
    }
}

pub const STAGES: [&str; 7] = [
    "generate-env",
    "collect",
    "annotate",
    "train-vem",
    "train-policy",
    "evaluate",
    "theory-check",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Hash of (config section, stage seed, input artifact hashes).
    pub input_hash: String,
    pub outputs: BTreeMap<String, String>,
    pub wall_ms: u64,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub stages: Vec<StageRecord>,
}

fn file_hash(path: &Path) -> Result<String, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingArtifact(path.to_path_buf()));
    }
    Ok(content_hash_hex(&fs::read(path)?))
}

fn stage_input_hash(section_json: &str, seed: u64, inputs: &[&Path]) -> Result<String, PipelineError> {
    let mut acc = format!("{section_json}|{seed}");
    for p in inputs {
        acc.push('|');
        acc.push_str(&file_hash(p)?);
    }
    Ok(content_hash_hex(acc.as_bytes()))
}

/// Loads a previous manifest's record for a stage, if present.
fn prior_record(out_dir: &Path, name: &str) -> Option<StageRecord> {
    let manifest: RunManifest =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).ok()?).ok()?;
    manifest.stages.into_iter().find(|s| s.name == name)
}

fn outputs_intact(out_dir: &Path, rec: &StageRecord) -> bool {
    rec.outputs.iter().all(|(f, h)| {
        file_hash(&out_dir.join(f)).map(|now| now == *h).unwrap_or(false)
    })
}

struct StageCtx<'a> {
    cfg: &'a ExperimentConfig,
    out_dir: &'a Path,
    force: bool,
    records: Vec<StageRecord>,
}

impl StageCtx<'_> {
    /// Runs or cache-skips one stage. `body` must write every file listed
    /// in `outputs`.
    fn stage(
        &mut self,
        name: &'static str,
        section_json: String,
        inputs: &[&Path],
        outputs: &[&str],
        body: impl FnOnce() -> Result<(), PipelineError>,
    ) -> Result<(), PipelineError> {
        let seed = self.cfg.stage_seed(name);
        let input_hash = stage_input_hash(&section_json, seed, inputs)?;
        if !self.force {
            if let Some(prev) = prior_record(self.out_dir, name) {
                if prev.input_hash == input_hash && outputs_intact(self.out_dir, &prev) {
                    self.records.push(StageRecord { cached: true, ..prev });
                    return Ok(());
                }
            }
        }
        let start = Instant::now();
        body()?;
        let wall_ms = start.elapsed().as_millis() as u64;
        let mut out_hashes = BTreeMap::new();
        for f in outputs {
            out_hashes.insert(f.to_string(), file_hash(&self.out_dir.join(f))?);
        }
        self.records.push(StageRecord {
            name: name.to_string(),
            input_hash,
            outputs: out_hashes,
            wall_ms,
            cached: false,
        });
        Ok(())
    }
}

fn sec_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("section serializes")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VemMetricsArtifact {
    pub train_mse: f64,
    pub held_out: Option<crate::vem::ClassificationMetrics>,
    pub train_metrics: crate::vem::ClassificationMetrics,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub offline: eval::EvalReport,
    pub online: eval::EvalReport,
    pub online_bc: eval::EvalReport,
    pub online_oracle: eval::EvalReport,
}

/// Runs the full pipeline, writing artifacts and `manifest.json` under the
/// output directory. Stages with unchanged inputs and intact outputs are
/// skipped.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    force: bool,
) -> Result<RunManifest, PipelineError> {
    fs::create_dir_all(out_dir)?;
    let mut ctx = StageCtx { cfg, out_dir, force, records: Vec::new() };

    let env_path = out_dir.join("env.json");
    let data_path = out_dir.join("data.jsonl");
    let labels_path = out_dir.join("labels.jsonl");
    let vem_path = out_dir.join("vem.bin");
    let policy_path = out_dir.join("policy.bin");

    // generate-env
    {
        let seed = cfg.env.seed.unwrap_or_else(|| cfg.stage_seed("generate-env"));
        let gen = GeneratorConfig {
            screens: cfg.env.screens,
            tasks: cfg.env.tasks,
            distractor_prob: cfg.env.distractor_prob,
            gamma: cfg.env.gamma,
            history_k: cfg.env.history_k,
            max_steps: cfg.env.max_steps,
            typing_task_fraction: cfg.env.typing_task_fraction,
            ..GeneratorConfig::default()
        };
        let section = sec_json(&(&cfg.env, seed));
        let env_path = env_path.clone();
        ctx.stage("generate-env", section, &[], &["env.json"], move || {
            let env = generate_env(&gen, seed)
                .map_err(|e| PipelineError::stage("generate-env", e))?;
            fs::write(&env_path, env.to_json())?;
            Ok(())
        })?;
    }
    let env = load_env(&env_path)?;
    let oracle = Oracle::build(&env);

    // collect
    {
        let behavior = cfg.collect.behavior_config()?;
        let episodes = cfg.collect.episodes;
        let seed = cfg.stage_seed("collect");
        let section = sec_json(&cfg.collect);
        let env_ref = &env;
        let oracle_ref = &oracle;
        let data_path = data_path.clone();
        let stats_path = out_dir.join("data_manifest.json");
        ctx.stage(
            "collect",
            section,
            &[&env_path],
            &["data.jsonl", "data_manifest.json"],
            move || {
                let trajs = dataset::collect(env_ref, oracle_ref, &behavior, episodes, seed)
                    .map_err(|e| PipelineError::stage("collect", e))?;
                dataset::write_jsonl(&trajs, &data_path)
                    .map_err(|e| PipelineError::stage("collect", e))?;
                let stats = dataset::stats(&trajs, None);
                fs::write(&stats_path, serde_json::to_string_pretty(&stats).unwrap())?;
                Ok(())
            },
        )?;
    }
    let trajs = dataset::read_jsonl(&data_path)
        .map_err(|e| PipelineError::stage("collect", e))?;

    // annotate
    {
        let section = sec_json(&cfg.annotate);
        let seed = cfg.stage_seed("annotate");
        let env_ref = &env;
        let oracle_ref = &oracle;
        let trajs_ref = &trajs;
        let annotate = cfg.annotate.clone();
        let labels_path = labels_path.clone();
        let out_dir_buf = out_dir.to_path_buf();
        ctx.stage(
            "annotate",
            section,
            &[&env_path, &data_path],
            &["labels.jsonl"],
            move || {
                let labels = match annotate.mode.as_str() {
                    "oracle" => annotator::annotate_oracle(env_ref, oracle_ref, trajs_ref),
                    "noisy" => {
                        let base = annotator::annotate_oracle(env_ref, oracle_ref, trajs_ref);
                        annotator::annotate_noisy(&base, annotate.agreement_rate, seed)
                            .map_err(|e| PipelineError::stage("annotate", e))?
                    }
                    "llm" => {
                        let transcript = out_dir_buf.join(
                            annotate.transcript.as_deref().unwrap_or("transcript.jsonl"),
                        );
                        let llm = LlmConfig {
                            endpoint_url: annotate
                                .endpoint_url
                                .clone()
                                .unwrap_or_else(|| LlmConfig::default().endpoint_url),
                            model_name: annotate
                                .model_name
                                .clone()
                                .unwrap_or_else(|| LlmConfig::default().model_name),
                            temperature: annotate.temperature,
                            api_key_env: annotate.api_key_env.clone(),
                            max_retries: 3,
                            fallback: annotate.fallback()?,
                        };
                        annotator::annotate_llm(
                            &llm,
                            env_ref,
                            oracle_ref,
                            trajs_ref,
                            annotator::DEFAULT_PROMPT_TEMPLATE,
                            &transcript,
                        )
                        .map_err(|e| PipelineError::stage("annotate", e))?
                    }
                    "replay" => {
                        let transcript = out_dir_buf.join(
                            annotate.transcript.as_deref().unwrap_or("transcript.jsonl"),
                        );
                        let entries = annotator::read_transcript(&transcript)
                            .map_err(|e| PipelineError::stage("annotate", e))?;
                        annotator::annotate_replay(
                            env_ref,
                            oracle_ref,
                            trajs_ref,
                            &entries,
                            annotate.fallback()?,
                        )
                        .map_err(|e| PipelineError::stage("annotate", e))?
                    }
                    other => {
                        return Err(PipelineError::Config(format!(
                            "unknown annotate mode: {other}"
                        )))
                    }
                };
                annotator::write_labels(&labels, &labels_path)
                    .map_err(|e| PipelineError::stage("annotate", e))?;
                Ok(())
            },
        )?;
    }
    let labels = annotator::read_labels(&labels_path)
        .map_err(|e| PipelineError::stage("annotate", e))?;

    // train-vem
    {
        let section = sec_json(&cfg.vem);
        let seed = cfg.stage_seed("train-vem");
        let env_ref = &env;
        let trajs_ref = &trajs;
        let labels_ref = &labels;
        let vem_cfg = cfg.vem.clone();
        let vem_path = vem_path.clone();
        let loss_path = out_dir.join("vem_loss.csv");
        let metrics_path = out_dir.join("vem_metrics.json");
        ctx.stage(
            "train-vem",
            section,
            &[&env_path, &data_path, &labels_path],
            &["vem.bin", "vem_loss.csv", "vem_metrics.json"],
            move || {
                let artifact = train_vem_stage(env_ref, trajs_ref, labels_ref, &vem_cfg, seed, &vem_path)?;
                fs::write(&metrics_path, serde_json::to_string_pretty(&artifact.1).unwrap())?;
                let mut csv = String::from("epoch,mse\n");
                for (i, l) in artifact.0.loss_curve.iter().enumerate() {
                    csv.push_str(&format!("{i},{l}\n"));
                }
                fs::write(&loss_path, csv)?;
                Ok(())
            },
        )?;
    }
    let frozen = FrozenValueModel::load(&vem_path)
        .map_err(|e| PipelineError::stage("train-vem", e))?;

    // train-policy
    {
        let section = sec_json(&cfg.policy);
        let seed = cfg.stage_seed("train-policy");
        let env_ref = &env;
        let trajs_ref = &trajs;
        let frozen_ref = &frozen;
        let pol_cfg = cfg.policy.clone();
        let encoder = cfg.vem.encoder();
        let policy_path = policy_path.clone();
        let diag_path = out_dir.join("policy_diag.csv");
        ctx.stage(
            "train-policy",
            section,
            &[&env_path, &data_path, &vem_path],
            &["policy.bin", "policy_diag.csv"],
            move || {
                let (trained, report) =
                    train_policy_stage(env_ref, trajs_ref, frozen_ref, &pol_cfg, &encoder, seed)?;
                trained
                    .save(&policy_path)
                    .map_err(|e| PipelineError::stage("train-policy", e))?;
                fs::write(&diag_path, report.to_csv())?;
                Ok(())
            },
        )?;
    }
    let trained = PolicyParams::load(&policy_path)
        .map_err(|e| PipelineError::stage("train-policy", e))?;

    // evaluate
    {
        let section = sec_json(&cfg.eval);
        let seed = cfg.stage_seed("evaluate");
        let env_ref = &env;
        let oracle_ref = &oracle;
        let trajs_ref = &trajs;
        let trained_ref = &trained;
        let eval_cfg = cfg.eval.clone();
        let ts = TemplateSpace::with_grid(&env, cfg.policy.template_grid);
        let report_path = out_dir.join("eval_report.json");
        let csv_path = out_dir.join("eval.csv");
        ctx.stage(
            "evaluate",
            section,
            &[&env_path, &data_path, &policy_path],
            &["eval_report.json", "eval.csv"],
            move || {
                let artifact = evaluate_stage(
                    env_ref, oracle_ref, trajs_ref, trained_ref, &ts, &eval_cfg, seed,
                )?;
                fs::write(&report_path, serde_json::to_string_pretty(&artifact).unwrap())?;
                let mut csv = String::from(eval::EvalReport::csv_header());
                csv.push('\n');
                csv.push_str(&artifact.offline.csv_row("vem_policy_offline", "synthetic"));
                csv.push('\n');
                csv.push_str(&artifact.online.csv_row("vem_policy_online", "synthetic"));
                csv.push('\n');
                csv.push_str(&artifact.online_bc.csv_row("bc_online", "synthetic"));
                csv.push('\n');
                csv.push_str(&artifact.online_oracle.csv_row("oracle_online", "synthetic"));
                csv.push('\n');
                fs::write(&csv_path, csv)?;
                Ok(())
            },
        )?;
    }

    // theory-check
    if cfg.theory.enabled {
        let section = sec_json(&cfg.theory);
        let env_ref = &env;
        let oracle_ref = &oracle;
        let trajs_ref = &trajs;
        let theory_cfg = cfg.theory.clone();
        let template_grid = cfg.policy.template_grid;
        let encoder = cfg.vem.encoder();
        let bound_path = out_dir.join("bound_report.json");
        let seed = cfg.stage_seed("theory-check");
        ctx.stage(
            "theory-check",
            section,
            &[&env_path, &data_path],
            &["bound_report.json"],
            move || {
                let report = theory_stage(
                    env_ref,
                    oracle_ref,
                    trajs_ref,
                    &theory_cfg,
                    template_grid,
                    &encoder,
                    seed,
                )?;
                fs::write(&bound_path, serde_json::to_string_pretty(&report).unwrap())?;
                Ok(())
            },
        )?;
    }

    let manifest = RunManifest {
        config_hash: cfg.config_hash(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        stages: ctx.records,
    };
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )?;
    Ok(manifest)
}

pub fn load_env(path: &Path) -> Result<EnvSpec, PipelineError> {
    let s = fs::read_to_string(path)?;
    EnvSpec::from_json(&s).map_err(|e| PipelineError::stage("generate-env", e))
}

/// Trains the value model on encoded features, with held-out-by-task
/// classification metrics when the dataset spans enough tasks.
pub fn train_vem_stage(
    env: &EnvSpec,
    trajs: &[Trajectory],
    labels: &[annotator::Label],
    cfg: &VemSection,
    seed: u64,
    out_path: &Path,
) -> Result<(vem::TrainReport, VemMetricsArtifact), PipelineError> {
    let encoder = cfg.encoder();
    let ells = annotator::ells_in_dataset_order(trajs, labels)
        .map_err(|e| PipelineError::stage("train-vem", e))?;
    let train_cfg = VemTrainConfig {
        kind: cfg.model_kind()?,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        seed,
        l2: cfg.l2,
        hidden: cfg.hidden,
        ..VemTrainConfig::default()
    };

    // Held-out-by-task split when possible; otherwise train on everything.
    let split = dataset::split(trajs, cfg.train_fraction, seed).ok();
    let (train_trajs, test_trajs): (Vec<Trajectory>, Vec<Trajectory>) = match &split {
        Some((tr, te)) => (tr.clone(), te.clone()),
        None => (trajs.to_vec(), Vec::new()),
    };
    let label_for = |subset: &[Trajectory]| -> Vec<u8> {
        let by_key: std::collections::HashMap<String, u8> = trajs
            .iter()
            .flat_map(|t| t.steps.iter())
            .zip(&ells)
            .map(|(r, e)| (r.step_key(), *e))
            .collect();
        subset
            .iter()
            .flat_map(|t| t.steps.iter())
            .map(|r| by_key[&r.step_key()])
            .collect()
    };
    let train_ells = label_for(&train_trajs);
    let test_ells = label_for(&test_trajs);
    let (xs, ys) = vem::encode_labeled(env, &train_trajs, &train_ells, &encoder);
    let (model, report) =
        vem::train_vem(&xs, &ys, &train_cfg).map_err(|e| PipelineError::stage("train-vem", e))?;

    let predict = |model: &vem::ValueModel, xs: &[Vec<f64>]| -> Vec<f64> {
        xs.iter()
            .map(|x| model.predict_features(x).expect("dims"))
            .collect()
    };
    let train_metrics = vem::classify_metrics(&predict(&model, &xs), &ys, 0.5);
    let held_out = if test_trajs.is_empty() {
        None
    } else {
        let (txs, tys) = vem::encode_labeled(env, &test_trajs, &test_ells, &encoder);
        Some(vem::classify_metrics(&predict(&model, &txs), &tys, 0.5))
    };
    let artifact = VemMetricsArtifact {
        train_mse: report.final_mse,
        held_out,
        train_metrics,
        n_train: ys.len(),
        n_test: test_ells.len(),
    };
    let frozen = FrozenValueModel::freeze(model);
    frozen
        .save(out_path)
        .map_err(|e| PipelineError::stage("train-vem", e))?;
    Ok((report, artifact))
}

pub fn train_policy_stage(
    env: &EnvSpec,
    trajs: &[Trajectory],
    frozen: &FrozenValueModel,
    cfg: &PolicySection,
    encoder: &EncoderConfig,
    seed: u64,
) -> Result<(PolicyParams, policy::TrainPolicyReport), PipelineError> {
    let ts = TemplateSpace::with_grid(env, cfg.template_grid);
    let states: Vec<crate::env::State> = trajs
        .iter()
        .flat_map(|t| t.steps.iter().map(|r| r.state()))
        .collect();
    let ppo = PpoConfig {
        clip_epsilon: cfg.clip_epsilon,
        actions_per_state: cfg.actions_per_state,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        entropy_coef: cfg.entropy_coef,
        seed,
        encoder: encoder.clone(),
    };
    let init = match cfg.kind.as_str() {
        "tabular" => PolicyParams::uniform_tabular(ts.len()),
        "linear" => PolicyParams::zero_linear(ts.len(), env, encoder.clone()),
        "mlp" => PolicyParams::zero_mlp(
            ts.len(),
            cfg.hidden,
            env,
            encoder.clone(),
            derive_seed(seed, "policy-init"),
        ),
        other => {
            return Err(PipelineError::Config(format!("unknown policy kind: {other}")))
        }
    };
    policy::train_policy(&states, frozen, env, &ts, init, &ppo)
        .map_err(|e| PipelineError::stage("train-policy", e))
}

pub fn evaluate_stage(
    env: &EnvSpec,
    oracle: &Oracle,
    trajs: &[Trajectory],
    trained: &PolicyParams,
    ts: &TemplateSpace,
    cfg: &EvalSection,
    seed: u64,
) -> Result<EvalArtifact, PipelineError> {
    let matcher = MatcherConfig {
        click_distance_threshold: cfg.click_distance_threshold,
        ..MatcherConfig::default()
    };
    let (_, test) = dataset::split(trajs, cfg.train_fraction, seed)
        .unwrap_or_else(|_| (trajs.to_vec(), trajs.to_vec()));
    let offline = eval::offline_eval(trained, env, ts, &test, &matcher)
        .map_err(|e| PipelineError::stage("evaluate", e))?;
    let task_ids: Vec<String> = env.tasks.iter().map(|t| t.task_id.clone()).collect();
    let online = eval::online_eval(
        trained, env, ts, oracle, &task_ids, cfg.max_steps, &cfg.seeds,
    )
    .map_err(|e| PipelineError::stage("evaluate", e))?;
    let bc = policy::train_bc(env, ts, trajs, 0.5);
    let online_bc = eval::online_eval(&bc, env, ts, oracle, &task_ids, cfg.max_steps, &cfg.seeds)
        .map_err(|e| PipelineError::stage("evaluate", e))?;
    let oracle_policy = OraclePolicy { oracle };
    let online_oracle = eval::online_eval(
        &oracle_policy, env, ts, oracle, &task_ids, cfg.max_steps, &cfg.seeds,
    )
    .map_err(|e| PipelineError::stage("evaluate", e))?;
    Ok(EvalArtifact { offline, online, online_bc, online_oracle })
}

pub fn theory_stage(
    env: &EnvSpec,
    oracle: &Oracle,
    trajs: &[Trajectory],
    cfg: &TheorySection,
    template_grid: usize,
    encoder: &EncoderConfig,
    seed: u64,
) -> Result<theory::SuiteReport, PipelineError> {
    let ts = TemplateSpace::with_grid(env, template_grid);
    let graph = theory::StateGraph::build(env, oracle, &ts);
    let exact = theory::value_iteration(&graph, env.gamma, cfg.tol)
        .map_err(|e| PipelineError::stage("theory-check", e))?;
    let beta = dataset::BehaviorPolicy {
        env,
        oracle,
        config: BehaviorPolicyConfig::EpsilonScripted { epsilon: 0.3 },
    };
    let mut cases: Vec<(String, FrozenValueModel, PolicyParams)> = Vec::new();
    for level in &cfg.noise_levels {
        for s in 0..cfg.noise_seeds.max(1) {
            let noise_seed = derive_seed(seed, &format!("noise-{s}"));
            let vem = if *level == 0.0 {
                exact.to_frozen()
            } else {
                theory::noisy_q(&exact, *level, noise_seed)
            };
            let support = beta_support(env, &ts, &graph, &beta);
            let pi_hat =
                policy::greedy_policy_from_q(&vem, env, &ts, encoder, Some(&support), 1_000_000)
                    .map_err(|e| PipelineError::stage("theory-check", e))?;
            cases.push((format!("{}-n{level}-s{s}", env.seed), vem, pi_hat));
        }
    }
    let bound_cases: Vec<BoundCase<'_>> = cases
        .iter()
        .map(|(id, vem, pi_hat)| BoundCase {
            env_id: id.clone(),
            env,
            ts: &ts,
            graph: &graph,
            exact: &exact,
            vem,
            encoder,
            pi_hat,
            beta: &beta,
            dataset: trajs,
        })
        .collect();
    theory::verify_bound(&bound_cases, cfg.tol, cfg.tol)
        .map_err(|e| PipelineError::stage("theory-check", e))
}

/// Support mask of a behavior policy over the graph's states.
pub fn beta_support(
    env: &EnvSpec,
    ts: &TemplateSpace,
    graph: &theory::StateGraph,
    beta: &dyn policy::ActionPolicy,
) -> BTreeMap<u64, Vec<bool>> {
    graph
        .nodes
        .iter()
        .filter(|n| !n.done)
        .map(|n| {
            let probs = beta.action_probs(env, ts, &n.state);
            (n.key, probs.iter().map(|p| *p > 1e-12).collect())
        })
        .collect()
}

/// Consolidated Markdown + CSV report over whatever artifacts exist in a
/// run directory. Missing artifacts are listed, not fatal.
pub fn report(out_dir: &Path) -> Result<(String, String), PipelineError> {
    let mut md = String::from("# Run report\n\n");
    let mut csv = String::from(eval::EvalReport::csv_header());
    csv.push('\n');
    let mut missing = Vec::new();

    match fs::read_to_string(out_dir.join("manifest.json")) {
        Ok(s) => {
            if let Ok(m) = serde_json::from_str::<RunManifest>(&s) {
                md.push_str(&format!(
                    "Config hash: `{}`  \nTool version: {}\n\n## Stages\n\n",
                    m.config_hash, m.tool_version
                ));
                md.push_str("| stage | wall ms | cached |\n|---|---|---|\n");
                for st in &m.stages {
                    md.push_str(&format!(
                        "| {} | {} | {} |\n",
                        st.name, st.wall_ms, st.cached
                    ));
                }
                md.push('\n');
            }
        }
        Err(_) => missing.push("manifest.json"),
    }

    match fs::read_to_string(out_dir.join("vem_metrics.json")) {
        Ok(s) => {
            if let Ok(v) = serde_json::from_str::<VemMetricsArtifact>(&s) {
                md.push_str("## Value model\n\n");
                md.push_str(&format!(
                    "Train MSE: {:.6} over {} examples.\n\n",
                    v.train_mse, v.n_train
                ));
                md.push_str("| split | precision | recall | f1 | accuracy |\n|---|---|---|---|---|\n");
                let t = &v.train_metrics;
                md.push_str(&format!(
                    "| train | {:.2} | {:.2} | {:.2} | {:.2} |\n",
                    t.precision, t.recall, t.f1, t.accuracy
                ));
                if let Some(h) = &v.held_out {
                    md.push_str(&format!(
                        "| held-out | {:.2} | {:.2} | {:.2} | {:.2} |\n",
                        h.precision, h.recall, h.f1, h.accuracy
                    ));
                }
                md.push('\n');
            }
        }
        Err(_) => missing.push("vem_metrics.json"),
    }

    match fs::read_to_string(out_dir.join("eval_report.json")) {
        Ok(s) => {
            if let Ok(e) = serde_json::from_str::<EvalArtifact>(&s) {
                md.push_str("## Evaluation\n\n");
                md.push_str("| method | step_sr | task_sr | avg_step_length |\n|---|---|---|---|\n");
                for (name, r) in [
                    ("offline", &e.offline),
                    ("online", &e.online),
                    ("online (bc)", &e.online_bc),
                    ("online (oracle)", &e.online_oracle),
                ] {
                    md.push_str(&format!(
                        "| {name} | {:.4} | {:.4} | {:.2} |\n",
                        r.step_sr, r.task_sr, r.avg_step_length
                    ));
                }
                md.push('\n');
                csv.push_str(&e.offline.csv_row("vem_policy_offline", "synthetic"));
                csv.push('\n');
                csv.push_str(&e.online.csv_row("vem_policy_online", "synthetic"));
                csv.push('\n');
                csv.push_str(&e.online_bc.csv_row("bc_online", "synthetic"));
                csv.push('\n');
                csv.push_str(&e.online_oracle.csv_row("oracle_online", "synthetic"));
                csv.push('\n');
            }
        }
        Err(_) => missing.push("eval_report.json"),
    }

    match fs::read_to_string(out_dir.join("bound_report.json")) {
        Ok(s) => {
            if let Ok(b) = serde_json::from_str::<theory::SuiteReport>(&s) {
                md.push_str("## Performance bound\n\n");
                md.push_str(&format!(
                    "Fitted c: {}  \nTheoretical c: {:.2}\n\n",
                    b.c_fit.map_or("n/a".into(), |c| format!("{c:.4}")),
                    b.c_theory
                ));
                md.push_str("| case | epsilon | shift | J* | J_hat | gap |\n|---|---|---|---|---|---|\n");
                for r in &b.reports {
                    md.push_str(&format!(
                        "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
                        r.env_id, r.epsilon, r.shift, r.j_star, r.j_hat, r.gap
                    ));
                }
                md.push('\n');
            }
        }
        Err(_) => missing.push("bound_report.json"),
    }

    if !missing.is_empty() {
        md.push_str("## Missing artifacts\n\n");
        for m in &missing {
            md.push_str(&format!("- {m}\n"));
        }
    }
    Ok((md, csv))
}
