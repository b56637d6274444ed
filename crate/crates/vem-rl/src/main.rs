use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vem_rl::annotator;
use vem_rl::dataset;
use vem_rl::env::{generate_env, GeneratorConfig, Oracle};
use vem_rl::pipeline::{self, ExperimentConfig, PipelineError};
use vem_rl::policy::{PolicyParams, TemplateSpace};
use vem_rl::vem::FrozenValueModel;

#[derive(Parser)]
#[command(name = "vem-rl", version, about = "Environment-free RL pipeline on synthetic GUI tasks")]
struct Cli {
    /// Experiment config file (TOML, [section] key = value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// error | warn | info | debug
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic GUI environment (env.json).
    GenerateEnv,
    /// Roll out the behavior policy over the environment (data.jsonl).
    Collect,
    /// Label every dataset step (labels.jsonl).
    Annotate {
        /// oracle | noisy | llm | replay; overrides the config.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Train the value model on labeled steps (vem.bin).
    TrainVem,
    /// Optimize the policy against the frozen value model (policy.bin).
    TrainPolicy {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        vem: Option<PathBuf>,
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Offline and online evaluation (eval_report.json, eval.csv).
    Evaluate {
        /// offline | online | both
        #[arg(long, default_value = "both")]
        mode: String,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Exact-solver bound verification (bound_report.json).
    TheoryCheck,
    /// Full pipeline with content-addressed stage caching.
    Run {
        /// Re-run every stage even when cached outputs are intact.
        #[arg(long)]
        force: bool,
    },
    /// Consolidated Markdown + CSV report over existing artifacts.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.collect.behavior_config()?;
    cfg.vem.model_kind()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ PipelineError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: &Cli, cfg: &ExperimentConfig) -> Result<(), PipelineError> {
    let out_dir: &Path = cfg
        .out_dir
        .as_deref()
        .map(Path::new)
        .unwrap_or(&cli.out_dir);
    fs::create_dir_all(out_dir)?;
    let info = cli.log_level != "error" && cli.log_level != "warn";
    let env_path = out_dir.join("env.json");
    let data_path = out_dir.join("data.jsonl");
    let labels_path = out_dir.join("labels.jsonl");
    let vem_path = out_dir.join("vem.bin");
    let policy_path = out_dir.join("policy.bin");

    match &cli.command {
        Command::GenerateEnv => {
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
            let env = generate_env(&gen, seed)
                .map_err(|e| PipelineError::Stage { stage: "generate-env", message: e.to_string() })?;
            fs::write(&env_path, env.to_json())?;
            if info {
                eprintln!("wrote {}", env_path.display());
            }
        }
        Command::Collect => {
            let env = pipeline::load_env(&env_path)?;
            let oracle = Oracle::build(&env);
            let behavior = cfg.collect.behavior_config()?;
            let trajs = dataset::collect(
                &env,
                &oracle,
                &behavior,
                cfg.collect.episodes,
                cfg.stage_seed("collect"),
            )
            .map_err(|e| PipelineError::Stage { stage: "collect", message: e.to_string() })?;
            dataset::write_jsonl(&trajs, &data_path)
                .map_err(|e| PipelineError::Stage { stage: "collect", message: e.to_string() })?;
            if info {
                let s = dataset::stats(&trajs, None);
                eprintln!("wrote {} ({} episodes, {} steps)", data_path.display(), s.episodes, s.steps);
            }
        }
        Command::Annotate { mode } => {
            let mut annotate_cfg = cfg.clone();
            if let Some(m) = mode {
                annotate_cfg.annotate.mode = m.clone();
            }
            let env = pipeline::load_env(&env_path)?;
            let oracle = Oracle::build(&env);
            let trajs = dataset::read_jsonl(&data_path)
                .map_err(|e| PipelineError::Stage { stage: "annotate", message: e.to_string() })?;
            let seed = annotate_cfg.stage_seed("annotate");
            let a = &annotate_cfg.annotate;
            let labels = match a.mode.as_str() {
                "oracle" => annotator::annotate_oracle(&env, &oracle, &trajs),
                "noisy" => {
                    let base = annotator::annotate_oracle(&env, &oracle, &trajs);
                    annotator::annotate_noisy(&base, a.agreement_rate, seed)
                        .map_err(|e| PipelineError::Stage { stage: "annotate", message: e.to_string() })?
                }
                "replay" => {
                    let transcript =
                        out_dir.join(a.transcript.as_deref().unwrap_or("transcript.jsonl"));
                    let entries = annotator::read_transcript(&transcript).map_err(|e| {
                        PipelineError::Stage { stage: "annotate", message: e.to_string() }
                    })?;
                    annotator::annotate_replay(
                        &env,
                        &oracle,
                        &trajs,
                        &entries,
                        annotator::Fallback::Skip,
                    )
                    .map_err(|e| PipelineError::Stage { stage: "annotate", message: e.to_string() })?
                }
                "llm" => {
                    let transcript =
                        out_dir.join(a.transcript.as_deref().unwrap_or("transcript.jsonl"));
                    let llm = annotator::LlmConfig {
                        endpoint_url: a
                            .endpoint_url
                            .clone()
                            .unwrap_or_else(|| annotator::LlmConfig::default().endpoint_url),
                        model_name: a
                            .model_name
                            .clone()
                            .unwrap_or_else(|| annotator::LlmConfig::default().model_name),
                        temperature: a.temperature,
                        api_key_env: a.api_key_env.clone(),
                        max_retries: 3,
                        fallback: annotator::Fallback::Skip,
                    };
                    annotator::annotate_llm(
                        &llm,
                        &env,
                        &oracle,
                        &trajs,
                        annotator::DEFAULT_PROMPT_TEMPLATE,
                        &transcript,
                    )
                    .map_err(|e| PipelineError::Stage { stage: "annotate", message: e.to_string() })?
                }
                other => {
                    return Err(PipelineError::Config(format!("unknown annotate mode: {other}")))
                }
            };
            annotator::write_labels(&labels, &labels_path)
                .map_err(|e| PipelineError::Stage { stage: "annotate", message: e.to_string() })?;
            if info {
                eprintln!("wrote {} ({} labels)", labels_path.display(), labels.len());
            }
        }
        Command::TrainVem => {
            let env = pipeline::load_env(&env_path)?;
            let trajs = dataset::read_jsonl(&data_path)
                .map_err(|e| PipelineError::Stage { stage: "train-vem", message: e.to_string() })?;
            let labels = annotator::read_labels(&labels_path)
                .map_err(|e| PipelineError::Stage { stage: "train-vem", message: e.to_string() })?;
            let (report, metrics) = pipeline::train_vem_stage(
                &env,
                &trajs,
                &labels,
                &cfg.vem,
                cfg.stage_seed("train-vem"),
                &vem_path,
            )?;
            fs::write(
                out_dir.join("vem_metrics.json"),
                serde_json::to_string_pretty(&metrics).unwrap(),
            )?;
            let mut csv = String::from("epoch,mse\n");
            for (i, l) in report.loss_curve.iter().enumerate() {
                csv.push_str(&format!("{i},{l}\n"));
            }
            fs::write(out_dir.join("vem_loss.csv"), csv)?;
            if info {
                eprintln!("wrote {} (final mse {:.6})", vem_path.display(), report.final_mse);
            }
        }
        Command::TrainPolicy { data, vem, env, epochs, batch, out } => {
            let env_spec = pipeline::load_env(env.as_deref().unwrap_or(&env_path))?;
            let trajs = dataset::read_jsonl(data.as_deref().unwrap_or(&data_path))
                .map_err(|e| PipelineError::Stage { stage: "train-policy", message: e.to_string() })?;
            let frozen = FrozenValueModel::load(vem.as_deref().unwrap_or(&vem_path))
                .map_err(|e| PipelineError::Stage { stage: "train-policy", message: e.to_string() })?;
            let mut pol_cfg = cfg.policy.clone();
            if let Some(e) = epochs {
                pol_cfg.epochs = *e;
            }
            if let Some(b) = batch {
                pol_cfg.batch_size = *b;
            }
            let (trained, report) = pipeline::train_policy_stage(
                &env_spec,
                &trajs,
                &frozen,
                &pol_cfg,
                &cfg.vem.encoder(),
                cfg.stage_seed("train-policy"),
            )?;
            let out_path = out.clone().unwrap_or(policy_path);
            trained
                .save(&out_path)
                .map_err(|e| PipelineError::Stage { stage: "train-policy", message: e.to_string() })?;
            fs::write(out_dir.join("policy_diag.csv"), report.to_csv())?;
            if info {
                eprintln!(
                    "wrote {} (J {:.4} -> {:.4})",
                    out_path.display(),
                    report.initial_j,
                    report.final_j
                );
            }
        }
        Command::Evaluate { mode, policy, env, data } => {
            let env_spec = pipeline::load_env(env.as_deref().unwrap_or(&env_path))?;
            let oracle = Oracle::build(&env_spec);
            let trajs = dataset::read_jsonl(data.as_deref().unwrap_or(&data_path))
                .map_err(|e| PipelineError::Stage { stage: "evaluate", message: e.to_string() })?;
            let trained = PolicyParams::load(policy.as_deref().unwrap_or(&policy_path))
                .map_err(|e| PipelineError::Stage { stage: "evaluate", message: e.to_string() })?;
            let ts = TemplateSpace::with_grid(&env_spec, cfg.policy.template_grid);
            if !["offline", "online", "both"].contains(&mode.as_str()) {
                return Err(PipelineError::Config(format!("unknown eval mode: {mode}")));
            }
            let artifact = pipeline::evaluate_stage(
                &env_spec,
                &oracle,
                &trajs,
                &trained,
                &ts,
                &cfg.eval,
                cfg.stage_seed("evaluate"),
            )?;
            fs::write(
                out_dir.join("eval_report.json"),
                serde_json::to_string_pretty(&artifact).unwrap(),
            )?;
            if info {
                if mode != "online" {
                    eprintln!(
                        "offline: step_sr {:.4} task_sr {:.4}",
                        artifact.offline.step_sr, artifact.offline.task_sr
                    );
                }
                if mode != "offline" {
                    eprintln!(
                        "online: task_sr {:.4} avg_len {:.2}",
                        artifact.online.task_sr, artifact.online.avg_step_length
                    );
                }
            }
        }
        Command::TheoryCheck => {
            let env = pipeline::load_env(&env_path)?;
            let oracle = Oracle::build(&env);
            let trajs = dataset::read_jsonl(&data_path)
                .map_err(|e| PipelineError::Stage { stage: "theory-check", message: e.to_string() })?;
            let report = pipeline::theory_stage(
                &env,
                &oracle,
                &trajs,
                &cfg.theory,
                cfg.policy.template_grid,
                &cfg.vem.encoder(),
                cfg.stage_seed("theory-check"),
            )?;
            fs::write(
                out_dir.join("bound_report.json"),
                serde_json::to_string_pretty(&report).unwrap(),
            )?;
            if info {
                eprintln!(
                    "theory: {} cases, fitted c {:?}",
                    report.reports.len(),
                    report.c_fit
                );
            }
        }
        Command::Run { force } => {
            let manifest = pipeline::run_pipeline(cfg, out_dir, *force)?;
            if info {
                for s in &manifest.stages {
                    eprintln!(
                        "{}: {} ({} ms)",
                        s.name,
                        if s.cached { "cached" } else { "ran" },
                        s.wall_ms
                    );
                }
            }
        }
        Command::Report => {
            let (md, csv) = pipeline::report(out_dir)?;
            fs::write(out_dir.join("report.md"), &md)?;
            fs::write(out_dir.join("summary.csv"), &csv)?;
            if info {
                eprintln!("wrote {}", out_dir.join("report.md").display());
            }
        }
    }
    Ok(())
}
