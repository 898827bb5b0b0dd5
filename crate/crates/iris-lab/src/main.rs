//! Command-line front end: train / eval / ablate / rollout / grad-check /
//! render. Exit codes: 0 success, 1 usage error, 2 runtime failure.

use clap::{Args, Parser, Subcommand};
use iris_lab::config::{resolve_config, FlagOverrides};
use iris_lab::domain::{parse_prompt_file, parse_prompt_line, Segment, Vocabulary};
use iris_lab::experiments::{
    canonical_arms, evaluate, run_ablation_suite, DEFAULT_IMAGES_PER_PROMPT,
};
use iris_lab::grpo::{run_grad_check, train};
use iris_lab::numerics::derive_stream;
use iris_lab::policy::PolicyConfig;
use iris_lab::rollout::generate;
use iris_lab::telemetry::render_curves;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "iris-lab", about = "Toy intrinsic-reward RL laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigFlags {
    /// JSON config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    clip_epsilon: Option<f64>,
    #[arg(long)]
    kl_beta: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    inner_epochs: Option<usize>,
    #[arg(long)]
    prompts_per_step: Option<usize>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    cot_enabled: Option<bool>,
    /// Parallel worker count; never affects results
    #[arg(long)]
    workers: Option<usize>,
}

impl ConfigFlags {
    fn overrides(&self) -> FlagOverrides {
        FlagOverrides {
            seed: self.seed,
            total_steps: self.total_steps,
            group_size: self.group_size,
            clip_epsilon: self.clip_epsilon,
            kl_beta: self.kl_beta,
            learning_rate: self.learning_rate,
            inner_epochs: self.inner_epochs,
            prompts_per_step: self.prompts_per_step,
            eval_every: self.eval_every,
            checkpoint_every: self.checkpoint_every,
            cot_enabled: self.cot_enabled,
            workers: self.workers,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the training loop into a run directory
    Train {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Run directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a prompt-set file
    Eval {
        /// Checkpoint file
        #[arg(long)]
        ckpt: PathBuf,
        /// Prompt-set file, one grammar line per prompt
        #[arg(long)]
        prompts: PathBuf,
        /// Output report file (JSON)
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_IMAGES_PER_PROMPT)]
        images_per_prompt: usize,
    },
    /// Run an ablation suite
    Ablate {
        /// Suite name; only "canonical" is defined
        #[arg(long, default_value = "canonical")]
        suite: String,
        #[command(flatten)]
        flags: ConfigFlags,
        /// Suite output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample one generation from a checkpoint and print it
    Rollout {
        #[arg(long)]
        ckpt: PathBuf,
        /// Prompt in grammar form, e.g. "two red"
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check the analytic objective gradient against finite differences
    GradCheck {
        /// JSON config file supplying a policy section; defaults to the
        /// small checker architecture
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render SVG curves from a metrics log
    Render {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn set_workers(n: usize) {
    let threads = n.max(1);
    // ignore the error if a pool already exists (tests, repeated calls)
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Train { flags, out } => {
            let resolved = resolve_config(flags.config.as_deref(), &flags.overrides())
                .map_err(|e| e.to_string())?;
            set_workers(resolved.trainer.workers);
            std::fs::create_dir_all(&out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;
            let outcome =
                train(&resolved.trainer, &resolved.policy, &out).map_err(|e| e.to_string())?;
            println!(
                "trained {} steps into {} (config hash {})",
                outcome.steps_completed,
                out.display(),
                resolved.config_hash
            );
            Ok(())
        }
        Command::Eval {
            ckpt,
            prompts,
            out,
            images_per_prompt,
        } => {
            let vocab = Vocabulary::default();
            let content = std::fs::read_to_string(&prompts)
                .map_err(|e| format!("cannot read {}: {e}", prompts.display()))?;
            let prompt_set = parse_prompt_file(&vocab, &content).map_err(|e| e.to_string())?;
            let report =
                evaluate(&ckpt, &prompt_set, images_per_prompt).map_err(|e| e.to_string())?;
            let body = serde_json::to_string_pretty(&report).expect("serializable report");
            std::fs::write(&out, &body).map_err(|e| format!("cannot write {}: {e}", out.display()))?;
            println!("{body}");
            Ok(())
        }
        Command::Ablate { suite, flags, out } => {
            if suite != "canonical" {
                return Err(format!("unknown suite {suite:?}, expected \"canonical\""));
            }
            let resolved = resolve_config(flags.config.as_deref(), &flags.overrides())
                .map_err(|e| e.to_string())?;
            set_workers(resolved.trainer.workers);
            let result =
                run_ablation_suite(&resolved.trainer, &resolved.policy, &canonical_arms(), &out)
                    .map_err(|e| e.to_string())?;
            let table = std::fs::read_to_string(&result.table_text)
                .map_err(|e| format!("cannot read {}: {e}", result.table_text.display()))?;
            print!("{table}");
            Ok(())
        }
        Command::Rollout { ckpt, prompt, seed } => {
            let vocab = Vocabulary::default();
            let loaded = iris_lab::checkpoint::load_checkpoint(&ckpt).map_err(|e| e.to_string())?;
            let parsed = parse_prompt_line(&vocab, &prompt, 1).map_err(|e| e.to_string())?;
            let traj = generate(
                &loaded.params,
                &vocab,
                &parsed,
                derive_stream(seed, 0),
                iris_lab::rollout::DEFAULT_MAX_TEXT_LEN,
                true,
                &iris_lab::rewards::RewardSpec::iris(),
            )
            .map_err(|e| e.to_string())?;
            let grid = iris_lab::domain::decode_image(&vocab, &traj.image_tokens())
                .map_err(|e| e.to_string())?;
            println!("{}", grid.char_map());
            let fmt_sc = |s: Option<f64>| match s {
                Some(v) => format!("{v:.6}"),
                None => "n/a".to_string(),
            };
            println!("mean SC (text):  {}", fmt_sc(traj.mean_sc(Segment::Text)));
            println!("mean SC (image): {}", fmt_sc(traj.mean_sc(Segment::Image)));
            Ok(())
        }
        Command::GradCheck { config } => {
            let policy = match config {
                Some(path) => {
                    resolve_config(Some(&path), &FlagOverrides::default())
                        .map_err(|e| e.to_string())?
                        .policy
                }
                None => PolicyConfig::grad_check(),
            };
            let report = run_grad_check(&policy);
            println!(
                "max relative error: {:.3e} over {} parameters (tolerance {:.0e})",
                report.max_rel_error, report.params_checked, report.tolerance
            );
            if report.passed() {
                Ok(())
            } else {
                Err("gradient check failed".to_string())
            }
        }
        Command::Render { log, out } => {
            let paths = render_curves(&log, &out).map_err(|e| e.to_string())?;
            println!("wrote {} curves to {}", paths.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version requests are successes, everything else is a
            // usage error
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}
