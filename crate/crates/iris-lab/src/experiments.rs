//! Canned experiment recipes: the monitoring run that trains on the oracle
//! reward while logging certainty, the eight-arm ablation suite, and the
//! fixed-prompt eval protocol.

use crate::checkpoint::{load_checkpoint, CheckpointError};
use crate::domain::{
    color_entropy, decode_image, oracle_reward, render_scene_text, Prompt,
    PromptCategory, SceneSpec, Segment, Vocabulary, DEFAULT_ALPHA,
};
use crate::grpo::{train, RewardSource, TrainError, TrainOutcome, TrainerConfig, STREAM_EVAL};
use crate::numerics::{derive_stream, RngStream};
use crate::policy::{PolicyConfig, PolicyParams};
use crate::rewards::{KlVariant, RewardSpec, SegmentMode};
use crate::rollout::{generate, RolloutError};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Seed of the shipped 40-prompt eval set.
pub const EVAL_PROMPT_SEED: u64 = 911;
/// Seed of the sampling noise used when evaluating a standalone checkpoint.
pub const EVAL_SAMPLING_SEED: u64 = 1905;
pub const EVAL_PROMPTS_PER_CATEGORY: usize = 10;
pub const DEFAULT_IMAGES_PER_PROMPT: usize = 4;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("empty prompt set")]
    EmptyPromptSet,
    #[error("duplicate arm name {0}")]
    DuplicateArmName(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// The category a scene belongs to. The grammar is small enough that this is
/// decidable from the scene alone.
pub fn categorize(scene: &SceneSpec) -> PromptCategory {
    if scene.relation.is_some() {
        PromptCategory::Spatial
    } else if scene.objects.len() == 2 {
        PromptCategory::TwoObject
    } else if scene.objects[0].1 > 1 {
        PromptCategory::Counting
    } else {
        PromptCategory::Single
    }
}

/// The fixed eval prompt set: 10 prompts per category from a fixed seed.
pub fn default_eval_prompts(vocab: &Vocabulary) -> Vec<Prompt> {
    let root = derive_stream(EVAL_PROMPT_SEED, 0);
    let mut prompts = Vec::new();
    for (ci, category) in PromptCategory::ALL.into_iter().enumerate() {
        for i in 0..EVAL_PROMPTS_PER_CATEGORY {
            prompts.push(crate::domain::sample_prompt(
                vocab,
                root.child(ci as u64).child(i as u64),
                category,
            ));
        }
    }
    prompts
}

/// Write the eval prompt set as one grammar line per prompt.
pub fn write_eval_prompt_file(vocab: &Vocabulary, path: &Path) -> Result<(), ExperimentError> {
    let body: String = default_eval_prompts(vocab)
        .iter()
        .map(|p| render_scene_text(vocab, &p.scene) + "\n")
        .collect();
    std::fs::write(path, body).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: String,
    pub mean_oracle_reward: f64,
    pub n_prompts: usize,
}

/// Aggregate eval numbers for one parameter snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_prompts: usize,
    pub n_images_per_prompt: usize,
    pub overall_oracle_reward: f64,
    pub per_category: Vec<CategoryScore>,
    pub mean_sc_text: f64,
    pub mean_sc_image: f64,
    pub mean_color_entropy: f64,
}

/// Evaluate a parameter snapshot on a prompt set: `n_images_per_prompt`
/// sampled generations per prompt, scored by the oracle and summarized per
/// category.
pub fn evaluate_params(
    params: &PolicyParams,
    vocab: &Vocabulary,
    prompts: &[Prompt],
    n_images_per_prompt: usize,
    alpha: f64,
    stream: RngStream,
) -> Result<EvalReport, ExperimentError> {
    if prompts.is_empty() {
        return Err(ExperimentError::EmptyPromptSet);
    }
    let spec = RewardSpec::iris();
    let mut oracle_sum = 0.0;
    let mut entropy_sum = 0.0;
    let mut n_samples = 0usize;
    let mut sc_text: Vec<f64> = Vec::new();
    let mut sc_image: Vec<f64> = Vec::new();
    let mut per_cat: Vec<(PromptCategory, f64, usize)> = PromptCategory::ALL
        .into_iter()
        .map(|c| (c, 0.0, 0usize))
        .collect();

    for (i, prompt) in prompts.iter().enumerate() {
        let category = categorize(&prompt.scene);
        for j in 0..n_images_per_prompt {
            let traj = generate(
                params,
                vocab,
                prompt,
                stream.child(i as u64).child(j as u64),
                crate::rollout::DEFAULT_MAX_TEXT_LEN,
                true,
                &spec,
            )?;
            let grid = decode_image(vocab, &traj.image_tokens()).expect("64 image tokens");
            let score = oracle_reward(&grid, &prompt.scene, alpha);
            oracle_sum += score;
            entropy_sum += color_entropy(&grid);
            if let Some(sc) = traj.mean_sc(Segment::Text) {
                sc_text.push(sc);
            }
            if let Some(sc) = traj.mean_sc(Segment::Image) {
                sc_image.push(sc);
            }
            let slot = per_cat.iter_mut().find(|(c, _, _)| *c == category).unwrap();
            slot.1 += score;
            n_samples += 1;
        }
        let slot = per_cat.iter_mut().find(|(c, _, _)| *c == category).unwrap();
        slot.2 += 1;
    }

    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(EvalReport {
        n_prompts: prompts.len(),
        n_images_per_prompt,
        overall_oracle_reward: oracle_sum / n_samples as f64,
        per_category: per_cat
            .into_iter()
            .map(|(c, sum, n)| CategoryScore {
                category: c.name().to_string(),
                mean_oracle_reward: if n == 0 {
                    0.0
                } else {
                    sum / (n * n_images_per_prompt) as f64
                },
                n_prompts: n,
            })
            .collect(),
        mean_sc_text: mean(&sc_text),
        mean_sc_image: mean(&sc_image),
        mean_color_entropy: entropy_sum / n_samples as f64,
    })
}

/// Evaluate a saved checkpoint with the fixed eval sampling seed.
pub fn evaluate(
    checkpoint_path: &Path,
    prompts: &[Prompt],
    n_images_per_prompt: usize,
) -> Result<EvalReport, ExperimentError> {
    let vocab = Vocabulary::default();
    let loaded = load_checkpoint(checkpoint_path)?;
    evaluate_params(
        &loaded.params,
        &vocab,
        prompts,
        n_images_per_prompt,
        DEFAULT_ALPHA,
        derive_stream(EVAL_SAMPLING_SEED, STREAM_EVAL),
    )
}

/// One training condition of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub reward: RewardSpec,
    pub cot_enabled: bool,
    pub reward_source: RewardSource,
}

impl AblationArm {
    fn new(name: &str, reward: RewardSpec, cot_enabled: bool, reward_source: RewardSource) -> Self {
        AblationArm {
            name: name.to_string(),
            reward,
            cot_enabled,
            reward_source,
        }
    }

    /// The trainer config this arm runs with, holding everything except the
    /// arm's declared axis fixed at `base`.
    pub fn apply(&self, base: &TrainerConfig) -> TrainerConfig {
        let mut config = base.clone();
        config.reward = self.reward;
        config.cot_enabled = self.cot_enabled;
        config.reward_source = self.reward_source;
        config
    }
}

/// The canonical eight-arm suite.
pub fn canonical_arms() -> Vec<AblationArm> {
    let spec = |t, i, v| RewardSpec::new(t, i, v).expect("valid spec");
    use KlVariant::{BackwardKl, ForwardKl};
    use RewardSource::{Intrinsic, OracleExternal};
    use SegmentMode::{Nsc, Off, Sc};
    vec![
        AblationArm::new("iris", spec(Nsc, Nsc, ForwardKl), true, Intrinsic),
        AblationArm::new("no_cot", spec(Nsc, Nsc, ForwardKl), false, Intrinsic),
        AblationArm::new("text_nsc_only", spec(Nsc, Off, ForwardKl), true, Intrinsic),
        AblationArm::new("image_nsc_only", spec(Off, Nsc, ForwardKl), true, Intrinsic),
        AblationArm::new("text_nsc_image_sc", spec(Nsc, Sc, ForwardKl), true, Intrinsic),
        AblationArm::new("image_nsc_text_sc", spec(Sc, Nsc, ForwardKl), true, Intrinsic),
        AblationArm::new("backward_kl", spec(Nsc, Nsc, BackwardKl), true, Intrinsic),
        AblationArm::new("oracle_external", spec(Nsc, Nsc, ForwardKl), true, OracleExternal),
    ]
}

/// Field-level diff of two trainer configs, as dotted key paths.
pub fn config_diff(a: &TrainerConfig, b: &TrainerConfig) -> Vec<String> {
    let va = serde_json::to_value(a).expect("serializable config");
    let vb = serde_json::to_value(b).expect("serializable config");
    let (ma, mb) = match (va, vb) {
        (serde_json::Value::Object(ma), serde_json::Value::Object(mb)) => (ma, mb),
        _ => unreachable!("configs serialize to objects"),
    };
    let mut diffs = Vec::new();
    for (key, value) in &ma {
        if mb.get(key) != Some(value) {
            diffs.push(key.clone());
        }
    }
    diffs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub arm: String,
    pub oracle_reward: f64,
    pub color_entropy: f64,
    pub sc_text: f64,
    pub sc_image: f64,
}

#[derive(Debug)]
pub struct SuiteResult {
    pub run_dirs: Vec<PathBuf>,
    pub rows: Vec<ComparisonRow>,
    pub table_json: PathBuf,
    pub table_text: PathBuf,
}

/// Aligned plain-text rendering of the comparison table.
pub fn format_comparison_table(rows: &[ComparisonRow]) -> String {
    let mut out = format!(
        "{:<20} {:>14} {:>14} {:>12} {:>12}\n",
        "arm", "oracle_reward", "color_entropy", "sc_text", "sc_image"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<20} {:>14.6} {:>14.6} {:>12.6} {:>12.6}\n",
            r.arm, r.oracle_reward, r.color_entropy, r.sc_text, r.sc_image
        ));
    }
    out
}

/// Run every arm with shared seeds and emit per-arm run dirs plus one
/// comparison table (JSON and aligned text). Every row reports the same
/// final checkpoint step.
pub fn run_ablation_suite(
    base: &TrainerConfig,
    policy_cfg: &PolicyConfig,
    arms: &[AblationArm],
    out_dir: &Path,
) -> Result<SuiteResult, ExperimentError> {
    for (i, arm) in arms.iter().enumerate() {
        if arms[..i].iter().any(|other| other.name == arm.name) {
            return Err(ExperimentError::DuplicateArmName(arm.name.clone()));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let vocab = Vocabulary::default();
    let eval_prompts = default_eval_prompts(&vocab);

    let mut run_dirs = Vec::new();
    let mut rows = Vec::new();
    for arm in arms {
        let config = arm.apply(base);
        let run_dir = out_dir.join(&arm.name);
        std::fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
        let outcome = train(&config, policy_cfg, &run_dir)?;
        let report = evaluate_params(
            &outcome.params,
            &vocab,
            &eval_prompts,
            base.eval_images_per_prompt,
            base.alpha,
            derive_stream(base.seed, STREAM_EVAL).child(outcome.steps_completed),
        )?;
        rows.push(ComparisonRow {
            arm: arm.name.clone(),
            oracle_reward: report.overall_oracle_reward,
            color_entropy: report.mean_color_entropy,
            sc_text: report.mean_sc_text,
            sc_image: report.mean_sc_image,
        });
        run_dirs.push(run_dir);
    }

    let table_json = out_dir.join("comparison.json");
    let body = serde_json::to_string_pretty(&rows).expect("serializable rows");
    std::fs::write(&table_json, body).map_err(io_err(&table_json))?;
    let table_text = out_dir.join("comparison.txt");
    std::fs::write(&table_text, format_comparison_table(&rows)).map_err(io_err(&table_text))?;
    Ok(SuiteResult {
        run_dirs,
        rows,
        table_json,
        table_text,
    })
}

/// Train on the oracle external reward while logging certainty, then write
/// the (step, mean image SC, mean oracle reward) curve file.
pub fn run_fig2_analog(
    base: &TrainerConfig,
    policy_cfg: &PolicyConfig,
    run_dir: &Path,
) -> Result<TrainOutcome, ExperimentError> {
    let mut config = base.clone();
    config.reward_source = RewardSource::OracleExternal;
    std::fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let outcome = train(&config, policy_cfg, run_dir)?;
    let mut curve = String::from("step mean_sc_image mean_oracle_reward\n");
    for r in &outcome.records {
        curve.push_str(&format!(
            "{} {} {}\n",
            r.step, r.mean_sc_image, r.mean_oracle_reward
        ));
    }
    let path = run_dir.join("certainty_curve.txt");
    std::fs::write(&path, curve).map_err(io_err(&path))?;
    Ok(outcome)
}

/// Ideal-policy eval double: scores the hand-built perfect renderer against
/// the oracle without touching the learned policy.
pub fn evaluate_ideal_renderer(prompts: &[Prompt], alpha: f64) -> Result<f64, ExperimentError> {
    if prompts.is_empty() {
        return Err(ExperimentError::EmptyPromptSet);
    }
    let total: f64 = prompts
        .iter()
        .map(|p| oracle_reward(&crate::domain::ideal_render(&p.scene), &p.scene, alpha))
        .sum();
    Ok(total / prompts.len() as f64)
}
