//! Group-relative policy optimization: z-score advantages within rollout
//! groups, the clipped surrogate with an exact reference-policy KL penalty,
//! a bias-corrected adaptive optimizer run in ascent mode, and the training
//! loop that ties rollouts, updates, and telemetry together.

use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::domain::{
    color_entropy, decode_image, oracle_reward, sample_prompt, PromptCategory, Segment, Vocabulary,
    DEFAULT_ALPHA,
};
use crate::numerics::{derive_stream, kl_divergence, RngStream};
use crate::policy::{
    backward_position, forward_traced, init_params, PolicyConfig, PolicyGrads, PolicyParams,
};
use crate::rewards::RewardSpec;
use crate::rollout::{generate_group, RolloutError, TrajectoryGroup, DEFAULT_MAX_TEXT_LEN};
use crate::telemetry::{MetricsRecord, MetricsWriter, TelemetryError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

/// Groups with return variance below this are degenerate and contribute
/// nothing to the update.
pub const DEGENERATE_STD_FLOOR: f64 = 1e-8;

// Purpose ids for the top-level RNG substreams.
const STREAM_INIT: u64 = 0;
const STREAM_PROMPT: u64 = 1;
const STREAM_ROLLOUT: u64 = 2;
pub const STREAM_EVAL: u64 = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("diverged: non-finite gradient at step {0}")]
    Diverged(u64),
    #[error("group was not generated under the supplied behavior snapshot")]
    SnapshotMismatch,
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}

/// Where the trajectory return u_i comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSource {
    /// Signed per-token certainty rewards summed over the trajectory.
    Intrinsic,
    /// The detector-style oracle score of the decoded image; certainty is
    /// then telemetry only.
    OracleExternal,
}

fn default_true() -> bool {
    true
}

/// All trainer hyperparameters. Field defaults are the canonical run
/// configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    /// Inner optimization epochs per sampled batch; at 1 every ratio is
    /// identically 1 and clipping is never exercised.
    pub inner_epochs: usize,
    pub prompts_per_step: usize,
    pub total_steps: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Run the eval suite every this many steps (0 disables).
    pub eval_every: u64,
    /// Checkpoint every this many steps (0 = only initial and final).
    pub checkpoint_every: u64,
    pub max_text_len: usize,
    #[serde(default = "default_true")]
    pub cot_enabled: bool,
    pub reward: RewardSpec,
    pub reward_source: RewardSource,
    /// Divide u_i by the sampled length instead of using the plain sum.
    pub length_normalize_return: bool,
    /// Spatial-branch weight of the oracle reward.
    pub alpha: f64,
    pub eval_images_per_prompt: usize,
    pub workers: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            group_size: 8,
            clip_epsilon: 0.2,
            kl_beta: 0.01,
            learning_rate: 1e-3,
            inner_epochs: 2,
            prompts_per_step: 8,
            total_steps: 300,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 1,
            eval_every: 50,
            checkpoint_every: 100,
            max_text_len: DEFAULT_MAX_TEXT_LEN,
            cot_enabled: true,
            reward: RewardSpec::iris(),
            reward_source: RewardSource::Intrinsic,
            length_normalize_return: false,
            alpha: DEFAULT_ALPHA,
            eval_images_per_prompt: 4,
            workers: 1,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigViolation {
    #[error("clip_epsilon must lie in (0, 1)")]
    ClipEpsilon,
    #[error("kl_beta must be >= 0")]
    KlBeta,
    #[error("group_size must be >= 2")]
    GroupSize,
    #[error("inner_epochs must be >= 1")]
    InnerEpochs,
    #[error("learning_rate must be > 0")]
    LearningRate,
    #[error("alpha must lie in [0, 1]")]
    Alpha,
    #[error("at least one of text_mode, image_mode must not be off")]
    RewardSpec,
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), ConfigViolation> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(ConfigViolation::ClipEpsilon);
        }
        if self.kl_beta < 0.0 {
            return Err(ConfigViolation::KlBeta);
        }
        if self.group_size < 2 {
            return Err(ConfigViolation::GroupSize);
        }
        if self.inner_epochs < 1 {
            return Err(ConfigViolation::InnerEpochs);
        }
        if self.learning_rate <= 0.0 {
            return Err(ConfigViolation::LearningRate);
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ConfigViolation::Alpha);
        }
        if self.reward.validate().is_err() {
            return Err(ConfigViolation::RewardSpec);
        }
        Ok(())
    }
}

/// Adam accumulators, shaped like the parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn fresh(config: &PolicyConfig) -> Self {
        let shapes = PolicyGrads::zeros(config);
        OptimizerState {
            first_moment: shapes.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            second_moment: shapes.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }
}

/// Fill a group's advantages: z-scores of returns using the population
/// standard deviation, or all zeros when the group has no return variance.
pub fn compute_advantages(group: &mut TrajectoryGroup) {
    let g = group.members.len() as f64;
    let returns: Vec<f64> = group.members.iter().map(|m| m.intrinsic_return).collect();
    let mean = returns.iter().sum::<f64>() / g;
    let var = returns.iter().map(|u| (u - mean) * (u - mean)).sum::<f64>() / g;
    let std = var.sqrt();
    if std < DEGENERATE_STD_FLOOR {
        group.degenerate = true;
        group.advantages = vec![0.0; group.members.len()];
    } else {
        group.degenerate = false;
        group.advantages = returns.iter().map(|u| (u - mean) / std).collect();
    }
}

/// min(c * adv, clip(c, 1 - eps, 1 + eps) * adv).
pub fn surrogate_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Diagnostics from one objective evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct ObjectiveDiagnostics {
    /// Fraction of considered tokens whose ratio left [1 - eps, 1 + eps].
    pub clip_fraction: f64,
    /// Mean per-token KL(pi_theta || pi_ref), 0 when kl_beta is 0.
    pub mean_kl_to_ref: f64,
}

/// Objective value, its exact gradient, and diagnostics for a batch of groups
/// sampled under `behavior`. The objective follows the maximization
/// convention; the returned gradient is the ascent direction.
pub fn objective_and_gradient(
    params: &PolicyParams,
    behavior: &PolicyParams,
    reference: &PolicyParams,
    groups: &[TrajectoryGroup],
    vocab: &Vocabulary,
    config: &TrainerConfig,
) -> Result<(f64, PolicyGrads, ObjectiveDiagnostics), TrainError> {
    let behavior_hash = behavior.content_hash();
    for g in groups {
        if g.behavior_hash != behavior_hash {
            return Err(TrainError::SnapshotMismatch);
        }
        assert_eq!(g.advantages.len(), g.members.len(), "advantages unfilled");
    }

    struct Partial {
        objective: f64,
        grads: PolicyGrads,
        kl_sum: f64,
        clipped: usize,
        tokens: usize,
    }

    let eps = config.clip_epsilon;
    let beta = config.kl_beta;
    let n_groups = groups.len() as f64;
    let g_size = config.group_size as f64;

    let partials: Vec<Partial> = groups
        .par_iter()
        .map(|group| {
            let mut p = Partial {
                objective: 0.0,
                grads: PolicyGrads::zeros(&params.config),
                kl_sum: 0.0,
                clipped: 0,
                tokens: 0,
            };
            if group.degenerate {
                return p;
            }
            for (member, &advantage) in group.members.iter().zip(&group.advantages) {
                let len = member.sampled_len() as f64;
                let weight = 1.0 / (n_groups * g_size * len);
                let mut sampled_idx = 0usize;
                for (ctx, segment, token, forced) in member.positions(vocab, params.config.k) {
                    if forced {
                        continue;
                    }
                    let trace =
                        forward_traced(params, vocab, &member.prompt, &ctx, segment).unwrap();
                    let choice = trace.dist.index_of(token).expect("token in active set");
                    let log_new = trace.dist.log_prob_at(choice);
                    let ratio = (log_new - member.behavior_log_probs[sampled_idx]).exp();
                    sampled_idx += 1;

                    let unclipped = ratio * advantage;
                    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
                    let term = unclipped.min(clipped);
                    // derivative of the min w.r.t. log pi(token)
                    let coeff = if unclipped <= clipped || (ratio > 1.0 - eps && ratio < 1.0 + eps)
                    {
                        ratio * advantage
                    } else {
                        0.0
                    };
                    if ratio < 1.0 - eps || ratio > 1.0 + eps {
                        p.clipped += 1;
                    }
                    p.tokens += 1;

                    let probs = &trace.dist.probs;
                    let mut kl = 0.0;
                    let mut ref_log: Vec<f64> = Vec::new();
                    if beta > 0.0 {
                        let ref_trace =
                            forward_traced(reference, vocab, &member.prompt, &ctx, segment)
                                .unwrap();
                        kl = kl_divergence(&trace.dist, &ref_trace.dist).unwrap();
                        ref_log = (0..probs.len()).map(|j| ref_trace.dist.log_prob_at(j)).collect();
                        p.kl_sum += kl;
                    }

                    p.objective += weight * (term - beta * kl);

                    // d objective / d logits at this position
                    let logit_grad: Vec<f64> = probs
                        .iter()
                        .enumerate()
                        .map(|(j, &pj)| {
                            let sur = coeff * (if j == choice { 1.0 } else { 0.0 } - pj);
                            let klg = if beta > 0.0 {
                                pj * ((trace.dist.log_prob_at(j) - ref_log[j]) - kl)
                            } else {
                                0.0
                            };
                            weight * (sur - beta * klg)
                        })
                        .collect();
                    backward_position(params, &member.prompt, &ctx, &trace, &logit_grad, &mut p.grads);
                }
            }
            p
        })
        .collect();

    let mut objective = 0.0;
    let mut grads = PolicyGrads::zeros(&params.config);
    let mut kl_sum = 0.0;
    let mut clipped = 0usize;
    let mut tokens = 0usize;
    for p in partials {
        objective += p.objective;
        grads.add_scaled(&p.grads, 1.0);
        kl_sum += p.kl_sum;
        clipped += p.clipped;
        tokens += p.tokens;
    }
    let diag = ObjectiveDiagnostics {
        clip_fraction: if tokens > 0 {
            clipped as f64 / tokens as f64
        } else {
            0.0
        },
        mean_kl_to_ref: if tokens > 0 { kl_sum / tokens as f64 } else { 0.0 },
    };
    Ok((objective, grads, diag))
}

/// One bias-corrected adaptive update in the ascent direction.
pub fn adam_step(
    params: &mut PolicyParams,
    grads: &PolicyGrads,
    state: &mut OptimizerState,
    config: &TrainerConfig,
) -> Result<(), TrainError> {
    if !grads.is_finite() {
        return Err(TrainError::Diverged(state.step));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.adam_beta1.powi(t);
    let bc2 = 1.0 - config.adam_beta2.powi(t);
    for (tensor_idx, (tensor, grad)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .enumerate()
    {
        let m = &mut state.first_moment[tensor_idx];
        let v = &mut state.second_moment[tensor_idx];
        for i in 0..tensor.len() {
            let g = grad[i];
            m[i] = config.adam_beta1 * m[i] + (1.0 - config.adam_beta1) * g;
            v[i] = config.adam_beta2 * v[i] + (1.0 - config.adam_beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            tensor[i] += config.learning_rate * mhat / (vhat.sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

/// Summary of a finished (or step-zero) training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub optimizer: OptimizerState,
    pub steps_completed: u64,
    pub records: Vec<MetricsRecord>,
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Resolved config snapshot written into every run directory.
fn write_config_snapshot(
    trainer: &TrainerConfig,
    policy: &PolicyConfig,
    run_dir: &Path,
) -> Result<(), TrainError> {
    #[derive(Serialize)]
    struct Snapshot<'a> {
        trainer: &'a TrainerConfig,
        policy: &'a PolicyConfig,
        config_hash: String,
    }
    let path = run_dir.join("config.json");
    let body = serde_json::to_string_pretty(&Snapshot {
        trainer,
        policy,
        config_hash: crate::checkpoint::config_hash(&(trainer, policy)),
    })
    .expect("serializable snapshot");
    std::fs::write(&path, body).map_err(|e| io_err(&path, e))
}

/// Sample the step's prompt batch. Categories and scenes both come from
/// substreams keyed by (seed, step, prompt index).
fn step_prompts(
    vocab: &Vocabulary,
    prompt_root: RngStream,
    step: u64,
    count: usize,
) -> Vec<crate::domain::Prompt> {
    use rand::Rng;
    (0..count)
        .map(|j| {
            let s = prompt_root.child(step).child(j as u64);
            let category = PromptCategory::ALL[s.child(0).rng().gen_range(0..4usize)];
            sample_prompt(vocab, s.child(1), category)
        })
        .collect()
}

/// Run the full training loop, writing `config.json`, `metrics.jsonl`,
/// `checkpoints/step_N`, and `eval/step_N.json` under `run_dir`.
pub fn train(
    trainer: &TrainerConfig,
    policy_cfg: &PolicyConfig,
    run_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    let vocab = Vocabulary::default();
    std::fs::create_dir_all(run_dir.join("checkpoints")).map_err(|e| io_err(run_dir, e))?;
    if trainer.eval_every > 0 {
        std::fs::create_dir_all(run_dir.join("eval")).map_err(|e| io_err(run_dir, e))?;
    }
    write_config_snapshot(trainer, policy_cfg, run_dir)?;

    let mut params = init_params(derive_stream(trainer.seed, STREAM_INIT), policy_cfg.clone());
    let reference = params.clone();
    let mut optimizer = OptimizerState::fresh(policy_cfg);
    let prompt_root = derive_stream(trainer.seed, STREAM_PROMPT);
    let rollout_root = derive_stream(trainer.seed, STREAM_ROLLOUT);

    let mut writer = MetricsWriter::create(&run_dir.join("metrics.jsonl"))?;
    let mut records = Vec::new();

    let save = |params: &PolicyParams, optimizer: &OptimizerState, step: u64| -> Result<(), TrainError> {
        let path = run_dir.join("checkpoints").join(format!("step_{step}"));
        save_checkpoint(
            &path,
            params,
            Some(optimizer),
            &CheckpointMeta {
                step,
                config_hash: crate::checkpoint::config_hash(&params.config),
            },
        )?;
        Ok(())
    };
    save(&params, &optimizer, 0)?;

    let eval_prompts = crate::experiments::default_eval_prompts(&vocab);

    for step in 0..trainer.total_steps {
        let started = Instant::now();
        let behavior = params.clone();

        let prompts = step_prompts(&vocab, prompt_root, step, trainer.prompts_per_step);
        let mut groups: Vec<TrajectoryGroup> = Vec::with_capacity(prompts.len());
        for (j, prompt) in prompts.iter().enumerate() {
            let mut group = generate_group(
                &behavior,
                &vocab,
                prompt,
                trainer.group_size,
                rollout_root.child(step).child(j as u64),
                trainer.max_text_len,
                trainer.cot_enabled,
                &trainer.reward,
            )?;
            for member in &mut group.members {
                let grid = decode_image(&vocab, &member.image_tokens()).expect("64 image tokens");
                member.oracle_score = Some(oracle_reward(&grid, &member.prompt.scene, trainer.alpha));
                match trainer.reward_source {
                    RewardSource::Intrinsic => {
                        if trainer.length_normalize_return {
                            member.intrinsic_return /= member.sampled_len() as f64;
                        }
                    }
                    RewardSource::OracleExternal => {
                        member.intrinsic_return = member.oracle_score.unwrap();
                    }
                }
            }
            compute_advantages(&mut group);
            groups.push(group);
        }

        let mut clip_acc = 0.0;
        let mut kl_acc = 0.0;
        let mut grad_norm = 0.0;
        for _ in 0..trainer.inner_epochs {
            let (_, grads, diag) =
                objective_and_gradient(&params, &behavior, &reference, &groups, &vocab, trainer)?;
            clip_acc += diag.clip_fraction;
            kl_acc += diag.mean_kl_to_ref;
            grad_norm = grads.norm();
            if let Err(e) = adam_step(&mut params, &grads, &mut optimizer, trainer) {
                // keep the last good state on disk before bailing out
                save(&params, &optimizer, step)?;
                return Err(e);
            }
        }

        let record = build_record(step, &groups, trainer, clip_acc, kl_acc, grad_norm, started);
        writer.append(&record)?;
        records.push(record);

        let done = step + 1;
        if trainer.eval_every > 0 && done % trainer.eval_every == 0 {
            let report = crate::experiments::evaluate_params(
                &params,
                &vocab,
                &eval_prompts,
                trainer.eval_images_per_prompt,
                trainer.alpha,
                derive_stream(trainer.seed, STREAM_EVAL).child(done),
            )
            .expect("eval prompt set is non-empty");
            let path = run_dir.join("eval").join(format!("step_{done}.json"));
            let body = serde_json::to_string_pretty(&report).expect("serializable report");
            std::fs::write(&path, body).map_err(|e| io_err(&path, e))?;
        }
        if trainer.checkpoint_every > 0 && done % trainer.checkpoint_every == 0 {
            save(&params, &optimizer, done)?;
        }
    }

    if trainer.total_steps > 0 {
        save(&params, &optimizer, trainer.total_steps)?;
    }
    Ok(TrainOutcome {
        params,
        optimizer,
        steps_completed: trainer.total_steps,
        records,
    })
}

/// Central finite-difference check of the full objective gradient.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub params_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Compare the analytic objective gradient against central finite differences
/// (step 1e-5) over every parameter, on a small fixed batch. The policy is
/// perturbed off the behavior snapshot so ratio and clip paths are live.
pub fn run_grad_check(policy_cfg: &PolicyConfig) -> GradCheckReport {
    use rand::Rng;
    let vocab = Vocabulary::default();
    let params = init_params(derive_stream(41, STREAM_INIT), policy_cfg.clone());
    let prompt = sample_prompt(&vocab, derive_stream(41, STREAM_PROMPT), PromptCategory::Spatial);
    let mut config = TrainerConfig::default();
    config.group_size = 4;
    let mut group = generate_group(
        &params,
        &vocab,
        &prompt,
        config.group_size,
        derive_stream(41, STREAM_ROLLOUT),
        6,
        true,
        &crate::rewards::RewardSpec::iris(),
    )
    .expect("rollout succeeds");
    compute_advantages(&mut group);
    let groups = vec![group];
    let reference = init_params(derive_stream(99, STREAM_INIT), policy_cfg.clone());

    let mut theta = params.clone();
    let mut rng = derive_stream(17, 0).rng();
    for idx in 0..theta.param_count() {
        let delta: f64 = rng.gen_range(-0.02..0.02);
        theta.set_flat(idx, theta.get_flat(idx) + delta);
    }

    let objective = |p: &PolicyParams| {
        objective_and_gradient(p, &params, &reference, &groups, &vocab, &config)
            .expect("objective evaluates")
            .0
    };
    let (_, grads, _) =
        objective_and_gradient(&theta, &params, &reference, &groups, &vocab, &config)
            .expect("objective evaluates");
    let flat = grads.flatten();
    let h = 1e-5;
    let mut max_rel = 0.0f64;
    for idx in 0..theta.param_count() {
        let mut plus = theta.clone();
        plus.set_flat(idx, theta.get_flat(idx) + h);
        let mut minus = theta.clone();
        minus.set_flat(idx, theta.get_flat(idx) - h);
        let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
        let analytic = flat[idx];
        // floored denominator: roundoff on near-zero gradients is not
        // relative error
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max((analytic - numeric).abs() / denom);
    }
    GradCheckReport {
        max_rel_error: max_rel,
        params_checked: theta.param_count(),
        tolerance: 1e-4,
    }
}

fn build_record(
    step: u64,
    groups: &[TrajectoryGroup],
    trainer: &TrainerConfig,
    clip_acc: f64,
    kl_acc: f64,
    grad_norm: f64,
    started: Instant,
) -> MetricsRecord {
    let vocab = Vocabulary::default();
    let members: Vec<_> = groups.iter().flat_map(|g| g.members.iter()).collect();
    let n = members.len() as f64;
    let mean_return = members.iter().map(|m| m.intrinsic_return).sum::<f64>() / n;
    let mean_oracle = members.iter().filter_map(|m| m.oracle_score).sum::<f64>() / n;
    let mean_entropy = members
        .iter()
        .map(|m| {
            let grid = decode_image(&vocab, &m.image_tokens()).expect("64 image tokens");
            color_entropy(&grid)
        })
        .sum::<f64>()
        / n;
    let seg_mean = |segment: Segment| -> f64 {
        let values: Vec<f64> = members.iter().filter_map(|m| m.mean_sc(segment)).collect();
        if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        }
    };
    let degenerate = groups.iter().filter(|g| g.degenerate).count() as f64 / groups.len() as f64;
    let epochs = trainer.inner_epochs as f64;
    MetricsRecord {
        step,
        mean_intrinsic_return: mean_return,
        mean_sc_text: seg_mean(Segment::Text),
        mean_sc_image: seg_mean(Segment::Image),
        mean_oracle_reward: mean_oracle,
        mean_color_entropy: mean_entropy,
        clip_fraction: clip_acc / epochs,
        mean_kl_to_ref: kl_acc / epochs,
        grad_norm,
        degenerate_group_fraction: degenerate,
        wall_ms: started.elapsed().as_millis() as u64,
    }
}
