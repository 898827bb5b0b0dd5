//! Two-phase trajectory generation (semantic text CoT, then 64 image tokens)
//! and group sampling for the policy optimizer.

use crate::domain::{GRID_CELLS, Prompt, Segment, Vocabulary};
use crate::numerics::RngStream;
use crate::policy::{forward_traced, PolicyError, PolicyParams};
use crate::rewards::{base_value, self_certainty, token_reward_from_cached, RewardSpec};
use rayon::prelude::*;
use thiserror::Error;

pub const DEFAULT_MAX_TEXT_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("group size must allow normalization")]
    GroupTooSmall,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// One output position: the token, which segment produced it, and whether it
/// was forced structurally rather than sampled from the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrajectoryToken {
    pub token: u32,
    pub segment: Segment,
    pub forced: bool,
}

/// One sampled output: a text prefix, exactly one begin-of-image marker, then
/// exactly 64 image tokens. Per-sampled-token statistics are recorded from the
/// behavior distribution at sampling time; forced tokens carry none.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: Prompt,
    pub tokens: Vec<TrajectoryToken>,
    /// ln pi_old(o_t | q, o_<t) for each non-forced token, in order.
    pub behavior_log_probs: Vec<f64>,
    /// Self-certainty (nats) of the behavior distribution per non-forced token.
    pub token_sc: Vec<f64>,
    /// Certainty value under the reward spec's KL variant per non-forced token
    /// (equals `token_sc` for the forward variant).
    pub token_base: Vec<f64>,
    /// u_i: signed sum of per-token rewards.
    pub intrinsic_return: f64,
    pub oracle_score: Option<f64>,
}

impl Trajectory {
    /// Number of policy-sampled tokens, the |o_i| of the objective.
    pub fn sampled_len(&self) -> usize {
        self.tokens.iter().filter(|t| !t.forced).count()
    }

    /// The 64 image tokens in order.
    pub fn image_tokens(&self) -> Vec<u32> {
        self.tokens
            .iter()
            .filter(|t| t.segment == Segment::Image)
            .map(|t| t.token)
            .collect()
    }

    /// Segments of the non-forced tokens, aligned with `behavior_log_probs`.
    pub fn sampled_segments(&self) -> Vec<Segment> {
        self.tokens
            .iter()
            .filter(|t| !t.forced)
            .map(|t| t.segment)
            .collect()
    }

    /// Mean self-certainty over sampled tokens of one segment, if any.
    pub fn mean_sc(&self, segment: Segment) -> Option<f64> {
        let values: Vec<f64> = self
            .tokens
            .iter()
            .filter(|t| !t.forced)
            .zip(&self.token_sc)
            .filter(|(t, _)| t.segment == segment)
            .map(|(_, &sc)| sc)
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }

    /// Visit every position in order: `(context, segment, token, forced)`.
    /// The context is the last k generated tokens, pad-left; forced tokens are
    /// part of later contexts even though they carry no statistics.
    pub fn positions(&self, vocab: &Vocabulary, k: usize) -> Vec<(Vec<u32>, Segment, u32, bool)> {
        let mut ctx = vec![vocab.pad_token; k];
        let mut out = Vec::with_capacity(self.tokens.len());
        for t in &self.tokens {
            out.push((ctx.clone(), t.segment, t.token, t.forced));
            ctx.rotate_left(1);
            ctx[k - 1] = t.token;
        }
        out
    }
}

/// Signed sum of per-token rewards over the policy-sampled tokens.
pub fn trajectory_return(traj: &Trajectory, spec: &RewardSpec) -> f64 {
    traj.sampled_segments()
        .iter()
        .zip(&traj.token_base)
        .map(|(&seg, &base)| token_reward_from_cached(base, seg, spec))
        .sum()
}

/// G trajectories for one prompt plus their group-normalized advantages.
#[derive(Debug, Clone)]
pub struct TrajectoryGroup {
    pub prompt: Prompt,
    pub members: Vec<Trajectory>,
    /// One advantage per member, shared across that member's tokens. Empty
    /// until the optimizer fills it.
    pub advantages: Vec<f64>,
    pub degenerate: bool,
    /// Content hash of the behavior-policy snapshot the members were sampled
    /// under.
    pub behavior_hash: String,
}

/// Sample one trajectory. With `cot_enabled` the text phase runs until the
/// begin-of-image token is sampled or `max_text_len` text tokens have been
/// emitted (the marker is then forced and flagged); without it the marker is
/// forced immediately and only the image phase samples.
pub fn generate(
    params: &PolicyParams,
    vocab: &Vocabulary,
    prompt: &Prompt,
    stream: RngStream,
    max_text_len: usize,
    cot_enabled: bool,
    spec: &RewardSpec,
) -> Result<Trajectory, RolloutError> {
    let k = params.config.k;
    let mut rng = stream.rng();
    let mut ctx = vec![vocab.pad_token; k];
    let mut tokens = Vec::new();
    let mut behavior_log_probs = Vec::new();
    let mut token_sc = Vec::new();
    let mut token_base = Vec::new();

    let push = |ctx: &mut Vec<u32>, tokens: &mut Vec<TrajectoryToken>, tok: TrajectoryToken| {
        tokens.push(tok);
        ctx.rotate_left(1);
        ctx[k - 1] = tok.token;
    };

    if cot_enabled {
        let mut text_count = 0;
        loop {
            if text_count >= max_text_len {
                push(
                    &mut ctx,
                    &mut tokens,
                    TrajectoryToken {
                        token: vocab.boi_token,
                        segment: Segment::Text,
                        forced: true,
                    },
                );
                break;
            }
            let trace = forward_traced(params, vocab, prompt, &ctx, Segment::Text)?;
            let idx = trace.dist.sample_index(&mut rng);
            let token = trace.dist.active_ids[idx];
            behavior_log_probs.push(trace.dist.log_prob_at(idx));
            token_sc.push(self_certainty(&trace.dist));
            token_base.push(base_value(&trace.dist, spec.variant));
            push(
                &mut ctx,
                &mut tokens,
                TrajectoryToken {
                    token,
                    segment: Segment::Text,
                    forced: false,
                },
            );
            if token == vocab.boi_token {
                break;
            }
            text_count += 1;
        }
    } else {
        push(
            &mut ctx,
            &mut tokens,
            TrajectoryToken {
                token: vocab.boi_token,
                segment: Segment::Text,
                forced: true,
            },
        );
    }

    for _ in 0..GRID_CELLS {
        let trace = forward_traced(params, vocab, prompt, &ctx, Segment::Image)?;
        let idx = trace.dist.sample_index(&mut rng);
        let token = trace.dist.active_ids[idx];
        behavior_log_probs.push(trace.dist.log_prob_at(idx));
        token_sc.push(self_certainty(&trace.dist));
        token_base.push(base_value(&trace.dist, spec.variant));
        push(
            &mut ctx,
            &mut tokens,
            TrajectoryToken {
                token,
                segment: Segment::Image,
                forced: false,
            },
        );
    }

    let mut traj = Trajectory {
        prompt: prompt.clone(),
        tokens,
        behavior_log_probs,
        token_sc,
        token_base,
        intrinsic_return: 0.0,
        oracle_score: None,
    };
    traj.intrinsic_return = trajectory_return(&traj, spec);
    Ok(traj)
}

/// Sample G members for one prompt; member i draws from `base_stream.child(i)`
/// so the group is identical for any worker layout. Advantages are left
/// unfilled.
#[allow(clippy::too_many_arguments)]
pub fn generate_group(
    params: &PolicyParams,
    vocab: &Vocabulary,
    prompt: &Prompt,
    group_size: usize,
    base_stream: RngStream,
    max_text_len: usize,
    cot_enabled: bool,
    spec: &RewardSpec,
) -> Result<TrajectoryGroup, RolloutError> {
    if group_size < 2 {
        return Err(RolloutError::GroupTooSmall);
    }
    let members: Vec<Trajectory> = (0..group_size)
        .into_par_iter()
        .map(|i| {
            generate(
                params,
                vocab,
                prompt,
                base_stream.child(i as u64),
                max_text_len,
                cot_enabled,
                spec,
            )
        })
        .collect::<Result<_, _>>()?;
    Ok(TrajectoryGroup {
        prompt: prompt.clone(),
        members,
        advantages: Vec::new(),
        degenerate: false,
        behavior_hash: params.content_hash(),
    })
}

/// Teacher-forced re-scoring of a trajectory's sampled tokens under `params`.
pub fn sequence_log_probs(
    params: &PolicyParams,
    vocab: &Vocabulary,
    traj: &Trajectory,
) -> Result<Vec<f64>, PolicyError> {
    let mut out = Vec::with_capacity(traj.behavior_log_probs.len());
    for (pos, (ctx, segment, token, forced)) in
        traj.positions(vocab, params.config.k).into_iter().enumerate()
    {
        if forced {
            continue;
        }
        let trace = forward_traced(params, vocab, &traj.prompt, &ctx, segment)?;
        let idx = trace
            .dist
            .index_of(token)
            .ok_or(PolicyError::SegmentViolation(pos))?;
        out.push(trace.dist.log_prob_at(idx));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{sample_prompt, PromptCategory};
    use crate::numerics::derive_stream;
    use crate::policy::{init_params, PolicyConfig};

    fn setup() -> (Vocabulary, PolicyParams, Prompt) {
        let vocab = Vocabulary::default();
        let params = init_params(derive_stream(2, 0), PolicyConfig::default());
        let prompt = sample_prompt(&vocab, derive_stream(2, 1), PromptCategory::TwoObject);
        (vocab, params, prompt)
    }

    #[test]
    fn structure_with_cot() {
        let (vocab, params, prompt) = setup();
        let spec = RewardSpec::iris();
        let t = generate(&params, &vocab, &prompt, derive_stream(3, 0), 16, true, &spec).unwrap();
        let boi_count = t
            .tokens
            .iter()
            .filter(|tok| tok.token == vocab.boi_token)
            .count();
        assert_eq!(boi_count, 1);
        assert_eq!(t.image_tokens().len(), GRID_CELLS);
        // text prefix, then one boi, then image
        let boi_pos = t.tokens.iter().position(|tok| tok.token == vocab.boi_token).unwrap();
        assert!(t.tokens[..boi_pos].iter().all(|tok| tok.segment == Segment::Text));
        assert!(t.tokens[boi_pos + 1..].iter().all(|tok| tok.segment == Segment::Image));
        assert_eq!(t.behavior_log_probs.len(), t.sampled_len());
        assert_eq!(t.token_sc.len(), t.sampled_len());
    }

    #[test]
    fn structure_without_cot() {
        let (vocab, params, prompt) = setup();
        let spec = RewardSpec::iris();
        let t = generate(&params, &vocab, &prompt, derive_stream(3, 0), 16, false, &spec).unwrap();
        assert_eq!(t.tokens.len(), 1 + GRID_CELLS);
        assert!(t.tokens[0].forced);
        assert_eq!(t.tokens[0].token, vocab.boi_token);
        assert_eq!(t.sampled_len(), GRID_CELLS);
    }

    #[test]
    fn zero_params_give_zero_sc() {
        let vocab = Vocabulary::default();
        let mut cfg = PolicyConfig::default();
        cfg.init_scale = 0.0;
        let params = init_params(derive_stream(0, 0), cfg);
        let prompt = sample_prompt(&vocab, derive_stream(2, 1), PromptCategory::Single);
        let spec = RewardSpec::iris();
        let t = generate(&params, &vocab, &prompt, derive_stream(3, 0), 16, true, &spec).unwrap();
        assert!(t.token_sc.iter().all(|&sc| sc.abs() < 1e-12));
        assert!(t.intrinsic_return.abs() < 1e-10);
    }

    #[test]
    fn generation_is_deterministic() {
        let (vocab, params, prompt) = setup();
        let spec = RewardSpec::iris();
        let a = generate(&params, &vocab, &prompt, derive_stream(3, 7), 16, true, &spec).unwrap();
        let b = generate(&params, &vocab, &prompt, derive_stream(3, 7), 16, true, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn group_errors_and_determinism() {
        let (vocab, params, prompt) = setup();
        let spec = RewardSpec::iris();
        assert!(matches!(
            generate_group(&params, &vocab, &prompt, 1, derive_stream(4, 0), 16, true, &spec),
            Err(RolloutError::GroupTooSmall)
        ));
        let g = generate_group(&params, &vocab, &prompt, 8, derive_stream(4, 0), 16, true, &spec).unwrap();
        assert_eq!(g.members.len(), 8);
        for m in &g.members {
            assert_eq!(m.image_tokens().len(), GRID_CELLS);
        }
        // serial regeneration member-by-member matches the parallel group
        for (i, m) in g.members.iter().enumerate() {
            let solo = generate(
                &params,
                &vocab,
                &prompt,
                derive_stream(4, 0).child(i as u64),
                16,
                true,
                &spec,
            )
            .unwrap();
            assert_eq!(&solo, m);
        }
    }

    #[test]
    fn tokens_respect_segment_vocabulary() {
        let (vocab, params, prompt) = setup();
        let spec = RewardSpec::iris();
        for i in 0..20 {
            let t = generate(&params, &vocab, &prompt, derive_stream(5, i), 16, true, &spec).unwrap();
            for tok in &t.tokens {
                match tok.segment {
                    Segment::Text => assert!(vocab.text_active_set().contains(&tok.token)),
                    Segment::Image => assert!(vocab.image_active_set().contains(&tok.token)),
                }
            }
        }
    }

    #[test]
    fn signed_sc_sum_equals_return() {
        let (vocab, params, prompt) = setup();
        for spec in [
            RewardSpec::iris(),
            RewardSpec::new(
                crate::rewards::SegmentMode::Sc,
                crate::rewards::SegmentMode::Off,
                crate::rewards::KlVariant::ForwardKl,
            )
            .unwrap(),
        ] {
            let t = generate(&params, &vocab, &prompt, derive_stream(6, 0), 16, true, &spec).unwrap();
            assert!((trajectory_return(&t, &spec) - t.intrinsic_return).abs() < 1e-12);
        }
    }

    #[test]
    fn rescoring_under_sampling_snapshot_matches_recorded() {
        let (vocab, params, prompt) = setup();
        let spec = RewardSpec::iris();
        let t = generate(&params, &vocab, &prompt, derive_stream(7, 0), 16, true, &spec).unwrap();
        let rescored = sequence_log_probs(&params, &vocab, &t).unwrap();
        assert_eq!(rescored.len(), t.behavior_log_probs.len());
        for (a, b) in rescored.iter().zip(&t.behavior_log_probs) {
            assert!((a - b).abs() < 1e-12);
            assert!(a.exp() > 0.0 && a.exp() <= 1.0);
        }
    }

    #[test]
    fn forced_marker_excluded_from_log_probs() {
        let (vocab, params, prompt) = setup();
        let spec = RewardSpec::iris();
        // max_text_len 0 forces the marker immediately even with cot on
        let t = generate(&params, &vocab, &prompt, derive_stream(8, 0), 0, true, &spec).unwrap();
        assert!(t.tokens[0].forced);
        assert_eq!(t.behavior_log_probs.len(), GRID_CELLS);
        assert_eq!(sequence_log_probs(&params, &vocab, &t).unwrap().len(), GRID_CELLS);
    }
}
