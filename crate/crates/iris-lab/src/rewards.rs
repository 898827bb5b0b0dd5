//! Self-certainty and its variants, per-segment reward dispatch, and
//! trajectory returns.
//!
//! Self-certainty of a next-token distribution p over V active tokens is
//! `SC(p) = -KL(U || p) = ln V + (1/V) sum ln p_i`: zero at the uniform
//! distribution and increasingly negative as p sharpens. The backward-KL
//! variant is `-KL(p || U) = H(p) - ln V`.

use crate::domain::Segment;
use crate::numerics::{entropy, CategoricalDist, PROB_FLOOR};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RewardError {
    #[error("at least one of text_mode, image_mode must not be off")]
    AllSegmentsOff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentMode {
    /// Reward the negative of self-certainty (sharpen under maximization).
    Nsc,
    /// Reward self-certainty itself (flatten under maximization).
    Sc,
    /// No reward contribution from this segment.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlVariant {
    /// KL(U || p): the self-certainty definition.
    ForwardKl,
    /// KL(p || U): entropy minus ln V.
    BackwardKl,
}

/// Which intrinsic signal each segment contributes to the return.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub text_mode: SegmentMode,
    pub image_mode: SegmentMode,
    pub variant: KlVariant,
}

impl RewardSpec {
    pub fn new(
        text_mode: SegmentMode,
        image_mode: SegmentMode,
        variant: KlVariant,
    ) -> Result<Self, RewardError> {
        if text_mode == SegmentMode::Off && image_mode == SegmentMode::Off {
            return Err(RewardError::AllSegmentsOff);
        }
        Ok(RewardSpec {
            text_mode,
            image_mode,
            variant,
        })
    }

    /// The paper's configuration: negative self-certainty on both segments.
    pub fn iris() -> Self {
        RewardSpec {
            text_mode: SegmentMode::Nsc,
            image_mode: SegmentMode::Nsc,
            variant: KlVariant::ForwardKl,
        }
    }

    pub fn mode(&self, segment: Segment) -> SegmentMode {
        match segment {
            Segment::Text => self.text_mode,
            Segment::Image => self.image_mode,
        }
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        if self.text_mode == SegmentMode::Off && self.image_mode == SegmentMode::Off {
            return Err(RewardError::AllSegmentsOff);
        }
        Ok(())
    }
}

/// `SC(p) = ln V + (1/V) sum ln p_i`, algebraically -KL(uniform || p).
pub fn self_certainty(dist: &CategoricalDist) -> f64 {
    let v = dist.support_size() as f64;
    let mean_log: f64 = dist
        .probs
        .iter()
        .map(|&p| p.max(PROB_FLOOR).ln())
        .sum::<f64>()
        / v;
    v.ln() + mean_log
}

/// `-KL(p || U) = H(p) - ln V`.
pub fn backward_variant_reward(dist: &CategoricalDist) -> f64 {
    entropy(dist) - (dist.support_size() as f64).ln()
}

/// The base certainty value for a distribution under the chosen variant.
pub fn base_value(dist: &CategoricalDist, variant: KlVariant) -> f64 {
    match variant {
        KlVariant::ForwardKl => self_certainty(dist),
        KlVariant::BackwardKl => backward_variant_reward(dist),
    }
}

/// Per-token reward: the (possibly negated) certainty value, dispatched on
/// the token's segment mode.
pub fn token_reward(dist: &CategoricalDist, segment: Segment, spec: &RewardSpec) -> f64 {
    match spec.mode(segment) {
        SegmentMode::Off => 0.0,
        SegmentMode::Sc => base_value(dist, spec.variant),
        SegmentMode::Nsc => -base_value(dist, spec.variant),
    }
}

/// Per-token reward from a cached base-certainty value (recorded at sampling
/// time from the behavior distribution).
pub fn token_reward_from_cached(cached_base: f64, segment: Segment, spec: &RewardSpec) -> f64 {
    match spec.mode(segment) {
        SegmentMode::Off => 0.0,
        SegmentMode::Sc => cached_base,
        SegmentMode::Nsc => -cached_base,
    }
}
