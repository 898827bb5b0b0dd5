//! Numerical primitives shared by every other module: masked softmax over an
//! active token subset, categorical divergences and entropy, and deterministic
//! counter-based RNG substreams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Probabilities are floored at this value before any logarithm so a sharp
/// softmax output can never produce -inf in a divergence.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NumericsError {
    #[error("empty active set")]
    EmptyActiveSet,
    #[error("non-finite logit")]
    NonFiniteLogit,
    #[error("support mismatch")]
    SupportMismatch,
}

/// A categorical distribution over an ordered subset of the vocabulary.
///
/// Tokens outside `active_ids` carry exactly zero mass; `probs[i]` is the
/// probability of `active_ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    pub probs: Vec<f64>,
    pub active_ids: Vec<u32>,
}

impl CategoricalDist {
    /// Number of tokens in the active set.
    pub fn support_size(&self) -> usize {
        self.active_ids.len()
    }

    /// Uniform distribution over the given active set.
    pub fn uniform(active_ids: Vec<u32>) -> Self {
        let v = active_ids.len();
        CategoricalDist {
            probs: vec![1.0 / v as f64; v],
            active_ids,
        }
    }

    /// ln of the probability of the token at position `idx` in the active set.
    pub fn log_prob_at(&self, idx: usize) -> f64 {
        self.probs[idx].max(PROB_FLOOR).ln()
    }

    /// Position of a token id in the active set, if present.
    pub fn index_of(&self, token_id: u32) -> Option<usize> {
        self.active_ids.iter().position(|&t| t == token_id)
    }

    /// Draw one token index (into the active set) from this distribution.
    pub fn sample_index(&self, rng: &mut ChaCha8Rng) -> usize {
        use rand::Rng;
        let x: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if x < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }
}

/// Softmax of `logits` restricted to `active_ids`, computed with
/// max-subtraction. Tokens outside the active set get zero mass.
pub fn masked_softmax(logits: &[f64], active_ids: &[u32]) -> Result<CategoricalDist, NumericsError> {
    if active_ids.is_empty() {
        return Err(NumericsError::EmptyActiveSet);
    }
    let active: Vec<f64> = active_ids.iter().map(|&id| logits[id as usize]).collect();
    if active.iter().any(|x| !x.is_finite()) {
        return Err(NumericsError::NonFiniteLogit);
    }
    let max = active.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = active.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    Ok(CategoricalDist {
        probs: exp.iter().map(|&e| e / sum).collect(),
        active_ids: active_ids.to_vec(),
    })
}

/// KL(p || q) in nats. Both distributions must share the same active set.
pub fn kl_divergence(p: &CategoricalDist, q: &CategoricalDist) -> Result<f64, NumericsError> {
    if p.active_ids != q.active_ids {
        return Err(NumericsError::SupportMismatch);
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.probs.iter().zip(&q.probs) {
        let pi = pi.max(PROB_FLOOR);
        let qi = qi.max(PROB_FLOOR);
        kl += pi * (pi.ln() - qi.ln());
    }
    Ok(kl)
}

/// Shannon entropy -sum p ln p in nats.
pub fn entropy(p: &CategoricalDist) -> f64 {
    -p.probs
        .iter()
        .map(|&pi| {
            let pi = pi.max(PROB_FLOOR);
            pi * pi.ln()
        })
        .sum::<f64>()
}

/// Immutable descriptor of a deterministic RNG substream.
///
/// Construction rule (fixed so independent implementations agree): the draw
/// sequence of a stream is that of ChaCha8 keyed with
/// `splitmix64(seed) xor stream_id` expanded to a 256-bit key by iterating
/// splitmix64, starting at ChaCha stream 0. Child streams remix
/// `(seed, stream_id, child_id)` through the same splitmix64 chain, so the
/// tree of substreams is collision-resistant and independent of the thread
/// layout that consumes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Build the substream identified by `(seed, stream_id)`.
pub fn derive_stream(seed: u64, stream_id: u64) -> RngStream {
    RngStream { seed, stream_id }
}

impl RngStream {
    /// A child stream whose draws are independent of this stream's.
    pub fn child(&self, child_id: u64) -> RngStream {
        let mut s = self.seed;
        let a = splitmix64(&mut s);
        let mut s2 = a ^ self.stream_id;
        let mixed = splitmix64(&mut s2);
        RngStream {
            seed: mixed,
            stream_id: child_id,
        }
    }

    /// Materialize the stream as a concrete generator.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut state = self.seed;
        let base = splitmix64(&mut state) ^ self.stream_id;
        let mut key_state = base;
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut key_state).to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn dist(probs: &[f64]) -> CategoricalDist {
        CategoricalDist {
            probs: probs.to_vec(),
            active_ids: (0..probs.len() as u32).collect(),
        }
    }

    fn random_dist(rng: &mut ChaCha8Rng, v: usize) -> CategoricalDist {
        let raw: Vec<f64> = (0..v).map(|_| rng.gen_range(0.01..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        dist(&raw.iter().map(|x| x / sum).collect::<Vec<_>>())
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let d = masked_softmax(&[0.0, 0.0, 0.0, 0.0], &[0, 1, 2, 3]).unwrap();
        for p in &d.probs {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_huge_logits_are_stable() {
        let d = masked_softmax(&[1e6, 1e6 + 1.0], &[0, 1]).unwrap();
        let e = std::f64::consts::E;
        assert!((d.probs[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((d.probs[1] - e / (1.0 + e)).abs() < 1e-12);
    }

    #[test]
    fn softmax_masks_inactive_tokens() {
        let d = masked_softmax(&[5.0, 0.0, 0.0], &[0, 2]).unwrap();
        assert_eq!(d.active_ids, vec![0, 2]);
        let ratio = d.probs[0] / d.probs[1];
        assert!((ratio - 5.0f64.exp()).abs() / 5.0f64.exp() < 1e-12);
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_errors() {
        assert_eq!(
            masked_softmax(&[0.0], &[]).unwrap_err(),
            NumericsError::EmptyActiveSet
        );
        assert_eq!(
            masked_softmax(&[f64::NAN], &[0]).unwrap_err(),
            NumericsError::NonFiniteLogit
        );
    }

    #[test]
    fn kl_identity_is_zero() {
        let p = dist(&[0.3, 0.2, 0.5]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_uniform_vs_skewed() {
        // -ln 4 - (1/4) sum ln q_i, summed directly
        let p = dist(&[0.25; 4]);
        let q = dist(&[0.7, 0.1, 0.1, 0.1]);
        let expect = 0.25 * ((0.25f64 / 0.7).ln() + 3.0 * (0.25f64 / 0.1).ln());
        let got = kl_divergence(&p, &q).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.429813).abs() < 1e-6);
    }

    #[test]
    fn kl_two_term_hand_value() {
        let p = dist(&[0.9, 0.1]);
        let q = dist(&[0.1, 0.9]);
        let expect = 0.9 * 9.0f64.ln() + 0.1 * (1.0f64 / 9.0).ln();
        assert!((kl_divergence(&p, &q).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 1.757780).abs() < 1e-6);
    }

    #[test]
    fn kl_support_mismatch() {
        let p = dist(&[0.5, 0.5]);
        let q = CategoricalDist {
            probs: vec![0.5, 0.5],
            active_ids: vec![3, 4],
        };
        assert_eq!(
            kl_divergence(&p, &q).unwrap_err(),
            NumericsError::SupportMismatch
        );
    }

    #[test]
    fn entropy_values() {
        assert!((entropy(&dist(&[0.25; 4])) - 4.0f64.ln()).abs() < 1e-12);
        let h = entropy(&dist(&[0.5, 0.25, 0.125, 0.125]));
        assert!((h - 1.75 * 2.0f64.ln()).abs() < 1e-12);
        assert!((h - 1.213008).abs() < 1e-6);
        let e = 1e-12;
        let near_onehot = dist(&[1.0 - 3.0 * e, e, e, e]);
        assert!(entropy(&near_onehot) < 1e-10);
    }

    #[test]
    fn kl_nonneg_and_entropy_identity_random() {
        let mut rng = derive_stream(7, 0).rng();
        for _ in 0..1000 {
            let v = rng.gen_range(2..12);
            let p = random_dist(&mut rng, v);
            let q = random_dist(&mut rng, v);
            assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
            assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
            // -KL(p || U) = H(p) - ln V
            let u = CategoricalDist::uniform(p.active_ids.clone());
            let lhs = -kl_divergence(&p, &u).unwrap();
            let rhs = entropy(&p) - (v as f64).ln();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn streams_are_deterministic_and_separated() {
        let draws = |s: RngStream| -> Vec<u64> {
            let mut r = s.rng();
            (0..100).map(|_| r.gen()).collect()
        };
        assert_eq!(draws(derive_stream(42, 0)), draws(derive_stream(42, 0)));
        assert_ne!(draws(derive_stream(42, 0)), draws(derive_stream(42, 1)));
        assert_ne!(draws(derive_stream(42, 0)), draws(derive_stream(43, 0)));
        let c = derive_stream(42, 0).child(3);
        assert_eq!(draws(c), draws(derive_stream(42, 0).child(3)));
        assert_ne!(draws(c), draws(derive_stream(42, 0).child(4)));
    }
}
