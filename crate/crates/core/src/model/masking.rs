use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::preprocess::MASK_TOKEN;

/// Masked-token corruption policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingPlan {
    pub ratio: f64,
    /// Share of masked positions replaced by [`MASK_TOKEN`].
    pub mask_share: f64,
    /// Share replaced by a uniformly random byte; the rest keep their id.
    pub random_share: f64,
    /// Mask at least one position of every non-empty sequence.
    pub min_one: bool,
}

impl Default for MaskingPlan {
    fn default() -> Self {
        Self {
            ratio: 0.15,
            mask_share: 0.8,
            random_share: 0.1,
            min_one: true,
        }
    }
}

impl MaskingPlan {
    pub fn with_ratio(ratio: f64) -> Self {
        Self {
            ratio,
            ..Self::default()
        }
    }

    /// `round(ρ·len)`, raised to 1 when `min_one` is set.
    pub fn mask_count(&self, len: usize) -> usize {
        let n = (self.ratio * len as f64).round() as usize;
        let n = n.min(len);
        if self.min_one && len > 0 {
            n.max(1)
        } else {
            n
        }
    }
}

/// A corrupted sequence with its reconstruction targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub tokens: Vec<u16>,
    /// Masked positions in increasing order.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub targets: Vec<u16>,
}

pub fn apply_mask<R: Rng>(tokens: &[u16], plan: &MaskingPlan, rng: &mut R) -> MaskedSequence {
    let count = plan.mask_count(tokens.len());
    let mut positions = index::sample(rng, tokens.len(), count).into_vec();
    positions.sort_unstable();
    let mut out = tokens.to_vec();
    let mut targets = Vec::with_capacity(count);
    for &pos in &positions {
        targets.push(tokens[pos]);
        let u: f64 = rng.gen();
        if u < plan.mask_share {
            out[pos] = MASK_TOKEN;
        } else if u < plan.mask_share + plan.random_share {
            out[pos] = rng.gen_range(0..256u16);
        }
    }
    MaskedSequence {
        tokens: out,
        positions,
        targets,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngState;

    #[test]
    fn counts_follow_ratio() {
        let plan = MaskingPlan::default();
        assert_eq!(plan.mask_count(160), 24);
        assert_eq!(plan.mask_count(3), 1);
        assert_eq!(plan.mask_count(0), 0);
        let off = MaskingPlan {
            ratio: 0.0,
            min_one: false,
            ..plan
        };
        assert_eq!(off.mask_count(50), 0);
    }

    #[test]
    fn zero_ratio_leaves_sequence() {
        let plan = MaskingPlan {
            ratio: 0.0,
            min_one: false,
            ..Default::default()
        };
        let toks: Vec<u16> = (0..40).collect();
        let m = apply_mask(&toks, &plan, &mut RngState::new(1, 0));
        assert_eq!(m.tokens, toks);
        assert!(m.targets.is_empty());
    }

    #[test]
    fn full_ratio_mostly_mask_tokens() {
        let plan = MaskingPlan::with_ratio(1.0);
        let toks = vec![7u16; 1000];
        let m = apply_mask(&toks, &plan, &mut RngState::new(0, 0));
        assert_eq!(m.positions.len(), 1000);
        let masked = m.tokens.iter().filter(|&&t| t == MASK_TOKEN).count();
        assert!((750..=850).contains(&masked), "{masked}");
        assert!(m.targets.iter().all(|&t| t == 7));
    }

    #[test]
    fn unmasked_positions_untouched() {
        let plan = MaskingPlan::with_ratio(0.3);
        let toks: Vec<u16> = (0..100).map(|i| (i * 7 % 256) as u16).collect();
        let m = apply_mask(&toks, &plan, &mut RngState::new(5, 2));
        for (i, (&a, &b)) in toks.iter().zip(&m.tokens).enumerate() {
            if !m.positions.contains(&i) {
                assert_eq!(a, b);
            }
        }
        let again = apply_mask(&toks, &plan, &mut RngState::new(5, 2));
        assert_eq!(m, again);
    }
}
