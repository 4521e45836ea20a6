//! Stochastic sequence views: Mask, Crop and Reorder.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::{ItemId, ItemSequence};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentationConfig {
    /// Per-position mask probability.
    pub gamma: f64,
    /// Crop length ratio.
    pub eta: f64,
    /// Reorder window ratio.
    pub mu: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            gamma: 0.3,
            eta: 0.6,
            mu: 0.3,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("aug.gamma", self.gamma), ("aug.eta", self.eta), ("aug.mu", self.mu)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} = {v} must lie strictly inside (0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugmentOp {
    Mask,
    Crop,
    Reorder,
}

/// How contrastive views are produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ViewPolicy {
    Augment(AugmentationConfig),
    /// Views are the sequence itself; only dropout separates them.
    Identity,
}

fn window_len(ratio: f64, len: usize) -> usize {
    ((ratio * len as f64).floor() as usize).clamp(1, len)
}

/// Replaces each position by `mask_id` with probability `gamma`.
pub fn mask<R: Rng + ?Sized>(seq: &ItemSequence, gamma: f64, mask_id: ItemId, rng: &mut R) -> ItemSequence {
    let items = seq
        .items()
        .iter()
        .map(|&v| if rng.gen::<f64>() < gamma { mask_id } else { v })
        .collect();
    ItemSequence::new(items)
}

/// Contiguous sub-sequence of length `max(1, ⌊eta·l⌋)` at a uniform offset.
pub fn crop<R: Rng + ?Sized>(seq: &ItemSequence, eta: f64, rng: &mut R) -> ItemSequence {
    let l = seq.len();
    let lc = window_len(eta, l);
    let start = rng.gen_range(0..=l - lc);
    ItemSequence::new(seq.items()[start..start + lc].to_vec())
}

/// Shuffles a contiguous window of length `max(1, ⌊mu·l⌋)` at a uniform
/// offset; everything outside the window is left in place.
pub fn reorder<R: Rng + ?Sized>(seq: &ItemSequence, mu: f64, rng: &mut R) -> ItemSequence {
    let l = seq.len();
    let lr = window_len(mu, l);
    let start = rng.gen_range(0..=l - lr);
    let mut items = seq.items().to_vec();
    items[start..start + lr].shuffle(rng);
    ItemSequence::new(items)
}

/// Picks one of the three operators uniformly and applies it.
pub fn sample_view_with_op<R: Rng + ?Sized>(
    seq: &ItemSequence,
    config: &AugmentationConfig,
    mask_id: ItemId,
    rng: &mut R,
) -> (AugmentOp, ItemSequence) {
    match rng.gen_range(0..3) {
        0 => (AugmentOp::Mask, mask(seq, config.gamma, mask_id, rng)),
        1 => (AugmentOp::Crop, crop(seq, config.eta, rng)),
        _ => (AugmentOp::Reorder, reorder(seq, config.mu, rng)),
    }
}

pub fn sample_view<R: Rng + ?Sized>(
    seq: &ItemSequence,
    config: &AugmentationConfig,
    mask_id: ItemId,
    rng: &mut R,
) -> ItemSequence {
    sample_view_with_op(seq, config, mask_id, rng).1
}

impl ViewPolicy {
    pub fn view<R: Rng + ?Sized>(&self, seq: &ItemSequence, mask_id: ItemId, rng: &mut R) -> ItemSequence {
        match self {
            ViewPolicy::Augment(cfg) => sample_view(seq, cfg, mask_id, rng),
            ViewPolicy::Identity => seq.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const MASK: ItemId = 1000;

    fn seq(n: u32) -> ItemSequence {
        ItemSequence::new((0..n).collect())
    }

    #[test]
    fn mask_with_zero_probability_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(mask(&seq(20), 0.0, MASK, &mut rng), seq(20));
    }

    #[test]
    fn mask_count_stays_within_binomial_bound() {
        // Binomial(1000, 0.5): P(|X - 500| > 100) is below 1e-9.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let out = mask(&seq(1000), 0.5, MASK, &mut rng);
            let masked = out.items().iter().filter(|&&v| v == MASK).count();
            assert!((400..=600).contains(&masked), "{masked}");
            assert_eq!(out.len(), 1000);
        }
        let all = mask(&seq(7), 1.0, MASK, &mut rng);
        assert_eq!(all.len(), 7);
    }

    #[test]
    fn crop_half_of_eight() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = seq(8);
        for _ in 0..50 {
            let c = crop(&s, 0.5, &mut rng);
            assert_eq!(c.len(), 4);
            let start = c.items()[0] as usize;
            assert_eq!(c.items(), &s.items()[start..start + 4]);
        }
        assert_eq!(crop(&seq(1), 0.5, &mut rng), seq(1));
    }

    #[test]
    fn reorder_tiny_window_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(reorder(&seq(5), 0.1, &mut rng), seq(5));
    }

    #[test]
    fn reorder_only_touches_its_window() {
        // l=6, mu=0.5 -> window of 3 at some offset c in 0..=3
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let out = reorder(&seq(6), 0.5, &mut rng);
            let changed: Vec<usize> = (0..6).filter(|&i| out.items()[i] != i as u32).collect();
            if let (Some(&lo), Some(&hi)) = (changed.first(), changed.last()) {
                assert!(hi - lo < 3, "{changed:?}");
            }
        }
    }

    #[test]
    fn operators_are_chosen_uniformly() {
        // Multinomial(3000, 1/3): sd ~ 25.8, so +-100 is ~3.9 sd.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AugmentationConfig::default();
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            let (op, _) = sample_view_with_op(&seq(10), &cfg, MASK, &mut rng);
            counts[op as usize] += 1;
        }
        for c in counts {
            assert!((900..=1100).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn seeded_views_reproduce() {
        let cfg = AugmentationConfig::default();
        let a = sample_view(&seq(12), &cfg, MASK, &mut ChaCha8Rng::seed_from_u64(7));
        let b = sample_view(&seq(12), &cfg, MASK, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    #[test]
    fn config_bounds() {
        assert!(AugmentationConfig::default().validate().is_ok());
        let bad = AugmentationConfig {
            gamma: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn views_are_nonempty_and_in_range(
            items in prop::collection::vec(0u32..50, 1..40),
            seed in any::<u64>(),
            gamma in 0.01f64..0.99,
            eta in 0.01f64..0.99,
            mu in 0.01f64..0.99,
        ) {
            let s = ItemSequence::new(items.clone());
            let cfg = AugmentationConfig { gamma, eta, mu };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (op, v) = sample_view_with_op(&s, &cfg, 50, &mut rng);
            prop_assert!(!v.is_empty());
            prop_assert!(v.len() <= s.len());
            prop_assert!(v.items().iter().all(|&i| i <= 50));
            if op == AugmentOp::Reorder {
                let mut a = v.items().to_vec();
                let mut b = items.clone();
                a.sort_unstable();
                b.sort_unstable();
                prop_assert_eq!(a, b);
            }
        }
    }
}
