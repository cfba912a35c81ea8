use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::SaliencySample;

/// Mirrors each sample (image, density and fixations) with probability
/// `flip_prob`. One draw is consumed per sample whatever the outcome, so the
/// random stream advances identically for every flip probability.
pub fn hflip_augment(batch: &[SaliencySample], flip_prob: f64, rng: &mut ChaCha8Rng) -> Vec<SaliencySample> {
    batch
        .iter()
        .map(|s| {
            let u: f64 = rng.random();
            if u < flip_prob {
                s.flipped()
            } else {
                s.clone()
            }
        })
        .collect()
}
