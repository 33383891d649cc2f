use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use schemars::JsonSchema;

/// Robust-fitting parameters shared by the homography and essential-matrix
/// estimators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RansacConfig {
    /// Inlier threshold on the model residual, pixels.
    pub threshold_px: f64,
    /// Upper bound on the number of sampled hypotheses.
    pub max_iters: usize,
    /// Stop early once a hypothesis this likely to be outlier-free was drawn.
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            threshold_px: 1.0,
            max_iters: 2000,
            confidence: 0.999,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn with_seed(self, seed: u64) -> Self {
        RansacConfig { seed, ..self }
    }
}

/// Number of draws after which an all-inlier sample of `sample_size` has been
/// seen with probability `confidence`, given the inlier ratio.
pub(crate) fn required_iterations(inlier_ratio: f64, sample_size: usize, confidence: f64) -> usize {
    if inlier_ratio >= 1.0 {
        return 1;
    }
    let p_good = inlier_ratio.powi(sample_size as i32);
    if p_good <= f64::EPSILON {
        return usize::MAX;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if n.is_finite() {
        n.ceil().max(1.0) as usize
    } else {
        usize::MAX
    }
}

/// Seeded source of minimal samples.
pub(crate) struct Sampler {
    rng: ChaCha8Rng,
    n: usize,
    k: usize,
}

impl Sampler {
    pub(crate) fn new(seed: u64, n: usize, k: usize) -> Self {
        Sampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            n,
            k,
        }
    }

    pub(crate) fn draw(&mut self) -> Vec<usize> {
        index::sample(&mut self.rng, self.n, self.k).into_vec()
    }
}

/// Running best hypothesis: more inliers wins, then lower residual sum.
#[derive(Debug)]
pub(crate) struct Best<M> {
    pub(crate) model: Option<M>,
    pub(crate) count: usize,
    pub(crate) cost: f64,
}

impl<M> Best<M> {
    pub(crate) fn new() -> Self {
        Best {
            model: None,
            count: 0,
            cost: f64::INFINITY,
        }
    }

    pub(crate) fn offer(&mut self, model: M, count: usize, cost: f64) -> bool {
        if count > self.count || (count == self.count && count > 0 && cost < self.cost) {
            self.model = Some(model);
            self.count = count;
            self.cost = cost;
            true
        } else {
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_bound_behaves() {
        assert_eq!(required_iterations(1.0, 4, 0.999), 1);
        assert_eq!(required_iterations(0.0, 4, 0.999), usize::MAX);
        let n = required_iterations(0.5, 4, 0.99);
        // log(0.01)/log(1-1/16) = 71.36
        assert_eq!(n, 72);
    }

    #[test]
    fn sampler_is_deterministic_and_distinct() {
        let mut a = Sampler::new(9, 50, 5);
        let mut b = Sampler::new(9, 50, 5);
        for _ in 0..20 {
            let s = a.draw();
            assert_eq!(s, b.draw());
            let mut sorted = s.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 5);
        }
    }
}
