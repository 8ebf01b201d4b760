use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::genomic_io::{LoopAnnotation, LoopLabel};

pub const MAX_SAMPLING_RETRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChromosomeExtent {
    pub chromosome: String,
    pub n_bins: u64,
    pub resolution_bp: u64,
}

/// Negative-loop sampler.
///
/// The first `ceil(count / 2)` negatives reuse distances drawn from the
/// empirical distance histogram of the positives (one bin per resolution
/// step); the rest use distances strictly beyond the largest positive
/// distance. Anchor positions are uniform along the chromosome.
#[derive(Debug, Clone)]
pub struct NegativeSampling {
    pub count: usize,
    pub seed: u64,
    /// Reject negatives within this Chebyshev distance (bins) of a positive.
    pub exclusion_radius: u64,
    /// Upper bound on far-negative distances (bins); defaults to the chromosome length.
    pub far_distance_limit: Option<u64>,
}

impl NegativeSampling {
    pub fn new(count: usize, seed: u64) -> Self {
        Self {
            count,
            seed,
            exclusion_radius: 0,
            far_distance_limit: None,
        }
    }

    pub fn sample(&self, positives: &[LoopAnnotation], extent: &ChromosomeExtent) -> Result<Vec<LoopAnnotation>> {
        ensure!(self.count >= 1, "negative count must be >= 1");
        ensure!(!positives.is_empty(), "no positive loops to match");
        let res = extent.resolution_bp;
        let n = extent.n_bins;
        let mut pos_bins = Vec::with_capacity(positives.len());
        for p in positives {
            ensure!(
                p.anchor1.chromosome == extent.chromosome && p.anchor2.chromosome == extent.chromosome,
                "positive loop {}/{} is not on {}",
                p.anchor1,
                p.anchor2,
                extent.chromosome
            );
            pos_bins.push(p.bins(res));
        }
        let taken: HashSet<(u64, u64)> = pos_bins.iter().copied().collect();
        let r = self.exclusion_radius as i64;
        let too_close = |i: u64, j: u64| {
            (-r..=r).any(|di| {
                (-r..=r).any(|dj| {
                    let (a, b) = (i as i64 + di, j as i64 + dj);
                    a >= 0 && b >= 0 && taken.contains(&(a as u64, b as u64))
                })
            })
        };
        let distances: Vec<u64> = pos_bins.iter().map(|(i, j)| j - i).collect();
        let max_distance = *distances.iter().max().expect("non-empty");
        let far_hi = self.far_distance_limit.unwrap_or(n).min(n.saturating_sub(1));

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let matched = self.count - self.count / 2;
        let mut out = Vec::with_capacity(self.count);

        for k in 0..self.count {
            let far = k >= matched;
            if far && max_distance + 1 > far_hi {
                return Err(Error::Sampling(format!(
                    "{} ({n} bins) cannot host distances beyond {max_distance} bins",
                    extent.chromosome
                )));
            }
            let mut placed = None;
            for _ in 0..MAX_SAMPLING_RETRIES {
                let d = if far {
                    rng.gen_range(max_distance + 1..=far_hi)
                } else {
                    distances[rng.gen_range(0..distances.len())]
                };
                if d >= n {
                    continue;
                }
                let i = rng.gen_range(0..n - d);
                let j = i + d;
                if !too_close(i, j) {
                    placed = Some((i, j));
                    break;
                }
            }
            let (i, j) = placed.ok_or_else(|| {
                Error::Sampling(format!(
                    "no admissible negative on {} after {MAX_SAMPLING_RETRIES} attempts",
                    extent.chromosome
                ))
            })?;
            out.push(LoopAnnotation::from_bins(&extent.chromosome, i, j, res, LoopLabel::Negative)?);
        }
        Ok(out)
    }
}

pub fn sample_negative_loops(
    positives: &[LoopAnnotation],
    count: usize,
    rng_seed: u64,
    extent: &ChromosomeExtent,
) -> Result<Vec<LoopAnnotation>> {
    NegativeSampling::new(count, rng_seed).sample(positives, extent)
}

#[cfg(test)]
mod tests {
    use super::*;

    const RES: u64 = 5000;

    fn extent(n: u64) -> ChromosomeExtent {
        ChromosomeExtent {
            chromosome: "chr1".into(),
            n_bins: n,
            resolution_bp: RES,
        }
    }

    fn positive(i: u64, j: u64) -> LoopAnnotation {
        LoopAnnotation::from_bins("chr1", i, j, RES, LoopLabel::Positive).unwrap()
    }

    fn distance(l: &LoopAnnotation) -> u64 {
        let (i, j) = l.bins(RES);
        j - i
    }

    #[test]
    fn degenerate_distance_distribution() {
        let pos: Vec<_> = (0..5).map(|k| positive(10 * k, 10 * k + 20)).collect();
        let neg = sample_negative_loops(&pos, 10, 1, &extent(500)).unwrap();
        assert!(neg[..5].iter().all(|l| distance(l) * RES == 100_000));
        assert!(neg[5..].iter().all(|l| distance(l) > 20));
    }

    #[test]
    fn two_criteria_split() {
        let neg = sample_negative_loops(&[positive(3, 13)], 2, 9, &extent(200)).unwrap();
        assert_eq!(distance(&neg[0]), 10);
        assert!(distance(&neg[1]) > 10);
        assert!(neg.iter().all(|l| l.label == LoopLabel::Negative));
    }

    #[test]
    fn deterministic_per_seed() {
        let pos = vec![positive(5, 30), positive(40, 48)];
        let a = sample_negative_loops(&pos, 50, 42, &extent(300)).unwrap();
        let b = sample_negative_loops(&pos, 50, 42, &extent(300)).unwrap();
        let c = sample_negative_loops(&pos, 50, 43, &extent(300)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn short_chromosome_fails() {
        let err = sample_negative_loops(&[positive(0, 9)], 2, 0, &extent(10)).unwrap_err();
        assert!(matches!(err, Error::Sampling(_)), "{err}");
    }

    #[test]
    fn never_emits_a_positive() {
        // Only one admissible matched position exists besides the positive itself.
        let pos = vec![positive(0, 3)];
        for seed in 0..20 {
            let neg = sample_negative_loops(&pos, 2, seed, &extent(5)).unwrap();
            assert_eq!(neg[0].bins(RES), (1, 4));
            assert_eq!(neg[1].bins(RES), (0, 4));
        }
    }
}
