//! Whole-chromosome loop calling: a Poisson enrichment filter over raw
//! counts, model scoring of centred windows, density-peak clustering and a
//! target-decoy acceptance gate.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::genomic_io::{write_bedpe, GenomicInterval, LoopCall};
use crate::model::{InputMode, MixHic, Task, TaskOutput};
use crate::preprocessing::{ChromosomeContacts, Dataset, SamplePair};

/// `expected[d]` is the mean of diagonal `d`, zeros included, for
/// `d < min(n, max_distance + 1)`.
pub fn expected_by_distance(contacts: &ChromosomeContacts, max_distance: Option<usize>) -> Vec<f64> {
    let n = contacts.n_bins;
    let len = max_distance.map_or(n, |m| (m + 1).min(n));
    let mut sums = vec![0.0; len];
    for r in contacts.records() {
        let d = (r.bin_j - r.bin_i) as usize;
        if d < len {
            sums[d] += r.count;
        }
    }
    sums.iter().enumerate().map(|(d, s)| s / (n - d) as f64).collect()
}

/// `P(X >= ceil(observed))` for `X ~ Poisson(lambda)`.
///
/// Sums the upper tail directly when it is the smaller side and the lower
/// CDF otherwise, so both tails keep full relative precision.
pub fn poisson_upper_pvalue(observed: f64, lambda: f64) -> Result<f64> {
    ensure!(lambda > 0.0 && lambda.is_finite(), "poisson rate must be positive, got {lambda}");
    ensure!(observed >= 0.0 && observed.is_finite(), "observed count must be non-negative, got {observed}");
    let k = observed.ceil() as u64;
    if k == 0 {
        return Ok(1.0);
    }
    let log_pmf = |i: u64| -> f64 {
        let log_fact: f64 = (2..=i).map(|x| (x as f64).ln()).sum();
        -lambda + i as f64 * lambda.ln() - log_fact
    };
    if k as f64 > lambda {
        let mut term = log_pmf(k).exp();
        let mut total = 0.0;
        let mut i = k;
        while term > 0.0 {
            total += term;
            i += 1;
            term *= lambda / i as f64;
            if term < total * 1e-17 {
                break;
            }
        }
        Ok(total.min(1.0))
    } else {
        let mut term = (-lambda).exp();
        let mut lower = 0.0;
        for i in 0..k {
            lower += term;
            term *= lambda / (i + 1) as f64;
        }
        Ok((1.0 - lower).clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotationParams {
    pub p_threshold: f64,
    pub score_threshold: f64,
    pub max_distance_bins: usize,
    pub neighborhood_radius_bins: usize,
    pub fdr_target: f64,
    pub batch_size: usize,
    pub input_mode: InputMode,
}

impl Default for AnnotationParams {
    fn default() -> Self {
        Self {
            p_threshold: 0.01,
            score_threshold: 0.5,
            max_distance_bins: 200,
            neighborhood_radius_bins: 2,
            fdr_target: 0.05,
            batch_size: 64,
            input_mode: InputMode::Bimodal,
        }
    }
}

impl AnnotationParams {
    pub fn validate(&self) -> Result<()> {
        ensure!((0.0..=1.0).contains(&self.p_threshold), "p threshold must lie in [0, 1]");
        ensure!((0.0..=1.0).contains(&self.score_threshold), "score threshold must lie in [0, 1]");
        ensure!(self.max_distance_bins >= 1, "distance cap must be at least 1 bin");
        ensure!(self.fdr_target > 0.0 && self.fdr_target <= 1.0, "FDR target must lie in (0, 1]");
        ensure!(self.batch_size >= 1, "batch size must be at least 1");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopCandidate {
    pub bin_i: usize,
    pub bin_j: usize,
    pub observed: f64,
    pub expected: f64,
    pub p_value: f64,
    pub model_score: f64,
    pub local_density: f64,
    pub delta: f64,
    pub cluster_id: Option<usize>,
}

impl LoopCandidate {
    pub fn new(bin_i: usize, bin_j: usize, model_score: f64) -> Self {
        Self {
            bin_i,
            bin_j,
            observed: 0.0,
            expected: 0.0,
            p_value: 0.0,
            model_score,
            local_density: 0.0,
            delta: 0.0,
            cluster_id: None,
        }
    }
}

/// Pixels passing the Poisson filter, split by model score.
#[derive(Debug, Clone, Default)]
pub struct ScanResult {
    pub candidates: Vec<LoopCandidate>,
    pub decoys: Vec<LoopCandidate>,
}

/// Upper-triangular pixels `(i, j)`, `1 <= j - i <= max_distance`, whose raw
/// count is Poisson-enriched over its diagonal mean at `p < p_threshold`.
pub fn poisson_filter(raw: &ChromosomeContacts, p_threshold: f64, max_distance: usize) -> Result<Vec<LoopCandidate>> {
    let expected = expected_by_distance(raw, Some(max_distance));
    let mut out = Vec::new();
    for r in raw.records() {
        let d = (r.bin_j - r.bin_i) as usize;
        if d == 0 || d > max_distance || d >= expected.len() || expected[d] <= 0.0 {
            continue;
        }
        let p = poisson_upper_pvalue(r.count, expected[d])?;
        if p < p_threshold {
            out.push(LoopCandidate {
                observed: r.count,
                expected: expected[d],
                p_value: p,
                ..LoopCandidate::new(r.bin_i as usize, r.bin_j as usize, 0.0)
            });
        }
    }
    Ok(out)
}

/// Filters `chrom`, scores each passing pixel on its centred window and
/// splits at `score_threshold`.
pub fn scan_candidates(dataset: &Dataset, model: &MixHic, chrom: &str, params: &AnnotationParams) -> Result<ScanResult> {
    params.validate()?;
    ensure!(model.task == Task::Loop, "loop calling needs a loop-task model, got {}", model.task);
    let c = dataset.chromosome(chrom)?;
    let h = dataset.geometry.window_bins();
    ensure!(
        c.raw.n_bins >= h,
        "chromosome {chrom} has {} bins, fewer than one {h}-bin window",
        c.raw.n_bins
    );
    let mut pixels = poisson_filter(&c.raw, params.p_threshold, params.max_distance_bins)?;
    for chunk in pixels.chunks_mut(params.batch_size) {
        let samples: Vec<SamplePair> = chunk
            .iter()
            .map(|p| dataset.centered_window(chrom, p.bin_i, p.bin_j, Task::Loop))
            .collect::<Result<_>>()?;
        let refs: Vec<&SamplePair> = samples.iter().collect();
        let scores = model.predict(&refs, params.input_mode, params.batch_size)?;
        for (p, s) in chunk.iter_mut().zip(scores) {
            if let TaskOutput::LoopProbability(v) = s {
                p.model_score = v;
            }
        }
    }
    let (candidates, decoys) = pixels.into_iter().partition(|p| p.model_score > params.score_threshold);
    Ok(ScanResult { candidates, decoys })
}

fn chebyshev(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

#[derive(Debug, Clone, Copy)]
struct Point {
    pos: (usize, usize),
    score: f64,
    rho: f64,
    decoy: bool,
}

/// Total order: higher density, then higher score, then lower coordinates.
fn rank(a: &Point, b: &Point) -> Ordering {
    b.rho
        .total_cmp(&a.rho)
        .then(b.score.total_cmp(&a.score))
        .then(a.pos.cmp(&b.pos))
}

/// Density-peak clusters of candidates and decoys, accepted under the
/// target-decoy gate; returns calls sorted by position together with the
/// annotated candidates (density, delta and cluster filled in).
pub fn density_cluster(
    candidates: &[LoopCandidate],
    decoys: &[LoopCandidate],
    radius: usize,
    fdr_target: f64,
) -> Result<(Vec<ClusterCall>, Vec<LoopCandidate>)> {
    ensure!(fdr_target > 0.0 && fdr_target <= 1.0, "FDR target must lie in (0, 1]");
    let mut points: Vec<Point> = candidates
        .iter()
        .map(|c| (c, false))
        .chain(decoys.iter().map(|c| (c, true)))
        .map(|(c, decoy)| Point {
            pos: (c.bin_i, c.bin_j),
            score: c.model_score,
            rho: 0.0,
            decoy,
        })
        .collect();
    let mut grid: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (k, p) in points.iter().enumerate() {
        grid.entry(p.pos).or_default().push(k);
    }
    let neighbours = |pos: (usize, usize), r: usize| {
        let mut out = Vec::new();
        for i in pos.0.saturating_sub(r)..=pos.0 + r {
            for j in pos.1.saturating_sub(r)..=pos.1 + r {
                if let Some(ks) = grid.get(&(i, j)) {
                    out.extend_from_slice(ks);
                }
            }
        }
        out
    };
    let rhos: Vec<f64> = points
        .iter()
        .map(|p| neighbours(p.pos, radius).iter().map(|&k| points[k].score).sum())
        .collect();
    for (p, rho) in points.iter_mut().zip(rhos) {
        p.rho = rho;
    }

    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| rank(&points[a], &points[b]));
    let mut position = vec![0usize; points.len()];
    for (r, &k) in order.iter().enumerate() {
        position[k] = r;
    }
    // Nearest higher-ranked point; ties in distance go to the higher rank.
    let nearest_higher = |k: usize| -> Option<(usize, usize)> {
        let better = |a: usize, b: Option<(usize, usize)>, d: usize| match b {
            None => true,
            Some((bk, bd)) => d < bd || (d == bd && position[a] < position[bk]),
        };
        let mut best = None;
        for &m in &neighbours(points[k].pos, radius) {
            let d = chebyshev(points[k].pos, points[m].pos);
            if position[m] < position[k] && better(m, best, d) {
                best = Some((m, d));
            }
        }
        if best.is_some() {
            return best;
        }
        for &m in &order[..position[k]] {
            let d = chebyshev(points[k].pos, points[m].pos);
            if better(m, best, d) {
                best = Some((m, d));
            }
        }
        best
    };

    let mut cluster = vec![usize::MAX; points.len()];
    let mut delta = vec![f64::INFINITY; points.len()];
    let mut centres = Vec::new();
    for &k in &order {
        match nearest_higher(k) {
            Some((m, d)) => {
                delta[k] = d as f64;
                if d <= radius {
                    cluster[k] = cluster[m];
                    continue;
                }
            }
            None => delta[k] = f64::INFINITY,
        }
        cluster[k] = centres.len();
        centres.push(k);
    }

    let mut members = vec![0usize; centres.len()];
    for (k, p) in points.iter().enumerate() {
        if !p.decoy {
            members[cluster[k]] += 1;
        }
    }
    let mut accepted = Vec::new();
    let mut decoy_count = 0usize;
    for (id, &k) in centres.iter().enumerate() {
        let d = decoy_count + usize::from(points[k].decoy);
        if d as f64 / (accepted.len() + 1) as f64 >= fdr_target {
            break;
        }
        decoy_count = d;
        accepted.push((id, k));
    }
    let mut calls: Vec<ClusterCall> = accepted
        .into_iter()
        .filter(|(_, k)| !points[*k].decoy)
        .map(|(id, k)| ClusterCall {
            bin_i: points[k].pos.0,
            bin_j: points[k].pos.1,
            probability: points[k].score,
            density: points[k].rho,
            members: members[id],
            cluster_id: id,
        })
        .collect();
    calls.sort_by_key(|c| (c.bin_i, c.bin_j));

    let annotated = candidates
        .iter()
        .enumerate()
        .map(|(k, c)| LoopCandidate {
            local_density: points[k].rho,
            delta: delta[k],
            cluster_id: Some(cluster[k]),
            ..c.clone()
        })
        .collect();
    Ok((calls, annotated))
}

/// An accepted cluster, in bin coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCall {
    pub bin_i: usize,
    pub bin_j: usize,
    pub probability: f64,
    pub density: f64,
    pub members: usize,
    pub cluster_id: usize,
}

impl ClusterCall {
    pub fn to_loop_call(&self, chrom: &str, resolution_bp: u64) -> Result<LoopCall> {
        Ok(LoopCall {
            anchor1: GenomicInterval::from_bins(chrom, self.bin_i as u64, 1, resolution_bp)?,
            anchor2: GenomicInterval::from_bins(chrom, self.bin_j as u64, 1, resolution_bp)?,
            probability: self.probability,
            density: self.density,
            members: self.members,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ChromosomeAnnotation {
    pub chromosome: String,
    pub calls: Vec<LoopCall>,
    pub candidates: Vec<LoopCandidate>,
    pub decoys: usize,
}

/// Scans, scores and clusters one chromosome.
pub fn annotate_chromosome(
    dataset: &Dataset,
    model: &MixHic,
    chrom: &str,
    params: &AnnotationParams,
) -> Result<ChromosomeAnnotation> {
    let scan = scan_candidates(dataset, model, chrom, params)?;
    let (clusters, candidates) = density_cluster(
        &scan.candidates,
        &scan.decoys,
        params.neighborhood_radius_bins,
        params.fdr_target,
    )?;
    let res = dataset.geometry.resolution_bp;
    let calls = clusters
        .iter()
        .map(|c| c.to_loop_call(chrom, res))
        .collect::<Result<_>>()?;
    Ok(ChromosomeAnnotation {
        chromosome: chrom.to_string(),
        calls,
        candidates,
        decoys: scan.decoys.len(),
    })
}

/// Annotates each chromosome in turn and writes all calls, in chromosome
/// order, to one BEDPE file.
pub fn annotate_to_bedpe(
    dataset: &Dataset,
    model: &MixHic,
    chromosomes: &[String],
    params: &AnnotationParams,
    path: &Path,
) -> Result<Vec<ChromosomeAnnotation>> {
    let mut out = Vec::with_capacity(chromosomes.len());
    for chrom in chromosomes {
        out.push(annotate_chromosome(dataset, model, chrom, params)?);
    }
    let calls: Vec<LoopCall> = out.iter().flat_map(|a| a.calls.iter().cloned()).collect();
    write_bedpe(&calls, path)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genomic_io::SparseContactRecord;

    fn brute_pvalue(obs: u64, lambda: f64) -> f64 {
        let mut lower = 0.0;
        let mut log_fact = 0.0;
        for i in 0..obs {
            if i > 0 {
                log_fact += (i as f64).ln();
            }
            lower += (-lambda + i as f64 * lambda.ln() - log_fact).exp();
        }
        1.0 - lower
    }

    #[test]
    fn pvalue_examples() {
        assert_eq!(poisson_upper_pvalue(0.0, 3.0).unwrap(), 1.0);
        let p5 = poisson_upper_pvalue(5.0, 1.0).unwrap();
        let oracle = 1.0 - (-1.0f64).exp() * (1.0 + 1.0 + 0.5 + 1.0 / 6.0 + 1.0 / 24.0);
        assert!((p5 - oracle).abs() < 1e-15);
        assert!((p5 - 0.003660).abs() < 1e-6);
        assert!(poisson_upper_pvalue(6.0, 1.0).unwrap() < p5);
        let p10 = poisson_upper_pvalue(10.0, 1.0).unwrap();
        assert!((p10 - 1.114e-7).abs() < 1e-10, "{p10}");
        assert!(poisson_upper_pvalue(1.0, 0.0).is_err());
        assert!((poisson_upper_pvalue(4.2, 1.0).unwrap() - p5).abs() < 1e-15);
    }

    #[test]
    fn pvalue_matches_brute_force() {
        for lambda in [0.3, 1.0, 7.5, 20.0, 50.0] {
            for obs in (0..=200).step_by(7) {
                let got = poisson_upper_pvalue(obs as f64, lambda).unwrap();
                let want = brute_pvalue(obs, lambda).max(0.0);
                assert!((got - want).abs() < 1e-10, "obs {obs} lambda {lambda}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn expected_diagonal_mean() {
        let c = ChromosomeContacts::new(
            "c",
            1000,
            3,
            vec![
                SparseContactRecord { bin_i: 0, bin_j: 1, count: 2.0 },
                SparseContactRecord { bin_i: 1, bin_j: 2, count: 4.0 },
                SparseContactRecord { bin_i: 0, bin_j: 0, count: 3.0 },
            ],
        )
        .unwrap();
        let e = expected_by_distance(&c, None);
        assert_eq!(e, vec![1.0, 3.0, 0.0]);
    }

    #[test]
    fn single_candidate() {
        let (calls, annotated) = density_cluster(&[LoopCandidate::new(5, 20, 0.9)], &[], 2, 0.05).unwrap();
        assert_eq!(calls.len(), 1);
        assert_eq!((calls[0].bin_i, calls[0].bin_j, calls[0].members), (5, 20, 1));
        assert!(annotated[0].delta.is_infinite());
    }

    #[test]
    fn adjacent_candidates_merge() {
        let a = LoopCandidate::new(5, 20, 0.8);
        let b = LoopCandidate::new(5, 21, 0.9);
        let (calls, annotated) = density_cluster(&[a.clone(), b], &[], 2, 0.05).unwrap();
        assert_eq!(calls.len(), 1);
        assert_eq!((calls[0].bin_i, calls[0].bin_j), (5, 21));
        assert_eq!(calls[0].members, 2);
        assert_eq!(annotated[0].cluster_id, annotated[1].cluster_id);
        // Equal scores: the lower coordinate wins.
        let (calls, _) = density_cluster(&[LoopCandidate::new(5, 21, 0.8), a], &[], 2, 0.05).unwrap();
        assert_eq!((calls[0].bin_i, calls[0].bin_j), (5, 20));
    }

    #[test]
    fn decoy_centre_closes_gate() {
        let (calls, _) = density_cluster(
            &[LoopCandidate::new(50, 90, 0.6)],
            &[LoopCandidate::new(5, 20, 0.5), LoopCandidate::new(5, 21, 0.45)],
            2,
            0.05,
        )
        .unwrap();
        assert!(calls.is_empty());
        let (calls, _) = density_cluster(&[], &[LoopCandidate::new(5, 20, 0.4)], 2, 0.05).unwrap();
        assert!(calls.is_empty());
    }

    #[test]
    fn empty_input() {
        let (calls, annotated) = density_cluster(&[], &[], 2, 0.05).unwrap();
        assert!(calls.is_empty() && annotated.is_empty());
    }
}
