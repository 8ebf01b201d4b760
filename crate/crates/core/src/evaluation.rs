//! Metrics, anchor perturbation, contact corruption and the exact
//! information-gap computation over discrete joints.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::genomic_io::{GenomicInterval, LoopAnnotation, LoopCall, Split};
use crate::model::{InputMode, MixHic, Task, TaskOutput};
use crate::preprocessing::{SamplePair, SampleTarget};

/// `1 - SS_res / SS_tot`.
pub fn r_squared(pred: &[f64], target: &[f64]) -> Result<f64> {
    ensure!(pred.len() == target.len(), "lengths differ: {} vs {}", pred.len(), target.len());
    ensure!(target.len() >= 2, "R² needs at least two values");
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric("R² of a constant target".into()));
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Rank statistic with mid-ranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    ensure!(scores.len() == labels.len(), "lengths differ: {} vs {}", scores.len(), labels.len());
    ensure!(scores.iter().all(|s| !s.is_nan()), "scores contain NaN");
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Ranks start..end (1-based start+1..=end) share their mean.
        let mid = (start + 1 + end) as f64 / 2.0;
        rank_sum += mid * order[start..end].iter().filter(|&&k| labels[k]).count() as f64;
        start = end;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 with `score >= threshold` predicted positive.
/// Empty denominators give 0.
pub fn prf(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Prf> {
    ensure!(scores.len() == labels.len(), "lengths differ: {} vs {}", scores.len(), labels.len());
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (s, l) in scores.iter().zip(labels) {
        match (*s >= threshold, *l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf { precision, recall, f1 })
}

/// Fraction of predicted loops with a validated loop whose anchors both lie
/// within `slack_bins` bins.
pub fn proportion_metric(
    predicted: &[LoopCall],
    validated: &[LoopAnnotation],
    resolution_bp: u64,
    slack_bins: u64,
) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::UndefinedMetric("proportion of an empty prediction set".into()));
    }
    ensure!(resolution_bp > 0, "resolution must be positive");
    let bin = |iv: &GenomicInterval| iv.start / resolution_bp;
    let hits = predicted
        .iter()
        .filter(|p| {
            validated.iter().any(|v| {
                v.anchor1.chromosome == p.anchor1.chromosome
                    && v.anchor2.chromosome == p.anchor2.chromosome
                    && bin(&v.anchor1).abs_diff(bin(&p.anchor1)) <= slack_bins
                    && bin(&v.anchor2).abs_diff(bin(&p.anchor2)) <= slack_bins
            })
        })
        .count();
    Ok(hits as f64 / predicted.len() as f64)
}

fn check_ratio(ratio: f64) -> Result<()> {
    ensure!((0.0..=1.0).contains(&ratio), "ratio must lie in [0, 1], got {ratio}");
    Ok(())
}

/// Genomic interval of every track position of `sample`: the first half
/// tiles the window's x segment, the second half its y segment.
pub fn track_position_intervals(sample: &SamplePair) -> Result<Vec<GenomicInterval>> {
    let half = sample.track.length / 2;
    ensure!(half > 0, "track window is empty");
    let span = sample.contact.origin_x.len();
    ensure!(span.is_multiple_of(half as u64), "window of {span} bp does not tile into {half} track bins");
    let step = span / half as u64;
    let mut out = Vec::with_capacity(sample.track.length);
    for origin in [&sample.contact.origin_x, &sample.contact.origin_y] {
        for p in 0..half as u64 {
            out.push(GenomicInterval::new(
                origin.chromosome.clone(),
                origin.start + p * step,
                origin.start + (p + 1) * step,
            )?);
        }
    }
    Ok(out)
}

/// Attenuates the track signal inside `anchors` by `1 - ratio`.
///
/// Track values are stored as `ln(1 + x)`, so the scaling acts on `x`:
/// `v' = ln(1 + (1 - ratio)(e^v - 1))`. Contact maps are untouched.
pub fn perturb_anchors(sample: &SamplePair, ratio: f64, anchors: &[GenomicInterval]) -> Result<SamplePair> {
    check_ratio(ratio)?;
    let mut out = sample.clone();
    if ratio == 0.0 {
        return Ok(out);
    }
    let keep = 1.0 - ratio;
    let channels = out.track.channels;
    for (p, iv) in track_position_intervals(sample)?.iter().enumerate() {
        if anchors.iter().any(|a| a.overlaps(iv)) {
            for v in &mut out.track.values[p * channels..(p + 1) * channels] {
                *v = (keep * v.exp_m1()).ln_1p();
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    Sparsify,
    Gaussian,
}

impl FromStr for CorruptionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sparsify" | "sparse" => Ok(Self::Sparsify),
            "gaussian" | "noise" => Ok(Self::Gaussian),
            other => Err(Error::validation(format!(
                "unknown corruption mode '{other}' (expected sparsify or gaussian)"
            ))),
        }
    }
}

impl fmt::Display for CorruptionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sparsify => "sparsify",
            Self::Gaussian => "gaussian",
        })
    }
}

/// Corrupts `round(ratio * nnz)` uniformly chosen non-zero contacts.
///
/// On windows whose axes coincide the unit is an unordered pair `(i, j)`,
/// `(j, i)`, changed identically on both sides.
pub fn corrupt_contacts(sample: &SamplePair, ratio: f64, mode: CorruptionMode, rng: &mut impl Rng) -> Result<SamplePair> {
    check_ratio(ratio)?;
    let mut out = sample.clone();
    let n = out.contact.size;
    let symmetric = out.contact.is_diagonal();
    let units: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| (!symmetric || i <= j) && out.contact.values[i * n + j] != 0.0)
        .collect();
    let k = (ratio * units.len() as f64).round() as usize;
    if k == 0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    for idx in sample_indices(rng, units.len(), k).into_vec() {
        let (i, j) = units[idx];
        let v = out.contact.values[i * n + j];
        let new = match mode {
            CorruptionMode::Sparsify => 0.0,
            CorruptionMode::Gaussian => (v + v.abs() * normal.sample(rng)).max(0.0),
        };
        out.contact.values[i * n + j] = new;
        if symmetric {
            out.contact.values[j * n + i] = new;
        }
    }
    Ok(out)
}

fn loop_label(s: &SamplePair) -> Result<bool> {
    match s.target {
        SampleTarget::LoopLabel(l) => Ok(l == 1),
        _ => Err(Error::validation(format!("sample carries a {} target, not a loop label", s.target.kind()))),
    }
}

/// Loop probabilities of `samples`, in order.
pub fn loop_scores(model: &MixHic, samples: &[SamplePair], mode: InputMode, batch_size: usize) -> Result<Vec<f64>> {
    ensure!(model.task == Task::Loop, "model is trained for {}, not loops", model.task);
    let refs: Vec<&SamplePair> = samples.iter().collect();
    Ok(model
        .predict(&refs, mode, batch_size)?
        .into_iter()
        .map(|o| match o {
            TaskOutput::LoopProbability(p) => p,
            _ => unreachable!("loop model emits probabilities"),
        })
        .collect())
}

pub fn loop_labels(samples: &[SamplePair]) -> Result<Vec<bool>> {
    samples.iter().map(loop_label).collect()
}

/// Anchor bins of a window centred on its loop pixel.
pub fn centred_anchors(sample: &SamplePair) -> Result<Vec<GenomicInterval>> {
    let res = sample.contact.resolution_bp;
    let half = (sample.contact.size / 2) as u64;
    let x = &sample.contact.origin_x;
    let y = &sample.contact.origin_y;
    Ok(vec![
        GenomicInterval::new(x.chromosome.clone(), x.start + half * res, x.start + (half + 1) * res)?,
        GenomicInterval::new(y.chromosome.clone(), y.start + half * res, y.start + (half + 1) * res)?,
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub ratio: f64,
    pub value: f64,
    pub count: usize,
}

/// Recall at `threshold` of the positive samples after attenuating their
/// anchor signal by each ratio. `anchors[k]` belongs to `samples[k]`.
pub fn perturbation_experiment(
    model: &MixHic,
    samples: &[SamplePair],
    anchors: &[Vec<GenomicInterval>],
    ratios: &[f64],
    mode: InputMode,
    threshold: f64,
) -> Result<Vec<RatioPoint>> {
    ensure!(samples.len() == anchors.len(), "one anchor set per sample is required");
    let labels = loop_labels(samples)?;
    ensure!(labels.iter().any(|l| *l), "perturbation needs at least one positive sample");
    let mut out = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let perturbed = samples
            .iter()
            .zip(anchors)
            .map(|(s, a)| perturb_anchors(s, ratio, a))
            .collect::<Result<Vec<_>>>()?;
        let scores = loop_scores(model, &perturbed, mode, 64)?;
        let r = prf(&scores, &labels, threshold)?;
        out.push(RatioPoint {
            ratio,
            value: r.recall,
            count: labels.iter().filter(|l| **l).count(),
        });
    }
    Ok(out)
}

/// AUROC after corrupting every contact window at each ratio.
pub fn corruption_experiment(
    model: &MixHic,
    samples: &[SamplePair],
    ratios: &[f64],
    corruption: CorruptionMode,
    mode: InputMode,
    seed: u64,
) -> Result<Vec<RatioPoint>> {
    let labels = loop_labels(samples)?;
    let mut out = Vec::with_capacity(ratios.len());
    for (k, &ratio) in ratios.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let corrupted = samples
            .iter()
            .map(|s| corrupt_contacts(s, ratio, corruption, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let scores = loop_scores(model, &corrupted, mode, 64)?;
        out.push(RatioPoint {
            ratio,
            value: auroc(&scores, &labels)?,
            count: samples.len(),
        });
    }
    Ok(out)
}

/// True when each value is at most its predecessor.
pub fn non_increasing(points: &[RatioPoint]) -> bool {
    points.windows(2).all(|w| w[1].value <= w[0].value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub count: usize,
    pub task: Task,
    pub split: Split,
}

impl MetricReport {
    pub const TSV_HEADER: &'static str = "metric\tvalue\tn\ttask\tsplit";

    pub fn tsv_line(&self) -> String {
        format!("{}\t{:.6}\t{}\t{}\t{}", self.metric, self.value, self.count, self.task, self.split)
    }
}

/// Metrics of `model` on labelled `samples`: AUROC, precision, recall and F1
/// for loops; R² and MSE over all values for expression and contacts.
pub fn evaluate_samples(
    model: &MixHic,
    samples: &[SamplePair],
    mode: InputMode,
    split: Split,
    batch_size: usize,
) -> Result<Vec<MetricReport>> {
    ensure!(!samples.is_empty(), "evaluation set is empty");
    let task = model.task;
    let report = |metric: &str, value: f64, count: usize| MetricReport {
        metric: metric.into(),
        value,
        count,
        task,
        split,
    };
    match task {
        Task::Loop => {
            let scores = loop_scores(model, samples, mode, batch_size)?;
            let labels = loop_labels(samples)?;
            let n = samples.len();
            let p = prf(&scores, &labels, 0.5)?;
            Ok(vec![
                report("auroc", auroc(&scores, &labels)?, n),
                report("precision", p.precision, n),
                report("recall", p.recall, n),
                report("f1", p.f1, n),
            ])
        }
        Task::Cage | Task::Contact => {
            let refs: Vec<&SamplePair> = samples.iter().collect();
            let outputs = model.predict(&refs, mode, batch_size)?;
            let mut pred = Vec::new();
            let mut target = Vec::new();
            for (o, s) in outputs.into_iter().zip(samples) {
                let (TaskOutput::Cage(p) | TaskOutput::Contact(p)) = o else {
                    unreachable!("regression model emits vectors");
                };
                let t = match &s.target {
                    SampleTarget::Cage(t) | SampleTarget::Contact(t) => t,
                    other => {
                        return Err(Error::validation(format!(
                            "sample carries a {} target, expected {task}",
                            other.kind()
                        )))
                    }
                };
                ensure!(t.len() == p.len(), "target length {} != prediction length {}", t.len(), p.len());
                pred.extend(p);
                target.extend_from_slice(t);
            }
            let mse = pred.iter().zip(&target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64;
            Ok(vec![
                report("r2", r_squared(&pred, &target)?, samples.len()),
                report("mse", mse, samples.len()),
            ])
        }
        Task::None => Err(Error::validation("a pretrained-only model has no task metrics")),
    }
}

/// Probability table over `(z1, z2, t)`, row-major with `t` fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    pub z1: usize,
    pub z2: usize,
    pub t: usize,
    pub p: Vec<f64>,
}

pub const MAX_ALPHABET: usize = 8;

/// `Σ p ln(p / q)` terms with `0 ln 0 = 0`.
fn plogp_ratio(p: f64, q: f64) -> f64 {
    if p > 0.0 {
        p * (p / q).ln()
    } else {
        0.0
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Which variables are paired with `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiTarget {
    Z1,
    Z2,
    Both,
}

impl DiscreteJoint {
    pub fn new(z1: usize, z2: usize, t: usize, p: Vec<f64>) -> Result<Self> {
        ensure!(
            (1..=MAX_ALPHABET).contains(&z1) && (1..=MAX_ALPHABET).contains(&z2) && (1..=MAX_ALPHABET).contains(&t),
            "alphabet sizes must lie in 1..={MAX_ALPHABET}"
        );
        ensure!(p.len() == z1 * z2 * t, "table has {} entries, expected {}", p.len(), z1 * z2 * t);
        ensure!(p.iter().all(|x| *x >= 0.0 && x.is_finite()), "probabilities must be non-negative");
        let total: f64 = p.iter().sum();
        ensure!((total - 1.0).abs() <= 1e-12, "probabilities sum to {total}, not 1");
        Ok(Self { z1, z2, t, p })
    }

    /// Normalised uniform-random table.
    pub fn random(rng: &mut impl Rng, z1: usize, z2: usize, t: usize) -> Result<Self> {
        let raw: Vec<f64> = (0..z1 * z2 * t).map(|_| rng.gen::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        Self::new(z1, z2, t, raw.into_iter().map(|x| x / total).collect())
    }

    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.p[(a * self.z2 + b) * self.t + c]
    }

    pub fn marginal_t(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.t];
        for a in 0..self.z1 {
            for b in 0..self.z2 {
                for (c, v) in m.iter_mut().enumerate() {
                    *v += self.get(a, b, c);
                }
            }
        }
        m
    }

    /// Table of `(x, t)` where `x` is `z1`, `z2` or the pair.
    fn pair_with_t(&self, which: MiTarget) -> (usize, Vec<f64>) {
        let nx = match which {
            MiTarget::Z1 => self.z1,
            MiTarget::Z2 => self.z2,
            MiTarget::Both => self.z1 * self.z2,
        };
        let mut m = vec![0.0; nx * self.t];
        for a in 0..self.z1 {
            for b in 0..self.z2 {
                let x = match which {
                    MiTarget::Z1 => a,
                    MiTarget::Z2 => b,
                    MiTarget::Both => a * self.z2 + b,
                };
                for c in 0..self.t {
                    m[x * self.t + c] += self.get(a, b, c);
                }
            }
        }
        (nx, m)
    }

    /// `I(x; t)` in nats.
    pub fn mutual_information(&self, which: MiTarget) -> f64 {
        let (nx, m) = self.pair_with_t(which);
        let pt = self.marginal_t();
        let mut mi = 0.0;
        for x in 0..nx {
            let px: f64 = m[x * self.t..(x + 1) * self.t].iter().sum();
            for (c, &ptc) in pt.iter().enumerate() {
                mi += plogp_ratio(m[x * self.t + c], px * ptc);
            }
        }
        mi.max(0.0)
    }

    pub fn entropy_t(&self) -> f64 {
        entropy(&self.marginal_t())
    }

    /// `H(t | z1, z2)`.
    pub fn conditional_entropy_t(&self) -> f64 {
        let mut h = 0.0;
        for x in 0..self.z1 * self.z2 {
            let row = &self.p[x * self.t..(x + 1) * self.t];
            let px: f64 = row.iter().sum();
            for &v in row {
                if v > 0.0 {
                    h -= v * (v / px).ln();
                }
            }
        }
        h
    }

    /// `I(z2; t | z1)`.
    pub fn conditional_mi_z2_given_z1(&self) -> f64 {
        let mut mi = 0.0;
        for a in 0..self.z1 {
            let p_a: f64 = (0..self.z2).flat_map(|b| (0..self.t).map(move |c| (b, c))).map(|(b, c)| self.get(a, b, c)).sum();
            if p_a == 0.0 {
                continue;
            }
            for b in 0..self.z2 {
                let p_ab: f64 = (0..self.t).map(|c| self.get(a, b, c)).sum();
                for c in 0..self.t {
                    let p_ac: f64 = (0..self.z2).map(|bb| self.get(a, bb, c)).sum();
                    mi += plogp_ratio(self.get(a, b, c), p_ab * p_ac / p_a);
                }
            }
        }
        mi
    }

    /// Joint of `(g(z1), z2, t)` for a map `g` into `0..out`.
    pub fn map_z1(&self, g: &[usize], out: usize) -> Result<Self> {
        ensure!(g.len() == self.z1, "map covers {} symbols, expected {}", g.len(), self.z1);
        ensure!(g.iter().all(|v| *v < out), "map leaves the output alphabet");
        let mut p = vec![0.0; out * self.z2 * self.t];
        for (a, &ga) in g.iter().enumerate() {
            for b in 0..self.z2 {
                for c in 0..self.t {
                    p[(ga * self.z2 + b) * self.t + c] += self.get(a, b, c);
                }
            }
        }
        let total: f64 = p.iter().sum();
        Self::new(out, self.z2, self.t, p.into_iter().map(|x| x / total).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoGapReport {
    pub mi_z1: f64,
    pub mi_z2: f64,
    pub mi_joint: f64,
    pub gamma: f64,
    /// Optimal cross-entropy from both raw inputs, `H(t | z1, z2)`.
    pub raw_ce: f64,
    /// Optimal cross-entropy when only shared information survives,
    /// `H(t) - min I(z_k; t)`.
    pub aligned_ce: f64,
    pub bound_holds: bool,
}

pub const INFO_GAP_SLACK: f64 = 1e-9;

pub fn info_gap_demo(joint: &DiscreteJoint) -> InfoGapReport {
    let mi_z1 = joint.mutual_information(MiTarget::Z1);
    let mi_z2 = joint.mutual_information(MiTarget::Z2);
    let mi_joint = joint.mutual_information(MiTarget::Both);
    let gamma = mi_z1.max(mi_z2) - mi_z1.min(mi_z2);
    let raw_ce = joint.conditional_entropy_t();
    let aligned_ce = joint.entropy_t() - mi_z1.min(mi_z2);
    InfoGapReport {
        mi_z1,
        mi_z2,
        mi_joint,
        gamma,
        raw_ce,
        aligned_ce,
        bound_holds: aligned_ce - raw_ce >= gamma - INFO_GAP_SLACK,
    }
}

/// `z1 = t` uniform binary, `z2` an independent fair coin.
pub fn determined_case() -> DiscreteJoint {
    let mut p = vec![0.0; 8];
    for a in 0..2 {
        for b in 0..2 {
            p[(a * 2 + b) * 2 + a] = 0.25;
        }
    }
    DiscreteJoint::new(2, 2, 2, p).expect("valid table")
}

/// `z1 = z2`, both noisy copies of a binary `t`.
pub fn identical_case() -> DiscreteJoint {
    let mut p = vec![0.0; 8];
    for a in 0..2 {
        for c in 0..2 {
            p[(a * 2 + a) * 2 + c] = if a == c { 0.4 } else { 0.1 };
        }
    }
    DiscreteJoint::new(2, 2, 2, p).expect("valid table")
}

/// One row per trial of the theorem demo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremTrial {
    pub trial: usize,
    pub alphabets: (usize, usize, usize),
    pub report: InfoGapReport,
    /// `|I(z1,z2;t) - I(z1;t) - I(z2;t|z1)|`.
    pub chain_rule_error: f64,
    /// `I(g(z1);t) <= I(z1;t) + 1e-12` for a random map `g`.
    pub data_processing_holds: bool,
}

/// Seeded random joints with alphabets in `2..=max_alphabet`.
pub fn theorem_trials(trials: usize, seed: u64, max_alphabet: usize) -> Result<Vec<TheoremTrial>> {
    ensure!((2..=MAX_ALPHABET).contains(&max_alphabet), "alphabet bound must lie in 2..={MAX_ALPHABET}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials);
    for trial in 0..trials {
        let (a, b, c) = (
            rng.gen_range(2..=max_alphabet),
            rng.gen_range(2..=max_alphabet),
            rng.gen_range(2..=max_alphabet),
        );
        let joint = DiscreteJoint::random(&mut rng, a, b, c)?;
        out.push(trial_of(trial, &joint, &mut rng)?);
    }
    Ok(out)
}

pub fn trial_of(trial: usize, joint: &DiscreteJoint, rng: &mut impl Rng) -> Result<TheoremTrial> {
    let report = info_gap_demo(joint);
    let chain = joint.mutual_information(MiTarget::Z1) + joint.conditional_mi_z2_given_z1();
    let out = rng.gen_range(1..=joint.z1);
    let g: Vec<usize> = (0..joint.z1).map(|_| rng.gen_range(0..out)).collect();
    let mapped = joint.map_z1(&g, out)?.mutual_information(MiTarget::Z1);
    Ok(TheoremTrial {
        trial,
        alphabets: (joint.z1, joint.z2, joint.t),
        report,
        chain_rule_error: (report.mi_joint - chain).abs(),
        data_processing_holds: mapped <= report.mi_z1 + 1e-12,
    })
}
