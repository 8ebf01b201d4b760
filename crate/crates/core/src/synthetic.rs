//! Seeded synthetic chromosomes with planted loops, anchor-coupled tracks and
//! an expression readout, written in the plain-text dataset formats.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::genomic_io::{
    write_contact_matrix, write_loops, write_manifest, write_track, DatasetManifest, GenomicInterval, LoopAnnotation,
    LoopLabel, SparseContactRecord, Split, SplitAssignment, TrackRecord,
};
use crate::model::Task;
use crate::preprocessing::{write_archive, Dataset, SamplePair, WindowSampling};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Chromosome length in contact bins.
    pub n_bins: usize,
    pub resolution_bp: u64,
    pub bin_track_bp: u64,
    /// Window side `H` in bins.
    pub window_bins: usize,
    /// Distance-decay exponent `γ`.
    pub decay: f64,
    /// Background rate `b` at distance 0.
    pub background: f64,
    /// Pairs farther apart than this carry no contacts.
    pub max_distance_bins: usize,
    pub loop_count: usize,
    pub enrichment: f64,
    /// Inclusive anchor-distance range of planted loops, in bins.
    pub loop_distance: (usize, usize),
    /// Minimum spacing in bins between any two loop anchors.
    pub anchor_spacing: usize,
    /// Peak-anchor coupling `κ`.
    pub coupling: f64,
    /// Peak amplitude is `coupling * enrichment * peak_scale`.
    pub peak_scale: f64,
    /// Peak standard deviation in track bins.
    pub peak_width: f64,
    /// Scale of the half-normal baseline noise of the tracks.
    pub track_noise: f64,
    /// Peaks at random non-anchor positions, per chromosome.
    pub distractor_peaks: usize,
    /// Contact rates are multiplied by `1 + strength * s_i * s_j` where
    /// `s = ±1` marks alternating open/closed segments; 0 disables them.
    pub compartment_strength: f64,
    /// Inclusive segment-length range in bins.
    pub compartment_length: (usize, usize),
    /// Baseline track level added inside open segments.
    pub compartment_track_level: f64,
    pub cage_track_weight: f64,
    pub cage_contact_weight: f64,
    pub cage_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_bins: 2000,
            resolution_bp: 1000,
            bin_track_bp: 100,
            window_bins: 16,
            decay: 1.0,
            background: 50.0,
            max_distance_bins: 150,
            loop_count: 120,
            enrichment: 8.0,
            loop_distance: (10, 80),
            anchor_spacing: 3,
            coupling: 0.8,
            peak_scale: 1.0,
            peak_width: 3.0,
            track_noise: 0.5,
            distractor_peaks: 0,
            compartment_strength: 0.0,
            compartment_length: (20, 60),
            compartment_track_level: 0.0,
            cage_track_weight: 1.0,
            cage_contact_weight: 0.2,
            cage_noise: 0.1,
            seed: 0,
        }
    }
}

/// Relative amplitude of the second track channel.
const SECOND_CHANNEL_GAIN: f64 = 0.6;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.enrichment > 1.0, "enrichment must exceed 1, got {}", self.enrichment);
        ensure!((0.0..=1.0).contains(&self.coupling), "coupling must lie in [0, 1], got {}", self.coupling);
        ensure!(self.background > 0.0 && self.decay >= 0.0, "background must be positive and decay non-negative");
        ensure!(
            self.resolution_bp > 0 && self.bin_track_bp > 0 && self.resolution_bp.is_multiple_of(self.bin_track_bp),
            "resolution {} must be a positive multiple of the track bin {}",
            self.resolution_bp,
            self.bin_track_bp
        );
        ensure!(self.window_bins >= 1, "window must be at least one bin");
        let (lo, hi) = self.loop_distance;
        ensure!(lo >= 1 && lo <= hi, "loop distance range ({lo}, {hi}) is empty");
        ensure!(
            hi <= self.max_distance_bins,
            "loop distance {hi} exceeds the contact range {}",
            self.max_distance_bins
        );
        ensure!(
            self.n_bins >= self.window_bins && (self.loop_count == 0 || self.n_bins > hi),
            "chromosome of {} bins is too short for the requested loops and windows",
            self.n_bins
        );
        ensure!(
            (0.0..1.0).contains(&self.compartment_strength),
            "compartment strength must lie in [0, 1), got {}",
            self.compartment_strength
        );
        ensure!(
            self.compartment_length.0 >= 1 && self.compartment_length.0 <= self.compartment_length.1,
            "compartment length range is empty"
        );
        ensure!(self.track_noise >= 0.0 && self.cage_noise >= 0.0, "noise scales must be non-negative");
        Ok(())
    }

    /// Poisson mean of pixel `(i, i + d)` before sampling.
    pub fn expected_rate(&self, distance: usize, planted: bool) -> f64 {
        let base = self.background * (1.0 + distance as f64).powf(-self.decay);
        if planted {
            base * self.enrichment
        } else {
            base
        }
    }

    pub fn peak_amplitude(&self) -> f64 {
        self.coupling * self.enrichment * self.peak_scale
    }

    fn track_bins_per_bin(&self) -> usize {
        (self.resolution_bp / self.bin_track_bp) as usize
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticChromosome {
    pub name: String,
    pub n_bins: usize,
    /// Raw counts, upper-triangular, sorted.
    pub contacts: Vec<SparseContactRecord>,
    /// One list per channel.
    pub tracks: Vec<Vec<TrackRecord>>,
    /// Planted loops as anchor bins `(i, j)`, sorted.
    pub loop_bins: Vec<(usize, usize)>,
    pub loops: Vec<LoopAnnotation>,
    /// Expression per contact bin.
    pub cage: Vec<TrackRecord>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn plant_loops(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
    let (lo, hi) = spec.loop_distance;
    let mut anchors: Vec<usize> = Vec::new();
    let mut loops = Vec::with_capacity(spec.loop_count);
    let clear = |anchors: &[usize], a: usize| anchors.iter().all(|&b| a.abs_diff(b) > spec.anchor_spacing);
    let mut attempts = 0usize;
    while loops.len() < spec.loop_count {
        attempts += 1;
        if attempts > 10_000 * spec.loop_count.max(1) {
            return Err(Error::validation(format!(
                "could not place {} loops with anchor spacing {} on {} bins",
                spec.loop_count, spec.anchor_spacing, spec.n_bins
            )));
        }
        let d = rng.gen_range(lo..=hi);
        let i = rng.gen_range(0..spec.n_bins - d);
        let j = i + d;
        if clear(&anchors, i) && clear(&anchors, j) && i.abs_diff(j) > spec.anchor_spacing {
            anchors.push(i);
            anchors.push(j);
            loops.push((i, j));
        }
    }
    loops.sort_unstable();
    Ok(loops)
}

/// Per-bin compartment sign, `+1` open and `-1` closed, in segments.
fn draw_compartments(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (lo, hi) = spec.compartment_length;
    let mut sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let mut out = Vec::with_capacity(spec.n_bins);
    while out.len() < spec.n_bins {
        let len = rng.gen_range(lo..=hi).min(spec.n_bins - out.len());
        out.extend(std::iter::repeat_n(sign, len));
        sign = -sign;
    }
    out
}

/// Draws one chromosome. Deterministic in `(spec, name)`'s seed.
pub fn generate_chromosome(spec: &SyntheticSpec, name: &str) -> Result<SyntheticChromosome> {
    spec.validate()?;
    let n = spec.n_bins;
    let loop_bins = plant_loops(spec, &mut stream_rng(spec.seed, 0))?;
    let planted: std::collections::HashSet<(usize, usize)> = loop_bins.iter().copied().collect();

    let compartments = draw_compartments(spec, &mut stream_rng(spec.seed, 3));
    let mut rng = stream_rng(spec.seed, 1);
    let mut contacts = Vec::new();
    let mut row_sums = vec![0.0; n];
    for i in 0..n {
        for j in i..n.min(i + spec.max_distance_bins + 1) {
            let lambda = spec.expected_rate(j - i, planted.contains(&(i, j)))
                * (1.0 + spec.compartment_strength * compartments[i] * compartments[j]);
            let count = Poisson::new(lambda)
                .map_err(|e| Error::validation(format!("poisson rate {lambda}: {e}")))?
                .sample(&mut rng);
            if count > 0.0 {
                contacts.push(SparseContactRecord {
                    bin_i: i as u32,
                    bin_j: j as u32,
                    count,
                });
                row_sums[i] += count;
                if i != j {
                    row_sums[j] += count;
                }
            }
        }
    }

    // Peak centres in bp: loop anchors, then distractors.
    let mut rng = stream_rng(spec.seed, 2);
    let res = spec.resolution_bp as f64;
    let mut centres: Vec<f64> = loop_bins
        .iter()
        .flat_map(|&(i, j)| [i, j])
        .map(|a| (a as f64 + 0.5) * res)
        .collect();
    for _ in 0..spec.distractor_peaks {
        centres.push((rng.gen_range(0..n) as f64 + 0.5) * res);
    }
    let tb = spec.bin_track_bp as f64;
    let per_bin = spec.track_bins_per_bin();
    let n_track = n * per_bin;
    let amplitude = spec.peak_amplitude();
    let mut signal = vec![0.0; n_track];
    if amplitude > 0.0 {
        let sigma = spec.peak_width * tb;
        let reach = (5.0 * spec.peak_width).ceil() as i64 + 1;
        for &c in &centres {
            let k0 = (c / tb).floor() as i64;
            for k in (k0 - reach).max(0)..(k0 + reach + 1).min(n_track as i64) {
                let x = (k as f64 + 0.5) * tb - c;
                signal[k as usize] += amplitude * (-0.5 * (x / sigma).powi(2)).exp();
            }
        }
    }
    let noise = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut tracks = vec![Vec::with_capacity(n_track), Vec::with_capacity(n_track)];
    for (k, s) in signal.iter().enumerate() {
        let start = k as u64 * spec.bin_track_bp;
        let interval = GenomicInterval::new(name, start, start + spec.bin_track_bp)?;
        let open = if compartments[k / per_bin] > 0.0 {
            spec.compartment_track_level
        } else {
            0.0
        };
        for (ch, gain) in [(0usize, 1.0), (1, SECOND_CHANNEL_GAIN)] {
            let value = gain * (s + open) + spec.track_noise * noise.sample(&mut rng).abs();
            tracks[ch].push(TrackRecord {
                interval: interval.clone(),
                value,
            });
        }
    }

    let mut cage = Vec::with_capacity(n);
    for i in 0..n {
        let local: f64 = tracks[0][i * per_bin..(i + 1) * per_bin].iter().map(|r| r.value).sum::<f64>() / per_bin as f64;
        let v = spec.cage_track_weight * local
            + spec.cage_contact_weight * row_sums[i].ln_1p()
            + spec.cage_noise * noise.sample(&mut rng);
        cage.push(TrackRecord {
            interval: GenomicInterval::from_bins(name, i as u64, 1, spec.resolution_bp)?,
            value: v.max(0.0),
        });
    }

    let loops = loop_bins
        .iter()
        .map(|&(i, j)| LoopAnnotation::from_bins(name, i as u64, j as u64, spec.resolution_bp, LoopLabel::Positive))
        .collect::<Result<_>>()?;
    Ok(SyntheticChromosome {
        name: name.to_string(),
        n_bins: n,
        contacts,
        tracks,
        loop_bins,
        loops,
        cage,
    })
}

/// Number of synthetic chromosomes per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitLayout {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitLayout {
    fn default() -> Self {
        Self {
            train: 3,
            validation: 1,
            test: 1,
        }
    }
}

/// Windows requested per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl WindowCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }
}

/// Chromosome `k` of a dataset is generated with this seed.
pub fn chromosome_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Writes contact, track, loop and expression files for every chromosome of
/// `layout` plus a manifest; returns the manifest path.
pub fn write_synthetic_files(spec: &SyntheticSpec, layout: &SplitLayout, dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut splits = SplitAssignment::default();
    let mut contacts = BTreeMap::new();
    let mut sizes = BTreeMap::new();
    let mut tracks: Vec<Vec<TrackRecord>> = vec![Vec::new(), Vec::new()];
    let mut loops = Vec::new();
    let mut cage = Vec::new();
    let mut k = 0;
    for (split, count) in [
        (Split::Train, layout.train),
        (Split::Validation, layout.validation),
        (Split::Test, layout.test),
    ] {
        for _ in 0..count {
            let name = format!("syn{}", k + 1);
            let chrom_spec = SyntheticSpec {
                seed: chromosome_seed(spec.seed, k),
                ..spec.clone()
            };
            let c = generate_chromosome(&chrom_spec, &name)?;
            let file = format!("{name}.contacts.tsv");
            write_contact_matrix(&c.contacts, dir.join(&file))?;
            contacts.insert(name.clone(), PathBuf::from(file));
            sizes.insert(name.clone(), c.n_bins as u64 * spec.resolution_bp);
            for (all, ch) in tracks.iter_mut().zip(c.tracks) {
                all.extend(ch);
            }
            loops.extend(c.loops);
            cage.extend(c.cage);
            match split {
                Split::Train => splits.train.push(name),
                Split::Validation => splits.validation.push(name),
                Split::Test => splits.test.push(name),
            }
            k += 1;
        }
    }
    let track_files = ["track_atac.tsv", "track_dnase.tsv"];
    for (records, file) in tracks.iter().zip(track_files) {
        write_track(records, dir.join(file))?;
    }
    write_loops(&loops, dir.join("loops.tsv"))?;
    write_track(&cage, dir.join("cage.tsv"))?;
    let manifest = DatasetManifest {
        resolution_bp: spec.resolution_bp,
        window_bp: spec.window_bins as u64 * spec.resolution_bp,
        bin_track_bp: spec.bin_track_bp,
        contacts,
        tracks: track_files.iter().map(PathBuf::from).collect(),
        loops: vec![PathBuf::from("loops.tsv")],
        cage: Some(PathBuf::from("cage.tsv")),
        chromosome_sizes: sizes,
        splits,
    };
    let path = dir.join("manifest.toml");
    write_manifest(&manifest, &path)?;
    let spec_json = serde_json::to_string_pretty(spec).map_err(|e| Error::validation(e.to_string()))?;
    let spec_path = dir.join("synthetic_spec.json");
    fs::write(&spec_path, spec_json).map_err(|e| Error::io(&spec_path, e))?;
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub manifest: PathBuf,
    /// Archive path and record count per split.
    pub archives: BTreeMap<Split, (PathBuf, usize)>,
}

/// Generates the text files, then cuts `task` windows per split through the
/// regular preprocessing path and writes one archive per non-empty split.
pub fn generate_dataset(
    spec: &SyntheticSpec,
    layout: &SplitLayout,
    counts: &WindowCounts,
    task: Task,
    sampling: &WindowSampling,
    dir: &Path,
) -> Result<GeneratedDataset> {
    let manifest = write_synthetic_files(spec, layout, dir)?;
    let dataset = Dataset::load(&crate::genomic_io::load_manifest(&manifest)?)?;
    let mut archives = BTreeMap::new();
    for split in [Split::Train, Split::Validation, Split::Test] {
        let want = counts.get(split);
        if want == 0 {
            continue;
        }
        let samples = dataset.samples(split, task, Some(want), spec.seed ^ split_salt(split), sampling)?;
        if samples.is_empty() {
            continue;
        }
        let path = dir.join(format!("{split}.mxh"));
        let written = write_archive(&path, &samples)?;
        archives.insert(split, (path, written));
    }
    Ok(GeneratedDataset {
        manifest,
        archives,
    })
}

fn split_salt(split: Split) -> u64 {
    match split {
        Split::Train => 0x11,
        Split::Validation => 0x22,
        Split::Test => 0x33,
    }
}

/// In-memory variant of [`generate_dataset`] that keeps the files in `dir`
/// but returns the samples directly.
pub fn generate_samples(
    spec: &SyntheticSpec,
    layout: &SplitLayout,
    counts: &WindowCounts,
    task: Task,
    sampling: &WindowSampling,
    dir: &Path,
) -> Result<(Dataset, BTreeMap<Split, Vec<SamplePair>>)> {
    let manifest = write_synthetic_files(spec, layout, dir)?;
    let dataset = Dataset::load(&crate::genomic_io::load_manifest(&manifest)?)?;
    let mut out = BTreeMap::new();
    for split in [Split::Train, Split::Validation, Split::Test] {
        let want = counts.get(split);
        let samples = if want == 0 {
            Vec::new()
        } else {
            dataset.samples(split, task, Some(want), spec.seed ^ split_salt(split), sampling)?
        };
        out.insert(split, samples);
    }
    Ok((dataset, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_bins: 300,
            loop_count: 5,
            max_distance_bins: 60,
            loop_distance: (10, 40),
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn planted_rate_formula() {
        let spec = SyntheticSpec {
            background: 2.0,
            ..SyntheticSpec::default()
        };
        assert!((spec.expected_rate(10, true) - 2.0 / 11.0 * 8.0).abs() < 1e-12);
        assert!((spec.expected_rate(10, true) - 1.4545).abs() < 1e-4);
    }

    #[test]
    fn validation_rules() {
        assert!(SyntheticSpec { enrichment: 1.0, ..small() }.validate().is_err());
        assert!(SyntheticSpec { coupling: 1.5, ..small() }.validate().is_err());
        assert!(SyntheticSpec { n_bins: 30, ..small() }.validate().is_err());
        let crowded = SyntheticSpec {
            loop_count: 200,
            ..small()
        };
        assert!(generate_chromosome(&crowded, "c").is_err());
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate_chromosome(&small(), "c").unwrap();
        let b = generate_chromosome(&small(), "c").unwrap();
        assert_eq!(a.contacts, b.contacts);
        assert_eq!(a.tracks, b.tracks);
        let c = generate_chromosome(&SyntheticSpec { seed: 1, ..small() }, "c").unwrap();
        assert_ne!(a.contacts, c.contacts);
    }

    #[test]
    fn zero_coupling_has_no_peaks() {
        let spec = SyntheticSpec {
            coupling: 0.0,
            track_noise: 0.0,
            ..small()
        };
        let c = generate_chromosome(&spec, "c").unwrap();
        assert!(c.tracks.iter().flatten().all(|r| r.value == 0.0));
    }

    #[test]
    fn peaks_sit_on_anchors() {
        let spec = SyntheticSpec {
            track_noise: 0.0,
            ..small()
        };
        let c = generate_chromosome(&spec, "c").unwrap();
        let per_bin = 10;
        for &(i, _) in &c.loop_bins {
            let centre = c.tracks[0][i * per_bin + 5].value;
            assert!(centre > 0.9 * spec.peak_amplitude(), "{centre}");
        }
    }
}
