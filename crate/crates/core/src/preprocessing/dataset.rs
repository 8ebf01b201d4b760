//! Loading a manifest's files and cutting them into sample pairs.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    assemble_pair, centered_origin, ChromosomeContacts, ChromosomeExtent, NegativeSampling, SamplePair,
    SampleTarget, TrackChannel, WindowGeometry, DEFAULT_MAX_ITERATIONS, DEFAULT_MIN_NONZERO_FRACTION,
    DEFAULT_TOLERANCE,
};
use crate::error::{ensure, Error, Result};
use crate::genomic_io::{
    parse_contact_matrix, parse_loops, parse_track, DatasetManifest, GenomicInterval, LoopAnnotation, LoopLabel,
    Split,
};
use crate::model::Task;

/// Raw and balanced contacts of one chromosome.
#[derive(Debug, Clone)]
pub struct LoadedChromosome {
    pub raw: ChromosomeContacts,
    pub balanced: ChromosomeContacts,
}

/// Every file of a manifest, parsed and balanced.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub geometry: WindowGeometry,
    pub chromosomes: BTreeMap<String, LoadedChromosome>,
    pub tracks: Vec<TrackChannel>,
    pub loops: Vec<LoopAnnotation>,
    pub cage: Option<TrackChannel>,
    pub min_nonzero_fraction: f64,
}

/// How windows are drawn for tasks without loop anchors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSampling {
    /// Largest `origin_y - origin_x` in bins.
    pub max_offset_bins: usize,
    /// Negatives closer than this (Chebyshev, bins) to a positive are redrawn.
    pub negative_exclusion_radius: u64,
    /// Cap on far-negative distances in bins.
    pub far_distance_limit: Option<u64>,
}

impl Default for WindowSampling {
    fn default() -> Self {
        Self {
            max_offset_bins: 64,
            negative_exclusion_radius: 2,
            far_distance_limit: None,
        }
    }
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        manifest.validate()?;
        let geometry = WindowGeometry::from_manifest(manifest)?;
        let res = manifest.resolution_bp;
        let mut chromosomes = BTreeMap::new();
        for (chrom, path) in &manifest.contacts {
            let records = parse_contact_matrix(path, chrom)?;
            let n_bins = match manifest.chromosome_sizes.get(chrom) {
                Some(bp) => bp.div_ceil(res) as usize,
                None => records.iter().map(|r| r.bin_j as usize + 1).max().unwrap_or(0),
            };
            let raw = ChromosomeContacts::new(chrom.clone(), res, n_bins, records)?;
            let (balanced, _) = raw.balanced(DEFAULT_TOLERANCE, DEFAULT_MAX_ITERATIONS)?;
            chromosomes.insert(chrom.clone(), LoadedChromosome { raw, balanced });
        }
        let tracks = manifest
            .tracks
            .iter()
            .map(|p| TrackChannel::new(parse_track(p)?))
            .collect::<Result<Vec<_>>>()?;
        ensure!(!tracks.is_empty(), "manifest lists no track files");
        let mut loops = Vec::new();
        for p in &manifest.loops {
            loops.extend(parse_loops(p)?);
        }
        let cage = match &manifest.cage {
            Some(p) => Some(TrackChannel::new(parse_track(p)?)?),
            None => None,
        };
        Ok(Self {
            manifest: manifest.clone(),
            geometry,
            chromosomes,
            tracks,
            loops,
            cage,
            min_nonzero_fraction: DEFAULT_MIN_NONZERO_FRACTION,
        })
    }

    pub fn chromosome(&self, name: &str) -> Result<&LoadedChromosome> {
        self.chromosomes
            .get(name)
            .ok_or_else(|| Error::validation(format!("chromosome {name} has no contact matrix in the manifest")))
    }

    pub fn split_chromosomes(&self, split: Split) -> Vec<&str> {
        self.manifest
            .splits
            .chromosomes(split)
            .iter()
            .map(String::as_str)
            .filter(|c| self.chromosomes.contains_key(*c))
            .collect()
    }

    /// Sample at window origins `(x, y)` in bins, with `target` attached, or
    /// `None` when it fails the quality filter.
    pub fn sample_at(&self, chrom: &str, x: usize, y: usize, task: Task) -> Result<Option<SamplePair>> {
        self.sample_with_filter(chrom, x, y, task, self.min_nonzero_fraction)
    }

    /// [`Self::sample_at`] with an explicit quality threshold.
    pub fn sample_with_filter(
        &self,
        chrom: &str,
        x: usize,
        y: usize,
        task: Task,
        min_nonzero_fraction: f64,
    ) -> Result<Option<SamplePair>> {
        let c = self.chromosome(chrom)?;
        let h = self.geometry.window_bins() as u64;
        let res = self.geometry.resolution_bp;
        let ix = GenomicInterval::from_bins(chrom, x as u64, h, res)?;
        let iy = GenomicInterval::from_bins(chrom, y as u64, h, res)?;
        let Some(mut pair) = assemble_pair(
            &c.balanced,
            &self.tracks,
            &ix,
            &iy,
            &self.geometry,
            min_nonzero_fraction,
        )?
        else {
            return Ok(None);
        };
        pair.target = match task {
            Task::None | Task::Loop => SampleTarget::None,
            Task::Cage => {
                let cage = self
                    .cage
                    .as_ref()
                    .ok_or_else(|| Error::validation("expression task needs a cage file in the manifest"))?;
                let mut v = cage.bin(&ix, res)?;
                v.extend(cage.bin(&iy, res)?);
                SampleTarget::Cage(v)
            }
            Task::Contact => SampleTarget::Contact(pair.contact.values.clone()),
        };
        Ok(Some(pair))
    }

    /// Sample whose window is centred on the pixel `(i, j)`.
    pub fn centered_sample(&self, chrom: &str, i: usize, j: usize, task: Task) -> Result<Option<SamplePair>> {
        let n = self.chromosome(chrom)?.balanced.n_bins;
        let (x, y) = centered_origin(i, j, self.geometry.window_bins(), n)?;
        self.sample_at(chrom, x, y, task)
    }

    /// Centred window without the quality filter; edge windows are clamped
    /// inside the chromosome.
    pub fn centered_window(&self, chrom: &str, i: usize, j: usize, task: Task) -> Result<SamplePair> {
        let n = self.chromosome(chrom)?.balanced.n_bins;
        let (x, y) = centered_origin(i, j, self.geometry.window_bins(), n)?;
        self.sample_with_filter(chrom, x, y, task, 0.0)?
            .ok_or_else(|| Error::validation(format!("no window at ({x}, {y}) on {chrom}")))
    }

    /// Loop-task samples of `split`: every positive loop plus as many sampled
    /// negatives, truncated so both classes have equal counts (at most
    /// `limit` in total).
    pub fn loop_samples(
        &self,
        split: Split,
        limit: Option<usize>,
        seed: u64,
        sampling: &WindowSampling,
    ) -> Result<Vec<SamplePair>> {
        let res = self.geometry.resolution_bp;
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (k, chrom) in self.split_chromosomes(split).into_iter().enumerate() {
            let positives: Vec<LoopAnnotation> = self
                .loops
                .iter()
                .filter(|l| l.anchor1.chromosome == chrom && l.label != LoopLabel::Negative)
                .cloned()
                .collect();
            if positives.is_empty() {
                continue;
            }
            let n_bins = self.chromosome(chrom)?.balanced.n_bins;
            let extent = ChromosomeExtent {
                chromosome: chrom.to_string(),
                n_bins: n_bins as u64,
                resolution_bp: res,
            };
            let negatives = NegativeSampling {
                count: positives.len(),
                seed: seed.wrapping_add(k as u64),
                exclusion_radius: sampling.negative_exclusion_radius,
                far_distance_limit: sampling.far_distance_limit,
            }
            .sample(&positives, &extent)?;
            for (list, label, out) in [(&positives, 1u8, &mut pos), (&negatives, 0u8, &mut neg)] {
                for l in list {
                    let (i, j) = l.bins(res);
                    if let Some(mut s) = self.centered_sample(chrom, i as usize, j as usize, Task::Loop)? {
                        s.target = SampleTarget::LoopLabel(label);
                        out.push(s);
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        let mut per_class = pos.len().min(neg.len());
        if let Some(limit) = limit {
            per_class = per_class.min(limit / 2);
        }
        pos.truncate(per_class);
        neg.truncate(per_class);
        let mut all: Vec<SamplePair> = pos.into_iter().chain(neg).collect();
        all.shuffle(&mut rng);
        Ok(all)
    }

    /// `count` quality-passing windows at random positions of `split`,
    /// with `y - x` uniform in `[0, max_offset_bins]`.
    pub fn random_samples(
        &self,
        split: Split,
        task: Task,
        count: usize,
        seed: u64,
        sampling: &WindowSampling,
    ) -> Result<Vec<SamplePair>> {
        let h = self.geometry.window_bins();
        let chroms: Vec<(&str, usize)> = self
            .split_chromosomes(split)
            .into_iter()
            .map(|c| (c, self.chromosomes[c].balanced.n_bins))
            .filter(|(_, n)| *n >= h)
            .collect();
        ensure!(!chroms.is_empty(), "split {split} has no chromosome long enough for a {h}-bin window");
        let total: usize = chroms.iter().map(|(_, n)| n - h + 1).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        let max_attempts = 100 * count.max(1);
        let mut attempts = 0;
        while out.len() < count {
            attempts += 1;
            if attempts > max_attempts {
                return Err(Error::Sampling(format!(
                    "only {} of {count} windows passed the quality filter after {max_attempts} draws",
                    out.len()
                )));
            }
            let mut pick = rng.gen_range(0..total);
            let mut chosen = chroms[0];
            for &(c, n) in &chroms {
                if pick < n - h + 1 {
                    chosen = (c, n);
                    break;
                }
                pick -= n - h + 1;
            }
            let (chrom, n) = chosen;
            let x = rng.gen_range(0..=n - h);
            let offset = rng.gen_range(0..=sampling.max_offset_bins);
            let y = x + offset;
            if y + h > n {
                continue;
            }
            if let Some(s) = self.sample_at(chrom, x, y, task)? {
                out.push(s);
            }
        }
        Ok(out)
    }

    /// Samples for `task` on `split`: anchored loop windows for the loop
    /// task, random windows otherwise.
    pub fn samples(
        &self,
        split: Split,
        task: Task,
        count: Option<usize>,
        seed: u64,
        sampling: &WindowSampling,
    ) -> Result<Vec<SamplePair>> {
        match task {
            Task::Loop => self.loop_samples(split, count, seed, sampling),
            _ => {
                let count = count.ok_or_else(|| Error::validation("a window count is required for this task"))?;
                self.random_samples(split, task, count, seed, sampling)
            }
        }
    }
}
