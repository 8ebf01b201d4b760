//! Turning raw contact records and signal tracks into model-ready sample pairs.

mod archive;
mod balance;
mod dataset;
mod negatives;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use archive::{read_archive, write_archive, ArchiveHeader, ArchiveReader, ArchiveWriter, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use balance::{kr_balance, kr_balance_sparse, Balanced, SparseBalance, DenseMatrix, DEFAULT_MAX_ITERATIONS, DEFAULT_TOLERANCE};
pub use dataset::{Dataset, LoadedChromosome, WindowSampling};
pub use negatives::{sample_negative_loops, ChromosomeExtent, NegativeSampling, MAX_SAMPLING_RETRIES};

use crate::error::{ensure, Error, Result};
use crate::genomic_io::{DatasetManifest, GenomicInterval, SparseContactRecord, TrackRecord};

pub const DEFAULT_MIN_NONZERO_FRACTION: f64 = 0.10;

/// Contact records of one chromosome, sorted upper-triangular.
#[derive(Debug, Clone)]
pub struct ChromosomeContacts {
    pub chromosome: String,
    pub resolution_bp: u64,
    pub n_bins: usize,
    records: Vec<SparseContactRecord>,
}

impl ChromosomeContacts {
    pub fn new(
        chromosome: impl Into<String>,
        resolution_bp: u64,
        n_bins: usize,
        mut records: Vec<SparseContactRecord>,
    ) -> Result<Self> {
        for r in &mut records {
            if r.bin_i > r.bin_j {
                std::mem::swap(&mut r.bin_i, &mut r.bin_j);
            }
            ensure!(
                (r.bin_j as usize) < n_bins,
                "record ({}, {}) beyond chromosome end ({n_bins} bins)",
                r.bin_i,
                r.bin_j
            );
        }
        crate::genomic_io::sort_contacts(&mut records);
        Ok(Self {
            chromosome: chromosome.into(),
            resolution_bp,
            n_bins,
            records,
        })
    }

    pub fn from_matrix(chromosome: impl Into<String>, resolution_bp: u64, matrix: &DenseMatrix) -> Self {
        Self {
            chromosome: chromosome.into(),
            resolution_bp,
            n_bins: matrix.n(),
            records: matrix.to_records(),
        }
    }

    pub fn records(&self) -> &[SparseContactRecord] {
        &self.records
    }

    pub fn to_dense(&self) -> Result<DenseMatrix> {
        DenseMatrix::from_records(&self.records, self.n_bins)
    }

    /// Symmetric lookup; absent entries are zero.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let key = (i.min(j) as u32, i.max(j) as u32);
        self.records
            .binary_search_by(|r| (r.bin_i, r.bin_j).cmp(&key))
            .map_or(0.0, |idx| self.records[idx].count)
    }

    /// Balances the chromosome matrix and returns the balanced contacts.
    pub fn balanced(&self, tolerance: f64, max_iterations: usize) -> Result<(Self, SparseBalance)> {
        let b = kr_balance_sparse(&self.records, self.n_bins, tolerance, max_iterations)?;
        let contacts = Self {
            chromosome: self.chromosome.clone(),
            resolution_bp: self.resolution_bp,
            n_bins: self.n_bins,
            records: b.records.clone(),
        };
        Ok((contacts, b))
    }
}

/// A square window of log-transformed contacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactMapWindow {
    /// Row-major `size × size`.
    pub values: Vec<f64>,
    pub size: usize,
    pub origin_x: GenomicInterval,
    pub origin_y: GenomicInterval,
    pub resolution_bp: u64,
}

impl ContactMapWindow {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size + col]
    }

    pub fn nonzero_count(&self) -> usize {
        self.values.iter().filter(|v| **v > 0.0).count()
    }

    /// True when both axes cover the same genomic segment, so the window is symmetric.
    pub fn is_diagonal(&self) -> bool {
        self.origin_x == self.origin_y
    }
}

/// Binned signal over both window segments: `length × channels`, position-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackWindow {
    pub values: Vec<f64>,
    pub length: usize,
    pub channels: usize,
}

impl TrackWindow {
    pub fn get(&self, position: usize, channel: usize) -> f64 {
        self.values[position * self.channels + channel]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SampleTarget {
    None,
    LoopLabel(u8),
    Cage(Vec<f64>),
    Contact(Vec<f64>),
}

impl SampleTarget {
    pub fn kind(&self) -> &'static str {
        match self {
            SampleTarget::None => "none",
            SampleTarget::LoopLabel(_) => "loop",
            SampleTarget::Cage(_) => "cage",
            SampleTarget::Contact(_) => "contact",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePair {
    pub contact: ContactMapWindow,
    pub track: TrackWindow,
    pub target: SampleTarget,
}

/// Window geometry shared by every sample of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowGeometry {
    pub resolution_bp: u64,
    pub window_bp: u64,
    pub bin_track_bp: u64,
}

impl WindowGeometry {
    pub fn new(resolution_bp: u64, window_bp: u64, bin_track_bp: u64) -> Result<Self> {
        ensure!(resolution_bp > 0 && bin_track_bp > 0, "bin sizes must be positive");
        ensure!(
            window_bp.is_multiple_of(resolution_bp),
            "window_bp {window_bp} is not divisible by resolution_bp {resolution_bp}"
        );
        ensure!(
            window_bp.is_multiple_of(bin_track_bp),
            "window_bp {window_bp} is not divisible by bin_track_bp {bin_track_bp}"
        );
        Ok(Self {
            resolution_bp,
            window_bp,
            bin_track_bp,
        })
    }

    pub fn from_manifest(m: &DatasetManifest) -> Result<Self> {
        Self::new(m.resolution_bp, m.window_bp, m.bin_track_bp)
    }

    pub fn window_bins(&self) -> usize {
        (self.window_bp / self.resolution_bp) as usize
    }

    pub fn track_length(&self) -> usize {
        (2 * self.window_bp / self.bin_track_bp) as usize
    }
}

/// Dense `size × size` window at the given bin origins, transformed by `ln(x + 1)`.
pub fn extract_window(
    contacts: &ChromosomeContacts,
    origin_bin_x: usize,
    origin_bin_y: usize,
    size: usize,
) -> Result<ContactMapWindow> {
    ensure!(size >= 1, "window size must be >= 1");
    let end = origin_bin_x.max(origin_bin_y) + size;
    if end > contacts.n_bins {
        return Err(Error::OutOfRange(format!(
            "window at bins ({origin_bin_x}, {origin_bin_y}) of size {size} extends past the end of {} ({} bins)",
            contacts.chromosome, contacts.n_bins
        )));
    }
    let mut values = vec![0.0; size * size];
    for a in 0..size {
        for b in 0..size {
            let c = contacts.get(origin_bin_x + a, origin_bin_y + b);
            values[a * size + b] = c.ln_1p();
        }
    }
    let res = contacts.resolution_bp;
    Ok(ContactMapWindow {
        values,
        size,
        origin_x: GenomicInterval::from_bins(&contacts.chromosome, origin_bin_x as u64, size as u64, res)?,
        origin_y: GenomicInterval::from_bins(&contacts.chromosome, origin_bin_y as u64, size as u64, res)?,
        resolution_bp: res,
    })
}

/// Keeps windows with at least `min_nonzero_fraction` non-zero entries.
pub fn passes_quality_filter(window: &ContactMapWindow, min_nonzero_fraction: f64) -> bool {
    let total = (window.size * window.size) as f64;
    window.nonzero_count() as f64 / total >= min_nonzero_fraction
}

/// Track records of one channel indexed by chromosome, each list sorted by start.
#[derive(Debug, Clone, Default)]
pub struct TrackChannel {
    by_chromosome: HashMap<String, Vec<TrackRecord>>,
}

impl TrackChannel {
    pub fn new(records: Vec<TrackRecord>) -> Result<Self> {
        let mut by_chromosome: HashMap<String, Vec<TrackRecord>> = HashMap::new();
        for r in records {
            by_chromosome.entry(r.interval.chromosome.clone()).or_default().push(r);
        }
        for recs in by_chromosome.values_mut() {
            recs.sort_by_key(|r| r.interval.start);
            for w in recs.windows(2) {
                ensure!(
                    w[0].interval.end <= w[1].interval.start,
                    "track intervals {} and {} overlap",
                    w[0].interval,
                    w[1].interval
                );
            }
        }
        Ok(Self { by_chromosome })
    }

    pub fn records(&self, chromosome: &str) -> &[TrackRecord] {
        self.by_chromosome.get(chromosome).map_or(&[], Vec::as_slice)
    }

    pub fn bin(&self, region: &GenomicInterval, bin_bp: u64) -> Result<Vec<f64>> {
        bin_track(self.records(&region.chromosome), region, bin_bp)
    }
}

/// Overlap-weighted per-bin means before the log transform. Gaps count as zero.
///
/// `records` must be sorted by start; records on other chromosomes are skipped.
pub fn bin_track_linear(records: &[TrackRecord], region: &GenomicInterval, bin_bp: u64) -> Result<Vec<f64>> {
    ensure!(bin_bp > 0, "bin size must be positive");
    ensure!(
        region.len().is_multiple_of(bin_bp),
        "region {region} length {} is not divisible by bin size {bin_bp}",
        region.len()
    );
    let n = (region.len() / bin_bp) as usize;
    let mut acc = vec![0.0; n];
    let first = records.partition_point(|r| r.interval.end <= region.start);
    for r in &records[first..] {
        if r.interval.start >= region.end {
            break;
        }
        if r.interval.chromosome != region.chromosome {
            continue;
        }
        let lo = r.interval.start.max(region.start);
        let hi = r.interval.end.min(region.end);
        let mut pos = lo;
        while pos < hi {
            let b = ((pos - region.start) / bin_bp) as usize;
            let bin_end = region.start + (b as u64 + 1) * bin_bp;
            let seg_end = hi.min(bin_end);
            acc[b] += r.value * (seg_end - pos) as f64;
            pos = seg_end;
        }
    }
    for a in &mut acc {
        *a /= bin_bp as f64;
    }
    Ok(acc)
}

/// Per-bin means transformed by `ln(x + 1)`.
pub fn bin_track(records: &[TrackRecord], region: &GenomicInterval, bin_bp: u64) -> Result<Vec<f64>> {
    Ok(bin_track_linear(records, region, bin_bp)?
        .into_iter()
        .map(f64::ln_1p)
        .collect())
}

/// Builds a sample for the window spanning `interval_x × interval_y`, or `None`
/// when the contact window fails the quality filter. The target is left empty.
pub fn assemble_pair(
    contacts: &ChromosomeContacts,
    tracks: &[TrackChannel],
    interval_x: &GenomicInterval,
    interval_y: &GenomicInterval,
    geometry: &WindowGeometry,
    min_nonzero_fraction: f64,
) -> Result<Option<SamplePair>> {
    ensure!(!tracks.is_empty(), "at least one track channel is required");
    for iv in [interval_x, interval_y] {
        ensure!(
            iv.chromosome == contacts.chromosome,
            "interval {iv} is not on {}",
            contacts.chromosome
        );
        ensure!(
            iv.len() == geometry.window_bp && iv.start % geometry.resolution_bp == 0,
            "interval {iv} is not a bin-aligned {} bp window",
            geometry.window_bp
        );
    }
    let size = geometry.window_bins();
    let res = geometry.resolution_bp;
    let contact = extract_window(
        contacts,
        (interval_x.start / res) as usize,
        (interval_y.start / res) as usize,
        size,
    )?;
    if !passes_quality_filter(&contact, min_nonzero_fraction) {
        return Ok(None);
    }

    let channels = tracks.len();
    let half = (geometry.window_bp / geometry.bin_track_bp) as usize;
    let mut values = vec![0.0; 2 * half * channels];
    for (c, channel) in tracks.iter().enumerate() {
        let xs = channel.bin(interval_x, geometry.bin_track_bp)?;
        let ys = channel.bin(interval_y, geometry.bin_track_bp)?;
        for (p, v) in xs.into_iter().chain(ys).enumerate() {
            values[p * channels + c] = v;
        }
    }
    Ok(Some(SamplePair {
        contact,
        track: TrackWindow {
            values,
            length: 2 * half,
            channels,
        },
        target: SampleTarget::None,
    }))
}

/// Window origin (in bins) placing `(bin_i, bin_j)` at the window centre,
/// clamped so the window stays inside the chromosome.
pub fn centered_origin(bin_i: usize, bin_j: usize, size: usize, n_bins: usize) -> Result<(usize, usize)> {
    if n_bins < size {
        return Err(Error::OutOfRange(format!(
            "chromosome with {n_bins} bins is shorter than one {size}-bin window"
        )));
    }
    let clamp = |b: usize| b.saturating_sub(size / 2).min(n_bins - size);
    Ok((clamp(bin_i), clamp(bin_j)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contacts(records: Vec<(u32, u32, f64)>, n: usize) -> ChromosomeContacts {
        ChromosomeContacts::new(
            "chr1",
            5000,
            n,
            records
                .into_iter()
                .map(|(i, j, c)| SparseContactRecord { bin_i: i, bin_j: j, count: c })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn window_log_transform() {
        let e = std::f64::consts::E;
        let w = extract_window(&contacts(vec![(0, 0, e - 1.0)], 4), 0, 0, 2).unwrap();
        assert!((w.values[0] - 1.0).abs() < 1e-15);
        assert_eq!(&w.values[1..], &[0.0, 0.0, 0.0]);

        let w = extract_window(&contacts(vec![], 4), 1, 1, 2).unwrap();
        assert!(w.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn window_mirrors_lower_triangle() {
        let w = extract_window(&contacts(vec![(1, 0, 3.0)], 4), 0, 0, 2).unwrap();
        let v = 4f64.ln();
        assert_eq!(w.get(0, 1), v);
        assert_eq!(w.get(1, 0), v);
        assert_eq!(w.get(0, 0), 0.0);
    }

    #[test]
    fn window_past_end_is_error() {
        assert!(matches!(
            extract_window(&contacts(vec![], 4), 3, 0, 2),
            Err(Error::OutOfRange(_))
        ));
    }

    fn window_with_nonzero(k: usize) -> ContactMapWindow {
        let mut values = vec![0.0; 2500];
        values.iter_mut().take(k).for_each(|v| *v = 1.0);
        ContactMapWindow {
            values,
            size: 50,
            origin_x: GenomicInterval::new("chr1", 0, 250_000).unwrap(),
            origin_y: GenomicInterval::new("chr1", 0, 250_000).unwrap(),
            resolution_bp: 5000,
        }
    }

    #[test]
    fn quality_filter_boundary() {
        assert!(!passes_quality_filter(&window_with_nonzero(249), 0.10));
        assert!(passes_quality_filter(&window_with_nonzero(250), 0.10));
        assert!(!passes_quality_filter(&window_with_nonzero(0), 0.10));
    }

    fn rec(start: u64, end: u64, value: f64) -> TrackRecord {
        TrackRecord {
            interval: GenomicInterval::new("chr1", start, end).unwrap(),
            value,
        }
    }

    #[test]
    fn track_binning() {
        let region = GenomicInterval::new("chr1", 0, 100).unwrap();
        let v = bin_track(&[rec(0, 100, 3.0)], &region, 100).unwrap();
        assert!((v[0] - 1.386294).abs() < 1e-6);

        let v = bin_track(&[], &GenomicInterval::new("chr1", 0, 300).unwrap(), 100).unwrap();
        assert_eq!(v, vec![0.0; 3]);

        let v = bin_track(&[rec(0, 50, 2.0)], &region, 100).unwrap();
        assert!((v[0] - std::f64::consts::LN_2).abs() < 1e-12);

        assert!(bin_track(&[], &GenomicInterval::new("chr1", 0, 150).unwrap(), 100).is_err());
    }

    #[test]
    fn track_binning_spanning_records() {
        let region = GenomicInterval::new("chr1", 100, 400).unwrap();
        let recs = [rec(0, 150, 2.0), rec(150, 350, 4.0), rec(380, 500, 1.0)];
        let acc = bin_track_linear(&recs, &region, 100).unwrap();
        // bin [100,200): 50bp@2 + 50bp@4; [200,300): 100bp@4; [300,400): 50bp@4 + 20bp@1
        assert_eq!(acc, vec![3.0, 4.0, 2.2]);
    }

    #[test]
    fn centered_origin_clamps() {
        assert_eq!(centered_origin(10, 20, 4, 100).unwrap(), (8, 18));
        assert_eq!(centered_origin(1, 99, 4, 100).unwrap(), (0, 96));
        assert!(centered_origin(0, 0, 8, 4).is_err());
    }
}
