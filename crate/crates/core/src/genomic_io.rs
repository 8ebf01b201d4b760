//! Plain-text carriers for contact matrices, signal tracks, loop lists and
//! the dataset manifest.
//!
//! Every format is line oriented, tab separated, and ignores blank lines and
//! lines starting with `#`.
//!
//! | file           | columns                                                  |
//! |----------------|----------------------------------------------------------|
//! | contact matrix | `bin_i bin_j count`                                      |
//! | track          | `chrom start end value`                                  |
//! | loops (input)  | `chrom1 start1 end1 chrom2 start2 end2 [score] [label]` |
//! | BEDPE (output) | `chrom1 start1 end1 chrom2 start2 end2 score density`    |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Half-open base-pair interval `[start, end)` on one chromosome.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GenomicInterval {
    pub chromosome: String,
    pub start: u64,
    pub end: u64,
}

impl GenomicInterval {
    pub fn new(chromosome: impl Into<String>, start: u64, end: u64) -> Result<Self> {
        let chromosome = chromosome.into();
        ensure!(!chromosome.is_empty(), "empty chromosome name");
        ensure!(start < end, "interval start {start} must be < end {end}");
        Ok(Self {
            chromosome,
            start,
            end,
        })
    }

    /// Interval covering `count` bins starting at bin `first_bin`.
    pub fn from_bins(chromosome: &str, first_bin: u64, count: u64, resolution_bp: u64) -> Result<Self> {
        Self::new(
            chromosome,
            first_bin * resolution_bp,
            (first_bin + count) * resolution_bp,
        )
    }

    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &GenomicInterval) -> bool {
        self.chromosome == other.chromosome && self.start < other.end && other.start < self.end
    }

    pub fn overlap_len(&self, start: u64, end: u64) -> u64 {
        self.end.min(end).saturating_sub(self.start.max(start))
    }
}

impl fmt::Display for GenomicInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}-{}", self.chromosome, self.start, self.end)
    }
}

/// One stored entry of a symmetric contact matrix, kept upper triangular.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseContactRecord {
    pub bin_i: u32,
    pub bin_j: u32,
    pub count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub interval: GenomicInterval,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopLabel {
    Positive,
    Negative,
    Unlabeled,
}

impl FromStr for LoopLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "positive" | "1" => Ok(LoopLabel::Positive),
            "negative" | "0" => Ok(LoopLabel::Negative),
            "unlabeled" | "." => Ok(LoopLabel::Unlabeled),
            other => Err(format!("unknown loop label {other:?}")),
        }
    }
}

impl fmt::Display for LoopLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LoopLabel::Positive => "positive",
            LoopLabel::Negative => "negative",
            LoopLabel::Unlabeled => "unlabeled",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopAnnotation {
    pub anchor1: GenomicInterval,
    pub anchor2: GenomicInterval,
    pub score: Option<f64>,
    pub label: LoopLabel,
}

impl LoopAnnotation {
    /// Builds an annotation from two bin indices, ordering the anchors.
    pub fn from_bins(
        chromosome: &str,
        bin_a: u64,
        bin_b: u64,
        resolution_bp: u64,
        label: LoopLabel,
    ) -> Result<Self> {
        let (lo, hi) = (bin_a.min(bin_b), bin_a.max(bin_b));
        Ok(Self {
            anchor1: GenomicInterval::from_bins(chromosome, lo, 1, resolution_bp)?,
            anchor2: GenomicInterval::from_bins(chromosome, hi, 1, resolution_bp)?,
            score: None,
            label,
        })
    }

    /// Anchor bins `(i, j)` at the given resolution, taken from the anchor starts.
    pub fn bins(&self, resolution_bp: u64) -> (u64, u64) {
        (
            self.anchor1.start / resolution_bp,
            self.anchor2.start / resolution_bp,
        )
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.anchor1.chromosome == self.anchor2.chromosome,
            "loop anchors on different chromosomes: {} / {}",
            self.anchor1,
            self.anchor2
        );
        ensure!(
            self.anchor1.start <= self.anchor2.start,
            "loop anchors out of order: {} after {}",
            self.anchor1,
            self.anchor2
        );
        if let Some(s) = self.score {
            ensure!((0.0..=1.0).contains(&s), "loop score {s} outside [0,1]");
        }
        Ok(())
    }
}

/// A called loop, as written to BEDPE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopCall {
    pub anchor1: GenomicInterval,
    pub anchor2: GenomicInterval,
    /// Model score of the cluster representative.
    pub probability: f64,
    /// Local density of the representative.
    pub density: f64,
    /// Number of candidates merged into this call.
    pub members: usize,
}

/// One parsed line of a BEDPE output file.
#[derive(Debug, Clone, PartialEq)]
pub struct BedpeRecord {
    pub anchor1: GenomicInterval,
    pub anchor2: GenomicInterval,
    pub score: f64,
    pub density: f64,
}

/// Which split a chromosome belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::validation(format!(
                "unknown split {other:?} (expected train, validation or test)"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitAssignment {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub validation: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

impl SplitAssignment {
    pub fn chromosomes(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, chromosome: &str) -> Option<Split> {
        [Split::Train, Split::Validation, Split::Test]
            .into_iter()
            .find(|s| self.chromosomes(*s).iter().any(|c| c == chromosome))
    }
}

fn default_resolution() -> u64 {
    5000
}
fn default_window() -> u64 {
    250_000
}
fn default_track_bin() -> u64 {
    100
}

/// Dataset description loaded from a TOML document.
///
/// Relative paths are resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default = "default_resolution")]
    pub resolution_bp: u64,
    #[serde(default = "default_window")]
    pub window_bp: u64,
    #[serde(default = "default_track_bin")]
    pub bin_track_bp: u64,
    /// Contact matrix file per chromosome.
    pub contacts: BTreeMap<String, PathBuf>,
    /// One track file per channel, in channel order.
    pub tracks: Vec<PathBuf>,
    #[serde(default)]
    pub loops: Vec<PathBuf>,
    /// Per-bin expression values in track format, at contact resolution.
    #[serde(default)]
    pub cage: Option<PathBuf>,
    /// Chromosome lengths in bp; inferred from the contact files when absent.
    #[serde(default)]
    pub chromosome_sizes: BTreeMap<String, u64>,
    pub splits: SplitAssignment,
}

impl DatasetManifest {
    /// Bins per window side.
    pub fn window_bins(&self) -> usize {
        (self.window_bp / self.resolution_bp) as usize
    }

    /// Track positions per window (both segments).
    pub fn track_length(&self) -> usize {
        (2 * self.window_bp / self.bin_track_bp) as usize
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.resolution_bp > 0, "resolution_bp must be positive");
        ensure!(self.bin_track_bp > 0, "bin_track_bp must be positive");
        ensure!(
            self.window_bp > 0 && self.window_bp.is_multiple_of(self.resolution_bp),
            "window_bp {} is not divisible by resolution_bp {}",
            self.window_bp,
            self.resolution_bp
        );
        ensure!(
            self.window_bp.is_multiple_of(self.bin_track_bp),
            "window_bp {} is not divisible by bin_track_bp {}",
            self.window_bp,
            self.bin_track_bp
        );
        ensure!(!self.tracks.is_empty(), "manifest lists no track files");
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for split in [Split::Train, Split::Validation, Split::Test] {
            let mut in_split = BTreeSet::new();
            for chrom in self.splits.chromosomes(split) {
                ensure!(
                    in_split.insert(chrom.as_str()),
                    "chromosome {chrom} listed twice in {split}"
                );
                if let Some(prev) = seen.insert(chrom.as_str(), split) {
                    return Err(Error::validation(format!(
                        "chromosome {chrom} assigned to both {prev} and {split}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.contacts.values_mut().for_each(fix);
        self.tracks.iter_mut().for_each(fix);
        self.loops.iter_mut().for_each(fix);
        if let Some(p) = self.cage.as_mut() {
            fix(p);
        }
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest = parse_manifest(&text)?;
    manifest.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(manifest)
}

/// Parses and validates a manifest document without touching the filesystem.
pub fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    let manifest: DatasetManifest =
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = toml::to_string_pretty(manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn data_lines(path: &Path) -> Result<impl Iterator<Item = Result<(usize, String)>> + '_> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .filter_map(move |(idx, line)| match line {
            Err(e) => Some(Err(Error::io(path, e))),
            Ok(l) => {
                let t = l.trim();
                if t.is_empty() || t.starts_with('#') {
                    None
                } else {
                    Some(Ok((idx + 1, t.to_string())))
                }
            }
        }))
}

fn field<T: FromStr>(path: &Path, line: usize, fields: &[&str], idx: usize, name: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    let raw = fields.get(idx).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("missing column {} ({name})", idx + 1),
    })?;
    raw.parse().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("bad {name} {raw:?}: {e}"),
    })
}

/// Reads a `bin_i bin_j count` file. Lower-triangular entries are mirrored.
pub fn parse_contact_matrix(path: impl AsRef<Path>, chromosome: &str) -> Result<Vec<SparseContactRecord>> {
    let path = path.as_ref();
    let mut records = Vec::new();
    for item in data_lines(path)? {
        let (line, text) = item?;
        let cols: Vec<&str> = text.split_whitespace().collect();
        if cols.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected 3 columns, found {}", cols.len()),
            });
        }
        let i: u32 = field(path, line, &cols, 0, "bin_i")?;
        let j: u32 = field(path, line, &cols, 1, "bin_j")?;
        let count: f64 = field(path, line, &cols, 2, "count")?;
        if !count.is_finite() || count < 0.0 {
            return Err(Error::Validation(format!(
                "{}:{line}: contact count {count} on {chromosome} must be finite and >= 0",
                path.display()
            )));
        }
        records.push(SparseContactRecord {
            bin_i: i.min(j),
            bin_j: i.max(j),
            count,
        });
    }
    sort_contacts(&mut records);
    Ok(records)
}

pub fn sort_contacts(records: &mut [SparseContactRecord]) {
    records.sort_by_key(|a| (a.bin_i, a.bin_j));
}

pub fn write_contact_matrix(records: &[SparseContactRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_lines(path, records.iter().map(|r| format!("{}\t{}\t{}", r.bin_i, r.bin_j, r.count)))
}

/// Reads a `chrom start end value` file; records must be sorted and disjoint per chromosome.
pub fn parse_track(path: impl AsRef<Path>) -> Result<Vec<TrackRecord>> {
    let path = path.as_ref();
    let mut records: Vec<TrackRecord> = Vec::new();
    for item in data_lines(path)? {
        let (line, text) = item?;
        let cols: Vec<&str> = text.split_whitespace().collect();
        if cols.len() != 4 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected 4 columns, found {}", cols.len()),
            });
        }
        let start: u64 = field(path, line, &cols, 1, "start")?;
        let end: u64 = field(path, line, &cols, 2, "end")?;
        let value: f64 = field(path, line, &cols, 3, "value")?;
        if start >= end {
            return Err(Error::Validation(format!(
                "{}:{line}: interval start {start} >= end {end}",
                path.display()
            )));
        }
        if !value.is_finite() || value < 0.0 {
            return Err(Error::Validation(format!(
                "{}:{line}: track value {value} must be finite and >= 0",
                path.display()
            )));
        }
        let rec = TrackRecord {
            interval: GenomicInterval::new(cols[0], start, end)?,
            value,
        };
        if let Some(prev) = records.last() {
            if prev.interval.chromosome == rec.interval.chromosome
                && prev.interval.end > rec.interval.start {
                    return Err(Error::Validation(format!(
                        "{}:{line}: track interval {} overlaps or precedes {}",
                        path.display(),
                        rec.interval,
                        prev.interval
                    )));
                }
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn write_track(records: &[TrackRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_lines(
        path,
        records.iter().map(|r| {
            format!(
                "{}\t{}\t{}\t{}",
                r.interval.chromosome, r.interval.start, r.interval.end, r.value
            )
        }),
    )
}

/// Reads a loop list. Columns 7 (score, `.` for none) and 8 (label) are optional.
pub fn parse_loops(path: impl AsRef<Path>) -> Result<Vec<LoopAnnotation>> {
    let path = path.as_ref();
    let mut loops = Vec::new();
    for item in data_lines(path)? {
        let (line, text) = item?;
        let cols: Vec<&str> = text.split_whitespace().collect();
        if cols.len() < 6 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected at least 6 columns, found {}", cols.len()),
            });
        }
        let a1 = GenomicInterval::new(
            cols[0],
            field(path, line, &cols, 1, "start1")?,
            field(path, line, &cols, 2, "end1")?,
        )?;
        let a2 = GenomicInterval::new(
            cols[3],
            field(path, line, &cols, 4, "start2")?,
            field(path, line, &cols, 5, "end2")?,
        )?;
        let score = match cols.get(6) {
            None | Some(&".") => None,
            Some(_) => Some(field::<f64>(path, line, &cols, 6, "score")?),
        };
        let label = match cols.get(7) {
            None => LoopLabel::Positive,
            Some(_) => field(path, line, &cols, 7, "label")?,
        };
        let (anchor1, anchor2) = if a1.start <= a2.start { (a1, a2) } else { (a2, a1) };
        let ann = LoopAnnotation {
            anchor1,
            anchor2,
            score,
            label,
        };
        ann.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        loops.push(ann);
    }
    Ok(loops)
}

pub fn write_loops(loops: &[LoopAnnotation], path: impl AsRef<Path>) -> Result<()> {
    write_lines(
        path.as_ref(),
        loops.iter().map(|l| {
            let score = l.score.map_or_else(|| ".".to_string(), |s| format!("{s:.6}"));
            format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                l.anchor1.chromosome,
                l.anchor1.start,
                l.anchor1.end,
                l.anchor2.chromosome,
                l.anchor2.start,
                l.anchor2.end,
                score,
                l.label
            )
        }),
    )
}

pub fn format_bedpe_line(call: &LoopCall) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
        call.anchor1.chromosome,
        call.anchor1.start,
        call.anchor1.end,
        call.anchor2.chromosome,
        call.anchor2.start,
        call.anchor2.end,
        call.probability,
        call.density
    )
}

pub fn write_bedpe(loops: &[LoopCall], path: impl AsRef<Path>) -> Result<()> {
    write_lines(path.as_ref(), loops.iter().map(format_bedpe_line))
}

pub fn read_bedpe(path: impl AsRef<Path>) -> Result<Vec<BedpeRecord>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for item in data_lines(path)? {
        let (line, text) = item?;
        let cols: Vec<&str> = text.split_whitespace().collect();
        if cols.len() != 8 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected 8 columns, found {}", cols.len()),
            });
        }
        out.push(BedpeRecord {
            anchor1: GenomicInterval::new(
                cols[0],
                field(path, line, &cols, 1, "start1")?,
                field(path, line, &cols, 2, "end1")?,
            )?,
            anchor2: GenomicInterval::new(
                cols[3],
                field(path, line, &cols, 4, "start2")?,
                field(path, line, &cols, 5, "end2")?,
            )?,
            score: field(path, line, &cols, 6, "score")?,
            density: field(path, line, &cols, 7, "density")?,
        });
    }
    Ok(out)
}

pub(crate) fn write_lines<I>(path: &Path, lines: I) -> Result<()>
where
    I: IntoIterator<Item = String>,
{
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn contact_matrix_basic_and_mirror() {
        let f = tmp_file("# header\n0\t0\t4.0\n0\t1\t2.0\n");
        let recs = parse_contact_matrix(f.path(), "chr1").unwrap();
        assert_eq!(
            recs,
            vec![
                SparseContactRecord { bin_i: 0, bin_j: 0, count: 4.0 },
                SparseContactRecord { bin_i: 0, bin_j: 1, count: 2.0 },
            ]
        );

        let f = tmp_file("3\t1\t2.0\n");
        let recs = parse_contact_matrix(f.path(), "chr1").unwrap();
        assert_eq!(recs, vec![SparseContactRecord { bin_i: 1, bin_j: 3, count: 2.0 }]);

        let f = tmp_file("");
        assert!(parse_contact_matrix(f.path(), "chr1").unwrap().is_empty());
    }

    #[test]
    fn contact_matrix_errors() {
        let f = tmp_file("0\t0\t1\n0\tx\t1\n");
        match parse_contact_matrix(f.path(), "chr1") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let f = tmp_file("0\t1\t-1.0\n");
        assert!(matches!(parse_contact_matrix(f.path(), "chr1"), Err(Error::Validation(_))));
    }

    #[test]
    fn track_parsing() {
        let f = tmp_file("chr1\t0\t100\t3.0\n");
        let recs = parse_track(f.path()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].value, 3.0);

        let f = tmp_file("chr1\t0\t100\t1.0\nchr1\t100\t200\t2.0\n");
        let recs = parse_track(f.path()).unwrap();
        assert_eq!(recs.iter().map(|r| r.value).collect::<Vec<_>>(), vec![1.0, 2.0]);

        let f = tmp_file("chr1\t0\t100\t1.0\nchr1\t50\t150\t2.0\n");
        let err = parse_track(f.path()).unwrap_err().to_string();
        assert!(err.contains("chr1:50-150") && err.contains("chr1:0-100"), "{err}");

        let f = tmp_file("chr1\t100\t100\t1.0\n");
        assert!(matches!(parse_track(f.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn bedpe_line_format() {
        let call = LoopCall {
            anchor1: GenomicInterval::from_bins("chr1", 10, 1, 5000).unwrap(),
            anchor2: GenomicInterval::from_bins("chr1", 20, 1, 5000).unwrap(),
            probability: 0.987654321,
            density: 2.5,
            members: 3,
        };
        assert_eq!(
            format_bedpe_line(&call),
            "chr1\t50000\t55000\tchr1\t100000\t105000\t0.987654\t2.500000"
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.bedpe");
        write_bedpe(&[], &p).unwrap();
        assert_eq!(fs::read(&p).unwrap().len(), 0);
    }

    const MANIFEST: &str = r#"
        window_bp = 250000
        tracks = ["atac.tsv", "dnase.tsv"]
        [contacts]
        chr1 = "chr1.tsv"
        [splits]
        train = ["chr1"]
        validation = ["chr10"]
    "#;

    #[test]
    fn manifest_defaults_and_errors() {
        let m = parse_manifest(MANIFEST).unwrap();
        assert_eq!(m.resolution_bp, 5000);
        assert_eq!(m.bin_track_bp, 100);
        assert_eq!(m.window_bins(), 50);
        assert_eq!(m.track_length(), 5000);

        let bad = MANIFEST.replace("window_bp = 250000", "window_bp = 250000\nresolution_bp = 7000");
        let err = parse_manifest(&bad).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");

        let bad = MANIFEST.replace(r#"validation = ["chr10"]"#, r#"validation = ["chr10"]
        test = ["chr10"]"#);
        assert!(parse_manifest(&bad).unwrap_err().to_string().contains("chr10"));

        let bad = MANIFEST.replace(r#"tracks = ["atac.tsv", "dnase.tsv"]"#, "");
        match parse_manifest(&bad) {
            Err(Error::Config(msg)) => assert!(msg.contains("tracks"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
