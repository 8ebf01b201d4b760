//! Binary dataset archive.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! header : "MXH1" | version u32 | H u32 | W u32 | L1 u32 | O u32
//! record : body_len u64 | body
//! body   : chrom_len u16 | chrom bytes
//!          | x_start u64 | x_end u64 | y_start u64 | y_end u64 | resolution_bp u64
//!          | H*W f64 (row-major contact map)
//!          | L1*O f64 (position-major track)
//!          | target_tag u8 | payload
//! target : 0 none | 1 loop: label u8 | 2 cage: n u32, n f64 | 3 contact: n u32, n f64
//! ```
//!
//! Records follow the header back to back until end of file.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use super::{ContactMapWindow, SamplePair, SampleTarget, TrackWindow};
use crate::error::{ensure, Error, Result};
use crate::genomic_io::GenomicInterval;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"MXH1";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchiveHeader {
    pub height: u32,
    pub width: u32,
    pub track_length: u32,
    pub channels: u32,
}

impl ArchiveHeader {
    pub fn of(sample: &SamplePair) -> Self {
        Self {
            height: sample.contact.size as u32,
            width: sample.contact.size as u32,
            track_length: sample.track.length as u32,
            channels: sample.track.channels as u32,
        }
    }
}

pub struct ArchiveWriter {
    path: PathBuf,
    out: BufWriter<File>,
    header: ArchiveHeader,
    records: usize,
}

impl ArchiveWriter {
    pub fn create(path: impl AsRef<Path>, header: ArchiveHeader) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        let mut buf = Vec::with_capacity(24);
        buf.extend_from_slice(ARCHIVE_MAGIC);
        for v in [ARCHIVE_VERSION, header.height, header.width, header.track_length, header.channels] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out,
            header,
            records: 0,
        })
    }

    pub fn push(&mut self, sample: &SamplePair) -> Result<()> {
        let h = ArchiveHeader::of(sample);
        ensure!(
            h == self.header,
            "sample shape {h:?} does not match archive header {:?}",
            self.header
        );
        let body = encode_body(sample)?;
        self.out
            .write_all(&(body.len() as u64).to_le_bytes())
            .and_then(|_| self.out.write_all(&body))
            .map_err(|e| Error::io(&self.path, e))?;
        self.records += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<usize> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.records)
    }
}

fn encode_body(s: &SamplePair) -> Result<Vec<u8>> {
    let c = &s.contact;
    ensure!(
        c.origin_x.chromosome == c.origin_y.chromosome,
        "window axes on different chromosomes"
    );
    let chrom = c.origin_x.chromosome.as_bytes();
    ensure!(chrom.len() <= u16::MAX as usize, "chromosome name too long");
    let mut b = Vec::with_capacity(64 + 8 * (c.values.len() + s.track.values.len()));
    b.extend_from_slice(&(chrom.len() as u16).to_le_bytes());
    b.extend_from_slice(chrom);
    for v in [c.origin_x.start, c.origin_x.end, c.origin_y.start, c.origin_y.end, c.resolution_bp] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    c.values.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
    s.track.values.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
    let put_vec = |tag: u8, xs: &[f64], b: &mut Vec<u8>| {
        b.push(tag);
        b.extend_from_slice(&(xs.len() as u32).to_le_bytes());
        xs.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
    };
    match &s.target {
        SampleTarget::None => b.push(0),
        SampleTarget::LoopLabel(l) => {
            b.push(1);
            b.push(*l);
        }
        SampleTarget::Cage(v) => put_vec(2, v, &mut b),
        SampleTarget::Contact(v) => put_vec(3, v, &mut b),
    }
    Ok(b)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err("record body truncated".into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        Ok(self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn decode_body(body: &[u8], header: &ArchiveHeader) -> std::result::Result<SamplePair, String> {
    let mut c = Cursor { buf: body, pos: 0 };
    let n = c.u16()? as usize;
    let chrom = String::from_utf8(c.take(n)?.to_vec()).map_err(|e| e.to_string())?;
    let (xs, xe, ys, ye, res) = (c.u64()?, c.u64()?, c.u64()?, c.u64()?, c.u64()?);
    let size = header.height as usize;
    let values = c.f64s(size * header.width as usize)?;
    let track_len = header.track_length as usize;
    let channels = header.channels as usize;
    let track = c.f64s(track_len * channels)?;
    let target = match c.u8()? {
        0 => SampleTarget::None,
        1 => SampleTarget::LoopLabel(c.u8()?),
        tag @ (2 | 3) => {
            let len = c.u32()? as usize;
            let v = c.f64s(len)?;
            if tag == 2 {
                SampleTarget::Cage(v)
            } else {
                SampleTarget::Contact(v)
            }
        }
        t => return Err(format!("unknown target tag {t}")),
    };
    if c.pos != body.len() {
        return Err("trailing bytes in record body".into());
    }
    let iv = |s, e| GenomicInterval::new(chrom.clone(), s, e).map_err(|e| e.to_string());
    Ok(SamplePair {
        contact: ContactMapWindow {
            values,
            size,
            origin_x: iv(xs, xe)?,
            origin_y: iv(ys, ye)?,
            resolution_bp: res,
        },
        track: TrackWindow {
            values: track,
            length: track_len,
            channels,
        },
        target,
    })
}

pub struct ArchiveReader {
    path: PathBuf,
    input: BufReader<File>,
    header: ArchiveHeader,
    index: usize,
}

impl ArchiveReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut input = BufReader::new(file);
        let mut head = [0u8; 24];
        input.read_exact(&mut head).map_err(|e| Error::io(&path, e))?;
        let bad = |message: String| Error::Parse {
            path: path.clone(),
            line: 0,
            message,
        };
        if &head[..4] != ARCHIVE_MAGIC {
            return Err(bad("not a dataset archive (bad magic)".into()));
        }
        let word = |k: usize| u32::from_le_bytes(head[4 + 4 * k..8 + 4 * k].try_into().unwrap());
        if word(0) != ARCHIVE_VERSION {
            return Err(bad(format!("unsupported archive version {}", word(0))));
        }
        let header = ArchiveHeader {
            height: word(1),
            width: word(2),
            track_length: word(3),
            channels: word(4),
        };
        if header.height != header.width {
            return Err(bad("non-square contact windows".into()));
        }
        Ok(Self {
            path,
            input,
            header,
            index: 0,
        })
    }

    pub fn header(&self) -> ArchiveHeader {
        self.header
    }
}

impl Iterator for ArchiveReader {
    type Item = Result<SamplePair>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut len = [0u8; 8];
        match self.input.read_exact(&mut len) {
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => return None,
            Err(e) => return Some(Err(Error::io(&self.path, e))),
            Ok(()) => {}
        }
        let mut body = vec![0u8; u64::from_le_bytes(len) as usize];
        if let Err(e) = self.input.read_exact(&mut body) {
            return Some(Err(Error::io(&self.path, e)));
        }
        self.index += 1;
        Some(decode_body(&body, &self.header).map_err(|message| Error::Parse {
            path: self.path.clone(),
            line: self.index,
            message: format!("record {}: {message}", self.index),
        }))
    }
}

pub fn write_archive(path: impl AsRef<Path>, samples: &[SamplePair]) -> Result<usize> {
    ensure!(!samples.is_empty(), "cannot infer archive shape from an empty sample list");
    let mut w = ArchiveWriter::create(path, ArchiveHeader::of(&samples[0]))?;
    for s in samples {
        w.push(s)?;
    }
    w.finish()
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<Vec<SamplePair>> {
    ArchiveReader::open(path)?.collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(target: SampleTarget) -> SamplePair {
        let iv = GenomicInterval::new("chrS", 10_000, 20_000).unwrap();
        SamplePair {
            contact: ContactMapWindow {
                values: vec![0.5, 1.0, 1.0, f64::MIN_POSITIVE],
                size: 2,
                origin_x: iv.clone(),
                origin_y: GenomicInterval::new("chrS", 30_000, 40_000).unwrap(),
                resolution_bp: 5000,
            },
            track: TrackWindow {
                values: (0..8).map(|v| v as f64 / 3.0).collect(),
                length: 4,
                channels: 2,
            },
            target,
        }
    }

    #[test]
    fn round_trip_all_targets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mxh");
        let samples = vec![
            sample(SampleTarget::None),
            sample(SampleTarget::LoopLabel(1)),
            sample(SampleTarget::Cage(vec![1.5, -2.0, 3.25, 0.0])),
            sample(SampleTarget::Contact(vec![0.1; 4])),
        ];
        assert_eq!(write_archive(&path, &samples).unwrap(), 4);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"MXH1");
        assert_eq!(read_archive(&path).unwrap(), samples);
    }

    #[test]
    fn rejects_bad_magic_and_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mxh");
        std::fs::write(&path, [0u8; 24]).unwrap();
        assert!(ArchiveReader::open(&path).is_err());

        let mut w = ArchiveWriter::create(&path, ArchiveHeader::of(&sample(SampleTarget::None))).unwrap();
        let mut other = sample(SampleTarget::None);
        other.track.length = 2;
        other.track.values.truncate(4);
        assert!(w.push(&other).is_err());
    }
}
