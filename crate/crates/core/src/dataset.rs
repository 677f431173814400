//! Labeled points, the flat point store shared by index workers, and the
//! dataset CSV format (`f0..f{d-1},label,source_id,start_s`).

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type PointId = u64;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoint {
    pub id: PointId,
    pub features: Vec<f64>,
    pub label: bool,
}

/// Where a point was extracted from: waveform id and lag-window start.
#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    pub waveform: String,
    pub start_s: f64,
}

/// Read-only, contiguous storage of a dataset slice.
///
/// Buckets hold local `u32` indices into this store; the store maps them
/// back to global ids and labels.
#[derive(Debug, Clone, Default)]
pub struct PointStore {
    d: usize,
    features: Vec<f64>,
    ids: Vec<PointId>,
    labels: Vec<bool>,
}

impl PointStore {
    pub fn new(d: usize, points: &[LabeledPoint]) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("dimension must be >= 1"));
        }
        if points.len() > u32::MAX as usize {
            return Err(Error::invalid("slice too large for 32-bit local indices"));
        }
        let mut features = Vec::with_capacity(points.len() * d);
        let mut ids = Vec::with_capacity(points.len());
        let mut labels = Vec::with_capacity(points.len());
        for p in points {
            if p.features.len() != d {
                return Err(Error::invalid(format!(
                    "point {} has dimension {}, expected {d}",
                    p.id,
                    p.features.len()
                )));
            }
            if p.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("point {} has a non-finite feature", p.id)));
            }
            features.extend_from_slice(&p.features);
            ids.push(p.id);
            labels.push(p.label);
        }
        Ok(Self { d, features, ids, labels })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    #[inline]
    pub fn point(&self, local: u32) -> &[f64] {
        let start = local as usize * self.d;
        &self.features[start..start + self.d]
    }

    #[inline]
    pub fn id(&self, local: u32) -> PointId {
        self.ids[local as usize]
    }

    #[inline]
    pub fn label(&self, local: u32) -> bool {
        self.labels[local as usize]
    }
}

/// An in-memory dataset; point ids equal row indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub d: usize,
    pub points: Vec<LabeledPoint>,
    /// Empty, or one entry per point.
    pub sources: Vec<Source>,
}

impl Dataset {
    pub fn new(d: usize, points: Vec<LabeledPoint>) -> Self {
        Self { d, points, sources: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.points.iter().filter(|p| p.label).count()
    }

    /// Rows `[start, start + count)`, ids preserved.
    pub fn slice(&self, start: usize, count: usize) -> Result<&[LabeledPoint]> {
        let end = start.checked_add(count).filter(|&e| e <= self.points.len()).ok_or_else(|| {
            Error::invalid(format!("rows [{start}, {start}+{count}) out of range for {} points", self.points.len()))
        })?;
        Ok(&self.points[start..end])
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_reader(file)
    }

    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let d = headers.iter().take_while(|h| h.starts_with('f')).count();
        if d == 0 {
            return Err(Error::Data("dataset header has no feature columns".into()));
        }
        for (i, h) in headers.iter().take(d).enumerate() {
            if h != format!("f{i}") {
                return Err(Error::Data(format!("unexpected feature column {h:?} at position {i}")));
            }
        }
        let tail: Vec<&str> = headers.iter().skip(d).collect();
        let with_source = match tail.as_slice() {
            ["label"] => false,
            ["label", "source_id", "start_s"] => true,
            _ => return Err(Error::Data(format!("unexpected dataset columns after features: {tail:?}"))),
        };

        let mut points = Vec::new();
        let mut sources = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            let bad = |what: &str| Error::Data(format!("row {}: bad {what}", row + 1));
            let features = (0..d)
                .map(|i| record[i].trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad("feature")))
                .collect::<Result<Vec<_>>>()?;
            let label = match record[d].trim() {
                "1" => true,
                "0" => false,
                _ => return Err(bad("label")),
            };
            if with_source {
                let start_s = record[d + 2].trim().parse::<f64>().map_err(|_| bad("start_s"))?;
                sources.push(Source { waveform: record[d + 1].to_string(), start_s });
            }
            points.push(LabeledPoint { id: row as PointId, features, label });
        }
        Ok(Self { d, points, sources })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path.as_ref())?;
        self.to_writer(file)
    }

    pub fn to_writer(&self, writer: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.d).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        let with_source = !self.sources.is_empty();
        if with_source {
            if self.sources.len() != self.points.len() {
                return Err(Error::Data("sources must be empty or one per point".into()));
            }
            header.push("source_id".into());
            header.push("start_s".into());
        }
        wtr.write_record(&header)?;
        for (i, p) in self.points.iter().enumerate() {
            let mut row: Vec<String> = p.features.iter().map(|v| format_value(*v)).collect();
            row.push(if p.label { "1" } else { "0" }.into());
            if with_source {
                row.push(self.sources[i].waveform.clone());
                row.push(format_value(self.sources[i].start_s));
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_value(v: f64) -> String {
    format!("{v}")
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// `1 - cos(a, b)`; 1.0 when either vector is zero.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na.sqrt() * nb.sqrt())).max(0.0)
}
