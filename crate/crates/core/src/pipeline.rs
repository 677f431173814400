//! Per-beat MAP series to labeled lag-window datasets, and a synthetic
//! ABP-like waveform generator for desk-scale experiments.
//!
//! A window starting at `t` spans a lag part `[t, t + l)` split into `d`
//! equal subwindows (the features are the mean MAP of the valid beats in
//! each) and a condition part `[t + l, t + l + c)` that carries the label:
//! positive when at least `ahe_fraction` of its valid beats are below
//! `ahe_threshold_mmhg`.
//!
//! Waveform files are CSV with header `t_s,map_mmhg`, one row per beat.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dataset::{Dataset, LabeledPoint, Source};
use crate::error::{Error, Result};

pub const MIN_VALID_MAP: f64 = 20.0;
pub const MAX_VALID_MAP: f64 = 200.0;
pub const MIN_BEAT_INTERVAL_S: f64 = 0.3;
pub const MAX_BEAT_INTERVAL_S: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeatRecord {
    pub t: f64,
    pub map: f64,
    pub valid: bool,
}

/// Simplified beat-validity predicate: plausible MAP and a plausible
/// interval to the previous beat.
pub fn is_valid_beat(t: f64, map: f64, prev_t: Option<f64>) -> bool {
    if !(MIN_VALID_MAP..=MAX_VALID_MAP).contains(&map) {
        return false;
    }
    match prev_t {
        None => true,
        Some(p) => (MIN_BEAT_INTERVAL_S..=MAX_BEAT_INTERVAL_S).contains(&(t - p)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub id: String,
    pub beats: Vec<BeatRecord>,
}

impl Waveform {
    /// Builds a waveform from `(t, map)` pairs, computing beat validity.
    pub fn from_series(id: impl Into<String>, series: &[(f64, f64)]) -> Result<Self> {
        let id = id.into();
        let mut beats = Vec::with_capacity(series.len());
        let mut prev: Option<f64> = None;
        for &(t, map) in series {
            if !t.is_finite() || !map.is_finite() {
                return Err(Error::Data(format!("{id}: non-finite beat at t={t}")));
            }
            if prev.is_some_and(|p| t <= p) {
                return Err(Error::Data(format!("{id}: beat times not strictly increasing at t={t}")));
            }
            beats.push(BeatRecord { t, map, valid: is_valid_beat(t, map, prev) });
            prev = Some(t);
        }
        Ok(Self { id, beats })
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("waveform").to_string();
        let reader = BufReader::new(File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
        let mut lines = reader.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == "t_s,map_mmhg" => {}
            _ => return Err(Error::Data(format!("{}: expected header t_s,map_mmhg", path.display()))),
        }
        let mut series = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Data(format!("{}: bad row {}", path.display(), n + 2));
            let (t, map) = line.split_once(',').ok_or_else(bad)?;
            series.push((t.trim().parse().map_err(|_| bad())?, map.trim().parse().map_err(|_| bad())?));
        }
        Self::from_series(id, &series)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "t_s,map_mmhg")?;
        for b in &self.beats {
            writeln!(w, "{:.3},{:.2}", b.t, b.map)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn end(&self) -> f64 {
        self.beats.last().map_or(0.0, |b| b.t)
    }

    /// Beats with `from <= t < to`.
    pub fn range(&self, from: f64, to: f64) -> &[BeatRecord] {
        let lo = self.beats.partition_point(|b| b.t < from);
        let hi = self.beats.partition_point(|b| b.t < to);
        &self.beats[lo..hi.max(lo)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSpec {
    /// Lag window length, seconds.
    pub lag_s: f64,
    /// Condition window length, seconds.
    pub cond_s: f64,
    pub d: usize,
    pub ahe_threshold_mmhg: f64,
    pub ahe_fraction: f64,
    pub step_fraction: f64,
}

impl WindowSpec {
    pub fn new(lag_s: f64, cond_s: f64) -> Self {
        Self { lag_s, cond_s, d: 30, ahe_threshold_mmhg: 60.0, ahe_fraction: 0.90, step_fraction: 0.10 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lag_s > 0.0 && self.cond_s > 0.0 && self.lag_s.is_finite() && self.cond_s.is_finite()) {
            return Err(Error::invalid("lag and condition lengths must be positive"));
        }
        if self.d == 0 {
            return Err(Error::invalid("d must be >= 1"));
        }
        if !(self.ahe_fraction > 0.0 && self.ahe_fraction <= 1.0) {
            return Err(Error::invalid("ahe_fraction must be in (0, 1]"));
        }
        if !(self.step_fraction > 0.0 && self.step_fraction <= 1.0) {
            return Err(Error::invalid("step_fraction must be in (0, 1]"));
        }
        Ok(())
    }

    pub fn total_s(&self) -> f64 {
        self.lag_s + self.cond_s
    }

    pub fn subwindow_s(&self) -> f64 {
        self.lag_s / self.d as f64
    }

    pub fn step_s(&self) -> f64 {
        self.step_fraction * self.total_s()
    }
}

/// AHE label of a condition window. `None` when it holds no valid beat.
pub fn label_condition_window(beats: &[BeatRecord], spec: &WindowSpec) -> Option<bool> {
    let (mut valid, mut low) = (0usize, 0usize);
    for b in beats.iter().filter(|b| b.valid) {
        valid += 1;
        if b.map < spec.ahe_threshold_mmhg {
            low += 1;
        }
    }
    (valid > 0).then(|| low as f64 / valid as f64 >= spec.ahe_fraction)
}

/// Mean valid-beat MAP of each of the `d` subwindows of `[start, start + l)`.
/// `None` when any subwindow has no valid beat.
pub fn extract_features(beats: &[BeatRecord], start: f64, spec: &WindowSpec) -> Option<Vec<f64>> {
    let d = spec.d;
    let width = spec.subwindow_s();
    let edge = |i: usize| start + i as f64 * width;
    let mut sums = vec![0.0; d];
    let mut counts = vec![0usize; d];
    for b in beats.iter().filter(|b| b.valid && b.t >= start && b.t < start + spec.lag_s) {
        let mut i = (((b.t - start) / width).floor() as usize).min(d - 1);
        if b.t < edge(i) && i > 0 {
            i -= 1;
        } else if i + 1 < d && b.t >= edge(i + 1) {
            i += 1;
        }
        sums[i] += b.map;
        counts[i] += 1;
    }
    if counts.contains(&0) {
        return None;
    }
    Some(sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub features: Vec<f64>,
    pub label: bool,
    pub source: Source,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractionReport {
    /// Start time of every attempted window.
    pub attempted: Vec<f64>,
    pub extracted: usize,
    pub positives: usize,
    pub rejected_empty_subwindow: usize,
    pub rejected_condition: usize,
}

impl ExtractionReport {
    pub fn merge(&mut self, other: ExtractionReport) {
        self.attempted.extend(other.attempted);
        self.extracted += other.extracted;
        self.positives += other.positives;
        self.rejected_empty_subwindow += other.rejected_empty_subwindow;
        self.rejected_condition += other.rejected_condition;
    }
}

/// Rolls a window over `wave` from `t = 0`.
///
/// After a positive window the next one starts right after it (`t += l + c`);
/// after a negative or rejected window it moves by `step_fraction * (l + c)`.
/// Stops once the window would extend past the last beat.
pub fn rolling_extract(wave: &Waveform, spec: &WindowSpec) -> Result<(Vec<WindowSample>, ExtractionReport)> {
    spec.validate()?;
    let end = wave.end();
    let total = spec.total_s();
    let step = spec.step_s();
    let mut report = ExtractionReport::default();
    let mut samples = Vec::new();
    let mut t = 0.0;
    while t + total <= end {
        report.attempted.push(t);
        let features = extract_features(wave.range(t, t + spec.lag_s), t, spec);
        let label = label_condition_window(wave.range(t + spec.lag_s, t + total), spec);
        match (features, label) {
            (None, _) => {
                report.rejected_empty_subwindow += 1;
                t += step;
            }
            (Some(_), None) => {
                report.rejected_condition += 1;
                t += step;
            }
            (Some(features), Some(label)) => {
                report.extracted += 1;
                samples.push(WindowSample { features, label, source: Source { waveform: wave.id.clone(), start_s: t } });
                if label {
                    report.positives += 1;
                    t += total;
                } else {
                    t += step;
                }
            }
        }
    }
    Ok((samples, report))
}

/// Extracts every waveform and concatenates the samples in input order.
pub fn extract_dataset(waves: &[Waveform], spec: &WindowSpec) -> Result<(Dataset, ExtractionReport)> {
    let results = waves.par_iter().map(|w| rolling_extract(w, spec)).collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset { d: spec.d, points: Vec::new(), sources: Vec::new() };
    let mut report = ExtractionReport::default();
    for (samples, r) in results {
        report.merge(r);
        for s in samples {
            let id = ds.points.len() as u64;
            ds.points.push(LabeledPoint { id, features: s.features, label: s.label });
            ds.sources.push(s.source);
        }
    }
    Ok((ds, report))
}

/// Waveform CSV files of `dir`, sorted by file name.
pub fn waveform_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_waveforms(dir: impl AsRef<Path>) -> Result<Vec<Waveform>> {
    waveform_files(dir)?.par_iter().map(Waveform::read_csv).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub waveforms: usize,
    pub duration_s: f64,
    /// Probability that a hypotensive dip starts in a given block.
    pub ahe_rate: f64,
    /// Block length in seconds; dips last one to four blocks.
    pub block_s: f64,
}

impl SyntheticConfig {
    pub fn new(seed: u64, waveforms: usize, hours: f64, ahe_rate: f64) -> Self {
        Self { seed, waveforms, duration_s: hours * 3600.0, ahe_rate, block_s: 300.0 }
    }
}

const BASELINE_LOW: f64 = 65.0;
const BASELINE_HIGH: f64 = 110.0;
const DIP_LEVEL: f64 = 50.0;
const PRE_DIP_LEVEL: f64 = 64.0;

fn round_to(v: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (v * f).round() / f
}

/// One synthetic waveform.
///
/// Beats arrive at about 1 Hz with jitter. MAP follows a random walk
/// reflected into `[65, 110]` mmHg plus measurement noise. With probability
/// `ahe_rate` per block a hypotensive episode starts: MAP drifts down over
/// the preceding block, then sits around 50 mmHg for one to four
/// blocks. A small fraction of beats are artifacts (MAP 250).
pub fn generate_waveform(cfg: &SyntheticConfig, index: usize) -> Result<Waveform> {
    if !(0.0..=1.0).contains(&cfg.ahe_rate) {
        return Err(Error::invalid(format!("ahe_rate must be in [0, 1], got {}", cfg.ahe_rate)));
    }
    if !(cfg.block_s > 0.0 && cfg.duration_s >= 0.0) {
        return Err(Error::invalid("block length must be positive and duration non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let blocks = (cfg.duration_s / cfg.block_s).ceil() as usize;
    let mut episodes: Vec<(f64, f64)> = Vec::new();
    for b in 0..blocks {
        let block_start = b as f64 * cfg.block_s;
        let roll: f64 = rng.random();
        if roll < cfg.ahe_rate && episodes.last().is_none_or(|&(_, end)| block_start >= end + cfg.block_s) {
            let start = block_start + rng.random_range(0.0..0.1) * cfg.block_s;
            let len = cfg.block_s * rng.random_range(1.0..4.0);
            episodes.push((start, start + len));
        }
    }

    let walk = Normal::new(0.0, 0.4).expect("valid sigma");
    let noise = Normal::new(0.0, 1.5).expect("valid sigma");
    let mut baseline = rng.random_range(72.0..100.0);
    let mut t = rng.random_range(0.0..0.5);
    let mut series = Vec::with_capacity(cfg.duration_s as usize + 1);
    let mut ep = 0;
    while t < cfg.duration_s {
        baseline += walk.sample(&mut rng);
        if baseline < BASELINE_LOW {
            baseline = 2.0 * BASELINE_LOW - baseline;
        } else if baseline > BASELINE_HIGH {
            baseline = 2.0 * BASELINE_HIGH - baseline;
        }
        while ep < episodes.len() && t >= episodes[ep].1 {
            ep += 1;
        }
        let level = match episodes.get(ep) {
            Some(&(start, end)) if t >= start && t < end => DIP_LEVEL,
            Some(&(start, _)) if t >= start - cfg.block_s => {
                let frac = (t - (start - cfg.block_s)) / cfg.block_s;
                baseline + (PRE_DIP_LEVEL - baseline) * frac
            }
            _ => baseline,
        };
        let map = if rng.random::<f64>() < 0.002 { 250.0 } else { level + noise.sample(&mut rng) };
        series.push((round_to(t, 3), round_to(map, 2)));
        t += 1.0 + rng.random_range(-0.15..0.15);
    }
    Waveform::from_series(format!("wave_{index:05}"), &series)
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Waveform>> {
    (0..cfg.waveforms).into_par_iter().map(|i| generate_waveform(cfg, i)).collect()
}

/// Writes `wave_NNNNN.csv` files into `dir` (created if missing).
pub fn write_waveforms(waves: &[Waveform], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    waves
        .par_iter()
        .map(|w| {
            let path = dir.join(format!("{}.csv", w.id));
            w.write_csv(&path)?;
            Ok(path)
        })
        .collect()
}
