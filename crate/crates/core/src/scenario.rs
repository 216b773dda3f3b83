//! Synthetic multi-modal world and CSV ingestion.
//!
//! Each area has a latent 2-D walker. The visual stream observes its
//! position, the wireless stream its range to the area access point and a
//! log-distance signal strength, and the sensory stream its discrete
//! acceleration and heading rate. Velocity follows a damped Gaussian random
//! walk with a weak pull toward the area origin, so positions stay bounded
//! and acceleration carries position information.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    /// Visual: image-plane position (x, y).
    V,
    /// Wireless: range to the access point, signal strength.
    W,
    /// Sensory: planar acceleration (x, y), heading rate.
    S,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::V, Modality::W, Modality::S];

    pub fn raw_dim(self) -> usize {
        match self {
            Modality::V | Modality::W => 2,
            Modality::S => 3,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Modality::V => &["v_x", "v_y"],
            Modality::W => &["w_range", "w_rssi"],
            Modality::S => &["s_ax", "s_ay", "s_heading_rate"],
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Modality::V => "V",
            Modality::W => "W",
            Modality::S => "S",
        };
        f.write_str(s)
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "v" | "visual" => Ok(Modality::V),
            "w" | "wireless" => Ok(Modality::W),
            "s" | "sensory" => Ok(Modality::S),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

/// Signal strength in dB at a given range; log-distance model.
pub fn rssi_from_range(range: f64) -> f64 {
    -40.0 - 20.0 * range.max(0.1).log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub visual: f64,
    pub wireless: f64,
    pub sensory: f64,
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self {
            visual: 0.0,
            wireless: 0.0,
            sensory: 0.0,
        }
    }

    pub fn std(&self, m: Modality) -> f64 {
        match m {
            Modality::V => self.visual,
            Modality::W => self.wireless,
            Modality::S => self.sensory,
        }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            visual: 0.02,
            wireless: 0.02,
            sensory: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub areas: usize,
    pub steps: usize,
    pub window: usize,
    pub noise: NoiseConfig,
    /// One access point per area, in that area's local frame; defaults to
    /// `DEFAULT_AP` everywhere.
    pub ap_positions: Option<Vec<[f64; 2]>>,
    /// Per-area seed overrides; defaults are forked from `seed`.
    pub area_seeds: Option<Vec<u64>>,
    pub walk_std: f64,
    pub pull: f64,
    pub damping: f64,
    /// Fraction of each area's steps used for training windows.
    pub train_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            areas: 4,
            steps: 240,
            window: 8,
            noise: NoiseConfig::default(),
            ap_positions: None,
            area_seeds: None,
            walk_std: 0.1,
            pull: 0.1,
            damping: 0.2,
            train_fraction: 0.75,
        }
    }
}

/// Steps simulated and discarded before recording begins.
const BURN_IN: usize = 50;

impl WorldConfig {
    pub fn noiseless(mut self) -> Self {
        self.noise = NoiseConfig::zero();
        self
    }

    /// All violations, empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.areas == 0 {
            out.push("world.areas must be at least 1".to_string());
        }
        if self.window == 0 {
            out.push("world.window must be at least 1".to_string());
        }
        if self.steps < self.window {
            out.push(format!("world.steps ({}) must be >= world.window ({})", self.steps, self.window));
        }
        for (name, v) in [
            ("visual", self.noise.visual),
            ("wireless", self.noise.wireless),
            ("sensory", self.noise.sensory),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                out.push(format!("world.noise.{name} must be a finite non-negative number"));
            }
        }
        if !(self.walk_std >= 0.0) {
            out.push("world.walk_std must be non-negative".to_string());
        }
        if !(0.0..=1.0).contains(&self.damping) {
            out.push("world.damping must lie in [0, 1]".to_string());
        }
        if !(self.pull >= 0.0) {
            out.push("world.pull must be non-negative".to_string());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            out.push("world.train_fraction must lie in (0, 1]".to_string());
        }
        if let Some(aps) = &self.ap_positions {
            if aps.len() != self.areas {
                out.push(format!("world.ap_positions has {} entries for {} areas", aps.len(), self.areas));
            }
        }
        if let Some(seeds) = &self.area_seeds {
            if seeds.len() != self.areas {
                out.push(format!("world.area_seeds has {} entries for {} areas", seeds.len(), self.areas));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    pub fn area_seed(&self, area: usize) -> u64 {
        match &self.area_seeds {
            Some(seeds) => seeds[area],
            None => RngStream::new(self.seed).fork(area as u64).seed(),
        }
    }

    pub fn ap_position(&self, area: usize) -> [f64; 2] {
        match &self.ap_positions {
            Some(aps) => aps[area],
            None => DEFAULT_AP,
        }
    }
}

/// Default access-point placement relative to the area origin.
pub const DEFAULT_AP: [f64; 2] = [0.8, 0.6];

/// One area's aligned streams.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaSeries {
    pub ap: Option<[f64; 2]>,
    /// Ground-truth positions; evaluation only, never fed to a twin.
    pub latent: Option<Vec<[f64; 2]>>,
    /// Per modality, one raw sample per step.
    pub samples: BTreeMap<Modality, Vec<Vec<f64>>>,
}

impl AreaSeries {
    pub fn steps(&self) -> usize {
        self.samples.values().next().map_or(0, Vec::len)
    }

    /// Number of raw sensor values (excluding latent and timestamps).
    pub fn raw_values(&self) -> usize {
        self.samples.values().map(|s| s.iter().map(Vec::len).sum::<usize>()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalDataset {
    pub areas: Vec<AreaSeries>,
}

impl MultiModalDataset {
    pub fn modalities(&self) -> Vec<Modality> {
        self.areas
            .first()
            .map(|a| a.samples.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn steps(&self) -> usize {
        self.areas.iter().map(AreaSeries::steps).min().unwrap_or(0)
    }

    /// Bytes needed to ship every raw sample once at 8 bytes per value.
    pub fn raw_bytes(&self) -> u64 {
        self.areas.iter().map(|a| a.raw_values() as u64 * 8).sum()
    }

    /// Replaces modality `to` with a verbatim copy of `from` (dims must agree).
    pub fn with_copied_modality(mut self, from: Modality, to: Modality) -> Result<Self> {
        if from.raw_dim() != to.raw_dim() {
            return Err(Error::Config(format!("cannot copy {from} into {to}: raw dims differ")));
        }
        for area in &mut self.areas {
            let src = area
                .samples
                .get(&from)
                .cloned()
                .ok_or_else(|| Error::Data(format!("modality {from} missing")))?;
            area.samples.insert(to, src);
        }
        Ok(self)
    }
}

pub fn generate_world(cfg: &WorldConfig) -> Result<MultiModalDataset> {
    cfg.validate()?;
    let areas = (0..cfg.areas).map(|i| generate_area(cfg, i)).collect();
    Ok(MultiModalDataset { areas })
}

fn generate_area(cfg: &WorldConfig, area: usize) -> AreaSeries {
    let mut rng = RngStream::new(cfg.area_seed(area));
    let ap = cfg.ap_position(area);
    let total = BURN_IN + cfg.steps;
    let mut positions = Vec::with_capacity(total);
    let (mut p, mut v) = ([0.0f64; 2], [0.0f64; 2]);
    for _ in 0..total {
        for k in 0..2 {
            v[k] = (1.0 - cfg.damping) * v[k] - cfg.pull * p[k] + rng.normal(0.0, cfg.walk_std);
            p[k] += v[k];
        }
        positions.push(p);
    }
    let heading = |t: usize| {
        let (a, b) = (positions[t - 1], positions[t]);
        (b[1] - a[1]).atan2(b[0] - a[0])
    };

    let mut samples: BTreeMap<Modality, Vec<Vec<f64>>> = Modality::ALL.iter().map(|&m| (m, Vec::new())).collect();
    let mut latent = Vec::with_capacity(cfg.steps);
    for t in BURN_IN..total {
        let pos = positions[t];
        latent.push(pos);
        let nv = cfg.noise.visual;
        let visual = vec![pos[0] + rng.normal(0.0, nv), pos[1] + rng.normal(0.0, nv)];

        let range = ((pos[0] - ap[0]).powi(2) + (pos[1] - ap[1]).powi(2)).sqrt();
        let nw = cfg.noise.wireless;
        let wireless = vec![range + rng.normal(0.0, nw), rssi_from_range(range) + rng.normal(0.0, nw)];

        let (p1, p2) = (positions[t - 1], positions[t - 2]);
        let accel = [pos[0] - 2.0 * p1[0] + p2[0], pos[1] - 2.0 * p1[1] + p2[1]];
        let turn = wrap_angle(heading(t) - heading(t - 1));
        let ns = cfg.noise.sensory;
        let sensory = vec![
            accel[0] + rng.normal(0.0, ns),
            accel[1] + rng.normal(0.0, ns),
            turn + rng.normal(0.0, ns),
        ];

        samples.get_mut(&Modality::V).unwrap().push(visual);
        samples.get_mut(&Modality::W).unwrap().push(wireless);
        samples.get_mut(&Modality::S).unwrap().push(sensory);
    }
    AreaSeries {
        ap: Some(ap),
        latent: Some(latent),
        samples,
    }
}

/// Wraps to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut x = a % TAU;
    if x <= -PI {
        x += TAU;
    } else if x > PI {
        x -= TAU;
    }
    x
}

/// One training example: per-modality windows, channel-major
/// (`window[c * w + t]` is channel `c` at offset `t`).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub area: usize,
    pub start: usize,
    pub windows: BTreeMap<Modality, Vec<f64>>,
}

impl Example {
    pub fn get(&self, m: Modality) -> Result<&[f64]> {
        self.windows
            .get(&m)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("example lacks modality {m}")))
    }
}

fn window_range(area: &AreaSeries, area_idx: usize, w: usize, from: usize, to: usize) -> Vec<Example> {
    if to < from + w {
        return Vec::new();
    }
    (from..=to - w)
        .map(|start| {
            let windows = area
                .samples
                .iter()
                .map(|(&m, seq)| {
                    let dim = m.raw_dim();
                    let mut buf = Vec::with_capacity(dim * w);
                    for c in 0..dim {
                        buf.extend(seq[start..start + w].iter().map(|s| s[c]));
                    }
                    (m, buf)
                })
                .collect();
            Example {
                area: area_idx,
                start,
                windows,
            }
        })
        .collect()
}

/// All windows of length `w`, area by area, `steps − w + 1` per area.
pub fn window(ds: &MultiModalDataset, w: usize) -> Result<Vec<Example>> {
    if w == 0 {
        return Err(Error::InvalidInput("window length must be positive".into()));
    }
    let steps = ds.steps();
    if w > steps {
        return Err(Error::shape("window length", steps, w));
    }
    Ok(ds
        .areas
        .iter()
        .enumerate()
        .flat_map(|(i, a)| window_range(a, i, w, 0, a.steps()))
        .collect())
}

/// Per-modality, per-channel affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: BTreeMap<Modality, Vec<f64>>,
    pub std: BTreeMap<Modality, Vec<f64>>,
}

impl Standardizer {
    /// Statistics over the first `train_steps` steps of every area.
    pub fn fit(ds: &MultiModalDataset, train_steps: usize) -> Result<Self> {
        let mut mean = BTreeMap::new();
        let mut std = BTreeMap::new();
        for m in ds.modalities() {
            let dim = m.raw_dim();
            let mut sum = vec![0.0; dim];
            let mut sq = vec![0.0; dim];
            let mut count = 0usize;
            for area in &ds.areas {
                for s in area.samples[&m].iter().take(train_steps) {
                    for c in 0..dim {
                        sum[c] += s[c];
                    }
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::EmptyDataset);
            }
            let mu: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            for area in &ds.areas {
                for s in area.samples[&m].iter().take(train_steps) {
                    for c in 0..dim {
                        sq[c] += (s[c] - mu[c]).powi(2);
                    }
                }
            }
            let sd: Vec<f64> = sq
                .iter()
                .map(|v| {
                    let s = (v / count as f64).sqrt();
                    if s > 1e-12 {
                        s
                    } else {
                        1.0
                    }
                })
                .collect();
            mean.insert(m, mu);
            std.insert(m, sd);
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, ex: &mut Example, w: usize) {
        for (m, buf) in ex.windows.iter_mut() {
            let (mu, sd) = (&self.mean[m], &self.std[m]);
            for (c, chunk) in buf.chunks_mut(w).enumerate() {
                chunk.iter_mut().for_each(|v| *v = (*v - mu[c]) / sd[c]);
            }
        }
    }
}

/// Standardized train/test windows, grouped by area.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub window: usize,
    pub train: Vec<Vec<Example>>,
    pub test: Vec<Vec<Example>>,
    pub standardizer: Standardizer,
}

impl PreparedData {
    pub fn modalities(&self) -> Vec<Modality> {
        self.train
            .iter()
            .flatten()
            .next()
            .map(|e| e.windows.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn test_flat(&self) -> Vec<&Example> {
        self.test.iter().flatten().collect()
    }

    pub fn train_flat(&self) -> Vec<&Example> {
        self.train.iter().flatten().collect()
    }
}

/// Splits every area in time (train steps first), windows both parts and
/// standardizes with training statistics.
pub fn prepare(ds: &MultiModalDataset, w: usize, train_fraction: f64) -> Result<PreparedData> {
    let steps = ds.steps();
    if steps == 0 {
        return Err(Error::EmptyDataset);
    }
    if w == 0 || w > steps {
        return Err(Error::shape("window length", steps, w));
    }
    let cut = ((steps as f64 * train_fraction).floor() as usize).clamp(w, steps);
    let standardizer = Standardizer::fit(ds, cut)?;
    let split = |from: usize, to: usize| -> Vec<Vec<Example>> {
        ds.areas
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let mut exs = window_range(a, i, w, from, to.min(a.steps()));
                exs.iter_mut().for_each(|e| standardizer.apply(e, w));
                exs
            })
            .collect()
    };
    let train = split(0, cut);
    let test = split(cut, steps);
    Ok(PreparedData {
        window: w,
        train,
        test,
        standardizer,
    })
}

const LATENT_COLUMNS: [&str; 2] = ["latent_x", "latent_y"];

fn fmt_f64(v: f64) -> String {
    // shortest representation that parses back to the same bits
    format!("{v:?}")
}

/// Writes one area as CSV: `step`, optional latent columns, then the
/// present modalities' columns in V, W, S order.
pub fn write_area_csv(area: &AreaSeries, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header = vec!["step"];
    if area.latent.is_some() {
        header.extend(LATENT_COLUMNS);
    }
    for m in area.samples.keys() {
        header.extend(m.columns());
    }
    wtr.write_record(&header).map_err(|e| csv_io(path, e))?;
    for t in 0..area.steps() {
        let mut row = vec![t.to_string()];
        if let Some(lat) = &area.latent {
            row.push(fmt_f64(lat[t][0]));
            row.push(fmt_f64(lat[t][1]));
        }
        for seq in area.samples.values() {
            row.extend(seq[t].iter().map(|&v| fmt_f64(v)));
        }
        wtr.write_record(&row).map_err(|e| csv_io(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}

/// Reads one area from CSV. Modalities are detected from the header; a
/// modality must supply all of its columns.
pub fn load_csv(path: &Path) -> Result<MultiModalDataset> {
    let area = read_area_csv(path)?;
    Ok(MultiModalDataset { areas: vec![area] })
}

/// Reads several area files into one dataset; modality sets must agree.
pub fn load_csv_areas(paths: &[impl AsRef<Path>]) -> Result<MultiModalDataset> {
    let mut areas = Vec::with_capacity(paths.len());
    for p in paths {
        let area = read_area_csv(p.as_ref())?;
        if let Some(first) = areas.first() {
            let first: &AreaSeries = first;
            if first.samples.keys().ne(area.samples.keys()) {
                return Err(Error::Data(format!(
                    "{} has a different modality set than the first area",
                    p.as_ref().display()
                )));
            }
        }
        areas.push(area);
    }
    if areas.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(MultiModalDataset { areas })
}

fn read_area_csv(path: &Path) -> Result<AreaSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_io(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let step_col = col("step").ok_or(Error::Parse {
        line: 1,
        message: "missing `step` column".into(),
    })?;
    let latent_cols = match (col(LATENT_COLUMNS[0]), col(LATENT_COLUMNS[1])) {
        (Some(x), Some(y)) => Some([x, y]),
        (None, None) => None,
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "latent columns must appear together".into(),
            })
        }
    };
    let mut modal_cols = BTreeMap::new();
    for m in Modality::ALL {
        let found: Vec<Option<usize>> = m.columns().iter().map(|c| col(c)).collect();
        if found.iter().all(Option::is_some) {
            modal_cols.insert(m, found.into_iter().map(Option::unwrap).collect::<Vec<_>>());
        } else if found.iter().any(Option::is_some) {
            return Err(Error::Parse {
                line: 1,
                message: format!("modality {m} is missing some of its columns {:?}", m.columns()),
            });
        }
    }
    if modal_cols.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no modality columns found".into(),
        });
    }

    let mut latent = latent_cols.map(|_| Vec::new());
    let mut samples: BTreeMap<Modality, Vec<Vec<f64>>> = modal_cols.keys().map(|&m| (m, Vec::new())).collect();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        let num = |c: usize| -> Result<f64> {
            let raw = rec[c].trim();
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                line,
                message: format!("column {:?}: cannot parse {raw:?} as a number", &headers[c]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("column {:?}: non-finite value", &headers[c]),
                });
            }
            Ok(v)
        };
        let step: u64 = rec[step_col].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("step {:?} is not a non-negative integer", &rec[step_col]),
        })?;
        if step != i as u64 {
            return Err(Error::Alignment {
                line,
                expected: i as u64,
                found: step,
            });
        }
        if let (Some(lat), Some([x, y])) = (latent.as_mut(), latent_cols) {
            lat.push([num(x)?, num(y)?]);
        }
        for (m, cols) in &modal_cols {
            let s = cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?;
            samples.get_mut(m).unwrap().push(s);
        }
    }
    if samples.values().next().is_none_or(Vec::is_empty) {
        return Err(Error::EmptyDataset);
    }
    Ok(AreaSeries {
        ap: None,
        latent,
        samples,
    })
}
