//! Plot samples, manifests, preprocessing, splitting, voxel features, and a
//! synthetic forest generator with allometric ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{quantize_with_counts, SparseTensor};
use crate::tensor::DenseTensor;

/// Minimum height above the local minimum a sample must exceed.
pub const MIN_HEIGHT: f64 = 1.3;
/// Largest allowed time gap for validation and test samples, years.
pub const MAX_EVAL_GAP: f64 = 1.0;
/// Largest allowed time gap for training samples, years.
pub const MAX_TRAIN_GAP: f64 = 9.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Agb,
    Volume,
}

impl Target {
    pub fn of(self, s: &PlotSample) -> f64 {
        match self {
            Target::Agb => s.agb,
            Target::Volume => s.volume,
        }
    }

    pub fn units(self) -> &'static str {
        match self {
            Target::Agb => "Mg/ha",
            Target::Volume => "m3/ha",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Target::Agb => "agb",
            Target::Volume => "volume",
        })
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agb" => Ok(Target::Agb),
            "volume" => Ok(Target::Volume),
            other => Err(Error::Config(format!("unknown target {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotSample {
    pub plot_id: String,
    /// Meters.
    pub points: Vec<[f64; 3]>,
    pub intensity: Option<Vec<f64>>,
    /// Mg/ha.
    pub agb: f64,
    /// m³/ha.
    pub volume: f64,
    pub split: Split,
    pub time_gap_years: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub plot_id: String,
    pub points_path: PathBuf,
    pub agb: f64,
    pub volume: f64,
    pub split: Split,
    pub time_gap_years: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory point paths are relative to.
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    /// Checks label signs, time-gap limits, and split leakage. Row numbers in
    /// messages are 1-based data rows.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            let row = i + 1;
            if !(r.agb >= 0.0) || !r.agb.is_finite() {
                problems.push(format!("row {row} ({}): agb {} must be finite and >= 0", r.plot_id, r.agb));
            }
            if !(r.volume >= 0.0) || !r.volume.is_finite() {
                problems.push(format!("row {row} ({}): volume {} must be finite and >= 0", r.plot_id, r.volume));
            }
            let limit = if r.split == Split::Train { MAX_TRAIN_GAP } else { MAX_EVAL_GAP };
            if !(r.time_gap_years >= 0.0 && r.time_gap_years <= limit) {
                problems.push(format!(
                    "row {row} ({}): time gap {} outside [0, {limit}] for {} split",
                    r.plot_id, r.time_gap_years, r.split
                ));
            }
        }
        let mut by_split: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
        for r in &self.rows {
            by_split.entry(&r.plot_id).or_default().insert(r.split);
        }
        for (id, splits) in &by_split {
            if splits.contains(&Split::Test) && splits.len() > 1 {
                problems.push(format!("plot {id} appears in test and in another split"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }

    pub fn load_samples(&self) -> Result<Vec<PlotSample>> {
        self.rows
            .iter()
            .map(|r| {
                let (points, intensity) = read_points(&self.root.join(&r.points_path))?;
                Ok(PlotSample {
                    plot_id: r.plot_id.clone(),
                    points,
                    intensity,
                    agb: r.agb,
                    volume: r.volume,
                    split: r.split,
                    time_gap_years: r.time_gap_years,
                })
            })
            .collect()
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<ManifestRow>().enumerate() {
        rows.push(rec.map_err(|e| Error::parse(path, format!("row {}: {e}", i + 1)))?);
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = DatasetManifest { root, rows };
    m.validate()?;
    Ok(m)
}

/// Writes the manifest through a temporary file and a rename.
pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    manifest.validate()?;
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp).map_err(|e| Error::parse(&tmp, e.to_string()))?;
        for r in &manifest.rows {
            w.serialize(r).map_err(|e| Error::parse(&tmp, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads `x y z [intensity]` lines. Blank lines and `#` comments are skipped.
pub fn read_points(path: &Path) -> Result<(Vec<[f64; 3]>, Option<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    let mut intensity: Option<Vec<f64>> = None;
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1)))?;
        if !(3..=4).contains(&vals.len()) || width.is_some_and(|w| w != vals.len()) {
            return Err(Error::parse(path, format!("line {}: expected a consistent 3 or 4 columns", i + 1)));
        }
        width = Some(vals.len());
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Ingestion(format!("{}: line {} is not finite", path.display(), i + 1)));
        }
        points.push([vals[0], vals[1], vals[2]]);
        if vals.len() == 4 {
            intensity.get_or_insert_with(Vec::new).push(vals[3]);
        }
    }
    Ok((points, intensity))
}

pub fn write_points(path: &Path, points: &[[f64; 3]], intensity: Option<&[f64]>) -> Result<()> {
    let mut out = String::with_capacity(points.len() * 32);
    for (i, p) in points.iter().enumerate() {
        match intensity {
            Some(v) => out.push_str(&format!("{:?} {:?} {:?} {:?}\n", p[0], p[1], p[2], v[i])),
            None => out.push_str(&format!("{:?} {:?} {:?}\n", p[0], p[1], p[2])),
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Preprocessed {
    Kept(PlotSample),
    Rejected { plot_id: String, max_height: f64 },
}

/// Translates the cloud so its minimum corner is the origin and rejects
/// samples with no point strictly above [`MIN_HEIGHT`].
pub fn preprocess(sample: &PlotSample) -> Result<Preprocessed> {
    if sample.points.is_empty() {
        return Err(Error::Contract(format!("plot {} has no points", sample.plot_id)));
    }
    let mut lo = [f64::INFINITY; 3];
    for p in &sample.points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
        }
    }
    let points: Vec<[f64; 3]> = sample
        .points
        .iter()
        .map(|p| [p[0] - lo[0], p[1] - lo[1], p[2] - lo[2]])
        .collect();
    let max_height = points.iter().map(|p| p[2]).fold(f64::NEG_INFINITY, f64::max);
    if max_height <= MIN_HEIGHT {
        return Ok(Preprocessed::Rejected {
            plot_id: sample.plot_id.clone(),
            max_height,
        });
    }
    Ok(Preprocessed::Kept(PlotSample { points, ..sample.clone() }))
}

/// Per-voxel input features for one preprocessed sample (batch index 0):
/// occupancy, mean height / 10 m, point count relative to the sample's mean
/// count per voxel, and optionally mean intensity.
pub fn voxel_features(sample: &PlotSample, voxel_size: f64, intensity: bool) -> Result<SparseTensor> {
    let n = sample.points.len();
    if n == 0 {
        return Err(Error::Contract(format!("plot {} has no points", sample.plot_id)));
    }
    let inten = match (intensity, &sample.intensity) {
        (false, _) => None,
        (true, Some(v)) if v.len() == n => Some(v),
        (true, _) => {
            return Err(Error::Ingestion(format!("plot {} has no per-point intensity", sample.plot_id)));
        }
    };
    let width = if inten.is_some() { 3 } else { 2 };
    let mut rows = Vec::with_capacity(n * width);
    for (i, p) in sample.points.iter().enumerate() {
        rows.push(1.0);
        rows.push(p[2] / 10.0);
        if let Some(v) = inten {
            rows.push(v[i]);
        }
    }
    let q = quantize_with_counts(&vec![0; n], &sample.points, &DenseTensor::new(vec![n, width], rows)?, voxel_size)?;
    let v = q.tensor.len();
    let mean_count = n as f64 / v as f64;
    let src = q.tensor.feats.data();
    let mut feats = Vec::with_capacity(v * (width + 1));
    for r in 0..v {
        let row = &src[r * width..(r + 1) * width];
        feats.extend_from_slice(&row[..2]);
        feats.push(q.counts[r] as f64 / mean_count);
        if width == 3 {
            feats.push(row[2]);
        }
    }
    SparseTensor::new(q.tensor.coords.clone(), DenseTensor::new(vec![v, width + 1], feats)?, voxel_size)
}

/// Assigns plot-level train/val/test splits and synthetic time gaps.
///
/// Plots are shuffled with `seed`; the first `round(n·r_train)` go to train,
/// the next `round(n·r_val)` to val, the rest to test. Validation and test
/// gaps are drawn from {0, 1} years, training gaps from {0, …, 9}.
pub fn make_splits(mut samples: Vec<PlotSample>, ratios: [f64; 3], seed: u64) -> Result<Vec<PlotSample>> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let plots: BTreeSet<String> = samples.iter().map(|s| s.plot_id.clone()).collect();
    let mut plots: Vec<String> = plots.into_iter().collect();
    let n = plots.len();
    let n_train = (n as f64 * ratios[0]).round() as usize;
    let n_val = (n as f64 * ratios[1]).round() as usize;
    let counts = [n_train, n_val, n.saturating_sub(n_train + n_val)];
    if n_train + n_val > n || ratios.iter().zip(counts).any(|(r, c)| *r > 0.0 && c == 0) {
        return Err(Error::Config(format!("{n} plots are too few for split ratios {ratios:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    plots.shuffle(&mut rng);
    let mut gap_rng = ChaCha8Rng::seed_from_u64(seed);
    gap_rng.set_stream(1);
    let mut assign = BTreeMap::new();
    for (i, id) in plots.into_iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let gap = if split == Split::Train {
            gap_rng.random_range(0..=MAX_TRAIN_GAP as u32)
        } else {
            gap_rng.random_range(0..=MAX_EVAL_GAP as u32)
        };
        assign.insert(id, (split, gap as f64));
    }
    for s in &mut samples {
        let (split, gap) = assign[&s.plot_id];
        s.split = split;
        s.time_gap_years = gap;
    }
    Ok(samples)
}

/// Writes one point file per sample plus `manifest.csv` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[PlotSample]) -> Result<DatasetManifest> {
    let pts = dir.join("points");
    fs::create_dir_all(&pts).map_err(|e| Error::io(&pts, e))?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = PathBuf::from("points").join(format!("{}.txt", s.plot_id));
        write_points(&dir.join(&rel), &s.points, s.intensity.as_deref())?;
        rows.push(ManifestRow {
            plot_id: s.plot_id.clone(),
            points_path: rel,
            agb: s.agb,
            volume: s.volume,
            split: s.split,
            time_gap_years: s.time_gap_years,
        });
    }
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        rows,
    };
    write_manifest(&dir.join("manifest.csv"), &manifest)?;
    Ok(manifest)
}

/// Stem volume, m³: `form · (π/4) · d² · h` with `d` in meters.
pub fn tree_volume(dbh_m: f64, height: f64, form_factor: f64) -> f64 {
    form_factor * PI / 4.0 * dbh_m * dbh_m * height
}

/// Above-ground biomass, kg: `0.05 · (d² h)^0.95` with `d` in centimeters.
pub fn tree_agb_kg(dbh_m: f64, height: f64) -> f64 {
    let d_cm = dbh_m * 100.0;
    0.05 * (d_cm * d_cm * height).powf(0.95)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub x: f64,
    pub y: f64,
    pub height: f64,
    pub dbh: f64,
    pub crown_radius: f64,
    pub crown_base: f64,
}

impl Tree {
    /// Crown surface height above ground at horizontal distance `rho`.
    fn crown_top(&self, rho: f64) -> f64 {
        self.height - (self.height - self.crown_base) * (rho / self.crown_radius)
    }
}

/// Per-hectare `(agb Mg/ha, volume m³/ha)` from the trees standing on a plot.
pub fn plot_labels(trees: &[Tree], area_m2: f64, form_factor: f64) -> (f64, f64) {
    let ha = area_m2 / 10_000.0;
    let agb: f64 = trees.iter().map(|t| tree_agb_kg(t.dbh, t.height)).sum::<f64>() / 1000.0;
    let vol: f64 = trees.iter().map(|t| tree_volume(t.dbh, t.height, form_factor)).sum();
    (agb / ha, vol / ha)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_plots: usize,
    /// Meters.
    pub plot_radius: f64,
    /// Stand density range, trees per hectare.
    pub density_range: (f64, f64),
    /// Stand mean tree height range, meters.
    pub height_range: (f64, f64),
    /// Laser pulses per square meter.
    pub point_density: f64,
    /// Largest terrain gradient along each axis, m/m.
    pub max_slope: f64,
    pub form_factor: f64,
    /// Log-scale spread of the per-plot stem thickness factor.
    pub stoutness_sigma: f64,
    pub intensity: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_plots: 100,
            plot_radius: 15.0,
            density_range: (100.0, 900.0),
            height_range: (5.0, 30.0),
            point_density: 14.0,
            max_slope: 0.15,
            form_factor: 0.5,
            stoutness_sigma: 0.3,
            intensity: true,
        }
    }
}

/// Width of the ring outside the plot whose trees shed points into it.
const BUFFER: f64 = 6.0;

fn disk_point<R: Rng>(rng: &mut R, r0: f64, r1: f64) -> (f64, f64) {
    let r = (r0 * r0 + rng.random::<f64>() * (r1 * r1 - r0 * r0)).sqrt();
    let a = rng.random::<f64>() * 2.0 * PI;
    (r * a.cos(), r * a.sin())
}

fn lognormal<R: Rng>(rng: &mut R, sigma: f64) -> f64 {
    (sigma * Normal::new(0.0, 1.0).expect("unit normal").sample(rng)).exp()
}

fn draw_trees<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> (Vec<Tree>, Vec<Tree>) {
    let (d0, d1) = cfg.density_range;
    let (h0, h1) = cfg.height_range;
    let density = d0 + rng.random::<f64>() * (d1 - d0);
    let mean_h = h0 + rng.random::<f64>() * (h1 - h0);
    // a second, shorter cohort makes the height distribution multi-modal
    let under = (rng.random::<f64>() < 0.4).then(|| (mean_h * (0.3 + 0.3 * rng.random::<f64>()), rng.random::<f64>()));
    // open-grown stands carry thicker stems and wider crowns at equal height
    let stout = lognormal(rng, cfg.stoutness_sigma);
    let tree = |rng: &mut R, x: f64, y: f64| {
        let mh = match under {
            Some((h, frac)) if rng.random::<f64>() < frac => h,
            _ => mean_h,
        };
        let height = (mh * lognormal(rng, 0.25)).clamp(2.0, 45.0);
        let dbh = 0.0055 * height.powf(1.25) * stout * lognormal(rng, 0.1);
        Tree {
            x,
            y,
            height,
            dbh,
            crown_radius: (0.3 + 7.5 * dbh) * lognormal(rng, 0.1),
            crown_base: height * (0.35 + 0.3 * rng.random::<f64>()),
        }
    };
    let r = cfg.plot_radius;
    let lambda = |area: f64| density * area / 10_000.0;
    let count = |rng: &mut R, l: f64| if l > 0.0 { Poisson::new(l).expect("rate").sample(rng) as usize } else { 0 };
    let n_in = count(rng, lambda(PI * r * r));
    let n_out = count(rng, lambda(PI * ((r + BUFFER).powi(2) - r * r)));
    let inside = (0..n_in)
        .map(|_| {
            let (x, y) = disk_point(rng, 0.0, r);
            tree(rng, x, y)
        })
        .collect();
    let outside = (0..n_out)
        .map(|_| {
            let (x, y) = disk_point(rng, r, r + BUFFER);
            tree(rng, x, y)
        })
        .collect();
    (inside, outside)
}

struct Terrain {
    z0: f64,
    gx: f64,
    gy: f64,
}

impl Terrain {
    fn at(&self, x: f64, y: f64) -> f64 {
        self.z0 + self.gx * x + self.gy * y
    }
}

fn sample_points<R: Rng>(
    cfg: &SynthConfig,
    trees: &[&Tree],
    ground: &Terrain,
    origin: (f64, f64),
    rng: &mut R,
) -> (Vec<[f64; 3]>, Vec<f64>) {
    let r = cfg.plot_radius;
    let n_pulses = (cfg.point_density * PI * r * r).round() as usize;
    let noise = Normal::new(0.0, 0.05).expect("sigma");
    let depth = Exp::new(2.0).expect("rate");
    let inten = Normal::new(0.0, 0.05).expect("sigma");
    let mut pts = Vec::with_capacity(n_pulses * 3 / 2);
    let mut ints = Vec::with_capacity(n_pulses * 3 / 2);
    let mut hits: Vec<(f64, &Tree)> = Vec::new();
    for _ in 0..n_pulses {
        let (x, y) = disk_point(rng, 0.0, r);
        let g = ground.at(x, y);
        hits.clear();
        for t in trees {
            let rho = ((x - t.x).powi(2) + (y - t.y).powi(2)).sqrt();
            if rho < t.crown_radius {
                hits.push((t.crown_top(rho), t));
            }
        }
        hits.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut first = None;
        for (top, t) in &hits {
            if rng.random::<f64>() < 0.8 {
                let z = (top - depth.sample(rng)).max(t.crown_base);
                first = Some((z, t.crown_base));
                break;
            }
        }
        match first {
            Some((z, base)) => {
                pts.push([x + origin.0, y + origin.1, g + z]);
                ints.push(0.3 + inten.sample(rng));
                if rng.random::<f64>() < 0.3 {
                    if rng.random::<f64>() < 0.5 {
                        pts.push([x + origin.0, y + origin.1, g + noise.sample(rng)]);
                        ints.push(0.7 + inten.sample(rng));
                    } else {
                        let z2 = base + rng.random::<f64>() * (z - base);
                        pts.push([x + origin.0, y + origin.1, g + z2]);
                        ints.push(0.35 + inten.sample(rng));
                    }
                }
            }
            None => {
                pts.push([x + origin.0, y + origin.1, g + noise.sample(rng)]);
                ints.push(0.7 + inten.sample(rng));
            }
        }
    }
    for t in trees {
        let lambda = cfg.point_density * 0.03 * t.crown_base;
        let k = if lambda > 0.0 { Poisson::new(lambda).expect("rate").sample(rng) as usize } else { 0 };
        for _ in 0..k {
            let a = rng.random::<f64>() * 2.0 * PI;
            let (x, y) = (t.x + 0.5 * t.dbh * a.cos(), t.y + 0.5 * t.dbh * a.sin());
            if x * x + y * y > r * r {
                continue;
            }
            let z = rng.random::<f64>() * t.crown_base;
            pts.push([x + origin.0, y + origin.1, ground.at(x, y) + z]);
            ints.push(0.5 + inten.sample(rng));
        }
    }
    (pts, ints)
}

/// One synthetic plot. Trees and labels come from one random stream and the
/// laser returns from another, so changing `point_density` leaves labels and
/// tree geometry untouched.
pub fn synth_plot(cfg: &SynthConfig, index: usize) -> PlotSample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2 * index as u64);
    let (inside, outside) = draw_trees(cfg, &mut rng);
    let s = cfg.max_slope;
    let ground = Terrain {
        z0: rng.random::<f64>() * 300.0,
        gx: (2.0 * rng.random::<f64>() - 1.0) * s,
        gy: (2.0 * rng.random::<f64>() - 1.0) * s,
    };
    let origin = (rng.random::<f64>() * 1e4, rng.random::<f64>() * 1e4);
    let r = cfg.plot_radius;
    let (agb, volume) = plot_labels(&inside, PI * r * r, cfg.form_factor);
    let mut prng = ChaCha8Rng::seed_from_u64(cfg.seed);
    prng.set_stream(2 * index as u64 + 1);
    let all: Vec<&Tree> = inside.iter().chain(&outside).collect();
    let (points, ints) = sample_points(cfg, &all, &ground, origin, &mut prng);
    PlotSample {
        plot_id: format!("plot{index:05}"),
        points,
        intensity: cfg.intensity.then_some(ints),
        agb,
        volume,
        split: Split::Train,
        time_gap_years: 0.0,
    }
}

pub fn synth_forest(cfg: &SynthConfig) -> Vec<PlotSample> {
    (0..cfg.n_plots).map(|i| synth_plot(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(points: Vec<[f64; 3]>) -> PlotSample {
        PlotSample {
            plot_id: "p".into(),
            points,
            intensity: None,
            agb: 1.0,
            volume: 1.0,
            split: Split::Train,
            time_gap_years: 0.0,
        }
    }

    #[test]
    fn preprocess_threshold_is_strict() {
        let low = sample(vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.3]]);
        assert!(matches!(preprocess(&low).unwrap(), Preprocessed::Rejected { .. }));
        let ok = sample(vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.31]]);
        assert!(matches!(preprocess(&ok).unwrap(), Preprocessed::Kept(_)));
        assert!(matches!(preprocess(&sample(vec![])), Err(Error::Contract(_))));
    }

    #[test]
    fn preprocess_moves_min_corner_to_origin() {
        let s = sample(vec![[5.0, -2.0, 100.0], [7.0, 3.0, 104.0]]);
        let Preprocessed::Kept(k) = preprocess(&s).unwrap() else { panic!() };
        assert_eq!(k.points, vec![[0.0, 0.0, 0.0], [2.0, 5.0, 4.0]]);
    }

    #[test]
    fn hand_volume() {
        assert!((tree_volume(0.2, 10.0, 0.5) - 0.157_079_632_679_489_66).abs() < 1e-15);
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let samples: Vec<PlotSample> = (0..10)
            .map(|i| PlotSample {
                plot_id: format!("p{i}"),
                ..sample(vec![[0.0; 3]])
            })
            .collect();
        let a = make_splits(samples.clone(), [0.6, 0.2, 0.2], 7).unwrap();
        let b = make_splits(samples.clone(), [0.6, 0.2, 0.2], 7).unwrap();
        assert_eq!(a, b);
        let count = |s: Split| a.iter().filter(|p| p.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (6, 2, 2));
        assert!(a.iter().filter(|p| p.split != Split::Train).all(|p| p.time_gap_years <= 1.0));
        assert!(make_splits(samples[..2].to_vec(), [0.6, 0.2, 0.2], 7).is_err());
        assert!(make_splits(samples, [0.6, 0.2, 0.3], 7).is_err());
    }

    #[test]
    fn relative_count_feature() {
        let s = sample(vec![[0.1, 0.1, 0.5], [0.2, 0.2, 0.7], [1.5, 0.1, 0.3]]);
        let t = voxel_features(&s, 1.0, false).unwrap();
        assert_eq!(t.feats.shape(), &[2, 3]);
        // 3 points over 2 voxels: mean count 1.5
        let expect = [[1.0, 0.06, 2.0 / 1.5], [1.0, 0.03, 1.0 / 1.5]];
        for (r, e) in expect.iter().enumerate() {
            for (a, b) in t.feats.row(r).iter().zip(e) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }
}
