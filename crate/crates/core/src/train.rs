//! Sample preparation, the trainable model wrapper, and the training loop.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{preprocess, voxel_features, PlotSample, Preprocessed, Target};
use crate::error::{Error, Result};
use crate::geometry::{Geometry, MapKey};
use crate::network::{build_network, Network, NetworkConfig, DEPTH};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::params::ParamStore;
use crate::sparse::Coords;
use crate::sparse_ops::{Mode, Session};
use crate::tensor::DenseTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub target: Target,
    pub clip_norm: Option<f64>,
    /// Anneal the learning rate to zero along a half cosine over `epochs`.
    pub cosine: bool,
    /// Fraction of final epochs trained against fixed, recalibrated
    /// normalization statistics instead of batch statistics.
    pub frozen_norm_fraction: f64,
    /// Show each plot under a random quarter turn and mirror every epoch.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            target: Target::Agb,
            clip_norm: None,
            cosine: true,
            frozen_norm_fraction: 0.5,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.frozen_norm_fraction) {
            return Err(Error::Config(format!(
                "frozen_norm_fraction must lie in [0, 1], got {}",
                self.frozen_norm_fraction
            )));
        }
        Ok(())
    }

    /// First epoch (1-based) trained with fixed normalization statistics.
    pub fn freeze_epoch(&self) -> usize {
        let frozen = (self.frozen_norm_fraction * self.epochs as f64).round() as usize;
        self.epochs - frozen.min(self.epochs) + 1
    }
}

/// A sample voxelized once, with its cached coordinate hierarchy.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub plot_id: String,
    pub geometry: Geometry,
    pub feats: DenseTensor,
    pub label: f64,
}

/// Preprocesses and voxelizes `samples`. Rejected plot ids are returned
/// separately.
pub fn prepare(samples: &[PlotSample], cfg: &NetworkConfig, target: Target) -> Result<(Vec<Prepared>, Vec<String>)> {
    let keys = cfg.map_keys();
    let mut kept = Vec::with_capacity(samples.len());
    let mut rejected = Vec::new();
    for s in samples {
        match preprocess(s)? {
            Preprocessed::Rejected { plot_id, .. } => rejected.push(plot_id),
            Preprocessed::Kept(p) => {
                let t = voxel_features(&p, cfg.voxel_size, cfg.intensity)?;
                let coords = std::sync::Arc::try_unwrap(t.coords).unwrap_or_else(|a| (*a).clone());
                kept.push(Prepared {
                    plot_id: p.plot_id.clone(),
                    geometry: Geometry::build(coords, DEPTH, &keys)?,
                    feats: t.feats,
                    label: target.of(&p),
                });
            }
        }
    }
    Ok((kept, rejected))
}

/// Applies one of the eight symmetries of the square lattice to the
/// horizontal voxel axes: bit 2 swaps them, bits 0 and 1 mirror each. The
/// result is shifted back to non-negative indices and rebuilt with `keys`.
pub fn dihedral(p: &Prepared, code: u8, keys: &[MapKey]) -> Result<Prepared> {
    let base = &p.geometry.levels[0];
    let mut rows: Vec<([i32; 4], usize)> = base
        .as_slice()
        .iter()
        .enumerate()
        .map(|(r, c)| {
            let (mut i, mut j) = if code & 4 != 0 { (c[2], c[1]) } else { (c[1], c[2]) };
            if code & 1 != 0 {
                i = -i;
            }
            if code & 2 != 0 {
                j = -j;
            }
            ([c[0], i, j, c[3]], r)
        })
        .collect();
    let lo_i = rows.iter().map(|(c, _)| c[1]).min().unwrap_or(0);
    let lo_j = rows.iter().map(|(c, _)| c[2]).min().unwrap_or(0);
    for (c, _) in &mut rows {
        c[1] -= lo_i;
        c[2] -= lo_j;
    }
    rows.sort_unstable();
    let ch = p.feats.shape()[1];
    let mut feats = Vec::with_capacity(rows.len() * ch);
    for (_, r) in &rows {
        feats.extend_from_slice(p.feats.row(*r));
    }
    let coords = Coords::new(rows.into_iter().map(|(c, _)| c).collect(), base.stride(), base.batch_size())?;
    Ok(Prepared {
        plot_id: p.plot_id.clone(),
        geometry: Geometry::build(coords, p.geometry.levels.len(), keys)?,
        feats: DenseTensor::new(p.feats.shape().to_vec(), feats)?,
        label: p.label,
    })
}

/// Affine map between target units and the standardized training scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub fn fit(labels: &[f64]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Contract("cannot standardize an empty label set".into()));
        }
        let n = labels.len() as f64;
        let mean = labels.iter().sum::<f64>() / n;
        let var = labels.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(Self { mean, std })
    }

    pub fn forward(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

fn batch_inputs(items: &[&Prepared]) -> Result<(Geometry, DenseTensor)> {
    let geos: Vec<&Geometry> = items.iter().map(|p| &p.geometry).collect();
    let geo = Geometry::concat(&geos)?;
    let c = items[0].feats.shape()[1];
    let mut data = Vec::with_capacity(geo.levels[0].len() * c);
    for p in items {
        data.extend_from_slice(p.feats.data());
    }
    let rows = data.len() / c;
    Ok((geo, DenseTensor::new(vec![rows, c], data)?))
}

pub struct Model {
    pub net: Network,
    pub store: ParamStore,
    pub target: Target,
    pub scaler: Standardizer,
}

impl Model {
    pub fn new(cfg: &NetworkConfig, target: Target, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = build_network(cfg, &mut store, &mut rng)?;
        Ok(Self {
            net,
            store,
            target,
            scaler: Standardizer { mean: 0.0, std: 1.0 },
        })
    }

    /// Standardized outputs for one batch.
    fn forward_batch(&mut self, items: &[&Prepared], mode: Mode) -> Result<Vec<f64>> {
        let (geo, feats) = batch_inputs(items)?;
        let mut s = Session::new(&mut self.store, mode);
        let x = s.tape.constant(feats);
        let y = self.net.forward(&mut s, &geo, x)?;
        Ok(s.tape.value(y).data().to_vec())
    }

    /// Predictions in target units using running normalization statistics.
    pub fn predict(&mut self, data: &[Prepared], batch_size: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(data.len());
        let refs: Vec<&Prepared> = data.iter().collect();
        for chunk in refs.chunks(batch_size.max(1)) {
            let z = self.forward_batch(chunk, Mode::Eval)?;
            out.extend(z.into_iter().map(|v| self.scaler.inverse(v)));
        }
        Ok(out)
    }

    /// Preprocesses, voxelizes and predicts raw samples; rejected samples are
    /// an error here.
    pub fn predict_samples(&mut self, samples: &[PlotSample]) -> Result<Vec<f64>> {
        let (prepared, rejected) = prepare(samples, &self.net.cfg, self.target)?;
        if let Some(id) = rejected.first() {
            return Err(Error::Validation(format!("plot {id} has no point above the height threshold")));
        }
        self.predict(&prepared, 8)
    }

    /// Replaces the running normalization statistics with their average over
    /// train-mode passes through `data`, leaving trainable weights untouched.
    pub fn recalibrate(&mut self, data: &[Prepared], batch_size: usize) -> Result<()> {
        let refs: Vec<&Prepared> = data.iter().collect();
        for (k, chunk) in refs.chunks(batch_size.max(1)).enumerate() {
            let (geo, feats) = batch_inputs(chunk)?;
            let mut s = Session::new(&mut self.store, Mode::Train);
            s.norm_momentum = 1.0 / (k + 1) as f64;
            let x = s.tape.constant(feats);
            self.net.forward(&mut s, &geo, x)?;
        }
        Ok(())
    }

    pub fn checkpoint_text(&self, extra: &[(String, String)]) -> String {
        let mut meta = vec![
            ("target".to_string(), self.target.to_string()),
            ("label_mean".to_string(), format!("{:?}", self.scaler.mean)),
            ("label_std".to_string(), format!("{:?}", self.scaler.std)),
        ];
        meta.extend_from_slice(extra);
        checkpoint::to_string(&self.store, &meta)
    }

    pub fn save(&self, path: &Path, extra: &[(String, String)]) -> Result<()> {
        std::fs::write(path, self.checkpoint_text(extra)).map_err(|e| Error::io(path, e))
    }

    pub fn load(cfg: &NetworkConfig, path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        let meta = |k: &str| -> Result<&str> {
            ck.meta(k)
                .ok_or_else(|| Error::parse(path, format!("checkpoint lacks meta {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            meta(k)?
                .parse()
                .map_err(|_| Error::parse(path, format!("meta {k} is not a number")))
        };
        let target = meta("target")?.parse()?;
        let mut model = Model::new(cfg, target, 0)?;
        model.store.load_from(&ck.store)?;
        model.scaler = Standardizer {
            mean: num("label_mean")?,
            std: num("label_std")?,
        };
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean standardized squared error over the epoch's batches.
    pub loss: f64,
    pub seconds: f64,
}

/// Trains with MSE on standardized targets. `on_epoch` runs after each epoch
/// and stops training by returning `false`. Running normalization statistics
/// are recalibrated on `data` before each `on_epoch` call until the freeze
/// epoch. From then on they are recalibrated at the start of each epoch and
/// held fixed through it.
pub fn train(
    model: &mut Model,
    data: &[Prepared],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&mut Model, &EpochLog) -> Result<bool>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let labels: Vec<f64> = data.iter().map(|p| p.label).collect();
    model.scaler = Standardizer::fit(&labels)?;
    let opt_cfg = OptimizerConfig {
        lr: cfg.lr,
        clip_norm: cfg.clip_norm,
        ..OptimizerConfig::default()
    };
    let mut opt = OptimizerState::new(opt_cfg, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let freeze = cfg.freeze_epoch();
    let keys = model.net.cfg.map_keys();
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(2);
    for epoch in 1..=cfg.epochs {
        let mode = if epoch >= freeze { Mode::Eval } else { Mode::Train };
        if epoch >= freeze {
            model.recalibrate(data, cfg.batch_size)?;
        }
        let start = Instant::now();
        if cfg.cosine {
            let phase = (epoch - 1) as f64 / cfg.epochs as f64;
            opt.config.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos());
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let turned: Vec<Prepared> = if cfg.augment {
                chunk
                    .iter()
                    .map(|&i| dihedral(&data[i], aug_rng.random_range(0..8), &keys))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let items: Vec<&Prepared> = if cfg.augment {
                turned.iter().collect()
            } else {
                chunk.iter().map(|&i| &data[i]).collect()
            };
            let (geo, feats) = batch_inputs(&items)?;
            let targets: Vec<f64> = items.iter().map(|p| model.scaler.forward(p.label)).collect();
            let mut s = Session::new(&mut model.store, mode);
            let x = s.tape.constant(feats);
            let y = model.net.forward(&mut s, &geo, x)?;
            let t = s.tape.constant(DenseTensor::new(vec![items.len(), 1], targets)?);
            let d = s.tape.sub(y, t)?;
            let sq = s.tape.mul(d, d)?;
            let loss = s.tape.mean_all(sq)?;
            let lv = s.tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Training(format!("loss became {lv} at epoch {epoch}, batch {}", bi + 1)));
            }
            let grads = s.tape.backward(loss)?;
            let tape = std::mem::take(&mut s.tape);
            drop(s);
            model.store.zero_grads();
            tape.write_param_grads(&grads, &mut model.store);
            opt.step(&mut model.store)?;
            total += lv;
            batches += 1;
        }
        let log = EpochLog {
            epoch,
            loss: total / batches as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        logs.push(log.clone());
        if epoch < freeze {
            model.recalibrate(data, cfg.batch_size)?;
        }
        if !on_epoch(model, &log)? {
            break;
        }
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_plot, SynthConfig};
    use crate::gradcheck::tiny_network_config;

    fn sample() -> (NetworkConfig, Prepared) {
        let cfg = NetworkConfig { voxel_size: 1.0, ..tiny_network_config() };
        let synth = SynthConfig { point_density: 1.0, plot_radius: 6.0, seed: 1, ..SynthConfig::default() };
        let (mut p, _) = prepare(&[synth_plot(&synth, 0)], &cfg, Target::Agb).unwrap();
        (cfg, p.remove(0))
    }

    #[test]
    fn dihedral_identity_and_inverse() {
        let (cfg, p) = sample();
        let keys = cfg.map_keys();
        let same = dihedral(&p, 0, &keys).unwrap();
        assert_eq!(same.geometry.levels[0].as_slice(), p.geometry.levels[0].as_slice());
        assert_eq!(same.feats, p.feats);
        for code in 0..8u8 {
            let t = dihedral(&p, code, &keys).unwrap();
            assert_eq!(t.geometry.levels[0].len(), p.geometry.levels[0].len());
            // mirrors are involutions; a swap composed with itself too
            let back = dihedral(&t, code & 3, &keys).unwrap();
            let back = if code & 4 != 0 { dihedral(&back, 4, &keys).unwrap() } else { back };
            let mut a: Vec<Vec<u64>> = back.feats.data().chunks(3).map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
            let mut b: Vec<Vec<u64>> = p.feats.data().chunks(3).map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn freeze_epoch_counts_from_the_end() {
        let cfg = |f| TrainConfig { epochs: 10, frozen_norm_fraction: f, ..TrainConfig::default() };
        assert_eq!(cfg(0.0).freeze_epoch(), 11);
        assert_eq!(cfg(0.5).freeze_epoch(), 6);
        assert_eq!(cfg(1.0).freeze_epoch(), 1);
        assert!(cfg(1.5).validate().is_err());
    }
}
