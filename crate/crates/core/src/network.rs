//! Backbone assembly: stem, four bottleneck stages, stage-3 feature fusion,
//! global pooling, and the regression head.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::blocks::{AttentionKind, Bottleneck, BottleneckConfig};
use crate::error::{Error, Result};
use crate::geometry::{Geometry, MapKey};
use crate::params::ParamStore;
use crate::sparse::{parent_rows, SparseTensor};
use crate::sparse_ops::{ConvWeights, Linear, Norm, Session, SparseConv, SparseVar, NORM_EPS};
use crate::ssm::MambaConfig;
use crate::tensor::DenseTensor;

pub const STAGES: usize = 4;
/// Lattice levels: the input plus one per strided stage transition.
pub const DEPTH: usize = STAGES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub stem_channels: usize,
    /// Per-stage bottleneck widths before expansion.
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub expansion: usize,
    pub se_reduction: usize,
    /// Attention used by the last block of each stage; other blocks use SE.
    pub stage_attention: Vec<AttentionKind>,
    pub fusion: bool,
    pub head_hidden: usize,
    pub mamba: MambaConfig,
    pub voxel_size: f64,
    /// Append mean intensity to the per-voxel features.
    pub intensity: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stem_channels: 32,
            widths: vec![32, 64, 128, 256],
            depths: vec![3, 4, 6, 3],
            expansion: 4,
            se_reduction: 16,
            stage_attention: vec![AttentionKind::MambaSe; STAGES],
            fusion: true,
            head_hidden: 64,
            mamba: MambaConfig::default(),
            voxel_size: 0.5,
            intensity: false,
        }
    }
}

impl NetworkConfig {
    /// Occupancy, mean height, relative point count, and optionally intensity.
    pub fn in_channels(&self) -> usize {
        3 + usize::from(self.intensity)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.depths.len() != STAGES {
            bad.push(format!("depths must list {STAGES} stages, got {}", self.depths.len()));
        } else if self.depths.iter().sum::<usize>() != 16 || self.depths.contains(&0) {
            bad.push(format!("depths {:?} must be positive and sum to 16", self.depths));
        }
        if self.widths.len() != STAGES || self.widths.contains(&0) {
            bad.push(format!("widths must list {STAGES} positive values, got {:?}", self.widths));
        }
        if self.stage_attention.len() != STAGES {
            bad.push(format!("stage_attention must list {STAGES} entries"));
        }
        if self.stem_channels == 0 || self.expansion == 0 || self.head_hidden == 0 {
            bad.push("stem_channels, expansion and head_hidden must be positive".into());
        }
        if self.se_reduction == 0 {
            bad.push("se_reduction must be positive".into());
        } else if self.widths.iter().any(|w| (w * self.expansion) % self.se_reduction != 0) {
            bad.push(format!("expanded widths must be divisible by se_reduction {}", self.se_reduction));
        }
        if self.mamba.state_dim == 0 || self.mamba.expand == 0 || self.mamba.conv_width == 0 {
            bad.push("mamba dimensions must be positive".into());
        }
        if !(self.voxel_size.is_finite() && self.voxel_size > 0.0) {
            bad.push(format!("voxel_size must be positive, got {}", self.voxel_size));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// Kernel maps the forward pass reads, beyond the stride-2 3³ maps every
    /// geometry carries.
    pub fn map_keys(&self) -> Vec<MapKey> {
        let mut keys = vec![(0, 3, 1)];
        let mut level = 0;
        for b in self.block_configs() {
            if b.stride == 1 {
                keys.push((level, 3, 1));
            } else {
                keys.push((level, 1, 2));
                level += 1;
            }
        }
        keys.sort();
        keys.dedup();
        keys
    }

    pub fn block_configs(&self) -> Vec<BottleneckConfig> {
        let mut out = Vec::new();
        let mut cin = self.stem_channels;
        for stage in 0..STAGES {
            for b in 0..self.depths[stage] {
                let last = b + 1 == self.depths[stage];
                let cfg = BottleneckConfig {
                    cin,
                    mid: self.widths[stage],
                    expansion: self.expansion,
                    stride: if stage > 0 && b == 0 { 2 } else { 1 },
                    attention: if last { self.stage_attention[stage] } else { AttentionKind::Se },
                    reduction: self.se_reduction,
                };
                cin = cfg.out();
                out.push(cfg);
            }
        }
        out
    }
}

/// Structural summary of a built network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Audit {
    pub blocks: usize,
    /// One-based block positions carrying Mamba attention.
    pub mamba_positions: Vec<usize>,
    pub strided_positions: Vec<usize>,
    pub params: usize,
}

impl fmt::Display for Audit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pos: Vec<String> = self.mamba_positions.iter().map(|p| p.to_string()).collect();
        write!(
            f,
            "blocks={} mamba_se={} at [{}]",
            self.blocks,
            self.mamba_positions.len(),
            pos.join(",")
        )
    }
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub conv: SparseConv,
    pub norm: Norm,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub stem: Vec<(SparseConv, Norm)>,
    pub blocks: Vec<Bottleneck>,
    /// Index of the last block in each stage.
    pub stage_ends: Vec<usize>,
    pub fusion: Option<Fusion>,
    pub head1: Linear,
    pub head2: Linear,
}

pub fn build_network<R: Rng>(cfg: &NetworkConfig, store: &mut ParamStore, rng: &mut R) -> Result<Network> {
    cfg.validate()?;
    let s = cfg.stem_channels;
    let stem = vec![
        (
            SparseConv::new(store, "stem.0.conv", cfg.in_channels(), s, 3, 1, rng),
            Norm::new(store, "stem.0.norm", s),
        ),
        (SparseConv::new(store, "stem.1.conv", s, s, 3, 1, rng), Norm::new(store, "stem.1.norm", s)),
    ];
    let mut blocks = Vec::new();
    for (i, bc) in cfg.block_configs().into_iter().enumerate() {
        blocks.push(Bottleneck::new(store, &format!("block.{}", i + 1), bc, &cfg.mamba, rng)?);
    }
    let stage_ends: Vec<usize> = cfg
        .depths
        .iter()
        .scan(0, |acc, d| {
            *acc += d;
            Some(*acc - 1)
        })
        .collect();
    let c3 = blocks[stage_ends[2]].cfg.out();
    let c4 = blocks[stage_ends[3]].cfg.out();
    let fusion = cfg.fusion.then(|| Fusion {
        conv: SparseConv::new(store, "fusion.conv", c3, c4, 1, 1, rng),
        norm: Norm::new(store, "fusion.norm", c4),
    });
    let head1 = Linear::new(store, "head.fc1", c4, cfg.head_hidden, true, rng);
    let head2 = Linear::new(store, "head.fc2", cfg.head_hidden, 1, true, rng);
    Ok(Network {
        cfg: cfg.clone(),
        stem,
        blocks,
        stage_ends,
        fusion,
        head1,
        head2,
    })
}

impl Network {
    pub fn map_keys(&self) -> Vec<MapKey> {
        self.cfg.map_keys()
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        let stem: usize = self.stem.iter().map(|(c, n)| c.num_params() + n.num_params()).sum();
        let blocks: usize = self.blocks.iter().map(|b| b.num_params(store)).sum();
        let fusion = self
            .fusion
            .as_ref()
            .map_or(0, |f| f.conv.num_params() + f.norm.num_params());
        stem + blocks + fusion + self.head1.num_params() + self.head2.num_params()
    }

    pub fn audit(&self, store: &ParamStore) -> Audit {
        Audit {
            blocks: self.blocks.len(),
            mamba_positions: self
                .blocks
                .iter()
                .enumerate()
                .filter(|(_, b)| b.attention.kind() == AttentionKind::MambaSe)
                .map(|(i, _)| i + 1)
                .collect(),
            strided_positions: self
                .blocks
                .iter()
                .enumerate()
                .filter(|(_, b)| b.cfg.stride != 1)
                .map(|(i, _)| i + 1)
                .collect(),
            params: self.num_params(store),
        }
    }

    /// Zeroes the fusion alignment conv so fusion passes deep features through.
    pub fn zero_fusion(&self, store: &mut ParamStore) {
        if let Some(f) = &self.fusion {
            store.get_mut(f.conv.weight).data_mut().fill(0.0);
            store.get_mut(f.conv.bias).data_mut().fill(0.0);
        }
    }

    /// Backbone features on the deepest level before pooling.
    pub fn features(&self, s: &mut Session<'_>, geo: &Geometry, x: Var) -> Result<SparseVar> {
        if geo.depth() != DEPTH {
            return Err(Error::Contract(format!("network needs {DEPTH} lattice levels, geometry has {}", geo.depth())));
        }
        let mut h = SparseVar { level: 0, feats: x };
        for (conv, norm) in &self.stem {
            h = conv.forward(s, geo, h)?;
            let f = norm.forward(s, h.feats)?;
            h.feats = s.tape.relu(f);
        }
        let mut tap = None;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(s, geo, h)?;
            if i == self.stage_ends[2] {
                tap = Some(h);
            }
        }
        if let (Some(f), Some(skip)) = (&self.fusion, tap) {
            let p = f.conv.forward(s, geo, skip)?;
            let p = f.norm.forward(s, p.feats)?;
            let n_out = geo.levels[h.level].len();
            let aligned = s.tape.scatter_mean(p, geo.parents[skip.level].clone(), n_out)?;
            h.feats = s.tape.add(h.feats, aligned)?;
        }
        Ok(h)
    }

    /// Standardized prediction, `[batch, 1]`.
    pub fn forward(&self, s: &mut Session<'_>, geo: &Geometry, x: Var) -> Result<Var> {
        let h = self.features(s, geo, x)?;
        let pooled = s.tape.segment_mean(h.feats, geo.offsets[h.level].clone())?;
        let z = self.head1.forward(s, pooled)?;
        let z = s.tape.relu(z);
        self.head2.forward(s, z)
    }
}

/// Fuses `skip` into `deep`: 1³ conv, normalization (train statistics), mean
/// pooling of skip rows onto the coarser lattice, then a residual add.
///
/// Skip rows whose coarse parent is absent from `deep` are ignored.
pub fn feature_fusion(
    deep: &SparseTensor,
    skip: &SparseTensor,
    align: &ConvWeights,
    gamma: &[f64],
    beta: &[f64],
) -> Result<SparseTensor> {
    let (cin, cout) = (skip.channels(), deep.channels());
    let parents = parent_rows(&skip.coords, &deep.coords)?;
    let (rows, parent): (Vec<usize>, Vec<usize>) = parents
        .iter()
        .enumerate()
        .filter_map(|(r, p)| p.map(|p| (r, p)))
        .unzip();
    if rows.is_empty() {
        return Err(Error::Contract("skip and deep tensors share no coordinates".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(skip.feats.clone());
    let w = tape.constant(align.kernel.clone().reshaped(vec![cin, cout])?);
    let y = tape.matmul(x, w)?;
    let y = match &align.bias {
        Some(b) => {
            let b = tape.constant(b.clone());
            tape.add_bias(y, b)?
        }
        None => y,
    };
    let g = tape.constant(DenseTensor::new(vec![cout], gamma.to_vec())?);
    let b = tape.constant(DenseTensor::new(vec![cout], beta.to_vec())?);
    let (y, _) = tape.batch_norm(y, g, b, NORM_EPS)?;
    let y = tape.gather_rows(y, Arc::from(rows))?;
    let aligned = tape.scatter_mean(y, Arc::from(parent), deep.len())?;
    let d = tape.constant(deep.feats.clone());
    let out = tape.add(d, aligned)?;
    SparseTensor::new(deep.coords.clone(), tape.value(out).clone(), deep.voxel_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_audit() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = build_network(&NetworkConfig::default(), &mut store, &mut rng).unwrap();
        let audit = net.audit(&store);
        assert_eq!(audit.to_string(), "blocks=16 mamba_se=4 at [3,7,13,16]");
        assert_eq!(audit.strided_positions, vec![4, 8, 14]);
        assert_eq!(audit.params, store.num_trainable());
    }

    #[test]
    fn invalid_depths_rejected() {
        let cfg = NetworkConfig {
            depths: vec![3, 4, 6, 4],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("sum to 16")));
    }

    #[test]
    fn map_keys_cover_strided_shortcuts() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = build_network(&NetworkConfig::default(), &mut store, &mut rng).unwrap();
        let keys = net.map_keys();
        for l in 0..3 {
            assert!(keys.contains(&(l, 1, 2)));
        }
        for l in 0..4 {
            assert!(keys.contains(&(l, 3, 1)));
        }
    }
}
