//! Squeeze-and-excitation attention and the residual bottleneck blocks.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::params::ParamStore;
use crate::sparse::SparseTensor;
use crate::sparse_ops::{Linear, Norm, Session, SparseConv, SparseVar};
use crate::ssm::{MambaConfig, MambaSe};
use crate::tensor::DenseTensor;

/// Value-level SE parameters: `w1 [C, C/r]`, `w2 [C/r, C]`.
#[derive(Clone, Debug)]
pub struct SeParams {
    pub w1: DenseTensor,
    pub w2: DenseTensor,
}

/// `x' = σ(δ(z W₁) W₂) ⊙ x` with `z` the per-item channel mean.
pub fn se_layer(x: &SparseTensor, p: &SeParams) -> Result<SparseTensor> {
    let c = x.channels();
    if p.w1.shape().first() != Some(&c) || p.w2.shape().get(1) != Some(&c) {
        return Err(Error::Shape(format!("SE weights do not match {c} channels")));
    }
    let mut tape = Tape::new();
    let offsets: Arc<[usize]> = Arc::from(x.coords.batch_offsets());
    let xv = tape.constant(x.feats.clone());
    let w1 = tape.constant(p.w1.clone());
    let w2 = tape.constant(p.w2.clone());
    let z = tape.segment_mean(xv, offsets.clone())?;
    let h = tape.matmul(z, w1)?;
    let h = tape.relu(h);
    let w = tape.matmul(h, w2)?;
    let w = tape.sigmoid(w);
    let y = tape.segment_scale(xv, w, offsets)?;
    SparseTensor::new(x.coords.clone(), tape.value(y).clone(), x.voxel_size)
}

#[derive(Clone, Debug)]
pub struct SeLayer {
    pub channels: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SeLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, reduction: usize, rng: &mut R) -> Self {
        let hidden = (channels / reduction).max(1);
        Self {
            channels,
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, false, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, false, rng),
        }
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params()
    }

    pub fn weights(&self, s: &mut Session<'_>, geo: &Geometry, x: SparseVar) -> Result<Var> {
        let z = s.tape.segment_mean(x.feats, geo.offsets[x.level].clone())?;
        let h = self.fc1.forward(s, z)?;
        let h = s.tape.relu(h);
        let w = self.fc2.forward(s, h)?;
        Ok(s.tape.sigmoid(w))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Se,
    MambaSe,
}

#[derive(Clone, Debug)]
pub enum Attention {
    Se(SeLayer),
    MambaSe(MambaSe),
}

impl Attention {
    pub fn kind(&self) -> AttentionKind {
        match self {
            Attention::Se(_) => AttentionKind::Se,
            Attention::MambaSe(_) => AttentionKind::MambaSe,
        }
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        match self {
            Attention::Se(a) => a.num_params(),
            Attention::MambaSe(a) => a.num_params(store),
        }
    }

    pub fn weights(&self, s: &mut Session<'_>, geo: &Geometry, x: SparseVar) -> Result<Var> {
        match self {
            Attention::Se(a) => a.weights(s, geo, x),
            Attention::MambaSe(a) => a.weights(s, geo, x),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckConfig {
    pub cin: usize,
    pub mid: usize,
    pub expansion: usize,
    pub stride: u32,
    pub attention: AttentionKind,
    pub reduction: usize,
}

impl BottleneckConfig {
    pub fn out(&self) -> usize {
        self.mid * self.expansion
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::Config(format!("bottleneck stride must be 1 or 2, got {}", self.stride)));
        }
        if self.mid == 0 || self.expansion == 0 || self.cin == 0 {
            return Err(Error::Config("bottleneck channel counts must be positive".into()));
        }
        if self.reduction == 0 || self.out() % self.reduction != 0 {
            return Err(Error::Config(format!(
                "{} output channels not divisible by reduction {}",
                self.out(),
                self.reduction
            )));
        }
        Ok(())
    }
}

/// 1³ → 3³ (strided) → 1³ convolutions with norms, channel attention, and a
/// residual shortcut, followed by ReLU.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub cfg: BottleneckConfig,
    pub conv1: SparseConv,
    pub norm1: Norm,
    pub conv2: SparseConv,
    pub norm2: Norm,
    pub conv3: SparseConv,
    pub norm3: Norm,
    pub attention: Attention,
    pub shortcut: Option<(SparseConv, Norm)>,
}

impl Bottleneck {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: BottleneckConfig, mamba: &MambaConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (mid, out) = (cfg.mid, cfg.out());
        let conv1 = SparseConv::new(store, &format!("{name}.conv1"), cfg.cin, mid, 1, 1, rng);
        let norm1 = Norm::new(store, &format!("{name}.norm1"), mid);
        let conv2 = SparseConv::new(store, &format!("{name}.conv2"), mid, mid, 3, cfg.stride, rng);
        let norm2 = Norm::new(store, &format!("{name}.norm2"), mid);
        let conv3 = SparseConv::new(store, &format!("{name}.conv3"), mid, out, 1, 1, rng);
        let norm3 = Norm::new(store, &format!("{name}.norm3"), out);
        let attention = match cfg.attention {
            AttentionKind::Se => Attention::Se(SeLayer::new(store, &format!("{name}.se"), out, cfg.reduction, rng)),
            AttentionKind::MambaSe => Attention::MambaSe(MambaSe::new(
                store,
                &format!("{name}.mamba_se"),
                out,
                cfg.reduction,
                mamba,
                rng,
            )),
        };
        let shortcut = (cfg.stride != 1 || cfg.cin != out).then(|| {
            (
                SparseConv::new(store, &format!("{name}.shortcut"), cfg.cin, out, 1, cfg.stride, rng),
                Norm::new(store, &format!("{name}.shortcut_norm"), out),
            )
        });
        Ok(Self {
            cfg,
            conv1,
            norm1,
            conv2,
            norm2,
            conv3,
            norm3,
            attention,
            shortcut,
        })
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        let convs = self.conv1.num_params() + self.conv2.num_params() + self.conv3.num_params();
        let norms = self.norm1.num_params() + self.norm2.num_params() + self.norm3.num_params();
        let sc = self
            .shortcut
            .as_ref()
            .map_or(0, |(c, n)| c.num_params() + n.num_params());
        convs + norms + sc + self.attention.num_params(store)
    }

    pub fn forward(&self, s: &mut Session<'_>, geo: &Geometry, x: SparseVar) -> Result<SparseVar> {
        let h = self.conv1.forward(s, geo, x)?;
        let f = self.norm1.forward(s, h.feats)?;
        let f = s.tape.relu(f);
        let h = self.conv2.forward(s, geo, SparseVar { level: h.level, feats: f })?;
        let f = self.norm2.forward(s, h.feats)?;
        let f = s.tape.relu(f);
        let h = self.conv3.forward(s, geo, SparseVar { level: h.level, feats: f })?;
        let f = self.norm3.forward(s, h.feats)?;
        let h = SparseVar { level: h.level, feats: f };
        let w = self.attention.weights(s, geo, h)?;
        let f = s.tape.segment_scale(h.feats, w, geo.offsets[h.level].clone())?;
        let sc = match &self.shortcut {
            Some((conv, norm)) => {
                let p = conv.forward(s, geo, x)?;
                norm.forward(s, p.feats)?
            }
            None => x.feats,
        };
        let y = s.tape.add(f, sc)?;
        Ok(SparseVar {
            level: h.level,
            feats: s.tape.relu(y),
        })
    }
}
