//! Selective state-space scan, the Mamba block, and the sparse-to-sequence
//! adaptation that turns a batch item's voxels into a scan input.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::params::{normal, ParamId, ParamStore};
use crate::sparse_ops::{Linear, Session, SparseVar};
use crate::tensor::DenseTensor;

/// Rows of one batch item arranged on an `side × side` grid.
///
/// `kept` are the first `side²` rows in canonical coordinate order; the
/// remainder is cropped. The scan visits `kept` in row-major grid order,
/// which is the same order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridSeq {
    pub side: usize,
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
}

impl GridSeq {
    pub fn seq_len(&self) -> usize {
        self.side * self.side
    }
}

fn isqrt(n: usize) -> usize {
    let mut s = (n as f64).sqrt() as usize;
    while s * s > n {
        s -= 1;
    }
    while (s + 1) * (s + 1) <= n {
        s += 1;
    }
    s
}

/// Grid layout for `n` rows: `side = floor(sqrt(n))`, crop-only.
pub fn grid_for_len(n: usize) -> Result<GridSeq> {
    if n == 0 {
        return Err(Error::Contract("cannot arrange zero rows on a grid".into()));
    }
    let side = isqrt(n);
    Ok(GridSeq {
        side,
        kept: (0..side * side).collect(),
        dropped: (side * side..n).collect(),
    })
}

pub fn reshape_to_grid(feats: &DenseTensor) -> Result<GridSeq> {
    let (n, _) = feats.dims2()?;
    grid_for_len(n)
}

/// Parameters of a time-invariant diagonal scan, one state vector per channel.
#[derive(Clone, Debug)]
pub struct LtiParams {
    /// Discretized state transition `[C, N]`.
    pub abar: DenseTensor,
    /// Discretized input gain `[C, N]`.
    pub bbar: DenseTensor,
    /// Readout `[C, N]`.
    pub c: DenseTensor,
    /// Skip gain `[C]`.
    pub d: DenseTensor,
    /// Initial state `[C, N]`; zero when absent.
    pub h0: Option<Vec<f64>>,
}

impl LtiParams {
    /// Zero-order-hold discretization of `A` with step `delta`, Euler input gain.
    pub fn discretize(a: &DenseTensor, b: &DenseTensor, c: DenseTensor, d: DenseTensor, delta: &[f64]) -> Result<Self> {
        let (ch, n) = a.dims2()?;
        if delta.len() != ch || b.shape() != [ch, n] {
            return Err(Error::Shape("discretize: inconsistent shapes".into()));
        }
        let mut abar = vec![0.0; ch * n];
        let mut bbar = vec![0.0; ch * n];
        for k in 0..ch {
            for s in 0..n {
                abar[k * n + s] = (delta[k] * a.data()[k * n + s]).exp();
                bbar[k * n + s] = delta[k] * b.data()[k * n + s];
            }
        }
        Ok(Self {
            abar: DenseTensor::new(vec![ch, n], abar)?,
            bbar: DenseTensor::new(vec![ch, n], bbar)?,
            c,
            d,
            h0: None,
        })
    }
}

/// Linear recurrence `h_t = Ā h_{t-1} + B̄ x_t`, `y_t = C h_t + D x_t` over `x[T, C]`.
pub fn lti_scan(x: &DenseTensor, p: &LtiParams) -> Result<DenseTensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let a = tape.constant(p.abar.clone());
    let b = tape.constant(p.bbar.clone());
    let c = tape.constant(p.c.clone());
    let d = tape.constant(p.d.clone());
    let y = tape.lti_scan(xv, a, b, c, d, p.h0.as_deref())?;
    Ok(tape.value(y).clone())
}

/// Input-dependent projections of the selective scan over `x[T, C]`.
///
/// `Δ_t = softplus(x_t W_Δ + b_Δ)`, `B_t = x_t W_B + b_B`, `C_t = x_t W_C + b_C`.
#[derive(Clone, Debug)]
pub struct SelectiveParams {
    /// State matrix diagonal `[C, N]`, negative entries.
    pub a: DenseTensor,
    pub d: DenseTensor,
    pub w_delta: DenseTensor,
    pub b_delta: DenseTensor,
    pub w_b: DenseTensor,
    pub b_b: DenseTensor,
    pub w_c: DenseTensor,
    pub b_c: DenseTensor,
}

pub fn selective_scan(x: &DenseTensor, p: &SelectiveParams) -> Result<DenseTensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let proj = |tape: &mut Tape, w: &DenseTensor, b: &DenseTensor| -> Result<Var> {
        let wv = tape.constant(w.clone());
        let bv = tape.constant(b.clone());
        let y = tape.matmul(xv, wv)?;
        tape.add_bias(y, bv)
    };
    let dl = proj(&mut tape, &p.w_delta, &p.b_delta)?;
    let delta = tape.softplus(dl);
    let b = proj(&mut tape, &p.w_b, &p.b_b)?;
    let c = proj(&mut tape, &p.w_c, &p.b_c)?;
    let a = tape.constant(p.a.clone());
    let d = tape.constant(p.d.clone());
    let y = tape.selective_scan(xv, delta, a, b, c, d)?;
    Ok(tape.value(y).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MambaConfig {
    pub state_dim: usize,
    pub expand: usize,
    pub conv_width: usize,
}

impl Default for MambaConfig {
    fn default() -> Self {
        Self {
            state_dim: 16,
            expand: 2,
            conv_width: 4,
        }
    }
}

impl MambaConfig {
    pub fn dt_rank(&self, d_model: usize) -> usize {
        d_model.div_ceil(16)
    }
}

/// Mamba block on a `[T, C]` sequence with a residual connection.
///
/// in-projection (two branches of width `expand·C`) → causal depthwise conv
/// → SiLU → selective scan → gate by SiLU of the second branch →
/// out-projection → `+ input`.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub d_model: usize,
    pub d_inner: usize,
    pub state_dim: usize,
    pub dt_rank: usize,
    pub in_x: Linear,
    pub in_z: Linear,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub x_dt: Linear,
    pub x_b: Linear,
    pub x_c: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub d: ParamId,
    pub out: Linear,
}

impl MambaBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_model: usize, cfg: &MambaConfig, rng: &mut R) -> Self {
        let d_inner = cfg.expand * d_model;
        let n = cfg.state_dim;
        let dt_rank = cfg.dt_rank(d_model);
        let in_x = Linear::new(store, &format!("{name}.in_x"), d_model, d_inner, false, rng);
        let in_z = Linear::new(store, &format!("{name}.in_z"), d_model, d_inner, false, rng);
        let conv_w = store.add_param(
            &format!("{name}.conv.weight"),
            normal(rng, &[d_inner, cfg.conv_width], (1.0 / cfg.conv_width as f64).sqrt()),
        );
        let conv_b = store.add_param(&format!("{name}.conv.bias"), DenseTensor::zeros(&[d_inner]));
        let x_dt = Linear::new(store, &format!("{name}.x_dt"), d_inner, dt_rank, false, rng);
        let x_b = Linear::new(store, &format!("{name}.x_b"), d_inner, n, false, rng);
        let x_c = Linear::new(store, &format!("{name}.x_c"), d_inner, n, false, rng);
        let dt_proj = Linear::new(store, &format!("{name}.dt_proj"), dt_rank, d_inner, true, rng);
        // Δ starts log-uniform in [1e-3, 1e-1]; store its softplus inverse as bias.
        let bias: Vec<f64> = (0..d_inner)
            .map(|_| {
                let dt: f64 = (rng.random::<f64>() * (0.1f64.ln() - 1e-3f64.ln()) + 1e-3f64.ln()).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        store
            .get_mut(dt_proj.bias.expect("dt bias"))
            .data_mut()
            .copy_from_slice(&bias);
        let a_log: Vec<f64> = (0..d_inner).flat_map(|_| (1..=n).map(|k| (k as f64).ln())).collect();
        let a_log = store.add_param(&format!("{name}.a_log"), DenseTensor::new(vec![d_inner, n], a_log).expect("shape"));
        let d = store.add_param(&format!("{name}.d"), DenseTensor::full(&[d_inner], 1.0));
        let out = Linear::new(store, &format!("{name}.out"), d_inner, d_model, false, rng);
        Self {
            d_model,
            d_inner,
            state_dim: n,
            dt_rank,
            in_x,
            in_z,
            conv_w,
            conv_b,
            x_dt,
            x_b,
            x_c,
            dt_proj,
            a_log,
            d,
            out,
        }
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        [
            self.in_x.num_params(),
            self.in_z.num_params(),
            self.x_dt.num_params(),
            self.x_b.num_params(),
            self.x_c.num_params(),
            self.dt_proj.num_params(),
            self.out.num_params(),
        ]
        .iter()
        .sum::<usize>()
            + [self.conv_w, self.conv_b, self.a_log, self.d]
                .iter()
                .map(|id| store.get(*id).numel())
                .sum::<usize>()
    }

    /// Zeroes every projection so the block reduces to its residual path.
    pub fn zero_projections(&self, store: &mut ParamStore) {
        for l in [&self.in_x, &self.in_z, &self.x_dt, &self.x_b, &self.x_c, &self.out] {
            l.zero(store);
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, seq: Var) -> Result<Var> {
        let (t_len, c) = s.tape.value(seq).dims2()?;
        if t_len == 0 {
            return Err(Error::Contract("mamba block needs at least one step".into()));
        }
        if c != self.d_model {
            return Err(Error::Shape(format!("mamba block expects {} channels, got {c}", self.d_model)));
        }
        let ux = self.in_x.forward(s, seq)?;
        let z = self.in_z.forward(s, seq)?;
        let cw = s.param(self.conv_w);
        let cb = s.param(self.conv_b);
        let u = s.tape.depthwise_conv1d(ux, cw, cb)?;
        let u = s.tape.silu(u);
        let dt_low = self.x_dt.forward(s, u)?;
        let dt = self.dt_proj.forward(s, dt_low)?;
        let delta = s.tape.softplus(dt);
        let b = self.x_b.forward(s, u)?;
        let cm = self.x_c.forward(s, u)?;
        let a_log = s.param(self.a_log);
        let a = s.tape.exp(a_log);
        let a = s.tape.scale(a, -1.0);
        let d = s.param(self.d);
        let y = s.tape.selective_scan(u, delta, a, b, cm, d)?;
        let gate = s.tape.silu(z);
        let y = s.tape.mul(y, gate)?;
        let y = self.out.forward(s, y)?;
        s.tape.add(y, seq)
    }
}

/// Channel recalibration from a scan over each batch item's voxels.
///
/// Per item: crop to a square grid, run the Mamba block over the row-major
/// sequence, average over positions, then `sigmoid(FC(GELU(FC(·))))`.
#[derive(Clone, Debug)]
pub struct MambaSe {
    pub channels: usize,
    pub mamba: MambaBlock,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MambaSe {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, reduction: usize, cfg: &MambaConfig, rng: &mut R) -> Self {
        let hidden = (channels / reduction).max(1);
        Self {
            channels,
            mamba: MambaBlock::new(store, &format!("{name}.mamba"), channels, cfg, rng),
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, false, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, false, rng),
        }
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        self.mamba.num_params(store) + self.fc1.num_params() + self.fc2.num_params()
    }

    pub fn zero_projections(&self, store: &mut ParamStore) {
        self.mamba.zero_projections(store);
        self.fc1.zero(store);
        self.fc2.zero(store);
    }

    /// Weights `[batch, channels]`, each strictly inside `(0, 1)` for finite input.
    pub fn weights(&self, s: &mut Session<'_>, geo: &Geometry, x: SparseVar) -> Result<Var> {
        let offsets = geo.offsets[x.level].clone();
        let mut pooled = Vec::with_capacity(offsets.len() - 1);
        for item in 0..offsets.len() - 1 {
            let (lo, hi) = (offsets[item], offsets[item + 1]);
            if lo == hi {
                return Err(Error::Domain(format!("batch item {item} has no coordinates")));
            }
            let grid = grid_for_len(hi - lo)?;
            let rows: Arc<[usize]> = grid.kept.iter().map(|r| r + lo).collect();
            let seq = s.tape.gather_rows(x.feats, rows)?;
            let y = self.mamba.forward(s, seq)?;
            let m = s.tape.mean(y, 0)?;
            pooled.push(s.tape.reshape(m, vec![1, self.channels])?);
        }
        let z = s.tape.concat_rows(&pooled)?;
        let h = self.fc1.forward(s, z)?;
        let h = s.tape.gelu(h);
        let w = self.fc2.forward(s, h)?;
        Ok(s.tape.sigmoid(w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_examples() {
        let g = grid_for_len(9).unwrap();
        assert_eq!((g.side, g.kept.len(), g.dropped.len()), (3, 9, 0));
        let g = grid_for_len(10).unwrap();
        assert_eq!((g.side, g.dropped.clone()), (3, vec![9]));
        let g = grid_for_len(2).unwrap();
        assert_eq!((g.side, g.kept.clone(), g.dropped.clone()), (1, vec![0], vec![1]));
        assert!(matches!(grid_for_len(0), Err(Error::Contract(_))));
    }

    #[test]
    fn grid_partitions_rows() {
        for n in 1..300 {
            let g = grid_for_len(n).unwrap();
            assert_eq!(g.side, (n as f64).sqrt().floor() as usize);
            let mut all: Vec<usize> = g.kept.iter().chain(&g.dropped).copied().collect();
            all.sort();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }

    fn lti(abar: f64, bbar: f64, c: f64, d: f64, ch: usize, n: usize) -> LtiParams {
        LtiParams {
            abar: DenseTensor::full(&[ch, n], abar),
            bbar: DenseTensor::full(&[ch, n], bbar),
            c: DenseTensor::full(&[ch, n], c),
            d: DenseTensor::full(&[ch], d),
            h0: None,
        }
    }

    #[test]
    fn lti_zero_transition_is_memoryless() {
        let x = DenseTensor::new(vec![4, 1], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let p = lti(0.0, 0.5, 2.0, 0.25, 1, 3);
        let y = lti_scan(&x, &p).unwrap();
        // C·B̄ summed over 3 states = 3, plus D = 0.25
        for (yv, xv) in y.data().iter().zip(x.data()) {
            assert!((yv - 3.25 * xv).abs() < 1e-15);
        }
    }

    #[test]
    fn lti_single_step() {
        let x = DenseTensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap();
        let p = lti(0.9, 0.5, 2.0, 0.1, 2, 1);
        let y = lti_scan(&x, &p).unwrap();
        assert_eq!(y.data(), &[2.0 * 0.5 * 2.0 + 0.2, -(0.5 * 2.0) - 0.1]);
    }

    #[test]
    fn lti_rejects_non_finite() {
        let x = DenseTensor::zeros(&[2, 1]);
        let p = lti(f64::NAN, 0.5, 2.0, 0.1, 1, 1);
        assert!(matches!(lti_scan(&x, &p), Err(Error::Numeric(_))));
    }

    #[test]
    fn selective_with_zero_input_projection_is_skip_only() {
        let (t, c, n) = (5, 3, 4);
        let x = DenseTensor::new(vec![t, c], (0..t * c).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let p = SelectiveParams {
            a: DenseTensor::full(&[c, n], -1.0),
            d: DenseTensor::new(vec![c], vec![0.5, -1.5, 2.0]).unwrap(),
            w_delta: DenseTensor::full(&[c, c], 0.3),
            b_delta: DenseTensor::zeros(&[c]),
            w_b: DenseTensor::zeros(&[c, n]),
            b_b: DenseTensor::zeros(&[n]),
            w_c: DenseTensor::full(&[c, n], 0.7),
            b_c: DenseTensor::full(&[n], 0.1),
        };
        let y = selective_scan(&x, &p).unwrap();
        for r in 0..t {
            for k in 0..c {
                assert_eq!(y.data()[r * c + k], p.d.data()[k] * x.data()[r * c + k]);
            }
        }
    }
}
