//! Central finite-difference gradient checks.
//!
//! Each check reduces the output to a scalar with a fixed pseudo-random
//! projection, so that structurally zero-sum outputs (normalization, softmax
//! style ops) still produce informative gradients.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Binary, Broadcast, ReduceKind, Tape, Var};
use crate::blocks::{AttentionKind, Bottleneck, BottleneckConfig};
use crate::error::Result;
use crate::geometry::Geometry;
use crate::network::{build_network, NetworkConfig, DEPTH};
use crate::params::{ParamId, ParamStore};
use crate::sparse::{build_kernel_map, Coords, KernelMap};
use crate::sparse_ops::{Mode, Session, SparseVar};
use crate::ssm::MambaConfig;
use crate::tensor::DenseTensor;

/// Tolerance for single operations.
pub const OP_TOL: f64 = 1e-4;
/// Tolerance for whole networks.
pub const NET_TOL: f64 = 1e-3;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-5;
/// Floor for whole networks, where finite differences of exactly-zero
/// gradients (biases ahead of a norm) carry round-off near 1e-8.
pub const NET_FLOOR: f64 = 1e-4;
/// Largest share of entries a check may set aside as ReLU kinks.
pub const MAX_KINK_SHARE: f64 = 0.01;
const KINK_RATIO: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel: f64,
    pub entries: usize,
    pub tol: f64,
    /// Entries whose step straddled a kink, left out of `max_rel`.
    pub kinks: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel < self.tol && self.kinks as f64 <= MAX_KINK_SHARE * self.entries as f64
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} {} max_rel={:.3e} tol={:.0e} entries={} kinks={}",
            self.name,
            if self.passed() { "ok  " } else { "FAIL" },
            self.max_rel,
            self.tol,
            self.entries,
            self.kinks
        )
    }
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    rel_err_floor(analytic, numeric, REL_FLOOR)
}

pub fn rel_err_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn projection(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i as f64) * 1.618 + 0.5).sin() + 0.1).collect()
}

fn project(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let n = tape.value(out).numel();
    let r = tape.constant(DenseTensor::new(shape, projection(n))?);
    let p = tape.mul(out, r)?;
    let flat = tape.reshape(p, vec![n])?;
    tape.sum(flat, 0)
}

/// Checks `f` with respect to every entry of every input.
pub fn check_op<F>(name: &str, inputs: &[DenseTensor], eps: f64, tol: f64, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[DenseTensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let l = project(&mut tape, out)?;
        Ok(tape.value(l).data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = f(&mut tape, &vars)?;
    let l = project(&mut tape, out)?;
    let grads = tape.backward(l)?;
    let mut max_rel: f64 = 0.0;
    let mut entries = 0;
    let mut vals = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let g = grads.wrt(*v);
        for j in 0..inputs[i].numel() {
            let orig = vals[i].data()[j];
            vals[i].data_mut()[j] = orig + eps;
            let up = eval(&vals)?;
            vals[i].data_mut()[j] = orig - eps;
            let down = eval(&vals)?;
            vals[i].data_mut()[j] = orig;
            max_rel = max_rel.max(rel_err(g.data()[j], (up - down) / (2.0 * eps)));
            entries += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel,
        entries,
        tol,
        kinks: 0,
    })
}

/// Checks a train-mode forward pass with respect to its input features and a
/// spread of entries from every trainable parameter.
pub fn check_model<F>(
    name: &str,
    store: &mut ParamStore,
    input: &DenseTensor,
    per_param: usize,
    eps: f64,
    tol: f64,
    floor: f64,
    f: F,
) -> Result<CheckResult>
where
    F: Fn(&mut Session<'_>, Var) -> Result<Var>,
{
    let eval = |store: &mut ParamStore, x: &DenseTensor| -> Result<f64> {
        let mut s = Session::new(store, Mode::Train);
        let xv = s.tape.constant(x.clone());
        let out = f(&mut s, xv)?;
        let l = project(&mut s.tape, out)?;
        Ok(s.tape.value(l).data()[0])
    };
    let (gx, tape, grads) = {
        let mut s = Session::new(store, Mode::Train);
        let xv = s.tape.leaf(input.clone().with_grad());
        let out = f(&mut s, xv)?;
        let l = project(&mut s.tape, out)?;
        let grads = s.tape.backward(l)?;
        let gx = grads.wrt(xv);
        (gx, std::mem::take(&mut s.tape), grads)
    };
    store.zero_grads();
    tape.write_param_grads(&grads, store);
    let center = eval(store, input)?;
    let mut max_rel: f64 = 0.0;
    let mut kinks = 0;
    // a failing entry counts as a kink when the analytic value sits on one
    // side's slope and the two sides disagree far more than that
    let mut record = |analytic: f64, up: f64, down: f64| {
        let err = rel_err_floor(analytic, (up - down) / (2.0 * eps), floor);
        let (fwd, bwd) = ((up - center) / eps, (center - down) / eps);
        let near = (analytic - fwd).abs().min((analytic - bwd).abs());
        if err >= tol && near < KINK_RATIO * (fwd - bwd).abs() {
            kinks += 1;
        } else {
            max_rel = max_rel.max(err);
        }
    };
    let mut entries = 0;
    let mut x = input.clone();
    for j in 0..x.numel() {
        let orig = x.data()[j];
        x.data_mut()[j] = orig + eps;
        let up = eval(store, &x)?;
        x.data_mut()[j] = orig - eps;
        let down = eval(store, &x)?;
        x.data_mut()[j] = orig;
        record(gx.data()[j], up, down);
        entries += 1;
    }
    let ids: Vec<ParamId> = store.trainable().collect();
    for id in ids {
        let n = store.get(id).numel();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|k| k * (n - 1) / (per_param - 1).max(1)).collect()
        };
        for j in picks {
            let analytic = store.get(id).grad.as_ref().map_or(0.0, |g| g[j]);
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + eps;
            let up = eval(store, input)?;
            store.get_mut(id).data_mut()[j] = orig - eps;
            let down = eval(store, input)?;
            store.get_mut(id).data_mut()[j] = orig;
            record(analytic, up, down);
            entries += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel,
        entries,
        tol,
        kinks,
    })
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> DenseTensor {
    let n = shape.iter().product();
    DenseTensor::new(shape.to_vec(), (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()).expect("shape")
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseTensor {
    let mut t = rand_t(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

/// Random occupied voxels in a `side³` box split over `batch` items.
pub fn random_coords(rng: &mut ChaCha8Rng, n: usize, side: i32, batch: usize) -> Coords {
    let mut pts = std::collections::BTreeSet::new();
    while pts.len() < n {
        pts.insert([
            rng.random_range(0..batch as i32),
            rng.random_range(0..side),
            rng.random_range(0..side),
            rng.random_range(0..side),
        ]);
    }
    Coords::from_unsorted(pts.into_iter().collect(), 1, batch).expect("valid coords")
}

fn sparse_case(rng: &mut ChaCha8Rng, k: u32, stride: u32) -> Result<(Arc<KernelMap>, usize)> {
    let coords = random_coords(rng, 12, 4, 2);
    let n = coords.len();
    Ok((Arc::new(build_kernel_map(&coords, k, stride)?), n))
}

fn unary_cases() -> Vec<(&'static str, fn(&mut Tape, Var) -> Var)> {
    vec![
        ("relu", Tape::relu),
        ("gelu", Tape::gelu),
        ("sigmoid", Tape::sigmoid),
        ("silu", Tape::silu),
        ("softplus", Tape::softplus),
        ("exp", Tape::exp),
    ]
}

/// Every differentiable tape operation.
pub fn op_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-6;
    let mut out = Vec::new();
    let a = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_t(&mut rng, &[4, 2], -1.0, 1.0);
    out.push(check_op("matmul", &[a.clone(), b], eps, OP_TOL, |t, v| t.matmul(v[0], v[1]))?);
    let c = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
    for (name, op) in [("add", Binary::Add), ("sub", Binary::Sub), ("mul", Binary::Mul)] {
        out.push(check_op(name, &[a.clone(), c.clone()], eps, OP_TOL, move |t, v| t.binary(op, v[0], v[1]))?);
    }
    let bias = rand_t(&mut rng, &[4], -1.0, 1.0);
    let rows = rand_t(&mut rng, &[3], -1.0, 1.0);
    out.push(check_op("broadcast_add", &[a.clone(), bias.clone()], eps, OP_TOL, |t, v| {
        t.broadcast(Binary::Add, v[0], v[1], Broadcast::Leading)
    })?);
    out.push(check_op("broadcast_mul_leading", &[a.clone(), bias], eps, OP_TOL, |t, v| {
        t.broadcast(Binary::Mul, v[0], v[1], Broadcast::Leading)
    })?);
    out.push(check_op("broadcast_mul_trailing", &[a.clone(), rows], eps, OP_TOL, |t, v| {
        t.broadcast(Binary::Mul, v[0], v[1], Broadcast::Trailing)
    })?);
    out.push(check_op("scale", &[a.clone()], eps, OP_TOL, |t, v| Ok(t.scale(v[0], -2.5)))?);
    let kinked = away_from_zero(&mut rng, &[3, 4]);
    for (name, f) in unary_cases() {
        out.push(check_op(name, &[kinked.clone()], eps, OP_TOL, move |t, v| Ok(f(t, v[0])))?);
    }
    for (name, kind) in [("sum", ReduceKind::Sum), ("mean", ReduceKind::Mean), ("max", ReduceKind::Max)] {
        for axis in 0..2 {
            out.push(check_op(&format!("reduce_{name}_axis{axis}"), &[a.clone()], eps, OP_TOL, move |t, v| {
                t.reduce(kind, v[0], axis)
            })?);
        }
    }
    out.push(check_op("mean_all", &[a.clone()], eps, OP_TOL, |t, v| t.mean_all(v[0]))?);
    out.push(check_op("reshape", &[a.clone()], eps, OP_TOL, |t, v| t.reshape(v[0], vec![2, 6]))?);
    out.push(check_op("gather_rows", &[a.clone()], eps, OP_TOL, |t, v| {
        t.gather_rows(v[0], Arc::from(vec![2, 0, 2]))
    })?);
    out.push(check_op("concat_rows", &[a.clone(), c], eps, OP_TOL, |t, v| t.concat_rows(&[v[0], v[1]]))?);

    let feats = rand_t(&mut rng, &[5, 3], -1.0, 1.0);
    let offsets: Arc<[usize]> = Arc::from(vec![0, 2, 5]);
    let o2 = offsets.clone();
    out.push(check_op("segment_mean", &[feats.clone()], eps, OP_TOL, move |t, v| t.segment_mean(v[0], o2.clone()))?);
    let w = rand_t(&mut rng, &[2, 3], 0.1, 1.0);
    out.push(check_op("segment_scale", &[feats.clone(), w], eps, OP_TOL, move |t, v| {
        t.segment_scale(v[0], v[1], offsets.clone())
    })?);
    out.push(check_op("scatter_mean", &[feats.clone()], eps, OP_TOL, |t, v| {
        t.scatter_mean(v[0], Arc::from(vec![1, 0, 1, 2, 1]), 3)
    })?);

    for (k, stride) in [(3, 1), (3, 2), (1, 2)] {
        let (km, n) = sparse_case(&mut rng, k, stride)?;
        let vol = (k as usize).pow(3);
        let x = rand_t(&mut rng, &[n, 3], -1.0, 1.0);
        let w = rand_t(&mut rng, &[vol, 3, 2], -1.0, 1.0);
        let b = rand_t(&mut rng, &[2], -1.0, 1.0);
        out.push(check_op(&format!("sparse_conv_k{k}_s{stride}"), &[x, w, b], eps, OP_TOL, move |t, v| {
            t.sparse_conv(v[0], v[1], Some(v[2]), km.clone())
        })?);
    }

    let x = rand_t(&mut rng, &[6, 3], -1.0, 1.0);
    let gamma = rand_t(&mut rng, &[3], 0.5, 1.5);
    let beta = rand_t(&mut rng, &[3], -0.5, 0.5);
    out.push(check_op("batch_norm", &[x.clone(), gamma.clone(), beta.clone()], eps, OP_TOL, |t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], 1e-5)?.0)
    })?);
    out.push(check_op("frozen_norm", &[x, gamma, beta], eps, OP_TOL, |t, v| {
        t.frozen_norm(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)
    })?);

    let u = rand_t(&mut rng, &[7, 3], -1.0, 1.0);
    let cw = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
    let cb = rand_t(&mut rng, &[3], -1.0, 1.0);
    out.push(check_op("depthwise_conv1d", &[u.clone(), cw, cb], eps, OP_TOL, |t, v| {
        t.depthwise_conv1d(v[0], v[1], v[2])
    })?);

    let delta = rand_t(&mut rng, &[7, 3], 0.05, 0.8);
    let a_mat = rand_t(&mut rng, &[3, 2], -2.0, -0.2);
    let bm = rand_t(&mut rng, &[7, 2], -1.0, 1.0);
    let cm = rand_t(&mut rng, &[7, 2], -1.0, 1.0);
    let d = rand_t(&mut rng, &[3], -1.0, 1.0);
    out.push(check_op("selective_scan", &[u.clone(), delta, a_mat, bm, cm, d.clone()], eps, OP_TOL, |t, v| {
        t.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5])
    })?);
    let abar = rand_t(&mut rng, &[3, 2], -0.9, 0.9);
    let bbar = rand_t(&mut rng, &[3, 2], -1.0, 1.0);
    let cc = rand_t(&mut rng, &[3, 2], -1.0, 1.0);
    let h0: Vec<f64> = (0..6).map(|i| 0.1 * i as f64 - 0.2).collect();
    out.push(check_op("lti_scan", &[u, abar, bbar, cc, d], eps, OP_TOL, move |t, v| {
        t.lti_scan(v[0], v[1], v[2], v[3], v[4], Some(&h0))
    })?);
    Ok(out)
}

/// Moves every trainable parameter off its initial value so that no
/// activation sits exactly on a kink.
pub fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<ParamId> = store.trainable().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += scale * (2.0 * rng.random::<f64>() - 1.0);
        }
    }
}

/// Both bottleneck variants, each strided and not, on small random inputs.
pub fn block_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mamba = MambaConfig {
        state_dim: 3,
        expand: 2,
        conv_width: 4,
    };
    let mut out = Vec::new();
    for attention in [AttentionKind::Se, AttentionKind::MambaSe] {
        for stride in [1u32, 2] {
            let coords = random_coords(&mut rng, 6, 3, 1);
            let n = coords.len();
            let geo = Geometry::build(coords, 2, &[(0, 3, 1), (0, 1, 2)])?;
            let mut store = ParamStore::new();
            let cfg = BottleneckConfig {
                cin: 3,
                mid: 2,
                expansion: 4,
                stride,
                attention,
                reduction: 2,
            };
            let block = Bottleneck::new(&mut store, "b", cfg, &mamba, &mut rng)?;
            jitter(&mut store, &mut rng, 0.1);
            let x = rand_t(&mut rng, &[n, 3], -1.0, 1.0);
            let name = format!("{attention:?}_bottleneck_s{stride}").to_lowercase();
            out.push(check_model(&name, &mut store, &x, 6, 1e-5, OP_TOL, REL_FLOOR, |s, xv| {
                Ok(block.forward(s, &geo, SparseVar { level: 0, feats: xv })?.feats)
            })?);
        }
    }
    Ok(out)
}

/// Small configuration with the full block layout, for end-to-end checks.
pub fn tiny_network_config() -> NetworkConfig {
    NetworkConfig {
        stem_channels: 4,
        widths: vec![2, 2, 2, 2],
        se_reduction: 4,
        head_hidden: 4,
        mamba: MambaConfig {
            state_dim: 2,
            expand: 2,
            conv_width: 4,
        },
        ..NetworkConfig::default()
    }
}

/// Whole network on at most 30 voxels split over two batch items.
pub fn network_check(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_network_config();
    let coords = random_coords(&mut rng, 30, 6, 2);
    let n = coords.len();
    let geo = Geometry::build(coords, DEPTH, &cfg.map_keys())?;
    let mut store = ParamStore::new();
    let net = build_network(&cfg, &mut store, &mut rng)?;
    jitter(&mut store, &mut rng, 0.1);
    let x = rand_t(&mut rng, &[n, cfg.in_channels()], 0.0, 1.0);
    check_model("network_end_to_end", &mut store, &x, 2, 1e-6, NET_TOL, NET_FLOOR, |s, xv| net.forward(s, &geo, xv))
}

pub fn full_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut all = op_suite(seed)?;
    all.extend(block_suite(seed)?);
    all.push(network_check(seed)?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // exp(x) checked against the derivative of a different function
        let x = DenseTensor::new(vec![2], vec![0.3, -0.4]).unwrap();
        let ok = check_op("exp", &[x.clone()], 1e-6, OP_TOL, |t, v| Ok(t.exp(v[0]))).unwrap();
        assert!(ok.passed());
        let bad = check_op("exp_scaled", &[x], 1e-6, OP_TOL, |t, v| {
            let y = t.exp(v[0]);
            // a constant that secretly depends on the input value
            let hidden = t.value(v[0]).clone();
            let c = t.constant(hidden);
            t.add(y, c)
        })
        .unwrap();
        assert!(!bad.passed());
    }

    #[test]
    fn rel_err_uses_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-9, 0.0) - 1e-4).abs() < 1e-12);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
