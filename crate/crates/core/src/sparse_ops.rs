//! Sparse convolution, pooling and normalization layers.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::params::{he_normal, ParamId, ParamStore};
use crate::sparse::{KernelMap, SparseTensor};
use crate::tensor::DenseTensor;

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a fresh tape plus the parameters it reads.
pub struct Session<'a> {
    pub tape: Tape,
    pub store: &'a mut ParamStore,
    pub mode: Mode,
    /// Weight of the current batch in train-mode running statistics.
    pub norm_momentum: f64,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a mut ParamStore, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            mode,
            norm_momentum: NORM_MOMENTUM,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

/// Feature rows living on one lattice level of a [`Geometry`].
#[derive(Clone, Copy, Debug)]
pub struct SparseVar {
    pub level: usize,
    pub feats: Var,
}

/// Convolution weights: kernel `[k³, C_in, C_out]` and bias `[C_out]`.
#[derive(Clone, Debug)]
pub struct ConvWeights {
    pub kernel: DenseTensor,
    pub bias: Option<DenseTensor>,
}

/// Generalized sparse convolution evaluated only at the kernel map's output
/// coordinates.
pub fn sparse_conv(x: &SparseTensor, w: &ConvWeights, km: &KernelMap) -> Result<SparseTensor> {
    if km.in_len != x.len() || km.in_fingerprint != x.coords.fingerprint() {
        return Err(Error::Contract(
            "kernel map was built for different input coordinates".into(),
        ));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.feats.clone());
    let wv = tape.constant(w.kernel.clone());
    let bv = w.bias.clone().map(|b| tape.constant(b));
    let out = tape.sparse_conv(xv, wv, bv, Arc::new(km.clone()))?;
    SparseTensor::new(km.out_coords.clone(), tape.value(out).clone(), x.voxel_size)
}

/// Per-batch-item mean of feature rows, `[batch, channels]`.
pub fn global_avg_pool(x: &SparseTensor) -> Result<DenseTensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.feats.clone());
    let out = tape.segment_mean(xv, Arc::from(x.coords.batch_offsets()))?;
    Ok(tape.value(out).clone())
}

/// Normalization semantics.
///
/// `Train` standardizes every channel with the mean and biased variance over
/// all rows of the input. `Eval` uses the given frozen statistics, making the
/// layer a fixed per-channel affine map.
#[derive(Clone, Debug)]
pub enum NormMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

pub fn norm_layer(x: &SparseTensor, gamma: &[f64], beta: &[f64], mode: NormMode<'_>) -> Result<SparseTensor> {
    let c = x.channels();
    let mut tape = Tape::new();
    let xv = tape.constant(x.feats.clone());
    let g = tape.constant(DenseTensor::new(vec![c], gamma.to_vec())?);
    let b = tape.constant(DenseTensor::new(vec![c], beta.to_vec())?);
    let out = match mode {
        NormMode::Train => tape.batch_norm(xv, g, b, NORM_EPS)?.0,
        NormMode::Eval { mean, var } => tape.frozen_norm(xv, g, b, mean, var, NORM_EPS)?,
    };
    SparseTensor::new(x.coords.clone(), tape.value(out).clone(), x.voxel_size)
}

/// Learnable sparse convolution. The bias is always present and starts at zero.
#[derive(Clone, Debug)]
pub struct SparseConv {
    pub kernel_size: u32,
    pub stride: u32,
    pub cin: usize,
    pub cout: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl SparseConv {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel_size: u32,
        stride: u32,
        rng: &mut R,
    ) -> Self {
        let vol = (kernel_size as usize).pow(3);
        let weight = store.add_param(&format!("{name}.weight"), he_normal(rng, &[vol, cin, cout], vol * cin));
        let bias = store.add_param(&format!("{name}.bias"), DenseTensor::zeros(&[cout]));
        Self {
            kernel_size,
            stride,
            cin,
            cout,
            weight,
            bias,
        }
    }

    pub fn num_params(&self) -> usize {
        (self.kernel_size as usize).pow(3) * self.cin * self.cout + self.cout
    }

    pub fn forward(&self, s: &mut Session<'_>, geo: &Geometry, x: SparseVar) -> Result<SparseVar> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        if self.kernel_size == 1 && self.stride == 1 {
            let w2 = s.tape.reshape(w, vec![self.cin, self.cout])?;
            let y = s.tape.matmul(x.feats, w2)?;
            let y = s.tape.add_bias(y, b)?;
            return Ok(SparseVar { level: x.level, feats: y });
        }
        let km = geo.map(x.level, self.kernel_size, self.stride)?.clone();
        let level = if self.stride == 1 { x.level } else { x.level + 1 };
        let y = s.tape.sparse_conv(x.feats, w, Some(b), km)?;
        Ok(SparseVar { level, feats: y })
    }
}

/// Batch-style normalization with running statistics for evaluation.
#[derive(Clone, Debug)]
pub struct Norm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            channels,
            gamma: store.add_param(&format!("{name}.gamma"), DenseTensor::full(&[channels], 1.0)),
            beta: store.add_param(&format!("{name}.beta"), DenseTensor::zeros(&[channels])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), DenseTensor::zeros(&[channels])),
            running_var: store.add_buffer(&format!("{name}.running_var"), DenseTensor::full(&[channels], 1.0)),
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        match s.mode {
            Mode::Train => {
                let (y, stats) = s.tape.batch_norm(x, g, b, NORM_EPS)?;
                let m = s.norm_momentum;
                for (r, v) in s.store.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
                    *r = (1.0 - m) * *r + m * v;
                }
                for (r, v) in s.store.get_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
                    *r = (1.0 - m) * *r + m * v;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = s.store.get(self.running_mean).data().to_vec();
                let var = s.store.get(self.running_var).data().to_vec();
                s.tape.frozen_norm(x, g, b, &mean, &var, NORM_EPS)
            }
        }
    }
}

/// Dense layer `y = x · W` with optional bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let std = (1.0 / input.max(1) as f64).sqrt();
        Self {
            input,
            output,
            weight: store.add_param(&format!("{name}.weight"), crate::params::normal(rng, &[input, output], std)),
            bias: bias.then(|| store.add_param(&format!("{name}.bias"), DenseTensor::zeros(&[output]))),
        }
    }

    pub fn num_params(&self) -> usize {
        self.input * self.output + if self.bias.is_some() { self.output } else { 0 }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = s.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{build_kernel_map, Coords};

    fn tensor(pts: &[[i32; 3]], feats: &[f64], c: usize) -> SparseTensor {
        let coords = Coords::new(pts.iter().map(|p| [0, p[0], p[1], p[2]]).collect(), 1, 1).unwrap();
        SparseTensor::new(
            Arc::new(coords),
            DenseTensor::new(vec![pts.len(), c], feats.to_vec()).unwrap(),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn identity_kernel_one() {
        let x = tensor(&[[0, 0, 0], [1, 0, 0]], &[1.0, 2.0, 3.0, 4.0], 2);
        let km = build_kernel_map(&x.coords, 1, 1).unwrap();
        let w = ConvWeights {
            kernel: DenseTensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: None,
        };
        let y = sparse_conv(&x, &w, &km).unwrap();
        assert_eq!(y.feats, x.feats);
    }

    #[test]
    fn isolated_voxel_uses_center_weight() {
        let x = tensor(&[[0, 0, 0]], &[2.0], 1);
        let km = build_kernel_map(&x.coords, 3, 1).unwrap();
        let mut kernel = DenseTensor::full(&[27, 1, 1], 100.0);
        kernel.data_mut()[13] = 0.5;
        let w = ConvWeights {
            kernel,
            bias: Some(DenseTensor::new(vec![1], vec![0.25]).unwrap()),
        };
        assert_eq!(sparse_conv(&x, &w, &km).unwrap().feats.data(), &[1.25]);
    }

    #[test]
    fn stale_map_rejected() {
        let x = tensor(&[[0, 0, 0], [1, 0, 0]], &[1.0, 2.0], 1);
        let other = tensor(&[[0, 0, 0], [2, 0, 0]], &[1.0, 2.0], 1);
        let km = build_kernel_map(&other.coords, 3, 1).unwrap();
        let w = ConvWeights {
            kernel: DenseTensor::zeros(&[27, 1, 1]),
            bias: None,
        };
        assert!(matches!(sparse_conv(&x, &w, &km), Err(Error::Contract(_))));
    }

    #[test]
    fn pool_examples() {
        let one = tensor(&[[3, 1, 2]], &[4.0, 5.0], 2);
        assert_eq!(global_avg_pool(&one).unwrap().data(), &[4.0, 5.0]);
        let two = tensor(&[[0, 0, 0], [1, 0, 0]], &[1.0, 3.0], 1);
        assert_eq!(global_avg_pool(&two).unwrap().data(), &[2.0]);
        let perm = tensor(&[[0, 0, 0], [1, 0, 0]], &[3.0, 1.0], 1);
        assert_eq!(global_avg_pool(&perm).unwrap().data(), &[2.0]);
    }

    #[test]
    fn pool_empty_batch_item_names_index() {
        let coords = Coords::new(vec![[0, 0, 0, 0], [2, 0, 0, 0]], 1, 3).unwrap();
        let x = SparseTensor::new(Arc::new(coords), DenseTensor::zeros(&[2, 1]), 1.0).unwrap();
        let err = global_avg_pool(&x).unwrap_err();
        assert!(matches!(err, Error::Domain(ref m) if m.contains('1')), "{err}");
    }

    #[test]
    fn norm_constant_channel_gives_beta() {
        let x = tensor(&[[0, 0, 0], [1, 0, 0], [2, 0, 0]], &[5.0, 5.0, 5.0], 1);
        let y = norm_layer(&x, &[3.0], &[0.7], NormMode::Train).unwrap();
        assert_eq!(y.feats.data(), &[0.7, 0.7, 0.7]);
    }

    #[test]
    fn norm_standardizes() {
        let x = tensor(&[[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], &[1.0, 2.0, 4.0, 9.0], 1);
        let y = norm_layer(&x, &[1.0], &[0.0], NormMode::Train).unwrap();
        let d = y.feats.data();
        let mean = d.iter().sum::<f64>() / 4.0;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        // eps keeps the variance slightly below one
        assert!((var - 1.0).abs() < 1e-5, "{var}");
    }

    #[test]
    fn norm_eval_is_affine() {
        let x = tensor(&[[0, 0, 0], [1, 0, 0]], &[1.0, 3.0], 1);
        let (mean, var) = ([2.0], [4.0]);
        let y = norm_layer(&x, &[2.0], &[1.0], NormMode::Eval { mean: &mean, var: &var }).unwrap();
        let s = 2.0 / (4.0 + NORM_EPS).sqrt();
        let expect = [1.0 + s * (1.0 - 2.0), 1.0 + s * (3.0 - 2.0)];
        for (a, b) in y.feats.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
