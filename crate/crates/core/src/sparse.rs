//! Coordinate-sparse voxel tensors, quantization and kernel maps.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// `(batch, i, j, k)` lattice coordinate.
pub type Coord = [i32; 4];

/// Canonically sorted, unique coordinate list on a lattice of spacing `stride`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Coords {
    points: Vec<Coord>,
    stride: u32,
    batch_size: usize,
}

impl Coords {
    /// Validates ordering, uniqueness, lattice alignment and batch bounds.
    pub fn new(points: Vec<Coord>, stride: u32, batch_size: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Contract("stride must be positive".into()));
        }
        for w in points.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Contract(format!(
                    "coordinates must be strictly increasing, found {:?} before {:?}",
                    w[0], w[1]
                )));
            }
        }
        let s = stride as i32;
        for c in &points {
            if c[0] < 0 || c[0] as usize >= batch_size {
                return Err(Error::Contract(format!(
                    "batch index {} outside 0..{batch_size}",
                    c[0]
                )));
            }
            if c[1..].iter().any(|v| v.rem_euclid(s) != 0) {
                return Err(Error::Contract(format!(
                    "coordinate {c:?} not divisible by stride {stride}"
                )));
            }
        }
        Ok(Self {
            points,
            stride,
            batch_size,
        })
    }

    /// Sorts and deduplicates before validating.
    pub fn from_unsorted(mut points: Vec<Coord>, stride: u32, batch_size: usize) -> Result<Self> {
        points.sort_unstable();
        points.dedup();
        Self::new(points, stride, batch_size)
    }

    pub fn empty(stride: u32, batch_size: usize) -> Self {
        Self {
            points: Vec::new(),
            stride,
            batch_size,
        }
    }

    pub fn as_slice(&self) -> &[Coord] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Row offsets of each batch item: item `b` owns rows `offsets[b]..offsets[b + 1]`.
    pub fn batch_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.batch_size + 1);
        offsets.push(0);
        let mut row = 0;
        for b in 0..self.batch_size as i32 {
            while row < self.points.len() && self.points[row][0] == b {
                row += 1;
            }
            offsets.push(row);
        }
        offsets
    }

    /// Hash of the coordinate list and stride, used to detect stale kernel maps.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.stride.hash(&mut h);
        self.batch_size.hash(&mut h);
        self.points.hash(&mut h);
        h.finish()
    }

    pub fn index(&self) -> HashMap<Coord, usize> {
        self.points
            .iter()
            .enumerate()
            .map(|(row, c)| (*c, row))
            .collect()
    }

    /// Concatenates per-sample coordinate sets into one batch, relabelling batch indices.
    pub fn concat(parts: &[&Coords]) -> Result<Self> {
        let stride = parts.first().map_or(1, |p| p.stride);
        let mut points = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut base = 0i32;
        for p in parts {
            if p.stride != stride {
                return Err(Error::Contract("cannot concatenate mixed strides".into()));
            }
            points.extend(p.points.iter().map(|c| [c[0] + base, c[1], c[2], c[3]]));
            base += p.batch_size as i32;
        }
        Ok(Self {
            points,
            stride,
            batch_size: base as usize,
        })
    }
}

/// Voxelized point cloud: one feature row per occupied coordinate.
#[derive(Clone, Debug)]
pub struct SparseTensor {
    pub coords: Arc<Coords>,
    pub feats: DenseTensor,
    pub voxel_size: f64,
}

impl SparseTensor {
    pub fn new(coords: Arc<Coords>, feats: DenseTensor, voxel_size: f64) -> Result<Self> {
        let (rows, _) = feats.dims2()?;
        if rows != coords.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} coordinates",
                rows,
                coords.len()
            )));
        }
        Ok(Self {
            coords,
            feats,
            voxel_size,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.feats.shape()[1]
    }

    pub fn stride(&self) -> u32 {
        self.coords.stride()
    }
}

/// Result of [`quantize_with_counts`]: the tensor plus raw points per voxel.
#[derive(Clone, Debug)]
pub struct Quantized {
    pub tensor: SparseTensor,
    pub counts: Vec<usize>,
}

/// Voxelizes points: `coord = floor(position / voxel_size)`, stride 1.
///
/// Points sharing a voxel are merged by the arithmetic mean of their feature
/// rows. Rows are summed in a canonical order with exact duplicates folded
/// into multiplicities, so the result is bit-identical under any permutation
/// of the input and under exact duplication of every point.
pub fn quantize(
    batch: &[u32],
    positions: &[[f64; 3]],
    feats: &DenseTensor,
    voxel_size: f64,
) -> Result<SparseTensor> {
    quantize_with_counts(batch, positions, feats, voxel_size).map(|q| q.tensor)
}

pub fn quantize_with_counts(
    batch: &[u32],
    positions: &[[f64; 3]],
    feats: &DenseTensor,
    voxel_size: f64,
) -> Result<Quantized> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::Contract(format!(
            "voxel_size must be positive and finite, got {voxel_size}"
        )));
    }
    let (n, channels) = feats.dims2()?;
    if batch.len() != n || positions.len() != n {
        return Err(Error::Shape(format!(
            "{} batch indices, {} positions and {} feature rows",
            batch.len(),
            positions.len(),
            n
        )));
    }
    let batch_size = batch.iter().max().map_or(0, |b| *b as usize + 1);
    if n == 0 {
        return Ok(Quantized {
            tensor: SparseTensor::new(
                Arc::new(Coords::empty(1, 0)),
                DenseTensor::zeros(&[0, channels]),
                voxel_size,
            )?,
            counts: Vec::new(),
        });
    }

    let mut keyed = Vec::with_capacity(n);
    for (idx, p) in positions.iter().enumerate() {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Ingestion(format!("point {idx} has non-finite coordinate {p:?}")));
        }
        let mut c = [batch[idx] as i32, 0, 0, 0];
        for axis in 0..3 {
            let q = (p[axis] / voxel_size).floor();
            if q.abs() > i32::MAX as f64 / 2.0 {
                return Err(Error::Ingestion(format!(
                    "point {idx} quantizes outside the integer lattice"
                )));
            }
            c[axis + 1] = q as i32;
        }
        keyed.push((c, idx));
    }
    let rows = feats.data();
    let row = |i: usize| &rows[i * channels..(i + 1) * channels];
    keyed.sort_by(|a, b| {
        a.0.cmp(&b.0).then_with(|| {
            row(a.1)
                .iter()
                .zip(row(b.1))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });

    let mut coords = Vec::new();
    let mut counts = Vec::new();
    let mut out = Vec::new();
    let mut start = 0;
    while start < keyed.len() {
        let c = keyed[start].0;
        let mut end = start;
        while end < keyed.len() && keyed[end].0 == c {
            end += 1;
        }
        let mut acc = vec![0.0; channels];
        let mut i = start;
        while i < end {
            let r = row(keyed[i].1);
            let mut mult = 1usize;
            while i + mult < end && row(keyed[i + mult].1) == r {
                mult += 1;
            }
            for (a, v) in acc.iter_mut().zip(r) {
                *a += v * mult as f64;
            }
            i += mult;
        }
        let count = end - start;
        out.extend(acc.iter().map(|a| a / count as f64));
        coords.push(c);
        counts.push(count);
        start = end;
    }
    let n_out = coords.len();
    let coords = Coords::new(coords, 1, batch_size)?;
    Ok(Quantized {
        tensor: SparseTensor::new(
            Arc::new(coords),
            DenseTensor::new(vec![n_out, channels], out)?,
            voxel_size,
        )?,
        counts,
    })
}

/// Coarsens a coordinate set: `unique(floor(c / s) * s)` with `s = stride * old_stride`.
pub fn stride_downsample_coords(coords: &Coords, stride: u32) -> Result<Coords> {
    if stride == 0 {
        return Err(Error::Contract("downsampling stride must be positive".into()));
    }
    if stride == 1 {
        return Ok(coords.clone());
    }
    let s = (coords.stride() * stride) as i32;
    let mut out: Vec<Coord> = coords
        .as_slice()
        .iter()
        .map(|c| {
            [
                c[0],
                c[1].div_euclid(s) * s,
                c[2].div_euclid(s) * s,
                c[3].div_euclid(s) * s,
            ]
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    Coords::new(out, s as u32, coords.batch_size())
}

/// One gather/scatter entry of a kernel map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub out_row: u32,
    pub offset: u32,
    pub in_row: u32,
}

/// Convolution plan: which input rows feed which output rows through which offset.
///
/// Triples are sorted by `(out_row, offset, in_row)`; the convolution kernels
/// accumulate in this order.
#[derive(Clone, Debug)]
pub struct KernelMap {
    pub kernel_size: u32,
    pub triples: Vec<Triple>,
    pub out_coords: Arc<Coords>,
    pub in_len: usize,
    pub in_fingerprint: u64,
}

impl KernelMap {
    pub fn volume(&self) -> usize {
        (self.kernel_size as usize).pow(3)
    }

    pub fn out_len(&self) -> usize {
        self.out_coords.len()
    }

    /// Offset vector in lattice units for an offset index.
    pub fn offset_vector(kernel_size: u32, index: u32) -> [i32; 3] {
        let k = kernel_size;
        let r = (k as i32 - 1) / 2;
        [
            (index / (k * k)) as i32 - r,
            ((index / k) % k) as i32 - r,
            (index % k) as i32 - r,
        ]
    }

    pub fn offset_index(kernel_size: u32, v: [i32; 3]) -> u32 {
        let k = kernel_size as i32;
        let r = (k - 1) / 2;
        (((v[0] + r) * k + (v[1] + r)) * k + (v[2] + r)) as u32
    }

    /// Concatenates per-sample maps whose row spaces are laid out back to back.
    pub fn concat(parts: &[&KernelMap], out_coords: Arc<Coords>, in_fingerprint: u64) -> Result<Self> {
        let kernel_size = parts.first().map_or(1, |p| p.kernel_size);
        let mut triples = Vec::with_capacity(parts.iter().map(|p| p.triples.len()).sum());
        let (mut in_base, mut out_base) = (0u32, 0u32);
        for p in parts {
            if p.kernel_size != kernel_size {
                return Err(Error::Contract("cannot concatenate kernel maps of different sizes".into()));
            }
            triples.extend(p.triples.iter().map(|t| Triple {
                out_row: t.out_row + out_base,
                offset: t.offset,
                in_row: t.in_row + in_base,
            }));
            in_base += p.in_len as u32;
            out_base += p.out_len() as u32;
        }
        if out_base as usize != out_coords.len() {
            return Err(Error::Contract("output coordinates do not match concatenated maps".into()));
        }
        Ok(Self {
            kernel_size,
            triples,
            out_coords,
            in_len: in_base as usize,
            in_fingerprint,
        })
    }
}

/// Builds the kernel map of a cubic convolution over `input`.
///
/// Output coordinates are the input coordinates for stride 1, or
/// [`stride_downsample_coords`] of them otherwise. A triple
/// `(in_row, out_row, idx(i))` exists iff `out + i * in_stride == in`.
pub fn build_kernel_map(input: &Coords, kernel_size: u32, stride: u32) -> Result<KernelMap> {
    let out = if stride == 1 {
        Arc::new(input.clone())
    } else {
        Arc::new(stride_downsample_coords(input, stride)?)
    };
    build_kernel_map_to(input, out, kernel_size)
}

/// Kernel map from `input` onto an explicit output coordinate set.
pub fn build_kernel_map_to(input: &Coords, out: Arc<Coords>, kernel_size: u32) -> Result<KernelMap> {
    if kernel_size % 2 == 0 {
        return Err(Error::Contract(format!("kernel_size must be odd, got {kernel_size}")));
    }
    let index = input.index();
    let s = input.stride() as i32;
    let vol = kernel_size.pow(3);
    let offsets: Vec<[i32; 3]> = (0..vol)
        .map(|i| KernelMap::offset_vector(kernel_size, i))
        .collect();
    let mut triples = Vec::new();
    for (out_row, u) in out.as_slice().iter().enumerate() {
        for (idx, o) in offsets.iter().enumerate() {
            let probe = [u[0], u[1] + o[0] * s, u[2] + o[1] * s, u[3] + o[2] * s];
            if let Some(&in_row) = index.get(&probe) {
                triples.push(Triple {
                    out_row: out_row as u32,
                    offset: idx as u32,
                    in_row: in_row as u32,
                });
            }
        }
    }
    Ok(KernelMap {
        kernel_size,
        triples,
        out_coords: out,
        in_len: input.len(),
        in_fingerprint: input.fingerprint(),
    })
}

/// Maps each fine coordinate to the row of its parent cell on a coarser lattice.
pub fn parent_rows(fine: &Coords, coarse: &Coords) -> Result<Vec<Option<usize>>> {
    let s = coarse.stride() as i32;
    if s % fine.stride() as i32 != 0 {
        return Err(Error::Contract(format!(
            "stride {} is not a refinement of stride {}",
            fine.stride(),
            s
        )));
    }
    let index = coarse.index();
    Ok(fine
        .as_slice()
        .iter()
        .map(|c| {
            let p = [
                c[0],
                c[1].div_euclid(s) * s,
                c[2].div_euclid(s) * s,
                c[3].div_euclid(s) * s,
            ];
            index.get(&p).copied()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coords(pts: &[[i32; 3]]) -> Coords {
        Coords::from_unsorted(pts.iter().map(|p| [0, p[0], p[1], p[2]]).collect(), 1, 1).unwrap()
    }

    fn one_col(vals: &[f64]) -> DenseTensor {
        DenseTensor::new(vec![vals.len(), 1], vals.to_vec()).unwrap()
    }

    #[test]
    fn quantize_merges_by_mean() {
        let pos = [[0.1, 0.1, 0.1], [0.4, 0.4, 0.4]];
        let q = quantize(&[0, 0], &pos, &one_col(&[1.0, 3.0]), 1.0).unwrap();
        assert_eq!(q.coords.as_slice(), &[[0, 0, 0, 0]]);
        assert_eq!(q.feats.data(), &[2.0]);
        assert_eq!(q.stride(), 1);
    }

    #[test]
    fn quantize_floor_arithmetic() {
        let pos = [[0.1, 0.1, 0.1], [0.4, 0.4, 0.4]];
        let q = quantize(&[0, 0], &pos, &one_col(&[1.0, 3.0]), 0.25).unwrap();
        assert_eq!(q.coords.as_slice(), &[[0, 0, 0, 0], [0, 1, 1, 1]]);
        assert_eq!(q.feats.data(), &[1.0, 3.0]);
    }

    #[test]
    fn quantize_negative_positions_floor_down() {
        let q = quantize(&[0], &[[-0.1, 0.0, 0.6]], &one_col(&[1.0]), 0.5).unwrap();
        assert_eq!(q.coords.as_slice(), &[[0, -1, 0, 1]]);
    }

    #[test]
    fn quantize_empty_is_valid() {
        let q = quantize(&[], &[], &DenseTensor::zeros(&[0, 3]), 0.5).unwrap();
        assert!(q.is_empty());
        assert_eq!(q.channels(), 3);
    }

    #[test]
    fn quantize_rejects_non_finite_with_index() {
        let pos = [[0.0, 0.0, 0.0], [f64::NAN, 0.0, 0.0]];
        let err = quantize(&[0, 0], &pos, &one_col(&[1.0, 1.0]), 0.5).unwrap_err();
        assert!(matches!(err, Error::Ingestion(ref m) if m.contains("point 1")), "{err}");
    }

    #[test]
    fn quantize_rejects_bad_voxel_size() {
        assert!(quantize(&[0], &[[0.0; 3]], &one_col(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn kernel_one_single_voxel_is_center() {
        let km = build_kernel_map(&coords(&[[0, 0, 0]]), 1, 1).unwrap();
        assert_eq!(km.triples, vec![Triple { out_row: 0, offset: 0, in_row: 0 }]);
    }

    #[test]
    fn kernel_three_neighbors() {
        let km = build_kernel_map(&coords(&[[0, 0, 0], [1, 0, 0]]), 3, 1).unwrap();
        assert_eq!(km.triples.len(), 4);
        let center = KernelMap::offset_index(3, [0, 0, 0]);
        assert_eq!(center, 13);
        assert!(km.triples.contains(&Triple { out_row: 0, offset: 13, in_row: 0 }));
        assert!(km.triples.contains(&Triple {
            out_row: 0,
            offset: KernelMap::offset_index(3, [1, 0, 0]),
            in_row: 1
        }));
        assert!(km.triples.contains(&Triple {
            out_row: 1,
            offset: KernelMap::offset_index(3, [-1, 0, 0]),
            in_row: 0
        }));
    }

    #[test]
    fn isolated_voxel_only_center() {
        let km = build_kernel_map(&coords(&[[0, 0, 0], [5, 5, 5]]), 3, 1).unwrap();
        assert_eq!(km.triples.len(), 2);
        assert!(km.triples.iter().all(|t| t.offset == 13 && t.in_row == t.out_row));
    }

    #[test]
    fn even_kernel_rejected() {
        let err = build_kernel_map(&coords(&[[0, 0, 0]]), 2, 1).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn offset_index_round_trip() {
        for k in [1u32, 3, 5] {
            for i in 0..k.pow(3) {
                assert_eq!(KernelMap::offset_index(k, KernelMap::offset_vector(k, i)), i);
            }
        }
    }

    #[test]
    fn downsample_examples() {
        let d = stride_downsample_coords(&coords(&[[0, 0, 0], [1, 1, 1]]), 2).unwrap();
        assert_eq!(d.as_slice(), &[[0, 0, 0, 0]]);
        assert_eq!(d.stride(), 2);
        let d = stride_downsample_coords(&coords(&[[0, 0, 0], [2, 0, 0]]), 2).unwrap();
        assert_eq!(d.len(), 2);
        let c = coords(&[[0, 0, 0], [3, -1, 7]]);
        let once = stride_downsample_coords(&c, 1).unwrap();
        assert_eq!(stride_downsample_coords(&once, 1).unwrap(), c);
    }

    #[test]
    fn downsample_negative_coords_floor() {
        let d = stride_downsample_coords(&coords(&[[-1, 0, 0]]), 2).unwrap();
        assert_eq!(d.as_slice(), &[[0, -2, 0, 0]]);
    }

    #[test]
    fn strided_map_lands_on_coarse_lattice() {
        let c = coords(&[[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 1, 0]]);
        let km = build_kernel_map(&c, 3, 2).unwrap();
        assert_eq!(km.out_coords.stride(), 2);
        assert_eq!(km.out_coords.as_slice(), &[[0, 0, 0, 0], [0, 2, 0, 0]]);
        // every input reaches at least one output through a 3^3 stencil
        let mut seen = vec![false; c.len()];
        for t in &km.triples {
            seen[t.in_row as usize] = true;
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn batch_offsets_split_rows() {
        let c = Coords::new(vec![[0, 0, 0, 0], [0, 1, 0, 0], [2, 0, 0, 0]], 1, 3).unwrap();
        assert_eq!(c.batch_offsets(), vec![0, 2, 2, 3]);
    }

    #[test]
    fn coords_validation() {
        assert!(Coords::new(vec![[0, 1, 0, 0], [0, 0, 0, 0]], 1, 1).is_err());
        assert!(Coords::new(vec![[0, 1, 0, 0]], 2, 1).is_err());
        assert!(Coords::new(vec![[1, 0, 0, 0]], 1, 1).is_err());
    }

    #[test]
    fn concat_matches_joint_build() {
        let a = coords(&[[0, 0, 0], [1, 0, 0]]);
        let b = coords(&[[0, 0, 0], [0, 1, 1], [4, 4, 4]]);
        let ka = build_kernel_map(&a, 3, 2).unwrap();
        let kb = build_kernel_map(&b, 3, 2).unwrap();
        let joint = Coords::concat(&[&a, &b]).unwrap();
        let direct = build_kernel_map(&joint, 3, 2).unwrap();
        let out = Arc::new(Coords::concat(&[&ka.out_coords, &kb.out_coords]).unwrap());
        assert_eq!(*out, *direct.out_coords);
        let merged = KernelMap::concat(&[&ka, &kb], out, joint.fingerprint()).unwrap();
        assert_eq!(merged.triples, direct.triples);
    }
}
