//! Per-forward coordinate hierarchy and cached kernel maps.
//!
//! Coordinates only depend on the input point cloud, so the lattice at every
//! downsampling level and every kernel map the network needs can be computed
//! once per sample and reused across epochs. A batch geometry is the
//! concatenation of per-sample geometries.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::sparse::{build_kernel_map, parent_rows, Coords, KernelMap};

/// `(level, kernel_size, stride)`.
pub type MapKey = (usize, u32, u32);

#[derive(Clone, Debug)]
pub struct Geometry {
    pub levels: Vec<Arc<Coords>>,
    pub offsets: Vec<Arc<[usize]>>,
    maps: BTreeMap<MapKey, Arc<KernelMap>>,
    /// `parents[l][r]`: row on level `l + 1` containing row `r` of level `l`.
    pub parents: Vec<Arc<[usize]>>,
}

impl Geometry {
    /// Builds `depth` lattice levels (each a stride-2 coarsening of the
    /// previous one) and the requested kernel maps.
    pub fn build(base: Coords, depth: usize, keys: &[MapKey]) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Contract("geometry needs at least one level".into()));
        }
        let mut levels = vec![Arc::new(base)];
        let mut maps = BTreeMap::new();
        for l in 0..depth - 1 {
            let km = Arc::new(build_kernel_map(&levels[l], 3, 2)?);
            levels.push(km.out_coords.clone());
            maps.insert((l, 3, 2), km);
        }
        for &(l, k, s) in keys {
            if l >= depth || (s != 1 && l + 1 >= depth) {
                return Err(Error::Contract(format!("kernel map key {:?} outside {depth} levels", (l, k, s))));
            }
            if maps.contains_key(&(l, k, s)) {
                continue;
            }
            let km = if s == 1 {
                build_kernel_map(&levels[l], k, 1)?
            } else {
                crate::sparse::build_kernel_map_to(&levels[l], levels[l + 1].clone(), k)?
            };
            maps.insert((l, k, s), Arc::new(km));
        }
        let mut parents = Vec::new();
        for l in 0..depth - 1 {
            let p = parent_rows(&levels[l], &levels[l + 1])?;
            let p: Option<Vec<usize>> = p.into_iter().collect();
            parents.push(Arc::from(p.ok_or_else(|| {
                Error::Contract("coarse level does not cover the fine level".into())
            })?));
        }
        let offsets = levels.iter().map(|c| Arc::from(c.batch_offsets())).collect();
        Ok(Self {
            levels,
            offsets,
            maps,
            parents,
        })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn batch_size(&self) -> usize {
        self.levels[0].batch_size()
    }

    pub fn map(&self, level: usize, kernel: u32, stride: u32) -> Result<&Arc<KernelMap>> {
        self.maps
            .get(&(level, kernel, stride))
            .ok_or_else(|| Error::Contract(format!("no kernel map for level {level}, kernel {kernel}, stride {stride}")))
    }

    /// Joins per-sample geometries into one batch geometry.
    pub fn concat(parts: &[&Geometry]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("cannot concatenate zero geometries".into()))?;
        let depth = first.depth();
        if parts.iter().any(|p| p.depth() != depth || p.maps.len() != first.maps.len()) {
            return Err(Error::Contract("geometries disagree on structure".into()));
        }
        let mut levels = Vec::with_capacity(depth);
        for l in 0..depth {
            let cs: Vec<&Coords> = parts.iter().map(|p| p.levels[l].as_ref()).collect();
            levels.push(Arc::new(Coords::concat(&cs)?));
        }
        let mut maps = BTreeMap::new();
        for (key, _) in first.maps.iter() {
            let (l, _, s) = *key;
            let ks: Vec<&KernelMap> = parts
                .iter()
                .map(|p| p.maps.get(key).map(|m| m.as_ref()))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::Contract("geometries disagree on kernel maps".into()))?;
            let out = if s == 1 { levels[l].clone() } else { levels[l + 1].clone() };
            maps.insert(*key, Arc::new(KernelMap::concat(&ks, out, levels[l].fingerprint())?));
        }
        let mut parents = Vec::new();
        for l in 0..depth - 1 {
            let mut joined = Vec::with_capacity(levels[l].len());
            let mut base = 0;
            for p in parts {
                joined.extend(p.parents[l].iter().map(|r| r + base));
                base += p.levels[l + 1].len();
            }
            parents.push(Arc::from(joined));
        }
        let offsets = levels.iter().map(|c| Arc::from(c.batch_offsets())).collect();
        Ok(Self {
            levels,
            offsets,
            maps,
            parents,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(pts: &[[i32; 3]]) -> Coords {
        Coords::from_unsorted(pts.iter().map(|p| [0, p[0], p[1], p[2]]).collect(), 1, 1).unwrap()
    }

    const KEYS: &[MapKey] = &[(0, 3, 1), (0, 1, 2), (1, 3, 1), (1, 1, 2), (2, 3, 1)];

    #[test]
    fn levels_double_stride() {
        let g = Geometry::build(sample(&[[0, 0, 0], [1, 2, 3], [7, 7, 7]]), 3, KEYS).unwrap();
        assert_eq!(g.levels.iter().map(|c| c.stride()).collect::<Vec<_>>(), vec![1, 2, 4]);
        assert_eq!(g.parents[0].len(), 3);
    }

    #[test]
    fn concat_equals_direct_build() {
        let a = sample(&[[0, 0, 0], [1, 2, 3], [7, 7, 7], [8, 8, 1]]);
        let b = sample(&[[3, 3, 3], [2, 2, 2], [-5, 0, 9]]);
        let ga = Geometry::build(a.clone(), 3, KEYS).unwrap();
        let gb = Geometry::build(b.clone(), 3, KEYS).unwrap();
        let joined = Geometry::concat(&[&ga, &gb]).unwrap();
        let direct = Geometry::build(Coords::concat(&[&a, &b]).unwrap(), 3, KEYS).unwrap();
        for l in 0..3 {
            assert_eq!(joined.levels[l], direct.levels[l]);
            assert_eq!(joined.offsets[l], direct.offsets[l]);
        }
        assert_eq!(joined.parents, direct.parents);
        for (key, km) in &direct.maps {
            let jm = &joined.maps[key];
            assert_eq!(jm.triples, km.triples, "{key:?}");
            assert_eq!(jm.in_fingerprint, km.in_fingerprint);
        }
    }
}
