//! Wall-clock scaling of the selective scan and sparse convolution throughput.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::gradcheck::random_coords;
use crate::sparse::build_kernel_map;
use crate::tensor::DenseTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ScanTiming {
    pub len: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingReport {
    pub timings: Vec<ScanTiming>,
    /// Least-squares slope of log time against log length.
    pub slope: f64,
}

impl std::fmt::Display for ScalingReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:>8} {:>12}", "T", "seconds")?;
        for t in &self.timings {
            writeln!(f, "{:>8} {:>12.6}", t.len, t.seconds)?;
        }
        write!(f, "log-log slope {:.3}", self.slope)
    }
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Contract("slope needs at least two paired points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("all lengths are equal".into()));
    }
    Ok(sxy / sxx)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> DenseTensor {
    let n = shape.iter().product();
    DenseTensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Best-of-`reps` forward time of one selective scan of length `len`.
pub fn time_scan(len: usize, channels: usize, state: usize, reps: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = random(&mut rng, &[len, channels], -1.0, 1.0);
    let delta = random(&mut rng, &[len, channels], 0.01, 0.5);
    let a = random(&mut rng, &[channels, state], -2.0, -0.1);
    let b = random(&mut rng, &[len, state], -1.0, 1.0);
    let c = random(&mut rng, &[len, state], -1.0, 1.0);
    let d = random(&mut rng, &[channels], -1.0, 1.0);
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let mut tape = Tape::new();
        let vars = [&u, &delta, &a, &b, &c, &d].map(|t| tape.constant(t.clone()));
        let start = Instant::now();
        let y = tape.selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5])?;
        std::hint::black_box(tape.value(y));
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best)
}

pub fn scan_scaling(lens: &[usize], channels: usize, state: usize, reps: usize) -> Result<ScalingReport> {
    let mut timings = Vec::with_capacity(lens.len());
    for (i, &len) in lens.iter().enumerate() {
        timings.push(ScanTiming {
            len,
            seconds: time_scan(len, channels, state, reps, i as u64)?,
        });
    }
    let x: Vec<f64> = timings.iter().map(|t| (t.len as f64).ln()).collect();
    let y: Vec<f64> = timings.iter().map(|t| t.seconds.max(1e-12).ln()).collect();
    let slope = ls_slope(&x, &y)?;
    Ok(ScalingReport { timings, slope })
}

/// Lengths `2^lo ..= 2^hi`.
pub fn pow2_lengths(lo: u32, hi: u32) -> Vec<usize> {
    (lo..=hi).map(|p| 1usize << p).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvThroughput {
    pub voxels: usize,
    pub pairs: usize,
    pub seconds: f64,
}

impl ConvThroughput {
    pub fn voxels_per_second(&self) -> f64 {
        self.voxels as f64 / self.seconds
    }
}

/// Best-of-`reps` forward time of a 3³ submanifold convolution over
/// `voxels` random sites.
pub fn conv_throughput(voxels: usize, cin: usize, cout: usize, reps: usize) -> Result<ConvThroughput> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let side = ((voxels as f64 * 8.0).cbrt().ceil() as i32).max(2);
    let coords = random_coords(&mut rng, voxels, side, 1);
    let km = Arc::new(build_kernel_map(&coords, 3, 1)?);
    let pairs = km.triples.len();
    let x = random(&mut rng, &[voxels, cin], -1.0, 1.0);
    let w = random(&mut rng, &[27, cin, cout], -1.0, 1.0);
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let start = Instant::now();
        let y = tape.sparse_conv(xv, wv, None, km.clone())?;
        std::hint::black_box(tape.value(y));
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(ConvThroughput {
        voxels,
        pairs,
        seconds: best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let x: Vec<f64> = (1..6).map(|v| (v as f64).ln()).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 0.3).collect();
        assert!((ls_slope(&x, &y).unwrap() - 2.0).abs() < 1e-12);
        assert!(ls_slope(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn small_scan_runs() {
        let r = scan_scaling(&pow2_lengths(4, 6), 4, 2, 1).unwrap();
        assert_eq!(r.timings.len(), 3);
        assert!(r.slope.is_finite());
    }
}
