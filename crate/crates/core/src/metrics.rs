//! Regression metrics, comparison tables, the height-percentile linear
//! baseline, and residual export.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(obs: &[f64], pred: &[f64]) -> Result<()> {
    if obs.len() != pred.len() {
        return Err(Error::Contract(format!("{} observations but {} predictions", obs.len(), pred.len())));
    }
    if obs.is_empty() {
        return Err(Error::Contract("metrics need at least one sample".into()));
    }
    Ok(())
}

pub fn rmse(obs: &[f64], pred: &[f64]) -> Result<f64> {
    check(obs, pred)?;
    let sse: f64 = obs.iter().zip(pred).map(|(y, f)| (y - f) * (y - f)).sum();
    Ok((sse / obs.len() as f64).sqrt())
}

pub fn r2(obs: &[f64], pred: &[f64]) -> Result<f64> {
    check(obs, pred)?;
    let mean = obs.iter().sum::<f64>() / obs.len() as f64;
    let sst: f64 = obs.iter().map(|y| (y - mean) * (y - mean)).sum();
    if sst == 0.0 {
        return Err(Error::Domain("observations have zero variance".into()));
    }
    let sse: f64 = obs.iter().zip(pred).map(|(y, f)| (y - f) * (y - f)).sum();
    Ok(1.0 - sse / sst)
}

/// Mean absolute percentage error over nonzero observations, plus the number
/// of zero observations excluded.
pub fn mape(obs: &[f64], pred: &[f64]) -> Result<(f64, usize)> {
    check(obs, pred)?;
    let mut acc = 0.0;
    let mut n = 0usize;
    for (y, f) in obs.iter().zip(pred) {
        if *y != 0.0 {
            acc += 100.0 * (y - f).abs() / y.abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Domain("every observation is zero".into()));
    }
    Ok((acc / n as f64, obs.len() - n))
}

/// `mean(pred − obs)`; positive means overestimation.
pub fn mean_bias(obs: &[f64], pred: &[f64]) -> Result<f64> {
    check(obs, pred)?;
    Ok(obs.iter().zip(pred).map(|(y, f)| f - y).sum::<f64>() / obs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub units: String,
    pub n: usize,
    pub r2: f64,
    pub rmse: f64,
    pub mape_percent: f64,
    pub mean_bias: f64,
    pub n_excluded_from_mape: usize,
}

impl MetricsReport {
    pub fn compute(obs: &[f64], pred: &[f64], units: &str) -> Result<Self> {
        let (mape_percent, n_excluded_from_mape) = mape(obs, pred)?;
        Ok(Self {
            units: units.to_string(),
            n: obs.len(),
            r2: r2(obs, pred)?,
            rmse: rmse(obs, pred)?,
            mape_percent,
            mean_bias: mean_bias(obs, pred)?,
            n_excluded_from_mape,
        })
    }

    /// Key/value text, one `key = value` per line.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    R2,
    Rmse,
    Mape,
    MeanBias,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::R2, Metric::Rmse, Metric::Mape, Metric::MeanBias];

    pub fn name(self) -> &'static str {
        match self {
            Metric::R2 => "R2",
            Metric::Rmse => "RMSE",
            Metric::Mape => "MAPE",
            Metric::MeanBias => "MB",
        }
    }

    pub fn of(self, r: &MetricsReport) -> f64 {
        match self {
            Metric::R2 => r.r2,
            Metric::Rmse => r.rmse,
            Metric::Mape => r.mape_percent,
            Metric::MeanBias => r.mean_bias,
        }
    }

    /// Whether `a` is at least as good as `b`.
    pub fn better_or_equal(self, a: f64, b: f64) -> bool {
        match self {
            Metric::R2 => a >= b,
            Metric::Rmse | Metric::Mape => a <= b,
            Metric::MeanBias => a.abs() <= b.abs(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffRow {
    pub metric: Metric,
    pub current: f64,
    pub reference: f64,
    /// `|current − reference|`, negated when the current value is worse.
    pub diff: f64,
}

pub fn diff_table(current: &MetricsReport, reference: &MetricsReport) -> Result<Vec<DiffRow>> {
    if current.units != reference.units {
        return Err(Error::Contract(format!(
            "cannot compare {} against {}",
            current.units, reference.units
        )));
    }
    Ok(Metric::ALL
        .iter()
        .map(|&m| {
            let (c, r) = (m.of(current), m.of(reference));
            let mag = (c - r).abs();
            DiffRow {
                metric: m,
                current: c,
                reference: r,
                diff: if m.better_or_equal(c, r) { mag } else { -mag },
            }
        })
        .collect())
}

pub struct DiffTable<'a>(pub &'a [DiffRow]);

impl fmt::Display for DiffTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6} {:>12} {:>12} {:>10}", "metric", "current", "reference", "diff")?;
        for r in self.0 {
            writeln!(f, "{:<6} {:>12.3} {:>12.3} {:>+10.3}", r.metric.name(), r.current, r.reference, r.diff)?;
        }
        Ok(())
    }
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("median of nothing".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Percentile `p ∈ [0, 100]` of ascending `sorted`, linearly interpolated
/// between order statistics at rank `p/100 · (n − 1)`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

pub const N_HEIGHT_FEATURES: usize = 15;

/// Max, mean, p10…p90, fractions above 1.3/5/10 m, and points per m² of
/// the horizontal bounding box, from points already translated to a local
/// origin.
pub fn height_features(points: &[[f64; 3]]) -> Result<[f64; N_HEIGHT_FEATURES]> {
    if points.is_empty() {
        return Err(Error::Contract("height features need at least one point".into()));
    }
    let mut z: Vec<f64> = points.iter().map(|p| p[2]).collect();
    z.sort_by(f64::total_cmp);
    let n = z.len() as f64;
    let mut out = [0.0; N_HEIGHT_FEATURES];
    out[0] = z[z.len() - 1];
    out[1] = z.iter().sum::<f64>() / n;
    for (i, p) in (1..=9).enumerate() {
        out[2 + i] = percentile(&z, 10.0 * p as f64);
    }
    for (i, t) in [1.3, 5.0, 10.0].iter().enumerate() {
        out[11 + i] = z.iter().filter(|v| *v > t).count() as f64 / n;
    }
    let ext = |a: usize| {
        let (lo, hi) = points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[a]), hi.max(p[a])));
        (hi - lo).max(1.0)
    };
    out[14] = n / (ext(0) * ext(1));
    Ok(out)
}

/// Least-squares fit with an intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    /// Intercept first.
    pub coef: Vec<f64>,
    /// Set when the design was rank deficient and a ridge term was added.
    pub ridge: bool,
}

pub const RIDGE_LAMBDA: f64 = 1e-6;

impl LinearModel {
    pub fn fit(x: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        let n = x.len();
        let p = x.first().map_or(0, Vec::len) + 1;
        if n != y.len() || x.iter().any(|r| r.len() + 1 != p) {
            return Err(Error::Shape("design rows must match labels and each other".into()));
        }
        if n < p {
            return Err(Error::Contract(format!("{n} samples cannot fit {p} coefficients")));
        }
        let a = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
        let b = DVector::from_column_slice(y);
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let rank = svd.rank(smax * 1e-10 * n.max(p) as f64);
        if rank == p {
            let coef = svd
                .solve(&b, 0.0)
                .map_err(|e| Error::Numeric(format!("least squares failed: {e}")))?;
            return Ok(Self {
                coef: coef.iter().copied().collect(),
                ridge: false,
            });
        }
        let ata = a.transpose() * &a + DMatrix::identity(p, p) * RIDGE_LAMBDA;
        let atb = a.transpose() * b;
        let coef = ata
            .cholesky()
            .ok_or_else(|| Error::Numeric("ridge system is not positive definite".into()))?
            .solve(&atb);
        Ok(Self {
            coef: coef.iter().copied().collect(),
            ridge: true,
        })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.coef[0] + self.coef[1..].iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineReport {
    pub report: MetricsReport,
    pub ridge: bool,
}

/// Fits the height-metric linear model on `train` clouds and evaluates it on
/// `test`. Clouds must already be preprocessed.
pub fn linear_baseline(
    train: &[(&[[f64; 3]], f64)],
    test: &[(&[[f64; 3]], f64)],
    units: &str,
) -> Result<BaselineReport> {
    let feats = |set: &[(&[[f64; 3]], f64)]| -> Result<Vec<Vec<f64>>> {
        set.iter().map(|(p, _)| height_features(p).map(|f| f.to_vec())).collect()
    };
    let model = LinearModel::fit(&feats(train)?, &train.iter().map(|s| s.1).collect::<Vec<_>>())?;
    let pred: Vec<f64> = feats(test)?.iter().map(|f| model.predict(f)).collect();
    let obs: Vec<f64> = test.iter().map(|s| s.1).collect();
    Ok(BaselineReport {
        report: MetricsReport::compute(&obs, &pred, units)?,
        ridge: model.ridge,
    })
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ResidualRow {
    pub obs: f64,
    pub pred: f64,
    pub residual: f64,
}

/// Writes `obs,pred,residual` rows with `residual = pred − obs`.
pub fn export_residuals(obs: &[f64], pred: &[f64], path: &Path) -> Result<()> {
    check(obs, pred)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    for (y, f) in obs.iter().zip(pred) {
        w.serialize(ResidualRow {
            obs: *y,
            pred: *f,
            residual: f - y,
        })
        .map_err(|e| Error::parse(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_residuals(path: &Path) -> Result<Vec<ResidualRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::parse(path, e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        let (y, f) = ([100.0, 200.0], [110.0, 190.0]);
        assert_eq!(rmse(&y, &f).unwrap(), 10.0);
        assert_eq!(mape(&y, &f).unwrap(), (7.5, 0));
        assert_eq!(mean_bias(&y, &f).unwrap(), 0.0);
        assert_eq!(r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap(), 0.5);
        assert_eq!(r2(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[3.0], &[-4.0]).unwrap(), 7.0);
        assert_eq!(mean_bias(&y, &[105.0, 205.0]).unwrap(), 5.0);
    }

    #[test]
    fn error_cases() {
        assert!(matches!(rmse(&[1.0], &[1.0, 2.0]), Err(Error::Contract(_))));
        assert!(matches!(mean_bias(&[], &[]), Err(Error::Contract(_))));
        assert!(matches!(r2(&[2.0, 2.0], &[1.0, 3.0]), Err(Error::Domain(_))));
        assert!(matches!(mape(&[0.0, 0.0], &[1.0, 3.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn mape_skips_zero_observations() {
        let (m, excluded) = mape(&[0.0, 100.0, 200.0], &[5.0, 110.0, 190.0]).unwrap();
        assert_eq!((m, excluded), (7.5, 1));
    }

    #[test]
    fn identical_reports_have_zero_diffs() {
        let r = MetricsReport::compute(&[1.0, 2.0, 4.0], &[1.5, 2.0, 3.0], "Mg/ha").unwrap();
        for row in diff_table(&r, &r).unwrap() {
            assert_eq!(row.diff, 0.0);
        }
        let mut other = r.clone();
        other.units = "m3/ha".into();
        assert!(matches!(diff_table(&r, &other), Err(Error::Contract(_))));
    }

    #[test]
    fn report_text_round_trip() {
        let r = MetricsReport::compute(&[1.0, 2.0, 4.0, 0.0], &[1.5, 2.0, 3.0, 0.1], "Mg/ha").unwrap();
        let back = MetricsReport::from_text(&r.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, r);
        assert!(r.to_text().contains("n_excluded_from_mape = 1"));
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 50.0), 3.0);
        assert_eq!(percentile(&v, 10.0), 1.4);
        assert_eq!(percentile(&v, 100.0), 5.0);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]).unwrap(), 2.5);
    }

    #[test]
    fn rank_deficient_design_uses_ridge() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let y: Vec<f64> = (0..6).map(|i| 1.0 + 3.0 * i as f64).collect();
        let m = LinearModel::fit(&x, &y).unwrap();
        assert!(m.ridge);
        for (xi, yi) in x.iter().zip(&y) {
            assert!((m.predict(xi) - yi).abs() < 1e-4);
        }
    }
}
