//! First-order optimizers over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients so their global L2 norm does not exceed this value.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            ..Self::default()
        }
    }
}

/// Moment accumulators and step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        let shapes: Vec<usize> = store.ids().map(|id| store.get(id).numel()).collect();
        let zeros = |adam: bool| {
            shapes
                .iter()
                .map(|n| if adam { vec![0.0; *n] } else { Vec::new() })
                .collect()
        };
        let adam = config.kind == OptimizerKind::Adam;
        Self {
            config,
            step: 0,
            first: zeros(adam),
            second: zeros(adam),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients stored on each parameter.
    ///
    /// Parameters without an accumulated gradient are left unchanged.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.trainable().collect();
        for id in &ids {
            if let Some(g) = &store.get(*id).grad {
                if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Training(format!(
                        "non-finite gradient in parameter {} at element {pos}",
                        store.name(*id)
                    )));
                }
            }
        }
        let mut scale = 1.0;
        if let Some(max_norm) = self.config.clip_norm {
            let sq: f64 = ids
                .iter()
                .filter_map(|id| store.get(*id).grad.as_ref())
                .flat_map(|g| g.iter().map(|v| v * v))
                .sum();
            let norm = sq.sqrt();
            if norm > max_norm {
                scale = max_norm / norm;
            }
        }
        self.step += 1;
        let cfg = &self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for id in ids {
            let p = store.get_mut(id);
            let Some(grad) = p.grad.take() else { continue };
            match cfg.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.data_mut().iter_mut().zip(&grad) {
                        *w -= cfg.lr * g * scale;
                    }
                }
                OptimizerKind::Adam => {
                    let m = &mut self.first[id.index()];
                    let v = &mut self.second[id.index()];
                    for (i, w) in p.data_mut().iter_mut().enumerate() {
                        let g = grad[i] * scale;
                        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
                    }
                }
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DenseTensor;

    fn store_with(w: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add_param("w", DenseTensor::scalar(w));
        s.get_mut(id).accumulate_grad(&[g]);
        s
    }

    #[test]
    fn sgd_quadratic_step() {
        // f(w) = w², f'(1) = 2
        let mut s = store_with(1.0, 2.0);
        let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.1), &s);
        opt.step(&mut s).unwrap();
        assert!((s.get(s.lookup("w").unwrap()).data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut s = store_with(1.25, 0.0);
        let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.1), &s);
        opt.step(&mut s).unwrap();
        assert_eq!(s.get(s.lookup("w").unwrap()).data(), &[1.25]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut s = store_with(0.3, -1.7);
            let mut opt = OptimizerState::new(OptimizerConfig::default(), &s);
            opt.step(&mut s).unwrap();
            opt.step(&mut s).unwrap();
            s.get(s.lookup("w").unwrap()).data()[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = store_with(0.0, 5.0);
        let mut opt = OptimizerState::new(OptimizerConfig::default(), &s);
        opt.step(&mut s).unwrap();
        let w = s.get(s.lookup("w").unwrap()).data()[0];
        assert!((w + 1e-3).abs() < 1e-9, "{w}");
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = store_with(0.0, f64::NAN);
        let mut opt = OptimizerState::new(OptimizerConfig::default(), &s);
        let err = opt.step(&mut s).unwrap_err();
        assert!(matches!(err, Error::Training(ref m) if m.contains("parameter w")), "{err}");
    }
}
