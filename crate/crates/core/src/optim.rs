//! First-order optimizers and batch scheduling.

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Sgdm,
    Rmsprop,
    Adam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [Self::Adam, Self::Rmsprop, Self::Sgd, Self::Sgdm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Sgdm => "sgdm",
            Self::Rmsprop => "rmsprop",
            Self::Adam => "adam",
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}
fn default_decay() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_true() -> bool {
    true
}

#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Adam bias correction; on by default.
    #[serde(default = "default_true")]
    pub bias_correction: bool,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            momentum: default_momentum(),
            decay: default_decay(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            bias_correction: true,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("decay", self.decay),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Per-parameter accumulators: first moment / momentum in `m`, second moment
/// in `v`, one array per parameter channel.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step_count: u64,
}

impl OptState {
    pub fn new(params: &[Array2<f64>]) -> Self {
        let zeros = || params.iter().map(|p| Array2::zeros(p.dim())).collect();
        Self { m: zeros(), v: zeros(), step_count: 0 }
    }
}

/// Applies one optimizer update to `params` in place.
///
/// Non-finite gradients are rejected before anything is modified.
pub fn step(cfg: &OptimizerConfig, state: &mut OptState, params: &mut [Array2<f64>], grads: &[Array2<f64>]) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return dim_err(format!(
            "{} parameter channels, {} gradient channels, {} state channels",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.dim() != g.dim() || p.dim() != m.dim() {
            return dim_err(format!("parameter {:?} vs gradient {:?}", p.dim(), g.dim()));
        }
    }
    if grads.iter().flat_map(|g| g.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient contains non-finite values".into()));
    }
    state.step_count += 1;
    let lr = cfg.lr;
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        match cfg.kind {
            OptimizerKind::Sgd => p.scaled_add(-lr, g),
            OptimizerKind::Sgdm => {
                let mu = cfg.momentum;
                Zip::from(&mut *m).and(g).for_each(|m, &g| *m = mu * *m + g);
                p.scaled_add(-lr, m);
            }
            OptimizerKind::Rmsprop => {
                let (rho, eps) = (cfg.decay, cfg.eps);
                Zip::from(p).and(g).and(v).for_each(|p, &g, v| {
                    *v = rho * *v + (1.0 - rho) * g * g;
                    *p -= lr * g / (v.sqrt() + eps);
                });
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.eps);
                let t = state.step_count as i32;
                let (c1, c2) = if cfg.bias_correction {
                    (1.0 - b1.powi(t), 1.0 - b2.powi(t))
                } else {
                    (1.0, 1.0)
                };
                Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchOrder {
    Sequential,
    Shuffled { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSchedule {
    pub n_total: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub order: BatchOrder,
}

impl BatchSchedule {
    pub fn new(n_total: usize, batch_size: usize, epochs: usize) -> Self {
        Self { n_total, batch_size, epochs, order: BatchOrder::Sequential }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > self.n_total {
            return Err(Error::Config(format!(
                "batch size {} must lie in [1, {}]",
                self.batch_size, self.n_total
            )));
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n_total.div_ceil(self.batch_size)
    }

    /// Batches of one epoch. Shuffled orders draw a fresh permutation per
    /// epoch from a stream seeded by `(seed, epoch)`.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.n_total).collect();
        if let BatchOrder::Shuffled { seed } = self.order {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            idx.shuffle(&mut rng);
        }
        idx.chunks(self.batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// All batches of the schedule, epoch after epoch.
pub fn batches(schedule: &BatchSchedule) -> Vec<Vec<usize>> {
    (0..schedule.epochs).flat_map(|e| schedule.epoch_batches(e)).collect()
}

/// Number of optimizer steps applied: `epochs · ⌈n_total / batch_size⌉`.
pub fn update_count(epochs: usize, n_total: usize, batch_size: usize) -> usize {
    epochs * n_total.div_ceil(batch_size.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Vec<Array2<f64>> {
        vec![Array2::from_elem((1, 1), x)]
    }

    fn run(cfg: &OptimizerConfig, grads: &[f64]) -> Vec<f64> {
        let mut p = scalar(0.0);
        let mut st = OptState::new(&p);
        grads
            .iter()
            .map(|&g| {
                step(cfg, &mut st, &mut p, &scalar(g)).unwrap();
                p[0][[0, 0]]
            })
            .collect()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for kind in OptimizerKind::ALL {
            let out = run(&OptimizerConfig::new(kind, 0.1), &[0.0, 0.0]);
            assert_eq!(out, vec![0.0, 0.0], "{kind:?}");
        }
    }

    #[test]
    fn adam_first_step() {
        let out = run(&OptimizerConfig::adam(0.1), &[0.5]);
        let want = -0.1 * 0.5 / (0.5 + 1e-8);
        assert!((out[0] - want).abs() < 1e-15);
    }

    #[test]
    fn sgdm_second_update() {
        let out = run(&OptimizerConfig::new(OptimizerKind::Sgdm, 0.1), &[1.0, 1.0]);
        assert!((out[1] - out[0] - (-0.1 * 1.9)).abs() < 1e-15);
    }

    #[test]
    fn sgdm_without_momentum_is_sgd() {
        let g = [0.3, -1.2, 0.7, 2.0, -0.1];
        let mut cfg = OptimizerConfig::new(OptimizerKind::Sgdm, 0.05);
        cfg.momentum = 0.0;
        assert_eq!(run(&cfg, &g), run(&OptimizerConfig::new(OptimizerKind::Sgd, 0.05), &g));
    }

    #[test]
    fn rmsprop_zero_decay_recurrence() {
        let g = [0.3, -1.2, 0.7, 2.0, -0.1];
        let mut cfg = OptimizerConfig::new(OptimizerKind::Rmsprop, 0.01);
        cfg.decay = 0.0;
        let out = run(&cfg, &g);
        let mut p = 0.0;
        for (i, &gi) in g.iter().enumerate() {
            p -= 0.01 * gi / (gi.abs() + 1e-8);
            assert!((out[i] - p).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_without_bias_correction_recurrence() {
        let g = [0.3, -1.2, 0.7, 2.0, -0.1];
        let mut cfg = OptimizerConfig::adam(0.01);
        cfg.bias_correction = false;
        let out = run(&cfg, &g);
        let (mut m, mut v, mut p) = (0.0, 0.0, 0.0);
        for (i, &gi) in g.iter().enumerate() {
            m = 0.9 * m + 0.1 * gi;
            v = 0.999 * v + 0.001 * gi * gi;
            p -= 0.01 * m / (f64::sqrt(v) + 1e-8);
            assert!((out[i] - p).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = scalar(1.0);
        let mut st = OptState::new(&p);
        let err = step(&OptimizerConfig::adam(0.1), &mut st, &mut p, &scalar(f64::NAN));
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(st.step_count, 0);
        assert_eq!(p[0][[0, 0]], 1.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = scalar(1.0);
        let mut st = OptState::new(&p);
        let g = vec![Array2::zeros((2, 2))];
        assert!(step(&OptimizerConfig::adam(0.1), &mut st, &mut p, &g).is_err());
    }

    #[test]
    fn batch_examples() {
        let s = BatchSchedule::new(225, 1, 20);
        let all = batches(&s);
        assert_eq!(all.len(), 4500);
        assert!(all.iter().all(|b| b.len() == 1));
        assert_eq!(batches(&BatchSchedule::new(4, 4, 1)), vec![vec![0, 1, 2, 3]]);
        let sizes: Vec<usize> = batches(&BatchSchedule::new(5, 2, 1)).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn update_counts() {
        assert_eq!(update_count(20, 225, 1), 4500);
        assert_eq!(update_count(20, 225, 64), 80);
        assert_eq!(update_count(1, 10, 10), 1);
    }

    #[test]
    fn invalid_configs() {
        assert!(OptimizerConfig::adam(0.0).validate().is_err());
        let mut c = OptimizerConfig::adam(0.1);
        c.beta2 = 1.0;
        assert!(c.validate().is_err());
        assert!(BatchSchedule::new(3, 4, 1).validate().is_err());
        assert!(BatchSchedule::new(3, 0, 1).validate().is_err());
    }
}
