//! SGD and Adam with classic L2 weight decay, step learning-rate schedules,
//! and masked updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Layer, Network};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Learning rate for epochs `start..=end` (1-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrPhase {
    pub start: usize,
    pub end: usize,
    pub lr: f64,
}

fn default_momentum() -> f64 {
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
fn default_batch() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr_schedule: Vec<LrPhase>,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
}

impl OptimizerConfig {
    /// Constant learning rate over all epochs.
    pub fn constant(kind: OptimizerKind, lr: f64, epochs: usize, batch_size: usize) -> Self {
        let lr_schedule = if epochs == 0 {
            Vec::new()
        } else {
            vec![LrPhase { start: 1, end: epochs, lr }]
        };
        Self {
            kind,
            lr_schedule,
            weight_decay: 0.0,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            batch_size,
            epochs,
        }
    }

    /// `lr` until `drop_after`, then `lr_late` for the remaining epochs.
    pub fn step_schedule(kind: OptimizerKind, lr: f64, drop_after: usize, lr_late: f64, epochs: usize, batch_size: usize) -> Self {
        let mut cfg = Self::constant(kind, lr, epochs, batch_size);
        if drop_after < epochs {
            cfg.lr_schedule = vec![
                LrPhase { start: 1, end: drop_after, lr },
                LrPhase { start: drop_after + 1, end: epochs, lr: lr_late },
            ];
            cfg.lr_schedule.retain(|p| p.start <= p.end);
        }
        cfg
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    /// Checks that the phases tile `1..=epochs` and every value is usable.
    ///
    /// A learning rate of zero is accepted; it freezes the parameters.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        let mut next = 1;
        for (k, p) in self.lr_schedule.iter().enumerate() {
            if p.start != next || p.end < p.start {
                return fail(format!(
                    "lr_schedule[{k}] covers epochs {}..={}, expected to start at {next}",
                    p.start, p.end
                ));
            }
            if !(p.lr >= 0.0) || !p.lr.is_finite() {
                return fail(format!("lr_schedule[{k}].lr must be finite and non-negative"));
            }
            next = p.end + 1;
        }
        if next != self.epochs + 1 {
            return fail(format!("lr_schedule covers {} epochs but epochs = {}", next - 1, self.epochs));
        }
        for (name, v) in [("weight_decay", self.weight_decay), ("momentum", self.momentum), ("eps", self.eps)] {
            if !(v >= 0.0) || !v.is_finite() {
                return fail(format!("{name} must be finite and non-negative"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    /// Learning rate of the 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .find(|p| (p.start..=p.end).contains(&epoch))
            .map_or(0.0, |p| p.lr)
    }
}

/// Hyperparameters of one update, already converted to the scalar type.
#[derive(Clone, Copy, Debug)]
pub struct StepParams<T> {
    pub lr: T,
    pub weight_decay: T,
    pub momentum: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> StepParams<T> {
    pub fn from_config(cfg: &OptimizerConfig, lr: f64) -> Self {
        Self {
            lr: T::lit(lr),
            weight_decay: T::lit(cfg.weight_decay),
            momentum: T::lit(cfg.momentum),
            beta1: T::lit(cfg.beta1),
            beta2: T::lit(cfg.beta2),
            eps: T::lit(cfg.eps),
        }
    }
}

/// `v = momentum v + (g + wd w); w -= lr v` on live entries.
///
/// Element `e` is live when `active[e / group]` is set; dead entries and
/// their velocity are held at zero.
pub fn sgd_step<T: Scalar>(w: &mut [T], g: &[T], active: &[bool], group: usize, velocity: &mut [T], p: &StepParams<T>) {
    for (e, ((w, &g), v)) in w.iter_mut().zip(g).zip(velocity.iter_mut()).enumerate() {
        if !active[e / group] {
            *w = T::zero();
            *v = T::zero();
            continue;
        }
        *v = p.momentum * *v + (g + p.weight_decay * *w);
        *w -= p.lr * *v;
    }
}

/// Adam with bias correction; `step` is the 1-based update count.
pub fn adam_step<T: Scalar>(
    w: &mut [T],
    g: &[T],
    active: &[bool],
    group: usize,
    (m, v): (&mut [T], &mut [T]),
    step: u64,
    p: &StepParams<T>,
) {
    let t = i32::try_from(step).unwrap_or(i32::MAX);
    let c1 = T::one() - p.beta1.powi(t);
    let c2 = T::one() - p.beta2.powi(t);
    for (e, (((w, &g), m), v)) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()).enumerate() {
        if !active[e / group] {
            *w = T::zero();
            *m = T::zero();
            *v = T::zero();
            continue;
        }
        let g = g + p.weight_decay * *w;
        *m = p.beta1 * *m + (T::one() - p.beta1) * g;
        *v = p.beta2 * *v + (T::one() - p.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w -= p.lr * m_hat / (v_hat.sqrt() + p.eps);
    }
}

/// Per-buffer optimizer state, aligned with the network's parameter buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    pub step: u64,
    /// SGD velocity or Adam first moment.
    pub first: Vec<Vec<T>>,
    /// Adam second moment; empty for SGD.
    pub second: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    /// Zeroed state for `net`.
    pub fn new(config: OptimizerConfig, net: &Network<T>) -> Result<Self> {
        config.validate()?;
        let sizes = parameter_sizes(net);
        let zeros = || sizes.iter().map(|&n| vec![T::zero(); n]).collect::<Vec<_>>();
        let second = match config.kind {
            OptimizerKind::Adam => zeros(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Ok(Self {
            config,
            step: 0,
            first: zeros(),
            second,
        })
    }

    /// Applies one update with learning rate `lr`; `grads` follows the
    /// network's buffer order (per layer: weights, then bias).
    pub fn apply(&mut self, net: &mut Network<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        if grads.len() != self.first.len() {
            return Err(Error::dim(format!(
                "{} gradient buffers for {} parameter buffers",
                grads.len(),
                self.first.len()
            )));
        }
        self.step += 1;
        let p = StepParams::from_config(&self.config, lr);
        let mut k = 0;
        for layer in net.layers_mut() {
            for (w, active, group) in layer.parameters_mut() {
                let g = &grads[k];
                if g.len() != w.len() || self.first[k].len() != w.len() {
                    return Err(Error::dim(format!("buffer {k}: gradient length {} for {} values", g.len(), w.len())));
                }
                match self.config.kind {
                    OptimizerKind::Sgd => sgd_step(w, g, active, group, &mut self.first[k], &p),
                    OptimizerKind::Adam => adam_step(
                        w,
                        g,
                        active,
                        group,
                        (&mut self.first[k], &mut self.second[k]),
                        self.step,
                        &p,
                    ),
                }
                k += 1;
            }
        }
        Ok(())
    }

    pub fn to_record(&self) -> OptimizerRecord {
        let conv = |b: &Vec<Vec<T>>| b.iter().map(|v| v.iter().map(|x| x.as_f64()).collect()).collect();
        OptimizerRecord {
            config: self.config.clone(),
            step: self.step,
            first: conv(&self.first),
            second: conv(&self.second),
        }
    }

    pub fn from_record(record: OptimizerRecord, net: &Network<T>) -> Result<Self> {
        let mut fresh = Self::new(record.config, net)?;
        let fit = |dst: &mut Vec<Vec<T>>, src: Vec<Vec<f64>>, what: &str| -> Result<()> {
            if dst.len() != src.len() || dst.iter().zip(&src).any(|(a, b)| a.len() != b.len()) {
                return Err(Error::Format(format!("optimizer {what} state does not match the model")));
            }
            *dst = src.into_iter().map(|v| v.into_iter().map(T::lit).collect()).collect();
            Ok(())
        };
        fit(&mut fresh.first, record.first, "first-moment")?;
        fit(&mut fresh.second, record.second, "second-moment")?;
        fresh.step = record.step;
        Ok(fresh)
    }
}

/// Serialized form of [`Optimizer`] (`optimizer.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub config: OptimizerConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

/// Length of every parameter buffer, per layer weights then bias.
pub fn parameter_sizes<T: Scalar>(net: &Network<T>) -> Vec<usize> {
    net.layers()
        .iter()
        .flat_map(|l| match l {
            Layer::Dense(d) => vec![d.weights.len(), d.bias.len()],
            Layer::Conv(c) => vec![c.kernels.len(), c.bias.len()],
            _ => Vec::new(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(lr: f64, wd: f64, momentum: f64) -> StepParams<f64> {
        StepParams {
            lr,
            weight_decay: wd,
            momentum,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn sgd_examples() {
        let mut w = [1.0];
        sgd_step(&mut w, &[0.5], &[true], 1, &mut [0.0], &params(0.1, 0.0, 0.0));
        assert!((w[0] - 0.95).abs() < 1e-15);
        let mut w = [1.0];
        sgd_step(&mut w, &[0.5], &[true], 1, &mut [0.0], &params(0.1, 5e-4, 0.0));
        assert!((w[0] - 0.94995).abs() < 1e-15);
        let (mut w, mut v) = ([0.0, 2.0], [0.0, 0.0]);
        sgd_step(&mut w, &[3.0, 0.0], &[false, true], 1, &mut v, &params(0.1, 0.0, 0.9));
        assert_eq!(w, [0.0, 2.0]);
    }

    #[test]
    fn adam_examples() {
        let mut w = [1.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_step(&mut w, &[0.1], &[true], 1, (&mut m, &mut v), 1, &params(1e-3, 0.0, 0.0));
        assert!((w[0] - 0.999).abs() < 1e-9);

        let mut w = [0.7];
        let (mut m, mut v) = ([0.0], [0.0]);
        for t in 1..=20 {
            adam_step(&mut w, &[0.0], &[true], 1, (&mut m, &mut v), t, &params(1e-3, 0.0, 0.0));
        }
        assert_eq!(w[0], 0.7);

        let mut w = [0.0, 1.0, 1.0];
        let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
        for t in 1..=5 {
            adam_step(&mut w, &[1.0, 1.0, 1.0], &[false, true, true], 1, (&mut m, &mut v), t, &params(1e-2, 0.0, 0.0));
        }
        assert_eq!((w[0], m[0], v[0]), (0.0, 0.0, 0.0));
        assert!(w[1] < 1.0);
    }

    #[test]
    fn schedule_validation() {
        let cfg = OptimizerConfig::step_schedule(OptimizerKind::Adam, 1e-3, 7, 1e-4, 10, 32);
        cfg.validate().unwrap();
        assert_eq!((cfg.lr_at(7), cfg.lr_at(8), cfg.lr_at(11)), (1e-3, 1e-4, 0.0));

        let mut gap = cfg.clone();
        gap.lr_schedule[1].start = 9;
        assert!(gap.validate().is_err());
        let mut short = cfg.clone();
        short.epochs = 12;
        assert!(short.validate().is_err());
        let mut negative = cfg;
        negative.lr_schedule[0].lr = -1.0;
        assert!(negative.validate().is_err());
        OptimizerConfig::constant(OptimizerKind::Sgd, 0.0, 3, 1).validate().unwrap();
    }

    #[test]
    fn config_json_defaults() {
        let cfg: OptimizerConfig =
            serde_json::from_str(r#"{"kind":"sgd","lr_schedule":[{"start":1,"end":2,"lr":0.1}],"epochs":2}"#).unwrap();
        assert_eq!((cfg.momentum, cfg.batch_size, cfg.weight_decay), (0.9, 64, 0.0));
        assert!(serde_json::from_str::<OptimizerConfig>(r#"{"kind":"rmsprop","lr_schedule":[],"epochs":0}"#).is_err());
    }
}
