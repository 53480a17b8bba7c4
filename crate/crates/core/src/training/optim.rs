use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: usize,
    pub warmup_start_factor: f64,
    pub floor_factor: f64,
}

impl ScheduleConfig {
    pub fn new(base_lr: f64, warmup_epochs: f64, total_epochs: usize) -> Self {
        Self {
            base_lr,
            warmup_epochs,
            total_epochs,
            warmup_start_factor: 1e-3,
            floor_factor: 1e-2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "base lr must be > 0, got {}",
                self.base_lr
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("total epochs must be ≥ 1".into()));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.total_epochs as f64) {
            return Err(Error::Config(format!(
                "warmup {} must lie in [0, {})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        let factors = [self.warmup_start_factor, self.floor_factor];
        if factors.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config(format!(
                "lr factors must lie in (0, 1], got {factors:?}"
            )));
        }
        Ok(())
    }
}

/// Learning rate at `t`, the elapsed fraction of all epochs (clamped to
/// `[0, 1]`): linear warmup then cosine decay to the floor.
pub fn lr_at(s: &ScheduleConfig, t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    let w = s.warmup_epochs / s.total_epochs as f64;
    if t < w {
        let a = s.warmup_start_factor;
        return s.base_lr * (a + (1.0 - a) * t / w);
    }
    let p = if w < 1.0 { (t - w) / (1.0 - w) } else { 1.0 };
    let floor = s.floor_factor;
    s.base_lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// SGD with heavy-ball momentum and weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            velocity: params
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}

/// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v` for every parameter. Nothing is
/// modified if any gradient is non-finite.
pub fn sgd_step(
    state: &mut OptimizerState,
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    names: &[String],
    lr: f64,
    epoch: usize,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::Contract(format!(
            "sgd_step got {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.velocity[i].shape() {
            return Err(Error::shape("sgd_step", &p.shape(), &g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                param: names.get(i).cloned().unwrap_or_else(|| format!("param{i}")),
                norm: g.norm(),
            });
        }
    }
    let OptimizerConfig {
        momentum,
        weight_decay,
    } = state.config;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((pj, &gj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vj = momentum * *vj + (gj + weight_decay * *pj);
            *pj -= lr * *vj;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl TrainConfig {
    pub fn new(base_lr: f64, epochs: usize, batch_size: usize) -> Self {
        Self {
            schedule: ScheduleConfig::new(
                base_lr,
                1.0_f64.min(epochs as f64 - 1.0).max(0.0),
                epochs,
            ),
            batch_size,
            optimizer: OptimizerConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be ≥ 2, got {}",
                self.batch_size
            )));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) {
            return Err(Error::Config(format!("bad optimizer settings {o:?}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(momentum: f64, weight_decay: f64) -> OptimizerConfig {
        OptimizerConfig {
            momentum,
            weight_decay,
        }
    }

    fn step(state: &mut OptimizerState, p: &mut Tensor, g: &Tensor, lr: f64) -> Result<()> {
        sgd_step(
            state,
            &mut [p],
            std::slice::from_ref(g),
            &["p".into()],
            lr,
            0,
        )
    }

    #[test]
    fn single_plain_step() {
        let mut p = Tensor::scalar(0.0);
        let mut s = OptimizerState::new(plain(0.0, 0.0), &[&p]);
        step(&mut s, &mut p, &Tensor::scalar(1.0), 0.1).unwrap();
        assert_eq!(p.item(), -0.1);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = Tensor::row(&[2.0, -4.0]);
        let mut s = OptimizerState::new(plain(0.9, 0.0), &[&p]);
        step(&mut s, &mut p, &Tensor::zeros(1, 2), 0.5).unwrap();
        assert_eq!(p.data(), &[2.0, -4.0]);
        let mut s = OptimizerState::new(plain(0.9, 0.1), &[&p]);
        step(&mut s, &mut p, &Tensor::zeros(1, 2), 0.5).unwrap();
        assert_eq!(p.data(), &[2.0 - 0.5 * 0.2, -4.0 + 0.5 * 0.4]);
    }

    #[test]
    fn two_momentum_steps_unroll() {
        let (lr, g) = (0.1, 0.7);
        let mut p = Tensor::scalar(0.0);
        let mut s = OptimizerState::new(plain(0.9, 0.0), &[&p]);
        step(&mut s, &mut p, &Tensor::scalar(g), lr).unwrap();
        step(&mut s, &mut p, &Tensor::scalar(g), lr).unwrap();
        assert!((p.item() + lr * (g + 1.9 * g)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = Tensor::scalar(1.0);
        let mut s = OptimizerState::new(OptimizerConfig::default(), &[&p]);
        let err = sgd_step(
            &mut s,
            &mut [&mut p],
            &[Tensor::scalar(f64::NAN)],
            &["w".into()],
            0.1,
            4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { epoch: 4, ref param, .. } if param == "w"));
        assert_eq!(p.item(), 1.0);
    }

    #[test]
    fn schedule_endpoints_and_shape() {
        let s = ScheduleConfig::new(0.1, 1.0, 30);
        assert!((lr_at(&s, 0.0) - 0.1e-3).abs() < 1e-18);
        assert_eq!(lr_at(&s, 1.0 / 30.0), 0.1);
        assert!((lr_at(&s, 1.0) - 0.1e-2).abs() < 1e-12);
        let grid: Vec<f64> = (0..=300).map(|i| lr_at(&s, i as f64 / 300.0)).collect();
        assert!(grid.iter().all(|&x| x > 0.0));
        assert!(grid[10..].windows(2).all(|w| w[1] <= w[0]));
        let eps = 1e-9;
        assert!((lr_at(&s, 1.0 / 30.0 - eps) - lr_at(&s, 1.0 / 30.0 + eps)).abs() < 1e-8);
        let no_warmup = ScheduleConfig::new(1.0, 0.0, 5);
        assert_eq!(lr_at(&no_warmup, 0.0), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(ScheduleConfig::new(0.0, 1.0, 3).validate().is_err());
        assert!(ScheduleConfig::new(0.1, 3.0, 3).validate().is_err());
        assert!(TrainConfig::new(0.1, 3, 1).validate().is_err());
        assert!(TrainConfig::new(0.1, 1, 8).validate().is_ok());
    }
}
