//! SGD with momentum, learning-rate schedules and input mixup.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
    decay: Vec<bool>,
}

impl Sgd {
    /// Velocities start at zero with the shapes of `params`. Weight decay
    /// applies to every parameter unless narrowed by [`Sgd::with_decay_mask`].
    pub fn new(params: &[&Tensor], lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            decay: vec![true; params.len()],
        }
    }

    pub fn with_decay_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.velocity.len() {
            return Err(Error::Config(format!(
                "decay mask has {} entries for {} parameters",
                mask.len(),
                self.velocity.len()
            )));
        }
        self.decay = mask;
        Ok(self)
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// `v <- mu v + (g + wd p)`, then `p <- p - lr v`.
    ///
    /// Nothing is modified if any gradient is non-finite; the error names the
    /// offending parameter from `names`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], names: &[String]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "sgd_step",
                format!("{} parameters, {} gradients, {} velocities", params.len(), grads.len(), self.velocity.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = || names.get(i).cloned().unwrap_or_else(|| format!("parameter {i}"));
            if p.shape() != g.shape() || p.shape() != self.velocity[i].shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("{}: parameter {:?}, gradient {:?}", name(), p.shape(), g.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite("gradient".into()).in_layer(name()));
            }
        }
        for ((p, g), (v, &decay)) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut().zip(&self.decay)) {
            let wd = if decay { self.weight_decay } else { 0.0 };
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + (gi + wd * *pi);
                *pi -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    /// `base / divisor^k` with `k` the number of milestones at or before the
    /// epoch. Momentum stays at `momentum`.
    StepDecay {
        base: f64,
        milestones: Vec<usize>,
        divisor: f64,
        momentum: f64,
        epochs: usize,
    },
    /// Piecewise-linear ramp up to `peak` then back to `base`, followed by a
    /// geometric anneal to `final_lr`. Momentum mirrors the ramps and is
    /// pinned at `momentum_low` during the anneal.
    OneCycle {
        base: f64,
        peak: f64,
        final_lr: f64,
        momentum_high: f64,
        momentum_low: f64,
        ramp_up_end: usize,
        ramp_down_end: usize,
        epochs: usize,
    },
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a * (1.0 - t) + b * t
}

fn fraction(epoch: usize, start: usize, end: usize) -> f64 {
    if end <= start {
        1.0
    } else {
        (epoch - start) as f64 / (end - start) as f64
    }
}

impl Schedule {
    /// Ten-fold reductions at the given epochs, from `base`.
    pub fn step_decay(base: f64, milestones: Vec<usize>, momentum: f64, epochs: usize) -> Self {
        Schedule::StepDecay {
            base,
            milestones,
            divisor: 10.0,
            momentum,
            epochs,
        }
    }

    /// 0.1 -> 0.5 -> 0.1 then annealed 100-fold, with waypoints at epochs
    /// 13, 26 and 30 of a 30-epoch run; shorter or longer runs scale the
    /// waypoints proportionally.
    pub fn one_cycle(epochs: usize) -> Self {
        let scaled = |e: usize| ((e * epochs) as f64 / 30.0).round() as usize;
        let ramp_up_end = scaled(13).clamp(1, epochs.max(1));
        let ramp_down_end = scaled(26).clamp(ramp_up_end, epochs.max(1));
        Schedule::OneCycle {
            base: 0.1,
            peak: 0.5,
            final_lr: 0.001,
            momentum_high: 0.95,
            momentum_low: 0.85,
            ramp_up_end,
            ramp_down_end,
            epochs,
        }
    }

    pub fn epochs(&self) -> usize {
        match *self {
            Schedule::StepDecay { epochs, .. } | Schedule::OneCycle { epochs, .. } => epochs,
        }
    }

    /// `(lr, momentum)` for a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> Result<(f64, f64)> {
        let total = self.epochs();
        if epoch == 0 || epoch > total {
            return Err(Error::EpochOutOfRange { epoch, total });
        }
        Ok(match *self {
            Schedule::StepDecay {
                base,
                ref milestones,
                divisor,
                momentum,
                ..
            } => {
                let k = milestones.iter().filter(|&&m| m <= epoch).count();
                (base / divisor.powi(k as i32), momentum)
            }
            Schedule::OneCycle {
                base,
                peak,
                final_lr,
                momentum_high,
                momentum_low,
                ramp_up_end,
                ramp_down_end,
                epochs,
            } => {
                if epoch <= ramp_up_end {
                    let t = fraction(epoch, 1, ramp_up_end);
                    (lerp(base, peak, t), lerp(momentum_high, momentum_low, t))
                } else if epoch <= ramp_down_end {
                    let t = fraction(epoch, ramp_up_end, ramp_down_end);
                    (lerp(peak, base, t), lerp(momentum_low, momentum_high, t))
                } else {
                    let t = fraction(epoch, ramp_down_end, epochs);
                    (base * (final_lr / base).powf(t), momentum_low)
                }
            }
        })
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::StepDecay { milestones, .. } => {
                let list: Vec<String> = milestones.iter().map(|m| m.to_string()).collect();
                write!(f, "step:{}", list.join(","))
            }
            Schedule::OneCycle { .. } => f.write_str("onecycle"),
        }
    }
}

/// A parsed `--schedule` value, completed into a [`Schedule`] once the base
/// rate, momentum and run length are known.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScheduleSpec {
    Step(Vec<usize>),
    OneCycle,
}

impl ScheduleSpec {
    pub fn build(&self, base_lr: f64, momentum: f64, epochs: usize) -> Schedule {
        match self {
            ScheduleSpec::Step(m) => Schedule::step_decay(base_lr, m.clone(), momentum, epochs),
            ScheduleSpec::OneCycle => Schedule::one_cycle(epochs),
        }
    }
}

impl FromStr for ScheduleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "onecycle" {
            return Ok(ScheduleSpec::OneCycle);
        }
        let list = s
            .strip_prefix("step:")
            .ok_or_else(|| Error::Config(format!("schedule {s:?} is neither step:<e1,e2,...> nor onecycle")))?;
        let milestones = list
            .split(',')
            .filter(|m| !m.is_empty())
            .map(|m| m.trim().parse().map_err(|_| Error::Config(format!("bad milestone {m:?}"))))
            .collect::<Result<Vec<usize>>>()?;
        Ok(ScheduleSpec::Step(milestones))
    }
}

impl fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleSpec::Step(m) => {
                let list: Vec<String> = m.iter().map(|e| e.to_string()).collect();
                write!(f, "step:{}", list.join(","))
            }
            ScheduleSpec::OneCycle => f.write_str("onecycle"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixupConfig {
    pub alpha: f64,
    pub enabled: bool,
}

impl MixupConfig {
    pub fn disabled() -> Self {
        Self { alpha: 0.0, enabled: false }
    }

    /// Enabled iff `alpha > 0`.
    pub fn from_alpha(alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("mixup alpha must be finite and non-negative, got {alpha}")));
        }
        Ok(Self {
            alpha,
            enabled: alpha > 0.0,
        })
    }
}

/// `lambda * batch + (1 - lambda) * batch[perm]` along the leading axis.
pub fn mix_with(x: &Tensor, targets: &Tensor, lambda: f64, perm: &[usize]) -> Result<(Tensor, Tensor)> {
    let b = x.shape().first().copied().unwrap_or(0);
    if targets.shape().first() != Some(&b) || perm.len() != b {
        return Err(Error::shape(
            "mixup",
            format!("inputs {:?}, targets {:?}, permutation of {}", x.shape(), targets.shape(), perm.len()),
        ));
    }
    let mix = |t: &Tensor| -> Result<Tensor> {
        let row = t.len() / b.max(1);
        let mut out = Vec::with_capacity(t.len());
        for (i, &j) in perm.iter().enumerate() {
            let a = &t.data()[i * row..(i + 1) * row];
            let p = &t.data()[j * row..(j + 1) * row];
            out.extend(a.iter().zip(p).map(|(&u, &v)| lambda * u + (1.0 - lambda) * v));
        }
        Tensor::new(t.shape().to_vec(), out)
    };
    Ok((mix(x)?, mix(targets)?))
}

/// Draws `lambda ~ Beta(alpha, alpha)` once for the batch and mixes each
/// instance with a shuffled partner. Disabled configs return the batch
/// unchanged with `lambda = 1`.
pub fn mixup_batch<R: Rng>(x: &Tensor, targets: &Tensor, cfg: &MixupConfig, rng: &mut R) -> Result<(Tensor, Tensor, f64)> {
    if !cfg.enabled {
        return Ok((x.clone(), targets.clone(), 1.0));
    }
    let beta = Beta::new(cfg.alpha, cfg.alpha)
        .map_err(|e| Error::Config(format!("mixup alpha {}: {e}", cfg.alpha)))?;
    let lambda = beta.sample(rng);
    let mut perm: Vec<usize> = (0..x.shape().first().copied().unwrap_or(0)).collect();
    perm.shuffle(rng);
    let (xm, tm) = mix_with(x, targets, lambda, &perm)?;
    Ok((xm, tm, lambda))
}
