use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{config_err, shape_err, Result};
use crate::tensor::{cast, Element};

/// `lr(t) = floor + (base - floor) (1 + cos(pi t / period)) / 2`, held at `floor` past the period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub floor: f64,
    pub period: u64,
}

impl CosineSchedule {
    pub fn new(base: f64, floor: f64, period: u64) -> Result<Self> {
        if !(base > 0.0) || !(floor >= 0.0) || floor > base {
            return config_err(format!("learning rates need 0 <= floor <= base, base > 0 (got {base}, {floor})"));
        }
        Ok(CosineSchedule { base, floor, period })
    }

    /// Constant rate.
    pub fn constant(lr: f64) -> Result<Self> {
        Self::new(lr, lr, 1)
    }

    pub fn lr(&self, t: u64) -> f64 {
        if self.period == 0 {
            return self.floor;
        }
        let frac = t.min(self.period) as f64 / self.period as f64;
        self.floor + 0.5 * (self.base - self.floor) * (1.0 + (PI * frac).cos())
    }
}

/// Adam with bias correction; moments kept in `f64` and keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: CosineSchedule,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(schedule: CosineSchedule) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, schedule, step: 0, moments: BTreeMap::new() }
    }

    pub fn with_betas(schedule: CosineSchedule, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || beta1 == 0.0 || beta2 == 0.0 {
            return config_err("Adam betas must lie in (0, 1)");
        }
        Ok(Adam { beta1, beta2, eps, ..Self::new(schedule) })
    }

    /// Completed updates.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Rate the next call to [`Adam::step`] will use.
    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// Updates every parameter that has a gradient; returns the rate used.
    /// Parameters without a gradient entry are left untouched.
    pub fn step<'a, T: Element>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut [T])>,
        grads: &BTreeMap<String, Vec<T>>,
    ) -> Result<f64> {
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params {
            let g = match grads.get(name) {
                Some(g) => g,
                None => continue,
            };
            if g.len() != p.len() {
                return shape_err(format!("gradient for {name} has {} values, parameter has {}", g.len(), p.len()));
            }
            let (m, v) = self.moments.entry(name.to_string()).or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            if m.len() != p.len() {
                return shape_err(format!("parameter {name} changed size between steps"));
            }
            for i in 0..p.len() {
                let gi = g[i].to_f64().unwrap_or(f64::NAN);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] = p[i] - cast::<T>(update);
            }
        }
        self.step += 1;
        Ok(lr)
    }
}
