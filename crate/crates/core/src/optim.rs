//! Adam with a piecewise-constant learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Learning rate `values[i]` applies for `breakpoints[i-1] < κ ≤ breakpoints[i]`;
/// the last value runs to `total`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub breakpoints: Vec<usize>,
    pub values: Vec<f64>,
    pub total: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            breakpoints: vec![20_000, 30_000, 40_000, 50_000],
            values: vec![1e-3, 3e-4, 1e-4, 3e-5, 1e-5],
            total: 60_000,
        }
    }
}

impl LrSchedule {
    pub fn new(breakpoints: Vec<usize>, values: Vec<f64>, total: usize) -> Result<Self> {
        let s = Self {
            breakpoints,
            values,
            total,
        };
        s.validate()?;
        Ok(s)
    }

    /// The default schedule with breakpoints rescaled to `total` steps.
    pub fn scaled(total: usize) -> Self {
        let d = Self::default();
        let breakpoints = d
            .breakpoints
            .iter()
            .map(|&b| ((b as f64 / d.total as f64) * total as f64).round() as usize)
            .collect();
        Self {
            breakpoints,
            values: d.values,
            total,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.breakpoints.len() + 1 {
            return Err(Error::InvalidConfig("schedule needs one more value than breakpoints".into()));
        }
        if self.values.windows(2).any(|w| !(w[1] < w[0])) || self.values.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidConfig("schedule values must be positive and strictly decreasing".into()));
        }
        if self.breakpoints.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidConfig("schedule breakpoints must be non-decreasing".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step == 0 || step > self.total {
            return Err(Error::StepOutOfRange {
                step,
                total: self.total,
            });
        }
        let i = self.breakpoints.iter().take_while(|&&b| step > b).count();
        Ok(self.values[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradient to at most this global norm.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// Moment estimates for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::len).collect();
        Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    /// One bias-corrected Adam update with learning rate `lr`. The state and
    /// parameters are left untouched when a gradient is non-finite.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[&Tensor],
        lr: f64,
    ) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension {
                what: "parameter list",
                expected: self.m.len(),
                got: params.len().min(grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != p.len() {
                return Err(Error::Dimension {
                    what: "gradient",
                    expected: self.m[i].len(),
                    got: g.len(),
                });
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        let c = self.config;
        let factor = match c.clip_norm {
            Some(max) => {
                let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj * factor;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
