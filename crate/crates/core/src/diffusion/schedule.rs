use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cumulative signal coefficients `alpha_bar[0..=T]` for a `T`-step sampler.
///
/// `alpha_bar[0]` is exactly 1 (the clean latent); the sequence is strictly
/// decreasing and stays in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

/// On-disk form: `{"num_steps": T, "alpha_bar": [T + 1 floats]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub alpha_bar: Vec<f64>,
}

pub const DEFAULT_NUM_STEPS: usize = 50;
pub const TRAIN_STEPS: usize = 1000;
pub const BETA_START: f64 = 0.00085;
pub const BETA_END: f64 = 0.012;

impl NoiseSchedule {
    pub fn new(mut alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::Schedule("need at least one step (T >= 1)".into()));
        }
        if (alpha_bar[0] - 1.0).abs() > 1e-6 {
            return Err(Error::Schedule(format!(
                "alpha_bar[0] must be 1, got {}",
                alpha_bar[0]
            )));
        }
        // exact 1 keeps the final noise blend bit-exact
        alpha_bar[0] = 1.0;
        for (t, &a) in alpha_bar.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Schedule(format!(
                    "alpha_bar[{t}] = {a} outside (0, 1]"
                )));
            }
        }
        if let Some(t) = alpha_bar.windows(2).position(|w| w[1] >= w[0]) {
            return Err(Error::Schedule(format!(
                "alpha_bar not strictly decreasing at t={}",
                t + 1
            )));
        }
        Ok(Self { alpha_bar })
    }

    /// `num_steps` uniformly strided steps from a `TRAIN_STEPS`-step
    /// scaled-linear beta schedule.
    pub fn scaled_linear(num_steps: usize) -> Result<Self> {
        if num_steps == 0 || num_steps > TRAIN_STEPS {
            return Err(Error::Schedule(format!(
                "num_steps must be in 1..={TRAIN_STEPS}, got {num_steps}"
            )));
        }
        let (lo, hi) = (BETA_START.sqrt(), BETA_END.sqrt());
        let mut cumprod = Vec::with_capacity(TRAIN_STEPS);
        let mut acc = 1.0;
        for i in 0..TRAIN_STEPS {
            let s = lo + (hi - lo) * i as f64 / (TRAIN_STEPS - 1) as f64;
            acc *= 1.0 - s * s;
            cumprod.push(acc);
        }
        let stride = TRAIN_STEPS / num_steps;
        let offset = usize::from(stride > 1);
        let mut alpha_bar = vec![1.0];
        alpha_bar.extend((1..=num_steps).map(|k| cumprod[(k - 1) * stride + offset]));
        Self::new(alpha_bar)
    }

    pub fn num_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| Error::Range {
            what: "timestep",
            detail: format!("t={t} not in 0..={}", self.num_steps()),
        })
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn to_config(&self) -> ScheduleConfig {
        ScheduleConfig {
            num_steps: self.num_steps(),
            alpha_bar: self.alpha_bar.clone(),
        }
    }

    pub fn from_config(cfg: ScheduleConfig) -> Result<Self> {
        if cfg.alpha_bar.len() != cfg.num_steps + 1 {
            return Err(Error::Schedule(format!(
                "num_steps={} needs {} alpha_bar entries, got {}",
                cfg.num_steps,
                cfg.num_steps + 1,
                cfg.alpha_bar.len()
            )));
        }
        Self::new(cfg.alpha_bar)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_config(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::scaled_linear(DEFAULT_NUM_STEPS).expect("default schedule is valid")
    }
}
