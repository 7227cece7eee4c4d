//! Deterministic DDIM noising, inversion and sampling.

use sha2::{Digest, Sha256};

use super::grid::LatentGrid;
use super::schedule::NoiseSchedule;
use crate::backends::{ConditioningSet, Denoiser};
use crate::error::{Branch, Error, Result};

/// Guidance weight used while inverting.
pub const INVERSION_GUIDANCE: f64 = 1.0;

/// `sqrt(ab_t)·z0 + sqrt(1 − ab_t)·eps`.
pub fn add_noise(
    z0: &LatentGrid,
    t: usize,
    eps: &LatentGrid,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    let ab = schedule.alpha_bar(t)?;
    z0.lin_comb(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Moves `z` from noise level `from` to `to` along the deterministic DDIM path
/// implied by `eps`. Used in both directions.
fn transfer(
    z: &LatentGrid,
    eps: &LatentGrid,
    from: usize,
    to: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    z.ensure_compatible(eps)?;
    let ab_from = schedule.alpha_bar(from)?;
    let ab_to = schedule.alpha_bar(to)?;
    if ab_from <= 0.0 {
        return Err(Error::DivisionGuard(format!(
            "alpha_bar[{from}] = {ab_from}"
        )));
    }
    // z0_hat = (z - sqrt(1-ab_from)·eps) / sqrt(ab_from)
    // out    = sqrt(ab_to)·z0_hat + sqrt(1-ab_to)·eps
    let ratio = (ab_to / ab_from).sqrt();
    let eps_coef = (1.0 - ab_to).sqrt() - ratio * (1.0 - ab_from).sqrt();
    z.lin_comb(ratio, eps, eps_coef)
}

/// One deterministic DDIM denoising step `t → t_prev` (`t_prev < t`).
pub fn ddim_step(
    z_t: &LatentGrid,
    eps_pred: &LatentGrid,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    if t_prev >= t {
        return Err(Error::Range {
            what: "ddim step",
            detail: format!("t_prev={t_prev} must be < t={t}"),
        });
    }
    transfer(z_t, eps_pred, t, t_prev, schedule)
}

/// One inverse DDIM step `t → t_next` (`t_next > t`).
pub fn ddim_invert_step(
    z_t: &LatentGrid,
    eps_pred: &LatentGrid,
    t: usize,
    t_next: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    if t_next <= t {
        return Err(Error::Range {
            what: "inversion step",
            detail: format!("t_next={t_next} must be > t={t}"),
        });
    }
    transfer(z_t, eps_pred, t, t_next, schedule)
}

/// Hash of everything in a conditioning set that can influence a prediction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Fingerprint(pub String);

impl Fingerprint {
    pub fn of(cond: &ConditioningSet) -> Self {
        let mut h = Sha256::new();
        h.update(b"prompt\0");
        h.update(cond.prompt_text.as_bytes());
        h.update(b"\0guidance\0");
        h.update(cond.guidance_weight.to_le_bytes());
        if let Some(p) = &cond.image_prompt {
            h.update(b"\0image_prompt\0");
            h.update(format!("{:?}", p.embedding.role).as_bytes());
            h.update(p.embedding.extractor_id.as_bytes());
            h.update(p.weight.to_le_bytes());
            for v in &p.embedding.vector {
                h.update(v.to_le_bytes());
            }
        }
        if let Some(d) = &cond.depth {
            h.update(b"\0depth\0");
            let (rows, cols) = d.dim();
            h.update((rows as u64).to_le_bytes());
            h.update((cols as u64).to_le_bytes());
            for v in d.values().iter() {
                h.update(v.to_le_bytes());
            }
        }
        Fingerprint(hex::encode(h.finalize()))
    }
}

/// Latents `z_0 … z_T` produced by inversion, plus the noise predictions that
/// connected consecutive entries.
#[derive(Debug, Clone)]
pub struct Trajectory {
    latents: Vec<LatentGrid>,
    eps: Vec<LatentGrid>,
    fingerprint: Fingerprint,
}

impl Trajectory {
    pub fn latents(&self) -> &[LatentGrid] {
        &self.latents
    }

    pub fn latent(&self, t: usize) -> &LatentGrid {
        &self.latents[t]
    }

    /// Noise prediction that took `z_t` to `z_{t+1}`.
    pub fn eps(&self, t: usize) -> &LatentGrid {
        &self.eps[t]
    }

    pub fn terminal(&self) -> &LatentGrid {
        self.latents.last().expect("trajectory has T+1 entries")
    }

    pub fn num_steps(&self) -> usize {
        self.latents.len() - 1
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    /// Samples from `z_T` back to `z_0` re-using the recorded predictions.
    pub fn replay_sample(&self, schedule: &NoiseSchedule) -> Result<LatentGrid> {
        let mut z = self.terminal().clone();
        for t in (1..=self.num_steps()).rev() {
            z = ddim_step(&z, &self.eps[t - 1], t, t - 1, schedule)?;
        }
        Ok(z)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InversionOptions {
    /// Extra fixed-point passes per step: re-predict noise at the candidate
    /// `z_{t+1}` and re-solve, so forward sampling retraces the inversion.
    pub fixed_point_iters: usize,
}

/// DDIM inversion of `z0` with guidance weight [`INVERSION_GUIDANCE`].
pub fn ddim_invert(
    z0: &LatentGrid,
    backend: &dyn Denoiser,
    cond: &ConditioningSet,
    schedule: &NoiseSchedule,
) -> Result<Trajectory> {
    ddim_invert_with(z0, backend, cond, schedule, InversionOptions::default())
}

pub fn ddim_invert_with(
    z0: &LatentGrid,
    backend: &dyn Denoiser,
    cond: &ConditioningSet,
    schedule: &NoiseSchedule,
    opts: InversionOptions,
) -> Result<Trajectory> {
    let cond = cond.clone().with_guidance(INVERSION_GUIDANCE);
    let predict = |z: &LatentGrid, t: usize| {
        backend
            .predict(z, t, &cond, None)
            .map(|p| p.eps)
            .map_err(|source| Error::Step {
                t,
                branch: Branch::Inversion,
                source,
            })
    };
    let steps = schedule.num_steps();
    let mut latents = Vec::with_capacity(steps + 1);
    let mut eps_trace = Vec::with_capacity(steps);
    latents.push(z0.clone());
    for t in 0..steps {
        let z_t = &latents[t];
        let mut eps = predict(z_t, t)?;
        z_t.ensure_compatible(&eps)?;
        let mut next = ddim_invert_step(z_t, &eps, t, t + 1, schedule)?;
        for _ in 0..opts.fixed_point_iters {
            eps = predict(&next, t + 1)?;
            next = ddim_invert_step(z_t, &eps, t, t + 1, schedule)?;
        }
        eps_trace.push(eps);
        latents.push(next);
    }
    Ok(Trajectory {
        latents,
        eps: eps_trace,
        fingerprint: Fingerprint::of(&cond),
    })
}

/// Plain DDIM sampling `z_T → z_0` with fresh backend predictions.
pub fn ddim_sample(
    z_t: &LatentGrid,
    backend: &dyn Denoiser,
    cond: &ConditioningSet,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    let mut z = z_t.clone();
    for t in (1..=schedule.num_steps()).rev() {
        let eps = backend
            .predict(&z, t, cond, None)
            .map_err(|source| Error::Step {
                t,
                branch: Branch::Generation,
                source,
            })?
            .eps;
        z = ddim_step(&z, &eps, t, t - 1, schedule)?;
    }
    Ok(z)
}
