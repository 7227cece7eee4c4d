//! The controllable generation loop: DDIM-invert the coarse composite, then
//! denoise a reconstruction branch and a generation branch in lock-step,
//! overriding the generation branch's early features with the
//! reconstruction branch's and pinning the background by noise blending.

mod run;

pub use run::{
    run_controllable_generation, run_with_observer, EngineBackends, EngineInput, GenerationResult,
    RunSummary, StepTrace,
};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backends::{FeatureBundle, InjectionLayers, LayerCatalog, LayerId, LayerKind};
use crate::compositing::{MaskGrid, DEFAULT_DILATION_RADIUS};
use crate::conditioning::EmbeddingWeights;
use crate::diffusion::{add_noise, InversionOptions, LatentGrid, NoiseSchedule, SpaceTag};
use crate::error::{Error, Result};
use crate::par::Exec;

pub const DEFAULT_TAU_F: f64 = 0.2;
pub const DEFAULT_TAU_Q: f64 = 0.5;
pub const DEFAULT_TAU_K: f64 = 0.5;
pub const DEFAULT_GUIDANCE: f64 = 5.0;
pub const REFINER_FRACTION: f64 = 0.1;

/// Thresholds are fractions of `T`; a feature kind is injected while
/// `t > round(tau·T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionConfig {
    pub tau_f: f64,
    pub tau_q: f64,
    pub tau_k: f64,
    pub spatial_layers: Vec<LayerId>,
    pub attention_layers: Vec<LayerId>,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            tau_f: DEFAULT_TAU_F,
            tau_q: DEFAULT_TAU_Q,
            tau_k: DEFAULT_TAU_K,
            spatial_layers: Vec::new(),
            attention_layers: Vec::new(),
        }
    }
}

/// Timestep threshold `round(tau·T)`.
pub fn threshold(tau: f64, num_steps: usize) -> usize {
    (tau * num_steps as f64).round() as usize
}

impl InjectionConfig {
    pub fn with_taus(tau_f: f64, tau_q: f64, tau_k: f64) -> Self {
        Self {
            tau_f,
            tau_q,
            tau_k,
            ..Self::default()
        }
    }

    /// Disables all injection.
    pub fn never() -> Self {
        Self::with_taus(1.0, 1.0, 1.0)
    }

    pub fn with_layers(mut self, layers: InjectionLayers) -> Self {
        self.spatial_layers = layers.spatial;
        self.attention_layers = layers.attention;
        self
    }

    pub fn layers(&self) -> InjectionLayers {
        InjectionLayers {
            spatial: self.spatial_layers.clone(),
            attention: self.attention_layers.clone(),
        }
    }

    pub fn validate(&self, catalog: &LayerCatalog) -> Result<()> {
        for (name, tau) in [
            ("tau_f", self.tau_f),
            ("tau_q", self.tau_q),
            ("tau_k", self.tau_k),
        ] {
            if !(0.0..=1.0).contains(&tau) {
                return Err(Error::validation(name, format!("{tau} is outside [0, 1]")));
            }
        }
        self.layers().validate(catalog)
    }

    pub fn inject_spatial(&self, t: usize, num_steps: usize) -> bool {
        t > threshold(self.tau_f, num_steps)
    }

    pub fn inject_queries(&self, t: usize, num_steps: usize) -> bool {
        t > threshold(self.tau_q, num_steps)
    }

    pub fn inject_keys(&self, t: usize, num_steps: usize) -> bool {
        t > threshold(self.tau_k, num_steps)
    }
}

/// Override set for the generation branch at step `t`.
pub fn apply_injection(
    captured: &FeatureBundle,
    t: usize,
    inj: &InjectionConfig,
    num_steps: usize,
) -> Result<FeatureBundle> {
    let mut out = FeatureBundle::new(t);
    let take = |map: &std::collections::BTreeMap<LayerId, _>, id: &LayerId, what: &str| {
        map.get(id).cloned().ok_or_else(|| {
            Error::contract(format!("captured bundle lacks {what} for layer `{id}`"))
        })
    };
    if inj.inject_spatial(t, num_steps) {
        for id in &inj.spatial_layers {
            out.spatial
                .insert(id.clone(), take(&captured.spatial, id, "spatial features")?);
        }
    }
    if inj.inject_queries(t, num_steps) {
        for id in &inj.attention_layers {
            out.queries
                .insert(id.clone(), take(&captured.queries, id, "queries")?);
        }
    }
    if inj.inject_keys(t, num_steps) {
        for id in &inj.attention_layers {
            out.keys
                .insert(id.clone(), take(&captured.keys, id, "keys")?);
        }
    }
    Ok(out)
}

/// Which layers were overridden at one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionStep {
    pub t: usize,
    pub spatial: Vec<LayerId>,
    pub queries: Vec<LayerId>,
    pub keys: Vec<LayerId>,
    pub style_embedding: bool,
}

impl InjectionStep {
    pub fn from_overrides(overrides: &FeatureBundle, style_embedding: bool) -> Self {
        Self {
            t: overrides.timestep,
            spatial: overrides.spatial.keys().cloned().collect(),
            queries: overrides.queries.keys().cloned().collect(),
            keys: overrides.keys.keys().cloned().collect(),
            style_embedding,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.spatial.is_empty() && self.queries.is_empty() && self.keys.is_empty()
    }
}

/// One entry per loop step, ordered `t = T..1`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionLog {
    pub num_steps: usize,
    pub steps: Vec<InjectionStep>,
}

impl InjectionLog {
    pub fn step(&self, t: usize) -> Option<&InjectionStep> {
        self.steps.iter().find(|s| s.t == t)
    }

    /// Timesteps at which any layer of `kind` was overridden.
    pub fn timesteps_with(&self, kind: LayerKind, keys: bool) -> Vec<usize> {
        self.steps
            .iter()
            .filter(|s| match (kind, keys) {
                (LayerKind::Spatial, _) => !s.spatial.is_empty(),
                (LayerKind::Attention, false) => !s.queries.is_empty(),
                (LayerKind::Attention, true) => !s.keys.is_empty(),
            })
            .map(|s| s.t)
            .collect()
    }

    /// Checks the log against the closed-form schedule of `inj`.
    pub fn matches_schedule(&self, inj: &InjectionConfig) -> std::result::Result<(), String> {
        let t_max = self.num_steps;
        let expected: Vec<usize> = (1..=t_max).rev().collect();
        let got: Vec<usize> = self.steps.iter().map(|s| s.t).collect();
        if got != expected {
            return Err(format!("log covers {got:?}, expected each of T..1 once"));
        }
        for s in &self.steps {
            let want = |on: bool, ids: &[LayerId]| if on { ids.to_vec() } else { Vec::new() };
            let sorted = |v: Vec<LayerId>| {
                let mut v = v;
                v.sort();
                v
            };
            let ws = sorted(want(inj.inject_spatial(s.t, t_max), &inj.spatial_layers));
            let wq = sorted(want(inj.inject_queries(s.t, t_max), &inj.attention_layers));
            let wk = sorted(want(inj.inject_keys(s.t, t_max), &inj.attention_layers));
            if s.spatial != ws || s.queries != wq || s.keys != wk {
                return Err(format!("step t={} deviates from the schedule", s.t));
            }
        }
        Ok(())
    }
}

/// Standard-normal noise for blending, drawn in row-major order.
pub fn draw_noise(rng: &mut impl Rng, shape: (usize, usize, usize)) -> LatentGrid {
    let n = shape.0 * shape.1 * shape.2;
    let data: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    LatentGrid::from_vec(shape, data, SpaceTag::Latent).expect("finite normals")
}

/// `M ⊙ z_g + (1 − M) ⊙ add_noise(z0_bg, t_prev, ε)` with `ε` from `rng`.
/// Also returns the noised background.
pub fn noise_blend_parts(
    z_g: &LatentGrid,
    z0_bg: &LatentGrid,
    t_prev: usize,
    mask: &MaskGrid,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<(LatentGrid, LatentGrid)> {
    z_g.ensure_compatible(z0_bg)?;
    if mask.latent().dim() != z_g.shape() {
        return Err(Error::contract(format!(
            "latent mask {:?} does not match latent {:?}",
            mask.latent().dim(),
            z_g.shape()
        )));
    }
    let eps = draw_noise(rng, z_g.shape());
    let bg_t = add_noise(z0_bg, t_prev, &eps, schedule)?;
    Ok((z_g.select(mask.latent_slice(), &bg_t)?, bg_t))
}

pub fn noise_blend(
    z_g: &LatentGrid,
    z0_bg: &LatentGrid,
    t_prev: usize,
    mask: &MaskGrid,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<LatentGrid> {
    noise_blend_parts(z_g, z0_bg, t_prev, mask, schedule, rng).map(|(z, _)| z)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch1Mode {
    /// Reuse the stored inversion latents; predictions only feed the taps.
    #[default]
    Replay,
    /// Advance the reconstruction branch with its own DDIM steps.
    Free,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundDepthMode {
    #[default]
    Estimator,
    ConstantFar,
}

/// Knobs of one generation run besides the injection thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineOptions {
    pub guidance: f64,
    pub branch1_mode: Branch1Mode,
    pub weights: EmbeddingWeights,
    /// Style embedding is used only for `t <= round(f·T)`; `None` means all steps.
    pub style_start_fraction: Option<f64>,
    pub use_depth: bool,
    pub use_content: bool,
    pub use_style: bool,
    /// Pin unmasked latents to the noised background after every step.
    pub noise_blending: bool,
    pub background_depth: BackgroundDepthMode,
    pub dilation_radius: usize,
    pub inversion_fixed_point_iters: usize,
    /// Run the refiner hook when the backend has one.
    pub refiner: bool,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            guidance: DEFAULT_GUIDANCE,
            branch1_mode: Branch1Mode::Replay,
            weights: EmbeddingWeights::default(),
            style_start_fraction: None,
            use_depth: true,
            use_content: true,
            use_style: true,
            noise_blending: true,
            background_depth: BackgroundDepthMode::Estimator,
            dilation_radius: DEFAULT_DILATION_RADIUS,
            inversion_fixed_point_iters: 0,
            refiner: true,
            exec: Exec::default(),
        }
    }
}

impl EngineOptions {
    pub fn validate(&self) -> Result<()> {
        if !self.guidance.is_finite() || self.guidance < 0.0 {
            return Err(Error::validation("guidance", "must be a finite value >= 0"));
        }
        for (name, w) in [
            ("content_weight", self.weights.content),
            ("style_weight", self.weights.style),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::validation(name, "must be a finite value >= 0"));
            }
        }
        if let Some(f) = self.style_start_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::validation(
                    "style_start_fraction",
                    format!("{f} is outside [0, 1]"),
                ));
            }
        }
        Ok(())
    }

    pub fn inversion(&self) -> InversionOptions {
        InversionOptions {
            fixed_point_iters: self.inversion_fixed_point_iters,
        }
    }

    pub fn style_active(&self, t: usize, num_steps: usize) -> bool {
        self.use_style
            && self
                .style_start_fraction
                .is_none_or(|f| t <= threshold(f, num_steps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::FeatureArray;
    use crate::compositing::PixelMask;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bundle(t: usize) -> FeatureBundle {
        let mut b = FeatureBundle::new(t);
        let a = FeatureArray::new(vec![1], vec![1.0]).unwrap();
        for id in ["s0", "s1"] {
            b.spatial.insert(id.into(), a.clone());
        }
        for id in ["a0", "a1"] {
            b.queries.insert(id.into(), a.clone());
            b.keys.insert(id.into(), a.clone());
        }
        b
    }

    fn inj() -> InjectionConfig {
        InjectionConfig {
            spatial_layers: vec!["s0".into(), "s1".into()],
            attention_layers: vec!["a0".into(), "a1".into()],
            ..InjectionConfig::default()
        }
    }

    #[test]
    fn first_step_injects_everything_last_step_nothing() {
        let all = apply_injection(&bundle(50), 50, &inj(), 50).unwrap();
        assert_eq!(all.spatial.len() + all.queries.len() + all.keys.len(), 6);
        assert!(apply_injection(&bundle(1), 1, &inj(), 50)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn strict_threshold_boundaries() {
        let i = inj();
        assert!(i.inject_queries(26, 50));
        assert!(!i.inject_queries(25, 50));
        assert!(i.inject_spatial(11, 50));
        assert!(!i.inject_spatial(10, 50));
        // round(0.5 * 7) = 4
        assert!(i.inject_keys(5, 7) && !i.inject_keys(4, 7));
    }

    #[test]
    fn missing_captured_layer_named() {
        let mut b = bundle(40);
        b.keys.remove("a1");
        let err = apply_injection(&b, 40, &inj(), 50).unwrap_err();
        assert!(err.to_string().contains("`a1`"), "{err}");
    }

    #[test]
    fn tau_out_of_range_names_field() {
        let err = InjectionConfig::with_taus(0.2, 1.5, 0.5)
            .validate(&LayerCatalog::default())
            .unwrap_err();
        assert_eq!(err.field(), Some("tau_q"));
    }

    fn grid(v: f32) -> LatentGrid {
        LatentGrid::filled((2, 2, 2), v, SpaceTag::Latent)
    }

    fn mask(cells: &[(usize, usize)]) -> MaskGrid {
        let mut m = Array2::zeros((2, 2));
        for &c in cells {
            m[c] = 1;
        }
        MaskGrid::new(PixelMask(m), 1, 2).unwrap()
    }

    #[test]
    fn blend_full_mask_is_identity() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = mask(&[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(
            noise_blend(&grid(0.3), &grid(0.9), 20, &m, &s, &mut rng).unwrap(),
            grid(0.3)
        );
    }

    #[test]
    fn blend_at_zero_recovers_background() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = noise_blend(&grid(0.3), &grid(0.9), 0, &mask(&[]), &s, &mut rng).unwrap();
        assert_eq!(out, grid(0.9));
        let out = noise_blend(&grid(0.3), &grid(0.9), 0, &mask(&[(1, 0)]), &s, &mut rng).unwrap();
        let differing: Vec<_> = out
            .as_slice()
            .iter()
            .enumerate()
            .filter(|(_, v)| v.to_bits() != 0.9f32.to_bits())
            .map(|(i, _)| i)
            .collect();
        // cell (1, 0) in both channels
        assert_eq!(differing, vec![2, 6]);
    }
}
