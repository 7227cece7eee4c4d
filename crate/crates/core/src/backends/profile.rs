use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use super::config::{real_backend_from_config, BackendConfig, InjectionLayers};
use super::toy::{
    ToyClipEmbedder, ToyDenoiser, ToyDepthEstimator, ToyDinoEmbedder, ToyPerceptualBackbone, ToyVae,
};
use super::{Denoiser, DepthEstimator, ImageEmbedder, PerceptualBackbone, Vae};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};

/// Environment variable naming the default backend profile.
pub const PROFILE_ENV: &str = "FREEINSERT_BACKEND_PROFILE";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyProfile {
    pub seed: u64,
    pub scale: usize,
    pub refiner: bool,
}

impl Default for ToyProfile {
    fn default() -> Self {
        Self {
            seed: 0,
            scale: 8,
            refiner: false,
        }
    }
}

/// `toy`, `toy:seed=3,scale=4,refiner=true`, or a path to a backend config.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendProfile {
    Toy(ToyProfile),
    Config(PathBuf),
}

impl Default for BackendProfile {
    fn default() -> Self {
        BackendProfile::Toy(ToyProfile::default())
    }
}

impl FromStr for BackendProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = |msg: String| Error::validation("backend_profile", msg);
        if s.is_empty() {
            return Err(bad("empty profile name".into()));
        }
        let Some(rest) = s.strip_prefix("toy") else {
            return Ok(BackendProfile::Config(PathBuf::from(
                s.strip_prefix("config:").unwrap_or(s),
            )));
        };
        let mut toy = ToyProfile::default();
        let opts = match rest {
            "" => "",
            r if r.starts_with(':') => &r[1..],
            _ => return Ok(BackendProfile::Config(PathBuf::from(s))),
        };
        for kv in opts.split(',').filter(|kv| !kv.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got `{kv}`")))?;
            let num = || {
                v.parse::<u64>()
                    .map_err(|_| bad(format!("`{k}` needs an integer, got `{v}`")))
            };
            match k {
                "seed" => toy.seed = num()?,
                "scale" => {
                    toy.scale = num()? as usize;
                    if toy.scale == 0 {
                        return Err(bad("scale must be at least 1".into()));
                    }
                }
                "refiner" => {
                    toy.refiner = v
                        .parse()
                        .map_err(|_| bad(format!("`refiner` needs true/false, got `{v}`")))?
                }
                _ => return Err(bad(format!("unknown toy option `{k}`"))),
            }
        }
        Ok(BackendProfile::Toy(toy))
    }
}

impl fmt::Display for BackendProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendProfile::Toy(t) => write!(
                f,
                "toy:seed={},scale={},refiner={}",
                t.seed, t.scale, t.refiner
            ),
            BackendProfile::Config(p) => write!(f, "{}", p.display()),
        }
    }
}

/// Every learned component needed by one pipeline run.
#[derive(Clone)]
pub struct BackendSet {
    pub profile: String,
    pub denoiser: Arc<dyn Denoiser>,
    pub vae: Arc<dyn Vae>,
    pub depth: Option<Arc<dyn DepthEstimator>>,
    /// Image encoder feeding the image-prompt adapter.
    pub adapter: Option<Arc<dyn ImageEmbedder>>,
    pub clip: Option<Arc<dyn ImageEmbedder>>,
    pub dino: Option<Arc<dyn ImageEmbedder>>,
    pub perceptual: Option<Arc<dyn PerceptualBackbone>>,
    pub schedule: NoiseSchedule,
    pub injection_layers: Option<InjectionLayers>,
    /// `Some(fraction)` when the refiner hook should run.
    pub refiner_fraction: Option<f64>,
}

impl fmt::Debug for BackendSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendSet")
            .field("profile", &self.profile)
            .field("denoiser", &self.denoiser.id())
            .field("vae", &self.vae.id())
            .finish_non_exhaustive()
    }
}

impl BackendProfile {
    /// Profile from [`PROFILE_ENV`], or the default toy profile.
    pub fn from_env() -> Result<Self> {
        match std::env::var(PROFILE_ENV) {
            Ok(v) if !v.trim().is_empty() => v.parse(),
            _ => Ok(Self::default()),
        }
    }

    /// `(scale_factor, latent_channels)` without starting any model.
    pub fn geometry(&self) -> Result<(usize, usize)> {
        match self {
            BackendProfile::Toy(t) => Ok((t.scale, 3 * t.scale * t.scale)),
            BackendProfile::Config(p) => {
                let cfg = BackendConfig::load(p)?;
                Ok((cfg.scale_factor, cfg.latent_channels))
            }
        }
    }

    /// Fresh backend instances for one run.
    pub fn instantiate(&self, latent_shape: (usize, usize, usize)) -> Result<BackendSet> {
        match self {
            BackendProfile::Toy(t) => Ok(toy_set(*t, latent_shape)),
            BackendProfile::Config(p) => {
                real_backend_from_config(&BackendConfig::load(p)?, latent_shape)
            }
        }
    }
}

fn toy_set(t: ToyProfile, latent_shape: (usize, usize, usize)) -> BackendSet {
    BackendSet {
        profile: BackendProfile::Toy(t).to_string(),
        denoiser: Arc::new(ToyDenoiser::new(t.seed, latent_shape).with_refiner(t.refiner)),
        vae: Arc::new(ToyVae::new(t.scale)),
        depth: Some(Arc::new(ToyDepthEstimator)),
        adapter: Some(Arc::new(ToyClipEmbedder)),
        clip: Some(Arc::new(ToyClipEmbedder)),
        dino: Some(Arc::new(ToyDinoEmbedder)),
        perceptual: Some(Arc::new(ToyPerceptualBackbone)),
        schedule: NoiseSchedule::default(),
        injection_layers: None,
        refiner_fraction: t.refiner.then_some(0.1),
    }
}
