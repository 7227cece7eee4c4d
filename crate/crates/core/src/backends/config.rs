use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::worker::{
    WorkerClient, WorkerDenoiser, WorkerDepthEstimator, WorkerEmbedder, WorkerPerceptual, WorkerVae,
};
use super::{BackendSet, LayerCatalog, LayerId, LayerKind, LayerSpec};
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};

/// How to start the model worker process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerCommand {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub enabled: bool,
    #[serde(default = "default_refiner_fraction")]
    pub remaining_fraction: f64,
}

fn default_refiner_fraction() -> f64 {
    0.1
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            remaining_fraction: default_refiner_fraction(),
        }
    }
}

/// Layers the engine injects into.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionLayers {
    #[serde(default)]
    pub spatial: Vec<LayerId>,
    #[serde(default)]
    pub attention: Vec<LayerId>,
}

impl InjectionLayers {
    /// Every id must exist in `catalog` with the right kind.
    pub fn validate(&self, catalog: &LayerCatalog) -> Result<()> {
        for id in &self.spatial {
            catalog.require(id, LayerKind::Spatial)?;
        }
        for id in &self.attention {
            catalog.require(id, LayerKind::Attention)?;
        }
        Ok(())
    }
}

/// Backend configuration file.
///
/// ```json
/// {
///   "worker": {"program": "python3", "args": ["sdxl_worker.py"]},
///   "assets": {"unet": "/models/sdxl/unet", "controlnet": "/models/cn-depth"},
///   "device": "cuda:0",
///   "scale_factor": 8,
///   "latent_channels": 4,
///   "refiner": {"enabled": true},
///   "injection": {"spatial": ["up_blocks.0.resnets.0"], "attention": ["up_blocks.0.attentions.0.attn1"]}
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub worker: WorkerCommand,
    /// Named model asset paths; each must exist before the worker starts.
    #[serde(default)]
    pub assets: BTreeMap<String, PathBuf>,
    #[serde(default = "default_device")]
    pub device: String,
    #[serde(default = "default_scale_factor")]
    pub scale_factor: usize,
    #[serde(default = "default_latent_channels")]
    pub latent_channels: usize,
    #[serde(default)]
    pub refiner: RefinerConfig,
    /// Entries replacing or extending the worker-reported catalog.
    #[serde(default)]
    pub catalog_overrides: Vec<LayerSpec>,
    #[serde(default)]
    pub injection: Option<InjectionLayers>,
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
}

fn default_device() -> String {
    "cuda:0".into()
}

fn default_scale_factor() -> usize {
    8
}

fn default_latent_channels() -> usize {
    4
}

impl BackendConfig {
    /// Parses a config file; relative asset paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: BackendConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            for p in cfg.assets.values_mut() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Names and paths of assets that do not exist.
    pub fn unresolved_assets(&self) -> Vec<String> {
        self.assets
            .iter()
            .filter(|(_, p)| !p.exists())
            .map(|(name, p)| format!("{name}={}", p.display()))
            .collect()
    }
}

/// Starts the configured worker and wraps it behind the backend traits.
///
/// `latent_shape` is the `(channels, height, width)` the caller will denoise;
/// catalog shapes depend on it.
pub fn real_backend_from_config(
    cfg: &BackendConfig,
    latent_shape: (usize, usize, usize),
) -> Result<BackendSet> {
    let unresolved = cfg.unresolved_assets();
    if !unresolved.is_empty() {
        return Err(Error::MissingAssets { unresolved });
    }
    let schedule = match &cfg.schedule {
        Some(s) => NoiseSchedule::from_config(s.clone())?,
        None => NoiseSchedule::default(),
    };
    let client = Arc::new(WorkerClient::spawn(
        &cfg.worker.program,
        &cfg.worker.args,
        &cfg.worker.env,
    )?);
    let assets: BTreeMap<String, String> = cfg
        .assets
        .iter()
        .map(|(k, v)| (k.clone(), v.display().to_string()))
        .collect();
    let info = client.hello(&cfg.device, &assets, latent_shape)?;
    if info.scale_factor != cfg.scale_factor || info.latent_channels != cfg.latent_channels {
        return Err(Error::Config(format!(
            "worker reports scale_factor={} latent_channels={}, config says {} and {}",
            info.scale_factor, info.latent_channels, cfg.scale_factor, cfg.latent_channels
        )));
    }
    let mut catalog = client.catalog()?;
    catalog.apply_overrides(&cfg.catalog_overrides);
    if let Some(inj) = &cfg.injection {
        inj.validate(&catalog)?;
    }
    let refiner = cfg.refiner.enabled && info.has_refiner;
    let has = |name: &str| info.extractors.iter().any(|e| e == name);
    Ok(BackendSet {
        profile: format!("config:{}", info.id),
        denoiser: Arc::new(WorkerDenoiser::new(
            client.clone(),
            info.id.clone(),
            catalog,
            refiner,
        )),
        vae: Arc::new(WorkerVae::new(client.clone(), info.clone())),
        depth: info
            .has_depth
            .then(|| Arc::new(WorkerDepthEstimator::new(client.clone())) as _),
        adapter: has("adapter")
            .then(|| Arc::new(WorkerEmbedder::new(client.clone(), "adapter")) as _),
        clip: has("clip").then(|| Arc::new(WorkerEmbedder::new(client.clone(), "clip")) as _),
        dino: has("dino").then(|| Arc::new(WorkerEmbedder::new(client.clone(), "dino")) as _),
        perceptual: info
            .has_perceptual
            .then(|| Arc::new(WorkerPerceptual::new(client.clone())) as _),
        schedule,
        injection_layers: cfg.injection.clone(),
        refiner_fraction: refiner.then_some(cfg.refiner.remaining_fraction),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(json: &str) -> BackendConfig {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn missing_assets_listed_before_spawn() {
        let c = cfg(r#"{"worker": {"program": "/nonexistent/worker"},
                        "assets": {"unet": "/nope/unet", "vae": "/nope/vae"}}"#);
        match real_backend_from_config(&c, (4, 8, 8)) {
            Err(Error::MissingAssets { unresolved }) => {
                assert_eq!(unresolved, vec!["unet=/nope/unet", "vae=/nope/vae"]);
            }
            other => panic!("expected missing assets, got {:?}", other.err()),
        }
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<BackendConfig>(
            r#"{"worker": {"program": "x"}, "devcie": "cpu"}"#
        )
        .is_err());
    }

    #[test]
    fn refiner_defaults_on() {
        let c = cfg(r#"{"worker": {"program": "x"}}"#);
        assert!(c.refiner.enabled);
        assert_eq!(c.refiner.remaining_fraction, 0.1);
        let c = cfg(r#"{"worker": {"program": "x"}, "refiner": {"enabled": false}}"#);
        assert!(!c.refiner.enabled);
    }

    #[test]
    fn injection_validation_names_layer() {
        let catalog = LayerCatalog {
            layers: vec![LayerSpec {
                id: "a".into(),
                kind: LayerKind::Attention,
                shape: vec![4, 8],
            }],
        };
        let inj = InjectionLayers {
            spatial: vec![],
            attention: vec!["a".into(), "ghost".into()],
        };
        let err = inj.validate(&catalog).unwrap_err();
        assert!(err.to_string().contains("ghost"));
        let inj = InjectionLayers {
            spatial: vec!["a".into()],
            attention: vec![],
        };
        assert!(matches!(inj.validate(&catalog), Err(Error::Config(_))));
    }
}
