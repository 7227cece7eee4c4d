//! Contracts for every learned component (denoiser with feature taps, VAE,
//! depth estimator, image embedders, perceptual backbone), the deterministic
//! toy implementations, and the out-of-process adapter for real models.

mod config;
mod profile;
pub mod toy;
pub mod worker;

pub use config::{
    real_backend_from_config, BackendConfig, InjectionLayers, RefinerConfig, WorkerCommand,
};
pub use profile::{BackendProfile, BackendSet, ToyProfile, PROFILE_ENV};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::compositing::DepthMap;
use crate::conditioning::{EmbeddingRole, ImageEmbedding};
use crate::diffusion::{LatentGrid, PixelImage};
use crate::error::BackendError;

pub type LayerId = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Residual-block output feature map (`f`).
    Spatial,
    /// Self-attention layer exposing queries and keys (`q`, `k`).
    Attention,
}

/// One tap point. For attention layers `shape` describes each of q and k.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: LayerId,
    pub kind: LayerKind,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCatalog {
    pub layers: Vec<LayerSpec>,
}

impl LayerCatalog {
    pub fn get(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn ids(&self, kind: LayerKind) -> Vec<LayerId> {
        self.layers
            .iter()
            .filter(|l| l.kind == kind)
            .map(|l| l.id.clone())
            .collect()
    }

    /// Replaces entries with matching ids and appends new ones.
    pub fn apply_overrides(&mut self, overrides: &[LayerSpec]) {
        for o in overrides {
            match self.layers.iter_mut().find(|l| l.id == o.id) {
                Some(l) => *l = o.clone(),
                None => self.layers.push(o.clone()),
            }
        }
    }

    /// Checks that `id` exists with the expected kind.
    pub fn require(&self, id: &str, kind: LayerKind) -> Result<&LayerSpec, crate::Error> {
        match self.get(id) {
            Some(l) if l.kind == kind => Ok(l),
            Some(l) => Err(crate::Error::Config(format!(
                "layer `{id}` is a {:?} layer, expected {kind:?}",
                l.kind
            ))),
            None => Err(crate::Error::UnknownLayer(id.to_string())),
        }
    }
}

/// Dense real array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl FeatureArray {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, BackendError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(BackendError::Contract(format!(
                "feature shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }
}

/// Features captured at (or injected into) one denoiser call.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureBundle {
    pub timestep: usize,
    pub spatial: BTreeMap<LayerId, FeatureArray>,
    pub queries: BTreeMap<LayerId, FeatureArray>,
    pub keys: BTreeMap<LayerId, FeatureArray>,
}

impl FeatureBundle {
    pub fn new(timestep: usize) -> Self {
        Self {
            timestep,
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.spatial.is_empty() && self.queries.is_empty() && self.keys.is_empty()
    }

    /// Verifies every array against the catalog's declared layer and shape.
    pub fn check_against(&self, catalog: &LayerCatalog) -> Result<(), BackendError> {
        let groups = [
            (&self.spatial, LayerKind::Spatial, "spatial"),
            (&self.queries, LayerKind::Attention, "query"),
            (&self.keys, LayerKind::Attention, "key"),
        ];
        for (map, kind, what) in groups {
            for (id, arr) in map {
                let spec = catalog.get(id).filter(|l| l.kind == kind).ok_or_else(|| {
                    BackendError::Contract(format!("{what} layer `{id}` not in catalog"))
                })?;
                if spec.shape != arr.shape {
                    return Err(BackendError::Contract(format!(
                        "{what} layer `{id}` has shape {:?}, catalog says {:?}",
                        arr.shape, spec.shape
                    )));
                }
            }
        }
        Ok(())
    }

    /// True when, for every layer present in `overrides`, this bundle holds
    /// exactly the overriding array.
    pub fn echoes(&self, overrides: &FeatureBundle) -> Result<(), String> {
        let groups = [
            (&self.spatial, &overrides.spatial, "spatial"),
            (&self.queries, &overrides.queries, "query"),
            (&self.keys, &overrides.keys, "key"),
        ];
        for (captured, wanted, what) in groups {
            for (id, arr) in wanted {
                match captured.get(id) {
                    Some(c) if c == arr => {}
                    _ => return Err(format!("{what} override for `{id}` not echoed")),
                }
            }
        }
        Ok(())
    }
}

/// An image embedding routed through the image-prompt adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePrompt {
    pub embedding: ImageEmbedding,
    pub weight: f64,
}

/// Everything a denoiser call is conditioned on.
///
/// At most one image prompt is carried: the reconstruction branch gets the
/// content embedding, the generation branch the style embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningSet {
    pub prompt_text: String,
    pub image_prompt: Option<ImagePrompt>,
    /// Depth condition; `None` only when depth control is ablated.
    pub depth: Option<DepthMap>,
    pub guidance_weight: f64,
}

impl ConditioningSet {
    pub fn new(prompt_text: impl Into<String>, depth: Option<DepthMap>) -> Self {
        Self {
            prompt_text: prompt_text.into(),
            image_prompt: None,
            depth,
            guidance_weight: 1.0,
        }
    }

    pub fn with_guidance(mut self, weight: f64) -> Self {
        self.guidance_weight = weight;
        self
    }

    pub fn with_image_prompt(mut self, embedding: ImageEmbedding, weight: f64) -> Self {
        self.image_prompt = Some(ImagePrompt { embedding, weight });
        self
    }

    pub fn without_image_prompt(mut self) -> Self {
        self.image_prompt = None;
        self
    }

    pub fn content_embedding(&self) -> Option<&ImageEmbedding> {
        self.image_prompt
            .as_ref()
            .map(|p| &p.embedding)
            .filter(|e| e.role == EmbeddingRole::Content)
    }

    pub fn style_embedding(&self) -> Option<&ImageEmbedding> {
        self.image_prompt
            .as_ref()
            .map(|p| &p.embedding)
            .filter(|e| e.role == EmbeddingRole::Style)
    }
}

/// Output of one denoiser call.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub eps: LatentGrid,
    pub captured: FeatureBundle,
}

/// Noise predictor with depth conditioning and feature taps.
///
/// Implementations must be deterministic for fixed inputs, and when overrides
/// are supplied for a layer the captured bundle must contain exactly that
/// override for the layer.
pub trait Denoiser: Send + Sync {
    fn id(&self) -> String;

    fn catalog(&self) -> &LayerCatalog;

    /// Layers injected when the caller does not pick any.
    fn default_injection_layers(&self) -> InjectionLayers {
        InjectionLayers {
            spatial: self.catalog().ids(LayerKind::Spatial),
            attention: self.catalog().ids(LayerKind::Attention),
        }
    }

    fn predict(
        &self,
        z: &LatentGrid,
        t: usize,
        cond: &ConditioningSet,
        overrides: Option<&FeatureBundle>,
    ) -> Result<Prediction, BackendError>;

    /// Optional refiner pass over the final latent; `None` when the backend
    /// has no refiner.
    fn refine(
        &self,
        _z: &LatentGrid,
        _remaining_fraction: f64,
        _cond: &ConditioningSet,
    ) -> Option<Result<LatentGrid, BackendError>> {
        None
    }
}

pub trait Vae: Send + Sync {
    fn id(&self) -> String;
    fn encode(&self, image: &PixelImage) -> Result<LatentGrid, BackendError>;
    fn decode(&self, latent: &LatentGrid) -> Result<PixelImage, BackendError>;
    /// Pixel-to-latent downsampling factor.
    fn scale_factor(&self) -> usize;
    fn latent_channels(&self) -> usize;
    /// Upper bound on per-pixel mean-abs error of `decode(encode(I))`.
    fn round_trip_bound(&self) -> f64;
}

pub trait DepthEstimator: Send + Sync {
    fn id(&self) -> String;
    fn estimate(&self, image: &PixelImage) -> Result<DepthMap, BackendError>;
}

/// Global image embedding (CLIP-like or DINO-like).
pub trait ImageEmbedder: Send + Sync {
    fn id(&self) -> String;
    fn embed(&self, image: &PixelImage) -> Result<Vec<f32>, BackendError>;
}

/// Multi-layer feature extractor for the LPIPS distance. Each layer is a
/// `(channels, height, width)` array.
pub trait PerceptualBackbone: Send + Sync {
    fn id(&self) -> String;
    fn features(&self, image: &PixelImage) -> Result<Vec<FeatureArray>, BackendError>;
    /// Per-layer, per-channel linear weights; `None` means all ones.
    fn layer_weights(&self) -> Option<Vec<Vec<f32>>> {
        None
    }
}
