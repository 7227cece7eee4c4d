use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::manifest::auto_placement;
use super::registry::AssetRegistry;
use super::request::{AssetRef, CompositeRequest, RenderRef};
use crate::backends::{BackendProfile, BackendSet, InjectionLayers};
use crate::compositing::{
    compose_depth, padded_len, paste, BackgroundDepth, DepthMap, PasteResult, PixelMask,
    RenderedObject,
};
use crate::conditioning::{Captioner, PromptSpec};
use crate::diffusion::{LatentGrid, PixelImage, SpaceTag};
use crate::engine::{
    run_controllable_generation, BackgroundDepthMode, EngineBackends, EngineInput, GenerationResult,
};
use crate::error::{Error, Result};
use crate::imageio;
use crate::metrics::{evaluate, ImageMetrics, MetricSuite, RegionSpec};

/// Bumped whenever a change alters generated pixels for the same request.
pub const PIPELINE_VERSION: &str = "1";

const FALLBACK_TAG: &str = "object";

/// A request with every file loaded.
#[derive(Debug, Clone)]
pub struct ResolvedRequest {
    pub request: CompositeRequest,
    pub profile: BackendProfile,
    /// Image used for the content embedding, if one was given or registered.
    pub object_image: Option<PixelImage>,
    pub background: PixelImage,
    pub render: RenderedObject,
    pub object_tag: String,
}

impl ResolvedRequest {
    /// Object comparand for the metrics: the object image, else the render's RGB.
    pub fn object_reference(&self) -> PixelImage {
        self.object_image.clone().unwrap_or_else(|| {
            let v = self.render.rgba().values();
            let rgb = ndarray::Array3::from_shape_fn(
                (3, self.render.height(), self.render.width()),
                |(c, y, x)| v[[c, y, x]],
            );
            LatentGrid::from_finite(rgb, SpaceTag::Pixel)
        })
    }
}

pub struct Generation {
    pub resolved: ResolvedRequest,
    pub backends: BackendSet,
    pub result: GenerationResult,
}

/// Paths written by [`Generation::write_outputs`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFiles {
    pub image: PathBuf,
    pub coarse: PathBuf,
    pub mask: PathBuf,
    pub depth: Option<PathBuf>,
    pub metadata: PathBuf,
    pub injection_log: PathBuf,
    /// sha256 of the PNG bytes of `image`.
    pub output_hash: String,
}

/// Metadata stored next to each output image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputMetadata {
    pub request: CompositeRequest,
    pub backend_profile: String,
    pub pipeline_version: String,
    pub prompt: PromptSpec,
    pub summary: crate::engine::RunSummary,
    pub output_hash: String,
}

/// Request resolution, generation and scoring over a registry.
pub struct Pipeline {
    registry: Arc<AssetRegistry>,
    captioner: Arc<Captioner>,
    default_profile: BackendProfile,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn mask_image(mask: &PixelMask) -> PixelImage {
    let m = &mask.0;
    let v =
        ndarray::Array3::from_shape_fn((3, m.nrows(), m.ncols()), |(_, y, x)| f32::from(m[[y, x]]));
    LatentGrid::from_finite(v, SpaceTag::Pixel)
}

impl Pipeline {
    pub fn new(
        registry: Arc<AssetRegistry>,
        captioner: Arc<Captioner>,
        default_profile: BackendProfile,
    ) -> Self {
        Self {
            registry,
            captioner,
            default_profile,
        }
    }

    pub fn registry(&self) -> &AssetRegistry {
        &self.registry
    }

    pub fn default_profile(&self) -> &BackendProfile {
        &self.default_profile
    }

    pub fn profile_for(&self, req: &CompositeRequest) -> Result<BackendProfile> {
        match &req.backend_profile {
            Some(p) => p.parse(),
            None => Ok(self.default_profile.clone()),
        }
    }

    /// Key identifying the output of `req` under this pipeline.
    pub fn request_hash(&self, req: &CompositeRequest) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(req)?);
        h.update(self.profile_for(req)?.to_string().as_bytes());
        h.update(PIPELINE_VERSION.as_bytes());
        Ok(hex::encode(h.finalize()))
    }

    fn load_background(&self, r: &AssetRef) -> Result<PixelImage> {
        match r {
            AssetRef::Id { id } => {
                let b = self.registry.background(id).ok_or_else(|| {
                    Error::validation("background", format!("unknown background `{id}`"))
                })?;
                imageio::load_rgb(&b.path)
            }
            AssetRef::Path { path } => imageio::load_rgb(path),
        }
    }

    /// Loads every file the request names.
    pub fn resolve(&self, req: &CompositeRequest) -> Result<ResolvedRequest> {
        req.validate()?;
        let profile = self.profile_for(req)?;
        let registered =
            match &req.object {
                Some(AssetRef::Id { id }) => Some(self.registry.object(id).ok_or_else(|| {
                    Error::validation("object", format!("unknown object `{id}`"))
                })?),
                _ => None,
            };
        let object_image = match (&req.object, registered) {
            (_, Some(o)) => Some(imageio::load_rgb(&o.image)?),
            (Some(AssetRef::Path { path }), None) => Some(imageio::load_rgb(path)?),
            _ => None,
        };
        let render = match &req.render {
            RenderRef::Files {
                rgba,
                depth,
                view_tag,
            } => imageio::load_render(rgba, depth, view_tag)?,
            RenderRef::View { view_tag } => {
                let o = registered.ok_or_else(|| {
                    Error::validation("render", "a view tag needs a registered object in `object`")
                })?;
                let r = o.render(view_tag).ok_or_else(|| {
                    Error::validation(
                        "render.view_tag",
                        format!("object `{}` has no view `{view_tag}`", o.id),
                    )
                })?;
                imageio::load_render(&r.rgba, &r.depth, &r.view_tag)?
            }
        };
        let background = self.load_background(&req.background)?;
        let object_tag = req
            .object_tag
            .clone()
            .or_else(|| registered.map(|o| o.tag().to_string()))
            .unwrap_or_else(|| FALLBACK_TAG.to_string());
        Ok(ResolvedRequest {
            request: req.clone(),
            profile,
            object_image,
            background,
            render,
            object_tag,
        })
    }

    /// Replaces the placement with a centred one.
    pub fn auto_place(&self, req: &mut CompositeRequest) -> Result<()> {
        let resolved = self.resolve(req)?;
        req.placement = auto_placement(
            resolved.render.width(),
            resolved.render.height(),
            resolved.background.width(),
            resolved.background.height(),
        );
        Ok(())
    }

    /// Template when `simple_prompt` is set, else the user prompt, else a caption.
    pub fn prompt_for(&self, r: &ResolvedRequest) -> Result<PromptSpec> {
        if r.request.controls.simple_prompt {
            return Ok(PromptSpec::template(&r.object_tag));
        }
        if let Some(p) = &r.request.prompt {
            return PromptSpec::user(p.clone());
        }
        Ok(self
            .captioner
            .caption_object(&r.object_reference(), &r.object_tag))
    }

    /// Fresh backends sized for the background.
    pub fn backends_for(&self, r: &ResolvedRequest) -> Result<BackendSet> {
        let (s, c) = r.profile.geometry()?;
        let (h, w) = (r.background.height(), r.background.width());
        r.profile
            .instantiate((c, padded_len(h, s) / s, padded_len(w, s) / s))
    }

    /// Composite and mask without any diffusion; used for quick previews.
    pub fn preview(&self, req: &CompositeRequest) -> Result<PasteResult> {
        let r = self.resolve(req)?;
        paste(
            &r.render,
            &r.background,
            &req.placement,
            req.controls.dilation_radius,
        )
    }

    pub fn generate(&self, req: &CompositeRequest) -> Result<Generation> {
        let resolved = self.resolve(req)?;
        let backends = self.backends_for(&resolved)?;
        let prompt = self.prompt_for(&resolved)?;
        let mut inj = req.injection_config();
        let configured = backends
            .injection_layers
            .clone()
            .unwrap_or_else(|| backends.denoiser.default_injection_layers());
        let InjectionLayers { spatial, attention } = configured;
        if req.injection.spatial_layers.is_none() {
            inj.spatial_layers = spatial;
        }
        if req.injection.attention_layers.is_none() {
            inj.attention_layers = attention;
        }
        let input = EngineInput {
            object_image: resolved.object_image.clone(),
            background: resolved.background.clone(),
            render: resolved.render.clone(),
            placement: req.placement,
            prompt,
            seed: req.seed,
        };
        let result = run_controllable_generation(
            &input,
            EngineBackends::from(&backends),
            &backends.schedule,
            &inj,
            &req.engine_options(),
        )?;
        Ok(Generation {
            resolved,
            backends,
            result,
        })
    }
}

impl Generation {
    /// Depth the generated image is expected to follow: the composed
    /// condition, or a fresh composition when the run had none.
    pub fn reference_depth(&self) -> Result<DepthMap> {
        if let Some(d) = &self.result.depth {
            return Ok(d.clone());
        }
        let r = &self.resolved;
        let source = match (
            r.request.controls.background_depth,
            self.backends.depth.as_deref(),
        ) {
            (BackgroundDepthMode::Estimator, Some(est)) => BackgroundDepth::Estimator(Some(est)),
            _ => BackgroundDepth::ConstantFar,
        };
        compose_depth(&r.render, &r.background, &r.request.placement, source)
    }

    fn score(&self, image: &PixelImage) -> Result<ImageMetrics> {
        let region = RegionSpec::from_mask(&self.result.mask)?;
        let depth = self.reference_depth()?;
        evaluate(
            image,
            &self.resolved.object_reference(),
            &self.resolved.background,
            Some(&depth),
            &region,
            &MetricSuite::from(&self.backends),
        )
    }

    pub fn metrics(&self) -> Result<ImageMetrics> {
        self.score(&self.result.image)
    }

    /// Scores of the pasted composite over the same region.
    pub fn paste_metrics(&self) -> Result<ImageMetrics> {
        self.score(&self.result.coarse)
    }

    pub fn image_png(&self) -> Result<Vec<u8>> {
        imageio::encode_png(&self.result.image)
    }

    pub fn write_outputs(&self, dir: &Path) -> Result<OutputFiles> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, bytes: &[u8]| -> Result<PathBuf> {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
            Ok(p)
        };
        let png = self.image_png()?;
        let output_hash = sha256_hex(&png);
        let image = write("image.png", &png)?;
        let coarse = write("coarse.png", &imageio::encode_png(&self.result.coarse)?)?;
        let mask = write(
            "mask.png",
            &imageio::encode_png(&mask_image(&self.result.mask))?,
        )?;
        let depth = match &self.result.depth {
            Some(d) => {
                let p = dir.join("depth.png");
                imageio::save_depth_png(&p, d)?;
                Some(p)
            }
            None => None,
        };
        let meta = OutputMetadata {
            request: self.resolved.request.clone(),
            backend_profile: self.backends.profile.clone(),
            pipeline_version: PIPELINE_VERSION.into(),
            prompt: self.result.prompt.clone(),
            summary: self.result.summary.clone(),
            output_hash: output_hash.clone(),
        };
        let metadata = write("metadata.json", &serde_json::to_vec_pretty(&meta)?)?;
        let injection_log = write(
            "injection_log.json",
            &serde_json::to_vec_pretty(&self.result.injection_log)?,
        )?;
        Ok(OutputFiles {
            image,
            coarse,
            mask,
            depth,
            metadata,
            injection_log,
            output_hash,
        })
    }
}
