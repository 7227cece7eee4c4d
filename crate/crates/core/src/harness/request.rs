use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backends::LayerId;
use crate::compositing::{Placement, DEFAULT_DILATION_RADIUS};
use crate::conditioning::{EmbeddingWeights, DEFAULT_CONTENT_WEIGHT, DEFAULT_STYLE_WEIGHT};
use crate::engine::{
    BackgroundDepthMode, Branch1Mode, EngineOptions, InjectionConfig, DEFAULT_GUIDANCE,
    DEFAULT_TAU_F, DEFAULT_TAU_K, DEFAULT_TAU_Q,
};
use crate::error::{Error, Result};

/// A registered asset id or a file path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AssetRef {
    Id { id: String },
    Path { path: PathBuf },
}

/// Explicit render files, or a view of the registered object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RenderRef {
    Files {
        rgba: PathBuf,
        depth: PathBuf,
        #[serde(default = "default_view_tag")]
        view_tag: String,
    },
    View {
        view_tag: String,
    },
}

fn default_view_tag() -> String {
    "custom".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionSpec {
    pub tau_f: f64,
    pub tau_q: f64,
    pub tau_k: f64,
    /// `None` uses the backend's configured or default layers.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spatial_layers: Option<Vec<LayerId>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention_layers: Option<Vec<LayerId>>,
}

impl Default for InjectionSpec {
    fn default() -> Self {
        Self {
            tau_f: DEFAULT_TAU_F,
            tau_q: DEFAULT_TAU_Q,
            tau_k: DEFAULT_TAU_K,
            spatial_layers: None,
            attention_layers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Controls {
    pub guidance: f64,
    pub content_weight: f64,
    pub style_weight: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub style_start_fraction: Option<f64>,
    pub use_depth: bool,
    pub use_content: bool,
    pub use_style: bool,
    pub noise_blending: bool,
    /// Use the template prompt even when a caption or user prompt exists.
    pub simple_prompt: bool,
    pub background_depth: BackgroundDepthMode,
    pub dilation_radius: usize,
    pub branch1_mode: Branch1Mode,
    pub refiner: bool,
    pub inversion_fixed_point_iters: usize,
}

impl Default for Controls {
    fn default() -> Self {
        Self {
            guidance: DEFAULT_GUIDANCE,
            content_weight: DEFAULT_CONTENT_WEIGHT,
            style_weight: DEFAULT_STYLE_WEIGHT,
            style_start_fraction: None,
            use_depth: true,
            use_content: true,
            use_style: true,
            noise_blending: true,
            simple_prompt: false,
            background_depth: BackgroundDepthMode::Estimator,
            dilation_radius: DEFAULT_DILATION_RADIUS,
            branch1_mode: Branch1Mode::Replay,
            refiner: true,
            inversion_fixed_point_iters: 0,
        }
    }
}

/// One insertion job as submitted by the CLI, the service or the runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeRequest {
    /// Object image for the content embedding; defaults to the registered
    /// object's image, then to the render itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<AssetRef>,
    pub background: AssetRef,
    pub render: RenderRef,
    pub placement: Placement,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    /// Noun for the template prompt, e.g. `mug`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_tag: Option<String>,
    #[serde(default)]
    pub injection: InjectionSpec,
    #[serde(default)]
    pub controls: Controls,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_profile: Option<String>,
}

/// Advertised range of one numeric knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnobRange {
    pub name: &'static str,
    pub min: f64,
    pub max: f64,
    pub default: f64,
    pub step: f64,
}

pub const MAX_GUIDANCE: f64 = 30.0;
pub const MAX_EMBEDDING_WEIGHT: f64 = 2.0;
pub const MAX_SCALE: f64 = 8.0;
pub const MAX_DILATION: usize = 64;

/// Ranges every request is validated against.
pub fn knob_ranges() -> Vec<KnobRange> {
    let k = |name, min, max, default, step| KnobRange {
        name,
        min,
        max,
        default,
        step,
    };
    vec![
        k("injection.tau_f", 0.0, 1.0, DEFAULT_TAU_F, 0.02),
        k("injection.tau_q", 0.0, 1.0, DEFAULT_TAU_Q, 0.02),
        k("injection.tau_k", 0.0, 1.0, DEFAULT_TAU_K, 0.02),
        k(
            "controls.guidance",
            0.0,
            MAX_GUIDANCE,
            DEFAULT_GUIDANCE,
            0.5,
        ),
        k(
            "controls.content_weight",
            0.0,
            MAX_EMBEDDING_WEIGHT,
            DEFAULT_CONTENT_WEIGHT,
            0.05,
        ),
        k(
            "controls.style_weight",
            0.0,
            MAX_EMBEDDING_WEIGHT,
            DEFAULT_STYLE_WEIGHT,
            0.05,
        ),
        k("controls.style_start_fraction", 0.0, 1.0, 1.0, 0.02),
        k(
            "controls.dilation_radius",
            0.0,
            MAX_DILATION as f64,
            DEFAULT_DILATION_RADIUS as f64,
            1.0,
        ),
        k("placement.scale", 0.01, MAX_SCALE, 1.0, 0.01),
        k("placement.rotation_deg", -180.0, 180.0, 0.0, 1.0),
        k("seed", 0.0, u32::MAX as f64, 0.0, 1.0),
    ]
}

fn check_range(field: &str, v: f64) -> Result<()> {
    let r = knob_ranges()
        .into_iter()
        .find(|r| r.name == field)
        .expect("known knob");
    if !v.is_finite() || v < r.min || v > r.max {
        return Err(Error::validation(
            field,
            format!("{v} is outside [{}, {}]", r.min, r.max),
        ));
    }
    Ok(())
}

impl CompositeRequest {
    /// Range checks that need no files or backends.
    pub fn validate(&self) -> Result<()> {
        check_range("injection.tau_f", self.injection.tau_f)?;
        check_range("injection.tau_q", self.injection.tau_q)?;
        check_range("injection.tau_k", self.injection.tau_k)?;
        let c = &self.controls;
        check_range("controls.guidance", c.guidance)?;
        check_range("controls.content_weight", c.content_weight)?;
        check_range("controls.style_weight", c.style_weight)?;
        if let Some(f) = c.style_start_fraction {
            check_range("controls.style_start_fraction", f)?;
        }
        check_range("controls.dilation_radius", c.dilation_radius as f64)?;
        if self.placement.scale <= 0.0 {
            return Err(Error::validation("placement.scale", "must be positive"));
        }
        check_range("placement.scale", self.placement.scale)?;
        check_range("placement.rotation_deg", self.placement.rotation_deg)?;
        if let Some(p) = &self.prompt {
            if p.trim().is_empty() {
                return Err(Error::validation("prompt", "prompt is empty"));
            }
        }
        if let Some(p) = &self.backend_profile {
            p.parse::<crate::backends::BackendProfile>()?;
        }
        Ok(())
    }

    pub fn injection_config(&self) -> InjectionConfig {
        InjectionConfig {
            tau_f: self.injection.tau_f,
            tau_q: self.injection.tau_q,
            tau_k: self.injection.tau_k,
            spatial_layers: self.injection.spatial_layers.clone().unwrap_or_default(),
            attention_layers: self.injection.attention_layers.clone().unwrap_or_default(),
        }
    }

    pub fn engine_options(&self) -> EngineOptions {
        let c = &self.controls;
        EngineOptions {
            guidance: c.guidance,
            branch1_mode: c.branch1_mode,
            weights: EmbeddingWeights {
                content: c.content_weight,
                style: c.style_weight,
            },
            style_start_fraction: c.style_start_fraction,
            use_depth: c.use_depth,
            use_content: c.use_content,
            use_style: c.use_style,
            noise_blending: c.noise_blending,
            background_depth: c.background_depth,
            dilation_radius: c.dilation_radius,
            inversion_fixed_point_iters: c.inversion_fixed_point_iters,
            refiner: c.refiner,
            ..EngineOptions::default()
        }
    }

    /// Parses request JSON; errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let req: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." {
                "request".to_string()
            } else {
                path
            };
            Error::validation(field, e.into_inner().to_string())
        })?;
        req.validate()?;
        Ok(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"{"background": {"id": "desk"}, "render": {"view_tag": "front"},
                          "placement": {"x": 10, "y": 20, "scale": 1.0}}"#;

    #[test]
    fn minimal_request_gets_defaults() {
        let r = CompositeRequest::from_json(MIN).unwrap();
        assert_eq!(r.injection, InjectionSpec::default());
        assert_eq!(r.controls.guidance, 5.0);
        assert_eq!(r.background, AssetRef::Id { id: "desk".into() });
        assert_eq!(
            r.render,
            RenderRef::View {
                view_tag: "front".into()
            }
        );
        let round = CompositeRequest::from_json(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(round, r);
    }

    #[test]
    fn file_render_ref() {
        let r = CompositeRequest::from_json(
            r#"{"background": {"path": "bg.png"}, "render": {"rgba": "r.png", "depth": "d.png"},
                "placement": {"x": 0, "y": 0, "scale": 2.0, "rotation_deg": 15}}"#,
        )
        .unwrap();
        assert!(matches!(r.render, RenderRef::Files { ref view_tag, .. } if view_tag == "custom"));
        assert_eq!(r.placement.rotation_deg, 15.0);
    }

    #[test]
    fn errors_name_the_field() {
        let cases = [
            (
                r#"{"render": {"view_tag": "f"}, "placement": {"x": 0, "y": 0, "scale": 1}}"#,
                "request",
            ),
            (
                r#"{"background": {"id": "d"}, "render": {"view_tag": "f"}, "placement": {"x": "left", "y": 0, "scale": 1}}"#,
                "placement.x",
            ),
            (
                r#"{"background": {"id": "d"}, "render": {"view_tag": "f"}, "placement": {"x": 0, "y": 0, "scale": 1},
                    "injection": {"tau_q": 1.5}}"#,
                "injection.tau_q",
            ),
            (
                r#"{"background": {"id": "d"}, "render": {"view_tag": "f"}, "placement": {"x": 0, "y": 0, "scale": 0}}"#,
                "placement.scale",
            ),
            (
                r#"{"background": {"id": "d"}, "render": {"view_tag": "f"}, "placement": {"x": 0, "y": 0, "scale": 1},
                    "controls": {"gudiance": 3}}"#,
                "controls",
            ),
        ];
        for (json, field) in cases {
            let err = CompositeRequest::from_json(json).unwrap_err();
            let got = err.field().unwrap_or_default().to_string();
            assert!(got.starts_with(field), "{json}: got field {got:?} ({err})");
        }
    }

    #[test]
    fn missing_background_is_reported() {
        let err = CompositeRequest::from_json(
            r#"{"render": {"view_tag": "f"}, "placement": {"x": 0, "y": 0, "scale": 1}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("background"), "{err}");
    }

    #[test]
    fn every_knob_has_default_inside_range() {
        for k in knob_ranges() {
            assert!(k.min <= k.default && k.default <= k.max, "{}", k.name);
        }
    }
}
