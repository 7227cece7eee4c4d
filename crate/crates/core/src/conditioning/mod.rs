//! Text and image conditioning: captions for the object, and the content and
//! style embeddings routed to the two denoising branches.

mod vlm;

pub use vlm::{
    Captioner, HttpVlmClient, LocalVlmClient, VlmClient, VlmConfig, VlmMode, CAPTION_INSTRUCTION,
};

use serde::{Deserialize, Serialize};

use crate::backends::ImageEmbedder;
use crate::diffusion::PixelImage;
use crate::error::{BackendError, Error, Result};

pub const DEFAULT_CONTENT_WEIGHT: f64 = 0.8;
pub const DEFAULT_STYLE_WEIGHT: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    Vlm,
    User,
    Template,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub text: String,
    pub source: PromptSource,
}

impl PromptSpec {
    pub fn new(text: impl Into<String>, source: PromptSource) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::validation("prompt", "prompt text is empty"));
        }
        Ok(Self { text, source })
    }

    pub fn user(text: impl Into<String>) -> Result<Self> {
        Self::new(text, PromptSource::User)
    }

    /// `"a photo of a {tag}"`; an empty tag becomes "object".
    pub fn template(tag: &str) -> Self {
        let tag = tag.trim();
        let tag = if tag.is_empty() { "object" } else { tag };
        Self {
            text: format!("a photo of a {tag}"),
            source: PromptSource::Template,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingRole {
    /// Object appearance; reconstruction branch only.
    Content,
    /// Background look; generation branch only.
    Style,
}

impl std::fmt::Display for EmbeddingRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EmbeddingRole::Content => "content",
            EmbeddingRole::Style => "style",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    pub vector: Vec<f32>,
    pub role: EmbeddingRole,
    pub extractor_id: String,
}

/// Adapter strengths for the two embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingWeights {
    pub content: f64,
    pub style: f64,
}

impl Default for EmbeddingWeights {
    fn default() -> Self {
        Self {
            content: DEFAULT_CONTENT_WEIGHT,
            style: DEFAULT_STYLE_WEIGHT,
        }
    }
}

/// Embeds `image` for `role`. A missing extractor is reported as a disabled
/// control rather than a hard failure of the pipeline.
pub fn embed(
    image: &PixelImage,
    role: EmbeddingRole,
    extractor: Option<&dyn ImageEmbedder>,
) -> Result<ImageEmbedding> {
    let extractor = extractor.ok_or_else(|| {
        Error::Backend(BackendError::Unavailable(format!(
            "no image embedder loaded; the {role} embedding control is disabled"
        )))
    })?;
    let vector = extractor.embed(image)?;
    if vector.is_empty() || vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::Backend(BackendError::Contract(format!(
            "{} returned an empty or non-finite embedding",
            extractor.id()
        ))));
    }
    Ok(ImageEmbedding {
        vector,
        role,
        extractor_id: extractor.id(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::toy::ToyClipEmbedder;
    use crate::diffusion::{LatentGrid, SpaceTag};

    #[test]
    fn template_prompt() {
        assert_eq!(PromptSpec::template("dog").text, "a photo of a dog");
        assert_eq!(PromptSpec::template(" ").text, "a photo of a object");
        assert!(PromptSpec::user("  ").is_err());
    }

    #[test]
    fn embedding_is_deterministic_and_tagged() {
        let img = LatentGrid::filled((3, 40, 40), 0.4, SpaceTag::Pixel);
        let a = embed(&img, EmbeddingRole::Style, Some(&ToyClipEmbedder)).unwrap();
        let b = embed(&img, EmbeddingRole::Style, Some(&ToyClipEmbedder)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.role, EmbeddingRole::Style);
        assert_eq!(a.extractor_id, "toy-clip");
    }

    #[test]
    fn missing_extractor_names_the_control() {
        let img = LatentGrid::filled((3, 8, 8), 0.4, SpaceTag::Pixel);
        let err = embed(&img, EmbeddingRole::Content, None).unwrap_err();
        assert!(err
            .to_string()
            .contains("content embedding control is disabled"));
    }
}
