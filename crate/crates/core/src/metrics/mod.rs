//! Region-wise CLIP/DINO similarity, LPIPS and D-RMSE, plus the report that
//! aggregates them.

mod report;

pub use report::{MetricRow, MetricsReport, PairFailure, ReportMetadata};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backends::{DepthEstimator, ImageEmbedder, PerceptualBackbone};
use crate::compositing::{crop, crop_plane, resize_plane, DepthMap, PixelMask};
use crate::diffusion::PixelImage;
use crate::error::{BackendError, Error, Result};

/// Axis-aligned target region in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl RegionSpec {
    pub fn new(
        x: usize,
        y: usize,
        width: usize,
        height: usize,
        image_w: usize,
        image_h: usize,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation("region", "region has zero area"));
        }
        if x + width > image_w || y + height > image_h {
            return Err(Error::validation(
                "region",
                format!("{width}x{height} at ({x}, {y}) exceeds {image_w}x{image_h}"),
            ));
        }
        Ok(Self {
            x,
            y,
            width,
            height,
        })
    }

    /// Bounding box of the set pixels of `mask`.
    pub fn from_mask(mask: &PixelMask) -> Result<Self> {
        let (x0, y0, x1, y1) = mask
            .bbox()
            .ok_or_else(|| Error::validation("region", "mask is empty"))?;
        Self::new(x0, y0, x1 - x0, y1 - y0, mask.width(), mask.height())
    }

    pub fn crop(&self, img: &PixelImage) -> PixelImage {
        crop(img, self.x, self.y, self.width, self.height)
    }

    pub fn crop_plane(&self, plane: &Array2<f32>) -> Array2<f32> {
        crop_plane(plane, self.x, self.y, self.width, self.height)
    }
}

/// Cosine of two vectors in f64, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "embedding lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DivisionGuard("cosine of a zero vector".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub fn similarity(a: &PixelImage, b: &PixelImage, embedder: &dyn ImageEmbedder) -> Result<f64> {
    let ea = embedder.embed(a)?;
    let eb = embedder.embed(b)?;
    cosine_similarity(&ea, &eb)
}

/// Sum over layers of the spatial mean of weighted squared differences
/// between channel-normalised features.
pub fn lpips_distance(
    a: &PixelImage,
    b: &PixelImage,
    backbone: &dyn PerceptualBackbone,
) -> Result<f64> {
    let fa = backbone.features(a)?;
    let fb = backbone.features(b)?;
    if fa.len() != fb.len() {
        return Err(BackendError::Contract("feature pyramids differ in depth".into()).into());
    }
    let weights = backbone.layer_weights();
    let mut total = 0.0;
    for (l, (x, y)) in fa.iter().zip(&fb).enumerate() {
        if x.shape != y.shape || x.shape.len() != 3 {
            return Err(BackendError::Contract(format!(
                "layer {l}: shapes {:?} and {:?}",
                x.shape, y.shape
            ))
            .into());
        }
        let (c, hw) = (x.shape[0], x.shape[1] * x.shape[2]);
        let w = weights.as_ref().and_then(|w| w.get(l));
        let mut layer = 0.0f64;
        for p in 0..hw {
            let norm = |f: &[f32]| {
                (0..c)
                    .map(|k| (f[k * hw + p] as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
                    + 1e-10
            };
            let (nx, ny) = (norm(&x.data), norm(&y.data));
            for k in 0..c {
                let d = x.data[k * hw + p] as f64 / nx - y.data[k * hw + p] as f64 / ny;
                layer += w.map_or(1.0, |w| w[k] as f64) * d * d;
            }
        }
        total += layer / hw as f64;
    }
    Ok(total)
}

/// Zero-mean, unit-variance copy; constant planes become all zeros.
pub fn zscore(plane: &Array2<f32>) -> Array2<f64> {
    let n = plane.len().max(1) as f64;
    let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = plane
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return Array2::zeros(plane.dim());
    }
    plane.mapv(|v| (v as f64 - mean) / std)
}

/// RMSE after per-map z-score normalisation.
pub fn normalized_depth_rmse(a: &Array2<f32>, b: &Array2<f32>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::contract(format!(
            "depth shapes {:?} and {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    let (za, zb) = (zscore(a), zscore(b));
    let n = a.len().max(1) as f64;
    Ok(((&za - &zb).mapv(|d| d * d).sum() / n).sqrt())
}

/// Estimates the depth of `generated`, crops both maps to `region` and
/// compares them after per-region normalisation.
pub fn d_rmse(
    reference: &DepthMap,
    generated: &PixelImage,
    region: &RegionSpec,
    estimator: &dyn DepthEstimator,
) -> Result<f64> {
    let (h, w) = (generated.height(), generated.width());
    if reference.dim() != (h, w) {
        return Err(Error::contract(format!(
            "reference depth {:?} does not match image {w}x{h}",
            reference.dim()
        )));
    }
    let est = estimator.estimate(generated)?;
    let est = if est.dim() == (h, w) {
        est.values().clone()
    } else {
        resize_plane(est.values(), h, w)
    };
    normalized_depth_rmse(
        &region.crop_plane(reference.values()),
        &region.crop_plane(&est),
    )
}

/// Metric values for one generated image; `None` means the metric could not
/// be computed because its model is not loaded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub clip_obj: Option<f64>,
    pub dino_obj: Option<f64>,
    pub clip_style: Option<f64>,
    pub dino_style: Option<f64>,
    pub lpips_obj: Option<f64>,
    pub lpips_style: Option<f64>,
    pub d_rmse: Option<f64>,
}

impl ImageMetrics {
    pub const NAMES: [&'static str; 7] = [
        "clip_obj",
        "dino_obj",
        "clip_style",
        "dino_style",
        "lpips_obj",
        "lpips_style",
        "d_rmse",
    ];

    pub fn values(&self) -> [Option<f64>; 7] {
        [
            self.clip_obj,
            self.dino_obj,
            self.clip_style,
            self.dino_style,
            self.lpips_obj,
            self.lpips_style,
            self.d_rmse,
        ]
    }

    pub fn from_values(v: [Option<f64>; 7]) -> Self {
        Self {
            clip_obj: v[0],
            dino_obj: v[1],
            clip_style: v[2],
            dino_style: v[3],
            lpips_obj: v[4],
            lpips_style: v[5],
            d_rmse: v[6],
        }
    }

    /// Names of metrics that are absent.
    pub fn absent(&self) -> Vec<&'static str> {
        Self::NAMES
            .iter()
            .zip(self.values())
            .filter(|(_, v)| v.is_none())
            .map(|(n, _)| *n)
            .collect()
    }
}

/// Models used for scoring; any of them may be missing.
#[derive(Clone, Copy, Default)]
pub struct MetricSuite<'a> {
    pub clip: Option<&'a dyn ImageEmbedder>,
    pub dino: Option<&'a dyn ImageEmbedder>,
    pub perceptual: Option<&'a dyn PerceptualBackbone>,
    pub depth: Option<&'a dyn DepthEstimator>,
}

impl<'a> From<&'a crate::backends::BackendSet> for MetricSuite<'a> {
    fn from(b: &'a crate::backends::BackendSet) -> Self {
        Self {
            clip: b.clip.as_deref(),
            dino: b.dino.as_deref(),
            perceptual: b.perceptual.as_deref(),
            depth: b.depth.as_deref(),
        }
    }
}

/// Scores one generated image.
///
/// Object metrics compare the region crop of `generated` with `object`;
/// style metrics compare the same crop with the full `background`; D-RMSE
/// compares `reference_depth` with the estimated depth of `generated` inside
/// the region.
pub fn evaluate(
    generated: &PixelImage,
    object: &PixelImage,
    background: &PixelImage,
    reference_depth: Option<&DepthMap>,
    region: &RegionSpec,
    suite: &MetricSuite<'_>,
) -> Result<ImageMetrics> {
    let target = region.crop(generated);
    let sim = |e: Option<&dyn ImageEmbedder>, other: &PixelImage| {
        e.map(|e| similarity(&target, other, e)).transpose()
    };
    let lp = |other: &PixelImage| {
        suite
            .perceptual
            .map(|p| lpips_distance(&target, other, p))
            .transpose()
    };
    Ok(ImageMetrics {
        clip_obj: sim(suite.clip, object)?,
        dino_obj: sim(suite.dino, object)?,
        clip_style: sim(suite.clip, background)?,
        dino_style: sim(suite.dino, background)?,
        lpips_obj: lp(object)?,
        lpips_style: lp(background)?,
        d_rmse: match (reference_depth, suite.depth) {
            (Some(r), Some(est)) => Some(d_rmse(r, generated, region, est)?),
            _ => None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::toy::{ToyClipEmbedder, ToyPerceptualBackbone};
    use crate::diffusion::{LatentGrid, SpaceTag};
    use ndarray::array;

    #[test]
    fn cosine_oracle_values() {
        assert!((cosine_similarity(&[1.0, 0.0], &[0.0, 2.0]).unwrap()).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[3.0, 4.0], &[-3.0, -4.0]).unwrap(), -1.0);
        // (1·2 + 2·1) / (√5·√5) = 0.8
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(cosine_similarity(&[0.0], &[1.0]).is_err());
    }

    #[test]
    fn constant_regions_give_zero_d_rmse() {
        let a = Array2::from_elem((4, 4), 0.2f32);
        let b = Array2::from_elem((4, 4), 0.9f32);
        assert_eq!(normalized_depth_rmse(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn affine_related_depths_give_zero_d_rmse() {
        let a = array![[0.1f32, 0.2], [0.3, 0.4]];
        let b = a.mapv(|v| 0.5 * v + 0.25);
        assert!(normalized_depth_rmse(&a, &b).unwrap() < 1e-6);
        // reversed order: z-scores are negatives of each other, rmse = 2
        let c = array![[0.4f32, 0.3], [0.2, 0.1]];
        assert!((normalized_depth_rmse(&a, &c).unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn lpips_zero_on_identical_and_positive_otherwise() {
        let a = LatentGrid::from_vec(
            (3, 8, 8),
            (0..192).map(|i| (i % 7) as f32 / 7.0).collect(),
            SpaceTag::Pixel,
        )
        .unwrap();
        let b = LatentGrid::filled((3, 8, 8), 0.5, SpaceTag::Pixel);
        assert_eq!(lpips_distance(&a, &a, &ToyPerceptualBackbone).unwrap(), 0.0);
        assert!(lpips_distance(&a, &b, &ToyPerceptualBackbone).unwrap() > 0.0);
        let s1 = similarity(&a, &b, &ToyClipEmbedder).unwrap();
        let s2 = similarity(&b, &a, &ToyClipEmbedder).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn region_validation() {
        assert!(RegionSpec::new(0, 0, 0, 4, 8, 8).is_err());
        assert!(RegionSpec::new(6, 0, 4, 4, 8, 8).is_err());
        let mut m = Array2::zeros((8, 8));
        m[[2, 3]] = 1;
        m[[5, 6]] = 1;
        assert_eq!(
            RegionSpec::from_mask(&PixelMask(m)).unwrap(),
            RegionSpec::new(3, 2, 4, 4, 8, 8).unwrap()
        );
    }
}
