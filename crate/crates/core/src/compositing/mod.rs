//! Pixel-space assembly: paste the rendered object onto the background, derive
//! the editing mask and build the depth condition.

mod resample;

pub use resample::{
    crop, crop_plane, dilate_square, pad_reflect, pad_reflect_plane, padded_len, resize_bilinear,
    resize_plane,
};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::backends::DepthEstimator;
use crate::diffusion::{LatentGrid, PixelImage, SpaceTag};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use resample::bilinear;

pub const DEFAULT_DILATION_RADIUS: usize = 8;
pub const MIN_BACKGROUND_SIDE: usize = 64;

/// Where the rendered object goes on the background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    /// Top-left corner of the scaled render box, in background pixels.
    pub x: i64,
    pub y: i64,
    pub scale: f64,
    /// In-plane rotation about the box centre; positive is counter-clockwise.
    #[serde(default)]
    pub rotation_deg: f64,
}

impl Placement {
    pub fn new(x: i64, y: i64, scale: f64) -> Self {
        Self {
            x,
            y,
            scale,
            rotation_deg: 0.0,
        }
    }
}

/// Depth normalised to `[0, 1]`, 1 = nearest.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    values: Array2<f32>,
}

impl DepthMap {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("depth value {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), value))
    }

    /// Min-max normalises arbitrary finite values into `[0, 1]`. A constant
    /// map is clamped instead, since it has no range to stretch.
    pub fn normalized(mut values: Array2<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("depth contains non-finite values"));
        }
        let (lo, hi) = min_max(&values);
        if hi - lo > 1e-12 {
            let span = hi - lo;
            values.mapv_inplace(|v| ((v as f64 - lo) / span) as f32);
        } else {
            values.mapv_inplace(|v| v.clamp(0.0, 1.0));
        }
        Self::new(values)
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    /// `(height, width)`.
    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

fn min_max(values: &Array2<f32>) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        })
}

/// An externally rendered view of the object: RGBA plus aligned depth.
#[derive(Debug, Clone)]
pub struct RenderedObject {
    rgba: PixelImage,
    depth: DepthMap,
    view_tag: String,
}

impl RenderedObject {
    pub fn new(rgba: PixelImage, depth: DepthMap, view_tag: impl Into<String>) -> Result<Self> {
        if rgba.channels() != 4 || rgba.space() != SpaceTag::Pixel {
            return Err(Error::contract("render must be a 4-channel pixel image"));
        }
        if rgba.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("render values must lie in [0, 1]"));
        }
        if depth.dim() != (rgba.height(), rgba.width()) {
            return Err(Error::contract(format!(
                "render depth {:?} not aligned with rgba {}x{}",
                depth.dim(),
                rgba.height(),
                rgba.width()
            )));
        }
        Ok(Self {
            rgba,
            depth,
            view_tag: view_tag.into(),
        })
    }

    pub fn rgba(&self) -> &PixelImage {
        &self.rgba
    }

    pub fn depth(&self) -> &DepthMap {
        &self.depth
    }

    pub fn view_tag(&self) -> &str {
        &self.view_tag
    }

    pub fn width(&self) -> usize {
        self.rgba.width()
    }

    pub fn height(&self) -> usize {
        self.rgba.height()
    }
}

/// Binary mask at pixel resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask(pub Array2<u8>);

impl PixelMask {
    pub fn height(&self) -> usize {
        self.0.dim().0
    }

    pub fn width(&self) -> usize {
        self.0.dim().1
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v != 0).count()
    }

    /// Inclusive-exclusive bounding box `(x0, y0, x1, y1)` of set pixels.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for ((y, x), &v) in self.0.indexed_iter() {
            if v != 0 {
                bb = Some(match bb {
                    None => (x, y, x + 1, y + 1),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                });
            }
        }
        bb
    }
}

/// Editing mask at pixel and latent resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    pixel: PixelMask,
    latent: Array3<u8>,
    scale_factor: usize,
}

impl MaskGrid {
    pub fn new(pixel: PixelMask, scale_factor: usize, channels: usize) -> Result<Self> {
        let latent = derive_latent_mask(&pixel.0, scale_factor, channels)?;
        Ok(Self {
            pixel,
            latent,
            scale_factor,
        })
    }

    /// Mask that keeps every latent cell (no background pinning).
    pub fn full(shape: (usize, usize, usize), scale_factor: usize) -> Self {
        let (_, h, w) = shape;
        Self {
            pixel: PixelMask(Array2::from_elem((h * scale_factor, w * scale_factor), 1)),
            latent: Array3::from_elem(shape, 1),
            scale_factor,
        }
    }

    pub fn pixel(&self) -> &PixelMask {
        &self.pixel
    }

    pub fn latent(&self) -> &Array3<u8> {
        &self.latent
    }

    pub fn latent_slice(&self) -> &[u8] {
        self.latent.as_slice().expect("standard layout")
    }

    pub fn scale_factor(&self) -> usize {
        self.scale_factor
    }

    /// Pixel-resolution footprint of the latent mask (nearest upsampling).
    pub fn latent_footprint(&self) -> PixelMask {
        let (_, h, w) = self.latent.dim();
        let s = self.scale_factor;
        PixelMask(Array2::from_shape_fn((h * s, w * s), |(y, x)| {
            self.latent[[0, y / s, x / s]]
        }))
    }
}

/// Max-pools a binary pixel mask by `scale_factor` (any covered pixel sets the
/// cell) and broadcasts it over `channels`. Sizes that are not multiples of
/// the factor are reflect-padded first.
pub fn derive_latent_mask(
    pixel_mask: &Array2<u8>,
    scale_factor: usize,
    channels: usize,
) -> Result<Array3<u8>> {
    if scale_factor == 0 || channels == 0 {
        return Err(Error::contract(
            "scale factor and channel count must be positive",
        ));
    }
    if pixel_mask.iter().any(|&v| v > 1) {
        return Err(Error::contract("pixel mask must be binary"));
    }
    let padded = pad_reflect_plane(pixel_mask, scale_factor);
    let (h, w) = padded.dim();
    let (lh, lw) = (h / scale_factor, w / scale_factor);
    let mut pooled = Array2::<u8>::zeros((lh, lw));
    for ((y, x), &v) in padded.indexed_iter() {
        if v != 0 {
            pooled[[y / scale_factor, x / scale_factor]] = 1;
        }
    }
    Ok(Array3::from_shape_fn((channels, lh, lw), |(_, y, x)| {
        pooled[[y, x]]
    }))
}

/// Inverse mapping from background pixels to render pixels for one placement.
struct Warp {
    box_w: f64,
    box_h: f64,
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    src_w: usize,
    src_h: usize,
    /// (x0, y0, x1, y1) in canvas coordinates, clipped, exclusive end.
    bbox: (usize, usize, usize, usize),
}

impl Warp {
    fn new(
        src_w: usize,
        src_h: usize,
        place: &Placement,
        canvas_w: usize,
        canvas_h: usize,
    ) -> Result<Self> {
        if !(place.scale.is_finite() && place.scale > 0.0) {
            let mut suggestion = *place;
            suggestion.scale = 1.0;
            return Err(Error::Placement {
                message: format!("scale must be positive, got {}", place.scale),
                suggestion,
            });
        }
        if !place.rotation_deg.is_finite() {
            let mut suggestion = *place;
            suggestion.rotation_deg = 0.0;
            return Err(Error::Placement {
                message: "rotation must be finite".into(),
                suggestion,
            });
        }
        let box_w = (src_w as f64 * place.scale).round().max(1.0);
        let box_h = (src_h as f64 * place.scale).round().max(1.0);
        let cx = place.x as f64 + box_w / 2.0;
        let cy = place.y as f64 + box_h / 2.0;
        let theta = place.rotation_deg.to_radians();
        let (sin, cos) = if place.rotation_deg == 0.0 {
            (0.0, 1.0)
        } else {
            theta.sin_cos()
        };
        // forward-rotate the box corners to get the canvas footprint
        let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for (u, v) in [(-0.5, -0.5), (0.5, -0.5), (-0.5, 0.5), (0.5, 0.5)] {
            let (dx, dy) = (u * box_w, v * box_h);
            let x = cx + dx * cos + dy * sin;
            let y = cy - dx * sin + dy * cos;
            lo_x = lo_x.min(x);
            lo_y = lo_y.min(y);
            hi_x = hi_x.max(x);
            hi_y = hi_y.max(y);
        }
        let x0 = lo_x.floor().max(0.0);
        let y0 = lo_y.floor().max(0.0);
        let x1 = hi_x.ceil().min(canvas_w as f64);
        let y1 = hi_y.ceil().min(canvas_h as f64);
        if x1 <= x0 || y1 <= y0 {
            let suggestion = Placement {
                x: place.x.clamp(1 - box_w as i64, canvas_w as i64 - 1),
                y: place.y.clamp(1 - box_h as i64, canvas_h as i64 - 1),
                ..*place
            };
            return Err(Error::Placement {
                message: format!(
                    "render box at ({}, {}) of {}x{} lies outside the {}x{} canvas",
                    place.x, place.y, box_w, box_h, canvas_w, canvas_h
                ),
                suggestion,
            });
        }
        Ok(Self {
            box_w,
            box_h,
            cx,
            cy,
            cos,
            sin,
            src_w,
            src_h,
            bbox: (x0 as usize, y0 as usize, x1 as usize, y1 as usize),
        })
    }

    /// Continuous render coordinates sampled by canvas pixel `(x, y)`, or
    /// `None` when the pixel centre falls outside the render box.
    fn source(&self, x: usize, y: usize) -> Option<(f64, f64)> {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let lx = dx * self.cos - dy * self.sin + self.box_w / 2.0;
        let ly = dx * self.sin + dy * self.cos + self.box_h / 2.0;
        if lx < 0.0 || ly < 0.0 || lx >= self.box_w || ly >= self.box_h {
            return None;
        }
        let sx = lx * self.src_w as f64 / self.box_w - 0.5;
        let sy = ly * self.src_h as f64 / self.box_h - 0.5;
        Some((sx, sy))
    }
}

/// Per-pixel result of warping the render onto the canvas.
#[derive(Debug, Clone, Copy, Default)]
struct WarpSample {
    /// Premultiplied colour.
    rgb: [f32; 3],
    alpha: f32,
    depth: f32,
}

fn warp_render(
    render: &RenderedObject,
    w: usize,
    h: usize,
    place: &Placement,
    exec: Exec,
) -> Result<Vec<WarpSample>> {
    let warp = Warp::new(render.width(), render.height(), place, w, h)?;
    let (rw, rh) = (render.width(), render.height());
    let rgba = render.rgba().as_slice();
    let plane = rw * rh;
    let alpha_plane = &rgba[3 * plane..4 * plane];
    let premul: Vec<Vec<f32>> = (0..3)
        .map(|c| {
            rgba[c * plane..(c + 1) * plane]
                .iter()
                .zip(alpha_plane)
                .map(|(&v, &a)| v * a)
                .collect()
        })
        .collect();
    let depth = render.depth().values().as_standard_layout().into_owned();
    let depth = depth.as_slice().expect("standard layout");
    let (x0, y0, x1, y1) = warp.bbox;
    let mut samples = vec![WarpSample::default(); w * h];
    par::for_each_row(exec, &mut samples, w, |y, row| {
        if y < y0 || y >= y1 {
            return;
        }
        for (x, out) in row.iter_mut().enumerate().take(x1).skip(x0) {
            let Some((sx, sy)) = warp.source(x, y) else {
                continue;
            };
            let alpha = bilinear(alpha_plane, rw, rh, sx, sy).clamp(0.0, 1.0);
            if alpha == 0.0 {
                continue;
            }
            *out = WarpSample {
                rgb: [
                    bilinear(&premul[0], rw, rh, sx, sy),
                    bilinear(&premul[1], rw, rh, sx, sy),
                    bilinear(&premul[2], rw, rh, sx, sy),
                ],
                alpha,
                depth: bilinear(depth, rw, rh, sx, sy),
            };
        }
    });
    Ok(samples)
}

fn check_background(bg: &PixelImage) -> Result<()> {
    if bg.space() != SpaceTag::Pixel || bg.channels() != 3 {
        return Err(Error::validation(
            "background",
            "must be an RGB pixel image",
        ));
    }
    if bg.width() < MIN_BACKGROUND_SIDE || bg.height() < MIN_BACKGROUND_SIDE {
        return Err(Error::validation(
            "background",
            format!(
                "must be at least {MIN_BACKGROUND_SIDE}x{MIN_BACKGROUND_SIDE}, got {}x{}",
                bg.width(),
                bg.height()
            ),
        ));
    }
    Ok(())
}

/// Output of [`paste`].
#[derive(Debug, Clone)]
pub struct PasteResult {
    /// Background with the render alpha-composited in.
    pub coarse: PixelImage,
    /// `(resampled alpha > 0.5)` dilated by the configured radius.
    pub mask: PixelMask,
    /// Resampled render alpha on the canvas.
    pub alpha: Array2<f32>,
}

/// Alpha-composites the placed render over `bg`. Pixels the render does not
/// reach keep their background bits.
pub fn paste(
    render: &RenderedObject,
    bg: &PixelImage,
    place: &Placement,
    dilation_radius: usize,
) -> Result<PasteResult> {
    paste_with(Exec::default(), render, bg, place, dilation_radius)
}

pub fn paste_with(
    exec: Exec,
    render: &RenderedObject,
    bg: &PixelImage,
    place: &Placement,
    dilation_radius: usize,
) -> Result<PasteResult> {
    check_background(bg)?;
    let (h, w) = (bg.height(), bg.width());
    let samples = warp_render(render, w, h, place, exec)?;
    let mut coarse = bg.clone().into_values();
    let mut alpha = Array2::<f32>::zeros((h, w));
    let mut core = Array2::<u8>::zeros((h, w));
    for (i, s) in samples.iter().enumerate() {
        if s.alpha == 0.0 {
            continue;
        }
        let (y, x) = (i / w, i % w);
        alpha[[y, x]] = s.alpha;
        core[[y, x]] = u8::from(s.alpha > 0.5);
        for c in 0..3 {
            let b = coarse[[c, y, x]];
            coarse[[c, y, x]] = (s.rgb[c] + (1.0 - s.alpha) * b).clamp(0.0, 1.0);
        }
    }
    Ok(PasteResult {
        coarse: LatentGrid::from_finite(coarse, SpaceTag::Pixel),
        mask: PixelMask(dilate_square(&core, dilation_radius)),
        alpha,
    })
}

/// Source of depth outside the object footprint.
#[derive(Clone, Copy)]
pub enum BackgroundDepth<'a> {
    /// Monocular estimate of the background; `None` means no estimator loaded.
    Estimator(Option<&'a dyn DepthEstimator>),
    /// Everything behind the object is at the far plane (0).
    ConstantFar,
}

/// Full-canvas depth condition: the transformed rendered depth where the
/// render covers the canvas (alpha > 0.5), background depth elsewhere,
/// min-max normalised to `[0, 1]` jointly.
pub fn compose_depth(
    render: &RenderedObject,
    bg: &PixelImage,
    place: &Placement,
    source: BackgroundDepth<'_>,
) -> Result<DepthMap> {
    check_background(bg)?;
    let (h, w) = (bg.height(), bg.width());
    let mut depth = match source {
        BackgroundDepth::ConstantFar => Array2::<f32>::zeros((h, w)),
        BackgroundDepth::Estimator(None) => {
            return Err(Error::Backend(crate::error::BackendError::Unavailable(
                "no depth estimator loaded; use the constant_far background depth source".into(),
            )))
        }
        BackgroundDepth::Estimator(Some(est)) => {
            let d = est.estimate(bg)?;
            resize_plane(d.values(), h, w)
        }
    };
    let samples = warp_render(render, w, h, place, Exec::default())?;
    for (i, s) in samples.iter().enumerate() {
        if s.alpha > 0.5 {
            depth[[i / w, i % w]] = s.depth;
        }
    }
    DepthMap::normalized(depth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bg(w: usize, h: usize, value: f32) -> PixelImage {
        LatentGrid::filled((3, h, w), value, SpaceTag::Pixel)
    }

    fn render(w: usize, h: usize, rgb: [f32; 3], alpha: f32, depth: f32) -> RenderedObject {
        let rgba = Array3::from_shape_fn((4, h, w), |(c, _, _)| if c < 3 { rgb[c] } else { alpha });
        RenderedObject::new(
            LatentGrid::new(rgba, SpaceTag::Pixel).unwrap(),
            DepthMap::constant(h, w, depth).unwrap(),
            "front",
        )
        .unwrap()
    }

    fn changed(a: &PixelImage, b: &PixelImage) -> Array2<u8> {
        let (_, h, w) = a.shape();
        Array2::from_shape_fn((h, w), |(y, x)| {
            u8::from(
                (0..3).any(|c| a.values()[[c, y, x]].to_bits() != b.values()[[c, y, x]].to_bits()),
            )
        })
    }

    #[test]
    fn transparent_render_leaves_background_untouched() {
        let b = bg(64, 64, 0.25);
        let r = render(10, 10, [1.0, 0.0, 0.0], 0.0, 0.5);
        let out = paste(&r, &b, &Placement::new(5, 5, 1.0), 8).unwrap();
        assert_eq!(out.coarse, b);
        assert_eq!(out.mask.count(), 0);
    }

    #[test]
    fn opaque_render_changes_exactly_its_box() {
        let b = bg(64, 64, 0.25);
        let r = render(10, 10, [1.0, 0.0, 0.0], 1.0, 0.5);
        let out = paste(&r, &b, &Placement::new(0, 0, 1.0), 8).unwrap();
        let diff = PixelMask(changed(&out.coarse, &b));
        assert_eq!(diff.count(), 100);
        assert_eq!(diff.bbox(), Some((0, 0, 10, 10)));
        // mask = 10x10 box plus an 8-pixel ring, clipped at the canvas edge
        assert_eq!(out.mask.bbox(), Some((0, 0, 18, 18)));
        assert_eq!(out.mask.count(), 18 * 18);
        assert_eq!(out.coarse.values()[[0, 3, 3]], 1.0);
    }

    #[test]
    fn doubling_scale_doubles_changed_box() {
        // brute-force diff oracle: bounding box of bitwise-changed pixels
        let b = bg(96, 96, 0.25);
        let r = render(16, 16, [0.9, 0.8, 0.1], 1.0, 0.5);
        let out = paste(&r, &b, &Placement::new(20, 30, 2.0), 0).unwrap();
        let (x0, y0, x1, y1) = PixelMask(changed(&out.coarse, &b)).bbox().unwrap();
        assert!(((x1 - x0) as i64 - 32).abs() <= 1, "width {}", x1 - x0);
        assert!(((y1 - y0) as i64 - 32).abs() <= 1, "height {}", y1 - y0);
        assert_eq!((x0, y0), (20, 30));
    }

    #[test]
    fn off_canvas_placement_suggests_clamp() {
        let b = bg(64, 64, 0.25);
        let r = render(10, 10, [1.0; 3], 1.0, 0.5);
        let err = paste(&r, &b, &Placement::new(200, -50, 1.0), 8).unwrap_err();
        match err {
            Error::Placement { suggestion, .. } => {
                assert_eq!((suggestion.x, suggestion.y), (63, -9));
                assert!(paste(&r, &b, &suggestion, 8).is_ok());
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(paste(&r, &b, &Placement::new(0, 0, 0.0), 8).is_err());
    }

    #[test]
    fn small_background_rejected() {
        let b = bg(32, 64, 0.25);
        let r = render(10, 10, [1.0; 3], 1.0, 0.5);
        let err = paste(&r, &b, &Placement::new(0, 0, 1.0), 8).unwrap_err();
        assert_eq!(err.field(), Some("background"));
    }

    #[test]
    fn rotation_keeps_object_centred() {
        let b = bg(64, 64, 0.0);
        let r = render(20, 10, [1.0; 3], 1.0, 0.5);
        let out = paste(
            &r,
            &b,
            &Placement {
                x: 22,
                y: 27,
                scale: 1.0,
                rotation_deg: 90.0,
            },
            0,
        )
        .unwrap();
        let (x0, y0, x1, y1) = out.mask.bbox().unwrap();
        // a 20x10 box rotated a quarter turn occupies 10x20 around (32, 32)
        assert_eq!((x1 - x0, y1 - y0), (10, 20));
        assert_eq!(((x0 + x1) / 2, (y0 + y1) / 2), (32, 32));
    }

    #[test]
    fn constant_far_transparent_is_all_zero() {
        let b = bg(64, 64, 0.25);
        let r = render(10, 10, [1.0; 3], 0.0, 0.8);
        let d = compose_depth(
            &r,
            &b,
            &Placement::new(5, 5, 1.0),
            BackgroundDepth::ConstantFar,
        )
        .unwrap();
        assert!(d.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_far_two_level_normalises_to_unit() {
        let b = bg(64, 64, 0.25);
        let r = render(10, 10, [1.0; 3], 1.0, 0.8);
        let d = compose_depth(
            &r,
            &b,
            &Placement::new(4, 6, 1.0),
            BackgroundDepth::ConstantFar,
        )
        .unwrap();
        for ((y, x), &v) in d.values().indexed_iter() {
            let inside = (4..14).contains(&x) && (6..16).contains(&y);
            assert_eq!(v, if inside { 1.0 } else { 0.0 }, "at ({x},{y})");
        }
    }

    #[test]
    fn estimator_mode_without_estimator_advises_constant_far() {
        let b = bg(64, 64, 0.25);
        let r = render(10, 10, [1.0; 3], 1.0, 0.8);
        let err = compose_depth(
            &r,
            &b,
            &Placement::new(0, 0, 1.0),
            BackgroundDepth::Estimator(None),
        )
        .unwrap_err();
        assert!(err.to_string().contains("constant_far"));
    }

    #[test]
    fn latent_mask_pooling() {
        let zero = Array2::<u8>::zeros((16, 16));
        assert!(derive_latent_mask(&zero, 8, 4)
            .unwrap()
            .iter()
            .all(|&v| v == 0));

        let mut one = zero.clone();
        one[[9, 3]] = 1;
        let lm = derive_latent_mask(&one, 8, 4).unwrap();
        assert_eq!(lm.dim(), (4, 2, 2));
        assert_eq!(lm.iter().filter(|&&v| v == 1).count(), 4);
        assert_eq!(lm[[0, 1, 0]], 1);
    }

    #[test]
    fn checkerboard_sets_every_cell() {
        let board = Array2::from_shape_fn((32, 24), |(y, x)| ((x + y) % 2) as u8);
        // brute-force oracle: a cell is set iff any of its pixels is set
        let lm = derive_latent_mask(&board, 8, 1).unwrap();
        for ((_, cy, cx), &v) in lm.indexed_iter() {
            let any = (0..8).any(|dy| (0..8).any(|dx| board[[cy * 8 + dy, cx * 8 + dx]] == 1));
            assert_eq!(v, u8::from(any));
        }
        assert!(lm.iter().all(|&v| v == 1));
    }

    #[test]
    fn non_divisible_mask_is_padded() {
        let mut m = Array2::<u8>::zeros((20, 13));
        m[[19, 12]] = 1;
        let lm = derive_latent_mask(&m, 8, 1).unwrap();
        assert_eq!(lm.dim(), (1, 3, 2));
        assert_eq!(lm[[0, 2, 1]], 1);
    }
}
