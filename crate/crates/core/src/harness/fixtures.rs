//! Small synthetic scenes for smoke runs and tests.

use std::path::Path;

use ndarray::{Array2, Array3};

use super::manifest::{BackgroundEntry, BenchmarkManifest, ObjectEntry, Pairs, RenderEntry};
use crate::compositing::DepthMap;
use crate::diffusion::{LatentGrid, SpaceTag};
use crate::error::{Error, Result};
use crate::imageio::{save_depth_png, save_png, save_rgba_png};

pub const BACKGROUND_SIZE: (usize, usize) = (64, 80);
pub const RENDER_SIZE: usize = 24;

/// Textured background `i`: (height, width) = [`BACKGROUND_SIZE`].
pub fn background(i: usize) -> crate::diffusion::PixelImage {
    let (h, w) = BACKGROUND_SIZE;
    let f = 1.0 + i as f32;
    let v = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        let (yf, xf) = (y as f32 / h as f32, x as f32 / w as f32);
        let base = [0.55 + 0.1 * f.sin(), 0.45, 0.35 + 0.05 * f][c];
        let grain = 0.08 * ((xf * 9.0 * f + c as f32).sin() * (yf * 7.0 + f).cos());
        (base + 0.25 * yf - 0.1 * xf + grain).clamp(0.0, 1.0)
    });
    LatentGrid::from_finite(v, SpaceTag::Pixel)
}

/// Ellipse render of object `i` seen from view `v`, with its depth.
pub fn render(i: usize, v: usize) -> (crate::diffusion::PixelImage, DepthMap) {
    let n = RENDER_SIZE;
    let c = (n as f32 - 1.0) / 2.0;
    let (ax, ay) = (0.45 + 0.05 * v as f32, 0.4);
    let hue = [0.9 - 0.3 * i as f32, 0.2 + 0.25 * i as f32, 0.3 + 0.1 * v as f32];
    let inside = |y: usize, x: usize| {
        let (dx, dy) = ((x as f32 - c) / (ax * n as f32), (y as f32 - c) / (ay * n as f32));
        dx * dx + dy * dy
    };
    let rgba = Array3::from_shape_fn((4, n, n), |(ch, y, x)| {
        let r = inside(y, x);
        if ch == 3 {
            if r <= 1.0 {
                1.0
            } else {
                0.0
            }
        } else {
            (hue[ch].clamp(0.0, 1.0) * (1.0 - 0.4 * r.min(1.0))).clamp(0.0, 1.0)
        }
    });
    let depth = Array2::from_shape_fn((n, n), |(y, x)| (0.5 + 0.5 * (1.0 - inside(y, x).min(1.0))) as f32);
    (
        LatentGrid::from_finite(rgba, SpaceTag::Pixel),
        DepthMap::new(depth).expect("depth in range"),
    )
}

/// Object photo `i`: the front render flattened on grey.
pub fn object_photo(i: usize) -> crate::diffusion::PixelImage {
    let (rgba, _) = render(i, 0);
    let v = rgba.values();
    let n = RENDER_SIZE;
    let rgb = Array3::from_shape_fn((3, n, n), |(c, y, x)| {
        let a = v[[3, y, x]];
        v[[c, y, x]] * a + 0.5 * (1.0 - a)
    });
    LatentGrid::from_finite(rgb, SpaceTag::Pixel)
}

/// Writes `objects` objects with `views` views each and `backgrounds`
/// backgrounds under `dir`, plus a cross-product `manifest.json`.
pub fn write_assets(dir: &Path, objects: usize, views: usize, backgrounds: usize) -> Result<BenchmarkManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = BenchmarkManifest {
        pairs: Pairs::Rule("cross_product".into()),
        ..BenchmarkManifest::default()
    };
    for i in 0..objects {
        let id = format!("obj{i}");
        let image = format!("{id}.png");
        save_png(dir.join(&image), &object_photo(i))?;
        let mut renders = Vec::new();
        for v in 0..views {
            let (rgba, depth) = render(i, v);
            let (rgba_name, depth_name) = (format!("{id}_v{v}.png"), format!("{id}_v{v}_depth.png"));
            save_rgba_png(dir.join(&rgba_name), &rgba)?;
            save_depth_png(dir.join(&depth_name), &depth)?;
            renders.push(RenderEntry {
                rgba: rgba_name.into(),
                depth: depth_name.into(),
                view_tag: format!("view{v}"),
            });
        }
        m.objects.push(ObjectEntry {
            id,
            image: image.into(),
            tag: Some(["mug", "lamp", "vase", "book"][i % 4].into()),
            renders,
        });
    }
    for b in 0..backgrounds {
        let path = format!("desk{b}.png");
        save_png(dir.join(&path), &background(b))?;
        m.backgrounds.push(BackgroundEntry {
            id: format!("desk{b}"),
            path: path.into(),
        });
    }
    let json = serde_json::to_vec_pretty(&m)?;
    let manifest_path = dir.join("manifest.json");
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    m.resolve_paths(dir);
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn written_manifest_loads_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let written = write_assets(dir.path(), 2, 1, 2).unwrap();
        let loaded = BenchmarkManifest::load(dir.path().join("manifest.json")).unwrap();
        assert_eq!(written, loaded);
        loaded.validate().unwrap();
        assert_eq!(loaded.units().unwrap().len(), 4);
    }
}
