//! Reading and writing the pixel formats the pipeline exchanges.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};
use ndarray::{Array2, Array3};

use crate::compositing::{DepthMap, RenderedObject};
use crate::diffusion::{LatentGrid, PixelImage, SpaceTag};
use crate::error::{Error, Result};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))
}

fn to_grid(img: &DynamicImage, channels: usize) -> PixelImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = if channels == 4 {
        let buf = img.to_rgba32f();
        Array3::from_shape_fn((4, h, w), |(c, y, x)| buf.get_pixel(x as u32, y as u32)[c])
    } else {
        let buf = img.to_rgb32f();
        Array3::from_shape_fn((3, h, w), |(c, y, x)| buf.get_pixel(x as u32, y as u32)[c])
    };
    LatentGrid::from_finite(values.mapv(|v| v.clamp(0.0, 1.0)), SpaceTag::Pixel)
}

/// PNG or JPEG as RGB in `[0, 1]`; any alpha channel is dropped.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<PixelImage> {
    Ok(to_grid(&open(path.as_ref())?, 3))
}

/// RGBA in `[0, 1]`; opaque formats get alpha 1.
pub fn load_rgba(path: impl AsRef<Path>) -> Result<PixelImage> {
    Ok(to_grid(&open(path.as_ref())?, 4))
}

pub fn decode_rgb(bytes: &[u8]) -> Result<PixelImage> {
    let img = image::load_from_memory(bytes).map_err(|e| image_err(Path::new("<inline>"), e))?;
    Ok(to_grid(&img, 3))
}

/// Depth from a 16-bit or 8-bit grayscale PNG, or a 2-d float `.npy` array.
/// Arrays outside `[0, 1]` are min-max normalised.
pub fn load_depth(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("npy"))
    {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let values: Array2<f32> = match ndarray_npy::ReadNpyExt::read_npy(&file) {
            Ok(v) => v,
            Err(_) => {
                let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
                let v: Array2<f64> =
                    ndarray_npy::ReadNpyExt::read_npy(file).map_err(|e| image_err(path, e))?;
                v.mapv(|x| x as f32)
            }
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(image_err(path, "depth array contains non-finite values"));
        }
        return if values.iter().all(|v| (0.0..=1.0).contains(v)) {
            DepthMap::new(values)
        } else {
            DepthMap::normalized(values)
        };
    }
    let img = open(path)?;
    let gray = img.to_luma16();
    let (w, h) = gray.dimensions();
    let values = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        f32::from(gray.get_pixel(x as u32, y as u32)[0]) / 65535.0
    });
    DepthMap::new(values)
}

/// Render RGBA plus its depth map.
pub fn load_render(
    rgba: impl AsRef<Path>,
    depth: impl AsRef<Path>,
    view_tag: &str,
) -> Result<RenderedObject> {
    RenderedObject::new(load_rgba(rgba)?, load_depth(depth)?, view_tag)
}

fn to_rgb8(img: &PixelImage) -> image::RgbImage {
    let v = img.values();
    let (h, w) = (img.height(), img.width());
    let grey = img.channels() == 1;
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let c = if grey { 0 } else { c };
            (v[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn encode_png(img: &PixelImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    to_rgb8(img)
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| image_err(Path::new("<memory>"), e))?;
    Ok(out.into_inner())
}

/// 8-bit RGB PNG.
pub fn save_png(path: impl AsRef<Path>, img: &PixelImage) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_png(img)?).map_err(|e| Error::io(path, e))
}

/// 16-bit grayscale PNG.
pub fn save_depth_png(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = depth.dim();
    let v = depth.values();
    let buf =
        image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([(v[[y as usize, x as usize]] * 65535.0).round() as u16])
        });
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

/// 8-bit RGBA PNG from a 4-channel image.
pub fn save_rgba_png(path: impl AsRef<Path>, img: &PixelImage) -> Result<()> {
    let path = path.as_ref();
    if img.channels() != 4 {
        return Err(image_err(path, "expected 4 channels"));
    }
    let v = img.values();
    let buf = image::RgbaImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let px = |c: usize| (v[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgba([px(0), px(1), px(2), px(3)])
    });
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = LatentGrid::from_vec(
            (3, 2, 2),
            (0..12).map(|i| (i * 20) as f32 / 255.0).collect(),
            SpaceTag::Pixel,
        )
        .unwrap();
        save_png(&p, &img).unwrap();
        assert_eq!(load_rgb(&p).unwrap(), img);
    }

    #[test]
    fn depth_png16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let d = DepthMap::new(Array2::from_shape_fn((3, 4), |(y, x)| {
            (y * 4 + x) as f32 / 11.0
        }))
        .unwrap();
        save_depth_png(&p, &d).unwrap();
        let back = load_depth(&p).unwrap();
        let err = (back.values() - d.values())
            .mapv(f32::abs)
            .fold(0.0f32, |a, &b| a.max(b));
        assert!(err <= 0.5 / 65535.0 + 1e-7);
    }

    #[test]
    fn npy_depth_is_normalised_when_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.npy");
        let raw = ndarray::array![[2.0f32, 4.0], [6.0, 10.0]];
        ndarray_npy::write_npy(&p, &raw).unwrap();
        let d = load_depth(&p).unwrap();
        assert_eq!(d.values(), &ndarray::array![[0.0f32, 0.25], [0.5, 1.0]]);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_rgb("/no/such.png"), Err(Error::Io { .. })));
    }
}
