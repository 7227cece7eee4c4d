//! Resampling, padding and morphology helpers shared by compositing and metrics.

use ndarray::{Array2, Array3};

use crate::diffusion::LatentGrid;

/// Bilinear sample of a single plane at continuous pixel coordinates
/// (pixel centres at integers), clamping to the edge.
pub(crate) fn bilinear(plane: &[f32], w: usize, h: usize, x: f64, y: f64) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    if fx == 0.0 && fy == 0.0 {
        return plane[y0 * w + x0];
    }
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resize of every channel (align-corners = false).
pub fn resize_bilinear(img: &LatentGrid, new_h: usize, new_w: usize) -> LatentGrid {
    let (c, h, w) = img.shape();
    if (h, w) == (new_h, new_w) {
        return img.clone();
    }
    let src = img.as_slice();
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    let mut out = Array3::<f32>::zeros((c, new_h, new_w));
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..new_h {
            let fy = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..new_w {
                let fx = (x as f64 + 0.5) * sx - 0.5;
                out[[ch, y, x]] = bilinear(plane, w, h, fx, fy);
            }
        }
    }
    LatentGrid::from_finite(out, img.space())
}

pub fn resize_plane(plane: &Array2<f32>, new_h: usize, new_w: usize) -> Array2<f32> {
    let (h, w) = plane.dim();
    if (h, w) == (new_h, new_w) {
        return plane.clone();
    }
    let src = plane.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    Array2::from_shape_fn((new_h, new_w), |(y, x)| {
        bilinear(
            src,
            w,
            h,
            (x as f64 + 0.5) * sx - 0.5,
            (y as f64 + 0.5) * sy - 0.5,
        )
    })
}

/// Mirror index into `0..n` without repeating the edge sample.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Rounds `n` up to a multiple of `factor`.
pub fn padded_len(n: usize, factor: usize) -> usize {
    n.div_ceil(factor) * factor
}

/// Reflect-pads the bottom/right edges so both dims are multiples of `factor`.
pub fn pad_reflect(img: &LatentGrid, factor: usize) -> LatentGrid {
    let (c, h, w) = img.shape();
    let (ph, pw) = (padded_len(h, factor), padded_len(w, factor));
    if (ph, pw) == (h, w) {
        return img.clone();
    }
    let v = img.values();
    let out = Array3::from_shape_fn((c, ph, pw), |(ch, y, x)| {
        v[[
            ch,
            reflect_index(y as isize, h),
            reflect_index(x as isize, w),
        ]]
    });
    LatentGrid::from_finite(out, img.space())
}

pub fn pad_reflect_plane<T: Copy>(plane: &Array2<T>, factor: usize) -> Array2<T> {
    let (h, w) = plane.dim();
    let (ph, pw) = (padded_len(h, factor), padded_len(w, factor));
    Array2::from_shape_fn((ph, pw), |(y, x)| {
        plane[[reflect_index(y as isize, h), reflect_index(x as isize, w)]]
    })
}

/// Top-left `height × width` crop of every channel.
pub fn crop(img: &LatentGrid, x: usize, y: usize, width: usize, height: usize) -> LatentGrid {
    let v = img.values();
    let out = Array3::from_shape_fn((img.channels(), height, width), |(c, r, col)| {
        v[[c, y + r, x + col]]
    });
    LatentGrid::from_finite(out, img.space())
}

pub fn crop_plane<T: Copy>(
    plane: &Array2<T>,
    x: usize,
    y: usize,
    width: usize,
    height: usize,
) -> Array2<T> {
    Array2::from_shape_fn((height, width), |(r, c)| plane[[y + r, x + c]])
}

/// Binary dilation with a `(2r+1)²` square structuring element.
pub fn dilate_square(mask: &Array2<u8>, radius: usize) -> Array2<u8> {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let mut rows = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            rows[[y, x]] = u8::from((lo..=hi).any(|i| mask[[y, i]] != 0));
        }
    }
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        for x in 0..w {
            out[[y, x]] = u8::from((lo..=hi).any(|i| rows[[i, x]] != 0));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
    }

    #[test]
    fn dilation_grows_single_pixel_to_square() {
        let mut m = Array2::<u8>::zeros((9, 9));
        m[[4, 4]] = 1;
        let d = dilate_square(&m, 2);
        assert_eq!(d.iter().filter(|&&v| v == 1).count(), 25);
        assert_eq!(d[[2, 2]], 1);
        assert_eq!(d[[1, 4]], 0);
    }
}
