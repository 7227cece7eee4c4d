//! Deterministic CPU backends for tests, benchmarks and the `toy` profile.
//!
//! The toy denoiser is a seeded linear map of `(z_t, t)` routed through two
//! spatial taps and two attention taps, so feature injection has a measurable
//! effect while everything stays exactly reproducible. The predicted noise is
//! squashed through `tanh` so inversion stays bounded for every seed.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::{
    ConditioningSet, Denoiser, DepthEstimator, FeatureArray, FeatureBundle, ImageEmbedder,
    LayerCatalog, LayerKind, LayerSpec, PerceptualBackbone, Prediction, Vae,
};
use crate::compositing::{resize_bilinear, resize_plane, DepthMap};
use crate::diffusion::{LatentGrid, PixelImage, SpaceTag};
use crate::error::BackendError;
use crate::par::{self, Exec};

pub const SPATIAL_LAYERS: [&str; 2] = ["up.0.resnets.0", "up.0.resnets.1"];
pub const ATTENTION_LAYERS: [&str; 2] = ["up.attn.0", "up.attn.1"];
const ATTN_DIM: usize = 8;
const RANK: usize = 4;
const GAIN: f32 = 0.5;

/// Independent ChaCha stream for `(seed, label)`.
pub fn seeded_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

fn normals(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    (0..n)
        .map(|_| rng.sample::<f32, _>(StandardNormal) * std)
        .collect()
}

/// `diag ⊙ x + U (Vᵀ x)`.
struct LowRankMix {
    diag: Vec<f32>,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl LowRankMix {
    fn new(rng: &mut ChaCha8Rng, c: usize) -> Self {
        let diag = (0..c).map(|_| 0.7 + 0.3 * rng.random::<f32>()).collect();
        let std = 1.0 / (c as f32).sqrt();
        Self {
            diag,
            u: normals(rng, c * RANK, std),
            v: normals(rng, c * RANK, std),
        }
    }

    fn apply(&self, x: &[f32], out: &mut [f32]) {
        let c = x.len();
        let mut proj = [0f32; RANK];
        for (j, &xj) in x.iter().enumerate() {
            for (r, p) in proj.iter_mut().enumerate() {
                *p += self.v[j * RANK + r] * xj;
            }
        }
        for i in 0..c {
            let mut acc = self.diag[i] * x[i];
            for (r, p) in proj.iter().enumerate() {
                acc += self.u[i * RANK + r] * p;
            }
            out[i] = acc;
        }
    }
}

/// Query/key projections of one attention tap and their read-out.
struct AttentionTap {
    to_q: Vec<f32>,
    to_k: Vec<f32>,
    from_q: Vec<f32>,
    from_k: Vec<f32>,
}

impl AttentionTap {
    fn new(rng: &mut ChaCha8Rng, c: usize) -> Self {
        let down = 1.0 / (c as f32).sqrt();
        let up = 0.5 / (ATTN_DIM as f32).sqrt();
        Self {
            to_q: normals(rng, ATTN_DIM * c, down),
            to_k: normals(rng, ATTN_DIM * c, down),
            from_q: normals(rng, c * ATTN_DIM, up),
            from_k: normals(rng, c * ATTN_DIM, up),
        }
    }
}

fn project(weights: &[f32], x: &[f32], out: &mut [f32]) {
    let n_in = x.len();
    for (o, row) in out.iter_mut().zip(weights.chunks(n_in)) {
        *o = row.iter().zip(x).map(|(w, v)| w * v).sum();
    }
}

/// Seeded linear toy denoiser for a fixed latent shape.
pub struct ToyDenoiser {
    seed: u64,
    shape: (usize, usize, usize),
    catalog: LayerCatalog,
    exec: Exec,
    mix1: LowRankMix,
    mix2: LowRankMix,
    out_diag: Vec<f32>,
    taps: [AttentionTap; 2],
    time_dir: Vec<f32>,
    depth_dir: Vec<f32>,
    refiner: bool,
}

/// Builds the toy denoiser for `latent_shape = (channels, height, width)`.
pub fn toy_backend(seed: u64, latent_shape: (usize, usize, usize)) -> ToyDenoiser {
    ToyDenoiser::new(seed, latent_shape)
}

impl ToyDenoiser {
    pub fn new(seed: u64, shape: (usize, usize, usize)) -> Self {
        let (c, h, w) = shape;
        let mut rng = seeded_rng(seed, "toy-denoiser");
        let mix1 = LowRankMix::new(&mut rng, c);
        let mix2 = LowRankMix::new(&mut rng, c);
        let out_diag = (0..c).map(|_| 0.5 + 0.5 * rng.random::<f32>()).collect();
        let taps = [
            AttentionTap::new(&mut rng, c),
            AttentionTap::new(&mut rng, c),
        ];
        let time_dir = normals(&mut rng, c, 0.05);
        let depth_dir = normals(&mut rng, c, 0.3);
        let mut layers: Vec<LayerSpec> = SPATIAL_LAYERS
            .iter()
            .map(|id| LayerSpec {
                id: id.to_string(),
                kind: LayerKind::Spatial,
                shape: vec![c, h, w],
            })
            .collect();
        layers.extend(ATTENTION_LAYERS.iter().map(|id| LayerSpec {
            id: id.to_string(),
            kind: LayerKind::Attention,
            shape: vec![h * w, ATTN_DIM],
        }));
        Self {
            seed,
            shape,
            catalog: LayerCatalog { layers },
            exec: Exec::default(),
            mix1,
            mix2,
            out_diag,
            taps,
            time_dir,
            depth_dir,
            refiner: false,
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    /// Enables the toy refiner hook (a mild deterministic shrink).
    pub fn with_refiner(mut self, enabled: bool) -> Self {
        self.refiner = enabled;
        self
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    fn prompt_vector(&self, text: &str) -> Vec<f32> {
        let mut rng = seeded_rng(self.seed, &format!("prompt:{text}"));
        normals(&mut rng, self.shape.0, 0.5)
    }

    fn embedding_vector(&self, embedding: &[f32], weight: f64) -> Vec<f32> {
        let c = self.shape.0;
        let mut rng = seeded_rng(self.seed, &format!("adapter:{}", embedding.len()));
        let scale = weight as f32 / (embedding.len().max(1) as f32).sqrt();
        let proj = normals(&mut rng, c * embedding.len(), 1.0);
        (0..c)
            .map(|i| {
                let row = &proj[i * embedding.len()..(i + 1) * embedding.len()];
                scale * row.iter().zip(embedding).map(|(a, b)| a * b).sum::<f32>()
            })
            .collect()
    }
}

impl Denoiser for ToyDenoiser {
    fn id(&self) -> String {
        format!("toy-denoiser(seed={})", self.seed)
    }

    fn catalog(&self) -> &LayerCatalog {
        &self.catalog
    }

    fn predict(
        &self,
        z: &LatentGrid,
        t: usize,
        cond: &ConditioningSet,
        overrides: Option<&FeatureBundle>,
    ) -> Result<Prediction, BackendError> {
        if z.shape() != self.shape || z.space() != SpaceTag::Latent {
            return Err(BackendError::Contract(format!(
                "toy denoiser built for latent {:?}, got {:?} {:?}",
                self.shape,
                z.space(),
                z.shape()
            )));
        }
        let empty = FeatureBundle::default();
        let overrides = overrides.unwrap_or(&empty);
        overrides.check_against(&self.catalog)?;

        let (c, h, w) = self.shape;
        let n = h * w;
        let guidance = cond.guidance_weight as f32;
        let mut cond_vec = self.prompt_vector(&cond.prompt_text);
        if let Some(p) = &cond.image_prompt {
            for (a, b) in cond_vec
                .iter_mut()
                .zip(self.embedding_vector(&p.embedding.vector, p.weight))
            {
                *a += b;
            }
        }
        let depth = cond.depth.as_ref().map(|d| resize_plane(d.values(), h, w));
        let t_scale = t as f32 / 50.0;

        let f0_over = overrides.spatial.get(SPATIAL_LAYERS[0]);
        let f1_over = overrides.spatial.get(SPATIAL_LAYERS[1]);
        let q_over: Vec<_> = ATTENTION_LAYERS
            .iter()
            .map(|id| overrides.queries.get(*id))
            .collect();
        let k_over: Vec<_> = ATTENTION_LAYERS
            .iter()
            .map(|id| overrides.keys.get(*id))
            .collect();

        // per position: [eps | f0 | f1 | q0 | k0 | q1 | k1]
        let row_len = 3 * c + 4 * ATTN_DIM;
        let mut rows = vec![0f32; n * row_len];
        let zs = z.as_slice();
        par::for_each_row(self.exec, &mut rows, row_len, |pos, row| {
            let (eps, rest) = row.split_at_mut(c);
            let (f0, rest) = rest.split_at_mut(c);
            let (f1, attn) = rest.split_at_mut(c);
            let col: Vec<f32> = (0..c).map(|ch| zs[ch * n + pos]).collect();

            match f0_over {
                Some(o) => (0..c).for_each(|ch| f0[ch] = o.data[ch * n + pos]),
                None => {
                    self.mix1.apply(&col, f0);
                    let d = depth.as_ref().map_or(0.0, |d| d[[pos / w, pos % w]]);
                    for ch in 0..c {
                        f0[ch] += guidance * (cond_vec[ch] + d * self.depth_dir[ch]);
                    }
                }
            }
            match f1_over {
                Some(o) => (0..c).for_each(|ch| f1[ch] = o.data[ch * n + pos]),
                None => self.mix2.apply(f0, f1),
            }
            for ch in 0..c {
                eps[ch] = self.out_diag[ch] * f1[ch];
            }
            for (l, tap) in self.taps.iter().enumerate() {
                let (q, k) = attn[2 * l * ATTN_DIM..(2 * l + 2) * ATTN_DIM].split_at_mut(ATTN_DIM);
                match q_over[l] {
                    Some(o) => q.copy_from_slice(&o.data[pos * ATTN_DIM..(pos + 1) * ATTN_DIM]),
                    None => project(&tap.to_q, f1, q),
                }
                match k_over[l] {
                    Some(o) => k.copy_from_slice(&o.data[pos * ATTN_DIM..(pos + 1) * ATTN_DIM]),
                    None => project(&tap.to_k, f1, k),
                }
                for ch in 0..c {
                    let uq = &tap.from_q[ch * ATTN_DIM..(ch + 1) * ATTN_DIM];
                    let uk = &tap.from_k[ch * ATTN_DIM..(ch + 1) * ATTN_DIM];
                    let read: f32 = uq.iter().zip(q.iter()).map(|(a, b)| a * b).sum::<f32>()
                        + uk.iter().zip(k.iter()).map(|(a, b)| a * b).sum::<f32>();
                    eps[ch] += read;
                }
            }
            for ch in 0..c {
                eps[ch] = (GAIN * eps[ch]).tanh() + t_scale * self.time_dir[ch];
            }
        });

        let gather = |offset: usize, width: usize, channel_major: bool| -> Vec<f32> {
            let mut out = vec![0f32; n * width];
            for pos in 0..n {
                let src = &rows[pos * row_len + offset..pos * row_len + offset + width];
                for (j, &v) in src.iter().enumerate() {
                    if channel_major {
                        out[j * n + pos] = v;
                    } else {
                        out[pos * width + j] = v;
                    }
                }
            }
            out
        };
        let eps = LatentGrid::from_vec(self.shape, gather(0, c, true), SpaceTag::Latent)
            .map_err(|e| BackendError::Contract(e.to_string()))?;
        let mut captured = FeatureBundle::new(t);
        for (i, id) in SPATIAL_LAYERS.iter().enumerate() {
            captured.spatial.insert(
                id.to_string(),
                FeatureArray::new(vec![c, h, w], gather(c + i * c, c, true))?,
            );
        }
        for (l, id) in ATTENTION_LAYERS.iter().enumerate() {
            let base = 3 * c + 2 * l * ATTN_DIM;
            captured.queries.insert(
                id.to_string(),
                FeatureArray::new(vec![n, ATTN_DIM], gather(base, ATTN_DIM, false))?,
            );
            captured.keys.insert(
                id.to_string(),
                FeatureArray::new(vec![n, ATTN_DIM], gather(base + ATTN_DIM, ATTN_DIM, false))?,
            );
        }
        Ok(Prediction { eps, captured })
    }

    fn refine(
        &self,
        z: &LatentGrid,
        remaining_fraction: f64,
        _cond: &ConditioningSet,
    ) -> Option<Result<LatentGrid, BackendError>> {
        if !self.refiner {
            return None;
        }
        Some(
            z.scale(1.0 - 0.01 * remaining_fraction)
                .map_err(|e| BackendError::Contract(e.to_string())),
        )
    }
}

/// Lossless space-to-depth "VAE": each `s × s` pixel block becomes `3·s²`
/// latent channels, so `decode(encode(I)) == I` exactly.
#[derive(Debug, Clone, Copy)]
pub struct ToyVae {
    scale: usize,
}

impl ToyVae {
    pub fn new(scale: usize) -> Self {
        assert!(scale >= 1, "scale factor must be at least 1");
        Self { scale }
    }
}

impl Vae for ToyVae {
    fn id(&self) -> String {
        format!("toy-vae(s={})", self.scale)
    }

    fn encode(&self, image: &PixelImage) -> Result<LatentGrid, BackendError> {
        let (c, h, w) = image.shape();
        let s = self.scale;
        if c != 3 || image.space() != SpaceTag::Pixel {
            return Err(BackendError::Contract(
                "toy VAE encodes RGB pixel images".into(),
            ));
        }
        if h % s != 0 || w % s != 0 {
            return Err(BackendError::Contract(format!(
                "image {w}x{h} not divisible by scale factor {s}"
            )));
        }
        let v = image.values();
        let out = Array3::from_shape_fn((3 * s * s, h / s, w / s), |(lc, y, x)| {
            let (ch, rem) = (lc / (s * s), lc % (s * s));
            v[[ch, y * s + rem / s, x * s + rem % s]]
        });
        Ok(LatentGrid::from_finite(out, SpaceTag::Latent))
    }

    fn decode(&self, latent: &LatentGrid) -> Result<PixelImage, BackendError> {
        let (lc, lh, lw) = latent.shape();
        let s = self.scale;
        if lc != 3 * s * s || latent.space() != SpaceTag::Latent {
            return Err(BackendError::Contract(format!(
                "toy VAE expects {} latent channels, got {lc}",
                3 * s * s
            )));
        }
        let v = latent.values();
        let out = Array3::from_shape_fn((3, lh * s, lw * s), |(ch, y, x)| {
            let lc = ch * s * s + (y % s) * s + x % s;
            v[[lc, y / s, x / s]].clamp(0.0, 1.0)
        });
        Ok(LatentGrid::from_finite(out, SpaceTag::Pixel))
    }

    fn scale_factor(&self) -> usize {
        self.scale
    }

    fn latent_channels(&self) -> usize {
        3 * self.scale * self.scale
    }

    fn round_trip_bound(&self) -> f64 {
        0.0
    }
}

fn luminance(image: &PixelImage) -> Array2<f32> {
    let v = image.values();
    Array2::from_shape_fn((image.height(), image.width()), |(y, x)| {
        0.299 * v[[0, y, x]] + 0.587 * v[[1, y, x]] + 0.114 * v[[2, y, x]]
    })
}

fn box_blur3(plane: &Array2<f32>) -> Array2<f32> {
    let (h, w) = plane.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        let mut n = 0.0;
        for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                acc += plane[[yy, xx]];
                n += 1.0;
            }
        }
        acc / n
    })
}

/// Brighter is nearer: blurred luminance as relative depth.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyDepthEstimator;

impl DepthEstimator for ToyDepthEstimator {
    fn id(&self) -> String {
        "toy-luma-depth".into()
    }

    fn estimate(&self, image: &PixelImage) -> Result<DepthMap, BackendError> {
        let d = box_blur3(&luminance(image)).mapv(|v| v.clamp(0.0, 1.0));
        DepthMap::new(d).map_err(|e| BackendError::Contract(e.to_string()))
    }
}

fn sobel(plane: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
    let (h, w) = plane.dim();
    let at = |y: isize, x: isize| {
        plane[[
            y.clamp(0, h as isize - 1) as usize,
            x.clamp(0, w as isize - 1) as usize,
        ]]
    };
    let gx = Array2::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y as isize, x as isize);
        (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
            - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1))
    });
    let gy = Array2::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y as isize, x as isize);
        (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
            - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1))
    });
    (gx, gy)
}

/// Global colour/texture statistics; stands in for a CLIP image tower.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyClipEmbedder;

impl ImageEmbedder for ToyClipEmbedder {
    fn id(&self) -> String {
        "toy-clip".into()
    }

    fn embed(&self, image: &PixelImage) -> Result<Vec<f32>, BackendError> {
        let img = resize_bilinear(&rgb_only(image), 32, 32);
        let v = img.values();
        let n = 32.0 * 32.0;
        let mut out = Vec::with_capacity(64);
        for c in 0..3 {
            let plane = v.index_axis(ndarray::Axis(0), c);
            let mean = plane.sum() / n;
            let var = plane.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n;
            out.push(mean);
            out.push(var.sqrt());
            let mut hist = [0f32; 8];
            for &x in plane.iter() {
                hist[((x * 8.0) as usize).min(7)] += 1.0 / n;
            }
            out.extend(hist);
        }
        let (gx, gy) = sobel(&luminance(&img));
        let mut orient = [0f32; 8];
        for (&a, &b) in gx.iter().zip(gy.iter()) {
            let mag = (a * a + b * b).sqrt();
            if mag > 0.0 {
                let angle = b.atan2(a).rem_euclid(std::f32::consts::PI);
                orient[((angle / std::f32::consts::PI * 8.0) as usize).min(7)] += mag / n;
            }
        }
        out.extend(orient);
        Ok(out)
    }
}

/// Coarse spatial layout descriptor; stands in for a DINO ViT.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyDinoEmbedder;

impl ImageEmbedder for ToyDinoEmbedder {
    fn id(&self) -> String {
        "toy-dino".into()
    }

    fn embed(&self, image: &PixelImage) -> Result<Vec<f32>, BackendError> {
        let img = resize_bilinear(&rgb_only(image), 32, 32);
        let v = img.values();
        let (gx, gy) = sobel(&luminance(&img));
        let mut out = Vec::with_capacity(4 * 4 * 5);
        for cy in 0..4 {
            for cx in 0..4 {
                let mut acc = [0f32; 5];
                for y in cy * 8..cy * 8 + 8 {
                    for x in cx * 8..cx * 8 + 8 {
                        for c in 0..3 {
                            acc[c] += v[[c, y, x]] / 64.0;
                        }
                        acc[3] += gx[[y, x]].abs() / 64.0;
                        acc[4] += gy[[y, x]].abs() / 64.0;
                    }
                }
                out.extend(acc);
            }
        }
        out.push(0.1);
        Ok(out)
    }
}

fn rgb_only(image: &PixelImage) -> PixelImage {
    if image.channels() == 3 {
        return image.clone();
    }
    let v = image.values();
    let out = Array3::from_shape_fn((3, image.height(), image.width()), |(c, y, x)| v[[c, y, x]]);
    LatentGrid::from_finite(out, image.space())
}

/// Three-scale handcrafted pyramid (opponent colour + luminance gradients).
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyPerceptualBackbone;

impl PerceptualBackbone for ToyPerceptualBackbone {
    fn id(&self) -> String {
        "toy-pyramid".into()
    }

    fn features(&self, image: &PixelImage) -> Result<Vec<FeatureArray>, BackendError> {
        let rgb = rgb_only(image);
        let mut layers = Vec::with_capacity(3);
        for side in [64usize, 32, 16] {
            let img = resize_bilinear(&rgb, side, side);
            let v = img.values();
            let lum = luminance(&img);
            let (gx, gy) = sobel(&lum);
            let mut data = Vec::with_capacity(5 * side * side);
            let channel = |f: &dyn Fn(usize, usize) -> f32, data: &mut Vec<f32>| {
                for y in 0..side {
                    for x in 0..side {
                        data.push(f(y, x));
                    }
                }
            };
            channel(&|y, x| v[[0, y, x]] - v[[1, y, x]], &mut data);
            channel(
                &|y, x| 0.5 * (v[[0, y, x]] + v[[1, y, x]]) - v[[2, y, x]],
                &mut data,
            );
            channel(&|y, x| lum[[y, x]], &mut data);
            channel(&|y, x| gx[[y, x]], &mut data);
            channel(&|y, x| gy[[y, x]], &mut data);
            layers.push(FeatureArray::new(vec![5, side, side], data)?);
        }
        Ok(layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latent(shape: (usize, usize, usize), seed: u64) -> LatentGrid {
        let mut rng = seeded_rng(seed, "test-latent");
        let n = shape.0 * shape.1 * shape.2;
        LatentGrid::from_vec(shape, normals(&mut rng, n, 1.0), SpaceTag::Latent).unwrap()
    }

    #[test]
    fn same_seed_same_bits() {
        let shape = (12, 4, 4);
        let z = latent(shape, 1);
        let cond = ConditioningSet::new("a photo of a dog", None);
        let a = toy_backend(7, shape).predict(&z, 10, &cond, None).unwrap();
        let b = toy_backend(7, shape).predict(&z, 10, &cond, None).unwrap();
        assert_eq!(a.eps.to_le_bytes(), b.eps.to_le_bytes());
        assert_eq!(a.captured, b.captured);
    }

    #[test]
    fn prompt_changes_prediction() {
        let shape = (12, 4, 4);
        let z = latent(shape, 1);
        let be = toy_backend(7, shape);
        let a = be
            .predict(&z, 10, &ConditioningSet::new("a dog", None), None)
            .unwrap();
        let b = be
            .predict(&z, 10, &ConditioningSet::new("a cat", None), None)
            .unwrap();
        assert!(a.eps.max_abs_diff(&b.eps).unwrap() > 1e-3);
    }

    #[test]
    fn overrides_are_echoed_and_change_output() {
        let shape = (12, 4, 4);
        let be = toy_backend(3, shape);
        let cond = ConditioningSet::new("x", None);
        let source = be.predict(&latent(shape, 1), 5, &cond, None).unwrap();
        let z = latent(shape, 2);
        let plain = be.predict(&z, 5, &cond, None).unwrap();
        let mut over = FeatureBundle::new(5);
        over.queries.insert(
            ATTENTION_LAYERS[0].into(),
            source.captured.queries[ATTENTION_LAYERS[0]].clone(),
        );
        over.spatial.insert(
            SPATIAL_LAYERS[1].into(),
            source.captured.spatial[SPATIAL_LAYERS[1]].clone(),
        );
        let injected = be.predict(&z, 5, &cond, Some(&over)).unwrap();
        injected.captured.echoes(&over).unwrap();
        assert!(plain.eps.max_abs_diff(&injected.eps).unwrap() > 1e-4);
        // keys of the same layer were not overridden and follow the injected f1
        assert_eq!(
            injected.captured.keys[ATTENTION_LAYERS[0]],
            source.captured.keys[ATTENTION_LAYERS[0]]
        );
    }

    #[test]
    fn wrong_override_shape_rejected() {
        let shape = (12, 4, 4);
        let be = toy_backend(3, shape);
        let mut over = FeatureBundle::new(5);
        over.spatial.insert(
            SPATIAL_LAYERS[0].into(),
            FeatureArray::new(vec![2], vec![0.0, 0.0]).unwrap(),
        );
        let err = be
            .predict(
                &latent(shape, 1),
                5,
                &ConditioningSet::new("x", None),
                Some(&over),
            )
            .unwrap_err();
        assert!(matches!(err, BackendError::Contract(_)));
    }

    #[test]
    fn sequential_and_parallel_predictions_match() {
        let shape = (48, 16, 16);
        let z = latent(shape, 9);
        let cond = ConditioningSet::new("x", None);
        let a = toy_backend(1, shape)
            .with_exec(Exec::Sequential)
            .predict(&z, 3, &cond, None)
            .unwrap();
        let b = toy_backend(1, shape)
            .with_exec(Exec::Parallel)
            .predict(&z, 3, &cond, None)
            .unwrap();
        assert_eq!(a.eps, b.eps);
    }

    #[test]
    fn toy_vae_round_trip_is_exact() {
        let mut rng = seeded_rng(0, "img");
        let data: Vec<f32> = (0..3 * 16 * 24).map(|_| rng.random::<f32>()).collect();
        let img = LatentGrid::from_vec((3, 16, 24), data, SpaceTag::Pixel).unwrap();
        let vae = ToyVae::new(8);
        let z = vae.encode(&img).unwrap();
        assert_eq!(z.shape(), (192, 2, 3));
        assert_eq!(vae.decode(&z).unwrap(), img);
    }
}
