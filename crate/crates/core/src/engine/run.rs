use serde::{Deserialize, Serialize};

use super::{
    apply_injection, noise_blend_parts, BackgroundDepthMode, Branch1Mode, EngineOptions,
    InjectionConfig, InjectionLog, InjectionStep,
};
use crate::backends::toy::seeded_rng;
use crate::backends::{BackendSet, ConditioningSet, Denoiser, DepthEstimator, ImageEmbedder, Vae};
use crate::compositing::{
    compose_depth, crop, pad_reflect, pad_reflect_plane, paste_with, BackgroundDepth, DepthMap,
    MaskGrid, PixelMask, Placement, RenderedObject,
};
use crate::conditioning::{embed, EmbeddingRole, ImageEmbedding, PromptSpec};
use crate::diffusion::{
    ddim_invert_with, ddim_step, LatentGrid, NoiseSchedule, PixelImage, SpaceTag,
};
use crate::error::{BackendError, Branch, Error, Result};

/// Pixel inputs of one insertion.
#[derive(Debug, Clone)]
pub struct EngineInput {
    /// Source of the content embedding; the render's RGB is used when absent.
    pub object_image: Option<PixelImage>,
    pub background: PixelImage,
    pub render: RenderedObject,
    pub placement: Placement,
    pub prompt: PromptSpec,
    pub seed: u64,
}

/// Model components the loop talks to.
#[derive(Clone, Copy)]
pub struct EngineBackends<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub vae: &'a dyn Vae,
    pub depth: Option<&'a dyn DepthEstimator>,
    pub adapter: Option<&'a dyn ImageEmbedder>,
    pub refiner_fraction: Option<f64>,
}

impl<'a> From<&'a BackendSet> for EngineBackends<'a> {
    fn from(b: &'a BackendSet) -> Self {
        Self {
            denoiser: b.denoiser.as_ref(),
            vae: b.vae.as_ref(),
            depth: b.depth.as_deref(),
            adapter: b.adapter.as_deref(),
            refiner_fraction: b.refiner_fraction,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenerationResult {
    /// Generated image at the background's size.
    pub image: PixelImage,
    pub final_latent: LatentGrid,
    pub injection_log: InjectionLog,
    pub seed: u64,
    /// Background with the render pasted in.
    pub coarse: PixelImage,
    /// Dilated pixel mask at the background's size.
    pub mask: PixelMask,
    pub depth: Option<DepthMap>,
    pub prompt: PromptSpec,
    pub summary: RunSummary,
}

/// Serializable facts about a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub latent_shape: (usize, usize, usize),
    pub padded_size: (usize, usize),
    pub content_embedding: Option<String>,
    pub style_embedding: Option<String>,
    pub depth_condition: bool,
    pub refined: bool,
    pub inversion_fingerprint: String,
}

/// State after the blend of one loop step.
pub struct StepTrace<'a> {
    pub t_prev: usize,
    pub latent: &'a LatentGrid,
    /// Background latent noised to `t_prev` with this step's draw.
    pub background: &'a LatentGrid,
    pub mask: &'a MaskGrid,
}

pub fn run_controllable_generation(
    input: &EngineInput,
    backends: EngineBackends<'_>,
    schedule: &NoiseSchedule,
    inj: &InjectionConfig,
    opts: &EngineOptions,
) -> Result<GenerationResult> {
    run_with_observer(input, backends, schedule, inj, opts, &mut |_| {})
}

fn step_err(t: usize, branch: Branch) -> impl FnOnce(BackendError) -> Error {
    move |source| Error::Step { t, branch, source }
}

fn optional_embedding(
    image: &PixelImage,
    role: EmbeddingRole,
    extractor: Option<&dyn ImageEmbedder>,
) -> Result<Option<ImageEmbedding>> {
    match embed(image, role, extractor) {
        Ok(e) => Ok(Some(e)),
        Err(Error::Backend(BackendError::Unavailable(msg))) => {
            log::warn!("{msg}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn rgb_of(render: &RenderedObject) -> PixelImage {
    let v = render.rgba().values();
    let rgb = ndarray::Array3::from_shape_fn((3, render.height(), render.width()), |(c, y, x)| {
        v[[c, y, x]]
    });
    LatentGrid::from_finite(rgb, SpaceTag::Pixel)
}

/// As [`run_controllable_generation`], calling `observer` after every
/// blended step.
pub fn run_with_observer(
    input: &EngineInput,
    backends: EngineBackends<'_>,
    schedule: &NoiseSchedule,
    inj: &InjectionConfig,
    opts: &EngineOptions,
    observer: &mut dyn FnMut(&StepTrace<'_>),
) -> Result<GenerationResult> {
    opts.validate()?;
    let EngineBackends {
        denoiser,
        vae,
        depth,
        adapter,
        ..
    } = backends;
    inj.validate(denoiser.catalog())?;
    let num_steps = schedule.num_steps();

    let pasted = paste_with(
        opts.exec,
        &input.render,
        &input.background,
        &input.placement,
        opts.dilation_radius,
    )?;
    let depth_map = if opts.use_depth {
        let source = match opts.background_depth {
            BackgroundDepthMode::Estimator => BackgroundDepth::Estimator(depth),
            BackgroundDepthMode::ConstantFar => BackgroundDepth::ConstantFar,
        };
        Some(compose_depth(
            &input.render,
            &input.background,
            &input.placement,
            source,
        )?)
    } else {
        None
    };

    let s = vae.scale_factor();
    let (h, w) = (input.background.height(), input.background.width());
    let coarse_p = pad_reflect(&pasted.coarse, s);
    let bg_p = pad_reflect(&input.background, s);
    let mask_p = PixelMask(pad_reflect_plane(&pasted.mask.0, s));
    let depth_p = depth_map
        .as_ref()
        .map(|d| DepthMap::new(pad_reflect_plane(d.values(), s)))
        .transpose()?;

    let z0_c = vae.encode(&coarse_p)?;
    let z0_bg = vae.encode(&bg_p)?;
    z0_c.ensure_compatible(&z0_bg)?;
    let mask = if opts.noise_blending {
        MaskGrid::new(mask_p, s, z0_c.channels())?
    } else {
        MaskGrid::full(z0_c.shape(), s)
    };
    if mask.latent().dim() != z0_c.shape() {
        return Err(Error::contract(format!(
            "VAE latent {:?} does not match mask grid {:?}",
            z0_c.shape(),
            mask.latent().dim()
        )));
    }

    let content = if opts.use_content {
        let obj = input
            .object_image
            .clone()
            .unwrap_or_else(|| rgb_of(&input.render));
        optional_embedding(&obj, EmbeddingRole::Content, adapter)?
    } else {
        None
    };
    let style = if opts.use_style {
        optional_embedding(&input.background, EmbeddingRole::Style, adapter)?
    } else {
        None
    };

    let base = ConditioningSet::new(input.prompt.text.clone(), depth_p);
    let trajectory = ddim_invert_with(&z0_c, denoiser, &base, schedule, opts.inversion())?;
    let mut cond_b1 = base.clone();
    if let Some(c) = &content {
        cond_b1 = cond_b1.with_image_prompt(c.clone(), opts.weights.content);
    }
    let cond_b2_plain = base.clone().with_guidance(opts.guidance);
    let cond_b2_style = match &style {
        Some(e) => cond_b2_plain
            .clone()
            .with_image_prompt(e.clone(), opts.weights.style),
        None => cond_b2_plain.clone(),
    };
    if cond_b1.style_embedding().is_some() || cond_b2_style.content_embedding().is_some() {
        return Err(Error::contract("embedding routed to the wrong branch"));
    }

    let mut rng = seeded_rng(input.seed, "noise-blend");
    let mut z_g = trajectory.terminal().clone();
    let mut z_c = z_g.clone();
    let mut log = InjectionLog {
        num_steps,
        steps: Vec::with_capacity(num_steps),
    };
    for t in (1..=num_steps).rev() {
        let z_c_t = match opts.branch1_mode {
            Branch1Mode::Replay => trajectory.latent(t),
            Branch1Mode::Free => &z_c,
        };
        let b1 = denoiser
            .predict(z_c_t, t, &cond_b1, None)
            .map_err(step_err(t, Branch::Reconstruction))?;
        let overrides = apply_injection(&b1.captured, t, inj, num_steps)?;
        let style_on = style.is_some() && opts.style_active(t, num_steps);
        let cond_b2 = if style_on {
            &cond_b2_style
        } else {
            &cond_b2_plain
        };
        let b2 = denoiser
            .predict(
                &z_g,
                t,
                cond_b2,
                (!overrides.is_empty()).then_some(&overrides),
            )
            .map_err(step_err(t, Branch::Generation))?;
        b2.captured.echoes(&overrides).map_err(|m| Error::Step {
            t,
            branch: Branch::Generation,
            source: BackendError::Contract(m),
        })?;
        log.steps
            .push(InjectionStep::from_overrides(&overrides, style_on));

        let stepped = ddim_step(&z_g, &b2.eps, t, t - 1, schedule)?;
        let (blended, bg_t) =
            noise_blend_parts(&stepped, &z0_bg, t - 1, &mask, schedule, &mut rng)?;
        z_g = blended;
        if opts.branch1_mode == Branch1Mode::Free {
            z_c = ddim_step(z_c_t, &b1.eps, t, t - 1, schedule)?;
        }
        observer(&StepTrace {
            t_prev: t - 1,
            latent: &z_g,
            background: &bg_t,
            mask: &mask,
        });
    }

    let mut refined = false;
    if let (true, Some(fraction)) = (opts.refiner, backends.refiner_fraction) {
        if let Some(r) = denoiser.refine(&z_g, fraction, &cond_b2_style) {
            let z = r.map_err(step_err(0, Branch::Refiner))?;
            z_g.ensure_compatible(&z)?;
            z_g = z.select(mask.latent_slice(), &z0_bg)?;
            refined = true;
        }
    }

    let decoded = vae.decode(&z_g)?;
    let image = crop(&decoded, 0, 0, w, h);
    Ok(GenerationResult {
        image,
        injection_log: log,
        seed: input.seed,
        coarse: pasted.coarse,
        mask: pasted.mask,
        depth: depth_map,
        prompt: input.prompt.clone(),
        summary: RunSummary {
            latent_shape: z_g.shape(),
            padded_size: (coarse_p.height(), coarse_p.width()),
            content_embedding: content.map(|e| e.extractor_id),
            style_embedding: style.map(|e| e.extractor_id),
            depth_condition: opts.use_depth,
            refined,
            inversion_fingerprint: trajectory.fingerprint().0.clone(),
        },
        final_latent: z_g,
    })
}
