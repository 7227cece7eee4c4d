use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use objinsert_core::backends::worker::{serve_worker, ToyWorker};
use objinsert_core::compositing::{Placement, DEFAULT_DILATION_RADIUS};
use objinsert_core::engine::{BackgroundDepthMode, Branch1Mode, DEFAULT_GUIDANCE, DEFAULT_TAU_F, DEFAULT_TAU_K, DEFAULT_TAU_Q};
use objinsert_core::conditioning::{DEFAULT_CONTENT_WEIGHT, DEFAULT_STYLE_WEIGHT};
use objinsert_core::harness::{
    run_benchmark, AssetRef, BenchmarkManifest, CompositeRequest, Controls, InjectionSpec, RenderRef, RunOptions,
};
use objinsert_core::par::Exec;
use objinsert_core::{Error, Result};
use serde_json::json;

use crate::{PipelineArgs, EXIT_PARTIAL};

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Object photo for the content embedding; the render is used when absent.
    #[arg(long)]
    pub object: Option<PathBuf>,
    #[arg(long)]
    pub background: PathBuf,
    /// Rendered view, RGBA PNG.
    #[arg(long)]
    pub render: PathBuf,
    /// Depth of the rendered view: 16-bit PNG or .npy.
    #[arg(long)]
    pub render_depth: PathBuf,
    #[arg(long, default_value = "custom")]
    pub view_tag: String,
    #[arg(long, allow_hyphen_values = true)]
    pub x: i64,
    #[arg(long, allow_hyphen_values = true)]
    pub y: i64,
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub rotation: f64,
    #[arg(long)]
    pub prompt: Option<String>,
    /// Noun used by the template prompt.
    #[arg(long)]
    pub object_tag: Option<String>,
    #[arg(long, default_value_t = DEFAULT_TAU_F)]
    pub tau_f: f64,
    #[arg(long, default_value_t = DEFAULT_TAU_Q)]
    pub tau_q: f64,
    #[arg(long, default_value_t = DEFAULT_TAU_K)]
    pub tau_k: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_GUIDANCE)]
    pub guidance: f64,
    #[arg(long, default_value_t = DEFAULT_CONTENT_WEIGHT)]
    pub content_weight: f64,
    #[arg(long, default_value_t = DEFAULT_STYLE_WEIGHT)]
    pub style_weight: f64,
    /// Fraction of the loop, counted from the start, after which the style
    /// embedding is applied.
    #[arg(long)]
    pub style_start: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_DILATION_RADIUS)]
    pub dilation: usize,
    #[arg(long)]
    pub no_depth: bool,
    #[arg(long)]
    pub no_content: bool,
    #[arg(long)]
    pub no_style: bool,
    #[arg(long)]
    pub no_blend: bool,
    #[arg(long)]
    pub no_refiner: bool,
    #[arg(long)]
    pub simple_prompt: bool,
    /// Use the far plane instead of a depth estimate behind the object.
    #[arg(long)]
    pub constant_far_depth: bool,
    /// Run the reconstruction branch freely instead of replaying the inversion.
    #[arg(long)]
    pub free_branch1: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

impl GenerateArgs {
    pub fn request(&self) -> CompositeRequest {
        let mut placement = Placement::new(self.x, self.y, self.scale);
        placement.rotation_deg = self.rotation;
        CompositeRequest {
            object: self.object.clone().map(|path| AssetRef::Path { path }),
            background: AssetRef::Path {
                path: self.background.clone(),
            },
            render: RenderRef::Files {
                rgba: self.render.clone(),
                depth: self.render_depth.clone(),
                view_tag: self.view_tag.clone(),
            },
            placement,
            prompt: self.prompt.clone(),
            object_tag: self.object_tag.clone(),
            injection: InjectionSpec {
                tau_f: self.tau_f,
                tau_q: self.tau_q,
                tau_k: self.tau_k,
                ..InjectionSpec::default()
            },
            controls: Controls {
                guidance: self.guidance,
                content_weight: self.content_weight,
                style_weight: self.style_weight,
                style_start_fraction: self.style_start,
                use_depth: !self.no_depth,
                use_content: !self.no_content,
                use_style: !self.no_style,
                noise_blending: !self.no_blend,
                simple_prompt: self.simple_prompt,
                background_depth: if self.constant_far_depth {
                    BackgroundDepthMode::ConstantFar
                } else {
                    BackgroundDepthMode::Estimator
                },
                dilation_radius: self.dilation,
                branch1_mode: if self.free_branch1 { Branch1Mode::Free } else { Branch1Mode::Replay },
                refiner: !self.no_refiner,
                ..Controls::default()
            },
            seed: self.seed,
            backend_profile: Some(self.pipeline.backend_profile.clone()),
        }
    }
}

pub fn generate(args: &GenerateArgs) -> Result<i32> {
    let pipeline = args.pipeline.pipeline(Default::default())?;
    let generation = pipeline.generate(&args.request())?;
    let files = generation.write_outputs(&args.out)?;
    println!("{}", serde_json::to_string_pretty(&files)?);
    Ok(0)
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Run directory; records/, outputs/ and the reports go here.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Execute at most this many pending units.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Process pairs one at a time.
    #[arg(long)]
    pub sequential: bool,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

pub fn benchmark(args: &BenchmarkArgs) -> Result<i32> {
    let manifest = BenchmarkManifest::load(&args.manifest)?;
    manifest.validate()?;
    let pipeline = args.pipeline.pipeline(objinsert_core::harness::AssetRegistry::from_manifest(&manifest))?;
    let opts = RunOptions {
        exec: if args.sequential { Exec::Sequential } else { Exec::default() },
        limit: args.limit,
    };
    let outcome = run_benchmark(&manifest, &pipeline, &args.run_dir, opts)?;
    print!("{}", outcome.report.to_table());
    eprintln!(
        "executed {}, reused {}, pending {}, failed {}",
        outcome.executed.len(),
        outcome.skipped.len(),
        outcome.pending.len(),
        outcome.report.failures.len()
    );
    for f in &outcome.report.failures {
        eprintln!("failed {}: {}", f.pair_id, f.error);
    }
    Ok(if outcome.report.failures.is_empty() { 0 } else { EXIT_PARTIAL })
}

#[derive(Debug, Args)]
pub struct CatalogArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

pub fn catalog(args: &CatalogArgs) -> Result<i32> {
    let profile = args.pipeline.profile()?;
    let (_, channels) = profile.geometry()?;
    let set = profile.instantiate((channels, 8, 8))?;
    let out = json!({
        "profile": set.profile,
        "denoiser": set.denoiser.id(),
        "vae": set.vae.id(),
        "catalog": set.denoiser.catalog(),
        "default_injection_layers": set.denoiser.default_injection_layers(),
        "configured_injection_layers": set.injection_layers,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(0)
}

#[derive(Debug, Args)]
pub struct WorkerArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
    #[arg(long)]
    pub refiner: bool,
}

pub fn worker(args: &WorkerArgs) -> Result<i32> {
    let mut w = ToyWorker::new(args.seed, args.scale, args.refiner);
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout();
    serve_worker(&mut w, stdin.lock(), &mut stdout).map_err(|e| Error::io("<stdio>", e))?;
    stdout.flush().map_err(|e| Error::io("<stdout>", e))?;
    Ok(0)
}

#[derive(Debug, Args)]
pub struct FixturesArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub objects: usize,
    #[arg(long, default_value_t = 1)]
    pub views: usize,
    #[arg(long, default_value_t = 2)]
    pub backgrounds: usize,
}

pub fn fixtures(args: &FixturesArgs) -> Result<i32> {
    objinsert_core::harness::fixtures::write_assets(&args.out, args.objects, args.views, args.backgrounds)?;
    println!("{}", args.out.join("manifest.json").display());
    Ok(0)
}
