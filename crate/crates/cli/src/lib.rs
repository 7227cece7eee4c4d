//! Command-line front end and HTTP service.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use objinsert_core::backends::{BackendProfile, PROFILE_ENV};
use objinsert_core::conditioning::{Captioner, VlmConfig};
use objinsert_core::harness::{AssetRegistry, BenchmarkManifest, Pipeline};
use objinsert_core::Error;

pub mod commands;
pub mod serve;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
/// Benchmark finished but some pairs failed.
pub const EXIT_PARTIAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "objinsert", version, about = "Insert rendered objects into photographs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one insertion and write the image with its metadata.
    Generate(commands::GenerateArgs),
    /// Run every pair of a manifest; resumes from existing records.
    Benchmark(commands::BenchmarkArgs),
    /// Start the HTTP service.
    Serve(serve::ServeArgs),
    /// Print the backend's layer catalog.
    Catalog(commands::CatalogArgs),
    /// Serve the toy model set over the worker protocol on stdin/stdout.
    Worker(commands::WorkerArgs),
    /// Write a small synthetic asset set with a manifest.
    Fixtures(commands::FixturesArgs),
}

/// Options shared by commands that build a pipeline.
#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// `toy`, `toy:seed=..,scale=..,refiner=..`, or a backend config path.
    #[arg(long, env = PROFILE_ENV, default_value = "toy")]
    pub backend_profile: String,
    /// Captioning client config (JSON); template prompts when absent.
    #[arg(long)]
    pub vlm_config: Option<PathBuf>,
}

impl PipelineArgs {
    pub fn profile(&self) -> Result<BackendProfile, Error> {
        self.backend_profile.parse()
    }

    pub fn captioner(&self) -> Result<Captioner, Error> {
        let Some(path) = &self.vlm_config else {
            return Ok(Captioner::new(None));
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::validation("vlm_config", format!("{}: {e}", path.display())))?;
        let cfg: VlmConfig = serde_json::from_str(&text)
            .map_err(|e| Error::validation("vlm_config", e.to_string()))?;
        Ok(Captioner::new(Some(cfg.build()?)))
    }

    pub fn pipeline(&self, registry: AssetRegistry) -> Result<Pipeline, Error> {
        Ok(Pipeline::new(
            Arc::new(registry),
            Arc::new(self.captioner()?),
            self.profile()?,
        ))
    }
}

pub fn load_registry(manifest: Option<&Path>) -> Result<AssetRegistry, Error> {
    match manifest {
        Some(p) => {
            let m = BenchmarkManifest::load(p)?;
            Ok(AssetRegistry::from_manifest(&m))
        }
        None => Ok(AssetRegistry::default()),
    }
}

/// CLI flag for a request field path.
pub fn flag_for_field(field: &str) -> String {
    let flag = match field {
        "injection.tau_f" => "tau-f",
        "injection.tau_q" => "tau-q",
        "injection.tau_k" => "tau-k",
        "placement" | "placement.scale" => "scale",
        "placement.x" => "x",
        "placement.y" => "y",
        "placement.rotation_deg" => "rotation",
        "render" | "render.rgba" => "render",
        "render.depth" => "render-depth",
        "render.view_tag" => "view-tag",
        "controls.guidance" => "guidance",
        "controls.content_weight" => "content-weight",
        "controls.style_weight" => "style-weight",
        "controls.style_start_fraction" => "style-start",
        "controls.dilation_radius" => "dilation",
        other => return format!("--{}", other.rsplit('.').next().unwrap_or(other).replace('_', "-")),
    };
    format!("--{flag}")
}

/// Exit code and message for an error.
pub fn report_error(e: &Error) -> (i32, String) {
    if e.is_validation() {
        let msg = match e.field() {
            Some(f) => format!("error: {}: {e}", flag_for_field(f)),
            None => format!("error: {e}"),
        };
        (EXIT_VALIDATION, msg)
    } else {
        (EXIT_BACKEND, format!("error: {e}"))
    }
}

pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Benchmark(a) => commands::benchmark(&a),
        Command::Serve(a) => serve::serve(&a),
        Command::Catalog(a) => commands::catalog(&a),
        Command::Worker(a) => commands::worker(&a),
        Command::Fixtures(a) => commands::fixtures(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let (code, msg) = report_error(&e);
            eprintln!("{msg}");
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fields_map_to_flags() {
        assert_eq!(flag_for_field("injection.tau_q"), "--tau-q");
        assert_eq!(flag_for_field("background"), "--background");
        assert_eq!(flag_for_field("backend_profile"), "--backend-profile");
        assert_eq!(flag_for_field("render.depth"), "--render-depth");
    }

    #[test]
    fn validation_exits_2_backend_exits_3() {
        let (code, msg) = report_error(&Error::validation("injection.tau_f", "bad"));
        assert_eq!(code, EXIT_VALIDATION);
        assert!(msg.contains("--tau-f"));
        let e = Error::Backend(objinsert_core::BackendError::Unavailable("down".into()));
        assert_eq!(report_error(&e).0, EXIT_BACKEND);
    }
}
