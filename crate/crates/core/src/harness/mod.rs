//! Request handling shared by the CLI, the HTTP service and the benchmark runner.

pub mod fixtures;
pub mod manifest;
pub mod pipeline;
pub mod registry;
pub mod request;
pub mod runner;

pub use manifest::{
    auto_placement, BenchmarkConfig, BenchmarkManifest, BenchmarkUnit, Pairs, Variant,
};
pub use pipeline::{
    mask_image, Generation, OutputFiles, Pipeline, ResolvedRequest, PIPELINE_VERSION,
};
pub use registry::{AssetListing, AssetRegistry};
pub use request::{
    knob_ranges, AssetRef, CompositeRequest, Controls, InjectionSpec, KnobRange, RenderRef,
};
pub use runner::{run_benchmark, RunOptions, RunOutcome, RunRecord, PASTE_METHOD};
