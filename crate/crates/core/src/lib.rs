//! Training-free insertion of a posed, rendered object into a background
//! photograph by dual-branch diffusion denoising with feature injection,
//! depth conditioning, content/style embedding routing and noise blending.
//!
//! Layout:
//!
//! - [`diffusion`]: noise schedule, DDIM noising/inversion/sampling.
//! - [`backends`]: model contracts, deterministic toy models, worker adapter.
//! - [`compositing`]: paste, masks, depth condition.
//! - [`engine`]: the controllable generation loop.
//! - [`conditioning`]: captions and image embeddings.
//! - [`metrics`]: CLIP/DINO similarity, LPIPS, D-RMSE.
//! - [`harness`]: requests, manifests, benchmark runner.
//! - [`par`]: data-parallel kernels with a sequential fallback.

pub mod backends;
pub mod compositing;
pub mod conditioning;
pub mod diffusion;
pub mod engine;
pub mod error;
pub mod harness;
pub mod imageio;
pub mod metrics;
pub mod par;

pub use error::{BackendError, Branch, Error, Result};
