use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use dashmap::DashMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PromptSource, PromptSpec};
use crate::diffusion::PixelImage;
use crate::error::BackendError;
use crate::imageio::encode_png;

pub const CAPTION_INSTRUCTION: &str =
    "Describe the main object in detail, including color, material, and distinctive features.";

/// Vision-language model that captions an image.
pub trait VlmClient: Send + Sync {
    fn describe(&self, image: &PixelImage, instruction: &str) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VlmMode {
    Http,
    Local,
}

/// `{"mode": "http"|"local", "endpoint": ..., "timeout_s": ...}`. For local
/// mode the endpoint is the program to run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VlmConfig {
    pub mode: VlmMode,
    pub endpoint: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
    #[serde(default)]
    pub args: Vec<String>,
}

fn default_timeout() -> u64 {
    30
}

impl VlmConfig {
    pub fn build(&self) -> Result<Arc<dyn VlmClient>, BackendError> {
        let timeout = Duration::from_secs(self.timeout_s.max(1));
        Ok(match self.mode {
            VlmMode::Http => Arc::new(HttpVlmClient::new(&self.endpoint, timeout)?),
            VlmMode::Local => Arc::new(LocalVlmClient {
                program: self.endpoint.clone(),
                args: self.args.clone(),
                timeout,
            }),
        })
    }
}

#[derive(Serialize)]
struct CaptionRequest<'a> {
    instruction: &'a str,
    /// Base64 PNG.
    image: String,
}

#[derive(Deserialize)]
struct CaptionResponse {
    caption: String,
}

fn request_body<'a>(
    image: &PixelImage,
    instruction: &'a str,
) -> Result<CaptionRequest<'a>, BackendError> {
    let png = encode_png(image).map_err(|e| BackendError::Contract(e.to_string()))?;
    Ok(CaptionRequest {
        instruction,
        image: B64.encode(png),
    })
}

/// POSTs `{"instruction", "image"}` and expects `{"caption"}`.
pub struct HttpVlmClient {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpVlmClient {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.to_string(),
            client,
        })
    }
}

impl VlmClient for HttpVlmClient {
    fn describe(&self, image: &PixelImage, instruction: &str) -> Result<String, BackendError> {
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&request_body(image, instruction)?)
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| {
                BackendError::Unavailable(format!("captioner at {}: {e}", self.endpoint))
            })?;
        let body: CaptionResponse = resp
            .json()
            .map_err(|e| BackendError::Protocol(format!("captioner reply: {e}")))?;
        Ok(body.caption)
    }
}

/// Runs a program per caption: request JSON on stdin, response JSON on stdout.
pub struct LocalVlmClient {
    pub program: String,
    pub args: Vec<String>,
    pub timeout: Duration,
}

impl VlmClient for LocalVlmClient {
    fn describe(&self, image: &PixelImage, instruction: &str) -> Result<String, BackendError> {
        let body = serde_json::to_vec(&request_body(image, instruction)?)
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| {
                BackendError::Unavailable(format!("cannot start `{}`: {e}", self.program))
            })?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let _ = stdin.write_all(&body);
            drop(stdin);
            let mut out = Vec::new();
            let _ = tx.send(stdout.read_to_end(&mut out).map(|_| out));
        });
        let out = match rx.recv_timeout(self.timeout) {
            Ok(out) => out?,
            Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(BackendError::Unavailable(format!(
                    "`{}` timed out after {:?}",
                    self.program, self.timeout
                )));
            }
        };
        let _ = child.wait();
        let body: CaptionResponse = serde_json::from_slice(&out)
            .map_err(|e| BackendError::Protocol(format!("captioner output: {e}")))?;
        Ok(body.caption)
    }
}

/// Caches captions by image content; falls back to the template prompt on any
/// client failure.
pub struct Captioner {
    client: Option<Arc<dyn VlmClient>>,
    instruction: String,
    cache: DashMap<[u8; 32], String>,
    calls: AtomicUsize,
}

impl Captioner {
    pub fn new(client: Option<Arc<dyn VlmClient>>) -> Self {
        Self {
            client,
            instruction: CAPTION_INSTRUCTION.to_string(),
            cache: DashMap::new(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_instruction(mut self, instruction: impl Into<String>) -> Self {
        self.instruction = instruction.into();
        self
    }

    /// Number of requests that reached the client.
    pub fn client_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn caption_object(&self, image: &PixelImage, object_tag: &str) -> PromptSpec {
        let key = content_hash(image);
        if let Some(hit) = self.cache.get(&key) {
            return PromptSpec {
                text: hit.clone(),
                source: PromptSource::Vlm,
            };
        }
        let Some(client) = &self.client else {
            return PromptSpec::template(object_tag);
        };
        self.calls.fetch_add(1, Ordering::Relaxed);
        match client.describe(image, &self.instruction) {
            Ok(text) if !text.trim().is_empty() => {
                let text = text.trim().to_string();
                self.cache.insert(key, text.clone());
                PromptSpec {
                    text,
                    source: PromptSource::Vlm,
                }
            }
            Ok(_) => {
                log::warn!("captioner returned an empty caption; using template prompt");
                PromptSpec::template(object_tag)
            }
            Err(e) => {
                log::warn!("captioning failed ({e}); using template prompt");
                PromptSpec::template(object_tag)
            }
        }
    }
}

fn content_hash(image: &PixelImage) -> [u8; 32] {
    let (c, h, w) = image.shape();
    let mut hasher = Sha256::new();
    for d in [c, h, w] {
        hasher.update((d as u64).to_le_bytes());
    }
    hasher.update(image.to_le_bytes());
    hasher.finalize().into()
}
