//! JSON-lines worker protocol for out-of-process model backends.
//!
//! One request per line on the worker's stdin, one response per line on its
//! stdout:
//!
//! ```text
//! -> {"id": 7, "op": "predict", "params": {...}}
//! <- {"id": 7, "ok": true, "result": {...}}
//! <- {"id": 7, "ok": false, "error": "out of memory"}
//! ```
//!
//! Arrays travel as `{"shape": [...], "data": "<base64 of f32 little-endian>"}`.
//! Ops: `hello`, `catalog`, `predict`, `encode`, `decode`, `refine`,
//! `estimate_depth`, `embed`, `perceptual`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::toy::{
    ToyClipEmbedder, ToyDenoiser, ToyDepthEstimator, ToyDinoEmbedder, ToyPerceptualBackbone, ToyVae,
};
use super::{
    ConditioningSet, Denoiser, DepthEstimator, FeatureArray, FeatureBundle, ImageEmbedder,
    LayerCatalog, PerceptualBackbone, Prediction, Vae,
};
use crate::compositing::DepthMap;
use crate::conditioning::{EmbeddingRole, ImageEmbedding};
use crate::diffusion::{LatentGrid, PixelImage, SpaceTag};
use crate::error::BackendError;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireArray {
    pub shape: Vec<usize>,
    pub data: String,
}

impl WireArray {
    pub fn encode(shape: Vec<usize>, values: &[f32]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            shape,
            data: B64.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Vec<f32>, BackendError> {
        let bytes = B64
            .decode(&self.data)
            .map_err(|e| BackendError::Protocol(format!("bad base64 array: {e}")))?;
        if bytes.len() % 4 != 0 || bytes.len() / 4 != self.shape.iter().product::<usize>() {
            return Err(BackendError::Protocol(format!(
                "array of shape {:?} carries {} bytes",
                self.shape,
                bytes.len()
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::Protocol("non-finite value in array".into()));
        }
        Ok(values)
    }

    pub fn from_grid(grid: &LatentGrid) -> Self {
        let (c, h, w) = grid.shape();
        Self::encode(vec![c, h, w], grid.as_slice())
    }

    pub fn to_grid(&self, space: SpaceTag) -> Result<LatentGrid, BackendError> {
        let [c, h, w] = self.shape[..] else {
            return Err(BackendError::Protocol(format!(
                "expected a 3-d array, got {:?}",
                self.shape
            )));
        };
        LatentGrid::from_vec((c, h, w), self.decode()?, space)
            .map_err(|e| BackendError::Protocol(e.to_string()))
    }

    pub fn from_plane(plane: &Array2<f32>) -> Self {
        let (h, w) = plane.dim();
        Self::encode(vec![h, w], &plane.iter().copied().collect::<Vec<_>>())
    }

    pub fn to_plane(&self) -> Result<Array2<f32>, BackendError> {
        let [h, w] = self.shape[..] else {
            return Err(BackendError::Protocol(format!(
                "expected a 2-d array, got {:?}",
                self.shape
            )));
        };
        Array2::from_shape_vec((h, w), self.decode()?)
            .map_err(|e| BackendError::Protocol(e.to_string()))
    }

    pub fn from_feature(f: &FeatureArray) -> Self {
        Self::encode(f.shape.clone(), &f.data)
    }

    pub fn to_feature(&self) -> Result<FeatureArray, BackendError> {
        FeatureArray::new(self.shape.clone(), self.decode()?)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct WireBundle {
    timestep: usize,
    #[serde(default)]
    spatial: BTreeMap<String, WireArray>,
    #[serde(default)]
    queries: BTreeMap<String, WireArray>,
    #[serde(default)]
    keys: BTreeMap<String, WireArray>,
}

impl WireBundle {
    fn from_bundle(b: &FeatureBundle) -> Self {
        let conv = |m: &BTreeMap<String, FeatureArray>| {
            m.iter()
                .map(|(k, v)| (k.clone(), WireArray::from_feature(v)))
                .collect()
        };
        Self {
            timestep: b.timestep,
            spatial: conv(&b.spatial),
            queries: conv(&b.queries),
            keys: conv(&b.keys),
        }
    }

    fn to_bundle(&self) -> Result<FeatureBundle, BackendError> {
        let conv = |m: &BTreeMap<String, WireArray>| -> Result<BTreeMap<String, FeatureArray>, BackendError> {
            m.iter().map(|(k, v)| Ok((k.clone(), v.to_feature()?))).collect()
        };
        Ok(FeatureBundle {
            timestep: self.timestep,
            spatial: conv(&self.spatial)?,
            queries: conv(&self.queries)?,
            keys: conv(&self.keys)?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WireImagePrompt {
    vector: WireArray,
    weight: f64,
    role: EmbeddingRole,
    extractor_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WireCond {
    prompt: String,
    guidance: f64,
    #[serde(default)]
    image_prompt: Option<WireImagePrompt>,
    #[serde(default)]
    depth: Option<WireArray>,
}

impl WireCond {
    fn from_cond(c: &ConditioningSet) -> Self {
        Self {
            prompt: c.prompt_text.clone(),
            guidance: c.guidance_weight,
            image_prompt: c.image_prompt.as_ref().map(|p| WireImagePrompt {
                vector: WireArray::encode(vec![p.embedding.vector.len()], &p.embedding.vector),
                weight: p.weight,
                role: p.embedding.role,
                extractor_id: p.embedding.extractor_id.clone(),
            }),
            depth: c.depth.as_ref().map(|d| WireArray::from_plane(d.values())),
        }
    }

    fn to_cond(&self) -> Result<ConditioningSet, BackendError> {
        let depth = match &self.depth {
            Some(d) => Some(
                DepthMap::new(d.to_plane()?).map_err(|e| BackendError::Protocol(e.to_string()))?,
            ),
            None => None,
        };
        let mut cond =
            ConditioningSet::new(self.prompt.clone(), depth).with_guidance(self.guidance);
        if let Some(p) = &self.image_prompt {
            let embedding = ImageEmbedding {
                vector: p.vector.decode()?,
                role: p.role,
                extractor_id: p.extractor_id.clone(),
            };
            cond = cond.with_image_prompt(embedding, p.weight);
        }
        Ok(cond)
    }
}

/// Worker facts reported by `hello`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerInfo {
    pub id: String,
    pub protocol: u32,
    pub scale_factor: usize,
    pub latent_channels: usize,
    pub round_trip_bound: f64,
    #[serde(default)]
    pub has_refiner: bool,
    #[serde(default)]
    pub has_depth: bool,
    #[serde(default)]
    pub extractors: Vec<String>,
    #[serde(default)]
    pub has_perceptual: bool,
}

struct Conn {
    writer: Box<dyn Write + Send>,
    reader: Box<dyn BufRead + Send>,
    child: Option<Child>,
}

/// Client end of the protocol. Calls are serialised over one connection.
pub struct WorkerClient {
    conn: Mutex<Conn>,
    next_id: AtomicU64,
}

impl WorkerClient {
    /// Spawns `program args...` with piped stdio.
    pub fn spawn(
        program: &str,
        args: &[String],
        env: &BTreeMap<String, String>,
    ) -> Result<Self, BackendError> {
        let mut child = Command::new(program)
            .args(args)
            .envs(env)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| {
                BackendError::Unavailable(format!("cannot start worker `{program}`: {e}"))
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Self {
            conn: Mutex::new(Conn {
                writer: Box::new(stdin),
                reader: Box::new(BufReader::new(stdout)),
                child: Some(child),
            }),
            next_id: AtomicU64::new(1),
        })
    }

    /// Wraps an already-connected stream pair.
    pub fn from_streams(
        writer: impl Write + Send + 'static,
        reader: impl BufRead + Send + 'static,
    ) -> Self {
        Self {
            conn: Mutex::new(Conn {
                writer: Box::new(writer),
                reader: Box::new(reader),
                child: None,
            }),
            next_id: AtomicU64::new(1),
        }
    }

    pub fn call(&self, op: &str, params: Value) -> Result<Value, BackendError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let mut line = serde_json::to_string(&json!({"id": id, "op": op, "params": params}))
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        line.push('\n');
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        conn.writer.write_all(line.as_bytes())?;
        conn.writer.flush()?;
        let mut reply = String::new();
        if conn.reader.read_line(&mut reply)? == 0 {
            return Err(BackendError::Unavailable(format!(
                "worker closed its output during `{op}`"
            )));
        }
        drop(conn);
        let reply: Value = serde_json::from_str(&reply)
            .map_err(|e| BackendError::Protocol(format!("bad reply to `{op}`: {e}")))?;
        if reply.get("id").and_then(Value::as_u64) != Some(id) {
            return Err(BackendError::Protocol(format!(
                "reply to `{op}` has wrong id"
            )));
        }
        if reply.get("ok").and_then(Value::as_bool) == Some(true) {
            Ok(reply.get("result").cloned().unwrap_or(Value::Null))
        } else {
            let msg = reply
                .get("error")
                .and_then(Value::as_str)
                .unwrap_or("unspecified error");
            Err(BackendError::Unavailable(format!(
                "worker `{op}` failed: {msg}"
            )))
        }
    }

    fn call_as<T: for<'de> Deserialize<'de>>(
        &self,
        op: &str,
        params: Value,
    ) -> Result<T, BackendError> {
        serde_json::from_value(self.call(op, params)?)
            .map_err(|e| BackendError::Protocol(format!("malformed `{op}` result: {e}")))
    }

    pub fn hello(
        &self,
        device: &str,
        assets: &BTreeMap<String, String>,
        latent_shape: (usize, usize, usize),
    ) -> Result<WorkerInfo, BackendError> {
        let info: WorkerInfo = self.call_as(
            "hello",
            json!({"protocol": PROTOCOL_VERSION, "device": device, "assets": assets,
                   "latent_shape": [latent_shape.0, latent_shape.1, latent_shape.2]}),
        )?;
        if info.protocol != PROTOCOL_VERSION {
            return Err(BackendError::Protocol(format!(
                "worker speaks protocol {}, expected {PROTOCOL_VERSION}",
                info.protocol
            )));
        }
        Ok(info)
    }

    pub fn catalog(&self) -> Result<LayerCatalog, BackendError> {
        self.call_as("catalog", json!({}))
    }
}

impl Drop for WorkerClient {
    fn drop(&mut self) {
        let conn = self.conn.get_mut().unwrap_or_else(|p| p.into_inner());
        if let Some(child) = conn.child.as_mut() {
            // closing stdin lets a well-behaved worker exit on its own
            conn.writer = Box::new(std::io::sink());
            if !matches!(child.try_wait(), Ok(Some(_))) {
                std::thread::sleep(std::time::Duration::from_millis(20));
                if !matches!(child.try_wait(), Ok(Some(_))) {
                    let _ = child.kill();
                }
                let _ = child.wait();
            }
        }
    }
}

#[derive(Deserialize)]
struct PredictResult {
    eps: WireArray,
    captured: WireBundle,
}

#[derive(Deserialize)]
struct LatentResult {
    latent: Option<WireArray>,
}

#[derive(Deserialize)]
struct ImageResult {
    image: WireArray,
}

pub struct WorkerDenoiser {
    client: Arc<WorkerClient>,
    id: String,
    catalog: LayerCatalog,
    refiner: bool,
}

impl WorkerDenoiser {
    pub fn new(
        client: Arc<WorkerClient>,
        id: String,
        catalog: LayerCatalog,
        refiner: bool,
    ) -> Self {
        Self {
            client,
            id,
            catalog,
            refiner,
        }
    }
}

impl Denoiser for WorkerDenoiser {
    fn id(&self) -> String {
        self.id.clone()
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
        if let Some(o) = overrides {
            o.check_against(&self.catalog)?;
        }
        let r: PredictResult = self.client.call_as(
            "predict",
            json!({
                "z": WireArray::from_grid(z),
                "t": t,
                "cond": WireCond::from_cond(cond),
                "overrides": overrides.map(WireBundle::from_bundle),
            }),
        )?;
        let eps = r.eps.to_grid(SpaceTag::Latent)?;
        z.ensure_compatible(&eps)
            .map_err(|e| BackendError::Contract(format!("worker eps: {e}")))?;
        let captured = r.captured.to_bundle()?;
        captured.check_against(&self.catalog)?;
        if let Some(o) = overrides {
            captured.echoes(o).map_err(BackendError::Contract)?;
        }
        Ok(Prediction { eps, captured })
    }

    fn refine(
        &self,
        z: &LatentGrid,
        remaining_fraction: f64,
        cond: &ConditioningSet,
    ) -> Option<Result<LatentGrid, BackendError>> {
        if !self.refiner {
            return None;
        }
        let r = self
            .client
            .call_as::<LatentResult>(
                "refine",
                json!({"z": WireArray::from_grid(z), "remaining_fraction": remaining_fraction,
                       "cond": WireCond::from_cond(cond)}),
            )
            .and_then(|r| match r.latent {
                Some(l) => l.to_grid(SpaceTag::Latent).map(Some),
                None => Ok(None),
            });
        r.transpose()
    }
}

pub struct WorkerVae {
    client: Arc<WorkerClient>,
    info: WorkerInfo,
}

impl WorkerVae {
    pub fn new(client: Arc<WorkerClient>, info: WorkerInfo) -> Self {
        Self { client, info }
    }
}

impl Vae for WorkerVae {
    fn id(&self) -> String {
        format!("{}/vae", self.info.id)
    }

    fn encode(&self, image: &PixelImage) -> Result<LatentGrid, BackendError> {
        let r: LatentResult = self
            .client
            .call_as("encode", json!({"image": WireArray::from_grid(image)}))?;
        r.latent
            .ok_or_else(|| BackendError::Protocol("encode returned no latent".into()))?
            .to_grid(SpaceTag::Latent)
    }

    fn decode(&self, latent: &LatentGrid) -> Result<PixelImage, BackendError> {
        let r: ImageResult = self
            .client
            .call_as("decode", json!({"latent": WireArray::from_grid(latent)}))?;
        r.image.to_grid(SpaceTag::Pixel)
    }

    fn scale_factor(&self) -> usize {
        self.info.scale_factor
    }

    fn latent_channels(&self) -> usize {
        self.info.latent_channels
    }

    fn round_trip_bound(&self) -> f64 {
        self.info.round_trip_bound
    }
}

pub struct WorkerDepthEstimator {
    client: Arc<WorkerClient>,
}

impl WorkerDepthEstimator {
    pub fn new(client: Arc<WorkerClient>) -> Self {
        Self { client }
    }
}

impl DepthEstimator for WorkerDepthEstimator {
    fn id(&self) -> String {
        "worker/depth".into()
    }

    fn estimate(&self, image: &PixelImage) -> Result<DepthMap, BackendError> {
        #[derive(Deserialize)]
        struct R {
            depth: WireArray,
        }
        let r: R = self.client.call_as(
            "estimate_depth",
            json!({"image": WireArray::from_grid(image)}),
        )?;
        DepthMap::new(r.depth.to_plane()?).map_err(|e| BackendError::Contract(e.to_string()))
    }
}

pub struct WorkerEmbedder {
    client: Arc<WorkerClient>,
    extractor: String,
}

impl WorkerEmbedder {
    pub fn new(client: Arc<WorkerClient>, extractor: impl Into<String>) -> Self {
        Self {
            client,
            extractor: extractor.into(),
        }
    }
}

impl ImageEmbedder for WorkerEmbedder {
    fn id(&self) -> String {
        format!("worker/{}", self.extractor)
    }

    fn embed(&self, image: &PixelImage) -> Result<Vec<f32>, BackendError> {
        #[derive(Deserialize)]
        struct R {
            vector: WireArray,
        }
        let r: R = self.client.call_as(
            "embed",
            json!({"image": WireArray::from_grid(image), "extractor": self.extractor}),
        )?;
        r.vector.decode()
    }
}

pub struct WorkerPerceptual {
    client: Arc<WorkerClient>,
}

impl WorkerPerceptual {
    pub fn new(client: Arc<WorkerClient>) -> Self {
        Self { client }
    }
}

impl PerceptualBackbone for WorkerPerceptual {
    fn id(&self) -> String {
        "worker/perceptual".into()
    }

    fn features(&self, image: &PixelImage) -> Result<Vec<FeatureArray>, BackendError> {
        #[derive(Deserialize)]
        struct R {
            layers: Vec<WireArray>,
        }
        let r: R = self
            .client
            .call_as("perceptual", json!({"image": WireArray::from_grid(image)}))?;
        r.layers.iter().map(WireArray::to_feature).collect()
    }
}

/// Toy model set served by [`serve_worker`].
pub struct ToyWorker {
    seed: u64,
    scale: usize,
    refiner: bool,
    denoiser: Option<ToyDenoiser>,
}

impl ToyWorker {
    pub fn new(seed: u64, scale: usize, refiner: bool) -> Self {
        Self {
            seed,
            scale,
            refiner,
            denoiser: None,
        }
    }

    fn denoiser(&self) -> Result<&ToyDenoiser, String> {
        self.denoiser
            .as_ref()
            .ok_or_else(|| "hello must come first".to_string())
    }

    fn handle(&mut self, op: &str, params: Value) -> Result<Value, String> {
        let arr = |key: &str| -> Result<WireArray, String> {
            serde_json::from_value(params.get(key).cloned().unwrap_or(Value::Null))
                .map_err(|e| format!("param `{key}`: {e}"))
        };
        let vae = ToyVae::new(self.scale);
        let s = |e: BackendError| e.to_string();
        match op {
            "hello" => {
                let shape: Vec<usize> =
                    serde_json::from_value(params.get("latent_shape").cloned().unwrap_or_default())
                        .map_err(|e| format!("param `latent_shape`: {e}"))?;
                let [c, h, w] = shape[..] else {
                    return Err("latent_shape must have 3 entries".into());
                };
                self.denoiser =
                    Some(ToyDenoiser::new(self.seed, (c, h, w)).with_refiner(self.refiner));
                Ok(serde_json::to_value(WorkerInfo {
                    id: format!("toy-worker(seed={})", self.seed),
                    protocol: PROTOCOL_VERSION,
                    scale_factor: self.scale,
                    latent_channels: vae.latent_channels(),
                    round_trip_bound: vae.round_trip_bound(),
                    has_refiner: self.refiner,
                    has_depth: true,
                    extractors: vec!["adapter".into(), "clip".into(), "dino".into()],
                    has_perceptual: true,
                })
                .expect("serialisable"))
            }
            "catalog" => {
                Ok(serde_json::to_value(self.denoiser()?.catalog()).expect("serialisable"))
            }
            "predict" => {
                let z = arr("z")?.to_grid(SpaceTag::Latent).map_err(s)?;
                let t = params
                    .get("t")
                    .and_then(Value::as_u64)
                    .ok_or("param `t` missing")? as usize;
                let cond: WireCond =
                    serde_json::from_value(params.get("cond").cloned().unwrap_or_default())
                        .map_err(|e| format!("param `cond`: {e}"))?;
                let overrides: Option<WireBundle> =
                    serde_json::from_value(params.get("overrides").cloned().unwrap_or_default())
                        .map_err(|e| format!("param `overrides`: {e}"))?;
                let overrides = overrides.map(|o| o.to_bundle()).transpose().map_err(s)?;
                let p = self
                    .denoiser()?
                    .predict(&z, t, &cond.to_cond().map_err(s)?, overrides.as_ref())
                    .map_err(s)?;
                Ok(
                    json!({"eps": WireArray::from_grid(&p.eps), "captured": WireBundle::from_bundle(&p.captured)}),
                )
            }
            "refine" => {
                let z = arr("z")?.to_grid(SpaceTag::Latent).map_err(s)?;
                let frac = params
                    .get("remaining_fraction")
                    .and_then(Value::as_f64)
                    .unwrap_or(0.1);
                let cond: WireCond =
                    serde_json::from_value(params.get("cond").cloned().unwrap_or_default())
                        .map_err(|e| format!("param `cond`: {e}"))?;
                let out = self
                    .denoiser()?
                    .refine(&z, frac, &cond.to_cond().map_err(s)?)
                    .transpose()
                    .map_err(s)?;
                Ok(json!({"latent": out.as_ref().map(WireArray::from_grid)}))
            }
            "encode" => {
                let img = arr("image")?.to_grid(SpaceTag::Pixel).map_err(s)?;
                Ok(json!({"latent": WireArray::from_grid(&vae.encode(&img).map_err(s)?)}))
            }
            "decode" => {
                let z = arr("latent")?.to_grid(SpaceTag::Latent).map_err(s)?;
                Ok(json!({"image": WireArray::from_grid(&vae.decode(&z).map_err(s)?)}))
            }
            "estimate_depth" => {
                let img = arr("image")?.to_grid(SpaceTag::Pixel).map_err(s)?;
                let d = ToyDepthEstimator.estimate(&img).map_err(s)?;
                Ok(json!({"depth": WireArray::from_plane(d.values())}))
            }
            "embed" => {
                let img = arr("image")?.to_grid(SpaceTag::Pixel).map_err(s)?;
                let v = match params.get("extractor").and_then(Value::as_str) {
                    Some("adapter") | Some("clip") => ToyClipEmbedder.embed(&img),
                    Some("dino") => ToyDinoEmbedder.embed(&img),
                    other => return Err(format!("unknown extractor {other:?}")),
                }
                .map_err(s)?;
                Ok(json!({"vector": WireArray::encode(vec![v.len()], &v)}))
            }
            "perceptual" => {
                let img = arr("image")?.to_grid(SpaceTag::Pixel).map_err(s)?;
                let layers = ToyPerceptualBackbone.features(&img).map_err(s)?;
                Ok(
                    json!({"layers": layers.iter().map(WireArray::from_feature).collect::<Vec<_>>()}),
                )
            }
            other => Err(format!("unknown op `{other}`")),
        }
    }
}

/// Serves the toy model set until `reader` reaches end of input.
pub fn serve_worker(
    worker: &mut ToyWorker,
    reader: impl BufRead,
    mut writer: impl Write,
) -> std::io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Value>(&line) {
            Ok(req) => {
                let id = req.get("id").cloned().unwrap_or(Value::Null);
                let op = req.get("op").and_then(Value::as_str).unwrap_or("");
                let params = req.get("params").cloned().unwrap_or_else(|| json!({}));
                match worker.handle(op, params) {
                    Ok(result) => json!({"id": id, "ok": true, "result": result}),
                    Err(error) => json!({"id": id, "ok": false, "error": error}),
                }
            }
            Err(e) => json!({"id": null, "ok": false, "error": format!("bad request: {e}")}),
        };
        serde_json::to_writer(&mut writer, &reply)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// Runs a toy worker on a background thread, connected through in-process
/// pipes.
pub fn spawn_in_process(worker: ToyWorker) -> std::io::Result<WorkerClient> {
    let (req_rx, req_tx) = std::io::pipe()?;
    let (resp_rx, resp_tx) = std::io::pipe()?;
    std::thread::spawn(move || {
        let mut worker = worker;
        let _ = serve_worker(&mut worker, BufReader::new(req_rx), resp_tx);
    });
    Ok(WorkerClient::from_streams(req_tx, BufReader::new(resp_rx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::toy::{ATTENTION_LAYERS, SPATIAL_LAYERS};

    #[test]
    fn wire_array_round_trip() {
        let a = WireArray::encode(vec![2, 3], &[0.0, -1.5, 3.25, 1e-7, f32::MAX, -0.0]);
        assert_eq!(a.decode().unwrap()[4], f32::MAX);
        assert!(WireArray {
            shape: vec![7],
            ..a.clone()
        }
        .decode()
        .is_err());
    }

    #[test]
    fn in_process_worker_matches_direct_toy() {
        let shape = (12, 4, 4);
        let client = Arc::new(spawn_in_process(ToyWorker::new(5, 2, false)).unwrap());
        let info = client.hello("cpu", &BTreeMap::new(), shape).unwrap();
        assert_eq!(info.latent_channels, 12);
        let catalog = client.catalog().unwrap();
        let remote = WorkerDenoiser::new(client.clone(), info.id.clone(), catalog, false);
        let local = ToyDenoiser::new(5, shape);
        let z = LatentGrid::filled(shape, 0.3, SpaceTag::Latent);
        let cond = ConditioningSet::new("a red mug", None).with_guidance(5.0);
        let a = remote.predict(&z, 12, &cond, None).unwrap();
        let b = local.predict(&z, 12, &cond, None).unwrap();
        assert_eq!(a.eps, b.eps);
        let mut over = FeatureBundle::new(12);
        over.spatial.insert(
            SPATIAL_LAYERS[0].into(),
            b.captured.spatial[SPATIAL_LAYERS[0]].clone(),
        );
        over.keys.insert(
            ATTENTION_LAYERS[1].into(),
            b.captured.keys[ATTENTION_LAYERS[1]].clone(),
        );
        let c = remote.predict(&z, 12, &cond, Some(&over)).unwrap();
        c.captured.echoes(&over).unwrap();
    }

    #[test]
    fn worker_errors_surface_as_unavailable() {
        let client = spawn_in_process(ToyWorker::new(0, 8, false)).unwrap();
        let err = client.call("catalog", json!({})).unwrap_err();
        assert!(err.to_string().contains("hello must come first"), "{err}");
        let err = client.call("teleport", json!({})).unwrap_err();
        assert!(err.to_string().contains("unknown op"), "{err}");
    }
}
