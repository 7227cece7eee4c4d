use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::manifest::{BenchmarkManifest, BenchmarkUnit};
use super::pipeline::{OutputFiles, Pipeline};
use super::request::CompositeRequest;
use crate::error::{Error, Result};
use crate::metrics::{MetricRow, MetricsReport, PairFailure, ReportMetadata};
use crate::par::{self, Exec};

pub const PASTE_METHOD: &str = "paste";

/// Completed unit, persisted under `records/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub unit_id: String,
    pub pair_id: String,
    pub variant: String,
    pub request: CompositeRequest,
    pub request_hash: String,
    pub outputs: OutputFiles,
    pub output_hash: String,
    pub rows: Vec<MetricRow>,
    pub started_at: u64,
    pub finished_at: u64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub exec: Exec,
    /// Stop after executing this many units; already-recorded units don't count.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    /// Units neither recorded nor executed because of `limit`.
    pub pending: Vec<String>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn record_path(run_dir: &Path, unit: &str) -> PathBuf {
    run_dir.join("records").join(format!("{unit}.json"))
}

fn load_record(path: &Path) -> Option<RunRecord> {
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn run_unit(
    pipeline: &Pipeline,
    run_dir: &Path,
    unit: &BenchmarkUnit,
    request_hash: String,
) -> Result<RunRecord> {
    let started_at = now();
    let generation = pipeline.generate(&unit.request)?;
    let outputs = generation.write_outputs(&run_dir.join("outputs").join(&unit.unit_id))?;
    let mut rows = vec![MetricRow {
        pair_id: unit.pair_id.clone(),
        method: unit.variant.clone(),
        metrics: generation.metrics()?,
    }];
    if unit.paste_baseline {
        rows.push(MetricRow {
            pair_id: unit.pair_id.clone(),
            method: PASTE_METHOD.into(),
            metrics: generation.paste_metrics()?,
        });
    }
    Ok(RunRecord {
        unit_id: unit.unit_id.clone(),
        pair_id: unit.pair_id.clone(),
        variant: unit.variant.clone(),
        request: unit.request.clone(),
        request_hash,
        output_hash: outputs.output_hash.clone(),
        outputs,
        rows,
        started_at,
        finished_at: now(),
    })
}

/// Runs every unit of `manifest` into `run_dir`, reusing records whose request
/// hash still matches, and writes `report.json` and `report.txt`.
pub fn run_benchmark(
    manifest: &BenchmarkManifest,
    pipeline: &Pipeline,
    run_dir: &Path,
    opts: RunOptions,
) -> Result<RunOutcome> {
    manifest.validate()?;
    let records_dir = run_dir.join("records");
    std::fs::create_dir_all(&records_dir).map_err(|e| Error::io(&records_dir, e))?;

    let mut units = manifest.units()?;
    for u in units.iter_mut().filter(|u| u.auto_place) {
        pipeline.auto_place(&mut u.request)?;
    }

    let mut done = Vec::new();
    let mut todo = Vec::new();
    for u in &units {
        let hash = pipeline.request_hash(&u.request)?;
        match load_record(&record_path(run_dir, &u.unit_id)) {
            Some(r) if r.request_hash == hash && r.outputs.image.is_file() => done.push(r),
            _ => todo.push((u, hash)),
        }
    }
    let skipped: Vec<String> = done.iter().map(|r| r.unit_id.clone()).collect();
    let take = opts.limit.unwrap_or(usize::MAX).min(todo.len());
    let pending = todo[take..]
        .iter()
        .map(|(u, _)| u.unit_id.clone())
        .collect();
    let batch = &todo[..take];

    let results = par::map_items(opts.exec, batch, |(u, hash)| {
        let r = run_unit(pipeline, run_dir, u, hash.clone());
        if let Ok(rec) = &r {
            let bytes = serde_json::to_vec_pretty(rec)?;
            write_atomic(&record_path(run_dir, &u.unit_id), &bytes)?;
        }
        r
    });
    let mut executed = Vec::new();
    let mut failures = Vec::new();
    for ((u, _), r) in batch.iter().zip(results) {
        match r {
            Ok(rec) => {
                executed.push(u.unit_id.clone());
                done.push(rec);
            }
            Err(e) => {
                log::error!("{}: {e}", u.unit_id);
                failures.push(PairFailure {
                    pair_id: u.unit_id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }

    // rows in manifest order regardless of which run produced them
    let order: std::collections::HashMap<&str, usize> = units
        .iter()
        .enumerate()
        .map(|(i, u)| (u.unit_id.as_str(), i))
        .collect();
    done.sort_by_key(|r| order.get(r.unit_id.as_str()).copied().unwrap_or(usize::MAX));
    let rows = done.into_iter().flat_map(|r| r.rows).collect();

    let profile = match &manifest.config.backend_profile {
        Some(p) => p.clone(),
        None => pipeline.default_profile().to_string(),
    };
    let metadata = ReportMetadata {
        dilation_radius: manifest.config.controls.dilation_radius,
        backend_profile: profile,
        ..ReportMetadata::default()
    };
    let report = MetricsReport::from_rows(rows, failures, metadata);
    write_atomic(
        &run_dir.join("report.json"),
        &serde_json::to_vec_pretty(&report)?,
    )?;
    write_atomic(&run_dir.join("report.txt"), report.to_table().as_bytes())?;
    Ok(RunOutcome {
        report,
        executed,
        skipped,
        pending,
    })
}
