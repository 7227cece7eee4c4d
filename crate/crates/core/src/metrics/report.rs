use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ImageMetrics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub pair_id: String,
    /// `ours`, `paste`, or an ablation name.
    pub method: String,
    pub metrics: ImageMetrics,
}

/// How the numbers were obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    /// Target-region geometry, e.g. `dilated_mask_bbox`.
    pub crop: String,
    pub dilation_radius: usize,
    pub depth_normalization: String,
    pub style_comparand: String,
    pub obj_comparand: String,
    pub backend_profile: String,
    pub models: BTreeMap<String, String>,
}

impl Default for ReportMetadata {
    fn default() -> Self {
        Self {
            crop: "dilated_mask_bbox".into(),
            dilation_radius: crate::compositing::DEFAULT_DILATION_RADIUS,
            depth_normalization: "per_region_zscore".into(),
            style_comparand: "region_crop_vs_full_background".into(),
            obj_comparand: "region_crop_vs_object_image".into(),
            backend_profile: String::new(),
            models: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFailure {
    pub pair_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<MetricRow>,
    /// Per-method means over the rows where a metric is present.
    pub aggregate: BTreeMap<String, ImageMetrics>,
    /// Per-method count of rows contributing to each mean, in column order.
    pub counts: BTreeMap<String, [usize; 7]>,
    pub failures: Vec<PairFailure>,
    pub metadata: ReportMetadata,
}

impl Default for ImageMetricsSums {
    fn default() -> Self {
        Self {
            sums: [0.0; 7],
            counts: [0; 7],
        }
    }
}

struct ImageMetricsSums {
    sums: [f64; 7],
    counts: [usize; 7],
}

impl MetricsReport {
    pub fn from_rows(
        per_image: Vec<MetricRow>,
        failures: Vec<PairFailure>,
        metadata: ReportMetadata,
    ) -> Self {
        let mut acc: BTreeMap<String, ImageMetricsSums> = BTreeMap::new();
        for row in &per_image {
            let a = acc.entry(row.method.clone()).or_default();
            for (i, v) in row.metrics.values().iter().enumerate() {
                if let Some(v) = v {
                    a.sums[i] += v;
                    a.counts[i] += 1;
                }
            }
        }
        let mut aggregate = BTreeMap::new();
        let mut counts = BTreeMap::new();
        for (method, a) in acc {
            let means: [Option<f64>; 7] =
                std::array::from_fn(|i| (a.counts[i] > 0).then(|| a.sums[i] / a.counts[i] as f64));
            aggregate.insert(method.clone(), ImageMetrics::from_values(means));
            counts.insert(method, a.counts);
        }
        Self {
            per_image,
            aggregate,
            counts,
            failures,
            metadata,
        }
    }

    pub fn rows_for<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a MetricRow> + 'a {
        self.per_image.iter().filter(move |r| r.method == method)
    }

    /// Aggregate table; absent metrics print as `n/a`.
    pub fn to_table(&self) -> String {
        let headers = [
            "Method",
            "CLIP_obj",
            "DINO_obj",
            "CLIP_style",
            "DINO_style",
            "LPIPS_obj",
            "LPIPS_style",
            "D-RMSE",
        ];
        let method_w = self
            .aggregate
            .keys()
            .map(String::len)
            .chain([6])
            .max()
            .unwrap_or(6);
        let mut out = String::new();
        let _ = write!(out, "{:<method_w$}", headers[0]);
        for h in &headers[1..] {
            let _ = write!(out, " | {h:>11}");
        }
        out.push('\n');
        out.push_str(&"-".repeat(method_w + 14 * 7));
        out.push('\n');
        for (method, m) in &self.aggregate {
            let _ = write!(out, "{method:<method_w$}");
            for v in m.values() {
                match v {
                    Some(v) => {
                        let _ = write!(out, " | {v:>11.4}");
                    }
                    None => {
                        let _ = write!(out, " | {:>11}", "n/a");
                    }
                }
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "\n{} images, {} failed; crop={}, depth={}",
            self.per_image.len(),
            self.failures.len(),
            self.metadata.crop,
            self.metadata.depth_normalization
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(pair: &str, method: &str, clip: Option<f64>, d: Option<f64>) -> MetricRow {
        MetricRow {
            pair_id: pair.into(),
            method: method.into(),
            metrics: ImageMetrics {
                clip_style: clip,
                d_rmse: d,
                ..ImageMetrics::default()
            },
        }
    }

    #[test]
    fn means_skip_absent_values() {
        let r = MetricsReport::from_rows(
            vec![
                row("a", "ours", Some(0.5), Some(1.0)),
                row("b", "ours", Some(0.7), None),
                row("a", "paste", Some(0.1), None),
            ],
            vec![],
            ReportMetadata::default(),
        );
        let ours = r.aggregate["ours"];
        assert!((ours.clip_style.unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(ours.d_rmse, Some(1.0));
        assert_eq!(ours.clip_obj, None);
        assert_eq!(r.counts["ours"], [0, 0, 2, 0, 0, 0, 1]);
        assert_eq!(r.aggregate["paste"].d_rmse, None);
        let table = r.to_table();
        assert!(table.contains("n/a"));
        assert!(table.lines().next().unwrap().contains("CLIP_obj"));
    }

    #[test]
    fn absent_is_serialized_as_null() {
        let json = serde_json::to_value(ImageMetrics::default()).unwrap();
        assert!(json["clip_obj"].is_null());
        assert_eq!(json.as_object().unwrap().len(), 7);
    }
}
