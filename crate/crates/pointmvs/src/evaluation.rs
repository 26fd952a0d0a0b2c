//! Point-cloud quality metrics.
//!
//! Given a reconstructed cloud and a reference cloud, this module
//! reports four numbers, all derived from nearest-neighbor distances:
//!
//! * **accuracy** (mm) — mean distance from each reconstructed point
//!   to its nearest reference point, with distances above a
//!   configurable cap excluded so stray outliers cannot dominate;
//! * **completeness** (mm) — the same with the roles swapped: mean
//!   distance from each reference point to the reconstruction;
//! * **overall** (mm) — the arithmetic mean of the two;
//! * **f-score** (%) — the harmonic mean of precision (share of
//!   reconstructed points within a distance threshold of the
//!   reference) and recall (share of reference points within the
//!   threshold of the reconstruction).
//!
//! Nearest neighbors are found with a uniform grid whose cell edge
//! equals the search radius: any point within the radius of a query
//! lies in the 3x3x3 block of cells around the query's cell, so the
//! lookup is exact for every distance the metrics can use. Because
//! accuracy and completeness discard distances beyond the cap, and
//! precision/recall only test membership within the threshold, no
//! metric ever needs a neighbor farther away than its radius.
//!
//! Everything here is pure and deterministic; ties and boundary
//! distances are resolved the same way every run.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Radius-capped nearest-neighbor grid
// ---------------------------------------------------------------------------

/// Uniform spatial hash over a point set, sized for one search radius.
///
/// The cell edge equals the radius, so `nearest_within` only has to
/// scan the 27 cells around the query to find every point at distance
/// `<= radius`. Queries outside that radius report nothing.
struct SpatialIndex<'a> {
    points: &'a [Vector3<f64>],
    cell: f64,
    buckets: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl<'a> SpatialIndex<'a> {
    fn build(points: &'a [Vector3<f64>], radius: f64) -> Self {
        let mut buckets: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        let index = Self {
            points,
            cell: radius,
            buckets: HashMap::new(),
        };
        for (i, p) in points.iter().enumerate() {
            buckets.entry(index.key(p)).or_default().push(i);
        }
        Self { buckets, ..index }
    }

    fn key(&self, p: &Vector3<f64>) -> (i64, i64, i64) {
        (
            (p.x / self.cell).floor() as i64,
            (p.y / self.cell).floor() as i64,
            (p.z / self.cell).floor() as i64,
        )
    }

    /// Distance to the nearest stored point, if one lies within the
    /// index radius (boundary included).
    fn nearest_within(&self, query: &Vector3<f64>) -> Option<f64> {
        let (kx, ky, kz) = self.key(query);
        let mut best: Option<f64> = None;
        for dx in -1..=1i64 {
            for dy in -1..=1i64 {
                for dz in -1..=1i64 {
                    let cell = (
                        kx.saturating_add(dx),
                        ky.saturating_add(dy),
                        kz.saturating_add(dz),
                    );
                    let Some(ids) = self.buckets.get(&cell) else {
                        continue;
                    };
                    for &i in ids {
                        let d2 = (self.points[i] - query).norm_squared();
                        if best.is_none_or(|b| d2 < b) {
                            best = Some(d2);
                        }
                    }
                }
            }
        }
        best.map(f64::sqrt).filter(|d| *d <= self.cell)
    }

    /// Whether any stored point lies within the index radius of the
    /// query. Early-exits on the first hit.
    fn any_within(&self, query: &Vector3<f64>) -> bool {
        let (kx, ky, kz) = self.key(query);
        let r2 = self.cell * self.cell;
        for dx in -1..=1i64 {
            for dy in -1..=1i64 {
                for dz in -1..=1i64 {
                    let cell = (
                        kx.saturating_add(dx),
                        ky.saturating_add(dy),
                        kz.saturating_add(dz),
                    );
                    let Some(ids) = self.buckets.get(&cell) else {
                        continue;
                    };
                    if ids
                        .iter()
                        .any(|&i| (self.points[i] - query).norm_squared() <= r2)
                    {
                        return true;
                    }
                }
            }
        }
        false
    }
}

// ---------------------------------------------------------------------------
// Input validation
// ---------------------------------------------------------------------------

fn validate_cloud(points: &[Vector3<f64>], role: &str) -> Result<()> {
    if points.is_empty() {
        return Err(Error::data(format!("{role} point cloud is empty")));
    }
    if let Some(p) = points.iter().find(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()))
    {
        return Err(Error::data(format!(
            "{role} point cloud contains a non-finite coordinate: {p:?}"
        )));
    }
    Ok(())
}

fn validate_radius(value: f64, what: &str) -> Result<()> {
    if !(value.is_finite() && value > 0.0) {
        return Err(Error::config(format!(
            "{what} must be finite and positive, got {value}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Mean distance (mm) from each point of `pred` to its nearest
/// neighbor in `gt`, excluding distances above `outlier_cap`.
///
/// Fails when either cloud is empty, when the cap is not a positive
/// finite number, or when every distance exceeds the cap (the mean
/// would be over an empty set).
pub fn accuracy(pred: &[Vector3<f64>], gt: &[Vector3<f64>], outlier_cap: f64) -> Result<f64> {
    validate_cloud(pred, "query")?;
    validate_cloud(gt, "reference")?;
    validate_radius(outlier_cap, "outlier cap")?;
    let index = SpatialIndex::build(gt, outlier_cap);
    let mut sum = 0.0;
    let mut kept = 0usize;
    for p in pred {
        if let Some(d) = index.nearest_within(p) {
            sum += d;
            kept += 1;
        }
    }
    if kept == 0 {
        return Err(Error::data(format!(
            "every nearest-neighbor distance exceeded the {outlier_cap} mm outlier cap"
        )));
    }
    Ok(sum / kept as f64)
}

/// Mean distance (mm) from each point of `gt` to its nearest neighbor
/// in `pred`, excluding distances above `outlier_cap`.
///
/// Exactly `accuracy` with the clouds swapped.
pub fn completeness(pred: &[Vector3<f64>], gt: &[Vector3<f64>], outlier_cap: f64) -> Result<f64> {
    accuracy(gt, pred, outlier_cap)
}

/// Precision, recall, and their harmonic mean, all in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FScore {
    /// Share of query points within the threshold of the reference (%).
    pub precision: f64,
    /// Share of reference points within the threshold of the query (%).
    pub recall: f64,
    /// `2PR / (P + R)`, or 0 when both shares are 0 (%).
    pub fscore: f64,
}

/// Distance-thresholded reconstruction score.
///
/// Precision is the percentage of `pred` points with a `gt` neighbor
/// at distance `<= threshold`; recall swaps the roles; the f-score is
/// their harmonic mean (0 when both are 0).
pub fn fscore(pred: &[Vector3<f64>], gt: &[Vector3<f64>], threshold: f64) -> Result<FScore> {
    validate_cloud(pred, "query")?;
    validate_cloud(gt, "reference")?;
    validate_radius(threshold, "f-score threshold")?;
    let gt_index = SpatialIndex::build(gt, threshold);
    let pred_index = SpatialIndex::build(pred, threshold);
    let pred_hits = pred.iter().filter(|p| gt_index.any_within(p)).count();
    let gt_hits = gt.iter().filter(|p| pred_index.any_within(p)).count();
    let precision = 100.0 * pred_hits as f64 / pred.len() as f64;
    let recall = 100.0 * gt_hits as f64 / gt.len() as f64;
    let fscore = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(FScore {
        precision,
        recall,
        fscore,
    })
}

// ---------------------------------------------------------------------------
// Aggregate report
// ---------------------------------------------------------------------------

/// Every cloud-comparison metric in one record, together with the
/// parameters it was computed under.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudMetrics {
    /// Mean capped nearest-neighbor distance, reconstruction to reference (mm).
    pub accuracy_mm: f64,
    /// Mean capped nearest-neighbor distance, reference to reconstruction (mm).
    pub completeness_mm: f64,
    /// `(accuracy + completeness) / 2` (mm).
    pub overall_mm: f64,
    /// Share of reconstructed points within the threshold (%).
    pub precision_pct: f64,
    /// Share of reference points within the threshold (%).
    pub recall_pct: f64,
    /// Harmonic mean of precision and recall (%).
    pub fscore_pct: f64,
    /// Cap (mm) applied to accuracy/completeness distances.
    pub outlier_cap_mm: f64,
    /// Distance threshold (mm) behind precision/recall/f-score.
    pub fscore_threshold_mm: f64,
}

impl CloudMetrics {
    /// Computes all metrics between a reconstructed and a reference
    /// cloud under the given settings.
    pub fn compute(
        pred: &[Vector3<f64>],
        gt: &[Vector3<f64>],
        cfg: &EvalConfig,
    ) -> Result<Self> {
        let accuracy_mm = accuracy(pred, gt, cfg.outlier_cap)?;
        let completeness_mm = completeness(pred, gt, cfg.outlier_cap)?;
        let scores = fscore(pred, gt, cfg.fscore_threshold)?;
        Ok(Self {
            accuracy_mm,
            completeness_mm,
            overall_mm: 0.5 * (accuracy_mm + completeness_mm),
            precision_pct: scores.precision,
            recall_pct: scores.recall,
            fscore_pct: scores.fscore,
            outlier_cap_mm: cfg.outlier_cap,
            fscore_threshold_mm: cfg.fscore_threshold,
        })
    }

    /// Human-readable table: one row per metric with its value and the
    /// parameter it depends on.
    pub fn render_report(&self) -> String {
        let cap = format!("cap {:.3} mm", self.outlier_cap_mm);
        let thr = format!("within {:.3} mm", self.fscore_threshold_mm);
        let rows: [(&str, String, &str); 6] = [
            ("accuracy", format!("{:.4} mm", self.accuracy_mm), &cap),
            (
                "completeness",
                format!("{:.4} mm", self.completeness_mm),
                &cap,
            ),
            ("overall", format!("{:.4} mm", self.overall_mm), &cap),
            ("precision", format!("{:.2} %", self.precision_pct), &thr),
            ("recall", format!("{:.2} %", self.recall_pct), &thr),
            ("f-score", format!("{:.2} %", self.fscore_pct), &thr),
        ];
        let mut out = String::from("metric        value         threshold\n");
        for (name, value, param) in rows {
            let _ = writeln!(out, "{name:<13} {value:<13} {param}");
        }
        out
    }

    /// Machine-readable form: one JSON object per line, one line per
    /// metric, each carrying the parameter it was computed under.
    pub fn to_json_lines(&self) -> String {
        let records = [
            serde_json::json!({
                "metric": "accuracy", "unit": "mm",
                "value": self.accuracy_mm, "cap_mm": self.outlier_cap_mm,
            }),
            serde_json::json!({
                "metric": "completeness", "unit": "mm",
                "value": self.completeness_mm, "cap_mm": self.outlier_cap_mm,
            }),
            serde_json::json!({
                "metric": "overall", "unit": "mm",
                "value": self.overall_mm, "cap_mm": self.outlier_cap_mm,
            }),
            serde_json::json!({
                "metric": "precision", "unit": "percent",
                "value": self.precision_pct, "threshold_mm": self.fscore_threshold_mm,
            }),
            serde_json::json!({
                "metric": "recall", "unit": "percent",
                "value": self.recall_pct, "threshold_mm": self.fscore_threshold_mm,
            }),
            serde_json::json!({
                "metric": "fscore", "unit": "percent",
                "value": self.fscore_pct, "threshold_mm": self.fscore_threshold_mm,
            }),
        ];
        let mut out = String::new();
        for record in records {
            let _ = writeln!(out, "{record}");
        }
        out
    }
}
