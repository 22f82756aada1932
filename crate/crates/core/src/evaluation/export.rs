//! Report and trace files.
//!
//! `curves.csv` holds one row per (class, iteration) with columns
//! `class,iteration,mean_blackened,mean_cropped,mean_iou,n`; `overall.csv`
//! has the same columns for the all-images aggregate. `plots/` holds one
//! `iteration value` series per class and curve, normalized to `[0, 1]`.
//! `report.json` is the full [`EvaluationReport`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{normalize_curves, ClassReport, EvaluationReport};
use crate::engine::{EissResult, StopReason, TopKReference};
use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Json,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::InvalidConfig(format!("unknown export format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow<T> {
    pub class: String,
    pub iteration: usize,
    pub mean_blackened: T,
    pub mean_cropped: T,
    pub mean_iou: T,
    pub n: usize,
}

fn export_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Export { path: path.to_path_buf(), message: e.to_string() }
}

fn file_safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn rows<T: Scalar>(c: &ClassReport<T>) -> impl Iterator<Item = CurveRow<T>> + '_ {
    (0..c.mean_blackened_curve.len()).map(move |t| CurveRow {
        class: c.class_name.clone(),
        iteration: t + 1,
        mean_blackened: c.mean_blackened_curve[t],
        mean_cropped: c.mean_cropped_curve[t],
        mean_iou: c.mean_iou_curve[t],
        n: c.sample_count,
    })
}

fn write_rows<T: Scalar>(path: &Path, rows: impl Iterator<Item = CurveRow<T>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| export_err(path, e))?;
    // Header is written explicitly so empty reports still carry the schema.
    w.write_record(["class", "iteration", "mean_blackened", "mean_cropped", "mean_iou", "n"])
        .map_err(|e| export_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| export_err(path, e))?;
    }
    w.flush().map_err(|e| export_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| export_err(path, e))
}

/// Writes `report` under `dir` (created if needed); returns the files written.
pub fn export<T: Scalar>(report: &EvaluationReport<T>, format: ExportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| export_err(dir, e))?;
    let mut written = Vec::new();
    match format {
        ExportFormat::Json => {
            let path = dir.join("report.json");
            let text = serde_json::to_string_pretty(report).map_err(|e| export_err(&path, e))?;
            write_text(&path, &(text + "\n"))?;
            written.push(path);
        }
        ExportFormat::Csv => {
            let curves = dir.join("curves.csv");
            write_rows(&curves, report.classes.iter().flat_map(rows))?;
            written.push(curves);
            let overall = dir.join("overall.csv");
            write_rows(&overall, report.overall.iter().flat_map(rows))?;
            written.push(overall);

            let plots = dir.join("plots");
            fs::create_dir_all(&plots).map_err(|e| export_err(&plots, e))?;
            for series in normalize_curves(report) {
                let stem = file_safe(&series.class_name);
                for (kind, curve) in
                    [("blackened", &series.blackened), ("cropped", &series.cropped), ("iou", &series.iou)]
                {
                    let path = plots.join(format!("{stem}.{kind}.dat"));
                    let mut text = String::from("# iteration normalized_value\n");
                    for (t, v) in curve.normalized.iter().enumerate() {
                        text.push_str(&format!("{} {}\n", t + 1, v));
                    }
                    write_text(&path, &text)?;
                    written.push(path);
                }
            }
        }
    }
    Ok(written)
}

pub fn read_report_json<T: Scalar>(path: &Path) -> Result<EvaluationReport<T>> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        offset: e.column() as u64,
        message: format!("{}: line {}: {e}", path.display(), e.line()),
    })
}

#[derive(Debug, Serialize)]
struct TraceRow<T> {
    iteration: usize,
    x: u32,
    y: u32,
    w: u32,
    h: u32,
    blackened_score: T,
    cropped_score: T,
    proposal_count: usize,
    iou: Option<T>,
}

/// Per-iteration trace of a single run.
pub fn write_trace_csv<T: Scalar>(result: &EissResult<T>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| export_err(path, e))?;
    for r in &result.records {
        w.serialize(TraceRow {
            iteration: r.iteration,
            x: r.resultant_region.x,
            y: r.resultant_region.y,
            w: r.resultant_region.w,
            h: r.resultant_region.h,
            blackened_score: r.blackened_score,
            cropped_score: r.cropped_score,
            proposal_count: r.proposal_count,
            iou: r.iou_vs_truth,
        })
        .map_err(|e| export_err(path, e))?;
    }
    w.flush().map_err(|e| export_err(path, e))
}

/// Final answer of a single run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction<T> {
    pub final_region: Region,
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub reference: TopKReference<T>,
    pub class_labels: Option<Vec<String>>,
    pub ground_truth: Option<Region>,
    pub iou: Option<T>,
}

pub fn write_prediction_json<T: Scalar>(
    result: &EissResult<T>,
    labels: Option<&[String]>,
    ground_truth: Option<&Region>,
    path: &Path,
) -> Result<()> {
    let prediction = Prediction {
        final_region: result.final_region,
        stop_reason: result.stop_reason,
        iterations: result.records.len(),
        reference: result.reference.clone(),
        class_labels: labels.map(|l| result.reference.class_indices.iter().map(|&i| l[i].clone()).collect()),
        ground_truth: ground_truth.copied(),
        iou: ground_truth.map(|g| result.final_region.iou(g)),
    };
    let text = serde_json::to_string_pretty(&prediction).map_err(|e| export_err(path, e))?;
    write_text(path, &(text + "\n"))
}

/// Boxes for drawing the search progression: one `iteration` row per step,
/// then the `final` box and, when known, the `ground_truth` box.
pub fn write_boxes_csv<T: Scalar>(result: &EissResult<T>, ground_truth: Option<&Region>, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| export_err(path, e))?;
    let mut text = String::from("kind,iteration,x,y,w,h\n");
    for r in &result.records {
        let b = r.resultant_region;
        text.push_str(&format!("iteration,{},{},{},{},{}\n", r.iteration, b.x, b.y, b.w, b.h));
    }
    let f = result.final_region;
    text.push_str(&format!("final,{},{},{},{},{}\n", result.records.len(), f.x, f.y, f.w, f.h));
    if let Some(g) = ground_truth {
        text.push_str(&format!("ground_truth,,{},{},{},{}\n", g.x, g.y, g.w, g.h));
    }
    file.write_all(text.as_bytes()).map_err(|e| export_err(path, e))
}
