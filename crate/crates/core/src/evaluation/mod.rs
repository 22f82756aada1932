//! Batch runs over annotated images, score-curve aggregation and export.

mod export;
mod voc;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::engine::{run_eiss, EissConfig, EissResult, StopReason};
use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::imaging::{generate_synthetic, Image, SyntheticSpec};
use crate::scalar::Scalar;

pub use export::{
    export, read_report_json, write_boxes_csv, write_prediction_json, write_trace_csv, CurveRow,
    ExportFormat, Prediction,
};
pub use voc::{parse_annotation, sample_dataset, single_instance, Annotation, VocDataset};

/// Class name used for the all-images aggregate.
pub const OVERALL: &str = "all";

#[derive(Debug, Clone)]
pub enum ImageSource<T> {
    File(PathBuf),
    Memory(Arc<Image<T>>),
}

#[derive(Debug, Clone)]
pub struct EvalSample<T> {
    pub image_id: String,
    pub class_name: String,
    pub truth: Region,
    pub source: ImageSource<T>,
}

impl<T: Scalar> EvalSample<T> {
    fn load(&self) -> Result<Arc<Image<T>>> {
        match &self.source {
            ImageSource::File(p) => Image::load(p).map(Arc::new),
            ImageSource::Memory(img) => Ok(img.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub image_id: String,
    pub reason: String,
}

/// Images chosen for an evaluation, plus inputs already rejected upstream.
#[derive(Debug, Clone)]
pub struct Selection<T> {
    pub samples: Vec<EvalSample<T>>,
    pub skipped: Vec<Skipped>,
}

impl<T> Default for Selection<T> {
    fn default() -> Self {
        Self { samples: Vec::new(), skipped: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult<T> {
    pub image_id: String,
    pub class_name: String,
    pub ground_truth: Region,
    pub final_region: Region,
    pub final_iou: T,
    pub stop_reason: StopReason,
    pub iterations_run: usize,
    /// True when the curves below were extended past `iterations_run`.
    pub padded: bool,
    pub blackened_curve: Vec<T>,
    pub cropped_curve: Vec<T>,
    pub iou_curve: Vec<T>,
}

impl<T: Scalar> ImageResult<T> {
    /// Flattens a run onto a fixed iteration axis, carrying the last value forward.
    pub fn from_run(
        image_id: &str,
        class_name: &str,
        truth: Region,
        run: &EissResult<T>,
        length: usize,
    ) -> Self {
        let pad = |values: Vec<T>| -> Vec<T> {
            let last = *values.last().expect("runs have at least one record");
            let mut v = values;
            v.truncate(length);
            v.resize(length, last);
            v
        };
        let iou_of = |r: &Region| r.iou::<T>(&truth);
        Self {
            image_id: image_id.to_string(),
            class_name: class_name.to_string(),
            ground_truth: truth,
            final_region: run.final_region,
            final_iou: iou_of(&run.final_region),
            stop_reason: run.stop_reason,
            iterations_run: run.records.len(),
            padded: run.records.len() < length,
            blackened_curve: pad(run.records.iter().map(|r| r.blackened_score).collect()),
            cropped_curve: pad(run.records.iter().map(|r| r.cropped_score).collect()),
            iou_curve: pad(run.records.iter().map(|r| iou_of(&r.resultant_region)).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport<T> {
    pub class_name: String,
    pub sample_count: usize,
    pub mean_blackened_curve: Vec<T>,
    pub mean_cropped_curve: Vec<T>,
    pub mean_iou_curve: Vec<T>,
    /// First 1-based iteration where the mean blackened score reaches the
    /// mean cropped score.
    pub crossing_iteration: Option<usize>,
    pub mean_final_iou: T,
}

impl<T: Scalar> ClassReport<T> {
    /// Element-wise means over a non-empty set of equally long image results.
    pub fn aggregate(class_name: &str, images: &[&ImageResult<T>]) -> Self {
        let n = T::lit(images.len() as f64);
        let mean_curve = |get: fn(&ImageResult<T>) -> &Vec<T>| -> Vec<T> {
            let len = images.first().map_or(0, |i| get(i).len());
            (0..len).map(|t| images.iter().map(|i| get(i)[t]).sum::<T>() / n).collect()
        };
        let mean_blackened_curve = mean_curve(|i| &i.blackened_curve);
        let mean_cropped_curve = mean_curve(|i| &i.cropped_curve);
        let crossing_iteration = mean_blackened_curve
            .iter()
            .zip(&mean_cropped_curve)
            .position(|(b, c)| b >= c)
            .map(|t| t + 1);
        Self {
            class_name: class_name.to_string(),
            sample_count: images.len(),
            mean_iou_curve: mean_curve(|i| &i.iou_curve),
            mean_blackened_curve,
            mean_cropped_curve,
            crossing_iteration,
            mean_final_iou: images.iter().map(|i| i.final_iou).sum::<T>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport<T> {
    pub max_iterations: usize,
    /// Per class, sorted by class name.
    pub classes: Vec<ClassReport<T>>,
    /// Aggregate over every evaluated image; absent for an empty evaluation.
    pub overall: Option<ClassReport<T>>,
    pub images: Vec<ImageResult<T>>,
    pub skipped: Vec<Skipped>,
}

impl<T: Scalar> EvaluationReport<T> {
    pub fn empty(max_iterations: usize, skipped: Vec<Skipped>) -> Self {
        Self { max_iterations, classes: Vec::new(), overall: None, images: Vec::new(), skipped }
    }

    /// Builds per-class and overall aggregates from per-image results.
    pub fn from_images(max_iterations: usize, images: Vec<ImageResult<T>>, skipped: Vec<Skipped>) -> Self {
        if images.is_empty() {
            return Self::empty(max_iterations, skipped);
        }
        let mut by_class: BTreeMap<&str, Vec<&ImageResult<T>>> = BTreeMap::new();
        for img in &images {
            by_class.entry(img.class_name.as_str()).or_default().push(img);
        }
        let classes = by_class.iter().map(|(c, imgs)| ClassReport::aggregate(c, imgs)).collect();
        let all: Vec<&ImageResult<T>> = images.iter().collect();
        let overall = Some(ClassReport::aggregate(OVERALL, &all));
        Self { max_iterations, classes, overall, images, skipped }
    }

    pub fn mean_final_iou(&self) -> Option<T> {
        self.overall.as_ref().map(|o| o.mean_final_iou)
    }
}

/// `count` synthetic scenes, scene `i` drawn with seed `seed + i`. Images are
/// named `synth-<i>` and classes `class<c>`, matching the oracle's labels.
pub fn synthetic_selection<T: Scalar>(spec: &SyntheticSpec, count: usize, seed: u64) -> Result<Selection<T>> {
    let samples = (0..count)
        .map(|i| {
            let s = generate_synthetic::<T>(spec, seed.wrapping_add(i as u64))?;
            Ok(EvalSample {
                image_id: format!("synth-{i:04}"),
                class_name: format!("class{}", s.class_id),
                truth: s.truth,
                source: ImageSource::Memory(Arc::new(s.image)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Selection { samples, skipped: Vec::new() })
}

/// Runs the search on every selected image with its ground truth. Images
/// that cannot be read or searched are listed as skipped; the batch goes on.
/// Per-image work is spread over the current rayon pool and merged in
/// selection order.
pub fn evaluate<T: Scalar, C: Classifier<T> + ?Sized>(
    selection: &Selection<T>,
    classifier: &C,
    cfg: &EissConfig,
) -> Result<EvaluationReport<T>> {
    cfg.validate()?;
    let run_one = |s: &EvalSample<T>| -> std::result::Result<ImageResult<T>, Skipped> {
        let skip = |e: Error| Skipped { image_id: s.image_id.clone(), reason: e.to_string() };
        let img = s.load().map_err(skip)?;
        let run = run_eiss(&img, classifier, cfg, Some(&s.truth)).map_err(skip)?;
        Ok(ImageResult::from_run(&s.image_id, &s.class_name, s.truth, &run, cfg.max_iterations))
    };
    let outcomes: Vec<_> = if classifier.concurrent() {
        selection.samples.par_iter().map(run_one).collect()
    } else {
        selection.samples.iter().map(run_one).collect()
    };

    let mut images = Vec::new();
    let mut skipped = selection.skipped.clone();
    for o in outcomes {
        match o {
            Ok(r) => images.push(r),
            Err(s) => skipped.push(s),
        }
    }
    Ok(EvaluationReport::from_images(cfg.max_iterations, images, skipped))
}

/// A curve and its `[0, 1]`-rescaled copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedCurve<T> {
    pub raw: Vec<T>,
    pub normalized: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSeries<T> {
    pub class_name: String,
    pub blackened: NormalizedCurve<T>,
    pub cropped: NormalizedCurve<T>,
    pub iou: NormalizedCurve<T>,
}

/// Affine map of `curve` onto `[0, 1]`; a constant curve maps to 0.5.
pub fn normalize_curve<T: Scalar>(curve: &[T]) -> Vec<T> {
    let lo = curve.iter().copied().fold(T::infinity(), T::min);
    let hi = curve.iter().copied().fold(T::neg_infinity(), T::max);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![T::lit(0.5); curve.len()];
    }
    curve.iter().map(|v| (*v - lo) / (hi - lo)).collect()
}

fn normalized<T: Scalar>(raw: &[T]) -> NormalizedCurve<T> {
    NormalizedCurve { raw: raw.to_vec(), normalized: normalize_curve(raw) }
}

/// Plot-ready series for every class, followed by the overall aggregate.
pub fn normalize_curves<T: Scalar>(report: &EvaluationReport<T>) -> Vec<ClassSeries<T>> {
    report
        .classes
        .iter()
        .chain(report.overall.as_ref())
        .map(|c| ClassSeries {
            class_name: c.class_name.clone(),
            blackened: normalized(&c.mean_blackened_curve),
            cropped: normalized(&c.mean_cropped_curve),
            iou: normalized(&c.mean_iou_curve),
        })
        .collect()
}
