//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use eiss::engine::{initial_reference, run_iteration, should_stop, SearchRng};
use eiss::evaluation::{parse_annotation, single_instance, ImageResult, VocDataset};
use eiss::imaging::{crop_rescale, generate_synthetic, SyntheticSample};
use eiss::{
    run_eiss, Classifier, EissConfig, EissResultF64, Image, ImageF64, OracleClassifier, OracleParams, Region,
    ReportF64, StopReason, SyntheticSpec,
};
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

const SUITE_SIZE: u64 = 50;
const CURVE_TOL: f64 = 0.02;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn suite_spec(width: u32, height: u32) -> SyntheticSpec {
    SyntheticSpec::new(width, height, 2, (0.15, 0.35))
}

fn oracle(spec: &SyntheticSpec) -> OracleClassifier {
    // Peak fraction 0.3 is the default.
    OracleClassifier::new(OracleParams::with_palette(spec.palette.clone())).unwrap()
}

fn suite(spec: &SyntheticSpec, n: u64) -> Vec<SyntheticSample<f64>> {
    (0..n).map(|seed| generate_synthetic(spec, seed).unwrap()).collect()
}

fn run_suite(samples: &[SyntheticSample<f64>], c: &OracleClassifier, cfg: &EissConfig) -> Vec<EissResultF64> {
    samples
        .par_iter()
        .map(|s| run_eiss(&s.image, c, cfg, Some(&s.truth)).unwrap())
        .collect()
}

fn mean_final_iou(samples: &[SyntheticSample<f64>], runs: &[EissResultF64]) -> f64 {
    let total: f64 = samples.iter().zip(runs).map(|(s, r)| r.final_region.iou::<f64>(&s.truth)).sum();
    total / runs.len() as f64
}

/// Pixel-set IOU by rasterizing both boxes.
fn raster_iou(a: &Region, b: &Region, frame: u32) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for y in 0..frame {
        for x in 0..frame {
            let (ia, ib) = (a.contains_pixel(x, y), b.contains_pixel(x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    inter as f64 / union as f64
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = SearchRng::seed_from_u64(1);
    let random_region = |rng: &mut SearchRng| {
        let x = rng.random_range(0..64);
        let y = rng.random_range(0..64);
        let w = rng.random_range(1..=64 - x);
        let h = rng.random_range(1..=64 - y);
        Region::new(x, y, w, h).unwrap()
    };
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let a = random_region(&mut rng);
        let b = random_region(&mut rng);
        let expected = raster_iou(&a, &b, 64);
        let got: f64 = a.iou(&b);
        let err = if expected == 0.0 { got.abs() } else { ((got - expected) / expected).abs() };
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-12 && elapsed < Duration::from_secs(5),
        format!("max relative error {worst:e} over 1000 pairs in {elapsed:.2?}"),
    )
}

/// Every stride-1 child of `parent`, scored independently of the engine.
fn brute_force_top5(img: &ImageF64, c: &OracleClassifier, parent: &Region, alpha: f64) -> (Vec<Region>, Vec<Region>) {
    let side = |s: u32| ((alpha * f64::from(s) + 0.5).floor() as u32).min(s);
    let (cw, ch) = (side(parent.w), side(parent.h));
    let resp = Classifier::<f64>::classify(c, img).unwrap();
    let reference = eiss::TopKReference::from_response(&resp, 1).unwrap();
    let (class, ref_p) = (reference.class_indices[0], reference.ref_probs[0]);
    let dims = Classifier::<f64>::input_dims(c);

    let mut scored = Vec::new();
    for y in parent.y..=parent.bottom() - ch {
        for x in parent.x..=parent.right() - cw {
            let r = Region::new(x, y, cw, ch).unwrap();
            let mut pixels = img.pixels().to_vec();
            for py in y..y + ch {
                for px in x..x + cw {
                    let i = 3 * (py * img.width() + px) as usize;
                    pixels[i..i + 3].fill(0.0);
                }
            }
            let black = Image::from_pixels(img.width(), img.height(), 3, pixels).unwrap();
            let b = c.classify(&black).unwrap().probs()[class] * ref_p;
            let crop = crop_rescale(img, &r, dims).unwrap();
            let k = c.classify(&crop).unwrap().probs()[class] * ref_p;
            scored.push((r, b, k));
        }
    }
    // Stable sorts keep row-major order among equal scores.
    let mut by_black = scored.clone();
    by_black.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut by_crop = scored;
    by_crop.sort_by(|a, b| b.2.total_cmp(&a.2));
    (
        by_black.iter().take(5).map(|s| s.0).collect(),
        by_crop.iter().take(5).map(|s| s.0).collect(),
    )
}

fn criterion_2() -> Outcome {
    let spec = suite_spec(32, 32);
    let c = oracle(&spec);
    let cfg = EissConfig::default();
    let mut mismatches = 0;
    for sample in suite(&spec, 20) {
        let reference = initial_reference(&c, &sample.image, cfg.k).unwrap();
        let frame = sample.image.frame();
        let mut rng = SearchRng::seed_from_u64(cfg.seed);
        let rec = run_iteration(&sample.image, &c, &reference, &frame, &cfg, 1, &mut rng).unwrap();
        let (black, crop) = brute_force_top5(&sample.image, &c, &frame, cfg.alpha);
        if rec.top_blackened != black || rec.top_cropped != crop {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} of 20 images differ from the brute-force top-5"))
}

fn diffs(curve: &[f64]) -> Vec<f64> {
    curve.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Signs of the steps that move by more than `tol` follow `+* -*`.
fn unimodal(curve: &[f64], tol: f64) -> bool {
    let signs: Vec<bool> = diffs(curve).into_iter().filter(|d| d.abs() > tol).map(|d| d > 0.0).collect();
    let changes = signs.windows(2).filter(|w| w[0] != w[1]).count();
    changes == 0 || (changes == 1 && signs[0])
}

fn crossings(a: &[f64], b: &[f64]) -> usize {
    let above: Vec<bool> = a.iter().zip(b).map(|(x, y)| x >= y).collect();
    above.windows(2).filter(|w| w[0] != w[1]).count()
}

fn criterion_3(samples: &[SyntheticSample<f64>], runs: &[EissResultF64], elapsed: Duration) -> Outcome {
    let images: Vec<ImageResult<f64>> = samples
        .iter()
        .zip(runs)
        .enumerate()
        .map(|(i, (s, r))| ImageResult::from_run(&format!("{i}"), "object", s.truth, r, 30))
        .collect();
    let report = ReportF64::from_images(30, images, Vec::new());
    let overall = report.overall.as_ref().unwrap();
    let (b, c) = (&overall.mean_blackened_curve, &overall.mean_cropped_curve);
    let worst_drop = diffs(b).into_iter().fold(0.0f64, |m, d| m.min(d));
    let non_decreasing = worst_drop >= -CURVE_TOL;
    let uni = unimodal(c, CURVE_TOL);
    let cross = crossings(b, c);
    let fast = elapsed < Duration::from_secs(600);
    outcome(
        non_decreasing && uni && cross <= 1 && fast,
        format!(
            "blackened {:.4}->{:.4} (worst step {worst_drop:+.4}), cropped {:.4}->{:.4} unimodal={uni}, \
             crossings={cross}, suite time {elapsed:.1?}",
            b[0],
            b[29],
            c[0],
            c[29]
        ),
    )
}

fn criterion_4(samples: &[SyntheticSample<f64>], runs: &[EissResultF64]) -> Outcome {
    let iou = mean_final_iou(samples, runs);
    let early = runs
        .iter()
        .filter(|r| r.stop_reason == StopReason::EtaThreshold && r.records.len() < 30)
        .count();
    let share = early as f64 / runs.len() as f64;
    outcome(
        iou >= 0.5 && share >= 0.8,
        format!("mean IOU {iou:.4} (need >= 0.5), eta stops before 30 iterations {early}/{} (need >= 80%)", runs.len()),
    )
}

fn criterion_5(runs: &[EissResultF64]) -> Outcome {
    let mut violations = 0;
    for run in runs {
        let frames: Vec<Region> = run.records.iter().map(|r| r.resultant_region).collect();
        for w in frames.windows(2) {
            if !w[0].contains(&w[1]) || w[1].area() > w[0].area() {
                violations += 1;
            }
        }
    }
    outcome(violations == 0, format!("{violations} nesting/shrinkage violations over {} runs", runs.len()))
}

fn criterion_6(samples: &[SyntheticSample<f64>], c: &OracleClassifier, explicit: &[EissResultF64]) -> Outcome {
    let frame = samples[0].image.frame();
    let grid = eiss::geometry::Grid::new(frame, 0.8, 1).unwrap().len();
    let full = EissConfig { sample_count: Some(grid), ..Default::default() };
    let differing = samples[..10]
        .iter()
        .zip(&explicit[..10])
        .filter(|(s, e)| &run_eiss(&s.image, c, &full, Some(&s.truth)).unwrap() != *e)
        .count();

    let sampled = EissConfig { sample_count: Some(16), ..Default::default() };
    let sampled_runs = run_suite(samples, c, &sampled);
    let (base, m16) = (mean_final_iou(samples, explicit), mean_final_iou(samples, &sampled_runs));
    outcome(
        differing == 0 && base - m16 <= 0.15,
        format!(
            "M={grid}: {differing}/10 results differ from the sweep; M=16 mean IOU {m16:.4} vs explicit {base:.4} \
             (drop {:.4}, limit 0.15)",
            base - m16
        ),
    )
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("bench.toml");
    std::fs::write(
        &manifest,
        "[config]\nseed = 11\n\n[input]\nkind = \"synthetic\"\nwidth = 128\nheight = 128\nclasses = 2\n\
         area_min = 0.15\narea_max = 0.35\ncount = 50\nseed = 5\n",
    )
    .unwrap();
    let mut codes = Vec::new();
    for workers in ["1", "8"] {
        let out = dir.path().join(format!("w{workers}"));
        codes.push(eiss::cli::run_cli([
            "eiss",
            "synth-bench",
            "--manifest",
            manifest.to_str().unwrap(),
            "--workers",
            workers,
            "--out",
            out.to_str().unwrap(),
        ]));
    }
    let files = ["curves.csv", "overall.csv", "report.json"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| {
            let a = std::fs::read(dir.path().join("w1").join(f));
            let b = std::fs::read(dir.path().join("w8").join(f));
            !matches!((a, b), (Ok(a), Ok(b)) if a == b)
        })
        .collect();
    outcome(
        codes == [0, 0] && differing.is_empty(),
        format!("exit codes {codes:?}, differing outputs {differing:?}"),
    )
}

fn criterion_8() -> Outcome {
    let voc = fixtures().join("voc");
    let single = parse_annotation(&std::fs::read(voc.join("annotations/single.xml")).unwrap()).unwrap();
    let region = single_instance(single).map(|a| a.bbox);
    let expected = Region::new(47, 239, 148, 132).unwrap();
    let multi = parse_annotation(&std::fs::read(voc.join("annotations/multi.xml")).unwrap()).unwrap();
    let objects = multi.len();
    let filtered = single_instance(multi).is_none();
    let data = VocDataset::load(&voc, &voc.join("annotations")).unwrap();
    let kept: Vec<&str> = data.entries.iter().map(|(a, _)| a.image_id.as_str()).collect();
    outcome(
        region == Some(expected) && objects == 2 && filtered && data.multi_instance == ["multi"],
        format!("bndbox -> {region:?}, multi-object fixture ({objects} objects) filtered={filtered}, kept {kept:?}"),
    )
}

fn criterion_9() -> Outcome {
    let table = [
        (0.3, 0.3, 0.49, 10.0, true),
        (0.1, 0.4, 0.49, 0.0, false),
        (0.1, 0.1 + 0.048, 0.49, 10.0, true),
    ];
    let wrong = table.iter().filter(|(b, c, s0, eta, want)| should_stop(*b, *c, *s0, *eta) != *want).count();
    outcome(wrong == 0, format!("{wrong} of {} rows wrong", table.len()))
}

fn report(n: usize, name: &str, o: Outcome, failed: &mut Vec<usize>) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {n} [{tag}] {name}: {}", o.detail);
    if !o.pass {
        failed.push(n);
    }
}

fn main() {
    let mut failed = Vec::new();
    report(1, "iou exactness", criterion_1(), &mut failed);
    report(2, "sweep equivalence", criterion_2(), &mut failed);

    let spec = suite_spec(128, 128);
    let c = oracle(&spec);
    let samples = suite(&spec, SUITE_SIZE);
    let shape_cfg = EissConfig { eta: 0.0, max_iterations: 30, ..Default::default() };
    let start = Instant::now();
    let shape_runs = run_suite(&samples, &c, &shape_cfg);
    let shape_time = start.elapsed();
    report(3, "curve shapes", criterion_3(&samples, &shape_runs, shape_time), &mut failed);

    let default_runs = run_suite(&samples, &c, &EissConfig::default());
    report(4, "localization", criterion_4(&samples, &default_runs), &mut failed);
    report(5, "nesting", criterion_5(&shape_runs), &mut failed);
    report(6, "random search", criterion_6(&samples, &c, &default_runs), &mut failed);
    report(7, "determinism", criterion_7(), &mut failed);
    report(8, "voc ingestion", criterion_8(), &mut failed);
    report(9, "stopping rule", criterion_9(), &mut failed);

    if failed.is_empty() {
        println!("acceptance: all 9 criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
