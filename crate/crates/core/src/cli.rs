//! Command-line front end: `run`, `evaluate`, `synth-bench` and `export`.
//!
//! Searching commands are driven by a [`RunManifest`], read from
//! `--manifest` when given, with flags overriding its fields. The effective
//! manifest is written to the output directory as `manifest.toml`.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
//! validation error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::classifier::{load_pretrained, Classifier, OracleClassifier, OracleParams};
use crate::engine::{run_eiss, BlackenedRanking, EissConfig};
use crate::error::Error;
use crate::evaluation::{
    evaluate, export, parse_annotation, read_report_json, sample_dataset, single_instance,
    synthetic_selection, write_boxes_csv, write_prediction_json, write_trace_csv, EvaluationReport,
    ExportFormat, Selection, VocDataset,
};
use crate::geometry::Region;
use crate::imaging::{default_palette, generate_synthetic, Image, SyntheticSpec};

pub const MANIFEST_FILE: &str = "manifest.toml";
const DEFAULT_OUT: &str = "eiss-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    Oracle {
        /// Defaults to the synthetic palette when the input is synthetic.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        params: Option<OracleParams>,
    },
    Pretrained { model: PathBuf, meta: PathBuf },
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Oracle { params: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticInput {
    pub width: u32,
    pub height: u32,
    pub classes: usize,
    pub area_min: f64,
    pub area_max: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for SyntheticInput {
    fn default() -> Self {
        Self { width: 128, height: 128, classes: 2, area_min: 0.15, area_max: 0.35, count: 50, seed: 0 }
    }
}

impl SyntheticInput {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec::new(self.width, self.height, self.classes, (self.area_min, self.area_max))
    }
}

fn default_cap() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSpec {
    Image {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        annotation: Option<PathBuf>,
    },
    Dataset {
        images: PathBuf,
        annotations: PathBuf,
        #[serde(default = "default_cap")]
        per_class_cap: usize,
        #[serde(default)]
        seed: u64,
    },
    Synthetic(SyntheticInput),
}

/// Everything a searching command needs, in one serializable record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub config: EissConfig,
    #[serde(default)]
    pub backend: BackendSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<InputSpec>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Usage(format!("invalid manifest {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String, Failure> {
        toml::to_string(self).map_err(|e| Failure::Runtime(Error::InvalidConfig(e.to_string())))
    }
}

/// Why a command failed, split by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::InfeasibleSpec(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "eiss", version, about = "Classifier-guided blacken/crop region search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Search one image and write its trace, prediction and box list.
    Run {
        #[command(flatten)]
        search: SearchArgs,
        /// PNG image to search.
        #[arg(long, conflicts_with = "synthetic")]
        image: Option<PathBuf>,
        /// VOC-style annotation with the ground-truth box.
        #[arg(long, requires = "image")]
        annotation: Option<PathBuf>,
        /// Search one generated scene instead of an image file.
        #[arg(long)]
        synthetic: bool,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Search a dataset and write per-class curves and a report.
    Evaluate {
        #[command(flatten)]
        search: SearchArgs,
        #[arg(long, requires = "annotations", conflicts_with = "synthetic")]
        images: Option<PathBuf>,
        #[arg(long, requires = "images")]
        annotations: Option<PathBuf>,
        /// Maximum images drawn per class.
        #[arg(long)]
        cap: Option<usize>,
        /// Evaluate generated scenes instead of a dataset.
        #[arg(long)]
        synthetic: bool,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Evaluate the oracle backend on generated scenes.
    SynthBench {
        #[command(flatten)]
        search: SearchArgs,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Rewrite a saved report.json as CSV or JSON.
    Export {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: FormatArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Oracle,
    Pretrained,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RankingArg {
    Highest,
    MostOccluding,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// TOML manifest; flags override its fields.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Stopping threshold, percent of the initial self-score.
    #[arg(long)]
    eta: Option<f64>,
    /// Number of reference classes K.
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long = "max-iters")]
    max_iters: Option<usize>,
    #[arg(long)]
    stride: Option<u32>,
    /// Random proposals per iteration (M); omit for a full sweep.
    #[arg(long)]
    samples: Option<usize>,
    /// Seeds random proposals and, for synthetic input, scene generation.
    #[arg(long)]
    seed: Option<u64>,
    /// How blackened proposals are ranked.
    #[arg(long, value_enum)]
    ranking: Option<RankingArg>,
    /// Worker threads; 0 uses one per core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Network file for the pretrained backend.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Metadata file for the pretrained backend.
    #[arg(long)]
    meta: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
    #[arg(long)]
    classes: Option<usize>,
    /// Smallest object area as a fraction of the frame.
    #[arg(long)]
    area_min: Option<f64>,
    #[arg(long)]
    area_max: Option<f64>,
    /// Number of scenes.
    #[arg(long)]
    count: Option<usize>,
}

impl SynthArgs {
    fn apply(&self, s: &mut SyntheticInput) {
        set(&mut s.width, self.width);
        set(&mut s.height, self.height);
        set(&mut s.classes, self.classes);
        set(&mut s.area_min, self.area_min);
        set(&mut s.area_max, self.area_max);
        set(&mut s.count, self.count);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl SearchArgs {
    /// Manifest from `--manifest` (or defaults) with every flag applied.
    fn manifest(&self) -> Result<RunManifest, Failure> {
        let mut m = match &self.manifest {
            Some(p) => RunManifest::load(p)?,
            None => RunManifest::default(),
        };
        let c = &mut m.config;
        set(&mut c.alpha, self.alpha);
        set(&mut c.eta, self.eta);
        set(&mut c.k, self.topk);
        set(&mut c.max_iterations, self.max_iters);
        set(&mut c.stride, self.stride);
        set(&mut c.seed, self.seed);
        if self.samples.is_some() {
            c.sample_count = self.samples;
        }
        if let Some(r) = self.ranking {
            c.blackened_ranking = match r {
                RankingArg::Highest => BlackenedRanking::HighestScore,
                RankingArg::MostOccluding => BlackenedRanking::MostOccluding,
            };
        }

        match self.backend {
            Some(BackendArg::Oracle) if !matches!(m.backend, BackendSpec::Oracle { .. }) => {
                m.backend = BackendSpec::Oracle { params: None };
            }
            Some(BackendArg::Pretrained) => {
                let (model, meta) = match (&m.backend, &self.model, &self.meta) {
                    (_, Some(model), Some(meta)) => (model.clone(), meta.clone()),
                    (BackendSpec::Pretrained { model, meta }, a, b) => {
                        (a.clone().unwrap_or(model.clone()), b.clone().unwrap_or(meta.clone()))
                    }
                    _ => return Err(Failure::Usage("--backend pretrained needs --model and --meta".into())),
                };
                m.backend = BackendSpec::Pretrained { model, meta };
            }
            _ => {
                if let BackendSpec::Pretrained { model, meta } = &mut m.backend {
                    set(model, self.model.clone());
                    set(meta, self.meta.clone());
                } else if self.model.is_some() || self.meta.is_some() {
                    return Err(Failure::Usage("--model/--meta need --backend pretrained".into()));
                }
            }
        }
        if self.out.is_some() {
            m.output_dir = self.out.clone();
        }
        Ok(m)
    }
}

/// Applies synthetic flags, creating a synthetic input when `force` is set
/// or the manifest already has one.
fn synthetic_input(m: &mut RunManifest, synth: &SynthArgs, seed: Option<u64>, force: bool) -> Result<(), Failure> {
    if force && !matches!(m.input, Some(InputSpec::Synthetic(_))) {
        m.input = Some(InputSpec::Synthetic(SyntheticInput::default()));
    }
    if let Some(InputSpec::Synthetic(s)) = &mut m.input {
        synth.apply(s);
        set(&mut s.seed, seed);
        if s.count == 0 {
            return Err(Failure::Usage("synthetic count must be at least 1".into()));
        }
    }
    Ok(())
}

fn build_classifier(m: &RunManifest) -> Result<Box<dyn Classifier<f64>>, Failure> {
    match &m.backend {
        BackendSpec::Oracle { params } => {
            let params = match (params, &m.input) {
                (Some(p), _) => p.clone(),
                (None, Some(InputSpec::Synthetic(s))) => OracleParams::with_palette(default_palette(s.classes)),
                (None, _) => OracleParams::default(),
            };
            Ok(Box::new(OracleClassifier::new(params)?))
        }
        BackendSpec::Pretrained { model, meta } => {
            for p in [model, meta] {
                if !p.is_file() {
                    return Err(Failure::Usage(format!("no such file: {}", p.display())));
                }
            }
            Ok(Box::new(load_pretrained(model, meta)?))
        }
    }
}

fn output_dir(m: &mut RunManifest) -> Result<PathBuf, Failure> {
    let dir = m.output_dir.get_or_insert_with(|| PathBuf::from(DEFAULT_OUT)).clone();
    fs::create_dir_all(&dir)
        .map_err(|e| Failure::Usage(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_manifest(m: &RunManifest, dir: &Path) -> Result<(), Failure> {
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, m.to_toml()?).map_err(|e| Failure::Runtime(Error::Io(e)))
}

fn cmd_run(mut m: RunManifest) -> Result<(), Failure> {
    m.config.validate()?;
    let (img, truth): (Image<f64>, Option<Region>) = match &m.input {
        Some(InputSpec::Image { path, annotation }) => {
            if !path.is_file() {
                return Err(Failure::Usage(format!("no such image: {}", path.display())));
            }
            let truth = match annotation {
                Some(a) => {
                    let bytes = fs::read(a)
                        .map_err(|e| Failure::Usage(format!("cannot read annotation {}: {e}", a.display())))?;
                    let objects = parse_annotation(&bytes)?;
                    let n = objects.len();
                    let single = single_instance(objects).ok_or_else(|| {
                        Failure::Usage(format!("annotation {} holds {n} objects, expected one", a.display()))
                    })?;
                    Some(single.bbox)
                }
                None => None,
            };
            (Image::load(path)?, truth)
        }
        Some(InputSpec::Synthetic(s)) => {
            let sample = generate_synthetic(&s.spec(), s.seed)?;
            (sample.image, Some(sample.truth))
        }
        Some(InputSpec::Dataset { .. }) => return Err(Failure::Usage("`run` takes a single image".into())),
        None => return Err(Failure::Usage("no input: pass --image or --synthetic".into())),
    };
    let classifier = build_classifier(&m)?;
    let dir = output_dir(&mut m)?;
    let result = run_eiss(&img, classifier.as_ref(), &m.config, truth.as_ref())?;

    write_trace_csv(&result, &dir.join("trace.csv"))?;
    write_prediction_json(&result, classifier.labels(), truth.as_ref(), &dir.join("prediction.json"))?;
    write_boxes_csv(&result, truth.as_ref(), &dir.join("boxes.csv"))?;
    write_manifest(&m, &dir)?;

    print!("final_region={} stop_reason={} iterations={}", result.final_region, result.stop_reason, result.records.len());
    if let Some(t) = &truth {
        print!(" iou={}", result.final_region.iou::<f64>(t));
    }
    println!();
    Ok(())
}

fn cmd_evaluate(mut m: RunManifest) -> Result<(), Failure> {
    m.config.validate()?;
    let selection: Selection<f64> = match &m.input {
        Some(InputSpec::Dataset { images, annotations, per_class_cap, seed }) => {
            for d in [images, annotations] {
                if !d.is_dir() {
                    return Err(Failure::Usage(format!("no such directory: {}", d.display())));
                }
            }
            let data = VocDataset::load(images, annotations)?;
            sample_dataset(data.samples(), *per_class_cap, *seed, data.skipped)?
        }
        Some(InputSpec::Synthetic(s)) => synthetic_selection(&s.spec(), s.count, s.seed)?,
        Some(InputSpec::Image { .. }) => {
            return Err(Failure::Usage("`evaluate` takes a dataset or synthetic input".into()))
        }
        None => return Err(Failure::Usage("no input: pass --images/--annotations or --synthetic".into())),
    };
    let classifier = build_classifier(&m)?;
    let dir = output_dir(&mut m)?;
    let report = evaluate(&selection, classifier.as_ref(), &m.config)?;
    export(&report, ExportFormat::Csv, &dir)?;
    export(&report, ExportFormat::Json, &dir)?;
    write_manifest(&m, &dir)?;
    print_summary(&report);
    Ok(())
}

fn print_summary(report: &EvaluationReport<f64>) {
    match report.mean_final_iou() {
        Some(v) => println!("mean_iou={v}"),
        None => println!("mean_iou=n/a"),
    }
    println!("evaluated={} skipped={}", report.images.len(), report.skipped.len());
    for s in &report.skipped {
        println!("skipped {}: {}", s.image_id, s.reason);
    }
}

fn cmd_export(report: &Path, format: FormatArg, out: &Path) -> Result<(), Failure> {
    if !report.is_file() {
        return Err(Failure::Usage(format!("no such report: {}", report.display())));
    }
    let report: EvaluationReport<f64> = read_report_json(report)?;
    let format = match format {
        FormatArg::Csv => ExportFormat::Csv,
        FormatArg::Json => ExportFormat::Json,
    };
    for path in export(&report, format, out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn in_pool<F: FnOnce() -> Result<(), Failure> + Send>(workers: usize, f: F) -> Result<(), Failure> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Failure::Runtime(Error::InvalidConfig(e.to_string())))?;
    pool.install(f)
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { search, image, annotation, synthetic, synth } => {
            let mut m = search.manifest()?;
            if let Some(path) = image {
                m.input = Some(InputSpec::Image { path, annotation });
            }
            // A single scene: `count` is ignored and the seed picks the scene.
            synthetic_input(&mut m, &synth, search.seed, synthetic)?;
            in_pool(search.workers, || cmd_run(m))
        }
        Command::Evaluate { search, images, annotations, cap, synthetic, synth } => {
            let mut m = search.manifest()?;
            if let (Some(images), Some(annotations)) = (images, annotations) {
                m.input = Some(InputSpec::Dataset {
                    images,
                    annotations,
                    per_class_cap: default_cap(),
                    seed: m.config.seed,
                });
            }
            if let Some(InputSpec::Dataset { per_class_cap, seed, .. }) = &mut m.input {
                set(per_class_cap, cap);
                set(seed, search.seed);
            }
            synthetic_input(&mut m, &synth, search.seed, synthetic)?;
            in_pool(search.workers, || cmd_evaluate(m))
        }
        Command::SynthBench { search, synth } => {
            let mut m = search.manifest()?;
            synthetic_input(&mut m, &synth, search.seed, true)?;
            if let BackendSpec::Pretrained { .. } = m.backend {
                return Err(Failure::Usage("synth-bench runs the oracle backend".into()));
            }
            in_pool(search.workers, || cmd_evaluate(m))
        }
        Command::Export { report, format, out } => cmd_export(&report, format, &out),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{f}");
            f.exit_code()
        }
    }
}

pub fn main_with_args() -> i32 {
    run_cli(std::env::args_os())
}
