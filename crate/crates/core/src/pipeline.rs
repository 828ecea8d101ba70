//! Configuration and the end-to-end run: index, plan, generate, merge, stats.
//!
//! Every artifact lands under the output directory:
//!
//! ```text
//! <out>/plan.jsonl       one entry per line
//! <out>/plan.meta.json   n_balance and the origin index fingerprint
//! <out>/gen/      synthetic VOC tree, manifest.jsonl, failures.jsonl
//! <out>/final/    merged VOC tree (files hard-linked or copied)
//! <out>/stats.json
//! <out>/report.json
//! ```
//!
//! An existing artifact is only replaced when its new content is identical
//! or `force` is set; `force` also discards a previous `gen/` tree.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blend::{export_control_image, BlendWeights};
use crate::dataset::{
    decode_mask, load_index, split_path, DatasetError, DatasetIndex, LabelSchema, IMAGE_DIR, MANIFEST_FILE, MASK_DIR,
};
use crate::fsutil;
use crate::generation::{
    compute_priors, execute_plan, AcceptAll, Backend, ExecuteError, ExecuteOptions, ExecutionReport, FailureRecord,
    HttpBackend, MockBackend, RetryPolicy, Services, DEFAULT_CONTROL_KIND, DEFAULT_STEPS, FAILURES_FILE,
    GENERATE_TIMEOUT,
};
use crate::metrics::{self, class_counts, ClassIou, ConfusionMatrix, DatasetStats, MetricsError};
use crate::planner::{auto_n_balance, make_plan, GenerationPlan, PlanError, PlanMeta};
use crate::prior::{CannyParams, DetectorKind, HttpDetector, Polarity, PriorDetector, PriorError};
use crate::prompt::{CaptionSource, HttpCaptioner, SidecarCaptions, Template};

pub const ENDPOINT_ENV: &str = "CTRLAUG_ENDPOINT";
pub const PLAN_FILE: &str = "plan.jsonl";
pub const PLAN_META_FILE: &str = "plan.meta.json";
pub const GEN_DIR: &str = "gen";
pub const FINAL_DIR: &str = "final";
pub const STATS_FILE: &str = "stats.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Index,
    Plan,
    Priors,
    Generate,
    Merge,
    Stats,
    Eval,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        f.write_str(&s)
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Execute(#[from] ExecuteError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} already exists with different content; pass --force to overwrite")]
    ArtifactExists(PathBuf),
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: StageError,
}

pub(crate) trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: Into<StageError>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError { stage, source: e.into() })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StageError + '_ {
    move |source| StageError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum PriorConfig {
    #[default]
    BuiltinCanny,
    Service {
        kind: DetectorKind,
        endpoint: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum CaptionConfig {
    /// `<dir>/<id>.txt`; defaults to `<root>/captions`.
    Sidecar {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
    },
    Service {
        endpoint: String,
    },
}

fn default_split() -> String {
    "train".into()
}
fn default_w1() -> f64 {
    BlendWeights::default().w1
}
fn default_w2() -> f64 {
    BlendWeights::default().w2
}
fn default_ratio() -> f64 {
    1.0
}
fn default_captions() -> Vec<CaptionConfig> {
    vec![CaptionConfig::Sidecar { dir: None }]
}
fn default_parallelism() -> usize {
    2
}
fn default_steps() -> u32 {
    DEFAULT_STEPS
}
fn default_control_kind() -> String {
    DEFAULT_CONTROL_KIND.into()
}
fn default_http_retries() -> u32 {
    RetryPolicy::default().retries
}
fn default_out() -> PathBuf {
    PathBuf::from("ctrlaug-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub root: PathBuf,
    #[serde(default = "default_split")]
    pub split: String,
    /// JSON label schema; the VOC schema when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
    #[serde(default = "default_w1")]
    pub w1: f64,
    #[serde(default = "default_w2")]
    pub w2: f64,
    /// Fixed per-class target; when absent it is chosen from `auto_ratio`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_balance: Option<u32>,
    #[serde(default = "default_ratio")]
    pub auto_ratio: f64,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub canny: CannyParams,
    #[serde(default)]
    pub boundary_dilation: u32,
    #[serde(default = "default_captions")]
    pub captions: Vec<CaptionConfig>,
    #[serde(default)]
    pub fallback_template: Template,
    #[serde(default)]
    pub backend: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Extra top-level fields sent with every HTTP generate request
    /// (sampler, guidance scale and the like).
    /// Retries after a failed HTTP generate attempt.
    #[serde(default = "default_http_retries")]
    pub http_retries: u32,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub backend_options: serde_json::Map<String, serde_json::Value>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_steps")]
    pub steps: u32,
    #[serde(default = "default_control_kind")]
    pub control_kind: String,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

impl PipelineConfig {
    pub fn new(root: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        let mut cfg: PipelineConfig =
            serde_json::from_value(serde_json::json!({ "root": root.into() })).expect("defaults deserialize");
        cfg.out = out.into();
        cfg
    }

    pub fn from_json_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path)).at(Stage::Config)?;
        serde_json::from_str(&text)
            .map_err(|e| StageError::Config(format!("{}: {e}", path.display())))
            .at(Stage::Config)
    }

    pub fn weights(&self) -> BlendWeights {
        BlendWeights { w1: self.w1, w2: self.w2 }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |msg: String| Err(StageError::Config(msg)).at(Stage::Config);
        if let Err(e) = self.weights().validate() {
            return fail(e.to_string());
        }
        if self.parallelism < 1 {
            return fail("parallelism must be at least 1".into());
        }
        if self.steps < 1 {
            return fail("steps must be at least 1".into());
        }
        if self.n_balance == Some(0) {
            return fail("n_balance must be at least 1".into());
        }
        if !(self.auto_ratio.is_finite() && self.auto_ratio >= 0.0) {
            return fail(format!("auto_ratio must be non-negative, got {}", self.auto_ratio));
        }
        if let Err(e) = self.canny.validate() {
            return fail(e.to_string());
        }
        if self.backend == BackendKind::Http && self.endpoint.is_none() {
            return fail(format!("the http backend needs an endpoint (--endpoint or {ENDPOINT_ENV})"));
        }
        Ok(())
    }

    pub fn load_schema(&self) -> Result<LabelSchema, PipelineError> {
        match &self.schema {
            Some(path) => LabelSchema::from_json_file(path).at(Stage::Config),
            None => Ok(LabelSchema::voc()),
        }
    }

    pub fn execute_options(&self) -> ExecuteOptions {
        ExecuteOptions {
            weights: self.weights(),
            canny: self.canny,
            boundary_dilation: self.boundary_dilation,
            steps: self.steps,
            control_kind: self.control_kind.clone(),
            fallback_template: self.fallback_template,
            parallelism: self.parallelism,
        }
    }

    pub fn build_backend(&self) -> Box<dyn Backend> {
        match (self.backend, &self.endpoint) {
            (BackendKind::Http, Some(endpoint)) => {
                let retry = RetryPolicy { retries: self.http_retries, ..RetryPolicy::default() };
                Box::new(
                    HttpBackend::with_options(endpoint, GENERATE_TIMEOUT, retry)
                        .with_extra(self.backend_options.clone()),
                )
            }
            _ => Box::new(MockBackend),
        }
    }

    pub fn build_detector(&self) -> Option<Box<dyn PriorDetector>> {
        match &self.prior {
            PriorConfig::BuiltinCanny => None,
            PriorConfig::Service { kind, endpoint } => Some(Box::new(HttpDetector::new(endpoint, *kind))),
        }
    }

    pub fn build_captions(&self) -> Vec<Box<dyn CaptionSource>> {
        self.captions
            .iter()
            .map(|c| -> Box<dyn CaptionSource> {
                match c {
                    CaptionConfig::Sidecar { dir: Some(dir) } => Box::new(SidecarCaptions::new(dir)),
                    CaptionConfig::Sidecar { dir: None } => Box::new(SidecarCaptions::for_root(&self.root)),
                    CaptionConfig::Service { endpoint } => Box::new(HttpCaptioner::new(endpoint)),
                }
            })
            .collect()
    }
}

/// Writes `bytes` unless an identical file is already there. A differing file
/// is only replaced with `force`.
pub fn write_artifact(path: &Path, bytes: &[u8], force: bool) -> Result<(), StageError> {
    if path.exists() {
        let current = fs::read(path).map_err(io_err(path))?;
        if current == bytes {
            return Ok(());
        }
        if !force {
            return Err(StageError::ArtifactExists(path.to_path_buf()));
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fsutil::write_atomic(path, bytes).map_err(io_err(path))
}

fn link_or_copy(src: &Path, dest: &Path, force: bool) -> Result<(), StageError> {
    if dest.exists() {
        if fs::read(dest).map_err(io_err(dest))? == fs::read(src).map_err(io_err(src))? {
            return Ok(());
        }
        if !force {
            return Err(StageError::ArtifactExists(dest.to_path_buf()));
        }
        fs::remove_file(dest).map_err(io_err(dest))?;
    }
    if fs::hard_link(src, dest).is_err() {
        fs::copy(src, dest).map_err(io_err(dest))?;
    }
    Ok(())
}

/// Materializes `merged` as a VOC tree at `dest` and returns the split file path.
pub fn write_merged_tree(
    merged: &DatasetIndex,
    gen_root: Option<&Path>,
    dest: &Path,
    force: bool,
) -> Result<PathBuf, StageError> {
    for dir in [IMAGE_DIR, MASK_DIR] {
        let d = dest.join(dir);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let mut listing = String::new();
    for s in &merged.samples {
        let ext = s.image_path.extension().and_then(|e| e.to_str()).unwrap_or("png");
        link_or_copy(&s.image_path, &dest.join(IMAGE_DIR).join(format!("{}.{ext}", s.sample_id)), force)?;
        link_or_copy(&s.mask_path, &dest.join(MASK_DIR).join(format!("{}.png", s.sample_id)), force)?;
        listing.push_str(&s.sample_id);
        listing.push('\n');
    }
    if let Some(gen_root) = gen_root {
        let manifest = gen_root.join(MANIFEST_FILE);
        let bytes = if manifest.is_file() { fs::read(&manifest).map_err(io_err(&manifest))? } else { Vec::new() };
        write_artifact(&dest.join(MANIFEST_FILE), &bytes, force)?;
    }
    let split = split_path(dest, &merged.split);
    write_artifact(&split, listing.as_bytes(), force)?;
    Ok(split)
}

/// Expected balance statistics to compare the origin dataset against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTarget {
    pub entropy: f64,
    pub imbalance_ratio: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub target: CalibrationTarget,
    pub entropy: Option<f64>,
    pub imbalance_ratio: Option<f64>,
    pub entropy_deviation: Option<f64>,
    pub imbalance_ratio_deviation: Option<f64>,
    pub within_tolerance: bool,
}

impl Calibration {
    pub fn compare(stats: &DatasetStats, target: CalibrationTarget) -> Self {
        let entropy_deviation = stats.entropy.map(|e| e - target.entropy);
        let imbalance_ratio_deviation = stats.imbalance_ratio.map(|c| c - target.imbalance_ratio);
        let ok = |d: Option<f64>| d.is_some_and(|d| d.abs() <= target.tolerance);
        Self {
            target,
            entropy: stats.entropy,
            imbalance_ratio: stats.imbalance_ratio,
            entropy_deviation,
            imbalance_ratio_deviation,
            within_tolerance: ok(entropy_deviation) && ok(imbalance_ratio_deviation),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub origin: DatasetStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gen: Option<DatasetStats>,
    #[serde(rename = "final", skip_serializing_if = "Option::is_none")]
    pub final_: Option<DatasetStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<Calibration>,
}

impl StatsReport {
    /// Origin-only when `gen` is absent or empty.
    pub fn build(origin: &DatasetIndex, gen: Option<&DatasetIndex>) -> Self {
        let origin_stats = DatasetStats::of(origin);
        match gen.filter(|g| !g.is_empty()) {
            None => Self { origin: origin_stats, gen: None, final_: None, calibration: None },
            Some(gen) => {
                let final_counts = class_counts(origin).add(&class_counts(gen));
                Self {
                    origin: origin_stats,
                    gen: Some(DatasetStats::of(gen)),
                    final_: Some(DatasetStats::from_counts(origin.len() + gen.len(), &final_counts, &origin.schema)),
                    calibration: None,
                }
            }
        }
    }

    pub fn with_calibration(mut self, target: CalibrationTarget) -> Self {
        self.calibration = Some(Calibration::compare(&self.origin, target));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub plan: String,
    pub plan_meta: String,
    pub gen_root: String,
    pub manifest: String,
    pub failures: String,
    pub final_split: String,
    pub stats: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// The effective configuration, minus the output directory.
    pub config: serde_json::Value,
    pub n_balance: u32,
    pub n_balance_auto: bool,
    pub plan_entries: usize,
    pub skipped_classes: Vec<String>,
    pub origin_samples: usize,
    pub gen_samples: usize,
    pub final_samples: usize,
    pub generated_this_run: usize,
    pub resumed: usize,
    pub failures: Vec<FailureRecord>,
    /// Paths relative to the output directory.
    pub artifacts: Artifacts,
}

impl RunReport {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

fn rel(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

fn to_pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
    bytes.push(b'\n');
    bytes
}

/// Chooses `n_balance` from the config: the fixed value, else the auto search.
pub fn resolve_n_balance(config: &PipelineConfig, origin: &DatasetIndex) -> Result<(u32, bool), PlanError> {
    match config.n_balance {
        Some(n) => Ok((n, false)),
        None => auto_n_balance(origin, config.auto_ratio).map(|n| (n, true)),
    }
}

/// Writes the plan and its meta file into `out`.
pub fn write_plan(plan: &GenerationPlan, out: &Path, force: bool) -> Result<(), StageError> {
    write_artifact(&out.join(PLAN_META_FILE), &to_pretty_json(&plan.meta()), force)?;
    write_artifact(&out.join(PLAN_FILE), plan.to_jsonl().as_bytes(), force)
}

/// Existing synthetic index under `<out>/gen`, if any.
pub fn load_gen(out: &Path, split: &str, schema: &LabelSchema) -> Result<Option<DatasetIndex>, DatasetError> {
    let root = out.join(GEN_DIR);
    if split_path(&root, split).is_file() {
        load_index(&root, split, schema).map(Some)
    } else {
        Ok(None)
    }
}

/// Indexes the origin dataset named by the config.
pub fn stage_index(config: &PipelineConfig) -> Result<DatasetIndex, PipelineError> {
    config.validate()?;
    let schema = config.load_schema()?;
    load_index(&config.root, &config.split, &schema).at(Stage::Index)
}

/// Plans from `origin` and writes `<out>/plan.jsonl`.
pub fn stage_plan(
    config: &PipelineConfig,
    origin: &DatasetIndex,
    force: bool,
) -> Result<(GenerationPlan, bool), PipelineError> {
    let (n_balance, auto) = resolve_n_balance(config, origin).at(Stage::Plan)?;
    let plan = make_plan(origin, n_balance).at(Stage::Plan)?;
    write_plan(&plan, &config.out, force).at(Stage::Plan)?;
    Ok((plan, auto))
}

/// Reads the plan written by [`write_plan`].
pub fn read_plan(out: &Path) -> Result<GenerationPlan, PipelineError> {
    let read = |name: &str| {
        let path = out.join(name);
        fs::read_to_string(&path).map_err(io_err(&path)).at(Stage::Plan)
    };
    let meta: PlanMeta = serde_json::from_str(&read(PLAN_META_FILE)?)
        .map_err(|e| StageError::Config(format!("{PLAN_META_FILE}: {e}")))
        .at(Stage::Plan)?;
    GenerationPlan::from_jsonl(meta, &read(PLAN_FILE)?).at(Stage::Plan)
}

/// Executes `plan` into `<out>/gen`, resuming whatever is already there.
/// With `force` the previous `gen/` and `final/` trees are discarded first.
pub fn stage_generate(
    config: &PipelineConfig,
    origin: &DatasetIndex,
    plan: &GenerationPlan,
    force: bool,
) -> Result<(DatasetIndex, ExecutionReport), PipelineError> {
    let gen_root = config.out.join(GEN_DIR);
    if force {
        for dir in [&gen_root, &config.out.join(FINAL_DIR)] {
            if dir.exists() {
                fs::remove_dir_all(dir).map_err(io_err(dir)).at(Stage::Generate)?;
            }
        }
    }
    let mut gen = DatasetIndex::open_or_create(&gen_root, &config.split, &origin.schema).at(Stage::Generate)?;
    let backend = config.build_backend();
    let detector = config.build_detector();
    let captions = config.build_captions();
    let services =
        Services { backend: backend.as_ref(), captions: &captions, detector: detector.as_deref(), filter: &AcceptAll };
    let report = execute_plan(plan, origin, &mut gen, &services, &config.execute_options()).at(Stage::Generate)?;
    Ok((gen, report))
}

/// Merges origin and synthetic samples into `<out>/final`.
pub fn stage_merge(
    config: &PipelineConfig,
    origin: &DatasetIndex,
    gen: Option<&DatasetIndex>,
    force: bool,
) -> Result<(DatasetIndex, PathBuf), PipelineError> {
    let empty;
    let gen = match gen {
        Some(g) => g,
        None => {
            empty = DatasetIndex {
                schema: origin.schema.clone(),
                samples: Vec::new(),
                root: config.out.join(GEN_DIR),
                split: config.split.clone(),
            };
            &empty
        }
    };
    let merged = metrics::merge_datasets(origin, gen).at(Stage::Merge)?;
    let gen_root = config.out.join(GEN_DIR);
    let split = write_merged_tree(&merged, Some(&gen_root), &config.out.join(FINAL_DIR), force).at(Stage::Merge)?;
    Ok((merged, split))
}

/// Writes `<out>/stats.json`.
pub fn stage_stats(
    config: &PipelineConfig,
    origin: &DatasetIndex,
    gen: Option<&DatasetIndex>,
    calibration: Option<CalibrationTarget>,
    force: bool,
) -> Result<(StatsReport, PathBuf), PipelineError> {
    let mut stats = StatsReport::build(origin, gen);
    if let Some(target) = calibration {
        stats = stats.with_calibration(target);
    }
    let path = config.out.join(STATS_FILE);
    write_artifact(&path, &to_pretty_json(&stats), force).at(Stage::Stats)?;
    Ok((stats, path))
}

pub fn run_pipeline(config: &PipelineConfig, force: bool) -> Result<RunReport, PipelineError> {
    let origin = stage_index(config)?;
    let out = &config.out;
    fs::create_dir_all(out).map_err(io_err(out)).at(Stage::Config)?;
    let (plan, n_balance_auto) = stage_plan(config, &origin, force)?;
    let (gen, execution) = stage_generate(config, &origin, &plan, force)?;
    let (merged, final_split) = stage_merge(config, &origin, Some(&gen), force)?;
    let (_, stats_path) = stage_stats(config, &origin, Some(&gen), None, force)?;

    let mut echo = serde_json::to_value(config).expect("config serializes");
    if let Some(map) = echo.as_object_mut() {
        map.remove("out");
    }
    let gen_root = out.join(GEN_DIR);
    let report = RunReport {
        config: echo,
        n_balance: plan.n_balance,
        n_balance_auto,
        plan_entries: plan.len(),
        skipped_classes: plan
            .skipped_classes
            .iter()
            .map(|&c| origin.schema.name(c).map(str::to_string).unwrap_or_else(|| c.to_string()))
            .collect(),
        origin_samples: origin.len(),
        gen_samples: gen.len(),
        final_samples: merged.len(),
        generated_this_run: execution.generated,
        resumed: execution.resumed,
        failures: execution.failures,
        artifacts: Artifacts {
            plan: rel(&out.join(PLAN_FILE), out),
            plan_meta: rel(&out.join(PLAN_META_FILE), out),
            gen_root: rel(&gen_root, out),
            manifest: rel(&gen_root.join(MANIFEST_FILE), out),
            failures: rel(&gen_root.join(FAILURES_FILE), out),
            final_split: rel(&final_split, out),
            stats: rel(&stats_path, out),
        },
    };
    // generated_this_run and resumed differ between a fresh run and a resumed
    // one, so they stay out of the persisted report.
    let mut persisted = serde_json::to_value(&report).expect("report serializes");
    if let Some(map) = persisted.as_object_mut() {
        map.remove("generated_this_run");
        map.remove("resumed");
    }
    write_artifact(&out.join(REPORT_FILE), &to_pretty_json(&persisted), force).at(Stage::Report)?;
    Ok(report)
}

/// Writes `<id>_image_prior.png`, `<id>_mask_prior.png` and `<id>_blended.png`
/// for each selected sample (all when `ids` is empty). Returns the written paths.
pub fn dump_priors(
    index: &DatasetIndex,
    ids: &[String],
    detector: Option<&dyn PriorDetector>,
    opts: &ExecuteOptions,
    dest: &Path,
    force: bool,
) -> Result<Vec<PathBuf>, PipelineError> {
    fs::create_dir_all(dest).map_err(io_err(dest)).at(Stage::Priors)?;
    let mut written = Vec::new();
    for sample in &index.samples {
        if !ids.is_empty() && !ids.contains(&sample.sample_id) {
            continue;
        }
        let image = sample.load_image().at(Stage::Priors)?;
        let (vi, vs, blended) = compute_priors(sample, &image, detector, opts).at(Stage::Priors)?;
        for (suffix, prior) in [("image_prior", &vi), ("mask_prior", &vs), ("blended", &blended)] {
            let png = export_control_image(prior, Polarity::WhiteOnBlack)
                .map_err(|e| StageError::Config(e.to_string()))
                .at(Stage::Priors)?;
            let path = dest.join(format!("{}_{suffix}.png", sample.sample_id));
            write_artifact(&path, &png, force).at(Stage::Priors)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub class: u8,
    pub name: String,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub per_class: Vec<EvalRow>,
    pub miou: f64,
}

impl EvalReport {
    /// Aligned text table, one class per line, mIoU last.
    pub fn to_text(&self) -> String {
        let width = self.per_class.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  {:>7}\n", "class", "IoU");
        for row in &self.per_class {
            let v = row.iou.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
            out.push_str(&format!("{:<width$}  {:>7}\n", row.name, v));
        }
        out.push_str(&format!("{:<width$}  {:>7.2}\n", "mIoU", self.miou));
        out
    }
}

/// Compares every `<id>.png` mask in `gt_dir` with the same file in `pred_dir`.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, schema: &LabelSchema) -> Result<EvalReport, PipelineError> {
    let mut names: Vec<PathBuf> = fs::read_dir(gt_dir)
        .map_err(io_err(gt_dir))
        .at(Stage::Eval)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    names.sort();
    let mut cm = ConfusionMatrix::for_schema(schema);
    for gt_path in &names {
        let file = gt_path.file_name().expect("listed file");
        let pred_path = pred_dir.join(file);
        if !pred_path.is_file() {
            return Err(StageError::Config(format!("missing prediction {}", pred_path.display()))).at(Stage::Eval);
        }
        let read = |p: &Path| -> Result<_, PipelineError> {
            let bytes = fs::read(p).map_err(io_err(p)).at(Stage::Eval)?;
            decode_mask(&bytes, schema).at(Stage::Eval)
        };
        cm.accumulate(&read(&pred_path)?, &read(gt_path)?).at(Stage::Eval)?;
    }
    let result = metrics::miou(&cm).at(Stage::Eval)?;
    let per_class = result
        .per_class
        .iter()
        .filter(|c: &&ClassIou| schema.contains(c.class) || c.iou.is_some())
        .map(|c| EvalRow {
            class: c.class.0,
            name: schema.name(c.class).map(str::to_string).unwrap_or_else(|| c.class.to_string()),
            iou: c.iou,
        })
        .collect();
    Ok(EvalReport { images: names.len(), per_class, miou: result.miou })
}

/// Counts per class name, for reports.
pub fn named_counts(index: &DatasetIndex) -> BTreeMap<String, u64> {
    DatasetStats::of(index).class_counts
}
