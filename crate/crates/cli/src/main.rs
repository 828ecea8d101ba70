use std::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use ctrlaug_core::metrics::DatasetStats;
use ctrlaug_core::pipeline::{
    self, BackendKind, CalibrationTarget, PipelineConfig, PipelineError, Stage, StageError, ENDPOINT_ENV,
};
use ctrlaug_core::LabelSchema;

/// Exit status when every stage finished but some plan entries failed.
const EXIT_GENERATION_FAILURES: u8 = 3;

/// Reference image-level balance statistics for the VOC 2007 train split.
const VOC07_CALIBRATION: CalibrationTarget =
    CalibrationTarget { entropy: 3.944, imbalance_ratio: 0.253, tolerance: 0.02 };

#[derive(Parser)]
#[command(name = "ctrlaug", version, about = "Class-balanced generative augmentation for segmentation datasets")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset root in VOC layout.
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    #[arg(long, global = true)]
    split: Option<String>,
    /// JSON label schema (VOC when omitted).
    #[arg(long, global = true)]
    schema: Option<PathBuf>,
    /// Image prior weight.
    #[arg(long, global = true)]
    w1: Option<f64>,
    /// Mask prior weight.
    #[arg(long, global = true)]
    w2: Option<f64>,
    /// Per-class target image count.
    #[arg(long, global = true, conflicts_with = "auto_ratio")]
    n_balance: Option<u32>,
    /// Pick n_balance so the plan size is closest to this fraction of the dataset.
    #[arg(long, global = true)]
    auto_ratio: Option<f64>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    /// Service base URL for the http backend (falls back to CTRLAUG_ENDPOINT).
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Output directory for every artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace artifacts that differ from what this run produces.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Mock,
    Http,
}

#[derive(Subcommand)]
enum Command {
    /// Index the dataset and print its summary.
    Index,
    /// Write the balancing plan to <out>/plan.jsonl and <out>/plan.meta.json.
    Plan,
    /// Dump image, mask and blended prior PNGs to <out>/priors.
    Priors {
        /// Sample ids to dump; all samples when empty.
        ids: Vec<String>,
    },
    /// Execute <out>/plan.jsonl into <out>/gen, resuming earlier progress.
    Generate,
    /// Merge the origin and synthetic sets into <out>/final.
    Merge,
    /// Write balance statistics to <out>/stats.json.
    Stats {
        /// Compare the origin statistics with the VOC 2007 train reference values.
        #[arg(long)]
        calibrate: bool,
    },
    /// Score predicted masks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Run every stage end to end.
    Run,
}

impl Common {
    fn config(&self) -> Result<PipelineConfig, Box<dyn Error>> {
        let mut doc = match &self.config {
            Some(path) => serde_json::to_value(PipelineConfig::from_json_file(path)?)?,
            None => json!({}),
        };
        let map = doc.as_object_mut().expect("config is an object");
        let mut set = |key: &str, value: Value| {
            map.insert(key.to_string(), value);
        };
        if let Some(v) = &self.root {
            set("root", json!(v));
        }
        if let Some(v) = &self.split {
            set("split", json!(v));
        }
        if let Some(v) = &self.schema {
            set("schema", json!(v));
        }
        if let Some(v) = self.w1 {
            set("w1", json!(v));
        }
        if let Some(v) = self.w2 {
            set("w2", json!(v));
        }
        if let Some(v) = self.n_balance {
            set("n_balance", json!(v));
        }
        if let Some(v) = self.auto_ratio {
            set("auto_ratio", json!(v));
            map.remove("n_balance");
        }
        let map = doc.as_object_mut().expect("config is an object");
        if let Some(v) = self.backend {
            map.insert("backend".into(), json!(matches!(v, BackendArg::Http).then_some("http").unwrap_or("mock")));
        }
        if let Some(v) = &self.endpoint {
            map.insert("endpoint".into(), json!(v));
        }
        if let Some(v) = self.parallelism {
            map.insert("parallelism".into(), json!(v));
        }
        if let Some(v) = &self.out {
            map.insert("out".into(), json!(v));
        }
        if !map.contains_key("root") {
            return Err("no dataset root; pass --root or set \"root\" in --config".into());
        }
        let mut config: PipelineConfig = serde_json::from_value(doc)?;
        if config.endpoint.is_none() && config.backend == BackendKind::Http {
            config.endpoint = std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty());
        }
        config.validate()?;
        Ok(config)
    }

    fn schema(&self) -> Result<LabelSchema, Box<dyn Error>> {
        match &self.schema {
            Some(path) => Ok(LabelSchema::from_json_file(path)?),
            None => match &self.config {
                Some(path) => Ok(PipelineConfig::from_json_file(path)?.load_schema()?),
                None => Ok(LabelSchema::voc()),
            },
        }
    }
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn mkdir_out(config: &PipelineConfig) -> Result<(), PipelineError> {
    std::fs::create_dir_all(&config.out).map_err(|source| PipelineError {
        stage: Stage::Config,
        source: StageError::Io { path: config.out.clone(), source },
    })
}

fn run(cli: &Cli) -> Result<ExitCode, Box<dyn Error>> {
    let force = cli.common.force;
    match &cli.command {
        Command::Eval { pred, gt, json } => {
            let report = pipeline::evaluate_dirs(pred, gt, &cli.common.schema()?)?;
            if *json {
                print_json(&report);
            } else {
                print!("{}", report.to_text());
            }
            return Ok(ExitCode::SUCCESS);
        }
        Command::Index => {
            let config = cli.common.config()?;
            let origin = pipeline::stage_index(&config)?;
            print_json(&json!({
                "root": origin.root,
                "split": origin.split,
                "fingerprint": origin.fingerprint(),
                "stats": DatasetStats::of(&origin),
            }));
        }
        Command::Plan => {
            let config = cli.common.config()?;
            let origin = pipeline::stage_index(&config)?;
            mkdir_out(&config)?;
            let (plan, auto) = pipeline::stage_plan(&config, &origin, force)?;
            print_json(&json!({
                "n_balance": plan.n_balance,
                "n_balance_auto": auto,
                "entries": plan.len(),
                "plan": config.out.join(pipeline::PLAN_FILE),
            }));
        }
        Command::Priors { ids } => {
            let config = cli.common.config()?;
            let origin = pipeline::stage_index(&config)?;
            let detector = config.build_detector();
            let dest = config.out.join("priors");
            let written =
                pipeline::dump_priors(&origin, ids, detector.as_deref(), &config.execute_options(), &dest, force)?;
            print_json(&json!({ "written": written }));
        }
        Command::Generate => {
            let config = cli.common.config()?;
            let origin = pipeline::stage_index(&config)?;
            let plan = pipeline::read_plan(&config.out)?;
            let (gen, report) = pipeline::stage_generate(&config, &origin, &plan, force)?;
            print_json(&json!({ "gen_samples": gen.len(), "execution": report }));
            if !report.failures.is_empty() {
                return Ok(ExitCode::from(EXIT_GENERATION_FAILURES));
            }
        }
        Command::Merge => {
            let config = cli.common.config()?;
            let origin = pipeline::stage_index(&config)?;
            let gen = pipeline::load_gen(&config.out, &config.split, &origin.schema)?;
            let (merged, split) = pipeline::stage_merge(&config, &origin, gen.as_ref(), force)?;
            print_json(&json!({ "final_samples": merged.len(), "split_file": split }));
        }
        Command::Stats { calibrate } => {
            let config = cli.common.config()?;
            let origin = pipeline::stage_index(&config)?;
            mkdir_out(&config)?;
            let gen = pipeline::load_gen(&config.out, &config.split, &origin.schema)?;
            let target = calibrate.then_some(VOC07_CALIBRATION);
            let (stats, _) = pipeline::stage_stats(&config, &origin, gen.as_ref(), target, force)?;
            print_json(&stats);
        }
        Command::Run => {
            let config = cli.common.config()?;
            let report = pipeline::run_pipeline(&config, force)?;
            print_json(&report);
            if !report.succeeded() {
                return Ok(ExitCode::from(EXIT_GENERATION_FAILURES));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut source = e.source();
            while let Some(s) = source {
                let text = s.to_string();
                if !msg.contains(&text) {
                    msg.push_str(&format!("\n  caused by: {text}"));
                }
                source = s.source();
            }
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
