//! Runs a generation plan against a backend and writes the synthetic dataset.
//!
//! Workers prepare requests and call the backend concurrently; a single
//! writer commits results strictly in plan order, so the output tree and
//! manifest do not depend on parallelism. The synthetic index itself is the
//! checkpoint: entries already present are skipped on the next run.

use std::collections::{BTreeMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    AcceptAll, Backend, GenerationError, GenerationRequest, ResultFilter, DEFAULT_CONTROL_KIND, DEFAULT_STEPS,
};
use crate::blend::{blend_priors, export_control_image, BlendError, BlendWeights};
use crate::dataset::{
    read_manifest, DatasetError, DatasetIndex, ManifestRecord, NewSample, Origin, SegSample, MANIFEST_FILE,
};
use crate::fsutil;
use crate::hash::stable_hash;
use crate::planner::{GenerationPlan, PlanEntry};
use crate::prior::{
    canny_edges, dilate, external_prior, mask_boundaries, CannyParams, Polarity, PriorDetector, PriorError, PriorImage,
};
use crate::prompt::{resolve_caption, CaptionSource, PromptBundle, PromptError, Template};

pub const FAILURES_FILE: &str = "failures.jsonl";

#[derive(Debug, Error)]
pub enum ExecuteError {
    #[error("plan was made for index {plan} but this index is {index}")]
    FingerprintMismatch { plan: String, index: String },
    #[error("aborted at {output_id}: {source}; {completed} entries are committed, rerun to resume")]
    Aborted {
        output_id: String,
        completed: usize,
        #[source]
        source: GenerationError,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Per-entry failure causes that skip the entry instead of aborting the run.
#[derive(Debug, Error)]
enum EntryError {
    #[error("seed {0} is not a real sample of the index")]
    UnknownSeed(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Blend(#[from] BlendError),
    #[error(transparent)]
    Generation(GenerationError),
    #[error("rejected by result filter")]
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub output_id: String,
    pub seed_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionReport {
    /// Entries committed by this run.
    pub generated: usize,
    /// Entries already present from an earlier run.
    pub resumed: usize,
    pub failures: Vec<FailureRecord>,
}

#[derive(Debug, Clone)]
pub struct ExecuteOptions {
    pub weights: BlendWeights,
    pub canny: CannyParams,
    pub boundary_dilation: u32,
    pub steps: u32,
    pub control_kind: String,
    pub fallback_template: Template,
    pub parallelism: usize,
}

impl Default for ExecuteOptions {
    fn default() -> Self {
        Self {
            weights: BlendWeights::default(),
            canny: CannyParams::default(),
            boundary_dilation: 0,
            steps: DEFAULT_STEPS,
            control_kind: DEFAULT_CONTROL_KIND.to_string(),
            fallback_template: Template::PhotoOf,
            parallelism: 2,
        }
    }
}

/// External collaborators of plan execution.
pub struct Services<'a> {
    pub backend: &'a dyn Backend,
    pub captions: &'a [Box<dyn CaptionSource>],
    /// When absent the built-in Canny detector produces the image prior.
    pub detector: Option<&'a dyn PriorDetector>,
    pub filter: &'a dyn ResultFilter,
}

impl<'a> Services<'a> {
    pub fn new(backend: &'a dyn Backend) -> Self {
        Self { backend, captions: &[], detector: None, filter: &AcceptAll }
    }
}

/// Image prior, mask prior and their blend for one sample.
pub fn compute_priors(
    sample: &SegSample,
    image: &RgbImage,
    detector: Option<&dyn PriorDetector>,
    opts: &ExecuteOptions,
) -> Result<(PriorImage, PriorImage, PriorImage), PriorError> {
    let image_prior = match detector {
        Some(d) => external_prior(image, d)?,
        None => canny_edges(image, &opts.canny)?,
    };
    let mask_prior = dilate(&mask_boundaries(&sample.mask), opts.boundary_dilation);
    let blended = blend_priors(&image_prior, &mask_prior, opts.weights).map_err(|e| match e {
        BlendError::DimensionMismatch { image, mask } => PriorError::DimensionMismatch { expected: mask, got: image },
        other => PriorError::Decode(other.to_string()),
    })?;
    Ok((image_prior, mask_prior, blended))
}

struct Prepared {
    image: RgbImage,
    prompt: String,
    seed: u64,
}

fn run_entry(
    entry: &PlanEntry,
    origin: &DatasetIndex,
    services: &Services<'_>,
    opts: &ExecuteOptions,
) -> Result<Prepared, EntryError> {
    let sample = origin
        .get(&entry.seed_id)
        .filter(|s| s.origin == Origin::Real)
        .ok_or_else(|| EntryError::UnknownSeed(entry.seed_id.clone()))?;
    let image = sample.load_image()?;
    let caption = resolve_caption(sample, services.captions);
    let bundle = PromptBundle::build(
        sample.classes.iter().copied(),
        caption.as_deref(),
        &origin.schema,
        opts.fallback_template,
    )?;
    let (_, _, blended) = compute_priors(sample, &image, services.detector, opts)?;
    let control_png = export_control_image(&blended, Polarity::WhiteOnBlack)?;
    let request = GenerationRequest {
        prompt: bundle.appended,
        control_png,
        width: image.width(),
        height: image.height(),
        steps: opts.steps,
        seed: stable_hash(&entry.output_id),
        control_kind: opts.control_kind.clone(),
    };
    let result = services.backend.generate(&request).map_err(EntryError::Generation)?;
    let generated = result.decode_checked(&request).map_err(EntryError::Generation)?;
    if !services.filter.accept(&result) {
        return Err(EntryError::Rejected);
    }
    Ok(Prepared { image: generated, prompt: request.prompt, seed: request.seed })
}

/// Drops manifest lines whose sample never made it into the split file.
pub fn reconcile_manifest(gen: &DatasetIndex) -> Result<(), DatasetError> {
    let records = read_manifest(&gen.root)?;
    let present: HashSet<&str> = gen.ids().collect();
    let kept: Vec<&ManifestRecord> = records.iter().filter(|r| present.contains(r.output_id.as_str())).collect();
    if kept.len() != records.len() {
        let text: String = kept.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect();
        let path = gen.root.join(MANIFEST_FILE);
        fsutil::write_atomic(&path, text.as_bytes()).map_err(|e| DatasetError::io(&path, e))?;
    }
    Ok(())
}

/// Generates every plan entry missing from `gen`, committing in plan order.
///
/// Entries that fail for a per-entry reason are recorded and skipped. A
/// transport failure aborts the run after committing everything before it.
pub fn execute_plan(
    plan: &GenerationPlan,
    origin: &DatasetIndex,
    gen: &mut DatasetIndex,
    services: &Services<'_>,
    opts: &ExecuteOptions,
) -> Result<ExecutionReport, ExecuteError> {
    let fingerprint = origin.fingerprint();
    if plan.fingerprint != fingerprint {
        return Err(ExecuteError::FingerprintMismatch { plan: plan.fingerprint.clone(), index: fingerprint });
    }
    reconcile_manifest(gen)?;

    let todo: Vec<&PlanEntry> = plan.entries.iter().filter(|e| !gen.contains(&e.output_id)).collect();
    let mut report = ExecutionReport { resumed: plan.len() - todo.len(), ..Default::default() };
    let cursor = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let workers = opts.parallelism.clamp(1, todo.len().max(1));
    let mut fatal: Option<(String, GenerationError)> = None;

    std::thread::scope(|scope| -> Result<(), ExecuteError> {
        let (tx, rx) = mpsc::channel::<(usize, Result<Prepared, EntryError>)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (todo, cursor, abort) = (&todo, &cursor, &abort);
            scope.spawn(move || loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let pos = cursor.fetch_add(1, Ordering::SeqCst);
                let Some(entry) = todo.get(pos) else { break };
                let outcome = run_entry(entry, origin, services, opts);
                if tx.send((pos, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending = BTreeMap::new();
        let mut next = 0;
        for (pos, outcome) in rx {
            pending.insert(pos, outcome);
            while fatal.is_none() {
                let Some(outcome) = pending.remove(&next) else { break };
                let entry = todo[next];
                next += 1;
                match outcome {
                    Ok(prepared) => {
                        let seed = origin.get(&entry.seed_id).expect("seed checked by worker");
                        let record = ManifestRecord {
                            output_id: entry.output_id.clone(),
                            seed_id: entry.seed_id.clone(),
                            target_class: entry.target_class,
                            prompt: prepared.prompt,
                            backend: services.backend.id().to_string(),
                            request_seed: prepared.seed,
                        };
                        let written = gen.write_sample(NewSample {
                            sample_id: entry.output_id.clone(),
                            image: prepared.image,
                            mask: seed.mask.clone(),
                            provenance: Some(record),
                        });
                        if let Err(e) = written {
                            abort.store(true, Ordering::SeqCst);
                            return Err(e.into());
                        }
                        report.generated += 1;
                    }
                    Err(EntryError::Generation(e @ GenerationError::Transport(_))) => {
                        abort.store(true, Ordering::SeqCst);
                        fatal = Some((entry.output_id.clone(), e));
                    }
                    Err(e) => {
                        log::warn!("entry {} failed: {e}", entry.output_id);
                        report.failures.push(FailureRecord {
                            output_id: entry.output_id.clone(),
                            seed_id: entry.seed_id.clone(),
                            reason: e.to_string(),
                        });
                    }
                }
            }
        }
        Ok(())
    })?;

    let failures_path = gen.root.join(FAILURES_FILE);
    let text: String =
        report.failures.iter().map(|f| serde_json::to_string(f).expect("record serializes") + "\n").collect();
    fsutil::write_atomic(&failures_path, text.as_bytes()).map_err(|e| DatasetError::io(&failures_path, e))?;

    if let Some((output_id, source)) = fatal {
        return Err(ExecuteError::Aborted { output_id, completed: gen.len(), source });
    }
    Ok(report)
}
