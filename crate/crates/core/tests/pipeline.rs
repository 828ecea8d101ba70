mod common;

use std::path::Path;

use common::{dead_endpoint, snapshot};
use ctrlaug_core::dataset::encode_mask;
use ctrlaug_core::pipeline::{
    evaluate_dirs, run_pipeline, BackendKind, PipelineConfig, Stage, StageError, PLAN_FILE, REPORT_FILE,
};
use ctrlaug_core::toy::{ten_image_fixture, toy_mask, write_toy_dataset};
use ctrlaug_core::LabelSchema;

fn toy_config(dir: &Path) -> PipelineConfig {
    let root = dir.join("voc");
    write_toy_dataset(&root, "train", &LabelSchema::voc(), &ten_image_fixture(), (32, 32)).unwrap();
    PipelineConfig::new(root, dir.join("out"))
}

#[test]
fn minimal_config_gets_defaults() {
    let cfg: PipelineConfig = serde_json::from_str(r#"{"root": "data/voc"}"#).unwrap();
    assert_eq!((cfg.w1, cfg.w2), (0.7, 0.9));
    assert_eq!(cfg.split, "train");
    assert_eq!(cfg.n_balance, None);
    assert_eq!(cfg.auto_ratio, 1.0);
    assert_eq!(cfg.backend, BackendKind::Mock);
    assert_eq!(cfg.parallelism, 2);
    assert!(serde_json::from_str::<PipelineConfig>(r#"{"root": "x", "w3": 1}"#).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = PipelineConfig::new("r", "o");
    cfg.w1 = -0.1;
    assert_eq!(cfg.validate().unwrap_err().stage, Stage::Config);
    let mut cfg = PipelineConfig::new("r", "o");
    cfg.backend = BackendKind::Http;
    assert!(cfg.validate().is_err(), "http backend without an endpoint");
    cfg.endpoint = Some("http://localhost:1".into());
    assert!(cfg.validate().is_ok());
}

#[test]
fn run_reports_defaults_and_existing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let report = run_pipeline(&cfg, false).unwrap();
    assert!(report.succeeded());
    assert_eq!(report.config["w1"], 0.7);
    assert_eq!(report.config["w2"], 0.9);
    assert!(report.config.get("out").is_none());
    assert_eq!(report.origin_samples, 10);
    assert_eq!(report.final_samples, report.origin_samples + report.gen_samples);
    let a = &report.artifacts;
    for rel in [&a.plan, &a.plan_meta, &a.manifest, &a.final_split, &a.stats] {
        assert!(cfg.out.join(rel).is_file(), "{rel} missing");
    }
    assert!(cfg.out.join(&a.gen_root).is_dir());
    assert!(cfg.out.join(REPORT_FILE).is_file());
    let listing = std::fs::read_to_string(cfg.out.join(&a.final_split)).unwrap();
    assert_eq!(listing.lines().count(), report.final_samples);
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    run_pipeline(&cfg, false).unwrap();
    let first = snapshot(&cfg.out);
    let again = run_pipeline(&cfg, false).unwrap();
    assert_eq!(again.generated_this_run, 0);
    assert_eq!(snapshot(&cfg.out), first);

    let mut elsewhere = cfg.clone();
    elsewhere.out = dir.path().join("out2");
    run_pipeline(&elsewhere, false).unwrap();
    assert_eq!(snapshot(&elsewhere.out), first);
}

#[test]
fn differing_artifacts_need_force() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(dir.path());
    run_pipeline(&cfg, false).unwrap();
    cfg.n_balance = Some(3);
    let err = run_pipeline(&cfg, false).unwrap_err();
    assert_eq!(err.stage, Stage::Plan);
    assert!(matches!(err.source, StageError::ArtifactExists(_)));
    let report = run_pipeline(&cfg, true).unwrap();
    assert_eq!(report.n_balance, 3);
    let plan = std::fs::read_to_string(cfg.out.join(PLAN_FILE)).unwrap();
    assert_eq!(plan.lines().count(), report.plan_entries);
    assert_eq!(report.gen_samples, report.plan_entries);
}

#[test]
fn unreachable_backend_aborts_in_generate_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(dir.path());
    cfg.backend = BackendKind::Http;
    cfg.endpoint = Some(dead_endpoint());
    cfg.http_retries = 0;
    let err = run_pipeline(&cfg, false).unwrap_err();
    assert_eq!(err.stage, Stage::Generate);
    assert!(err.to_string().starts_with("generate stage failed"), "{err}");
}

#[test]
fn missing_dataset_fails_in_index_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::new(dir.path().join("nothing"), dir.path().join("out"));
    assert_eq!(run_pipeline(&cfg, false).unwrap_err().stage, Stage::Index);
}

#[test]
fn eval_of_identical_dirs_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["pred", "gt"] {
        std::fs::create_dir_all(dir.path().join(sub)).unwrap();
        for (i, classes) in [[1u8, 15], [8, 12]].iter().enumerate() {
            let bytes = encode_mask(&toy_mask(classes, 24, 16)).unwrap();
            std::fs::write(dir.path().join(sub).join(format!("m{i}.png")), bytes).unwrap();
        }
    }
    let report = evaluate_dirs(&dir.path().join("pred"), &dir.path().join("gt"), &LabelSchema::voc()).unwrap();
    assert_eq!(report.images, 2);
    assert_eq!(report.miou, 100.0);
    let text = report.to_text();
    assert!(text.lines().last().unwrap().starts_with("mIoU"));
    assert!(text.contains("100.00"));
}
