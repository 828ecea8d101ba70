mod common;

use std::time::Duration;

use image::{DynamicImage, GrayImage, Luma, RgbImage};
use serde_json::json;

use common::{dead_endpoint, png_bytes, StubServer};
use ctrlaug_core::generation::{Backend, GenerationError, GenerationRequest, HttpBackend, RetryPolicy};
use ctrlaug_core::http::b64_encode;
use ctrlaug_core::prior::{external_prior, DetectorKind, HttpDetector};
use ctrlaug_core::prompt::{CaptionSource, HttpCaptioner};
use ctrlaug_core::toy::{write_toy_dataset, ToySample};
use ctrlaug_core::LabelSchema;

fn fast_retry(retries: u32) -> RetryPolicy {
    RetryPolicy { retries, base_delay: Duration::from_millis(5) }
}

fn request(w: u32, h: u32) -> GenerationRequest {
    GenerationRequest {
        prompt: "a cat on a mat; cat".into(),
        control_png: png_bytes(&DynamicImage::ImageLuma8(GrayImage::new(w, h))),
        width: w,
        height: h,
        steps: 30,
        seed: 42,
        control_kind: "lineart".into(),
    }
}

fn image_reply(w: u32, h: u32) -> String {
    json!({ "image_png_b64": b64_encode(&png_bytes(&DynamicImage::ImageRgb8(RgbImage::new(w, h)))) }).to_string()
}

#[test]
fn server_error_is_retried_then_surfaced_with_excerpt() {
    let server = StubServer::start(|_, _, _| (500, json!({"error": "CUDA out of memory"}).to_string()));
    let backend = HttpBackend::with_options(&server.base, Duration::from_secs(5), fast_retry(3));
    match backend.generate(&request(8, 8)) {
        Err(GenerationError::Backend { status, excerpt }) => {
            assert_eq!(status, 500);
            assert!(excerpt.contains("CUDA out of memory"), "{excerpt}");
        }
        other => panic!("expected backend error, got {other:?}"),
    }
    assert_eq!(server.requests().len(), 4, "one attempt plus three retries");
}

#[test]
fn transient_failure_recovers() {
    let server = StubServer::start(|_, _, n| if n < 2 { (503, "busy".into()) } else { (200, image_reply(8, 8)) });
    let backend = HttpBackend::with_options(&server.base, Duration::from_secs(5), fast_retry(3));
    let result = backend.generate(&request(8, 8)).unwrap();
    assert_eq!(result.backend_id, format!("http:{}", server.base));
    assert_eq!(server.requests().len(), 3);
}

#[test]
fn client_error_is_not_retried() {
    let server = StubServer::start(|_, _, _| (422, json!({"error": "bad prompt"}).to_string()));
    let backend = HttpBackend::with_options(&server.base, Duration::from_secs(5), fast_retry(3));
    assert!(matches!(backend.generate(&request(8, 8)), Err(GenerationError::Backend { status: 422, .. })));
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn wrong_output_size_is_a_dimension_mismatch() {
    let server = StubServer::start(|_, _, _| (200, image_reply(640, 480)));
    let backend = HttpBackend::with_options(&server.base, Duration::from_secs(30), fast_retry(0));
    match backend.generate(&request(512, 512)) {
        Err(GenerationError::DimensionMismatch { expected, got }) => {
            assert_eq!(expected, (512, 512));
            assert_eq!(got, (640, 480));
        }
        other => panic!("expected dimension mismatch, got {other:?}"),
    }
}

#[test]
fn undecodable_payload_is_malformed() {
    let server = StubServer::start(|_, _, _| (200, json!({"image_png_b64": "bm90IGFuIGltYWdl"}).to_string()));
    let backend = HttpBackend::with_options(&server.base, Duration::from_secs(5), fast_retry(0));
    assert!(matches!(backend.generate(&request(8, 8)), Err(GenerationError::Malformed(_))));
}

#[test]
fn generate_wire_format() {
    let server = StubServer::start(|_, _, _| (200, image_reply(8, 8)));
    let mut extra = serde_json::Map::new();
    extra.insert("guidance_scale".into(), json!(7.5));
    extra.insert("seed".into(), json!(1));
    let backend = HttpBackend::with_options(&server.base, Duration::from_secs(5), fast_retry(0)).with_extra(extra);
    let req = request(8, 8);
    backend.generate(&req).unwrap();
    let recorded = server.requests();
    assert_eq!(recorded[0].path, "/generate");
    let body = &recorded[0].body;
    assert_eq!(body["prompt"], "a cat on a mat; cat");
    assert_eq!(body["control_png_b64"], b64_encode(&req.control_png));
    assert_eq!(body["control_kind"], "lineart");
    assert_eq!((body["width"].as_u64(), body["height"].as_u64()), (Some(8), Some(8)));
    assert_eq!(body["steps"], 30);
    assert_eq!(body["seed"], 42, "extra fields never override request fields");
    assert_eq!(body["guidance_scale"], 7.5);
}

#[test]
fn unreachable_backend_is_a_transport_error() {
    let backend = HttpBackend::with_options(&dead_endpoint(), Duration::from_secs(5), fast_retry(1));
    assert!(matches!(backend.generate(&request(8, 8)), Err(GenerationError::Transport(_))));
}

#[test]
fn captioner_wire_format() {
    let dir = tempfile::tempdir().unwrap();
    let index =
        write_toy_dataset(dir.path(), "train", &LabelSchema::voc(), &[ToySample::new("s0", &[8])], (16, 16)).unwrap();
    let server = StubServer::start(|_, _, _| (200, json!({"caption": "a cat asleep"}).to_string()));
    let captioner = HttpCaptioner::new(&server.base);
    assert_eq!(captioner.describe(&index.samples[0]).unwrap().as_deref(), Some("a cat asleep"));
    let recorded = server.requests();
    assert_eq!(recorded[0].path, "/caption");
    assert!(recorded[0].body["image_png_b64"].as_str().is_some_and(|s| !s.is_empty()));
}

#[test]
fn detector_wire_format_and_polarity() {
    let raster = GrayImage::from_fn(6, 4, |x, _| Luma([if x == 2 { 0 } else { 255 }]));
    let reply = json!({
        "prior_png_b64": b64_encode(&png_bytes(&DynamicImage::ImageLuma8(raster))),
        "polarity": "black_on_white",
    })
    .to_string();
    let server = StubServer::start(move |_, _, _| (200, reply.clone()));
    let detector = HttpDetector::new(&server.base, DetectorKind::Hed);
    let prior = external_prior(&RgbImage::new(6, 4), &detector).unwrap();
    for y in 0..4 {
        for x in 0..6 {
            assert_eq!(prior.get(x, y), if x == 2 { 1.0 } else { 0.0 });
        }
    }
    let recorded = server.requests();
    assert_eq!(recorded[0].path, "/prior");
    assert_eq!(recorded[0].body["kind"], "hed");
}

#[test]
fn detector_size_mismatch_is_rejected() {
    let reply =
        json!({ "prior_png_b64": b64_encode(&png_bytes(&DynamicImage::ImageLuma8(GrayImage::new(5, 5)))) }).to_string();
    let server = StubServer::start(move |_, _, _| (200, reply.clone()));
    let detector = HttpDetector::new(&server.base, DetectorKind::Lineart);
    assert!(external_prior(&RgbImage::new(6, 4), &detector).is_err());
}
