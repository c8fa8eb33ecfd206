use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use melodapt::adaptation::{meta_test_episode, oracle_annotator, MetaHyperparameters, Method, PreparedEpisode, Selection};
use melodapt::model::{Architecture, BaseModel, ConfidenceModel, ModelBundle};
use melodapt::signal::{decode_wav, encode_wav, quantize_labels, AudioClip, Stft, SAMPLE_RATE};
use melodapt_service::{router, AppState, CatalogEntry, Models, ServiceConfig};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

fn models() -> Models {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut base = BaseModel::new(Architecture::desk(), &mut rng).unwrap();
    base.freeze_features();
    let conf = ConfidenceModel::new(base.arch(), &mut rng).unwrap();
    let bundle = ModelBundle {
        base,
        confidence: Some(conf),
        stage: "test".into(),
    };
    Models::from_bundle(bundle, Method::WAml).unwrap()
}

fn hyper() -> MetaHyperparameters {
    MetaHyperparameters {
        k: 5,
        inner_steps: 3,
        iterations: 2,
        inner_lr: 0.05,
        seed: 11,
        ..Default::default()
    }
}

/// A two-note melody with a silent gap, and its per-frame reference.
fn melody(seconds: f64) -> (AudioClip, Vec<f64>) {
    let n = (seconds * SAMPLE_RATE as f64) as usize;
    let pitch = |t: f64| if (t % 1.0) < 0.45 { 220.0 } else if (t % 1.0) < 0.55 { 0.0 } else { 330.0 };
    let mut phase = 0.0f64;
    let samples = (0..n)
        .map(|i| {
            let f = pitch(i as f64 / SAMPLE_RATE as f64);
            phase += 2.0 * std::f64::consts::PI * f / SAMPLE_RATE as f64;
            if f > 0.0 {
                (0.5 * phase.sin() + 0.2 * (2.0 * phase).sin()) as f32
            } else {
                0.0
            }
        })
        .collect();
    let frames = n.div_ceil(80);
    let reference = (0..frames).map(|m| pitch(m as f64 * 0.01)).collect();
    (AudioClip::new(samples, SAMPLE_RATE), reference)
}

fn app_with(store: Option<&std::path::Path>, catalog: BTreeMap<String, CatalogEntry>) -> (Arc<AppState>, Router) {
    let mut cfg = ServiceConfig::new((&hyper()).into());
    cfg.store = store.map(|p| p.to_path_buf());
    cfg.default_k = 5;
    let state = AppState::new(models(), cfg, catalog).unwrap();
    (state.clone(), router(state))
}

fn app() -> Router {
    app_with(None, BTreeMap::new()).1
}

async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&b).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, bytes) = send(app, method, uri, body).await;
    (s, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn upload(app: &Router, seconds: f64, with_reference: bool) -> Vec<String> {
    let (clip, reference) = melody(seconds);
    let mut body = json!({ "audio_wav_base64": B64.encode(encode_wav(&clip)), "name": "take" });
    if with_reference {
        body["reference_hz"] = json!(reference);
    }
    let (s, v) = call(app, "POST", "/sessions", Some(body)).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    serde_json::from_value(v["sessions"].clone()).unwrap()
}

fn code(v: &Value) -> &str {
    v["error"]["code"].as_str().unwrap_or("")
}

async fn suggest(app: &Router, id: &str, k: usize) -> Vec<(usize, f64)> {
    let (s, v) = call(app, "GET", &format!("/sessions/{id}/suggestions?k={k}"), None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    v["suggestions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| (x["frame"].as_u64().unwrap() as usize, x["predicted_hz"].as_f64().unwrap()))
        .collect()
}

async fn annotate(app: &Router, id: &str, items: Value) -> (StatusCode, Value) {
    call(app, "POST", &format!("/sessions/{id}/annotations"), Some(json!({ "annotations": items }))).await
}

#[tokio::test]
async fn long_upload_becomes_linked_chunk_sessions() {
    let app = app();
    let ids = upload(&app, 12.0, false).await;
    assert_eq!(ids.len(), 3);
    let (s, v) = call(&app, "GET", &format!("/sessions/{}", ids[2]), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["valid_frames"], 200);
    assert_eq!(v["n_frames"], 500);
    assert_eq!(v["chunk_index"], 2);
    assert_eq!(v["linked"], json!(ids));
    assert_eq!(v["predictions_hz"].as_array().unwrap().len(), 500);
    assert_eq!(v["confidence"].as_array().unwrap().len(), 500);
    assert!(v["query_scores"].is_null());
    let img = &v["spectrogram"];
    let bytes = B64.decode(img["data_base64"].as_str().unwrap()).unwrap();
    assert_eq!(bytes.len(), img["bins"].as_u64().unwrap() as usize * 500);
    assert_eq!(img["bins"], 257);
    let (_, list) = call(&app, "GET", "/sessions", None).await;
    assert_eq!(list.as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn suggestions_avoid_padding_and_annotated_frames() {
    let app = app();
    let ids = upload(&app, 7.0, false).await;
    let last = &ids[1];
    let first = suggest(&app, last, 5).await;
    assert!(first.iter().all(|&(f, _)| f < 200));
    let items: Vec<Value> = first.iter().map(|&(f, _)| json!({ "frame": f, "hz": 220.0 })).collect();
    let (s, v) = annotate(&app, last, json!(items)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["accepted"], 5);
    assert_eq!(v["pending"], json!([]));
    let (s, _) = call(&app, "POST", &format!("/sessions/{last}/adapt"), None).await;
    assert_eq!(s, StatusCode::OK);
    let second = suggest(&app, last, 5).await;
    assert!(second.iter().all(|(f, _)| !first.iter().any(|(g, _)| g == f)));
}

#[tokio::test]
async fn invalid_annotations_are_rejected() {
    let app = app();
    let id = upload(&app, 5.0, false).await.remove(0);
    let frames = suggest(&app, &id, 5).await;
    let unsuggested = (0..500).find(|f| !frames.iter().any(|(g, _)| g == f)).unwrap();

    let (s, v) = annotate(&app, &id, json!([{ "frame": unsuggested, "hz": 220.0 }])).await;
    assert_eq!((s, code(&v)), (StatusCode::CONFLICT, "unsuggested_frame"));
    for bad in [30.0, -1.0, 5000.0] {
        let (s, v) = annotate(&app, &id, json!([{ "frame": frames[0].0, "hz": bad }])).await;
        assert_eq!((s, code(&v)), (StatusCode::UNPROCESSABLE_ENTITY, "invalid_value"), "{bad}");
    }
    let (s, _) = annotate(&app, &id, json!([{ "frame": frames[0].0 }])).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = annotate(&app, &id, json!([{ "frame": frames[0].0, "class": 506 }])).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/adapt"), None).await;
    assert_eq!((s, code(&v)), (StatusCode::CONFLICT, "incomplete_annotations"));

    let (s, _) = annotate(&app, &id, json!([{ "frame": frames[0].0, "hz": 220.0 }])).await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = annotate(&app, &id, json!([{ "frame": frames[0].0, "hz": 220.0 }])).await;
    assert_eq!((s, v["accepted"].as_u64()), (StatusCode::OK, Some(0)));
    let (s, v) = annotate(&app, &id, json!([{ "frame": frames[0].0, "hz": 440.0 }])).await;
    assert_eq!((s, code(&v)), (StatusCode::CONFLICT, "annotation_conflict"));
}

#[tokio::test]
async fn adapt_round_trip_and_export() {
    let app = app();
    let id = upload(&app, 5.0, true).await.remove(0);
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/adapt"), None).await;
    assert_eq!((s, code(&v)), (StatusCode::CONFLICT, "nothing_to_adapt"));

    let frames = suggest(&app, &id, 5).await;
    let items: Vec<Value> = frames
        .iter()
        .enumerate()
        .map(|(i, &(f, _))| if i == 0 { json!({ "frame": f, "class": 0 }) } else { json!({ "frame": f, "hz": 233.3 }) })
        .collect();
    annotate(&app, &id, json!(items)).await;
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/adapt"), None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["iteration"], 1);
    assert_eq!(v["frames_used"], 5);
    assert_eq!(v["classifier_losses"].as_array().unwrap().len(), 4);
    assert!(v["query_before"]["rpa"].is_number() && v["query_after"]["rpa"].is_number());
    let changed = v["changed"].as_array().unwrap();
    assert!(changed.iter().all(|m| m.as_u64().unwrap() < 500));

    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/adapt"), None).await;
    assert_eq!((s, code(&v)), (StatusCode::CONFLICT, "nothing_to_adapt"));

    let (s, v) = call(&app, "GET", &format!("/sessions/{id}/export"), None).await;
    assert_eq!(s, StatusCode::OK);
    let lines: Vec<f64> = v["labels"].as_str().unwrap().lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(lines.len(), 500);
    assert_eq!(lines[frames[0].0], 0.0);
    for &(f, _) in &frames[1..] {
        assert_eq!(lines[f], 233.3);
    }
    assert_eq!(v["report"]["iterations"].as_array().unwrap().len(), 2);
    assert_eq!(v["report"]["annotated"][0].as_array().unwrap().len(), 5);
}

#[tokio::test]
async fn audio_slices_are_wav_around_the_frame() {
    let app = app();
    let id = upload(&app, 5.0, false).await.remove(0);
    let (s, bytes) = send(&app, "GET", &format!("/sessions/{id}/audio?frame=250&radius=0.25"), None).await;
    assert_eq!(s, StatusCode::OK);
    let clip = decode_wav(&bytes, "slice").unwrap();
    assert_eq!(clip.samples.len(), 4001);
    let (s, bytes) = send(&app, "GET", &format!("/sessions/{id}/audio?frame=0"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(decode_wav(&bytes, "edge").unwrap().samples.len(), 2001);
    let (s, _) = send(&app, "GET", &format!("/sessions/{id}/audio?frame=900"), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn bad_requests_and_unknown_sessions() {
    let app = app();
    let (s, v) = call(&app, "GET", "/sessions/s999999", None).await;
    assert_eq!((s, code(&v)), (StatusCode::NOT_FOUND, "not_found"));
    let (s, _) = call(&app, "POST", "/sessions", Some(json!({ "audio_wav_base64": "%%%" }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, v) = call(&app, "POST", "/sessions", Some(json!({ "audio_wav_base64": B64.encode(b"not a wav") }))).await;
    assert_eq!((s, code(&v)), (StatusCode::UNPROCESSABLE_ENTITY, "invalid_audio"));
    let (s, _) = call(&app, "POST", "/sessions", Some(json!({}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", "/sessions", Some(json!({ "episode_id": "missing" }))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app_with(Some(dir.path()), BTreeMap::new());
    let id = upload(&app, 5.0, true).await.remove(0);
    let frames = suggest(&app, &id, 5).await;
    let items: Vec<Value> = frames.iter().map(|&(f, _)| json!({ "frame": f, "hz": 221.5 })).collect();
    annotate(&app, &id, json!(items)).await;
    call(&app, "POST", &format!("/sessions/{id}/adapt"), None).await;
    let pending = suggest(&app, &id, 5).await;
    let (_, before) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    drop(app);

    let (state, app) = app_with(Some(dir.path()), BTreeMap::new());
    assert_eq!(state.session_ids(), vec![id.clone()]);
    let (s, after) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    for key in ["iteration", "predictions_hz", "confidence", "annotated", "pending", "parameters_checksum", "query_scores"] {
        assert_eq!(before[key], after[key], "{key}");
    }
    let items: Vec<Value> = pending.iter().map(|&(f, _)| json!({ "frame": f, "hz": 330.0 })).collect();
    let (s, _) = annotate(&app, &id, json!(items)).await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/adapt"), None).await;
    assert_eq!((s, v["iteration"].as_u64()), (StatusCode::OK, Some(2)));
    let next = upload(&app, 5.0, false).await;
    assert_ne!(next[0], id);
}

#[tokio::test]
async fn service_matches_the_library_adaptation_path() {
    let (clip, reference) = melody(5.0);
    let mut catalog = BTreeMap::new();
    catalog.insert(
        "melody#0".to_string(),
        CatalogEntry {
            clip: clip.clone(),
            reference_hz: Some(reference.clone()),
        },
    );
    let (_, app) = app_with(None, catalog);
    let (s, v) = call(&app, "POST", "/sessions", Some(json!({ "episode_id": "melody#0" }))).await;
    assert_eq!(s, StatusCode::CREATED);
    let id = v["sessions"][0].as_str().unwrap().to_string();

    let m = models();
    let labels = quantize_labels(&reference, 500).unwrap();
    let episode = PreparedEpisode {
        id: "melody#0".into(),
        features: m.base.features(&Stft::new().magnitude(&clip.samples).unwrap()).unwrap(),
        labels: Some(labels.clone()),
        valid_frames: 500,
    };
    let h = hyper();
    assert_eq!(h.selection, Selection::Active);
    let mut oracle = oracle_annotator(Some(&labels), "melody#0").unwrap();
    let expected = meta_test_episode(&m.heads, &m.theta, &m.psi, &episode, &mut oracle, &h).unwrap();

    let mut last = Value::Null;
    for _ in 0..h.iterations {
        let frames = suggest(&app, &id, h.k).await;
        let items: Vec<Value> = frames
            .iter()
            .map(|&(f, _)| json!({ "frame": f, "hz": melodapt::signal::class_to_hz(labels.classes[f]).unwrap() }))
            .collect();
        annotate(&app, &id, json!(items)).await;
        last = call(&app, "POST", &format!("/sessions/{id}/adapt"), None).await.1;
    }
    let want = format!("{:016x}{:016x}", expected.theta.checksum(), expected.psi.checksum());
    assert_eq!(last["parameters_checksum"], want);
    let got: Vec<f64> = serde_json::from_value(last["predictions_hz"].clone()).unwrap();
    assert_eq!(got, expected.predictions.to_hz());
    let (_, export) = call(&app, "GET", &format!("/sessions/{id}/export"), None).await;
    let rows = export["report"]["iterations"].as_array().unwrap();
    for (row, rec) in rows.iter().zip(&expected.iterations) {
        assert_eq!(row["scores"], serde_json::to_value(rec.scores).unwrap());
        assert_eq!(row["annotated"], json!(rec.annotated));
    }
}
