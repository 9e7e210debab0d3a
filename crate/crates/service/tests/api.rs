use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use distillseg_core::data::RasterImage;
use distillseg_core::gateway::toy::{ToyConfig, ToyFoundationModel};
use distillseg_core::gateway::{Embedding, EmbeddingStore, FineTuneExample, FoundationModel, MaskProposal};
use distillseg_core::prompt::{AnnotationLog, AnnotationMode, Prompt};
use distillseg_core::synth::generate_synthetic_corpus;
use distillseg_core::{BinaryMask, Error, Result};
use distillseg_service::{replay_progress, router, AppState, ServiceConfig};

struct Fixture {
    dir: tempfile::TempDir,
    store: Arc<EmbeddingStore>,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic_corpus(6, 3, 64, &dir.path().join("corpus")).unwrap();
        let model: Box<dyn FoundationModel> = Box::new(ToyFoundationModel::new(ToyConfig::default()).unwrap());
        let store = Arc::new(EmbeddingStore::new(Arc::new(manifest), Arc::new(Mutex::new(model)), None));
        Self { dir, store }
    }

    fn log_path(&self) -> std::path::PathBuf {
        self.dir.path().join("log").join("annotations.jsonl")
    }

    fn app(&self, config: ServiceConfig) -> (Arc<AppState>, Router) {
        let log = AnnotationLog::open(self.log_path()).unwrap();
        let state = AppState::new(self.store.clone(), log, config).unwrap();
        (state.clone(), router(state))
    }

    fn first_id(&self) -> String {
        self.store.manifest().samples()[0].id.clone()
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>, annotator: Option<&str>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(a) = annotator {
        req = req.header("X-Annotator", a);
    }
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body, None).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn open(app: &Router, sample_id: &str) -> String {
    let (s, v) = call_json(app, "POST", "/sessions", Some(json!({ "sample_id": sample_id }))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn full_annotation_round_trip() {
    let fx = Fixture::new();
    let (_state, app) = fx.app(ServiceConfig::default());
    let id = fx.first_id();
    let sid = open(&app, &id).await;

    let (s, png) = call(&app, "GET", &format!("/images/{id}"), None, None).await;
    assert_eq!(s, StatusCode::OK);
    let img = RasterImage::from_png_bytes(&png).unwrap();
    assert_eq!((img.width, img.height), (64, 64));

    let prompt = json!({ "kind": "box", "box": [10.0, 10.0, 40.0, 40.0] });
    let (s, v) = call_json(&app, "POST", &format!("/sessions/{sid}/prompts?raster=true"), Some(prompt)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let proposals = v["proposals"].as_array().unwrap();
    assert_eq!(proposals.len(), 3);
    let scores: Vec<f64> = proposals.iter().map(|p| p["predicted_iou"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]), "not sorted: {scores:?}");
    for p in proposals {
        let mask = BinaryMask::from_rle(p["rle"].as_str().unwrap()).unwrap();
        assert_eq!(mask.dims(), (64, 64));
        let png = base64::engine::general_purpose::STANDARD
            .decode(p["png_b64"].as_str().unwrap())
            .unwrap();
        assert_eq!(BinaryMask::from_png_bytes(&png).unwrap(), mask);
    }
    let chosen_rle = proposals[0]["rle"].as_str().unwrap().to_string();

    let commit = json!({ "proposal_index": 0, "nonce": "n-1" });
    let (s, body) = call(&app, "POST", &format!("/sessions/{sid}/commit"), Some(commit.clone()), Some("alice")).await;
    assert_eq!(s, StatusCode::CREATED);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["duplicate"], json!(false));
    assert_eq!(v["record"]["rle"].as_str().unwrap(), chosen_rle);
    assert_eq!(v["record"]["annotator"], json!("alice"));
    assert_eq!(v["record"]["mode"], json!("manual_ui"));

    // same nonce: no second append, same record back
    let (s, body2) = call(&app, "POST", &format!("/sessions/{sid}/commit"), Some(commit), Some("alice")).await;
    assert_eq!(s, StatusCode::OK);
    let v2: Value = serde_json::from_slice(&body2).unwrap();
    assert_eq!(v2["duplicate"], json!(true));
    assert_eq!(v2["record"], v["record"]);

    let records = AnnotationLog::open(fx.log_path()).unwrap().records().unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].mode, AnnotationMode::ManualUi);
    assert_eq!(records[0].mask.to_rle(), chosen_rle);
    assert_eq!(records[0].prompts, vec![Prompt::bbox(10.0, 10.0, 40.0, 40.0)]);

    let (s, p) = call_json(&app, "GET", "/progress", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(p["annotated"], json!(1));
    assert_eq!(p["budgets"]["5"], json!(false));
}

#[tokio::test]
async fn progress_and_idempotency_survive_restart() {
    let fx = Fixture::new();
    let ids: Vec<String> = fx.store.manifest().samples().iter().map(|s| s.id.clone()).collect();
    let sid;
    {
        let (_state, app) = fx.app(ServiceConfig { budgets: vec![1, 2, 5], ..Default::default() });
        for id in &ids[..2] {
            let s = open(&app, id).await;
            let rle = BinaryMask::filled(64, 64, false).to_rle();
            let (st, _) = call_json(&app, "POST", &format!("/sessions/{s}/commit"), Some(json!({ "rle": rle, "nonce": "x" }))).await;
            assert_eq!(st, StatusCode::CREATED);
        }
        // a second commit for an already annotated sample does not bump the count
        let s = open(&app, &ids[0]).await;
        let rle = BinaryMask::filled(64, 64, true).to_rle();
        call_json(&app, "POST", &format!("/sessions/{s}/commit"), Some(json!({ "rle": rle, "nonce": "y" }))).await;
        sid = s;
    }
    let (state, app) = fx.app(ServiceConfig { budgets: vec![1, 2, 5], ..Default::default() });
    let (_, p) = call_json(&app, "GET", "/progress", None).await;
    assert_eq!(p, json!({ "annotated": 2, "budgets": { "1": true, "2": true, "5": false } }));
    let log = AnnotationLog::open(fx.log_path()).unwrap();
    assert_eq!(state.progress(), replay_progress(&log, &[1, 2, 5]).unwrap());

    // the old session is gone but its nonce is still known
    let (st, v) = call_json(&app, "POST", &format!("/sessions/{sid}/commit"), Some(json!({ "rle": "ignored", "nonce": "y" }))).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["duplicate"], json!(true));
    assert_eq!(log.records().unwrap().len(), 3);
}

#[tokio::test]
async fn error_mapping() {
    let fx = Fixture::new();
    let (_state, app) = fx.app(ServiceConfig::default());

    let (s, v) = call_json(&app, "POST", "/sessions", Some(json!({ "sample_id": "nope" }))).await;
    assert_eq!((s, v["kind"].as_str()), (StatusCode::NOT_FOUND, Some("UnknownSample")));
    let (s, _) = call(&app, "GET", "/images/nope", None, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, v) = call_json(&app, "POST", "/sessions/missing/prompts", Some(json!({ "kind": "point", "point": [1.0, 1.0], "label": "foreground" }))).await;
    assert_eq!((s, v["kind"].as_str()), (StatusCode::NOT_FOUND, Some("UnknownSession")));

    let sid = open(&app, &fx.first_id()).await;
    let (s, v) = call_json(&app, "POST", &format!("/sessions/{sid}/commit"), Some(json!({ "proposal_index": 0, "nonce": "a" }))).await;
    assert_eq!((s, v["kind"].as_str()), (StatusCode::CONFLICT, Some("NoPendingProposals")));

    let (s, v) = call_json(&app, "POST", &format!("/sessions/{sid}/prompts"), Some(json!({ "kind": "point", "point": [99.0, 1.0], "label": "foreground" }))).await;
    assert_eq!((s, v["kind"].as_str()), (StatusCode::BAD_REQUEST, Some("InvalidPrompt")));
    let (s, v) = call_json(&app, "POST", &format!("/sessions/{sid}/prompts"), Some(json!({ "kind": "box", "box": [5.0, 5.0, 5.0, 9.0] }))).await;
    assert_eq!((s, v["kind"].as_str()), (StatusCode::BAD_REQUEST, Some("InvalidPrompt")));

    let rle = BinaryMask::filled(32, 64, true).to_rle();
    let (s, v) = call_json(&app, "POST", &format!("/sessions/{sid}/commit"), Some(json!({ "rle": rle, "nonce": "b" }))).await;
    assert_eq!((s, v["kind"].as_str()), (StatusCode::BAD_REQUEST, Some("ShapeMismatch")));

    let (s, v) = call_json(&app, "POST", &format!("/sessions/{sid}/commit"), Some(json!({ "nonce": "c" }))).await;
    assert_eq!((s, v["kind"].as_str()), (StatusCode::BAD_REQUEST, Some("BadRequest")));

    call_json(&app, "POST", &format!("/sessions/{sid}/prompts"), Some(json!({ "kind": "point", "point": [30.0, 30.0], "label": "foreground" }))).await;
    let (s, _) = call_json(&app, "POST", &format!("/sessions/{sid}/commit"), Some(json!({ "proposal_index": 7, "nonce": "d" }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(AnnotationLog::open(fx.log_path()).unwrap().records().unwrap().is_empty());
}

#[tokio::test]
async fn idle_sessions_expire() {
    let fx = Fixture::new();
    let (_state, app) = fx.app(ServiceConfig { session_idle: Duration::from_millis(20), ..Default::default() });
    let sid = open(&app, &fx.first_id()).await;
    tokio::time::sleep(Duration::from_millis(60)).await;
    let (s, _) = call_json(&app, "POST", &format!("/sessions/{sid}/prompts"), Some(json!({ "kind": "point", "point": [3.0, 3.0], "label": "foreground" }))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

struct Offline;

impl FoundationModel for Offline {
    fn encoder_id(&self) -> &str {
        "offline"
    }
    fn target_side(&self) -> u32 {
        64
    }
    fn embedding_shape(&self) -> [usize; 3] {
        [1, 1, 1]
    }
    fn encode_image(&mut self, _: &RasterImage) -> Result<Embedding> {
        Err(Error::AdapterUnavailable("bridge down".into()))
    }
    fn propose(&mut self, _: &RasterImage, _: &Embedding, _: &Prompt) -> Result<Vec<MaskProposal>> {
        Err(Error::AdapterUnavailable("bridge down".into()))
    }
    fn encoder_digest(&self) -> Result<String> {
        Err(Error::AdapterUnavailable("bridge down".into()))
    }
    fn mask_decoder_digest(&self) -> Result<String> {
        Err(Error::AdapterUnavailable("bridge down".into()))
    }
    fn fine_tune_mask_decoder(&mut self, _: &[FineTuneExample], _: usize, _: f64) -> Result<Vec<f64>> {
        Err(Error::AdapterUnavailable("bridge down".into()))
    }
}

#[tokio::test]
async fn unavailable_adapter_maps_to_503() {
    let fx = Fixture::new();
    let model: Box<dyn FoundationModel> = Box::new(Offline);
    let store = Arc::new(EmbeddingStore::new(
        Arc::new(fx.store.manifest().clone()),
        Arc::new(Mutex::new(model)),
        None,
    ));
    let state = AppState::new(store, AnnotationLog::open(fx.log_path()).unwrap(), ServiceConfig::default()).unwrap();
    let app = router(state);
    let (s, v) = call_json(&app, "POST", "/sessions", Some(json!({ "sample_id": fx.first_id() }))).await;
    assert_eq!((s, v["kind"].as_str()), (StatusCode::SERVICE_UNAVAILABLE, Some("AdapterUnavailable")));
}

#[tokio::test]
async fn fifth_distinct_commit_flips_budget_five() {
    let fx = Fixture::new();
    let (_state, app) = fx.app(ServiceConfig::default());
    let ids: Vec<String> = fx.store.manifest().samples().iter().map(|s| s.id.clone()).collect();
    for (k, id) in ids[..5].iter().enumerate() {
        let sid = open(&app, id).await;
        let (s, v) = call_json(&app, "POST", &format!("/sessions/{sid}/prompts"), Some(json!({ "kind": "box", "box": [4.0, 4.0, 50.0, 50.0] }))).await;
        assert_eq!(s, StatusCode::OK);
        let rle0 = v["proposals"][0]["rle"].as_str().unwrap().to_string();
        let (s, _) = call_json(&app, "POST", &format!("/sessions/{sid}/commit"), Some(json!({ "proposal_index": 0, "nonce": format!("c{k}") }))).await;
        assert_eq!(s, StatusCode::CREATED);
        let last = AnnotationLog::open(fx.log_path()).unwrap().records().unwrap().pop().unwrap();
        assert_eq!(last.mask.to_rle(), rle0, "persisted mask is proposal 0");
        let (_, p) = call_json(&app, "GET", "/progress", None).await;
        assert_eq!(p["budgets"]["5"], json!(k == 4), "after {} commits", k + 1);
    }
}
