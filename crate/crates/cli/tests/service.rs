use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use objinsert_cli::serve::{router, AppState};
use objinsert_core::backends::BackendProfile;
use objinsert_core::conditioning::Captioner;
use objinsert_core::harness::{fixtures, knob_ranges, AssetRegistry, Pipeline};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    app: axum::Router,
}

fn fixture_with(profile: BackendProfile) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let m = fixtures::write_assets(&dir.path().join("assets"), 2, 2, 1).unwrap();
    let pipeline = Pipeline::new(
        AssetRegistry::from_manifest(&m).into(),
        Captioner::new(None).into(),
        profile,
    );
    let state = AppState::new(pipeline, dir.path().join("jobs"), 2);
    Fixture {
        _dir: dir,
        app: router(state),
    }
}

fn fixture() -> Fixture {
    fixture_with(BackendProfile::default())
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn request(background: &str) -> Value {
    json!({
        "object": {"id": "obj0"},
        "background": {"id": background},
        "render": {"view_tag": "view1"},
        "placement": {"x": 20, "y": 16, "scale": 1.0},
        "seed": 3
    })
}

#[tokio::test]
async fn healthz_and_knobs() {
    let f = fixture();
    let (s, body) = call(&f.app, "GET", "/healthz", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    let (s, body) = call(&f.app, "GET", "/knobs", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["knobs"].as_array().unwrap().len(), knob_ranges().len());
    assert!(body["knobs"].as_array().unwrap().iter().any(|k| k["name"] == "injection.tau_f"));
}

#[tokio::test]
async fn assets_and_renders() {
    let f = fixture();
    let (s, body) = call(&f.app, "GET", "/assets", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["backgrounds"], json!(["desk0"]));
    assert_eq!(body["objects"][0]["views"], json!(["view0", "view1"]));
    let (s, body) = call(&f.app, "GET", "/renders/obj1", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["view_tags"], json!(["view0", "view1"]));
    let (s, _) = call(&f.app, "GET", "/renders/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn unknown_background_is_400_naming_background() {
    let f = fixture();
    let (s, body) = call(&f.app, "POST", "/jobs", Some(request("desk9"))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "background");
    assert!(body["error"].as_str().unwrap().contains("background"));
}

#[tokio::test]
async fn malformed_and_out_of_range_requests_name_the_field() {
    let f = fixture();
    let mut r = request("desk0");
    r["injection"] = json!({"tau_q": 1.5});
    let (s, body) = call(&f.app, "POST", "/jobs", Some(r)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "injection.tau_q");

    let mut r = request("desk0");
    r["controls"] = json!({"guidance": "high"});
    let (s, body) = call(&f.app, "POST", "/jobs", Some(r)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "controls.guidance");
}

#[tokio::test]
async fn unknown_job_is_404() {
    let f = fixture();
    let (s, _) = call(&f.app, "GET", "/jobs/job-999999", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn broken_backend_is_503() {
    let f = fixture_with(BackendProfile::Config("/nonexistent/backend.json".into()));
    let (s, body) = call(&f.app, "GET", "/healthz", None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["status"], "not_ready");
    let (s, _) = call(&f.app, "POST", "/jobs", Some(request("desk0"))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn job_lifecycle_reaches_done_with_result_path() {
    let f = fixture();
    let (s, body) = call(&f.app, "POST", "/jobs", Some(request("desk0"))).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{body}");
    let id = body["id"].as_str().unwrap().to_string();
    assert_eq!(body["status"], "queued");
    let deadline = Instant::now() + Duration::from_secs(120);
    let mut seen = vec!["queued".to_string()];
    let job = loop {
        let (s, job) = call(&f.app, "GET", &format!("/jobs/{id}"), None).await;
        assert_eq!(s, StatusCode::OK);
        let st = job["status"].as_str().unwrap().to_string();
        if seen.last() != Some(&st) {
            seen.push(st.clone());
        }
        if st == "done" || st == "failed" {
            break job;
        }
        assert!(Instant::now() < deadline, "job stuck in {st}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    };
    assert_eq!(job["status"], "done", "{job}");
    // queued -> (running) -> done, never backwards
    let order = ["queued", "running", "done"];
    let idx: Vec<usize> = seen.iter().map(|s| order.iter().position(|o| o == s).unwrap()).collect();
    assert!(idx.windows(2).all(|w| w[0] < w[1]), "{seen:?}");
    let image = job["result"]["image"].as_str().unwrap();
    assert!(std::path::Path::new(image).is_file());
    assert_eq!(job["request"], serde_json::to_value(
        objinsert_core::harness::CompositeRequest::from_json(&request("desk0").to_string()).unwrap()
    ).unwrap());

    let resp = f
        .app
        .clone()
        .oneshot(Request::get(format!("/jobs/{id}/image")).body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&bytes[1..4], b"PNG");
}

#[tokio::test]
async fn preview_is_fast_and_leaves_background_outside_mask() {
    use base64::Engine as _;
    let f = fixture();
    let start = Instant::now();
    let (s, body) = call(&f.app, "POST", "/preview", Some(request("desk0"))).await;
    let elapsed = start.elapsed();
    assert_eq!(s, StatusCode::OK, "{body}");
    assert!(elapsed < Duration::from_secs(1), "{elapsed:?}");
    let decode = |k: &str| {
        let bytes = base64::engine::general_purpose::STANDARD.decode(body[k].as_str().unwrap()).unwrap();
        objinsert_core::imageio::decode_rgb(&bytes).unwrap()
    };
    let (coarse, mask) = (decode("coarse_png"), decode("mask_png"));
    let bg = objinsert_core::imageio::load_rgb(f._dir.path().join("assets/desk0.png")).unwrap();
    let (c, m, b) = (coarse.values(), mask.values(), bg.values());
    let mut outside = 0;
    for y in 0..bg.height() {
        for x in 0..bg.width() {
            if m[[0, y, x]] == 0.0 {
                outside += 1;
                for ch in 0..3 {
                    assert_eq!(c[[ch, y, x]], b[[ch, y, x]], "pixel ({x},{y}) differs outside the mask");
                }
            }
        }
    }
    assert!(outside > 0);
}
