use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{header, HeaderValue, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use olit_core::bundle::TrainOptions;
use olit_core::cohortgen::GeneratorConfig;
use olit_core::pipeline::{self, RiskPolicy};
use olit_server::{router, AppState, Snapshot, SnapshotSource};
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

struct Fixture {
    _dir: TempDir,
    with_lr: SnapshotSource,
    without_lr: SnapshotSource,
}

/// One generated cohort with two bundles, built once for all tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        pipeline::generate(d, &GeneratorConfig::default()).unwrap();
        let cal = pipeline::load_calendar(&d.join("calendar.cfg")).unwrap();
        let features = d.join("features.csv");
        pipeline::ingest(&d.join("logs.csv"), &d.join("grades.csv"), &cal, None, &features).unwrap();
        let train = |name: &str, with_lr: bool| {
            let out = d.join(name);
            let opts = TrainOptions { with_lr, ..TrainOptions::default() };
            pipeline::train(&features, &out, Some(cal.clone()), &opts).unwrap();
            SnapshotSource { bundle: out, features: features.clone() }
        };
        let with_lr = train("full.olit.json", true);
        let without_lr = train("trees.olit.json", false);
        Fixture { _dir: dir, with_lr, without_lr }
    })
}

fn app_with(source: &SnapshotSource, token: Option<&str>, cors: Option<&str>) -> (Router, Arc<AppState>) {
    let snap = Snapshot::load(source).unwrap();
    let state = Arc::new(AppState::new(snap, Some(source.clone()), token.map(String::from), RiskPolicy::default()));
    (router(state.clone(), cors.map(|c| HeaderValue::from_str(c).unwrap())), state)
}

fn app() -> Router {
    app_with(&fixture().without_lr, None, None).0
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let body = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, body)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let req =
        Request::post(uri).header(header::CONTENT_TYPE, "application/json").body(Body::from(body.to_string())).unwrap();
    send(app, req).await
}

fn keys(v: &Value) -> BTreeSet<&str> {
    v.as_object().unwrap().keys().map(String::as_str).collect()
}

#[tokio::test]
async fn students_match_library_predictions() {
    let app = app();
    let (status, body) = get(&app, "/students").await;
    assert_eq!(status, StatusCode::OK);
    let snap = Snapshot::load(&fixture().without_lr).unwrap();
    let rows = body.as_array().unwrap();
    assert_eq!(rows.len(), 107);
    for r in rows {
        assert_eq!(
            keys(r),
            BTreeSet::from(["student_id", "features", "predicted_grade", "grade_class", "risk_flag", "final_grade"])
        );
        let id = r["student_id"].as_str().unwrap();
        let leaf = snap.bundle.predict_early(snap.cohort.row(id).unwrap()).unwrap();
        assert_eq!(r["predicted_grade"], json!(leaf.class));
        assert_eq!(r["risk_flag"], json!(leaf.class == 0 || leaf.class == 2));
        assert!(snap.bundle.tree_early.classes.contains(&leaf.class));
        for v in r["features"].as_object().unwrap().values() {
            assert!((0.0..=1.0).contains(&v.as_f64().unwrap()));
        }
    }
}

#[tokio::test]
async fn student_detail_carries_the_path() {
    let app = app();
    let (status, body) = get(&app, "/students/s001").await;
    assert_eq!(status, StatusCode::OK);
    assert!(body["path"].as_array().unwrap().iter().all(|c| c["relation"] == "<" || c["relation"] == ">="));
    assert!(body["leaf_id"].is_u64());
    let (status, body) = get(&app, "/students/nobody").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "unknown_student");
    assert!(body["message"].as_str().unwrap().contains("nobody"));
}

#[tokio::test]
async fn empty_whatif_repeats_the_prediction() {
    let app = app();
    let (_, detail) = get(&app, "/students/s003").await;
    let (status, w) = post(&app, "/whatif", json!({"student_id": "s003", "overrides": {}})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(w["after"]["class"], detail["predicted_grade"]);
    assert_eq!(w["before"], w["after"]);
    assert_eq!(w["entered"], json!([]));
}

#[tokio::test]
async fn whatif_following_a_plan_reaches_the_promised_grade() {
    let app = app();
    let (_, students) = get(&app, "/students").await;
    let mut checked = 0;
    for s in students.as_array().unwrap() {
        let id = s["student_id"].as_str().unwrap();
        let (status, strategy) = get(&app, &format!("/students/{id}/strategy?target=4,5&week=4")).await;
        assert_eq!(status, StatusCode::OK);
        let Some(plan) = strategy["plan"].as_object() else { continue };
        if plan["n_changes"] == 0 {
            continue;
        }
        let overrides: BTreeMap<String, f64> = plan["changes"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| (c["feature"].as_str().unwrap().to_string(), c["suggested_value"].as_f64().unwrap()))
            .collect();
        let (status, w) = post(&app, "/whatif", json!({"student_id": id, "overrides": overrides})).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(w["after"]["class"], plan["predicted_class"]);
        assert!(!w["entered"].as_array().unwrap().is_empty());
        checked += 1;
    }
    assert!(checked > 0, "no student had a nonempty plan");
}

#[tokio::test]
async fn whatif_rejects_bad_overrides() {
    let app = app();
    let (status, body) = post(&app, "/whatif", json!({"student_id": "s001", "overrides": {"Week5 Stat9": 0.5}})).await;
    assert_eq!((status, body["error"].as_str()), (StatusCode::BAD_REQUEST, Some("unknown_feature")));
    let (status, body) = post(&app, "/whatif", json!({"student_id": "s001", "overrides": {"Week5 Stat0": 1.2}})).await;
    assert_eq!((status, body["error"].as_str()), (StatusCode::BAD_REQUEST, Some("value_out_of_range")));
    let (status, _) = post(&app, "/whatif", json!({"student_id": "ghost"})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn strategy_for_an_on_target_student_is_empty() {
    let app = app();
    let (_, students) = get(&app, "/students").await;
    let high = students.as_array().unwrap().iter().find(|s| s["predicted_grade"] == 5).unwrap();
    let id = high["student_id"].as_str().unwrap();
    let (status, body) = get(&app, &format!("/students/{id}/strategy?target=4,5")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["plan"]["n_changes"], 0);
    assert_eq!(body["intervention_week"], 4);
    let (status, _) = get(&app, &format!("/students/{id}/strategy?target=9")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn table1_needs_the_logistic_models() {
    let (status, body) = get(&app(), "/experiment/table1").await;
    assert_eq!((status, body["error"].as_str()), (StatusCode::CONFLICT, Some("bundle_missing_component")));
    let (full, _) = app_with(&fixture().with_lr, None, None);
    let (status, body) = get(&full, "/experiment/table1").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body.as_array().unwrap().len(), 27);
}

#[tokio::test]
async fn cohort_summary_reports_groups() {
    let (status, body) = get(&app(), "/cohort/summary").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["n_students"], 107);
    let names: Vec<&str> = body["groups"].as_array().unwrap().iter().map(|g| g["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["Dropout", "Low", "High"]);
    assert_eq!(body["weekly_curve"].as_array().unwrap().len(), 9);
}

#[tokio::test]
async fn reload_is_guarded_by_the_token() {
    let source = &fixture().without_lr;
    let reload = |auth: Option<&str>| {
        let mut req = Request::post("/admin/reload");
        if let Some(a) = auth {
            req = req.header(header::AUTHORIZATION, a);
        }
        req.body(Body::empty()).unwrap()
    };
    let (disabled, _) = app_with(source, None, None);
    assert_eq!(send(&disabled, reload(Some("Bearer x"))).await.0, StatusCode::FORBIDDEN);
    let (guarded, state) = app_with(source, Some("sekret"), None);
    assert_eq!(send(&guarded, reload(None)).await.0, StatusCode::UNAUTHORIZED);
    assert_eq!(send(&guarded, reload(Some("Bearer wrong"))).await.0, StatusCode::UNAUTHORIZED);
    let before = state.snapshot();
    let (status, body) = send(&guarded, reload(Some("Bearer sekret"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["students"], 107);
    assert!(!Arc::ptr_eq(&before, &state.snapshot()));
}

#[tokio::test]
async fn cors_allows_the_configured_origin() {
    let (app, _) = app_with(&fixture().without_lr, None, Some("http://localhost:5173"));
    let req =
        Request::get("/cohort/summary").header(header::ORIGIN, "http://localhost:5173").body(Body::empty()).unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(resp.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "http://localhost:5173");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_reads_agree() {
    let app = app();
    let (_, expected) = get(&app, "/students").await;
    let tasks: Vec<_> = (0..32)
        .map(|i| {
            let app = app.clone();
            tokio::spawn(async move {
                if i % 2 == 0 {
                    get(&app, "/students").await.1
                } else {
                    post(&app, "/whatif", json!({"student_id": "s010", "overrides": {"Week5 Stat0": 0.9}})).await;
                    get(&app, "/students").await.1
                }
            })
        })
        .collect();
    for t in tasks {
        assert_eq!(t.await.unwrap(), expected);
    }
    assert!(Path::new(&fixture().without_lr.bundle).exists());
}
