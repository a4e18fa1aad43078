use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use fdvv_core::bspline::BSplineCurve;
use fdvv_core::model::{FdvvModel, VelocityCurve};
use fdvv_core::vibration::VibrationDescriptor;
use fdvv_service::server::{router, AppState};
use fdvv_service::store::ModelStore;
use serde_json::{json, Value};
use tower::ServiceExt;

fn button(id: &str) -> FdvvModel {
    let forces: Vec<f64> = (0..15).map(|i| 30.0 + 3.0 * i as f64).collect();
    FdvvModel {
        button_id: id.into(),
        travel_range_mm: 4.0,
        activation_point_mm: 2.0,
        press_curves: [50.0, 150.0]
            .iter()
            .map(|&v| VelocityCurve {
                velocity_mm_s: v,
                curve: BSplineCurve::with_forces(3, 0.0, 4.0, &forces).unwrap(),
            })
            .collect(),
        release_curves: None,
        vibration: Some(VibrationDescriptor {
            onset_mm: 2.4,
            duration_ms: 16.0,
            frequency_hz: 239.0,
            template_id: "sin-239hz-end0.0v".into(),
        }),
    }
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty))
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = axum::body::to_bytes(res.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn app_with(ids: &[&str]) -> Router {
    let app = router(AppState::new(ModelStore::in_memory()));
    for id in ids {
        let (s, _) = call(&app, Method::POST, "/models", Some(serde_json::to_value(button(id)).unwrap())).await;
        assert_eq!(s, StatusCode::CREATED);
    }
    app
}

async fn wait_job(app: &Router, id: u64) -> Value {
    for _ in 0..600 {
        let (s, job) = call(app, Method::GET, &format!("/jobs/{id}"), None).await;
        assert_eq!(s, StatusCode::OK);
        if job["status"] == "done" || job["status"] == "failed" {
            return job;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("job {id} did not finish");
}

fn points(entry: &Value) -> Vec<[f64; 2]> {
    serde_json::from_value(entry["model"]["press_curves"][0]["control_points"].clone()).unwrap()
}

#[tokio::test]
async fn unknown_ids_are_404() {
    let app = app_with(&[]).await;
    for (m, uri) in [
        (Method::GET, "/models/ghost"),
        (Method::GET, "/jobs/77"),
        (Method::GET, "/jobs/not-a-number"),
        (Method::GET, "/vibration/ghost/templates"),
        (Method::GET, "/sessions/5"),
    ] {
        assert_eq!(call(&app, m, uri, None).await.0, StatusCode::NOT_FOUND, "{uri}");
    }
    let edit = json!({ "revision": 1, "control_points": [] });
    assert_eq!(
        call(&app, Method::PUT, "/models/ghost/control-points", Some(edit)).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        call(&app, Method::POST, "/models/ghost/compensate", Some(json!({}))).await.0,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn edit_round_trip_and_revisions() {
    let app = app_with(&["b"]).await;
    let (_, entry) = call(&app, Method::GET, "/models/b", None).await;
    assert_eq!(entry["revision"], 1);
    let mut pts = points(&entry);
    pts[7][1] += 20.0;

    let edit = json!({ "revision": 1, "control_points": pts, "annotations": { "vibration_onset_mm": 2.2 } });
    let (s, saved) = call(&app, Method::PUT, "/models/b/control-points", Some(edit.clone())).await;
    assert_eq!(s, StatusCode::OK, "{saved}");
    assert_eq!(saved["revision"], 2);

    let (_, back) = call(&app, Method::GET, "/models/b", None).await;
    assert_eq!(points(&back), pts);
    assert_eq!(back["model"]["vibration"]["onset_mm"], 2.2);

    // the same edit again carries a stale revision
    let (s, body) = call(&app, Method::PUT, "/models/b/control-points", Some(edit)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["current_revision"], 2);
}

#[tokio::test]
async fn invariant_violations_are_422_with_fields() {
    let app = app_with(&["b"]).await;
    let (_, entry) = call(&app, Method::GET, "/models/b", None).await;
    let pts = points(&entry);

    let bad_activation = json!({ "revision": 1, "control_points": pts, "annotations": { "activation_point_mm": 4.0 } });
    let (s, body) = call(&app, Method::PUT, "/models/b/control-points", Some(bad_activation)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["fields"][0]["field"], "activation_point_mm");

    let mut crossed = pts.clone();
    crossed[3][0] = crossed[4][0] + 0.1;
    let (s, body) = call(
        &app,
        Method::PUT,
        "/models/b/control-points",
        Some(json!({ "revision": 1, "control_points": crossed })),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["fields"][0]["field"], "control_points[4]");

    let short: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] * 0.9, p[1]]).collect();
    let (s, body) = call(
        &app,
        Method::PUT,
        "/models/b/control-points",
        Some(json!({ "revision": 1, "control_points": short })),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["fields"][0]["field"].as_str().unwrap().starts_with("press_curves[0]"));

    // rejected edits leave the revision alone
    let (_, after) = call(&app, Method::GET, "/models/b", None).await;
    assert_eq!(after["revision"], 1);
}

#[tokio::test]
async fn conflicting_edits_cannot_both_land() {
    let app = app_with(&["b"]).await;
    let (_, entry) = call(&app, Method::GET, "/models/b", None).await;
    let mut handles = Vec::new();
    for i in 0..8 {
        let mut pts = points(&entry);
        pts[5][1] += i as f64;
        let app = app.clone();
        handles.push(tokio::spawn(async move {
            call(
                &app,
                Method::PUT,
                "/models/b/control-points",
                Some(json!({ "revision": 1, "control_points": pts })),
            )
            .await
            .0
        }));
    }
    let mut codes = Vec::new();
    for h in handles {
        codes.push(h.await.unwrap());
    }
    assert_eq!(codes.iter().filter(|&&c| c == StatusCode::OK).count(), 1);
    assert_eq!(codes.iter().filter(|&&c| c == StatusCode::CONFLICT).count(), 7);
}

#[tokio::test]
async fn compensate_then_simulate() {
    let app = app_with(&["b"]).await;
    let (s, started) = call(
        &app,
        Method::POST,
        "/models/b/compensate",
        Some(json!({ "plant_id": "identity", "runs": 1 })),
    )
    .await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let job = wait_job(&app, started["job_id"].as_u64().unwrap()).await;
    assert_eq!(job["status"], "done", "{job}");
    assert_eq!(job["result"]["stored"], true);

    let (_, entry) = call(&app, Method::GET, "/models/b", None).await;
    assert_eq!(entry["revision"], 2);
    assert_eq!(entry["actuation"]["plant_id"], "identity");

    let (s, trace) = call(
        &app,
        Method::POST,
        "/simulate",
        Some(json!({ "model_id": "b", "plant_id": "identity", "press": { "velocity_mm_s": 100.0 } })),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{trace}");
    assert_eq!(trace["records"].as_array().unwrap().len(), 30 + 40 + 30);
    assert!(trace["summary"]["mean_abs_error_cn"].as_f64().unwrap() < 2.0, "{}", trace["summary"]);

    let (s, body) = call(
        &app,
        Method::POST,
        "/simulate",
        Some(json!({ "model_id": "b", "plant_id": "warp-drive", "press": { "velocity_mm_s": 100.0 } })),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["fields"][0]["field"], "plant_id");
}

#[tokio::test]
async fn simulate_without_actuation_or_with_wrong_travel_is_422() {
    let app = app_with(&["b"]).await;
    let press = json!({ "velocity_mm_s": 100.0 });
    let (s, body) = call(&app, Method::POST, "/simulate", Some(json!({ "model_id": "b", "press": press }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["fields"][0]["field"], "actuation");

    let table = fdvv_core::optimizer::params_to_actuation(&fdvv_core::optimizer::ButtonParams::midpoint()).unwrap();
    let (s, body) = call(
        &app,
        Method::POST,
        "/simulate",
        Some(json!({ "model_id": "b", "actuation": table, "press": press })),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["fields"][0]["field"], "actuation.travel_range_mm");
}

#[tokio::test]
async fn ratings_pick_the_favourite() {
    let app = app_with(&["b"]).await;
    let (_, list) = call(&app, Method::GET, "/vibration/b/templates", None).await;
    let ids: Vec<String> = list["templates"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(ids.len(), 9);
    for (id, score) in ids.iter().zip([3, 5, 7]) {
        let (s, _) = call(
            &app,
            Method::POST,
            "/vibration/b/rate",
            Some(json!({ "template_id": id, "score": score })),
        )
        .await;
        assert_eq!(s, StatusCode::OK);
    }
    let (_, list) = call(&app, Method::GET, "/vibration/b/templates", None).await;
    assert_eq!(list["best_template"], ids[2].as_str());

    let (s, _) = call(
        &app,
        Method::POST,
        "/vibration/b/rate",
        Some(json!({ "template_id": ids[0], "score": 8 })),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(
        &app,
        Method::POST,
        "/vibration/b/rate",
        Some(json!({ "template_id": "sin-1hz", "score": 4 })),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn optimize_job_reports_history() {
    let app = app_with(&[]).await;
    let (s, _) = call(&app, Method::POST, "/optimize", Some(json!({ "budget": 0 }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, started) = call(&app, Method::POST, "/optimize", Some(json!({ "budget": 6, "trials_per_eval": 4 }))).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let job = wait_job(&app, started["job_id"].as_u64().unwrap()).await;
    assert_eq!(job["status"], "done");
    assert_eq!(job["progress"], 1.0);
    let history = job["result"]["history"].as_array().unwrap();
    assert_eq!(history.len(), 6);
    let incumbents: Vec<f64> = history.iter().map(|h| h["incumbent"].as_f64().unwrap()).collect();
    assert!(incumbents.windows(2).all(|w| w[1] <= w[0]));
}

#[tokio::test]
async fn workspace_persists_edits() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(ModelStore::open(dir.path()).unwrap()));
    let (s, _) = call(&app, Method::POST, "/models", Some(serde_json::to_value(button("w")).unwrap())).await;
    assert_eq!(s, StatusCode::CREATED);
    let (_, entry) = call(&app, Method::GET, "/models/w", None).await;
    let mut pts = points(&entry);
    pts[2][1] = 12.5;
    let edit = json!({ "revision": 1, "control_points": pts });
    assert_eq!(call(&app, Method::PUT, "/models/w/control-points", Some(edit)).await.0, StatusCode::OK);

    let reopened = router(AppState::new(ModelStore::open(dir.path()).unwrap()));
    let (_, back) = call(&reopened, Method::GET, "/models/w", None).await;
    assert_eq!(back["revision"], 2);
    assert_eq!(points(&back), pts);
    let (_, list) = call(&reopened, Method::GET, "/models", None).await;
    assert_eq!(list[0]["button_id"], "w");
}
