mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use common::*;
use http_body_util::BodyExt;
use incoforge_annotation::http::router;
use incoforge_annotation::AnnotationService;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &Router, method: &str, uri: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, String) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

async fn json_call(app: &Router, method: &str, uri: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
    let (s, text) = call(app, method, uri, token, body).await;
    (s, serde_json::from_str(&text).unwrap_or_else(|_| panic!("not json: {text}")))
}

fn assert_error(v: &Value, code: &str) {
    assert_eq!(v["error"], code, "{v}");
    assert!(v["detail"].as_str().is_some_and(|d| !d.is_empty()));
}

fn app() -> Router {
    let mut cfg = config();
    cfg.probes = probes(2);
    router(Arc::new(AnnotationService::in_memory(cfg).unwrap()), None)
}

async fn new_worker(app: &Router, role: &str) -> String {
    let (s, v) = json_call(app, "POST", "/api/workers", Some(ADMIN), Some(json!({ "role": role }))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert!(v["worker_id"].as_str().unwrap().starts_with('w'));
    v["token"].as_str().unwrap().to_string()
}

async fn enqueue(app: &Router, n: usize) -> Value {
    let insts: Vec<Value> = (0..n).map(|i| serde_json::to_value(instance(i)).unwrap()).collect();
    let (s, v) = json_call(app, "POST", "/api/candidates", Some(ADMIN), Some(json!({ "instances": insts }))).await;
    assert_eq!(s, StatusCode::OK);
    v
}

async fn screen(app: &Router, token: &str) {
    for p in probes(2) {
        let (_, v) = json_call(app, "GET", "/api/tasks/next", Some(token), None).await;
        assert_eq!(v["task"]["phase"], "screening");
        let (s, _) = json_call(
            app,
            "POST",
            "/api/judgments",
            Some(token),
            Some(json!({ "candidate_id": p.id, "label": p.auto_label })),
        )
        .await;
        assert_eq!(s, StatusCode::CREATED);
    }
}

#[tokio::test]
async fn auth_errors() {
    let app = app();
    let (s, v) = json_call(&app, "POST", "/api/workers", None, Some(json!({ "role": "verification" }))).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    assert_error(&v, "unauthorized");
    let token = new_worker(&app, "verification").await;
    let (s, v) = json_call(&app, "POST", "/api/workers", Some(&token), Some(json!({ "role": "baseline" }))).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    assert_error(&v, "forbidden");
    let (s, v) = json_call(&app, "GET", "/api/tasks/next", Some("garbage"), None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    assert_error(&v, "unauthorized");
    let (s, v) = json_call(&app, "GET", "/api/export", Some(&token), None).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    assert_error(&v, "forbidden");
}

#[tokio::test]
async fn malformed_requests() {
    let app = app();
    let (s, v) = json_call(&app, "POST", "/api/workers", Some(ADMIN), Some(json!({ "role": "boss" }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_error(&v, "invalid_request");
    let token = new_worker(&app, "verification").await;
    let (s, v) = json_call(&app, "POST", "/api/judgments", Some(&token), Some(json!({ "label": 1 }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_error(&v, "invalid_request");
    let (s, v) = json_call(&app, "GET", "/api/nothing", Some(ADMIN), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_error(&v, "invalid_request");

    let (_, v) = json_call(
        &app,
        "POST",
        "/api/candidates",
        Some(ADMIN),
        Some(json!({ "instances": [serde_json::to_value(instance(0)).unwrap(), { "id": "broken", "mode": "dsd" }] })),
    )
    .await;
    assert_eq!(v["accepted"].as_array().unwrap().len(), 3);
    assert_eq!(v["rejected"][0]["id"], "broken");
    assert_eq!(v["rejected"][0]["index"], 1);
}

#[tokio::test]
async fn judging_flow_over_http() {
    let app = app();
    enqueue(&app, 2).await;
    let again = enqueue(&app, 2).await;
    assert_eq!(again["duplicates"].as_array().unwrap().len(), 6);

    let tokens: Vec<String> = verification_workers(&app, 4).await;
    let (s, v) = json_call(&app, "GET", "/api/tasks/next", Some(&tokens[0]), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["task"]["phase"], "screening");
    assert!(!v.to_string().contains("auto_label"));

    let (s, v) = json_call(
        &app,
        "POST",
        "/api/judgments",
        Some(&tokens[0]),
        Some(json!({ "candidate_id": "inst000@1", "label": 0 })),
    )
    .await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    assert_error(&v, "forbidden");

    for t in &tokens {
        screen(&app, t).await;
    }
    let body = json!({ "candidate_id": "inst000@2", "label": 1, "idempotency_key": "u-1" });
    let (s, v) = json_call(&app, "POST", "/api/judgments", Some(&tokens[0]), Some(body.clone())).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["status"], "accepted");
    let (s, v) = json_call(&app, "POST", "/api/judgments", Some(&tokens[0]), Some(body)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "duplicate");
    let (s, v) = json_call(
        &app,
        "POST",
        "/api/judgments",
        Some(&tokens[0]),
        Some(json!({ "candidate_id": "inst000@2", "label": 1 })),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_error(&v, "duplicate_judgment");
    let (s, v) = json_call(
        &app,
        "POST",
        "/api/judgments",
        Some(&tokens[0]),
        Some(json!({ "candidate_id": "zzz@1", "label": 1 })),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_error(&v, "unknown_candidate");

    let (s, v) = json_call(&app, "POST", "/api/filter", Some(ADMIN), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_error(&v, "incomplete_judgments");
    assert!(v["deficient"].as_array().unwrap().len() >= 5);
    let (s, v) = json_call(&app, "GET", "/api/export", Some(ADMIN), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_error(&v, "not_ready");

    // everyone labels every remaining candidate correctly
    let auto: std::collections::HashMap<String, u8> = (0..2)
        .flat_map(|i| incoforge_annotation::candidates_for(&instance(i), Default::default()).unwrap())
        .map(|c| (c.id, c.auto_label))
        .collect();
    for t in &tokens {
        loop {
            let (_, v) = json_call(&app, "GET", "/api/tasks/next", Some(t), None).await;
            if v["task"].is_null() {
                assert_eq!(v["progress"]["remaining"], 0);
                break;
            }
            let id = v["task"]["candidate_id"].as_str().unwrap().to_string();
            let (s, _) = json_call(
                &app,
                "POST",
                "/api/judgments",
                Some(t),
                Some(json!({ "candidate_id": id, "label": auto[&id] })),
            )
            .await;
            assert_eq!(s, StatusCode::CREATED);
        }
    }
    let (_, p) = json_call(&app, "GET", "/api/progress", Some(ADMIN), None).await;
    assert_eq!(p["verification_complete"], 6);
    assert_eq!(p["state_digest"].as_str().unwrap().len(), 64);
    let (_, wp) = json_call(&app, "GET", "/api/progress", Some(&tokens[1]), None).await;
    assert_eq!(wp["judged"], 6);

    let (s, v) = json_call(&app, "POST", "/api/filter", Some(ADMIN), Some(json!({}))).await;
    assert_eq!(s, StatusCode::OK);
    // worker 0 labeled inst000@2 as 1; its automatic label is 1 as well
    assert_eq!(v["kept"], 6);
    assert_eq!(v["retention"], 1.0);

    let (s, v) = json_call(
        &app,
        "POST",
        "/api/judgments",
        Some(&tokens[1]),
        Some(json!({ "candidate_id": "inst001@1", "label": 0 })),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(v["error"] == "duplicate_judgment" || v["error"] == "closed");
    let late = new_worker(&app, "verification").await;
    screen(&app, &late).await;
    let (s, v) = json_call(
        &app,
        "POST",
        "/api/judgments",
        Some(&late),
        Some(json!({ "candidate_id": "inst001@1", "label": 0 })),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_error(&v, "closed");

    let (s, text) = call(&app, "GET", "/api/export", Some(ADMIN), None).await;
    assert_eq!(s, StatusCode::OK);
    let rows: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[1]["candidate"], "inst000@2");
    assert_eq!(rows[1]["tally"], json!({ "agree": 4, "total": 4 }));
    let inst: incoforge_core::forge::Instance = serde_json::from_value(rows[1].clone()).unwrap();
    assert_eq!(inst, instance(0));

    let (s, v) = json_call(&app, "GET", "/api/baseline", Some(ADMIN), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_error(&v, "incomplete_judgments");
}

async fn verification_workers(app: &Router, n: usize) -> Vec<String> {
    let mut out = Vec::new();
    for _ in 0..n {
        out.push(new_worker(app, "verification").await);
    }
    out
}

#[tokio::test]
async fn health_and_static() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<p>hi</p>").unwrap();
    let app = router(Arc::new(AnnotationService::in_memory(config()).unwrap()), Some(dir.path().to_path_buf()));
    let (s, v) = json_call(&app, "GET", "/api/health", None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    let (s, text) = call(&app, "GET", "/index.html", None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(text, "<p>hi</p>");
}
