mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use latent_steer::attribute::{load_bow, AttributeTarget, LinearDiscriminator, ObjectiveSign};
use latent_steer::eval::{generate_weighted, WdOptions};
use latent_steer::steer::{generate, generate_ranked, SampleRecord, SteeringConfig, Variant};
use latent_steer_cli::models::ModelStore;
use latent_steer_cli::server::{router, StreamEvent, NDJSON};

use common::{load_lm, model_root};

fn app() -> Router {
    router(Arc::new(ModelStore::new(model_root())))
}

async fn call(app: &Router, method: Method, uri: &str, body: Value) -> (StatusCode, axum::body::Bytes) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes())
}

async fn call_json(app: &Router, method: Method, uri: &str, body: Value) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn create(app: &Router, body: Value) -> String {
    let (status, v) = call_json(app, Method::POST, "/v1/sessions", body).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

/// Token events and the final record of one generation.
async fn generate_events(app: &Router, id: &str, body: Value) -> (Vec<StreamEvent>, SampleRecord) {
    let req = Request::builder()
        .method(Method::POST)
        .uri(format!("/v1/sessions/{id}/generate"))
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], NDJSON);
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let mut events: Vec<StreamEvent> =
        std::str::from_utf8(&bytes).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    match events.pop() {
        Some(StreamEvent::Done { sample_record }) => (events, sample_record),
        other => panic!("stream did not end with done: {other:?}"),
    }
}

fn token_ids(events: &[StreamEvent]) -> Vec<usize> {
    events
        .iter()
        .enumerate()
        .map(|(i, e)| match e {
            StreamEvent::Token(t) => {
                assert_eq!(t.index, i, "events out of order");
                t.token_id
            }
            other => panic!("unexpected event {other:?}"),
        })
        .collect()
}

fn bow_target(name: &str) -> AttributeTarget<f32> {
    let lm = load_lm();
    AttributeTarget::bow(
        load_bow(&model_root().join(format!("bow/{name}.txt")), lm.tokenizer()).unwrap(),
        ObjectiveSign::Plus,
    )
}

#[tokio::test]
async fn zero_stepsize_stream_equals_an_unsteered_library_run() {
    let app = app();
    let id = create(&app, json!({ "attribute": "science", "config": { "stepsize": 0.0, "seed": 21 } })).await;
    let (events, record) =
        generate_events(&app, &id, json!({ "prefix": "The lake", "length": 10, "variant": "BC" })).await;

    let lm = load_lm();
    let cfg = SteeringConfig { seed: 21, ..SteeringConfig::bow_defaults() };
    let b = generate(&lm, "The lake", 10, Some(&bow_target("science")), &cfg, Variant::B).unwrap();
    assert_eq!(token_ids(&events), b.generated());
    assert_eq!(record.tokens, b.tokens);
    // per-token text concatenates to the passage continuation
    let streamed: String =
        events.iter().map(|e| if let StreamEvent::Token(t) = e { t.text.clone() } else { String::new() }).collect();
    assert!(record.text.ends_with(streamed.trim_start()), "{streamed:?} vs {:?}", record.text);
}

#[tokio::test]
async fn every_variant_streams_the_library_passage() {
    let app = app();
    let id = create(&app, json!({ "attribute": "legal", "config": { "seed": 5, "num_samples": 3 } })).await;
    let lm = load_lm();
    let target = bow_target("legal");
    let cfg = SteeringConfig { seed: 5, num_samples: 3, ..SteeringConfig::bow_defaults() };
    for variant in Variant::ALL {
        let expected = match variant {
            Variant::B | Variant::BC => generate(&lm, "The court", 8, Some(&target), &cfg, variant).unwrap(),
            Variant::BR | Variant::BCR => generate_ranked(&lm, "The court", 8, &target, &cfg, variant).unwrap().best,
            Variant::WD => generate_weighted(&lm, "The court", 8, &target, &WdOptions::default(), 5).unwrap(),
        };
        let (events, record) =
            generate_events(&app, &id, json!({ "prefix": "The court", "length": 8, "variant": variant })).await;
        assert_eq!(token_ids(&events), expected.generated(), "{variant}");
        assert_eq!(record, expected, "{variant}");
    }
    let (_, v) = call_json(&app, Method::GET, &format!("/v1/sessions/{id}"), Value::Null).await;
    assert_eq!(v["generations"], 5);
    assert_eq!(v["generating"], false);
}

#[tokio::test]
async fn discriminator_sessions_use_discriminator_defaults() {
    let app = app();
    let id = create(
        &app,
        json!({ "attribute": "sentiment", "class": "positive", "config": { "num_iterations": 2, "seed": 9 } }),
    )
    .await;
    let (st, v) = call_json(&app, Method::GET, &format!("/v1/sessions/{id}"), Value::Null).await;
    assert_eq!(st, StatusCode::OK);
    let expected_cfg = SteeringConfig { num_iterations: 2, seed: 9, ..SteeringConfig::discrim_defaults() };
    assert_eq!(serde_json::from_value::<SteeringConfig>(v["effective_config"].clone()).unwrap(), expected_cfg);
    assert_eq!(v["attribute"], json!({ "kind": "discriminator", "name": "sentiment", "class": "positive" }));

    let (events, record) = generate_events(&app, &id, json!({ "prefix": "The book", "length": 6 })).await;
    let lm = load_lm();
    let d = LinearDiscriminator::<f32>::load(&model_root().join("discrim/sentiment")).unwrap();
    let idx = d.class_index("positive").unwrap();
    let target = AttributeTarget::discriminator(d, idx, ObjectiveSign::Plus).unwrap();
    let expected = generate(&lm, "The book", 6, Some(&target), &expected_cfg, Variant::BC).unwrap();
    assert_eq!(token_ids(&events), expected.generated());
    assert_eq!(record, expected);
}

#[tokio::test]
async fn invalid_config_is_rejected_with_the_field_name() {
    let app = app();
    let id = create(&app, json!({ "attribute": "science" })).await;
    let (st, v) =
        call_json(&app, Method::PATCH, &format!("/v1/sessions/{id}/config"), json!({ "gm_scale": 1.5 })).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "gm_scale");
    let (st, v) = call_json(&app, Method::PATCH, &format!("/v1/sessions/{id}/config"), json!({ "top_kk": 3 })).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "top_kk");
    let (st, v) = call_json(
        &app,
        Method::POST,
        "/v1/sessions",
        json!({ "attribute": "science", "config": { "stepsize": -1.0 } }),
    )
    .await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "stepsize");

    // a rejected patch leaves the config untouched; a valid one applies
    let (_, before) = call_json(&app, Method::GET, &format!("/v1/sessions/{id}"), Value::Null).await;
    assert_eq!(before["effective_config"]["gm_scale"], 0.9);
    for gm in [0.0, 1.0] {
        let (st, v) = call_json(
            &app,
            Method::PATCH,
            &format!("/v1/sessions/{id}/config"),
            json!({ "gm_scale": gm, "num_iterations": 0 }),
        )
        .await;
        assert_eq!(st, StatusCode::OK);
        assert_eq!(v["effective_config"]["gm_scale"], gm);
        assert_eq!(v["effective_config"]["num_iterations"], 0);
    }
}

#[tokio::test]
async fn bad_requests_are_422_before_any_compute() {
    let app = app();
    let plain = create(&app, json!({})).await;
    let uri = format!("/v1/sessions/{plain}/generate");
    let (st, v) =
        call_json(&app, Method::POST, &uri, json!({ "prefix": "The lake", "length": 4, "variant": "BC" })).await;
    assert_eq!((st, v["field"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("variant")));
    let (st, v) = call_json(&app, Method::POST, &uri, json!({ "prefix": "The lake", "length": 400 })).await;
    assert_eq!((st, v["field"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("length")));
    let (st, v) = call_json(&app, Method::POST, &uri, json!({ "length": 4 })).await;
    assert_eq!((st, v["field"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("prefix")));
    let (st, v) = call_json(&app, Method::POST, &uri, json!({ "continue_from_segment": 0, "length": 4 })).await;
    assert_eq!((st, v["field"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("continue_from_segment")));

    for (body, field) in [
        (json!({ "checkpoint": "nope" }), "checkpoint"),
        (json!({ "attribute": "nope" }), "attribute"),
        (json!({ "attribute": "sentiment", "class": "neutral" }), "class"),
        (json!({ "class": "positive" }), "class"),
    ] {
        let (st, v) = call_json(&app, Method::POST, "/v1/sessions", body.clone()).await;
        assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
        assert_eq!(v["field"], field, "{body}");
    }
}

#[tokio::test]
async fn unknown_sessions_are_404() {
    let app = app();
    for (method, uri, body) in [
        (Method::GET, "/v1/sessions/missing", Value::Null),
        (Method::PATCH, "/v1/sessions/missing/config", json!({ "top_k": 3 })),
        (Method::POST, "/v1/sessions/missing/generate", json!({ "prefix": "x", "length": 2 })),
        (Method::POST, "/v1/sessions/missing/accept", json!({ "text": "x" })),
    ] {
        let (st, _) = call(&app, method, uri, body).await;
        assert_eq!(st, StatusCode::NOT_FOUND, "{uri}");
    }
}

#[tokio::test]
async fn overlapping_calls_on_one_session_are_409() {
    let app = app();
    let id = create(&app, json!({ "attribute": "science", "config": { "num_samples": 6, "num_iterations": 3 } })).await;
    let req = Request::builder()
        .method(Method::POST)
        .uri(format!("/v1/sessions/{id}/generate"))
        .body(Body::from(json!({ "prefix": "The lake", "length": 30, "variant": "BCR" }).to_string()))
        .unwrap();
    // The response arrives as soon as the stream opens; the session stays
    // busy until the passage is finished.
    let running = app.clone().oneshot(req).await.unwrap();
    assert_eq!(running.status(), StatusCode::OK);
    let (st, _) =
        call(&app, Method::POST, &format!("/v1/sessions/{id}/generate"), json!({ "prefix": "x", "length": 2 })).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let (st, _) = call(&app, Method::PATCH, &format!("/v1/sessions/{id}/config"), json!({ "stepsize": 0.0 })).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let (_, v) = call_json(&app, Method::GET, &format!("/v1/sessions/{id}"), Value::Null).await;
    assert_eq!(v["generating"], true);

    let body = running.into_body().collect().await.unwrap().to_bytes();
    let last: StreamEvent = serde_json::from_str(std::str::from_utf8(&body).unwrap().lines().last().unwrap()).unwrap();
    assert!(matches!(last, StreamEvent::Done { .. }));
    let (st, _) = call(&app, Method::PATCH, &format!("/v1/sessions/{id}/config"), json!({ "stepsize": 0.0 })).await;
    assert_eq!(st, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_sessions_stream_independently() {
    let app = app();
    let a = create(&app, json!({ "attribute": "science", "config": { "seed": 1 } })).await;
    let b = create(&app, json!({ "attribute": "legal", "config": { "seed": 2 } })).await;
    let ((ea, ra), (eb, rb)) = tokio::join!(
        generate_events(&app, &a, json!({ "prefix": "The lake", "length": 12 })),
        generate_events(&app, &b, json!({ "prefix": "The court", "length": 12 })),
    );
    let lm = load_lm();
    let cfg = |seed| SteeringConfig { seed, ..SteeringConfig::bow_defaults() };
    let xa = generate(&lm, "The lake", 12, Some(&bow_target("science")), &cfg(1), Variant::BC).unwrap();
    let xb = generate(&lm, "The court", 12, Some(&bow_target("legal")), &cfg(2), Variant::BC).unwrap();
    assert_eq!(token_ids(&ea), xa.generated());
    assert_eq!(token_ids(&eb), xb.generated());
    assert_eq!((ra, rb), (xa, xb));
}

#[tokio::test]
async fn accepted_segments_build_the_story_prompt() {
    let app = app();
    let id = create(&app, json!({ "attribute": "science", "config": { "seed": 4 } })).await;
    let (_, skeleton) = call_json(&app, Method::GET, "/v1/presets/skeleton", Value::Null).await;
    let prefixes: Vec<String> = serde_json::from_value(skeleton["prefixes"].clone()).unwrap();
    assert_eq!(prefixes.len(), 6);

    let (_, first) = generate_events(&app, &id, json!({ "prefix": prefixes[0], "length": 5 })).await;
    let (st, v) =
        call_json(&app, Method::POST, &format!("/v1/sessions/{id}/accept"), json!({ "text": first.text })).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["segments"], json!([first.text]));

    let (_, second) =
        generate_events(&app, &id, json!({ "continue_from_segment": 0, "prefix": prefixes[1], "length": 5 })).await;
    let prompt = format!("{} {}", first.text, prefixes[1]);
    let cfg = SteeringConfig { seed: 4, ..SteeringConfig::bow_defaults() };
    let expected = generate(&load_lm(), &prompt, 5, Some(&bow_target("science")), &cfg, Variant::BC).unwrap();
    assert_eq!(second, expected);

    // sessions do not see each other's segments
    let other = create(&app, json!({})).await;
    let (_, v) = call_json(&app, Method::GET, &format!("/v1/sessions/{other}"), Value::Null).await;
    assert_eq!(v["segments"], json!([]));
}

#[tokio::test]
async fn attributes_lists_the_model_root() {
    let (st, v) = call_json(&app(), Method::GET, "/v1/attributes", Value::Null).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["checkpoints"], json!(["default"]));
    assert_eq!(v["bow"], json!(["legal", "science"]));
    assert_eq!(v["discriminators"], json!([{ "name": "sentiment", "classes": ["negative", "positive"] }]));
}
