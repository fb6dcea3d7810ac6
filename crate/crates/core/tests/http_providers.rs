use std::sync::Arc;
use std::sync::atomic::{AtomicUsize, Ordering};

use axum::Router;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode, header};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use serde_json::{Value, json};
use storyforge_core::forge::GenerationPrompt;
use storyforge_core::ingest::KeywordKind;
use storyforge_core::providers::http::{
    HttpEndpoint, HttpLanguageModel, HttpMeshGenerator, HttpSimilarityScorer,
    HttpSpeechSynthesizer,
};
use storyforge_core::providers::mock::silent_wav;
use storyforge_core::providers::{
    ArtifactUrl, JobId, JobStatus, LanguageModel, LmRequest, MeshGenerator, ProviderError,
    SimilarityScorer, SpeechSynthesizer,
};

#[derive(Default)]
struct Fake {
    polls: AtomicUsize,
}

async fn complete(headers: HeaderMap, axum::Json(req): axum::Json<Value>) -> impl IntoResponse {
    let auth = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_owned();
    if req["step"] == 9 {
        return (StatusCode::SERVICE_UNAVAILABLE, "busy").into_response();
    }
    axum::Json(json!({ "text": format!("step {} {}", req["step"], auth) })).into_response()
}

async fn submit(axum::Json(req): axum::Json<Value>) -> impl IntoResponse {
    if req["keyword"] == "forbidden" {
        return (StatusCode::BAD_REQUEST, "policy").into_response();
    }
    axum::Json(json!({ "job_id": "j1" })).into_response()
}

async fn poll(State(fake): State<Arc<Fake>>, Path(id): Path<String>) -> impl IntoResponse {
    assert_eq!(id, "j1");
    if fake.polls.fetch_add(1, Ordering::SeqCst) == 0 {
        return axum::Json(json!({ "status": "running" }));
    }
    axum::Json(json!({
        "status": "succeeded",
        "artifacts": { "mesh": "files/m.glb", "frontal_view": null }
    }))
}

async fn score(axum::Json(req): axum::Json<Value>) -> impl IntoResponse {
    assert!(req["image_base64"].as_str().is_some());
    let raw = if req["text"] == "bad" { 3.0 } else { 0.4 };
    axum::Json(json!({ "score": raw }))
}

async fn synthesize(axum::Json(req): axum::Json<Value>) -> impl IntoResponse {
    if req["language"] == "xx" {
        return ([(header::CONTENT_TYPE, "audio/mpeg")], vec![0u8; 4]).into_response();
    }
    ([(header::CONTENT_TYPE, "audio/wav")], silent_wav(1.5, 8000)).into_response()
}

fn serve() -> String {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(1)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let app = Router::new()
                .route("/complete", post(complete))
                .route("/jobs", post(submit))
                .route("/jobs/{id}", get(poll))
                .route("/files/m.glb", get(|| async { b"glTF-bytes".to_vec() }))
                .route("/score", post(score))
                .route("/synthesize", post(synthesize))
                .with_state(Arc::new(Fake::default()));
            let listener = tokio::net::TcpListener::from_std(listener).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{addr}")
}

fn prompt(keyword: &str) -> GenerationPrompt {
    GenerationPrompt {
        keyword: keyword.into(),
        kind: KeywordKind::Object,
        prompt_text: "a jade bowl".into(),
        source_parts: Vec::new(),
    }
}

#[test]
fn adapters_speak_the_wire_contract() {
    let base = serve();
    // SAFETY: no other thread in this test binary reads the environment.
    unsafe { std::env::set_var("SF_TEST_TOKEN", "sekret") };
    let endpoint = HttpEndpoint {
        token_env: Some("SF_TEST_TOKEN".into()),
        ..HttpEndpoint::new(&base)
    };

    let lm = HttpLanguageModel::new(&endpoint).unwrap();
    let request = |step| LmRequest {
        step,
        instruction: "i".into(),
        story: "s".into(),
        context: json!({}),
    };
    assert_eq!(lm.complete(&request(1)).unwrap(), "step 1 Bearer sekret");
    assert!(matches!(lm.complete(&request(9)), Err(ProviderError::Unavailable(_))));

    let mesh = HttpMeshGenerator::new(&endpoint).unwrap();
    let job = mesh.submit(&prompt("bowl")).unwrap();
    assert_eq!(job, JobId("j1".into()));
    assert!(matches!(mesh.submit(&prompt("forbidden")), Err(ProviderError::Rejected(_))));
    assert_eq!(mesh.poll(&job).unwrap(), JobStatus::Running);
    let JobStatus::Succeeded { artifacts } = mesh.poll(&job).unwrap() else {
        panic!("job did not succeed");
    };
    assert_eq!(artifacts.mesh, ArtifactUrl("files/m.glb".into()));
    assert_eq!(mesh.fetch(&artifacts.mesh).unwrap(), b"glTF-bytes");

    let raw = HttpSimilarityScorer::new(&endpoint, true).unwrap();
    assert!((raw.score(b"png", "bowl").unwrap() - 0.7).abs() < 1e-12);
    assert!(matches!(raw.score(b"png", "bad"), Err(ProviderError::InvalidResponse(_))));
    let plain = HttpSimilarityScorer::new(&endpoint, false).unwrap();
    assert_eq!(plain.score(b"png", "bowl").unwrap(), 0.4);

    let tts = HttpSpeechSynthesizer::new(&endpoint).unwrap();
    let clip = tts.synthesize("hello", "en").unwrap();
    assert_eq!(clip.extension, "wav");
    assert_eq!(clip.bytes, silent_wav(1.5, 8000));
    assert!(matches!(tts.synthesize("hello", "xx"), Err(ProviderError::InvalidResponse(_))));
}

#[test]
fn unreachable_service_is_unavailable() {
    let endpoint = HttpEndpoint {
        timeout_secs: 2,
        ..HttpEndpoint::new("http://127.0.0.1:9")
    };
    let lm = HttpLanguageModel::new(&endpoint).unwrap();
    let req = LmRequest {
        step: 1,
        instruction: String::new(),
        story: String::new(),
        context: json!({}),
    };
    assert!(matches!(lm.complete(&req), Err(ProviderError::Unavailable(_))));
}
