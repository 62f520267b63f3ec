#![allow(dead_code)]

use std::path::Path;
use std::time::{Duration, Instant};

use serde_json::Value;
use vplab_core::image::BinaryMask;
use vplab_core::segcore::SegModel;
use vplab_core::trainer::{make_synthetic_dataset, DatasetSpec, LabeledExample};
use vplab_service::{router, worker_loop, AppState};

pub struct Server {
    pub base: String,
    pub state: AppState,
    tasks: Vec<tokio::task::JoinHandle<()>>,
}

impl Server {
    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub fn shutdown(self) {
        for t in self.tasks {
            t.abort();
        }
    }
}

/// Serves `dir` on an ephemeral port, optionally without the job worker.
pub async fn spawn(dir: &Path, with_worker: bool) -> Server {
    let state = AppState::open(dir, SegModel::tiny_fixture().unwrap()).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let app = router(state.clone());
    let mut tasks = vec![tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    })];
    if with_worker {
        tasks.push(tokio::spawn(worker_loop(state.clone())));
    }
    Server { base, state, tasks }
}

pub fn examples(family: &str, n: usize, seed: u64) -> Vec<LabeledExample> {
    make_synthetic_dataset(&DatasetSpec::new(family, n).with_size(64), seed).unwrap()
}

pub fn png(ex: &LabeledExample) -> Vec<u8> {
    vplab_service::codec::image_to_png(&ex.image)
}

/// Centre of the best-covered 8×8 cell of `mask`, as a prompt point.
pub fn inside_point(mask: &BinaryMask) -> (f32, f32) {
    let mut best = (0.0, 0, 0);
    for r in 0..mask.height() / 8 {
        for c in 0..mask.width() / 8 {
            let cov = mask.cell_coverage(r, c, 8);
            if cov > best.0 {
                best = (cov, r, c);
            }
        }
    }
    (best.2 as f32 * 8.0 + 4.0, best.1 as f32 * 8.0 + 4.0)
}

pub async fn create_project(client: &reqwest::Client, s: &Server) -> String {
    let res = client.post(s.url("/projects")).json(&serde_json::json!({ "name": "p", "class_label": "blob" })).send().await.unwrap();
    assert_eq!(res.status(), 201);
    res.json::<Value>().await.unwrap()["id"].as_str().unwrap().to_string()
}

pub async fn upload(client: &reqwest::Client, s: &Server, project: &str, files: Vec<(String, Vec<u8>)>) -> reqwest::Response {
    let mut form = reqwest::multipart::Form::new();
    for (name, bytes) in files {
        form = form.part("file", reqwest::multipart::Part::bytes(bytes).file_name(name));
    }
    client.post(s.url(&format!("/projects/{project}/images"))).multipart(form).send().await.unwrap()
}

pub async fn wait_job(client: &reqwest::Client, s: &Server, job: &str) -> Value {
    let start = Instant::now();
    let mut last_progress = 0.0;
    loop {
        let j: Value = client.get(s.url(&format!("/jobs/{job}"))).send().await.unwrap().json().await.unwrap();
        let p = j["progress"].as_f64().unwrap();
        assert!(p >= last_progress, "progress went backwards: {last_progress} -> {p}");
        last_progress = p;
        match j["state"].as_str().unwrap() {
            "done" | "failed" => return j,
            _ if start.elapsed() > Duration::from_secs(120) => panic!("job {job} did not finish: {j}"),
            _ => tokio::time::sleep(Duration::from_millis(50)).await,
        }
    }
}

pub async fn assert_error(res: reqwest::Response, status: u16, code: &str) {
    assert_eq!(res.status().as_u16(), status);
    let body: Value = res.json().await.unwrap();
    assert_eq!(body["code"], code, "{body}");
    assert!(body["message"].as_str().is_some_and(|m| !m.is_empty()));
}
