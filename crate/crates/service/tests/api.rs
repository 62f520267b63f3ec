mod common;

use common::*;
use serde_json::{json, Value};
use vplab_service::MaskPayload;

/// create → upload → reference → validate → match → refine → finetune → re-match → export.
#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn full_loop_completes() {
    let dir = tempfile::tempdir().unwrap();
    let s = spawn(dir.path(), true).await;
    let c = reqwest::Client::new();
    let id = create_project(&c, &s).await;

    let data = examples("blobs", 3, 7);
    let files = data.iter().enumerate().map(|(i, e)| (format!("b{i}.png"), png(e))).collect();
    let res = upload(&c, &s, &id, files).await;
    assert_eq!(res.status(), 201);
    let ids: Vec<String> = serde_json::from_value(res.json::<Value>().await.unwrap()["image_ids"].clone()).unwrap();
    assert_eq!(ids.len(), 3);

    let (x, y) = inside_point(&data[0].gt_mask);
    let res = c
        .put(s.url(&format!("/projects/{id}/reference")))
        .json(&json!({ "image_id": ids[0], "points": [{ "x": x, "y": y, "polarity": "positive" }] }))
        .send()
        .await
        .unwrap();
    assert_eq!(res.status(), 200);
    let proposed: Value = res.json().await.unwrap();
    assert_eq!(proposed["validated"], false);
    assert!(proposed["mask"]["png"].is_string());

    // The annotator corrects the proposal to the true mask.
    let edits = MaskPayload::from_mask(&data[0].gt_mask);
    let res = c.post(s.url(&format!("/projects/{id}/reference/validate"))).json(&json!({ "mask_edits": edits })).send().await.unwrap();
    assert_eq!(res.status(), 200);

    let res = c.post(s.url(&format!("/projects/{id}/match"))).send().await.unwrap();
    assert_eq!(res.status(), 202);
    let job = res.json::<Value>().await.unwrap()["job_id"].as_str().unwrap().to_string();
    let j = wait_job(&c, &s, &job).await;
    assert_eq!(j["state"], "done", "{j}");
    assert_eq!(j["result"]["pseudolabels"], 2);

    let before: Value = c.get(s.url(&format!("/projects/{id}/labels/{}", ids[2]))).send().await.unwrap().json().await.unwrap();
    assert_eq!(before["status"], "predicted");

    let res = c
        .put(s.url(&format!("/projects/{id}/labels/{}", ids[1])))
        .json(&json!({ "mask": MaskPayload::from_mask(&data[1].gt_mask), "status": "refined",
                        "strokes": [{ "x": 3.0, "y": 4.0, "radius": 2.0, "value": true }] }))
        .send()
        .await
        .unwrap();
    assert_eq!(res.status(), 200);
    let got: Value = c.get(s.url(&format!("/projects/{id}/labels/{}", ids[1]))).send().await.unwrap().json().await.unwrap();
    let payload: MaskPayload = serde_json::from_value(got["mask"].clone()).unwrap();
    assert_eq!(payload.decode(64, 64).unwrap(), data[1].gt_mask, "stored mask is bit-identical");
    assert_eq!(got["history"].as_array().unwrap().len(), 2, "match then edit");

    let res = c
        .post(s.url(&format!("/projects/{id}/finetune")))
        .json(&json!({ "train_config": { "epochs": 4, "lr": 0.005 } }))
        .send()
        .await
        .unwrap();
    assert_eq!(res.status(), 202);
    let job = res.json::<Value>().await.unwrap()["job_id"].as_str().unwrap().to_string();
    let j = wait_job(&c, &s, &job).await;
    assert_eq!(j["state"], "done", "{j}");
    assert_eq!(j["result"]["examples"], 2, "reference plus one refinement");

    let res = c.post(s.url(&format!("/projects/{id}/match"))).send().await.unwrap();
    let job = res.json::<Value>().await.unwrap()["job_id"].as_str().unwrap().to_string();
    let j = wait_job(&c, &s, &job).await;
    assert_eq!(j["state"], "done", "{j}");
    assert_eq!(j["result"]["pseudolabels"], 1, "refined label is not overwritten");
    assert_eq!(j["result"]["checkpoint_id"], "ckpt0001");

    // The new deltas change the pseudolabel.
    let after: Value = c.get(s.url(&format!("/projects/{id}/labels/{}", ids[2]))).send().await.unwrap().json().await.unwrap();
    assert!(after["confidence"] != before["confidence"] || after["mask"] != before["mask"]);
    let refined: Value = c.get(s.url(&format!("/projects/{id}/labels/{}", ids[1]))).send().await.unwrap().json().await.unwrap();
    assert_eq!(refined["status"], "refined");

    let metrics: Value = c.get(s.url(&format!("/projects/{id}/metrics"))).send().await.unwrap().json().await.unwrap();
    let rounds = metrics["rounds"].as_array().unwrap();
    assert_eq!(rounds.iter().map(|r| r["round"].as_u64().unwrap()).collect::<Vec<_>>(), vec![0, 1]);
    assert!(metrics["miou"].as_f64().is_some());

    let res = c.get(s.url(&format!("/projects/{id}/export"))).send().await.unwrap();
    assert_eq!(res.status(), 200);
    let bytes = res.bytes().await.unwrap();
    assert_eq!(&bytes[..5], vplab_core::peft::EPEF_MAGIC);
    vplab_core::peft::load_delta(&bytes, &vplab_core::segcore::DecoderConfig::tiny()).unwrap();

    let jobs: Value = c.get(s.url(&format!("/projects/{id}/jobs"))).send().await.unwrap().json().await.unwrap();
    let jobs = jobs["jobs"].as_array().unwrap();
    assert_eq!(jobs.len(), 3);
    assert!(jobs.iter().all(|j| j["state"] == "done"));
    s.shutdown();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn errors_are_structured() {
    let dir = tempfile::tempdir().unwrap();
    let s = spawn(dir.path(), true).await;
    let c = reqwest::Client::new();

    assert_error(c.get(s.url("/projects/nope")).send().await.unwrap(), 404, "not_found").await;
    assert_error(c.get(s.url("/jobs/nope")).send().await.unwrap(), 404, "not_found").await;
    assert_error(c.get(s.url("/projects/..%2F..")).send().await.unwrap(), 404, "not_found").await;
    assert_error(c.get(s.url("/no/such/route")).send().await.unwrap(), 404, "not_found").await;
    assert_error(c.post(s.url("/projects")).json(&json!({ "nam": "x" })).send().await.unwrap(), 400, "bad_request").await;

    let id = create_project(&c, &s).await;
    assert_error(c.post(s.url(&format!("/projects/{id}/finetune"))).send().await.unwrap(), 409, "conflict").await;
    assert_error(c.get(s.url(&format!("/projects/{id}/export"))).send().await.unwrap(), 409, "conflict").await;
    assert_error(c.post(s.url(&format!("/projects/{id}/match"))).send().await.unwrap(), 409, "conflict").await;
    assert_error(c.post(s.url(&format!("/projects/{id}/reference/validate"))).send().await.unwrap(), 409, "conflict").await;

    let gif = b"GIF89a\x01\x00\x01\x00\x00\x00\x00;".to_vec();
    assert_error(upload(&c, &s, &id, vec![("a.gif".into(), gif)]).await, 415, "unsupported_media_type").await;

    let data = examples("patches", 1, 3);
    let res = upload(&c, &s, &id, vec![("p.png".into(), png(&data[0]))]).await;
    let image = res.json::<Value>().await.unwrap()["image_ids"][0].as_str().unwrap().to_string();

    let res = c
        .put(s.url(&format!("/projects/{id}/reference")))
        .json(&json!({ "image_id": "img9999", "points": [{ "x": 1.0, "y": 1.0, "polarity": "positive" }] }))
        .send()
        .await
        .unwrap();
    assert_error(res, 404, "not_found").await;

    let label = |status: &str| json!({ "mask": MaskPayload::from_mask(&data[0].gt_mask), "status": status });
    let url = s.url(&format!("/projects/{id}/labels/{image}"));
    assert_eq!(c.put(&url).json(&label("validated")).send().await.unwrap().status(), 200);
    assert_error(c.put(&url).json(&label("refined")).send().await.unwrap(), 409, "conflict").await;

    let wrong_size = json!({ "mask": MaskPayload::from_mask(&vplab_core::image::BinaryMask::full(8, 8)), "status": "validated" });
    assert_error(c.put(&url).json(&wrong_size).send().await.unwrap(), 400, "bad_request").await;
    let mut disagree = MaskPayload::from_mask(&data[0].gt_mask);
    disagree.rle = Some("4096".into());
    let res = c.put(&url).json(&json!({ "mask": disagree, "status": "validated" })).send().await.unwrap();
    assert_error(res, 400, "bad_request").await;

    let res = c.post(s.url(&format!("/projects/{id}/finetune"))).json(&json!({ "k": 0 })).send().await.unwrap();
    assert_error(res, 400, "bad_request").await;
    s.shutdown();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn gets_and_repeat_validation_do_not_mutate() {
    let dir = tempfile::tempdir().unwrap();
    let s = spawn(dir.path(), true).await;
    let c = reqwest::Client::new();
    let id = create_project(&c, &s).await;
    let data = examples("blobs", 1, 11);
    let res = upload(&c, &s, &id, vec![("b.png".into(), png(&data[0]))]).await;
    let image = res.json::<Value>().await.unwrap()["image_ids"][0].as_str().unwrap().to_string();
    let (x, y) = inside_point(&data[0].gt_mask);
    c.put(s.url(&format!("/projects/{id}/reference")))
        .json(&json!({ "image_id": image, "points": [{ "x": x, "y": y, "polarity": "positive" }] }))
        .send()
        .await
        .unwrap();
    let validate = json!({ "mask_edits": MaskPayload::from_mask(&data[0].gt_mask) });
    let url = s.url(&format!("/projects/{id}/reference/validate"));
    assert_eq!(c.post(&url).json(&validate).send().await.unwrap().status(), 200);

    let manifest = dir.path().join("projects").join(&id).join("project.json");
    let snapshot = std::fs::read(&manifest).unwrap();
    for _ in 0..2 {
        assert_eq!(c.post(&url).json(&validate).send().await.unwrap().status(), 200);
        assert_eq!(c.post(&url).send().await.unwrap().status(), 200);
        for path in ["", "/reference", "/labels", "/metrics", "/jobs", "/images/img0001"] {
            let res = c.get(s.url(&format!("/projects/{id}{path}"))).send().await.unwrap();
            assert_eq!(res.status(), 200, "{path}");
        }
        assert_eq!(c.get(s.url("/projects")).send().await.unwrap().status(), 200);
    }
    assert_eq!(std::fs::read(&manifest).unwrap(), snapshot);
    s.shutdown();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn finetune_on_k_most_recent() {
    let dir = tempfile::tempdir().unwrap();
    let s = spawn(dir.path(), true).await;
    let c = reqwest::Client::new();
    let id = create_project(&c, &s).await;
    let data = examples("ribs", 3, 5);
    let files = data.iter().enumerate().map(|(i, e)| (format!("r{i}.png"), png(e))).collect();
    let ids: Vec<String> =
        serde_json::from_value(upload(&c, &s, &id, files).await.json::<Value>().await.unwrap()["image_ids"].clone()).unwrap();
    for (img, ex) in ids.iter().zip(&data) {
        let body = json!({ "mask": MaskPayload::from_mask(&ex.gt_mask), "status": "validated" });
        c.put(s.url(&format!("/projects/{id}/labels/{img}"))).json(&body).send().await.unwrap();
    }
    let res = c
        .post(s.url(&format!("/projects/{id}/finetune")))
        .json(&json!({ "k": 2, "train_config": { "epochs": 1 } }))
        .send()
        .await
        .unwrap();
    let job = res.json::<Value>().await.unwrap()["job_id"].as_str().unwrap().to_string();
    let j = wait_job(&c, &s, &job).await;
    assert_eq!(j["state"], "done", "{j}");
    assert_eq!(j["result"]["examples"], 2);
    // No validated reference: metrics are recorded without a score.
    assert!(j["result"]["miou"].is_null());
    s.shutdown();
}
