mod common;

use std::sync::Arc;

use branchflow::backend::{Backend, Cluster, TaskStatus, REF_TAG};
use branchflow::gateway::{DELIVERY_HEADER, EVENT_HEADER, LIFECYCLE_PATH, MULTIBRANCH_PATH};
use branchflow::portal;
use common::*;
use serde_json::Value;

struct Server {
    base: String,
    rig: SimRig,
    client: reqwest::Client,
}

async fn start() -> Server {
    let rig = SimRig::default_rig();
    let router = Arc::new(rig.gateway()).router().merge(portal::router(rig.engine.clone()));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
    Server { base: format!("http://{addr}"), rig, client: reqwest::Client::new() }
}

impl Server {
    async fn hook(&self, path: &str, token: &str, event: Option<&str>, delivery: Option<&str>, body: &str) -> (u16, Value) {
        let mut req = self
            .client
            .post(format!("{}{path}", self.base))
            .query(&[("token", token)])
            .header("content-type", "application/json")
            .body(body.to_owned());
        if let Some(e) = event {
            req = req.header(EVENT_HEADER, e);
        }
        if let Some(d) = delivery {
            req = req.header(DELIVERY_HEADER, d);
        }
        let resp = req.send().await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    async fn get(&self, path: &str) -> (u16, String) {
        let resp = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        (resp.status().as_u16(), resp.text().await.unwrap())
    }

    async fn get_json(&self, path: &str) -> (u16, Value) {
        let (s, body) = self.get(path).await;
        (s, serde_json::from_str(&body).unwrap_or(Value::Null))
    }
}

const PUSH: &str = r#"{"ref":"refs/heads/feature-x","after":"abc123","head_commit":{"id":"abc123"},"repository":{"full_name":"acme/poc-app"}}"#;

#[tokio::test(flavor = "multi_thread")]
async fn push_hook_accepts_and_returns_delivery_id() {
    let s = start().await;
    let (status, body) = s.hook(MULTIBRANCH_PATH, TOKEN, Some("push"), Some("d-1"), PUSH).await;
    assert_eq!(status, 200);
    assert_eq!(body["delivery_id"], "d-1");
    s.rig.idle().await;
    let runs = s.rig.engine.runs();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0].ref_key.name, "feature-x");
    assert_eq!(runs[0].trigger.commit_id.as_deref(), Some("abc123"));
}

#[tokio::test(flavor = "multi_thread")]
async fn wrong_token_is_403_on_both_paths() {
    let s = start().await;
    let (a, _) = s.hook(MULTIBRANCH_PATH, "wrong", Some("push"), None, PUSH).await;
    let (b, _) = s.hook(LIFECYCLE_PATH, "wrong", Some("delete"), None, r#"{"ref":"x","ref_type":"branch"}"#).await;
    assert_eq!((a, b), (403, 403));
    let resp = s.client.post(format!("{}{MULTIBRANCH_PATH}", s.base)).body(PUSH).send().await.unwrap();
    assert_eq!(resp.status().as_u16(), 403, "missing token");
    s.rig.idle().await;
    assert!(s.rig.engine.runs().is_empty());
    assert!(s.rig.engine.cleanups().is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn malformed_and_ignored_requests() {
    let s = start().await;
    assert_eq!(s.hook(MULTIBRANCH_PATH, TOKEN, Some("push"), None, "{not json").await.0, 400);
    assert_eq!(s.hook(LIFECYCLE_PATH, TOKEN, None, None, "{}").await.0, 400, "missing event header");
    assert_eq!(s.hook(LIFECYCLE_PATH, TOKEN, Some("pull_request"), None, r#"{"number":3}"#).await.0, 400);
    assert_eq!(s.hook(LIFECYCLE_PATH, TOKEN, Some("ping"), None, r#"{"zen":"hi"}"#).await.0, 202);
    assert_eq!(s.hook(LIFECYCLE_PATH, TOKEN, Some("delete"), None, r#"{"ref":"v1","ref_type":"tag"}"#).await.0, 202);
    s.rig.idle().await;
    assert!(s.rig.engine.runs().is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn duplicate_delivery_enqueues_once() {
    let s = start().await;
    assert_eq!(s.hook(MULTIBRANCH_PATH, TOKEN, Some("push"), Some("dup"), PUSH).await.0, 200);
    assert_eq!(s.hook(MULTIBRANCH_PATH, TOKEN, Some("push"), Some("dup"), PUSH).await.0, 202);
    s.rig.idle().await;
    assert_eq!(s.rig.engine.runs().len(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_requests_each_enqueue_once() {
    let s = Arc::new(start().await);
    let mut handles = Vec::new();
    for i in 0..16 {
        let s = s.clone();
        handles.push(tokio::spawn(async move {
            let body = PUSH.replace("feature-x", &format!("f{i}"));
            s.hook(MULTIBRANCH_PATH, TOKEN, Some("push"), Some(&format!("c-{i}")), &body).await.0
        }));
    }
    for h in handles {
        assert_eq!(h.await.unwrap(), 200);
    }
    s.rig.idle().await;
    assert_eq!(s.rig.engine.runs().len(), 16);
}

#[tokio::test(flavor = "multi_thread")]
async fn portal_reflects_the_run_store() {
    let s = start().await;
    let (_, body) = s.get_json("/healthz").await;
    assert_eq!(body["status"], "ok");
    assert_eq!(s.get_json("/runs").await.1, Value::Array(vec![]));

    s.hook(MULTIBRANCH_PATH, TOKEN, Some("push"), Some("p-1"), PUSH).await;
    s.rig.idle().await;

    let (status, runs) = s.get_json("/runs").await;
    assert_eq!(status, 200);
    let runs = runs.as_array().unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0]["outcome"], "success");
    assert_eq!(runs[0]["stages"][0], "checkout:success");
    let id = runs[0]["run_id"].as_str().unwrap();

    let (status, run) = s.get_json(&format!("/runs/{id}")).await;
    assert_eq!(status, 200);
    assert_eq!(run["stages"].as_array().unwrap().len(), 8);
    assert_eq!(run["report"]["totals"]["run"], 5);

    let (status, html) = s.get(&format!("/runs/{id}/report.html")).await;
    assert_eq!(status, 200);
    assert_eq!(html.matches("<tr class=\"case\">").count(), 5);

    assert_eq!(s.get("/runs/nope").await.0, 404);
    assert_eq!(s.get("/runs/nope/report.html").await.0, 404);
    assert_eq!(s.get("/cleanups/nope").await.0, 404);
    assert_eq!(s.get_json("/notifications").await.1, Value::Array(vec![]));
}

#[tokio::test(flavor = "multi_thread")]
async fn environments_match_backend_running_deploys() {
    let s = start().await;
    for (i, b) in ["a", "b", "c"].iter().enumerate() {
        let body = PUSH.replace("feature-x", b);
        s.hook(MULTIBRANCH_PATH, TOKEN, Some("push"), Some(&format!("e-{i}")), &body).await;
    }
    s.rig.idle().await;
    s.hook(LIFECYCLE_PATH, TOKEN, Some("delete"), Some("e-del"), r#"{"ref":"b","ref_type":"branch"}"#).await;
    s.rig.idle().await;
    let (_, envs) = s.get_json("/environments").await;
    let mut from_portal: Vec<(String, String)> = envs
        .as_array()
        .unwrap()
        .iter()
        .map(|e| (e["ref"]["safe_id"].as_str().unwrap().to_owned(), e["task_id"].as_str().unwrap().to_owned()))
        .collect();
    from_portal.sort();
    let mut from_backend: Vec<(String, String)> = s
        .rig
        .sim
        .list_tasks(Some(Cluster::Deploy), &Default::default())
        .into_iter()
        .filter(|t| t.status == TaskStatus::Running)
        .map(|t| (t.tags[REF_TAG].clone(), t.task_id))
        .collect();
    from_backend.sort();
    assert_eq!(from_portal, from_backend);
    assert_eq!(from_portal.len(), 2);

    let (status, cleanup) = s.get_json("/cleanups/e-del").await;
    assert_eq!(status, 200);
    assert_eq!(cleanup["stopped_count"], 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn portal_is_read_only() {
    let s = start().await;
    s.hook(MULTIBRANCH_PATH, TOKEN, Some("push"), Some("r-1"), PUSH).await;
    s.rig.idle().await;
    let before = (s.rig.engine.runs(), s.rig.sim.list_tasks(None, &Default::default()));
    for path in ["/runs", "/environments", "/notifications", "/cleanups", "/healthz"] {
        for method in [reqwest::Method::POST, reqwest::Method::DELETE, reqwest::Method::PUT] {
            let status = s.client.request(method, format!("{}{path}", s.base)).send().await.unwrap().status();
            assert_eq!(status.as_u16(), 405, "{path}");
        }
        assert_eq!(s.get(path).await.0, 200);
    }
    let after = (s.rig.engine.runs(), s.rig.sim.list_tasks(None, &Default::default()));
    assert_eq!(before, after);
}
