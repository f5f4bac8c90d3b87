mod common;

use std::time::Duration;

use common::{plan, three_step_toml, Api, TOKEN};
use ledgerflow_node::StartOptions;
use serde_json::json;

fn opts() -> StartOptions {
    StartOptions { submit_timeout: Duration::from_secs(3), ..StartOptions::default() }
}

async fn single(dir: &std::path::Path, block_size: usize) -> (ledgerflow_node::RunningNode, Api) {
    let mut p = plan(dir, 1, None, 0, block_size);
    let p = p.remove(0);
    let node = ledgerflow_node::start(p.config, p.listeners, opts()).await.unwrap();
    (node, Api::new(&p.api))
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn single_node_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let (node, api) = single(tmp.path(), 1).await;

    let unauth = api.http.get(format!("{}/chain/status", api.base)).send().await.unwrap();
    assert_eq!(unauth.status().as_u16(), 401);

    let status = api.wait_for("/chain/status", Duration::from_secs(5), |s| s["status"] == "READY").await;
    assert_eq!(status["headNumber"], 0);
    assert_eq!(status["membership"], json!([0]));
    let (_, wl) = api.get("/worklist").await;
    assert_eq!(wl, json!({ "workItems": [], "pendingSubmissions": [] }));

    // Steps on node 0, then node 7 (not this node), then node 0.
    let (code, body) = api.post_toml("/models", &three_step_toml("claim", 0, 7, 0)).await;
    assert_eq!(code, 200, "{body}");
    assert_eq!(body["blockNumber"], 1);
    let (code, body) = api.post_toml("/models", &three_step_toml("claim", 0, 7, 0)).await;
    assert_eq!((code, body["code"].as_str()), (409, Some("DUPLICATE_MODEL")));
    let (code, body) = api.post("/models", json!({ "id": "", "places": [], "initial_marking": {} })).await;
    assert_eq!((code, body["code"].as_str()), (422, Some("MALFORMED_MODEL")));

    let (code, body) = api.post("/cases", json!({ "modelId": "nope" })).await;
    assert_eq!((code, body["code"].as_str()), (404, Some("UNKNOWN_MODEL")));
    let (code, launched) = api.post("/cases", json!({ "modelId": "claim" })).await;
    assert_eq!(code, 200, "{launched}");
    assert_eq!(launched["blockNumber"], 2);
    let case_id = launched["caseId"].as_str().unwrap().to_string();
    let (code, case) = api.get(&format!("/cases/{case_id}")).await;
    assert_eq!(code, 200);
    assert_eq!(case["status"], "RUNNING");
    assert_eq!(api.get("/cases/00").await.0, 404);

    let (_, wl) = api.get("/worklist").await;
    let items = wl["workItems"].as_array().unwrap();
    assert_eq!(items.len(), 1);
    assert_eq!(items[0]["transitionName"], "enter");
    assert!(items[0]["enabledAt"].as_str().unwrap().ends_with('Z'));
    let item = items[0]["workItemId"].as_str().unwrap().to_string();

    let (code, body) = api.post(&format!("/worklist/{item}/complete"), json!({ "outputValues": { "amount": "lots" } })).await;
    assert_eq!((code, body["code"].as_str()), (422, Some("TYPE_MISMATCH")));
    assert_eq!(api.post("/worklist/ffffffffffffffff/complete", json!({})).await.0, 404);

    let (code, body) = api.post(&format!("/worklist/{item}/complete"), json!({ "outputValues": { "amount": 120 } })).await;
    assert_eq!(code, 200, "{body}");
    assert_eq!(body["blockNumber"], 3);
    // Read-your-writes: the completed item is gone, and the next step runs
    // on another node so nothing new appears here.
    let (_, wl) = api.get("/worklist").await;
    assert_eq!(wl["workItems"], json!([]));
    let (code, body) = api.post(&format!("/worklist/{item}/complete"), json!({ "outputValues": { "amount": 1 } })).await;
    assert_eq!((code, body["code"].as_str()), (409, Some("WORK_ITEM_STALE")));

    let (_, case) = api.get(&format!("/cases/{case_id}")).await;
    assert_eq!(case["data"]["amount"], 120);
    assert_eq!(case["marking"], json!({ "p1": 1 }));
    let (_, cases) = api.get("/cases").await;
    assert_eq!(cases.as_array().unwrap().len(), 1);
    let status = api.wait_for("/chain/status", Duration::from_secs(5), |s| s["headNumber"] == 3).await;
    assert_eq!(status["pendingQueueLength"], 0);
    node.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn events_arrive_after_state_is_readable() {
    let tmp = tempfile::tempdir().unwrap();
    let (node, api) = single(tmp.path(), 1).await;
    api.wait_for("/chain/status", Duration::from_secs(5), |s| s["status"] == "READY").await;

    let resp = api.http.get(format!("{}/events?token={TOKEN}", api.base)).send().await.unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    let mut resp = resp;

    assert_eq!(api.post_toml("/models", &three_step_toml("m", 0, 0, 0)).await.0, 200);
    let (_, launched) = api.post("/cases", json!({ "modelId": "m" })).await;
    let case_id = launched["caseId"].as_str().unwrap().to_string();

    let mut buf = String::new();
    let mut seen = Vec::new();
    let deadline = tokio::time::Instant::now() + Duration::from_secs(10);
    while !seen.contains(&"WORK_ITEM_ADDED".to_string()) {
        let chunk = tokio::time::timeout_at(deadline, resp.chunk()).await.expect("events in time").unwrap().unwrap();
        buf.push_str(&String::from_utf8_lossy(&chunk));
        while let Some(end) = buf.find("\n\n") {
            let frame: String = buf.drain(..end + 2).collect();
            let Some(data) = frame.lines().find_map(|l| l.strip_prefix("data: ")) else { continue };
            let ev: serde_json::Value = serde_json::from_str(data).unwrap();
            let kind = ev["type"].as_str().unwrap().to_string();
            match kind.as_str() {
                "WORK_ITEM_ADDED" => {
                    let (_, wl) = api.get("/worklist").await;
                    assert!(wl["workItems"].as_array().unwrap().iter().any(|w| w["workItemId"] == ev["data"]["workItemId"]));
                }
                "CASE_UPDATED" => {
                    assert_eq!(ev["data"]["caseId"], case_id.as_str());
                    assert_eq!(api.get(&format!("/cases/{case_id}")).await.0, 200);
                }
                "BLOCK_APPLIED" => {
                    let (_, s) = api.get("/chain/status").await;
                    assert!(s["headNumber"].as_u64().unwrap() >= ev["data"]["number"].as_u64().unwrap());
                }
                _ => {}
            }
            assert!(ev["at"].as_str().unwrap().ends_with('Z'));
            seen.push(kind);
        }
    }
    assert!(seen.contains(&"BLOCK_APPLIED".to_string()), "{seen:?}");
    assert!(seen.contains(&"CASE_UPDATED".to_string()), "{seen:?}");
    assert!(seen.contains(&"PENDING_TX_CHANGED".to_string()), "{seen:?}");
    node.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn race_loser_gets_conflict_and_pending_is_visible() {
    let tmp = tempfile::tempdir().unwrap();
    // Two transactions per block: the first completion waits in the queue.
    let (node, api) = single(tmp.path(), 2).await;
    api.wait_for("/chain/status", Duration::from_secs(5), |s| s["status"] == "READY").await;
    let xor = r#"
id = "xor"
places = ["p0", "a", "b"]
end_places = ["a", "b"]
[initial_marking]
p0 = 1
[[transitions]]
name = "A"
inputs = { p0 = 1 }
outputs = { a = 1 }
node = 0
[[transitions]]
name = "B"
inputs = { p0 = 1 }
outputs = { b = 1 }
node = 0
"#;
    // Model and launch share one block.
    let api2 = Api::new(&api.base);
    let install = tokio::spawn(async move { api2.post_toml("/models", xor).await });
    api.wait_for("/worklist", Duration::from_secs(5), |w| w["pendingSubmissions"].as_array().unwrap().len() == 1).await;
    let (code, _) = api.post("/cases", json!({ "modelId": "xor" })).await;
    assert_eq!(code, 404, "the model is not applied until its block is cut");
    let filler = three_step_toml("filler", 0, 0, 0);
    assert_eq!(api.post_toml("/models", &filler).await.0, 200);
    assert_eq!(install.await.unwrap().0, 200);

    let (code, launched) = api.post("/cases", json!({ "modelId": "xor" })).await.clone();
    assert_eq!(code, 504, "a lone launch waits for a second transaction: {launched}");
    let (code, _) = api.post("/cases", json!({ "modelId": "filler" })).await;
    assert_eq!(code, 200);
    let wl = api.wait_for("/worklist", Duration::from_secs(5), |w| w["workItems"].as_array().unwrap().len() >= 2).await;
    let id_of = |t: &str| {
        wl["workItems"].as_array().unwrap().iter().find(|w| w["transitionName"] == t).unwrap()["workItemId"]
            .as_str()
            .unwrap()
            .to_string()
    };
    let (a, b) = (id_of("A"), id_of("B"));

    let api2 = Api::new(&api.base);
    let first = tokio::spawn(async move { api2.post(&format!("/worklist/{a}/complete"), json!({})).await });
    let wl = api.wait_for("/worklist", Duration::from_secs(5), |w| !w["pendingSubmissions"].as_array().unwrap().is_empty()).await;
    assert_eq!(wl["pendingSubmissions"][0]["kind"], "INSTANCE_STATE");
    let (code, body) = api.post(&format!("/worklist/{b}/complete"), json!({})).await;
    assert_eq!(code, 409, "{body}");
    assert_eq!(body["code"], "TRANSACTION_REJECTED");
    assert_eq!(body["reason"], "NOT_REACHABLE");
    assert_eq!(body["refreshWorklist"], true);

    // Fill the block so the winner commits.
    let enter = id_of("enter");
    let (code, _) = api.post(&format!("/worklist/{enter}/complete"), json!({ "outputValues": { "amount": 1 } })).await;
    assert_eq!(code, 200);
    let (code, body) = first.await.unwrap();
    assert_eq!(code, 200, "{body}");
    node.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn recovering_node_refuses_worklist_traffic() {
    let tmp = tempfile::tempdir().unwrap();
    // Node 1 must be admitted by node 0, which never starts.
    let mut planned = plan(tmp.path(), 2, Some(vec![0]), 0, 1);
    let p = planned.remove(1);
    let api = Api::new(&p.api);
    let node = ledgerflow_node::start(p.config, p.listeners, opts()).await.unwrap();
    let (code, status) = api.get("/chain/status").await;
    assert_eq!(code, 200);
    assert_eq!(status["status"], "RECOVERING");
    for path in ["/worklist", "/cases"] {
        let (code, body) = api.get(path).await;
        assert_eq!((code, body["code"].as_str()), (503, Some("RECOVERING")), "{path}");
    }
    let (code, _) = api.post("/cases", json!({ "modelId": "m" })).await;
    assert_eq!(code, 503);
    node.stop().await;
}
