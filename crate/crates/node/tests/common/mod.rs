#![allow(dead_code)]

use std::net::TcpListener;
use std::path::Path;
use std::time::{Duration, Instant};

use ledgerflow::crypto::{KeyPair, NodeId};
use ledgerflow_node::config::{ApiConfig, NodeConfig, PeerConfig, Timeouts};
use ledgerflow_node::Listeners;

pub const TOKEN: &str = "test-token";

pub struct Planned {
    pub config: NodeConfig,
    pub listeners: Listeners,
    pub api: String,
}

/// Configs for an `n`-node localhost cluster on ephemeral ports. Keys are
/// written under `dir`.
pub fn plan(dir: &Path, n: u32, members: Option<Vec<u32>>, f: usize, block_size: usize) -> Vec<Planned> {
    let p2p: Vec<TcpListener> = (0..n).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    let api: Vec<TcpListener> = (0..n).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    let keys: Vec<KeyPair> = (0..n).map(|i| KeyPair::for_test(NodeId(i))).collect();
    let peers: Vec<PeerConfig> = (0..n)
        .map(|i| PeerConfig {
            id: i,
            address: p2p[i as usize].local_addr().unwrap().to_string(),
            public_key: keys[i as usize].public().to_hex(),
        })
        .collect();
    let mut out = Vec::new();
    for (i, (p, a)) in p2p.into_iter().zip(api).enumerate() {
        let key_file = dir.join(format!("node{i}.key"));
        std::fs::write(&key_file, keys[i].seed_hex()).unwrap();
        let api_addr = a.local_addr().unwrap().to_string();
        let config = NodeConfig {
            node_id: i as u32,
            listen: peers[i].address.clone(),
            data_dir: dir.join(format!("data{i}")),
            key_file,
            f,
            block_size,
            checkpoint_interval: 16,
            members: members.clone(),
            timeouts: Timeouts { request_ms: 300, view_change_ms: 1_000 },
            api: ApiConfig { listen: api_addr.clone(), token: Some(TOKEN.into()) },
            peers: peers.clone(),
        };
        out.push(Planned { config, listeners: Listeners { p2p: Some(p), api: Some(a) }, api: format!("http://{api_addr}") });
    }
    out
}

pub struct Api {
    pub base: String,
    pub http: reqwest::Client,
}

impl Api {
    pub fn new(base: &str) -> Self {
        Api { base: base.to_string(), http: reqwest::Client::new() }
    }

    pub async fn get(&self, path: &str) -> (u16, serde_json::Value) {
        let r = self.http.get(format!("{}{path}", self.base)).bearer_auth(TOKEN).send().await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(serde_json::Value::Null))
    }

    pub async fn post(&self, path: &str, body: serde_json::Value) -> (u16, serde_json::Value) {
        let r = self.http.post(format!("{}{path}", self.base)).bearer_auth(TOKEN).json(&body).send().await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(serde_json::Value::Null))
    }

    pub async fn post_toml(&self, path: &str, body: &str) -> (u16, serde_json::Value) {
        let r = self
            .http
            .post(format!("{}{path}", self.base))
            .bearer_auth(TOKEN)
            .header("content-type", "application/toml")
            .body(body.to_string())
            .send()
            .await
            .unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(serde_json::Value::Null))
    }

    /// Poll `path` until `pred` holds.
    pub async fn wait_for(&self, path: &str, timeout: Duration, pred: impl Fn(&serde_json::Value) -> bool) -> serde_json::Value {
        let deadline = Instant::now() + timeout;
        loop {
            let (status, body) = self.get(path).await;
            if status == 200 && pred(&body) {
                return body;
            }
            assert!(Instant::now() < deadline, "timed out waiting on {path}: last {status} {body}");
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
    }
}

/// Three activities in sequence, on nodes `a`, `b` and `c`.
pub fn three_step_toml(id: &str, a: u32, b: u32, c: u32) -> String {
    format!(
        r#"id = "{id}"
places = ["start", "p1", "p2", "end"]
end_places = ["end"]

[initial_marking]
start = 1

[[variables]]
name = "amount"
type = "integer"

[[variables]]
name = "approved"
type = "boolean"

[[transitions]]
name = "enter"
inputs = {{ start = 1 }}
outputs = {{ p1 = 1 }}
node = {a}
output_variables = ["amount"]

[[transitions]]
name = "approve"
inputs = {{ p1 = 1 }}
outputs = {{ p2 = 1 }}
node = {b}
input_variables = ["amount"]
output_variables = ["approved"]

[[transitions]]
name = "archive"
inputs = {{ p2 = 1 }}
outputs = {{ end = 1 }}
node = {c}
input_variables = ["amount", "approved"]
"#
    )
}

/// Route tracing output through the test harness; filter with RUST_LOG.
pub fn logs() {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_test_writer()
        .try_init();
}
