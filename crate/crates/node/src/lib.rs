//! Networked node: configuration, TCP peer transport, the event loop around
//! the sans-IO [`ledgerflow::node::Node`], and the worklist HTTP API.
//!
//! Startup runs in a fixed order: key material and the local chain are
//! checked, the peer transport starts, the replica fetches ordering state
//! and the block service catches up, the engine is rebuilt from the chain,
//! and only then does the API serve worklist traffic.

pub mod api;
pub mod config;
pub mod dto;
pub mod runtime;
pub mod transport;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use ledgerflow::block::{BlockStore, ChainFailure};
use ledgerflow::node::{Node, NodeError, NodeParams};
use ledgerflow::workflow::HostRegistry;
use tokio::net::TcpListener;
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;

use config::{ConfigError, KeyError, NodeConfig};
use runtime::{EventLoop, NodeHandle};

/// Fatal startup failures, one process exit code per class.
#[derive(Debug, thiserror::Error)]
pub enum StartupError {
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("key material: {0}")]
    Keys(#[from] KeyError),
    #[error("data directory {path}: {message}")]
    DataDir { path: String, message: String },
    #[error("stored chain is damaged at block {}: {:?}", .0.at, .0.kind)]
    ChainCorrupt(ChainFailure),
    #[error("stored chain exists but no peer can supply ordering state")]
    NoRecoverySource,
    #[error("cannot listen on {addr} ({what}): {source}")]
    Bind { what: &'static str, addr: String, source: std::io::Error },
}

pub mod exit {
    pub const OK: i32 = 0;
    /// Runtime failure or a failed client command.
    pub const FAILURE: i32 = 1;
    /// Command-line usage error (clap's own code).
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const KEYS: i32 = 4;
    pub const DATA_DIR: i32 = 5;
    pub const CHAIN_CORRUPT: i32 = 6;
    pub const NO_RECOVERY_SOURCE: i32 = 7;
    pub const BIND: i32 = 8;
}

impl StartupError {
    pub fn exit_code(&self) -> i32 {
        match self {
            StartupError::Config(_) => exit::CONFIG,
            StartupError::Keys(_) => exit::KEYS,
            StartupError::DataDir { .. } => exit::DATA_DIR,
            StartupError::ChainCorrupt(_) => exit::CHAIN_CORRUPT,
            StartupError::NoRecoverySource => exit::NO_RECOVERY_SOURCE,
            StartupError::Bind { .. } => exit::BIND,
        }
    }
}

/// Optional pre-bound sockets, so tests can use ephemeral ports.
#[derive(Default)]
pub struct Listeners {
    pub p2p: Option<std::net::TcpListener>,
    pub api: Option<std::net::TcpListener>,
}

pub struct StartOptions {
    pub registry: HostRegistry,
    pub submit_timeout: Duration,
}

impl Default for StartOptions {
    fn default() -> Self {
        StartOptions { registry: HostRegistry::with_builtins(), submit_timeout: Duration::from_secs(30) }
    }
}

pub struct RunningNode {
    pub handle: NodeHandle,
    pub api_addr: SocketAddr,
    pub p2p_addr: SocketAddr,
    pub transport: transport::Transport,
    shutdown: watch::Sender<bool>,
    event_loop: JoinHandle<Node>,
    server: JoinHandle<()>,
    _transport_tasks: transport::TransportTasks,
}

impl RunningNode {
    /// Stop serving and return the node state for inspection.
    pub async fn stop(self) -> Option<Node> {
        let _ = self.shutdown.send(true);
        self.server.abort();
        let node = self.event_loop.await.ok();
        drop(self._transport_tasks);
        node
    }

    /// Resolve when the event loop ends on its own.
    pub async fn wait(&mut self) {
        let _ = (&mut self.event_loop).await;
    }
}

async fn bind(what: &'static str, addr: &str, pre: Option<std::net::TcpListener>) -> Result<TcpListener, StartupError> {
    let err = |source| StartupError::Bind { what, addr: addr.to_string(), source };
    match pre {
        Some(l) => {
            l.set_nonblocking(true).map_err(err)?;
            TcpListener::from_std(l).map_err(err)
        }
        None => TcpListener::bind(addr).await.map_err(err),
    }
}

/// Open the node described by `cfg` and start all of its tasks.
pub async fn start(cfg: NodeConfig, listeners: Listeners, opts: StartOptions) -> Result<RunningNode, StartupError> {
    cfg.check()?;
    let keys = cfg.load_keys()?;
    let membership = cfg.membership()?;
    let directory = Arc::new(cfg.directory());
    let store = BlockStore::open(&cfg.data_dir)
        .map_err(|e| StartupError::DataDir { path: cfg.data_dir.display().to_string(), message: e.to_string() })?;
    let params = NodeParams {
        id: cfg.id(),
        keys: keys.clone(),
        directory: directory.clone(),
        join: !membership.contains(cfg.id()),
        membership,
        block_size: cfg.block_size,
        registry: opts.registry,
        seed: rand::random(),
        request_timeout_ms: cfg.timeouts.request_ms,
        view_change_timeout_ms: cfg.timeouts.view_change_ms,
        checkpoint_interval: cfg.checkpoint_interval,
    };
    let node = Node::new(params, store).map_err(|e| match e {
        NodeError::ChainCorrupt(f) => StartupError::ChainCorrupt(f),
        NodeError::NoRecoverySource => StartupError::NoRecoverySource,
        other => StartupError::DataDir { path: cfg.data_dir.display().to_string(), message: other.to_string() },
    })?;

    let p2p = bind("peer transport", &cfg.listen, listeners.p2p).await?;
    let api = bind("worklist api", &cfg.api.listen, listeners.api).await?;
    let p2p_addr = p2p.local_addr().map_err(|source| StartupError::Bind { what: "peer transport", addr: cfg.listen.clone(), source })?;
    let api_addr = api.local_addr().map_err(|source| StartupError::Bind { what: "worklist api", addr: cfg.api.listen.clone(), source })?;

    let addresses: BTreeMap<_, _> = cfg.peers.iter().map(|p| (ledgerflow::crypto::NodeId(p.id), p.address.clone())).collect();
    let (inbox_tx, inbox_rx) = mpsc::channel(8_192);
    let (transport, transport_tasks) = transport::Transport::start(cfg.id(), keys, directory, addresses, p2p, inbox_tx);

    let (event_loop, handle) = EventLoop::new(node, transport.clone(), inbox_rx);
    let (shutdown, shutdown_rx) = watch::channel(false);
    let event_loop = tokio::spawn(event_loop.run(shutdown_rx));

    let state = api::ApiState { handle: handle.clone(), token: cfg.api.token.clone(), submit_timeout: opts.submit_timeout };
    let app = api::router(state);
    let server = tokio::spawn(async move {
        if let Err(e) = axum::serve(api, app).await {
            tracing::error!(error = %e, "worklist api stopped");
        }
    });
    tracing::info!(node = %cfg.id(), %p2p_addr, %api_addr, "node started");
    Ok(RunningNode {
        handle,
        api_addr,
        p2p_addr,
        transport,
        shutdown,
        event_loop,
        server,
        _transport_tasks: transport_tasks,
    })
}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/node.md")]
mod guide {}
