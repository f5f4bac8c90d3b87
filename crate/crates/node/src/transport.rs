//! Live TCP transport over the static peer list.
//!
//! Every node dials every peer it has no link to and accepts inbound
//! connections. Both ends of a new connection exchange a signed HELLO naming
//! the intended receiver; connections from keys outside the peer list, or
//! claiming an address other than the configured one, are closed. When two
//! links to the same peer exist the one dialed by the lower node id is kept.
//!
//! Each peer has one bounded outgoing queue drained by the writer of the
//! current link, so frames to a peer leave in the order they were queued.
//! When the queue is full the oldest frame is dropped; the protocols above
//! retransmit.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::net::{IpAddr, SocketAddr};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use ledgerflow::codec;
use ledgerflow::crypto::{KeyDirectory, KeyPair, NodeId};
use ledgerflow::transport::{FrameError, MessageKind, SignedEnvelope, MAX_FRAME};
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, Notify};
use tokio::task::JoinHandle;

/// Frames kept per disconnected or slow peer before the oldest is dropped.
pub const QUEUE_CAPACITY: usize = 4_096;
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(3);
const MAX_BACKOFF: Duration = Duration::from_secs(5);
const DIAL_GRACE: Duration = Duration::from_millis(500);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Hello {
    to: NodeId,
    /// The sender's configured listen address.
    listen: String,
}

struct PeerQueue {
    frames: Mutex<VecDeque<Arc<Vec<u8>>>>,
    ready: Notify,
    dropped: AtomicU64,
}

impl PeerQueue {
    fn new() -> Self {
        PeerQueue { frames: Mutex::new(VecDeque::new()), ready: Notify::new(), dropped: AtomicU64::new(0) }
    }

    fn push(&self, frame: Arc<Vec<u8>>) {
        let mut q = self.frames.lock().unwrap();
        if q.len() >= QUEUE_CAPACITY {
            q.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        q.push_back(frame);
        drop(q);
        self.ready.notify_one();
    }

    async fn pop(&self) -> Arc<Vec<u8>> {
        loop {
            if let Some(f) = self.frames.lock().unwrap().pop_front() {
                return f;
            }
            self.ready.notified().await;
        }
    }
}

struct Link {
    id: u64,
    initiator: NodeId,
    reader: JoinHandle<()>,
    writer: JoinHandle<()>,
}

impl Link {
    fn close(&self) {
        self.reader.abort();
        self.writer.abort();
    }
}

struct Shared {
    me: NodeId,
    keys: KeyPair,
    directory: Arc<KeyDirectory>,
    my_addr: String,
    addresses: BTreeMap<NodeId, String>,
    queues: HashMap<NodeId, Arc<PeerQueue>>,
    links: Mutex<HashMap<NodeId, Link>>,
    link_lost: HashMap<NodeId, Arc<Notify>>,
    next_link: AtomicU64,
    inbox: mpsc::Sender<SignedEnvelope>,
}

/// Handle for sending; cheap to clone.
#[derive(Clone)]
pub struct Transport {
    shared: Arc<Shared>,
}

/// Owns the accept and dial loops; dropping it closes every link.
pub struct TransportTasks {
    shared: Arc<Shared>,
    tasks: Vec<JoinHandle<()>>,
}

impl Drop for TransportTasks {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
        for (_, l) in self.shared.links.lock().unwrap().drain() {
            l.close();
        }
    }
}

impl Transport {
    /// Start accepting on `listener` and dialing every peer in `addresses`.
    /// Verified envelopes from peers are pushed into `inbox`.
    pub fn start(
        me: NodeId,
        keys: KeyPair,
        directory: Arc<KeyDirectory>,
        addresses: BTreeMap<NodeId, String>,
        listener: TcpListener,
        inbox: mpsc::Sender<SignedEnvelope>,
    ) -> (Transport, TransportTasks) {
        let my_addr = addresses.get(&me).cloned().unwrap_or_default();
        let others: Vec<NodeId> = addresses.keys().copied().filter(|p| *p != me).collect();
        let shared = Arc::new(Shared {
            me,
            keys,
            directory,
            my_addr,
            queues: others.iter().map(|p| (*p, Arc::new(PeerQueue::new()))).collect(),
            link_lost: others.iter().map(|p| (*p, Arc::new(Notify::new()))).collect(),
            addresses,
            links: Mutex::new(HashMap::new()),
            next_link: AtomicU64::new(1),
            inbox,
        });
        let mut tasks = vec![tokio::spawn(accept_loop(shared.clone(), listener))];
        for p in others {
            tasks.push(tokio::spawn(dial_loop(shared.clone(), p)));
        }
        (Transport { shared: shared.clone() }, TransportTasks { shared, tasks })
    }

    pub fn id(&self) -> NodeId {
        self.shared.me
    }

    /// Queue `env` for `to`. Messages to self go straight to the inbox.
    pub fn send(&self, to: NodeId, env: &SignedEnvelope) {
        if to == self.shared.me {
            let _ = self.shared.inbox.try_send(env.clone());
            return;
        }
        if let Some(q) = self.shared.queues.get(&to) {
            q.push(Arc::new(env.to_frame()));
        }
    }

    pub fn broadcast(&self, env: &SignedEnvelope) {
        let frame = Arc::new(env.to_frame());
        for q in self.shared.queues.values() {
            q.push(frame.clone());
        }
    }

    /// Peers with an established link.
    pub fn connected(&self) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.shared.links.lock().unwrap().keys().copied().collect();
        v.sort();
        v
    }

    /// Which side dialed the current link to `peer`.
    pub fn link_initiator(&self, peer: NodeId) -> Option<NodeId> {
        self.shared.links.lock().unwrap().get(&peer).map(|l| l.initiator)
    }

    /// Frames dropped so far because a peer's queue was full.
    pub fn dropped(&self, peer: NodeId) -> u64 {
        self.shared.queues.get(&peer).map_or(0, |q| q.dropped.load(Ordering::Relaxed))
    }
}

async fn accept_loop(shared: Arc<Shared>, listener: TcpListener) {
    loop {
        let Ok((stream, remote)) = listener.accept().await else {
            tokio::time::sleep(Duration::from_millis(50)).await;
            continue;
        };
        let shared = shared.clone();
        tokio::spawn(async move {
            match accept_one(&shared, stream, remote).await {
                Ok(()) => {}
                Err(e) => tracing::warn!(node = %shared.me, %remote, error = %e, "refused inbound connection"),
            }
        });
    }
}

#[derive(Debug, thiserror::Error)]
enum HandshakeError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("frame: {0}")]
    Frame(#[from] FrameError),
    #[error("timed out")]
    Timeout,
    #[error("{0}")]
    Rejected(String),
}

async fn accept_one(shared: &Arc<Shared>, mut stream: TcpStream, remote: SocketAddr) -> Result<(), HandshakeError> {
    let hello = tokio::time::timeout(HANDSHAKE_TIMEOUT, read_envelope(&mut stream))
        .await
        .map_err(|_| HandshakeError::Timeout)??;
    let peer = check_hello(shared, &hello, None)?;
    let configured = &shared.addresses[&peer];
    if let Ok(expected) = configured.parse::<SocketAddr>() {
        if !same_host(expected.ip(), remote.ip()) {
            return Err(HandshakeError::Rejected(format!("node {peer} connected from {remote}, configured at {configured}")));
        }
    }
    stream.write_all(&hello_for(shared, peer).to_frame()).await?;
    install_link(shared, peer, peer, stream);
    Ok(())
}

fn same_host(a: IpAddr, b: IpAddr) -> bool {
    a == b || (a.is_loopback() && b.is_loopback()) || a.is_unspecified()
}

fn hello_for(shared: &Shared, to: NodeId) -> SignedEnvelope {
    let body = codec::encode(&Hello { to, listen: shared.my_addr.clone() });
    SignedEnvelope::sign(&shared.keys, shared.me, MessageKind::Hello, body)
}

/// Validate a HELLO; returns the authenticated peer.
fn check_hello(shared: &Shared, env: &SignedEnvelope, expect: Option<NodeId>) -> Result<NodeId, HandshakeError> {
    if env.kind != MessageKind::Hello {
        return Err(HandshakeError::Rejected(format!("expected HELLO, got {:?}", env.kind)));
    }
    let peer = env.sender;
    if peer == shared.me || !shared.addresses.contains_key(&peer) || !env.verify(&shared.directory) {
        return Err(HandshakeError::Rejected(format!("unknown or unauthenticated peer {peer}")));
    }
    if expect.is_some_and(|e| e != peer) {
        return Err(HandshakeError::Rejected(format!("expected node {}, got {peer}", expect.unwrap())));
    }
    let hello: Hello = codec::decode(&env.body).map_err(|e| HandshakeError::Rejected(e.to_string()))?;
    if hello.to != shared.me {
        return Err(HandshakeError::Rejected(format!("HELLO addressed to {}", hello.to)));
    }
    if hello.listen != shared.addresses[&peer] {
        return Err(HandshakeError::Rejected(format!("node {peer} claims address {}", hello.listen)));
    }
    Ok(peer)
}

async fn dial_loop(shared: Arc<Shared>, peer: NodeId) {
    let addr = shared.addresses[&peer].clone();
    let lost = shared.link_lost[&peer].clone();
    let mut backoff = Duration::from_millis(100);
    let mut fresh = true;
    loop {
        if shared.links.lock().unwrap().contains_key(&peer) {
            let _ = tokio::time::timeout(Duration::from_secs(1), lost.notified()).await;
            fresh = true;
            continue;
        }
        // The higher id gives the preferred dial a head start, so links are
        // rarely replaced and frames written into them rarely lost.
        if fresh && shared.me > peer {
            fresh = false;
            tokio::time::sleep(DIAL_GRACE).await;
            continue;
        }
        match dial_one(&shared, peer, &addr).await {
            Ok(stream) => {
                install_link(&shared, peer, shared.me, stream);
                backoff = Duration::from_millis(100);
            }
            Err(e) => {
                tracing::debug!(node = %shared.me, %peer, error = %e, "dial failed, backing off");
                tokio::time::sleep(backoff).await;
                backoff = (backoff * 2).min(MAX_BACKOFF);
            }
        }
    }
}

async fn dial_one(shared: &Arc<Shared>, peer: NodeId, addr: &str) -> Result<TcpStream, HandshakeError> {
    let mut stream = tokio::time::timeout(HANDSHAKE_TIMEOUT, TcpStream::connect(addr))
        .await
        .map_err(|_| HandshakeError::Timeout)??;
    stream.set_nodelay(true)?;
    stream.write_all(&hello_for(shared, peer).to_frame()).await?;
    let reply = tokio::time::timeout(HANDSHAKE_TIMEOUT, read_envelope(&mut stream))
        .await
        .map_err(|_| HandshakeError::Timeout)??;
    check_hello(shared, &reply, Some(peer))?;
    Ok(stream)
}

/// Keep the new connection unless the current link is the preferred one
/// (dialed by the lower id) and the new one is not.
fn install_link(shared: &Arc<Shared>, peer: NodeId, initiator: NodeId, stream: TcpStream) {
    let preferred = shared.me.min(peer);
    let mut links = shared.links.lock().unwrap();
    if let Some(cur) = links.get(&peer) {
        if cur.initiator == preferred && initiator != preferred {
            tracing::debug!(node = %shared.me, %peer, "dropping duplicate link");
            return;
        }
    }
    let _ = stream.set_nodelay(true);
    let id = shared.next_link.fetch_add(1, Ordering::Relaxed);
    let (mut rd, mut wr) = stream.into_split();
    let reader = {
        let shared = shared.clone();
        tokio::spawn(async move {
            loop {
                let env = match read_envelope(&mut rd).await {
                    Ok(env) => env,
                    Err(e) => {
                        tracing::debug!(node = %shared.me, %peer, error = %e, "link read ended");
                        break;
                    }
                };
                // Forwarded requests keep their original signer, so the
                // signer need not be the link peer; it must be a known key.
                if env.kind == MessageKind::Hello || !env.verify(&shared.directory) {
                    tracing::warn!(node = %shared.me, %peer, sender = %env.sender, kind = ?env.kind, "dropping unauthenticated frame");
                    continue;
                }
                if shared.inbox.send(env).await.is_err() {
                    break;
                }
            }
            remove_link(&shared, peer, id);
        })
    };
    let writer = {
        let shared = shared.clone();
        let queue = shared.queues[&peer].clone();
        tokio::spawn(async move {
            loop {
                let frame = queue.pop().await;
                if let Err(e) = wr.write_all(&frame).await {
                    tracing::debug!(node = %shared.me, %peer, error = %e, "link write failed");
                    break;
                }
            }
            remove_link(&shared, peer, id);
        })
    };
    tracing::info!(node = %shared.me, %peer, %initiator, "link established");
    if let Some(old) = links.insert(peer, Link { id, initiator, reader, writer }) {
        old.close();
    }
}

fn remove_link(shared: &Shared, peer: NodeId, id: u64) {
    let mut links = shared.links.lock().unwrap();
    if links.get(&peer).is_some_and(|l| l.id == id) {
        if let Some(l) = links.remove(&peer) {
            l.close();
        }
        tracing::info!(node = %shared.me, %peer, "link lost");
        shared.link_lost[&peer].notify_one();
    }
}

async fn read_envelope<R: AsyncReadExt + Unpin>(r: &mut R) -> Result<SignedEnvelope, HandshakeError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len).await?;
    let n = u32::from_be_bytes(len);
    if n > MAX_FRAME {
        return Err(FrameError::TooLong(n).into());
    }
    let mut buf = vec![0u8; 4 + n as usize];
    buf[..4].copy_from_slice(&len);
    r.read_exact(&mut buf[4..]).await?;
    Ok(SignedEnvelope::from_exact_frame(&buf)?)
}
