use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use ledgerflow::codec;
use ledgerflow::crypto::{KeyDirectory, KeyPair, NodeId};
use ledgerflow::transport::{MessageKind, SignedEnvelope};
use ledgerflow_node::transport::{Transport, TransportTasks, QUEUE_CAPACITY};
use serde::Serialize;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;

struct Net {
    listeners: Vec<Option<TcpListener>>,
    addresses: BTreeMap<NodeId, String>,
    directory: Arc<KeyDirectory>,
}

async fn net(n: u32) -> Net {
    let mut listeners = Vec::new();
    let mut addresses = BTreeMap::new();
    let mut dir = KeyDirectory::new();
    for i in 0..n {
        let l = TcpListener::bind("127.0.0.1:0").await.unwrap();
        addresses.insert(NodeId(i), l.local_addr().unwrap().to_string());
        dir.insert(NodeId(i), KeyPair::for_test(NodeId(i)).public());
        listeners.push(Some(l));
    }
    Net { listeners, addresses, directory: Arc::new(dir) }
}

impl Net {
    fn start(&mut self, i: u32) -> (Transport, TransportTasks, mpsc::Receiver<SignedEnvelope>) {
        let (tx, rx) = mpsc::channel(QUEUE_CAPACITY * 2);
        let l = self.listeners[i as usize].take().unwrap();
        let (t, tasks) = Transport::start(
            NodeId(i),
            KeyPair::for_test(NodeId(i)),
            self.directory.clone(),
            self.addresses.clone(),
            l,
            tx,
        );
        (t, tasks, rx)
    }
}

fn numbered(from: u32, i: u32) -> SignedEnvelope {
    SignedEnvelope::sign(&KeyPair::for_test(NodeId(from)), NodeId(from), MessageKind::Request, i.to_be_bytes().to_vec())
}

fn number(env: &SignedEnvelope) -> u32 {
    u32::from_be_bytes(env.body[..4].try_into().unwrap())
}

async fn wait_until(mut cond: impl FnMut() -> bool) {
    for _ in 0..200 {
        if cond() {
            return;
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    panic!("condition not reached");
}

#[derive(Serialize)]
struct Hello {
    to: NodeId,
    listen: String,
}

/// True if the peer closes the connection after our HELLO.
async fn refused(addr: &str, hello: SignedEnvelope) -> bool {
    let mut s = TcpStream::connect(addr).await.unwrap();
    s.write_all(&hello.to_frame()).await.unwrap();
    let mut buf = [0u8; 64];
    matches!(tokio::time::timeout(Duration::from_secs(5), s.read(&mut buf)).await, Ok(Ok(0)) | Ok(Err(_)))
}

#[tokio::test]
async fn links_form_once_with_an_agreed_initiator() {
    let mut net = net(3).await;
    let nodes: Vec<_> = (0..3).map(|i| net.start(i)).collect();
    wait_until(|| nodes.iter().all(|(t, _, _)| t.connected().len() == 2)).await;
    // Let simultaneous dials settle.
    tokio::time::sleep(Duration::from_millis(300)).await;
    for (a, (ta, _, _)) in nodes.iter().enumerate() {
        for (b, (tb, _, _)) in nodes.iter().enumerate() {
            if a != b {
                let (a, b) = (NodeId(a as u32), NodeId(b as u32));
                assert_eq!(ta.link_initiator(b), tb.link_initiator(a), "{a} and {b} disagree");
            }
        }
    }
}

#[tokio::test]
async fn frames_to_a_peer_arrive_in_order() {
    let mut net = net(2).await;
    let (a, _ta, _) = net.start(0);
    let (_b, _tb, mut inbox) = net.start(1);
    for i in 0..2_000 {
        a.send(NodeId(1), &numbered(0, i));
    }
    for i in 0..2_000 {
        let env = tokio::time::timeout(Duration::from_secs(10), inbox.recv()).await.unwrap().unwrap();
        assert_eq!(env.sender, NodeId(0));
        assert_eq!(number(&env), i);
    }
}

#[tokio::test]
async fn full_queue_drops_the_oldest() {
    let mut net = net(2).await;
    let (a, _ta, _) = net.start(0);
    let extra = 10;
    for i in 0..(QUEUE_CAPACITY as u32 + extra) {
        a.send(NodeId(1), &numbered(0, i));
    }
    assert_eq!(a.dropped(NodeId(1)), extra as u64);

    let (_b, _tb, mut inbox) = net.start(1);
    let mut last = None;
    while last != Some(QUEUE_CAPACITY as u32 + extra - 1) {
        let env = tokio::time::timeout(Duration::from_secs(10), inbox.recv()).await.unwrap().unwrap();
        let n = number(&env);
        assert!(n >= extra, "frame {n} should have been dropped");
        assert!(last.is_none_or(|l| n > l), "out of order: {n} after {last:?}");
        last = Some(n);
    }
}

#[tokio::test]
async fn self_sends_skip_the_network() {
    let mut net = net(2).await;
    let (a, _ta, mut inbox) = net.start(0);
    a.send(NodeId(0), &numbered(0, 7));
    assert_eq!(number(&inbox.recv().await.unwrap()), 7);
}

#[tokio::test]
async fn bad_hellos_are_refused() {
    let mut net = net(2).await;
    let addr = net.addresses[&NodeId(0)].clone();
    let claimed = net.addresses[&NodeId(1)].clone();
    let (a, _ta, _) = net.start(0);

    let stranger = KeyPair::for_test(NodeId(9));
    let body = codec::encode(&Hello { to: NodeId(0), listen: claimed.clone() });
    assert!(refused(&addr, SignedEnvelope::sign(&stranger, NodeId(9), MessageKind::Hello, body.clone())).await);
    // Known id, wrong key.
    assert!(refused(&addr, SignedEnvelope::sign(&stranger, NodeId(1), MessageKind::Hello, body)).await);

    let one = KeyPair::for_test(NodeId(1));
    let elsewhere = codec::encode(&Hello { to: NodeId(0), listen: "127.0.0.1:1".into() });
    assert!(refused(&addr, SignedEnvelope::sign(&one, NodeId(1), MessageKind::Hello, elsewhere)).await);
    let misaddressed = codec::encode(&Hello { to: NodeId(5), listen: claimed.clone() });
    assert!(refused(&addr, SignedEnvelope::sign(&one, NodeId(1), MessageKind::Hello, misaddressed)).await);
    let not_hello = SignedEnvelope::sign(&one, NodeId(1), MessageKind::Request, vec![1, 2, 3]);
    assert!(refused(&addr, not_hello).await);
    assert!(a.connected().is_empty());
}
