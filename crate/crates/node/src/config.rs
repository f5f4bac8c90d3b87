//! Node configuration file (TOML).
//!
//! ```toml
//! node_id = 0
//! listen = "127.0.0.1:7000"
//! data_dir = "data/node0"
//! key_file = "keys/node0.key"
//! f = 1
//! block_size = 1
//!
//! [timeouts]
//! request_ms = 500
//! view_change_ms = 1000
//!
//! [api]
//! listen = "127.0.0.1:8000"
//! token = "change-me"
//!
//! [[peers]]
//! id = 0
//! address = "127.0.0.1:7000"
//! public_key = "…64 hex chars…"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ledgerflow::crypto::{KeyDirectory, KeyPair, NodeId, PublicKey};
use ledgerflow::ordering::Membership;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("node {0} is not in the peer list")]
    NotAPeer(u32),
    #[error("duplicate peer id {0}")]
    DuplicatePeer(u32),
    #[error("duplicate peer address {0}")]
    DuplicateAddress(String),
    #[error("member {0} is not in the peer list")]
    UnknownMember(u32),
    #[error("block_size must be at least 1")]
    BlockSize,
    #[error("checkpoint_interval must be at least 1")]
    CheckpointInterval,
    #[error("peer {id}: bad public key: {message}")]
    PublicKey { id: u32, message: String },
    #[error("membership: {0}")]
    Membership(#[from] ledgerflow::ordering::MembershipError),
}

#[derive(Debug, thiserror::Error)]
pub enum KeyError {
    #[error("cannot read key file {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("key file {path} is not a 32-byte hex seed")]
    Format { path: PathBuf },
    #[error("key file does not match the public key configured for node {0}")]
    Mismatch(u32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub node_id: u32,
    /// Peer-to-peer listen address.
    pub listen: String,
    pub data_dir: PathBuf,
    /// File holding this node's 32-byte signing seed in hex.
    pub key_file: PathBuf,
    pub f: usize,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    #[serde(default = "default_checkpoint_interval")]
    pub checkpoint_interval: u64,
    /// Initial ordering membership. Defaults to every peer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub members: Option<Vec<u32>>,
    #[serde(default)]
    pub timeouts: Timeouts,
    pub api: ApiConfig,
    pub peers: Vec<PeerConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timeouts {
    #[serde(default = "default_request_ms")]
    pub request_ms: u64,
    #[serde(default = "default_view_change_ms")]
    pub view_change_ms: u64,
}

impl Default for Timeouts {
    fn default() -> Self {
        Timeouts { request_ms: default_request_ms(), view_change_ms: default_view_change_ms() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiConfig {
    pub listen: String,
    /// Shared bearer token. Without one the API is open.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerConfig {
    pub id: u32,
    pub address: String,
    pub public_key: String,
}

fn default_block_size() -> usize {
    1
}

fn default_checkpoint_interval() -> u64 {
    64
}

fn default_request_ms() -> u64 {
    500
}

fn default_view_change_ms() -> u64 {
    1_000
}

impl NodeConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse { path: path.to_path_buf(), message },
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data_dir = base.join(&cfg.data_dir);
        cfg.key_file = base.join(&cfg.key_file);
        Ok(cfg)
    }

    /// Parse and check a configuration without touching the file system.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: NodeConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: PathBuf::new(), message: e.to_string() })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        if self.block_size == 0 {
            return Err(ConfigError::BlockSize);
        }
        if self.checkpoint_interval == 0 {
            return Err(ConfigError::CheckpointInterval);
        }
        let mut ids = BTreeSet::new();
        let mut addrs = BTreeSet::new();
        for p in &self.peers {
            if !ids.insert(p.id) {
                return Err(ConfigError::DuplicatePeer(p.id));
            }
            if !addrs.insert(p.address.as_str()) {
                return Err(ConfigError::DuplicateAddress(p.address.clone()));
            }
            p.public_key.parse::<PublicKey>().map_err(|e| ConfigError::PublicKey { id: p.id, message: e.to_string() })?;
        }
        if !ids.contains(&self.node_id) {
            return Err(ConfigError::NotAPeer(self.node_id));
        }
        if let Some(m) = self.members.iter().flatten().find(|m| !ids.contains(m)) {
            return Err(ConfigError::UnknownMember(*m));
        }
        self.membership()?;
        Ok(())
    }

    pub fn id(&self) -> NodeId {
        NodeId(self.node_id)
    }

    pub fn membership(&self) -> Result<Membership, ConfigError> {
        let members = match &self.members {
            Some(m) => m.clone(),
            None => self.peers.iter().map(|p| p.id).collect(),
        };
        Ok(Membership::new(members.into_iter().map(NodeId).collect(), self.f)?)
    }

    pub fn directory(&self) -> KeyDirectory {
        let mut dir = KeyDirectory::new();
        for p in &self.peers {
            dir.insert(NodeId(p.id), p.public_key.parse().expect("checked on load"));
        }
        dir
    }

    pub fn peer(&self, id: NodeId) -> Option<&PeerConfig> {
        self.peers.iter().find(|p| p.id == id.0)
    }

    /// Read the signing key and check it against the peer list.
    pub fn load_keys(&self) -> Result<KeyPair, KeyError> {
        let path = &self.key_file;
        let text = fs::read_to_string(path).map_err(|source| KeyError::Read { path: path.clone(), source })?;
        let keys = KeyPair::from_seed_hex(text.trim()).map_err(|_| KeyError::Format { path: path.clone() })?;
        let configured = self.peer(self.id()).map(|p| p.public_key.trim().to_lowercase());
        if configured.as_deref() != Some(keys.public().to_hex().as_str()) {
            return Err(KeyError::Mismatch(self.node_id));
        }
        Ok(keys)
    }
}
