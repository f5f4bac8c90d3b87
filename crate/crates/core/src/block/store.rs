//! Block storage: one file per block plus a head marker.
//!
//! The head only moves forward. Blocks that arrive ahead of the head are
//! buffered until the gap closes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use super::Block;
use crate::crypto::Digest;

/// Upper bound on blocks held ahead of the head.
pub const FUTURE_BUFFER: usize = 1024;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("block {number} does not hash to its recorded hash")]
    HashMismatch { number: u64 },
    #[error("block {number} does not link to the stored predecessor")]
    LinkageMismatch { number: u64 },
    #[error("block {number} conflicts with the committed block at that height")]
    Conflict { number: u64 },
    #[error("block {number} is not the next block (head {head})")]
    OutOfOrder { number: u64, head: u64 },
    #[error("block directory: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainFailureKind {
    /// Contents do not hash to the block's recorded hash.
    HashMismatch,
    /// The recorded hash is not the one the successor points to.
    LinkMismatch,
    Missing,
    /// The stored bytes could not be decoded.
    Corrupt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainFailure {
    pub at: u64,
    pub kind: ChainFailureKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainVerification {
    /// Lowest block number reached with every block above it intact.
    pub verified_down_to: Option<u64>,
    pub failure: Option<ChainFailure>,
}

impl ChainVerification {
    pub fn is_intact(&self) -> bool {
        self.failure.is_none() && self.verified_down_to == Some(0)
    }
}

#[derive(Debug)]
pub struct BlockStore {
    dir: Option<PathBuf>,
    blocks: BTreeMap<u64, Block>,
    by_hash: HashMap<Digest, u64>,
    head: u64,
    future: BTreeMap<u64, Block>,
    corrupt: BTreeSet<u64>,
    serve_only: Option<RangeInclusive<u64>>,
}

impl BlockStore {
    /// A store holding only the genesis block, not backed by disk.
    pub fn in_memory() -> Self {
        let mut s = BlockStore {
            dir: None,
            blocks: BTreeMap::new(),
            by_hash: HashMap::new(),
            head: 0,
            future: BTreeMap::new(),
            corrupt: BTreeSet::new(),
            serve_only: None,
        };
        s.insert(Block::genesis());
        s
    }

    /// Open (or initialize) a store in `dir`. Undecodable block files are
    /// recorded as corrupt rather than failing the open; call
    /// [`verify_chain_backward`](Self::verify_chain_backward) to decide
    /// whether the chain is usable.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join("blocks"))?;
        let mut s = Self::in_memory();
        s.dir = Some(dir.clone());
        let head_file = dir.join("head");
        if !head_file.exists() {
            s.write_block(&Block::genesis())?;
            s.write_head()?;
            return Ok(s);
        }
        let head: u64 = fs::read_to_string(&head_file)?
            .trim()
            .parse()
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("head marker: {e}")))?;
        s.blocks.clear();
        s.by_hash.clear();
        for entry in fs::read_dir(dir.join("blocks"))? {
            let path = entry?.path();
            let Some(number) = path.file_stem().and_then(|n| n.to_str()).and_then(|n| n.parse::<u64>().ok()) else {
                continue;
            };
            match Block::from_bytes(&fs::read(&path)?) {
                Ok(b) if b.number == number => s.insert(b),
                _ => {
                    s.corrupt.insert(number);
                }
            }
        }
        s.head = head;
        Ok(s)
    }

    fn insert(&mut self, block: Block) {
        self.by_hash.insert(block.hash, block.number);
        self.blocks.insert(block.number, block);
    }

    fn block_path(dir: &Path, number: u64) -> PathBuf {
        dir.join("blocks").join(format!("{number:020}.blk"))
    }

    /// Path of the file holding block `number`, if the store is on disk.
    pub fn path_of(&self, number: u64) -> Option<PathBuf> {
        self.dir.as_deref().map(|d| Self::block_path(d, number))
    }

    fn write_block(&self, block: &Block) -> io::Result<()> {
        if let Some(dir) = &self.dir {
            fs::write(Self::block_path(dir, block.number), block.to_bytes())?;
        }
        Ok(())
    }

    fn write_head(&self) -> io::Result<()> {
        if let Some(dir) = &self.dir {
            let tmp = dir.join("head.tmp");
            fs::write(&tmp, self.head.to_string())?;
            fs::rename(tmp, dir.join("head"))?;
        }
        Ok(())
    }

    pub fn head_number(&self) -> u64 {
        self.head
    }

    pub fn head(&self) -> &Block {
        &self.blocks[&self.head]
    }

    pub fn head_hash(&self) -> Digest {
        self.blocks.get(&self.head).map(|b| b.hash).unwrap_or(Digest::ZERO)
    }

    pub fn get(&self, number: u64) -> Option<&Block> {
        self.blocks.get(&number)
    }

    pub fn get_by_hash(&self, hash: &Digest) -> Option<&Block> {
        self.by_hash.get(hash).and_then(|n| self.blocks.get(n))
    }

    pub fn contains_hash(&self, hash: &Digest) -> bool {
        self.by_hash.contains_key(hash)
    }

    /// Stored blocks from genesis to head.
    pub fn chain(&self) -> impl Iterator<Item = &Block> {
        self.blocks.range(..=self.head).map(|(_, b)| b)
    }

    pub fn buffered(&self) -> impl Iterator<Item = &Block> {
        self.future.values()
    }

    pub fn lowest_buffered(&self) -> Option<&Block> {
        self.future.values().next()
    }

    /// Restrict which block numbers this store hands out to peers. Used to
    /// stage partial donors in tests.
    pub fn restrict_serving(&mut self, range: Option<RangeInclusive<u64>>) {
        self.serve_only = range;
    }

    fn servable(&self, number: u64) -> bool {
        self.serve_only.as_ref().is_none_or(|r| r.contains(&number))
    }

    /// Append the next block produced locally.
    pub fn append(&mut self, block: Block) -> Result<(), StoreError> {
        if !block.is_sealed() {
            return Err(StoreError::HashMismatch { number: block.number });
        }
        if block.number != self.head + 1 {
            return Err(StoreError::OutOfOrder { number: block.number, head: self.head });
        }
        if block.previous_hash != self.head_hash() {
            return Err(StoreError::LinkageMismatch { number: block.number });
        }
        self.write_block(&block)?;
        self.head = block.number;
        self.insert(block);
        self.write_head()?;
        Ok(())
    }

    /// Accept a block received from a peer. Returns the blocks that became
    /// part of the chain, in order (the block itself plus any buffered
    /// successors it unblocked).
    pub fn receive_block(&mut self, block: Block) -> Result<Vec<Block>, StoreError> {
        if !block.is_sealed() {
            return Err(StoreError::HashMismatch { number: block.number });
        }
        if block.number <= self.head {
            return match self.blocks.get(&block.number) {
                Some(b) if b.hash == block.hash => Ok(Vec::new()),
                _ => Err(StoreError::Conflict { number: block.number }),
            };
        }
        if block.number > self.head + 1 {
            if self.future.len() >= FUTURE_BUFFER && !self.future.contains_key(&block.number) {
                let highest = *self.future.keys().next_back().expect("buffer is full");
                if highest < block.number {
                    return Ok(Vec::new());
                }
                self.future.remove(&highest);
            }
            self.future.insert(block.number, block);
            return Ok(Vec::new());
        }
        let mut applied = Vec::new();
        let mut next = Some(block);
        while let Some(b) = next {
            if let Err(e) = self.append(b.clone()) {
                // A buffered successor that fails linkage is discarded along
                // with everything above it.
                if !applied.is_empty() {
                    self.future.clear();
                    tracing::warn!(number = b.number, "dropping buffered blocks that fail linkage");
                    return Ok(applied);
                }
                return Err(e);
            }
            applied.push(b);
            next = self.future.remove(&(self.head + 1));
        }
        self.future.retain(|n, _| *n > self.head);
        Ok(applied)
    }

    /// Drop every stored block numbered `from` or higher, moving the head
    /// back to `from - 1`. Only for blocks the ordering service never
    /// attested, when they conflict with the consensus chain.
    pub fn discard_from(&mut self, from: u64) -> Result<(), StoreError> {
        let from = from.max(1);
        let dropped: Vec<u64> = self.blocks.range(from..).map(|(n, _)| *n).collect();
        for n in dropped {
            if let Some(b) = self.blocks.remove(&n) {
                self.by_hash.remove(&b.hash);
            }
            if let Some(dir) = &self.dir {
                let path = Self::block_path(dir, n);
                if path.exists() {
                    fs::remove_file(path)?;
                }
            }
        }
        self.corrupt.retain(|n| *n < from);
        self.future.clear();
        self.head = self.head.min(from - 1);
        self.write_head()?;
        Ok(())
    }

    /// Discard buffered blocks, e.g. after a linkage failure.
    pub fn clear_buffer(&mut self) {
        self.future.clear();
    }

    /// Walk back from the block with hash `from`, recomputing each hash and
    /// following `previous_hash` links down to genesis.
    pub fn verify_chain_backward(&self, from: &Digest) -> ChainVerification {
        let Some(&start) = self.by_hash.get(from) else {
            return ChainVerification {
                verified_down_to: None,
                failure: Some(ChainFailure { at: self.head, kind: ChainFailureKind::Missing }),
            };
        };
        self.verify_from(start, *from)
    }

    /// Verify the whole stored chain from the head block.
    pub fn verify(&self) -> ChainVerification {
        let expected = self.blocks.get(&self.head).map(|b| b.hash).unwrap_or(Digest::ZERO);
        self.verify_from(self.head, expected)
    }

    fn verify_from(&self, start: u64, mut expected: Digest) -> ChainVerification {
        let mut verified = None;
        let mut n = start;
        loop {
            let kind = if self.corrupt.contains(&n) {
                Some(ChainFailureKind::Corrupt)
            } else {
                match self.blocks.get(&n) {
                    None => Some(ChainFailureKind::Missing),
                    Some(b) if b.compute_hash() != b.hash => Some(ChainFailureKind::HashMismatch),
                    Some(b) if b.hash != expected => Some(ChainFailureKind::LinkMismatch),
                    Some(b) => {
                        expected = b.previous_hash;
                        None
                    }
                }
            };
            if let Some(kind) = kind {
                return ChainVerification { verified_down_to: verified, failure: Some(ChainFailure { at: n, kind }) };
            }
            verified = Some(n);
            if n == 0 {
                if expected != Digest::ZERO {
                    return ChainVerification {
                        verified_down_to: verified,
                        failure: Some(ChainFailure { at: 0, kind: ChainFailureKind::LinkMismatch }),
                    };
                }
                return ChainVerification { verified_down_to: verified, failure: None };
            }
            n -= 1;
        }
    }

    /// Blocks to answer a range request with: the longest contiguous run of
    /// servable blocks ending at `to`, clipped at `from`. Empty unless `to`
    /// itself is held.
    pub fn serve_range(&self, from: u64, to: u64) -> Vec<Block> {
        if to > self.head || from > to || !self.servable(to) {
            return Vec::new();
        }
        let mut out = Vec::new();
        let mut n = to;
        loop {
            match self.blocks.get(&n) {
                Some(b) if self.servable(n) && !self.corrupt.contains(&n) => out.push(b.clone()),
                _ => break,
            }
            if n == from || n == 0 {
                break;
            }
            n -= 1;
        }
        out.reverse();
        out
    }

    pub fn serve_hash(&self, hash: &Digest) -> Option<Block> {
        self.get_by_hash(hash).filter(|b| self.servable(b.number) && b.number <= self.head).cloned()
    }
}
