//! Bounded visual memory for adapter-mode sessions.
//!
//! The bank stores whole per-frame token blocks and evicts the oldest blocks
//! first when a new block would exceed the token capacity. Every accepted
//! write is kept in an append-only history, so a reader can ask for the bank
//! contents as of any past time even after later frames have already mutated
//! the live state.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::{memory_cost, ModelProfile};
use crate::time::Timestamp;

/// Harness-visible descriptor of one encoded frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBlock {
    pub frame_id: u64,
    pub token_count: u64,
    pub t_ready: Timestamp,
    pub handle: String,
}

impl TokenBlock {
    pub fn new(frame_id: u64, token_count: u64, t_ready: Timestamp) -> Self {
        TokenBlock {
            frame_id,
            token_count,
            t_ready,
            handle: String::new(),
        }
    }

    pub fn with_handle(mut self, handle: impl Into<String>) -> Self {
        self.handle = handle.into();
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BankError {
    #[error("frame {frame_id} written after frame {last}; writes must arrive in frame order")]
    OutOfOrder { frame_id: u64, last: u64 },
    #[error("frame {frame_id} ready at {t_ready} precedes the previous write at {last}")]
    NotReadyOrdered {
        frame_id: u64,
        t_ready: Timestamp,
        last: Timestamp,
    },
    #[error("frame {frame_id} has {token_count} tokens but the bank holds at most {capacity}")]
    OversizeBlock {
        frame_id: u64,
        token_count: u64,
        capacity: u64,
    },
    #[error("frame {frame_id} has zero tokens")]
    EmptyBlock { frame_id: u64 },
}

/// Decides which resident blocks leave to make room for an incoming one.
/// Returns how many of the oldest blocks to drop.
pub trait EvictionPolicy: Send {
    fn evict_count(
        &self,
        resident: &VecDeque<TokenBlock>,
        used: u64,
        incoming: u64,
        capacity: u64,
    ) -> usize;
}

/// Drops whole blocks, oldest first, until the incoming block fits.
#[derive(Debug, Clone, Copy, Default)]
pub struct Fifo;

impl EvictionPolicy for Fifo {
    fn evict_count(
        &self,
        resident: &VecDeque<TokenBlock>,
        used: u64,
        incoming: u64,
        capacity: u64,
    ) -> usize {
        let mut total = used;
        let mut n = 0;
        for block in resident {
            if total + incoming <= capacity {
                break;
            }
            total -= block.token_count;
            n += 1;
        }
        n
    }
}

/// Result of one accepted write.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteOutcome {
    pub evicted: Vec<u64>,
}

#[derive(Debug)]
pub struct MemoryBank<P = Fifo> {
    capacity_tokens: u64,
    policy: P,
    resident: VecDeque<TokenBlock>,
    total_tokens: u64,
    // Accepted writes in order, with prefix sums of their token counts for
    // historical lookups. `prefix[k]` is the token sum of `history[..k]`.
    history: Vec<TokenBlock>,
    prefix: Vec<u64>,
}

impl MemoryBank<Fifo> {
    pub fn new(capacity_tokens: u64) -> Self {
        Self::with_policy(capacity_tokens, Fifo)
    }
}

impl<P: EvictionPolicy> MemoryBank<P> {
    pub fn with_policy(capacity_tokens: u64, policy: P) -> Self {
        MemoryBank {
            capacity_tokens,
            policy,
            resident: VecDeque::new(),
            total_tokens: 0,
            history: Vec::new(),
            prefix: vec![0],
        }
    }

    pub fn capacity_tokens(&self) -> u64 {
        self.capacity_tokens
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    pub fn blocks(&self) -> impl Iterator<Item = &TokenBlock> {
        self.resident.iter()
    }

    pub fn len(&self) -> usize {
        self.resident.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resident.is_empty()
    }

    /// Appends `block`, evicting the oldest blocks as needed.
    ///
    /// A block larger than the whole capacity is rejected and the bank is
    /// left untouched.
    pub fn write(&mut self, block: TokenBlock) -> Result<WriteOutcome, BankError> {
        if block.token_count == 0 {
            return Err(BankError::EmptyBlock {
                frame_id: block.frame_id,
            });
        }
        if let Some(last) = self.history.last() {
            if block.frame_id <= last.frame_id {
                return Err(BankError::OutOfOrder {
                    frame_id: block.frame_id,
                    last: last.frame_id,
                });
            }
            if block.t_ready < last.t_ready {
                return Err(BankError::NotReadyOrdered {
                    frame_id: block.frame_id,
                    t_ready: block.t_ready,
                    last: last.t_ready,
                });
            }
        }
        if block.token_count > self.capacity_tokens {
            return Err(BankError::OversizeBlock {
                frame_id: block.frame_id,
                token_count: block.token_count,
                capacity: self.capacity_tokens,
            });
        }

        let n = self.policy.evict_count(
            &self.resident,
            self.total_tokens,
            block.token_count,
            self.capacity_tokens,
        );
        let evicted: Vec<u64> = self
            .resident
            .drain(..n)
            .map(|b| {
                self.total_tokens -= b.token_count;
                b.frame_id
            })
            .collect();
        debug_assert!(self.total_tokens + block.token_count <= self.capacity_tokens);

        self.total_tokens += block.token_count;
        self.prefix
            .push(self.prefix.last().copied().unwrap_or(0) + block.token_count);
        self.history.push(block.clone());
        self.resident.push_back(block);
        Ok(WriteOutcome { evicted })
    }

    /// Blocks resident at time `t`: only writes with `t_ready <= t` are
    /// visible, and evictions caused by later writes have not happened yet.
    ///
    /// FIFO residency after `k` writes is the longest suffix of those writes
    /// that fits in the capacity, so this is two binary searches over the
    /// history.
    pub fn snapshot(&self, t: Timestamp) -> &[TokenBlock] {
        let k = self.history.partition_point(|b| b.t_ready <= t);
        let end_sum = self.prefix[k];
        let start = self.prefix[..=k].partition_point(|&s| end_sum - s > self.capacity_tokens);
        &self.history[start..k]
    }

    pub fn usage(&self, profile: &ModelProfile) -> (u64, u64) {
        (self.total_tokens, memory_cost(self.total_tokens, profile))
    }
}
