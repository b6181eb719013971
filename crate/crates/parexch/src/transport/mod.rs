//! Message-passing substrate standing in for MPI.
//!
//! Two backends, one contract: `inproc` runs every rank as a thread in this
//! process and delivers through in-memory mailboxes; `tcp` runs one rank per
//! OS process over length-prefixed frames (u32-LE length then payload). Both
//! give per-(sender,receiver) FIFO ordering, blocking receives with a
//! configurable timeout, and per-peer byte counters.

use crate::error::{Error, Result};
use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

pub mod inproc;
pub mod tcp;

pub use inproc::{inproc_world, spawn_world};

/// Default receive/connect timeout. MPI would block forever; tests need
/// bounded failure.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    InProc,
    Tcp,
}

/// Intra-node control traffic between a training context and its loader.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlMessage {
    Mode(ModeMsg),
    Filename(String),
    Notify,
}

/// The mode word of the loader protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeMsg {
    Train,
    Val,
    Stop,
}

/// Per-peer traffic counters, updated by message payload length.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PeerCounters {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub messages_sent: u64,
    pub messages_received: u64,
}

/// One rank's inbound queue. Messages from all peers land here in arrival
/// order; per-sender order is preserved because each sender enqueues
/// sequentially.
pub(crate) struct Mailbox {
    state: Mutex<MailboxState>,
    cond: Condvar,
}

struct MailboxState {
    queue: VecDeque<(usize, Vec<u8>)>,
    closed: Vec<bool>,
}

impl Mailbox {
    pub(crate) fn new(world_size: usize) -> Arc<Mailbox> {
        Arc::new(Mailbox {
            state: Mutex::new(MailboxState {
                queue: VecDeque::new(),
                closed: vec![false; world_size],
            }),
            cond: Condvar::new(),
        })
    }

    pub(crate) fn push(&self, from: usize, bytes: Vec<u8>) {
        let mut st = self.state.lock().unwrap();
        st.queue.push_back((from, bytes));
        self.cond.notify_all();
    }

    pub(crate) fn close(&self, from: usize) {
        let mut st = self.state.lock().unwrap();
        st.closed[from] = true;
        self.cond.notify_all();
    }

    /// Next message from a specific peer, skipping over (but not consuming)
    /// messages from other peers.
    pub(crate) fn take_from(&self, from: usize, timeout: Duration) -> Result<Vec<u8>> {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(pos) = st.queue.iter().position(|(s, _)| *s == from) {
                return Ok(st.queue.remove(pos).unwrap().1);
            }
            if st.closed[from] {
                return Err(Error::PeerClosed { peer: from });
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Timeout {
                    peer: from,
                    after: timeout,
                });
            }
            let (guard, _) = self.cond.wait_timeout(st, deadline - now).unwrap();
            st = guard;
        }
    }

    /// Next message from whichever peer arrived first.
    pub(crate) fn take_any(&self, timeout: Duration) -> Result<(usize, Vec<u8>)> {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(msg) = st.queue.pop_front() {
                return Ok(msg);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::TimeoutAny { after: timeout });
            }
            let (guard, _) = self.cond.wait_timeout(st, deadline - now).unwrap();
            st = guard;
        }
    }
}

/// Backend plumbing behind a `Communicator`.
pub(crate) trait Channel: Send {
    fn post(&mut self, to: usize, bytes: Vec<u8>) -> Result<()>;
    fn take(&mut self, from: usize, timeout: Duration) -> Result<Vec<u8>>;
    fn take_any(&mut self, timeout: Duration) -> Result<(usize, Vec<u8>)>;
    /// Flush and close outgoing links. Called once when the communicator
    /// finishes; further sends fail.
    fn shutdown(&mut self) {}
}

/// One rank's handle on the world: identity, counters and the message
/// channel. Owned by exactly one rank context; never shared.
pub struct Communicator {
    rank: usize,
    world_size: usize,
    backend: BackendKind,
    timeout: Duration,
    counters: Vec<PeerCounters>,
    channel: Box<dyn Channel>,
}

impl Communicator {
    pub(crate) fn from_channel(
        rank: usize,
        world_size: usize,
        backend: BackendKind,
        channel: Box<dyn Channel>,
    ) -> Communicator {
        Communicator {
            rank,
            world_size,
            backend,
            timeout: DEFAULT_TIMEOUT,
            counters: vec![PeerCounters::default(); world_size],
            channel,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn backend(&self) -> BackendKind {
        self.backend
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    pub fn counters(&self) -> &[PeerCounters] {
        &self.counters
    }

    pub fn total_bytes_sent(&self) -> u64 {
        self.counters.iter().map(|c| c.bytes_sent).sum()
    }

    pub fn total_bytes_received(&self) -> u64 {
        self.counters.iter().map(|c| c.bytes_received).sum()
    }

    pub fn total_messages(&self) -> u64 {
        self.counters
            .iter()
            .map(|c| c.messages_sent + c.messages_received)
            .sum()
    }

    fn check_peer(&self, peer: usize) -> Result<()> {
        if peer == self.rank || peer >= self.world_size {
            return Err(Error::InvalidRank {
                rank: peer,
                world: self.world_size,
            });
        }
        Ok(())
    }

    /// Enqueue a message for `peer`. Never blocks on the peer's progress.
    pub fn send(&mut self, peer: usize, payload: &[u8]) -> Result<()> {
        self.check_peer(peer)?;
        self.channel.post(peer, payload.to_vec())?;
        let c = &mut self.counters[peer];
        c.bytes_sent += payload.len() as u64;
        c.messages_sent += 1;
        Ok(())
    }

    /// Block until the next message from `peer` arrives, in send order.
    pub fn recv(&mut self, peer: usize) -> Result<Vec<u8>> {
        self.check_peer(peer)?;
        let bytes = self.channel.take(peer, self.timeout)?;
        let c = &mut self.counters[peer];
        c.bytes_received += bytes.len() as u64;
        c.messages_received += 1;
        Ok(bytes)
    }

    /// Block until a message from any peer arrives; returns (peer, payload)
    /// in arrival order.
    pub fn recv_any(&mut self) -> Result<(usize, Vec<u8>)> {
        let (peer, bytes) = self.channel.take_any(self.timeout)?;
        let c = &mut self.counters[peer];
        c.bytes_received += bytes.len() as u64;
        c.messages_received += 1;
        Ok((peer, bytes))
    }

    /// Paired exchange with one peer: send `out`, receive the peer's
    /// counterpart. Sends never block, so any consistent pairing completes
    /// regardless of call order.
    pub fn sendrecv(&mut self, peer: usize, out: &[u8]) -> Result<Vec<u8>> {
        self.send(peer, out)?;
        self.recv(peer)
    }

    /// Centralized barrier: every rank sends an arrive token to rank 0,
    /// rank 0 replies with a release token — 2(k-1) messages per barrier.
    /// No rank returns until all have entered.
    pub fn barrier(&mut self) -> Result<()> {
        if self.world_size == 1 {
            return Ok(());
        }
        if self.rank == 0 {
            for peer in 1..self.world_size {
                let _ = self.recv(peer)?;
            }
            for peer in 1..self.world_size {
                self.send(peer, b"R")?;
            }
        } else {
            self.send(0, b"B")?;
            let _ = self.recv(0)?;
        }
        Ok(())
    }

    /// Flush and close outgoing links.
    pub fn shutdown(&mut self) {
        self.channel.shutdown();
    }
}

impl Drop for Communicator {
    fn drop(&mut self) {
        self.channel.shutdown();
    }
}
