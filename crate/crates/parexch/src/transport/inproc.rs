//! In-process backend: every rank is a thread, delivery is a mailbox push.
//!
//! Deterministic for lockstep traffic patterns (each rank's message sequence
//! is fixed, so receives resolve identically run to run), which is what the
//! synchronous trainer relies on for reproducibility tests.

use super::{BackendKind, Channel, Communicator, Mailbox};
use crate::error::{Error, Result};
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Duration;

struct InProcChannel {
    rank: usize,
    boxes: Vec<Arc<Mailbox>>,
    closed: bool,
}

impl Channel for InProcChannel {
    fn post(&mut self, to: usize, bytes: Vec<u8>) -> Result<()> {
        if self.closed {
            return Err(Error::PeerClosed { peer: to });
        }
        self.boxes[to].push(self.rank, bytes);
        Ok(())
    }

    fn take(&mut self, from: usize, timeout: Duration) -> Result<Vec<u8>> {
        self.boxes[self.rank].take_from(from, timeout)
    }

    fn take_any(&mut self, timeout: Duration) -> Result<(usize, Vec<u8>)> {
        self.boxes[self.rank].take_any(timeout)
    }

    fn shutdown(&mut self) {
        if !self.closed {
            self.closed = true;
            for (r, mb) in self.boxes.iter().enumerate() {
                if r != self.rank {
                    mb.close(self.rank);
                }
            }
        }
    }
}

/// Build k connected communicators sharing in-memory mailboxes.
pub fn inproc_world(world_size: usize) -> Vec<Communicator> {
    assert!(world_size >= 1);
    let boxes: Vec<Arc<Mailbox>> = (0..world_size).map(|_| Mailbox::new(world_size)).collect();
    (0..world_size)
        .map(|rank| {
            Communicator::from_channel(
                rank,
                world_size,
                BackendKind::InProc,
                Box::new(InProcChannel {
                    rank,
                    boxes: boxes.clone(),
                    closed: false,
                }),
            )
        })
        .collect()
}

/// Run `entry` once per rank, each in its own thread, and collect the
/// results in rank order. A panic or error in any rank is propagated as the
/// world's failure (lowest failing rank wins, for determinism).
pub fn spawn_world<R, F>(world_size: usize, entry: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(Communicator) -> Result<R> + Send + Sync,
{
    let comms = inproc_world(world_size);
    let entry = &entry;
    let mut results: Vec<Result<R>> = Vec::with_capacity(world_size);

    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(world_size);
        for comm in comms {
            let rank = comm.rank();
            let handle = scope.spawn(move || {
                let outcome = panic::catch_unwind(AssertUnwindSafe(|| entry(comm)));
                match outcome {
                    Ok(res) => res,
                    Err(payload) => Err(Error::WorkerPanic {
                        rank,
                        message: panic_message(payload),
                    }),
                }
            });
            handles.push(handle);
        }
        for handle in handles {
            // Join never panics: worker panics were caught above.
            results.push(handle.join().expect("worker thread poisoned"));
        }
    });

    let mut out = Vec::with_capacity(world_size);
    for res in results {
        out.push(res?);
    }
    Ok(out)
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic".to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loopback_send_recv() {
        spawn_world(2, |mut comm| {
            if comm.rank() == 0 {
                comm.send(1, &[1, 2, 3, 4, 5, 6, 7, 8])?;
            } else {
                let got = comm.recv(0)?;
                assert_eq!(got, vec![1, 2, 3, 4, 5, 6, 7, 8]);
            }
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn fifo_order_per_pair() {
        spawn_world(2, |mut comm| {
            if comm.rank() == 0 {
                comm.send(1, b"first")?;
                comm.send(1, b"second")?;
            } else {
                assert_eq!(comm.recv(0)?, b"first");
                assert_eq!(comm.recv(0)?, b"second");
            }
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn send_to_self_rejected() {
        spawn_world(2, |mut comm| {
            let err = comm.send(comm.rank(), b"x").unwrap_err();
            assert!(matches!(err, Error::InvalidRank { .. }));
            let err = comm.sendrecv(comm.rank(), b"x").unwrap_err();
            assert!(matches!(err, Error::InvalidRank { .. }));
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn sendrecv_pairwise() {
        spawn_world(2, |mut comm| {
            let out = if comm.rank() == 0 { b"a" } else { b"b" };
            let got = comm.sendrecv(1 - comm.rank(), out)?;
            let want = if comm.rank() == 0 { b"b" } else { b"a" };
            assert_eq!(got, want);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn barrier_single_rank_is_noop() {
        spawn_world(1, |mut comm| comm.barrier()).unwrap();
    }

    #[test]
    fn worker_panic_is_attributed() {
        let err = spawn_world(3, |comm| {
            if comm.rank() == 1 {
                panic!("boom at rank 1");
            }
            Ok::<_, Error>(comm.rank())
        })
        .unwrap_err();
        match err {
            Error::WorkerPanic { rank, message } => {
                assert_eq!(rank, 1);
                assert!(message.contains("boom"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn recv_times_out() {
        spawn_world(2, |mut comm| {
            if comm.rank() == 0 {
                comm.set_timeout(Duration::from_millis(50));
                let err = comm.recv(1).unwrap_err();
                assert!(matches!(
                    err,
                    Error::Timeout { peer: 1, .. } | Error::PeerClosed { peer: 1 }
                ));
            }
            Ok(())
        })
        .unwrap();
    }
}
