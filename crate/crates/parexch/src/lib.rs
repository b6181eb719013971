//! Data-parallel SGD at desk scale.
//!
//! A small training framework built around one idea: parameter exchange is
//! the interesting part of distributed SGD, so make it observable. Worlds of
//! k ranks run over an in-process backend (threads + mailboxes, for
//! deterministic tests) or a TCP backend (one process per rank), and every
//! exchange strategy is instrumented down to the payload byte.
//!
//! The pieces:
//!
//! * [`buffer`] — flat parameter vectors, binary16 conversion, slicing.
//! * [`transport`] — MPI-flavored point-to-point messaging with counters.
//! * [`collectives`] — Allreduce (AR), Alltoall-sum-Allgather (ASA) and its
//!   half-precision variant (ASA16), with exact traffic accounting.
//! * [`optim`] — momentum SGD, learning-rate schedules, SUBGD/AWAGD merge
//!   schemes.
//! * [`models`] — linear / logistic / MLP models with analytic gradients
//!   and a seeded synthetic dataset.
//! * [`data`] — binary batch files and a double-buffered loader that
//!   overlaps preprocessing with compute.
//! * [`train`] — the synchronous BSP loop and the asynchronous elastic
//!   (EASGD) loop, emitting per-iteration stats.

pub mod buffer;
pub mod collectives;
pub mod data;
pub mod error;
pub mod models;
pub mod optim;
pub mod scalar;
pub mod train;
pub mod transport;
pub mod util;

pub use buffer::{HalfBuffer, ParamBuffer, Slice};
pub use collectives::{ExchangeStrategy, Exchanger};
pub use error::{Error, Result};
pub use optim::{CombineScheme, Schedule, SgdState};
pub use scalar::Scalar;
pub use transport::{spawn_world, Communicator};
