//! Core of a kernel-as-a-service runtime.
//!
//! Clients describe GPU work as a [`KaasRequest`]: an ordered list of kernel
//! invocations over a table of named buffers. Buffers either live in a shared
//! [`ObjectStore`](store::ObjectStore) or are ephemeral scratch space that
//! exists only while the request runs. An [`Executor`](executor::Executor)
//! owns one simulated device and its buffer cache, resolves a request's
//! buffers, runs the invocations on a [`Backend`](backend::Backend) and writes
//! outputs back. A [`Router`](router::Router) places requests on executors,
//! preferring those that already hold the request's constant inputs.
//!
//! The crate is `no_std` and only needs `alloc`; IO, transports and file
//! formats live in the companion `kaas` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod backend;
pub mod clock;
pub mod executor;
pub mod protocol;
pub mod router;
pub mod store;

pub use backend::{Backend, BackendError, Kernel, KernelRegistry, SimBackend, TimingModel};
pub use clock::{SimDuration, VirtualClock};
pub use executor::{DeviceCache, ExecError, Executor, ExecutorConfig};
pub use protocol::{
    BufferArg, Direction, ErrorKind, IoStats, KaasRequest, KaasResponse, KernelInvocation,
    LaunchDims, ScalarLiteral, Status, Violation,
};
pub use router::{CacheDigest, RouteError, Router, RoutingPolicy};
pub use store::{ObjectStore, StoreError, StoreKey};
