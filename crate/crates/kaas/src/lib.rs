//! Kernel-as-a-service: HTTP server, object stores, JSON codec and the
//! benchmark harness, built on [`kaas_core`].

pub mod bench;
pub mod codec;
pub mod config;
pub mod http;
pub mod service;
pub mod store;
pub mod workload;
