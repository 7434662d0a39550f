//! HTTP/1.1 + JSON transport for the MedLog collector: an axum server over
//! [`medlog::collector::Collector`] and a blocking client that also serves
//! as the spool's delivery transport.

mod client;
mod server;

pub use client::{Client, ClientError};
pub use server::{ingest_status_code, router, run_until_signal, serve, spawn, ServerConfig, ServerHandle, PATHS};

/// The interface description shipped with the crate.
pub const OPENAPI: &str = include_str!("../openapi.json");
