//! Live sessions: a fixed-rate host that accepts driver commands and label
//! presses over TCP and streams telemetry back, plus a scripted client.

pub mod client;
pub mod server;
pub mod wire;

pub use client::{run_scripted_client, ClientOptions, ClientReport};
pub use server::{spawn, Server, SessionOptions, SessionReport, SessionStats, DEFAULT_PORT};
pub use wire::{ConfigFrame, Cue, ErrorFrame, FlowsFrame, Role, StateFrame, WireMessage, SCHEMA_VERSION};
