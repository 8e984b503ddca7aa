//! Network service for exo-core sessions: a JSON-over-WebSocket protocol
//! for console clients, a transport-free session core, and the `exo` CLI.

pub mod error;
pub mod server;
pub mod session;
pub mod settings;
pub mod wire;

pub use error::{Result, ServiceError};
pub use session::{ClientId, Outgoing, ServiceCore, SessionSetup};
pub use wire::{Body, WireMessage, WIRE_SCHEMA};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/wire-protocol.md")]
    mod wire_protocol {}
}
