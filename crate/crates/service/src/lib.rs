//! Command-line pipeline and HTTP/WebSocket service for FDVV button models.

pub mod cli;
pub mod press;
pub mod server;
pub mod store;
