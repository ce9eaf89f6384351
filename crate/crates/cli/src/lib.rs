//! Command-line front end and HTTP server for the `concept-search` engine.

pub mod render;
pub mod server;
