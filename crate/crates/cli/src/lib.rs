//! Command implementations and the HTTP service behind the `cpad` binary.

pub mod commands;
pub mod service;
