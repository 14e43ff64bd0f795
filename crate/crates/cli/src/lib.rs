//! Configuration ingestion and the validate / bounds / solve / verify
//! workflows behind the `qbsde` binary.

pub mod commands;
pub mod config;
pub mod verify;
