//! Webhook-driven per-branch build, deploy and test environments.

pub mod app;
pub mod backend;
pub mod cli;
pub mod config;
pub mod costmodel;
pub mod engine;
pub mod gateway;
pub mod notifier;
pub mod portal;
pub mod reporting;
pub mod scenario;
pub mod workspace;
