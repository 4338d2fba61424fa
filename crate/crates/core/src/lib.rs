//! Deterministic simulator for proxy-guided federated semi-supervised
//! learning: indecisive-categories proxy learning on clients, global proxy
//! tuning on the server, and the baselines needed to compare them.

pub mod cli;
pub mod client;
pub mod config;
pub mod datagen;
pub mod error;
pub mod federation;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod rng;
pub mod server;

pub use error::{Error, Result};
