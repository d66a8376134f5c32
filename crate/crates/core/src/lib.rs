//! Deterministic simulator of decentralized learning under targeted Sybil
//! poisoning, with the SybilWall defense and baseline aggregation rules.

pub mod aggregation;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod gossip;
pub mod numerics;
pub mod rng;
pub mod topology;

pub use error::{Error, Result};
