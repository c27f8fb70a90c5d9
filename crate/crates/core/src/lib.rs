//! Split federated LoRA fine-tuning engine.
//!
//! Clients run the first blocks of a frozen network with their own low-rank
//! adapters, ship cut-layer activations to a central server that trains the
//! remaining blocks, receive activation gradients back, and periodically
//! average their adapters through a separate aggregation server. Every
//! message and every dense product is metered so runs can be compared with
//! centralized and fully federated LoRA baselines.

pub mod costs;
pub mod data;
pub mod error;
pub mod lora;
pub mod model;
pub mod numerics;
pub mod protocol;

pub use error::{Error, Result};
