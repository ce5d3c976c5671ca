//! Layer and parallelism configuration, routing, and task volumes.

pub mod config;
pub mod gating;
pub mod layout;
pub mod volumes;

pub use config::{CapacityFactor, FfnType, LayerConfig, LayerSpec, ParallelConfig};
pub use gating::{ec_gate, gshard_gate, keep_top_k, sigmoid_gate, xmoe_gate, xmoe_scores, Assignment, GateOutput};
pub use layout::{i_order, order, DropReport};
pub use volumes::{capacity, derive_volumes, TaskVolumes};
