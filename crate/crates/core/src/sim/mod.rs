//! Deterministic discrete-event simulation of schedule task graphs.

pub mod builders;
pub mod engine;
pub mod task;
pub mod trace;

pub use builders::{
    brute_force_best_degree, brute_force_style, build_backward_model_dag, build_baseline_dag, build_fsmoe_dag,
    build_layer_dag, push_moe_layer, BackwardLayer, LayerHandles, LinaChunk,
};
pub use engine::{idle_within_moe, simulate, Timeline};
pub use task::{Dag, Resource, Style, Task, TaskId, TaskKind};
pub use trace::{trace_events, validate_trace, TraceEvent};
