//! Task graphs of one MoE layer under each schedule style, and of a
//! multi-layer backward pass.

use super::engine::simulate;
use super::task::{Dag, Resource, Style, TaskId, TaskKind};
use crate::error::{Error, Result};
use crate::pipeline::{ChunkTimes, PhaseInputs};

/// Task ids of one built MoE layer.
#[derive(Debug, Clone, Default)]
pub struct LayerHandles {
    pub dispatch: Vec<TaskId>,
    pub allgather: Vec<TaskId>,
    pub expert: Vec<TaskId>,
    pub reducescatter: Vec<TaskId>,
    pub combine: Vec<TaskId>,
    pub gar: Vec<TaskId>,
    /// Last task in the inter-link issue order.
    pub last_inter: TaskId,
    /// Task whose completion ends the layer.
    pub exit: TaskId,
}

/// Appends one MoE layer of `r` chunks.
///
/// `entry` must finish before the first dispatch. In the two overlapped styles each
/// resource gets a fixed issue order: dispatches, then the AllReduce tasks,
/// then combines on the inter link; all AllGathers before any ReduceScatter
/// on the intra link.
pub fn push_moe_layer(
    dag: &mut Dag,
    style: Style,
    times: &ChunkTimes,
    r: u32,
    gar: &[f64],
    entry: &[TaskId],
    layer: Option<u32>,
) -> Result<LayerHandles> {
    if r == 0 {
        return Err(Error::InvalidDegree(0.0));
    }
    let first = dag.len();
    let mut h = LayerHandles::default();
    for i in 0..r {
        let d = dag.add(TaskKind::A2aDispatch, times.a2a, entry, Some(i));
        let ag = dag.add(TaskKind::Allgather, times.ag, &[d], Some(i));
        let e = dag.add(TaskKind::Expert, times.exp, &[ag], Some(i));
        let rs = dag.add(TaskKind::Reducescatter, times.rs, &[e], Some(i));
        let c = dag.add(TaskKind::A2aCombine, times.a2a, &[rs], Some(i));
        h.dispatch.push(d);
        h.allgather.push(ag);
        h.expert.push(e);
        h.reducescatter.push(rs);
        h.combine.push(c);
    }
    let last = r as usize - 1;
    match style {
        Style::Fsmoe | Style::FsmoeNoIio => {
            let mut prev = h.dispatch[last];
            for &g in gar {
                let id = dag.add(TaskKind::GradAllreduce, g, &[prev], Some(r - 1));
                h.gar.push(id);
                prev = id;
            }
            for i in 1..=last {
                dag.add_dep(h.dispatch[i], h.dispatch[i - 1]);
                dag.add_dep(h.allgather[i], h.allgather[i - 1]);
                dag.add_dep(h.expert[i], h.expert[i - 1]);
                dag.add_dep(h.reducescatter[i], h.reducescatter[i - 1]);
                dag.add_dep(h.combine[i], h.combine[i - 1]);
            }
            dag.add_dep(h.reducescatter[0], h.allgather[last]);
            dag.add_dep(h.combine[0], prev);
            h.last_inter = h.combine[last];
            h.exit = h.combine[last];
        }
        Style::Pipemoe => {
            // AllReduce only after the layer, where dense compute would run
            let mut prev = h.combine.clone();
            for &g in gar {
                let id = dag.add(TaskKind::GradAllreduce, g, &prev, None);
                h.gar.push(id);
                prev = vec![id];
            }
            h.last_inter = *prev.last().expect("at least one chunk");
            h.exit = h.last_inter;
        }
        Style::Sequential => {
            let mut order = Vec::new();
            for i in 0..=last {
                order.extend([h.dispatch[i], h.allgather[i], h.expert[i], h.reducescatter[i], h.combine[i]]);
            }
            for &g in gar {
                let id = dag.add(TaskKind::GradAllreduce, g, &[], Some(r - 1));
                h.gar.push(id);
                order.push(id);
            }
            for w in order.windows(2) {
                dag.add_dep(w[1], w[0]);
            }
            h.last_inter = *order.last().expect("at least one chunk");
            h.exit = h.last_inter;
        }
    }
    if matches!(style, Style::FsmoeNoIio | Style::Pipemoe) {
        for t in &mut dag.tasks[first..] {
            if t.resource == Resource::IntraLink {
                t.resource = Resource::InterLink;
            }
        }
    }
    for t in &mut dag.tasks[first..] {
        t.layer = layer;
    }
    Ok(h)
}

/// One MoE layer in the given style; `gar` lists the AllReduce durations
/// issued with it.
pub fn build_layer_dag(style: Style, inputs: &PhaseInputs, r: u32, gar: &[f64]) -> Result<Dag> {
    if r == 0 {
        return Err(Error::InvalidDegree(0.0));
    }
    let times = inputs.chunk_times(f64::from(r))?;
    let mut dag = Dag::new();
    push_moe_layer(&mut dag, style, &times, r, gar, &[], None)?;
    Ok(dag)
}

pub fn build_fsmoe_dag(inputs: &PhaseInputs, r: u32, gar: &[f64]) -> Result<Dag> {
    build_layer_dag(Style::Fsmoe, inputs, r, gar)
}

pub fn build_baseline_dag(style: Style, inputs: &PhaseInputs, r: u32, gar: &[f64]) -> Result<Dag> {
    build_layer_dag(style, inputs, r, gar)
}

/// Simulated makespan of the overlapped layer at every degree in `1..=r_max`;
/// returns the best, ties to the smaller degree.
pub fn brute_force_best_degree(inputs: &PhaseInputs, gar: &[f64], r_max: u32) -> Result<(u32, f64)> {
    brute_force_style(Style::Fsmoe, inputs, gar, r_max)
}

pub fn brute_force_style(style: Style, inputs: &PhaseInputs, gar: &[f64], r_max: u32) -> Result<(u32, f64)> {
    if r_max == 0 {
        return Err(Error::InvalidDegree(0.0));
    }
    let mut best = (0, f64::INFINITY);
    for r in 1..=r_max {
        let m = simulate(&build_layer_dag(style, inputs, r, gar)?)?.makespan;
        if m < best.1 {
            best = (r, m);
        }
    }
    Ok(best)
}

/// One generalized layer of a backward pass: the MoE layer followed by its
/// dense compute.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardLayer {
    pub times: ChunkTimes,
    pub r: u32,
    pub dense_ms: f64,
    /// AllReduce tasks issued inside the MoE layer.
    pub moe_gar: Vec<f64>,
    /// AllReduce tasks overlapping the dense compute.
    pub dense_gar: Vec<f64>,
}

/// A fixed-size gradient chunk issued as soon as its producer finishes,
/// with lower priority than the MoE traffic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinaChunk {
    pub producer: usize,
    pub duration: f64,
}

/// Backward pass over `layers` (in traversal order), followed by the
/// `tail` AllReduce tasks.
pub fn build_backward_model_dag(layers: &[BackwardLayer], tail: &[f64], lina: &[LinaChunk]) -> Result<Dag> {
    let mut dag = Dag::new();
    let mut entry: Vec<TaskId> = Vec::new();
    let mut last_inter: Option<TaskId> = None;
    let mut dense_ids = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        let h = push_moe_layer(&mut dag, Style::Fsmoe, &l.times, l.r, &l.moe_gar, &entry, Some(i as u32))?;
        if let Some(prev) = last_inter {
            dag.add_dep(h.dispatch[0], prev);
        }
        let dense = dag.add(TaskKind::DenseCompute, l.dense_ms, &[h.exit], None);
        dag.add_dep(dense, *h.expert.last().expect("at least one chunk"));
        let mut prev = h.last_inter;
        for &g in &l.dense_gar {
            let id = dag.add(TaskKind::GradAllreduce, g, &[prev], None);
            dag.tasks[id].layer = Some(i as u32);
            prev = id;
        }
        dag.tasks[dense].layer = Some(i as u32);
        dense_ids.push(dense);
        last_inter = Some(prev);
        entry = vec![dense];
    }
    let mut prev: Vec<TaskId> = entry.iter().copied().chain(last_inter).collect();
    for &g in tail {
        let id = dag.add(TaskKind::GradAllreduce, g, &prev, None);
        prev = vec![id];
    }
    for (k, c) in lina.iter().enumerate() {
        let dep = *dense_ids
            .get(c.producer)
            .ok_or_else(|| Error::Config(format!("chunk producer {} out of range", c.producer)))?;
        let id = dag.add(TaskKind::GradAllreduce, c.duration, &[dep], Some(k as u32));
        dag.tasks[id].priority = 1;
        dag.tasks[id].layer = Some(c.producer as u32);
    }
    Ok(dag)
}
