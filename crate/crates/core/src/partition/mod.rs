//! Two-step gradient partitioning across generalized layers.
//!
//! Layers are indexed in backward traversal order. The gradient of layer
//! `i - 1` exists once that layer finishes, so it can overlap with layer `i`
//! at the earliest. Step 1 fills each layer's idle inter-link windows; step 2
//! spreads what is left over the MoE layers by differential evolution.

pub mod de;

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use self::de::DeParams;
use crate::cost_models::{ClusterProfile, LinearCostModel};
use crate::error::{Error, Result};
use crate::pipeline::{find_optimal_pipeline_degree, plan_layer, PhaseInputs};
use crate::sim::{build_backward_model_dag, simulate, BackwardLayer, LinaChunk};
use crate::workload::TaskVolumes;

/// Absolute slack for window-fill comparisons, in ms.
pub const WINDOW_EPS: f64 = 1e-9;

/// Default fixed chunk of the chunked-AllReduce baseline: 30 MB of 4-byte elements.
pub const LINA_CHUNK_ELEMENTS: u64 = 30 * 1024 * 1024 / 4;

/// An MoE layer plus the dense operations before the next MoE layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedLayer {
    pub index: usize,
    pub volumes: TaskVolumes,
    /// Dense time during which the inter link is free.
    pub t_olp_dense: f64,
    pub n_grad: u64,
}

impl GeneralizedLayer {
    pub fn backward_inputs(&self, profile: &ClusterProfile) -> PhaseInputs {
        PhaseInputs::backward(self.volumes, profile.clone(), 0.0)
    }
}

/// Idle inter-link time of one layer without any AllReduce in it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub t_olp_moe: f64,
    pub t_olp_dense: f64,
}

impl Window {
    pub fn total(&self) -> f64 {
        self.t_olp_moe + self.t_olp_dense
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step1 {
    /// Elements AllReduced inside each layer's windows.
    pub n_first: Vec<u64>,
    /// Part of `n_first` issued inside the MoE layer.
    pub moe_slot: Vec<u64>,
    /// Part of `n_first` issued during the dense compute.
    pub dense_slot: Vec<u64>,
    /// `n_rem[i]`: unabsorbed gradient of the producer of layer `i`'s input
    /// window, i.e. of layer `i - 1` (or the initial gradient for `i = 0`).
    pub n_rem: Vec<u64>,
    /// Gradient of the last layer, which no window follows.
    pub trailing: u64,
}

fn fits(model: &LinearCostModel, n: u64, budget: f64) -> bool {
    model.launch_time(n as f64) <= budget + WINDOW_EPS
}

fn capacity_of(model: &LinearCostModel, budget: f64) -> Result<u64> {
    let mut n = model.inverse(budget)?.floor() as u64;
    // floor of the exact inverse can still round above budget by one ulp
    while n > 0 && !fits(model, n, budget) {
        n -= 1;
    }
    Ok(n)
}

/// Greedy window filling. `grads[i]` is the gradient produced by layer `i`;
/// `initial` is gradient already waiting when layer 0 starts.
///
/// A window is used by one launch when the whole demand fits in either slot;
/// otherwise each slot takes what its own launch can carry.
pub fn step1_assign(windows: &[Window], grads: &[u64], initial: u64, ar: &LinearCostModel) -> Result<Step1> {
    if windows.len() != grads.len() {
        return Err(Error::Shape(format!("{} windows for {} layers", windows.len(), grads.len())));
    }
    let n = windows.len();
    // (producer slot, amount); producer slot p is the n_rem index it lands in
    let mut queue: VecDeque<(usize, u64)> = VecDeque::new();
    let mut out = Step1 {
        n_first: vec![0; n],
        moe_slot: vec![0; n],
        dense_slot: vec![0; n],
        n_rem: vec![0; n],
        trailing: grads.last().copied().unwrap_or(initial),
    };
    if n == 0 {
        return Ok(out);
    }
    for (i, w) in windows.iter().enumerate() {
        let incoming = if i == 0 { initial } else { grads[i - 1] };
        if incoming > 0 {
            queue.push_back((i, incoming));
        }
        let demand: u64 = queue.iter().map(|(_, a)| a).sum();
        if demand == 0 {
            continue;
        }
        let (m, d) = if fits(ar, demand, w.t_olp_moe) {
            (demand, 0)
        } else if fits(ar, demand, w.t_olp_dense) {
            (0, demand)
        } else {
            let m = capacity_of(ar, w.t_olp_moe)?.min(demand);
            let d = capacity_of(ar, w.t_olp_dense)?.min(demand - m);
            (m, d)
        };
        out.moe_slot[i] = m;
        out.dense_slot[i] = d;
        out.n_first[i] = m + d;
        let mut take = m + d;
        while take > 0 {
            let front = queue.front_mut().expect("demand covers take");
            let used = front.1.min(take);
            front.1 -= used;
            take -= used;
            if front.1 == 0 {
                queue.pop_front();
            }
        }
    }
    for (slot, amount) in queue {
        out.n_rem[slot] += amount;
    }
    Ok(out)
}

/// Remainder-placement problem of step 2.
#[derive(Debug, Clone)]
pub struct Step2Problem {
    /// Backward inputs per layer (their `t_gar` is ignored).
    pub inputs: Vec<PhaseInputs>,
    pub moe_slot: Vec<u64>,
    pub n_rem: Vec<u64>,
    pub trailing: u64,
    pub ar: LinearCostModel,
    pub r_max: u32,
}

impl Step2Problem {
    pub fn dims(&self) -> usize {
        self.inputs.len()
    }

    pub fn total_remainder(&self) -> u64 {
        self.n_rem.iter().sum()
    }

    /// Clips `x` into the availability region: each entry between 0 and
    /// what has been produced but not yet placed.
    pub fn repair(&self, x: &mut [f64]) {
        let mut available = 0.0;
        for (i, v) in x.iter_mut().enumerate() {
            available += self.n_rem[i] as f64;
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, available) };
            available -= *v;
        }
    }

    pub fn tail(&self, x: &[f64]) -> f64 {
        (self.trailing as f64 + self.total_remainder() as f64 - x.iter().sum::<f64>()).max(0.0)
    }

    /// AllReduce time inside MoE layer `i` for placement `x_i`.
    pub fn layer_gar(&self, i: usize, x_i: f64) -> f64 {
        self.ar.launch_time(self.moe_slot[i] as f64) + self.ar.launch_time(x_i)
    }

    /// Predicted MoE time summed over layers plus the trailing AllReduce.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut total = self.ar.launch_time(self.tail(x));
        for (i, inputs) in self.inputs.iter().enumerate() {
            let g = self.layer_gar(i, x[i]);
            total += match find_optimal_pipeline_degree(&inputs.with_t_gar(g), self.r_max) {
                Ok(c) => c.t_moe,
                Err(_) => f64::INFINITY,
            };
        }
        total
    }

    /// Every remainder placed in the layer right after its producer.
    pub fn proportional(&self) -> Vec<f64> {
        self.n_rem.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step2 {
    pub x_g: Vec<u64>,
    pub objective: f64,
}

pub fn step2_optimize(problem: &Step2Problem, de: &DeParams) -> Result<Step2> {
    de.validate()?;
    let dims = problem.dims();
    if dims == 0 {
        return Ok(Step2 { x_g: Vec::new(), objective: problem.objective(&[]) });
    }
    let zeros = vec![0.0; dims];
    let prop = problem.proportional();
    let mut candidates = vec![zeros.clone(), prop.clone()];
    if problem.total_remainder() > 0 {
        let total = problem.total_remainder() as f64;
        let (best, _) = de::minimize(
            dims,
            vec![zeros, prop],
            |rng| (0..dims).map(|_| rng.gen_range(0.0..=total)).collect(),
            |x| problem.repair(x),
            |x| problem.objective(x),
            de,
        )?;
        candidates.insert(0, best);
    }
    let mut chosen: Option<(Vec<f64>, f64)> = None;
    for mut c in candidates {
        for v in c.iter_mut() {
            *v = v.floor();
        }
        problem.repair(&mut c);
        let objective = problem.objective(&c);
        if chosen.as_ref().is_none_or(|b| objective < b.1) {
            chosen = Some((c, objective));
        }
    }
    let (x, objective) = polish(problem, chosen.expect("at least two candidates"));
    Ok(Step2 { x_g: x.iter().map(|v| *v as u64).collect(), objective })
}

/// Integer coordinate descent with halving steps; lands DE results exactly
/// on the knees of the piecewise-linear objective.
fn polish(problem: &Step2Problem, (mut x, mut best): (Vec<f64>, f64)) -> (Vec<f64>, f64) {
    let total = problem.total_remainder();
    if total == 0 {
        return (x, best);
    }
    let mut step = (total as f64).log2().ceil().exp2();
    while step >= 1.0 {
        let mut improved = true;
        while improved {
            improved = false;
            for i in 0..x.len() {
                for dir in [1.0, -1.0] {
                    let mut trial = x.clone();
                    trial[i] += dir * step;
                    problem.repair(&mut trial);
                    if trial == x {
                        continue;
                    }
                    let f = problem.objective(&trial);
                    if f < best {
                        x = trial;
                        best = f;
                        improved = true;
                    }
                }
            }
        }
        step /= 2.0;
    }
    (x, best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPartition {
    pub index: usize,
    pub n_grad: u64,
    pub n_first: u64,
    pub moe_slot: u64,
    pub dense_slot: u64,
    pub n_rem: u64,
    pub x_g: u64,
    /// AllReduce time inside the MoE layer, fed to the backward plan.
    pub t_gar: f64,
    pub t_olp_moe: f64,
    pub t_olp_dense: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub layers: Vec<LayerPartition>,
    pub unassigned_tail: u64,
    /// Predicted MoE backward time plus trailing AllReduce, in ms.
    pub objective_ms: f64,
    pub step2_used: bool,
}

impl PartitionPlan {
    pub fn total_assigned(&self) -> u64 {
        self.layers.iter().map(|l| l.n_first + l.x_g).sum::<u64>() + self.unassigned_tail
    }

    pub fn check(&self, layers: &[GeneralizedLayer], ar: &LinearCostModel) -> Result<()> {
        let total: u64 = layers.iter().map(|l| l.n_grad).sum();
        if self.total_assigned() != total {
            return Err(Error::Contract(format!("partition covers {} of {total} elements", self.total_assigned())));
        }
        for l in &self.layers {
            let window = l.t_olp_moe + l.t_olp_dense;
            if ar.launch_time(l.n_first as f64) > window + WINDOW_EPS {
                return Err(Error::Contract(format!("layer {} window overfilled", l.index)));
            }
        }
        Ok(())
    }
}

/// Windows of every layer from its backward plan with no AllReduce.
pub fn layer_windows(layers: &[GeneralizedLayer], profile: &ClusterProfile, r_max: u32) -> Result<Vec<Window>> {
    layers
        .iter()
        .map(|l| {
            let plan = plan_layer(&l.volumes, profile, 0.0, r_max)?;
            Ok(Window { t_olp_moe: plan.t_olp_moe_bwd, t_olp_dense: l.t_olp_dense })
        })
        .collect()
}

pub fn build_partition_plan(
    layers: &[GeneralizedLayer],
    profile: &ClusterProfile,
    de: &DeParams,
    r_max: u32,
) -> Result<PartitionPlan> {
    de.validate()?;
    for l in layers {
        l.volumes.validate()?;
        if !(l.t_olp_dense >= 0.0 && l.t_olp_dense.is_finite()) {
            return Err(Error::Config(format!("layer {}: t_olp_dense must be >= 0", l.index)));
        }
    }
    let windows = layer_windows(layers, profile, r_max)?;
    let grads: Vec<u64> = layers.iter().map(|l| l.n_grad).collect();
    let s1 = step1_assign(&windows, &grads, 0, &profile.ar)?;
    let problem = Step2Problem {
        inputs: layers.iter().map(|l| l.backward_inputs(profile)).collect(),
        moe_slot: s1.moe_slot.clone(),
        n_rem: s1.n_rem.clone(),
        trailing: s1.trailing,
        ar: profile.ar,
        r_max,
    };
    let step2_used = problem.total_remainder() > 0;
    let s2 = if step2_used {
        step2_optimize(&problem, de)?
    } else {
        let x = vec![0.0; layers.len()];
        Step2 { x_g: vec![0; layers.len()], objective: problem.objective(&x) }
    };
    let x: Vec<f64> = s2.x_g.iter().map(|v| *v as f64).collect();
    let plan = PartitionPlan {
        layers: layers
            .iter()
            .enumerate()
            .map(|(i, l)| LayerPartition {
                index: l.index,
                n_grad: l.n_grad,
                n_first: s1.n_first[i],
                moe_slot: s1.moe_slot[i],
                dense_slot: s1.dense_slot[i],
                n_rem: s1.n_rem[i],
                x_g: s2.x_g[i],
                t_gar: problem.layer_gar(i, x[i]),
                t_olp_moe: windows[i].t_olp_moe,
                t_olp_dense: windows[i].t_olp_dense,
            })
            .collect(),
        unassigned_tail: problem.tail(&x) as u64,
        objective_ms: s2.objective,
        step2_used,
    };
    plan.check(layers, &profile.ar)?;
    Ok(plan)
}

/// How gradients are AllReduced in a simulated backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradStrategy {
    /// Every gradient AllReduced after the last layer.
    NoOverlap,
    /// Each gradient in one launch during the next layer's dense compute.
    NoPartition,
    /// Fixed-size chunks issued as soon as they exist, at low priority.
    FixedChunks { elements: u64 },
}

fn layer_at(l: &GeneralizedLayer, profile: &ClusterProfile, t_gar: f64, r_max: u32) -> Result<BackwardLayer> {
    let inputs = PhaseInputs::backward(l.volumes, profile.clone(), t_gar);
    let r = find_optimal_pipeline_degree(&inputs, r_max)?.r;
    Ok(BackwardLayer {
        times: inputs.chunk_times(f64::from(r))?,
        r,
        dense_ms: l.t_olp_dense,
        moe_gar: Vec::new(),
        dense_gar: Vec::new(),
    })
}

fn launches(ar: &LinearCostModel, sizes: &[u64]) -> Vec<f64> {
    sizes.iter().filter(|n| **n > 0).map(|n| ar.predict(*n as f64)).collect()
}

/// Simulated backward makespan under a partition plan.
pub fn simulate_plan(
    layers: &[GeneralizedLayer],
    plan: &PartitionPlan,
    profile: &ClusterProfile,
    r_max: u32,
) -> Result<f64> {
    let ar = &profile.ar;
    let mut sched = Vec::with_capacity(layers.len());
    for (l, p) in layers.iter().zip(&plan.layers) {
        let mut b = layer_at(l, profile, p.t_gar, r_max)?;
        b.moe_gar = launches(ar, &[p.moe_slot, p.x_g]);
        b.dense_gar = launches(ar, &[p.dense_slot]);
        sched.push(b);
    }
    let dag = build_backward_model_dag(&sched, &launches(ar, &[plan.unassigned_tail]), &[])?;
    Ok(simulate(&dag)?.makespan)
}

/// Simulated backward makespan under a baseline strategy.
pub fn simulate_strategy(
    layers: &[GeneralizedLayer],
    strategy: GradStrategy,
    profile: &ClusterProfile,
    r_max: u32,
) -> Result<f64> {
    let ar = &profile.ar;
    let mut sched: Vec<BackwardLayer> =
        layers.iter().map(|l| layer_at(l, profile, 0.0, r_max)).collect::<Result<_>>()?;
    let grads: Vec<u64> = layers.iter().map(|l| l.n_grad).collect();
    let mut tail = Vec::new();
    let mut lina = Vec::new();
    match strategy {
        GradStrategy::NoOverlap => tail = launches(ar, &[grads.iter().sum()]),
        GradStrategy::NoPartition => {
            for i in 1..sched.len() {
                sched[i].dense_gar = launches(ar, &[grads[i - 1]]);
            }
            tail = launches(ar, &grads[grads.len().saturating_sub(1)..]);
        }
        GradStrategy::FixedChunks { elements } => {
            if elements == 0 {
                return Err(Error::Config("chunk size must be >= 1 element".into()));
            }
            for (p, &g) in grads.iter().enumerate() {
                let mut left = g;
                while left > 0 {
                    let c = left.min(elements);
                    lina.push(LinaChunk { producer: p, duration: ar.predict(c as f64) });
                    left -= c;
                }
            }
        }
    }
    let dag = build_backward_model_dag(&sched, &tail, &lina)?;
    Ok(simulate(&dag)?.makespan)
}
