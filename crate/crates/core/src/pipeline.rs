//! Pipeline-degree selection for one MoE layer.
//!
//! With `a`, `g`, `s`, `e` the per-chunk times of AlltoAll, AllGather,
//! ReduceScatter and the expert, and `G` the gradient AllReduce time issued
//! inside the layer, the schedule falls into one of four cases whose
//! makespans are all of the form `a*r + b/r + c`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cost_models::{ClusterProfile, LinearCostModel};
use crate::error::{Error, Result};
use crate::workload::TaskVolumes;

pub const DEFAULT_R_MAX: u32 = 16;

/// Inputs of one phase of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseInputs {
    pub volumes: TaskVolumes,
    pub profile: ClusterProfile,
    /// Gradient AllReduce time overlapped with this layer (0 in forward).
    pub t_gar: f64,
    /// 1 in forward, 2 in backward.
    pub exp_multiplier: u32,
}

impl PhaseInputs {
    pub fn forward(volumes: TaskVolumes, profile: ClusterProfile) -> Self {
        Self { volumes, profile, t_gar: 0.0, exp_multiplier: 1 }
    }

    pub fn backward(volumes: TaskVolumes, profile: ClusterProfile, t_gar: f64) -> Self {
        Self { volumes, profile, t_gar, exp_multiplier: 2 }
    }

    pub fn with_t_gar(&self, t_gar: f64) -> Self {
        Self { t_gar, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.volumes.validate()?;
        self.profile.validate()?;
        if !(self.t_gar >= 0.0 && self.t_gar.is_finite()) {
            return Err(Error::Config(format!("t_gar must be finite and >= 0, got {}", self.t_gar)));
        }
        if !matches!(self.exp_multiplier, 1 | 2) {
            return Err(Error::Config(format!("exp_multiplier must be 1 or 2, got {}", self.exp_multiplier)));
        }
        Ok(())
    }

    pub fn exp_model(&self) -> LinearCostModel {
        effective_exp_model(&self.profile, &self.volumes, self.exp_multiplier)
    }

    pub fn chunk_times(&self, r: f64) -> Result<ChunkTimes> {
        let v = &self.volumes;
        Ok(ChunkTimes {
            a2a: self.profile.a2a.chunk_time(v.n_a2a, r)?,
            ag: self.profile.ag.chunk_time(v.n_ag, r)?,
            rs: self.profile.rs.chunk_time(v.n_rs, r)?,
            exp: self.exp_model().chunk_time(v.n_exp, r)?,
        })
    }
}

/// Expert model: the GEMM model scaled by the GEMM count and the phase
/// multiplier. `n_exp` itself is left unchanged.
pub fn effective_exp_model(profile: &ClusterProfile, volumes: &TaskVolumes, exp_multiplier: u32) -> LinearCostModel {
    profile.gemm.scaled(f64::from(volumes.gemm_count * exp_multiplier))
}

/// Durations of one chunk of each MoE task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkTimes {
    pub a2a: f64,
    pub ag: f64,
    pub rs: f64,
    pub exp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum CaseId {
    /// Inter-node communication (AlltoAll plus gradient AllReduce) dominates.
    C1,
    /// Expert computation dominates.
    C2,
    /// AlltoAll dominates.
    C3,
    /// Intra-node communication dominates.
    C4,
}

impl CaseId {
    pub const ALL: [CaseId; 4] = [CaseId::C1, CaseId::C2, CaseId::C3, CaseId::C4];

    pub fn number(self) -> u8 {
        self as u8 + 1
    }
}

impl From<CaseId> for u8 {
    fn from(c: CaseId) -> u8 {
        c.number()
    }
}

impl TryFrom<u8> for CaseId {
    type Error = Error;

    fn try_from(n: u8) -> Result<Self> {
        match n {
            1 => Ok(CaseId::C1),
            2 => Ok(CaseId::C2),
            3 => Ok(CaseId::C3),
            4 => Ok(CaseId::C4),
            _ => Err(Error::Config(format!("unknown case id {n}"))),
        }
    }
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Truth values of Q1..Q7 (index 0 is Q1).
pub type Predicates = [bool; 7];

pub fn predicates_from_times(t: &ChunkTimes, t_gar: f64, r: f64) -> Predicates {
    let (a, g, s, e) = (t.a2a, t.ag, t.rs, t.exp);
    let rm1 = r - 1.0;
    [
        a > g,
        r * e > 2.0 * rm1 * a,
        r * e > rm1 * (g + s),
        t_gar > g + s,
        t_gar > r * e - 2.0 * rm1 * a + g + s,
        t_gar > r * g + r * s - 2.0 * rm1 * a,
        t_gar > g + s + r * e - 2.0 * rm1 * a,
    ]
}

pub fn q_predicates(inputs: &PhaseInputs, r: f64) -> Result<Predicates> {
    Ok(predicates_from_times(&inputs.chunk_times(r)?, inputs.t_gar, r))
}

/// Whether the feasibility region of `case` contains the point described by `q`.
pub fn case_holds(case: CaseId, q: &Predicates) -> bool {
    let [q1, q2, q3, q4, q5, q6, q7] = *q;
    match case {
        CaseId::C1 => (q1 && !q2 && q4) || (q1 && q2 && q5) || (!q1 && !q3 && q6) || (!q1 && q3 && q7),
        CaseId::C2 => (q1 && q2 && !q5) || (!q1 && q3 && !q7),
        CaseId::C3 => q1 && !q2 && !q4,
        CaseId::C4 => !q1 && !q3 && !q6,
    }
}

/// The cases whose regions contain `q`.
pub fn holding_cases(q: &Predicates) -> Vec<CaseId> {
    CaseId::ALL.into_iter().filter(|c| case_holds(*c, q)).collect()
}

pub fn cost_from_times(case: CaseId, t: &ChunkTimes, t_gar: f64, r: f64) -> f64 {
    match case {
        CaseId::C1 => 2.0 * r * t.a2a + t_gar,
        CaseId::C2 => 2.0 * t.a2a + t.ag + t.rs + r * t.exp,
        CaseId::C3 => 2.0 * r * t.a2a + t.ag + t.rs,
        CaseId::C4 => 2.0 * t.a2a + r * t.ag + r * t.rs,
    }
}

pub fn case_cost(case: CaseId, inputs: &PhaseInputs, r: f64) -> Result<f64> {
    Ok(cost_from_times(case, &inputs.chunk_times(r)?, inputs.t_gar, r))
}

/// `(a, b, c)` with `case_cost(r) = a*r + b/r + c`.
pub fn case_coefficients(case: CaseId, inputs: &PhaseInputs) -> (f64, f64, f64) {
    let p = &inputs.profile;
    let v = &inputs.volumes;
    let exp = inputs.exp_model();
    let a2a_var = v.n_a2a * p.a2a.beta;
    let ag_var = v.n_ag * p.ag.beta;
    let rs_var = v.n_rs * p.rs.beta;
    match case {
        CaseId::C1 => (2.0 * p.a2a.alpha, 0.0, 2.0 * a2a_var + inputs.t_gar),
        CaseId::C2 => (
            exp.alpha,
            2.0 * a2a_var + ag_var + rs_var,
            2.0 * p.a2a.alpha + p.ag.alpha + p.rs.alpha + v.n_exp * exp.beta,
        ),
        CaseId::C3 => (2.0 * p.a2a.alpha, ag_var + rs_var, 2.0 * a2a_var + p.ag.alpha + p.rs.alpha),
        CaseId::C4 => (p.ag.alpha + p.rs.alpha, 2.0 * a2a_var, 2.0 * p.a2a.alpha + ag_var + rs_var),
    }
}

/// Inter-link slack of a case at `t_gar = 0`: how much AllReduce fits in
/// the layer before it becomes inter-node bound.
pub fn overlappable_moe_time(case: CaseId, inputs: &PhaseInputs, r: f64) -> Result<f64> {
    let t = inputs.chunk_times(r)?;
    let rm1 = r - 1.0;
    let v = match case {
        CaseId::C1 => {
            return Err(Error::Contract("the inter-node bound case has no overlappable window".into()));
        }
        CaseId::C2 => r * t.exp + t.ag + t.rs - 2.0 * rm1 * t.a2a,
        CaseId::C3 => t.ag + t.rs,
        CaseId::C4 => r * t.ag + r * t.rs - 2.0 * rm1 * t.a2a,
    };
    Ok(v.max(0.0))
}

/// Chunk times and predicate values at every degree in `1..=r_max`.
fn degree_table(inputs: &PhaseInputs, r_max: u32) -> Result<Vec<(ChunkTimes, Predicates)>> {
    if r_max == 0 {
        return Err(Error::InvalidDegree(0.0));
    }
    (1..=r_max)
        .map(|r| {
            let r = f64::from(r);
            let t = inputs.chunk_times(r)?;
            Ok((t, predicates_from_times(&t, inputs.t_gar, r)))
        })
        .collect()
}

/// Best feasible integer degree for one case, `None` if the case holds
/// nowhere in `1..=r_max`.
pub fn minimize_case(case: CaseId, inputs: &PhaseInputs, r_max: u32) -> Result<Option<(u32, f64)>> {
    let table = degree_table(inputs, r_max)?;
    Ok(minimize_case_in(case, inputs, &table))
}

fn minimize_case_in(case: CaseId, inputs: &PhaseInputs, table: &[(ChunkTimes, Predicates)]) -> Option<(u32, f64)> {
    let r_max = table.len() as u32;
    let feasible = |r: u32| case_holds(case, &table[r as usize - 1].1);

    let mut candidates = vec![1, r_max];
    let (a, b, _) = case_coefficients(case, inputs);
    if a > 0.0 && b > 0.0 {
        let stationary = (b / a).sqrt().clamp(1.0, f64::from(r_max));
        candidates.push(stationary.floor() as u32);
        candidates.push(stationary.ceil() as u32);
    }
    for r in 2..=r_max {
        if feasible(r) != feasible(r - 1) {
            candidates.push(r - 1);
            candidates.push(r);
        }
    }
    candidates.sort_unstable();
    candidates.dedup();

    let mut best: Option<(u32, f64)> = None;
    for r in candidates.into_iter().filter(|r| feasible(*r)) {
        let t = cost_from_times(case, &table[r as usize - 1].0, inputs.t_gar, f64::from(r));
        if best.is_none_or(|(_, bt)| t < bt) {
            best = Some((r, t));
        }
    }
    best
}

/// Chosen degree of one phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegreeChoice {
    pub r: u32,
    pub t_moe: f64,
    /// `None` when no case was feasible and the degree came from simulation.
    pub case: Option<CaseId>,
}

/// Minimizes over all four cases; ties go to the smaller degree, then the
/// smaller case. Falls back to simulating every degree when no case holds.
pub fn find_optimal_pipeline_degree(inputs: &PhaseInputs, r_max: u32) -> Result<DegreeChoice> {
    inputs.validate()?;
    let table = degree_table(inputs, r_max)?;
    let mut best: Option<DegreeChoice> = None;
    for case in CaseId::ALL {
        if let Some((r, t_moe)) = minimize_case_in(case, inputs, &table) {
            let better = match best {
                None => true,
                Some(b) => t_moe < b.t_moe || (t_moe == b.t_moe && r < b.r),
            };
            if better {
                best = Some(DegreeChoice { r, t_moe, case: Some(case) });
            }
        }
    }
    match best {
        Some(b) => Ok(b),
        None => {
            log::warn!("no case feasible for any degree up to {r_max}; falling back to simulation");
            let gar = if inputs.t_gar > 0.0 { vec![inputs.t_gar] } else { Vec::new() };
            let (r, t_moe) = crate::sim::brute_force_best_degree(inputs, &gar, r_max)?;
            Ok(DegreeChoice { r, t_moe, case: None })
        }
    }
}

/// Forward and backward degrees of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelinePlan {
    pub r_fwd: u32,
    pub r_bwd: u32,
    pub case_fwd: Option<CaseId>,
    pub case_bwd: Option<CaseId>,
    pub t_moe_fwd: f64,
    pub t_moe_bwd: f64,
    /// Overlappable time at `r_bwd` with no AllReduce in the layer.
    pub t_olp_moe_bwd: f64,
    pub t_gar_bwd: f64,
    pub predicates_fwd: Predicates,
    pub predicates_bwd: Predicates,
    /// Set when a degree came from the simulation fallback.
    pub boundary: bool,
}

pub fn plan_layer(volumes: &TaskVolumes, profile: &ClusterProfile, t_gar_bwd: f64, r_max: u32) -> Result<PipelinePlan> {
    let fwd_in = PhaseInputs::forward(*volumes, profile.clone());
    let bwd_in = PhaseInputs::backward(*volumes, profile.clone(), t_gar_bwd);
    let fwd = find_optimal_pipeline_degree(&fwd_in, r_max)?;
    let bwd = find_optimal_pipeline_degree(&bwd_in, r_max)?;
    let r_bwd = f64::from(bwd.r);
    let bare = bwd_in.with_t_gar(0.0);
    let q0 = q_predicates(&bare, r_bwd)?;
    let t_olp_moe_bwd = match holding_cases(&q0).into_iter().find(|c| *c != CaseId::C1) {
        Some(c) => overlappable_moe_time(c, &bare, r_bwd)?,
        None => 0.0,
    };
    Ok(PipelinePlan {
        r_fwd: fwd.r,
        r_bwd: bwd.r,
        case_fwd: fwd.case,
        case_bwd: bwd.case,
        t_moe_fwd: fwd.t_moe,
        t_moe_bwd: bwd.t_moe,
        t_olp_moe_bwd,
        t_gar_bwd,
        predicates_fwd: q_predicates(&fwd_in, f64::from(fwd.r))?,
        predicates_bwd: q_predicates(&bwd_in, r_bwd)?,
        boundary: fwd.case.is_none() || bwd.case.is_none(),
    })
}
