//! Grid sweep over layer configurations, comparing the analytic plan with
//! brute-force simulation and with the baseline schedules.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost_models::ClusterProfile;
use crate::error::{Error, Result};
use crate::partition::{step1_assign, step2_optimize, DeParams, Step2Problem, Window};
use crate::pipeline::{find_optimal_pipeline_degree, plan_layer, PhaseInputs, DEFAULT_R_MAX};
use crate::sim::{brute_force_style, build_layer_dag, simulate, Style};
use crate::workload::{derive_volumes, CapacityFactor, FfnType, LayerConfig, ParallelConfig};

/// Cases above this count need explicit confirmation.
pub const LARGE_SWEEP: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub batch: Vec<u64>,
    pub n_heads: Vec<u64>,
    pub seq_len: Vec<u64>,
    pub embed: Vec<u64>,
    pub hscale: Vec<u64>,
    pub f: Vec<CapacityFactor>,
    pub ffn_type: Vec<FfnType>,
    /// Defaults to `n_ep` (one expert per device group).
    #[serde(default)]
    pub experts: Option<u64>,
    #[serde(default = "default_k")]
    pub k: u64,
}

fn default_k() -> u64 {
    2
}

impl SweepGrid {
    fn with_seq_len(seq_len: Vec<u64>) -> Self {
        Self {
            batch: vec![1, 2, 4],
            n_heads: vec![8, 16, 32],
            seq_len,
            embed: vec![1024, 2048, 4096],
            hscale: vec![2, 3, 4],
            f: vec![CapacityFactor::Finite(1.2), CapacityFactor::Finite(2.4), CapacityFactor::Unlimited],
            ffn_type: vec![FfnType::Simple, FfnType::Mixtral],
            experts: None,
            k: 2,
        }
    }

    pub fn testbed_a() -> Self {
        Self::with_seq_len(vec![512, 1024, 2048])
    }

    pub fn testbed_b() -> Self {
        Self::with_seq_len(vec![256, 512, 1024])
    }

    pub fn len(&self) -> usize {
        self.batch.len()
            * self.n_heads.len()
            * self.seq_len.len()
            * self.embed.len()
            * self.hscale.len()
            * self.f.len()
            * self.ffn_type.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cases in row-major order of the fields above.
    pub fn cases(&self, n_ep: u64) -> Vec<LayerConfig> {
        let experts = self.experts.unwrap_or(n_ep);
        let mut out = Vec::with_capacity(self.len());
        for &batch in &self.batch {
            for &n_heads in &self.n_heads {
                for &seq_len in &self.seq_len {
                    for &embed in &self.embed {
                        for &hscale in &self.hscale {
                            for &capacity_factor in &self.f {
                                for &ffn_type in &self.ffn_type {
                                    out.push(LayerConfig {
                                        batch,
                                        seq_len,
                                        embed,
                                        hidden: hscale * embed,
                                        experts,
                                        top_k: self.k,
                                        capacity_factor,
                                        n_heads,
                                        ffn_type,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub profile: ClusterProfile,
    pub parallel: ParallelConfig,
    pub grid: SweepGrid,
    pub r_max: u32,
    pub de: DeParams,
}

impl SweepConfig {
    pub fn testbed_a() -> Self {
        Self {
            profile: ClusterProfile::testbed_a(),
            parallel: ParallelConfig::testbed_a(),
            grid: SweepGrid::testbed_a(),
            r_max: DEFAULT_R_MAX,
            de: DeParams::default(),
        }
    }

    pub fn testbed_b() -> Self {
        Self {
            profile: ClusterProfile::testbed_b(),
            parallel: ParallelConfig::testbed_b(),
            grid: SweepGrid::testbed_b(),
            r_max: DEFAULT_R_MAX,
            de: DeParams::default(),
        }
    }
}

/// One sweep row. Makespans are simulated, in ms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case: usize,
    #[serde(rename = "B")]
    pub batch: u64,
    pub n_heads: u64,
    #[serde(rename = "L")]
    pub seq_len: u64,
    #[serde(rename = "M")]
    pub embed: u64,
    #[serde(rename = "H")]
    pub hidden: u64,
    pub f: String,
    pub ffn_type: String,
    pub n_a2a: f64,
    pub n_ag: f64,
    pub n_exp: f64,
    pub n_grad: u64,
    pub r_fwd: u32,
    pub r_bwd: u32,
    pub case_fwd: u8,
    pub case_bwd: u8,
    pub r_fwd_bf: u32,
    pub r_bwd_bf: u32,
    pub pred_fwd: f64,
    pub pred_bwd: f64,
    pub t_gar_bwd: f64,
    pub tail_bwd: f64,
    pub bf_fwd: f64,
    pub bf_bwd: f64,
    pub fsmoe_fwd: f64,
    pub fsmoe_bwd: f64,
    pub no_iio_fwd: f64,
    pub no_iio_bwd: f64,
    pub pipemoe_fwd: f64,
    pub pipemoe_bwd: f64,
    pub sequential_fwd: f64,
    pub sequential_bwd: f64,
}

impl CaseResult {
    pub fn fsmoe(&self) -> f64 {
        self.fsmoe_fwd + self.fsmoe_bwd
    }

    pub fn no_iio(&self) -> f64 {
        self.no_iio_fwd + self.no_iio_bwd
    }

    pub fn pipemoe(&self) -> f64 {
        self.pipemoe_fwd + self.pipemoe_bwd
    }

    pub fn sequential(&self) -> f64 {
        self.sequential_fwd + self.sequential_bwd
    }

    pub fn has_intra_traffic(&self) -> bool {
        self.n_ag > 0.0
    }
}

fn case_code(c: Option<crate::pipeline::CaseId>) -> u8 {
    c.map_or(0, |c| c.number())
}

/// Evaluates one configuration.
///
/// The backward pass is a steady-state layer: the previous layer's gradient
/// (the same size as this one's) arrives with it, is partitioned into this
/// layer's idle window plus a remainder, and whatever is not placed trails
/// the layer. The sequential and no-IIO schedules reuse the overlapped degree and
/// AllReduce tasks; the PipeMoE-style schedule picks its own best degree and
/// reduces the whole gradient after the layer.
pub fn run_case(index: usize, cfg: &LayerConfig, sc: &SweepConfig) -> Result<CaseResult> {
    let volumes = derive_volumes(cfg, &sc.parallel)?;
    let profile = &sc.profile;
    let ar = &profile.ar;
    let n_grad = volumes.n_grad.round() as u64;

    let fwd = PhaseInputs::forward(volumes, profile.clone());
    let fwd_choice = find_optimal_pipeline_degree(&fwd, sc.r_max)?;
    let (r_fwd_bf, bf_fwd) = brute_force_style(Style::Fsmoe, &fwd, &[], sc.r_max)?;
    let sim_fwd =
        |style: Style, r: u32| -> Result<f64> { Ok(simulate(&build_layer_dag(style, &fwd, r, &[])?)?.makespan) };

    let plan0 = plan_layer(&volumes, profile, 0.0, sc.r_max)?;
    let window = Window { t_olp_moe: plan0.t_olp_moe_bwd, t_olp_dense: 0.0 };
    let s1 = step1_assign(&[window], &[n_grad], n_grad, ar)?;
    let bwd0 = PhaseInputs::backward(volumes, profile.clone(), 0.0);
    let problem = Step2Problem {
        inputs: vec![bwd0.clone()],
        moe_slot: s1.moe_slot.clone(),
        n_rem: s1.n_rem.clone(),
        trailing: 0,
        ar: *ar,
        r_max: sc.r_max,
    };
    let de = DeParams { seed: sc.de.seed ^ index as u64, ..sc.de };
    let x = if problem.total_remainder() > 0 { step2_optimize(&problem, &de)?.x_g[0] } else { 0 };
    let t_gar = problem.layer_gar(0, x as f64);
    let tail_elems = problem.tail(&[x as f64]);
    let tail = ar.launch_time(tail_elems);
    let gar: Vec<f64> = [s1.moe_slot[0], x].iter().filter(|n| **n > 0).map(|n| ar.predict(*n as f64)).collect();

    let bwd = bwd0.with_t_gar(t_gar);
    let bwd_choice = find_optimal_pipeline_degree(&bwd, sc.r_max)?;
    let (r_bwd_bf, bf_bwd) = brute_force_style(Style::Fsmoe, &bwd, &gar, sc.r_max)?;
    let sim_bwd = |style: Style, r: u32, g: &[f64]| -> Result<f64> {
        Ok(simulate(&build_layer_dag(style, &bwd, r, g)?)?.makespan)
    };
    let full_gar: Vec<f64> = if n_grad > 0 { vec![ar.predict(n_grad as f64)] } else { Vec::new() };

    Ok(CaseResult {
        case: index,
        batch: cfg.batch,
        n_heads: cfg.n_heads,
        seq_len: cfg.seq_len,
        embed: cfg.embed,
        hidden: cfg.hidden,
        f: cfg.capacity_factor.to_string(),
        ffn_type: cfg.ffn_type.to_string(),
        n_a2a: volumes.n_a2a,
        n_ag: volumes.n_ag,
        n_exp: volumes.n_exp,
        n_grad,
        r_fwd: fwd_choice.r,
        r_bwd: bwd_choice.r,
        case_fwd: case_code(fwd_choice.case),
        case_bwd: case_code(bwd_choice.case),
        r_fwd_bf,
        r_bwd_bf,
        pred_fwd: fwd_choice.t_moe,
        pred_bwd: bwd_choice.t_moe + tail,
        t_gar_bwd: t_gar,
        tail_bwd: tail,
        bf_fwd,
        bf_bwd: bf_bwd + tail,
        fsmoe_fwd: sim_fwd(Style::Fsmoe, fwd_choice.r)?,
        fsmoe_bwd: sim_bwd(Style::Fsmoe, bwd_choice.r, &gar)? + tail,
        no_iio_fwd: sim_fwd(Style::FsmoeNoIio, fwd_choice.r)?,
        no_iio_bwd: sim_bwd(Style::FsmoeNoIio, bwd_choice.r, &gar)? + tail,
        pipemoe_fwd: brute_force_style(Style::Pipemoe, &fwd, &[], sc.r_max)?.1,
        pipemoe_bwd: brute_force_style(Style::Pipemoe, &bwd, &full_gar, sc.r_max)?.1,
        sequential_fwd: sim_fwd(Style::Sequential, fwd_choice.r)?,
        sequential_bwd: sim_bwd(Style::Sequential, bwd_choice.r, &gar)? + tail,
    })
}

/// Runs every grid case; results are in case order whatever the thread count.
pub fn run_sweep(sc: &SweepConfig, allow_large: bool) -> Result<Vec<CaseResult>> {
    sc.profile.validate()?;
    sc.parallel.validate()?;
    sc.de.validate()?;
    let n = sc.grid.len();
    if n > LARGE_SWEEP && !allow_large {
        return Err(Error::Config(format!("grid has {n} cases (limit {LARGE_SWEEP} without confirmation)")));
    }
    let cases = sc.grid.cases(sc.parallel.n_ep);
    cases.par_iter().enumerate().map(|(i, c)| run_case(i, c, sc)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub cases: usize,
    pub divergent_degrees: usize,
    pub analytic_within_5pct_fwd: usize,
    pub analytic_within_5pct_bwd: usize,
    pub worst_gap_fwd: f64,
    pub worst_gap_bwd: f64,
    /// Geometric means of baseline / fsmoe over fwd + bwd makespans.
    pub speedup_vs_pipemoe: f64,
    pub speedup_vs_no_iio: f64,
    pub speedup_vs_sequential: f64,
    pub dominance_violations: usize,
}

fn geomean(ratios: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = ratios.fold((0.0, 0usize), |(s, n), r| (s + r.ln(), n + 1));
    if n == 0 {
        1.0
    } else {
        (sum / n as f64).exp()
    }
}

/// Relative slack for makespan comparisons between schedule styles.
pub const DOMINANCE_TOL: f64 = 1e-9;

pub fn dominance_holds(r: &CaseResult) -> bool {
    let le = |a: f64, b: f64| a <= b * (1.0 + DOMINANCE_TOL);
    [
        (r.fsmoe_fwd, r.no_iio_fwd),
        (r.no_iio_fwd, r.sequential_fwd),
        (r.fsmoe_bwd, r.no_iio_bwd),
        (r.no_iio_bwd, r.sequential_bwd),
    ]
    .into_iter()
    .all(|(a, b)| le(a, b))
        && le(r.fsmoe(), r.pipemoe())
}

pub fn summarize(rows: &[CaseResult]) -> SweepSummary {
    let gap = |sim: f64, bf: f64| sim / bf - 1.0;
    SweepSummary {
        cases: rows.len(),
        divergent_degrees: rows.iter().filter(|r| r.r_fwd != r.r_bwd).count(),
        analytic_within_5pct_fwd: rows.iter().filter(|r| gap(r.fsmoe_fwd, r.bf_fwd) <= 0.05).count(),
        analytic_within_5pct_bwd: rows.iter().filter(|r| gap(r.fsmoe_bwd, r.bf_bwd) <= 0.05).count(),
        worst_gap_fwd: rows.iter().map(|r| gap(r.fsmoe_fwd, r.bf_fwd)).fold(0.0, f64::max),
        worst_gap_bwd: rows.iter().map(|r| gap(r.fsmoe_bwd, r.bf_bwd)).fold(0.0, f64::max),
        speedup_vs_pipemoe: geomean(rows.iter().map(|r| r.pipemoe() / r.fsmoe())),
        speedup_vs_no_iio: geomean(rows.iter().map(|r| r.no_iio() / r.fsmoe())),
        speedup_vs_sequential: geomean(rows.iter().map(|r| r.sequential() / r.fsmoe())),
        dominance_violations: rows.iter().filter(|r| !dominance_holds(r)).count(),
    }
}

pub fn write_csv<W: Write>(rows: &[CaseResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(format!("csv write: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<CaseResult>> {
    let mut rdr = csv::Reader::from_reader(input);
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::Parse { line: i + 2, msg: e.to_string() }))
        .collect()
}
