//! Acceptance run. One PASS/FAIL line per criterion and profile.
//!
//! Known failures are listed in `EXPECTED_RED` with the reason; they are
//! reported as FAIL but do not fail the target. Any other FAIL does.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use moeplan::cost_models::{fit, goodness_of_fit, BenchSample, ClusterProfile, CostKind};
use moeplan::model::{compare_backward, plan_model, ModelSpec, PlanOptions};
use moeplan::partition::build_partition_plan;
use moeplan::pipeline::{case_cost, find_optimal_pipeline_degree, holding_cases, q_predicates, PhaseInputs};
use moeplan::sim::{brute_force_best_degree, build_fsmoe_dag, simulate};
use moeplan::sweep::{run_sweep, summarize, write_csv, CaseResult, SweepConfig};
use moeplan::workload::{gshard_gate, i_order, order, CapacityFactor, FfnType, LayerSpec, ParallelConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EXPECTED_RED: &[(u8, &str, &str)] = &[
    (1, "testbed-a", "closed forms treat AllGather and ReduceScatter as one cost; on this profile they differ"),
    (2, "testbed-a", "same AllGather/ReduceScatter asymmetry misranks degrees by up to about 10%"),
    (5, "testbed-a", "partition is planned on predicted costs; fixed 30 MB chunks can win in simulation"),
];

struct Line {
    id: u8,
    name: &'static str,
    scope: String,
    pass: bool,
    detail: String,
}

fn gar_of(inputs: &PhaseInputs) -> Vec<f64> {
    if inputs.t_gar > 0.0 {
        vec![inputs.t_gar]
    } else {
        Vec::new()
    }
}

fn fsmoe_at(inputs: &PhaseInputs, r: u32) -> f64 {
    simulate(&build_fsmoe_dag(inputs, r, &gar_of(inputs)).unwrap()).unwrap().makespan
}

fn exactness(sc: &SweepConfig, seed: u64) -> (bool, String) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut checked, mut bad, mut worst) = (0usize, 0usize, 0.0f64);
    for _ in 0..500 {
        let inputs = common::grid_phase(&mut rng, sc);
        for r in 1..=8u32 {
            let q = q_predicates(&inputs, f64::from(r)).unwrap();
            let sim = fsmoe_at(&inputs, r);
            for case in holding_cases(&q) {
                let err = (case_cost(case, &inputs, f64::from(r)).unwrap() - sim).abs() / sim;
                checked += 1;
                worst = worst.max(err);
                if err > 1e-9 {
                    bad += 1;
                }
            }
        }
    }
    let t = start.elapsed();
    let pass = bad == 0 && t < Duration::from_secs(30);
    (pass, format!("{bad}/{checked} checks above 1e-9, worst {worst:.3e}, {:.1}s", t.as_secs_f64()))
}

fn optimizer_vs_oracle(sc: &SweepConfig, seed: u64) -> (bool, String) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut bad_f, mut bad_b, mut worst) = (0usize, 0usize, 0.0f64);
    for _ in 0..200 {
        let v = common::grid_volumes(&mut rng, sc);
        let scale = sc.profile.a2a.predict(v.n_a2a);
        let t_gar = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..3.0) * scale };
        let phases = [PhaseInputs::forward(v, sc.profile.clone()), PhaseInputs::backward(v, sc.profile.clone(), t_gar)];
        for (j, inputs) in phases.iter().enumerate() {
            let r = find_optimal_pipeline_degree(inputs, 16).unwrap().r;
            let (_, best) = brute_force_best_degree(inputs, &gar_of(inputs), 16).unwrap();
            let gap = fsmoe_at(inputs, r) / best - 1.0;
            worst = worst.max(gap);
            if gap > 0.05 {
                if j == 0 {
                    bad_f += 1;
                } else {
                    bad_b += 1;
                }
            }
        }
    }
    let t = start.elapsed();
    let pass = bad_f == 0 && bad_b == 0 && t < Duration::from_secs(120);
    (
        pass,
        format!(
            "beyond 5%: fwd {bad_f}/200, bwd {bad_b}/200, worst gap {:.2}%, {:.1}s",
            worst * 100.0,
            t.as_secs_f64()
        ),
    )
}

fn grid_and_divergence(sc: &SweepConfig, rows: &[CaseResult]) -> (bool, String) {
    let n = sc.grid.len();
    let s = summarize(rows);
    (
        n == 1458 && rows.len() == 1458 && s.divergent_degrees > 0,
        format!("{n} cases, {} with r_fwd != r_bwd", s.divergent_degrees),
    )
}

fn dominance(rows: &[CaseResult]) -> (bool, String) {
    let s = summarize(rows);
    let intra: Vec<&CaseResult> = rows.iter().filter(|r| r.has_intra_traffic()).collect();
    let strict = intra.iter().filter(|r| r.fsmoe() < r.pipemoe()).count();
    let pass = s.dominance_violations == 0 && 2 * strict > intra.len();
    (
        pass,
        format!(
            "{} violations, strictly faster than pipemoe-style on {strict}/{} cases with intra traffic, geomean {:.3}x",
            s.dominance_violations,
            intra.len(),
            s.speedup_vs_pipemoe
        ),
    )
}

fn partitioning(sc: &SweepConfig, seed: u64) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ar = &sc.profile.ar;
    let de = PlanOptions::default().de;
    let mut broken = 0;
    for _ in 0..100 {
        let layers = common::random_layers(&mut rng, sc, 4);
        let ok = match build_partition_plan(&layers, &sc.profile, &de, 16) {
            Ok(plan) => {
                plan.total_assigned() == layers.iter().map(|l| l.n_grad).sum::<u64>()
                    && plan.layers.iter().all(|l| {
                        let over = |n: u64, w: f64| n > 0 && ar.launch_time(n as f64) > w + 1e-9;
                        !over(l.n_first, l.t_olp_moe + l.t_olp_dense)
                            && !over(l.moe_slot, l.t_olp_moe)
                            && !over(l.dense_slot, l.t_olp_dense)
                    })
            }
            Err(_) => false,
        };
        if !ok {
            broken += 1;
        }
    }

    // 4-layer models; one element of AllReduce per layer is the resolution
    // of an integer plan
    let slack = 4.0 * ar.beta;
    let (seq_len, parallel) = if sc.profile.name == "testbed-a" {
        (1024, ParallelConfig::testbed_a())
    } else {
        (512, ParallelConfig::testbed_b())
    };
    let (mut panel, mut lost) = (0, Vec::new());
    for dense in [0.0, 2.0, 10.0, 40.0] {
        for (batch, embed) in [(1u64, 1024u64), (2, 2048), (4, 4096)] {
            let layer = LayerSpec {
                batch,
                n_heads: 16,
                seq_len,
                embed,
                hscale: 2,
                f: CapacityFactor::Finite(1.2),
                ffn_type: FfnType::Simple,
                experts: parallel.n_ep,
                k: 2,
                dense_ms: dense,
            };
            let spec = ModelSpec { name: "panel".into(), parallel, layers: vec![layer; 4] };
            let plan = plan_model(&spec, &sc.profile, &PlanOptions::default()).unwrap();
            let c = compare_backward(&spec.generalized_layers().unwrap(), &plan.partition, &sc.profile, 16).unwrap();
            panel += 1;
            let rival = c.no_partition.min(c.fixed_chunks);
            if c.partitioned > rival + slack {
                lost.push(format!(
                    "dense {dense} B {batch}: {:.3} vs no-partition {:.3} / 30MB chunks {:.3}",
                    c.partitioned, c.no_partition, c.fixed_chunks
                ));
            }
        }
    }
    let mut detail = format!("{broken}/100 random plans broken, panel lost {}/{panel}", lost.len());
    for l in &lost {
        detail.push_str("; ");
        detail.push_str(l);
    }
    (broken == 0 && lost.is_empty(), detail)
}

fn fitting(profile: &ClusterProfile, seed: u64) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut exact_ok, mut min_r2_clean, mut min_r2_noisy) = (true, 1.0f64, 1.0f64);
    for kind in CostKind::ALL {
        let truth = profile.model(kind);
        // communication sizes in elements; GEMM sizes in MACs, scaled so the
        // variable part is not lost under the startup
        let base = if kind == CostKind::Gemm { f64::from(1u32 << 30) } else { f64::from(1u32 << 18) };
        let sizes: Vec<f64> = (1..=24).map(|j| base * f64::from(j)).collect();
        let clean: Vec<BenchSample> = sizes.iter().map(|&n| BenchSample::new(n, truth.predict(n)).unwrap()).collect();
        let m = fit(&clean, kind.unit()).unwrap();
        exact_ok &=
            (m.alpha - truth.alpha).abs() <= 1e-9 * truth.alpha && (m.beta - truth.beta).abs() <= 1e-9 * truth.beta;
        min_r2_clean = min_r2_clean.min(goodness_of_fit(&clean, &m).unwrap());
        for _ in 0..20 {
            let noisy: Vec<BenchSample> = sizes
                .iter()
                .map(|&n| BenchSample::new(n, truth.predict(n) * (1.0 + rng.gen_range(-0.01..0.01))).unwrap())
                .collect();
            let m = fit(&noisy, kind.unit()).unwrap();
            min_r2_noisy = min_r2_noisy.min(goodness_of_fit(&noisy, &m).unwrap());
        }
    }
    let pass = exact_ok && min_r2_clean >= 1.0 - 1e-12 && min_r2_noisy >= 0.999;
    (
        pass,
        format!(
            "noiseless recovery {}, r2 {min_r2_clean:.15}; noisy min r2 {min_r2_noisy:.5}",
            if exact_ok { "ok" } else { "off" }
        ),
    )
}

fn gating(seed: u64) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first_err = None;
    let mut bad = 0;
    for _ in 0..1000 {
        if let Err(e) = common::check_gates_once(&mut rng) {
            bad += 1;
            first_err.get_or_insert(e);
        }
    }
    let (mut trips, mut over) = (0, 0);
    for _ in 0..300 {
        let n = rng.gen_range(1..30);
        let experts = rng.gen_range(1..8);
        let tokens = Array2::from_shape_fn((n, 4), |_| rng.gen_range(-10.0..10.0));
        let w = Array2::from_shape_fn((4, experts), |_| rng.gen_range(-1.0..1.0));
        let mut gate = gshard_gate(&tokens, &w, &w, 1, None).unwrap();
        let (layout, _) = order(&tokens, &mut gate, n).unwrap();
        if i_order(&layout, &gate).unwrap() != tokens {
            trips += 1;
        }
        let k = rng.gen_range(1..=experts);
        let cap = rng.gen_range(0..n + 1);
        let mut gate = gshard_gate(&tokens, &w, &w, k, None).unwrap();
        let (_, report) = order(&tokens, &mut gate, cap).unwrap();
        if report.load.iter().any(|&l| l > cap) {
            over += 1;
        }
    }
    let mut detail =
        format!("{bad}/1000 gate instances differ, {trips}/300 round trips broken, {over}/300 over capacity");
    if let Some(e) = first_err {
        detail.push_str(&format!("; first: {e}"));
    }
    (bad == 0 && trips == 0 && over == 0, detail)
}

fn sweep_bytes(rows: &[CaseResult]) -> Vec<u8> {
    let mut out = Vec::new();
    write_csv(rows, &mut out).unwrap();
    out
}

fn determinism(sc: &SweepConfig, first: &[CaseResult]) -> (bool, String) {
    let layer = LayerSpec {
        batch: 2,
        n_heads: 16,
        seq_len: 1024,
        embed: 2048,
        hscale: 4,
        f: CapacityFactor::Finite(1.2),
        ffn_type: FfnType::Simple,
        experts: sc.parallel.n_ep,
        k: 2,
        dense_ms: 6.0,
    };
    let mut layers = vec![layer; 4];
    layers[1].batch = 4;
    let spec = ModelSpec { name: "determinism".into(), parallel: sc.parallel, layers };
    let opts =
        PlanOptions { de: moeplan::partition::DeParams { seed: 11, ..Default::default() }, ..Default::default() };
    let plan = || serde_json::to_string_pretty(&plan_model(&spec, &sc.profile, &opts).unwrap()).unwrap();
    let plans_same = plan() == plan();
    // rerun on a single thread; scheduling must not leak into results
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let again = pool.install(|| run_sweep(sc, false).unwrap());
    let sweep_same = sweep_bytes(first) == sweep_bytes(&again);
    (plans_same && sweep_same, format!("plan identical: {plans_same}, sweep identical: {sweep_same}"))
}

fn main() -> ExitCode {
    let mut lines = Vec::new();
    let mut push = |id: u8, name: &'static str, scope: &str, (pass, detail): (bool, String)| {
        let line = Line { id, name, scope: scope.to_string(), pass, detail };
        println!(
            "{} [{}] {} ({}): {}",
            if line.pass { "PASS" } else { "FAIL" },
            line.id,
            line.name,
            line.scope,
            line.detail
        );
        lines.push(line);
    };
    let testbeds = common::testbeds();
    for (i, (name, sc)) in testbeds.iter().enumerate() {
        push(1, "analytic cost equals simulation", name, exactness(sc, 100 + i as u64));
    }
    for (i, (name, sc)) in testbeds.iter().enumerate() {
        push(2, "optimizer within 5% of brute force", name, optimizer_vs_oracle(sc, 200 + i as u64));
    }
    let sweeps: Vec<Vec<CaseResult>> = testbeds.iter().map(|(_, sc)| run_sweep(sc, false).unwrap()).collect();
    for ((name, sc), rows) in testbeds.iter().zip(&sweeps) {
        push(3, "sweep grid and degree divergence", name, grid_and_divergence(sc, rows));
    }
    for ((name, _), rows) in testbeds.iter().zip(&sweeps) {
        push(4, "schedule dominance", name, dominance(rows));
    }
    for (i, (name, sc)) in testbeds.iter().enumerate() {
        push(5, "gradient partitioning", name, partitioning(sc, 500 + i as u64));
    }
    for (i, (name, sc)) in testbeds.iter().enumerate() {
        push(6, "cost model fitting", name, fitting(&sc.profile, 600 + i as u64));
    }
    push(7, "gating oracles", "all", gating(700));
    for ((name, sc), rows) in testbeds.iter().zip(&sweeps) {
        push(8, "determinism", name, determinism(sc, rows));
    }

    let mut unexpected = 0;
    println!();
    for l in &lines {
        let known = EXPECTED_RED.iter().find(|(id, scope, _)| *id == l.id && *scope == l.scope);
        match (l.pass, known) {
            (false, Some((_, _, why))) => println!("known failure [{}] ({}): {why}", l.id, l.scope),
            (false, None) => unexpected += 1,
            (true, Some(_)) => println!("note: [{}] ({}) is listed as a known failure but passed", l.id, l.scope),
            (true, None) => {}
        }
    }
    let passed = lines.iter().filter(|l| l.pass).count();
    println!("{passed}/{} passed, {unexpected} unexpected failure(s)", lines.len());
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
