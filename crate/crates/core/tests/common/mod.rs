//! Oracles and instance generators shared by the integration tests.
#![allow(dead_code)]

use moeplan::cost_models::{ClusterProfile, CostUnit, LinearCostModel};
use moeplan::pipeline::PhaseInputs;
use moeplan::sim::{Dag, Resource, Timeline};
use moeplan::sweep::SweepConfig;
use moeplan::workload::{derive_volumes, LayerConfig, TaskVolumes};
use ndarray::Array2;
use rand::Rng;

pub fn testbeds() -> [(&'static str, SweepConfig); 2] {
    [("testbed-a", SweepConfig::testbed_a()), ("testbed-b", SweepConfig::testbed_b())]
}

/// One configuration drawn uniformly from the testbed's grid.
pub fn grid_layer<R: Rng>(rng: &mut R, sc: &SweepConfig) -> LayerConfig {
    fn pick<R: Rng, T: Copy>(rng: &mut R, v: &[T]) -> T {
        v[rng.gen_range(0..v.len())]
    }
    let g = &sc.grid;
    let embed = pick(rng, &g.embed);
    LayerConfig {
        batch: pick(rng, &g.batch),
        seq_len: pick(rng, &g.seq_len),
        embed,
        hidden: pick(rng, &g.hscale) * embed,
        experts: g.experts.unwrap_or(sc.parallel.n_ep),
        top_k: g.k,
        capacity_factor: pick(rng, &g.f),
        n_heads: pick(rng, &g.n_heads),
        ffn_type: pick(rng, &g.ffn_type),
    }
}

pub fn grid_volumes<R: Rng>(rng: &mut R, sc: &SweepConfig) -> TaskVolumes {
    derive_volumes(&grid_layer(rng, sc), &sc.parallel).unwrap()
}

/// A forward phase, or a backward phase with an AllReduce between zero and
/// three times the single-chunk AlltoAll time.
pub fn grid_phase<R: Rng>(rng: &mut R, sc: &SweepConfig) -> PhaseInputs {
    let v = grid_volumes(rng, sc);
    if rng.gen_bool(0.5) {
        PhaseInputs::forward(v, sc.profile.clone())
    } else {
        let scale = sc.profile.a2a.predict(v.n_a2a);
        let t_gar = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..3.0) * scale };
        PhaseInputs::backward(v, sc.profile.clone(), t_gar)
    }
}

/// A profile whose AllGather and ReduceScatter models coincide.
pub fn symmetric_profile<R: Rng>(rng: &mut R) -> ClusterProfile {
    let mut model = |alpha: (f64, f64), beta: (f64, f64)| {
        LinearCostModel::elements(rng.gen_range(alpha.0..alpha.1), rng.gen_range(beta.0..beta.1)).unwrap()
    };
    let a2a = model((0.01, 0.5), (1e-8, 1e-6));
    let intra = model((0.01, 0.5), (1e-8, 5e-6));
    let ar = model((0.01, 0.5), (1e-8, 5e-6));
    let gemm = LinearCostModel::new(rng.gen_range(0.01..0.1), rng.gen_range(1e-11..1e-10), CostUnit::MacOps).unwrap();
    ClusterProfile { name: "symmetric".into(), a2a, ag: intra, rs: intra, ar, gemm }
}

pub fn naive_matmul(a: &Array2<f64>, b: &Array2<f64>) -> Vec<Vec<f64>> {
    let (n, m) = a.dim();
    let p = b.ncols();
    (0..n).map(|i| (0..p).map(|j| (0..m).map(|t| a[[i, t]] * b[[t, j]]).sum()).collect()).collect()
}

/// Repeated strict argmax; equal values resolve to the lower index.
pub fn argmax_top_k(v: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; v.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &x) in v.iter().enumerate() {
            if !taken[i] && best.is_none_or(|b| x > v[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

pub fn naive_softmax(vals: &[f64]) -> Vec<f64> {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = vals.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

/// Checks a timeline against its graph: durations, dependencies, one task
/// at a time per resource, and no resource idling while a task waits.
pub fn check_timeline(dag: &Dag, tl: &Timeline) -> Result<(), String> {
    const EPS: f64 = 1e-9;
    let n = dag.len();
    if tl.start.len() != n || tl.end.len() != n {
        return Err("timeline length".into());
    }
    let mut makespan: f64 = 0.0;
    for t in &dag.tasks {
        let (s, e) = (tl.start[t.id], tl.end[t.id]);
        if !(s >= 0.0) || (e - s - t.duration).abs() > EPS * (1.0 + t.duration) {
            return Err(format!("task {} timing {s}..{e} vs duration {}", t.label(), t.duration));
        }
        for &d in &t.deps {
            if s + EPS < tl.end[d] {
                return Err(format!("task {} starts before dep {} ends", t.label(), dag.tasks[d].label()));
            }
        }
        makespan = makespan.max(e);
    }
    if (makespan - tl.makespan).abs() > EPS {
        return Err("makespan".into());
    }
    for res in Resource::ALL {
        let mut iv: Vec<(f64, f64)> =
            dag.tasks.iter().filter(|t| t.resource == res).map(|t| (tl.start[t.id], tl.end[t.id])).collect();
        iv.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        for w in iv.windows(2) {
            if w[1].0 + EPS < w[0].1 {
                return Err(format!("overlap on {res}: {:?} {:?}", w[0], w[1]));
            }
        }
        // non-delay: [ready, start) of every task lies inside busy time
        for t in dag.tasks.iter().filter(|t| t.resource == res) {
            let ready = t.deps.iter().map(|&d| tl.end[d]).fold(0.0, f64::max);
            let mut cursor = ready;
            for &(s, e) in &iv {
                if e <= cursor + EPS {
                    continue;
                }
                if s > cursor + EPS {
                    break;
                }
                cursor = cursor.max(e);
            }
            if cursor + EPS < tl.start[t.id] {
                return Err(format!("{res} idle at {cursor} while {} waited until {}", t.label(), tl.start[t.id]));
            }
        }
    }
    Ok(())
}

/// Start times of the semi-active schedule that issues tasks in `order`.
pub fn semi_active(dag: &Dag, order: &[usize]) -> Vec<f64> {
    let mut end = vec![0.0; dag.len()];
    let mut start = vec![0.0; dag.len()];
    let mut free = [0.0f64; 3];
    for &id in order {
        let t = &dag.tasks[id];
        let s = t.deps.iter().map(|&d| end[d]).fold(free[t.resource.index()], f64::max);
        start[id] = s;
        end[id] = s + t.duration;
        free[t.resource.index()] = end[id];
    }
    start
}

/// Smallest makespan over every dependency-respecting issue order.
pub fn exhaustive_best(dag: &Dag) -> f64 {
    fn rec(dag: &Dag, done: &mut Vec<bool>, order: &mut Vec<usize>, best: &mut f64) {
        if order.len() == dag.len() {
            let start = semi_active(dag, order);
            let m = dag.tasks.iter().map(|t| start[t.id] + t.duration).fold(0.0, f64::max);
            *best = best.min(m);
            return;
        }
        for t in &dag.tasks {
            if !done[t.id] && t.deps.iter().all(|&d| done[d]) {
                done[t.id] = true;
                order.push(t.id);
                rec(dag, done, order, best);
                order.pop();
                done[t.id] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(dag, &mut vec![false; dag.len()], &mut Vec::new(), &mut best);
    best
}

pub type Routing = Vec<Vec<(usize, f64)>>;

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

fn select_rows(logits: &[Vec<f64>], k: usize, weight: impl Fn(&[f64], &[usize], usize) -> f64) -> Routing {
    logits
        .iter()
        .map(|row| {
            let idx = argmax_top_k(row, k);
            idx.iter().enumerate().map(|(pos, &e)| (e, weight(row, &idx, pos))).collect()
        })
        .collect()
}

fn softmax_weight(row: &[f64], idx: &[usize], pos: usize) -> f64 {
    naive_softmax(&idx.iter().map(|&i| row[i]).collect::<Vec<_>>())[pos]
}

pub fn oracle_gshard(tokens: &Array2<f64>, w: &Array2<f64>, wn: &Array2<f64>, k: usize, seed: Option<u64>) -> Routing {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut logits = naive_matmul(tokens, w);
    if let Some(seed) = seed {
        let scale = naive_matmul(tokens, wn);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for (row, srow) in logits.iter_mut().zip(&scale) {
            for (l, s) in row.iter_mut().zip(srow) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *l += z * softplus(*s);
            }
        }
    }
    select_rows(&logits, k, softmax_weight)
}

pub fn oracle_sigmoid(tokens: &Array2<f64>, w: &Array2<f64>, k: usize) -> Routing {
    select_rows(&naive_matmul(tokens, w), k, |row, idx, pos| 1.0 / (1.0 + (-row[idx[pos]]).exp()))
}

pub fn oracle_xmoe(tokens: &Array2<f64>, wp: &Array2<f64>, wg: &Array2<f64>, k: usize) -> Routing {
    let proj = naive_matmul(tokens, wp);
    let experts = wg.ncols();
    let cos: Vec<Vec<f64>> = proj
        .iter()
        .map(|p| {
            let pn = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            (0..experts)
                .map(|e| {
                    let col: Vec<f64> = (0..wg.nrows()).map(|i| wg[[i, e]]).collect();
                    let cn = col.iter().map(|x| x * x).sum::<f64>().sqrt();
                    p.iter().zip(&col).map(|(a, b)| a * b).sum::<f64>() / (pn * cn)
                })
                .collect()
        })
        .collect();
    select_rows(&cos, k, softmax_weight)
}

pub fn oracle_ec(tokens: &Array2<f64>, w: &Array2<f64>, capacity_k: usize) -> Routing {
    let logits = naive_matmul(tokens, w);
    let mut out: Routing = vec![Vec::new(); tokens.nrows()];
    for e in 0..w.ncols() {
        let column: Vec<f64> = logits.iter().map(|r| r[e]).collect();
        let idx = argmax_top_k(&column, capacity_k);
        for (pos, &t) in idx.iter().enumerate() {
            out[t].push((e, softmax_weight(&column, &idx, pos)));
        }
    }
    out
}

pub fn compare_routing(got: &moeplan::workload::GateOutput, want: &Routing) -> Result<(), String> {
    if got.assignments.len() != want.len() {
        return Err(format!("{} tokens vs {}", got.assignments.len(), want.len()));
    }
    for (t, (g, w)) in got.assignments.iter().zip(want).enumerate() {
        let ge: Vec<usize> = g.iter().map(|a| a.expert).collect();
        let we: Vec<usize> = w.iter().map(|a| a.0).collect();
        if ge != we {
            return Err(format!("token {t}: experts {ge:?} vs oracle {we:?}"));
        }
        for (a, b) in g.iter().zip(w) {
            if !close(a.weight, b.1, 1e-9) {
                return Err(format!("token {t}: weight {} vs oracle {}", a.weight, b.1));
            }
        }
    }
    if got.drops() != 0 {
        return Err("gate output has drops before ordering".into());
    }
    Ok(())
}

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, integer: bool) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        if integer {
            rng.gen_range(-2i32..=2) as f64
        } else {
            rng.gen_range(-1.0..1.0)
        }
    })
}

/// Runs all four gates on one random small instance against the oracles.
/// Integer-valued instances exercise tie breaking.
pub fn check_gates_once<R: Rng>(rng: &mut R) -> Result<(), String> {
    use moeplan::workload::{ec_gate, gshard_gate, sigmoid_gate, xmoe_gate};
    let tokens_n = rng.gen_range(1..12);
    let m = rng.gen_range(2..6);
    let experts = rng.gen_range(2..8);
    let k = rng.gen_range(1..=experts);
    let integer = rng.gen_bool(0.3);
    let tokens = random_matrix(rng, tokens_n, m, integer);
    let w = random_matrix(rng, m, experts, integer);
    let wn = random_matrix(rng, m, experts, false);
    let seed = if integer { None } else { Some(rng.gen()) };
    let e = |what: &str, r: Result<(), String>| r.map_err(|m| format!("{what}: {m}"));

    e(
        "gshard",
        compare_routing(
            &gshard_gate(&tokens, &w, &wn, k, seed).map_err(|x| x.to_string())?,
            &oracle_gshard(&tokens, &w, &wn, k, seed),
        ),
    )?;
    e(
        "sigmoid",
        compare_routing(&sigmoid_gate(&tokens, &w, k).map_err(|x| x.to_string())?, &oracle_sigmoid(&tokens, &w, k)),
    )?;
    let ck = rng.gen_range(1..=tokens_n);
    e("ec", compare_routing(&ec_gate(&tokens, &w, ck).map_err(|x| x.to_string())?, &oracle_ec(&tokens, &w, ck)))?;

    let rank = rng.gen_range(1..=m);
    let tokens = random_matrix(rng, tokens_n, m, false);
    let wp = random_matrix(rng, m, rank, false);
    let wg = random_matrix(rng, rank, experts, false);
    e(
        "xmoe",
        compare_routing(
            &xmoe_gate(&tokens, &wp, &wg, k).map_err(|x| x.to_string())?,
            &oracle_xmoe(&tokens, &wp, &wg, k),
        ),
    )?;
    Ok(())
}

/// A chain of 1 to `max_layers` backward layers from the testbed grid, with
/// gradients between nothing and a few windows' worth.
pub fn random_layers<R: Rng>(
    rng: &mut R,
    sc: &SweepConfig,
    max_layers: usize,
) -> Vec<moeplan::partition::GeneralizedLayer> {
    (0..rng.gen_range(1..=max_layers))
        .map(|index| {
            let volumes = grid_volumes(rng, sc);
            let n_grad = if rng.gen_bool(0.1) { 0 } else { rng.gen_range(1u64..40_000_000) };
            moeplan::partition::GeneralizedLayer {
                index,
                volumes: TaskVolumes { n_grad: n_grad as f64, ..volumes },
                t_olp_dense: if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..30.0) },
                n_grad,
            }
        })
        .collect()
}
