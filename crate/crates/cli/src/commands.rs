use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use log::info;
use moeplan::cost_models::{fit_profile, parse_bench_csv, CostKind};
use moeplan::model::{plan_model, ModelPlan};
use moeplan::pipeline::PhaseInputs;
use moeplan::sim::{build_layer_dag, simulate as run_dag, trace_events, validate_trace, Resource, Style, TraceEvent};
use moeplan::sweep::{run_sweep, summarize, write_csv, SweepConfig, SweepGrid};
use serde::Serialize;

use crate::run_spec::{config_error, env_r_max, env_seed, load_profile, resolve};
use crate::RunArgs;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_FIT_QUALITY: u8 = 3;
pub const EXIT_INTERNAL: u8 = 4;

pub fn exit_code(e: &anyhow::Error) -> u8 {
    use moeplan::Error as E;
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::Contract(_) | E::Simulation(_) | E::Scoring(_) | E::Inversion => EXIT_INTERNAL,
                _ => EXIT_CONFIG,
            };
        }
    }
    EXIT_CONFIG
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

pub fn fit(bench: &Path, out: &Path, name: &str, min_r2: f64) -> Result<ExitCode> {
    let file = fs::File::open(bench).with_context(|| format!("opening {}", bench.display()))?;
    let benches = parse_bench_csv(file).with_context(|| format!("benchmark file {}", bench.display()))?;
    let report = fit_profile(name, &benches)?;
    fs::write(out, report.profile.to_json()).with_context(|| format!("writing {}", out.display()))?;
    println!("{}", serde_json::to_string_pretty(&report.r_squared)?);
    let poor: Vec<CostKind> = report.r_squared.iter().filter(|(_, &r2)| !(r2 >= min_r2)).map(|(&k, _)| k).collect();
    if poor.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for k in poor {
            eprintln!("fit quality: {k} has r^2 {:.6} < {min_r2}", report.r_squared[&k]);
        }
        Ok(ExitCode::from(EXIT_FIT_QUALITY))
    }
}

pub fn plan(args: &RunArgs, out_dir: Option<&Path>) -> Result<ExitCode> {
    let spec = resolve(args)?;
    info!("planning {} layers on {}", spec.model.layers.len(), spec.profile.name);
    let plan = plan_model(&spec.model, &spec.profile, &spec.options)?;
    plan.partition.check(&spec.model.generalized_layers()?, &spec.profile.ar)?;
    match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            fs::write(dir.join("plan.json"), to_json(&plan)?)?;
            fs::write(dir.join("partition.json"), to_json(&plan.partition)?)?;
        }
        None => print!("{}", to_json(&plan)?),
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Serialize)]
struct PhaseReport {
    r: u32,
    makespan_ms: f64,
    busy_ms: f64,
    utilization: [f64; 3],
}

#[derive(Debug, Serialize)]
struct LayerReport {
    /// Position in backward order.
    index: usize,
    fwd: PhaseReport,
    bwd: PhaseReport,
}

#[derive(Debug, Serialize)]
struct SimReport {
    style: String,
    profile: String,
    resources: [&'static str; 3],
    layers: Vec<LayerReport>,
    total_fwd_ms: f64,
    total_bwd_ms: f64,
}

fn run_phase(
    style: Style,
    inputs: &PhaseInputs,
    r: u32,
    gar: &[f64],
    pid: u32,
    events: &mut Vec<TraceEvent>,
) -> Result<PhaseReport> {
    let dag = build_layer_dag(style, inputs, r, gar)?;
    let tl = run_dag(&dag)?;
    events.extend(trace_events(&dag, &tl, pid));
    Ok(PhaseReport {
        r,
        makespan_ms: tl.makespan,
        busy_ms: dag.total_duration(),
        utilization: Resource::ALL.map(|res| tl.utilization(res)),
    })
}

pub fn simulate(
    args: &RunArgs,
    style: &str,
    plan_path: Option<&Path>,
    degree: Option<u32>,
    trace: Option<&Path>,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let style: Style = style.parse()?;
    let spec = resolve(args)?;
    if degree == Some(0) {
        return Err(config_error("--degree must be >= 1".into()).into());
    }
    let plan: ModelPlan = match plan_path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading plan {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| config_error(format!("plan {}: {e}", p.display())))?
        }
        None => plan_model(&spec.model, &spec.profile, &spec.options)?,
    };
    if plan.profile != spec.profile.name {
        return Err(
            config_error(format!("plan was made for profile {:?}, not {:?}", plan.profile, spec.profile.name)).into()
        );
    }
    let layers = spec.model.generalized_layers()?;
    if plan.layers.len() != layers.len() || plan.partition.layers.len() != layers.len() {
        return Err(config_error(format!("plan has {} layers, model has {}", plan.layers.len(), layers.len())).into());
    }

    let ar = spec.profile.ar;
    let mut events = Vec::new();
    let mut reports = Vec::with_capacity(layers.len());
    for (i, (lp, part)) in plan.layers.iter().zip(&plan.partition.layers).enumerate() {
        if lp.volumes != layers[i].volumes {
            return Err(config_error(format!("plan layer {i} volumes differ from the model")).into());
        }
        let gar: Vec<f64> =
            [part.moe_slot, part.x_g].into_iter().filter(|&n| n > 0).map(|n| ar.launch_time(n as f64)).collect();
        let fwd = PhaseInputs::forward(lp.volumes, spec.profile.clone());
        let bwd = PhaseInputs::backward(lp.volumes, spec.profile.clone(), gar.iter().sum());
        let pid = 2 * i as u32;
        reports.push(LayerReport {
            index: i,
            fwd: run_phase(style, &fwd, degree.unwrap_or(lp.plan.r_fwd), &[], pid, &mut events)?,
            bwd: run_phase(style, &bwd, degree.unwrap_or(lp.plan.r_bwd), &gar, pid + 1, &mut events)?,
        });
    }
    let report = SimReport {
        style: style.as_str().to_string(),
        profile: spec.profile.name.clone(),
        resources: Resource::ALL.map(Resource::as_str),
        total_fwd_ms: reports.iter().map(|l| l.fwd.makespan_ms).sum(),
        total_bwd_ms: reports.iter().map(|l| l.bwd.makespan_ms).sum(),
        layers: reports,
    };
    if let Some(p) = trace {
        validate_trace(&events)?;
        let doc = serde_json::json!({ "traceEvents": events, "displayTimeUnit": "ms" });
        fs::write(p, to_json(&doc)?).with_context(|| format!("writing {}", p.display()))?;
    }
    write_or_print(out, &to_json(&report)?)?;
    Ok(ExitCode::SUCCESS)
}

pub struct SweepOpts {
    pub testbed: String,
    pub profile: Option<String>,
    pub grid: Option<PathBuf>,
    pub r_max: Option<u32>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub yes: bool,
    pub out: Option<PathBuf>,
    pub summary: Option<PathBuf>,
}

pub fn sweep(o: &SweepOpts) -> Result<ExitCode> {
    let mut sc = match o.testbed.to_ascii_lowercase().as_str() {
        "a" | "testbed-a" => SweepConfig::testbed_a(),
        "b" | "testbed-b" => SweepConfig::testbed_b(),
        other => return Err(config_error(format!("unknown testbed {other:?} (a or b)")).into()),
    };
    if let Some(p) = &o.profile {
        sc.profile = load_profile(p, Path::new(""))?;
    }
    if let Some(p) = &o.grid {
        let text = fs::read_to_string(p).with_context(|| format!("reading grid {}", p.display()))?;
        sc.grid =
            serde_json::from_str::<SweepGrid>(&text).map_err(|e| config_error(format!("grid {}: {e}", p.display())))?;
    }
    if let Some(r) = o.r_max.or(env_r_max()?) {
        if r == 0 {
            return Err(config_error("r_max must be >= 1".into()).into());
        }
        sc.r_max = r;
    }
    if let Some(s) = o.seed.or(env_seed()?) {
        sc.de.seed = s;
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = o.jobs {
        if j == 0 {
            return Err(config_error("--jobs must be >= 1".into()).into());
        }
        pool = pool.num_threads(j);
    }
    let pool = pool.build()?;
    info!("sweeping {} cases", sc.grid.len());
    let rows = pool.install(|| run_sweep(&sc, o.yes))?;
    if let Some(p) = &o.out {
        let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        write_csv(&rows, std::io::BufWriter::new(f))?;
    }
    write_or_print(o.summary.as_deref(), &to_json(&summarize(&rows))?)?;
    Ok(ExitCode::SUCCESS)
}
