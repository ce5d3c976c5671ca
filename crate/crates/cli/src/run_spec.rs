//! Resolution of run settings: flags, then environment, then config file.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use moeplan::cost_models::ClusterProfile;
use moeplan::model::{ModelSpec, PlanOptions};
use moeplan::partition::DeParams;
use moeplan::pipeline::DEFAULT_R_MAX;
use serde::Deserialize;

use crate::RunArgs;

pub const ENV_R_MAX: &str = "MOEPLAN_R_MAX";
pub const ENV_SEED: &str = "MOEPLAN_SEED";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeFile {
    population: Option<usize>,
    generations: Option<u32>,
    f: Option<f64>,
    cr: Option<f64>,
}

/// JSON form of a run configuration. Relative paths resolve against the
/// file's directory.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    profile: Option<String>,
    model: Option<PathBuf>,
    r_max: Option<u32>,
    seed: Option<u64>,
    #[serde(default)]
    de: DeFile,
}

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub profile: ClusterProfile,
    pub model: ModelSpec,
    pub options: PlanOptions,
}

fn env_parse<T: std::str::FromStr>(name: &str) -> Result<Option<T>> {
    match std::env::var(name) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| anyhow!(config_error(format!("bad value {v:?} for {name}")))),
        Err(_) => Ok(None),
    }
}

pub fn config_error(msg: String) -> moeplan::Error {
    moeplan::Error::Config(msg)
}

pub fn load_profile(arg: &str, base: &Path) -> Result<ClusterProfile> {
    match arg {
        "testbed-a" => Ok(ClusterProfile::testbed_a()),
        "testbed-b" => Ok(ClusterProfile::testbed_b()),
        path => {
            let p = base.join(path);
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading profile {}", p.display()))?;
            ClusterProfile::from_json(&text).with_context(|| format!("profile {}", p.display()))
        }
    }
}

pub fn env_r_max() -> Result<Option<u32>> {
    env_parse(ENV_R_MAX)
}

pub fn env_seed() -> Result<Option<u64>> {
    env_parse(ENV_SEED)
}

pub fn resolve(args: &RunArgs) -> Result<RunSpec> {
    let (file, base) = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let file: RunFile =
                serde_json::from_str(&text).map_err(|e| config_error(format!("config {}: {e}", path.display())))?;
            (file, path.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (RunFile::default(), PathBuf::new()),
    };

    let profile = match (&args.profile, &file.profile) {
        (Some(p), _) => load_profile(p, Path::new(""))?,
        (None, Some(p)) => load_profile(p, &base)?,
        (None, None) => return Err(config_error("no cluster profile given (--profile or config)".into()).into()),
    };
    let model_path = match (&args.model, &file.model) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => base.join(p),
        (None, None) => return Err(config_error("no model given (--model or config)".into()).into()),
    };
    let text =
        std::fs::read_to_string(&model_path).with_context(|| format!("reading model {}", model_path.display()))?;
    let model = ModelSpec::from_json(&text).with_context(|| format!("model {}", model_path.display()))?;

    let r_max = args.r_max.or(env_r_max()?).or(file.r_max).unwrap_or(DEFAULT_R_MAX);
    if r_max == 0 {
        return Err(config_error("r_max must be >= 1".into()).into());
    }
    let seed = args.seed.or(env_seed()?).or(file.seed).unwrap_or(0);
    let defaults = DeParams::default();
    let de = DeParams {
        population: args.de_population.or(file.de.population),
        generations: args.de_generations.or(file.de.generations).unwrap_or(defaults.generations),
        f: args.de_f.or(file.de.f).unwrap_or(defaults.f),
        cr: args.de_cr.or(file.de.cr).unwrap_or(defaults.cr),
        seed,
    };
    de.validate()?;
    Ok(RunSpec { profile, model, options: PlanOptions { r_max, de } })
}
