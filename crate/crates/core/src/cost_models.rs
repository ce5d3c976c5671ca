//! Linear `alpha + n * beta` performance models for collectives and GEMMs.
//!
//! Times are in milliseconds. Communication sizes count 4-byte elements and
//! GEMM workloads count multiply-accumulate operations.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes per element when converting message sizes.
pub const BYTES_PER_ELEMENT: f64 = 4.0;

/// What the size argument `n` of a model counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostUnit {
    #[serde(rename = "elements")]
    Elements,
    #[serde(rename = "mac-ops")]
    MacOps,
}

/// `t(n) = alpha + n * beta`, both coefficients non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearCostModel {
    #[serde(rename = "alpha_ms")]
    pub alpha: f64,
    #[serde(rename = "beta_ms_per_unit")]
    pub beta: f64,
    pub unit: CostUnit,
}

impl LinearCostModel {
    pub fn new(alpha: f64, beta: f64, unit: CostUnit) -> Result<Self> {
        let model = Self { alpha, beta, unit };
        model.validate()?;
        Ok(model)
    }

    pub fn elements(alpha: f64, beta: f64) -> Result<Self> {
        Self::new(alpha, beta, CostUnit::Elements)
    }

    pub fn zero(unit: CostUnit) -> Self {
        Self { alpha: 0.0, beta: 0.0, unit }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn predict(&self, n: f64) -> f64 {
        self.alpha + n * self.beta
    }

    /// Time of one of `r` equal chunks of an `n`-sized task.
    pub fn chunk_time(&self, n: f64, r: f64) -> Result<f64> {
        if !(r >= 1.0) {
            return Err(Error::InvalidDegree(r));
        }
        Ok(self.alpha + (n / r) * self.beta)
    }

    /// Largest size that completes within `t`; zero when `t` is below the startup cost.
    pub fn inverse(&self, t: f64) -> Result<f64> {
        if self.beta <= 0.0 {
            return Err(Error::Inversion);
        }
        Ok(((t - self.alpha) / self.beta).max(0.0))
    }

    /// Time of a launch that may be empty: no launch, no startup.
    pub fn launch_time(&self, n: f64) -> f64 {
        if n > 0.0 {
            self.predict(n)
        } else {
            0.0
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { alpha: self.alpha * factor, beta: self.beta * factor, unit: self.unit }
    }
}

/// One microbenchmark measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchSample {
    pub n: f64,
    pub t: f64,
}

impl BenchSample {
    pub fn new(n: f64, t: f64) -> Result<Self> {
        if !(n > 0.0 && n.is_finite()) || !(t > 0.0 && t.is_finite()) {
            return Err(Error::Fit(format!("sample must have n > 0 and t > 0, got n={n} t={t}")));
        }
        Ok(Self { n, t })
    }
}

/// Ordinary least squares fit of `t = alpha + n * beta`.
///
/// Negative coefficients are clamped to zero: a negative slope falls back to
/// the constant model `alpha = mean(t)`, a negative intercept to the
/// through-origin slope `sum(n t) / sum(n^2)`.
pub fn fit(samples: &[BenchSample], unit: CostUnit) -> Result<LinearCostModel> {
    if samples.len() < 2 {
        return Err(Error::Fit(format!("need at least 2 samples, got {}", samples.len())));
    }
    let count = samples.len() as f64;
    let mean_n = samples.iter().map(|s| s.n).sum::<f64>() / count;
    let mean_t = samples.iter().map(|s| s.t).sum::<f64>() / count;
    let (sxx, sxy) = samples.iter().fold((0.0, 0.0), |(sxx, sxy), s| {
        let dn = s.n - mean_n;
        (sxx + dn * dn, sxy + dn * (s.t - mean_t))
    });
    if sxx <= 0.0 {
        return Err(Error::Fit("all samples share the same size n".into()));
    }
    let mut beta = sxy / sxx;
    let mut alpha = mean_t - beta * mean_n;
    if beta < 0.0 {
        log::warn!("fitted beta {beta:.3e} < 0; clamping to 0");
        beta = 0.0;
        alpha = mean_t;
    }
    if alpha < 0.0 {
        log::warn!("fitted alpha {alpha:.3e} < 0; clamping to 0");
        alpha = 0.0;
        let snn: f64 = samples.iter().map(|s| s.n * s.n).sum();
        let snt: f64 = samples.iter().map(|s| s.n * s.t).sum();
        beta = (snt / snn).max(0.0);
    }
    LinearCostModel::new(alpha, beta, unit)
}

/// Coefficient of determination of `model` on `samples`, clamped to `[0, 1]`.
pub fn goodness_of_fit(samples: &[BenchSample], model: &LinearCostModel) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Fit(format!("need at least 2 samples, got {}", samples.len())));
    }
    let mean_t = samples.iter().map(|s| s.t).sum::<f64>() / samples.len() as f64;
    let ss_res: f64 = samples.iter().map(|s| (s.t - model.predict(s.n)).powi(2)).sum();
    let ss_tot: f64 = samples.iter().map(|s| (s.t - mean_t).powi(2)).sum();
    if ss_tot == 0.0 {
        return Ok(if ss_res == 0.0 { 1.0 } else { 0.0 });
    }
    Ok((1.0 - ss_res / ss_tot).clamp(0.0, 1.0))
}

/// The task families that carry a fitted model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostKind {
    A2a,
    Ag,
    Rs,
    Ar,
    Gemm,
}

impl CostKind {
    pub const ALL: [CostKind; 5] = [CostKind::A2a, CostKind::Ag, CostKind::Rs, CostKind::Ar, CostKind::Gemm];

    pub fn as_str(self) -> &'static str {
        match self {
            CostKind::A2a => "a2a",
            CostKind::Ag => "ag",
            CostKind::Rs => "rs",
            CostKind::Ar => "ar",
            CostKind::Gemm => "gemm",
        }
    }

    pub fn unit(self) -> CostUnit {
        match self {
            CostKind::Gemm => CostUnit::MacOps,
            _ => CostUnit::Elements,
        }
    }
}

impl fmt::Display for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CostKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        CostKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown kind {s:?} (expected one of a2a, ag, rs, ar, gemm)"))
    }
}

/// Fitted cost models of one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProfile {
    pub name: String,
    pub a2a: LinearCostModel,
    pub ag: LinearCostModel,
    pub rs: LinearCostModel,
    pub ar: LinearCostModel,
    pub gemm: LinearCostModel,
}

impl ClusterProfile {
    /// 48 x A6000 cluster coefficients.
    pub fn testbed_a() -> Self {
        Self {
            name: "testbed-a".into(),
            a2a: comm(2.87e-1, 2.21e-7),
            ag: comm(3.37e-1, 2.32e-6),
            rs: comm(3.95e-1, 2.34e-7),
            ar: comm(5.11e-1, 4.95e-6),
            gemm: LinearCostModel { alpha: 4.26e-2, beta: 2.29e-11, unit: CostUnit::MacOps },
        }
    }

    /// 32 x RTX2080Ti cluster coefficients.
    pub fn testbed_b() -> Self {
        Self {
            name: "testbed-b".into(),
            a2a: comm(1.75e-1, 3.06e-7),
            ag: comm(3.20e-2, 1.68e-7),
            rs: comm(3.91e-2, 1.67e-7),
            ar: comm(8.37e-2, 5.99e-7),
            gemm: LinearCostModel { alpha: 9.24e-2, beta: 4.42e-11, unit: CostUnit::MacOps },
        }
    }

    pub fn model(&self, kind: CostKind) -> &LinearCostModel {
        match kind {
            CostKind::A2a => &self.a2a,
            CostKind::Ag => &self.ag,
            CostKind::Rs => &self.rs,
            CostKind::Ar => &self.ar,
            CostKind::Gemm => &self.gemm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for kind in CostKind::ALL {
            self.model(kind)
                .validate()
                .map_err(|e| Error::Config(format!("profile {:?}, model {kind}: {e}", self.name)))?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let profile: Self = serde_json::from_str(text)?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }
}

fn comm(alpha: f64, beta: f64) -> LinearCostModel {
    LinearCostModel { alpha, beta, unit: CostUnit::Elements }
}

pub type BenchSet = BTreeMap<CostKind, Vec<BenchSample>>;

/// Parses a `kind,n,t_ms` benchmark CSV. Line numbers in errors are 1-based
/// and count the header.
pub fn parse_bench_csv<R: Read>(reader: R) -> Result<BenchSet> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?.clone();
    let expected = ["kind", "n", "t_ms"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Parse { line: 1, msg: format!("expected header kind,n,t_ms, got {:?}", headers) });
    }
    let mut out = BenchSet::new();
    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if record.len() != 3 {
            return Err(Error::Parse { line, msg: format!("expected 3 fields, got {}", record.len()) });
        }
        let kind: CostKind = record[0].parse().map_err(|msg| Error::Parse { line, msg })?;
        let n: f64 = record[1].parse().map_err(|_| Error::Parse { line, msg: format!("bad n {:?}", &record[1]) })?;
        let t: f64 = record[2].parse().map_err(|_| Error::Parse { line, msg: format!("bad t_ms {:?}", &record[2]) })?;
        let sample = BenchSample::new(n, t).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        out.entry(kind).or_default().push(sample);
    }
    Ok(out)
}

/// Per-kind fit quality alongside the fitted profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub profile: ClusterProfile,
    pub r_squared: BTreeMap<CostKind, f64>,
}

/// Fits all five models; every kind must have samples.
pub fn fit_profile(name: &str, benches: &BenchSet) -> Result<FitReport> {
    let mut models = BTreeMap::new();
    let mut r_squared = BTreeMap::new();
    for kind in CostKind::ALL {
        let samples = benches.get(&kind).ok_or_else(|| Error::Fit(format!("no samples for kind {kind}")))?;
        let model = fit(samples, kind.unit()).map_err(|e| Error::Fit(format!("{kind}: {e}")))?;
        r_squared.insert(kind, goodness_of_fit(samples, &model)?);
        models.insert(kind, model);
    }
    let profile = ClusterProfile {
        name: name.to_string(),
        a2a: models[&CostKind::A2a],
        ag: models[&CostKind::Ag],
        rs: models[&CostKind::Rs],
        ar: models[&CostKind::Ar],
        gemm: models[&CostKind::Gemm],
    };
    Ok(FitReport { profile, r_squared })
}
