use serde::{Deserialize, Serialize};

use super::config::{CapacityFactor, LayerConfig, ParallelConfig};
use crate::error::{Error, Result};

/// Per-device task sizes of one MoE layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskVolumes {
    /// Elements per AlltoAll (dispatch and combine are the same size).
    pub n_a2a: f64,
    /// Elements per ESP-AllGather.
    pub n_ag: f64,
    /// Elements per ESP-ReduceScatter.
    pub n_rs: f64,
    /// MACs of one GEMM of a full expert pass.
    pub n_exp: f64,
    /// GEMMs per expert pass.
    pub gemm_count: u32,
    /// Gradient elements of the generalized layer.
    pub n_grad: f64,
}

impl TaskVolumes {
    pub fn zero() -> Self {
        Self { n_a2a: 0.0, n_ag: 0.0, n_rs: 0.0, n_exp: 0.0, gemm_count: 2, n_grad: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_a2a", self.n_a2a),
            ("n_ag", self.n_ag),
            ("n_rs", self.n_rs),
            ("n_exp", self.n_exp),
            ("n_grad", self.n_grad),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.gemm_count == 0 {
            return Err(Error::Config("gemm_count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Tokens one expert accepts: `ceil(k * f * B * L / E)`, or `k * B * L`
/// when the capacity factor is unlimited.
pub fn capacity(cfg: &LayerConfig) -> u64 {
    match cfg.capacity_factor {
        CapacityFactor::Unlimited => cfg.top_k * cfg.tokens(),
        CapacityFactor::Finite(f) => {
            let exact = cfg.top_k as f64 * f * cfg.tokens() as f64 / cfg.experts as f64;
            // 1.0 * 3 / 3 style products must not round up through representation error
            let nearest = exact.round();
            if (exact - nearest).abs() <= 1e-9 * nearest.max(1.0) {
                nearest as u64
            } else {
                exact.ceil() as u64
            }
        }
    }
}

/// Sizes of the dispatch/gather/expert/scatter/combine stages on one device.
///
/// The device holds a `1/n_esp` shard of the `(E, T, M)` layout after the
/// attention ReduceScatter, exchanges it by AlltoAll, and gathers the full
/// input of its `E / n_ep` local experts within the ESP group.
pub fn derive_volumes(cfg: &LayerConfig, pcfg: &ParallelConfig) -> Result<TaskVolumes> {
    cfg.validate()?;
    if pcfg.n_ep == 0 || pcfg.n_esp == 0 || pcfg.n_mp == 0 {
        return Err(Error::Config("parallel group sizes must be >= 1".into()));
    }
    if !cfg.experts.is_multiple_of(pcfg.n_ep) {
        return Err(Error::Config(format!("E ({}) is not divisible by n_ep ({})", cfg.experts, pcfg.n_ep)));
    }
    let t = capacity(cfg) as f64;
    let m = cfg.embed as f64;
    let h = cfg.hidden as f64;
    let e = cfg.experts as f64;
    let local_experts = (cfg.experts / pcfg.n_ep) as f64;
    let esp = pcfg.n_esp as f64;
    let gemm_count = cfg.ffn_type.gemm_count();

    let n_a2a = e * t * m / esp;
    let n_gather = local_experts * t * m;
    let n_exp = t * m * h;
    let expert_params = local_experts * gemm_count as f64 * m * h / esp;
    let attention_params = 4.0 * m * m / pcfg.n_mp as f64;

    Ok(TaskVolumes {
        n_a2a,
        n_ag: n_gather,
        n_rs: n_gather,
        n_exp,
        gemm_count,
        n_grad: expert_params + attention_params,
    })
}
