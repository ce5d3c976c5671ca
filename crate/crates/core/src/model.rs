//! Whole-model planning: volumes, partition, and per-layer degrees.

use serde::{Deserialize, Serialize};

use crate::cost_models::ClusterProfile;
use crate::error::{Error, Result};
use crate::partition::{
    build_partition_plan, simulate_plan, simulate_strategy, DeParams, GeneralizedLayer, GradStrategy, PartitionPlan,
    LINA_CHUNK_ELEMENTS,
};
use crate::pipeline::{plan_layer, PipelinePlan, DEFAULT_R_MAX};
use crate::workload::{derive_volumes, LayerSpec, ParallelConfig, TaskVolumes};

/// A model as a list of MoE layers in forward order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub name: String,
    pub parallel: ParallelConfig,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.parallel.validate()?;
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.to_config().map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
        }
        Ok(())
    }

    /// Generalized layers in backward traversal order.
    pub fn generalized_layers(&self) -> Result<Vec<GeneralizedLayer>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.layers.len());
        for (index, spec) in self.layers.iter().rev().enumerate() {
            let volumes = derive_volumes(&spec.to_config()?, &self.parallel)?;
            out.push(GeneralizedLayer {
                index,
                volumes,
                t_olp_dense: spec.dense_ms,
                n_grad: volumes.n_grad.round() as u64,
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub r_max: u32,
    pub de: DeParams,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self { r_max: DEFAULT_R_MAX, de: DeParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    /// Position in backward traversal order.
    pub index: usize,
    pub volumes: TaskVolumes,
    pub plan: PipelinePlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPlan {
    pub model: String,
    pub profile: String,
    pub r_max: u32,
    pub de: DeParams,
    pub layers: Vec<LayerPlan>,
    pub partition: PartitionPlan,
    /// Simulated backward pass of all layers under the partition.
    pub simulated_backward_ms: f64,
}

pub fn plan_model(spec: &ModelSpec, profile: &ClusterProfile, opts: &PlanOptions) -> Result<ModelPlan> {
    profile.validate()?;
    let layers = spec.generalized_layers()?;
    let partition = build_partition_plan(&layers, profile, &opts.de, opts.r_max)?;
    let plans = layers
        .iter()
        .zip(&partition.layers)
        .map(|(l, p)| {
            Ok(LayerPlan {
                index: l.index,
                volumes: l.volumes,
                plan: plan_layer(&l.volumes, profile, p.t_gar, opts.r_max)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let simulated_backward_ms = simulate_plan(&layers, &partition, profile, opts.r_max)?;
    Ok(ModelPlan {
        model: spec.name.clone(),
        profile: profile.name.clone(),
        r_max: opts.r_max,
        de: opts.de,
        layers: plans,
        partition,
        simulated_backward_ms,
    })
}

/// Simulated backward makespans of the partition plan and its baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackwardComparison {
    pub partitioned: f64,
    pub no_partition: f64,
    pub fixed_chunks: f64,
    pub no_overlap: f64,
}

pub fn compare_backward(
    layers: &[GeneralizedLayer],
    plan: &PartitionPlan,
    profile: &ClusterProfile,
    r_max: u32,
) -> Result<BackwardComparison> {
    Ok(BackwardComparison {
        partitioned: simulate_plan(layers, plan, profile, r_max)?,
        no_partition: simulate_strategy(layers, GradStrategy::NoPartition, profile, r_max)?,
        fixed_chunks: simulate_strategy(
            layers,
            GradStrategy::FixedChunks { elements: LINA_CHUNK_ELEMENTS },
            profile,
            r_max,
        )?,
        no_overlap: simulate_strategy(layers, GradStrategy::NoOverlap, profile, r_max)?,
    })
}
