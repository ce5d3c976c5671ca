use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

/// Capacity factor `f`; `Unlimited` means no token is ever dropped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CapacityFactor {
    Finite(f64),
    Unlimited,
}

impl Serialize for CapacityFactor {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            CapacityFactor::Finite(f) => serializer.serialize_f64(*f),
            CapacityFactor::Unlimited => serializer.serialize_str("*"),
        }
    }
}

impl<'de> Deserialize<'de> for CapacityFactor {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct FactorVisitor;

        impl Visitor<'_> for FactorVisitor {
            type Value = CapacityFactor;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive number or \"*\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Self::Value, E> {
                Ok(CapacityFactor::Finite(v))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Self::Value, E> {
                Ok(CapacityFactor::Finite(v as f64))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Self::Value, E> {
                Ok(CapacityFactor::Finite(v as f64))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Self::Value, E> {
                if v == "*" {
                    Ok(CapacityFactor::Unlimited)
                } else {
                    v.parse().map(CapacityFactor::Finite).map_err(|_| E::custom(format!("bad capacity factor {v:?}")))
                }
            }
        }

        deserializer.deserialize_any(FactorVisitor)
    }
}

impl fmt::Display for CapacityFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CapacityFactor::Finite(v) => write!(f, "{v}"),
            CapacityFactor::Unlimited => f.write_str("*"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnType {
    #[serde(alias = "simply")]
    Simple,
    Mixtral,
}

impl FfnType {
    /// GEMMs in one expert pass.
    pub fn gemm_count(self) -> u32 {
        match self {
            FfnType::Simple => 2,
            FfnType::Mixtral => 3,
        }
    }
}

impl fmt::Display for FfnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FfnType::Simple => "simple",
            FfnType::Mixtral => "mixtral",
        })
    }
}

/// Shape of one MoE layer as seen by one device.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerConfig {
    pub batch: u64,
    pub seq_len: u64,
    pub embed: u64,
    pub hidden: u64,
    pub experts: u64,
    pub top_k: u64,
    pub capacity_factor: CapacityFactor,
    pub n_heads: u64,
    pub ffn_type: FfnType,
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("B", self.batch),
            ("L", self.seq_len),
            ("M", self.embed),
            ("H", self.hidden),
            ("E", self.experts),
            ("k", self.top_k),
            ("n_heads", self.n_heads),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.top_k > self.experts {
            return Err(Error::Config(format!("k = {} exceeds E = {}", self.top_k, self.experts)));
        }
        if let CapacityFactor::Finite(f) = self.capacity_factor {
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::Config(format!("capacity factor must be > 0, got {f}")));
            }
        }
        Ok(())
    }

    pub fn tokens(&self) -> u64 {
        self.batch * self.seq_len
    }
}

/// JSON form of a layer: the configuration-table fields plus expert count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(rename = "B")]
    pub batch: u64,
    pub n_heads: u64,
    #[serde(rename = "L")]
    pub seq_len: u64,
    #[serde(rename = "M")]
    pub embed: u64,
    pub hscale: u64,
    pub f: CapacityFactor,
    pub ffn_type: FfnType,
    #[serde(rename = "E")]
    pub experts: u64,
    #[serde(default = "default_top_k")]
    pub k: u64,
    /// Measured dense overlappable time of the generalized layer.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub dense_ms: f64,
}

fn default_top_k() -> u64 {
    2
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

impl LayerSpec {
    pub fn to_config(&self) -> Result<LayerConfig> {
        if !(self.dense_ms >= 0.0 && self.dense_ms.is_finite()) {
            return Err(Error::Config(format!("dense_ms must be >= 0, got {}", self.dense_ms)));
        }
        let cfg = LayerConfig {
            batch: self.batch,
            seq_len: self.seq_len,
            embed: self.embed,
            hidden: self.hscale * self.embed,
            experts: self.experts,
            top_k: self.k,
            capacity_factor: self.f,
            n_heads: self.n_heads,
            ffn_type: self.ffn_type,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parallel group sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelConfig {
    #[serde(rename = "P")]
    pub devices: u64,
    pub n_dp: u64,
    pub n_mp: u64,
    pub n_ep: u64,
    pub n_esp: u64,
    pub gpus_per_node: u64,
}

impl ParallelConfig {
    /// Six nodes of eight GPUs, MP and ESP inside a node.
    pub fn testbed_a() -> Self {
        Self { devices: 48, n_dp: 6, n_mp: 8, n_ep: 6, n_esp: 8, gpus_per_node: 8 }
    }

    /// Eight nodes of four GPUs, MP and ESP inside a node.
    pub fn testbed_b() -> Self {
        Self { devices: 32, n_dp: 8, n_mp: 4, n_ep: 8, n_esp: 4, gpus_per_node: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        let groups = [
            ("P", self.devices),
            ("n_dp", self.n_dp),
            ("n_mp", self.n_mp),
            ("n_ep", self.n_ep),
            ("n_esp", self.n_esp),
            ("gpus_per_node", self.gpus_per_node),
        ];
        for (name, v) in groups {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.n_mp != self.gpus_per_node || self.n_esp != self.gpus_per_node {
            return Err(Error::Config(format!(
                "n_mp ({}) and n_esp ({}) must equal gpus_per_node ({})",
                self.n_mp, self.n_esp, self.gpus_per_node
            )));
        }
        if !self.devices.is_multiple_of(self.gpus_per_node) {
            return Err(Error::Config(format!(
                "P ({}) must be divisible by gpus_per_node ({})",
                self.devices, self.gpus_per_node
            )));
        }
        Ok(())
    }
}
