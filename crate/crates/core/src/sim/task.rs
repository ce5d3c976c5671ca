use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TaskId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    InterLink,
    IntraLink,
    Compute,
}

impl Resource {
    pub const ALL: [Resource; 3] = [Resource::InterLink, Resource::IntraLink, Resource::Compute];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Resource::InterLink => "inter_link",
            Resource::IntraLink => "intra_link",
            Resource::Compute => "compute",
        }
    }
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    A2aDispatch,
    Allgather,
    Expert,
    Reducescatter,
    A2aCombine,
    GradAllreduce,
    DenseCompute,
}

impl TaskKind {
    pub fn resource(self) -> Resource {
        match self {
            TaskKind::A2aDispatch | TaskKind::A2aCombine | TaskKind::GradAllreduce => Resource::InterLink,
            TaskKind::Allgather | TaskKind::Reducescatter => Resource::IntraLink,
            TaskKind::Expert | TaskKind::DenseCompute => Resource::Compute,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            TaskKind::A2aDispatch => "D",
            TaskKind::Allgather => "AG",
            TaskKind::Expert => "E",
            TaskKind::Reducescatter => "RS",
            TaskKind::A2aCombine => "C",
            TaskKind::GradAllreduce => "GAR",
            TaskKind::DenseCompute => "DENSE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub kind: TaskKind,
    pub resource: Resource,
    pub duration: f64,
    pub deps: Vec<TaskId>,
    pub chunk: Option<u32>,
    /// Generalized layer in backward order, for multi-layer graphs.
    pub layer: Option<u32>,
    /// Lower runs first among simultaneously ready tasks.
    pub priority: u8,
}

impl Task {
    pub fn label(&self) -> String {
        let mut s = self.kind.short_name().to_string();
        if let Some(c) = self.chunk {
            s.push_str(&c.to_string());
        }
        if let Some(l) = self.layer {
            s.push_str(&format!("@L{l}"));
        }
        s
    }
}

/// A task graph under construction. Ids are insertion indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dag {
    pub tasks: Vec<Task>,
}

impl Dag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Adds a task on its kind's default resource.
    pub fn add(&mut self, kind: TaskKind, duration: f64, deps: &[TaskId], chunk: Option<u32>) -> TaskId {
        let id = self.tasks.len();
        self.tasks.push(Task {
            id,
            kind,
            resource: kind.resource(),
            duration,
            deps: deps.to_vec(),
            chunk,
            layer: None,
            priority: 0,
        });
        id
    }

    pub fn add_dep(&mut self, task: TaskId, dep: TaskId) {
        let deps = &mut self.tasks[task].deps;
        if !deps.contains(&dep) {
            deps.push(dep);
        }
    }

    pub fn total_duration(&self) -> f64 {
        self.tasks.iter().map(|t| t.duration).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.tasks.iter().enumerate() {
            if t.id != i {
                return Err(Error::Simulation(format!("task at position {i} has id {}", t.id)));
            }
            if !(t.duration >= 0.0 && t.duration.is_finite()) {
                return Err(Error::Simulation(format!("task {} has duration {}", t.label(), t.duration)));
            }
            if let Some(d) = t.deps.iter().find(|d| **d >= self.tasks.len()) {
                return Err(Error::Simulation(format!("task {} depends on unknown task {d}", t.label())));
            }
        }
        Ok(())
    }

    /// Kahn order, or a simulation error naming a task on a cycle.
    pub fn topo_order(&self) -> Result<Vec<TaskId>> {
        let n = self.tasks.len();
        let mut indeg = vec![0usize; n];
        let mut succ: Vec<Vec<TaskId>> = vec![Vec::new(); n];
        for t in &self.tasks {
            for &d in &t.deps {
                indeg[t.id] += 1;
                succ[d].push(t.id);
            }
        }
        let mut queue: Vec<TaskId> = (0..n).filter(|i| indeg[*i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(u) = queue.pop() {
            order.push(u);
            for &v in &succ[u] {
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    queue.push(v);
                }
            }
        }
        if order.len() < n {
            let stuck = (0..n).find(|i| indeg[*i] > 0).unwrap_or(0);
            return Err(Error::Simulation(format!("dependency cycle through task {}", self.tasks[stuck].label())));
        }
        Ok(order)
    }
}

/// Schedule styles that can be built for one MoE layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Fsmoe,
    FsmoeNoIio,
    Pipemoe,
    Sequential,
}

impl Style {
    pub const ALL: [Style; 4] = [Style::Fsmoe, Style::FsmoeNoIio, Style::Pipemoe, Style::Sequential];

    pub fn as_str(self) -> &'static str {
        match self {
            Style::Fsmoe => "fsmoe",
            Style::FsmoeNoIio => "fsmoe_no_iio",
            Style::Pipemoe => "pipemoe",
            Style::Sequential => "sequential",
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Style::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown schedule style {s:?}")))
    }
}
