//! Non-delay list scheduling on three serialized resources.
//!
//! Whenever a resource is free it starts the ready task with the smallest
//! `(priority, ready time, chunk, id)`. Static issue orders are expressed by
//! the graph builders as ordinary dependencies.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::task::{Dag, Resource, TaskId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub makespan: f64,
    /// Busy intervals per resource in start order, indexed by `Resource::index`.
    pub busy: [Vec<(f64, f64)>; 3],
    /// Per resource: time in `[0, makespan]` not covered by its tasks.
    pub idle: [f64; 3],
}

impl Timeline {
    pub fn busy_time(&self, res: Resource) -> f64 {
        self.busy[res.index()].iter().map(|(s, e)| e - s).sum()
    }

    pub fn utilization(&self, res: Resource) -> f64 {
        if self.makespan > 0.0 {
            self.busy_time(res) / self.makespan
        } else {
            0.0
        }
    }
}

fn sort_key(dag: &Dag, ready_at: &[f64], id: TaskId) -> (u8, f64, u32, TaskId) {
    let t = &dag.tasks[id];
    (t.priority, ready_at[id], t.chunk.unwrap_or(u32::MAX), id)
}

fn key_cmp(a: &(u8, f64, u32, TaskId), b: &(u8, f64, u32, TaskId)) -> Ordering {
    a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3))
}

pub fn simulate(dag: &Dag) -> Result<Timeline> {
    dag.validate()?;
    dag.topo_order()?;
    let n = dag.len();
    let mut remaining = vec![0usize; n];
    let mut succ: Vec<Vec<TaskId>> = vec![Vec::new(); n];
    for t in &dag.tasks {
        remaining[t.id] = t.deps.len();
        for &d in &t.deps {
            succ[d].push(t.id);
        }
    }
    let mut ready_at = vec![0.0f64; n];
    let mut start = vec![f64::NAN; n];
    let mut end = vec![f64::NAN; n];
    let mut ready: [Vec<TaskId>; 3] = Default::default();
    for t in &dag.tasks {
        if remaining[t.id] == 0 {
            ready[t.resource.index()].push(t.id);
        }
    }
    let mut running: [Option<(TaskId, f64)>; 3] = [None; 3];
    let mut now = 0.0f64;
    let mut done = 0usize;

    while done < n {
        for res in Resource::ALL {
            let r = res.index();
            if running[r].is_some() || ready[r].is_empty() {
                continue;
            }
            let (pos, _) = ready[r]
                .iter()
                .enumerate()
                .map(|(pos, &id)| (pos, sort_key(dag, &ready_at, id)))
                .min_by(|a, b| key_cmp(&a.1, &b.1))
                .expect("non-empty ready list");
            let id = ready[r].swap_remove(pos);
            start[id] = now;
            end[id] = now + dag.tasks[id].duration;
            running[r] = Some((id, end[id]));
        }

        let next = running
            .iter()
            .flatten()
            .map(|(_, e)| *e)
            .min_by(f64::total_cmp)
            .ok_or_else(|| Error::Simulation("no runnable task; graph is inconsistent".into()))?;
        now = next;
        for r in 0..3 {
            if let Some((id, e)) = running[r] {
                if e == now {
                    running[r] = None;
                    done += 1;
                    for &s in &succ[id] {
                        remaining[s] -= 1;
                        ready_at[s] = ready_at[s].max(now);
                        if remaining[s] == 0 {
                            ready[dag.tasks[s].resource.index()].push(s);
                        }
                    }
                }
            }
        }
    }

    let makespan = end.iter().copied().fold(0.0, f64::max);
    let mut busy: [Vec<(f64, f64)>; 3] = Default::default();
    for t in &dag.tasks {
        busy[t.resource.index()].push((start[t.id], end[t.id]));
    }
    let mut idle = [0.0; 3];
    for r in 0..3 {
        busy[r].sort_by(|a, b| a.0.total_cmp(&b.0));
        idle[r] = makespan - busy[r].iter().map(|(s, e)| e - s).sum::<f64>();
    }
    Ok(Timeline { start, end, makespan, busy, idle })
}

/// Idle time of `res` between the first task start and the last `res` task end.
pub fn idle_within_moe(timeline: &Timeline, res: Resource) -> f64 {
    let intervals = &timeline.busy[res.index()];
    let Some(last_end) = intervals.iter().map(|(_, e)| *e).reduce(f64::max) else {
        return 0.0;
    };
    let first = timeline.start.iter().copied().fold(f64::INFINITY, f64::min);
    let busy: f64 = intervals.iter().map(|(s, e)| e - s).sum();
    (last_end - first - busy).max(0.0)
}
