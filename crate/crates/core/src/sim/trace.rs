//! Chrome trace-event export.

use serde::{Deserialize, Serialize};

use super::engine::Timeline;
use super::task::{Dag, Resource};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub name: String,
    pub ph: String,
    /// Microseconds.
    pub ts: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dur: Option<f64>,
    pub pid: u32,
    pub tid: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub args: Option<serde_json::Value>,
}

/// Complete events for every task plus thread-name metadata; `pid`
/// separates phases or schedules in one file.
pub fn trace_events(dag: &Dag, timeline: &Timeline, pid: u32) -> Vec<TraceEvent> {
    let mut events: Vec<TraceEvent> = Resource::ALL
        .into_iter()
        .map(|r| TraceEvent {
            name: "thread_name".into(),
            ph: "M".into(),
            ts: 0.0,
            dur: None,
            pid,
            tid: r.index() as u32,
            args: Some(serde_json::json!({ "name": r.as_str() })),
        })
        .collect();
    for t in &dag.tasks {
        events.push(TraceEvent {
            name: t.label(),
            ph: "X".into(),
            ts: timeline.start[t.id] * 1000.0,
            dur: Some(t.duration * 1000.0),
            pid,
            tid: t.resource.index() as u32,
            args: None,
        });
    }
    events
}

/// Checks the fields a trace viewer relies on.
pub fn validate_trace(events: &[TraceEvent]) -> Result<()> {
    for (i, e) in events.iter().enumerate() {
        match e.ph.as_str() {
            "X" => {
                let dur = e.dur.ok_or_else(|| Error::Contract(format!("event {i} ({}) has no dur", e.name)))?;
                if !(dur >= 0.0 && e.ts >= 0.0 && dur.is_finite() && e.ts.is_finite()) {
                    return Err(Error::Contract(format!("event {i} ({}) has bad timing", e.name)));
                }
            }
            "M" => {}
            other => return Err(Error::Contract(format!("event {i} has unsupported phase {other:?}"))),
        }
        if e.tid as usize >= Resource::ALL.len() {
            return Err(Error::Contract(format!("event {i} has unknown tid {}", e.tid)));
        }
    }
    Ok(())
}
