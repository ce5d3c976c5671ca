//! Token layout transforms between `(B*L, M)` and `(E, T, M)`.

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use super::gating::GateOutput;
use crate::error::{Error, Result};

/// Choices that overflowed expert capacity.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReport {
    /// (token, expert) pairs in token order.
    pub dropped: Vec<(usize, usize)>,
    /// Real tokens placed per expert.
    pub load: Vec<usize>,
}

/// Groups tokens by destination expert in token order. Row `e` holds at
/// most `capacity` tokens, zero-padded; later arrivals are dropped and
/// marked in `gate.drop_mask`.
pub fn order(tokens: &Array2<f64>, gate: &mut GateOutput, capacity: usize) -> Result<(Array3<f64>, DropReport)> {
    if gate.num_tokens() != tokens.nrows() {
        return Err(Error::Shape(format!("gate covers {} tokens, input has {}", gate.num_tokens(), tokens.nrows())));
    }
    let experts = gate.num_experts;
    let mut layout = Array3::zeros((experts, capacity, tokens.ncols()));
    let mut report = DropReport { dropped: Vec::new(), load: vec![0; experts] };
    for (t, choices) in gate.assignments.iter().enumerate() {
        for (c, a) in choices.iter().enumerate() {
            if a.expert >= experts {
                return Err(Error::Shape(format!("token {t} routed to expert {} of {experts}", a.expert)));
            }
            let slot = report.load[a.expert];
            if slot < capacity {
                layout.slice_mut(s![a.expert, slot, ..]).assign(&tokens.row(t));
                report.load[a.expert] += 1;
                gate.drop_mask[t][c] = false;
            } else {
                gate.drop_mask[t][c] = true;
                report.dropped.push((t, a.expert));
            }
        }
    }
    Ok((layout, report))
}

/// Inverse of [`order`]: every token sums `weight * expert_out[slot]` over
/// its surviving choices. Slots are replayed from the gate and its drop mask.
pub fn i_order(expert_out: &Array3<f64>, gate: &GateOutput) -> Result<Array2<f64>> {
    let (experts, capacity, m) = expert_out.dim();
    if experts != gate.num_experts {
        return Err(Error::Shape(format!("layout has {experts} experts, gate has {}", gate.num_experts)));
    }
    let mut out = Array2::zeros((gate.num_tokens(), m));
    let mut next = vec![0usize; experts];
    for (t, choices) in gate.assignments.iter().enumerate() {
        for (c, a) in choices.iter().enumerate() {
            if gate.drop_mask[t][c] {
                continue;
            }
            let slot = next[a.expert];
            if slot >= capacity {
                return Err(Error::Shape(format!(
                    "expert {} has more surviving tokens than capacity {capacity}",
                    a.expert
                )));
            }
            next[a.expert] += 1;
            out.row_mut(t).scaled_add(a.weight, &expert_out.slice(s![a.expert, slot, ..]));
        }
    }
    Ok(out)
}
