//! Routing functions mapping tokens to experts.
//!
//! Token-choice gates (GShard, sigmoid, X-MoE) pick `k` experts per token;
//! expert choice picks `k` tokens per expert. Ties always break toward the
//! lower index.

use ndarray::{Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub expert: usize,
    pub weight: f64,
}

/// Routing decision for a batch of tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutput {
    pub num_experts: usize,
    /// Per token, its (expert, combine-weight) choices.
    pub assignments: Vec<Vec<Assignment>>,
    /// Per token per choice, set when the choice overflowed expert capacity.
    pub drop_mask: Vec<Vec<bool>>,
}

impl GateOutput {
    fn new(num_experts: usize, assignments: Vec<Vec<Assignment>>) -> Self {
        let drop_mask = assignments.iter().map(|a| vec![false; a.len()]).collect();
        Self { num_experts, assignments, drop_mask }
    }

    pub fn num_tokens(&self) -> usize {
        self.assignments.len()
    }

    pub fn selections(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }

    pub fn drops(&self) -> usize {
        self.drop_mask.iter().flatten().filter(|d| **d).count()
    }
}

/// Indices of the `k` largest values, in descending value order; ties go to
/// the lower index.
pub fn top_k_indices(v: ArrayView1<'_, f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    // stable sort keeps index order among equal values
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    idx.truncate(k);
    idx
}

/// Keeps the top `k` entries and sets the rest to negative infinity.
pub fn keep_top_k(v: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > v.len() {
        return Err(Error::Config(format!("k = {k} out of range 1..={}", v.len())));
    }
    let keep = top_k_indices(ArrayView1::from(v), k);
    let mut out = vec![f64::NEG_INFINITY; v.len()];
    for i in keep {
        out[i] = v[i];
    }
    Ok(out)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Softmax over `values[idx]`, i.e. over the survivors of a top-k mask.
fn masked_softmax(values: ArrayView1<'_, f64>, idx: &[usize]) -> Vec<f64> {
    let max = idx.iter().map(|&i| values[i]).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = idx.iter().map(|&i| (values[i] - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check_matmul(lhs: &Array2<f64>, rhs: &Array2<f64>, what: &str) -> Result<()> {
    if lhs.ncols() != rhs.nrows() {
        return Err(Error::Shape(format!(
            "{what}: {}x{} times {}x{}",
            lhs.nrows(),
            lhs.ncols(),
            rhs.nrows(),
            rhs.ncols()
        )));
    }
    Ok(())
}

fn check_k(k: usize, experts: usize) -> Result<()> {
    if k == 0 || k > experts {
        return Err(Error::Config(format!("k = {k} out of range 1..={experts}")));
    }
    Ok(())
}

/// Noisy top-k gate: softmax over the `k` largest noisy logits.
///
/// With `noise_seed = None` the logits are used as is. The standard-normal
/// draws are taken row-major over (token, expert).
pub fn gshard_gate(
    tokens: &Array2<f64>,
    w_gate: &Array2<f64>,
    w_noise: &Array2<f64>,
    k: usize,
    noise_seed: Option<u64>,
) -> Result<GateOutput> {
    check_matmul(tokens, w_gate, "gate weights")?;
    let experts = w_gate.ncols();
    check_k(k, experts)?;
    let mut logits = tokens.dot(w_gate);
    if let Some(seed) = noise_seed {
        check_matmul(tokens, w_noise, "noise weights")?;
        if w_noise.ncols() != experts {
            return Err(Error::Shape(format!("noise weights have {} experts, gate has {experts}", w_noise.ncols())));
        }
        let noise_scale = tokens.dot(w_noise);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (logit, scale) in logits.iter_mut().zip(noise_scale.iter()) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *logit += z * softplus(*scale);
        }
    }
    let assignments = logits
        .axis_iter(Axis(0))
        .map(|row| {
            let idx = top_k_indices(row, k);
            let weights = masked_softmax(row, &idx);
            idx.into_iter().zip(weights).map(|(expert, weight)| Assignment { expert, weight }).collect()
        })
        .collect();
    Ok(GateOutput::new(experts, assignments))
}

/// Top-k by raw logit, each selected expert scaled by `sigmoid(logit)`.
pub fn sigmoid_gate(tokens: &Array2<f64>, w_gate: &Array2<f64>, k: usize) -> Result<GateOutput> {
    check_matmul(tokens, w_gate, "gate weights")?;
    let experts = w_gate.ncols();
    check_k(k, experts)?;
    let logits = tokens.dot(w_gate);
    let assignments = logits
        .axis_iter(Axis(0))
        .map(|row| {
            top_k_indices(row, k)
                .into_iter()
                .map(|expert| Assignment { expert, weight: sigmoid(row[expert]) })
                .collect()
        })
        .collect();
    Ok(GateOutput::new(experts, assignments))
}

/// Cosine scores between the low-rank projected token and each expert
/// embedding (columns of `w_gate`).
pub fn xmoe_scores(tokens: &Array2<f64>, w_proj: &Array2<f64>, w_gate: &Array2<f64>) -> Result<Array2<f64>> {
    check_matmul(tokens, w_proj, "projection")?;
    check_matmul(w_proj, w_gate, "expert embeddings")?;
    if w_proj.ncols() > w_proj.nrows() {
        return Err(Error::Shape(format!("projection rank {} exceeds model dim {}", w_proj.ncols(), w_proj.nrows())));
    }
    let projected = tokens.dot(w_proj);
    let emb_norms: Vec<f64> = w_gate.axis_iter(Axis(1)).map(|c| c.dot(&c).sqrt()).collect();
    if let Some(e) = emb_norms.iter().position(|n| *n == 0.0) {
        return Err(Error::Scoring(format!("expert embedding {e} has zero norm")));
    }
    let mut scores = projected.dot(w_gate);
    for (t, mut row) in scores.axis_iter_mut(Axis(0)).enumerate() {
        let p = projected.row(t);
        let norm = p.dot(&p).sqrt();
        if norm == 0.0 {
            return Err(Error::Scoring(format!("projected token {t} has zero norm")));
        }
        for (e, s) in row.iter_mut().enumerate() {
            *s /= norm * emb_norms[e];
        }
    }
    Ok(scores)
}

/// Low-rank cosine gate: top-k by cosine score, softmax over the survivors.
pub fn xmoe_gate(tokens: &Array2<f64>, w_proj: &Array2<f64>, w_gate: &Array2<f64>, k: usize) -> Result<GateOutput> {
    let scores = xmoe_scores(tokens, w_proj, w_gate)?;
    let experts = w_gate.ncols();
    check_k(k, experts)?;
    let assignments = scores
        .axis_iter(Axis(0))
        .map(|row| {
            let idx = top_k_indices(row, k);
            let weights = masked_softmax(row, &idx);
            idx.into_iter().zip(weights).map(|(expert, weight)| Assignment { expert, weight }).collect()
        })
        .collect();
    Ok(GateOutput::new(experts, assignments))
}

/// Expert choice: every expert takes its `capacity_k` highest-scoring
/// tokens, weighted by a softmax over those tokens.
///
/// Each token's assignments are listed in expert order.
pub fn ec_gate(tokens: &Array2<f64>, w_gate: &Array2<f64>, capacity_k: usize) -> Result<GateOutput> {
    check_matmul(tokens, w_gate, "gate weights")?;
    let n_tokens = tokens.nrows();
    if capacity_k == 0 || capacity_k > n_tokens {
        return Err(Error::Config(format!("capacity_k = {capacity_k} out of range 1..={n_tokens}")));
    }
    let experts = w_gate.ncols();
    let logits = tokens.dot(w_gate);
    let mut assignments: Vec<Vec<Assignment>> = vec![Vec::new(); n_tokens];
    for (expert, column) in logits.axis_iter(Axis(1)).enumerate() {
        let idx = top_k_indices(column, capacity_k);
        let weights = masked_softmax(column, &idx);
        for (token, weight) in idx.into_iter().zip(weights) {
            assignments[token].push(Assignment { expert, weight });
        }
    }
    Ok(GateOutput::new(experts, assignments))
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    fn identity_gate(logits: Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let n = logits.ncols();
        (logits, Array2::eye(n))
    }

    #[test]
    fn keep_top_k_examples() {
        let ninf = f64::NEG_INFINITY;
        assert_eq!(keep_top_k(&[0.1, 0.5, 0.3], 1).unwrap(), vec![ninf, 0.5, ninf]);
        assert_eq!(keep_top_k(&[7.0, 7.0, 7.0], 2).unwrap(), vec![7.0, 7.0, ninf]);
        assert_eq!(keep_top_k(&[3.0, 1.0, 2.0], 3).unwrap(), vec![3.0, 1.0, 2.0]);
        assert!(keep_top_k(&[1.0], 0).is_err());
        assert!(keep_top_k(&[1.0], 2).is_err());
    }

    #[test]
    fn gshard_single_survivor_gets_full_weight() {
        let (tokens, w) = identity_gate(array![[1.0, 3.0, 2.0]]);
        let out = gshard_gate(&tokens, &w, &w, 1, None).unwrap();
        assert_eq!(out.assignments[0], vec![Assignment { expert: 1, weight: 1.0 }]);
    }

    #[test]
    fn gshard_symmetric_logits_split_evenly() {
        let (tokens, w) = identity_gate(array![[0.0, 0.0]]);
        let out = gshard_gate(&tokens, &w, &w, 2, None).unwrap();
        let weights: Vec<f64> = out.assignments[0].iter().map(|a| a.weight).collect();
        assert_eq!(weights, vec![0.5, 0.5]);
        assert_eq!(out.assignments[0][0].expert, 0);
    }

    #[test]
    fn gshard_noise_is_seed_deterministic() {
        let tokens = array![[0.3, -1.0], [2.0, 0.5], [0.0, 0.1]];
        let w = array![[1.0, 0.5, -0.2], [0.1, 0.4, 0.9]];
        let wn = array![[0.2, 0.2, 0.2], [0.3, -0.1, 0.0]];
        let a = gshard_gate(&tokens, &w, &wn, 2, Some(11)).unwrap();
        let b = gshard_gate(&tokens, &w, &wn, 2, Some(11)).unwrap();
        assert_eq!(a, b);
        let c = gshard_gate(&tokens, &w, &wn, 2, None).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gshard_rejects_shape_mismatch() {
        let tokens = Array2::<f64>::zeros((2, 3));
        let w = Array2::<f64>::zeros((4, 2));
        assert!(matches!(gshard_gate(&tokens, &w, &w, 1, None), Err(Error::Shape(_))));
    }

    #[test]
    fn sigmoid_gate_examples() {
        let (tokens, w) = identity_gate(array![[-1.0, 4.0]]);
        let out = sigmoid_gate(&tokens, &w, 1).unwrap();
        assert_eq!(out.assignments[0], vec![Assignment { expert: 1, weight: sigmoid(4.0) }]);

        let (tokens, w) = identity_gate(array![[0.0, -3.0]]);
        let out = sigmoid_gate(&tokens, &w, 1).unwrap();
        assert_eq!(out.assignments[0][0].weight, 0.5);

        let (tokens, w) = identity_gate(array![[0.2, -0.7, 1.5]]);
        let out = sigmoid_gate(&tokens, &w, 3).unwrap();
        let mut experts: Vec<usize> = out.assignments[0].iter().map(|a| a.expert).collect();
        experts.sort();
        assert_eq!(experts, vec![0, 1, 2]);
        for a in &out.assignments[0] {
            assert_eq!(a.weight, sigmoid([0.2, -0.7, 1.5][a.expert]));
        }
    }

    #[test]
    fn xmoe_parallel_and_antiparallel() {
        let tokens = array![[2.0, 0.0]];
        let proj = Array2::eye(2);
        let emb = array![[1.0, 0.0], [0.0, 1.0]];
        let scores = xmoe_scores(&tokens, &proj, &emb).unwrap();
        assert_eq!(scores[[0, 0]], 1.0);
        assert_eq!(scores[[0, 1]], 0.0);
        let out = xmoe_gate(&tokens, &proj, &emb, 1).unwrap();
        assert_eq!(out.assignments[0][0].expert, 0);

        let emb1 = array![[-3.0], [0.0]];
        let scores = xmoe_scores(&tokens, &proj, &emb1).unwrap();
        assert_eq!(scores[[0, 0]], -1.0);
        let out = xmoe_gate(&tokens, &proj, &emb1, 1).unwrap();
        assert_eq!(out.assignments[0], vec![Assignment { expert: 0, weight: 1.0 }]);
    }

    #[test]
    fn xmoe_zero_norm_is_a_scoring_error() {
        let proj = Array2::eye(2);
        let emb = array![[1.0, 0.0], [0.0, 0.0]];
        assert!(matches!(xmoe_scores(&array![[1.0, 1.0]], &proj, &emb), Err(Error::Scoring(_))));
        let emb = Array2::eye(2);
        assert!(matches!(xmoe_scores(&array![[0.0, 0.0]], &proj, &emb), Err(Error::Scoring(_))));
    }

    #[test]
    fn ec_gate_examples() {
        let (tokens, w) = identity_gate(array![[9.0, 0.0], [0.0, 9.0]]);
        let out = ec_gate(&tokens, &w, 1).unwrap();
        assert_eq!(out.assignments[0], vec![Assignment { expert: 0, weight: 1.0 }]);
        assert_eq!(out.assignments[1], vec![Assignment { expert: 1, weight: 1.0 }]);

        let all = ec_gate(&tokens, &w, 2).unwrap();
        assert!(all.assignments.iter().all(|a| a.len() == 2));
        assert!(matches!(ec_gate(&tokens, &w, 3), Err(Error::Config(_))));
    }
}
