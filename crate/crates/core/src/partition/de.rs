//! rand/1/bin differential evolution with projection repair.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeParams {
    /// Population size; `None` means 15 per dimension.
    pub population: Option<usize>,
    pub generations: u32,
    /// Differential weight.
    pub f: f64,
    /// Crossover rate.
    pub cr: f64,
    pub seed: u64,
}

impl Default for DeParams {
    fn default() -> Self {
        Self { population: None, generations: 200, f: 0.8, cr: 0.9, seed: 0 }
    }
}

impl DeParams {
    pub fn population_for(&self, dims: usize) -> usize {
        self.population.unwrap_or(15 * dims.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.population {
            if p < 4 {
                return Err(Error::Config(format!("DE population must be >= 4, got {p}")));
            }
        }
        if !(self.f > 0.0 && self.f <= 2.0) {
            return Err(Error::Config(format!("DE differential weight must be in (0, 2], got {}", self.f)));
        }
        if !(0.0..=1.0).contains(&self.cr) {
            return Err(Error::Config(format!("DE crossover rate must be in [0, 1], got {}", self.cr)));
        }
        Ok(())
    }
}

/// Minimizes `objective` over vectors kept feasible by `repair`.
///
/// `seeds` enter the initial population first (already repaired by the
/// caller's choice); the rest is drawn by `random_member`. Trial vectors of a
/// generation are generated sequentially from the single seeded stream and
/// evaluated in parallel, so results do not depend on thread count.
pub fn minimize<O, P, S>(
    dims: usize,
    seeds: Vec<Vec<f64>>,
    random_member: S,
    repair: P,
    objective: O,
    params: &DeParams,
) -> Result<(Vec<f64>, f64)>
where
    O: Fn(&[f64]) -> f64 + Sync,
    P: Fn(&mut [f64]),
    S: Fn(&mut ChaCha8Rng) -> Vec<f64>,
{
    params.validate()?;
    if dims == 0 {
        return Ok((Vec::new(), objective(&[])));
    }
    let np = params.population_for(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut pop: Vec<Vec<f64>> = Vec::with_capacity(np);
    for mut s in seeds.into_iter().take(np) {
        if s.len() != dims {
            return Err(Error::Shape(format!("seed vector has {} entries, expected {dims}", s.len())));
        }
        repair(&mut s);
        pop.push(s);
    }
    while pop.len() < np {
        let mut m = random_member(&mut rng);
        repair(&mut m);
        pop.push(m);
    }
    let mut fit: Vec<f64> = pop.par_iter().map(|x| objective(x)).collect();

    for _ in 0..params.generations {
        let trials: Vec<Vec<f64>> = (0..np)
            .map(|i| {
                let (a, b, c) = distinct_three(&mut rng, np, i);
                let j_rand = rng.gen_range(0..dims);
                let mut trial = pop[i].clone();
                for j in 0..dims {
                    if j == j_rand || rng.gen::<f64>() < params.cr {
                        trial[j] = pop[a][j] + params.f * (pop[b][j] - pop[c][j]);
                    }
                }
                repair(&mut trial);
                trial
            })
            .collect();
        let trial_fit: Vec<f64> = trials.par_iter().map(|x| objective(x)).collect();
        for (i, (t, tf)) in trials.into_iter().zip(trial_fit).enumerate() {
            if tf <= fit[i] {
                pop[i] = t;
                fit[i] = tf;
            }
        }
    }
    let best = (0..np).min_by(|&a, &b| fit[a].total_cmp(&fit[b])).expect("non-empty population");
    Ok((pop[best].clone(), fit[best]))
}

fn distinct_three(rng: &mut ChaCha8Rng, np: usize, exclude: usize) -> (usize, usize, usize) {
    let mut pick = |taken: &[usize]| loop {
        let v = rng.gen_range(0..np);
        if v != exclude && !taken.contains(&v) {
            return v;
        }
    };
    let a = pick(&[]);
    let b = pick(&[a]);
    let c = pick(&[a, b]);
    (a, b, c)
}
