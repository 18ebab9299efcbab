//! Annealing over an explicit synthetic sample of `n` records.
//!
//! Each record is one configuration of all `k` variables, stored as a cell
//! index of the joint table (variable 1 in the most significant bit). The
//! empirical frequencies `q(X) = counts / n` can only take the values
//! `0/n, 1/n, ..., n/n`, so the reachable cost is bounded away from the
//! continuous optimum unless every rule value lies on that grid.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostError, CostModel};
use crate::expr::VarSet;
use crate::lang::NetworkSpec;
use crate::mesa::{
    accept, chain_rng, AnnealConfig, ConfigError, StopReason, TemperatureStats, STABLE_TEMPS,
};
use crate::tables::{projection_index, JointTable, MarginalTable, MAX_JOINT_VARS};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum JointError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{got} variables exceed the joint cap of {cap}")]
    CapExceeded { got: usize, cap: usize },
    #[error("the synthetic sample needs at least one record")]
    EmptySample,
    #[error("record {record} = {value} is not a cell of a {k}-variable joint")]
    BadRecord { record: usize, value: u32, k: usize },
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    n: usize,
    k: usize,
    records: Vec<u32>,
    counts: Vec<usize>,
}

impl SyntheticSample {
    pub fn new(k: usize, records: Vec<u32>) -> Result<Self, JointError> {
        if k > MAX_JOINT_VARS {
            return Err(JointError::CapExceeded {
                got: k,
                cap: MAX_JOINT_VARS,
            });
        }
        if records.is_empty() {
            return Err(JointError::EmptySample);
        }
        let mut counts = vec![0; 1 << k];
        for (i, r) in records.iter().enumerate() {
            let c = counts.get_mut(*r as usize).ok_or(JointError::BadRecord {
                record: i,
                value: *r,
                k,
            })?;
            *c += 1;
        }
        Ok(SyntheticSample {
            n: records.len(),
            k,
            records,
            counts,
        })
    }

    /// Records drawn independently and uniformly over all configurations.
    pub fn random<R: Rng + ?Sized>(k: usize, n: usize, rng: &mut R) -> Result<Self, JointError> {
        if k > MAX_JOINT_VARS {
            return Err(JointError::CapExceeded {
                got: k,
                cap: MAX_JOINT_VARS,
            });
        }
        let m = 1u32 << k;
        Self::new(k, (0..n).map(|_| rng.random_range(0..m)).collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn records(&self) -> &[u32] {
        &self.records
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Values of variables `1..=k` in record `i`.
    pub fn record_bits(&self, i: usize) -> Vec<bool> {
        let r = self.records[i];
        (0..self.k)
            .map(|j| (r >> (self.k - 1 - j)) & 1 == 1)
            .collect()
    }

    /// Empirical joint `q(X)`.
    pub fn joint(&self) -> JointTable {
        let n = self.n as f64;
        JointTable::from_parts(self.k, self.counts.iter().map(|c| *c as f64 / n).collect())
    }

    /// True when the cached counts agree with the records.
    pub fn is_consistent(&self) -> bool {
        let mut counts = vec![0; self.counts.len()];
        self.records.iter().for_each(|r| counts[*r as usize] += 1);
        counts == self.counts
    }

    fn apply(&mut self, m: Modification) -> (usize, usize) {
        let from = self.records[m.record];
        let to = from ^ m.mask;
        self.records[m.record] = to;
        self.counts[from as usize] -= 1;
        self.counts[to as usize] += 1;
        (from as usize, to as usize)
    }
}

/// Flip the bits `mask` of record `record`. Applying it twice is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Modification {
    pub record: usize,
    pub mask: u32,
}

/// One record uniformly, then a subset of its components: the size is
/// geometric with mean 2 (capped at `k`), the members uniform given the size.
pub fn draw_modification<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Modification {
    let record = rng.random_range(0..n);
    let geo = Geometric::new(0.5).expect("valid probability");
    let size = (1 + geo.sample(rng) as usize).min(k);
    let mask = index::sample(rng, k, size)
        .iter()
        .fold(0u32, |m, j| m | (1 << j));
    Modification { record, mask }
}

pub fn modify_sample<R: Rng + ?Sized>(s: &SyntheticSample, rng: &mut R) -> SyntheticSample {
    let mut out = s.clone();
    out.apply(draw_modification(s.n, s.k, rng));
    out
}

/// Margin tables of a sample kept in step with single-record changes.
struct SampleMargins {
    index: Vec<Vec<usize>>,
    counts: Vec<Vec<usize>>,
    tables: Vec<MarginalTable>,
    n: f64,
}

impl SampleMargins {
    fn new(k: usize, vars: &[VarSet], sample: &SyntheticSample) -> Self {
        let all = VarSet::new(1..=k);
        let index: Vec<Vec<usize>> = vars.iter().map(|v| projection_index(&all, v)).collect();
        let counts: Vec<Vec<usize>> = vars
            .iter()
            .zip(&index)
            .map(|(v, idx)| {
                let mut c = vec![0; 1 << v.len()];
                idx.iter()
                    .zip(sample.counts())
                    .for_each(|(i, x)| c[*i] += x);
                c
            })
            .collect();
        let n = sample.n() as f64;
        let tables = vars
            .iter()
            .zip(&counts)
            .map(|(v, c)| {
                MarginalTable::from_parts(v.clone(), c.iter().map(|x| *x as f64 / n).collect())
            })
            .collect();
        SampleMargins {
            index,
            counts,
            tables,
            n,
        }
    }

    fn shift(&mut self, from: usize, to: usize) {
        for ((idx, c), t) in self
            .index
            .iter()
            .zip(&mut self.counts)
            .zip(&mut self.tables)
        {
            let (a, b) = (idx[from], idx[to]);
            if a == b {
                continue;
            }
            c[a] -= 1;
            c[b] += 1;
            let p = t.probs_mut();
            p[a] = c[a] as f64 / self.n;
            p[b] = c[b] as f64 / self.n;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointRun {
    /// The sample at termination.
    pub sample: SyntheticSample,
    pub cost: f64,
    pub beta_final: f64,
    pub steps: usize,
    pub temperatures: Vec<TemperatureStats>,
    pub stop_reason: StopReason,
}

/// Metropolis chain on synthetic samples of size `n`; `objective` sees the
/// empirical margins over `margin_vars`, `observer` the sample after every
/// step. β grows by `γ` per temperature up to `a_β n^{b_β}`.
pub fn anneal_joint<F, O, R>(
    k: usize,
    n: usize,
    margin_vars: &[VarSet],
    objective: F,
    cfg: &AnnealConfig,
    rng: &mut R,
    mut observer: O,
) -> Result<JointRun, JointError>
where
    F: Fn(&[MarginalTable]) -> f64,
    O: FnMut(&SyntheticSample),
    R: Rng + ?Sized,
{
    cfg.validate()?;
    if k > MAX_JOINT_VARS {
        return Err(JointError::CapExceeded {
            got: k,
            cap: MAX_JOINT_VARS,
        });
    }
    if n == 0 || k == 0 {
        return Err(JointError::EmptySample);
    }
    let mut sample = SyntheticSample::random(k, n, rng)?;
    let mut margins = SampleMargins::new(k, margin_vars, &sample);
    let sweeps = cfg.sweeps_per_temp.unwrap_or(100 * n);
    let beta_max = cfg.a_beta * (n as f64).powf(cfg.b_beta);

    let mut cost = objective(&margins.tables);
    let mut beta = cfg.beta0.min(beta_max);
    let mut temperatures: Vec<TemperatureStats> = Vec::new();
    let mut stable = 0;
    let mut stop_reason = StopReason::MaxTemps;
    let mut best_cost = cost;
    let mut steps = 0;

    for _ in 0..cfg.max_temps {
        let mut accepted = 0usize;
        for _ in 0..sweeps {
            let m = draw_modification(n, k, rng);
            let (from, to) = sample.apply(m);
            margins.shift(from, to);
            let new_cost = objective(&margins.tables);
            if accept(cost, new_cost, beta, rng) {
                accepted += 1;
                cost = new_cost;
                best_cost = best_cost.min(cost);
            } else {
                sample.apply(m);
                margins.shift(to, from);
            }
            debug_assert!(sample.is_consistent());
            steps += 1;
            observer(&sample);
        }
        let prev_best = temperatures.last().map(|t| t.best_cost);
        temperatures.push(TemperatureStats {
            beta,
            acceptance_rate: accepted as f64 / sweeps as f64,
            current_cost: cost,
            best_cost,
            residual: 0.0,
        });
        if beta >= beta_max {
            let stable_now = prev_best
                .is_some_and(|p| (p - best_cost).abs() <= cfg.tol_cost * best_cost.abs().max(1.0));
            stable = if stable_now { stable + 1 } else { 0 };
            if stable >= STABLE_TEMPS {
                stop_reason = StopReason::CostStable;
                break;
            }
        }
        beta = (beta * cfg.gamma).min(beta_max);
    }
    Ok(JointRun {
        sample,
        cost,
        beta_final: temperatures.last().map_or(beta, |t| t.beta),
        steps,
        temperatures,
        stop_reason,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSolution {
    pub joint: JointTable,
    pub run: JointRun,
}

/// Anneals a synthetic sample of size `n` against the network's cost.
/// Restarts run on separate threads; the lowest final cost wins.
pub fn solve_joint(
    spec: &NetworkSpec,
    n: usize,
    cfg: &AnnealConfig,
) -> Result<JointSolution, JointError> {
    cfg.validate()?;
    let k = spec.k();
    if k > MAX_JOINT_VARS {
        return Err(JointError::CapExceeded {
            got: k,
            cap: MAX_JOINT_VARS,
        });
    }
    let vars = spec.influence_family();
    let model = CostModel::new(spec, &vars)?;
    let runs: Vec<Result<JointRun, JointError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.restarts)
            .map(|r| {
                let (vars, model) = (&vars, &model);
                s.spawn(move || {
                    let mut rng = chain_rng(cfg.seed, r);
                    anneal_joint(k, n, vars, |m| model.total(m), cfg, &mut rng, |_| {})
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("annealing thread panicked"))
            .collect()
    });
    let run = runs
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .min_by(|a, b| a.cost.total_cmp(&b.cost))
        .expect("at least one restart");
    Ok(JointSolution {
        joint: run.sample.joint(),
        run,
    })
}
