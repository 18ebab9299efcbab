//! The marginal annealer.
//!
//! State is a list of mutually compatible marginal tables, one per distinct
//! influence set plus one per query that no existing margin covers. A move
//! picks a rule margin uniformly, perturbs it with a symmetric mass
//! transfer and propagates the change to all other margins by proportional
//! fitting. The new state is accepted with the Metropolis rule at inverse
//! temperature `β`, and `β` grows geometrically up to `a_β n_a^{b_β}`.
//!
//! By default the acceptance ratio also carries the density ratio of the
//! noninformative multinomial of fictitious size `n_a` (continuously
//! interpolated through the gamma function) at the perturbed margin. Its
//! weight is small against `β C` at the ceiling, so it only decides between
//! states of equal cost, where it favours the higher-entropy one.
//!
//! Query margins are never perturbed. They start uniform and are only ever
//! rescaled, so every interaction outside the fitted overlaps stays at 0.

use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::cost::{irreducible_cost, CostBreakdown, CostError, CostModel};
use crate::expr::VarSet;
use crate::ipf::{MarginGraph, DEFAULT_MAX_SWEEPS};
use crate::lang::{NetworkSpec, Query};
use crate::tables::{
    compatibility_residual, conditional_prob, uniform_table, MarginalTable, TableError,
    MAX_TABLE_VARS,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("gamma must be greater than 1, got {0}")]
    Gamma(f64),
    #[error("b_beta must lie in (1,2), got {0}")]
    BBeta(f64),
    #[error("a_beta must be positive, got {0}")]
    ABeta(f64),
    #[error("n_a must be positive, got {0}")]
    SampleSize(f64),
    #[error("beta0 must be positive, got {0}")]
    Beta0(f64),
    #[error("{name} must be positive, got {value}")]
    Tolerance { name: &'static str, value: f64 },
    #[error("{0} must be at least 1")]
    Count(&'static str),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("margin {vars} is too large: {source}")]
    Cap { vars: VarSet, source: TableError },
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("no margin covers the query variables {0}")]
    Uncovered(VarSet),
    #[error(transparent)]
    Query(TableError),
}

/// Schedule and kernel parameters of the annealer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealConfig {
    /// Fictitious sample size of the noninformative proposal distribution.
    pub n_a: f64,
    pub beta0: f64,
    /// Multiplier applied to β after each temperature.
    pub gamma: f64,
    pub a_beta: f64,
    /// Exponent of the β ceiling `a_β n_a^{b_β}`; must lie in (1, 2).
    pub b_beta: f64,
    /// Proposals per temperature; `None` means 100 per rule margin.
    pub sweeps_per_temp: Option<usize>,
    pub tol_compat: f64,
    /// Relative change of the best cost below which a temperature counts as stable.
    pub tol_cost: f64,
    pub max_temps: usize,
    pub seed: u64,
    pub restarts: usize,
    /// Mass-transfer steps are uniform on `(-c/√n_a, c/√n_a)`.
    pub step_scale: f64,
    /// Weight moves by the noninformative density of the perturbed margin.
    pub prior_correction: bool,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        AnnealConfig {
            n_a: 1e4,
            beta0: 1.0,
            gamma: 1.1,
            a_beta: 1.0,
            b_beta: 1.5,
            sweeps_per_temp: None,
            tol_compat: 1e-8,
            tol_cost: 1e-6,
            max_temps: 200,
            seed: 0,
            restarts: 1,
            step_scale: 1.0,
            prior_correction: true,
        }
    }
}

/// Consecutive stable temperatures (at the β ceiling) that end a run.
pub const STABLE_TEMPS: usize = 3;

impl AnnealConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.gamma > 1.0 && self.gamma.is_finite()) {
            return Err(ConfigError::Gamma(self.gamma));
        }
        if !(self.b_beta > 1.0 && self.b_beta < 2.0) {
            return Err(ConfigError::BBeta(self.b_beta));
        }
        if !(self.a_beta > 0.0 && self.a_beta.is_finite()) {
            return Err(ConfigError::ABeta(self.a_beta));
        }
        if !(self.n_a > 0.0 && self.n_a.is_finite()) {
            return Err(ConfigError::SampleSize(self.n_a));
        }
        if !(self.beta0 > 0.0 && self.beta0.is_finite()) {
            return Err(ConfigError::Beta0(self.beta0));
        }
        for (name, value) in [
            ("tol_compat", self.tol_compat),
            ("tol_cost", self.tol_cost),
            ("step_scale", self.step_scale),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ConfigError::Tolerance { name, value });
            }
        }
        if self.max_temps == 0 {
            return Err(ConfigError::Count("max_temps"));
        }
        if self.restarts == 0 {
            return Err(ConfigError::Count("restarts"));
        }
        if self.sweeps_per_temp == Some(0) {
            return Err(ConfigError::Count("sweeps_per_temp"));
        }
        Ok(())
    }

    /// Ceiling of the inverse temperature.
    pub fn beta_max(&self) -> f64 {
        self.a_beta * self.n_a.powf(self.b_beta)
    }
}

/// Adds one margin per query over the query's variables, unless an
/// existing margin already contains them.
pub fn add_query_margins(spec: &NetworkSpec) -> Result<NetworkSpec, SolveError> {
    let mut out = spec.clone();
    let mut existing = spec.influence_family();
    existing.extend(spec.query_margins.iter().cloned());
    for q in &spec.queries {
        let vars = q.vars();
        if vars.is_empty() || existing.iter().any(|m| vars.is_subset(m)) {
            continue;
        }
        if vars.len() > MAX_TABLE_VARS {
            return Err(SolveError::Cap {
                vars: vars.clone(),
                source: TableError::CapExceeded {
                    got: vars.len(),
                    cap: MAX_TABLE_VARS,
                },
            });
        }
        existing.push(vars.clone());
        out.query_margins.push(vars);
    }
    Ok(out)
}

/// Margin layouts of a network: distinct influence sets first, then query
/// margins.
fn margin_layout(spec: &NetworkSpec) -> (Vec<VarSet>, usize) {
    let mut vars = spec.influence_family();
    let rule_margins = vars.len();
    for q in &spec.query_margins {
        if !vars.contains(q) {
            vars.push(q.clone());
        }
    }
    (vars, rule_margins)
}

/// A proposed state.
#[derive(Clone, Debug)]
pub struct Proposal {
    pub margins: Vec<MarginalTable>,
    /// False for a null move (infeasible transfer, or compatibility could
    /// not be restored).
    pub moved: bool,
    pub residual: f64,
    /// Change of the noninformative log density at the perturbed margin.
    pub log_prior_ratio: f64,
}

/// Moves mass `eps` from cell `from` to cell `to`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transfer {
    pub from: usize,
    pub to: usize,
    pub eps: f64,
}

/// Draws a symmetric mass transfer: a uniform source cell, a uniform
/// nonempty flip mask and a uniform step on `(-eps_max, eps_max)`.
pub fn draw_transfer<R: Rng + ?Sized>(cells: usize, eps_max: f64, rng: &mut R) -> Option<Transfer> {
    if cells < 2 {
        return None;
    }
    let from = rng.random_range(0..cells);
    let mask = rng.random_range(1..cells);
    let eps = (2.0 * rng.random::<f64>() - 1.0) * eps_max;
    Some(Transfer {
        from,
        to: from ^ mask,
        eps,
    })
}

/// Applies a transfer if both cells stay strictly positive.
pub fn apply_transfer(probs: &mut [f64], t: Transfer) -> bool {
    let a = probs[t.from] - t.eps;
    let b = probs[t.to] + t.eps;
    if a <= 0.0 || b <= 0.0 {
        return false;
    }
    probs[t.from] = a;
    probs[t.to] = b;
    true
}

/// Log density, up to a constant, of the noninformative multinomial of
/// size `n_a` at the cell frequencies `probs`, interpolated by `ln Γ`.
pub fn log_noninformative(probs: &[f64], n_a: f64) -> f64 {
    -probs.iter().map(|p| ln_gamma(n_a * p + 1.0)).sum::<f64>()
}

/// Perturbs margins and restores compatibility.
#[derive(Clone, Debug)]
pub struct Proposer {
    graph: MarginGraph,
    n_a: f64,
    eps_max: f64,
    tol: f64,
    max_sweeps: usize,
}

impl Proposer {
    pub fn new(vars: &[VarSet], n_a: f64, step_scale: f64, tol: f64) -> Self {
        Proposer {
            graph: MarginGraph::new(vars),
            n_a,
            eps_max: step_scale / n_a.sqrt(),
            tol,
            max_sweeps: DEFAULT_MAX_SWEEPS,
        }
    }

    pub fn eps_max(&self) -> f64 {
        self.eps_max
    }

    pub fn graph(&self) -> &MarginGraph {
        &self.graph
    }

    /// Proposes a new state by perturbing margin `j`.
    pub fn propose<R: Rng + ?Sized>(
        &self,
        margins: &[MarginalTable],
        j: usize,
        rng: &mut R,
    ) -> Proposal {
        let stay = |residual| Proposal {
            margins: margins.to_vec(),
            moved: false,
            residual,
            log_prior_ratio: 0.0,
        };
        let Some(t) = draw_transfer(margins[j].len(), self.eps_max, rng) else {
            return stay(0.0);
        };
        let old = margins[j].probs();
        let mut new = old.to_vec();
        if !apply_transfer(&mut new, t) {
            return stay(0.0);
        }
        let n = self.n_a;
        let log_prior_ratio = -(ln_gamma(n * new[t.from] + 1.0) - ln_gamma(n * old[t.from] + 1.0))
            - (ln_gamma(n * new[t.to] + 1.0) - ln_gamma(n * old[t.to] + 1.0));
        let mut out = margins.to_vec();
        out[j].probs_mut().copy_from_slice(&new);
        let residual = self.graph.adapt(j, &mut out, self.tol, self.max_sweeps);
        if residual > self.tol {
            return stay(residual);
        }
        Proposal {
            margins: out,
            moved: true,
            residual,
            log_prior_ratio,
        }
    }
}

/// Perturbs margin `j` of a compatible margin list and adapts the rest.
pub fn propose<R: Rng + ?Sized>(
    margins: &[MarginalTable],
    j: usize,
    n_a: f64,
    rng: &mut R,
) -> Proposal {
    let vars: Vec<VarSet> = margins.iter().map(|m| m.vars().clone()).collect();
    Proposer::new(&vars, n_a, 1.0, crate::ipf::DEFAULT_ADAPT_TOL).propose(margins, j, rng)
}

/// Metropolis acceptance at inverse temperature `beta`.
pub fn accept<R: Rng + ?Sized>(cost_old: f64, cost_new: f64, beta: f64, rng: &mut R) -> bool {
    accept_weighted(cost_old, cost_new, beta, 0.0, rng)
}

/// Metropolis-Hastings acceptance with an extra log density ratio.
pub fn accept_weighted<R: Rng + ?Sized>(
    cost_old: f64,
    cost_new: f64,
    beta: f64,
    log_ratio: f64,
    rng: &mut R,
) -> bool {
    if cost_new.is_nan() || cost_new == f64::INFINITY {
        return false;
    }
    if cost_new < cost_old && log_ratio >= 0.0 {
        return true;
    }
    let delta = cost_new - cost_old;
    let log_a = if beta == 0.0 || delta == 0.0 {
        log_ratio
    } else {
        log_ratio - delta * beta
    };
    log_a >= 0.0 || rng.random::<f64>() < log_a.exp()
}

/// `min(1, exp((cost_old - cost_new) β))`, with `0 · ∞` read as 0.
pub fn acceptance_probability(cost_old: f64, cost_new: f64, beta: f64) -> f64 {
    if cost_new < cost_old {
        return 1.0;
    }
    let delta = cost_new - cost_old;
    if beta == 0.0 || delta == 0.0 {
        return 1.0;
    }
    (-delta * beta).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    CostStable,
    MaxTemps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureStats {
    pub beta: f64,
    pub acceptance_rate: f64,
    pub current_cost: f64,
    pub best_cost: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub temperatures: Vec<TemperatureStats>,
    pub temps_run: usize,
    pub stop_reason: StopReason,
    pub converged: bool,
    pub seed: u64,
    /// Index of the restart whose result was kept.
    pub restart: usize,
    pub restart_costs: Vec<f64>,
    /// Proposals dropped because compatibility could not be restored.
    pub incompatible_proposals: usize,
}

/// Outcome of one annealing chain.
#[derive(Clone, Debug)]
pub struct AnnealRun {
    /// Lowest-cost state visited.
    pub margins: Vec<MarginalTable>,
    pub cost: f64,
    pub beta_final: f64,
    pub temperatures: Vec<TemperatureStats>,
    pub stop_reason: StopReason,
    pub incompatible_proposals: usize,
}

/// Runs one annealing chain from uniform margins over `vars`, perturbing
/// only the margins listed in `selectable`.
pub fn anneal<F, R>(
    vars: &[VarSet],
    selectable: &[usize],
    objective: F,
    cfg: &AnnealConfig,
    rng: &mut R,
) -> Result<AnnealRun, SolveError>
where
    F: Fn(&[MarginalTable]) -> f64,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let mut margins = vars
        .iter()
        .map(|v| {
            uniform_table(v).map_err(|source| SolveError::Cap {
                vars: v.clone(),
                source,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let proposer = Proposer::new(vars, cfg.n_a, cfg.step_scale, cfg.tol_compat);
    let sweeps = cfg.sweeps_per_temp.unwrap_or(100 * selectable.len().max(1));
    let beta_max = cfg.beta_max();

    let mut cost = objective(&margins);
    let mut best = margins.clone();
    let mut best_cost = cost;
    let mut beta = cfg.beta0.min(beta_max);
    let mut temperatures = Vec::new();
    let mut stable = 0;
    let mut stop_reason = StopReason::MaxTemps;
    let mut incompatible = 0;

    for _ in 0..cfg.max_temps {
        let mut accepted = 0usize;
        for _ in 0..sweeps {
            if selectable.is_empty() {
                accepted += 1;
                continue;
            }
            let j = selectable[rng.random_range(0..selectable.len())];
            let p = proposer.propose(&margins, j, rng);
            if !p.moved {
                if p.residual > cfg.tol_compat {
                    incompatible += 1;
                }
                // the unchanged state has equal cost, so it is always accepted
                accepted += 1;
                continue;
            }
            let new_cost = objective(&p.margins);
            let log_ratio = if cfg.prior_correction {
                p.log_prior_ratio
            } else {
                0.0
            };
            if accept_weighted(cost, new_cost, beta, log_ratio, rng) {
                accepted += 1;
                margins = p.margins;
                cost = new_cost;
                if cost < best_cost {
                    best_cost = cost;
                    best.clone_from(&margins);
                }
            }
        }
        let prev_best = temperatures.last().map(|t: &TemperatureStats| t.best_cost);
        temperatures.push(TemperatureStats {
            beta,
            acceptance_rate: accepted as f64 / sweeps as f64,
            current_cost: cost,
            best_cost,
            residual: proposer.graph().residual(&margins),
        });
        if beta >= beta_max {
            let stable_now = prev_best.is_some_and(|prev| {
                (prev - best_cost).abs() <= cfg.tol_cost * best_cost.abs().max(1.0)
            });
            stable = if stable_now { stable + 1 } else { 0 };
            if stable >= STABLE_TEMPS {
                stop_reason = StopReason::CostStable;
                break;
            }
        }
        beta = (beta * cfg.gamma).min(beta_max);
    }
    let beta_final = temperatures.last().map_or(beta, |t| t.beta);
    Ok(AnnealRun {
        margins: best,
        cost: best_cost,
        beta_final,
        temperatures,
        stop_reason,
        incompatible_proposals: incompatible,
    })
}

/// Solved margins of a network with diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    /// Rule margins (one per distinct influence set) followed by query margins.
    pub margins: Vec<MarginalTable>,
    pub rule_margins: usize,
    pub final_cost: CostBreakdown,
    /// Cost of meeting every rule exactly.
    pub irreducible_cost: f64,
    pub beta_final: f64,
    pub diagnostics: Diagnostics,
}

impl Solution {
    /// Smallest margin containing all of `vars`.
    pub fn covering_margin(&self, vars: &VarSet) -> Option<&MarginalTable> {
        self.margins
            .iter()
            .filter(|m| vars.is_subset(m.vars()))
            .min_by_key(|m| m.vars().len())
    }
}

/// The chain's RNG for restart `restart`.
pub fn chain_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    rng
}

/// Solves a network. Restarts run as independent chains on separate
/// threads; the lowest final cost wins, ties going to the lower index.
pub fn solve(spec: &NetworkSpec, cfg: &AnnealConfig) -> Result<Solution, SolveError> {
    cfg.validate()?;
    let spec = add_query_margins(spec)?;
    let (vars, rule_margins) = margin_layout(&spec);
    for v in &vars {
        if v.len() > MAX_TABLE_VARS {
            return Err(SolveError::Cap {
                vars: v.clone(),
                source: TableError::CapExceeded {
                    got: v.len(),
                    cap: MAX_TABLE_VARS,
                },
            });
        }
    }
    let model = CostModel::new(&spec, &vars)?;
    let selectable: Vec<usize> = (0..rule_margins).collect();

    let runs: Vec<Result<AnnealRun, SolveError>> = thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.restarts)
            .map(|r| {
                let (vars, selectable, model) = (&vars, &selectable, &model);
                s.spawn(move || {
                    let mut rng = chain_rng(cfg.seed, r);
                    anneal(vars, selectable, |m| model.total(m), cfg, &mut rng)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("annealing thread panicked"))
            .collect()
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    let restart_costs: Vec<f64> = runs.iter().map(|r| r.cost).collect();
    let (restart, run) = runs
        .into_iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.cost.total_cmp(&b.cost))
        .expect("at least one restart");

    let residual = compatibility_residual(&run.margins);
    assert!(
        residual <= cfg.tol_compat,
        "incompatible margins returned: residual {residual:e}"
    );
    let final_cost = model.breakdown(&run.margins);
    let diagnostics = Diagnostics {
        temps_run: run.temperatures.len(),
        converged: run.stop_reason == StopReason::CostStable,
        stop_reason: run.stop_reason,
        temperatures: run.temperatures,
        seed: cfg.seed,
        restart,
        restart_costs,
        incompatible_proposals: run.incompatible_proposals,
    };
    Ok(Solution {
        margins: run.margins,
        rule_margins,
        final_cost,
        irreducible_cost: irreducible_cost(&spec),
        beta_final: run.beta_final,
        diagnostics,
    })
}

/// `p(consequent | condition)` read from the smallest margin covering the
/// query's variables.
pub fn answer_query(sol: &Solution, query: &Query) -> Result<f64, SolveError> {
    let vars = query.vars();
    let margin = sol
        .covering_margin(&vars)
        .ok_or(SolveError::Uncovered(vars))?;
    conditional_prob(margin, &query.consequent, &query.condition).map_err(SolveError::Query)
}
