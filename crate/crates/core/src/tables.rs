//! Probability tables over subsets of the binary variables.
//!
//! A table over the sorted variable set `vars = (v_1, ..., v_d)` stores
//! `2^d` cells. Cell `c` holds the probability of the configuration whose
//! value for `v_i` is bit `d - i` of `c`, so the last variable varies
//! fastest: over `{1,2}` the cell order is `00, 01, 10, 11`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{ExprError, PropExpr, VarSet};

/// Largest variable count of a marginal table.
pub const MAX_TABLE_VARS: usize = 20;
/// Largest variable count of an explicit joint table.
pub const MAX_JOINT_VARS: usize = 16;
/// Condition probabilities below this make a conditional undefined.
pub const EPS_COND: f64 = 1e-10;

const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TableError {
    #[error("table over {got} variables exceeds the cap of {cap}")]
    CapExceeded { got: usize, cap: usize },
    #[error("{sub} is not a subset of the table variables {vars}")]
    NotSubset { sub: VarSet, vars: VarSet },
    #[error("expected {expected} cells, got {got}")]
    Length { expected: usize, got: usize },
    #[error("cells must be nonnegative and sum to 1 (sum = {sum})")]
    NotSimplex { sum: f64 },
    #[error("condition probability {prob} is below {EPS_COND}; the conditional is undefined")]
    UndefinedConditional { prob: f64 },
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// A probability vector over all configurations of `vars`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalTable {
    vars: VarSet,
    probs: Vec<f64>,
}

impl MarginalTable {
    /// Builds a table, checking length and simplex membership.
    pub fn new(vars: VarSet, probs: Vec<f64>) -> Result<Self, TableError> {
        check_cap(vars.len(), MAX_TABLE_VARS)?;
        let expected = 1usize << vars.len();
        if probs.len() != expected {
            return Err(TableError::Length {
                expected,
                got: probs.len(),
            });
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| p.is_nan() || *p < 0.0) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(TableError::NotSimplex { sum });
        }
        Ok(MarginalTable { vars, probs })
    }

    /// Builds a table without validation. Callers keep the simplex invariant.
    pub(crate) fn from_parts(vars: VarSet, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len(), 1 << vars.len());
        MarginalTable { vars, probs }
    }

    pub fn vars(&self) -> &VarSet {
        &self.vars
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub(crate) fn probs_mut(&mut self) -> &mut [f64] {
        &mut self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// True when every cell is strictly positive.
    pub fn is_positive(&self) -> bool {
        self.probs.iter().all(|p| *p > 0.0)
    }

    /// Largest absolute cell difference to a table over the same variables.
    pub fn linf(&self, other: &MarginalTable) -> f64 {
        assert_eq!(
            self.vars, other.vars,
            "L-inf distance needs matching variables"
        );
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// An explicit distribution over all `2^k` configurations of variables `1..=k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    k: usize,
    probs: Vec<f64>,
}

impl JointTable {
    pub fn new(k: usize, probs: Vec<f64>) -> Result<Self, TableError> {
        check_cap(k, MAX_JOINT_VARS)?;
        let t = MarginalTable::new(VarSet::new(1..=k), probs)?;
        Ok(JointTable { k, probs: t.probs })
    }

    pub fn uniform(k: usize) -> Result<Self, TableError> {
        check_cap(k, MAX_JOINT_VARS)?;
        let m = 1usize << k;
        Ok(JointTable {
            k,
            probs: vec![1.0 / m as f64; m],
        })
    }

    pub(crate) fn from_parts(k: usize, probs: Vec<f64>) -> Self {
        JointTable { k, probs }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn is_positive(&self) -> bool {
        self.probs.iter().all(|p| *p > 0.0)
    }

    /// The joint viewed as a table over `{1, ..., k}`.
    pub fn as_table(&self) -> MarginalTable {
        MarginalTable::from_parts(VarSet::new(1..=self.k), self.probs.clone())
    }
}

fn check_cap(got: usize, cap: usize) -> Result<(), TableError> {
    if got > cap {
        Err(TableError::CapExceeded { got, cap })
    } else {
        Ok(())
    }
}

/// Every cell equal to `2^-|vars|`.
pub fn uniform_table(vars: &VarSet) -> Result<MarginalTable, TableError> {
    check_cap(vars.len(), MAX_TABLE_VARS)?;
    let m = 1usize << vars.len();
    Ok(MarginalTable::from_parts(
        vars.clone(),
        vec![1.0 / m as f64; m],
    ))
}

/// For every cell of a table over `vars`, the index of the cell of the
/// `sub`-table it projects onto. `sub` must be a subset of `vars`.
pub(crate) fn projection_index(vars: &VarSet, sub: &VarSet) -> Vec<usize> {
    let d = vars.len();
    let e = sub.len();
    let shifts: Vec<(usize, usize)> = sub
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let pos = vars.position(v).expect("sub must be a subset of vars");
            (d - 1 - pos, e - 1 - j)
        })
        .collect();
    (0..1usize << d)
        .map(|cell| {
            shifts
                .iter()
                .fold(0, |acc, &(from, to)| acc | (((cell >> from) & 1) << to))
        })
        .collect()
}

/// Sums the table over all variables outside `sub`.
pub fn marginalize(t: &MarginalTable, sub: &VarSet) -> Result<MarginalTable, TableError> {
    if !sub.is_subset(&t.vars) {
        return Err(TableError::NotSubset {
            sub: sub.clone(),
            vars: t.vars.clone(),
        });
    }
    if sub == &t.vars {
        return Ok(t.clone());
    }
    let idx = projection_index(&t.vars, sub);
    let mut out = vec![0.0; 1 << sub.len()];
    for (cell, p) in idx.iter().zip(&t.probs) {
        out[*cell] += p;
    }
    Ok(MarginalTable::from_parts(sub.clone(), out))
}

/// Membership of each cell of a table over `vars` in the event `e`.
pub fn event_mask(vars: &VarSet, e: &PropExpr) -> Result<Vec<bool>, TableError> {
    let ev = e.vars();
    if !ev.is_subset(vars) {
        return Err(TableError::NotSubset {
            sub: ev,
            vars: vars.clone(),
        });
    }
    (0..1usize << vars.len())
        .map(|c| e.eval_config(vars, c).map_err(TableError::from))
        .collect()
}

/// Probability of the event `e` under the table.
pub fn event_prob(t: &MarginalTable, e: &PropExpr) -> Result<f64, TableError> {
    let mask = event_mask(&t.vars, e)?;
    Ok(mask
        .iter()
        .zip(&t.probs)
        .filter(|(m, _)| **m)
        .map(|(_, p)| p)
        .sum())
}

/// `p(d | b)`; fails when `p(b) < EPS_COND`.
pub fn conditional_prob(t: &MarginalTable, d: &PropExpr, b: &PropExpr) -> Result<f64, TableError> {
    let pb = event_prob(t, b)?;
    if pb < EPS_COND {
        return Err(TableError::UndefinedConditional { prob: pb });
    }
    let pdb = event_prob(t, &PropExpr::and(d.clone(), b.clone()))?;
    Ok(pdb / pb)
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Largest L-inf disagreement between any two tables on their shared variables.
pub fn compatibility_residual(tables: &[MarginalTable]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, s) in tables.iter().enumerate() {
        for t in &tables[i + 1..] {
            let shared = s.vars.intersection(&t.vars);
            if shared.is_empty() {
                continue;
            }
            let a = marginalize(s, &shared).expect("shared vars are a subset");
            let b = marginalize(t, &shared).expect("shared vars are a subset");
            worst = worst.max(a.linf(&b));
        }
    }
    worst
}
