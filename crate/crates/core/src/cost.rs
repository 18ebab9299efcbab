//! Reliability-weighted log-likelihood cost of margins against the rules.
//!
//! A rule with reliability `n` and observed value `t` is read as a sample of
//! `n` observations. Facts and conditional rules are two-group samples
//! (a conditional one truncated to its condition), tables are
//! `2^d`-group samples. Additive constants of the multinomial
//! log-likelihood are dropped: only cost differences drive the annealer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{PropExpr, VarSet};
use crate::lang::{NetworkSpec, Rule, RuleKind};
use crate::tables::{entropy, event_mask, MarginalTable, TableError, EPS_COND};

/// Probabilities are clamped to at least this inside logarithms.
pub const EPS_LOG: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("margin over {margin} does not match the rule's influence set {rule}")]
    VarMismatch { margin: VarSet, rule: VarSet },
    #[error("no margin over the influence set {0}")]
    MissingMargin(VarSet),
    #[error(transparent)]
    Table(#[from] TableError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub per_rule: Vec<f64>,
    pub total: f64,
    /// Set when some rule's condition has vanishing probability.
    pub infinite: bool,
}

fn clamped_ln(p: f64) -> f64 {
    p.max(EPS_LOG).ln()
}

fn two_group(n: f64, target: f64, p: f64) -> f64 {
    let mut c = 0.0;
    if target > 0.0 {
        c -= target * clamped_ln(p);
    }
    if target < 1.0 {
        c -= (1.0 - target) * clamped_ln(1.0 - p);
    }
    n * c
}

/// A rule prepared against a margin layout.
#[derive(Clone, Debug)]
enum Compiled {
    Fact { d: Vec<bool> },
    Conditional { db: Vec<bool>, b: Vec<bool> },
    Table { values: Vec<f64> },
}

#[derive(Clone, Debug)]
struct CompiledRule {
    margin: usize,
    target: f64,
    n: f64,
    kind: Compiled,
}

impl CompiledRule {
    fn new(rule: &Rule, margin: usize, vars: &VarSet) -> Result<Self, CostError> {
        let kind = match rule.kind {
            RuleKind::Table => Compiled::Table {
                values: rule.table_values.clone().unwrap_or_default(),
            },
            RuleKind::Fact => Compiled::Fact {
                d: event_mask(vars, &rule.consequent)?,
            },
            RuleKind::Conditional => Compiled::Conditional {
                db: event_mask(
                    vars,
                    &PropExpr::and(rule.consequent.clone(), rule.condition.clone()),
                )?,
                b: event_mask(vars, &rule.condition)?,
            },
        };
        Ok(CompiledRule {
            margin,
            target: rule.target,
            n: rule.reliability,
            kind,
        })
    }

    fn cost(&self, probs: &[f64]) -> f64 {
        let mass = |mask: &[bool]| -> f64 {
            mask.iter()
                .zip(probs)
                .filter(|(m, _)| **m)
                .map(|(_, p)| p)
                .sum()
        };
        match &self.kind {
            Compiled::Fact { d } => two_group(self.n, self.target, mass(d)),
            Compiled::Conditional { db, b } => {
                let pb = mass(b);
                if pb < EPS_COND {
                    return f64::INFINITY;
                }
                two_group(self.n, self.target, mass(db) / pb)
            }
            Compiled::Table { values } => {
                -self.n
                    * values
                        .iter()
                        .zip(probs)
                        .filter(|(v, _)| **v > 0.0)
                        .map(|(v, p)| v * clamped_ln(*p))
                        .sum::<f64>()
            }
        }
    }
}

/// All rules of a network compiled against a fixed list of margin layouts.
#[derive(Clone, Debug)]
pub struct CostModel {
    rules: Vec<CompiledRule>,
}

impl CostModel {
    /// Each rule is attached to the first margin whose variables equal its
    /// influence set.
    pub fn new(spec: &NetworkSpec, margin_vars: &[VarSet]) -> Result<Self, CostError> {
        let rules = spec
            .rules
            .iter()
            .map(|r| {
                let m = margin_vars
                    .iter()
                    .position(|v| *v == r.influence_set)
                    .ok_or_else(|| CostError::MissingMargin(r.influence_set.clone()))?;
                CompiledRule::new(r, m, &margin_vars[m])
            })
            .collect::<Result<_, _>>()?;
        Ok(CostModel { rules })
    }

    /// Index of the margin each rule lives on.
    pub fn rule_margins(&self) -> impl Iterator<Item = usize> + '_ {
        self.rules.iter().map(|r| r.margin)
    }

    pub fn breakdown(&self, margins: &[MarginalTable]) -> CostBreakdown {
        let per_rule: Vec<f64> = self
            .rules
            .iter()
            .map(|r| r.cost(margins[r.margin].probs()))
            .collect();
        let infinite = per_rule.iter().any(|c| c.is_infinite());
        let total = if infinite {
            f64::INFINITY
        } else {
            per_rule.iter().sum()
        };
        CostBreakdown {
            per_rule,
            total,
            infinite,
        }
    }

    pub fn total(&self, margins: &[MarginalTable]) -> f64 {
        let mut total = 0.0;
        for r in &self.rules {
            total += r.cost(margins[r.margin].probs());
        }
        total
    }
}

/// Cost `C^j` of one rule on a margin over exactly its influence set.
/// A vanishing condition probability gives `+inf`.
pub fn rule_cost(rule: &Rule, margin: &MarginalTable) -> Result<f64, CostError> {
    if margin.vars() != &rule.influence_set {
        return Err(CostError::VarMismatch {
            margin: margin.vars().clone(),
            rule: rule.influence_set.clone(),
        });
    }
    Ok(CompiledRule::new(rule, 0, margin.vars())?.cost(margin.probs()))
}

/// Sum of rule costs; each rule is evaluated on the margin whose variables
/// equal its influence set. Margins without rules contribute nothing.
pub fn total_cost(
    spec: &NetworkSpec,
    margins: &[MarginalTable],
) -> Result<CostBreakdown, CostError> {
    let vars: Vec<VarSet> = margins.iter().map(|m| m.vars().clone()).collect();
    Ok(CostModel::new(spec, &vars)?.breakdown(margins))
}

/// Cost of a rule that is met exactly: `n H(t)`.
pub fn irreducible_rule_cost(rule: &Rule) -> f64 {
    match rule.kind {
        RuleKind::Table => {
            rule.reliability * entropy(rule.table_values.as_deref().unwrap_or_default())
        }
        _ => rule.reliability * entropy(&[rule.target, 1.0 - rule.target]),
    }
}

/// Lowest reachable cost when all rules can be met simultaneously.
pub fn irreducible_cost(spec: &NetworkSpec) -> f64 {
    spec.rules.iter().map(irreducible_rule_cost).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::parse_network;

    fn one(vars: &[usize], probs: &[f64]) -> MarginalTable {
        MarginalTable::new(VarSet::new(vars.iter().copied()), probs.to_vec()).unwrap()
    }

    #[test]
    fn fact_at_target_is_n_times_entropy() {
        let spec = parse_network("var A1\np(A1) = 0.8 [n=100]").unwrap();
        let c = rule_cost(&spec.rules[0], &one(&[1], &[0.2, 0.8])).unwrap();
        // -100 (0.8 ln 0.8 + 0.2 ln 0.2)
        assert!((c - 50.040_242_353_818_84).abs() < 1e-9);
        assert!((c - irreducible_rule_cost(&spec.rules[0])).abs() < 1e-12);
    }

    #[test]
    fn fact_minimized_at_target() {
        for n in [1.0, 10.0, 300.0] {
            let rule = Rule::fact(PropExpr::atom(1), 0.8, n);
            let at = |p: f64| rule_cost(&rule, &one(&[1], &[1.0 - p, p])).unwrap();
            let best = (1..1000)
                .map(|i| i as f64 / 1000.0)
                .min_by(|a, b| at(*a).partial_cmp(&at(*b)).unwrap())
                .unwrap();
            assert!((best - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn vanishing_condition_is_infinite() {
        let spec = parse_network("var A1 A2\np(A2 | A1) = 0.5").unwrap();
        let m = one(&[1, 2], &[0.5, 0.5, 0.0, 0.0]);
        assert_eq!(rule_cost(&spec.rules[0], &m).unwrap(), f64::INFINITY);
        let b = total_cost(&spec, &[m]).unwrap();
        assert!(b.infinite);
        assert_eq!(b.total, f64::INFINITY);
    }

    #[test]
    fn exact_network_reaches_floor() {
        let spec = parse_network(
            "var A1 A2\np(A1) = 0.8 [n=50]\np(A2 | A1) = 0.5 [n=20]\np(A2 | not A1) = 0.2 [n=70]\ntable(A1, A2) = [0.16 0.04 0.4 0.4] [n=5]",
        )
        .unwrap();
        let margins = [
            one(&[1], &[0.2, 0.8]),
            one(&[1, 2], &[0.16, 0.04, 0.4, 0.4]),
        ];
        let b = total_cost(&spec, &margins).unwrap();
        assert!(!b.infinite);
        assert!((b.total - irreducible_cost(&spec)).abs() < 1e-9);
        assert!((b.total - b.per_rule.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn missing_and_mismatched_margins() {
        let spec = parse_network("var A1 A2\np(A2 | A1) = 0.5").unwrap();
        let m = one(&[1], &[0.5, 0.5]);
        assert!(matches!(
            total_cost(&spec, std::slice::from_ref(&m)),
            Err(CostError::MissingMargin(_))
        ));
        assert!(matches!(
            rule_cost(&spec.rules[0], &m),
            Err(CostError::VarMismatch { .. })
        ));
    }

    fn combined(p: f64) -> f64 {
        let spec = parse_network("var A1\np(A1) = 0.8 [n=300]\np(A1) = 0.2 [n=100]").unwrap();
        total_cost(&spec, &[one(&[1], &[1.0 - p, p])])
            .unwrap()
            .total
    }

    fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let g = (5f64.sqrt() - 1.0) / 2.0;
        while hi - lo > 1e-10 {
            let a = hi - g * (hi - lo);
            let b = lo + g * (hi - lo);
            if f(a) < f(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn weighted_conflict_optimum() {
        // stationary point of -(240+20) ln p - (60+80) ln(1-p): p = 260/400
        let p = golden_section(combined, 0.01, 0.99);
        assert!((p - 0.65).abs() <= 1e-6, "{p}");
    }

    #[test]
    fn equal_weight_conflict_is_symmetric() {
        let spec = parse_network("var A1\np(A1) = 0.8\np(A1) = 0.2").unwrap();
        let f = |p: f64| {
            total_cost(&spec, &[one(&[1], &[1.0 - p, p])])
                .unwrap()
                .total
        };
        assert!((golden_section(f, 0.01, 0.99) - 0.5).abs() <= 1e-6);
    }

    #[test]
    fn convex_in_probability() {
        let fact = Rule::fact(PropExpr::atom(1), 0.3, 40.0);
        let cond = Rule::conditional(PropExpr::atom(2), PropExpr::atom(1), 0.7, 40.0);
        let h = 1e-4;
        for i in 1..=99 {
            let p = i as f64 / 100.0;
            let f = |p: f64| rule_cost(&fact, &one(&[1], &[1.0 - p, p])).unwrap();
            assert!(f(p + h) - 2.0 * f(p) + f(p - h) >= 0.0);
            // conditional: vary p(A2 | A1) with p(A1) = 0.4 fixed
            let g = |q: f64| {
                rule_cost(&cond, &one(&[1, 2], &[0.3, 0.3, 0.4 * (1.0 - q), 0.4 * q])).unwrap()
            };
            assert!(g(p + h) - 2.0 * g(p) + g(p - h) >= 0.0);
        }
    }

    #[test]
    fn constants_do_not_move_argmin() {
        // dropping the n ln n terms shifts the cost uniformly
        let rule = Rule::fact(PropExpr::atom(1), 0.35, 80.0);
        let with_constant = |p: f64| {
            let c = rule_cost(&rule, &one(&[1], &[1.0 - p, p])).unwrap();
            c - 80.0 * (80f64).ln()
        };
        let a = golden_section(
            |p| rule_cost(&rule, &one(&[1], &[1.0 - p, p])).unwrap(),
            0.01,
            0.99,
        );
        let b = golden_section(with_constant, 0.01, 0.99);
        assert!((a - b).abs() < 1e-6);
    }
}
