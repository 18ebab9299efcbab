//! Exact reference solutions on the full joint for small networks.
//!
//! [`exact_me_consistent`] treats every rule as an exact constraint and
//! finds the maximum-entropy joint by cyclic I-projections from uniform:
//! facts and conditional rules have closed-form projections, tables are
//! proportional-fitting steps. [`brute_cost_min`] minimizes the total cost
//! over the joint by exponentiated-gradient descent from several starts; it
//! is the reference for networks whose rules contradict each other.
//!
//! Both work on the joint directly and share no code with the annealer
//! beyond table indexing and expression evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{PropExpr, VarSet};
use crate::lang::{NetworkSpec, Rule, RuleKind};
use crate::mesa::Solution;
use crate::tables::{
    conditional_prob, entropy, event_mask, marginalize, projection_index, JointTable, TableError,
    MAX_JOINT_VARS,
};

/// Largest constraint violation accepted by the maximum-entropy oracle.
pub const ME_TOL: f64 = 1e-10;
pub const ME_MAX_CYCLES: usize = 200_000;
/// Variable cap of the cost-minimizing oracle.
pub const BRUTE_MAX_VARS: usize = 12;
pub const BRUTE_STARTS: usize = 16;
pub const BRUTE_REL_TOL: f64 = 1e-10;
pub const BRUTE_MAX_ITER: usize = 200_000;
const EPS_LOG: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("{got} variables exceed the oracle cap of {cap}")]
    CapExceeded { got: usize, cap: usize },
    #[error("scaling did not converge after {cycles} cycles (violation {violation:e}); the rules are likely inconsistent")]
    NotConverged { cycles: usize, violation: f64 },
    #[error("rule {rule} cannot be met: its event has probability 0")]
    Infeasible { rule: usize },
    #[error(transparent)]
    Table(#[from] TableError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMethod {
    ExactMe,
    CostMin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub method: OracleMethod,
    pub joint: JointTable,
    pub cost: f64,
    pub entropy: f64,
    /// Query answers; `None` when the condition has probability 0.
    pub per_query: Vec<Option<f64>>,
    /// Scaling cycles or descent iterations of the winning start.
    pub iterations: usize,
    /// Largest constraint violation (exact method only).
    pub max_violation: Option<f64>,
    /// Set by [`compare`] users that keep the report alongside a solution.
    #[serde(default)]
    pub linf_vs_solution: Option<f64>,
}

/// One rule as masks over the full joint.
#[derive(Clone, Debug)]
enum Term {
    Fact { d: Vec<bool> },
    Conditional { db: Vec<bool>, ndb: Vec<bool> },
    Table { index: Vec<usize>, values: Vec<f64> },
}

#[derive(Clone, Debug)]
struct JointRule {
    term: Term,
    t: f64,
    n: f64,
}

fn compile(spec: &NetworkSpec) -> Result<Vec<JointRule>, TableError> {
    let all = VarSet::new(1..=spec.k());
    spec.rules
        .iter()
        .map(|r: &Rule| {
            let term = match r.kind {
                RuleKind::Fact => Term::Fact {
                    d: event_mask(&all, &r.consequent)?,
                },
                RuleKind::Conditional => {
                    let db = PropExpr::and(r.consequent.clone(), r.condition.clone());
                    let ndb =
                        PropExpr::and(PropExpr::not(r.consequent.clone()), r.condition.clone());
                    Term::Conditional {
                        db: event_mask(&all, &db)?,
                        ndb: event_mask(&all, &ndb)?,
                    }
                }
                RuleKind::Table => Term::Table {
                    index: projection_index(&all, &r.influence_set),
                    values: r.table_values.clone().unwrap_or_default(),
                },
            };
            Ok(JointRule {
                term,
                t: r.target,
                n: r.reliability,
            })
        })
        .collect()
}

fn mass(mask: &[bool], p: &[f64]) -> f64 {
    mask.iter()
        .zip(p)
        .filter(|(m, _)| **m)
        .map(|(_, x)| x)
        .sum()
}

fn project(index: &[usize], len: usize, p: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (c, x) in index.iter().zip(p) {
        out[*c] += x;
    }
    out
}

fn normalize(p: &mut [f64]) {
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
}

impl JointRule {
    fn violation(&self, p: &[f64]) -> f64 {
        match &self.term {
            Term::Fact { d } => (mass(d, p) - self.t).abs(),
            Term::Conditional { db, ndb } => {
                let (a, b) = (mass(db, p), mass(ndb, p));
                ((1.0 - self.t) * a - self.t * b).abs()
            }
            Term::Table { index, values } => project(index, values.len(), p)
                .iter()
                .zip(values)
                .map(|(x, v)| (x - v).abs())
                .fold(0.0, f64::max),
        }
    }

    /// I-projection of `p` onto the rule's constraint set.
    fn i_project(&self, p: &mut [f64]) -> Result<(), ()> {
        let t = self.t;
        let scale_two = |p: &mut [f64], a_mask: &[bool], b_mask: &[bool], fa: f64, fb: f64| {
            for ((x, a), b) in p.iter_mut().zip(a_mask).zip(b_mask) {
                if *a {
                    *x *= fa;
                } else if *b {
                    *x *= fb;
                }
            }
        };
        match &self.term {
            Term::Fact { d } => {
                let pd = mass(d, p);
                if (pd <= 0.0 && t > 0.0) || (pd >= 1.0 && t < 1.0) {
                    return Err(());
                }
                let fd = if t > 0.0 { t / pd } else { 0.0 };
                let fnd = if t < 1.0 { (1.0 - t) / (1.0 - pd) } else { 0.0 };
                for (x, m) in p.iter_mut().zip(d) {
                    *x *= if *m { fd } else { fnd };
                }
            }
            Term::Conditional { db, ndb } => {
                let (a, b) = (mass(db, p), mass(ndb, p));
                if a + b <= 0.0 {
                    return Ok(());
                }
                if (a <= 0.0 && t > 0.0) || (b <= 0.0 && t < 1.0) {
                    return Err(());
                }
                if t <= 0.0 {
                    scale_two(p, db, ndb, 0.0, 1.0);
                } else if t >= 1.0 {
                    scale_two(p, db, ndb, 1.0, 0.0);
                } else {
                    // q = p e^{λ f} with f = 1-t on D∧B and -t on ¬D∧B
                    let lambda = (t * b / ((1.0 - t) * a)).ln();
                    scale_two(p, db, ndb, (lambda * (1.0 - t)).exp(), (-lambda * t).exp());
                }
                normalize(p);
            }
            Term::Table { index, values } => {
                let cur = project(index, values.len(), p);
                for (x, c) in p.iter_mut().zip(index) {
                    if cur[*c] > 0.0 {
                        *x *= values[*c] / cur[*c];
                    } else if values[*c] > 0.0 {
                        return Err(());
                    }
                }
                normalize(p);
            }
        }
        Ok(())
    }

    fn cost(&self, p: &[f64]) -> f64 {
        let ln = |x: f64| x.max(EPS_LOG).ln();
        let two = |n: f64, t: f64, q: f64| {
            let mut c = 0.0;
            if t > 0.0 {
                c -= t * ln(q);
            }
            if t < 1.0 {
                c -= (1.0 - t) * ln(1.0 - q);
            }
            n * c
        };
        match &self.term {
            Term::Fact { d } => two(self.n, self.t, mass(d, p)),
            Term::Conditional { db, ndb } => {
                let (a, b) = (mass(db, p), mass(ndb, p));
                if a + b < crate::tables::EPS_COND {
                    return f64::INFINITY;
                }
                two(self.n, self.t, a / (a + b))
            }
            Term::Table { index, values } => {
                let cur = project(index, values.len(), p);
                -self.n
                    * values
                        .iter()
                        .zip(&cur)
                        .filter(|(v, _)| **v > 0.0)
                        .map(|(v, c)| v * ln(*c))
                        .sum::<f64>()
            }
        }
    }

    fn add_gradient(&self, p: &[f64], g: &mut [f64]) {
        let inv = |x: f64| 1.0 / x.max(EPS_LOG);
        let (n, t) = (self.n, self.t);
        match &self.term {
            Term::Fact { d } => {
                let q = mass(d, p);
                let mut gd = 0.0;
                if t > 0.0 {
                    gd -= n * t * inv(q);
                }
                if t < 1.0 {
                    gd += n * (1.0 - t) * inv(1.0 - q);
                }
                for (x, m) in g.iter_mut().zip(d) {
                    if *m {
                        *x += gd;
                    }
                }
            }
            Term::Conditional { db, ndb } => {
                let (a, b) = (mass(db, p), mass(ndb, p));
                let ib = n * inv(a + b);
                let ga = if t > 0.0 { -n * t * inv(a) } else { 0.0 } + ib;
                let gb = if t < 1.0 {
                    -n * (1.0 - t) * inv(b)
                } else {
                    0.0
                } + ib;
                for ((x, ma), mb) in g.iter_mut().zip(db).zip(ndb) {
                    if *ma {
                        *x += ga;
                    } else if *mb {
                        *x += gb;
                    }
                }
            }
            Term::Table { index, values } => {
                let cur = project(index, values.len(), p);
                for (x, c) in g.iter_mut().zip(index) {
                    *x -= n * values[*c] * inv(cur[*c]);
                }
            }
        }
    }
}

fn total_cost(rules: &[JointRule], p: &[f64]) -> f64 {
    rules.iter().map(|r| r.cost(p)).sum()
}

fn answers(spec: &NetworkSpec, joint: &JointTable) -> Vec<Option<f64>> {
    let t = joint.as_table();
    spec.queries
        .iter()
        .map(|q| conditional_prob(&t, &q.consequent, &q.condition).ok())
        .collect()
}

fn report(
    spec: &NetworkSpec,
    rules: &[JointRule],
    method: OracleMethod,
    probs: Vec<f64>,
    iterations: usize,
    max_violation: Option<f64>,
) -> Result<OracleReport, OracleError> {
    let cost = total_cost(rules, &probs);
    let joint = JointTable::new(spec.k(), probs)?;
    Ok(OracleReport {
        method,
        cost,
        entropy: entropy(joint.probs()),
        per_query: answers(spec, &joint),
        joint,
        iterations,
        max_violation,
        linf_vs_solution: None,
    })
}

/// Maximum-entropy joint meeting every rule exactly.
pub fn exact_me_consistent(spec: &NetworkSpec) -> Result<OracleReport, OracleError> {
    let k = spec.k();
    if k > MAX_JOINT_VARS {
        return Err(OracleError::CapExceeded {
            got: k,
            cap: MAX_JOINT_VARS,
        });
    }
    let rules = compile(spec)?;
    let mut p = JointTable::uniform(k)?.probs().to_vec();
    let violation = |p: &[f64]| rules.iter().map(|r| r.violation(p)).fold(0.0, f64::max);
    let mut v = violation(&p);
    let mut cycles = 0;
    while v > ME_TOL {
        if cycles == ME_MAX_CYCLES {
            return Err(OracleError::NotConverged {
                cycles,
                violation: v,
            });
        }
        for (i, r) in rules.iter().enumerate() {
            r.i_project(&mut p)
                .map_err(|_| OracleError::Infeasible { rule: i })?;
        }
        cycles += 1;
        v = violation(&p);
    }
    report(spec, &rules, OracleMethod::ExactMe, p, cycles, Some(v))
}

/// Exponentiated-gradient descent from `p` with backtracking step sizes.
fn descend(rules: &[JointRule], mut p: Vec<f64>) -> (Vec<f64>, f64, usize) {
    let mut c = total_cost(rules, &p);
    let mut eta = 1.0;
    let mut g = vec![0.0; p.len()];
    for iter in 0..BRUTE_MAX_ITER {
        g.iter_mut().for_each(|x| *x = 0.0);
        rules.iter().for_each(|r| r.add_gradient(&p, &mut g));
        let gmax = g.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
        let mut improved = None;
        let mut step = eta;
        for _ in 0..60 {
            // scale-free step: the largest exponent is `step`
            let mut q: Vec<f64> = p
                .iter()
                .zip(&g)
                .map(|(x, gi)| x * (-step * gi / gmax).exp())
                .collect();
            normalize(&mut q);
            let cq = total_cost(rules, &q);
            if cq < c {
                improved = Some((q, cq));
                break;
            }
            step *= 0.5;
        }
        let Some((q, cq)) = improved else {
            return (p, c, iter);
        };
        let rel = (c - cq) / c.abs().max(1.0);
        p = q;
        c = cq;
        eta = (step * 2.0).min(1.0);
        if rel < BRUTE_REL_TOL {
            return (p, c, iter + 1);
        }
    }
    (p, c, BRUTE_MAX_ITER)
}

/// Minimum-cost joint over several starts: uniform, then seeded draws from
/// the flat Dirichlet.
pub fn brute_cost_min(spec: &NetworkSpec) -> Result<OracleReport, OracleError> {
    let k = spec.k();
    if k > BRUTE_MAX_VARS {
        return Err(OracleError::CapExceeded {
            got: k,
            cap: BRUTE_MAX_VARS,
        });
    }
    let rules = compile(spec)?;
    let m = 1usize << k;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut best: Option<(Vec<f64>, f64, usize)> = None;
    for start in 0..BRUTE_STARTS {
        let mut p0: Vec<f64> = if start == 0 {
            vec![1.0 / m as f64; m]
        } else {
            (0..m).map(|_| Exp1.sample(&mut rng)).collect()
        };
        normalize(&mut p0);
        let run = descend(&rules, p0);
        if best.as_ref().is_none_or(|b| run.1 < b.1) {
            best = Some(run);
        }
    }
    let (p, _, iters) = best.expect("at least one start");
    report(spec, &rules, OracleMethod::CostMin, p, iters, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginDelta {
    pub vars: VarSet,
    pub linf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub margins: Vec<MarginDelta>,
    /// Largest of the per-margin distances.
    pub linf: f64,
    /// Solution minus oracle, per query; `None` when either is undefined.
    pub query_deltas: Vec<Option<f64>>,
    pub cost_delta: f64,
}

/// Distances between a solution's margins and the oracle joint.
pub fn compare(spec: &NetworkSpec, sol: &Solution, report: &OracleReport) -> Comparison {
    let joint = report.joint.as_table();
    let margins: Vec<MarginDelta> = sol
        .margins
        .iter()
        .map(|m| {
            let o = marginalize(&joint, m.vars()).expect("margin variables are declared");
            MarginDelta {
                vars: m.vars().clone(),
                linf: m.linf(&o),
            }
        })
        .collect();
    let linf = margins.iter().map(|d| d.linf).fold(0.0, f64::max);
    let query_deltas = spec
        .queries
        .iter()
        .zip(&report.per_query)
        .map(|(q, o)| {
            let s = sol
                .covering_margin(&q.vars())
                .and_then(|m| conditional_prob(m, &q.consequent, &q.condition).ok());
            Some(s? - (*o)?)
        })
        .collect();
    Comparison {
        margins,
        linf,
        query_deltas,
        cost_delta: sol.final_cost.total - report.cost,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpr::interaction;
    use crate::lang::parse_network;
    use crate::mesa::{chain_rng, solve, AnnealConfig};
    use rand::Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn single_fact_joint() {
        let spec = parse_network("var A1 A2\np(A1) = 0.8").unwrap();
        let r = exact_me_consistent(&spec).unwrap();
        assert!(close(r.joint.probs(), &[0.1, 0.1, 0.4, 0.4], 1e-12));
    }

    #[test]
    fn no_rules_is_uniform() {
        let spec = NetworkSpec {
            variables: vec!["A".into(), "B".into(), "C".into()],
            rules: vec![],
            queries: vec![],
            query_margins: vec![],
        };
        let r = exact_me_consistent(&spec).unwrap();
        assert!(close(r.joint.probs(), &[0.125; 8], 1e-15));
        assert!((r.entropy - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn chain_joint() {
        let spec =
            parse_network("var A1 A2\np(A1) = 0.8\np(A2 | A1) = 0.5\np(A2 | not A1) = 0.2\nquery(A2)\nquery(A1 | A2)")
                .unwrap();
        let r = exact_me_consistent(&spec).unwrap();
        assert!(close(r.joint.probs(), &[0.16, 0.04, 0.40, 0.40], 1e-9));
        assert!((r.per_query[0].unwrap() - 0.44).abs() < 1e-9);
        assert!((r.per_query[1].unwrap() - 0.4 / 0.44).abs() < 1e-9);
    }

    #[test]
    fn conditional_with_zero_target() {
        let spec = parse_network("var A B\np(B | A) = 0\np(A) = 0.5").unwrap();
        let r = exact_me_consistent(&spec).unwrap();
        assert!(close(r.joint.probs(), &[0.25, 0.25, 0.5, 0.0], 1e-12));
    }

    #[test]
    fn inconsistent_rules_do_not_converge() {
        let spec = parse_network("var A\np(A) = 0.8\np(A) = 0.2").unwrap();
        assert!(matches!(
            exact_me_consistent(&spec),
            Err(OracleError::NotConverged { .. })
        ));
    }

    #[test]
    fn infeasible_rule() {
        let spec = parse_network("var A B\np(A) = 0\np(A and B) = 0.5").unwrap();
        assert_eq!(
            exact_me_consistent(&spec),
            Err(OracleError::Infeasible { rule: 1 })
        );
    }

    #[test]
    fn caps() {
        let names: Vec<String> = (1..=17).map(|i| format!("A{i}")).collect();
        let text = format!("var {}\np(A1) = 0.5", names.join(" "));
        let spec = parse_network(&text).unwrap();
        assert!(matches!(
            exact_me_consistent(&spec),
            Err(OracleError::CapExceeded { got: 17, .. })
        ));
        assert!(matches!(
            brute_cost_min(&spec),
            Err(OracleError::CapExceeded { got: 17, cap: 12 })
        ));
    }

    /// Satisfies every rule and leaves all interactions outside the
    /// influence sets at zero.
    #[test]
    fn me_self_test() {
        let spec = parse_network(
            "var A B C D E F\n\
             p(B | A) = 0.7\np(C | B and A) = 0.4\np(D | not C) = 0.9\np(E) = 0.3\np(F | E or D) = 0.6",
        )
        .unwrap();
        let r = exact_me_consistent(&spec).unwrap();
        assert!(r.max_violation.unwrap() <= 1e-10);
        let family = spec.closure_family();
        let t = r.joint.as_table();
        for a in t.vars().subsets().filter(|a| !a.is_empty() && a.len() <= 4) {
            if !family.contains(&a) {
                let x = interaction(&t, &a).unwrap();
                assert!(x.abs() < 1e-6, "{a}: {x}");
            }
        }
    }

    #[test]
    fn me_beats_feasible_perturbations() {
        // a single pairwise table leaves a 4-dimensional feasible set in k = 3
        let spec = parse_network("var A B C\np(B | A) = 0.7\np(A) = 0.4").unwrap();
        let r = exact_me_consistent(&spec).unwrap();
        let rules = compile(&spec).unwrap();
        let mut rng = chain_rng(4, 0);
        // feasible directions: contrasts in C within each (A, B) cell
        for _ in 0..100 {
            let mut q = r.joint.probs().to_vec();
            for pair in 0..4 {
                let d = (rng.random::<f64>() - 0.5) * 0.05;
                let (lo, hi) = (2 * pair, 2 * pair + 1);
                let d = d.clamp(-q[hi], q[lo]);
                q[lo] -= d;
                q[hi] += d;
            }
            assert!(rules.iter().all(|r| r.violation(&q) < 1e-9));
            assert!(entropy(&q) <= r.entropy + 1e-9);
        }
    }

    #[test]
    fn brute_conflicts() {
        let sym =
            parse_network("var A1\np(A1) = 0.8 [n=100]\np(A1) = 0.2 [n=100]\nquery(A1)").unwrap();
        let r = brute_cost_min(&sym).unwrap();
        assert!((r.per_query[0].unwrap() - 0.5).abs() < 1e-6);
        let weighted =
            parse_network("var A1\np(A1) = 0.8 [n=300]\np(A1) = 0.2 [n=100]\nquery(A1)").unwrap();
        let r = brute_cost_min(&weighted).unwrap();
        assert!((r.per_query[0].unwrap() - 0.65).abs() < 1e-6);
    }

    #[test]
    fn brute_matches_exact_cost_on_consistent_networks() {
        for text in [
            "var A1 A2\np(A1) = 0.8\np(A2 | A1) = 0.5\np(A2 | not A1) = 0.2",
            "var A B C\np(B | A) = 0.7\np(C | B) = 0.6\np(A | C) = 0.3",
            "var A B\ntable(A, B) = [0.1 0.2 0.3 0.4]",
        ] {
            let spec = parse_network(text).unwrap();
            let e = exact_me_consistent(&spec).unwrap();
            let b = brute_cost_min(&spec).unwrap();
            assert!(
                (e.cost - b.cost).abs() < 1e-6,
                "{text}: {} vs {}",
                e.cost,
                b.cost
            );
        }
    }

    #[test]
    fn compare_self_and_solution() {
        let spec = parse_network("var A1 A2\np(A1) = 0.8 [n=100]\nquery(A2 | A1)").unwrap();
        let oracle = exact_me_consistent(&spec).unwrap();
        let sol = solve(
            &spec,
            &AnnealConfig {
                seed: 1,
                ..AnnealConfig::default()
            },
        )
        .unwrap();
        let c = compare(&spec, &sol, &oracle);
        assert!(c.linf <= 1e-3, "{c:?}");
        assert!(c.query_deltas[0].unwrap().abs() <= 1e-2);
        let brute = brute_cost_min(&spec).unwrap();
        assert!(brute.cost <= sol.final_cost.total + 1e-6);

        // a solution built from the oracle itself has zero deltas
        let mut same = sol.clone();
        let joint = oracle.joint.as_table();
        for m in &mut same.margins {
            *m = marginalize(&joint, m.vars()).unwrap();
        }
        same.final_cost.total = oracle.cost;
        let c = compare(&spec, &same, &oracle);
        assert_eq!(c.linf, 0.0);
        assert!(c.query_deltas.iter().all(|d| *d == Some(0.0)));
        assert_eq!(c.cost_delta, 0.0);
    }
}
