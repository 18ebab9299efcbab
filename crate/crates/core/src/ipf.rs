//! Iterative proportional fitting and margin adaptation.
//!
//! `ipf_fit` scales a table until its marginals on the target subsets match
//! the targets. Each scaling multiplies cells by a function of the target
//! variables only, so interactions of subsets that are not contained in any
//! target subset are left unchanged, and zero cells stay zero.
//!
//! `adapt_margins` restores agreement between overlapping margins after one
//! of them was perturbed, by fitting every other margin to the shared
//! marginals of its neighbours.

use std::collections::VecDeque;

use thiserror::Error;

use crate::expr::VarSet;
use crate::tables::{compatibility_residual, marginalize, projection_index, MarginalTable};

/// Cap on sweeps over the margin graph in [`adapt_margins`].
pub const DEFAULT_MAX_SWEEPS: usize = 50;
/// Compatibility tolerance used by margin adaptation.
pub const DEFAULT_ADAPT_TOL: f64 = 1e-8;

const INNER_MAX_ITER: usize = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IpfError {
    #[error("target subset {sub} is not contained in the table variables {vars}")]
    NotSubset { sub: VarSet, vars: VarSet },
    #[error("targets disagree by {gap} on their shared variables {shared}")]
    Inconsistent { shared: VarSet, gap: f64 },
}

/// A marginal distribution the fitted table must reproduce.
#[derive(Clone, Debug, PartialEq)]
pub struct IpfTarget {
    pub target: MarginalTable,
}

impl IpfTarget {
    pub fn new(target: MarginalTable) -> Self {
        IpfTarget { target }
    }

    pub fn subset(&self) -> &VarSet {
        self.target.vars()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IpfReport {
    /// Completed cycles through the targets.
    pub iterations: usize,
    /// Largest L-inf deviation of a fitted marginal from its target.
    pub final_residual: f64,
    pub converged: bool,
}

/// A target prepared against a fixed table layout.
struct Scaling<'a> {
    index: &'a [usize],
    target: &'a [f64],
}

fn project(cells: &[f64], index: &[usize], out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for (c, p) in index.iter().zip(cells) {
        out[*c] += p;
    }
}

/// One proportional scaling of `cells` towards `target`; returns the L-inf
/// deviation measured before scaling.
fn scale(cells: &mut [f64], index: &[usize], target: &[f64], marg: &mut [f64]) -> f64 {
    project(cells, index, marg);
    let dev = marg
        .iter()
        .zip(target)
        .map(|(m, t)| (m - t).abs())
        .fold(0.0, f64::max);
    for m in marg.iter_mut().zip(target) {
        *m.0 = if *m.0 > 0.0 { m.1 / *m.0 } else { 0.0 };
    }
    for (c, p) in index.iter().zip(cells.iter_mut()) {
        *p *= marg[*c];
    }
    let sum: f64 = cells.iter().sum();
    if sum > 0.0 && (sum - 1.0).abs() > 0.0 {
        cells.iter_mut().for_each(|p| *p /= sum);
    }
    dev
}

fn residual(cells: &[f64], scalings: &[Scaling<'_>], buf: &mut Vec<f64>) -> f64 {
    scalings
        .iter()
        .map(|s| {
            buf.clear();
            buf.resize(s.target.len(), 0.0);
            project(cells, s.index, buf);
            buf.iter()
                .zip(s.target)
                .map(|(m, t)| (m - t).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Cycles through the scalings in order until the largest deviation is at
/// most `tol`. Returns the best cells seen with their report.
fn run_cycles(
    cells: &mut Vec<f64>,
    scalings: &[Scaling<'_>],
    tol: f64,
    max_iter: usize,
) -> IpfReport {
    let mut buf = Vec::new();
    let mut best = cells.clone();
    let mut best_res = residual(cells, scalings, &mut buf);
    let mut iterations = 0;
    while iterations < max_iter {
        for s in scalings {
            buf.clear();
            buf.resize(s.target.len(), 0.0);
            scale(cells, s.index, s.target, &mut buf);
        }
        iterations += 1;
        let res = residual(cells, scalings, &mut buf);
        if res < best_res {
            best_res = res;
            best.clone_from(cells);
        }
        if res <= tol {
            break;
        }
    }
    if best_res < residual(cells, scalings, &mut buf) {
        cells.clone_from(&best);
    }
    IpfReport {
        iterations,
        final_residual: best_res,
        converged: best_res <= tol,
    }
}

/// Scales `t` to match every target marginal within `tol`.
///
/// Targets are visited in the given order; one iteration is a full cycle.
/// Fails if a target subset is not contained in `t`'s variables or if two
/// targets disagree by more than `tol` on their shared variables. Running
/// out of iterations is not an error: the best table is returned with
/// `converged = false`.
pub fn ipf_fit(
    t: &MarginalTable,
    targets: &[IpfTarget],
    tol: f64,
    max_iter: usize,
) -> Result<(MarginalTable, IpfReport), IpfError> {
    for tg in targets {
        if !tg.subset().is_subset(t.vars()) {
            return Err(IpfError::NotSubset {
                sub: tg.subset().clone(),
                vars: t.vars().clone(),
            });
        }
    }
    for (i, a) in targets.iter().enumerate() {
        for b in &targets[i + 1..] {
            let shared = a.subset().intersection(b.subset());
            if shared.is_empty() {
                continue;
            }
            let ma = marginalize(&a.target, &shared).expect("shared subset");
            let mb = marginalize(&b.target, &shared).expect("shared subset");
            let gap = ma.linf(&mb);
            if gap > tol {
                return Err(IpfError::Inconsistent { shared, gap });
            }
        }
    }
    let indices: Vec<Vec<usize>> = targets
        .iter()
        .map(|tg| projection_index(t.vars(), tg.subset()))
        .collect();
    let scalings: Vec<Scaling<'_>> = indices
        .iter()
        .zip(targets)
        .map(|(index, tg)| Scaling {
            index,
            target: tg.target.probs(),
        })
        .collect();
    let mut cells = t.probs().to_vec();
    let report = run_cycles(&mut cells, &scalings, tol, max_iter);
    Ok((MarginalTable::from_parts(t.vars().clone(), cells), report))
}

/// Projection maps between two overlapping margins.
#[derive(Clone, Debug)]
struct Edge {
    other: usize,
    shared_len: usize,
    /// cells of this margin -> cells of the shared sub-table
    own_index: Vec<usize>,
    /// cells of the other margin -> cells of the shared sub-table
    other_index: Vec<usize>,
}

/// The overlap graph of a fixed list of margin layouts, with projection
/// indices precomputed so repeated adaptation is cheap.
#[derive(Clone, Debug)]
pub struct MarginGraph {
    vars: Vec<VarSet>,
    edges: Vec<Vec<Edge>>,
}

impl MarginGraph {
    pub fn new(vars: &[VarSet]) -> Self {
        let edges = (0..vars.len())
            .map(|r| {
                let mut es: Vec<Edge> = (0..vars.len())
                    .filter(|&u| u != r)
                    .filter_map(|u| {
                        let shared = vars[r].intersection(&vars[u]);
                        (!shared.is_empty()).then(|| Edge {
                            other: u,
                            shared_len: shared.len(),
                            own_index: projection_index(&vars[r], &shared),
                            other_index: projection_index(&vars[u], &shared),
                        })
                    })
                    .collect();
                // larger overlaps first, then by index
                es.sort_by(|a, b| b.shared_len.cmp(&a.shared_len).then(a.other.cmp(&b.other)));
                es
            })
            .collect();
        MarginGraph {
            vars: vars.to_vec(),
            edges,
        }
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn neighbours(&self, r: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges[r].iter().map(|e| e.other)
    }

    /// Breadth-first visiting order from `start`, excluding `start`.
    fn bfs(&self, start: usize) -> Vec<usize> {
        let mut seen = vec![false; self.len()];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut order = Vec::new();
        while let Some(r) = queue.pop_front() {
            for e in &self.edges[r] {
                if !seen[e.other] {
                    seen[e.other] = true;
                    order.push(e.other);
                    queue.push_back(e.other);
                }
            }
        }
        order
    }

    /// Largest disagreement between neighbouring margins.
    pub fn residual(&self, margins: &[MarginalTable]) -> f64 {
        let mut worst: f64 = 0.0;
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (r, es) in self.edges.iter().enumerate() {
            for e in es.iter().filter(|e| e.other > r) {
                let n = 1 << e.shared_len;
                a.clear();
                a.resize(n, 0.0);
                b.clear();
                b.resize(n, 0.0);
                project(margins[r].probs(), &e.own_index, &mut a);
                project(margins[e.other].probs(), &e.other_index, &mut b);
                for (x, y) in a.iter().zip(&b) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        worst
    }

    /// Propagates a change of margin `perturbed` through the graph in place.
    /// Returns the compatibility residual after the last sweep.
    pub fn adapt(
        &self,
        perturbed: usize,
        margins: &mut [MarginalTable],
        tol: f64,
        max_sweeps: usize,
    ) -> f64 {
        let order = self.bfs(perturbed);
        if order.is_empty() {
            return self.residual(margins);
        }
        let inner_tol = tol * 0.1;
        let mut res = f64::INFINITY;
        for sweep in 0..max_sweeps.max(1) {
            let mut updated = vec![false; self.len()];
            updated[perturbed] = true;
            for &r in &order {
                let targets: Vec<(&[usize], Vec<f64>)> = self.edges[r]
                    .iter()
                    .filter(|e| sweep > 0 || updated[e.other])
                    .map(|e| {
                        let mut t = vec![0.0; 1 << e.shared_len];
                        project(margins[e.other].probs(), &e.other_index, &mut t);
                        (e.own_index.as_slice(), t)
                    })
                    .collect();
                let scalings: Vec<Scaling<'_>> = targets
                    .iter()
                    .map(|(index, target)| Scaling { index, target })
                    .collect();
                let mut cells = margins[r].probs().to_vec();
                run_cycles(&mut cells, &scalings, inner_tol, INNER_MAX_ITER);
                margins[r].probs_mut().copy_from_slice(&cells);
                updated[r] = true;
            }
            res = self.residual(margins);
            if res <= tol {
                break;
            }
        }
        res
    }
}

/// Restores compatibility after margin `perturbed` changed. The perturbed
/// margin is never modified. Returns the updated margins and the final
/// compatibility residual.
pub fn adapt_margins(
    perturbed: usize,
    margins: &[MarginalTable],
    tol: f64,
    max_sweeps: usize,
) -> (Vec<MarginalTable>, f64) {
    let vars: Vec<VarSet> = margins.iter().map(|m| m.vars().clone()).collect();
    let graph = MarginGraph::new(&vars);
    let mut out = margins.to_vec();
    graph.adapt(perturbed, &mut out, tol, max_sweeps);
    let res = compatibility_residual(&out);
    (out, res)
}
