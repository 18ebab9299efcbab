//! Maximum-entropy inference over networks of probabilistic rules.
//!
//! Rules `p(D | B) = t [n]` over binary propositions may contradict each
//! other; each carries a reliability `n` read as a sample size. The solver
//! keeps one marginal table per influence set, perturbs one margin at a
//! time, restores agreement between overlapping margins by proportional
//! fitting and accepts or rejects the move with the Metropolis rule under
//! an increasing inverse temperature. The result is the cost-optimal
//! distribution with all interactions outside the rules' influence sets at
//! zero, from which conditional queries are read off.

pub mod cli;
pub mod cost;
pub mod cpr;
pub mod expr;
pub mod ipf;
pub mod joint;
pub mod lang;
pub mod mesa;
pub mod oracle;
pub mod tables;

pub use expr::{PropExpr, VarSet};
pub use lang::{parse_network, NetworkSpec, Query, Rule, RuleKind};
pub use tables::{JointTable, MarginalTable};

#[cfg(test)]
pub(crate) mod test_util {
    use crate::expr::VarSet;
    use crate::tables::MarginalTable;

    /// Independent variables with the given `p(x_v = 1)`.
    pub fn product_table(ones: &[(usize, f64)]) -> MarginalTable {
        let vars = VarSet::new(ones.iter().map(|(v, _)| *v));
        let d = vars.len();
        let probs = (0..1usize << d)
            .map(|cell| {
                vars.iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let p1 = ones.iter().find(|(w, _)| *w == v).unwrap().1;
                        if (cell >> (d - 1 - i)) & 1 == 1 {
                            p1
                        } else {
                            1.0 - p1
                        }
                    })
                    .product()
            })
            .collect();
        MarginalTable::new(vars, probs).unwrap()
    }
}
