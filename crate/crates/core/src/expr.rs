//! Boolean propositions over binary variables and sorted variable sets.
//!
//! Variables are identified by 1-based indices in declaration order, so the
//! proposition `A_i` holds exactly when variable `i` takes the value 1.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A sorted, duplicate-free set of variable indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VarSet(Vec<usize>);

impl VarSet {
    pub fn new<I: IntoIterator<Item = usize>>(vars: I) -> Self {
        let set: BTreeSet<usize> = vars.into_iter().collect();
        VarSet(set.into_iter().collect())
    }

    pub fn empty() -> Self {
        VarSet(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, var: usize) -> bool {
        self.0.binary_search(&var).is_ok()
    }

    /// Position of `var` within the sorted set.
    pub fn position(&self, var: usize) -> Option<usize> {
        self.0.binary_search(&var).ok()
    }

    pub fn is_subset(&self, other: &VarSet) -> bool {
        self.0.iter().all(|v| other.contains(*v))
    }

    pub fn union(&self, other: &VarSet) -> VarSet {
        VarSet::new(self.iter().chain(other.iter()))
    }

    pub fn intersection(&self, other: &VarSet) -> VarSet {
        VarSet(self.iter().filter(|v| other.contains(*v)).collect())
    }

    /// All subsets, in order of the bitmask over positions (empty set first).
    pub fn subsets(&self) -> impl Iterator<Item = VarSet> + '_ {
        let n = self.len();
        (0u64..(1u64 << n)).map(move |mask| {
            VarSet(
                (0..n)
                    .filter(|i| mask & (1 << i) != 0)
                    .map(|i| self.0[i])
                    .collect(),
            )
        })
    }
}

impl fmt::Display for VarSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, "}}")
    }
}

impl From<Vec<usize>> for VarSet {
    fn from(v: Vec<usize>) -> Self {
        VarSet::new(v)
    }
}

impl<const N: usize> From<[usize; N]> for VarSet {
    fn from(v: [usize; N]) -> Self {
        VarSet::new(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error("variable {0} has no value in the assignment")]
    MissingVariable(usize),
}

/// A boolean formula over proposition atoms.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PropExpr {
    True,
    False,
    Atom(usize),
    Not(Box<PropExpr>),
    And(Vec<PropExpr>),
    Or(Vec<PropExpr>),
}

impl PropExpr {
    pub fn atom(var: usize) -> Self {
        PropExpr::Atom(var)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(e: PropExpr) -> Self {
        PropExpr::Not(Box::new(e))
    }

    pub fn and(a: PropExpr, b: PropExpr) -> Self {
        PropExpr::And(vec![a, b])
    }

    pub fn or(a: PropExpr, b: PropExpr) -> Self {
        PropExpr::Or(vec![a, b])
    }

    pub fn is_true(&self) -> bool {
        matches!(self, PropExpr::True)
    }

    /// The set of atom indices occurring in the expression.
    pub fn vars(&self) -> VarSet {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        VarSet(out.into_iter().collect())
    }

    fn collect_vars(&self, out: &mut BTreeSet<usize>) {
        match self {
            PropExpr::True | PropExpr::False => {}
            PropExpr::Atom(v) => {
                out.insert(*v);
            }
            PropExpr::Not(e) => e.collect_vars(out),
            PropExpr::And(es) | PropExpr::Or(es) => es.iter().for_each(|e| e.collect_vars(out)),
        }
    }

    /// Evaluates under an assignment given as a lookup from variable index to
    /// its value.
    pub fn eval<F>(&self, lookup: &F) -> Result<bool, ExprError>
    where
        F: Fn(usize) -> Option<bool>,
    {
        Ok(match self {
            PropExpr::True => true,
            PropExpr::False => false,
            PropExpr::Atom(v) => lookup(*v).ok_or(ExprError::MissingVariable(*v))?,
            PropExpr::Not(e) => !e.eval(lookup)?,
            PropExpr::And(es) => {
                for e in es {
                    if !e.eval(lookup)? {
                        return Ok(false);
                    }
                }
                true
            }
            PropExpr::Or(es) => {
                for e in es {
                    if e.eval(lookup)? {
                        return Ok(true);
                    }
                }
                false
            }
        })
    }

    /// Evaluates on cell `config` of a table laid out over `vars`
    /// (last variable fastest-varying).
    pub fn eval_config(&self, vars: &VarSet, config: usize) -> Result<bool, ExprError> {
        let n = vars.len();
        self.eval(&|v| {
            vars.position(v)
                .map(|pos| (config >> (n - 1 - pos)) & 1 == 1)
        })
    }

    /// Renders the expression using `name` for atoms, parenthesizing so that
    /// the parser rebuilds the same tree.
    pub fn render<F: Fn(usize) -> String>(&self, name: &F) -> String {
        match self {
            PropExpr::True => "true".to_string(),
            PropExpr::False => "false".to_string(),
            PropExpr::Atom(v) => name(*v),
            PropExpr::Not(e) => match **e {
                PropExpr::And(_) | PropExpr::Or(_) => format!("not ({})", e.render(name)),
                _ => format!("not {}", e.render(name)),
            },
            PropExpr::And(es) => es
                .iter()
                .map(|e| match e {
                    PropExpr::And(_) | PropExpr::Or(_) => format!("({})", e.render(name)),
                    _ => e.render(name),
                })
                .collect::<Vec<_>>()
                .join(" and "),
            PropExpr::Or(es) => es
                .iter()
                .map(|e| match e {
                    PropExpr::Or(_) => format!("({})", e.render(name)),
                    _ => e.render(name),
                })
                .collect::<Vec<_>>()
                .join(" or "),
        }
    }
}

impl fmt::Display for PropExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.render(&|v| format!("A{v}")))
    }
}
