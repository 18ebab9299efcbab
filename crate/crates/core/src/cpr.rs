//! Cross-product ratios.
//!
//! For a nonempty subset `A` of a table's variables, `cpr(t, A)` is the log
//! of the ratio whose numerator multiplies the cells of the `A`-marginal
//! with an odd number of ones and whose denominator multiplies the cells
//! with an even number of ones:
//!
//! ```text
//! α_{i}   = log p^1 / p^0
//! α_{i,j} = log (p^01 p^10) / (p^11 p^00)
//! ```
//!
//! This is the opposite sign of the usual log odds ratio for `|A| = 2`.
//! Only whether an entry is zero matters for maximum-entropy checks.
//!
//! [`interaction`] is the log-linear interaction term of `A` computed over
//! the whole table (the `A`-contrast averaged over the other variables).
//! It coincides with `cpr` when `A` is the full variable set, and it is the
//! quantity that proportional fitting leaves untouched for subsets outside
//! the fitted margins.

use serde::Serialize;
use thiserror::Error;

use crate::expr::VarSet;
use crate::tables::{marginalize, projection_index, MarginalTable, MAX_TABLE_VARS};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CprError {
    #[error("cross-product ratio needs a nonempty variable subset")]
    EmptySubset,
    #[error("{sub} is not a subset of the table variables {vars}")]
    NotSubset { sub: VarSet, vars: VarSet },
    #[error("table over {got} variables exceeds the cap of {cap}")]
    CapExceeded { got: usize, cap: usize },
}

/// All cross-product ratios of one table, keyed by subset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CprMap {
    pub base_vars: VarSet,
    pub entries: Vec<(VarSet, f64)>,
}

impl CprMap {
    /// `α_∅` is 0 by definition.
    pub fn get(&self, subset: &VarSet) -> Option<f64> {
        if subset.is_empty() {
            return Some(0.0);
        }
        self.entries
            .iter()
            .find(|(a, _)| a == subset)
            .map(|(_, v)| *v)
    }
}

fn odd_parity(cell: usize) -> bool {
    cell.count_ones() % 2 == 1
}

/// Signed log sum over cells; zero cells give `-inf` (odd side only),
/// `+inf` (even side only) or NaN (both).
fn signed_log_sum<I: Iterator<Item = (bool, f64)>>(cells: I) -> f64 {
    let (mut sum, mut zero_odd, mut zero_even) = (0.0, false, false);
    for (odd, p) in cells {
        if p <= 0.0 {
            if odd {
                zero_odd = true;
            } else {
                zero_even = true;
            }
        } else if odd {
            sum += p.ln();
        } else {
            sum -= p.ln();
        }
    }
    match (zero_odd, zero_even) {
        (false, false) => sum,
        (true, false) => f64::NEG_INFINITY,
        (false, true) => f64::INFINITY,
        (true, true) => f64::NAN,
    }
}

fn check_subset(t: &MarginalTable, a: &VarSet) -> Result<(), CprError> {
    if a.is_empty() {
        return Err(CprError::EmptySubset);
    }
    if !a.is_subset(t.vars()) {
        return Err(CprError::NotSubset {
            sub: a.clone(),
            vars: t.vars().clone(),
        });
    }
    Ok(())
}

/// Cross-product ratio `α_A` of the `A`-marginal of `t`.
pub fn cpr(t: &MarginalTable, a: &VarSet) -> Result<f64, CprError> {
    check_subset(t, a)?;
    let s = marginalize(t, a).expect("checked subset");
    Ok(signed_log_sum(
        s.probs()
            .iter()
            .enumerate()
            .map(|(z, p)| (odd_parity(z), *p)),
    ))
}

/// `cpr(t, A)` for every nonempty `A ⊆ t.vars`.
pub fn all_cprs(t: &MarginalTable) -> Result<CprMap, CprError> {
    if t.vars().len() > MAX_TABLE_VARS {
        return Err(CprError::CapExceeded {
            got: t.vars().len(),
            cap: MAX_TABLE_VARS,
        });
    }
    let entries = t
        .vars()
        .subsets()
        .filter(|a| !a.is_empty())
        .map(|a| {
            let v = cpr(t, &a).expect("subset of own vars");
            (a, v)
        })
        .collect();
    Ok(CprMap {
        base_vars: t.vars().clone(),
        entries,
    })
}

/// Log-linear interaction of `A` over the full table:
/// `2^-(d-|A|) Σ_x σ(x_A) log t(x)`.
pub fn interaction(t: &MarginalTable, a: &VarSet) -> Result<f64, CprError> {
    check_subset(t, a)?;
    let idx = projection_index(t.vars(), a);
    let scale = (1u64 << (t.vars().len() - a.len())) as f64;
    let s = signed_log_sum(idx.iter().zip(t.probs()).map(|(z, p)| (odd_parity(*z), *p)));
    Ok(s / scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::product_table;

    fn table(vars: &[usize], probs: &[f64]) -> MarginalTable {
        MarginalTable::new(VarSet::new(vars.iter().copied()), probs.to_vec()).unwrap()
    }

    #[test]
    fn single_variable_log_odds() {
        let t = table(&[3], &[0.2, 0.8]);
        assert!((cpr(&t, &VarSet::from([3])).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((cpr(&t, &VarSet::from([3])).unwrap() - 1.386_294_361).abs() < 1e-9);
    }

    #[test]
    fn pairwise_sign_convention() {
        // (p00, p01, p10, p11) = (0.4, 0.1, 0.1, 0.4): log(0.01 / 0.16)
        let t = table(&[1, 2], &[0.4, 0.1, 0.1, 0.4]);
        let a = cpr(&t, &VarSet::from([1, 2])).unwrap();
        assert!((a - (0.01f64 / 0.16).ln()).abs() < 1e-12);
        assert!((a + 2.772_588_722).abs() < 1e-9);
        let p = t.probs();
        let printed = (p[1] * p[2]).ln() - (p[3] * p[0]).ln();
        assert!((a - printed).abs() < 1e-14);
    }

    #[test]
    fn three_way_matches_printed_ratio() {
        let probs = [0.05, 0.1, 0.15, 0.2, 0.12, 0.08, 0.1, 0.2];
        let t = table(&[1, 2, 3], &probs);
        // numerator: 111, 100, 010, 001; denominator: 000, 110, 101, 011
        let num = probs[7] * probs[4] * probs[2] * probs[1];
        let den = probs[0] * probs[6] * probs[5] * probs[3];
        let a = cpr(&t, &VarSet::from([1, 2, 3])).unwrap();
        assert!((a - (num / den).ln()).abs() < 1e-12);
    }

    #[test]
    fn independent_pair_has_zero_interaction() {
        let t = product_table(&[(1, 0.3), (2, 0.85)]);
        assert!(cpr(&t, &VarSet::from([1, 2])).unwrap().abs() < 1e-12);
    }

    #[test]
    fn uniform_all_zero() {
        let t = crate::tables::uniform_table(&VarSet::from([1, 2, 3])).unwrap();
        let m = all_cprs(&t).unwrap();
        assert_eq!(m.entries.len(), 7);
        assert!(m.entries.iter().all(|(_, v)| v.abs() < 1e-12));
        assert_eq!(m.get(&VarSet::empty()), Some(0.0));
    }

    #[test]
    fn product_table_only_main_effects() {
        let t = product_table(&[(1, 0.3), (2, 0.6), (4, 0.9)]);
        let m = all_cprs(&t).unwrap();
        for (a, v) in &m.entries {
            if a.len() >= 2 {
                assert!(v.abs() < 1e-12, "{a}: {v}");
            }
        }
        let expect = [(1, 0.3f64), (2, 0.6), (4, 0.9)];
        for (var, p1) in expect {
            let got = m.get(&VarSet::from([var])).unwrap();
            assert!((got - (p1 / (1.0 - p1)).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_cells_give_sentinels() {
        let t = table(&[1, 2], &[0.5, 0.0, 0.0, 0.5]);
        let m = all_cprs(&t).unwrap();
        assert_eq!(m.get(&VarSet::from([1, 2])), Some(f64::NEG_INFINITY));
        assert!(m.get(&VarSet::from([1])).unwrap().is_finite());
        let t = table(&[1], &[0.0, 1.0]);
        assert_eq!(cpr(&t, &VarSet::from([1])).unwrap(), f64::INFINITY);
        let t = table(&[1, 2], &[0.0, 0.5, 0.5, 0.0]);
        assert_eq!(cpr(&t, &VarSet::from([1, 2])).unwrap(), f64::INFINITY);
        let t = table(&[1, 2], &[0.0, 0.0, 0.5, 0.5]);
        assert!(cpr(&t, &VarSet::from([1, 2])).unwrap().is_nan());
    }

    #[test]
    fn errors() {
        let t = table(&[1, 2], &[0.25; 4]);
        assert_eq!(cpr(&t, &VarSet::empty()), Err(CprError::EmptySubset));
        assert!(matches!(
            cpr(&t, &VarSet::from([3])),
            Err(CprError::NotSubset { .. })
        ));
    }

    #[test]
    fn interaction_matches_cpr_on_full_set() {
        let probs = [0.05, 0.1, 0.15, 0.2, 0.12, 0.08, 0.1, 0.2];
        let t = table(&[1, 2, 3], &probs);
        let full = VarSet::from([1, 2, 3]);
        assert!((interaction(&t, &full).unwrap() - cpr(&t, &full).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn marginalization_consistency() {
        let probs = [0.05, 0.1, 0.15, 0.2, 0.12, 0.08, 0.1, 0.2];
        let t = table(&[1, 2, 3], &probs);
        for b in t.vars().subsets() {
            let tb = marginalize(&t, &b).unwrap();
            for a in b.subsets().filter(|a| !a.is_empty()) {
                let x = cpr(&t, &a).unwrap();
                let y = cpr(&tb, &a).unwrap();
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
