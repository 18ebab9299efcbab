use mesa::lang::influence_set;
use mesa::{parse_network, NetworkSpec, PropExpr, Query, Rule, VarSet};
use proptest::prelude::*;

const NAMES: [&str; 6] = ["A", "B2", "rain", "x_1", "Wet", "c"];

fn expr(k: usize) -> impl Strategy<Value = PropExpr> {
    let leaf = prop_oneof![
        8 => (1..=k).prop_map(PropExpr::atom),
        1 => Just(PropExpr::True),
        1 => Just(PropExpr::False),
    ];
    leaf.prop_recursive(4, 16, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(PropExpr::not),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| PropExpr::and(a, b)),
            (inner.clone(), inner).prop_map(|(a, b)| PropExpr::or(a, b)),
        ]
    })
}

fn rule(k: usize) -> impl Strategy<Value = Rule> {
    let weight = prop_oneof![Just(100.0), 1.0..1e4f64];
    prop_oneof![
        (expr(k), 0.0..=1.0f64, weight.clone()).prop_map(|(d, t, n)| Rule::fact(d, t, n)),
        (expr(k), expr(k), 0.0..=1.0f64, weight.clone())
            .prop_map(|(d, b, t, n)| Rule::conditional(d, b, t, n)),
        (
            proptest::sample::subsequence((1..=k).collect::<Vec<_>>(), 1..=k.min(3)),
            weight
        )
            .prop_flat_map(|(vars, n)| {
                let m = 1usize << vars.len();
                (Just(vars), proptest::collection::vec(0u32..8, m), Just(n))
            })
            .prop_filter_map("table needs mass", |(vars, w, n)| {
                // dyadic weights keep the values exact through printing
                let total: u32 = w.iter().sum();
                if total == 0 || !total.is_power_of_two() {
                    return None;
                }
                let values = w.iter().map(|x| *x as f64 / total as f64).collect();
                Some(Rule::table(VarSet::new(vars), values, n))
            }),
    ]
}

fn network() -> impl Strategy<Value = NetworkSpec> {
    (1..=NAMES.len())
        .prop_flat_map(|k| {
            let queries = proptest::collection::vec((expr(k), expr(k)), 0..3);
            (Just(k), proptest::collection::vec(rule(k), 1..5), queries)
        })
        .prop_filter_map("rules need variables", |(k, rules, queries)| {
            if rules.iter().any(|r| r.influence_set.is_empty()) {
                return None;
            }
            Some(NetworkSpec {
                variables: NAMES[..k].iter().map(|s| s.to_string()).collect(),
                rules,
                queries: queries
                    .into_iter()
                    .map(|(consequent, condition)| Query {
                        consequent,
                        condition,
                    })
                    .collect(),
                query_margins: vec![],
            })
        })
}

fn same_truth_table(a: &PropExpr, b: &PropExpr, k: usize) -> bool {
    let vars = VarSet::new(1..=k);
    (0..1usize << k).all(|c| a.eval_config(&vars, c).unwrap() == b.eval_config(&vars, c).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn printed_networks_reparse(spec in network()) {
        let once = parse_network(&spec.to_string()).unwrap();
        let twice = parse_network(&once.to_string()).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(once.rules.len(), spec.rules.len());
        let k = spec.k();
        for (a, b) in spec.rules.iter().zip(&once.rules) {
            prop_assert_eq!(a.kind, b.kind);
            prop_assert_eq!(a.target, b.target);
            prop_assert_eq!(a.reliability, b.reliability);
            prop_assert_eq!(&a.table_values, &b.table_values);
            prop_assert!(same_truth_table(&a.consequent, &b.consequent, k));
            prop_assert!(same_truth_table(&a.condition, &b.condition, k));
        }
    }

    #[test]
    fn negation_flips_every_assignment(e in expr(10)) {
        let vars = VarSet::new(1..=10);
        let neg = PropExpr::not(e.clone());
        for c in 0..1usize << 10 {
            prop_assert_eq!(neg.eval_config(&vars, c).unwrap(), !e.eval_config(&vars, c).unwrap());
        }
    }

    #[test]
    fn influence_sets_are_declared_and_closed(spec in network()) {
        let declared = VarSet::new(1..=spec.k());
        let family = spec.closure_family();
        for r in &spec.rules {
            let s = influence_set(r);
            prop_assert!(s.is_subset(&declared));
            for a in s.subsets() {
                prop_assert!(family.contains(&a));
                prop_assert!(spec.in_closure(&a));
            }
        }
    }
}

#[test]
fn parse_errors_point_at_the_problem() {
    let err = parse_network("var A1\np(A1 | ) = 0.5")
        .unwrap_err()
        .to_string();
    assert!(err.contains("line 2"), "{err}");
    let err = parse_network("var A\np(A) = 0.4\np(Z) = 0.1")
        .unwrap_err()
        .to_string();
    assert!(err.contains("line 3") && err.contains("`Z`"), "{err}");
}
