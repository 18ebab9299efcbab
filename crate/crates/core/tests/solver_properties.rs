use mesa::cpr::interaction;
use mesa::joint::anneal_joint;
use mesa::mesa::{answer_query, chain_rng, solve, AnnealConfig};
use mesa::oracle::{brute_cost_min, exact_me_consistent};
use mesa::tables::compatibility_residual;
use mesa::{parse_network, VarSet};

fn cfg(seed: u64) -> AnnealConfig {
    AnnealConfig {
        seed,
        ..AnnealConfig::default()
    }
}

#[test]
fn query_margins_carry_no_unsupported_interactions() {
    let spec = parse_network(
        "var A B C D E\n\
         p(B | A) = 0.8\np(C | B) = 0.3\np(D | C or A) = 0.6\np(E) = 0.1\n\
         query(A and E | D)\nquery(B and C and D)",
    )
    .unwrap();
    let sol = solve(&spec, &cfg(2)).unwrap();
    assert!(compatibility_residual(&sol.margins) <= 1e-8);
    let mut checked = 0;
    for m in &sol.margins[sol.rule_margins..] {
        for a in m
            .vars()
            .subsets()
            .filter(|a| !a.is_empty() && !spec.in_closure(a))
        {
            let x = interaction(m, &a).unwrap();
            assert!(x.abs() <= 0.05, "{a} in {}: {x}", m.vars());
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn inconsistent_rules_reach_the_cost_minimum() {
    let spec =
        parse_network("var A B\np(A) = 0.8\np(B | A) = 0.9\np(B) = 0.3 [n=50]\nquery(B)\nquery(A)")
            .unwrap();
    assert!(exact_me_consistent(&spec).is_ok() || brute_cost_min(&spec).is_ok());
    let brute = brute_cost_min(&spec).unwrap();
    let sol = solve(&spec, &cfg(3)).unwrap();
    let gap = sol.final_cost.total - brute.cost;
    assert!(gap >= -1e-6, "oracle is a lower bound: {gap}");
    assert!(gap <= 1e-3 * brute.cost, "{gap}");
    for (q, o) in spec.queries.iter().zip(&brute.per_query) {
        assert!((answer_query(&sol, q).unwrap() - o.unwrap()).abs() < 0.01);
    }
}

#[test]
fn brute_force_bounds_the_solver_on_consistent_networks() {
    for text in [
        "var A1 A2\np(A1) = 0.8\np(A2 | A1) = 0.5\np(A2 | not A1) = 0.2",
        "var A1 A2 A3\np(A1 and A2) = 0.3\np(A3 | A1 or A2) = 0.6",
    ] {
        let spec = parse_network(text).unwrap();
        let brute = brute_cost_min(&spec).unwrap();
        let sol = solve(&spec, &cfg(4)).unwrap();
        assert!(brute.cost <= sol.final_cost.total + 1e-6, "{text}");
        assert!(
            sol.final_cost.total - sol.irreducible_cost <= 1e-5,
            "{text}"
        );
    }
}

#[test]
fn restarts_keep_the_cheapest_chain() {
    let spec = parse_network("var A B C\np(B | A) = 0.7\np(C | B) = 0.6\np(A | C) = 0.3\nquery(A)")
        .unwrap();
    let config = AnnealConfig {
        restarts: 3,
        max_temps: 60,
        ..cfg(9)
    };
    let sol = solve(&spec, &config).unwrap();
    let costs = &sol.diagnostics.restart_costs;
    assert_eq!(costs.len(), 3);
    let best = costs.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(costs[sol.diagnostics.restart], best);
    assert_eq!(sol, solve(&spec, &config).unwrap());
}

#[test]
fn joint_chain_variance_matches_the_multinomial() {
    // per-cell count variance n (1/m)(1 - 1/m) under constant cost
    let (k, n, steps) = (3usize, 200usize, 100_000usize);
    let m = 1 << k;
    let config = AnnealConfig {
        sweeps_per_temp: Some(steps),
        max_temps: 1,
        ..cfg(11)
    };
    let (mut sum, mut sq) = (vec![0.0; m], vec![0.0; m]);
    anneal_joint(
        k,
        n,
        &[VarSet::from([1])],
        |_| 1.0,
        &config,
        &mut chain_rng(11, 0),
        |s| {
            for (c, x) in s.counts().iter().enumerate() {
                sum[c] += *x as f64;
                sq[c] += (*x as f64).powi(2);
            }
        },
    )
    .unwrap();
    let expected = n as f64 / m as f64 * (1.0 - 1.0 / m as f64);
    for c in 0..m {
        let mean = sum[c] / steps as f64;
        let var = sq[c] / steps as f64 - mean * mean;
        assert!(
            (var / expected - 1.0).abs() <= 0.2,
            "cell {c}: {var} vs {expected}"
        );
    }
}
