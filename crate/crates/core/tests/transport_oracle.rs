mod common;

use common::{corpus, lp_transport_cost, random_marginals};
use contiflow::transport::{
    circular_cost_matrix, circular_plan, interval_cost_matrix, interval_plan, sinkhorn_plan,
};
use std::f64::consts::TAU;

#[test]
fn interval_plans_match_lp() {
    for (n, seed) in corpus() {
        let (a, b) = random_marginals(n, seed);
        let c = interval_cost_matrix(n, n, 1.0);
        let exact = interval_plan(&a, &b).unwrap().cost(&c).unwrap();
        let lp = lp_transport_cost(&a, &b, &c);
        assert!((exact - lp).abs() <= 1e-6, "n={n} seed={seed}: {exact} vs {lp}");
    }
}

#[test]
fn circular_plans_match_lp() {
    for (n, seed) in corpus() {
        let (a, b) = random_marginals(n, seed);
        let c = circular_cost_matrix(n, n, TAU);
        let exact = circular_plan(&a, &b, TAU).unwrap().cost(&c).unwrap();
        let lp = lp_transport_cost(&a, &b, &c);
        assert!((exact - lp).abs() <= 1e-6, "n={n} seed={seed}: {exact} vs {lp}");
    }
}

#[test]
fn circular_plan_beats_every_cut() {
    for (n, seed) in corpus().into_iter().filter(|(n, _)| *n == 8) {
        let (a, b) = random_marginals(n, seed);
        let c = circular_cost_matrix(n, n, TAU);
        let best = circular_plan(&a, &b, TAU).unwrap().cost(&c).unwrap();
        for cut in 0..n {
            let mut ra = a.clone();
            let mut rb = b.clone();
            ra.rotate_left(cut);
            rb.rotate_left(cut);
            let mut rc = c.clone();
            for i in 0..n {
                for j in 0..n {
                    rc[i * n + j] = c[((i + cut) % n) * n + (j + cut) % n];
                }
            }
            let at_cut = interval_plan(&ra, &rb).unwrap().cost(&rc).unwrap();
            assert!(best <= at_cut + 1e-12);
        }
    }
}

#[test]
fn sinkhorn_near_lp_on_small_instances() {
    for seed in 0..10u64 {
        let (a, b) = random_marginals(5, 77 + seed);
        let a: Vec<f64> = a.iter().map(|v| v + 0.02).collect();
        let b: Vec<f64> = b.iter().map(|v| v + 0.02).collect();
        let c = interval_cost_matrix(5, 5, 1.0);
        let lp = lp_transport_cost(&a, &b, &c);
        let r = sinkhorn_plan(&a, &b, &c, 1e-3, 200_000, 1e-8).unwrap();
        let cost = r.plan.cost(&c).unwrap();
        assert!((cost - lp).abs() <= 0.02 * lp, "seed {seed}: {cost} vs {lp}");
    }
}
