#![allow(dead_code)]

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exact transport cost by linear programming over all couplings.
pub fn lp_transport_cost(a: &[f64], b: &[f64], cost: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let mut p = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<_> = cost.iter().map(|c| p.add_var(*c, (0.0, f64::INFINITY))).collect();
    for i in 0..n {
        let row: Vec<_> = (0..m).map(|j| (vars[i * m + j], 1.0)).collect();
        p.add_constraint(&row, ComparisonOp::Eq, a[i]);
    }
    // the last column constraint is implied by the others
    for j in 0..m - 1 {
        let col: Vec<_> = (0..n).map(|i| (vars[i * m + j], 1.0)).collect();
        p.add_constraint(&col, ComparisonOp::Eq, b[j]);
    }
    p.solve().expect("transport LP is feasible").objective()
}

/// Random marginal pair of `n` cells with equal total mass, sometimes with empty cells.
pub fn random_marginals(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> Vec<f64> {
        (0..n)
            .map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random_range(0.05..1.0) })
            .collect()
    };
    let mut a = draw();
    let mut b = draw();
    if a.iter().sum::<f64>() == 0.0 {
        a[0] = 1.0;
    }
    if b.iter().sum::<f64>() == 0.0 {
        b[n - 1] = 1.0;
    }
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    a.iter_mut().for_each(|v| *v /= sa);
    b.iter_mut().for_each(|v| *v /= sb);
    (a, b)
}

/// Seeds of the shipped transport corpus: ten instances per size.
pub fn corpus() -> Vec<(usize, u64)> {
    let mut out = Vec::new();
    for n in [4usize, 6, 8] {
        for k in 0..10u64 {
            out.push((n, 1000 * n as u64 + k));
        }
    }
    out
}
