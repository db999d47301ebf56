//! Density estimation from agent positions.
//!
//! Centrally, the density is a periodic kernel density estimate with a
//! wrapped Gaussian. Decentrally, every agent runs a proportional-integral
//! dynamic average consensus on its own kernel bump, so the network average of
//! the local estimates tracks the central estimate.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::micro::AgentPopulation;
use crate::ring::{wrap_delta, DensityField, GridFn, GridValues, RingGrid};

/// Periodic images summed on each side of the wrapped Gaussian.
const WRAP_IMAGES: i32 = 3;

fn check_bandwidth(bandwidth: f64) -> Result<()> {
    if bandwidth > 0.0 && bandwidth.is_finite() {
        Ok(())
    } else {
        Err(Error::param("bandwidth", format!("must be positive, got {bandwidth}")))
    }
}

/// Gaussian terms with exponent beyond this (relative size below 2e-22) are dropped.
const EXPONENT_CUTOFF: f64 = 50.0;

/// Wrapped Gaussian centred at `center`, normalised to unit mass on the grid.
fn unit_bump(grid: &RingGrid, center: f64, bandwidth: f64) -> Vec<f64> {
    let mut v = vec![0.0; grid.n_cells()];
    fill_bump(grid, center, bandwidth, &mut v);
    v
}

fn fill_bump(grid: &RingGrid, center: f64, bandwidth: f64, out: &mut [f64]) {
    let l = grid.length();
    let h = grid.cell_width();
    let n = grid.n_cells() as i64;
    let norm = 1.0 / ((2.0 * PI).sqrt() * bandwidth);
    let inv2h2 = 0.5 / (bandwidth * bandwidth);
    let reach = (EXPONENT_CUTOFF / inv2h2).sqrt();
    out.fill(0.0);
    if 2.0 * reach < l {
        // narrow bump: a single image reaches each cell, visit only the window
        let lo = ((center - reach) / h - 0.5).floor() as i64;
        let hi = ((center + reach) / h - 0.5).ceil() as i64;
        for j in lo..=hi {
            let z = (j as f64 + 0.5) * h - center;
            let a = z * z * inv2h2;
            if a <= EXPONENT_CUTOFF {
                out[j.rem_euclid(n) as usize] = (-a).exp() * norm;
            }
        }
    } else {
        for (k, o) in out.iter_mut().enumerate() {
            let z = wrap_delta(grid.center(k) - center, l);
            *o = (-WRAP_IMAGES..=WRAP_IMAGES)
                .map(|m| {
                    let s = z + m as f64 * l;
                    let a = s * s * inv2h2;
                    if a > EXPONENT_CUTOFF {
                        0.0
                    } else {
                        (-a).exp()
                    }
                })
                .sum::<f64>()
                * norm;
        }
    }
    let mass: f64 = out.iter().sum::<f64>() * h;
    if mass > 0.0 {
        out.iter_mut().for_each(|x| *x /= mass);
    }
}

fn check_length(pop: &AgentPopulation, grid: &RingGrid) -> Result<()> {
    if (pop.length() - grid.length()).abs() > 1e-12 * grid.length() {
        return Err(Error::GridMismatch(format!(
            "population on a ring of length {} but grid has length {}",
            pop.length(),
            grid.length()
        )));
    }
    Ok(())
}

/// The kernel bump of agent `index`: `K_h(x - x_i)` with unit mass.
pub fn local_signal(index: usize, pop: &AgentPopulation, grid: RingGrid, bandwidth: f64) -> Result<DensityField> {
    check_bandwidth(bandwidth)?;
    check_length(pop, &grid)?;
    let x = *pop.positions().get(index).ok_or(Error::IndexOutOfRange {
        index,
        len: pop.len(),
    })?;
    DensityField::new(grid, unit_bump(&grid, x, bandwidth))?.with_mass(1.0)
}

/// All local signals at once.
pub fn local_signals(pop: &AgentPopulation, grid: RingGrid, bandwidth: f64) -> Result<Vec<DensityField>> {
    (0..pop.len()).map(|i| local_signal(i, pop, grid, bandwidth)).collect()
}

/// `(1/N) sum_i K_h(x - x_i)` with `K_h` a wrapped Gaussian, renormalised to unit mass.
pub fn kde_estimate(pop: &AgentPopulation, grid: RingGrid, bandwidth: f64) -> Result<DensityField> {
    kde_from_positions(pop.positions(), grid, bandwidth)
}

pub fn kde_from_positions(positions: &[f64], grid: RingGrid, bandwidth: f64) -> Result<DensityField> {
    check_bandwidth(bandwidth)?;
    if positions.is_empty() {
        return Err(Error::param("positions", "population is empty"));
    }
    let mut acc = vec![0.0; grid.n_cells()];
    let mut bump = vec![0.0; grid.n_cells()];
    for &x in positions {
        fill_bump(&grid, x, bandwidth, &mut bump);
        for (a, b) in acc.iter_mut().zip(&bump) {
            *a += b;
        }
    }
    let n = positions.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    DensityField::new(grid, acc)?.with_mass(1.0)
}

/// Directed weighted graph; edge `(i, j, w)` means node `i` listens to node `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommGraph {
    n_nodes: usize,
    edges: Vec<(usize, usize, f64)>,
    strongly_connected: bool,
}

impl CommGraph {
    pub fn new(n_nodes: usize, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::param("n_nodes", "graph needs at least one node"));
        }
        for &(i, j, w) in &edges {
            if i >= n_nodes || j >= n_nodes {
                return Err(Error::IndexOutOfRange {
                    index: i.max(j),
                    len: n_nodes,
                });
            }
            if i == j {
                return Err(Error::param("edges", format!("self loop at node {i}")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::param("edges", format!("weight {w} on ({i}, {j}) is not positive")));
            }
        }
        let strongly_connected = strongly_connected(n_nodes, &edges);
        Ok(Self {
            n_nodes,
            edges,
            strongly_connected,
        })
    }

    /// Undirected edge list (both directions, unit weight).
    pub fn undirected(n_nodes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let edges = pairs.iter().flat_map(|&(a, b)| [(a, b, 1.0), (b, a, 1.0)]).collect();
        Self::new(n_nodes, edges)
    }

    pub fn complete(n: usize) -> Result<Self> {
        let pairs: Vec<_> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        Self::undirected(n, &pairs)
    }

    /// Each node linked to its `k` nearest neighbours on either side.
    pub fn ring_lattice(n: usize, k: usize) -> Result<Self> {
        if k == 0 || 2 * k >= n {
            return Err(Error::param("k", format!("ring lattice needs 1 <= k < n/2, got k = {k}, n = {n}")));
        }
        let mut pairs = Vec::new();
        for i in 0..n {
            for s in 1..=k {
                let j = (i + s) % n;
                pairs.push((i.min(j), i.max(j)));
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        Self::undirected(n, &pairs)
    }

    /// Uniform random `d`-regular simple graph by the pairing model with restarts.
    pub fn random_regular(n: usize, d: usize, seed: u64) -> Result<Self> {
        if d == 0 || d >= n || (n * d) % 2 != 0 {
            return Err(Error::param(
                "degree",
                format!("no {d}-regular graph on {n} nodes"),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10_000 {
            let mut stubs: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, d)).collect();
            stubs.shuffle(&mut rng);
            let mut pairs: Vec<(usize, usize)> = stubs
                .chunks(2)
                .map(|c| (c[0].min(c[1]), c[0].max(c[1])))
                .collect();
            if pairs.iter().any(|(a, b)| a == b) {
                continue;
            }
            pairs.sort_unstable();
            let before = pairs.len();
            pairs.dedup();
            if pairs.len() != before {
                continue;
            }
            let g = Self::undirected(n, &pairs)?;
            if g.strongly_connected {
                return Ok(g);
            }
        }
        Err(Error::param("degree", "failed to draw a connected regular graph"))
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn is_strongly_connected(&self) -> bool {
        self.strongly_connected
    }

    /// Every node's weighted in-degree equals its weighted out-degree.
    pub fn is_balanced(&self) -> bool {
        let mut flow = vec![0.0; self.n_nodes];
        for &(i, j, w) in &self.edges {
            flow[i] += w;
            flow[j] -= w;
        }
        flow.iter().all(|f| f.abs() < 1e-12)
    }

    /// Incoming lists: `neighbors()[i]` holds `(j, w)` for every edge `(i, j, w)`.
    pub fn neighbors(&self) -> Vec<Vec<(usize, f64)>> {
        let mut out = vec![Vec::new(); self.n_nodes];
        for &(i, j, w) in &self.edges {
            out[i].push((j, w));
        }
        out
    }

    /// Same graph with node `k` renamed `perm[k]`.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Self> {
        Self::new(
            self.n_nodes,
            self.edges.iter().map(|&(i, j, w)| (perm[i], perm[j], w)).collect(),
        )
    }
}

fn strongly_connected(n: usize, edges: &[(usize, usize, f64)]) -> bool {
    let reach = |forward: bool| {
        let mut adj = vec![Vec::new(); n];
        for &(i, j, _) in edges {
            if forward {
                adj[i].push(j);
            } else {
                adj[j].push(i);
            }
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

/// Per-agent estimates and integrator states of the PI consensus.
///
/// The update, applied pointwise on the grid with Laplacian
/// `(L x)_i = sum_j w_ij (x_i - x_j)`, is
///
/// ```text
/// est_i <- est_i + dt * ( -k_p (L est)_i + z_i + (signal_i - est_i) )
/// z_i   <- z_i   - dt * k_i (L est)_i
/// ```
///
/// With zero initial integrators on a balanced graph the integrators sum to
/// zero, so any consensus equilibrium equals the average signal.
#[derive(Clone, Debug)]
pub struct DistributedEstimator {
    grid: RingGrid,
    neighbors: Vec<Vec<(usize, f64)>>,
    estimates: Vec<GridFn>,
    integrals: Vec<GridFn>,
    k_p: f64,
    k_i: f64,
}

impl DistributedEstimator {
    /// Estimates start at the initial signals, integrators at zero.
    pub fn new(graph: &CommGraph, initial_signals: &[DensityField], k_p: f64, k_i: f64) -> Result<Self> {
        if !graph.is_strongly_connected() {
            return Err(Error::DisconnectedGraph);
        }
        if !(k_p > 0.0 && k_i > 0.0) {
            return Err(Error::param("consensus gains", format!("must be positive, got ({k_p}, {k_i})")));
        }
        if initial_signals.len() != graph.n_nodes() {
            return Err(Error::param(
                "signals",
                format!("{} signals for {} nodes", initial_signals.len(), graph.n_nodes()),
            ));
        }
        let grid = *initial_signals[0].grid();
        for s in initial_signals {
            grid.check_same(s.grid())?;
        }
        Ok(Self {
            grid,
            neighbors: graph.neighbors(),
            estimates: initial_signals.iter().map(DensityField::to_grid_fn).collect(),
            integrals: vec![GridFn::zeros(grid); graph.n_nodes()],
            k_p,
            k_i,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.estimates.len()
    }

    pub fn grid(&self) -> &RingGrid {
        &self.grid
    }

    /// Raw (unclamped) consensus state of node `i`.
    pub fn estimate(&self, i: usize) -> &GridFn {
        &self.estimates[i]
    }

    pub fn integral(&self, i: usize) -> &GridFn {
        &self.integrals[i]
    }

    /// Estimate of node `i` clamped at zero, for use by a controller.
    pub fn clamped_estimate(&self, i: usize) -> DensityField {
        DensityField::from_clamped(self.estimates[i].clone()).0
    }

    pub fn mean_estimate(&self) -> GridFn {
        let n = self.n_nodes() as f64;
        let mut acc = vec![0.0; self.grid.n_cells()];
        for e in &self.estimates {
            for (a, v) in acc.iter_mut().zip(e.values()) {
                *a += v / n;
            }
        }
        GridFn::from_raw(self.grid, acc)
    }

    /// One synchronous round: every node reads the previous round's state.
    pub fn consensus_step(&mut self, signals: &[DensityField], dt: f64) -> Result<()> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::param("dt", format!("must be positive, got {dt}")));
        }
        if signals.len() != self.n_nodes() {
            return Err(Error::param(
                "signals",
                format!("{} signals for {} nodes", signals.len(), self.n_nodes()),
            ));
        }
        for s in signals {
            self.grid.check_same(s.grid())?;
        }
        let n_cells = self.grid.n_cells();
        let mut next_est = Vec::with_capacity(self.n_nodes());
        let mut next_int = Vec::with_capacity(self.n_nodes());
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            let xi = self.estimates[i].values();
            let zi = self.integrals[i].values();
            let si = signals[i].values();
            let mut lap = vec![0.0; n_cells];
            for &(j, w) in nbrs {
                for (l, (a, b)) in lap.iter_mut().zip(xi.iter().zip(self.estimates[j].values())) {
                    *l += w * (a - b);
                }
            }
            let est: Vec<f64> = (0..n_cells)
                .map(|c| xi[c] + dt * (-self.k_p * lap[c] + zi[c] + (si[c] - xi[c])))
                .collect();
            let int: Vec<f64> = (0..n_cells).map(|c| zi[c] - dt * self.k_i * lap[c]).collect();
            next_est.push(GridFn::from_raw(self.grid, est));
            next_int.push(GridFn::from_raw(self.grid, int));
        }
        self.estimates = next_est;
        self.integrals = next_int;
        Ok(())
    }

    /// `||est_i - reference||_L2` for every node.
    pub fn estimation_error(&self, reference: &DensityField) -> Result<Vec<f64>> {
        self.grid.check_same(reference.grid())?;
        self.estimates
            .iter()
            .map(|e| Ok(e.add_scaled(reference, -1.0)?.l2_norm()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micro::sample_initial_positions;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::TAU;

    fn grid() -> RingGrid {
        RingGrid::circle(128).unwrap()
    }

    #[test]
    fn single_agent_bump() {
        let pop = AgentPopulation::new(vec![2.0], TAU, 0).unwrap();
        let k = kde_estimate(&pop, grid(), 0.2).unwrap();
        assert_abs_diff_eq!(k.mass(), 1.0, epsilon = 1e-14);
        let peak = (0..128).max_by(|&a, &b| k.values()[a].total_cmp(&k.values()[b])).unwrap();
        assert!((grid().center(peak) - 2.0).abs() <= grid().cell_width());
        assert_eq!(local_signal(0, &pop, grid(), 0.2).unwrap(), k);
        assert!(kde_estimate(&pop, grid(), 0.0).is_err());
        assert!(local_signal(1, &pop, grid(), 0.2).is_err());
    }

    #[test]
    fn stacked_agents_match_single() {
        let one = AgentPopulation::new(vec![4.0], TAU, 0).unwrap();
        let many = AgentPopulation::new(vec![4.0; 25], TAU, 0).unwrap();
        let a = kde_estimate(&one, grid(), 0.3).unwrap();
        let b = kde_estimate(&many, grid(), 0.3).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-13);
        }
    }

    #[test]
    fn uniform_samples_estimate_uniform() {
        let g = grid();
        let uni = DensityField::uniform(g, 1.0);
        let mean_err: f64 = (0..10)
            .map(|seed| {
                let pop = sample_initial_positions(1000, &uni, seed).unwrap();
                let k = kde_estimate(&pop, g, 0.2).unwrap();
                k.to_grid_fn().add_scaled(&uni, -1.0).unwrap().l2_norm()
            })
            .sum::<f64>()
            / 10.0;
        assert!(mean_err < 0.05, "mean L2 error {mean_err}");
    }

    #[test]
    fn local_signals_average_to_kde() {
        let g = grid();
        let pop = sample_initial_positions(40, &DensityField::uniform(g, 1.0), 9).unwrap();
        let kde = kde_estimate(&pop, g, 0.25).unwrap();
        let sigs = local_signals(&pop, g, 0.25).unwrap();
        for s in &sigs {
            assert_abs_diff_eq!(s.mass(), 1.0, epsilon = 1e-12);
        }
        for c in 0..g.n_cells() {
            let avg = sigs.iter().map(|s| s.values()[c]).sum::<f64>() / sigs.len() as f64;
            assert_abs_diff_eq!(avg, kde.values()[c], epsilon = 1e-12);
        }
    }

    #[test]
    fn graph_families() {
        let c = CommGraph::complete(5).unwrap();
        assert_eq!(c.edges().len(), 20);
        assert!(c.is_strongly_connected() && c.is_balanced());
        let r = CommGraph::ring_lattice(10, 2).unwrap();
        assert_eq!(r.edges().len(), 40);
        let rr = CommGraph::random_regular(50, 4, 1).unwrap();
        assert!(rr.is_strongly_connected());
        for nb in rr.neighbors() {
            assert_eq!(nb.len(), 4);
        }
        let split = CommGraph::undirected(4, &[(0, 1), (2, 3)]).unwrap();
        assert!(!split.is_strongly_connected());
        let one_way = CommGraph::new(3, vec![(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        assert!(!one_way.is_strongly_connected());
        let cycle = CommGraph::new(3, vec![(0, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0)]).unwrap();
        assert!(cycle.is_strongly_connected());
        assert!(CommGraph::new(2, vec![(0, 1, -1.0)]).is_err());
        assert!(CommGraph::random_regular(5, 3, 0).is_err());
    }

    fn cosine_signal(g: RingGrid, a: f64, phase: f64) -> DensityField {
        DensityField::from_fn(g, |x| (1.0 + a * (x - phase).cos()) / TAU).unwrap()
    }

    #[test]
    fn disconnected_graph_rejected() {
        let g = grid();
        let split = CommGraph::undirected(4, &[(0, 1), (2, 3)]).unwrap();
        let sigs = vec![DensityField::uniform(g, 1.0); 4];
        assert!(matches!(
            DistributedEstimator::new(&split, &sigs, 5.0, 5.0),
            Err(Error::DisconnectedGraph)
        ));
    }

    #[test]
    fn single_node_tracks_own_signal() {
        let g = grid();
        let graph = CommGraph::new(1, vec![]).unwrap();
        let start = DensityField::uniform(g, 1.0);
        let sig = cosine_signal(g, 0.5, 1.0);
        let mut est = DistributedEstimator::new(&graph, &[start], 5.0, 5.0).unwrap();
        let dt = 0.01;
        let mut prev = est.estimation_error(&sig).unwrap()[0];
        for _ in 0..100 {
            est.consensus_step(std::slice::from_ref(&sig), dt).unwrap();
            let e = est.estimation_error(&sig).unwrap()[0];
            assert!(e <= (1.0 - dt) * prev + 1e-15);
            prev = e;
        }
    }

    #[test]
    fn complete_graph_reaches_average() {
        let g = grid();
        let n = 10;
        let graph = CommGraph::complete(n).unwrap();
        let sigs: Vec<_> = (0..n).map(|i| cosine_signal(g, 0.8, i as f64 * 0.6)).collect();
        let avg = {
            let mut v = vec![0.0; g.n_cells()];
            for s in &sigs {
                for (a, b) in v.iter_mut().zip(s.values()) {
                    *a += b / n as f64;
                }
            }
            DensityField::new(g, v).unwrap()
        };
        let mut est = DistributedEstimator::new(&graph, &sigs, 5.0, 5.0).unwrap();
        let mut errs = Vec::new();
        for _ in 0..2000 {
            est.consensus_step(&sigs, 0.01).unwrap();
            let e = est.estimation_error(&avg).unwrap();
            errs.push(e.iter().sum::<f64>() / n as f64);
        }
        let worst = (0..n)
            .map(|i| {
                est.estimate(i)
                    .values()
                    .iter()
                    .zip(avg.values())
                    .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
            })
            .fold(0.0, f64::max);
        assert!(worst < 1e-3, "sup error {worst}");
        // mean error decreases monotonically along the transient
        for w in errs.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn agreeing_signals_are_kept() {
        let g = grid();
        let graph = CommGraph::ring_lattice(8, 1).unwrap();
        let sig = cosine_signal(g, 0.3, 2.0);
        let start: Vec<_> = (0..8).map(|i| cosine_signal(g, 0.5, i as f64)).collect();
        let mut est = DistributedEstimator::new(&graph, &start, 5.0, 5.0).unwrap();
        let sigs = vec![sig.clone(); 8];
        for _ in 0..3000 {
            est.consensus_step(&sigs, 0.01).unwrap();
        }
        let e = est.estimation_error(&sig).unwrap();
        assert!(e.iter().all(|v| *v < 1e-6), "{e:?}");
        assert_eq!(est.estimation_error(&sig).unwrap().len(), 8);
    }

    #[test]
    fn errors_follow_relabeling() {
        let g = grid();
        let graph = CommGraph::random_regular(6, 2, 4).unwrap();
        let sigs: Vec<_> = (0..6).map(|i| cosine_signal(g, 0.4, i as f64)).collect();
        let perm = [3, 0, 5, 1, 4, 2];
        let mut permuted = vec![sigs[0].clone(); 6];
        for (k, &p) in perm.iter().enumerate() {
            permuted[p] = sigs[k].clone();
        }
        let reference = DensityField::uniform(g, 1.0);
        let mut a = DistributedEstimator::new(&graph, &sigs, 5.0, 5.0).unwrap();
        let mut b = DistributedEstimator::new(&graph.relabeled(&perm).unwrap(), &permuted, 5.0, 5.0).unwrap();
        for _ in 0..50 {
            a.consensus_step(&sigs, 0.01).unwrap();
            b.consensus_step(&permuted, 0.01).unwrap();
        }
        let ea = a.estimation_error(&reference).unwrap();
        let eb = b.estimation_error(&reference).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            assert_abs_diff_eq!(ea[k], eb[p], epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_error_at_reference() {
        let g = grid();
        let sig = cosine_signal(g, 0.3, 0.0);
        let est = DistributedEstimator::new(&CommGraph::complete(3).unwrap(), &vec![sig.clone(); 3], 1.0, 1.0).unwrap();
        assert_eq!(est.estimation_error(&sig).unwrap(), vec![0.0; 3]);
        let other = DensityField::uniform(RingGrid::circle(64).unwrap(), 1.0);
        assert!(est.estimation_error(&other).is_err());
    }
}
