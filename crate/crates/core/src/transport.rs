//! One-dimensional optimal transport on the interval and the ring, plus
//! entropy-regularised plans between discrete marginals.
//!
//! On the ring the quadratic-cost monotone maps are `T(x) = Q_d(F(x) - theta)`
//! for a lifted target quantile `Q_d` and a level shift `theta`. The transport
//! cost is convex in `theta`, so the optimal shift is the root of its
//! derivative, which is computed exactly for piecewise linear quantiles.

use crate::error::{Error, Result};
use crate::ring::{cdf_and_quantile, Cdf, DensityField, GridFn, GridValues, RingGrid, VelocityField};

/// A coupling between two discrete marginals, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    source: Vec<f64>,
    target: Vec<f64>,
    coupling: Vec<f64>,
    epsilon: f64,
}

impl TransportPlan {
    pub fn new(source: Vec<f64>, target: Vec<f64>, coupling: Vec<f64>, epsilon: f64) -> Result<Self> {
        if coupling.len() != source.len() * target.len() {
            return Err(Error::param("coupling", "shape does not match the marginals"));
        }
        if coupling.iter().any(|c| !(*c >= 0.0)) {
            return Err(Error::param("coupling", "entries must be nonnegative"));
        }
        Ok(Self {
            source,
            target,
            coupling,
            epsilon,
        })
    }

    pub fn source(&self) -> &[f64] {
        &self.source
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn coupling(&self) -> &[f64] {
        &self.coupling
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.coupling[i * self.target.len() + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.coupling.chunks(self.target.len()).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let m = self.target.len();
        let mut out = vec![0.0; m];
        for row in self.coupling.chunks(m) {
            for (o, c) in out.iter_mut().zip(row) {
                *o += c;
            }
        }
        out
    }

    /// Largest relative L1 deviation of the row or column sums from the marginals.
    pub fn marginal_violation(&self) -> f64 {
        let rel = |got: Vec<f64>, want: &[f64]| {
            let total: f64 = want.iter().sum();
            got.iter().zip(want).map(|(a, b)| (a - b).abs()).sum::<f64>() / total.max(f64::MIN_POSITIVE)
        };
        rel(self.row_sums(), &self.source).max(rel(self.col_sums(), &self.target))
    }

    /// `sum_ij coupling_ij * cost_ij`.
    pub fn cost(&self, cost: &[f64]) -> Result<f64> {
        if cost.len() != self.coupling.len() {
            return Err(Error::param("cost", "shape does not match the plan"));
        }
        Ok(self.coupling.iter().zip(cost).map(|(a, b)| a * b).sum())
    }

    /// Total mass moved off the diagonal (square plans).
    pub fn off_diagonal_mass(&self) -> f64 {
        let m = self.target.len();
        self.coupling
            .iter()
            .enumerate()
            .filter(|(k, _)| k / m != k % m)
            .map(|(_, c)| c)
            .sum()
    }
}

fn check_marginals(source: &[f64], target: &[f64]) -> Result<f64> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::param("marginal", "must be nonempty"));
    }
    crate::error::ensure_finite(source, "source marginal")?;
    crate::error::ensure_finite(target, "target marginal")?;
    if source.iter().chain(target).any(|v| *v < 0.0) {
        return Err(Error::param("marginal", "masses must be nonnegative"));
    }
    let a: f64 = source.iter().sum();
    let b: f64 = target.iter().sum();
    if !(a > 0.0) {
        return Err(Error::ZeroMass);
    }
    let tol = 1e-9 * a.max(b);
    if (a - b).abs() > tol {
        return Err(Error::MassMismatch { left: a, right: b, tol });
    }
    Ok(a)
}

fn cumulative(v: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len() + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for x in v {
        acc += x;
        out.push(acc);
    }
    out
}

/// Squared distance between cell centres of two grids on `[0, length]`.
pub fn interval_cost_matrix(n: usize, m: usize, length: f64) -> Vec<f64> {
    let (hx, hy) = (length / n as f64, length / m as f64);
    let mut c = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            c.push(((i as f64 + 0.5) * hx - (j as f64 + 0.5) * hy).powi(2));
        }
    }
    c
}

/// Squared geodesic distance between cell centres of two grids on a ring.
pub fn circular_cost_matrix(n: usize, m: usize, length: f64) -> Vec<f64> {
    let (hx, hy) = (length / n as f64, length / m as f64);
    let mut c = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            let d = ((i as f64 + 0.5) * hx - (j as f64 + 0.5) * hy).abs() % length;
            c.push(d.min(length - d).powi(2));
        }
    }
    c
}

/// Monotone (north-west corner) coupling: the exact plan for any convex
/// cost of the displacement between ordered points on a line.
pub fn interval_plan(source: &[f64], target: &[f64]) -> Result<TransportPlan> {
    let mass = check_marginals(source, target)?;
    let scale = mass / target.iter().sum::<f64>();
    let target_scaled: Vec<f64> = target.iter().map(|t| t * scale).collect();
    let coupling = overlap_coupling(&cumulative(source), &cumulative(&target_scaled), 0.0, 0, mass);
    TransportPlan::new(source.to_vec(), target.to_vec(), coupling, 0.0)
}

/// Exact quadratic-cost plan between point masses at the cell centres of two
/// grids on a ring of the given length.
pub fn circular_plan(source: &[f64], target: &[f64], length: f64) -> Result<TransportPlan> {
    let mass = check_marginals(source, target)?;
    if !(length > 0.0) {
        return Err(Error::param("length", "must be positive"));
    }
    let scale = mass / target.iter().sum::<f64>();
    let target_scaled: Vec<f64> = target.iter().map(|t| t * scale).collect();
    let s = cumulative(source);
    let t = cumulative(&target_scaled);
    let (n, m) = (source.len(), target.len());
    let (hx, hy) = (length / n as f64, length / m as f64);

    // the cost is piecewise linear and convex in the shift, with breakpoints
    // where a source level meets a lifted target level
    let mut cands: Vec<f64> = Vec::with_capacity(3 * (n + 1) * (m + 1));
    for si in &s {
        for tj in &t {
            for p in [-1.0, 0.0, 1.0] {
                let th = si - tj - p * mass;
                if th.abs() <= mass {
                    cands.push(th);
                }
            }
        }
    }
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let cost_at = |th: f64| discrete_lifted_cost(&s, &t, th, mass, hx, hy, length);
    let (mut lo, mut hi) = (0usize, cands.len() - 1);
    while hi - lo > 2 {
        let m1 = lo + (hi - lo) / 3;
        let m2 = hi - (hi - lo) / 3;
        if cost_at(cands[m1]) < cost_at(cands[m2]) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let best = (lo.saturating_sub(3)..(hi + 4).min(cands.len()))
        .map(|k| (cost_at(cands[k]), cands[k]))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, th)| th)
        .unwrap_or(0.0);
    let coupling = lifted_coupling(&s, &t, best, mass);
    TransportPlan::new(source.to_vec(), target.to_vec(), coupling, 0.0)
}

/// Coupling from overlaps of source level intervals with target level
/// intervals shifted by `shift` (target copy `p` offset by `p * mass`).
fn overlap_coupling(s: &[f64], t: &[f64], shift: f64, periods: i32, mass: f64) -> Vec<f64> {
    let (n, m) = (s.len() - 1, t.len() - 1);
    let mut c = vec![0.0; n * m];
    for p in -periods..=periods {
        let off = shift + p as f64 * mass;
        let (mut i, mut j) = (0usize, 0usize);
        while i < n && j < m {
            let lo = s[i].max(t[j] + off);
            let hi = s[i + 1].min(t[j + 1] + off);
            if hi > lo {
                c[i * m + j] += hi - lo;
            }
            if s[i + 1] < t[j + 1] + off {
                i += 1;
            } else {
                j += 1;
            }
        }
    }
    c
}

fn lifted_coupling(s: &[f64], t: &[f64], shift: f64, mass: f64) -> Vec<f64> {
    overlap_coupling(s, t, shift, 2, mass)
}

/// `int_0^M |Q_src(u) - Q_tgt(u - shift)|^2 du` for point-mass quantiles with
/// the target lifted periodically.
fn discrete_lifted_cost(s: &[f64], t: &[f64], shift: f64, mass: f64, hx: f64, hy: f64, length: f64) -> f64 {
    let (n, m) = (s.len() - 1, t.len() - 1);
    let mut total = 0.0;
    for p in -2i32..=2 {
        let off = shift + p as f64 * mass;
        let (mut i, mut j) = (0usize, 0usize);
        while i < n && j < m {
            let lo = s[i].max(t[j] + off);
            let hi = s[i + 1].min(t[j + 1] + off);
            if hi > lo {
                let x = (i as f64 + 0.5) * hx;
                let y = (j as f64 + 0.5) * hy + p as f64 * length;
                total += (hi - lo) * (x - y).powi(2);
            }
            if s[i + 1] < t[j + 1] + off {
                i += 1;
            } else {
                j += 1;
            }
        }
    }
    total
}

/// Piecewise linear quantile of a normalised CDF on cell edges, extended to all
/// real levels by `Q(u + 1) = Q(u) + length`.
struct LiftedQuantile<'a> {
    edges: &'a [f64],
    h: f64,
    length: f64,
}

impl LiftedQuantile<'_> {
    fn new(cdf: &Cdf) -> LiftedQuantile<'_> {
        LiftedQuantile {
            edges: cdf.edges(),
            h: cdf.grid().cell_width(),
            length: cdf.grid().length(),
        }
    }

    fn n(&self) -> usize {
        self.edges.len() - 1
    }

    /// Cell whose level interval holds `u`, and the period of `u`.
    fn locate(&self, u: f64) -> (usize, f64) {
        let p = u.floor();
        let r = u - p;
        let k = self.edges.partition_point(|&e| e <= r).saturating_sub(1).min(self.n() - 1);
        (k, p)
    }

    /// Value at `u` of the linear piece for cell `k` in period `p`.
    fn linear(&self, k: usize, p: f64, u: f64) -> f64 {
        let (e0, e1) = (self.edges[k], self.edges[k + 1]);
        let base = k as f64 * self.h + p * self.length;
        if e1 > e0 {
            base + (u - p - e0) / (e1 - e0) * self.h
        } else {
            base
        }
    }

    fn eval(&self, u: f64) -> f64 {
        let (k, p) = self.locate(u);
        self.linear(k, p, u)
    }
}

/// Cost `int_0^1 (Q(u) - P(u - shift))^2 du` and its derivative in `shift`.
fn shifted_cost(src: &LiftedQuantile, tgt: &LiftedQuantile, shift: f64) -> (f64, f64) {
    let mut breaks: Vec<f64> = src.edges.to_vec();
    let first = (-shift).floor() as i64 - 1;
    let last = (1.0 - shift).ceil() as i64 + 1;
    let mut jumps = Vec::new();
    for p in first..=last {
        for j in 0..=tgt.n() {
            let u = tgt.edges[j] + p as f64 + shift;
            if u > 0.0 && u < 1.0 {
                breaks.push(u);
                if j < tgt.n() && tgt.edges[j + 1] == tgt.edges[j] {
                    jumps.push((u, j, p as f64));
                }
            }
        }
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let mut cost = 0.0;
    let mut deriv = 0.0;
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let mid = 0.5 * (a + b);
        let (kq, pq) = src.locate(mid);
        let (kp, pp) = tgt.locate(mid - shift);
        let f = |u: f64| src.linear(kq, pq, u) - tgt.linear(kp, pp, u - shift);
        let (fa, fm, fb) = (f(a), f(mid), f(b));
        cost += (b - a) / 6.0 * (fa * fa + 4.0 * fm * fm + fb * fb);
        let (e0, e1) = (tgt.edges[kp], tgt.edges[kp + 1]);
        if e1 > e0 {
            // d/dshift of P(u - shift) is -P'; the integrand is linear on the piece
            let slope = tgt.h / (e1 - e0);
            deriv += 2.0 * slope * fm * (b - a);
        }
    }
    for (u, j, p) in jumps {
        let q = src.eval(u);
        let y0 = j as f64 * tgt.h + p * tgt.length;
        let y1 = y0 + tgt.h;
        deriv += (q - y0).powi(2) - (q - y1).powi(2);
    }
    (cost, deriv)
}

/// Monotone transport map between two densities on the same grid.
#[derive(Clone, Debug)]
pub struct TransportMap {
    source: Cdf,
    target: Cdf,
    shift: f64,
    circular: bool,
    mass: f64,
}

impl TransportMap {
    pub fn grid(&self) -> &RingGrid {
        self.source.grid()
    }

    /// Optimal level shift (zero on the interval), as a fraction of the mass.
    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn is_circular(&self) -> bool {
        self.circular
    }

    /// Image of `x`. On the ring the value is lifted, so `apply(x) - x` is the
    /// signed displacement along the ring.
    pub fn apply(&self, x: f64) -> f64 {
        let l = self.grid().length();
        if self.circular {
            let p = (x / l).floor();
            let u = self.source.eval(x - p * l) + p;
            LiftedQuantile::new(&self.target).eval(u - self.shift) + p * l
        } else {
            self.target.quantile(self.source.eval(x))
        }
    }

    /// `T(x_k)` at every cell centre.
    pub fn on_grid(&self) -> GridFn {
        GridFn::from_fn(*self.grid(), |x| self.apply(x))
    }

    /// `T(x_k) - x_k` at every cell centre.
    pub fn displacement(&self) -> GridFn {
        GridFn::from_fn(*self.grid(), |x| self.apply(x) - x)
    }

    /// Squared transport cost `int rho |T(x) - x|^2 dx`.
    pub fn cost(&self) -> f64 {
        let q = LiftedQuantile::new(&self.source);
        let p = LiftedQuantile::new(&self.target);
        self.mass * shifted_cost(&q, &p, self.shift).0
    }
}

fn map_inputs(rho: &DensityField, rho_d: &DensityField) -> Result<(Cdf, Cdf, f64)> {
    rho.grid().check_same(rho_d.grid())?;
    let tol = 1e-9 * rho.mass().abs().max(rho_d.mass().abs()).max(1.0);
    if (rho.mass() - rho_d.mass()).abs() > tol {
        return Err(Error::MassMismatch {
            left: rho.mass(),
            right: rho_d.mass(),
            tol,
        });
    }
    Ok((cdf_and_quantile(rho)?, cdf_and_quantile(rho_d)?, rho.mass()))
}

/// `T = Q_d o F` on the interval `[0, length]`.
pub fn ot_map_1d(rho: &DensityField, rho_d: &DensityField) -> Result<TransportMap> {
    let (source, target, mass) = map_inputs(rho, rho_d)?;
    Ok(TransportMap {
        source,
        target,
        shift: 0.0,
        circular: false,
        mass,
    })
}

/// Quadratic-cost optimal map on the ring.
pub fn ot_map_circle(rho: &DensityField, rho_d: &DensityField) -> Result<TransportMap> {
    let (source, target, mass) = map_inputs(rho, rho_d)?;
    let q = LiftedQuantile::new(&source);
    let p = LiftedQuantile::new(&target);
    // the derivative is nondecreasing, negative at -1 and positive at +1
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo < 1e-13 {
            break;
        }
        if shifted_cost(&q, &p, mid).1 > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let shift = 0.5 * (lo + hi);
    Ok(TransportMap {
        source,
        target,
        shift,
        circular: true,
        mass,
    })
}

/// `U = (T(x) - x) / dt` from the ring map.
pub fn ot_velocity_field(rho: &DensityField, rho_d_next: &DensityField, dt: f64) -> Result<VelocityField> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::param("dt", format!("must be positive, got {dt}")));
    }
    Ok(ot_map_circle(rho, rho_d_next)?.displacement().scaled(1.0 / dt))
}

/// `0.01 * mean(cost)`.
pub fn default_epsilon(cost: &[f64]) -> f64 {
    0.01 * cost.iter().sum::<f64>() / cost.len().max(1) as f64
}

#[derive(Clone, Debug)]
pub struct SinkhornResult {
    pub plan: TransportPlan,
    pub violation: f64,
    pub iterations: usize,
}

fn log_sum_exp(iter: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = iter.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + iter.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Entropy-regularised plan by log-domain Sinkhorn iterations. Stops once the
/// relative marginal violation is at most `tol`; otherwise returns
/// [`Error::NotConverged`] carrying the last iterate.
pub fn sinkhorn_plan(
    source: &[f64],
    target: &[f64],
    cost: &[f64],
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<SinkhornResult> {
    check_marginals(source, target)?;
    if source.iter().chain(target).any(|v| !(*v > 0.0)) {
        return Err(Error::param("marginal", "sinkhorn needs strictly positive masses"));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::param("epsilon", format!("must be positive, got {epsilon}")));
    }
    let (n, m) = (source.len(), target.len());
    if cost.len() != n * m {
        return Err(Error::param("cost", "shape does not match the marginals"));
    }
    crate::error::ensure_finite(cost, "cost")?;
    let log_a: Vec<f64> = source.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = target.iter().map(|v| v.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];

    let build = |f: &[f64], g: &[f64]| -> TransportPlan {
        let mut c = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                c.push(((f[i] + g[j] - cost[i * m + j]) / epsilon).exp());
            }
        }
        TransportPlan {
            source: source.to_vec(),
            target: target.to_vec(),
            coupling: c,
            epsilon,
        }
    };

    // epsilon scaling: warm-start the potentials from coarser regularisations
    let max_cost = cost.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let mut stages = Vec::new();
    let mut e = max_cost.max(epsilon);
    while e > epsilon {
        stages.push(e);
        e *= 0.25;
    }
    stages.push(epsilon);

    let mut violation = f64::INFINITY;
    let mut iterations = 0;
    for (stage, &eps) in stages.iter().enumerate() {
        let last = stage + 1 == stages.len();
        let mut local = 0;
        while iterations < max_iter && (last || local < 200) {
            iterations += 1;
            local += 1;
            for i in 0..n {
                let row = (0..m).map(|j| (g[j] - cost[i * m + j]) / eps);
                f[i] = eps * (log_a[i] - log_sum_exp(row));
            }
            for j in 0..m {
                let col = (0..n).map(|i| (f[i] - cost[i * m + j]) / eps);
                g[j] = eps * (log_b[j] - log_sum_exp(col));
            }
            // columns are exact after the g update; measure the rows
            if last && (iterations % 10 == 0 || iterations == max_iter) {
                violation = build(&f, &g).marginal_violation();
                if violation <= tol {
                    break;
                }
            }
        }
        if iterations >= max_iter && !last {
            violation = f64::INFINITY;
            break;
        }
    }
    let plan = build(&f, &g);
    if violation > tol {
        return Err(Error::NotConverged {
            iterations,
            violation,
            plan: Box::new(plan),
        });
    }
    Ok(SinkhornResult {
        plan,
        violation,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn von_mises(g: RingGrid, mu: f64, kappa: f64) -> DensityField {
        DensityField::from_fn(g, |x| (kappa * (x - mu).cos()).exp()).unwrap().with_mass(1.0).unwrap()
    }

    /// `cos^2` bump of half-width `w` around `mu`, zero elsewhere.
    fn compact_bump(g: RingGrid, mu: f64, w: f64) -> DensityField {
        DensityField::from_fn(g, |x| {
            let z = (x - mu) / w;
            if z.abs() < 1.0 { (0.5 * std::f64::consts::PI * z).cos().powi(2) } else { 0.0 }
        })
        .unwrap()
        .with_mass(1.0)
        .unwrap()
    }

    fn random_density(g: RingGrid, rng: &mut ChaCha8Rng) -> DensityField {
        let v: Vec<f64> = (0..g.n_cells()).map(|_| rng.random_range(0.2..1.0)).collect();
        DensityField::new(g, v).unwrap().with_mass(1.0).unwrap()
    }

    #[test]
    fn identical_marginals_give_identity() {
        let g = RingGrid::circle(64).unwrap();
        let d = von_mises(g, 2.0, 1.5);
        for map in [ot_map_1d(&d, &d).unwrap(), ot_map_circle(&d, &d).unwrap()] {
            assert!(map.displacement().max_abs() < 1e-9);
            assert!(map.cost() < 1e-18);
        }
        assert!(ot_velocity_field(&d, &d, 0.1).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn affine_interval_map() {
        let g = RingGrid::new(64, 2.0).unwrap();
        let rho = DensityField::from_fn(g, |x| if x < 1.0 { 1.0 } else { 0.0 }).unwrap();
        let rho_d = DensityField::uniform(g, 1.0);
        let map = ot_map_1d(&rho, &rho_d).unwrap();
        for k in 0..32 {
            let x = g.center(k);
            assert_abs_diff_eq!(map.apply(x), 2.0 * x, epsilon = 1e-12);
        }
    }

    #[test]
    fn interval_map_is_monotone_and_pushes_forward() {
        let g = RingGrid::circle(128).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rho = random_density(g, &mut rng);
        let rho_d = von_mises(g, 1.0, 2.0);
        let map = ot_map_1d(&rho, &rho_d).unwrap();
        let t = map.on_grid();
        assert!(t.values().windows(2).all(|w| w[1] >= w[0]));
        let fd = cdf_and_quantile(&rho_d).unwrap();
        let fs = cdf_and_quantile(&rho).unwrap();
        let h = g.cell_width();
        for k in 0..g.n_cells() {
            let x = g.center(k);
            // F_d(T(x)) = F(x), or T(x) within one cell of the point that achieves it
            let err = (fd.eval(t.values()[k]) - fs.eval(x)).abs();
            assert!(err < 1e-9 || (fd.quantile(fs.eval(x)) - t.values()[k]).abs() < h);
        }
    }

    #[test]
    fn push_forward_of_samples_matches_target() {
        let g = RingGrid::circle(32).unwrap();
        let rho = von_mises(g, 1.0, 1.0);
        let rho_d = DensityField::from_fn(g, |x| 1.0 + 0.6 * (2.0 * x).cos()).unwrap().with_mass(1.0).unwrap();
        for map in [ot_map_1d(&rho, &rho_d).unwrap(), ot_map_circle(&rho, &rho_d).unwrap()] {
            let xs = crate::micro::sample_initial_positions(100_000, &rho, 17).unwrap();
            let mut hist = vec![0.0; g.n_cells()];
            for &x in xs.positions() {
                let y = crate::ring::wrap_position(map.apply(x), TAU);
                hist[g.cell_of(y)] += 1.0;
            }
            let h = g.cell_width();
            let l1: f64 = hist
                .iter()
                .zip(rho_d.values())
                .map(|(c, d)| (c / (100_000.0 * h) - d).abs() * h)
                .sum();
            assert!(l1 <= 0.02, "L1 {l1} circular {}", map.is_circular());
        }
    }

    #[test]
    fn rotation_of_a_bump_is_a_rotation() {
        // supports of both bumps stay inside an arc shorter than half the ring,
        // where geodesic and line distances agree
        let g = RingGrid::circle(128).unwrap();
        let rho = compact_bump(g, 3.0, 0.8);
        let h = g.cell_width();
        for cells in [8isize, 20, -30] {
            let rho_d = rho.rotate_cells(cells);
            let map = ot_map_circle(&rho, &rho_d).unwrap();
            let s = cells as f64 * h;
            for (v, r) in map.displacement().values().iter().zip(rho.values()) {
                if *r == 0.0 {
                    continue;
                }
                assert_abs_diff_eq!(*v, s, epsilon = 1e-9);
            }
            assert_abs_diff_eq!(map.cost(), s * s, epsilon = 1e-9);
        }
    }

    #[test]
    fn circle_map_is_rotation_equivariant() {
        let g = RingGrid::circle(96).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let rho = random_density(g, &mut rng);
            let rho_d = random_density(g, &mut rng);
            let base = ot_map_circle(&rho, &rho_d).unwrap().displacement();
            for s in [1isize, 17, 50] {
                let rot = ot_map_circle(&rho.rotate_cells(s), &rho_d.rotate_cells(s)).unwrap().displacement();
                let n = g.n_cells() as isize;
                for k in 0..g.n_cells() {
                    let k2 = (k as isize + s).rem_euclid(n) as usize;
                    assert_abs_diff_eq!(rot.values()[k2], base.values()[k], epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn circle_cost_never_exceeds_any_fixed_cut() {
        let g = RingGrid::circle(48).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let rho = random_density(g, &mut rng);
            let rho_d = random_density(g, &mut rng);
            let best = ot_map_circle(&rho, &rho_d).unwrap().cost();
            for cut in 0..g.n_cells() as isize {
                let c = ot_map_1d(&rho.rotate_cells(-cut), &rho_d.rotate_cells(-cut)).unwrap().cost();
                assert!(best <= c + 1e-12, "cut {cut}: {best} > {c}");
            }
        }
    }

    #[test]
    fn velocity_field_moves_toward_target() {
        let g = RingGrid::circle(128).unwrap();
        let bump = compact_bump(g, 2.0, 0.8);
        let h = g.cell_width();
        let dt = 0.5;
        let u = ot_velocity_field(&bump, &bump.rotate_cells(3), dt).unwrap();
        for (v, r) in u.values().iter().zip(bump.values()) {
            if *r == 0.0 {
                continue;
            }
            assert_abs_diff_eq!(*v, 3.0 * h / dt, epsilon = 1e-8);
        }

        // a nearby target, so one explicit step of length dt satisfies the CFL bound
        let rho = von_mises(g, 2.0, 1.0);
        let far = DensityField::from_fn(g, |x| 1.0 + 0.5 * (x - 1.0).sin()).unwrap().with_mass(1.0).unwrap();
        let rho_d = DensityField::new(
            g,
            rho.values().iter().zip(far.values()).map(|(a, b)| 0.98 * a + 0.02 * b).collect(),
        )
        .unwrap();
        let dt = 0.1;
        let u = ot_velocity_field(&rho, &rho_d, dt).unwrap();
        assert!(u.max_abs() * dt <= 0.9 * h);
        let spec = crate::pde::AdvectionDiffusionSpec::new(u, 0.0, None).unwrap();
        let next = crate::pde::step_conservation(&rho, &spec, dt).unwrap().density;
        let w0 = crate::metrics::w1_circle(&rho, &rho_d).unwrap();
        let w1 = crate::metrics::w1_circle(&next, &rho_d).unwrap();
        assert!(w1 < w0, "{w1} !< {w0}");
    }

    #[test]
    fn ot_field_has_less_kinetic_energy_than_flux_recovery() {
        let g = RingGrid::circle(128).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let dt = 1.0;
        for _ in 0..5 {
            let rho = random_density(g, &mut rng);
            let rho_d = random_density(g, &mut rng);
            let u_ot = ot_velocity_field(&rho, &rho_d, dt).unwrap();
            let q = rho_d.to_grid_fn().add_scaled(&rho, -1.0).unwrap().scaled(1.0 / dt);
            let u_naive = crate::control::recover_velocity(&rho, &q, 1e-4).unwrap();
            let ke = |u: &GridFn| {
                u.values().iter().zip(rho.values()).map(|(a, r)| r * a * a).sum::<f64>() * g.cell_width()
            };
            assert!(ke(&u_ot) <= ke(&u_naive), "{} > {}", ke(&u_ot), ke(&u_naive));
        }
    }

    #[test]
    fn mass_mismatch_is_an_error() {
        let g = RingGrid::circle(16).unwrap();
        let a = DensityField::uniform(g, 1.0);
        let b = DensityField::uniform(g, 2.0);
        assert!(matches!(ot_map_1d(&a, &b), Err(Error::MassMismatch { .. })));
        assert!(matches!(ot_map_circle(&a, &b), Err(Error::MassMismatch { .. })));
        assert!(interval_plan(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn sinkhorn_concentrates_on_diagonal_as_epsilon_shrinks() {
        let a = vec![0.1, 0.3, 0.2, 0.15, 0.25];
        let c = interval_cost_matrix(5, 5, 1.0);
        let mut last = f64::INFINITY;
        for eps in [0.1, 0.01, 0.001] {
            let r = sinkhorn_plan(&a, &a, &c, eps, 100_000, 1e-10).unwrap();
            assert!(r.violation <= 1e-10);
            assert!(r.plan.marginal_violation() <= 1e-10);
            let off = r.plan.off_diagonal_mass();
            assert!(off < last);
            last = off;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn sinkhorn_flags_non_convergence() {
        let a = vec![0.5, 0.5];
        let b = vec![0.9, 0.1];
        let c = interval_cost_matrix(2, 2, 1.0);
        match sinkhorn_plan(&a, &b, &c, 1e-3, 1, 1e-14) {
            Err(Error::NotConverged { iterations, plan, .. }) => {
                assert_eq!(iterations, 1);
                assert_eq!(plan.coupling().len(), 4);
            }
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn plan_marginals_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in [4, 6, 8] {
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut b: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let s = a.iter().sum::<f64>() / b.iter().sum::<f64>();
            b.iter_mut().for_each(|v| *v *= s);
            for plan in [interval_plan(&a, &b).unwrap(), circular_plan(&a, &b, TAU).unwrap()] {
                assert!(plan.marginal_violation() < 1e-12);
                assert!(plan.coupling().iter().all(|c| *c >= 0.0));
            }
        }
    }
}
