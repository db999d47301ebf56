//! Periodic one-dimensional geometry.
//!
//! Every grid function lives on a [`RingGrid`] of `n_cells` cells of equal
//! width covering `[0, length)`. Values are cell averages sampled at the
//! cell centres `(k + 1/2) * cell_width`, and integrals use the midpoint rule.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::kernel::InteractionKernel;

/// Grids at or above this size convolve through the FFT.
const FFT_THRESHOLD: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingGrid {
    n_cells: usize,
    length: f64,
}

impl RingGrid {
    pub fn new(n_cells: usize, length: f64) -> Result<Self> {
        if n_cells < 4 {
            return Err(Error::param("n_cells", format!("need at least 4 cells, got {n_cells}")));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::param("length", format!("must be positive and finite, got {length}")));
        }
        Ok(Self { n_cells, length })
    }

    /// Ring of circumference 2π with `n_cells` cells.
    pub fn circle(n_cells: usize) -> Result<Self> {
        Self::new(n_cells, 2.0 * PI)
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn cell_width(&self) -> f64 {
        self.length / self.n_cells as f64
    }

    pub fn center(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.cell_width()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells).map(|k| self.center(k)).collect()
    }

    /// Index of the cell containing `x` (after wrapping into `[0, length)`).
    pub fn cell_of(&self, x: f64) -> usize {
        let w = wrap_position(x, self.length);
        ((w / self.cell_width()) as usize).min(self.n_cells - 1)
    }

    pub(crate) fn check_same(&self, other: &RingGrid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "({} cells, length {}) vs ({} cells, length {})",
                self.n_cells, self.length, other.n_cells, other.length
            )))
        }
    }
}

impl Default for RingGrid {
    fn default() -> Self {
        Self {
            n_cells: 256,
            length: 2.0 * PI,
        }
    }
}

/// Read access shared by every kind of grid function.
pub trait GridValues {
    fn grid(&self) -> &RingGrid;
    fn values(&self) -> &[f64];

    /// Midpoint-rule integral.
    fn integral(&self) -> f64 {
        self.values().iter().sum::<f64>() * self.grid().cell_width()
    }

    fn l2_norm(&self) -> f64 {
        (self.values().iter().map(|v| v * v).sum::<f64>() * self.grid().cell_width()).sqrt()
    }
}

/// Real-valued function on the ring with no sign constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFn {
    grid: RingGrid,
    values: Vec<f64>,
}

/// Velocity samples at the cell centres.
pub type VelocityField = GridFn;

impl GridFn {
    pub fn new(grid: RingGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::GridMismatch(format!(
                "{} values for a grid of {} cells",
                values.len(),
                grid.n_cells()
            )));
        }
        ensure_finite(&values, "grid function")?;
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: RingGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.n_cells()],
        }
    }

    pub fn from_fn(grid: RingGrid, f: impl Fn(f64) -> f64) -> Self {
        let values = grid.centers().into_iter().map(f).collect();
        Self { grid, values }
    }

    pub(crate) fn from_raw(grid: RingGrid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.n_cells());
        Self { grid, values }
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::from_raw(self.grid, self.values.iter().map(|v| v * factor).collect())
    }

    /// Pointwise `self + factor * other`.
    pub fn add_scaled(&self, other: &impl GridValues, factor: f64) -> Result<Self> {
        self.grid.check_same(other.grid())?;
        let values = self
            .values
            .iter()
            .zip(other.values())
            .map(|(a, b)| a + factor * b)
            .collect();
        Ok(Self::from_raw(self.grid, values))
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

impl GridValues for GridFn {
    fn grid(&self) -> &RingGrid {
        &self.grid
    }
    fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Nonnegative density with its mass tracked alongside the values.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityField {
    grid: RingGrid,
    values: Vec<f64>,
    mass: f64,
}

impl DensityField {
    pub fn new(grid: RingGrid, values: Vec<f64>) -> Result<Self> {
        let f = GridFn::new(grid, values)?;
        if let Some(v) = f.values.iter().find(|v| **v < 0.0) {
            return Err(Error::param("density", format!("negative value {v}")));
        }
        Ok(Self::from_nonneg(grid, f.values))
    }

    fn from_nonneg(grid: RingGrid, values: Vec<f64>) -> Self {
        let mass = values.iter().sum::<f64>() * grid.cell_width();
        Self { grid, values, mass }
    }

    pub fn uniform(grid: RingGrid, mass: f64) -> Self {
        Self::from_nonneg(grid, vec![mass / grid.length(); grid.n_cells()])
    }

    /// Samples `f` at the cell centres. Negative samples are rejected.
    pub fn from_fn(grid: RingGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(grid, grid.centers().into_iter().map(f).collect())
    }

    /// Clamps negative entries to zero; returns the field and the mass removed
    /// by the clamp (the deficit, always `>= 0`).
    pub fn from_clamped(field: GridFn) -> (Self, f64) {
        let h = field.grid.cell_width();
        let mut deficit = 0.0;
        let values = field
            .values
            .into_iter()
            .map(|v| {
                if v < 0.0 {
                    deficit -= v * h;
                    0.0
                } else {
                    v
                }
            })
            .collect();
        (Self::from_nonneg(field.grid, values), deficit)
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    /// Rescales to the requested mass.
    pub fn with_mass(&self, mass: f64) -> Result<Self> {
        if self.mass <= 0.0 {
            return Err(Error::ZeroMass);
        }
        let s = mass / self.mass;
        Ok(Self::from_nonneg(self.grid, self.values.iter().map(|v| v * s).collect()))
    }

    pub fn to_grid_fn(&self) -> GridFn {
        GridFn::from_raw(self.grid, self.values.clone())
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Circular shift by a whole number of cells: `out[k] = self[k - shift]`.
    pub fn rotate_cells(&self, shift: isize) -> Self {
        let n = self.grid.n_cells() as isize;
        let values = (0..n)
            .map(|k| self.values[(k - shift).rem_euclid(n) as usize])
            .collect();
        Self::from_nonneg(self.grid, values)
    }
}

impl GridValues for DensityField {
    fn grid(&self) -> &RingGrid {
        &self.grid
    }
    fn values(&self) -> &[f64] {
        &self.values
    }
    fn integral(&self) -> f64 {
        self.mass
    }
}

/// Wraps a position into `[0, length)`.
pub fn wrap_position(x: f64, length: f64) -> f64 {
    let w = x.rem_euclid(length);
    // rem_euclid can round up to exactly `length` for tiny negative inputs
    if w >= length {
        0.0
    } else {
        w
    }
}

/// `(a - b) mod length`, mapped into `[-length/2, length/2)`. No argument checks.
#[inline]
pub(crate) fn wrap_delta(z: f64, length: f64) -> f64 {
    let half = 0.5 * length;
    let w = (z + half).rem_euclid(length);
    let w = if w >= length { 0.0 } else { w };
    w - half
}

/// Signed shortest displacement from `b` to `a` on a ring of circumference `length`,
/// in `[-length/2, length/2)`.
pub fn wrap_displacement(a: f64, b: f64, length: f64) -> Result<f64> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::NonFinite("wrap_displacement"));
    }
    if !(length.is_finite() && length > 0.0) {
        return Err(Error::param("length", format!("must be positive, got {length}")));
    }
    Ok(wrap_delta(a - b, length))
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_pair(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    })
}

/// Unnormalised forward DFT of a real sequence.
pub(crate) fn dft(values: &[f64]) -> Vec<Complex64> {
    let (fwd, _) = fft_pair(values.len());
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fwd.process(&mut buf);
    buf
}

/// Inverse of [`dft`], keeping the real part.
pub(crate) fn idft_real(spectrum: &[Complex64]) -> Vec<f64> {
    let n = spectrum.len();
    let (_, inv) = fft_pair(n);
    let mut buf = spectrum.to_vec();
    inv.process(&mut buf);
    buf.into_iter().map(|c| c.re / n as f64).collect()
}

/// A kernel sampled on the grid offsets: the convolution operator is circulant,
/// `out[k] = cell_width * sum_j table[(k - j) mod n] * g[j]`.
#[derive(Clone, Debug)]
pub struct CirculantKernel {
    grid: RingGrid,
    table: Vec<f64>,
}

impl CirculantKernel {
    /// Samples `kernel` at every grid offset. Offsets farther than `radius`
    /// (`None` meaning half the ring) are zeroed.
    pub fn new(kernel: &InteractionKernel, grid: RingGrid, radius: Option<f64>) -> Result<Self> {
        let half = 0.5 * grid.length();
        let radius = match radius {
            None => half,
            Some(r) if r > 0.0 && !r.is_nan() => r.min(half),
            Some(r) => return Err(Error::param("radius", format!("must be positive, got {r}"))),
        };
        let n = grid.n_cells();
        let h = grid.cell_width();
        let slack = 1e-12 * grid.length();
        let table = (0..n)
            .map(|d| {
                let z = wrap_delta(d as f64 * h, grid.length());
                if z.abs() <= radius + slack {
                    kernel.eval_periodic(z, grid.length())
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self { grid, table })
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// Eigenvalues of the convolution operator (cell width included).
    pub fn symbol(&self) -> Vec<Complex64> {
        let h = self.grid.cell_width();
        dft(&self.table).into_iter().map(|c| c * h).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.table.iter().all(|v| *v == 0.0)
    }

    pub fn apply(&self, g: &impl GridValues) -> Result<GridFn> {
        self.grid.check_same(g.grid())?;
        let n = self.grid.n_cells();
        let h = self.grid.cell_width();
        if self.is_zero() {
            return Ok(GridFn::zeros(self.grid));
        }
        let values = if n >= FFT_THRESHOLD {
            let kt = dft(&self.table);
            let gt = dft(g.values());
            let prod: Vec<Complex64> = kt.iter().zip(&gt).map(|(a, b)| a * b * h).collect();
            idft_real(&prod)
        } else {
            self.apply_direct(g.values())
        };
        Ok(GridFn::from_raw(self.grid, values))
    }

    pub(crate) fn apply_direct(&self, g: &[f64]) -> Vec<f64> {
        let n = self.grid.n_cells();
        let h = self.grid.cell_width();
        (0..n)
            .map(|k| {
                let mut acc = 0.0;
                for (j, gj) in g.iter().enumerate() {
                    acc += self.table[(k + n - j) % n] * gj;
                }
                acc * h
            })
            .collect()
    }
}

/// Midpoint-rule periodic convolution `(kernel * field)(x_k)`, restricted to
/// displacements with `|z| <= radius` (`None` for no cutoff).
pub fn convolve_periodic(
    field: &impl GridValues,
    kernel: &InteractionKernel,
    radius: Option<f64>,
) -> Result<VelocityField> {
    CirculantKernel::new(kernel, *field.grid(), radius)?.apply(field)
}

/// Second-order central difference with periodic wraparound.
pub fn derivative_x(field: &impl GridValues) -> Result<GridFn> {
    let v = field.values();
    ensure_finite(v, "derivative_x")?;
    let n = v.len();
    let inv = 0.5 / field.grid().cell_width();
    let out = (0..n)
        .map(|k| (v[(k + 1) % n] - v[(k + n - 1) % n]) * inv)
        .collect();
    Ok(GridFn::from_raw(*field.grid(), out))
}

/// Normalised cumulative distribution of a density, piecewise linear between
/// cell edges, together with its right-continuous pseudo-inverse.
#[derive(Clone, Debug)]
pub struct Cdf {
    grid: RingGrid,
    /// CDF at the `n + 1` cell edges; `edges[0] = 0`, `edges[n] = 1`.
    edges: Vec<f64>,
}

impl Cdf {
    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn grid(&self) -> &RingGrid {
        &self.grid
    }

    /// CDF at `x`, for `x` in `[0, length]` (clamped outside).
    pub fn eval(&self, x: f64) -> f64 {
        let h = self.grid.cell_width();
        let n = self.grid.n_cells();
        if x <= 0.0 {
            return 0.0;
        }
        if x >= self.grid.length() {
            return 1.0;
        }
        let s = x / h;
        let k = (s as usize).min(n - 1);
        let frac = s - k as f64;
        self.edges[k] + frac * (self.edges[k + 1] - self.edges[k])
    }

    /// CDF at every cell centre.
    pub fn at_centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// `inf { x : F(x) > p }`, clamped to `[0, length]`.
    pub fn quantile(&self, p: f64) -> f64 {
        let n = self.grid.n_cells();
        let h = self.grid.cell_width();
        if p < 0.0 {
            return 0.0;
        }
        if p >= 1.0 {
            return self.grid.length();
        }
        // first edge strictly above p
        let k = self.edges.partition_point(|&e| e <= p);
        let k = k.clamp(1, n);
        let lo = self.edges[k - 1];
        let hi = self.edges[k];
        let frac = if hi > lo { (p - lo) / (hi - lo) } else { 0.0 };
        (k - 1) as f64 * h + frac.clamp(0.0, 1.0) * h
    }
}

pub fn cdf_and_quantile(field: &DensityField) -> Result<Cdf> {
    if !(field.mass() > 0.0) {
        return Err(Error::ZeroMass);
    }
    let h = field.grid().cell_width();
    let n = field.grid().n_cells();
    let mut edges = Vec::with_capacity(n + 1);
    edges.push(0.0);
    let mut acc = 0.0;
    for v in field.values() {
        acc += v * h;
        edges.push(acc);
    }
    for e in edges.iter_mut() {
        *e /= acc;
    }
    edges[n] = 1.0;
    // guard monotonicity against rounding in the division
    for k in 1..=n {
        if edges[k] < edges[k - 1] {
            edges[k] = edges[k - 1];
        }
    }
    Ok(Cdf {
        grid: *field.grid(),
        edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::InteractionKernel;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const TAU: f64 = 2.0 * PI;

    #[test]
    fn wrap_examples() {
        assert_abs_diff_eq!(wrap_displacement(0.1, 6.2, TAU).unwrap(), 0.18319, epsilon = 1e-5);
        assert_eq!(wrap_displacement(PI, PI, TAU).unwrap(), 0.0);
        assert_abs_diff_eq!(wrap_displacement(0.0, PI + 0.1, TAU).unwrap(), PI - 0.1, epsilon = 1e-12);
        assert!(wrap_displacement(f64::NAN, 0.0, TAU).is_err());
        assert!(wrap_displacement(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn grid_invariants() {
        let g = RingGrid::default();
        assert_eq!(g.n_cells(), 256);
        assert_abs_diff_eq!(g.center(0), 0.5 * g.cell_width());
        assert!(RingGrid::new(3, 1.0).is_err());
        assert!(RingGrid::new(8, -1.0).is_err());
    }

    #[test]
    fn density_mass_tracks_values() {
        let g = RingGrid::circle(64).unwrap();
        let d = DensityField::from_fn(g, |x| (1.0 + 0.3 * x.cos()) / TAU).unwrap();
        let recomputed = d.values().iter().sum::<f64>() * g.cell_width();
        assert!((d.mass() - recomputed).abs() <= 1e-12 * recomputed);
        assert_abs_diff_eq!(d.mass(), 1.0, epsilon = 1e-12);
        assert!(DensityField::new(g, vec![-1.0; 64]).is_err());
    }

    fn spike(g: RingGrid, k: usize, mass: f64) -> DensityField {
        let mut v = vec![0.0; g.n_cells()];
        v[k] = mass / g.cell_width();
        DensityField::new(g, v).unwrap()
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let g = RingGrid::circle(32).unwrap();
        let d = DensityField::from_fn(g, |x| 1.0 + x.sin().abs()).unwrap();
        let out = convolve_periodic(&d, &InteractionKernel::Zero, None).unwrap();
        assert!(out.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn odd_kernel_on_uniform_vanishes() {
        for n in [16, 17, 128, 256] {
            let g = RingGrid::circle(n).unwrap();
            let d = DensityField::uniform(g, 1.0);
            let out = convolve_periodic(&d, &InteractionKernel::default(), None).unwrap();
            assert!(out.max_abs() < 1e-12, "n = {n}: {}", out.max_abs());
        }
    }

    #[test]
    fn spike_reproduces_kernel_samples() {
        // direct summation oracle
        for n in [32, 128] {
            let g = RingGrid::circle(n).unwrap();
            let k = InteractionKernel::default();
            let d = spike(g, 5, 0.7);
            let out = convolve_periodic(&d, &k, None).unwrap();
            for i in 0..n {
                let z = wrap_displacement(g.center(i), g.center(5), g.length()).unwrap();
                let expect = 0.7 * k.eval_periodic(z, g.length());
                assert_abs_diff_eq!(out.values()[i], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sensing_radius_truncates() {
        let g = RingGrid::circle(128).unwrap();
        let k = InteractionKernel::default();
        let d = spike(g, 0, 1.0);
        let r = g.length() / 8.0;
        let out = convolve_periodic(&d, &k, Some(r)).unwrap();
        for i in 0..g.n_cells() {
            let z = wrap_displacement(g.center(i), g.center(0), g.length()).unwrap();
            if z.abs() > r + 1e-9 {
                assert_abs_diff_eq!(out.values()[i], 0.0, epsilon = 1e-13);
            }
        }
        assert!(convolve_periodic(&d, &k, Some(0.0)).is_err());
        assert!(convolve_periodic(&d, &k, Some(-1.0)).is_err());
    }

    #[test]
    fn fft_path_matches_direct() {
        let g = RingGrid::circle(128).unwrap();
        let f = GridFn::from_fn(g, |x| (3.0 * x).sin() + 0.2 * x.cos().powi(3));
        let c = CirculantKernel::new(&InteractionKernel::default(), g, Some(1.0)).unwrap();
        let fast = c.apply(&f).unwrap();
        let slow = c.apply_direct(f.values());
        for (a, b) in fast.values().iter().zip(&slow) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-13);
        }
    }

    #[test]
    fn derivative_examples() {
        let g = RingGrid::circle(256).unwrap();
        let h = g.cell_width();
        let c = GridFn::from_fn(g, |_| 3.5);
        assert!(derivative_x(&c).unwrap().max_abs() < 1e-12);
        let ds = derivative_x(&GridFn::from_fn(g, f64::sin)).unwrap();
        let dc = derivative_x(&GridFn::from_fn(g, f64::cos)).unwrap();
        for k in 0..g.n_cells() {
            let x = g.center(k);
            // truncation error of the central difference is h^2/6 |f'''|
            assert!((ds.values()[k] - x.cos()).abs() <= h * h / 6.0 + 1e-12);
            assert!((dc.values()[k] + x.sin()).abs() <= h * h / 6.0 + 1e-12);
        }
    }

    #[test]
    fn cdf_uniform_and_spike() {
        let g = RingGrid::circle(64).unwrap();
        let cdf = cdf_and_quantile(&DensityField::uniform(g, 2.0)).unwrap();
        for p in [0.0, 0.1, 0.37, 0.5, 0.999] {
            assert_abs_diff_eq!(cdf.quantile(p), p * g.length(), epsilon = 1e-12);
        }
        for x in [0.0, 1.0, 3.3, 6.0] {
            assert_abs_diff_eq!(cdf.eval(x), x / g.length(), epsilon = 1e-12);
        }
        assert_eq!(cdf.eval(g.length()), 1.0);

        let s = spike(g, 20, 1.0);
        let cdf = cdf_and_quantile(&s).unwrap();
        for p in [0.01, 0.3, 0.5, 0.99] {
            assert!((cdf.quantile(p) - g.center(20)).abs() <= 0.5 * g.cell_width() + 1e-12);
        }
        assert!(matches!(
            cdf_and_quantile(&DensityField::uniform(g, 0.0)),
            Err(Error::ZeroMass)
        ));
    }

    #[test]
    fn quantile_matches_bisection_oracle() {
        let g = RingGrid::circle(200).unwrap();
        let d = DensityField::from_fn(g, |x| {
            (3.0 * (x - 1.0).cos()).exp() + 0.5 * (4.0 * (x - 4.0).cos()).exp()
        })
        .unwrap();
        let cdf = cdf_and_quantile(&d).unwrap();
        // independent CDF: running sum evaluated cell by cell
        let h = g.cell_width();
        let total: f64 = d.values().iter().sum::<f64>() * h;
        let oracle_cdf = |x: f64| {
            let mut acc = 0.0;
            for k in 0..g.n_cells() {
                let lo = k as f64 * h;
                let hi = lo + h;
                if x >= hi {
                    acc += d.values()[k] * h;
                } else if x > lo {
                    acc += d.values()[k] * (x - lo);
                }
            }
            acc / total
        };
        for p in [0.05, 0.2, 0.5, 0.77, 0.95] {
            let (mut lo, mut hi) = (0.0, g.length());
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if oracle_cdf(mid) > p {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            assert_abs_diff_eq!(cdf.quantile(p), hi, epsilon = 1e-9);
        }
    }

    proptest! {
        #[test]
        fn wrap_is_antisymmetric(a in -20.0..20.0f64, b in -20.0..20.0f64) {
            let l = TAU;
            let ab = wrap_displacement(a, b, l).unwrap();
            let ba = wrap_displacement(b, a, l).unwrap();
            prop_assert!(ab >= -l / 2.0 && ab < l / 2.0);
            if ab != -l / 2.0 && ba != -l / 2.0 {
                prop_assert!((ab + ba).abs() < 1e-12);
            }
        }

        #[test]
        fn convolution_is_linear(
            a in proptest::collection::vec(0.0..1.0f64, 32),
            b in proptest::collection::vec(0.0..1.0f64, 32),
            s in -3.0..3.0f64,
        ) {
            let g = RingGrid::circle(32).unwrap();
            let k = InteractionKernel::default();
            let fa = GridFn::new(g, a).unwrap();
            let fb = GridFn::new(g, b).unwrap();
            let sum = fa.add_scaled(&fb, s).unwrap();
            let lhs = convolve_periodic(&sum, &k, None).unwrap();
            let rhs = convolve_periodic(&fa, &k, None).unwrap()
                .add_scaled(&convolve_periodic(&fb, &k, None).unwrap(), s).unwrap();
            for (x, y) in lhs.values().iter().zip(rhs.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn derivative_integrates_to_zero(v in proptest::collection::vec(-5.0..5.0f64, 4..80)) {
            let g = RingGrid::circle(v.len()).unwrap();
            let d = derivative_x(&GridFn::new(g, v).unwrap()).unwrap();
            prop_assert!(d.integral().abs() < 1e-12);
        }

        #[test]
        fn quantile_inverts_cdf(v in proptest::collection::vec(0.01..1.0f64, 16..64), x in 0.0..1.0f64) {
            let g = RingGrid::circle(v.len()).unwrap();
            let d = DensityField::new(g, v).unwrap();
            let cdf = cdf_and_quantile(&d).unwrap();
            let x = x * g.length();
            prop_assert!((cdf.quantile(cdf.eval(x)) - x).abs() <= g.cell_width());
        }
    }
}
