//! Explicit finite-volume steppers on the ring.
//!
//! All steppers share one flux-form update: first-order upwind advection with
//! face velocities, central diffusion fluxes, and an optional explicit source.
//! Fluxes telescope, so a source-free step conserves mass up to rounding.
//! Negative cells (possible only with sources or under-resolved drift) are
//! clamped to zero and the removed mass is reported.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::kernel::InteractionKernel;
use crate::ring::{convolve_periodic, wrap_delta, DensityField, GridFn, GridValues, RingGrid, VelocityField};

/// Upper bound on `dt * (max|a| / h + 2 max D / h^2)`.
pub const CFL_LIMIT: f64 = 0.9;

/// Coefficients of `rho_t + (rho v)_x = D rho_xx + q`.
#[derive(Clone, Debug)]
pub struct AdvectionDiffusionSpec {
    pub velocity: VelocityField,
    pub diffusion: f64,
    pub source: Option<GridFn>,
}

impl AdvectionDiffusionSpec {
    pub fn new(velocity: VelocityField, diffusion: f64, source: Option<GridFn>) -> Result<Self> {
        if !(diffusion >= 0.0 && diffusion.is_finite()) {
            return Err(Error::param("diffusion", format!("must be nonnegative, got {diffusion}")));
        }
        if let Some(q) = &source {
            velocity.grid().check_same(q.grid())?;
        }
        Ok(Self {
            velocity,
            diffusion,
            source,
        })
    }

    pub fn max_stable_dt(&self) -> f64 {
        let h = self.velocity.grid().cell_width();
        max_stable_dt(self.velocity.max_abs(), self.diffusion, h)
    }
}

/// Result of one explicit step.
#[derive(Clone, Debug)]
pub struct Advanced {
    pub density: DensityField,
    /// Mass removed by clamping negative cells to zero.
    pub clamped: f64,
}

pub fn max_stable_dt(max_speed: f64, max_diffusion: f64, h: f64) -> f64 {
    let rate = max_speed / h + 2.0 * max_diffusion / (h * h);
    if rate > 0.0 {
        CFL_LIMIT / rate
    } else {
        f64::INFINITY
    }
}

fn check_dt(dt: f64, max_dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::param("dt", format!("must be positive, got {dt}")));
    }
    if dt > max_dt * (1.0 + 1e-12) {
        return Err(Error::Cfl { dt, max_dt });
    }
    Ok(())
}

/// Flux-form update. `face_velocity[k]` and `face_diffusivity[k]` live on the
/// face between cells `k` and `k + 1`.
fn advance_flux(
    rho: &[f64],
    face_velocity: &[f64],
    face_diffusivity: &[f64],
    source: Option<&[f64]>,
    dt: f64,
    h: f64,
) -> Vec<f64> {
    let n = rho.len();
    let flux: Vec<f64> = (0..n)
        .map(|k| {
            let r = (k + 1) % n;
            let a = face_velocity[k];
            let upwind = if a > 0.0 { rho[k] } else { rho[r] };
            a * upwind - face_diffusivity[k] * (rho[r] - rho[k]) / h
        })
        .collect();
    let ratio = dt / h;
    (0..n)
        .map(|k| {
            let mut v = rho[k] - ratio * (flux[k] - flux[(k + n - 1) % n]);
            if let Some(q) = source {
                v += dt * q[k];
            }
            v
        })
        .collect()
}

fn finish(grid: RingGrid, values: Vec<f64>) -> Result<Advanced> {
    ensure_finite(&values, "density update")?;
    let (density, clamped) = DensityField::from_clamped(GridFn::from_raw(grid, values));
    Ok(Advanced { density, clamped })
}

/// One explicit step of `rho_t + (rho v)_x = D rho_xx + q`.
pub fn step_conservation(rho: &DensityField, spec: &AdvectionDiffusionSpec, dt: f64) -> Result<Advanced> {
    let grid = *rho.grid();
    grid.check_same(spec.velocity.grid())?;
    check_dt(dt, spec.max_stable_dt())?;
    let n = grid.n_cells();
    let v = spec.velocity.values();
    let face_v: Vec<f64> = (0..n).map(|k| 0.5 * (v[k] + v[(k + 1) % n])).collect();
    let face_d = vec![spec.diffusion; n];
    let out = advance_flux(
        rho.values(),
        &face_v,
        &face_d,
        spec.source.as_ref().map(|q| q.values()),
        dt,
        grid.cell_width(),
    );
    finish(grid, out)
}

/// Follower density under the leaders' field: `rho_F,t + (rho_F (f * rho_L))_x = D rho_F,xx`.
pub fn step_follower(
    follower: &DensityField,
    leader: &DensityField,
    kernel: &InteractionKernel,
    diffusion: f64,
    dt: f64,
) -> Result<Advanced> {
    follower.grid().check_same(leader.grid())?;
    let velocity = convolve_periodic(leader, kernel, None)?;
    step_conservation(follower, &AdvectionDiffusionSpec::new(velocity, diffusion, None)?, dt)
}

/// Coupled target/herder field equations in one dimension:
///
/// ```text
/// rho_T,t = ( D_T(rho_T) rho_T,x + k_T rho_T rho_H,x )_x
/// rho_H,t = ( D_H(rho_H) rho_H,x - v1 rho_H rho_T g - v2 rho_H rho_T,x )_x
/// ```
///
/// with `D_A(rho) = D_A0 + D_A1 rho` and `g(x) = sign(x - goal)` on the ring.
/// The bilinear term is embedded as a flux along `g` so that its direction
/// flips across the goal.
#[derive(Clone, Debug)]
pub struct NonreciprocalSpec {
    pub d_t0: f64,
    pub d_t1: f64,
    pub d_h0: f64,
    pub d_h1: f64,
    pub k_tilde_t: f64,
    pub v1: GridFn,
    pub v2: GridFn,
    pub goal_position: f64,
}

/// Scalar parameters of [`NonreciprocalSpec`] with constant coupling profiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonreciprocalParams {
    pub d_t0: f64,
    pub d_t1: f64,
    pub d_h0: f64,
    pub d_h1: f64,
    pub k_tilde_t: f64,
    pub v1: f64,
    pub v2: f64,
    pub goal_position: f64,
}

impl Default for NonreciprocalParams {
    fn default() -> Self {
        Self {
            d_t0: 0.05,
            d_t1: 0.0,
            d_h0: 0.0,
            d_h1: 0.0,
            k_tilde_t: 0.5,
            v1: 0.0,
            v2: 0.0,
            goal_position: std::f64::consts::PI,
        }
    }
}

impl NonreciprocalSpec {
    pub fn new(
        grid: RingGrid,
        diffusivities: [f64; 4],
        k_tilde_t: f64,
        v1: GridFn,
        v2: GridFn,
        goal_position: f64,
    ) -> Result<Self> {
        let [d_t0, d_t1, d_h0, d_h1] = diffusivities;
        for (name, d) in [("d_t0", d_t0), ("d_t1", d_t1), ("d_h0", d_h0), ("d_h1", d_h1)] {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::param(name, format!("diffusivity must be nonnegative, got {d}")));
            }
        }
        if !k_tilde_t.is_finite() || !goal_position.is_finite() {
            return Err(Error::NonFinite("nonreciprocal couplings"));
        }
        grid.check_same(v1.grid())?;
        grid.check_same(v2.grid())?;
        let pos = v2.values().iter().any(|v| *v > 0.0);
        let neg = v2.values().iter().any(|v| *v < 0.0);
        if pos && neg {
            return Err(Error::param("v2", "profile must keep one sign"));
        }
        Ok(Self {
            d_t0,
            d_t1,
            d_h0,
            d_h1,
            k_tilde_t,
            v1,
            v2,
            goal_position,
        })
    }

    pub fn from_params(grid: RingGrid, p: &NonreciprocalParams) -> Result<Self> {
        Self::new(
            grid,
            [p.d_t0, p.d_t1, p.d_h0, p.d_h1],
            p.k_tilde_t,
            GridFn::from_fn(grid, |_| p.v1),
            GridFn::from_fn(grid, |_| p.v2),
            p.goal_position,
        )
    }

    /// Goal-relative direction at every face: `sign(wrap(x_face - goal))`.
    fn face_direction(&self, grid: &RingGrid) -> Vec<f64> {
        let l = grid.length();
        (0..grid.n_cells())
            .map(|k| {
                let x = (k + 1) as f64 * grid.cell_width();
                let z = wrap_delta(x - self.goal_position, l);
                if z > 0.0 {
                    1.0
                } else if z < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Face drift velocities and diffusivities for both populations.
struct NonreciprocalFaces {
    target_velocity: Vec<f64>,
    target_diffusivity: Vec<f64>,
    herder_velocity: Vec<f64>,
    herder_diffusivity: Vec<f64>,
}

fn nonreciprocal_faces(target: &[f64], herder: &[f64], spec: &NonreciprocalSpec, grid: &RingGrid) -> NonreciprocalFaces {
    let n = grid.n_cells();
    let h = grid.cell_width();
    let dir = spec.face_direction(grid);
    let v1 = spec.v1.values();
    let v2 = spec.v2.values();
    let mut f = NonreciprocalFaces {
        target_velocity: Vec::with_capacity(n),
        target_diffusivity: Vec::with_capacity(n),
        herder_velocity: Vec::with_capacity(n),
        herder_diffusivity: Vec::with_capacity(n),
    };
    for k in 0..n {
        let r = (k + 1) % n;
        let grad_t = (target[r] - target[k]) / h;
        let grad_h = (herder[r] - herder[k]) / h;
        let t_face = 0.5 * (target[k] + target[r]);
        let h_face = 0.5 * (herder[k] + herder[r]);
        // targets drift down the herder gradient
        f.target_velocity.push(-spec.k_tilde_t * grad_h);
        f.target_diffusivity.push(spec.d_t0 + spec.d_t1 * t_face);
        let v1f = 0.5 * (v1[k] + v1[r]);
        let v2f = 0.5 * (v2[k] + v2[r]);
        f.herder_velocity.push(v1f * t_face * dir[k] + v2f * grad_t);
        f.herder_diffusivity.push(spec.d_h0 + spec.d_h1 * h_face);
    }
    f
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Largest admissible step for the current state.
pub fn nonreciprocal_max_dt(target: &DensityField, herder: &DensityField, spec: &NonreciprocalSpec) -> Result<f64> {
    let grid = *target.grid();
    grid.check_same(herder.grid())?;
    let f = nonreciprocal_faces(target.values(), herder.values(), spec, &grid);
    let h = grid.cell_width();
    Ok(max_stable_dt(max_abs(&f.target_velocity), max_abs(&f.target_diffusivity), h)
        .min(max_stable_dt(max_abs(&f.herder_velocity), max_abs(&f.herder_diffusivity), h)))
}

/// One explicit step of the coupled field equations; returns `(target, herder)`.
pub fn step_nonreciprocal(
    target: &DensityField,
    herder: &DensityField,
    spec: &NonreciprocalSpec,
    dt: f64,
) -> Result<(Advanced, Advanced)> {
    let grid = *target.grid();
    grid.check_same(herder.grid())?;
    grid.check_same(spec.v1.grid())?;
    let f = nonreciprocal_faces(target.values(), herder.values(), spec, &grid);
    let h = grid.cell_width();
    let max_dt = max_stable_dt(max_abs(&f.target_velocity), max_abs(&f.target_diffusivity), h)
        .min(max_stable_dt(max_abs(&f.herder_velocity), max_abs(&f.herder_diffusivity), h));
    check_dt(dt, max_dt)?;
    let t = advance_flux(target.values(), &f.target_velocity, &f.target_diffusivity, None, dt, h);
    let hh = advance_flux(herder.values(), &f.herder_velocity, &f.herder_diffusivity, None, dt, h);
    Ok((finish(grid, t)?, finish(grid, hh)?))
}

/// Midpoint-rule mass.
pub fn mass_of(field: &impl GridValues) -> f64 {
    field.values().iter().sum::<f64>() * field.grid().cell_width()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ring::wrap_position;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{PI, TAU};

    fn bump(g: RingGrid, center: f64, kappa: f64) -> DensityField {
        DensityField::from_fn(g, |x| (kappa * (x - center).cos()).exp())
            .unwrap()
            .with_mass(1.0)
            .unwrap()
    }

    #[test]
    fn idle_step_changes_nothing() {
        let g = RingGrid::circle(64).unwrap();
        let rho = bump(g, 1.0, 2.0);
        let spec = AdvectionDiffusionSpec::new(GridFn::zeros(g), 0.0, None).unwrap();
        let out = step_conservation(&rho, &spec, 0.1).unwrap();
        assert_eq!(out.density, rho);
        assert_eq!(out.clamped, 0.0);
    }

    #[test]
    fn cfl_violation_names_admissible_dt() {
        let g = RingGrid::circle(64).unwrap();
        let rho = bump(g, 1.0, 2.0);
        let spec = AdvectionDiffusionSpec::new(GridFn::from_fn(g, |_| 1.0), 0.0, None).unwrap();
        match step_conservation(&rho, &spec, 1.0) {
            Err(Error::Cfl { max_dt, .. }) => assert_abs_diff_eq!(max_dt, 0.9 * g.cell_width(), epsilon = 1e-12),
            other => panic!("expected CFL error, got {other:?}"),
        }
        assert!(AdvectionDiffusionSpec::new(GridFn::zeros(g), -1.0, None).is_err());
    }

    fn translation_error(n: usize) -> f64 {
        let g = RingGrid::circle(n).unwrap();
        let c = 0.5;
        let t_end = 1.0;
        let rho0 = |x: f64| (1.0 + 0.5 * x.sin()) / TAU;
        let mut rho = DensityField::from_fn(g, rho0).unwrap();
        let spec = AdvectionDiffusionSpec::new(GridFn::from_fn(g, |_| c), 0.0, None).unwrap();
        let steps = (t_end / (0.5 * g.cell_width() / c)).ceil() as usize;
        let dt = t_end / steps as f64;
        for _ in 0..steps {
            rho = step_conservation(&rho, &spec, dt).unwrap().density;
        }
        let exact = GridFn::from_fn(g, |x| rho0(wrap_position(x - c * t_end, TAU)));
        rho.to_grid_fn()
            .add_scaled(&exact, -1.0)
            .unwrap()
            .values()
            .iter()
            .map(|v| v.abs() * g.cell_width())
            .sum()
    }

    #[test]
    fn constant_velocity_translates_with_first_order_error() {
        let e1 = translation_error(128);
        let e2 = translation_error(256);
        let e3 = translation_error(512);
        assert!(e1 < 0.05, "L1 error {e1}");
        assert!((1.6..2.4).contains(&(e1 / e2)), "ratio {}", e1 / e2);
        assert!((1.6..2.4).contains(&(e2 / e3)), "ratio {}", e2 / e3);
    }

    #[test]
    fn heat_mode_decays_at_rate_d() {
        let g = RingGrid::circle(128).unwrap();
        let (d, a) = (0.1, 0.5);
        let mut rho = DensityField::from_fn(g, |x| (1.0 + a * x.cos()) / TAU).unwrap();
        let spec = AdvectionDiffusionSpec::new(GridFn::zeros(g), d, None).unwrap();
        let t_end = 1.0 / d;
        let steps = (t_end / (0.5 * spec.max_stable_dt())).ceil() as usize;
        let dt = t_end / steps as f64;
        for _ in 0..steps {
            rho = step_conservation(&rho, &spec, dt).unwrap().density;
        }
        // project on cos x to recover the amplitude
        let amp = rho
            .values()
            .iter()
            .enumerate()
            .map(|(k, v)| v * g.center(k).cos())
            .sum::<f64>()
            * g.cell_width()
            * TAU
            / PI;
        let expected = a * (-d * t_end).exp();
        assert!((amp - expected).abs() <= 0.02 * expected, "{amp} vs {expected}");
    }

    #[test]
    fn follower_examples() {
        let g = RingGrid::circle(128).unwrap();
        let k = InteractionKernel::default();
        // uniform leaders exert no net drift: pure diffusion
        let f0 = bump(g, 2.0, 3.0);
        let lead = DensityField::uniform(g, 1.0);
        let a = step_follower(&f0, &lead, &k, 0.05, 0.01).unwrap().density;
        let spec = AdvectionDiffusionSpec::new(GridFn::zeros(g), 0.05, None).unwrap();
        let b = step_conservation(&f0, &spec, 0.01).unwrap().density;
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-14);
        }
        // leaders with no mass and no diffusion leave the followers alone
        let empty = DensityField::uniform(g, 0.0);
        assert_eq!(step_follower(&f0, &empty, &k, 0.0, 0.01).unwrap().density, f0);

        // a leader spike repels followers from its location
        let mut spike = vec![0.0; 128];
        spike[40] = 0.5 / g.cell_width();
        let spike = DensityField::new(g, spike).unwrap();
        let mut f = DensityField::uniform(g, 1.0);
        let near = |f: &DensityField| (36..=44).map(|c| f.values()[c]).sum::<f64>();
        let start = near(&f);
        for _ in 0..200 {
            f = step_follower(&f, &spike, &k, 0.01, 0.01).unwrap().density;
        }
        assert!(near(&f) < 0.8 * start);
        assert_abs_diff_eq!(f.mass(), 1.0, epsilon = 1e-12);
    }

    fn nr_spec(g: RingGrid, d: [f64; 4], k: f64, v1: f64, v2: f64) -> NonreciprocalSpec {
        NonreciprocalSpec::new(
            g,
            d,
            k,
            GridFn::from_fn(g, |_| v1),
            GridFn::from_fn(g, |_| v2),
            PI,
        )
        .unwrap()
    }

    #[test]
    fn zero_couplings_decouple_bitwise() {
        let g = RingGrid::circle(128).unwrap();
        let spec = nr_spec(g, [0.05, 0.0, 0.02, 0.0], 0.0, 0.0, 0.0);
        let mut t = bump(g, 1.0, 2.0);
        let mut h = bump(g, 4.0, 5.0);
        let mut t_ref = t.clone();
        let mut h_ref = h.clone();
        let st = AdvectionDiffusionSpec::new(GridFn::zeros(g), 0.05, None).unwrap();
        let sh = AdvectionDiffusionSpec::new(GridFn::zeros(g), 0.02, None).unwrap();
        for _ in 0..500 {
            let (a, b) = step_nonreciprocal(&t, &h, &spec, 0.01).unwrap();
            t = a.density;
            h = b.density;
            t_ref = step_conservation(&t_ref, &st, 0.01).unwrap().density;
            h_ref = step_conservation(&h_ref, &sh, 0.01).unwrap().density;
        }
        assert_eq!(t.values(), t_ref.values());
        assert_eq!(h.values(), h_ref.values());
    }

    #[test]
    fn uniform_fields_are_stationary_without_v1() {
        let g = RingGrid::circle(64).unwrap();
        let spec = nr_spec(g, [0.1, 0.2, 0.1, 0.3], 0.7, 0.0, 0.4);
        let t = DensityField::uniform(g, 1.0);
        let h = DensityField::uniform(g, 0.3);
        let (a, b) = step_nonreciprocal(&t, &h, &spec, 0.01).unwrap();
        for (x, y) in a.density.values().iter().zip(t.values()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
        for (x, y) in b.density.values().iter().zip(h.values()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn targets_avoid_herder_bump() {
        let g = RingGrid::circle(128).unwrap();
        let spec = nr_spec(g, [0.05, 0.0, 0.0, 0.0], 1.0, 0.0, 0.0);
        let mut t = DensityField::uniform(g, 1.0);
        let h = bump(g, 2.0, 8.0);
        let at_bump = g.cell_of(2.0);
        for _ in 0..2000 {
            t = step_nonreciprocal(&t, &h, &spec, 0.01).unwrap().0.density;
        }
        assert!(t.values()[at_bump] < 0.8 / TAU);
    }

    #[test]
    fn v2_sign_is_checked() {
        let g = RingGrid::circle(16).unwrap();
        let v2 = GridFn::from_fn(g, f64::sin);
        assert!(NonreciprocalSpec::new(g, [0.1; 4], 0.0, GridFn::zeros(g), v2, 0.0).is_err());
        assert!(NonreciprocalSpec::new(g, [-0.1, 0.0, 0.0, 0.0], 0.0, GridFn::zeros(g), GridFn::zeros(g), 0.0).is_err());
    }

    #[test]
    fn mass_of_examples() {
        let g = RingGrid::circle(64).unwrap();
        assert_abs_diff_eq!(mass_of(&DensityField::uniform(g, 1.0)), 1.0, epsilon = 1e-14);
        assert_eq!(mass_of(&GridFn::zeros(g)), 0.0);
        let a = bump(g, 1.0, 1.0);
        let b = DensityField::uniform(g, 2.0);
        let sum = a.to_grid_fn().add_scaled(&b, 1.0).unwrap();
        assert_abs_diff_eq!(mass_of(&sum), mass_of(&a) + mass_of(&b), epsilon = 1e-14);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn advection_diffusion_conserves_mass_and_sign(
            amp in 0.0..2.0f64,
            phase in 0.0..TAU,
            d in 0.0..0.2f64,
        ) {
            let g = RingGrid::circle(64).unwrap();
            let mut rho = bump(g, phase, 4.0);
            let m0 = rho.mass();
            let spec = AdvectionDiffusionSpec::new(
                GridFn::from_fn(g, |x| amp * (x + phase).sin()), d, None).unwrap();
            let dt = spec.max_stable_dt();
            let mut clamped = 0.0;
            for _ in 0..2000 {
                let out = step_conservation(&rho, &spec, dt).unwrap();
                clamped += out.clamped;
                rho = out.density;
            }
            prop_assert!((rho.mass() - m0).abs() <= 1e-10 * m0 + clamped);
            prop_assert!(clamped < 1e-9);
        }
    }
}
