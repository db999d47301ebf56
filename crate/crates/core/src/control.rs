//! Direct density control by continuification.
//!
//! The macroscopic source is
//!
//! ```text
//! q = K_p e - (e V_d)_x - (rho V_e)_x,   e = rho_d - rho,  V_d = f * rho_d,  V_e = f * e
//! ```
//!
//! and the control velocity solves `(rho U)_x = -q`. For a static target the
//! closed loop also needs the reference source `(rho_d V_d)_x`, which cancels
//! the drift the interaction kernel imposes on the target itself; with it the
//! error obeys `e_t = -K_p e` whenever the controller's kernel matches the plant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::InteractionKernel;
use crate::pde::{step_conservation, AdvectionDiffusionSpec};
use crate::ring::{convolve_periodic, derivative_x, DensityField, GridFn, GridValues, VelocityField};

/// Spatio-temporal velocity disturbance `amplitude * sin(wavenumber x - frequency t + phase)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disturbance {
    pub amplitude: f64,
    #[serde(default = "one_usize")]
    pub wavenumber: usize,
    #[serde(default = "one")]
    pub frequency: f64,
    #[serde(default)]
    pub phase: f64,
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}

impl Disturbance {
    pub fn field(&self, grid: &crate::ring::RingGrid, t: f64) -> VelocityField {
        let k = self.wavenumber as f64 * std::f64::consts::TAU / grid.length();
        GridFn::from_fn(*grid, |x| self.amplitude * (k * x - self.frequency * t + self.phase).sin())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirectControlConfig {
    pub k_p: f64,
    /// Sensing radius of the controller's convolutions; `None` is unlimited.
    #[serde(default)]
    pub sensing_radius: Option<f64>,
    #[serde(default)]
    pub disturbance: Option<Disturbance>,
    /// Relative error of the plant kernel strength with respect to the model.
    #[serde(default)]
    pub kernel_perturbation: f64,
    /// Density floor as a fraction of the mean density `mass / length`.
    #[serde(default = "default_floor_fraction")]
    pub floor_fraction: f64,
    /// Per-agent input saturation.
    #[serde(default = "default_u_max")]
    pub u_max: f64,
}

fn default_floor_fraction() -> f64 {
    1e-4
}
fn default_u_max() -> f64 {
    10.0
}

impl Default for DirectControlConfig {
    fn default() -> Self {
        Self {
            k_p: 10.0,
            sensing_radius: None,
            disturbance: None,
            kernel_perturbation: 0.0,
            floor_fraction: default_floor_fraction(),
            u_max: default_u_max(),
        }
    }
}

impl DirectControlConfig {
    pub fn validate(&self, length: f64) -> Result<()> {
        if !(self.k_p > 0.0 && self.k_p.is_finite()) {
            return Err(Error::param("k_p", format!("must be positive, got {}", self.k_p)));
        }
        if let Some(r) = self.sensing_radius {
            if !(r > 0.0 && r <= 0.5 * length * (1.0 + 1e-12)) {
                return Err(Error::param("sensing_radius", format!("must lie in (0, length/2], got {r}")));
            }
        }
        if !(self.floor_fraction > 0.0) {
            return Err(Error::param("floor_fraction", "must be positive"));
        }
        if !(self.u_max > 0.0) {
            return Err(Error::param("u_max", "must be positive"));
        }
        Ok(())
    }

    pub fn rho_floor(&self, mass: f64, length: f64) -> f64 {
        self.floor_fraction * mass / length
    }
}

fn check_masses(rho: &DensityField, rho_d: &DensityField) -> Result<()> {
    rho.grid().check_same(rho_d.grid())?;
    let tol = 1e-9 * rho.mass().abs().max(1.0);
    if (rho.mass() - rho_d.mass()).abs() > tol {
        return Err(Error::MassMismatch {
            left: rho.mass(),
            right: rho_d.mass(),
            tol,
        });
    }
    Ok(())
}

fn product(a: &impl GridValues, b: &impl GridValues) -> GridFn {
    GridFn::from_raw(*a.grid(), a.values().iter().zip(b.values()).map(|(x, y)| x * y).collect())
}

/// `q = K_p e - (e V_d)_x - (rho V_e)_x` with convolutions truncated at the sensing radius.
pub fn control_source(
    rho: &DensityField,
    rho_d: &DensityField,
    kernel: &InteractionKernel,
    cfg: &DirectControlConfig,
) -> Result<GridFn> {
    check_masses(rho, rho_d)?;
    let e = rho_d.to_grid_fn().add_scaled(rho, -1.0)?;
    let v_d = convolve_periodic(rho_d, kernel, cfg.sensing_radius)?;
    let v_e = convolve_periodic(&e, kernel, cfg.sensing_radius)?;
    let flux_e = derivative_x(&product(&e, &v_d))?;
    let flux_rho = derivative_x(&product(rho, &v_e))?;
    let q = e
        .scaled(cfg.k_p)
        .add_scaled(&flux_e, -1.0)?
        .add_scaled(&flux_rho, -1.0)?;
    Ok(zero_mean(q))
}

/// `(rho_d (f * rho_d))_x`: the source that holds a static target in place
/// against its own interaction drift.
pub fn reference_source(rho_d: &DensityField, kernel: &InteractionKernel, radius: Option<f64>) -> Result<GridFn> {
    let v_d = convolve_periodic(rho_d, kernel, radius)?;
    Ok(zero_mean(derivative_x(&product(rho_d, &v_d))?))
}

/// Removes the rounding-level mean so the source integrates to zero.
fn zero_mean(mut q: GridFn) -> GridFn {
    let m = q.values().iter().sum::<f64>() / q.values().len() as f64;
    q.values_mut().iter_mut().for_each(|v| *v -= m);
    q
}

/// Flux `F` with `F_x = -q` and zero mean over the ring.
pub fn flux_from_source(q: &GridFn) -> Result<GridFn> {
    let integral = q.integral();
    if integral.abs() > 1e-8 {
        return Err(Error::NonzeroSourceIntegral(integral));
    }
    let h = q.grid().cell_width();
    let mut acc = 0.0;
    let mut f: Vec<f64> = q
        .values()
        .iter()
        .map(|&qk| {
            let here = -(acc + 0.5 * qk) * h;
            acc += qk;
            here
        })
        .collect();
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    f.iter_mut().for_each(|v| *v -= mean);
    Ok(GridFn::from_raw(*q.grid(), f))
}

/// Solves `(rho U)_x = -q` for `U = F / max(rho, rho_floor)`.
pub fn recover_velocity(rho: &DensityField, q: &GridFn, rho_floor: f64) -> Result<VelocityField> {
    rho.grid().check_same(q.grid())?;
    if !(rho_floor > 0.0) {
        return Err(Error::param("rho_floor", format!("must be positive, got {rho_floor}")));
    }
    let f = flux_from_source(q)?;
    let u = f
        .values()
        .iter()
        .zip(rho.values())
        .map(|(fk, rk)| fk / rk.max(rho_floor))
        .collect();
    GridFn::new(*rho.grid(), u)
}

/// Periodic linear interpolation of `u` at each position.
pub fn discretise_inputs(u: &VelocityField, positions: &[f64]) -> Vec<f64> {
    let g = u.grid();
    let n = g.n_cells();
    let h = g.cell_width();
    let v = u.values();
    positions
        .iter()
        .map(|&x| {
            let s = crate::ring::wrap_position(x, g.length()) / h - 0.5;
            let base = s.floor();
            let frac = s - base;
            let k = (base as isize).rem_euclid(n as isize) as usize;
            v[k] * (1.0 - frac) + v[(k + 1) % n] * frac
        })
        .collect()
}

/// `V = 1/2 * integral of (rho_d - rho)^2`.
pub fn lyapunov_value(rho: &impl GridValues, rho_d: &impl GridValues) -> Result<f64> {
    rho.grid().check_same(rho_d.grid())?;
    let h = rho.grid().cell_width();
    Ok(0.5 * rho.values().iter().zip(rho_d.values()).map(|(a, b)| (b - a).powi(2)).sum::<f64>() * h)
}

/// Macroscopic closed loop
/// `rho_t + (rho (f_plant * rho + d))_x = q + (rho_d V_d)_x`, where `q` and the
/// reference source come from the model kernel, truncated at the sensing radius.
#[derive(Clone, Debug)]
pub struct MacroDirectLoop {
    pub rho: DensityField,
    pub target: DensityField,
    pub model_kernel: InteractionKernel,
    pub plant_kernel: InteractionKernel,
    pub cfg: DirectControlConfig,
    pub t: f64,
    reference: GridFn,
    /// Mass removed by positivity clamping so far.
    pub clamped: f64,
}

impl MacroDirectLoop {
    pub fn new(rho: DensityField, target: DensityField, kernel: InteractionKernel, cfg: DirectControlConfig) -> Result<Self> {
        cfg.validate(rho.grid().length())?;
        check_masses(&rho, &target)?;
        let reference = reference_source(&target, &kernel, cfg.sensing_radius)?;
        let plant_kernel = kernel.scaled(1.0 + cfg.kernel_perturbation);
        Ok(Self {
            rho,
            target,
            model_kernel: kernel,
            plant_kernel,
            cfg,
            t: 0.0,
            reference,
            clamped: 0.0,
        })
    }

    pub fn source(&self) -> Result<GridFn> {
        control_source(&self.rho, &self.target, &self.model_kernel, &self.cfg)?.add_scaled(&self.reference, 1.0)
    }

    /// Control velocity `U` recovered from the current source.
    pub fn control_velocity(&self) -> Result<VelocityField> {
        let floor = self.cfg.rho_floor(self.rho.mass(), self.rho.grid().length());
        recover_velocity(&self.rho, &self.source()?, floor)
    }

    pub fn plant_velocity(&self) -> Result<VelocityField> {
        let mut v = convolve_periodic(&self.rho, &self.plant_kernel, None)?;
        if let Some(d) = &self.cfg.disturbance {
            v = v.add_scaled(&d.field(self.rho.grid(), self.t), 1.0)?;
        }
        Ok(v)
    }

    pub fn step(&mut self, dt: f64) -> Result<()> {
        let q = self.source()?;
        let spec = AdvectionDiffusionSpec::new(self.plant_velocity()?, 0.0, Some(q))?;
        let out = step_conservation(&self.rho, &spec, dt)?;
        self.clamped += out.clamped;
        self.rho = out.density;
        self.t += dt;
        Ok(())
    }

    pub fn lyapunov(&self) -> f64 {
        lyapunov_value(&self.rho, &self.target).unwrap_or(f64::NAN)
    }

    pub fn l2_error(&self) -> f64 {
        (2.0 * self.lyapunov()).sqrt()
    }
}
