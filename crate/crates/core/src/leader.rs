//! Leader-follower density regulation.
//!
//! Leaders are actuated directly; followers diffuse and drift in the field the
//! leaders generate,
//!
//! ```text
//! rho_L,t + (rho_L u)_x = 0
//! rho_F,t + (rho_F (f * rho_L))_x = D rho_F,xx
//! ```
//!
//! A follower profile is stationary when `f * rho_L = D (ln rho_F)_x`, so the
//! leader reference is found by deconvolving that velocity through the kernel.

use std::collections::VecDeque;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::control::{control_source, recover_velocity, DirectControlConfig};
use crate::error::{Error, Result};
use crate::kernel::InteractionKernel;
use crate::metrics::l2_error;
use crate::pde::{step_conservation, step_follower, AdvectionDiffusionSpec};
use crate::ring::{derivative_x, dft, idft_real, CirculantKernel, DensityField, GridFn, GridValues, VelocityField};

const SYMBOL_FLOOR: f64 = 1e-10;
const ENERGY_FLOOR: f64 = 1e-8;

/// Zero-mean `g` with `f * g = v`, solved mode by mode.
pub fn deconvolve(v: &GridFn, kernel: &InteractionKernel) -> Result<GridFn> {
    let n = v.grid().n_cells();
    let symbol = CirculantKernel::new(kernel, *v.grid(), None)?.symbol();
    let vt = dft(v.values());
    let mut gt = vec![Complex64::new(0.0, 0.0); n];
    for k in 1..n {
        let amplitude = vt[k].norm() / n as f64;
        if symbol[k].norm() < SYMBOL_FLOOR {
            if amplitude <= ENERGY_FLOOR {
                continue;
            }
            return Err(Error::InfeasibleDeconvolution {
                mode: k.min(n - k),
                amplitude,
            });
        }
        gt[k] = vt[k] / symbol[k];
    }
    Ok(GridFn::from_raw(*v.grid(), idft_real(&gt)))
}

/// Velocity `D (ln rho_F)_x` that holds `rho_F` stationary.
pub fn required_velocity(rho_f: &DensityField, diffusion: f64) -> Result<VelocityField> {
    if rho_f.values().iter().any(|v| !(*v > 0.0)) {
        return Err(Error::param("follower reference", "must be strictly positive"));
    }
    let log = GridFn::from_raw(*rho_f.grid(), rho_f.values().iter().map(|v| v.ln()).collect());
    Ok(derivative_x(&log)?.scaled(diffusion))
}

fn zero_mean_leader(rho_f: &DensityField, kernel: &InteractionKernel, diffusion: f64) -> Result<GridFn> {
    if !(diffusion >= 0.0 && diffusion.is_finite()) {
        return Err(Error::param("diffusion", format!("must be nonnegative, got {diffusion}")));
    }
    deconvolve(&required_velocity(rho_f, diffusion)?, kernel)
}

/// Leader density whose field holds `rho_f` stationary. It may be negative
/// somewhere when `leader_mass` is below [`min_leader_mass`].
pub fn leader_reference(
    rho_f: &DensityField,
    kernel: &InteractionKernel,
    diffusion: f64,
    leader_mass: f64,
) -> Result<GridFn> {
    let zm = zero_mean_leader(rho_f, kernel, diffusion)?;
    let uniform = leader_mass / rho_f.grid().length();
    Ok(GridFn::from_raw(*rho_f.grid(), zm.values().iter().map(|v| v + uniform).collect()))
}

/// Smallest leader mass for which [`leader_reference`] is nonnegative.
pub fn min_leader_mass(rho_f: &DensityField, kernel: &InteractionKernel, diffusion: f64) -> Result<f64> {
    let zm = zero_mean_leader(rho_f, kernel, diffusion)?;
    let min = zm.values().iter().copied().fold(f64::INFINITY, f64::min);
    Ok((-rho_f.grid().length() * min).max(0.0))
}

/// Continuification velocity steering the leaders toward `target`.
pub fn feedforward_leader_velocity(
    rho_l: &DensityField,
    target: &DensityField,
    kernel: &InteractionKernel,
    k_p: f64,
) -> Result<VelocityField> {
    let cfg = DirectControlConfig {
        k_p,
        ..Default::default()
    };
    let q = control_source(rho_l, target, kernel, &cfg)?;
    recover_velocity(rho_l, &q, cfg.rho_floor(rho_l.mass(), rho_l.grid().length()))
}

/// Outer loop adapting the leader reference to `rho_bar + alpha W`.
#[derive(Clone, Debug)]
pub struct GovernorState {
    alpha: f64,
    k_alpha: f64,
    deadband: f64,
    w: GridFn,
    history: VecDeque<f64>,
}

const HISTORY: usize = 256;

impl GovernorState {
    /// `w` must have zero mass; it is scaled down if needed so that
    /// `base + w >= 0`.
    pub fn new(k_alpha: f64, w: GridFn, base: &DensityField) -> Result<Self> {
        if !(k_alpha > 0.0 && k_alpha.is_finite()) {
            return Err(Error::param("k_alpha", format!("must be positive, got {k_alpha}")));
        }
        base.grid().check_same(w.grid())?;
        let scale = w.values().iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
        if w.integral().abs() > 1e-10 * scale {
            return Err(Error::param("W", format!("must have zero mass, has {}", w.integral())));
        }
        // largest s <= 1 with base + s w >= 0
        let mut s: f64 = 1.0;
        for (b, v) in base.values().iter().zip(w.values()) {
            if *v < 0.0 {
                s = s.min(b / -v);
            }
        }
        Ok(Self {
            alpha: 0.0,
            k_alpha,
            deadband: 1e-3,
            w: w.scaled(s.max(0.0)),
            history: VecDeque::with_capacity(HISTORY),
        })
    }

    pub fn with_deadband(mut self, deadband: f64) -> Self {
        self.deadband = deadband;
        self
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn shape(&self) -> &GridFn {
        &self.w
    }

    pub fn history(&self) -> impl Iterator<Item = &f64> {
        self.history.iter()
    }

    pub fn update(&mut self, follower_error: f64, dt: f64) -> Result<()> {
        if !(dt > 0.0) {
            return Err(Error::param("dt", "must be positive"));
        }
        if !(follower_error >= 0.0) {
            return Err(Error::param("follower_error", "must be nonnegative"));
        }
        self.alpha = (self.alpha + dt * self.k_alpha * (follower_error - self.deadband)).clamp(0.0, 1.0);
        if self.history.len() == HISTORY {
            self.history.pop_front();
        }
        self.history.push_back(follower_error);
        Ok(())
    }

    /// `base + alpha W`, nonnegative by construction.
    pub fn target(&self, base: &DensityField) -> Result<DensityField> {
        let v = base.values().iter().zip(self.w.values()).map(|(b, w)| (b + self.alpha * w).max(0.0)).collect();
        DensityField::new(*base.grid(), v)
    }
}

/// Leading Fourier mode of the leader correction that would cancel the
/// current follower error, as predicted with the model kernel.
pub fn correction_shape(
    rho_f: &DensityField,
    rho_f_bar: &DensityField,
    kernel: &InteractionKernel,
    diffusion: f64,
) -> Result<GridFn> {
    rho_f.grid().check_same(rho_f_bar.grid())?;
    let floor = 1e-6 * rho_f.mass() / rho_f.grid().length();
    let floored = DensityField::new(*rho_f.grid(), rho_f.values().iter().map(|v| v.max(floor)).collect())?;
    let dv = required_velocity(rho_f_bar, diffusion)?.add_scaled(&required_velocity(&floored, diffusion)?, -1.0)?;
    let dl = deconvolve(&dv, kernel)?;
    let n = dl.grid().n_cells();
    let spec = dft(dl.values());
    let lead = (1..=n / 2).max_by(|a, b| spec[*a].norm().total_cmp(&spec[*b].norm())).unwrap_or(1);
    let mut only = vec![Complex64::new(0.0, 0.0); n];
    only[lead] = spec[lead];
    only[n - lead] = spec[n - lead];
    Ok(GridFn::from_raw(*dl.grid(), idft_real(&only)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeaderScheme {
    Feedforward,
    Governor,
}

/// Macroscopic leader-follower closed loop.
#[derive(Clone, Debug)]
pub struct LeaderFollowerLoop {
    pub leaders: DensityField,
    pub followers: DensityField,
    pub follower_target: DensityField,
    pub leader_base: DensityField,
    pub model_kernel: InteractionKernel,
    pub plant_kernel: InteractionKernel,
    pub diffusion: f64,
    pub k_p: f64,
    pub governor: Option<GovernorState>,
    pub t: f64,
}

impl LeaderFollowerLoop {
    /// Builds the leader reference for `follower_target`; fails if
    /// `leader_mass` cannot make it nonnegative.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        leaders: DensityField,
        followers: DensityField,
        follower_target: DensityField,
        model_kernel: InteractionKernel,
        plant_kernel: InteractionKernel,
        diffusion: f64,
        k_p: f64,
    ) -> Result<Self> {
        if !(k_p > 0.0) {
            return Err(Error::param("k_p", "must be positive"));
        }
        let base = leader_reference(&follower_target, &model_kernel, diffusion, leaders.mass())?;
        if base.values().iter().any(|v| *v < 0.0) {
            let need = min_leader_mass(&follower_target, &model_kernel, diffusion)?;
            return Err(Error::param(
                "leader_mass",
                format!("{} is below the minimum {need}", leaders.mass()),
            ));
        }
        let leader_base = DensityField::new(*base.grid(), base.into_values())?;
        Ok(Self {
            leaders,
            followers,
            follower_target,
            leader_base,
            model_kernel,
            plant_kernel,
            diffusion,
            k_p,
            governor: None,
            t: 0.0,
        })
    }

    pub fn leader_target(&self) -> Result<DensityField> {
        match &self.governor {
            Some(g) => g.target(&self.leader_base),
            None => Ok(self.leader_base.clone()),
        }
    }

    /// Switches on the reference governor with a correction shape taken from
    /// the current follower error.
    pub fn engage_governor(&mut self, k_alpha: f64) -> Result<()> {
        let w = correction_shape(&self.followers, &self.follower_target, &self.model_kernel, self.diffusion)?;
        self.governor = Some(GovernorState::new(k_alpha, w, &self.leader_base)?);
        Ok(())
    }

    pub fn follower_error(&self) -> f64 {
        l2_error(&self.followers, &self.follower_target).unwrap_or(f64::NAN)
    }

    pub fn leader_error(&self) -> Result<f64> {
        l2_error(&self.leaders, &self.leader_target()?)
    }

    pub fn max_dt(&self) -> Result<f64> {
        let v = crate::ring::convolve_periodic(&self.leaders, &self.plant_kernel, None)?;
        Ok(crate::pde::max_stable_dt(v.max_abs(), self.diffusion, self.leaders.grid().cell_width()))
    }

    pub fn step(&mut self, dt: f64) -> Result<()> {
        let target = self.leader_target()?;
        // leaders carry no self-interaction, so the source is K_p e and the
        // leader mass is untouched
        let cfg = DirectControlConfig {
            k_p: self.k_p,
            ..Default::default()
        };
        let q = control_source(&self.leaders, &target, &InteractionKernel::Zero, &cfg)?;
        let zero = GridFn::zeros(*self.leaders.grid());
        let f = step_follower(&self.followers, &self.leaders, &self.plant_kernel, self.diffusion, dt)?;
        let l = step_conservation(&self.leaders, &AdvectionDiffusionSpec::new(zero, 0.0, Some(q))?, dt)?;
        self.leaders = l.density;
        self.followers = f.density;
        self.t += dt;
        let err = self.follower_error();
        if let Some(g) = &mut self.governor {
            g.update(err, dt)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ring::{convolve_periodic, RingGrid};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::TAU;

    fn cosine(g: RingGrid, amp: f64, k: f64) -> DensityField {
        DensityField::from_fn(g, |x| (1.0 + amp * (k * x).cos()) / TAU).unwrap()
    }

    #[test]
    fn uniform_followers_need_uniform_leaders() {
        let g = RingGrid::circle(128).unwrap();
        let k = InteractionKernel::default();
        let l = leader_reference(&DensityField::uniform(g, 1.0), &k, 0.05, 2.0).unwrap();
        for v in l.values() {
            assert_abs_diff_eq!(*v, 2.0 / TAU, epsilon = 1e-14);
        }
        assert_eq!(min_leader_mass(&DensityField::uniform(g, 1.0), &k, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn reference_reproduces_required_velocity() {
        let g = RingGrid::circle(128).unwrap();
        let k = InteractionKernel::default();
        let rho_f = cosine(g, 0.2, 1.0);
        let l = leader_reference(&rho_f, &k, 0.05, 1.0).unwrap();
        let forward = convolve_periodic(&l, &k, None).unwrap();
        let want = required_velocity(&rho_f, 0.05).unwrap();
        for (a, b) in forward.values().iter().zip(want.values()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-8);
        }
        assert_abs_diff_eq!(l.integral(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn reference_is_linear_in_diffusion() {
        let g = RingGrid::circle(64).unwrap();
        let k = InteractionKernel::default();
        let rho_f = cosine(g, 0.2, 1.0);
        let a = leader_reference(&rho_f, &k, 0.05, 0.0).unwrap();
        let b = leader_reference(&rho_f, &k, 0.1, 0.0).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_abs_diff_eq!(2.0 * x, *y, epsilon = 1e-14);
        }
        let m1 = min_leader_mass(&rho_f, &k, 0.05).unwrap();
        let m2 = min_leader_mass(&rho_f, &k, 0.1).unwrap();
        assert!(m1 > 0.0);
        assert_abs_diff_eq!(m2, 2.0 * m1, epsilon = 1e-12);
        let sharper = min_leader_mass(&cosine(g, 0.4, 1.0), &k, 0.05).unwrap();
        assert!(sharper > m1);
    }

    #[test]
    fn vanishing_symbol_is_infeasible() {
        // a table kernel that only excites mode 1 cannot produce mode 2
        let g = RingGrid::circle(64).unwrap();
        let m = 512;
        let vals: Vec<f64> = (0..m)
            .map(|i| {
                let z = -TAU / 2.0 + i as f64 * TAU / m as f64;
                if i == 0 { 0.0 } else { z.sin() }
            })
            .collect();
        let k = InteractionKernel::CustomTable(crate::kernel::KernelTable::new(TAU, vals).unwrap());
        // exp(a cos x) has a pure mode-1 log-derivative
        let vm = DensityField::from_fn(g, |x| (0.3 * x.cos()).exp()).unwrap();
        assert!(min_leader_mass(&vm, &k, 0.05).is_ok());
        let r = min_leader_mass(&cosine(g, 0.2, 2.0), &k, 0.05);
        assert!(matches!(r, Err(Error::InfeasibleDeconvolution { .. })), "{r:?}");
    }

    #[test]
    fn feedforward_velocity_examples() {
        let g = RingGrid::circle(128).unwrap();
        let target = cosine(g, 0.3, 1.0);
        let u = feedforward_leader_velocity(&target, &target, &InteractionKernel::Zero, 10.0).unwrap();
        assert_eq!(u.max_abs(), 0.0);
        let rho = DensityField::uniform(g, 1.0);
        let u1 = feedforward_leader_velocity(&rho, &target, &InteractionKernel::Zero, 1.0).unwrap();
        let u3 = feedforward_leader_velocity(&rho, &target, &InteractionKernel::Zero, 3.0).unwrap();
        for (a, b) in u1.values().iter().zip(u3.values()) {
            assert_abs_diff_eq!(3.0 * a, *b, epsilon = 1e-13);
        }
    }

    #[test]
    fn governor_examples() {
        let g = RingGrid::circle(64).unwrap();
        let base = cosine(g, 0.5, 1.0);
        let w = GridFn::from_fn(g, |x| 0.1 * (2.0 * x).sin());
        let mut gov = GovernorState::new(2.0, w.clone(), &base).unwrap();
        gov.update(0.0, 0.1).unwrap();
        assert_eq!(gov.alpha(), 0.0);
        for _ in 0..1000 {
            gov.update(5.0, 0.1).unwrap();
            assert!(gov.alpha() <= 1.0);
        }
        assert_eq!(gov.alpha(), 1.0);
        assert_abs_diff_eq!(gov.target(&base).unwrap().mass(), base.mass(), epsilon = 1e-14);
        assert!(GovernorState::new(1.0, GridFn::from_fn(g, |_| 0.1), &base).is_err());

        // an oversized shape is shrunk until the target stays nonnegative
        let big = GridFn::from_fn(g, |x| x.cos());
        let gov = GovernorState::new(1.0, big, &base).unwrap();
        let min = base.values().iter().zip(gov.shape().values()).map(|(b, w)| b + w).fold(f64::INFINITY, f64::min);
        assert!(min >= -1e-15);
    }

    #[test]
    fn leaders_converge_exponentially_and_keep_mass() {
        let g = RingGrid::circle(128).unwrap();
        let k = InteractionKernel::default();
        let target_f = cosine(g, 0.3, 2.0);
        let mass = 1.1 * min_leader_mass(&target_f, &k, 0.05).unwrap();
        let leaders = DensityField::uniform(g, mass);
        let mut lp = LeaderFollowerLoop::new(leaders, DensityField::uniform(g, 1.0), target_f, k.clone(), k, 0.05, 10.0).unwrap();
        let dt = 0.01;
        let (mut ts, mut logs) = (Vec::new(), Vec::new());
        while lp.t < 5.0 - 1e-9 {
            lp.step(dt).unwrap();
            assert_abs_diff_eq!(lp.leaders.mass(), mass, epsilon = 1e-10);
            let e = lp.leader_error().unwrap();
            if e > 1e-13 {
                ts.push(lp.t);
                logs.push(e.ln());
            }
        }
        let fit = crate::metrics::linear_fit(&ts, &logs).unwrap();
        assert!(-fit.slope > 0.0, "rate {}", -fit.slope);
    }

    #[test]
    fn followers_relax_to_the_analytic_profile_under_frozen_leaders() {
        let g = RingGrid::circle(128).unwrap();
        let k = InteractionKernel::default();
        let d = 0.05;
        let leaders = cosine(g, 0.8, 1.0);
        let v = convolve_periodic(&leaders, &k, None).unwrap();
        // potential by cumulative integration of the drift
        let h = g.cell_width();
        let mut acc = 0.0;
        let phi: Vec<f64> = v
            .values()
            .iter()
            .map(|vk| {
                let here = acc + 0.5 * vk * h;
                acc += vk * h;
                here
            })
            .collect();
        let steady = DensityField::new(g, phi.iter().map(|p| (p / d).exp()).collect()).unwrap().with_mass(1.0).unwrap();
        let mut f = DensityField::uniform(g, 1.0);
        let dt = 0.01;
        let mut last = f64::INFINITY;
        let mut after_transient = f64::NAN;
        for step in 0..3000 {
            f = step_follower(&f, &leaders, &k, d, dt).unwrap().density;
            let e = l2_error(&f, &steady).unwrap();
            if step > 100 {
                assert!(e <= last + 1e-12, "step {step}: {e} > {last}");
            } else {
                after_transient = e;
            }
            last = e;
        }
        println!("after transient {after_transient}, final {last}");
        // the remaining gap is the O(h) upwind offset of the discrete steady state
        assert!(last < 0.5 * after_transient, "final {last}");
    }
}
