//! The full multi-scale loop at the agent level: estimate the density from
//! agent positions, compute the macroscopic control on the estimate, and
//! sample the recovered velocity back at the agents.
//!
//! With a centralised observer every agent uses the same kernel density
//! estimate. With a distributed observer each agent runs PI consensus over a
//! communication graph and evaluates the control law on its own estimate.

use serde::{Deserialize, Serialize};

use crate::control::{control_source, discretise_inputs, recover_velocity, reference_source, DirectControlConfig};
use crate::error::{Error, Result};
use crate::estimate::{kde_estimate, local_signals, CommGraph, DistributedEstimator};
use crate::kernel::InteractionKernel;
use crate::metrics::l2_error;
use crate::micro::AgentPopulation;
use crate::ring::{DensityField, GridFn, GridValues, RingGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Observer {
    Centralised,
    Distributed {
        /// Degree of the random-regular communication graph.
        degree: usize,
        #[serde(default = "five")]
        k_p: f64,
        #[serde(default = "five")]
        k_i: f64,
    },
}

fn five() -> f64 {
    5.0
}

#[derive(Debug)]
pub struct MicroDirectLoop {
    pub agents: AgentPopulation,
    pub target: DensityField,
    pub t: f64,
    grid: RingGrid,
    model_kernel: InteractionKernel,
    plant_kernel: InteractionKernel,
    cfg: DirectControlConfig,
    bandwidth: f64,
    noise_std: f64,
    reference: GridFn,
    estimator: Option<DistributedEstimator>,
}

impl MicroDirectLoop {
    pub fn new(
        agents: AgentPopulation,
        target: DensityField,
        kernel: InteractionKernel,
        cfg: DirectControlConfig,
        bandwidth: f64,
        noise_std: f64,
        observer: &Observer,
        graph_seed: u64,
    ) -> Result<Self> {
        let grid = *target.grid();
        cfg.validate(grid.length())?;
        if (agents.length() - grid.length()).abs() > 1e-12 * grid.length() {
            return Err(Error::GridMismatch("agents and target live on rings of different length".into()));
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::param("noise_std", format!("must be nonnegative, got {noise_std}")));
        }
        let target = target.with_mass(1.0)?;
        let reference = reference_source(&target, &kernel, cfg.sensing_radius)?;
        let estimator = match observer {
            Observer::Centralised => None,
            Observer::Distributed { degree, k_p, k_i } => {
                let graph = CommGraph::random_regular(agents.len(), *degree, graph_seed)?;
                let signals = local_signals(&agents, grid, bandwidth)?;
                Some(DistributedEstimator::new(&graph, &signals, *k_p, *k_i)?)
            }
        };
        let plant_kernel = kernel.scaled(1.0 + cfg.kernel_perturbation);
        let lp = Self {
            agents,
            target,
            t: 0.0,
            grid,
            model_kernel: kernel,
            plant_kernel,
            cfg,
            bandwidth,
            noise_std,
            reference,
            estimator,
        };
        lp.density()?;
        Ok(lp)
    }

    /// Centralised kernel density estimate of the current positions.
    pub fn density(&self) -> Result<DensityField> {
        kde_estimate(&self.agents, self.grid, self.bandwidth)
    }

    fn velocity_from(&self, estimate: &DensityField) -> Result<GridFn> {
        let q = control_source(estimate, &self.target, &self.model_kernel, &self.cfg)?.add_scaled(&self.reference, 1.0)?;
        recover_velocity(estimate, &q, self.cfg.rho_floor(1.0, self.grid.length()))
    }

    /// Per-agent control inputs, saturated at `u_max`.
    pub fn inputs(&self) -> Result<Vec<f64>> {
        let positions = self.agents.positions();
        let mut u = match &self.estimator {
            None => discretise_inputs(&self.velocity_from(&self.density()?)?, positions),
            Some(est) => positions
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let own = est.clamped_estimate(i).with_mass(1.0)?;
                    Ok(discretise_inputs(&self.velocity_from(&own)?, &[x])[0])
                })
                .collect::<Result<Vec<f64>>>()?,
        };
        u.iter_mut().for_each(|v| *v = v.clamp(-self.cfg.u_max, self.cfg.u_max));
        Ok(u)
    }

    pub fn step(&mut self, dt: f64) -> Result<()> {
        let mut u = self.inputs()?;
        if let Some(d) = &self.cfg.disturbance {
            let field = d.field(&self.grid, self.t);
            for (ui, di) in u.iter_mut().zip(discretise_inputs(&field, self.agents.positions())) {
                *ui += di;
            }
        }
        self.agents.step(&self.plant_kernel, &u, dt, self.noise_std, None)?;
        if let Some(est) = &mut self.estimator {
            let signals = local_signals(&self.agents, self.grid, self.bandwidth)?;
            est.consensus_step(&signals, dt)?;
        }
        self.t += dt;
        Ok(())
    }

    /// `||KDE - rho_d||_L2`.
    pub fn l2_error(&self) -> Result<f64> {
        l2_error(&self.density()?, &self.target)
    }

    /// Largest per-agent distance between the consensus estimate and the
    /// centralised estimate; zero for a centralised observer.
    pub fn max_estimate_error(&self) -> Result<f64> {
        match &self.estimator {
            None => Ok(0.0),
            Some(est) => {
                let reference = self.density()?;
                Ok(est.estimation_error(&reference)?.into_iter().fold(0.0, f64::max))
            }
        }
    }

    pub fn grid(&self) -> &RingGrid {
        &self.grid
    }
}
