//! First-order agents on the ring: `dx_i = (v_i + u_i) dt + sqrt(2 sigma^2 dt) xi_i`,
//! where `v_i` is the mean-field interaction velocity.
//!
//! The interaction sum carries a `1/N` factor so that it converges to the
//! convolution `f * rho` of the macroscopic model as `N` grows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{ensure_finite, Error, Result};
use crate::kernel::InteractionKernel;
use crate::ring::{cdf_and_quantile, wrap_delta, wrap_position, DensityField};

/// Populations above this size use the sorted sliding-window sum for
/// exponential kernels.
const FAST_SUM_THRESHOLD: usize = 64;
const PAR_THRESHOLD: usize = 512;

#[derive(Clone, Debug)]
pub struct AgentPopulation {
    length: f64,
    positions: Vec<f64>,
    inputs: Vec<f64>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl AgentPopulation {
    pub fn new(positions: Vec<f64>, length: f64, seed: u64) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::param("positions", "population must hold at least one agent"));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::param("length", "must be positive"));
        }
        ensure_finite(&positions, "agent positions")?;
        let positions: Vec<f64> = positions.into_iter().map(|x| wrap_position(x, length)).collect();
        let n = positions.len();
        Ok(Self {
            length,
            positions,
            inputs: vec![0.0; n],
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Mean-field interaction velocity of every agent; see [`interaction_velocity`].
    pub fn interaction_velocity(&self, kernel: &InteractionKernel, radius: Option<f64>) -> Result<Vec<f64>> {
        interaction_velocity(&self.positions, self.length, kernel, radius)
    }

    /// One Euler-Maruyama step. `inputs` become the stored per-agent inputs.
    pub fn step(
        &mut self,
        kernel: &InteractionKernel,
        inputs: &[f64],
        dt: f64,
        noise_std: f64,
        radius: Option<f64>,
    ) -> Result<()> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::param("dt", format!("must be positive, got {dt}")));
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::param("noise_std", format!("must be nonnegative, got {noise_std}")));
        }
        if inputs.len() != self.len() {
            return Err(Error::param(
                "inputs",
                format!("expected {} inputs, got {}", self.len(), inputs.len()),
            ));
        }
        ensure_finite(inputs, "agent inputs")?;
        let v = self.interaction_velocity(kernel, radius)?;
        let amp = (2.0 * noise_std * noise_std * dt).sqrt();
        for i in 0..self.len() {
            let mut x = self.positions[i] + dt * (v[i] + inputs[i]);
            if amp > 0.0 {
                let xi: f64 = self.rng.sample(StandardNormal);
                x += amp * xi;
            }
            self.positions[i] = wrap_position(x, self.length);
        }
        self.inputs.copy_from_slice(inputs);
        Ok(())
    }
}

/// `v_i = (1/N) sum_j f(wrap(x_i - x_j))` over agents with `|wrap| <= radius`.
pub fn interaction_velocity(
    positions: &[f64],
    length: f64,
    kernel: &InteractionKernel,
    radius: Option<f64>,
) -> Result<Vec<f64>> {
    let n = positions.len();
    if n == 0 {
        return Err(Error::param("positions", "population is empty"));
    }
    let half = 0.5 * length;
    let radius = match radius {
        None => half,
        Some(r) if r > 0.0 => r.min(half),
        Some(r) => return Err(Error::param("radius", format!("must be positive, got {r}"))),
    };
    if matches!(kernel, InteractionKernel::Zero) {
        return Ok(vec![0.0; n]);
    }
    if let Some((amp, decay)) = kernel.exponential_form() {
        if n > FAST_SUM_THRESHOLD {
            return Ok(exponential_sum(positions, length, amp, decay, radius));
        }
    }
    Ok(interaction_velocity_direct(positions, length, kernel, radius))
}

/// Reference O(N^2) double loop.
pub(crate) fn interaction_velocity_direct(
    positions: &[f64],
    length: f64,
    kernel: &InteractionKernel,
    radius: f64,
) -> Vec<f64> {
    let n = positions.len();
    let slack = 1e-12 * length;
    let row = |xi: f64| {
        let mut acc = 0.0;
        for &xj in positions {
            let z = wrap_delta(xi - xj, length);
            if z.abs() <= radius + slack {
                acc += kernel.eval_periodic(z, length);
            }
        }
        acc / n as f64
    };
    if n >= PAR_THRESHOLD {
        positions.par_iter().map(|&x| row(x)).collect()
    } else {
        positions.iter().map(|&x| row(x)).collect()
    }
}

/// O(N log N) evaluation for `f(z) = amp * sign(z) * exp(-|z| / decay)`:
/// sort, then slide a window over the periodically lifted positions keeping the
/// running sum of `exp(-distance / decay)` up to date multiplicatively.
fn exponential_sum(positions: &[f64], length: f64, amp: f64, decay: f64, radius: f64) -> Vec<f64> {
    let n = positions.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| positions[a].total_cmp(&positions[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| positions[i]).collect();
    // antipodal pairs contribute zero, so exclude the far boundary in that case
    let include_far = radius < 0.5 * length;
    let behind = window_sums(&sorted, length, radius, decay, include_far);
    let mirrored: Vec<f64> = sorted.iter().rev().map(|x| length - x).collect();
    let ahead_rev = window_sums(&mirrored, length, radius, decay, include_far);

    let mut out = vec![0.0; n];
    for (k, &agent) in order.iter().enumerate() {
        out[agent] = amp * (behind[k] - ahead_rev[n - 1 - k]) / n as f64;
    }
    out
}

/// For each sorted position `x_k`, the sum of `exp(-(x_k - y) / decay)` over
/// lifted positions `y` with `0 < x_k - y < radius` (or `<= radius`).
fn window_sums(sorted: &[f64], length: f64, radius: f64, decay: f64, include_far: bool) -> Vec<f64> {
    let n = sorted.len() as isize;
    let lifted = |t: isize| sorted[t.rem_euclid(n) as usize] + length * t.div_euclid(n) as f64;
    let in_reach = |x: f64, y: f64| {
        let d = x - y;
        if include_far {
            d <= radius
        } else {
            d < radius
        }
    };
    let mut out = Vec::with_capacity(sorted.len());
    // window of lifted indices [lo, hi); every index passed by `hi` is added
    // and every index passed by `lo` is removed
    let mut lo: isize = -n;
    let mut hi: isize = -n;
    let mut sum = 0.0;
    let mut prev = sorted[0];
    for &x in sorted {
        sum *= (-(x - prev) / decay).exp();
        prev = x;
        while lifted(hi) < x {
            sum += (-(x - lifted(hi)) / decay).exp();
            hi += 1;
        }
        while lo < hi && !in_reach(x, lifted(lo)) {
            sum -= (-(x - lifted(lo)) / decay).exp();
            lo += 1;
        }
        out.push(sum.max(0.0));
    }
    out
}

/// Draws `n` i.i.d. positions from `density` by inverse-CDF sampling.
pub fn sample_initial_positions(n: usize, density: &DensityField, seed: u64) -> Result<AgentPopulation> {
    if n == 0 {
        return Err(Error::param("n", "must be positive"));
    }
    let cdf = cdf_and_quantile(density)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000_0001);
    let positions = (0..n).map(|_| cdf.quantile(rng.random::<f64>())).collect();
    AgentPopulation::new(positions, density_length(density), seed)
}

fn density_length(d: &DensityField) -> f64 {
    use crate::ring::GridValues;
    d.grid().length()
}
