//! Planar shepherding: a few herders steer many targets into a goal disc at
//! the origin.
//!
//! Each herder picks a soft-max weighted mean of the targets it senses,
//! favouring those far from the goal, and moves to a point `delta` behind it.
//! Targets flee herders inside the repulsion radius and diffuse otherwise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

fn norm(p: Point) -> f64 {
    p[0].hypot(p[1])
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShepherdParams {
    /// Selection specificity.
    pub gamma: f64,
    /// Goal-directedness: how far behind its target a herder settles.
    pub delta: f64,
    /// Herder sensing radius.
    pub xi: f64,
    /// Radius within which targets feel a herder.
    pub lambda: f64,
    pub repulsion_strength: f64,
    pub target_noise: f64,
    pub herder_speed_cap: f64,
    /// Standard deviation of the herders' exploratory random walk.
    #[serde(default = "default_explore")]
    pub explore_noise: f64,
    /// Herders closer than this push each other apart; zero disables it.
    #[serde(default = "default_separation")]
    pub herder_separation: f64,
}

fn default_separation() -> f64 {
    3.0
}

fn default_explore() -> f64 {
    1.0
}

impl Default for ShepherdParams {
    fn default() -> Self {
        Self {
            gamma: 5.0,
            delta: 1.0,
            xi: 3.0,
            lambda: 2.5,
            repulsion_strength: 1.0,
            target_noise: 0.3,
            herder_speed_cap: 3.0,
            explore_noise: default_explore(),
            herder_separation: default_separation(),
        }
    }
}

impl ShepherdParams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [("gamma", self.gamma), ("delta", self.delta), ("target_noise", self.target_noise), ("explore_noise", self.explore_noise), ("herder_separation", self.herder_separation)];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be nonnegative, got {v}")));
            }
        }
        let pos = [
            ("xi", self.xi),
            ("lambda", self.lambda),
            ("repulsion_strength", self.repulsion_strength),
            ("herder_speed_cap", self.herder_speed_cap),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ShepherdState {
    pub herders: Vec<Point>,
    pub targets: Vec<Point>,
    pub goal_radius: f64,
    pub arena_radius: f64,
    pub t: f64,
    rng: ChaCha8Rng,
}

/// Uniform point in the disc of radius `r`.
fn in_disc(rng: &mut ChaCha8Rng, r: f64) -> Point {
    let rho = r * rng.random::<f64>().sqrt();
    let th = std::f64::consts::TAU * rng.random::<f64>();
    [rho * th.cos(), rho * th.sin()]
}

impl ShepherdState {
    pub fn new(herders: Vec<Point>, targets: Vec<Point>, goal_radius: f64, arena_radius: f64, seed: u64) -> Result<Self> {
        if !(goal_radius > 0.0) || !(arena_radius > 0.0) {
            return Err(Error::param("radius", "goal and arena radii must be positive"));
        }
        for p in herders.iter().chain(&targets) {
            if !(norm(*p) <= arena_radius) {
                return Err(Error::param("position", format!("{p:?} lies outside the arena")));
            }
        }
        Ok(Self {
            herders,
            targets,
            goal_radius,
            arena_radius,
            t: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Targets uniform in the disc of half the arena radius, herders uniform in
    /// the whole arena.
    pub fn random(n_targets: usize, n_herders: usize, goal_radius: f64, arena_radius: f64, seed: u64) -> Result<Self> {
        if n_targets == 0 {
            return Err(Error::param("n_targets", "must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0005_4ee9_0000_0000);
        let targets = (0..n_targets).map(|_| in_disc(&mut rng, 0.5 * arena_radius)).collect();
        let herders = (0..n_herders).map(|_| in_disc(&mut rng, arena_radius)).collect();
        Self::new(herders, targets, goal_radius, arena_radius, seed)
    }

    pub fn fraction_in_goal(&self) -> f64 {
        let inside = self.targets.iter().filter(|p| norm(**p) <= self.goal_radius).count();
        inside as f64 / self.targets.len().max(1) as f64
    }
}

/// Soft-max selection over the targets within `xi` of herder `i`, weighted by
/// `exp(gamma (|T_a| - |H_i|))`; `None` when no target is in range.
pub fn select_target(i: usize, state: &ShepherdState, params: &ShepherdParams) -> Option<Point> {
    let h = state.herders[i];
    select_from(h, &state.targets, params.gamma, params.xi)
}

fn select_from(h: Point, targets: &[Point], gamma: f64, xi: f64) -> Option<Point> {
    let hn = norm(h);
    let near: Vec<(Point, f64)> = targets
        .iter()
        .filter(|t| norm(sub(**t, h)) <= xi)
        .map(|t| (*t, gamma * (norm(*t) - hn)))
        .collect();
    let top = near.iter().map(|(_, e)| *e).fold(f64::NEG_INFINITY, f64::max);
    if near.is_empty() {
        return None;
    }
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for (t, e) in near {
        let w = (e - top).exp();
        sx += w * t[0];
        sy += w * t[1];
        sw += w;
    }
    Some([sx / sw, sy / sw])
}

/// `u = -(H - T* - delta T*/|T*|)`, norm-capped at `herder_speed_cap`.
pub fn herder_input(h: Point, selected: Point, params: &ShepherdParams) -> Point {
    let n = norm(selected);
    let dir = if n < 1e-9 { [0.0, 0.0] } else { [selected[0] / n, selected[1] / n] };
    let u = [
        -(h[0] - selected[0] - params.delta * dir[0]),
        -(h[1] - selected[1] - params.delta * dir[1]),
    ];
    cap(u, params.herder_speed_cap)
}

fn cap(u: Point, max: f64) -> Point {
    let s = norm(u);
    if s > max {
        [u[0] * max / s, u[1] * max / s]
    } else {
        u
    }
}

/// Collision avoidance between herders: the target repulsion law applied to
/// herders within `herder_separation` of each other.
fn separation(i: usize, herders: &[Point], params: &ShepherdParams) -> Point {
    let mut v = [0.0, 0.0];
    if params.herder_separation <= 0.0 {
        return v;
    }
    for (j, other) in herders.iter().enumerate() {
        if j == i {
            continue;
        }
        let d = sub(herders[i], *other);
        let r = norm(d);
        if r <= params.herder_separation {
            let r2 = (r * r).max(REPULSION_CORE * REPULSION_CORE);
            v[0] += params.repulsion_strength * d[0] / r2;
            v[1] += params.repulsion_strength * d[1] / r2;
        }
    }
    v
}

/// Closest approach used in the repulsion law, so a herder on top of a target
/// produces a bounded push.
const REPULSION_CORE: f64 = 0.1;

fn repulsion(t: Point, herders: &[Point], params: &ShepherdParams) -> Point {
    let mut v = [0.0, 0.0];
    for h in herders {
        let d = sub(t, *h);
        let r = norm(d);
        if r <= params.lambda {
            let r2 = (r * r).max(REPULSION_CORE * REPULSION_CORE);
            v[0] += params.repulsion_strength * d[0] / r2;
            v[1] += params.repulsion_strength * d[1] / r2;
        }
    }
    v
}

fn reflect(p: Point, radius: f64) -> Point {
    let r = norm(p);
    if r <= radius {
        return p;
    }
    // mirror across the wall, staying inside even for large overshoots
    let back = (2.0 * radius - r).clamp(0.0, radius);
    [p[0] * back / r, p[1] * back / r]
}

/// One synchronous Euler-Maruyama step of all agents.
pub fn step_shepherding(state: &mut ShepherdState, params: &ShepherdParams, dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::param("dt", format!("must be positive, got {dt}")));
    }
    let sq = dt.sqrt();
    let mut herders = state.herders.clone();
    for (i, h) in herders.iter_mut().enumerate() {
        let sep = separation(i, &state.herders, params);
        let (dx, dy) = match select_target(i, state, params) {
            Some(sel) => {
                let u = herder_input(*h, sel, params);
                let v = cap([u[0] + sep[0], u[1] + sep[1]], params.herder_speed_cap);
                (v[0] * dt, v[1] * dt)
            }
            None => {
                let a: f64 = state.rng.sample(StandardNormal);
                let b: f64 = state.rng.sample(StandardNormal);
                let v = cap(sep, params.herder_speed_cap);
                (v[0] * dt + params.explore_noise * sq * a, v[1] * dt + params.explore_noise * sq * b)
            }
        };
        *h = reflect([h[0] + dx, h[1] + dy], state.arena_radius);
    }
    let mut targets = state.targets.clone();
    for t in targets.iter_mut() {
        let v = repulsion(*t, &state.herders, params);
        let a: f64 = state.rng.sample(StandardNormal);
        let b: f64 = state.rng.sample(StandardNormal);
        let next = [
            t[0] + v[0] * dt + params.target_noise * sq * a,
            t[1] + v[1] * dt + params.target_noise * sq * b,
        ];
        *t = reflect(next, state.arena_radius);
    }
    state.herders = herders;
    state.targets = targets;
    state.t += dt;
    Ok(())
}

/// Tracks how long at least `fraction` of the targets have stayed in the goal.
#[derive(Clone, Debug)]
pub struct SuccessTracker {
    goal_radius: f64,
    fraction: f64,
    hold_time: f64,
    since: Option<f64>,
}

impl SuccessTracker {
    pub fn new(goal_radius: f64, fraction: f64, hold_time: f64) -> Self {
        Self {
            goal_radius,
            fraction,
            hold_time,
            since: None,
        }
    }

    /// Feeds one snapshot; returns true once the hold time has been met.
    pub fn observe(&mut self, t: f64, targets: &[Point]) -> bool {
        let inside = targets.iter().filter(|p| norm(**p) <= self.goal_radius).count();
        let ok = inside as f64 >= self.fraction * targets.len() as f64;
        if !ok {
            self.since = None;
            return false;
        }
        let start = *self.since.get_or_insert(t);
        t - start >= self.hold_time - 1e-12
    }
}

/// True iff at least `fraction` of the targets stay within `goal_radius`
/// continuously for `hold_time` somewhere in the trajectory.
pub fn herding_success(times: &[f64], targets: &[Vec<Point>], goal_radius: f64, fraction: f64, hold_time: f64) -> bool {
    let mut tr = SuccessTracker::new(goal_radius, fraction, hold_time);
    times.iter().zip(targets).any(|(t, snap)| tr.observe(*t, snap))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    #[serde(default = "d_goal")]
    pub goal_radius: f64,
    #[serde(default = "d_arena")]
    pub arena_radius: f64,
    #[serde(default = "d_fraction")]
    pub success_fraction: f64,
    #[serde(default = "d_hold")]
    pub hold_time: f64,
    #[serde(default = "d_tmax")]
    pub t_max: f64,
    #[serde(default = "d_dt")]
    pub dt: f64,
}

fn d_goal() -> f64 {
    2.0
}
fn d_arena() -> f64 {
    20.0
}
fn d_fraction() -> f64 {
    0.9
}
fn d_hold() -> f64 {
    5.0
}
fn d_tmax() -> f64 {
    300.0
}
fn d_dt() -> f64 {
    0.05
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            goal_radius: d_goal(),
            arena_radius: d_arena(),
            success_fraction: d_fraction(),
            hold_time: d_hold(),
            t_max: d_tmax(),
            dt: d_dt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialOutcome {
    pub success: bool,
    /// Time at which the hold condition was met, or the horizon.
    pub t_end: f64,
    pub final_fraction: f64,
}

/// Runs one seeded trial until success or `t_max`. `observe` sees every state.
pub fn run_trial(
    n_targets: usize,
    n_herders: usize,
    params: &ShepherdParams,
    cfg: &TrialConfig,
    seed: u64,
    mut observe: impl FnMut(&ShepherdState),
) -> Result<TrialOutcome> {
    params.validate()?;
    let mut state = ShepherdState::random(n_targets, n_herders, cfg.goal_radius, cfg.arena_radius, seed)?;
    let mut tracker = SuccessTracker::new(cfg.goal_radius, cfg.success_fraction, cfg.hold_time);
    observe(&state);
    let steps = (cfg.t_max / cfg.dt).round() as usize;
    for _ in 0..steps {
        step_shepherding(&mut state, params, cfg.dt)?;
        observe(&state);
        if tracker.observe(state.t, &state.targets) {
            return Ok(TrialOutcome {
                success: true,
                t_end: state.t,
                final_fraction: state.fraction_in_goal(),
            });
        }
    }
    Ok(TrialOutcome {
        success: false,
        t_end: state.t,
        final_fraction: state.fraction_in_goal(),
    })
}

/// Fraction of `seeds` trials that succeed with `m` herders.
pub fn success_probability(n_targets: usize, m: usize, params: &ShepherdParams, cfg: &TrialConfig, seeds: &[u64]) -> Result<f64> {
    let wins: Result<Vec<bool>> = seeds
        .par_iter()
        .map(|s| run_trial(n_targets, m, params, cfg, *s, |_| {}).map(|o| o.success))
        .collect();
    let wins = wins?;
    Ok(wins.iter().filter(|w| **w).count() as f64 / seeds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MinHerders {
    pub n_targets: usize,
    pub m_star: usize,
    /// `(M, success probability)` for every herder count tried.
    pub curve: Vec<(usize, f64)>,
}

/// Smallest herder count whose success probability reaches `threshold`, by
/// doubling then bisection.
pub fn min_herders(
    n_targets: usize,
    params: &ShepherdParams,
    cfg: &TrialConfig,
    seeds: &[u64],
    m_max: usize,
    threshold: f64,
) -> Result<MinHerders> {
    if seeds.is_empty() {
        return Err(Error::param("seeds", "need at least one seed per herder count"));
    }
    let mut curve = Vec::new();
    let probe = |m: usize, curve: &mut Vec<(usize, f64)>| -> Result<bool> {
        let p = success_probability(n_targets, m, params, cfg, seeds)?;
        curve.push((m, p));
        Ok(p >= threshold)
    };
    let mut lo = 0usize;
    let mut hi = 1usize;
    loop {
        if probe(hi, &mut curve)? {
            break;
        }
        if hi >= m_max {
            return Err(Error::NotHerdable { m_max });
        }
        lo = hi;
        hi = (hi * 2).min(m_max);
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if probe(mid, &mut curve)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    curve.sort_by_key(|(m, _)| *m);
    Ok(MinHerders {
        n_targets,
        m_star: hi,
        curve,
    })
}

impl TrialConfig {
    /// Initial target density: targets start uniform in a disc of half the
    /// arena radius.
    pub fn target_density(&self, n_targets: usize) -> f64 {
        n_targets as f64 / (std::f64::consts::PI * (0.5 * self.arena_radius).powi(2))
    }

    /// Same configuration with the arena resized so `n_targets` start at
    /// `density`.
    pub fn at_density(&self, n_targets: usize, density: f64) -> Result<Self> {
        if !(density > 0.0 && density.is_finite()) {
            return Err(Error::param("density", format!("must be positive, got {density}")));
        }
        Ok(Self {
            arena_radius: 2.0 * (n_targets as f64 / (std::f64::consts::PI * density)).sqrt(),
            ..self.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingLaw {
    pub points: Vec<MinHerders>,
    /// Least-squares fit of `ln M*` against `ln N_T`; the slope is the exponent.
    pub fit: crate::metrics::LinearFit,
}

/// How the scaling experiment maps a target count to a trial.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingProtocol {
    /// Initial target density held fixed (the arena grows with the
    /// population); `None` keeps the arena of the base trial.
    pub density: Option<f64>,
    /// When set, `t_max` is stretched by `arena_radius / reference` whenever
    /// the arena is larger than the reference, so the time budget keeps pace
    /// with the distance the flock has to travel.
    pub time_reference_radius: Option<f64>,
    pub m_max: usize,
    pub threshold: f64,
}

impl ScalingProtocol {
    pub fn trial(&self, base: &TrialConfig, n_targets: usize) -> Result<TrialConfig> {
        let mut c = match self.density {
            Some(d) => base.at_density(n_targets, d)?,
            None => base.clone(),
        };
        if let Some(r) = self.time_reference_radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::param("time_reference_radius", format!("must be positive, got {r}")));
            }
            c.t_max *= (c.arena_radius / r).max(1.0);
        }
        Ok(c)
    }
}

/// `M*` for each target count under `protocol`, and the log-log fit through them.
pub fn scaling_law(
    n_targets: &[usize],
    params: &ShepherdParams,
    cfg: &TrialConfig,
    protocol: &ScalingProtocol,
    seeds: &[u64],
) -> Result<ScalingLaw> {
    let mut points = Vec::with_capacity(n_targets.len());
    for &n in n_targets {
        let c = protocol.trial(cfg, n)?;
        points.push(min_herders(n, params, &c, seeds, protocol.m_max, protocol.threshold)?);
    }
    let x: Vec<f64> = points.iter().map(|p| (p.n_targets as f64).ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| (p.m_star as f64).ln()).collect();
    let fit = crate::metrics::linear_fit(&x, &y).ok_or_else(|| Error::param("n_targets", "need at least two distinct target counts"))?;
    Ok(ScalingLaw { points, fit })
}
