//! Versioned TOML scenario configuration.
//!
//! Every section has defaults; `resolve` fills the scenario-dependent ones
//! (time step, horizon, sensing radius, ...) so that `config.resolved` is a
//! complete, self-contained description of the run.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::control::DirectControlConfig;
use crate::error::{Error, Result};
use crate::kernel::InteractionKernel;
use crate::pde::NonreciprocalParams;
use crate::pipeline::Observer;
use crate::ring::{DensityField, RingGrid};
use crate::shepherd::{ShepherdParams, TrialConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Direct,
    DirectFiniteSensing,
    DirectDistributed,
    DirectOt,
    MicroMacro,
    LeaderFollowerFf,
    LeaderFollowerRg,
    Shepherd,
    ShepherdScaling,
    Fields,
}

impl Scenario {
    pub const ALL: [Scenario; 10] = [
        Scenario::Direct,
        Scenario::DirectFiniteSensing,
        Scenario::DirectDistributed,
        Scenario::DirectOt,
        Scenario::MicroMacro,
        Scenario::LeaderFollowerFf,
        Scenario::LeaderFollowerRg,
        Scenario::Shepherd,
        Scenario::ShepherdScaling,
        Scenario::Fields,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Direct => "direct",
            Scenario::DirectFiniteSensing => "direct-finite-sensing",
            Scenario::DirectDistributed => "direct-distributed",
            Scenario::DirectOt => "direct-ot",
            Scenario::MicroMacro => "micro-macro",
            Scenario::LeaderFollowerFf => "leader-follower-ff",
            Scenario::LeaderFollowerRg => "leader-follower-rg",
            Scenario::Shepherd => "shepherd",
            Scenario::ShepherdScaling => "shepherd-scaling",
            Scenario::Fields => "fields",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Scenario::Direct => "macroscopic direct density control on the ring",
            Scenario::DirectFiniteSensing => "direct control with convolutions truncated at a sensing radius",
            Scenario::DirectDistributed => "agent-level direct control with consensus density estimation, against a centralised baseline",
            Scenario::DirectOt => "tracking a rotating target with optimal-transport velocities",
            Scenario::MicroMacro => "uncontrolled agents against the mean-field PDE",
            Scenario::LeaderFollowerFf => "leader-follower regulation with a feedforward leader reference",
            Scenario::LeaderFollowerRg => "leader-follower regulation with a reference governor",
            Scenario::Shepherd => "one planar shepherding trial",
            Scenario::ShepherdScaling => "minimum herder count against target count",
            Scenario::Fields => "coupled target/herder field equations",
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VonMisesComponent {
    pub weight: f64,
    pub mu: f64,
    pub kappa: f64,
}

/// Named density families, normalised to unit mass on the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DensitySpec {
    Uniform,
    VonMises { mu: f64, kappa: f64 },
    Mixture { components: Vec<VonMisesComponent> },
    /// `1 + amplitude cos(wavenumber (x - phase))`.
    Cosine {
        amplitude: f64,
        wavenumber: u32,
        #[serde(default)]
        phase: f64,
    },
}

impl DensitySpec {
    pub fn bimodal() -> Self {
        DensitySpec::Mixture {
            components: vec![
                VonMisesComponent { weight: 0.6, mu: 1.5, kappa: 2.0 },
                VonMisesComponent { weight: 0.4, mu: 4.5, kappa: 3.0 },
            ],
        }
    }

    fn check(&self, path: &str, errs: &mut Vec<String>) {
        match self {
            DensitySpec::Uniform => {}
            DensitySpec::VonMises { mu, kappa } => {
                if !mu.is_finite() || !(*kappa >= 0.0 && kappa.is_finite()) {
                    errs.push(format!("{path}: von-mises needs finite mu and kappa >= 0"));
                }
            }
            DensitySpec::Mixture { components } => {
                if components.is_empty() {
                    errs.push(format!("{path}: mixture needs at least one component"));
                }
                for (k, c) in components.iter().enumerate() {
                    if !(c.weight > 0.0 && c.weight.is_finite()) || !c.mu.is_finite() || !(c.kappa >= 0.0 && c.kappa.is_finite()) {
                        errs.push(format!("{path}.components[{k}]: weight must be positive, kappa nonnegative"));
                    }
                }
            }
            DensitySpec::Cosine { amplitude, .. } => {
                if !(amplitude.abs() < 1.0) {
                    errs.push(format!("{path}: cosine amplitude must lie in (-1, 1) to stay positive"));
                }
            }
        }
    }

    /// Unit-mass density on `grid`; a von Mises component is normalised on the
    /// grid itself so mixtures weight their modes exactly.
    pub fn build(&self, grid: RingGrid) -> Result<DensityField> {
        let k = TAU / grid.length();
        let vm = |mu: f64, kappa: f64| -> Result<DensityField> {
            // shift the exponent so large kappa does not overflow
            DensityField::from_fn(grid, |x| (kappa * ((k * (x - mu)).cos() - 1.0)).exp())?.with_mass(1.0)
        };
        match self {
            DensitySpec::Uniform => Ok(DensityField::uniform(grid, 1.0)),
            DensitySpec::VonMises { mu, kappa } => vm(*mu, *kappa),
            DensitySpec::Mixture { components } => {
                let mut acc = vec![0.0; grid.n_cells()];
                for c in components {
                    let d = vm(c.mu, c.kappa)?;
                    for (a, v) in acc.iter_mut().zip(d.values()) {
                        *a += c.weight * v;
                    }
                }
                DensityField::new(grid, acc)?.with_mass(1.0)
            }
            DensitySpec::Cosine { amplitude, wavenumber, phase } => {
                DensityField::from_fn(grid, |x| 1.0 + amplitude * (*wavenumber as f64 * k * (x - phase)).cos())?.with_mass(1.0)
            }
        }
    }
}

use crate::ring::GridValues;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "d_cells")]
    pub n_cells: usize,
    #[serde(default = "d_length")]
    pub length: f64,
}

fn d_cells() -> usize {
    256
}
fn d_length() -> f64 {
    TAU
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n_cells: d_cells(),
            length: d_length(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    /// Spacing of rows in `metrics.csv`.
    pub record_every: Option<f64>,
    /// Spacing of snapshots in `fields.csv` / `trajectory.csv`.
    pub dump_every: Option<f64>,
}

/// Initial condition: a density family plus a seeded random low-mode
/// perturbation `sum_k a_k cos(k x + phi_k)` with `|a_k| <= perturbation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    #[serde(default = "d_initial")]
    pub density: DensitySpec,
    #[serde(default)]
    pub perturbation: f64,
    #[serde(default = "d_modes")]
    pub modes: u32,
}

fn d_initial() -> DensitySpec {
    DensitySpec::Uniform
}
fn d_modes() -> u32 {
    3
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self {
            density: d_initial(),
            perturbation: 0.0,
            modes: d_modes(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicroConfig {
    #[serde(default = "d_agents")]
    pub n_agents: usize,
    /// Per-agent noise intensity; the macro model diffuses at `noise_std^2`.
    #[serde(default)]
    pub noise_std: f64,
    /// Defaults to `0.2 (N / 100)^(-1/5)`.
    pub bandwidth: Option<f64>,
    #[serde(default = "d_observer")]
    pub observer: Observer,
}

fn d_agents() -> usize {
    1000
}
fn d_observer() -> Observer {
    Observer::Centralised
}

impl Default for MicroConfig {
    fn default() -> Self {
        Self {
            n_agents: d_agents(),
            noise_std: 0.0,
            bandwidth: None,
            observer: d_observer(),
        }
    }
}

pub fn default_bandwidth(n_agents: usize) -> f64 {
    0.2 * (n_agents as f64 / 100.0).powf(-0.2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OtConfig {
    /// Angular speed of the rotating target.
    #[serde(default = "d_omega")]
    pub rotation_speed: f64,
    /// The transport displacement is spread over this time; the map is
    /// recomputed every step.
    #[serde(default = "d_relax")]
    pub relaxation_time: f64,
}

fn d_omega() -> f64 {
    0.5
}
fn d_relax() -> f64 {
    0.25
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            rotation_speed: d_omega(),
            relaxation_time: d_relax(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GovernorConfig {
    #[serde(default = "d_k_alpha")]
    pub k_alpha: f64,
    #[serde(default = "d_engage")]
    pub engage_at: f64,
    #[serde(default = "d_deadband")]
    pub deadband: f64,
}

fn d_k_alpha() -> f64 {
    50.0
}
fn d_engage() -> f64 {
    30.0
}
fn d_deadband() -> f64 {
    1e-3
}

impl Default for GovernorConfig {
    fn default() -> Self {
        Self {
            k_alpha: d_k_alpha(),
            engage_at: d_engage(),
            deadband: d_deadband(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderConfig {
    #[serde(default = "d_diffusion")]
    pub diffusion: f64,
    #[serde(default = "d_lf_kp")]
    pub k_p: f64,
    /// Leader mass as a multiple of the minimum feasible mass.
    #[serde(default = "d_mass_factor")]
    pub mass_factor: f64,
    /// Relative error of the plant kernel strength.
    #[serde(default)]
    pub kernel_perturbation: f64,
    #[serde(default = "d_lf_target")]
    pub follower_target: DensitySpec,
    #[serde(default)]
    pub governor: GovernorConfig,
}

fn d_diffusion() -> f64 {
    0.05
}
fn d_lf_kp() -> f64 {
    10.0
}
fn d_mass_factor() -> f64 {
    1.1
}
fn d_lf_target() -> DensitySpec {
    DensitySpec::Cosine {
        amplitude: 0.3,
        wavenumber: 2,
        phase: 0.0,
    }
}

impl Default for LeaderConfig {
    fn default() -> Self {
        Self {
            diffusion: d_diffusion(),
            k_p: d_lf_kp(),
            mass_factor: d_mass_factor(),
            kernel_perturbation: 0.0,
            follower_target: d_lf_target(),
            governor: GovernorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShepherdConfig {
    #[serde(default = "d_targets")]
    pub n_targets: usize,
    #[serde(default = "d_herders")]
    pub n_herders: usize,
    #[serde(default)]
    pub params: ShepherdParams,
    #[serde(default)]
    pub trial: TrialConfig,
}

fn d_targets() -> usize {
    20
}
fn d_herders() -> usize {
    4
}

impl Default for ShepherdConfig {
    fn default() -> Self {
        Self {
            n_targets: d_targets(),
            n_herders: d_herders(),
            params: ShepherdParams::default(),
            trial: TrialConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    #[serde(default = "d_scaling_n")]
    pub n_targets: Vec<usize>,
    /// Trials per herder count.
    #[serde(default = "d_trials")]
    pub trials: usize,
    #[serde(default = "d_m_max")]
    pub m_max: usize,
    #[serde(default = "d_threshold")]
    pub threshold: f64,
    /// Initial target density held fixed across target counts; `None` keeps
    /// the arena of `[shepherd.trial]`.
    #[serde(default = "d_density")]
    pub density: Option<f64>,
    /// Arena radius up to which `t_max` applies unchanged; larger arenas get
    /// a proportionally longer budget. `None` keeps `t_max` fixed.
    #[serde(default = "d_time_reference_radius")]
    pub time_reference_radius: Option<f64>,
}

fn d_scaling_n() -> Vec<usize> {
    vec![10, 20, 40, 80, 160]
}
fn d_trials() -> usize {
    10
}
fn d_m_max() -> usize {
    64
}
fn d_threshold() -> f64 {
    0.5
}
fn d_time_reference_radius() -> Option<f64> {
    Some(14.0)
}
fn d_density() -> Option<f64> {
    Some(0.13)
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            n_targets: d_scaling_n(),
            trials: d_trials(),
            m_max: d_m_max(),
            threshold: d_threshold(),
            density: d_density(),
            time_reference_radius: d_time_reference_radius(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldsConfig {
    #[serde(default)]
    pub params: NonreciprocalParams,
    #[serde(default = "d_bump")]
    pub herder: DensitySpec,
    #[serde(default = "d_initial")]
    pub target: DensitySpec,
}

fn d_bump() -> DensitySpec {
    DensitySpec::VonMises { mu: 0.0, kappa: 8.0 }
}

impl Default for FieldsConfig {
    fn default() -> Self {
        Self {
            params: NonreciprocalParams::default(),
            herder: d_bump(),
            target: d_initial(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub fields: bool,
    #[serde(default)]
    pub trajectory: bool,
    /// Error level used for the success flag and the convergence time.
    #[serde(default = "d_tol")]
    pub tolerance: f64,
    /// Trailing fraction of the run averaged into the steady-state error.
    #[serde(default = "d_tail")]
    pub steady_fraction: f64,
}

fn d_tol() -> f64 {
    1e-3
}
fn d_tail() -> f64 {
    0.2
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            fields: false,
            trajectory: false,
            tolerance: d_tol(),
            steady_fraction: d_tail(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub scenario: Scenario,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub time: TimeConfig,
    #[serde(default)]
    pub kernel: InteractionKernel,
    #[serde(default = "DensitySpec::bimodal")]
    pub target: DensitySpec,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub direct: DirectControlConfig,
    #[serde(default)]
    pub micro: MicroConfig,
    #[serde(default)]
    pub ot: OtConfig,
    #[serde(default)]
    pub leader: LeaderConfig,
    #[serde(default)]
    pub shepherd: ShepherdConfig,
    #[serde(default)]
    pub scaling: ScalingConfig,
    #[serde(default)]
    pub fields: FieldsConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Short names accepted by `--param` and `--set`.
pub const ALIASES: &[(&str, &str)] = &[
    ("K_p", "direct.k_p"),
    ("k_p", "direct.k_p"),
    ("Delta", "direct.sensing_radius"),
    ("sensing_radius", "direct.sensing_radius"),
    ("N", "micro.n_agents"),
    ("n_agents", "micro.n_agents"),
    ("D", "leader.diffusion"),
    ("M", "shepherd.n_herders"),
    ("N_T", "shepherd.n_targets"),
    ("gamma", "shepherd.params.gamma"),
    ("delta", "shepherd.params.delta"),
    ("xi", "shepherd.params.xi"),
    ("lambda", "shepherd.params.lambda"),
    ("arena_radius", "shepherd.trial.arena_radius"),
    ("k_tilde_t", "fields.params.k_tilde_t"),
    ("n_cells", "grid.n_cells"),
    ("dt", "time.dt"),
    ("horizon", "time.horizon"),
    ("seed", "seed"),
];

pub fn resolve_alias(key: &str) -> &str {
    ALIASES.iter().find(|(a, _)| *a == key).map(|(_, p)| *p).unwrap_or(key)
}

/// Parses a scalar the way TOML would, falling back to a bare string.
pub fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `path` (dotted, aliases allowed) inside a TOML document, creating
/// intermediate tables.
pub fn set_path(doc: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let path = resolve_alias(path);
    let parts: Vec<&str> = path.split('.').collect();
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(vec![format!("`{path}`: `{part}` is not a table")])),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_table(parse_table(text)?)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        match table.get("schema_version").and_then(toml::Value::as_integer) {
            Some(v) if v == SCHEMA_VERSION as i64 => {}
            Some(v) => return Err(Error::Config(vec![format!("schema_version {v} is not supported (expected {SCHEMA_VERSION})")])),
            None => return Err(Error::Config(vec!["missing integer `schema_version`".into()])),
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        let mut table = parse_table(&text)?;
        for (k, v) in overrides {
            set_path(&mut table, k, parse_value(v))?;
        }
        Self::from_table(table)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises to TOML")
    }

    pub fn grid(&self) -> Result<RingGrid> {
        RingGrid::new(self.grid.n_cells, self.grid.length)
    }

    /// Fills every scenario-dependent default.
    pub fn resolve(mut self) -> Self {
        let (dt, horizon) = match self.scenario {
            Scenario::Direct | Scenario::DirectFiniteSensing => (0.01, 10.0),
            Scenario::DirectDistributed => (0.01, 10.0),
            Scenario::DirectOt => (0.002, 5.0),
            Scenario::MicroMacro => (0.005, 2.0),
            Scenario::LeaderFollowerFf | Scenario::LeaderFollowerRg => (0.01, 70.0),
            Scenario::Shepherd | Scenario::ShepherdScaling => (self.shepherd.trial.dt, self.shepherd.trial.t_max),
            Scenario::Fields => (1e-3, 10.0),
        };
        let dt = *self.time.dt.get_or_insert(dt);
        self.time.horizon.get_or_insert(horizon);
        let horizon = self.time.horizon.unwrap_or(horizon);
        // the agent KDE is the expensive part of micro-macro runs
        let records = if self.scenario == Scenario::MicroMacro { 20.0 } else { 200.0 };
        self.time.record_every.get_or_insert((horizon / records).max(dt));
        self.time.dump_every.get_or_insert((horizon / 50.0).max(dt));
        if matches!(self.scenario, Scenario::Shepherd | Scenario::ShepherdScaling) {
            self.shepherd.trial.dt = dt;
            self.shepherd.trial.t_max = horizon;
        }
        if self.scenario == Scenario::DirectFiniteSensing && self.direct.sensing_radius.is_none() {
            self.direct.sensing_radius = Some(self.grid.length / 8.0);
        }
        if self.micro.bandwidth.is_none() {
            self.micro.bandwidth = Some(default_bandwidth(self.micro.n_agents));
        }
        if self.scenario == Scenario::DirectDistributed && self.micro.observer == Observer::Centralised {
            self.micro.observer = Observer::Distributed { degree: 4, k_p: 20.0, k_i: 20.0 };
        }
        self
    }

    pub fn dt(&self) -> f64 {
        self.time.dt.expect("resolved configuration")
    }

    pub fn horizon(&self) -> f64 {
        self.time.horizon.expect("resolved configuration")
    }

    /// Static checks on a resolved configuration; returns every violation.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let pos = |name: &str, v: f64, errs: &mut Vec<String>| {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be positive and finite, got {v}"));
            }
        };
        if let Err(e) = self.grid() {
            errs.push(format!("grid: {e}"));
        }
        if self.grid.n_cells < 8 {
            errs.push("grid.n_cells must be at least 8".into());
        }
        pos("time.dt", self.dt(), &mut errs);
        pos("time.horizon", self.horizon(), &mut errs);
        if self.dt() > self.horizon() {
            errs.push("time.dt exceeds time.horizon".into());
        }
        for (name, v) in [("time.record_every", self.time.record_every), ("time.dump_every", self.time.dump_every)] {
            pos(name, v.unwrap_or(f64::NAN), &mut errs);
        }
        if let Err(e) = self.kernel.validate() {
            errs.push(format!("kernel: {e}"));
        }
        self.target.check("target", &mut errs);
        self.initial.density.check("initial.density", &mut errs);
        if !(self.initial.perturbation >= 0.0 && self.initial.perturbation < 1.0) {
            errs.push(format!("initial.perturbation must lie in [0, 1), got {}", self.initial.perturbation));
        }
        if !(0.0 < self.output.steady_fraction && self.output.steady_fraction <= 1.0) {
            errs.push("output.steady_fraction must lie in (0, 1]".into());
        }
        pos("output.tolerance", self.output.tolerance, &mut errs);
        match self.scenario {
            Scenario::Direct | Scenario::DirectFiniteSensing | Scenario::DirectDistributed => {
                if let Err(e) = self.direct.validate(self.grid.length) {
                    errs.push(format!("direct: {e}"));
                }
                if self.scenario == Scenario::DirectFiniteSensing && self.direct.sensing_radius.is_none() {
                    errs.push("direct-finite-sensing needs direct.sensing_radius".into());
                }
                if let Some(d) = &self.direct.disturbance {
                    if !d.amplitude.is_finite() || !d.frequency.is_finite() || !d.phase.is_finite() {
                        errs.push("direct.disturbance must be finite".into());
                    }
                }
                if self.scenario == Scenario::DirectDistributed {
                    self.check_micro(&mut errs);
                    if let Observer::Distributed { degree, k_p, k_i } = &self.micro.observer {
                        if *degree == 0 || *degree >= self.micro.n_agents || (self.micro.n_agents * degree) % 2 == 1 {
                            errs.push(format!("micro.observer.degree {degree} admits no regular graph on {} agents", self.micro.n_agents));
                        }
                        pos("micro.observer.k_p", *k_p, &mut errs);
                        // the graph Laplacian has spectral radius at most 2 * degree
                        let rate = k_p.max(*k_i) * 2.0 * *degree as f64 * self.dt();
                        if rate >= 2.0 {
                            errs.push(format!("consensus step is unstable: max(k_p, k_i) * 2 * degree * dt = {rate:.3} must stay below 2"));
                        }
                        pos("micro.observer.k_i", *k_i, &mut errs);
                    }
                }
            }
            Scenario::DirectOt => {
                if !self.ot.rotation_speed.is_finite() {
                    errs.push("ot.rotation_speed must be finite".into());
                }
                pos("ot.relaxation_time", self.ot.relaxation_time, &mut errs);
                pos("direct.u_max", self.direct.u_max, &mut errs);
                if self.ot.relaxation_time < self.dt() {
                    errs.push("ot.relaxation_time must be at least time.dt".into());
                }
            }
            Scenario::MicroMacro => self.check_micro(&mut errs),
            Scenario::LeaderFollowerFf | Scenario::LeaderFollowerRg => {
                let l = &self.leader;
                if !(l.diffusion >= 0.0 && l.diffusion.is_finite()) {
                    errs.push("leader.diffusion must be nonnegative".into());
                }
                pos("leader.k_p", l.k_p, &mut errs);
                if !(l.mass_factor >= 1.0 && l.mass_factor.is_finite()) {
                    errs.push(format!("leader.mass_factor must be at least 1, got {}", l.mass_factor));
                }
                if !(l.kernel_perturbation > -1.0 && l.kernel_perturbation.is_finite()) {
                    errs.push("leader.kernel_perturbation must exceed -1".into());
                }
                l.follower_target.check("leader.follower_target", &mut errs);
                if self.scenario == Scenario::LeaderFollowerRg {
                    pos("leader.governor.k_alpha", l.governor.k_alpha, &mut errs);
                    if !(l.governor.engage_at >= 0.0 && l.governor.engage_at < self.horizon()) {
                        errs.push("leader.governor.engage_at must lie inside the horizon".into());
                    }
                    if !(l.governor.deadband >= 0.0) {
                        errs.push("leader.governor.deadband must be nonnegative".into());
                    }
                }
            }
            Scenario::Shepherd | Scenario::ShepherdScaling => {
                if let Err(e) = self.shepherd.params.validate() {
                    errs.push(format!("shepherd.params: {e}"));
                }
                let t = &self.shepherd.trial;
                pos("shepherd.trial.goal_radius", t.goal_radius, &mut errs);
                pos("shepherd.trial.arena_radius", t.arena_radius, &mut errs);
                if t.goal_radius >= t.arena_radius {
                    errs.push("shepherd.trial.goal_radius must be below arena_radius".into());
                }
                if !(0.0..=1.0).contains(&t.success_fraction) {
                    errs.push("shepherd.trial.success_fraction must lie in [0, 1]".into());
                }
                if !(t.hold_time >= 0.0) {
                    errs.push("shepherd.trial.hold_time must be nonnegative".into());
                }
                if self.scenario == Scenario::Shepherd {
                    if self.shepherd.n_targets == 0 {
                        errs.push("shepherd.n_targets must be at least 1".into());
                    }
                } else {
                    let s = &self.scaling;
                    if s.n_targets.len() < 2 || s.n_targets.contains(&0) {
                        errs.push("scaling.n_targets needs at least two positive counts".into());
                    }
                    if s.trials == 0 || s.m_max == 0 {
                        errs.push("scaling.trials and scaling.m_max must be positive".into());
                    }
                    if !(0.0 < s.threshold && s.threshold <= 1.0) {
                        errs.push("scaling.threshold must lie in (0, 1]".into());
                    }
                    if let Some(d) = s.density {
                        pos("scaling.density", d, &mut errs);
                    }
                    if let Some(r) = s.time_reference_radius {
                        pos("scaling.time_reference_radius", r, &mut errs);
                    }
                }
            }
            Scenario::Fields => {
                self.fields.herder.check("fields.herder", &mut errs);
                self.fields.target.check("fields.target", &mut errs);
            }
        }
        errs
    }

    /// Resolves and validates, collecting every violation into one error.
    pub fn validated(self) -> Result<Self> {
        let cfg = self.resolve();
        let errs = cfg.violations();
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    fn check_micro(&self, errs: &mut Vec<String>) {
        if self.micro.n_agents == 0 {
            errs.push("micro.n_agents must be positive".into());
        }
        if !(self.micro.noise_std >= 0.0 && self.micro.noise_std.is_finite()) {
            errs.push("micro.noise_std must be nonnegative".into());
        }
        if let Some(b) = self.micro.bandwidth {
            if !(b > 0.0 && b.is_finite()) {
                errs.push(format!("micro.bandwidth must be positive, got {b}"));
            }
        }
    }
}

pub fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| Error::Config(vec![e.message().to_string()]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_resolves() {
        let cfg = ScenarioConfig::from_toml_str("schema_version = 1\nscenario = \"direct\"").unwrap().validated().unwrap();
        assert_eq!(cfg.dt(), 0.01);
        assert_eq!(cfg.grid.n_cells, 256);
        // the resolved form round-trips
        let again = ScenarioConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn version_and_fields_are_checked() {
        assert!(matches!(ScenarioConfig::from_toml_str("scenario = \"direct\""), Err(Error::Config(_))));
        assert!(matches!(ScenarioConfig::from_toml_str("schema_version = 9\nscenario = \"direct\""), Err(Error::Config(_))));
        assert!(matches!(
            ScenarioConfig::from_toml_str("schema_version = 1\nscenario = \"direct\"\nbogus = 1"),
            Err(Error::Config(_))
        ));
        let bad = ScenarioConfig::from_toml_str("schema_version = 1\nscenario = \"direct\"\n[direct]\nk_p = -1\n[time]\ndt = 0").unwrap();
        match bad.validated() {
            Err(Error::Config(v)) => assert!(v.len() >= 2, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_follow_aliases() {
        let mut t: toml::Table = "schema_version = 1\nscenario = \"direct\"".parse().unwrap();
        set_path(&mut t, "K_p", parse_value("4")).unwrap();
        set_path(&mut t, "direct.sensing_radius", parse_value("0.5")).unwrap();
        let cfg = ScenarioConfig::from_table(t).unwrap();
        assert_eq!(cfg.direct.k_p, 4.0);
        assert_eq!(cfg.direct.sensing_radius, Some(0.5));
        assert_eq!(parse_value("abc"), toml::Value::String("abc".into()));
    }

    #[test]
    fn densities_have_unit_mass() {
        let g = RingGrid::circle(64).unwrap();
        for spec in [
            DensitySpec::Uniform,
            DensitySpec::VonMises { mu: 1.0, kappa: 40.0 },
            DensitySpec::bimodal(),
            DensitySpec::Cosine { amplitude: 0.3, wavenumber: 2, phase: 0.0 },
        ] {
            let d = spec.build(g).unwrap();
            assert!((d.mass() - 1.0).abs() < 1e-12);
        }
    }
}
