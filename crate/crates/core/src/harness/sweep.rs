//! Parameter sweeps: the Cartesian product of the axes, times a block of
//! consecutive seeds. Every configuration is validated before anything runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::config::{parse_value, resolve_alias, set_path, ScenarioConfig};
use super::output::{run_dir_name, stage_dir, write_run_files};
use super::run::{run_scenario, validate_config, RunRecord};
use crate::error::{Error, Result};
use crate::metrics::linear_fit;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepAxis {
    /// Dotted configuration path (aliases are resolved on parse).
    pub key: String,
    pub values: Vec<String>,
}

impl SweepAxis {
    /// Parses `key=v1,v2,...`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(vec![format!("sweep parameter `{spec}` is not of the form key=v1,v2,...")]))?;
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if key.trim().is_empty() || values.is_empty() {
            return Err(Error::Config(vec![format!("sweep parameter `{spec}` needs a key and at least one value")]));
        }
        Ok(Self {
            key: resolve_alias(key.trim()).to_string(),
            values,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub params: Vec<(String, String)>,
    pub seed: u64,
    /// `ok` or `diverged`.
    pub status: &'static str,
    pub steady_state_error: Option<f64>,
    pub final_error: Option<f64>,
    pub convergence_time: Option<f64>,
    pub success: bool,
    pub run_dir: Option<String>,
    pub divergence: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub summary: Value,
    pub dir: Option<PathBuf>,
}

impl SweepOutcome {
    pub fn any_diverged(&self) -> bool {
        self.rows.iter().any(|r| r.status == "diverged")
    }
}

fn combinations(axes: &[SweepAxis]) -> Vec<Vec<(String, String)>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push((axis.key.clone(), v.clone()));
                    p
                })
            })
            .collect()
    })
}

fn mean_std(x: &[f64]) -> (Option<f64>, Option<f64>) {
    if x.is_empty() {
        return (None, None);
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let s = if x.len() > 1 { Some((x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()) } else { None };
    (Some(m), s)
}

/// Builds every configuration of the sweep; fails with all violations at once.
pub fn expand(base: &toml::Table, axes: &[SweepAxis], seeds: usize) -> Result<Vec<(Vec<(String, String)>, ScenarioConfig)>> {
    if seeds == 0 {
        return Err(Error::Config(vec!["--seeds must be at least 1".into()]));
    }
    ScenarioConfig::from_table(base.clone())?;
    let mut out = Vec::new();
    let mut errs = Vec::new();
    for combo in combinations(axes) {
        for k in 0..seeds as u64 {
            let mut table = base.clone();
            let built = combo
                .iter()
                .try_for_each(|(key, v)| set_path(&mut table, key, parse_value(v)))
                .and_then(|_| {
                    let seed = table.get("seed").and_then(toml::Value::as_integer).unwrap_or(0);
                    set_path(&mut table, "seed", toml::Value::Integer(seed + k as i64))
                })
                .and_then(|_| ScenarioConfig::from_table(table))
                .and_then(validate_config);
            match built {
                Ok(cfg) => out.push((combo.clone(), cfg)),
                Err(Error::Config(v)) => {
                    let label: Vec<String> = combo.iter().map(|(k, v)| format!("{k}={v}")).collect();
                    errs.extend(v.into_iter().map(|e| format!("[{}] {e}", label.join(" "))));
                }
                Err(e) => return Err(e),
            }
        }
    }
    if errs.is_empty() {
        Ok(out)
    } else {
        errs.dedup();
        Err(Error::Config(errs))
    }
}

/// Runs the sweep in parallel (results keep the expansion order) and, when
/// `out` is given, writes `<out>/sweep.csv`, `<out>/sweep_summary.json` and one
/// run directory per configuration under `<out>/runs/`.
pub fn run_sweep(base: &toml::Table, axes: &[SweepAxis], seeds: usize, out: Option<&Path>) -> Result<SweepOutcome> {
    let jobs = expand(base, axes, seeds)?;
    let results: Vec<Result<RunRecord>> = jobs.par_iter().map(|(_, cfg)| run_scenario(cfg)).collect();
    let mut rows = Vec::with_capacity(jobs.len());
    let mut records = Vec::new();
    for ((params, cfg), res) in jobs.iter().zip(results) {
        match res {
            Ok(rec) => {
                rows.push(SweepRow {
                    params: params.clone(),
                    seed: cfg.seed,
                    status: "ok",
                    steady_state_error: rec.summary.steady_state_error,
                    final_error: rec.summary.final_error,
                    convergence_time: rec.summary.convergence_time,
                    success: rec.summary.success,
                    run_dir: out.map(|_| format!("runs/{}", run_dir_name(cfg))),
                    divergence: None,
                });
                records.push((cfg, rec));
            }
            Err(Error::Divergence { t, reason }) => rows.push(SweepRow {
                params: params.clone(),
                seed: cfg.seed,
                status: "diverged",
                steady_state_error: None,
                final_error: None,
                convergence_time: None,
                success: false,
                run_dir: None,
                divergence: Some(format!("t = {t}: {reason}")),
            }),
            Err(e) => return Err(e),
        }
    }
    let summary = summarise(axes, &rows, jobs.first().map(|(_, c)| c));
    let dir = match out {
        None => None,
        Some(dest) => Some(stage_dir(dest, |d| {
            let runs = d.join("runs");
            std::fs::create_dir_all(&runs)?;
            for (cfg, rec) in &records {
                let rd = runs.join(run_dir_name(cfg));
                std::fs::create_dir_all(&rd)?;
                write_run_files(&rd, cfg, rec)?;
            }
            std::fs::write(d.join("sweep.csv"), sweep_csv(axes, &rows)?)?;
            let mut s = serde_json::to_vec_pretty(&summary)?;
            s.push(b'\n');
            std::fs::write(d.join("sweep_summary.json"), s)?;
            Ok(())
        })?),
    };
    Ok(SweepOutcome { rows, summary, dir })
}

/// Default directory name of a sweep: scenario plus a hash of base and axes.
pub fn sweep_dir_name(base: &toml::Table, axes: &[SweepAxis], seeds: usize) -> String {
    let mut h = Sha256::new();
    h.update(toml::to_string(base).unwrap_or_default());
    for a in axes {
        h.update(format!("{}={};", a.key, a.values.join(",")));
    }
    h.update(seeds.to_le_bytes());
    let scenario = base.get("scenario").and_then(toml::Value::as_str).unwrap_or("sweep");
    format!("sweep-{scenario}-{}", &hex::encode(h.finalize())[..8])
}

fn sweep_csv(axes: &[SweepAxis], rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = axes.iter().map(|a| a.key.clone()).collect();
    header.extend(["seed", "status", "steady_state_error", "final_error", "convergence_time", "success", "run_dir"].map(String::from));
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let mut rec: Vec<String> = r.params.iter().map(|(_, v)| v.clone()).collect();
        rec.extend([
            r.seed.to_string(),
            r.status.to_string(),
            opt(r.steady_state_error),
            opt(r.final_error),
            opt(r.convergence_time),
            r.success.to_string(),
            r.run_dir.clone().unwrap_or_default(),
        ]);
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn summarise(axes: &[SweepAxis], rows: &[SweepRow], first: Option<&ScenarioConfig>) -> Value {
    let mut groups: Vec<(Vec<(String, String)>, Vec<&SweepRow>)> = Vec::new();
    for r in rows {
        match groups.iter_mut().find(|(p, _)| *p == r.params) {
            Some((_, v)) => v.push(r),
            None => groups.push((r.params.clone(), vec![r])),
        }
    }
    let mut points = Vec::new();
    let group_values: Vec<Value> = groups
        .iter()
        .map(|(params, rs)| {
            let ok: Vec<&&SweepRow> = rs.iter().filter(|r| r.status == "ok").collect();
            let steady: Vec<f64> = ok.iter().filter_map(|r| r.steady_state_error).collect();
            let fin: Vec<f64> = ok.iter().filter_map(|r| r.final_error).collect();
            let (sm, ss) = mean_std(&steady);
            let (fm, fs) = mean_std(&fin);
            if let (Some(m), [(_, v)]) = (sm, params.as_slice()) {
                if let Ok(x) = v.parse::<f64>() {
                    points.push((x, m));
                }
            }
            json!({
                "params": params.iter().cloned().collect::<BTreeMap<String, String>>(),
                "runs": rs.len(),
                "diverged": rs.len() - ok.len(),
                "success_rate": ok.iter().filter(|r| r.success).count() as f64 / rs.len() as f64,
                "steady_state_error_mean": sm,
                "steady_state_error_std": ss,
                "final_error_mean": fm,
                "final_error_std": fs,
            })
        })
        .collect();
    let mut summary = json!({
        "scenario": first.map(|c| c.scenario.name()),
        "axes": axes.iter().map(|a| json!({"key": a.key, "values": a.values})).collect::<Vec<_>>(),
        "groups": group_values,
    });
    if axes.len() == 1 && points.len() >= 2 && points.iter().all(|(x, y)| *x > 0.0 && *y > 0.0) {
        let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
        let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
        if let Some(fit) = linear_fit(&lx, &ly) {
            summary["log_log_fit"] = json!({
                "x": axes[0].key,
                "y": "steady_state_error_mean",
                "slope": fit.slope,
                "slope_ci95": [fit.slope_ci95.0, fit.slope_ci95.1],
                "intercept": fit.intercept,
                "r_squared": fit.r_squared,
            });
        }
    }
    summary
}
