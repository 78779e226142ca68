//! End-to-end pipeline: spin-up, perturbation, kernels, control, inversion,
//! controlled and uncontrolled ensemble runs, and the output directory.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{validate_config, ExperimentConfig, StrategySet};
use crate::control::{equilibrium_energy, solve_control, ControlProblem, ControlSolution};
use crate::ensemble::{compute_statistics, empirical_control, prepare_initial_state, run_controlled, Ensemble, EquilibriumStats, MomentSeries};
use crate::error::{Error, Result};
use crate::grid::{sample_or_zero, VectorSeries};
use crate::inversion::{invert, ForcingSolution, InversionContext, StrategyChoice};
use crate::response::{circulant_average, estimate_kernels, KernelSelection, ResponseKernels};
use crate::system::QuadraticSystem;

pub const FAILED_MARKER: &str = "FAILED";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EQUILIBRIUM_FILE: &str = "equilibrium.json";
pub const CONTROL_FILE: &str = "control.csv";
pub const OPTIMAL_ENERGY_FILE: &str = "optimal_energy.csv";
pub const UNCONTROLLED_SERIES_FILE: &str = "series_uncontrolled.csv";
pub const KERNEL_DIR: &str = "kernels";

pub fn forcing_file(strategy: &str) -> String {
    format!("forcing_{strategy}.csv")
}

pub fn forcing_diagnostics_file(strategy: &str) -> String {
    format!("forcing_{strategy}.json")
}

pub fn series_file(strategy: &str) -> String {
    format!("series_{strategy}.csv")
}

pub fn empirical_control_file(strategy: &str) -> String {
    format!("empirical_control_{strategy}.csv")
}

/// Equilibrium statistics and the perturbed ensemble at `t = 0`.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub system: QuadraticSystem,
    pub equilibrium: EquilibriumStats,
    /// Equilibrium energy used as the reference for `E'`.
    pub e_eq: f64,
    pub ensemble: Ensemble,
    /// Measured `E'(0)`.
    pub e0: f64,
    /// Measured mean perturbation at `t = 0`.
    pub du0: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquilibriumRecord {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub energy: f64,
    pub energy_formula: Option<f64>,
    pub samples: usize,
    pub e0: f64,
    pub du0: Vec<f64>,
}

impl Prepared {
    pub fn record(&self) -> EquilibriumRecord {
        let formula = self.system.uniform_damping().and_then(|d| {
            equilibrium_energy(&self.equilibrium.mean, self.system.forcing_eq(), d, self.system.noise()).ok()
        });
        EquilibriumRecord {
            mean: self.equilibrium.mean.clone(),
            cov: self.equilibrium.cov.clone(),
            energy: self.e_eq,
            energy_formula: formula,
            samples: self.equilibrium.samples,
            e0: self.e0,
            du0: self.du0.clone(),
        }
    }
}

fn symmetrize(eq: &mut EquilibriumStats, du0: &mut [f64]) {
    let n = eq.mean.len();
    let avg = eq.mean.iter().sum::<f64>() / n as f64;
    eq.mean.iter_mut().for_each(|x| *x = avg);
    let cov = circulant_average(&eq.cov_matrix());
    eq.cov = (0..n).map(|i| (0..n).map(|j| cov[(i, j)]).collect()).collect();
    let avg = du0.iter().sum::<f64>() / n as f64;
    du0.iter_mut().for_each(|x| *x = avg);
}

/// Spin-up and perturbation phase.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let system = cfg.system.build()?;
    let p = &cfg.protocol;
    let (mut equilibrium, ensemble) =
        prepare_initial_state(&system, cfg.ensemble_size, &cfg.delta_fp, p.t_spin, p.t_pert, p.dt, cfg.seed)?;
    let e_eq = equilibrium.energy;
    let m0 = compute_statistics(&ensemble, e_eq)?;
    let mut du0: Vec<f64> = m0.mean.iter().zip(&equilibrium.mean).map(|(a, b)| a - b).collect();
    if cfg.translation_invariant() {
        symmetrize(&mut equilibrium, &mut du0);
    }
    Ok(Prepared { system, equilibrium, e_eq, ensemble, e0: m0.energy_pert, du0 })
}

/// Estimates (or loads) the kernels the configured strategies need.
pub fn kernels(cfg: &ExperimentConfig, system: &QuadraticSystem, which: KernelSelection) -> Result<ResponseKernels> {
    match &cfg.kernels_from {
        Some(dir) => {
            let k = ResponseKernels::read_dir(dir)?;
            if k.meta.system_hash != system.fingerprint() {
                return Err(Error::Config(format!(
                    "kernels in {} were estimated for a different system",
                    dir.display()
                )));
            }
            Ok(k)
        }
        None => estimate_kernels(system, &cfg.kernel_options(which)),
    }
}

pub fn control_problem(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<ControlProblem> {
    let d = prepared.system.require_uniform_damping()?;
    Ok(ControlProblem {
        d,
        alpha: cfg.control.alpha.clone(),
        k_terminal: cfg.control.k_terminal,
        horizon: cfg.protocol.horizon,
        dt: cfg.protocol.control_dt,
        e0: prepared.e0,
        active: cfg.active_mask(prepared.system.dim()),
    })
}

pub fn control(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<ControlSolution> {
    solve_control(&control_problem(cfg, prepared)?)
}

pub fn inversion_context<'a>(
    cfg: &ExperimentConfig,
    prepared: &'a Prepared,
    kernels: &'a ResponseKernels,
) -> InversionContext<'a> {
    let mut ctx = InversionContext::new(
        &prepared.system,
        prepared.equilibrium.mean.clone(),
        prepared.equilibrium.cov_matrix(),
    );
    ctx.delta_fp = cfg.delta_fp.clone();
    ctx.du0_measured = prepared.du0.clone();
    ctx.mean_kernel = kernels.mean.as_ref();
    ctx.cov_kernel = kernels.cov.as_ref();
    ctx.active = cfg.active_mask(prepared.system.dim());
    ctx.closure_equilibrium_correction = cfg.closure_equilibrium_correction;
    ctx
}

/// Per-run comparison against the optimal energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub e_pert_initial: f64,
    pub e_pert_final: f64,
    /// `int_0^T |E'(t) - E*(t)| dt` on the output grid.
    pub tracking_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alternate_equilibrium: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub e_eq: f64,
    pub e0: f64,
    pub runs: BTreeMap<String, RunMetrics>,
}

pub fn tracking_error(series: &MomentSeries, control: &ControlSolution) -> f64 {
    let gap: Vec<f64> = series
        .times
        .iter()
        .zip(&series.energy_pert)
        .map(|(&t, &e)| (e - sample_or_zero(&control.e_star, control.dt, t)).abs())
        .collect();
    let mut total = 0.0;
    for i in 1..gap.len() {
        total += 0.5 * (series.times[i] - series.times[i - 1]) * (gap[i] + gap[i - 1]);
    }
    total
}

pub fn metrics(series: &MomentSeries, control: &ControlSolution, forcing: Option<&ForcingSolution>) -> RunMetrics {
    RunMetrics {
        e_pert_initial: series.energy_pert[0],
        e_pert_final: *series.energy_pert.last().expect("series is non-empty"),
        tracking_error: tracking_error(series, control),
        alternate_equilibrium: forcing.map(|f| f.diagnostics.alternate_equilibrium),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

pub fn write_forcing(dir: &Path, sol: &ForcingSolution) -> Result<()> {
    let name = sol.strategy.to_string();
    sol.write_csv(create(&dir.join(forcing_file(&name)))?)?;
    let mut w = create(&dir.join(forcing_diagnostics_file(&name)))?;
    sol.write_diagnostics(&mut w)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

fn write_optimal_energy(path: &Path, control: &ControlSolution) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["t", "E_star"])?;
    for (i, e) in control.e_star.iter().enumerate() {
        w.write_record([format!("{:?}", control.time(i)), format!("{e:?}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Records stage timings and the files written, then produces the manifest.
struct Tracker {
    dir: PathBuf,
    wall: BTreeMap<String, f64>,
}

impl Tracker {
    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(name));
        *self.wall.entry(name.to_string()).or_insert(0.0) += start.elapsed().as_secs_f64();
        if let Err(e) = &out {
            let _ = fs::write(self.dir.join(FAILED_MARKER), format!("{e}\n"));
        }
        out
    }
}

fn hash_files(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(dir).expect("walked under dir").to_string_lossy().replace('\\', "/");
            if rel == MANIFEST_FILE {
                continue;
            }
            let digest = Sha256::digest(fs::read(&path)?);
            out.insert(rel, digest.iter().map(|b| format!("{b:02x}")).collect());
        }
    }
    Ok(out)
}

fn write_manifest(dir: &Path, cfg: &ExperimentConfig, command: &str, wall: &BTreeMap<String, f64>) -> Result<()> {
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": cfg.seed,
        "config": cfg,
        "files": hash_files(dir)?,
        "wall_times": wall,
    });
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

fn start(cfg: &ExperimentConfig, out: &Path) -> Result<Tracker> {
    let report = validate_config(cfg);
    if !report.passed() {
        let reasons: Vec<String> = report.failures().map(|c| format!("{}: {}", c.name, c.detail)).collect();
        return Err(Error::Config(reasons.join("; ")));
    }
    fs::create_dir_all(out)?;
    let marker = out.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(marker)?;
    }
    Ok(Tracker { dir: out.to_path_buf(), wall: BTreeMap::new() })
}

/// Estimates the kernels needed by the configured strategies into `out`.
pub fn run_kernels(cfg: &ExperimentConfig, out: &Path) -> Result<ResponseKernels> {
    let mut t = start(cfg, out)?;
    let sys = t.stage("system", || cfg.system.build())?;
    let which = cfg.strategy_set()?.kernel_selection().unwrap_or(KernelSelection::Both);
    let k = t.stage("kernels", || kernels(cfg, &sys, which))?;
    t.stage("write", || k.write_dir(out))?;
    write_manifest(out, cfg, "kernels", &t.wall)?;
    Ok(k)
}

/// Prepares the perturbed ensemble and solves the optimal control into `out`.
pub fn run_control(cfg: &ExperimentConfig, out: &Path) -> Result<ControlSolution> {
    let mut t = start(cfg, out)?;
    let prepared = t.stage("ensemble preparation", || prepare(cfg))?;
    let sol = t.stage("control", || control(cfg, &prepared))?;
    t.stage("write", || {
        write_json(&out.join(EQUILIBRIUM_FILE), &prepared.record())?;
        sol.write_csv(create(&out.join(CONTROL_FILE))?)?;
        write_optimal_energy(&out.join(OPTIMAL_ENERGY_FILE), &sol)
    })?;
    write_manifest(out, cfg, "control", &t.wall)?;
    Ok(sol)
}

/// Computes the forcing perturbation for one strategy into `out`.
pub fn run_inversion(cfg: &ExperimentConfig, strategy: &StrategyChoice, out: &Path) -> Result<ForcingSolution> {
    let mut t = start(cfg, out)?;
    let prepared = t.stage("ensemble preparation", || prepare(cfg))?;
    let which = StrategySet::One(strategy.clone()).kernel_selection().expect("a strategy needs kernels");
    let k = t.stage("kernels", || kernels(cfg, &prepared.system, which))?;
    let control = t.stage("control", || control(cfg, &prepared))?;
    let sol = t.stage("inversion", || invert(&control, strategy, &inversion_context(cfg, &prepared, &k)))?;
    t.stage("write", || {
        write_json(&out.join(EQUILIBRIUM_FILE), &prepared.record())?;
        if cfg.kernels_from.is_none() {
            k.write_dir(&out.join(KERNEL_DIR))?;
        }
        control.write_csv(create(&out.join(CONTROL_FILE))?)?;
        write_forcing(out, &sol)
    })?;
    write_manifest(out, cfg, "invert", &t.wall)?;
    Ok(sol)
}

/// Runs the full pipeline and writes every artifact under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let mut t = start(cfg, out)?;
    let set = cfg.strategy_set()?;
    let prepared = t.stage("ensemble preparation", || prepare(cfg))?;
    t.stage("write", || write_json(&out.join(EQUILIBRIUM_FILE), &prepared.record()))?;
    let p = &cfg.protocol;
    let e_eq = prepared.e_eq;

    let kern = match set.kernel_selection() {
        Some(which) => {
            let k = t.stage("kernels", || kernels(cfg, &prepared.system, which))?;
            if cfg.kernels_from.is_none() {
                t.stage("write", || k.write_dir(&out.join(KERNEL_DIR)))?;
            }
            Some(k)
        }
        None => None,
    };

    let ctrl = if matches!(set, StrategySet::None) && prepared.system.uniform_damping().is_none() {
        None
    } else {
        let c = t.stage("control", || control(cfg, &prepared))?;
        t.stage("write", || {
            c.write_csv(create(&out.join(CONTROL_FILE))?)?;
            write_optimal_energy(&out.join(OPTIMAL_ENERGY_FILE), &c)
        })?;
        Some(c)
    };

    let mut runs = BTreeMap::new();
    let baseline = t.stage("uncontrolled run", || {
        run_controlled(&prepared.system, &prepared.ensemble, None, p.horizon, p.dt, p.dt_out, e_eq)
    })?;
    t.stage("write", || baseline.write_csv(create(&out.join(UNCONTROLLED_SERIES_FILE))?))?;
    if let Some(c) = &ctrl {
        runs.insert("uncontrolled".to_string(), metrics(&baseline, c, None));
    }

    if let (Some(k), Some(c)) = (&kern, &ctrl) {
        let ctx = inversion_context(cfg, &prepared, k);
        for strategy in set.strategies() {
            let name = strategy.to_string();
            let sol = t.stage("inversion", || invert(c, &strategy, &ctx))?;
            t.stage("write", || write_forcing(out, &sol))?;
            let series = t.stage("controlled run", || {
                run_controlled(&prepared.system, &prepared.ensemble, Some(&sol.kappa), p.horizon, p.dt, p.dt_out, e_eq)
            })?;
            t.stage("write", || {
                series.write_csv(create(&out.join(series_file(&name)))?)?;
                let emp = empirical_control(&series, &prepared.equilibrium.mean, prepared.system.forcing_eq(), &sol.kappa)?;
                write_empirical(&out.join(empirical_control_file(&name)), &series, &emp)
            })?;
            runs.insert(name, metrics(&series, c, Some(&sol)));
        }
    }

    let summary = RunSummary { e_eq, e0: prepared.e0, runs };
    t.stage("write", || write_json(&out.join(SUMMARY_FILE), &summary))?;
    write_manifest(out, cfg, "run", &t.wall)?;
    Ok(summary)
}

fn write_empirical(path: &Path, series: &MomentSeries, values: &[Vec<f64>]) -> Result<()> {
    let n = series.dim();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|k| format!("C_{k}")));
    let rows = series.times.iter().zip(values).map(|(&t, v)| {
        let mut row = vec![t];
        row.extend_from_slice(v);
        row
    });
    crate::csvio::write_table(create(path)?, &header, &[], rows)
}

/// Reads a forcing CSV written by [`write_forcing`].
pub fn read_forcing(path: &Path) -> Result<(VectorSeries, VectorSeries)> {
    ForcingSolution::read_series(File::open(path)?)
}
