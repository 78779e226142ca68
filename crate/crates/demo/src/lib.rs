//! Browser bindings for the statctrl toolkit.
//!
//! Every export takes plain numbers or strings and returns a JSON document,
//! which `www/index.html` plots on a canvas.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use statctrl::config::{preset, StrategySet};
use statctrl::control::{solve_control, ControlProblem};
use statctrl::ensemble::run_controlled;
use statctrl::experiment::{control, inversion_context, kernels, prepare, tracking_error};
use statctrl::inversion::{invert, StrategyChoice};
use statctrl::system::{make_triad, triad_tensor, verify_structure, QuadraticSystem, TriadParams};

#[derive(Debug, Serialize)]
pub struct ControlCurves {
    pub t: Vec<f64>,
    pub k: Vec<f64>,
    pub e_star: Vec<f64>,
    /// Control of one mode; every mode carries the same weight here.
    pub control: Vec<f64>,
    pub k_infinity: f64,
}

pub fn control_curves(d: f64, alpha: f64, modes: usize, k_terminal: f64, horizon: f64, e0: f64) -> statctrl::Result<ControlCurves> {
    let p = ControlProblem { d, alpha: vec![alpha; modes.max(1)], k_terminal, horizon, dt: horizon / 400.0, e0, active: None };
    p.validate()?;
    let sol = solve_control(&p)?;
    Ok(ControlCurves {
        t: (0..sol.nodes()).map(|i| i as f64 * sol.dt).collect(),
        control: sol.controls.component(0),
        k: sol.k,
        e_star: sol.e_star,
        k_infinity: p.k_infinity(),
    })
}

#[derive(Debug, Serialize)]
pub struct TriadRun {
    pub strategy: String,
    pub e0: f64,
    pub t_control: Vec<f64>,
    pub e_star: Vec<f64>,
    pub t: Vec<f64>,
    pub uncontrolled: Vec<f64>,
    pub controlled: Vec<f64>,
    pub kappa: Vec<Vec<f64>>,
    pub tracking_controlled: f64,
    pub tracking_uncontrolled: f64,
    pub alternate_equilibrium: bool,
    pub warnings: Vec<String>,
}

/// A scaled-down controlled run of one of the triad presets.
pub fn triad_run(preset_name: &str, strategy: &str, ensemble_size: usize, seed: u64) -> statctrl::Result<TriadRun> {
    if !preset_name.starts_with("triad") {
        return Err(statctrl::Error::Config(format!("{preset_name:?} is not a triad preset")));
    }
    let choice: StrategyChoice = strategy.parse()?;
    let mut cfg = preset(preset_name)?;
    cfg.ensemble_size = ensemble_size.max(2);
    cfg.seed = seed;
    cfg.strategy = choice.to_string();
    cfg.kernels.t_sample = 300.0;
    cfg.kernels.start_stride = 10;

    let prepared = prepare(&cfg)?;
    let which = StrategySet::One(choice.clone()).kernel_selection().expect("a strategy needs kernels");
    let kern = kernels(&cfg, &prepared.system, which)?;
    let ctrl = control(&cfg, &prepared)?;
    let ctx = inversion_context(&cfg, &prepared, &kern);
    let sol = invert(&ctrl, &choice, &ctx)?;

    let p = &cfg.protocol;
    let base = run_controlled(&prepared.system, &prepared.ensemble, None, p.horizon, p.dt, p.dt_out, prepared.e_eq)?;
    let run = run_controlled(&prepared.system, &prepared.ensemble, Some(&sol.kappa), p.horizon, p.dt, p.dt_out, prepared.e_eq)?;
    Ok(TriadRun {
        strategy: choice.to_string(),
        e0: prepared.e0,
        t_control: (0..ctrl.nodes()).map(|i| i as f64 * ctrl.dt).collect(),
        e_star: ctrl.e_star.clone(),
        t: run.times.clone(),
        tracking_controlled: tracking_error(&run, &ctrl),
        tracking_uncontrolled: tracking_error(&base, &ctrl),
        uncontrolled: base.energy_pert,
        controlled: run.energy_pert,
        kappa: sol.kappa.rows,
        alternate_equilibrium: sol.diagnostics.alternate_equilibrium,
        warnings: sol.diagnostics.warnings,
    })
}

#[derive(Debug, Serialize)]
pub struct StructureCheck {
    pub passed: bool,
    pub checks: Vec<(String, bool, String)>,
}

/// Structural checks of a triad with couplings `b` and rotation rates `l`.
pub fn triad_structure(b: [f64; 3], l: [f64; 3], samples: usize) -> statctrl::Result<StructureCheck> {
    let linear = make_triad(&TriadParams { d: [1.0; 3], l, b: [0.0; 3], f: [0.0; 3], sigma: [0.0; 3] })?;
    let sys = QuadraticSystem::new(
        linear.skew().clone(),
        linear.damping().clone(),
        triad_tensor(b),
        vec![0.0; 3],
        vec![0.0; 3],
    )?;
    let report = verify_structure(&sys, samples, 1e-12);
    Ok(StructureCheck {
        passed: report.passed(),
        checks: report.checks.iter().map(|c| (c.name.clone(), c.passed, c.detail.clone())).collect(),
    })
}

fn to_js<T: Serialize>(result: statctrl::Result<T>) -> Result<String, JsError> {
    let value = result.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = controlCurves)]
pub fn control_curves_js(d: f64, alpha: f64, modes: usize, k_terminal: f64, horizon: f64, e0: f64) -> Result<String, JsError> {
    to_js(control_curves(d, alpha, modes, k_terminal, horizon, e0))
}

#[wasm_bindgen(js_name = triadRun)]
pub fn triad_run_js(preset_name: &str, strategy: &str, ensemble_size: usize, seed: u64) -> Result<String, JsError> {
    to_js(triad_run(preset_name, strategy, ensemble_size, seed))
}

#[wasm_bindgen(js_name = triadStructure)]
pub fn triad_structure_js(b1: f64, b2: f64, b3: f64, l1: f64, l2: f64, l3: f64) -> Result<String, JsError> {
    to_js(triad_structure([b1, b2, b3], [l1, l2, l3], 20_000))
}
