//! Experiment configuration, presets and validation.
//!
//! A configuration is one JSON document. When it names a `preset`, the
//! preset's full document is used as the base and the user's fields are
//! merged on top (objects recursively, everything else replaced).

use std::path::PathBuf;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::grid::steps_in;
use crate::inversion::StrategyChoice;
use crate::response::{CovSupport, KernelOptions, KernelSelection};
use crate::system::{make_lorenz96, make_triad, BilinearTerm, QuadraticSystem, TriadParams, ValidationReport};

pub const PRESETS: [&str; 4] = ["triad-regime1", "triad-regime2", "lorenz96-5to8", "triad-alt-eq"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SystemSpec {
    Triad {
        d: [f64; 3],
        l: [f64; 3],
        b: [f64; 3],
        f: [f64; 3],
        sigma: [f64; 3],
    },
    Lorenz96 {
        dim: usize,
        forcing: f64,
        #[serde(default)]
        noise: f64,
    },
    General {
        skew: Vec<Vec<f64>>,
        damping: Vec<Vec<f64>>,
        bilinear: Vec<BilinearTerm>,
        forcing_eq: Vec<f64>,
        noise: Vec<f64>,
    },
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Config(format!("{what} must be a square matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl SystemSpec {
    pub fn build(&self) -> Result<QuadraticSystem> {
        match self {
            SystemSpec::Triad { d, l, b, f, sigma } => {
                make_triad(&TriadParams { d: *d, l: *l, b: *b, f: *f, sigma: *sigma })
            }
            SystemSpec::Lorenz96 { dim, forcing, noise } => {
                let sys = make_lorenz96(*dim, *forcing)?;
                if *noise == 0.0 {
                    Ok(sys)
                } else {
                    QuadraticSystem::new(
                        sys.skew().clone(),
                        sys.damping().clone(),
                        sys.bilinear().to_vec(),
                        sys.forcing_eq().to_vec(),
                        vec![*noise; *dim],
                    )
                }
            }
            SystemSpec::General { skew, damping, bilinear, forcing_eq, noise } => QuadraticSystem::new(
                matrix(skew, "skew")?,
                matrix(damping, "damping")?,
                bilinear.clone(),
                forcing_eq.clone(),
                noise.clone(),
            ),
        }
    }

    pub fn is_translation_invariant(&self) -> bool {
        matches!(self, SystemSpec::Lorenz96 { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    /// Spin-up under the equilibrium forcing.
    pub t_spin: f64,
    /// Time spent under the perturbed forcing before control starts.
    pub t_pert: f64,
    /// Control horizon `T`.
    pub horizon: f64,
    /// Ensemble integration step.
    pub dt: f64,
    /// Output interval of the moment series.
    pub dt_out: f64,
    /// Step of the control and inversion grid.
    pub control_dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpec {
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub k_terminal: f64,
    /// 1-based indices of the controlled modes; all modes when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_modes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub system: SystemSpec,
    pub delta_fp: Vec<f64>,
    pub protocol: Protocol,
    pub control: ControlSpec,
    /// `all`, `none`, or one of the four strategy names.
    #[serde(default = "default_strategy")]
    pub strategy: String,
    #[serde(default)]
    pub kernels: KernelOptions,
    /// Directory of previously estimated kernels to load instead of estimating.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernels_from: Option<PathBuf>,
    #[serde(default = "default_ensemble_size")]
    pub ensemble_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub closure_equilibrium_correction: bool,
}

fn default_strategy() -> String {
    "all".into()
}

fn default_ensemble_size() -> usize {
    10_000
}

fn default_true() -> bool {
    true
}

/// Full configuration document of a preset.
pub fn preset_document(name: &str) -> Result<Value> {
    let triad_kernels = json!({
        "t_sample": 2000.0, "t_spin": 20.0, "dt": 1e-3, "dtau": 0.01, "tau_max": 5.0,
        "start_stride": 5, "batches": 16, "cov_support": "full"
    });
    let triad_protocol = json!({
        "t_spin": 20.0, "t_pert": 10.0, "horizon": 4.0, "dt": 1e-3, "dt_out": 0.01, "control_dt": 0.01
    });
    let doc = match name {
        "triad-regime1" => json!({
            "system": { "kind": "triad", "d": [1.0, 1.0, 1.0], "l": [3.0, 2.0, -1.0],
                        "b": [1.0, -0.6, -0.4], "f": [1.0, 1.0, -1.0], "sigma": [0.5, 0.5, 0.5] },
            "delta_fp": [0.0, 0.0, -4.0],
            "protocol": triad_protocol,
            "control": { "alpha": [1.0, 1.0, 1.0], "k_terminal": 0.0 },
            "kernels": triad_kernels,
        }),
        "triad-regime2" => json!({
            "system": { "kind": "triad", "d": [1.0, 1.0, 1.0], "l": [0.03, 0.02, -0.01],
                        "b": [2.0, -1.0, -1.0], "f": [2.0, 2.0, 2.0], "sigma": [2.0, 1.0, 1.0] },
            "delta_fp": [2.0, 2.0, 2.0],
            "protocol": triad_protocol,
            "control": { "alpha": [1.0, 1.0, 1.0], "k_terminal": 0.0 },
            "kernels": triad_kernels,
        }),
        "triad-alt-eq" => json!({
            "system": { "kind": "triad", "d": [1.0, 1.0, 1.0], "l": [0.0, 0.0, 0.0],
                        "b": [1.0, -0.6, -0.4], "f": [0.5, 0.5, 0.5], "sigma": [0.5, 0.5, 0.5] },
            "delta_fp": [0.0, 0.0, -1.5],
            "protocol": triad_protocol,
            "control": { "alpha": [1.0, 1.0, 1.0], "k_terminal": 0.0 },
            "kernels": triad_kernels,
        }),
        "lorenz96-5to8" => json!({
            "system": { "kind": "lorenz96", "dim": 40, "forcing": 5.0 },
            "delta_fp": vec![3.0; 40],
            "protocol": { "t_spin": 50.0, "t_pert": 20.0, "horizon": 10.0, "dt": 5e-3,
                          "dt_out": 0.05, "control_dt": 0.05 },
            "control": { "alpha": vec![1.0; 40], "k_terminal": 0.0 },
            "kernels": { "t_sample": 2000.0, "t_spin": 50.0, "dt": 5e-3, "dtau": 0.05, "tau_max": 20.0,
                         "start_stride": 20, "batches": 16, "cov_support": "tensor",
                         "translation_invariant": true },
        }),
        _ => {
            return Err(Error::Config(format!(
                "unknown preset {name:?} (known: {})",
                PRESETS.join(", ")
            )))
        }
    };
    let mut doc = doc;
    doc["preset"] = json!(name);
    Ok(doc)
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    Ok(serde_json::from_value(preset_document(name)?)?)
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses a configuration document, resolving a `preset` base if present.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let user: Value = serde_json::from_str(text)
        .map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
    let doc = match user.get("preset").and_then(Value::as_str) {
        Some(name) => {
            let mut base = preset_document(name)?;
            merge(&mut base, user);
            base
        }
        None => user,
    };
    serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_config(path: &std::path::Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

/// Parsed `strategy` field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StrategySet {
    None,
    All,
    One(StrategyChoice),
}

impl StrategySet {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "all" => Ok(Self::All),
            other => Ok(Self::One(other.parse()?)),
        }
    }

    pub fn strategies(&self) -> Vec<StrategyChoice> {
        match self {
            Self::None => vec![],
            Self::All => StrategyChoice::all(),
            Self::One(s) => vec![s.clone()],
        }
    }

    /// Kernels the strategies need, if any.
    pub fn kernel_selection(&self) -> Option<KernelSelection> {
        use crate::inversion::MeanModel;
        let list = self.strategies();
        let mean = list.iter().any(|s| s.mean_model == MeanModel::LinearResponse);
        let cov = list.iter().any(|s| s.mean_model == MeanModel::Closure);
        match (mean, cov) {
            (true, true) => Some(KernelSelection::Both),
            (true, false) => Some(KernelSelection::Mean),
            (false, true) => Some(KernelSelection::Covariance),
            (false, false) => None,
        }
    }
}

impl ExperimentConfig {
    pub fn strategy_set(&self) -> Result<StrategySet> {
        StrategySet::parse(&self.strategy)
    }

    pub fn translation_invariant(&self) -> bool {
        self.kernels.translation_invariant
    }

    /// Controlled-mode mask from the 1-based `active_modes` list.
    pub fn active_mask(&self, dim: usize) -> Option<Vec<bool>> {
        self.control.active_modes.as_ref().map(|list| {
            let mut mask = vec![false; dim];
            for &k in list {
                if (1..=dim).contains(&k) {
                    mask[k - 1] = true;
                }
            }
            mask
        })
    }

    /// Kernel options with the run seed and the requested selection applied.
    pub fn kernel_options(&self, which: KernelSelection) -> KernelOptions {
        KernelOptions { seed: self.seed, which, ..self.kernels.clone() }
    }
}

/// Checks a configuration without running anything.
pub fn validate_config(cfg: &ExperimentConfig) -> ValidationReport {
    let mut report = ValidationReport::default();
    let sys = match cfg.system.build() {
        Ok(sys) => {
            report.push("system", true, format!("{} modes", sys.dim()));
            Some(sys)
        }
        Err(e) => {
            report.push("system", false, e.to_string());
            None
        }
    };
    let strategies = match cfg.strategy_set() {
        Ok(s) => {
            report.push("strategy", true, cfg.strategy.clone());
            Some(s)
        }
        Err(e) => {
            report.push("strategy", false, e.to_string());
            None
        }
    };
    let controlled = !matches!(strategies, Some(StrategySet::None));

    let p = &cfg.protocol;
    let mut times = Vec::new();
    for (name, v) in [
        ("t_spin", p.t_spin),
        ("t_pert", p.t_pert),
        ("horizon", p.horizon),
        ("dt", p.dt),
        ("dt_out", p.dt_out),
        ("control_dt", p.control_dt),
    ] {
        let ok = if name == "t_pert" { v >= 0.0 } else { v > 0.0 } && v.is_finite();
        if !ok {
            times.push(format!("{name} = {v} must be positive"));
        }
    }
    if times.is_empty() {
        for (what, span, step) in [
            ("spin-up", p.t_spin, p.dt),
            ("perturbation phase", p.t_pert, p.dt),
            ("horizon vs dt", p.horizon, p.dt),
            ("horizon vs dt_out", p.horizon, p.dt_out),
            ("horizon vs control_dt", p.horizon, p.control_dt),
            ("dt_out vs dt", p.dt_out, p.dt),
        ] {
            if let Err(e) = steps_in(span, step, what) {
                times.push(e.to_string());
            }
        }
    }
    report.push("protocol times", times.is_empty(), times.join("; "));

    report.push(
        "ensemble size",
        cfg.ensemble_size >= 2,
        format!("M = {} (at least 2 required)", cfg.ensemble_size),
    );

    if let Some(sys) = &sys {
        let n = sys.dim();
        report.push(
            "forcing perturbation",
            cfg.delta_fp.len() == n && cfg.delta_fp.iter().all(|x| x.is_finite()),
            format!("{} entries for {n} modes", cfg.delta_fp.len()),
        );
        if controlled {
            let bad: Vec<String> = cfg
                .control
                .alpha
                .iter()
                .enumerate()
                .filter(|(_, a)| !(**a > 0.0) || !a.is_finite())
                .map(|(k, a)| format!("alpha_{} = {a}", k + 1))
                .collect();
            if bad.is_empty() {
                report.push(
                    "control weights",
                    cfg.control.alpha.len() == n,
                    format!("{} weights for {n} modes", cfg.control.alpha.len()),
                );
            } else {
                report.push("control weights", false, format!("nonpositive control weight: {}", bad.join(", ")));
            }
            report.push(
                "terminal weight",
                cfg.control.k_terminal >= 0.0 && cfg.control.k_terminal.is_finite(),
                format!("k_T = {}", cfg.control.k_terminal),
            );
            if let Some(list) = &cfg.control.active_modes {
                let ok = !list.is_empty() && list.iter().all(|k| (1..=n).contains(k));
                report.push("active modes", ok, format!("{list:?} within 1..={n}"));
            }
            let uniform = sys.uniform_damping().is_some();
            report.push(
                "uniform damping",
                uniform,
                if uniform { "D = -dI".to_string() } else { "energy control requires uniform damping".to_string() },
            );
        }
        if cfg.translation_invariant() && !cfg.system.is_translation_invariant() {
            report.push("translation invariance", false, "only Lorenz '96 systems are translation invariant");
        }
        if cfg.kernels.cov_support == CovSupport::Tensor && sys.bilinear().is_empty() {
            report.push("covariance support", false, "tensor support is empty for a linear system");
        }
    }

    if controlled && cfg.kernels_from.is_none() {
        let k = &cfg.kernels;
        let mut issues = Vec::new();
        if let Err(e) = steps_in(k.dtau, k.dt, "kernel lag step vs integration step") {
            issues.push(e.to_string());
        }
        if let Err(e) = steps_in(k.tau_max, k.dtau, "kernel lag range") {
            issues.push(e.to_string());
        }
        if let Err(e) = steps_in(k.t_sample, k.dtau, "kernel sampling length") {
            issues.push(e.to_string());
        }
        if let Err(e) = steps_in(k.t_spin, k.dt, "kernel spin-up") {
            issues.push(e.to_string());
        }
        if k.batches < 2 {
            issues.push("at least 2 batches are needed for error bars".into());
        }
        report.push("kernel options", issues.is_empty(), issues.join("; "));
    }
    report
}
