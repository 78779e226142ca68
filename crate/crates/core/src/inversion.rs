//! Recovering the forcing perturbation that realizes a prescribed control.
//!
//! The per-mode control is tied to the forcing perturbation `kappa` and the
//! mean response `du` by
//!
//! ```text
//! C_k = u_eq,k kappa_k + F_eq,k du_k + kappa_k du_k
//! ```
//!
//! The low-order inversion drops the `kappa du` term; the high-order one keeps
//! it. The mean response comes either from linear response theory or from
//! the closed mean equation with a linear-response covariance.
//!
//! The coupled system is advanced with explicit Euler on the control grid.
//! Each step evaluates the mean-response rate from the forcing history up to
//! the current node, updates `kappa`, then updates the mean state. The
//! `kappa` update uses the exact control increment over the step and the
//! end-of-step denominator, so the discrete relation above holds exactly at
//! every node.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::control::ControlSolution;
use crate::csvio;
use crate::error::{Error, Result};
use crate::grid::{sample_or_zero, VectorSeries};
use crate::response::{
    convolve, kernel_time_derivative, resample, tail_integral, tail_profile, CovResponseKernel,
    MeanResponseKernel,
};
use crate::system::QuadraticSystem;

/// Relative size of `|kappa(T)|` against `max |kappa|` above which the forcing
/// is reported as settling on a non-zero constant.
pub const ALTERNATE_EQUILIBRIUM_RATIO: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Order {
    Low,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanModel {
    LinearResponse,
    Closure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyChoice {
    pub order: Order,
    pub mean_model: MeanModel,
    /// Per-mode order overrides keyed by 0-based mode index.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub mode_orders: BTreeMap<usize, Order>,
}

impl StrategyChoice {
    pub const ALL: [&'static str; 4] = ["low-lr", "low-closure", "high-lr", "high-closure"];

    pub fn new(order: Order, mean_model: MeanModel) -> Self {
        Self { order, mean_model, mode_orders: BTreeMap::new() }
    }

    pub fn order_of(&self, mode: usize) -> Order {
        self.mode_orders.get(&mode).copied().unwrap_or(self.order)
    }

    pub fn all() -> Vec<Self> {
        Self::ALL.iter().map(|s| s.parse().expect("built-in strategy name")).collect()
    }
}

impl fmt::Display for StrategyChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let order = match self.order {
            Order::Low => "low",
            Order::High => "high",
        };
        let model = match self.mean_model {
            MeanModel::LinearResponse => "lr",
            MeanModel::Closure => "closure",
        };
        write!(f, "{order}-{model}")?;
        if !self.mode_orders.is_empty() {
            write!(f, "-mixed")?;
        }
        Ok(())
    }
}

impl FromStr for StrategyChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (order, model) = s
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))?;
        let order = match order {
            "low" => Order::Low,
            "high" => Order::High,
            _ => return Err(Error::Config(format!("unknown strategy {s:?}"))),
        };
        let model = match model {
            "lr" => MeanModel::LinearResponse,
            "closure" => MeanModel::Closure,
            _ => return Err(Error::Config(format!("unknown strategy {s:?}"))),
        };
        Ok(Self::new(order, model))
    }
}

/// Smallest admissible denominator magnitude for mode `k`.
pub fn denominator_floor(mean_eq_k: f64) -> f64 {
    1e-6 * mean_eq_k.abs().max(1.0)
}

/// Inputs shared by every strategy.
#[derive(Debug, Clone)]
pub struct InversionContext<'a> {
    pub system: &'a QuadraticSystem,
    pub mean_eq: Vec<f64>,
    pub cov_eq: DMatrix<f64>,
    pub delta_fp: Vec<f64>,
    /// Mean perturbation measured on the ensemble at `t = 0`.
    pub du0_measured: Vec<f64>,
    pub mean_kernel: Option<&'a MeanResponseKernel>,
    pub cov_kernel: Option<&'a CovResponseKernel>,
    /// Modes that receive a forcing perturbation; `None` means all.
    pub active: Option<Vec<bool>>,
    /// Subtract the closure's own residual at `(u_eq, R_eq)` so the
    /// equilibrium is an exact fixed point of the closed mean equation.
    pub closure_equilibrium_correction: bool,
}

impl<'a> InversionContext<'a> {
    pub fn new(system: &'a QuadraticSystem, mean_eq: Vec<f64>, cov_eq: DMatrix<f64>) -> Self {
        let n = system.dim();
        Self {
            system,
            mean_eq,
            cov_eq,
            delta_fp: vec![0.0; n],
            du0_measured: vec![0.0; n],
            mean_kernel: None,
            cov_kernel: None,
            active: None,
            closure_equilibrium_correction: true,
        }
    }

    fn is_active(&self, k: usize) -> bool {
        self.active.as_ref().is_none_or(|a| a[k])
    }

    fn check(&self) -> Result<()> {
        let n = self.system.dim();
        for (what, len) in [
            ("equilibrium mean", self.mean_eq.len()),
            ("forcing perturbation", self.delta_fp.len()),
            ("measured mean perturbation", self.du0_measured.len()),
            ("equilibrium covariance", self.cov_eq.nrows()),
            ("equilibrium covariance", self.cov_eq.ncols()),
        ] {
            if len != n {
                return Err(Error::DimensionMismatch { what, expected: n, found: len });
            }
        }
        if let Some(a) = &self.active {
            if a.len() != n {
                return Err(Error::DimensionMismatch { what: "active modes", expected: n, found: a.len() });
            }
        }
        if let Some(k) = self.mean_kernel {
            if k.dim() != n {
                return Err(Error::DimensionMismatch { what: "mean kernel", expected: n, found: k.dim() });
            }
        }
        if let Some(k) = self.cov_kernel {
            if k.dim() != n {
                return Err(Error::DimensionMismatch { what: "covariance kernel", expected: n, found: k.dim() });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionDiagnostics {
    pub strategy: String,
    /// Smallest `|denominator|` met by each mode (inactive modes report `null`).
    pub denominator_min: Vec<Option<f64>>,
    pub kappa_terminal_norm: f64,
    pub kappa_max_norm: f64,
    /// The forcing settles on a non-zero constant instead of returning to zero.
    pub alternate_equilibrium: bool,
    pub du0_model: Vec<f64>,
    pub du0_measured: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForcingSolution {
    pub strategy: StrategyChoice,
    pub kappa: VectorSeries,
    pub mean_resp: VectorSeries,
    pub diagnostics: InversionDiagnostics,
}

impl ForcingSolution {
    /// `t,kappa_1..kappa_N,du_1..du_N`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.kappa.dim();
        let mut header = vec!["t".to_string()];
        header.extend(csvio::numbered("kappa", n));
        header.extend(csvio::numbered("du", n));
        let rows = (0..self.kappa.nodes()).map(|i| {
            let mut row = vec![self.kappa.time(i)];
            row.extend_from_slice(&self.kappa.rows[i]);
            row.extend_from_slice(&self.mean_resp.rows[i]);
            row
        });
        csvio::write_table(out, &header, &[], rows)
    }

    pub fn write_diagnostics<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, &self.diagnostics)?;
        Ok(())
    }

    /// Reads `kappa` and `du` back from the CSV layout.
    pub fn read_series<R: std::io::Read>(input: R) -> Result<(VectorSeries, VectorSeries)> {
        let (header, rows) = csvio::read_table(input)?;
        if header.len() < 3 || (header.len() - 1) % 2 != 0 || rows.len() < 2 {
            return Err(Error::Config("forcing table has an unexpected layout".into()));
        }
        let n = (header.len() - 1) / 2;
        let dt = rows[1][0] - rows[0][0];
        Ok((
            VectorSeries { dt, rows: rows.iter().map(|r| r[1..1 + n].to_vec()).collect() },
            VectorSeries { dt, rows: rows.iter().map(|r| r[1 + n..].to_vec()).collect() },
        ))
    }

    /// `max_{t,k} |u_eq,k kappa_k + F_eq,k du_k + kappa_k du_k - C_k|`.
    pub fn relation_residual(&self, control: &ControlSolution, mean_eq: &[f64], forcing_eq: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.kappa.nodes() {
            for k in 0..self.kappa.dim() {
                let (kap, du) = (self.kappa.rows[i][k], self.mean_resp.rows[i][k]);
                let c = mean_eq[k] * kap + forcing_eq[k] * du + kap * du;
                worst = worst.max((c - control.controls.rows[i][k]).abs());
            }
        }
        worst
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean-response rate from linear response theory at time `t`.
///
/// `kappa` must cover `[0, t]`. The history integral uses [`convolve`] with
/// the kernel's time derivative; the pre-forcing term reads the kernel at `t`.
pub fn mean_response_rate_linear(
    kernel: &MeanResponseKernel,
    kappa: &VectorSeries,
    delta_fp: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let n = kernel.dim();
    let dtau = kernel.grid().dtau;
    let mut now = vec![0.0; n];
    kappa.interpolate_into(t, &mut now)?;
    let mut rate = vec![0.0; n];
    for l in 0..n {
        let history = kappa.component(l);
        let active = history.iter().any(|&x| x != 0.0);
        for (k, r) in rate.iter_mut().enumerate() {
            let slice = kernel.slice(k, l);
            *r += slice[0] * now[l];
            if active {
                let deriv = kernel_time_derivative(&slice, dtau)?;
                *r += convolve(&deriv, dtau, &history, kappa.dt, t)?;
            }
            if delta_fp[l] != 0.0 {
                *r -= sample_or_zero(&slice, dtau, t) * delta_fp[l];
            }
        }
    }
    Ok(rate)
}

/// Equilibrium covariance corrected by the linear response to the forcing
/// history and to the pre-forcing.
pub fn closure_covariance(
    kernel: &CovResponseKernel,
    cov_eq: &DMatrix<f64>,
    kappa: &VectorSeries,
    delta_fp: &[f64],
    t: f64,
) -> Result<DMatrix<f64>> {
    let n = kernel.dim();
    let dtau = kernel.grid().dtau;
    let mut cov = cov_eq.clone();
    let histories: Vec<Vec<f64>> = (0..n).map(|l| kappa.component(l)).collect();
    for (p, &(i, j)) in kernel.pairs().iter().enumerate() {
        let mut delta = 0.0;
        for l in 0..n {
            let slice = kernel.pair_slice(p, l);
            if histories[l].iter().any(|&x| x != 0.0) {
                delta += convolve(&slice, dtau, &histories[l], kappa.dt, t)?;
            }
            delta += tail_integral(&slice, dtau, delta_fp[l], t);
        }
        cov[(i, j)] += delta;
        if i != j {
            cov[(j, i)] += delta;
        }
    }
    Ok(cov)
}

/// Right-hand side of the closed mean equation at time `t`:
/// `(L + D) u + B(u, u) + sum_ij R_ij B(e_i, e_j) + F_eq + kappa(t)`.
pub fn mean_response_rate_closure(
    system: &QuadraticSystem,
    mean: &[f64],
    kernel: &CovResponseKernel,
    cov_eq: &DMatrix<f64>,
    kappa: &VectorSeries,
    delta_fp: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let n = system.dim();
    let cov = closure_covariance(kernel, cov_eq, kappa, delta_fp, t)?;
    let mut forcing = vec![0.0; n];
    kappa.interpolate_into(t, &mut forcing)?;
    for (f, feq) in forcing.iter_mut().zip(system.forcing_eq()) {
        *f += feq;
    }
    let mut rate = system.drift(mean, &forcing)?;
    system.contract_covariance(&cov, &mut rate);
    Ok(rate)
}

/// Trapezoid history sum `sum_i w_i kern[n - i] sig[i] dt` on a shared grid.
#[inline]
fn history_sum(kern: &[f64], sig: &[f64], n: usize, dt: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let lo = n.saturating_sub(kern.len() - 1);
    let mut sum = 0.0;
    for i in lo..=n {
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        sum += w * kern[n - i] * sig[i];
    }
    sum * dt
}

/// Kernel sampled on the control grid, padded with zeros to cover it.
fn on_grid(kernel: &[f64], dtau: f64, dt: f64, nodes: usize) -> Vec<f64> {
    let mut v = resample(kernel, dtau, dt);
    v.truncate(nodes);
    if v.is_empty() {
        v.push(0.0);
    }
    v
}

/// Mean-response model evaluated on the control grid with precomputed kernels.
enum Provider {
    Linear {
        // [k][l] -> kernel derivative, kernel, tail profile on the control grid
        deriv: Vec<Vec<Vec<f64>>>,
        value: Vec<Vec<Vec<f64>>>,
        r0: Vec<Vec<f64>>,
        du: Vec<f64>,
    },
    Closure {
        // [pair][l] -> kernel on the control grid and tail profile
        pairs: Vec<(usize, usize)>,
        value: Vec<Vec<Vec<f64>>>,
        tail: Vec<Vec<Vec<f64>>>,
        offset: Vec<f64>,
        mean: Vec<f64>,
        min_eig_floor: f64,
        indefinite_at: Option<f64>,
    },
}

impl Provider {
    fn new(ctx: &InversionContext, model: MeanModel, dt: f64, nodes: usize) -> Result<(Self, Vec<String>)> {
        let n = ctx.system.dim();
        let mut warnings = Vec::new();
        match model {
            MeanModel::LinearResponse => {
                let kern = ctx.mean_kernel.ok_or_else(|| {
                    Error::InvalidParameter("linear-response inversion needs a mean response kernel".into())
                })?;
                let dtau = kern.grid().dtau;
                if kern.truncated() {
                    warnings.push("mean response kernel has not decayed by its last lag".into());
                }
                if kern.grid().tau_max() < dt * (nodes - 1) as f64 {
                    warnings.push(format!(
                        "mean response kernel support {} is shorter than the horizon {}; it is taken as zero beyond",
                        kern.grid().tau_max(),
                        dt * (nodes - 1) as f64
                    ));
                }
                let mut deriv = vec![vec![Vec::new(); n]; n];
                let mut value = vec![vec![Vec::new(); n]; n];
                let mut r0 = vec![vec![0.0; n]; n];
                let mut du = vec![0.0; n];
                for k in 0..n {
                    for l in 0..n {
                        let slice = kern.slice(k, l);
                        r0[k][l] = slice[0];
                        du[k] += tail_integral(&slice, dtau, ctx.delta_fp[l], 0.0);
                        deriv[k][l] = on_grid(&kernel_time_derivative(&slice, dtau)?, dtau, dt, nodes);
                        value[k][l] = on_grid(&slice, dtau, dt, nodes);
                    }
                }
                Ok((Provider::Linear { deriv, value, r0, du }, warnings))
            }
            MeanModel::Closure => {
                let kern = ctx.cov_kernel.ok_or_else(|| {
                    Error::InvalidParameter("closure inversion needs a covariance response kernel".into())
                })?;
                let dtau = kern.grid().dtau;
                let pairs = kern.pairs().to_vec();
                let mut value = Vec::with_capacity(pairs.len());
                let mut tail = Vec::with_capacity(pairs.len());
                for p in 0..pairs.len() {
                    let mut vp = Vec::with_capacity(n);
                    let mut tp = Vec::with_capacity(n);
                    for l in 0..n {
                        let slice = kern.pair_slice(p, l);
                        vp.push(on_grid(&slice, dtau, dt, nodes));
                        let prof = tail_profile(&slice, dtau);
                        tp.push(on_grid(&prof, dtau, dt, nodes));
                    }
                    value.push(vp);
                    tail.push(tp);
                }
                let mut offset = vec![0.0; n];
                if ctx.closure_equilibrium_correction {
                    let mut r = vec![0.0; n];
                    ctx.system.drift_into(&ctx.mean_eq, ctx.system.forcing_eq(), &mut r);
                    ctx.system.contract_covariance(&ctx.cov_eq, &mut r);
                    offset = r;
                }
                let mean = ctx.mean_eq.iter().zip(&ctx.du0_measured).map(|(u, d)| u + d).collect();
                let min_eig_floor = -0.5 * ctx.cov_eq.trace() / n as f64;
                Ok((
                    Provider::Closure { pairs, value, tail, offset, mean, min_eig_floor, indefinite_at: None },
                    warnings,
                ))
            }
        }
    }

    /// Current mean perturbation.
    fn du(&self, mean_eq: &[f64]) -> Vec<f64> {
        match self {
            Provider::Linear { du, .. } => du.clone(),
            Provider::Closure { mean, .. } => mean.iter().zip(mean_eq).map(|(u, e)| u - e).collect(),
        }
    }

    /// Rate of the mean at node `step` given the forcing history `hist[l][0..=step]`.
    fn rate(&mut self, ctx: &InversionContext, hist: &[Vec<f64>], step: usize, dt: f64) -> Vec<f64> {
        let n = ctx.system.dim();
        match self {
            Provider::Linear { deriv, value, r0, .. } => {
                let mut rate = vec![0.0; n];
                for (k, r) in rate.iter_mut().enumerate() {
                    for l in 0..n {
                        *r += r0[k][l] * hist[l][step];
                        *r += history_sum(&deriv[k][l], &hist[l], step, dt);
                        if ctx.delta_fp[l] != 0.0 {
                            *r -= value[k][l].get(step).copied().unwrap_or(0.0) * ctx.delta_fp[l];
                        }
                    }
                }
                rate
            }
            Provider::Closure { pairs, value, tail, offset, mean, min_eig_floor, indefinite_at } => {
                let mut cov = ctx.cov_eq.clone();
                for (p, &(i, j)) in pairs.iter().enumerate() {
                    let mut delta = 0.0;
                    for l in 0..n {
                        delta += history_sum(&value[p][l], &hist[l], step, dt);
                        if ctx.delta_fp[l] != 0.0 {
                            delta += tail[p][l].get(step).copied().unwrap_or(0.0) * ctx.delta_fp[l];
                        }
                    }
                    cov[(i, j)] += delta;
                    if i != j {
                        cov[(j, i)] += delta;
                    }
                }
                if indefinite_at.is_none() {
                    let min_eig = cov.clone().symmetric_eigenvalues().min();
                    if min_eig < *min_eig_floor {
                        *indefinite_at = Some(step as f64 * dt);
                    }
                }
                let forcing: Vec<f64> =
                    ctx.system.forcing_eq().iter().enumerate().map(|(l, f)| f + hist[l][step]).collect();
                let mut rate = vec![0.0; n];
                ctx.system.drift_into(mean, &forcing, &mut rate);
                ctx.system.contract_covariance(&cov, &mut rate);
                for (r, o) in rate.iter_mut().zip(offset.iter()) {
                    *r -= o;
                }
                rate
            }
        }
    }

    fn advance(&mut self, rate: &[f64], dt: f64) {
        let state = match self {
            Provider::Linear { du, .. } => du,
            Provider::Closure { mean, .. } => mean,
        };
        for (s, r) in state.iter_mut().zip(rate) {
            *s += dt * r;
        }
    }
}

/// Integrates the forcing perturbation that realizes `control` under `strategy`.
pub fn invert(control: &ControlSolution, strategy: &StrategyChoice, ctx: &InversionContext) -> Result<ForcingSolution> {
    ctx.check()?;
    let n = ctx.system.dim();
    if control.dim() != n {
        return Err(Error::DimensionMismatch { what: "control", expected: n, found: control.dim() });
    }
    let nodes = control.nodes();
    let dt = control.dt;
    let forcing_eq = ctx.system.forcing_eq();
    let (mut provider, mut warnings) = Provider::new(ctx, strategy.mean_model, dt, nodes)?;

    let orders: Vec<Order> = (0..n).map(|k| strategy.order_of(k)).collect();
    let floors: Vec<f64> = ctx.mean_eq.iter().map(|&u| denominator_floor(u)).collect();
    let mut den_min: Vec<Option<f64>> = vec![None; n];
    let mut note_den = |k: usize, den: f64, t: f64| -> Result<()> {
        if !(den.abs() >= floors[k]) {
            return Err(Error::SingularInversion { mode: k + 1, time: t, denominator: den });
        }
        den_min[k] = Some(den_min[k].map_or(den.abs(), |m: f64| m.min(den.abs())));
        Ok(())
    };

    let du0_model = provider.du(&ctx.mean_eq);
    let mut hist = vec![vec![0.0; nodes]; n];
    let mut du_rows = vec![du0_model.clone()];
    for k in (0..n).filter(|&k| ctx.is_active(k)) {
        let c0 = control.controls.rows[0][k];
        let den = match orders[k] {
            Order::Low => ctx.mean_eq[k],
            Order::High => ctx.mean_eq[k] + du0_model[k],
        };
        note_den(k, den, 0.0)?;
        hist[k][0] = (c0 - forcing_eq[k] * du0_model[k]) / den;
    }

    for step in 0..nodes - 1 {
        let t_next = (step + 1) as f64 * dt;
        let rate = provider.rate(ctx, &hist, step, dt);
        provider.advance(&rate, dt);
        let du_next = provider.du(&ctx.mean_eq);
        for k in (0..n).filter(|&k| ctx.is_active(k)) {
            let dc = control.controls.rows[step + 1][k] - control.controls.rows[step][k];
            let ddu = du_next[k] - du_rows[step][k];
            let kap = hist[k][step];
            let next = match orders[k] {
                Order::Low => {
                    kap + (dc - forcing_eq[k] * ddu) / ctx.mean_eq[k]
                }
                Order::High => {
                    let den = ctx.mean_eq[k] + du_next[k];
                    note_den(k, den, t_next)?;
                    kap + (dc - (forcing_eq[k] + kap) * ddu) / den
                }
            };
            if !next.is_finite() {
                return Err(Error::NonFinite(format!("forcing perturbation of mode {} at t = {t_next}", k + 1)));
            }
            hist[k][step + 1] = next;
        }
        if du_next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("mean response at t = {t_next}")));
        }
        du_rows.push(du_next);
    }

    if let Provider::Closure { indefinite_at: Some(t), .. } = provider {
        warnings.push(format!(
            "assembled closure covariance is strongly indefinite from t = {t}; linear response is pushed beyond its range"
        ));
    }
    let kappa = VectorSeries { dt, rows: (0..nodes).map(|i| (0..n).map(|k| hist[k][i]).collect()).collect() };
    let kappa_max_norm = kappa.rows.iter().map(|r| norm(r)).fold(0.0, f64::max);
    let kappa_terminal_norm = norm(kappa.rows.last().expect("non-empty grid"));
    let alternate_equilibrium = kappa_terminal_norm > ALTERNATE_EQUILIBRIUM_RATIO * kappa_max_norm;
    if alternate_equilibrium {
        warnings.push(format!(
            "forcing settles at |kappa(T)| = {kappa_terminal_norm:.3e} (max {kappa_max_norm:.3e}) instead of returning to zero"
        ));
    }
    Ok(ForcingSolution {
        strategy: strategy.clone(),
        kappa,
        mean_resp: VectorSeries { dt, rows: du_rows },
        diagnostics: InversionDiagnostics {
            strategy: strategy.to_string(),
            denominator_min: den_min,
            kappa_terminal_norm,
            kappa_max_norm,
            alternate_equilibrium,
            du0_model,
            du0_measured: ctx.du0_measured.clone(),
            warnings,
        },
    })
}
