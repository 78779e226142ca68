//! Optimal control of the scalar energy perturbation.
//!
//! With uniform damping `d` the energy perturbation obeys
//! `dE/dt = -2d E + sum_k C_k`. Minimizing
//! `int_t^T [E^2 + sum_k alpha_k C_k^2] ds + k_T E(T)^2` gives
//!
//! ```text
//! dK/dt  = a K^2 + 4 d K - 1,          K(T) = k_T,   a = sum_k 1/alpha_k
//! dE*/dt = -(2d + a K) E*,             E*(0) = E0
//! C_k    = -K E* / alpha_k
//! dC_k/dt = -E* (2 d K - 1) / alpha_k
//! ```

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::csvio;
use crate::error::{Error, Result};
use crate::grid::{steps_in, VectorSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlProblem {
    pub d: f64,
    pub alpha: Vec<f64>,
    pub k_terminal: f64,
    pub horizon: f64,
    pub dt: f64,
    pub e0: f64,
    /// Controlled modes; `None` means all.
    pub active: Option<Vec<bool>>,
}

impl ControlProblem {
    pub fn validate(&self) -> Result<()> {
        if !(self.d > 0.0) || !self.d.is_finite() {
            return Err(Error::InvalidParameter(format!("damping must be positive (got {})", self.d)));
        }
        if self.alpha.is_empty() {
            return Err(Error::InvalidParameter("no control weights given".into()));
        }
        if let Some((k, a)) = self.alpha.iter().enumerate().find(|(_, a)| !(**a > 0.0) || !a.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "nonpositive control weight alpha_{} = {a}",
                k + 1
            )));
        }
        if !(self.k_terminal >= 0.0) || !self.k_terminal.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "terminal weight must be non-negative (got {})",
                self.k_terminal
            )));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidParameter(format!("horizon must be positive (got {})", self.horizon)));
        }
        if !self.e0.is_finite() {
            return Err(Error::NonFinite("initial energy perturbation".into()));
        }
        if let Some(act) = &self.active {
            if act.len() != self.alpha.len() {
                return Err(Error::DimensionMismatch {
                    what: "active modes",
                    expected: self.alpha.len(),
                    found: act.len(),
                });
            }
        }
        steps_in(self.horizon, self.dt, "control grid")?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.active.as_ref().is_none_or(|a| a[k])
    }

    /// `a = sum of 1/alpha_k` over the active modes.
    pub fn gain(&self) -> f64 {
        (0..self.dim()).filter(|&k| self.is_active(k)).map(|k| 1.0 / self.alpha[k]).sum()
    }

    /// Positive root of `a K^2 + 4 d K - 1`, or `1/(4d)` when `a = 0`.
    pub fn k_infinity(&self) -> f64 {
        riccati_fixed_point(self.d, self.gain())
    }

    pub fn steps(&self) -> Result<usize> {
        steps_in(self.horizon, self.dt, "control grid")
    }
}

pub fn riccati_fixed_point(d: f64, a: f64) -> f64 {
    if a == 0.0 {
        1.0 / (4.0 * d)
    } else {
        // rationalized form of (-4d + sqrt(16 d^2 + 4a)) / (2a), stable for small a
        2.0 / (4.0 * d + (16.0 * d * d + 4.0 * a).sqrt())
    }
}

#[inline]
fn riccati_rhs(k: f64, d: f64, a: f64) -> f64 {
    a * k * k + 4.0 * d * k - 1.0
}

/// `K` on the control grid, integrated backward from `K(T) = k_T` with RK4.
pub fn solve_riccati(p: &ControlProblem) -> Result<Vec<f64>> {
    p.validate()?;
    let n = p.steps()?;
    let (d, a, h) = (p.d, p.gain(), p.dt);
    let mut k = vec![0.0; n + 1];
    k[n] = p.k_terminal;
    // backward in time: dK/ds = -f(K) with s = T - t
    let g = |x: f64| -riccati_rhs(x, d, a);
    for i in (0..n).rev() {
        let y = k[i + 1];
        let k1 = g(y);
        let k2 = g(y + 0.5 * h * k1);
        let k3 = g(y + 0.5 * h * k2);
        let k4 = g(y + h * k3);
        k[i] = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !k[i].is_finite() {
            return Err(Error::NonFinite(format!("Riccati factor at t = {}", i as f64 * h)));
        }
    }
    Ok(k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlSolution {
    pub dt: f64,
    pub k: Vec<f64>,
    pub e_star: Vec<f64>,
    pub controls: VectorSeries,
    pub control_rates: VectorSeries,
}

impl ControlSolution {
    pub fn nodes(&self) -> usize {
        self.k.len()
    }

    pub fn dim(&self) -> usize {
        self.controls.dim()
    }

    pub fn time(&self, n: usize) -> f64 {
        self.dt * n as f64
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.nodes() - 1)
    }

    /// `t,K,E_star,C_1..C_N,dC_1..dC_N`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.dim();
        let mut header = vec!["t".to_string(), "K".into(), "E_star".into()];
        header.extend(csvio::numbered("C", n));
        header.extend(csvio::numbered("dC", n));
        let rows = (0..self.nodes()).map(|i| {
            let mut row = vec![self.time(i), self.k[i], self.e_star[i]];
            row.extend_from_slice(&self.controls.rows[i]);
            row.extend_from_slice(&self.control_rates.rows[i]);
            row
        });
        csvio::write_table(out, &header, &[], rows)
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let (header, rows) = csvio::read_table(input)?;
        if header.len() < 3 || (header.len() - 3) % 2 != 0 || rows.len() < 2 {
            return Err(Error::Config("control table has an unexpected layout".into()));
        }
        let n = (header.len() - 3) / 2;
        let dt = rows[1][0] - rows[0][0];
        Ok(Self {
            dt,
            k: rows.iter().map(|r| r[1]).collect(),
            e_star: rows.iter().map(|r| r[2]).collect(),
            controls: VectorSeries { dt, rows: rows.iter().map(|r| r[3..3 + n].to_vec()).collect() },
            control_rates: VectorSeries { dt, rows: rows.iter().map(|r| r[3 + n..].to_vec()).collect() },
        })
    }
}

/// Integrates `E*` forward with RK4 and fills the controls and their rates.
///
/// Half-step values of `K` use the cubic Hermite interpolant built from the
/// nodal values and the Riccati slopes, which keeps the scheme fourth order.
pub fn optimal_energy_and_controls(p: &ControlProblem, k: &[f64]) -> Result<ControlSolution> {
    p.validate()?;
    let n = p.steps()?;
    if k.len() != n + 1 {
        return Err(Error::GridMismatch(format!(
            "Riccati factor has {} nodes, control grid has {}",
            k.len(),
            n + 1
        )));
    }
    let (d, a, h) = (p.d, p.gain(), p.dt);
    let mut e = vec![0.0; n + 1];
    e[0] = p.e0;
    let g = |kk: f64, y: f64| -(2.0 * d + a * kk) * y;
    for i in 0..n {
        let (k0, k1) = (k[i], k[i + 1]);
        let kmid = 0.5 * (k0 + k1) + h / 8.0 * (riccati_rhs(k0, d, a) - riccati_rhs(k1, d, a));
        let y = e[i];
        let s1 = g(k0, y);
        let s2 = g(kmid, y + 0.5 * h * s1);
        let s3 = g(kmid, y + 0.5 * h * s2);
        let s4 = g(k1, y + h * s3);
        e[i + 1] = y + h / 6.0 * (s1 + 2.0 * s2 + 2.0 * s3 + s4);
        if !e[i + 1].is_finite() {
            return Err(Error::NonFinite(format!("optimal energy at t = {}", (i + 1) as f64 * h)));
        }
    }
    let dim = p.dim();
    let mut controls = VectorSeries::zeros(dim, h, n + 1);
    let mut rates = VectorSeries::zeros(dim, h, n + 1);
    for i in 0..=n {
        for m in (0..dim).filter(|&m| p.is_active(m)) {
            controls.rows[i][m] = -k[i] * e[i] / p.alpha[m];
            rates.rows[i][m] = -e[i] * (2.0 * d * k[i] - 1.0) / p.alpha[m];
        }
    }
    Ok(ControlSolution { dt: h, k: k.to_vec(), e_star: e, controls, control_rates: rates })
}

/// Riccati solve followed by the forward energy and control evaluation.
pub fn solve_control(p: &ControlProblem) -> Result<ControlSolution> {
    let k = solve_riccati(p)?;
    optimal_energy_and_controls(p, &k)
}

/// `E_eq = (u_eq . F_eq) / (2d) + (sum sigma_k^2) / (4d)`.
pub fn equilibrium_energy(mean_eq: &[f64], forcing_eq: &[f64], d: f64, noise: &[f64]) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::InvalidParameter(format!("damping must be positive (got {d})")));
    }
    if mean_eq.len() != forcing_eq.len() {
        return Err(Error::DimensionMismatch {
            what: "equilibrium forcing",
            expected: mean_eq.len(),
            found: forcing_eq.len(),
        });
    }
    let work: f64 = mean_eq.iter().zip(forcing_eq).map(|(u, f)| u * f).sum();
    let noise: f64 = noise.iter().map(|s| s * s).sum();
    Ok(work / (2.0 * d) + noise / (4.0 * d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn problem(d: f64, alpha: Vec<f64>, k_terminal: f64, horizon: f64, dt: f64, e0: f64) -> ControlProblem {
        ControlProblem { d, alpha, k_terminal, horizon, dt, e0, active: None }
    }

    #[test]
    fn fixed_point_is_preserved() {
        let mut p = problem(1.0, vec![1.0], 0.0, 1.0, 0.01, 1.0);
        let kinf = p.k_infinity();
        assert_abs_diff_eq!(kinf, 5f64.sqrt() - 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(kinf, 0.2360680, epsilon = 1e-7);
        p.k_terminal = kinf;
        let k = solve_riccati(&p).unwrap();
        assert!(k.iter().all(|x| (x - kinf).abs() < 1e-10));
    }

    #[test]
    fn three_unit_weights() {
        let mut p = problem(1.0, vec![1.0; 3], 0.0, 2.0, 0.01, 1.0);
        let kinf = p.k_infinity();
        assert_abs_diff_eq!(kinf, (7f64.sqrt() - 2.0) / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(kinf, 0.2152504, epsilon = 1e-7);
        p.k_terminal = kinf;
        assert!(solve_riccati(&p).unwrap().iter().all(|x| (x - kinf).abs() < 1e-10));
    }

    #[test]
    fn uncontrolled_riccati_matches_closed_form() {
        let p = ControlProblem { active: Some(vec![false]), ..problem(1.0, vec![1.0], 0.0, 1.0, 0.01, 1.0) };
        assert_eq!(p.gain(), 0.0);
        let k = solve_riccati(&p).unwrap();
        let exact = 0.25 * (1.0 - (-4.0f64).exp());
        assert_abs_diff_eq!(exact, 0.2454211, epsilon = 1e-7);
        assert_abs_diff_eq!(k[0], exact, epsilon = 1e-8);
        for (i, ki) in k.iter().enumerate() {
            let t = i as f64 * 0.01;
            let e = -0.25 * (-4.0 * (1.0 - t)).exp() + 0.25;
            assert_abs_diff_eq!(*ki, e, epsilon = 1e-8);
        }
    }

    #[test]
    fn riccati_stays_between_terminal_and_fixed_point_and_is_monotone() {
        for kt in [0.0, 0.1, 1.0, 5.0] {
            let p = problem(0.5, vec![2.0, 0.5], kt, 3.0, 0.01, 1.0);
            let kinf = p.k_infinity();
            let (lo, hi) = (kt.min(kinf), kt.max(kinf));
            let k = solve_riccati(&p).unwrap();
            assert!(k.iter().all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12));
            let inc = k.windows(2).all(|w| w[1] >= w[0] - 1e-14);
            let dec = k.windows(2).all(|w| w[1] <= w[0] + 1e-14);
            assert!(inc || dec);
            assert_eq!(*k.last().unwrap(), kt);
        }
    }

    #[test]
    fn riccati_refinement_is_fourth_order() {
        let k0 = |dt: f64| solve_riccati(&problem(1.0, vec![1.0], 0.0, 2.0, dt, 1.0)).unwrap()[0];
        let (a, b, c) = (k0(0.05), k0(0.025), k0(0.0125));
        let ratio = (a - b) / (b - c);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn optimal_energy_with_constant_factor() {
        let mut p = problem(1.0, vec![1.0], 0.0, 1.0, 0.01, 1.0);
        p.k_terminal = p.k_infinity();
        let sol = solve_control(&p).unwrap();
        let expected = (-(2.0 + p.k_infinity())).exp();
        assert_abs_diff_eq!(expected, 0.1068779, epsilon = 1e-7);
        assert_abs_diff_eq!(*sol.e_star.last().unwrap(), expected, epsilon = 1e-9);
    }

    #[test]
    fn energy_refinement_is_fourth_order() {
        let e_t = |dt: f64| *solve_control(&problem(1.0, vec![1.0, 2.0], 0.3, 2.0, dt, 1.0)).unwrap().e_star.last().unwrap();
        let (a, b, c) = (e_t(0.2), e_t(0.1), e_t(0.05));
        let ratio = (a - b) / (b - c);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn zero_initial_perturbation_gives_zero_control() {
        let sol = solve_control(&problem(1.0, vec![1.0; 3], 0.0, 1.0, 0.1, 0.0)).unwrap();
        assert!(sol.e_star.iter().all(|&e| e == 0.0));
        assert!(sol.controls.rows.iter().flatten().all(|&c| c == 0.0));
        assert!(sol.control_rates.rows.iter().flatten().all(|&c| c == 0.0));
    }

    #[test]
    fn controls_follow_closed_forms() {
        let p = problem(1.0, vec![1.0, 4.0], 0.5, 2.0, 0.01, -2.0);
        let sol = solve_control(&p).unwrap();
        assert_eq!(*sol.k.last().unwrap(), 0.5);
        for i in 0..sol.nodes() {
            for (m, &a) in p.alpha.iter().enumerate() {
                assert_abs_diff_eq!(sol.controls.rows[i][m], -sol.k[i] * sol.e_star[i] / a, epsilon = 1e-15);
            }
        }
        // at K = 1/(2d) the control rate vanishes
        assert_abs_diff_eq!(sol.control_rates.rows[sol.nodes() - 1][0], 0.0, epsilon = 1e-15);
        // sign constant and magnitude non-increasing
        assert!(sol.e_star.iter().all(|&e| e < 0.0));
        assert!(sol.e_star.windows(2).all(|w| w[1].abs() <= w[0].abs()));
        // rates agree with centered differences of the controls
        for i in 1..sol.nodes() - 1 {
            for m in 0..2 {
                let fd = (sol.controls.rows[i + 1][m] - sol.controls.rows[i - 1][m]) / (2.0 * p.dt);
                assert_abs_diff_eq!(fd, sol.control_rates.rows[i][m], epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn inactive_modes_get_no_control() {
        let p = ControlProblem {
            active: Some(vec![true, false, true]),
            ..problem(1.0, vec![1.0, 1.0, 2.0], 0.0, 1.0, 0.1, 1.0)
        };
        assert_abs_diff_eq!(p.gain(), 1.5, epsilon = 1e-15);
        let sol = solve_control(&p).unwrap();
        assert!(sol.controls.rows.iter().all(|r| r[1] == 0.0));
        assert!(sol.controls.rows[0][0] != 0.0);
    }

    #[test]
    fn invalid_problems_are_rejected() {
        assert!(solve_riccati(&problem(1.0, vec![-1.0], 0.0, 1.0, 0.1, 1.0)).is_err());
        assert!(solve_riccati(&problem(0.0, vec![1.0], 0.0, 1.0, 0.1, 1.0)).is_err());
        assert!(solve_riccati(&problem(1.0, vec![1.0], 0.0, 1.0, 0.3, 1.0)).is_err());
        assert!(solve_riccati(&problem(1.0, vec![1.0], -1.0, 1.0, 0.1, 1.0)).is_err());
    }

    #[test]
    fn equilibrium_energy_examples() {
        assert_abs_diff_eq!(equilibrium_energy(&[2.0], &[1.0], 1.0, &[0.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(equilibrium_energy(&[0.0, 0.0], &[0.0, 0.0], 0.5, &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(equilibrium_energy(&[0.0], &[0.0], 1.0, &[0.0]).unwrap(), 0.0);
        assert!(equilibrium_energy(&[1.0], &[1.0], 0.0, &[0.0]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let sol = solve_control(&problem(1.0, vec![1.0, 2.0], 0.0, 0.5, 0.1, 1.0)).unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,K,E_star,C_1,C_2,dC_1,dC_2\n"));
        let back = ControlSolution::read_csv(&buf[..]).unwrap();
        assert_eq!(back.k, sol.k);
        assert_eq!(back.controls.rows, sol.controls.rows);
    }
}
