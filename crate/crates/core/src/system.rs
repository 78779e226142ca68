//! Quadratic energy-conserving systems
//!
//! ```text
//! du/dt = (L + D) u + B(u, u) + F(t) + sigma dW/dt
//! ```
//!
//! `L` is skew-symmetric, `D` negative semi-definite and the bilinear term
//! satisfies `u . B(u, u) = 0`. The bilinear operator is stored as a sparse
//! list of coefficients `b_ijk` with `B(u, v)_i = sum_jk b_ijk u_j v_k`,
//! written exactly as the model equations read (no symmetrization).

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One coefficient `b_ijk` of the bilinear tensor (0-based indices).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BilinearTerm {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub coeff: f64,
}

impl BilinearTerm {
    pub fn new(i: usize, j: usize, k: usize, coeff: f64) -> Self {
        Self { i, j, k, coeff }
    }
}

#[derive(Debug, Clone)]
pub struct QuadraticSystem {
    dim: usize,
    skew: DMatrix<f64>,
    damping: DMatrix<f64>,
    uniform_damping: Option<f64>,
    bilinear: Vec<BilinearTerm>,
    forcing_eq: Vec<f64>,
    noise: Vec<f64>,
    // nonzero entries of L + D, row-major
    linear: Vec<(usize, usize, f64)>,
}

impl QuadraticSystem {
    /// Builds a system after checking shapes and tensor indices.
    ///
    /// Structural properties (skewness, energy conservation) are not enforced
    /// here; use [`verify_structure`] for that.
    pub fn new(
        skew: DMatrix<f64>,
        damping: DMatrix<f64>,
        bilinear: Vec<BilinearTerm>,
        forcing_eq: Vec<f64>,
        noise: Vec<f64>,
    ) -> Result<Self> {
        let dim = forcing_eq.len();
        if dim == 0 {
            return Err(Error::InvalidParameter("system dimension must be positive".into()));
        }
        for (what, m) in [("skew operator", &skew), ("damping operator", &damping)] {
            if m.nrows() != dim {
                return Err(Error::DimensionMismatch { what, expected: dim, found: m.nrows() });
            }
            if m.ncols() != dim {
                return Err(Error::DimensionMismatch { what, expected: dim, found: m.ncols() });
            }
        }
        if noise.len() != dim {
            return Err(Error::DimensionMismatch {
                what: "noise amplitudes",
                expected: dim,
                found: noise.len(),
            });
        }
        if let Some(t) = bilinear.iter().find(|t| t.i >= dim || t.j >= dim || t.k >= dim) {
            return Err(Error::InvalidParameter(format!(
                "bilinear entry ({}, {}, {}) out of range for dimension {dim}",
                t.i, t.j, t.k
            )));
        }
        let all = skew.iter().chain(damping.iter()).chain(forcing_eq.iter()).chain(noise.iter());
        if all.chain(bilinear.iter().map(|t| &t.coeff)).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("system parameters".into()));
        }

        let uniform_damping = detect_uniform_damping(&damping);
        let mut linear = Vec::new();
        for r in 0..dim {
            for c in 0..dim {
                let v = skew[(r, c)] + damping[(r, c)];
                if v != 0.0 {
                    linear.push((r, c, v));
                }
            }
        }
        Ok(Self { dim, skew, damping, uniform_damping, bilinear, forcing_eq, noise, linear })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn skew(&self) -> &DMatrix<f64> {
        &self.skew
    }

    pub fn damping(&self) -> &DMatrix<f64> {
        &self.damping
    }

    /// `Some(d)` when `D = -d I` with `d > 0`.
    pub fn uniform_damping(&self) -> Option<f64> {
        self.uniform_damping
    }

    /// The damping rate required by the energy controller.
    pub fn require_uniform_damping(&self) -> Result<f64> {
        self.uniform_damping.ok_or(Error::NonUniformDamping)
    }

    pub fn bilinear(&self) -> &[BilinearTerm] {
        &self.bilinear
    }

    pub fn forcing_eq(&self) -> &[f64] {
        &self.forcing_eq
    }

    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    /// `tr(Q_sigma)` for diagonal noise.
    pub fn noise_trace(&self) -> f64 {
        self.noise.iter().map(|s| s * s).sum()
    }

    pub fn with_forcing_eq(mut self, forcing_eq: Vec<f64>) -> Result<Self> {
        if forcing_eq.len() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "equilibrium forcing",
                expected: self.dim,
                found: forcing_eq.len(),
            });
        }
        self.forcing_eq = forcing_eq;
        Ok(self)
    }

    pub fn bilinear_apply(&self, u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.check_len("u", u.len())?;
        self.check_len("v", v.len())?;
        let mut out = vec![0.0; self.dim];
        self.bilinear_into(u, v, &mut out);
        Ok(out)
    }

    /// Adds `B(u, v)` into `out`. Lengths are not checked.
    #[inline]
    pub(crate) fn bilinear_into(&self, u: &[f64], v: &[f64], out: &mut [f64]) {
        for t in &self.bilinear {
            out[t.i] += t.coeff * u[t.j] * v[t.k];
        }
    }

    /// Adds `sum_jk b_ijk R_jk` into `out`, i.e. `sum_jk R_jk B(e_j, e_k)`.
    pub fn contract_covariance(&self, cov: &DMatrix<f64>, out: &mut [f64]) {
        for t in &self.bilinear {
            out[t.i] += t.coeff * cov[(t.j, t.k)];
        }
    }

    /// Deterministic right-hand side `(L + D) u + B(u, u) + F`.
    pub fn drift(&self, u: &[f64], forcing: &[f64]) -> Result<Vec<f64>> {
        self.check_len("state", u.len())?;
        self.check_len("forcing", forcing.len())?;
        let mut out = vec![0.0; self.dim];
        self.drift_into(u, forcing, &mut out);
        Ok(out)
    }

    /// Writes the drift into `out`. Lengths are not checked.
    #[inline]
    pub(crate) fn drift_into(&self, u: &[f64], forcing: &[f64], out: &mut [f64]) {
        out.copy_from_slice(forcing);
        for &(r, c, v) in &self.linear {
            out[r] += v * u[c];
        }
        self.bilinear_into(u, u, out);
    }

    fn check_len(&self, what: &'static str, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::DimensionMismatch { what, expected: self.dim, found: len });
        }
        Ok(())
    }

    /// SHA-256 over every parameter, used to tag cached kernels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        for x in self.skew.iter().chain(self.damping.iter()) {
            h.update(x.to_le_bytes());
        }
        for t in &self.bilinear {
            h.update((t.i as u64).to_le_bytes());
            h.update((t.j as u64).to_le_bytes());
            h.update((t.k as u64).to_le_bytes());
            h.update(t.coeff.to_le_bytes());
        }
        for x in self.forcing_eq.iter().chain(self.noise.iter()) {
            h.update(x.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn detect_uniform_damping(damping: &DMatrix<f64>) -> Option<f64> {
    let d = -damping[(0, 0)];
    if d <= 0.0 {
        return None;
    }
    let n = damping.nrows();
    for r in 0..n {
        for c in 0..n {
            let expected = if r == c { -d } else { 0.0 };
            if damping[(r, c)] != expected {
                return None;
            }
        }
    }
    Some(d)
}

/// Parameters of the three-mode triad model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriadParams {
    pub d: [f64; 3],
    pub l: [f64; 3],
    pub b: [f64; 3],
    pub f: [f64; 3],
    pub sigma: [f64; 3],
}

impl TriadParams {
    pub fn validate(&self) -> Result<()> {
        let sum = self.b[0] + self.b[1] + self.b[2];
        if sum != 0.0 {
            return Err(Error::TriadConstraint { sum });
        }
        if self.d.iter().any(|&d| d <= 0.0) {
            return Err(Error::InvalidParameter("triad damping rates must be positive".into()));
        }
        Ok(())
    }

    /// Reads the parameters back out of a system built by [`make_triad`].
    pub fn from_system(sys: &QuadraticSystem) -> Option<Self> {
        if sys.dim() != 3 {
            return None;
        }
        let s = sys.skew();
        let dm = sys.damping();
        let mut b = [0.0; 3];
        for t in sys.bilinear() {
            match (t.i, t.j, t.k) {
                (0, 1, 2) => b[0] = t.coeff,
                (1, 2, 0) => b[1] = t.coeff,
                (2, 0, 1) => b[2] = t.coeff,
                _ => return None,
            }
        }
        let f = sys.forcing_eq();
        let n = sys.noise();
        Some(Self {
            d: [-dm[(0, 0)], -dm[(1, 1)], -dm[(2, 2)]],
            l: [s[(2, 1)], s[(0, 2)], s[(1, 0)]],
            b,
            f: [f[0], f[1], f[2]],
            sigma: [n[0], n[1], n[2]],
        })
    }
}

/// Sparse tensor of the triad nonlinearity `(B1 u2 u3, B2 u3 u1, B3 u1 u2)`.
pub fn triad_tensor(b: [f64; 3]) -> Vec<BilinearTerm> {
    vec![
        BilinearTerm::new(0, 1, 2, b[0]),
        BilinearTerm::new(1, 2, 0, b[1]),
        BilinearTerm::new(2, 0, 1, b[2]),
    ]
}

pub fn make_triad(p: &TriadParams) -> Result<QuadraticSystem> {
    p.validate()?;
    let [l1, l2, l3] = p.l;
    #[rustfmt::skip]
    let skew = DMatrix::from_row_slice(3, 3, &[
        0.0, -l3,  l2,
         l3, 0.0, -l1,
        -l2,  l1, 0.0,
    ]);
    let damping = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        3,
        p.d.iter().map(|d| -d),
    ));
    QuadraticSystem::new(skew, damping, triad_tensor(p.b), p.f.to_vec(), p.sigma.to_vec())
}

/// The periodic Lorenz '96 model `du_j/dt = (u_{j+1} - u_{j-2}) u_{j-1} - u_j + F`.
pub fn make_lorenz96(dim: usize, forcing: f64) -> Result<QuadraticSystem> {
    if dim < 4 {
        return Err(Error::InvalidParameter(format!(
            "Lorenz '96 needs at least 4 modes (got {dim})"
        )));
    }
    let mut bilinear = Vec::with_capacity(2 * dim);
    for j in 0..dim {
        let jm1 = (j + dim - 1) % dim;
        let jm2 = (j + dim - 2) % dim;
        let jp1 = (j + 1) % dim;
        bilinear.push(BilinearTerm::new(j, jp1, jm1, 1.0));
        bilinear.push(BilinearTerm::new(j, jm2, jm1, -1.0));
    }
    QuadraticSystem::new(
        DMatrix::zeros(dim, dim),
        -DMatrix::identity(dim, dim),
        bilinear,
        vec![forcing; dim],
        vec![0.0; dim],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Itemized pass/fail results.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), passed, detail: detail.into() });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            let tag = if c.passed { "ok  " } else { "FAIL" };
            if c.detail.is_empty() {
                writeln!(f, "[{tag}] {}", c.name)?;
            } else {
                writeln!(f, "[{tag}] {}: {}", c.name, c.detail)?;
            }
        }
        Ok(())
    }
}

pub const CHECK_SKEW: &str = "skew-symmetric dispersion";
pub const CHECK_DAMPING: &str = "negative semi-definite damping";
pub const CHECK_ENERGY: &str = "energy conservation";
pub const CHECK_SELF: &str = "self-interactions vanish";
pub const CHECK_PAIR: &str = "pair interactions vanish";
pub const CHECK_UNIFORM: &str = "uniform damping flag";

/// Checks the structural assumptions of the energy controller.
///
/// The energy-conservation check draws `n_random` vectors with entries in
/// `[-10, 10]` from a fixed seed and requires `|u . B(u,u)| <= tol |u|^3`.
pub fn verify_structure(sys: &QuadraticSystem, n_random: usize, tol: f64) -> ValidationReport {
    let n = sys.dim();
    let mut report = ValidationReport::default();

    let mut skew_err = 0.0f64;
    for r in 0..n {
        for c in 0..n {
            skew_err = skew_err.max((sys.skew[(r, c)] + sys.skew[(c, r)]).abs());
        }
    }
    report.push(CHECK_SKEW, skew_err <= tol, format!("max |L + L^T| = {skew_err:e}"));

    let sym = (&sys.damping + sys.damping.transpose()) * 0.5;
    let max_eig = sym.symmetric_eigenvalues().max();
    report.push(
        CHECK_DAMPING,
        max_eig <= tol,
        format!("largest eigenvalue of sym(D) = {max_eig:e}"),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let mut u = vec![0.0; n];
    let mut buf = vec![0.0; n];
    let mut worst = 0.0f64;
    for _ in 0..n_random {
        for x in u.iter_mut() {
            *x = rng.random_range(-10.0..=10.0);
        }
        buf.iter_mut().for_each(|x| *x = 0.0);
        sys.bilinear_into(&u, &u, &mut buf);
        let dot: f64 = u.iter().zip(&buf).map(|(a, b)| a * b).sum();
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            worst = worst.max(dot.abs() / norm.powi(3));
        }
    }
    report.push(
        CHECK_ENERGY,
        n_random >= 1 && worst <= tol,
        format!("max |u.B(u,u)|/|u|^3 = {worst:e} over {n_random} vectors"),
    );

    // self[i] = |B(e_i, e_i)|, pair[i][j] = e_i . [B(e_j, e_i) + B(e_i, e_j)]
    let mut self_terms = DMatrix::<f64>::zeros(n, n);
    let mut pair = DMatrix::<f64>::zeros(n, n);
    for t in sys.bilinear() {
        if t.j == t.k {
            self_terms[(t.i, t.j)] += t.coeff;
        }
        if t.k == t.i {
            pair[(t.i, t.j)] += t.coeff;
        }
        if t.j == t.i {
            pair[(t.i, t.k)] += t.coeff;
        }
    }
    let self_err = self_terms.amax();
    let pair_err = pair.amax();
    report.push(CHECK_SELF, self_err <= tol, format!("max |B(e_i, e_i)| = {self_err:e}"));
    report.push(
        CHECK_PAIR,
        pair_err <= tol,
        format!("max |e_i.[B(e_j,e_i) + B(e_i,e_j)]| = {pair_err:e}"),
    );

    let (ok, detail) = match sys.uniform_damping {
        Some(d) => {
            let dev = (&sys.damping + DMatrix::identity(n, n) * d).amax();
            (d > 0.0 && dev <= tol, format!("d = {d}, max |D + dI| = {dev:e}"))
        }
        None => (true, "damping is not uniform".to_string()),
    };
    report.push(CHECK_UNIFORM, ok, detail);
    report
}

#[cfg(test)]
pub(crate) use tests::regime1 as test_regime1;
