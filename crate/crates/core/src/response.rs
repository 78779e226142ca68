//! Quasi-Gaussian fluctuation–dissipation response kernels.
//!
//! The equilibrium density is replaced by a Gaussian with the true
//! equilibrium mean and covariance, which turns the response operators into
//! lagged correlations against the score `G(u) = R_eq^{-1} (u - u_eq)`:
//!
//! ```text
//! R_u[k][l](tau)    = < du_k(tau) G_l(u(0)) >
//! R_R[i][j][l](tau) = < (du_i du_j)(tau) G_l(u(0)) >
//! ```
//!
//! Both are estimated by time averaging over overlapping windows of one long
//! equilibrium trajectory. Start points are split into contiguous batches;
//! the spread of the batch estimates gives the standard errors.
//!
//! The covariance kernel subtracts `R_eq,ij` inside the average. This leaves
//! the expectation unchanged (the score has zero mean) and removes most of the
//! estimator variance.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::csvio;
use crate::ensemble::{stream_rng, COLD_START_STD};
use crate::error::{Error, Result};
use crate::grid::{locate, sample_or_zero, steps_in};
use crate::system::QuadraticSystem;

/// RNG stream reserved for kernel trajectories (ensemble samples use `0..M`).
pub const KERNEL_STREAM: u64 = 1 << 62;

/// Condition number above which the equilibrium covariance is rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Uniform lag grid `tau_m = m * dtau`, `m = 0..lags`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagGrid {
    pub dtau: f64,
    pub lags: usize,
}

impl LagGrid {
    pub fn new(dtau: f64, tau_max: f64) -> Result<Self> {
        Ok(Self { dtau, lags: steps_in(tau_max, dtau, "lag grid")? + 1 })
    }

    pub fn tau_max(&self) -> f64 {
        self.dtau * (self.lags - 1) as f64
    }

    pub fn tau(&self, m: usize) -> f64 {
        self.dtau * m as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanResponseKernel {
    grid: LagGrid,
    dim: usize,
    // [lag][k][l]
    values: Vec<f64>,
    stderr: Option<Vec<f64>>,
}

impl MeanResponseKernel {
    pub fn zeros(dim: usize, grid: LagGrid) -> Self {
        Self { grid, dim, values: vec![0.0; grid.lags * dim * dim], stderr: None }
    }

    /// Kernel with entries `f(k, l, tau)`.
    pub fn from_fn(dim: usize, grid: LagGrid, f: impl Fn(usize, usize, f64) -> f64) -> Self {
        let mut kern = Self::zeros(dim, grid);
        for m in 0..grid.lags {
            for k in 0..dim {
                for l in 0..dim {
                    kern.values[(m * dim + k) * dim + l] = f(k, l, grid.tau(m));
                }
            }
        }
        kern
    }

    pub fn grid(&self) -> LagGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn at(&self, lag: usize, k: usize, l: usize) -> f64 {
        self.values[(lag * self.dim + k) * self.dim + l]
    }

    pub fn stderr_at(&self, lag: usize, k: usize, l: usize) -> Option<f64> {
        self.stderr.as_ref().map(|s| s[(lag * self.dim + k) * self.dim + l])
    }

    /// `R[k][l](tau)` over the whole lag grid.
    pub fn slice(&self, k: usize, l: usize) -> Vec<f64> {
        (0..self.grid.lags).map(|m| self.at(m, k, l)).collect()
    }

    pub fn time_derivative(&self) -> Result<Self> {
        let mut out = Self::zeros(self.dim, self.grid);
        for k in 0..self.dim {
            for l in 0..self.dim {
                let d = kernel_time_derivative(&self.slice(k, l), self.grid.dtau)?;
                for (m, v) in d.into_iter().enumerate() {
                    out.values[(m * self.dim + k) * self.dim + l] = v;
                }
            }
        }
        Ok(out)
    }

    /// True when `|R(tau_max)| > 0.01 |R(0)|` for any diagonal entry.
    pub fn truncated(&self) -> bool {
        (0..self.dim).any(|k| is_truncated(&self.slice(k, k)))
    }

    fn mask_columns(&mut self, keep: &[bool]) {
        let dim = self.dim;
        for (idx, v) in self.values.iter_mut().enumerate() {
            if !keep[idx % dim] {
                *v = 0.0;
            }
        }
        if let Some(s) = self.stderr.as_mut() {
            for (idx, v) in s.iter_mut().enumerate() {
                if !keep[idx % dim] {
                    *v = 0.0;
                }
            }
        }
    }

    /// Long-format CSV `tau,k,l,value` (1-based indices).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let header: Vec<String> = ["tau", "k", "l", "value"].iter().map(|s| s.to_string()).collect();
        let n = self.dim;
        let rows = (0..self.grid.lags).flat_map(|m| {
            (0..n).flat_map(move |k| {
                (0..n).map(move |l| vec![self.grid.tau(m), (k + 1) as f64, (l + 1) as f64, self.at(m, k, l)])
            })
        });
        csvio::write_table(out, &header, &[1, 2], rows)
    }

    pub fn read_csv<R: std::io::Read>(input: R, dim: usize, dtau: f64) -> Result<Self> {
        let (header, rows) = csvio::read_table(input)?;
        if header != ["tau", "k", "l", "value"] {
            return Err(Error::Config(format!("unexpected mean kernel header {header:?}")));
        }
        let lags = rows.iter().map(|r| lag_index(r[0], dtau)).max().map_or(0, |m| m + 1);
        let mut kern = Self::zeros(dim, LagGrid { dtau, lags });
        for r in &rows {
            let (m, k, l) = (lag_index(r[0], dtau), index(r[1], dim)?, index(r[2], dim)?);
            kern.values[(m * dim + k) * dim + l] = r[3];
        }
        Ok(kern)
    }
}

fn lag_index(tau: f64, dtau: f64) -> usize {
    (tau / dtau).round().max(0.0) as usize
}

fn index(x: f64, dim: usize) -> Result<usize> {
    let i = x.round() as i64 - 1;
    if i < 0 || i as usize >= dim || x.fract() != 0.0 {
        return Err(Error::Config(format!("index {x} out of range 1..={dim}")));
    }
    Ok(i as usize)
}

/// Which `(i, j)` pairs of the covariance kernel are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CovSupport {
    /// Every pair `i <= j`.
    #[default]
    Full,
    /// Only pairs that the bilinear tensor contracts against.
    Tensor,
}

/// Covariance response kernel, stored for unordered pairs `i <= j`.
///
/// Pairs outside the support read as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CovResponseKernel {
    grid: LagGrid,
    dim: usize,
    pairs: Vec<(usize, usize)>,
    lookup: HashMap<(usize, usize), usize>,
    // [lag][pair][l]
    values: Vec<f64>,
    stderr: Option<Vec<f64>>,
}

impl CovResponseKernel {
    pub fn zeros(dim: usize, grid: LagGrid, pairs: Vec<(usize, usize)>) -> Self {
        let pairs: Vec<_> = pairs.into_iter().map(|(i, j)| (i.min(j), i.max(j))).collect();
        let lookup = pairs.iter().enumerate().map(|(p, &ij)| (ij, p)).collect();
        let len = grid.lags * pairs.len() * dim;
        Self { grid, dim, pairs, lookup, values: vec![0.0; len], stderr: None }
    }

    /// Kernel over all pairs with entries `f(i, j, l, tau)`; only `i <= j` is queried.
    pub fn from_fn(dim: usize, grid: LagGrid, f: impl Fn(usize, usize, usize, f64) -> f64) -> Self {
        let mut kern = Self::zeros(dim, grid, full_pairs(dim));
        for m in 0..grid.lags {
            for p in 0..kern.pairs.len() {
                let (i, j) = kern.pairs[p];
                for l in 0..dim {
                    let idx = kern.offset(m, p, l);
                    kern.values[idx] = f(i, j, l, grid.tau(m));
                }
            }
        }
        kern
    }

    pub fn grid(&self) -> LagGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    #[inline]
    fn offset(&self, lag: usize, pair: usize, l: usize) -> usize {
        (lag * self.pairs.len() + pair) * self.dim + l
    }

    pub fn pair_index(&self, i: usize, j: usize) -> Option<usize> {
        self.lookup.get(&(i.min(j), i.max(j))).copied()
    }

    /// `R_R[i][j][l](tau_lag)`; symmetric in `(i, j)`.
    pub fn at(&self, lag: usize, i: usize, j: usize, l: usize) -> f64 {
        self.pair_index(i, j).map_or(0.0, |p| self.values[self.offset(lag, p, l)])
    }

    pub fn stderr_at(&self, lag: usize, i: usize, j: usize, l: usize) -> Option<f64> {
        let p = self.pair_index(i, j)?;
        self.stderr.as_ref().map(|s| s[self.offset(lag, p, l)])
    }

    /// `R_R` for pair index `p` and column `l` over the lag grid.
    pub fn pair_slice(&self, p: usize, l: usize) -> Vec<f64> {
        (0..self.grid.lags).map(|m| self.values[self.offset(m, p, l)]).collect()
    }

    fn mask_columns(&mut self, keep: &[bool]) {
        let dim = self.dim;
        for (idx, v) in self.values.iter_mut().enumerate() {
            if !keep[idx % dim] {
                *v = 0.0;
            }
        }
        if let Some(s) = self.stderr.as_mut() {
            for (idx, v) in s.iter_mut().enumerate() {
                if !keep[idx % dim] {
                    *v = 0.0;
                }
            }
        }
    }

    /// Long-format CSV `tau,i,j,l,value` over the stored pairs (`i <= j`, 1-based).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let header: Vec<String> =
            ["tau", "i", "j", "l", "value"].iter().map(|s| s.to_string()).collect();
        let n = self.dim;
        let rows = (0..self.grid.lags).flat_map(|m| {
            (0..self.pairs.len()).flat_map(move |p| {
                let (i, j) = self.pairs[p];
                (0..n).map(move |l| {
                    vec![
                        self.grid.tau(m),
                        (i + 1) as f64,
                        (j + 1) as f64,
                        (l + 1) as f64,
                        self.values[self.offset(m, p, l)],
                    ]
                })
            })
        });
        csvio::write_table(out, &header, &[1, 2, 3], rows)
    }

    pub fn read_csv<R: std::io::Read>(input: R, dim: usize, dtau: f64) -> Result<Self> {
        let (header, rows) = csvio::read_table(input)?;
        if header != ["tau", "i", "j", "l", "value"] {
            return Err(Error::Config(format!("unexpected covariance kernel header {header:?}")));
        }
        let lags = rows.iter().map(|r| lag_index(r[0], dtau)).max().map_or(0, |m| m + 1);
        let mut pairs = Vec::new();
        let mut seen = HashMap::new();
        for r in &rows {
            let (i, j) = (index(r[1], dim)?, index(r[2], dim)?);
            let key = (i.min(j), i.max(j));
            seen.entry(key).or_insert_with(|| {
                pairs.push(key);
            });
        }
        let mut kern = Self::zeros(dim, LagGrid { dtau, lags }, pairs);
        for r in &rows {
            let (i, j, l) = (index(r[1], dim)?, index(r[2], dim)?, index(r[3], dim)?);
            let p = kern.pair_index(i, j).expect("pair registered above");
            let idx = kern.offset(lag_index(r[0], dtau), p, l);
            kern.values[idx] = r[4];
        }
        Ok(kern)
    }
}

pub fn full_pairs(dim: usize) -> Vec<(usize, usize)> {
    (0..dim).flat_map(|i| (i..dim).map(move |j| (i, j))).collect()
}

/// Unordered pairs `(j, k)` appearing in the bilinear tensor, in first-seen order.
pub fn tensor_pairs(sys: &QuadraticSystem) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for t in sys.bilinear() {
        let key = (t.j.min(t.k), t.j.max(t.k));
        if !out.contains(&key) {
            out.push(key);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KernelSelection {
    Mean,
    Covariance,
    #[default]
    Both,
}

impl KernelSelection {
    pub fn mean(self) -> bool {
        matches!(self, Self::Mean | Self::Both)
    }
    pub fn cov(self) -> bool {
        matches!(self, Self::Covariance | Self::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelOptions {
    /// Length of the recorded equilibrium trajectory.
    pub t_sample: f64,
    /// Spin-up before recording starts.
    pub t_spin: f64,
    /// Integration step of the trajectory.
    pub dt: f64,
    pub dtau: f64,
    pub tau_max: f64,
    pub seed: u64,
    pub which: KernelSelection,
    /// Average over cyclic index shifts (models with translation symmetry).
    pub translation_invariant: bool,
    pub cov_support: CovSupport,
    /// Use every `start_stride`-th recorded point as a window start.
    pub start_stride: usize,
    pub batches: usize,
    /// Columns `l` to keep; the rest are truncated to zero.
    pub mode_mask: Option<Vec<bool>>,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            t_sample: 2000.0,
            t_spin: 50.0,
            dt: 1e-3,
            dtau: 1e-2,
            tau_max: 10.0,
            seed: 0,
            which: KernelSelection::Both,
            translation_invariant: false,
            cov_support: CovSupport::Full,
            start_stride: 1,
            batches: 16,
            mode_mask: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMeta {
    pub seed: u64,
    pub t_sample: f64,
    pub dtau: f64,
    pub tau_max: f64,
    pub system_hash: String,
    pub dim: usize,
    pub start_points: usize,
    pub batches: usize,
    pub translation_invariant: bool,
    pub mean_eq: Vec<f64>,
    pub cov_eq: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ResponseKernels {
    pub mean: Option<MeanResponseKernel>,
    pub cov: Option<CovResponseKernel>,
    pub meta: KernelMeta,
}

pub const MEAN_KERNEL_FILE: &str = "mean_kernel.csv";
pub const COV_KERNEL_FILE: &str = "cov_kernel.csv";
pub const KERNEL_META_FILE: &str = "kernels_meta.json";

impl ResponseKernels {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        if let Some(m) = &self.mean {
            m.write_csv(BufWriter::new(File::create(dir.join(MEAN_KERNEL_FILE))?))?;
        }
        if let Some(c) = &self.cov {
            c.write_csv(BufWriter::new(File::create(dir.join(COV_KERNEL_FILE))?))?;
        }
        let mut f = BufWriter::new(File::create(dir.join(KERNEL_META_FILE))?);
        serde_json::to_writer_pretty(&mut f, &self.meta)?;
        writeln!(f)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let meta: KernelMeta =
            serde_json::from_reader(BufReader::new(File::open(dir.join(KERNEL_META_FILE))?))?;
        let mean_path = dir.join(MEAN_KERNEL_FILE);
        let cov_path = dir.join(COV_KERNEL_FILE);
        let mean = if mean_path.exists() {
            Some(MeanResponseKernel::read_csv(File::open(mean_path)?, meta.dim, meta.dtau)?)
        } else {
            None
        };
        let cov = if cov_path.exists() {
            Some(CovResponseKernel::read_csv(File::open(cov_path)?, meta.dim, meta.dtau)?)
        } else {
            None
        };
        Ok(Self { mean, cov, meta })
    }

    pub fn cov_eq(&self) -> DMatrix<f64> {
        let n = self.meta.dim;
        DMatrix::from_fn(n, n, |i, j| self.meta.cov_eq[i][j])
    }
}

/// Integrates one trajectory and records it every `record_every` steps.
fn record_trajectory(
    sys: &QuadraticSystem,
    opts: &KernelOptions,
    record_every: usize,
    records: usize,
) -> Result<Vec<f64>> {
    let n = sys.dim();
    let mut rng = stream_rng(opts.seed, KERNEL_STREAM);
    let mut u: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            COLD_START_STD * z
        })
        .collect();
    let amp: Vec<f64> = sys.noise().iter().map(|s| s * opts.dt.sqrt()).collect();
    let forcing = sys.forcing_eq();
    let mut rate = vec![0.0; n];
    let mut step = |u: &mut [f64], rng: &mut rand_chacha::ChaCha8Rng| -> Result<()> {
        sys.drift_into(u, forcing, &mut rate);
        for k in 0..n {
            u[k] += opts.dt * rate[k];
            if amp[k] != 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                u[k] += amp[k] * z;
            }
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::BlowUp { sample: 0, time: f64::NAN });
        }
        Ok(())
    };
    for _ in 0..steps_in(opts.t_spin, opts.dt, "kernel spin-up")? {
        step(&mut u, &mut rng)?;
    }
    let mut out = Vec::with_capacity(records * n);
    out.extend_from_slice(&u);
    for _ in 1..records {
        for _ in 0..record_every {
            step(&mut u, &mut rng)?;
        }
        out.extend_from_slice(&u);
    }
    Ok(out)
}

pub(crate) fn circulant_average(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let n = cov.nrows();
    let mut c = vec![0.0; n];
    for (o, co) in c.iter_mut().enumerate() {
        *co = (0..n).map(|i| cov[(i, (i + o) % n)]).sum::<f64>() / n as f64;
    }
    let sym: Vec<f64> = (0..n).map(|o| 0.5 * (c[o] + c[(n - o) % n])).collect();
    DMatrix::from_fn(n, n, |i, j| sym[(j + n - i) % n])
}

/// Inverse of a symmetric positive definite covariance, rejecting ill-conditioned input.
pub fn checked_inverse(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = cov.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularCovariance { condition });
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| 1.0 / x));
    let inv = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Running mean / variance across batch estimates, in batch order.
struct BatchAccumulator {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl BatchAccumulator {
    fn new(len: usize) -> Self {
        Self { count: 0, mean: vec![0.0; len], m2: vec![0.0; len] }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let c = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / c;
            *s += d * (v - *m);
        }
    }

    /// Mean and standard error of the mean.
    fn finish(self) -> (Vec<f64>, Vec<f64>) {
        let c = self.count as f64;
        let se = self.m2.iter().map(|s| (s / (c - 1.0) / c).sqrt()).collect();
        (self.mean, se)
    }
}

fn for_each_lag<F>(acc: &mut [f64], per_lag: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        acc.par_chunks_mut(per_lag).enumerate().for_each(|(m, a)| f(m, a));
    }
    #[cfg(not(feature = "parallel"))]
    {
        acc.chunks_mut(per_lag).enumerate().for_each(|(m, a)| f(m, a));
    }
}

/// Averages a `[lag][k][l]` block over cyclic shifts `(k, l) -> (k + s, l + s)`.
fn symmetrize_mean(block: &mut [f64], dim: usize) {
    for lag in block.chunks_mut(dim * dim) {
        let mut f = vec![0.0; dim];
        for k in 0..dim {
            for l in 0..dim {
                f[(k + dim - l) % dim] += lag[k * dim + l];
            }
        }
        for k in 0..dim {
            for l in 0..dim {
                lag[k * dim + l] = f[(k + dim - l) % dim] / dim as f64;
            }
        }
    }
}

/// Averages a `[lag][pair][l]` block over cyclic shifts of `(i, j, l)`.
fn symmetrize_cov(block: &mut [f64], dim: usize, pairs: &[(usize, usize)]) {
    let class = |i: usize, j: usize, l: usize| {
        let a = (i + dim - l) % dim;
        let b = (j + dim - l) % dim;
        a.min(b) * dim + a.max(b)
    };
    let per_lag = pairs.len() * dim;
    for lag in block.chunks_mut(per_lag) {
        let mut sum = vec![0.0; dim * dim];
        let mut count = vec![0usize; dim * dim];
        for (p, &(i, j)) in pairs.iter().enumerate() {
            for l in 0..dim {
                let c = class(i, j, l);
                sum[c] += lag[p * dim + l];
                count[c] += 1;
            }
        }
        for (p, &(i, j)) in pairs.iter().enumerate() {
            for l in 0..dim {
                let c = class(i, j, l);
                lag[p * dim + l] = sum[c] / count[c] as f64;
            }
        }
    }
}

/// Estimates the quasi-Gaussian mean and/or covariance response kernels from a
/// single long equilibrium trajectory.
pub fn estimate_kernels(sys: &QuadraticSystem, opts: &KernelOptions) -> Result<ResponseKernels> {
    let n = sys.dim();
    let record_every = steps_in(opts.dtau, opts.dt, "kernel lag step vs integration step")?;
    if record_every == 0 {
        return Err(Error::InvalidParameter("kernel lag step must be positive".into()));
    }
    let grid = LagGrid::new(opts.dtau, opts.tau_max)?;
    if grid.lags < 3 {
        return Err(Error::InvalidParameter("kernel lag grid needs at least 3 points".into()));
    }
    let records = steps_in(opts.t_sample, opts.dtau, "kernel sampling length")? + 1;
    let stride = opts.start_stride.max(1);
    let batches = opts.batches.max(2);
    if records < grid.lags + stride * batches {
        return Err(Error::InvalidParameter(format!(
            "sampling length {} is too short for tau_max {} with {batches} batches",
            opts.t_sample, opts.tau_max
        )));
    }
    if let Some(mask) = &opts.mode_mask {
        if mask.len() != n {
            return Err(Error::DimensionMismatch { what: "mode mask", expected: n, found: mask.len() });
        }
    }

    let traj = record_trajectory(sys, opts, record_every, records)?;

    let mut mean_eq = vec![0.0; n];
    for u in traj.chunks(n) {
        for k in 0..n {
            mean_eq[k] += u[k];
        }
    }
    mean_eq.iter_mut().for_each(|x| *x /= records as f64);
    let mut cov_eq = DMatrix::<f64>::zeros(n, n);
    for u in traj.chunks(n) {
        for i in 0..n {
            for j in 0..=i {
                cov_eq[(i, j)] += (u[i] - mean_eq[i]) * (u[j] - mean_eq[j]);
            }
        }
    }
    for i in 0..n {
        for j in 0..=i {
            cov_eq[(i, j)] /= (records - 1) as f64;
            cov_eq[(j, i)] = cov_eq[(i, j)];
        }
    }
    if opts.translation_invariant {
        let avg = mean_eq.iter().sum::<f64>() / n as f64;
        mean_eq.iter_mut().for_each(|x| *x = avg);
        cov_eq = circulant_average(&cov_eq);
    }
    let precision = checked_inverse(&cov_eq)?;

    let mut du = traj;
    for u in du.chunks_mut(n) {
        for k in 0..n {
            u[k] -= mean_eq[k];
        }
    }
    let mut score = vec![0.0; du.len()];
    for (g, u) in score.chunks_mut(n).zip(du.chunks(n)) {
        for l in 0..n {
            g[l] = (0..n).map(|m| precision[(l, m)] * u[m]).sum();
        }
    }

    let starts: Vec<usize> = (0..=records - grid.lags).step_by(stride).collect();
    let pairs = match opts.cov_support {
        CovSupport::Full => full_pairs(n),
        CovSupport::Tensor => tensor_pairs(sys),
    };
    let pair_eq: Vec<f64> = pairs.iter().map(|&(i, j)| cov_eq[(i, j)]).collect();

    let mean_len = grid.lags * n * n;
    let cov_len = grid.lags * pairs.len() * n;
    let mut mean_acc = opts.which.mean().then(|| BatchAccumulator::new(mean_len));
    let mut cov_acc = opts.which.cov().then(|| BatchAccumulator::new(cov_len));

    for b in 0..batches {
        let batch = &starts[b * starts.len() / batches..(b + 1) * starts.len() / batches];
        let scale = 1.0 / batch.len() as f64;
        if let Some(acc) = mean_acc.as_mut() {
            let mut block = vec![0.0; mean_len];
            for_each_lag(&mut block, n * n, |m, a| {
                for &s in batch {
                    let x = &du[(s + m) * n..(s + m + 1) * n];
                    let g = &score[s * n..(s + 1) * n];
                    for k in 0..n {
                        let xk = x[k];
                        let row = &mut a[k * n..(k + 1) * n];
                        for l in 0..n {
                            row[l] += xk * g[l];
                        }
                    }
                }
                a.iter_mut().for_each(|v| *v *= scale);
            });
            if opts.translation_invariant {
                symmetrize_mean(&mut block, n);
            }
            acc.push(&block);
        }
        if let Some(acc) = cov_acc.as_mut() {
            let mut block = vec![0.0; cov_len];
            let np = pairs.len();
            for_each_lag(&mut block, np * n, |m, a| {
                let mut prod = vec![0.0; np];
                for &s in batch {
                    let x = &du[(s + m) * n..(s + m + 1) * n];
                    let g = &score[s * n..(s + 1) * n];
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        prod[p] = x[i] * x[j] - pair_eq[p];
                    }
                    for p in 0..np {
                        let w = prod[p];
                        let row = &mut a[p * n..(p + 1) * n];
                        for l in 0..n {
                            row[l] += w * g[l];
                        }
                    }
                }
                a.iter_mut().for_each(|v| *v *= scale);
            });
            if opts.translation_invariant {
                symmetrize_cov(&mut block, n, &pairs);
            }
            acc.push(&block);
        }
    }

    let keep = opts.mode_mask.clone().unwrap_or_else(|| vec![true; n]);
    let mut warnings = Vec::new();
    let mean = mean_acc.map(|acc| {
        let (values, se) = acc.finish();
        let mut kern = MeanResponseKernel { grid, dim: n, values, stderr: Some(se) };
        kern.mask_columns(&keep);
        for k in 0..n {
            if keep[k] && is_truncated(&kern.slice(k, k)) {
                warnings.push(format!(
                    "mean kernel ({}, {}) has not decayed to 1% by tau_max = {}",
                    k + 1,
                    k + 1,
                    grid.tau_max()
                ));
            }
        }
        kern
    });
    let cov = cov_acc.map(|acc| {
        let (values, se) = acc.finish();
        let mut kern = CovResponseKernel::zeros(n, grid, pairs.clone());
        kern.values = values;
        kern.stderr = Some(se);
        kern.mask_columns(&keep);
        kern
    });

    let meta = KernelMeta {
        seed: opts.seed,
        t_sample: opts.t_sample,
        dtau: opts.dtau,
        tau_max: grid.tau_max(),
        system_hash: sys.fingerprint(),
        dim: n,
        start_points: starts.len(),
        batches,
        translation_invariant: opts.translation_invariant,
        mean_eq,
        cov_eq: (0..n).map(|i| (0..n).map(|j| cov_eq[(i, j)]).collect()).collect(),
        warnings,
    };
    Ok(ResponseKernels { mean, cov, meta })
}

/// History integral `int_0^t R(t - s) kappa(s) ds`.
///
/// Kernel and signal are linearly interpolated onto a uniform trapezoid grid
/// whose step is the finer of the two sampling steps. The kernel is zero past
/// its last lag; the signal must cover `[0, t]`.
pub fn convolve(kernel: &[f64], kernel_dt: f64, signal: &[f64], signal_dt: f64, t: f64) -> Result<f64> {
    let signal_end = signal_dt * signal.len().saturating_sub(1) as f64;
    if signal.is_empty() || t < 0.0 || t > signal_end * (1.0 + 1e-12) + 1e-15 {
        return Err(Error::OutOfSupport { t, end: signal_end });
    }
    if t == 0.0 || kernel.is_empty() {
        return Ok(0.0);
    }
    let h0 = kernel_dt.min(signal_dt);
    let steps = ((t / h0) - 1e-9).ceil().max(1.0) as usize;
    let h = t / steps as f64;
    let mut sum = 0.0;
    for i in 0..=steps {
        let s = i as f64 * h;
        let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
        let r = sample_or_zero(kernel, kernel_dt, t - s);
        let (si, sw) = locate(s, signal_dt, signal.len());
        let k = if sw == 0.0 { signal[si] } else { signal[si] + sw * (signal[si + 1] - signal[si]) };
        sum += w * r * k;
    }
    Ok(sum * h)
}

/// Pre-forcing contribution `delta_f * int_t^{tau_max} R(tau) dtau`.
///
/// The kernel is taken as zero past `tau_max`; see [`is_truncated`].
pub fn tail_integral(kernel: &[f64], dtau: f64, delta_f: f64, t: f64) -> f64 {
    if delta_f == 0.0 || kernel.len() < 2 {
        return 0.0;
    }
    let tau_max = dtau * (kernel.len() - 1) as f64;
    if t >= tau_max {
        return 0.0;
    }
    let t = t.max(0.0);
    let (i, w) = locate(t, dtau, kernel.len());
    let mut sum = 0.0;
    let first = if w == 0.0 {
        i
    } else {
        let rt = kernel[i] + w * (kernel[i + 1] - kernel[i]);
        sum += 0.5 * ((i + 1) as f64 * dtau - t) * (rt + kernel[i + 1]);
        i + 1
    };
    for m in first..kernel.len() - 1 {
        sum += 0.5 * dtau * (kernel[m] + kernel[m + 1]);
    }
    delta_f * sum
}

/// `int_{tau_m}^{tau_max} R` at every lag node (trapezoid suffix sums).
pub fn tail_profile(kernel: &[f64], dtau: f64) -> Vec<f64> {
    let mut out = vec![0.0; kernel.len()];
    for m in (0..kernel.len().saturating_sub(1)).rev() {
        out[m] = out[m + 1] + 0.5 * dtau * (kernel[m] + kernel[m + 1]);
    }
    out
}

/// True when the kernel has not decayed to 1% of its zero-lag value by its last lag.
pub fn is_truncated(kernel: &[f64]) -> bool {
    match (kernel.first(), kernel.last()) {
        (Some(r0), Some(rt)) => rt.abs() > 0.01 * r0.abs(),
        _ => false,
    }
}

/// Centered differences on the lag grid; second-order one-sided at the ends.
pub fn kernel_time_derivative(kernel: &[f64], dtau: f64) -> Result<Vec<f64>> {
    let n = kernel.len();
    if n < 3 {
        return Err(Error::InvalidParameter(format!(
            "kernel derivative needs at least 3 lags (got {n})"
        )));
    }
    let mut out = vec![0.0; n];
    out[0] = (-3.0 * kernel[0] + 4.0 * kernel[1] - kernel[2]) / (2.0 * dtau);
    for m in 1..n - 1 {
        out[m] = (kernel[m + 1] - kernel[m - 1]) / (2.0 * dtau);
    }
    out[n - 1] = (3.0 * kernel[n - 1] - 4.0 * kernel[n - 2] + kernel[n - 3]) / (2.0 * dtau);
    Ok(out)
}

/// Resamples a kernel onto step `dt` (linear interpolation, zero past the end).
pub fn resample(kernel: &[f64], dtau: f64, dt: f64) -> Vec<f64> {
    if (dtau - dt).abs() <= 1e-12 * dt {
        return kernel.to_vec();
    }
    let tau_max = dtau * (kernel.len() - 1) as f64;
    let n = (tau_max / dt + 1e-9).floor() as usize + 1;
    (0..n).map(|m| sample_or_zero(kernel, dtau, m as f64 * dt)).collect()
}
