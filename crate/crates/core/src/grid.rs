//! Uniform time grids starting at `t = 0`.

use crate::error::{Error, Result};

const DIVISIBILITY_TOL: f64 = 1e-9;

/// Number of `step`-sized intervals in `span`; errors unless `step` divides `span`.
pub fn steps_in(span: f64, step: f64, what: &str) -> Result<usize> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidParameter(format!("{what}: step must be positive (got {step})")));
    }
    if !(span >= 0.0) || !span.is_finite() {
        return Err(Error::InvalidParameter(format!("{what}: span must be non-negative (got {span})")));
    }
    let n = (span / step).round();
    if (n * step - span).abs() > DIVISIBILITY_TOL * span.max(step) {
        return Err(Error::InvalidParameter(format!(
            "{what}: step {step} does not divide span {span}"
        )));
    }
    Ok(n as usize)
}

/// Vector-valued samples on the nodes `t_n = n * dt`, `n = 0..rows.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorSeries {
    pub dt: f64,
    pub rows: Vec<Vec<f64>>,
}

impl VectorSeries {
    pub fn zeros(dim: usize, dt: f64, nodes: usize) -> Self {
        Self { dt, rows: vec![vec![0.0; dim]; nodes] }
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn nodes(&self) -> usize {
        self.rows.len()
    }

    /// Time of the last node.
    pub fn end(&self) -> f64 {
        self.dt * self.rows.len().saturating_sub(1) as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        self.dt * n as f64
    }

    /// One component as a scalar series.
    pub fn component(&self, k: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[k]).collect()
    }

    /// Piecewise-linear interpolation at `t`.
    pub fn interpolate_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let end = self.end();
        if self.rows.is_empty() || t < -DIVISIBILITY_TOL * self.dt || t > end + DIVISIBILITY_TOL * self.dt.max(end) {
            return Err(Error::OutOfSupport { t, end });
        }
        let (i, w) = locate(t, self.dt, self.rows.len());
        let lo = &self.rows[i];
        if w == 0.0 {
            out.copy_from_slice(lo);
        } else {
            let hi = &self.rows[i + 1];
            for ((o, a), b) in out.iter_mut().zip(lo).zip(hi) {
                *o = a + w * (b - a);
            }
        }
        Ok(())
    }
}

/// Bracketing node and weight for `t` on a grid of `len` nodes, clamped to the grid.
#[inline]
pub(crate) fn locate(t: f64, dt: f64, len: usize) -> (usize, f64) {
    let x = (t / dt).max(0.0);
    let i = x.floor() as usize;
    if i + 1 >= len {
        return (len - 1, 0.0);
    }
    let w = x - i as f64;
    // snap rounding noise so exact nodes copy the stored value
    if w < 1e-12 {
        (i, 0.0)
    } else if w > 1.0 - 1e-12 {
        (i + 1, 0.0)
    } else {
        (i, w)
    }
}

/// Piecewise-linear interpolation of scalar samples; zero beyond the last node.
#[inline]
pub(crate) fn sample_or_zero(values: &[f64], dt: f64, t: f64) -> f64 {
    let end = dt * (values.len() - 1) as f64;
    if t > end * (1.0 + 1e-12) + 1e-15 {
        return 0.0;
    }
    let (i, w) = locate(t, dt, values.len());
    if w == 0.0 {
        values[i]
    } else {
        values[i] + w * (values[i + 1] - values[i])
    }
}
