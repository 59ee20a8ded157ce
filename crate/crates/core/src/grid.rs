//! Gridded state fields, per-variable statistics, path interpolation and metrics.
//!
//! Values are stored row-major in `(h, w, v)` order. That order is also the
//! on-disk order of the trajectory format.

use crate::error::{Error, Result};

/// An `H × W × V` field of finite 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    h: usize,
    w: usize,
    v: usize,
    values: Vec<f64>,
    variable_names: Vec<String>,
}

impl GridState {
    pub fn new(h: usize, w: usize, v: usize, values: Vec<f64>, variable_names: Vec<String>) -> Result<Self> {
        if h < 1 || w < 2 || v < 1 {
            return Err(Error::InvalidArgument(format!(
                "grid dims must satisfy H >= 1, W >= 2, V >= 1 (got {h}x{w}x{v})"
            )));
        }
        if values.len() != h * w * v {
            return Err(Error::shape("values", h * w * v, values.len()));
        }
        if variable_names.len() != v {
            return Err(Error::shape("variable_names", v, variable_names.len()));
        }
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite value at flat index {i}")));
        }
        Ok(Self {
            h,
            w,
            v,
            values,
            variable_names,
        })
    }

    /// A constant field with default variable names `x0..x{V-1}`.
    pub fn filled(h: usize, w: usize, v: usize, value: f64) -> Result<Self> {
        Self::new(h, w, v, vec![value; h * w * v], default_names(v))
    }

    pub fn zeros_like(&self) -> Self {
        self.with_values(vec![0.0; self.values.len()])
    }

    /// Same shape and names, new values. Callers guarantee the length.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            h: self.h,
            w: self.w,
            v: self.v,
            values,
            variable_names: self.variable_names.clone(),
        }
    }

    /// Like [`GridState::with_values`] but rejects non-finite entries.
    pub fn try_with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::shape("values", self.values.len(), values.len()));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite value".into()));
        }
        Ok(self.with_values(values))
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn v(&self) -> usize {
        self.v
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.v)
    }

    pub fn points(&self) -> usize {
        self.h * self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn variable_names(&self) -> &[String] {
        &self.variable_names
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.w + j) * self.v + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    /// Checks that `other` can be combined with `self` elementwise.
    pub fn check_compatible(&self, other: &GridState) -> Result<()> {
        if self.h != other.h {
            return Err(Error::shape("H", self.h, other.h));
        }
        if self.w != other.w {
            return Err(Error::shape("W", self.w, other.w));
        }
        if self.v != other.v {
            return Err(Error::shape("V", self.v, other.v));
        }
        if self.variable_names != other.variable_names {
            return Err(Error::shape(
                "variable_names",
                self.variable_names.join(","),
                other.variable_names.join(","),
            ));
        }
        Ok(())
    }

    /// Elementwise `self + scale * other`.
    pub fn axpy(&self, scale: f64, other: &GridState) -> Result<GridState> {
        self.check_compatible(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + scale * b)
            .collect();
        Ok(self.with_values(values))
    }

    pub fn sub(&self, other: &GridState) -> Result<GridState> {
        self.axpy(-1.0, other)
    }

    pub fn max_abs_diff(&self, other: &GridState) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

pub fn default_names(v: usize) -> Vec<String> {
    (0..v).map(|k| format!("x{k}")).collect()
}

/// Per-variable climatological mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableStats {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl VariableStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::shape("stats", mean.len(), std.len()));
        }
        if mean.is_empty() {
            return Err(Error::InvalidArgument("stats need at least one variable".into()));
        }
        if let Some((k, s)) = std.iter().enumerate().find(|(_, s)| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "std of variable {k} must be positive and finite, got {s}"
            )));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("non-finite mean".into()));
        }
        Ok(Self { mean, std })
    }

    /// Unit statistics (mean 0, std 1) for `v` variables.
    pub fn identity(v: usize) -> Self {
        Self {
            mean: vec![0.0; v],
            std: vec![1.0; v],
        }
    }

    /// Pooled statistics over every grid point of every state.
    pub fn from_states<'a>(states: impl IntoIterator<Item = &'a GridState>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for s in states {
            if sum.is_empty() {
                sum = vec![0.0; s.v()];
                sum_sq = vec![0.0; s.v()];
            } else if s.v() != sum.len() {
                return Err(Error::shape("V", sum.len(), s.v()));
            }
            for chunk in s.values().chunks_exact(s.v()) {
                for (k, x) in chunk.iter().enumerate() {
                    sum[k] += x;
                    sum_sq[k] += x * x;
                }
            }
            count += s.points();
        }
        if count == 0 {
            return Err(Error::InvalidArgument("no states to compute statistics from".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / n - m * m).max(0.0).sqrt())
            .collect();
        Self::new(mean, std)
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }
}

fn check_stats(x: &GridState, s: &VariableStats) -> Result<()> {
    if s.len() != x.v() {
        return Err(Error::shape("V", x.v(), s.len()));
    }
    Ok(())
}

/// Per-variable RMSE over all grid points, unweighted.
pub fn rmse_per_variable(a: &GridState, b: &GridState) -> Result<Vec<f64>> {
    a.check_compatible(b)?;
    let v = a.v();
    let mut acc = vec![0.0; v];
    for (ca, cb) in a.values().chunks_exact(v).zip(b.values().chunks_exact(v)) {
        for k in 0..v {
            let d = ca[k] - cb[k];
            acc[k] += d * d;
        }
    }
    let n = a.points() as f64;
    Ok(acc.into_iter().map(|s| (s / n).sqrt()).collect())
}

/// `(x - mean) / std` per variable.
pub fn normalize(x: &GridState, s: &VariableStats) -> Result<GridState> {
    check_stats(x, s)?;
    let v = x.v();
    let values = x
        .values()
        .iter()
        .enumerate()
        .map(|(i, val)| (val - s.mean[i % v]) / s.std[i % v])
        .collect();
    Ok(x.with_values(values))
}

/// Inverse of [`normalize`].
pub fn denormalize(x: &GridState, s: &VariableStats) -> Result<GridState> {
    check_stats(x, s)?;
    let v = x.v();
    let values = x
        .values()
        .iter()
        .enumerate()
        .map(|(i, val)| val * s.std[i % v] + s.mean[i % v])
        .collect();
    Ok(x.with_values(values))
}

/// Point on the straight path `(1 - tau) * x0 + tau * x1`, `tau` in `[0, 1]`.
pub fn lerp_states(x0: &GridState, x1: &GridState, tau: f64) -> Result<GridState> {
    x0.check_compatible(x1)?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!(
            "path parameter must lie in [0, 1], got {tau}"
        )));
    }
    let values = x0
        .values()
        .iter()
        .zip(x1.values())
        .map(|(a, b)| (1.0 - tau) * a + tau * b)
        .collect();
    Ok(x0.with_values(values))
}
