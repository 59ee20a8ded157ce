//! Classical reference assimilators.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridState;
use crate::obs::ObservationSet;
use crate::setconv::{lift, wrap_offset, Kernel, DEFAULT_WINDOW};

/// Largest observation count accepted by the dense solve.
pub const OI_MAX_OBS: usize = 5000;
/// Floor applied to the observation-error std when observations are exact.
pub const OI_SIGMA_O_FLOOR: f64 = 0.01;

fn check_obs(x_b: &GridState, obs: &ObservationSet) -> Result<()> {
    if obs.v() != x_b.v() {
        return Err(Error::shape("V", x_b.v(), obs.v()));
    }
    obs.check_domain(x_b.h(), x_b.w())
}

/// Settings of the interpolation-blend baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpConfig {
    pub length_scale: f64,
    pub window: usize,
}

impl Default for InterpConfig {
    fn default() -> Self {
        Self {
            length_scale: 1.0,
            window: DEFAULT_WINDOW,
        }
    }
}

/// Gaussian lift of the observations blended into the background with weight
/// `rho / (rho + 1)`.
pub fn interp_blend(x_b: &GridState, obs: &ObservationSet, cfg: &InterpConfig) -> Result<GridState> {
    if !(cfg.length_scale > 0.0) {
        return Err(Error::Config("interp.length_scale must be > 0".into()));
    }
    check_obs(x_b, obs)?;
    if obs.is_empty() {
        return Ok(x_b.clone());
    }
    let (h, w, v) = x_b.dims();
    crate::obs::validate_window(cfg.window, h, w)?;
    let obs = match obs.local_rates() {
        Some(_) => obs.clone(),
        None => obs.clone().populate_local_rates(cfg.window, h, w)?,
    };
    let kernel = Kernel::Gaussian {
        lh: cfg.length_scale,
        lw: cfg.length_scale,
    };
    // The fallback only appears where the blend weight is below 1e-8.
    let fallback = vec![0.0; v];
    let lifted = lift(&obs, h, w, &kernel, Some(cfg.window), &fallback)?;
    let values = x_b
        .values()
        .iter()
        .zip(lifted.x_o.values())
        .enumerate()
        .map(|(i, (b, o))| {
            let rho = lifted.rho.values[i / v];
            b + rho / (rho + 1.0) * (o - b)
        })
        .collect();
    Ok(x_b.with_values(values))
}

/// Optimal-interpolation settings. `sigma_b` and `sigma_o` are in units of
/// the per-variable climatological std; since both covariances scale with the
/// same variance the gain does not depend on it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OIConfig {
    pub length_scale: f64,
    pub sigma_b: f64,
    pub sigma_o: f64,
    /// Relative jitter on the innovation-covariance diagonal.
    pub solver_tol: f64,
}

impl Default for OIConfig {
    fn default() -> Self {
        Self {
            length_scale: 2.0,
            sigma_b: 1.0,
            sigma_o: OI_SIGMA_O_FLOOR,
            solver_tol: 1e-10,
        }
    }
}

impl OIConfig {
    /// Default configuration matched to relative observation noise `sigma_noise`.
    pub fn for_noise(sigma_noise: f64) -> Self {
        Self {
            sigma_o: sigma_noise.max(OI_SIGMA_O_FLOOR),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length_scale > 0.0 && self.sigma_b > 0.0 && self.sigma_o >= 0.0 && self.solver_tol >= 0.0) {
            return Err(Error::Config(format!(
                "oi needs length_scale > 0, sigma_b > 0, sigma_o >= 0, solver_tol >= 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Bilinear interpolation stencil of one continuous coordinate.
fn bilinear(coord: (f64, f64), h: usize, w: usize) -> Vec<(usize, f64)> {
    let (ch, cw) = coord;
    let (fh, fw) = (ch.floor(), cw.floor());
    let (th, tw) = (ch - fh, cw - fw);
    let mut out = Vec::with_capacity(4);
    for (dh, wh) in [(0usize, 1.0 - th), (1, th)] {
        for (dw, ww) in [(0usize, 1.0 - tw), (1, tw)] {
            let wt = wh * ww;
            if wt == 0.0 {
                continue;
            }
            let i = (fh as usize + dh) % h;
            let j = (fw as usize + dw) % w;
            out.push((i * w + j, wt));
        }
    }
    out
}

fn correlation(a: usize, b: usize, h: usize, w: usize, length: f64) -> f64 {
    let dh = wrap_offset((a / w) as f64 - (b / w) as f64, h);
    let dw = wrap_offset((a % w) as f64 - (b % w) as f64, w);
    (-(dh * dh + dw * dw) / (2.0 * length * length)).exp()
}

/// `x_b + B Hᵀ (H B Hᵀ + R)⁻¹ (y − H x_b)` with a Gaussian toroidal `B`,
/// diagonal `R` and bilinear `H`, applied per variable.
pub fn optimal_interpolation(x_b: &GridState, obs: &ObservationSet, cfg: &OIConfig) -> Result<GridState> {
    cfg.validate()?;
    check_obs(x_b, obs)?;
    let m = obs.len();
    if m == 0 {
        return Ok(x_b.clone());
    }
    if m > OI_MAX_OBS {
        return Err(Error::OutOfRange(format!(
            "{m} observations exceed the dense-solve limit of {OI_MAX_OBS}"
        )));
    }
    let (h, w, v) = x_b.dims();
    let n = h * w;
    let stencils: Vec<Vec<(usize, f64)>> = obs.coords().iter().map(|&c| bilinear(c, h, w)).collect();
    let sb2 = cfg.sigma_b * cfg.sigma_b;
    let ell = cfg.length_scale;

    // C Hᵀ: n × m
    let cht = DMatrix::from_fn(n, m, |p, j| {
        stencils[j]
            .iter()
            .map(|&(q, wt)| wt * correlation(p, q, h, w, ell))
            .sum::<f64>()
    });
    let jitter = cfg.solver_tol * sb2;
    let s = DMatrix::from_fn(m, m, |i, j| {
        let hch: f64 = stencils[i].iter().map(|&(p, wt)| wt * cht[(p, j)]).sum();
        sb2 * hch
            + if i == j {
                cfg.sigma_o * cfg.sigma_o + jitter
            } else {
                0.0
            }
    });
    let chol = s.cholesky().ok_or_else(|| {
        Error::Singular(format!(
            "innovation covariance of {m} observations is not positive definite"
        ))
    })?;
    let innov = DMatrix::from_fn(m, v, |j, k| {
        let hx: f64 = stencils[j].iter().map(|&(p, wt)| wt * x_b.values()[p * v + k]).sum();
        obs.value(j)[k] - hx
    });
    let z = chol.solve(&innov);
    let inc = &cht * z * sb2;
    let values = x_b
        .values()
        .iter()
        .enumerate()
        .map(|(i, b)| b + inc[(i / v, i % v)])
        .collect();
    Ok(x_b.with_values(values))
}
