use serde::{Deserialize, Serialize};

use super::model::VelocityModel;
use crate::error::{Error, Result};
use crate::grid::GridState;
use crate::obs::ObservationSet;

pub const DEFAULT_STEPS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Number of uniform Euler steps over pseudo-time `[0, 1]`.
    #[serde(rename = "L")]
    pub steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS }
    }
}

/// Forward Euler from `x0` with `steps` uniform steps:
/// `X ← X + u(X, l/L) / L` for `l = 0 .. L-1`.
pub fn euler_integrate<F>(x0: &GridState, steps: usize, mut velocity: F) -> Result<GridState>
where
    F: FnMut(&GridState, f64) -> Result<GridState>,
{
    if steps == 0 {
        return Err(Error::Config("flow.steps must be >= 1".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0.clone();
    for l in 0..steps {
        let u = velocity(&x, l as f64 / steps as f64)?;
        x = x.axpy(dt, &u)?;
        if !x.is_finite() {
            return Err(Error::NonFiniteFlow { step: l });
        }
    }
    Ok(x)
}

/// Transports the background `x_b` toward the analysis. The lift is computed
/// once and reused at every step.
pub fn euler_assimilate(
    model: &VelocityModel,
    x_b: &GridState,
    obs: &ObservationSet,
    cfg: &FlowConfig,
) -> Result<GridState> {
    let (h, w, _) = model.grid();
    obs.check_domain(h, w)?;
    let lifted = model.lift(obs)?;
    euler_integrate(x_b, cfg.steps, |x, tau| model.velocity(x, &lifted, tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::default_names;

    fn state(f: impl Fn(usize) -> f64) -> GridState {
        GridState::new(1, 6, 1, (0..6).map(f).collect(), default_names(1)).unwrap()
    }

    #[test]
    fn constant_oracle_velocity_reaches_target() {
        let xb = state(|i| i as f64);
        let xg = state(|i| (i as f64).sin() * 3.0);
        let diff = xg.sub(&xb).unwrap();
        let mut calls = 0;
        let out = euler_integrate(&xb, 32, |_, _| {
            calls += 1;
            Ok(diff.clone())
        })
        .unwrap();
        assert_eq!(calls, 32);
        assert!(out.max_abs_diff(&xg).unwrap() < 1e-12);
    }

    #[test]
    fn evaluation_times_are_uniform() {
        let xb = state(|_| 0.0);
        let mut taus = Vec::new();
        euler_integrate(&xb, 4, |x, t| {
            taus.push(t);
            Ok(x.zeros_like())
        })
        .unwrap();
        assert_eq!(taus, vec![0.0, 0.25, 0.5, 0.75]);
    }

    #[test]
    fn linear_field_matches_closed_form() {
        // du/dτ = -X gives X_L = (1 - 1/L)^L X_0 exactly under Euler.
        let xb = state(|i| 1.0 + i as f64);
        let out = euler_integrate(
            &xb,
            8,
            |x, _| Ok(x.with_values(x.values().iter().map(|v| -v).collect())),
        )
        .unwrap();
        let f = (1.0f64 - 1.0 / 8.0).powi(8);
        for (o, b) in out.values().iter().zip(xb.values()) {
            assert!((o - f * b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_steps_and_blowup_are_errors() {
        let xb = state(|_| 1.0);
        assert!(matches!(
            euler_integrate(&xb, 0, |x, _| Ok(x.clone())),
            Err(Error::Config(_))
        ));
        let r = euler_integrate(&xb, 4, |x, _| Ok(x.with_values(vec![f64::INFINITY; 6])));
        assert!(matches!(r, Err(Error::NonFiniteFlow { step: 0 })));
    }
}
