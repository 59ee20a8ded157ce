//! Lorenz-96 ring and its diffusively coupled torus extension.
//!
//! One "DA interval" is `substeps` RK4 steps of size `dt`. With the defaults
//! (`dt = 0.01`, `substeps = 5`) an interval is 0.05 model time units, the
//! usual Lorenz-96 analog of six hours.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridState, VariableStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    /// Single Lorenz-96 ring (`H = 1`).
    Ring,
    /// Stack of rings coupled by a periodic diffusion term across rows.
    Torus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    pub system: System,
    pub h: usize,
    pub w: usize,
    pub forcing: f64,
    /// Row coupling strength (torus only).
    pub coupling: f64,
    pub dt: f64,
    pub substeps: usize,
    /// Forcing offset applied by the forecast model only (0 = perfect model).
    pub model_forcing_error: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self::ring(40)
    }
}

impl DynamicsConfig {
    pub fn ring(w: usize) -> Self {
        Self {
            system: System::Ring,
            h: 1,
            w,
            forcing: 8.0,
            coupling: 0.0,
            dt: 0.01,
            substeps: 5,
            model_forcing_error: 0.0,
        }
    }

    pub fn torus(h: usize, w: usize) -> Self {
        Self {
            system: System::Torus,
            h,
            w,
            coupling: 0.5,
            ..Self::ring(w)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.dt > 0.0) {
            return bad(format!("dynamics.dt must be positive, got {}", self.dt));
        }
        if self.substeps < 1 {
            return bad("dynamics.substeps must be >= 1".into());
        }
        if !self.forcing.is_finite() || !self.coupling.is_finite() || !self.model_forcing_error.is_finite() {
            return bad("dynamics parameters must be finite".into());
        }
        match self.system {
            System::Ring => {
                if self.h != 1 {
                    return bad(format!("ring system requires H = 1, got {}", self.h));
                }
                if self.w < 4 {
                    return bad(format!("ring system requires W >= 4, got {}", self.w));
                }
            }
            System::Torus => {
                if self.h < 3 || self.w < 4 {
                    return bad(format!(
                        "torus system requires H >= 3 and W >= 4, got {}x{}",
                        self.h, self.w
                    ));
                }
            }
        }
        Ok(())
    }

    /// Grid variable count; both systems carry a single scalar field.
    pub fn v(&self) -> usize {
        1
    }

    pub fn variable_names(&self) -> Vec<String> {
        vec!["x".to_string()]
    }

    /// Configuration used to produce forecasts (truth forcing plus model error).
    pub fn forecast_model(&self) -> DynamicsConfig {
        DynamicsConfig {
            forcing: self.forcing + self.model_forcing_error,
            model_forcing_error: 0.0,
            ..self.clone()
        }
    }

    pub fn check_state(&self, x: &GridState) -> Result<()> {
        if x.h() != self.h {
            return Err(Error::shape("H", self.h, x.h()));
        }
        if x.w() != self.w {
            return Err(Error::shape("W", self.w, x.w()));
        }
        if x.v() != self.v() {
            return Err(Error::shape("V", self.v(), x.v()));
        }
        Ok(())
    }

    /// Uniform state `X ≡ F`, a fixed point of the dynamics.
    pub fn equilibrium(&self) -> GridState {
        GridState::new(
            self.h,
            self.w,
            1,
            vec![self.forcing; self.h * self.w],
            self.variable_names(),
        )
        .expect("valid config yields a valid state")
    }
}

/// Time-ordered states at DA-interval cadence.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<GridState>,
    pub config: DynamicsConfig,
    pub seed: u64,
    stats: OnceLock<VariableStats>,
}

impl PartialEq for Trajectory {
    fn eq(&self, other: &Self) -> bool {
        self.states == other.states && self.config == other.config && self.seed == other.seed
    }
}

impl Trajectory {
    pub fn new(states: Vec<GridState>, config: DynamicsConfig, seed: u64) -> Result<Self> {
        let first = states
            .first()
            .ok_or_else(|| Error::InvalidArgument("trajectory needs at least one state".into()))?;
        for s in &states[1..] {
            first.check_compatible(s)?;
        }
        Ok(Self {
            states,
            config,
            seed,
            stats: OnceLock::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Climatological mean and std over the whole trajectory (cached).
    pub fn stats(&self) -> &VariableStats {
        self.stats.get_or_init(|| {
            VariableStats::from_states(&self.states).unwrap_or_else(|_| VariableStats::identity(self.states[0].v()))
        })
    }

    /// Consecutive sub-range `[start, start + len)` as a new trajectory.
    pub fn segment(&self, start: usize, len: usize) -> Result<Trajectory> {
        if len == 0 || start + len > self.len() {
            return Err(Error::OutOfRange(format!(
                "segment {start}..{} of trajectory with {} states",
                start + len,
                self.len()
            )));
        }
        Trajectory::new(self.states[start..start + len].to_vec(), self.config.clone(), self.seed)
    }
}

/// Time derivative of the state.
pub fn tendency(x: &GridState, cfg: &DynamicsConfig) -> Result<GridState> {
    cfg.check_state(x)?;
    let mut out = vec![0.0; x.values().len()];
    tendency_into(x.values(), cfg, &mut out);
    Ok(x.with_values(out))
}

fn tendency_into(x: &[f64], cfg: &DynamicsConfig, out: &mut [f64]) {
    let (h, w) = (cfg.h, cfg.w);
    let f = cfg.forcing;
    for i in 0..h {
        let row = &x[i * w..(i + 1) * w];
        for j in 0..w {
            let jp1 = (j + 1) % w;
            let jm1 = (j + w - 1) % w;
            let jm2 = (j + w - 2) % w;
            out[i * w + j] = (row[jp1] - row[jm2]) * row[jm1] - row[j] + f;
        }
    }
    if cfg.system == System::Torus && cfg.coupling != 0.0 {
        let c = cfg.coupling;
        for i in 0..h {
            let ip1 = (i + 1) % h;
            let im1 = (i + h - 1) % h;
            for j in 0..w {
                out[i * w + j] += c * (x[ip1 * w + j] + x[im1 * w + j] - 2.0 * x[i * w + j]);
            }
        }
    }
}

/// Reusable scratch space for RK4.
struct Rk4Work {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Work {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    fn step(&mut self, x: &mut [f64], cfg: &DynamicsConfig, dt: f64) {
        tendency_into(x, cfg, &mut self.k1);
        for (t, (xi, k)) in self.tmp.iter_mut().zip(x.iter().zip(&self.k1)) {
            *t = xi + 0.5 * dt * k;
        }
        tendency_into(&self.tmp, cfg, &mut self.k2);
        for (t, (xi, k)) in self.tmp.iter_mut().zip(x.iter().zip(&self.k2)) {
            *t = xi + 0.5 * dt * k;
        }
        tendency_into(&self.tmp, cfg, &mut self.k3);
        for (t, (xi, k)) in self.tmp.iter_mut().zip(x.iter().zip(&self.k3)) {
            *t = xi + dt * k;
        }
        tendency_into(&self.tmp, cfg, &mut self.k4);
        for (i, xi) in x.iter_mut().enumerate() {
            *xi += dt / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// One classical RK4 step of size `cfg.dt`.
pub fn rk4_step(x: &GridState, cfg: &DynamicsConfig) -> Result<GridState> {
    rk4_step_with_dt(x, cfg, cfg.dt)
}

/// One RK4 step with an explicit step size.
pub fn rk4_step_with_dt(x: &GridState, cfg: &DynamicsConfig, dt: f64) -> Result<GridState> {
    cfg.check_state(x)?;
    let mut values = x.values().to_vec();
    Rk4Work::new(values.len()).step(&mut values, cfg, dt);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::IntegrationBlowup { step: 0 });
    }
    Ok(x.with_values(values))
}

/// Integrates `n_intervals` DA intervals, returning the `n_intervals + 1`
/// states including the start.
pub fn rollout_states(x: &GridState, n_intervals: usize, cfg: &DynamicsConfig) -> Result<Vec<GridState>> {
    cfg.check_state(x)?;
    let mut out = Vec::with_capacity(n_intervals + 1);
    out.push(x.clone());
    let mut cur = x.values().to_vec();
    let mut work = Rk4Work::new(cur.len());
    for interval in 0..n_intervals {
        for s in 0..cfg.substeps {
            work.step(&mut cur, cfg, cfg.dt);
            if cur.iter().any(|v| !v.is_finite()) {
                return Err(Error::IntegrationBlowup {
                    step: interval * cfg.substeps + s,
                });
            }
        }
        out.push(x.with_values(cur.clone()));
    }
    Ok(out)
}

pub fn rollout(x: &GridState, n_intervals: usize, cfg: &DynamicsConfig) -> Result<Trajectory> {
    Trajectory::new(rollout_states(x, n_intervals, cfg)?, cfg.clone(), 0)
}

/// Terminal state after `n_intervals` intervals.
pub fn forecast(x: &GridState, n_intervals: usize, cfg: &DynamicsConfig) -> Result<GridState> {
    cfg.check_state(x)?;
    let mut cur = x.values().to_vec();
    let mut work = Rk4Work::new(cur.len());
    for interval in 0..n_intervals {
        for s in 0..cfg.substeps {
            work.step(&mut cur, cfg, cfg.dt);
            if cur.iter().any(|v| !v.is_finite()) {
                return Err(Error::IntegrationBlowup {
                    step: interval * cfg.substeps + s,
                });
            }
        }
    }
    Ok(x.with_values(cur))
}

/// Truth trajectory: standard-normal start, `spinup_intervals` discarded,
/// then `length` recorded states.
pub fn generate_dataset(cfg: &DynamicsConfig, spinup_intervals: usize, length: usize, seed: u64) -> Result<Trajectory> {
    cfg.validate()?;
    if length < 10 {
        return Err(Error::InvalidArgument(format!(
            "dataset length must be >= 10, got {length}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.h * cfg.w * cfg.v();
    let init: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x0 = GridState::new(cfg.h, cfg.w, cfg.v(), init, cfg.variable_names())?;
    let start = forecast(&x0, spinup_intervals, cfg)?;
    let states = rollout_states(&start, length - 1, cfg)?;
    Trajectory::new(states, cfg.clone(), seed)
}

/// Adds i.i.d. Gaussian noise with per-variable std `scale * std_v`.
pub(crate) fn perturb_state(x: &GridState, scale: f64, std: &[f64], rng: &mut impl rand::Rng) -> GridState {
    if scale == 0.0 {
        return x.clone();
    }
    let v = x.v();
    let values = x
        .values()
        .iter()
        .enumerate()
        .map(|(i, val)| {
            let z: f64 = StandardNormal.sample(rng);
            val + scale * std[i % v] * z
        })
        .collect();
    x.with_values(values)
}

/// Forecast valid at `t` started `lead` intervals earlier from a perturbed truth.
pub fn make_background(traj: &Trajectory, t: usize, lead: usize, sigma_ic: f64, seed: u64) -> Result<GridState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    make_background_with_rng(traj, t, lead, sigma_ic, &mut rng)
}

pub fn make_background_with_rng(
    traj: &Trajectory,
    t: usize,
    lead: usize,
    sigma_ic: f64,
    rng: &mut impl rand::Rng,
) -> Result<GridState> {
    if t >= traj.len() || t < lead {
        return Err(Error::OutOfRange(format!(
            "background at t={t} with lead {lead} in trajectory of {} states",
            traj.len()
        )));
    }
    if !(sigma_ic >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_ic must be >= 0, got {sigma_ic}")));
    }
    let start = perturb_state(&traj.states[t - lead], sigma_ic, traj.stats().std(), rng);
    forecast(&start, lead, &traj.config.forecast_model())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring_state(vals: &[f64]) -> GridState {
        GridState::new(1, vals.len(), 1, vals.to_vec(), vec!["x".into()]).unwrap()
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        for cfg in [DynamicsConfig::ring(40), DynamicsConfig::torus(4, 6)] {
            let eq = cfg.equilibrium();
            assert!(tendency(&eq, &cfg).unwrap().values().iter().all(|v| *v == 0.0));
            assert_eq!(rk4_step(&eq, &cfg).unwrap(), eq);
            assert_eq!(forecast(&eq, 7, &cfg).unwrap(), eq);
        }
    }

    #[test]
    fn zero_state_zero_forcing() {
        let mut cfg = DynamicsConfig::ring(6);
        cfg.forcing = 0.0;
        let x = ring_state(&[0.0; 6]);
        assert!(tendency(&x, &cfg).unwrap().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ring_stencil_hand_values() {
        // dX_j = (X_{j+1} - X_{j-2}) X_{j-1} - X_j + 8, indices mod 5
        // j=0: (2-4)*5 - 1 + 8 = -3
        // j=1: (3-5)*1 - 2 + 8 = 4
        // j=2: (4-1)*2 - 3 + 8 = 11
        // j=3: (5-2)*3 - 4 + 8 = 13
        // j=4: (1-3)*4 - 5 + 8 = -5
        let mut cfg = DynamicsConfig::ring(5);
        cfg.forcing = 8.0;
        let x = ring_state(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(tendency(&x, &cfg).unwrap().values(), &[-3.0, 4.0, 11.0, 13.0, -5.0]);
    }

    #[test]
    fn torus_adds_row_diffusion() {
        let mut cfg = DynamicsConfig::torus(3, 4);
        cfg.forcing = 0.0;
        cfg.coupling = 0.5;
        // Rows constant along w so the advective term vanishes except -X.
        let vals = vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 4.0, 4.0, 4.0, 4.0];
        let x = GridState::new(3, 4, 1, vals, vec!["x".into()]).unwrap();
        let d = tendency(&x, &cfg).unwrap();
        // row 0: -1 + 0.5*(2 + 4 - 2) = 1
        // row 1: -2 + 0.5*(4 + 1 - 4) = -1.5
        // row 2: -4 + 0.5*(1 + 2 - 8) = -6.5
        assert_eq!(d.get(0, 0, 0), 1.0);
        assert_eq!(d.get(1, 2, 0), -1.5);
        assert_eq!(d.get(2, 3, 0), -6.5);
    }

    #[test]
    fn rollout_zero_is_identity() {
        let cfg = DynamicsConfig::ring(8);
        let x = ring_state(&[1.0, -2.0, 0.5, 3.0, 0.0, 1.0, 2.0, -1.0]);
        let traj = rollout(&x, 0, &cfg).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.states[0], x);
        assert_eq!(rollout(&x, 3, &cfg).unwrap().len(), 4);
    }

    #[test]
    fn blowup_reports_step() {
        let mut cfg = DynamicsConfig::ring(8);
        cfg.dt = 10.0;
        let x = ring_state(&[100.0, -200.0, 50.0, 300.0, 0.0, 1.0, 2.0, -1.0]);
        match forecast(&x, 50, &cfg) {
            Err(Error::IntegrationBlowup { .. }) => {}
            other => panic!("expected blowup, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(DynamicsConfig::ring(40).validate().is_ok());
        assert!(DynamicsConfig::ring(3).validate().is_err());
        assert!(DynamicsConfig::torus(2, 8).validate().is_err());
        let mut c = DynamicsConfig::ring(40);
        c.h = 2;
        assert!(c.validate().is_err());
        c = DynamicsConfig::ring(40);
        c.dt = 0.0;
        assert!(c.validate().is_err());
        c = DynamicsConfig::ring(40);
        c.substeps = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn dataset_deterministic_and_sized() {
        let cfg = DynamicsConfig::ring(12);
        let a = generate_dataset(&cfg, 20, 10, 3).unwrap();
        let b = generate_dataset(&cfg, 20, 10, 3).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        assert!(generate_dataset(&cfg, 20, 9, 3).is_err());
    }

    #[test]
    fn perfect_background_reproduces_truth() {
        let cfg = DynamicsConfig::ring(20);
        let traj = generate_dataset(&cfg, 100, 30, 1).unwrap();
        let xb = make_background(&traj, 20, 8, 0.0, 0).unwrap();
        assert!(xb.max_abs_diff(&traj.states[20]).unwrap() < 1e-10);
        assert_eq!(make_background(&traj, 5, 0, 0.0, 0).unwrap(), traj.states[5]);
        assert!(make_background(&traj, 5, 8, 0.0, 0).is_err());
        assert!(make_background(&traj, 30, 8, 0.0, 0).is_err());
    }
}
