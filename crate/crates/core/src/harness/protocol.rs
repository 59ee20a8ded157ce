//! Single-step, noise-sweep and cycling experiments.
//!
//! Every random draw comes from its own stream derived from the master seed
//! and the draw's position (time index, rate index, noise index, cycle), so
//! adding a noise level or a rate never changes the other draws.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{LocationMode, OiSection, ProtocolConfig};
use super::report::Record;
use crate::baselines::{interp_blend, optimal_interpolation, InterpConfig};
use crate::dynamics::{forecast, make_background_with_rng, Trajectory};
use crate::error::{Error, Result};
use crate::flow::{euler_assimilate, FlowConfig, VelocityModel};
use crate::grid::{rmse_per_variable, GridState, VariableStats};
use crate::obs::{perturb_observations, sample_locations, sample_observations, ObservationSet, SampleMode};

/// Cycles before this index are excluded from cycling summaries.
pub const SUMMARY_MIN_CYCLE: usize = 10;

/// Something that turns a background and observations into an analysis.
#[derive(Debug, Clone)]
pub enum Assimilator {
    Flow {
        model: Box<VelocityModel>,
        flow: FlowConfig,
    },
    Interp(InterpConfig),
    Oi(OiSection),
    /// Returns the background unchanged.
    Identity,
    /// Returns the truth (reference for error-growth statistics).
    Oracle,
}

impl Assimilator {
    pub fn name(&self) -> &'static str {
        match self {
            Assimilator::Flow { .. } => "flowda",
            Assimilator::Interp(_) => "interp",
            Assimilator::Oi(_) => "oi",
            Assimilator::Identity => "identity",
            Assimilator::Oracle => "oracle",
        }
    }

    pub fn analyse(
        &self,
        x_b: &GridState,
        obs: &ObservationSet,
        truth: &GridState,
        sigma_noise: f64,
    ) -> Result<GridState> {
        match self {
            Assimilator::Flow { model, flow } => euler_assimilate(model, x_b, obs, flow),
            Assimilator::Interp(c) => interp_blend(x_b, obs, c),
            Assimilator::Oi(s) => optimal_interpolation(x_b, obs, &s.resolve(sigma_noise)),
            Assimilator::Identity => Ok(x_b.clone()),
            Assimilator::Oracle => Ok(truth.clone()),
        }
    }
}

/// SplitMix64 finalizer over the master seed and a draw's coordinates.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    let mut h = mix(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    for &p in parts {
        h = mix(h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15));
    }
    h
}

const TAG_BACKGROUND: u64 = 1;
const TAG_OBS: u64 = 2;
const TAG_NOISE: u64 = 3;
const TAG_CYCLE: u64 = 4;

/// `count` analysis times evenly spread over `[lead, len - 1]`.
pub fn eval_times(traj: &Trajectory, lead: usize, count: usize) -> Result<Vec<usize>> {
    if traj.len() <= lead || traj.len() - lead < count {
        return Err(Error::OutOfRange(format!(
            "{count} evaluation times with lead {lead} need at least {} states, trajectory has {}",
            lead + count,
            traj.len()
        )));
    }
    let span = traj.len() - 1 - lead;
    Ok((0..count)
        .map(|i| lead + if count == 1 { 0 } else { i * span / (count - 1) })
        .collect())
}

fn elapsed_ms(start: Instant, record: bool) -> f64 {
    if record {
        start.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    }
}

#[allow(clippy::too_many_arguments)]
fn push_records(
    out: &mut Vec<Record>,
    experiment: &str,
    alpha: f64,
    sigma: f64,
    mode: &str,
    cycle: Option<usize>,
    t: usize,
    truth: &GridState,
    x_b: &GridState,
    x_a: &GridState,
    free: Option<&GridState>,
    wall_ms: f64,
) -> Result<()> {
    let rb = rmse_per_variable(x_b, truth)?;
    let ra = rmse_per_variable(x_a, truth)?;
    let rf = free.map(|f| rmse_per_variable(f, truth)).transpose()?;
    for (k, name) in truth.variable_names().iter().enumerate() {
        out.push(Record {
            experiment: experiment.to_string(),
            alpha,
            sigma_noise: sigma,
            location_mode: mode.to_string(),
            cycle,
            time_index: t,
            variable: name.clone(),
            rmse_background: rb[k],
            rmse_analysis: ra[k],
            rmse_freerun: rf.as_ref().map(|r| r[k]),
            wall_ms,
        });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_static(
    experiment: &str,
    assim: &Assimilator,
    test: &Trajectory,
    stats: &VariableStats,
    p: &ProtocolConfig,
    sigmas: &[f64],
    seed: u64,
    record_wall_time: bool,
) -> Result<Vec<Record>> {
    p.validate()?;
    let times = eval_times(test, p.lead, p.eval_times)?;
    // Each evaluation time owns its random streams, so the parallel map gives
    // the same records as a serial loop; `collect` keeps time order.
    let per_time: Vec<Vec<Record>> = times
        .par_iter()
        .enumerate()
        .map(|(i, &t)| -> Result<Vec<Record>> {
            let mut out = Vec::new();
            let truth = &test.states[t];
            let mut bg_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_BACKGROUND, i as u64]));
            let x_b = make_background_with_rng(test, t, p.lead, p.sigma_ic, &mut bg_rng)?;
            for (ai, &alpha) in p.alphas.iter().enumerate() {
                let clean = sample_observations(
                    truth,
                    alpha,
                    SampleMode::Fresh,
                    derive_seed(seed, &[TAG_OBS, i as u64, ai as u64]),
                )?;
                for (si, &sigma) in sigmas.iter().enumerate() {
                    let obs = perturb_observations(
                        &clean,
                        sigma,
                        stats,
                        derive_seed(seed, &[TAG_NOISE, i as u64, ai as u64, si as u64]),
                    )?;
                    let start = Instant::now();
                    let x_a = assim.analyse(&x_b, &obs, truth, sigma)?;
                    let ms = elapsed_ms(start, record_wall_time);
                    push_records(
                        &mut out, experiment, alpha, sigma, "fresh", None, t, truth, &x_b, &x_a, None, ms,
                    )?;
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_time.into_iter().flatten().collect())
}

/// Lead-time backgrounds at every evaluation time, assimilated with fresh
/// exact observations at each configured rate.
pub fn run_single_step(
    assim: &Assimilator,
    test: &Trajectory,
    stats: &VariableStats,
    p: &ProtocolConfig,
    seed: u64,
    record_wall_time: bool,
) -> Result<Vec<Record>> {
    run_static("single_step", assim, test, stats, p, &[0.0], seed, record_wall_time)
}

/// As [`run_single_step`] with observations perturbed at every configured
/// relative noise level. The backgrounds and clean observations are the same
/// draws as in the single-step protocol.
pub fn run_noise_sweep(
    assim: &Assimilator,
    test: &Trajectory,
    stats: &VariableStats,
    p: &ProtocolConfig,
    seed: u64,
    record_wall_time: bool,
) -> Result<Vec<Record>> {
    run_static(
        "noise_sweep",
        assim,
        test,
        stats,
        p,
        &p.sigma_noise,
        seed,
        record_wall_time,
    )
}

/// Output of one cycling run.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleRun {
    pub records: Vec<Record>,
    /// Cycle index and message when the run stopped early.
    pub aborted: Option<(usize, String)>,
    /// Observation locations used at every completed cycle.
    pub locations: Vec<Vec<(usize, usize)>>,
    /// Observations consumed by the analysis branch.
    pub analysis_observations: usize,
    /// Observations consumed by the free-running reference (always zero).
    pub freerun_observations: usize,
}

/// Free run from a perturbed truth for `free_run_intervals`, then
/// `n_cycles` of assimilate-and-forecast next to an unobserved free run from
/// the same starting state.
#[allow(clippy::too_many_arguments)]
pub fn run_cycling(
    assim: &Assimilator,
    test: &Trajectory,
    stats: &VariableStats,
    p: &ProtocolConfig,
    alpha: f64,
    sigma: f64,
    mode: LocationMode,
    seed: u64,
    record_wall_time: bool,
) -> Result<CycleRun> {
    p.validate()?;
    let needed = p.free_run_intervals + p.n_cycles;
    if test.len() < needed + 1 {
        return Err(Error::OutOfRange(format!(
            "cycling needs {} states, trajectory has {}",
            needed + 1,
            test.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_CYCLE]));
    let start = rng.gen_range(0..test.len() - needed);
    let t0 = start + p.free_run_intervals;
    let model_cfg = test.config.forecast_model();
    let mut x_b = if p.free_run_intervals == 0 {
        test.states[start].clone()
    } else {
        make_background_with_rng(test, t0, p.free_run_intervals, p.sigma_ic, &mut rng)?
    };
    let mut free = x_b.clone();
    let (h, w, _) = x_b.dims();
    let fixed = match mode {
        LocationMode::Fixed => Some(sample_locations(alpha, h, w, &mut rng)?),
        LocationMode::Shuffled => None,
    };
    let mut run = CycleRun {
        records: Vec::new(),
        aborted: None,
        locations: Vec::new(),
        analysis_observations: 0,
        freerun_observations: 0,
    };
    for c in 0..p.n_cycles {
        let t = t0 + c;
        let truth = &test.states[t];
        let locs = match &fixed {
            Some(l) => l.clone(),
            None => sample_locations(alpha, h, w, &mut rng)?,
        };
        let clean = sample_observations(truth, alpha, SampleMode::Reuse(&locs), 0)?;
        let obs = perturb_observations(&clean, sigma, stats, derive_seed(seed, &[TAG_NOISE, c as u64]))?;
        let started = Instant::now();
        let x_a = match assim.analyse(&x_b, &obs, truth, sigma) {
            Ok(x) => x,
            Err(e) => {
                run.aborted = Some((c, e.to_string()));
                break;
            }
        };
        let ms = elapsed_ms(started, record_wall_time);
        run.analysis_observations += obs.len();
        run.locations.push(locs);
        push_records(
            &mut run.records,
            "cycle",
            alpha,
            sigma,
            mode.as_str(),
            Some(c),
            t,
            truth,
            &x_b,
            &x_a,
            Some(&free),
            ms,
        )?;
        if c + 1 == p.n_cycles {
            break;
        }
        match (forecast(&x_a, 1, &model_cfg), forecast(&free, 1, &model_cfg)) {
            (Ok(b), Ok(f)) => {
                x_b = b;
                free = f;
            }
            (Err(e), _) | (_, Err(e)) => {
                run.aborted = Some((c, e.to_string()));
                break;
            }
        }
    }
    Ok(run)
}
