//! Two-stage training: single-step assimilation from lead-time backgrounds,
//! then rollout fine-tuning on backgrounds produced by the model's own
//! analyses.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{forecast, make_background_with_rng, Trajectory};
use crate::error::{Error, Result};
use crate::flow::{euler_assimilate, CheckpointMeta, FlowConfig, TrainSample, VelocityModel};
use crate::grid::GridState;
use crate::obs::{sample_observations_with_rng, SampleMode};
use crate::optim::Adam;

pub const DEFAULT_LR: f64 = 3e-4;
pub const DEFAULT_ROLLOUT_MAX: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations_stage1: usize,
    pub iterations_stage2: usize,
    pub batch_size: usize,
    pub rate_min: f64,
    pub rate_max: f64,
    pub lead: usize,
    pub rollout_max: usize,
    /// Initial-condition perturbation of the background forecasts, in
    /// climatological-std units.
    pub sigma_ic: f64,
    /// Optional noise added to the flow source during training (std units).
    pub source_noise: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            weight_decay: 0.0,
            iterations_stage1: 18_000,
            iterations_stage2: 1_500,
            batch_size: 8,
            rate_min: 0.02,
            rate_max: 0.4,
            lead: 8,
            rollout_max: DEFAULT_ROLLOUT_MAX,
            sigma_ic: 0.05,
            source_noise: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!(
                "train.lr must be a finite non-negative number, got {}",
                self.lr
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("train.weight_decay must be >= 0".into());
        }
        if !(self.rate_min > 0.0 && self.rate_min <= self.rate_max && self.rate_max <= 1.0) {
            return bad(format!(
                "train rate range must satisfy 0 < min <= max <= 1, got [{}, {}]",
                self.rate_min, self.rate_max
            ));
        }
        if self.lead < 1 {
            return bad("train.lead must be >= 1".into());
        }
        if self.rollout_max < 1 {
            return bad("train.rollout_max must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("train.batch_size must be >= 1".into());
        }
        if !(self.sigma_ic >= 0.0) || !(self.source_noise >= 0.0) {
            return bad("train.sigma_ic and train.source_noise must be >= 0".into());
        }
        Ok(())
    }

    /// Observation rate drawn log-uniformly over the configured range.
    pub fn draw_rate(&self, rng: &mut impl Rng) -> f64 {
        if self.rate_min == self.rate_max {
            return self.rate_min;
        }
        let u: f64 = rng.gen();
        (self.rate_min.ln() + u * (self.rate_max.ln() - self.rate_min.ln())).exp()
    }

    pub fn optimizer(&self, n: usize) -> Adam {
        let mut opt = Adam::new(n, self.lr);
        opt.weight_decay = self.weight_decay;
        opt
    }
}

/// Summary of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationStats {
    pub loss: f64,
    /// Mean observation rate used in the step.
    pub alpha: f64,
    /// Rollout length (1 for first-stage steps).
    pub rollout: usize,
}

fn add_source_noise(x: &GridState, scale: f64, std: &[f64], rng: &mut impl Rng) -> GridState {
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

fn apply_update(model: &mut VelocityModel, opt: &mut Adam, grad: &[f64]) -> Result<()> {
    opt.step(model.params_mut(), grad)?;
    for p in model.params_mut() {
        *p = *p as f32 as f64;
    }
    Ok(())
}

fn check_trajectory(model: &VelocityModel, traj: &Trajectory, needed: usize) -> Result<()> {
    let (h, w, v) = model.grid();
    if (traj.config.h, traj.config.w, traj.config.v()) != (h, w, v) {
        return Err(Error::shape(
            "trajectory grid",
            format!("{h}x{w}x{v}"),
            format!("{}x{}x{}", traj.config.h, traj.config.w, traj.config.v()),
        ));
    }
    if traj.len() < needed {
        return Err(Error::OutOfRange(format!(
            "training needs at least {needed} states, trajectory has {}",
            traj.len()
        )));
    }
    Ok(())
}

/// One first-stage step: a batch of `(background, truth, fresh observations, τ)`
/// samples and a single optimizer update.
pub fn stage1_iteration(
    model: &mut VelocityModel,
    opt: &mut Adam,
    traj: &Trajectory,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<IterationStats> {
    check_trajectory(model, traj, cfg.lead + 1)?;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut alpha_sum = 0.0;
    for _ in 0..cfg.batch_size {
        let t = rng.gen_range(cfg.lead..traj.len());
        let x_b = make_background_with_rng(traj, t, cfg.lead, cfg.sigma_ic, rng)?;
        let x_b = add_source_noise(&x_b, cfg.source_noise, traj.stats().std(), rng);
        let alpha = cfg.draw_rate(rng);
        alpha_sum += alpha;
        let x_g = traj.states[t].clone();
        let obs = sample_observations_with_rng(&x_g, alpha, SampleMode::Fresh, rng)?;
        let tau: f64 = rng.gen();
        batch.push(TrainSample { x_b, x_g, obs, tau });
    }
    let (loss, grad) = model.loss_and_grad(&batch)?;
    apply_update(model, opt, &grad)?;
    Ok(IterationStats {
        loss,
        alpha: alpha_sum / cfg.batch_size as f64,
        rollout: 1,
    })
}

/// One rollout step: `T ∼ Unif{1..rollout_max}` cycles of forecast and
/// assimilation, a loss at every cycle, one update on the mean. Gradients
/// stop at each cycle boundary.
pub fn stage2_iteration(
    model: &mut VelocityModel,
    opt: &mut Adam,
    traj: &Trajectory,
    cfg: &TrainConfig,
    flow: &FlowConfig,
    rng: &mut impl Rng,
) -> Result<IterationStats> {
    check_trajectory(model, traj, cfg.lead + cfg.rollout_max + 1)?;
    let rollout = rng.gen_range(1..=cfg.rollout_max);
    let t0 = rng.gen_range(cfg.lead..traj.len() - rollout + 1);
    let alpha = cfg.draw_rate(rng);
    let forecast_cfg = traj.config.forecast_model();
    let scale = 1.0 / rollout as f64;
    let mut grad = vec![0.0; model.param_count()];
    let mut loss = 0.0;
    let mut x_b = make_background_with_rng(traj, t0, cfg.lead, cfg.sigma_ic, rng)?;
    for s in 0..rollout {
        let t = t0 + s;
        if s > 0 {
            // `x_b` holds the previous analysis here.
            x_b = forecast(&x_b, 1, &forecast_cfg)?;
        }
        let x_g = traj.states[t].clone();
        let obs = sample_observations_with_rng(&x_g, alpha, SampleMode::Fresh, rng)?;
        let tau: f64 = rng.gen();
        let source = add_source_noise(&x_b, cfg.source_noise, traj.stats().std(), rng);
        let sample = TrainSample {
            x_b: source,
            x_g,
            obs: obs.clone(),
            tau,
        };
        let (l, g) = model.loss_and_grad(std::slice::from_ref(&sample))?;
        loss += l * scale;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += gi * scale;
        }
        if s + 1 < rollout {
            x_b = euler_assimilate(model, &x_b, &obs, flow)?;
        }
    }
    apply_update(model, opt, &grad)?;
    Ok(IterationStats { loss, alpha, rollout })
}

/// Append-only training log with header `iteration,stage,loss,alpha,T`,
/// flushed after every row.
pub struct TrainLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl TrainLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let exists = path.metadata().map(|m| m.len() > 0).unwrap_or(false);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut log = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        if !exists {
            log.write_line("iteration,stage,loss,alpha,T")?;
        }
        Ok(log)
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn record(&mut self, iteration: u64, stage: u32, s: &IterationStats) -> Result<()> {
        self.write_line(&format!("{iteration},{stage},{},{},{}", s.loss, s.alpha, s.rollout))
    }
}

/// Runs `cfg.iterations_stage1` first-stage steps. `on_step` sees every
/// iteration (for logging or progress).
pub fn train_stage1(
    model: &mut VelocityModel,
    meta: &mut CheckpointMeta,
    traj: &Trajectory,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
    mut on_step: impl FnMut(u64, &IterationStats) -> Result<()>,
) -> Result<Vec<IterationStats>> {
    cfg.validate()?;
    let mut opt = cfg.optimizer(model.param_count());
    let mut trace = Vec::with_capacity(cfg.iterations_stage1);
    for i in 0..cfg.iterations_stage1 {
        let s = stage1_iteration(model, &mut opt, traj, cfg, rng)?;
        on_step(i as u64, &s)?;
        trace.push(s);
    }
    meta.stage = meta.stage.max(1);
    meta.iterations += cfg.iterations_stage1 as u64;
    meta.seed = cfg.seed;
    Ok(trace)
}

/// Runs `cfg.iterations_stage2` rollout steps. Refuses a model that has not
/// completed the first stage.
pub fn train_stage2(
    model: &mut VelocityModel,
    meta: &mut CheckpointMeta,
    traj: &Trajectory,
    cfg: &TrainConfig,
    flow: &FlowConfig,
    rng: &mut impl Rng,
    mut on_step: impl FnMut(u64, &IterationStats) -> Result<()>,
) -> Result<Vec<IterationStats>> {
    cfg.validate()?;
    if meta.stage < 1 {
        return Err(Error::Config(
            "rollout fine-tuning must start from a first-stage checkpoint".into(),
        ));
    }
    let mut opt = cfg.optimizer(model.param_count());
    let mut trace = Vec::with_capacity(cfg.iterations_stage2);
    for i in 0..cfg.iterations_stage2 {
        let s = stage2_iteration(model, &mut opt, traj, cfg, flow, rng)?;
        on_step(i as u64, &s)?;
        trace.push(s);
    }
    meta.stage = 2;
    meta.iterations += cfg.iterations_stage2 as u64;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{generate_dataset, DynamicsConfig};
    use crate::flow::{Arch, KernelArch};
    use crate::grid::VariableStats;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (VelocityModel, Trajectory) {
        let traj = generate_dataset(&DynamicsConfig::ring(12), 50, 60, 1).unwrap();
        let arch = Arch {
            hidden_width: 6,
            depth: 1,
            conv_kernel: 3,
            tau_dim: 4,
            kernel: KernelArch::Learned {
                hidden: vec![4],
                init_scale: 1.0,
            },
            window: 5,
        };
        let stats = VariableStats::from_states(&traj.states).unwrap();
        let model = VelocityModel::new(arch, 1, 12, vec!["x".into()], stats, 0).unwrap();
        (model, traj)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            rollout_max: 3,
            rate_min: 0.1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.lr, 3e-4);
        assert_eq!(c.rollout_max, 8);
        assert_eq!((c.rate_min, c.rate_max), (0.02, 0.4));
        assert_eq!(c.source_noise, 0.0);
        c.validate().unwrap();
    }

    #[test]
    fn log_uniform_rates_stay_in_range() {
        let c = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws: Vec<f64> = (0..4000).map(|_| c.draw_rate(&mut rng)).collect();
        assert!(draws.iter().all(|a| (0.02..=0.4).contains(a)));
        // Median of a log-uniform law is the geometric mean of the bounds.
        let below = draws.iter().filter(|a| **a < (0.02f64 * 0.4).sqrt()).count();
        assert!((below as f64 / 4000.0 - 0.5).abs() < 0.03);
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise() {
        let (mut m, traj) = setup();
        let before = m.params().to_vec();
        let cfg = TrainConfig { lr: 0.0, ..small_cfg() };
        let mut opt = cfg.optimizer(m.param_count());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        stage1_iteration(&mut m, &mut opt, &traj, &cfg, &mut rng).unwrap();
        stage2_iteration(&mut m, &mut opt, &traj, &cfg, &FlowConfig { steps: 4 }, &mut rng).unwrap();
        assert!(m.params().iter().zip(&before).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn iteration_trace_is_deterministic() {
        let run = || {
            let (mut m, traj) = setup();
            let cfg = small_cfg();
            let mut opt = cfg.optimizer(m.param_count());
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let mut out = Vec::new();
            for _ in 0..3 {
                out.push(stage1_iteration(&mut m, &mut opt, &traj, &cfg, &mut rng).unwrap());
            }
            out.push(stage2_iteration(&mut m, &mut opt, &traj, &cfg, &FlowConfig { steps: 4 }, &mut rng).unwrap());
            (out, m)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert!(ma.params().iter().all(|p| (*p as f32) as f64 == *p));
    }

    #[test]
    fn rollout_lengths_cover_range() {
        let (mut m, traj) = setup();
        let cfg = small_cfg();
        let mut opt = cfg.optimizer(m.param_count());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = [false; 4];
        for _ in 0..30 {
            let s = stage2_iteration(&mut m, &mut opt, &traj, &cfg, &FlowConfig { steps: 2 }, &mut rng).unwrap();
            assert!((1..=3).contains(&s.rollout));
            seen[s.rollout] = true;
        }
        assert!(seen[1] && seen[2] && seen[3]);
    }

    #[test]
    fn stage2_requires_stage1() {
        let (mut m, traj) = setup();
        let mut meta = CheckpointMeta::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = train_stage2(
            &mut m,
            &mut meta,
            &traj,
            &small_cfg(),
            &FlowConfig::default(),
            &mut rng,
            |_, _| Ok(()),
        );
        assert!(matches!(r, Err(Error::Config(_))));
        let cfg = TrainConfig {
            iterations_stage1: 1,
            iterations_stage2: 1,
            ..small_cfg()
        };
        train_stage1(&mut m, &mut meta, &traj, &cfg, &mut rng, |_, _| Ok(())).unwrap();
        train_stage2(
            &mut m,
            &mut meta,
            &traj,
            &cfg,
            &FlowConfig { steps: 2 },
            &mut rng,
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(meta.stage, 2);
        assert_eq!(meta.iterations, 2);
    }

    #[test]
    fn log_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.csv");
        let mut log = TrainLog::create(&path).unwrap();
        let s = IterationStats {
            loss: 0.5,
            alpha: 0.1,
            rollout: 3,
        };
        log.record(0, 2, &s).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "iteration,stage,loss,alpha,T\n0,2,0.5,0.1,3\n");
        drop(log);
        let mut log = TrainLog::create(&path).unwrap();
        log.record(1, 2, &s).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 3);
    }
}
