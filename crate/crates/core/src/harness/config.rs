//! Experiment configuration: TOML with dotted keys, every section optional,
//! unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{InterpConfig, OIConfig};
use crate::dynamics::DynamicsConfig;
use crate::error::{Error, Result};
use crate::flow::model::DEFAULT_KERNEL_INIT_SCALE;
use crate::flow::{Arch, FlowConfig, KernelArch};
use crate::obs::validate_window;
use crate::setconv::DEFAULT_WINDOW;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub spinup: usize,
    pub train_length: usize,
    pub test_length: usize,
    pub train_seed: u64,
    /// Must differ from `train_seed` so evaluation uses a disjoint trajectory.
    pub test_seed: u64,
    pub train_path: PathBuf,
    pub test_path: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            spinup: 500,
            train_length: 20_000,
            test_length: 2_000,
            train_seed: 1,
            test_seed: 2,
            train_path: PathBuf::from("data/train.trj"),
            test_path: PathBuf::from("data/test.trj"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_width: usize,
    pub depth: usize,
    pub conv_kernel: usize,
    pub tau_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = Arch::default();
        Self {
            hidden_width: a.hidden_width,
            depth: a.depth,
            conv_kernel: a.conv_kernel,
            tau_dim: a.tau_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Learned,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub mode: KernelKind,
    pub k: usize,
    pub hidden: Vec<usize>,
    pub init_scale: f64,
    pub lh: f64,
    pub lw: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            mode: KernelKind::Learned,
            k: DEFAULT_WINDOW,
            hidden: vec![16, 16],
            init_scale: DEFAULT_KERNEL_INIT_SCALE,
            lh: 1.0,
            lw: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssimilatorKind {
    Flowda,
    Interp,
    Oi,
}

/// OI settings; `sigma_o` defaults to the evaluated noise level (floored).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OiSection {
    pub length_scale: f64,
    pub sigma_b: f64,
    pub sigma_o: Option<f64>,
    pub solver_tol: f64,
}

impl Default for OiSection {
    fn default() -> Self {
        let d = OIConfig::default();
        Self {
            length_scale: d.length_scale,
            sigma_b: d.sigma_b,
            sigma_o: None,
            solver_tol: d.solver_tol,
        }
    }
}

impl OiSection {
    pub fn resolve(&self, sigma_noise: f64) -> OIConfig {
        OIConfig {
            length_scale: self.length_scale,
            sigma_b: self.sigma_b,
            sigma_o: self.sigma_o.unwrap_or_else(|| OIConfig::for_noise(sigma_noise).sigma_o),
            solver_tol: self.solver_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssimilatorConfig {
    pub kind: AssimilatorKind,
    pub checkpoint: PathBuf,
    pub interp: InterpConfig,
    pub oi: OiSection,
}

impl Default for AssimilatorConfig {
    fn default() -> Self {
        Self {
            kind: AssimilatorKind::Flowda,
            checkpoint: PathBuf::from("runs/stage2.ckpt"),
            interp: InterpConfig::default(),
            oi: OiSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocationMode {
    Fixed,
    Shuffled,
}

impl LocationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LocationMode::Fixed => "fixed",
            LocationMode::Shuffled => "shuffled",
        }
    }
}

/// Settings of the evaluation protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub alphas: Vec<f64>,
    pub sigma_noise: Vec<f64>,
    pub eval_times: usize,
    pub lead: usize,
    pub sigma_ic: f64,
    pub location_mode: LocationMode,
    pub n_cycles: usize,
    pub free_run_intervals: usize,
    /// Observation rate of the cycling experiment.
    pub cycle_alpha: f64,
    /// Observation noise of the cycling experiment.
    pub cycle_sigma_noise: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.05, 0.1, 0.2, 0.4],
            sigma_noise: vec![0.0, 0.05, 0.1, 0.2],
            eval_times: 64,
            lead: 8,
            sigma_ic: 0.05,
            location_mode: LocationMode::Shuffled,
            n_cycles: 60,
            free_run_intervals: 8,
            cycle_alpha: 0.2,
            cycle_sigma_noise: 0.0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return bad("experiment.alphas must be non-empty with entries in (0, 1]");
        }
        if !(self.cycle_alpha > 0.0 && self.cycle_alpha <= 1.0) {
            return bad("experiment.cycle_alpha must lie in (0, 1]");
        }
        if self.sigma_noise.is_empty() || self.sigma_noise.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("experiment.sigma_noise must be non-empty with entries >= 0");
        }
        if !(self.cycle_sigma_noise >= 0.0) {
            return bad("experiment.cycle_sigma_noise must be >= 0");
        }
        if self.eval_times < 1 || self.n_cycles < 1 || self.lead < 1 {
            return bad("experiment.eval_times, experiment.n_cycles and experiment.lead must be >= 1");
        }
        if !(self.sigma_ic >= 0.0) {
            return bad("experiment.sigma_ic must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// When false, `wall_ms` is written as 0 so reports are byte-identical
    /// across runs.
    pub record_wall_time: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            record_wall_time: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dynamics: DynamicsConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub kernel: KernelConfig,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub assimilator: AssimilatorConfig,
    pub experiment: ProtocolConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn arch(&self) -> Arch {
        let kernel = match self.kernel.mode {
            KernelKind::Learned => KernelArch::Learned {
                hidden: self.kernel.hidden.clone(),
                init_scale: self.kernel.init_scale,
            },
            KernelKind::Gaussian => KernelArch::Gaussian {
                lh: self.kernel.lh,
                lw: self.kernel.lw,
            },
        };
        Arch {
            hidden_width: self.model.hidden_width,
            depth: self.model.depth,
            conv_kernel: self.model.conv_kernel,
            tau_dim: self.model.tau_dim,
            kernel,
            window: self.kernel.k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.dynamics.validate().map_err(as_config)?;
        self.train.validate()?;
        self.arch().validate()?;
        self.experiment.validate()?;
        validate_window(self.kernel.k, self.dynamics.h, self.dynamics.w).map_err(as_config)?;
        validate_window(self.assimilator.interp.window, self.dynamics.h, self.dynamics.w).map_err(as_config)?;
        if self.flow.steps < 1 {
            return Err(Error::Config("flow.L must be >= 1".into()));
        }
        if self.data.train_seed == self.data.test_seed {
            return Err(Error::Config("data.train_seed and data.test_seed must differ".into()));
        }
        if self.data.train_length < 10 || self.data.test_length < 10 {
            return Err(Error::Config("data lengths must be >= 10".into()));
        }
        Ok(())
    }

    /// Parses TOML text, applies `key=value` overrides (dotted keys), and
    /// validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Defaults with overrides applied, for runs without a config file.
    pub fn from_overrides(overrides: &[String]) -> Result<Self> {
        Self::from_toml_str("", overrides)
    }
}

/// Sets `a.b.c = value` in a TOML table. The value is parsed as a TOML
/// literal and falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("invalid override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn list(xs: &[f64]) -> String {
    let items: Vec<String> = xs.iter().map(|x| format!("{x:?}")).collect();
    format!("[{}]", items.join(", "))
}

/// Fully commented default configuration in flat dotted-key form.
pub fn config_template() -> String {
    let c = ExperimentConfig::default();
    let d = &c.dynamics;
    let t = &c.train;
    let e = &c.experiment;
    let k = &c.kernel;
    let hidden: Vec<String> = k.hidden.iter().map(|h| h.to_string()).collect();
    format!(
        r#"# Experiment configuration. Every key is optional; omitted keys take the
# values shown here. Unknown keys are rejected.

# Master seed for evaluation draws.
seed = {seed}

# Toy dynamics. system is "ring" (h must be 1) or "torus" (coupled rings).
dynamics.system = "{system}"
dynamics.h = {h}
dynamics.w = {w}
dynamics.forcing = {forcing:?}
# Diffusive coupling between rows (torus only).
dynamics.coupling = {coupling:?}
dynamics.dt = {dt:?}
# RK4 steps per assimilation interval.
dynamics.substeps = {substeps}
# Forcing offset seen only by the forecast model (0 is a perfect model).
dynamics.model_forcing_error = {mfe:?}

# Truth trajectories. Training and test use different seeds.
data.spinup = {spinup}
data.train_length = {train_length}
data.test_length = {test_length}
data.train_seed = {train_seed}
data.test_seed = {test_seed}
data.train_path = "{train_path}"
data.test_path = "{test_path}"

# Velocity network.
model.hidden_width = {hidden_width}
model.depth = {depth}
model.conv_kernel = {conv_kernel}
model.tau_dim = {tau_dim}

# Observation lift. mode is "learned" or "gaussian"; k is the window size.
kernel.mode = "learned"
kernel.k = {kk}
kernel.hidden = [{khidden}]
# Length scale of the Gaussian the learned kernels start from.
kernel.init_scale = {init_scale:?}
# Length scales of the fixed Gaussian kernel (gaussian mode).
kernel.lh = {lh:?}
kernel.lw = {lw:?}

# Euler steps from background to analysis.
flow.L = {steps}

# Training.
train.lr = {lr:?}
train.weight_decay = {wd:?}
train.iterations_stage1 = {it1}
train.iterations_stage2 = {it2}
train.batch_size = {bs}
# Observation rates are drawn log-uniformly from [rate_min, rate_max].
train.rate_min = {rmin:?}
train.rate_max = {rmax:?}
# Background lead in assimilation intervals.
train.lead = {lead}
# Rollout lengths are drawn uniformly from 1..=rollout_max.
train.rollout_max = {rollout}
# Initial-condition perturbation of backgrounds (climatological std units).
train.sigma_ic = {sic:?}
# Noise added to the flow source during training (0 disables).
train.source_noise = {sn:?}
train.seed = {tseed}

# Assimilator used by single-step, noise-sweep and cycle: "flowda", "interp" or "oi".
assimilator.kind = "flowda"
assimilator.checkpoint = "{ckpt}"
assimilator.interp.length_scale = {ils:?}
assimilator.interp.window = {iw}
assimilator.oi.length_scale = {ols:?}
assimilator.oi.sigma_b = {osb:?}
# Observation-error std; defaults to the evaluated noise level with a 0.01 floor.
# assimilator.oi.sigma_o = 0.05
assimilator.oi.solver_tol = {otol:?}

# Evaluation protocols.
experiment.alphas = {alphas}
experiment.sigma_noise = {sigmas}
experiment.eval_times = {eval_times}
experiment.lead = {elead}
experiment.sigma_ic = {esic:?}
# "fixed" keeps observation locations across cycles, "shuffled" redraws them.
experiment.location_mode = "{mode}"
experiment.n_cycles = {n_cycles}
experiment.free_run_intervals = {free_run}
experiment.cycle_alpha = {calpha:?}
experiment.cycle_sigma_noise = {csig:?}

# Outputs.
output.dir = "{out}"
# Set to false for byte-identical reports across runs (wall_ms written as 0).
output.record_wall_time = {rwt}
"#,
        seed = c.seed,
        system = match d.system {
            crate::dynamics::System::Ring => "ring",
            crate::dynamics::System::Torus => "torus",
        },
        h = d.h,
        w = d.w,
        forcing = d.forcing,
        coupling = d.coupling,
        dt = d.dt,
        substeps = d.substeps,
        mfe = d.model_forcing_error,
        spinup = c.data.spinup,
        train_length = c.data.train_length,
        test_length = c.data.test_length,
        train_seed = c.data.train_seed,
        test_seed = c.data.test_seed,
        train_path = c.data.train_path.display(),
        test_path = c.data.test_path.display(),
        hidden_width = c.model.hidden_width,
        depth = c.model.depth,
        conv_kernel = c.model.conv_kernel,
        tau_dim = c.model.tau_dim,
        kk = k.k,
        khidden = hidden.join(", "),
        init_scale = k.init_scale,
        lh = k.lh,
        lw = k.lw,
        steps = c.flow.steps,
        lr = t.lr,
        wd = t.weight_decay,
        it1 = t.iterations_stage1,
        it2 = t.iterations_stage2,
        bs = t.batch_size,
        rmin = t.rate_min,
        rmax = t.rate_max,
        lead = t.lead,
        rollout = t.rollout_max,
        sic = t.sigma_ic,
        sn = t.source_noise,
        tseed = t.seed,
        ckpt = c.assimilator.checkpoint.display(),
        ils = c.assimilator.interp.length_scale,
        iw = c.assimilator.interp.window,
        ols = c.assimilator.oi.length_scale,
        osb = c.assimilator.oi.sigma_b,
        otol = c.assimilator.oi.solver_tol,
        alphas = list(&e.alphas),
        sigmas = list(&e.sigma_noise),
        eval_times = e.eval_times,
        elead = e.lead,
        esic = e.sigma_ic,
        mode = e.location_mode.as_str(),
        n_cycles = e.n_cycles,
        free_run = e.free_run_intervals,
        calpha = e.cycle_alpha,
        csig = e.cycle_sigma_noise,
        out = c.output.dir.display(),
        rwt = c.output.record_wall_time,
    )
}
