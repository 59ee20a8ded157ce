//! The conditional velocity network and the flow-matching objective.
//!
//! Input channels, in order: normalized flow state (`V`), normalized lifted
//! estimate (`V`), `log(1 + rho)` (1) and the pseudo-time embedding
//! (`tau_dim`). The body is a periodic convolution followed by `depth`
//! residual blocks `h ← h + conv(silu(h))` and a pointwise head
//! `out = conv1x1(silu(h))` producing `V` channels in normalized units.
//!
//! Flat parameter order: `conv_in.{weight,bias}`, `block{i}.{weight,bias}` for
//! each residual block, `head.{weight,bias}`, then the latitude and longitude
//! kernel networks of the SetConv lift.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::nn::{conv_backward, conv_forward, silu, silu_grad, ConvGeom, ConvShape};
use crate::error::{Error, Result};
use crate::grid::{lerp_states, GridState, VariableStats};
use crate::obs::ObservationSet;
use crate::setconv::{lift, lift_backward, Kernel, KernelMlp, LiftResult, DEFAULT_WINDOW};

/// Highest pseudo-time frequency in the embedding (the default step count).
pub const TAU_MAX_FREQ: f64 = 32.0;

/// Length scale of the Gaussian the learned kernels are fitted to at
/// initialization. Narrow enough that a lifted value at an observed point is
/// dominated by that observation.
pub const DEFAULT_KERNEL_INIT_SCALE: f64 = 0.3;

/// Observation kernel used by the model's SetConv lift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum KernelArch {
    /// Trainable per-axis kernels initialised near a Gaussian of `init_scale`.
    Learned { hidden: Vec<usize>, init_scale: f64 },
    /// Fixed Gaussian kernel, no trainable parameters.
    Gaussian { lh: f64, lw: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub hidden_width: usize,
    pub depth: usize,
    pub conv_kernel: usize,
    pub tau_dim: usize,
    pub kernel: KernelArch,
    /// SetConv window size `k`.
    pub window: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            hidden_width: 64,
            depth: 6,
            conv_kernel: 5,
            tau_dim: 8,
            kernel: KernelArch::Learned {
                hidden: vec![16, 16],
                init_scale: DEFAULT_KERNEL_INIT_SCALE,
            },
            window: DEFAULT_WINDOW,
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_width == 0 {
            return bad("model.hidden_width must be >= 1".into());
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad(format!("model.conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if self.tau_dim < 2 || !self.tau_dim.is_multiple_of(2) {
            return bad(format!("model.tau_dim must be even and >= 2, got {}", self.tau_dim));
        }
        if self.window.is_multiple_of(2) {
            return bad(format!("kernel.k must be odd, got {}", self.window));
        }
        match &self.kernel {
            KernelArch::Learned { hidden, init_scale } => {
                if hidden.contains(&0) || !(*init_scale > 0.0) {
                    return bad("learned kernel needs non-empty layers and a positive init scale".into());
                }
            }
            KernelArch::Gaussian { lh, lw } => {
                if !(*lh > 0.0 && *lw > 0.0) {
                    return bad("gaussian kernel length scales must be positive".into());
                }
            }
        }
        Ok(())
    }

    fn kernel_mlp(&self) -> Option<KernelMlp> {
        match &self.kernel {
            KernelArch::Learned { hidden, .. } => Some(KernelMlp::new(hidden.clone())),
            KernelArch::Gaussian { .. } => None,
        }
    }
}

/// Named contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    conv_in: ConvShape,
    block: ConvShape,
    head: ConvShape,
    conv_in_off: usize,
    block_off: Vec<usize>,
    head_off: usize,
    kernel_h: (usize, usize),
    kernel_w: (usize, usize),
    total: usize,
}

impl Layout {
    fn new(arch: &Arch, h: usize, v: usize) -> Self {
        let taps = if h == 1 {
            arch.conv_kernel
        } else {
            arch.conv_kernel * arch.conv_kernel
        };
        let width = arch.hidden_width;
        let conv_in = ConvShape {
            c_in: 2 * v + 1 + arch.tau_dim,
            c_out: width,
            taps,
        };
        let block = ConvShape {
            c_in: width,
            c_out: width,
            taps,
        };
        let head = ConvShape {
            c_in: width,
            c_out: v,
            taps: 1,
        };
        let mut off = 0;
        let conv_in_off = off;
        off += conv_in.param_count();
        let block_off = (0..arch.depth)
            .map(|_| {
                let o = off;
                off += block.param_count();
                o
            })
            .collect();
        let head_off = off;
        off += head.param_count();
        let kn = arch.kernel_mlp().map_or(0, |m| m.param_count());
        let kernel_h = (off, kn);
        off += kn;
        let kernel_w = (off, kn);
        off += kn;
        Self {
            conv_in,
            block,
            head,
            conv_in_off,
            block_off,
            head_off,
            kernel_h,
            kernel_w,
            total: off,
        }
    }

    fn blocks(&self) -> Vec<ParamBlock> {
        let mut out = Vec::new();
        let mut push_conv = |name: &str, off: usize, s: ConvShape| {
            let nw = s.c_out * s.fan_in();
            out.push(ParamBlock {
                name: format!("{name}.weight"),
                offset: off,
                len: nw,
            });
            out.push(ParamBlock {
                name: format!("{name}.bias"),
                offset: off + nw,
                len: s.c_out,
            });
        };
        push_conv("conv_in", self.conv_in_off, self.conv_in);
        for (i, &o) in self.block_off.iter().enumerate() {
            push_conv(&format!("block{i}"), o, self.block);
        }
        push_conv("head", self.head_off, self.head);
        if self.kernel_h.1 > 0 {
            out.push(ParamBlock {
                name: "kernel_h".into(),
                offset: self.kernel_h.0,
                len: self.kernel_h.1,
            });
            out.push(ParamBlock {
                name: "kernel_w".into(),
                offset: self.kernel_w.0,
                len: self.kernel_w.1,
            });
        }
        out
    }
}

/// Sinusoidal pseudo-time features: `tau_dim / 2` sines then as many cosines,
/// at frequencies geometrically spaced over `[1, TAU_MAX_FREQ]`.
pub fn tau_embed(tau: f64, tau_dim: usize) -> Vec<f64> {
    let nf = (tau_dim / 2).max(1);
    let freqs: Vec<f64> = (0..nf)
        .map(|i| {
            if nf == 1 {
                1.0
            } else {
                TAU_MAX_FREQ.powf(i as f64 / (nf - 1) as f64)
            }
        })
        .collect();
    let mut out: Vec<f64> = freqs.iter().map(|f| (2.0 * PI * f * tau).sin()).collect();
    out.extend(freqs.iter().map(|f| (2.0 * PI * f * tau).cos()));
    out.truncate(tau_dim);
    out
}

/// Intermediate values kept for the reverse pass.
struct Tape {
    input: Vec<f64>,
    cols_in: Vec<f64>,
    /// Residual stream `h_0 .. h_depth`.
    hs: Vec<Vec<f64>>,
    /// `silu(h_b)` for every `b` including the last (head input).
    acts: Vec<Vec<f64>>,
    cols: Vec<Vec<f64>>,
}

/// The conditional velocity network together with its normalization
/// statistics and SetConv kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    arch: Arch,
    h: usize,
    w: usize,
    variable_names: Vec<String>,
    stats: VariableStats,
    params: Vec<f64>,
}

impl VelocityModel {
    /// Random initialisation with a zero head, so the fresh model is the
    /// identity assimilator. All parameters are `f32`-representable.
    pub fn new(
        arch: Arch,
        h: usize,
        w: usize,
        variable_names: Vec<String>,
        stats: VariableStats,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        let v = variable_names.len();
        if stats.len() != v {
            return Err(Error::shape("stats", v, stats.len()));
        }
        if h < 1 || w < 2 {
            return Err(Error::InvalidArgument(format!("invalid grid {h}x{w}")));
        }
        let layout = Layout::new(&arch, h, v);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |off: usize, s: ConvShape, gain: f64| {
            let std = gain / (s.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            for p in &mut params[off..off + s.c_out * s.fan_in()] {
                *p = normal.sample(&mut rng);
            }
        };
        fill(layout.conv_in_off, layout.conv_in, 1.0);
        for &o in &layout.block_off {
            fill(o, layout.block, 1.0);
        }
        if let KernelArch::Learned { hidden, init_scale } = &arch.kernel {
            let mlp = KernelMlp::new(hidden.clone());
            let reach = (arch.window / 2).max(1) as f64;
            let init = mlp.init_gaussian(*init_scale, reach);
            params[layout.kernel_h.0..layout.kernel_h.0 + layout.kernel_h.1].copy_from_slice(&init);
            params[layout.kernel_w.0..layout.kernel_w.0 + layout.kernel_w.1].copy_from_slice(&init);
        }
        for p in &mut params {
            *p = *p as f32 as f64;
        }
        Ok(Self {
            arch,
            h,
            w,
            variable_names,
            stats,
            params,
        })
    }

    /// Rebuilds a model from stored parts (checkpoint loading).
    pub fn from_parts(
        arch: Arch,
        h: usize,
        w: usize,
        variable_names: Vec<String>,
        stats: VariableStats,
        params: Vec<f64>,
    ) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch, h, variable_names.len());
        if params.len() != layout.total {
            return Err(Error::ArchMismatch(format!(
                "architecture needs {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        if stats.len() != variable_names.len() {
            return Err(Error::shape("stats", variable_names.len(), stats.len()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        Ok(Self {
            arch,
            h,
            w,
            variable_names,
            stats,
            params,
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.variable_names.len())
    }

    pub fn variable_names(&self) -> &[String] {
        &self.variable_names
    }

    pub fn stats(&self) -> &VariableStats {
        &self.stats
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Replaces the parameter vector (same length, finite values).
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape("params", self.params.len(), params.len()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Named parameter blocks in storage order.
    pub fn param_blocks(&self) -> Vec<ParamBlock> {
        self.layout().blocks()
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.arch, self.h, self.variable_names.len())
    }

    fn v(&self) -> usize {
        self.variable_names.len()
    }

    /// Zeroes the head so that the velocity vanishes identically.
    pub fn zero_head(&mut self) {
        let l = self.layout();
        let n = l.head.param_count();
        self.params[l.head_off..l.head_off + n]
            .iter_mut()
            .for_each(|p| *p = 0.0);
    }

    pub(crate) fn kernel_view<'a>(&'a self, params: &'a [f64], mlp: &'a Option<KernelMlp>) -> Kernel<'a> {
        let l = self.layout();
        match (&self.arch.kernel, mlp) {
            (KernelArch::Gaussian { lh, lw }, _) => Kernel::Gaussian { lh: *lh, lw: *lw },
            (KernelArch::Learned { .. }, Some(m)) => Kernel::Learned {
                mlp_h: m,
                theta_h: &params[l.kernel_h.0..l.kernel_h.0 + l.kernel_h.1],
                mlp_w: m,
                theta_w: &params[l.kernel_w.0..l.kernel_w.0 + l.kernel_w.1],
            },
            (KernelArch::Learned { .. }, None) => unreachable!("learned kernel without network"),
        }
    }

    fn prepare_obs(&self, obs: &ObservationSet) -> Result<ObservationSet> {
        if obs.v() != self.v() {
            return Err(Error::shape("V", self.v(), obs.v()));
        }
        if obs.variable_names() != self.variable_names.as_slice() {
            return Err(Error::shape(
                "variable_names",
                self.variable_names.join(","),
                obs.variable_names().join(","),
            ));
        }
        match obs.local_rates() {
            Some(_) => Ok(obs.clone()),
            None => obs.clone().populate_local_rates(self.arch.window, self.h, self.w),
        }
    }

    fn lift_with(&self, params: &[f64], obs: &ObservationSet) -> Result<(ObservationSet, LiftResult)> {
        crate::obs::validate_window(self.arch.window, self.h, self.w)?;
        let obs = self.prepare_obs(obs)?;
        let mlp = self.arch.kernel_mlp();
        let kernel = self.kernel_view(params, &mlp);
        let out = lift(&obs, self.h, self.w, &kernel, Some(self.arch.window), self.stats.mean())?;
        Ok((obs, out))
    }

    /// SetConv lift with the model's current kernels. Local rates are
    /// computed with the model window when the set does not carry them.
    pub fn lift(&self, obs: &ObservationSet) -> Result<LiftResult> {
        Ok(self.lift_with(&self.params, obs)?.1)
    }

    fn check_state(&self, x: &GridState) -> Result<()> {
        let (h, w, v) = x.dims();
        if h != self.h {
            return Err(Error::shape("H", self.h, h));
        }
        if w != self.w {
            return Err(Error::shape("W", self.w, w));
        }
        if v != self.v() {
            return Err(Error::shape("V", self.v(), v));
        }
        Ok(())
    }

    /// Channel-major network input.
    fn build_input(&self, x_tau: &GridState, lifted: &LiftResult, tau: f64) -> Result<Vec<f64>> {
        self.check_state(x_tau)?;
        self.check_state(&lifted.x_o)?;
        let n = self.h * self.w;
        let v = self.v();
        let (mean, std) = (self.stats.mean(), self.stats.std());
        let c_in = 2 * v + 1 + self.arch.tau_dim;
        let mut input = vec![0.0; c_in * n];
        for p in 0..n {
            for k in 0..v {
                input[k * n + p] = (x_tau.values()[p * v + k] - mean[k]) / std[k];
                input[(v + k) * n + p] = (lifted.x_o.values()[p * v + k] - mean[k]) / std[k];
            }
            input[2 * v * n + p] = lifted.rho.values[p].ln_1p();
        }
        for (i, e) in tau_embed(tau, self.arch.tau_dim).into_iter().enumerate() {
            input[(2 * v + 1 + i) * n..(2 * v + 2 + i) * n].fill(e);
        }
        Ok(input)
    }

    fn forward(&self, params: &[f64], input: Vec<f64>, keep: bool) -> Result<(Vec<f64>, Option<Tape>)> {
        let l = self.layout();
        let geom = ConvGeom::new(self.h, self.w, self.arch.conv_kernel);
        let point = ConvGeom::pointwise(self.h, self.w);
        let check = |x: &[f64], layer: usize| -> Result<()> {
            if x.iter().all(|v| v.is_finite()) {
                Ok(())
            } else {
                Err(Error::NonFiniteActivation { layer })
            }
        };
        let mut cols_in = Vec::new();
        let h0 = conv_forward(l.conv_in, &params[l.conv_in_off..], &input, &geom, &mut cols_in);
        check(&h0, 0)?;
        let mut hs = vec![h0];
        let mut acts = Vec::with_capacity(self.arch.depth + 1);
        let mut cols = Vec::with_capacity(self.arch.depth);
        for (b, &off) in l.block_off.iter().enumerate() {
            let h = hs.last().unwrap();
            let a: Vec<f64> = h.iter().map(|&x| silu(x)).collect();
            let mut c = Vec::new();
            let mut y = conv_forward(l.block, &params[off..], &a, &geom, &mut c);
            for (yi, hi) in y.iter_mut().zip(h) {
                *yi += hi;
            }
            check(&y, b + 1)?;
            acts.push(a);
            if keep {
                cols.push(c);
            }
            hs.push(y);
            if !keep && hs.len() > 1 {
                hs.remove(0);
                acts.clear();
            }
        }
        let a_last: Vec<f64> = hs.last().unwrap().iter().map(|&x| silu(x)).collect();
        let mut unused = Vec::new();
        let out = conv_forward(l.head, &params[l.head_off..], &a_last, &point, &mut unused);
        check(&out, self.arch.depth + 1)?;
        acts.push(a_last);
        let tape = keep.then_some(Tape {
            input,
            cols_in,
            hs,
            acts,
            cols,
        });
        Ok((out, tape))
    }

    /// Reverse pass; returns the input gradient when `want_dx`.
    fn backward(
        &self,
        params: &[f64],
        tape: &Tape,
        d_out: &[f64],
        grad: &mut [f64],
        want_dx: bool,
    ) -> Option<Vec<f64>> {
        let l = self.layout();
        let geom = ConvGeom::new(self.h, self.w, self.arch.conv_kernel);
        let point = ConvGeom::pointwise(self.h, self.w);
        let depth = self.arch.depth;
        let d_act = conv_backward(
            l.head,
            &params[l.head_off..],
            &tape.acts[depth],
            &[],
            &point,
            d_out,
            &mut grad[l.head_off..l.head_off + l.head.param_count()],
            true,
        )
        .unwrap();
        let mut dh: Vec<f64> = d_act
            .iter()
            .zip(&tape.hs[depth])
            .map(|(g, &x)| g * silu_grad(x))
            .collect();
        for b in (0..depth).rev() {
            let off = l.block_off[b];
            let da = conv_backward(
                l.block,
                &params[off..],
                &tape.acts[b],
                &tape.cols[b],
                &geom,
                &dh,
                &mut grad[off..off + l.block.param_count()],
                true,
            )
            .unwrap();
            for ((d, g), &x) in dh.iter_mut().zip(&da).zip(&tape.hs[b]) {
                *d += g * silu_grad(x);
            }
        }
        conv_backward(
            l.conv_in,
            &params[l.conv_in_off..],
            &tape.input,
            &tape.cols_in,
            &geom,
            &dh,
            &mut grad[l.conv_in_off..l.conv_in_off + l.conv_in.param_count()],
            want_dx,
        )
    }

    /// Network output in normalized units, grid layout `(h, w, v)`.
    fn normalized_output(&self, params: &[f64], x_tau: &GridState, lifted: &LiftResult, tau: f64) -> Result<Vec<f64>> {
        let input = self.build_input(x_tau, lifted, tau)?;
        let (out, _) = self.forward(params, input, false)?;
        Ok(self.to_grid_layout(&out))
    }

    fn to_grid_layout(&self, channel_major: &[f64]) -> Vec<f64> {
        let n = self.h * self.w;
        let v = self.v();
        let mut g = vec![0.0; n * v];
        for k in 0..v {
            for p in 0..n {
                g[p * v + k] = channel_major[k * n + p];
            }
        }
        g
    }

    /// Velocity in physical units at flow state `x_tau` and pseudo-time `tau`.
    pub fn velocity(&self, x_tau: &GridState, lifted: &LiftResult, tau: f64) -> Result<GridState> {
        let out = self.normalized_output(&self.params, x_tau, lifted, tau)?;
        let v = self.v();
        let std = self.stats.std();
        let values = out.iter().enumerate().map(|(i, u)| u * std[i % v]).collect();
        Ok(x_tau.with_values(values))
    }

    fn check_sample(&self, s: &TrainSample) -> Result<()> {
        self.check_state(&s.x_b)?;
        s.x_b.check_compatible(&s.x_g)?;
        if !(0.0..=1.0).contains(&s.tau) {
            return Err(Error::InvalidArgument(format!("tau must lie in [0, 1], got {}", s.tau)));
        }
        Ok(())
    }

    fn sample_loss(&self, params: &[f64], s: &TrainSample) -> Result<f64> {
        self.check_sample(s)?;
        let (_, lifted) = self.lift_with(params, &s.obs)?;
        let x_tau = lerp_states(&s.x_b, &s.x_g, s.tau)?;
        let out = self.normalized_output(params, &x_tau, &lifted, s.tau)?;
        let target = self.normalized_target(s);
        Ok(out.iter().zip(&target).map(|(u, t)| (u - t) * (u - t)).sum::<f64>() / out.len() as f64)
    }

    fn normalized_target(&self, s: &TrainSample) -> Vec<f64> {
        let v = self.v();
        let std = self.stats.std();
        s.x_g
            .values()
            .iter()
            .zip(s.x_b.values())
            .enumerate()
            .map(|(i, (g, b))| (g - b) / std[i % v])
            .collect()
    }

    /// Loss of one sample and its gradient accumulated as `scale · ∇` into `grad`.
    fn sample_loss_grad(&self, params: &[f64], s: &TrainSample, scale: f64, grad: &mut [f64]) -> Result<f64> {
        self.check_sample(s)?;
        let (obs, lifted) = self.lift_with(params, &s.obs)?;
        let x_tau = lerp_states(&s.x_b, &s.x_g, s.tau)?;
        let input = self.build_input(&x_tau, &lifted, s.tau)?;
        let (out, tape) = self.forward(params, input, true)?;
        let tape = tape.expect("tape requested");
        let target = self.normalized_target(s);
        let n = self.h * self.w;
        let v = self.v();
        let count = (n * v) as f64;
        let mut loss = 0.0;
        let mut d_out = vec![0.0; n * v];
        for k in 0..v {
            for p in 0..n {
                let r = out[k * n + p] - target[p * v + k];
                loss += r * r;
                d_out[k * n + p] = scale * 2.0 * r / count;
            }
        }
        let learned = matches!(self.arch.kernel, KernelArch::Learned { .. });
        let d_in = self.backward(params, &tape, &d_out, grad, learned);
        if let Some(d_in) = d_in {
            let std = self.stats.std();
            let mut g_xo = vec![0.0; n * v];
            for k in 0..v {
                for p in 0..n {
                    g_xo[p * v + k] = d_in[(v + k) * n + p] / std[k];
                }
            }
            let g_rho: Vec<f64> = (0..n)
                .map(|p| d_in[2 * v * n + p] / (1.0 + lifted.rho.values[p]))
                .collect();
            let l = self.layout();
            let mlp = self.arch.kernel_mlp();
            let kernel = self.kernel_view(params, &mlp);
            let (gh, rest) = grad[l.kernel_h.0..].split_at_mut(l.kernel_h.1);
            let gw = &mut rest[..l.kernel_w.1];
            lift_backward(&obs, &kernel, Some(self.arch.window), &lifted, &g_xo, &g_rho, gh, gw)?;
        }
        Ok(loss / count)
    }

    /// Flow-matching loss of one sample in normalized units.
    pub fn cfm_loss(&self, sample: &TrainSample) -> Result<f64> {
        self.sample_loss(&self.params, sample)
    }

    /// Mean loss over a batch.
    pub fn batch_loss(&self, batch: &[TrainSample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut total = 0.0;
        for s in batch {
            total += self.cfm_loss(s)?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Mean batch loss and its exact gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &[TrainSample]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut grad = vec![0.0; self.params.len()];
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for s in batch {
            loss += self.sample_loss_grad(&self.params, s, scale, &mut grad)?;
        }
        for block in self.param_blocks() {
            if grad[block.offset..block.offset + block.len]
                .iter()
                .any(|g| !g.is_finite())
            {
                return Err(Error::NonFiniteGradient { block: block.name });
            }
        }
        Ok((loss * scale, grad))
    }

    pub fn grad(&self, batch: &[TrainSample]) -> Result<Vec<f64>> {
        Ok(self.loss_and_grad(batch)?.1)
    }
}

/// One flow-matching training example. The lift is recomputed from `obs`
/// with the model's current kernels whenever the loss is evaluated.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub x_b: GridState,
    pub x_g: GridState,
    pub obs: ObservationSet,
    pub tau: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::default_names;
    use crate::obs::{sample_observations, SampleMode};

    fn tiny_model(kernel: KernelArch, seed: u64) -> VelocityModel {
        let arch = Arch {
            hidden_width: 4,
            depth: 1,
            conv_kernel: 3,
            tau_dim: 2,
            kernel,
            window: 5,
        };
        let stats = VariableStats::new(vec![0.3], vec![1.7]).unwrap();
        VelocityModel::new(arch, 1, 8, default_names(1), stats, seed).unwrap()
    }

    fn sample(seed: u64) -> TrainSample {
        let xg = GridState::new(
            1,
            8,
            1,
            (0..8).map(|i| (i as f64 * 0.9 + seed as f64).sin() * 2.0).collect(),
            default_names(1),
        )
        .unwrap();
        let xb = GridState::new(
            1,
            8,
            1,
            (0..8).map(|i| (i as f64 * 0.5).cos()).collect(),
            default_names(1),
        )
        .unwrap();
        let obs = sample_observations(&xg, 0.4, SampleMode::Fresh, seed).unwrap();
        TrainSample {
            x_b: xb,
            x_g: xg,
            obs,
            tau: 0.37,
        }
    }

    #[test]
    fn tau_embedding_shape_and_origin() {
        let e = tau_embed(0.0, 8);
        assert_eq!(e.len(), 8);
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        let a = tau_embed(0.3, 8);
        let b = tau_embed(1.3, 8);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn default_arch_is_about_1e5_params() {
        let m = VelocityModel::new(Arch::default(), 1, 40, default_names(1), VariableStats::identity(1), 0).unwrap();
        let n = m.param_count();
        assert!((80_000..200_000).contains(&n), "{n}");
        let blocks = m.param_blocks();
        assert_eq!(blocks.first().unwrap().name, "conv_in.weight");
        assert_eq!(blocks.last().unwrap().name, "kernel_w");
        assert_eq!(blocks.iter().map(|b| b.len).sum::<usize>(), n);
    }

    #[test]
    fn zero_head_gives_zero_velocity() {
        let m = tiny_model(
            KernelArch::Learned {
                hidden: vec![4],
                init_scale: 1.0,
            },
            1,
        );
        let s = sample(2);
        let lifted = m.lift(&s.obs).unwrap();
        let u = m.velocity(&s.x_b, &lifted, 0.2).unwrap();
        assert!(u.values().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn loss_with_zero_output_is_mean_square_target() {
        let m = tiny_model(KernelArch::Gaussian { lh: 1.0, lw: 1.0 }, 1);
        let s = sample(3);
        let t = m.normalized_target(&s);
        let expected = t.iter().map(|x| x * x).sum::<f64>() / t.len() as f64;
        assert!((m.cfm_loss(&s).unwrap() - expected).abs() < 1e-14);
    }

    fn perturbed(m: &mut VelocityModel, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).unwrap();
        let p: Vec<f64> = m.params().iter().map(|x| x + normal.sample(&mut rng)).collect();
        m.set_params(p).unwrap();
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn forward_matches_scalar_oracle() {
        let mut m = tiny_model(KernelArch::Gaussian { lh: 1.0, lw: 1.2 }, 11);
        perturbed(&mut m, 12, 0.4);
        let s = sample(6);
        let lifted = m.lift(&s.obs).unwrap();
        let tau = 0.61;
        let got = m.velocity(&s.x_b, &lifted, tau).unwrap();

        // Layer-by-layer loops straight from the documented layout.
        let p = m.params();
        let (n, width, taps, c_in) = (8usize, 4usize, 3usize, 5usize);
        let silu = |x: f64| x / (1.0 + (-x).exp());
        let mut input = vec![[0.0f64; 8]; c_in];
        for j in 0..n {
            input[0][j] = (s.x_b.values()[j] - 0.3) / 1.7;
            input[1][j] = (lifted.x_o.values()[j] - 0.3) / 1.7;
            input[2][j] = (1.0 + lifted.rho.values[j]).ln();
            input[3][j] = (2.0 * PI * tau).sin();
            input[4][j] = (2.0 * PI * tau).cos();
        }
        let conv = |p: &[f64], x: &Vec<[f64; 8]>, cin: usize| -> Vec<[f64; 8]> {
            let mut y = vec![[0.0f64; 8]; width];
            for o in 0..width {
                for j in 0..n {
                    let mut acc = p[width * cin * taps + o];
                    for c in 0..cin {
                        for t in 0..taps {
                            let src = (j + n + t - 1) % n;
                            acc += p[o * cin * taps + c * taps + t] * x[c][src];
                        }
                    }
                    y[o][j] = acc;
                }
            }
            y
        };
        let n_in = width * c_in * taps + width;
        let h0 = conv(&p[..n_in], &input, c_in);
        let a0: Vec<[f64; 8]> = h0.iter().map(|r| r.map(silu)).collect();
        let r = conv(&p[n_in..], &a0, width);
        let n_blk = width * width * taps + width;
        let head = &p[n_in + n_blk..];
        for j in 0..n {
            let mut out = head[width];
            for o in 0..width {
                out += head[o] * silu(h0[o][j] + r[o][j]);
            }
            assert!((got.values()[j] - out * 1.7).abs() < 1e-10, "point {j}");
        }
        let again = m.velocity(&s.x_b, &lifted, tau).unwrap();
        assert_eq!(got, again);
    }

    #[test]
    fn loss_on_two_by_two_grid_by_hand() {
        let arch = Arch {
            hidden_width: 3,
            depth: 1,
            conv_kernel: 3,
            tau_dim: 2,
            kernel: KernelArch::Gaussian { lh: 1.0, lw: 1.0 },
            window: 3,
        };
        let stats = VariableStats::new(vec![0.0], vec![2.0]).unwrap();
        let m = VelocityModel::new(arch, 2, 2, default_names(1), stats, 0).unwrap();
        let xb = GridState::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0], default_names(1)).unwrap();
        let xg = GridState::new(2, 2, 1, vec![1.0, 1.0, 0.0, 3.0], default_names(1)).unwrap();
        let obs = ObservationSet::new(vec![(0.0, 1.0)], vec![1.0], default_names(1)).unwrap();
        let s = TrainSample {
            x_b: xb,
            x_g: xg,
            obs,
            tau: 0.5,
        };
        // Normalized targets 0.5, 0, -1, 0 against a zero output.
        assert_eq!(m.cfm_loss(&s).unwrap(), 0.3125);
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_stationary_head() {
        let mut m = tiny_model(KernelArch::Gaussian { lh: 1.0, lw: 1.0 }, 2);
        perturbed(&mut m, 3, 0.3);
        let mut s = sample(1);
        s.x_b = s.x_g.clone();
        // Zero head and identical endpoints give a zero target and zero output.
        m.zero_head();
        assert_eq!(m.cfm_loss(&s).unwrap(), 0.0);
        let g = m.grad(&[s]).unwrap();
        let head = m.param_blocks().into_iter().find(|b| b.name == "head.weight").unwrap();
        assert!(g[head.offset..head.offset + head.len].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let mut m = tiny_model(
            KernelArch::Learned {
                hidden: vec![4],
                init_scale: 1.0,
            },
            4,
        );
        perturbed(&mut m, 5, 0.2);
        let a = sample(2);
        let b = sample(7);
        let g1 = m.grad(&[a.clone(), b.clone()]).unwrap();
        let g2 = m.grad(&[a.clone(), b.clone(), a.clone(), b.clone()]).unwrap();
        for (x, y) in g1.iter().zip(&g2) {
            assert!((x - y).abs() < 1e-12);
        }
        let l1 = m.batch_loss(&[a.clone(), b.clone()]).unwrap();
        let l2 = m.batch_loss(&[b, a]).unwrap();
        assert!((l1 - l2).abs() < 1e-15 && l1 >= 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut m = tiny_model(
            KernelArch::Learned {
                hidden: vec![4],
                init_scale: 1.0,
            },
            5,
        );
        // Non-zero head so every block receives gradient.
        perturbed(&mut m, 9, 0.3);
        let p = m.params().to_vec();
        let batch = vec![sample(1), sample(4)];
        let g = m.grad(&batch).unwrap();
        let h = 1e-5;
        for i in 0..p.len() {
            let mut mp = m.clone();
            let mut pp = p.clone();
            pp[i] += h;
            mp.set_params(pp).unwrap();
            let lp = mp.batch_loss(&batch).unwrap();
            let mut pm = p.clone();
            pm[i] -= h;
            mp.set_params(pm).unwrap();
            let lm = mp.batch_loss(&batch).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: fd {fd} vs {}", g[i]);
        }
    }
}
