//! SetConv lift of scattered observations onto the grid.
//!
//! For grid point `n` the density is `rho[n] = Σ_m φ_mn` and the lifted
//! estimate is `x_o[n] = Σ_m φ_mn y_m / rho[n]`, with the separable weight
//! `φ_mn = K_h(h_n - h_m, α_m) · K_w(w_n - w_m, α_m)`. Only grid points inside
//! the `k × k` wrapped window of an observation receive weight.
//!
//! Where `rho[n] < RHO_EPS` the estimate falls back to the per-variable
//! climatological mean, so `x_o` is finite everywhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridState;
use crate::obs::{validate_window, window_indices, ObservationSet};
use crate::optim::Adam;

/// Density below which the lifted estimate uses the fallback mean.
pub const RHO_EPS: f64 = 1e-8;

/// Default window size on the toy grids.
pub const DEFAULT_WINDOW: usize = 9;

/// A small feed-forward kernel `(Δ, α) -> (0, ∞)`: tanh hidden layers and a
/// softplus output.
///
/// Parameters are laid out layer by layer as the row-major weight matrix
/// followed by the bias vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelMlp {
    pub hidden: Vec<usize>,
}

impl Default for KernelMlp {
    fn default() -> Self {
        Self { hidden: vec![16, 16] }
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl KernelMlp {
    pub fn new(hidden: Vec<usize>) -> Self {
        Self { hidden }
    }

    fn sizes(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.hidden.len() + 2);
        s.push(2);
        s.extend(&self.hidden);
        s.push(1);
        s
    }

    pub fn param_count(&self) -> usize {
        self.sizes().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    /// Forward pass keeping every layer's post-activation (input first).
    fn forward_trace(&self, p: &[f64], delta: f64, alpha: f64) -> (Vec<Vec<f64>>, f64) {
        let sizes = self.sizes();
        let mut acts = vec![vec![delta, alpha]];
        let mut off = 0;
        let n_layers = sizes.len() - 1;
        let mut z_out = 0.0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let wts = &p[off..off + fan_in * fan_out];
            let bias = &p[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let x = acts.last().unwrap();
            let z: Vec<f64> = (0..fan_out)
                .map(|o| bias[o] + (0..fan_in).map(|i| wts[o * fan_in + i] * x[i]).sum::<f64>())
                .collect();
            if l + 1 == n_layers {
                z_out = z[0];
            } else {
                acts.push(z.into_iter().map(f64::tanh).collect());
            }
        }
        (acts, z_out)
    }

    pub fn eval(&self, p: &[f64], delta: f64, alpha: f64) -> f64 {
        softplus(self.forward_trace(p, delta, alpha).1)
    }

    /// Accumulates `dout · ∂K/∂p` into `grad`.
    pub fn backward(&self, p: &[f64], delta: f64, alpha: f64, dout: f64, grad: &mut [f64]) {
        let sizes = self.sizes();
        let (acts, z_out) = self.forward_trace(p, delta, alpha);
        let n_layers = sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += sizes[l] * sizes[l + 1] + sizes[l + 1];
        }
        // dL/dz for the current layer's pre-activation
        let mut dz = vec![dout * sigmoid(z_out)];
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let base = offsets[l];
            let x = &acts[l];
            for o in 0..fan_out {
                for i in 0..fan_in {
                    grad[base + o * fan_in + i] += dz[o] * x[i];
                }
                grad[base + fan_in * fan_out + o] += dz[o];
            }
            if l == 0 {
                break;
            }
            let wts = &p[base..base + fan_in * fan_out];
            dz = (0..fan_in)
                .map(|i| {
                    let back: f64 = (0..fan_out).map(|o| wts[o * fan_in + i] * dz[o]).sum();
                    back * (1.0 - x[i] * x[i])
                })
                .collect();
        }
    }

    /// Random init from `seed`, small-variance normal weights.
    pub fn init_random(&self, seed: u64) -> Vec<f64> {
        let sizes = self.sizes();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Vec::with_capacity(self.param_count());
        for l in 0..sizes.len() - 1 {
            let std = (1.0 / sizes[l] as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            p.extend((0..sizes[l] * sizes[l + 1]).map(|_| normal.sample(&mut rng)));
            p.extend(std::iter::repeat_n(0.0, sizes[l + 1]));
        }
        p
    }

    /// Parameters fitted to `exp(-Δ²/(2 scale²))` over `|Δ| <= reach`,
    /// independent of `α`.
    pub fn init_gaussian(&self, scale: f64, reach: f64) -> Vec<f64> {
        let mut p = self.init_random(0x5e7c);
        let deltas: Vec<f64> = (0..=48).map(|i| -reach + 2.0 * reach * i as f64 / 48.0).collect();
        let alphas = [0.02, 0.1, 0.3, 0.6, 1.0];
        let mut adam = Adam::new(p.len(), 0.01);
        let mut grad = vec![0.0; p.len()];
        let n = (deltas.len() * alphas.len()) as f64;
        for step in 0..1500 {
            if step == 1000 {
                adam.lr = 0.002;
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &d in &deltas {
                let target = (-d * d / (2.0 * scale * scale)).exp();
                for &a in &alphas {
                    let out = self.eval(&p, d, a);
                    self.backward(&p, d, a, 2.0 * (out - target) / n, &mut grad);
                }
            }
            adam.step(&mut p, &grad).expect("finite kernel-fit gradient");
        }
        p.iter().map(|x| *x as f32 as f64).collect()
    }
}

/// How observation weights are computed.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelMode {
    /// Separable Gaussian with per-axis length scales (grid units).
    Gaussian { lh: f64, lw: f64 },
    /// Two learned kernels, one per axis.
    Learned {
        mlp_h: KernelMlp,
        theta_h: Vec<f64>,
        mlp_w: KernelMlp,
        theta_w: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub mode: KernelMode,
    /// Window size (odd, grid units).
    pub k: usize,
}

impl KernelParams {
    pub fn gaussian(lh: f64, lw: f64, k: usize) -> Result<Self> {
        if !(lh > 0.0 && lw > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kernel length scales must be positive, got ({lh}, {lw})"
            )));
        }
        if k.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("window size must be odd, got {k}")));
        }
        Ok(Self {
            mode: KernelMode::Gaussian { lh, lw },
            k,
        })
    }

    pub fn learned(mlp_h: KernelMlp, theta_h: Vec<f64>, mlp_w: KernelMlp, theta_w: Vec<f64>, k: usize) -> Result<Self> {
        if theta_h.len() != mlp_h.param_count() {
            return Err(Error::shape("kernel theta_h", mlp_h.param_count(), theta_h.len()));
        }
        if theta_w.len() != mlp_w.param_count() {
            return Err(Error::shape("kernel theta_w", mlp_w.param_count(), theta_w.len()));
        }
        if k.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("window size must be odd, got {k}")));
        }
        Ok(Self {
            mode: KernelMode::Learned {
                mlp_h,
                theta_h,
                mlp_w,
                theta_w,
            },
            k,
        })
    }

    pub fn kernel(&self) -> Kernel<'_> {
        match &self.mode {
            KernelMode::Gaussian { lh, lw } => Kernel::Gaussian { lh: *lh, lw: *lw },
            KernelMode::Learned {
                mlp_h,
                theta_h,
                mlp_w,
                theta_w,
            } => Kernel::Learned {
                mlp_h,
                theta_h,
                mlp_w,
                theta_w,
            },
        }
    }
}

/// Borrowed view of a kernel; learned parameters may live inside a larger
/// parameter vector.
#[derive(Debug, Clone, Copy)]
pub enum Kernel<'a> {
    Gaussian {
        lh: f64,
        lw: f64,
    },
    Learned {
        mlp_h: &'a KernelMlp,
        theta_h: &'a [f64],
        mlp_w: &'a KernelMlp,
        theta_w: &'a [f64],
    },
}

impl Kernel<'_> {
    fn factor_h(&self, dh: f64, alpha: f64) -> f64 {
        match self {
            Kernel::Gaussian { lh, .. } => (-dh * dh / (2.0 * lh * lh)).exp(),
            Kernel::Learned { mlp_h, theta_h, .. } => mlp_h.eval(theta_h, dh, alpha),
        }
    }

    fn factor_w(&self, dw: f64, alpha: f64) -> f64 {
        match self {
            Kernel::Gaussian { lw, .. } => (-dw * dw / (2.0 * lw * lw)).exp(),
            Kernel::Learned { mlp_w, theta_w, .. } => mlp_w.eval(theta_w, dw, alpha),
        }
    }

    pub fn weight(&self, dh: f64, dw: f64, alpha: f64) -> f64 {
        self.factor_h(dh, alpha) * self.factor_w(dw, alpha)
    }
}

/// `φ(Δh, Δw; α)` for already-wrapped offsets.
pub fn kernel_weight(dh: f64, dw: f64, alpha: f64, params: &KernelParams) -> f64 {
    params.kernel().weight(dh, dw, alpha)
}

/// Signed offset wrapped to `(-n/2, n/2]`.
pub fn wrap_offset(d: f64, n: usize) -> f64 {
    let n = n as f64;
    let r = d.rem_euclid(n);
    if r > n / 2.0 {
        r - n
    } else {
        r
    }
}

/// Non-negative `H × W` observation density.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftResult {
    pub x_o: GridState,
    pub rho: DensityField,
}

/// Lifts `obs` onto an `h × w` grid with the window from `params`.
///
/// `fallback` is the per-variable value used where the density vanishes
/// (normally the climatological mean).
pub fn setconv_lift(
    obs: &ObservationSet,
    h: usize,
    w: usize,
    params: &KernelParams,
    fallback: &[f64],
) -> Result<LiftResult> {
    validate_window(params.k, h, w)?;
    lift(obs, h, w, &params.kernel(), Some(params.k), fallback)
}

/// Per-observation window geometry and the separable kernel factors on it.
struct Footprint {
    rows: Vec<usize>,
    cols: Vec<usize>,
    dh: Vec<f64>,
    dw: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

fn footprint(
    coord: (f64, f64),
    alpha: f64,
    h: usize,
    w: usize,
    kernel: &Kernel<'_>,
    window: Option<usize>,
) -> Footprint {
    let (ch, cw) = coord;
    let ih = (ch.round() as i64).rem_euclid(h as i64) as usize;
    let iw = (cw.round() as i64).rem_euclid(w as i64) as usize;
    let (rows, cols) = match window {
        Some(k) => {
            let r = (k - 1) / 2;
            (window_indices(ih, r, h), window_indices(iw, r, w))
        }
        None => ((0..h).collect(), (0..w).collect()),
    };
    let dh: Vec<f64> = rows.iter().map(|&i| wrap_offset(i as f64 - ch, h)).collect();
    let dw: Vec<f64> = cols.iter().map(|&j| wrap_offset(j as f64 - cw, w)).collect();
    // A single-row grid has no latitude direction; its h-factor is 1.
    let a = if h == 1 {
        vec![1.0; rows.len()]
    } else {
        dh.iter().map(|&d| kernel.factor_h(d, alpha)).collect()
    };
    let b = dw.iter().map(|&d| kernel.factor_w(d, alpha)).collect();
    Footprint {
        rows,
        cols,
        dh,
        dw,
        a,
        b,
    }
}

/// Lift with an explicit kernel; `window = None` sums over the full grid.
pub fn lift(
    obs: &ObservationSet,
    h: usize,
    w: usize,
    kernel: &Kernel<'_>,
    window: Option<usize>,
    fallback: &[f64],
) -> Result<LiftResult> {
    let v = obs.v();
    if fallback.len() != v {
        return Err(Error::shape("fallback", v, fallback.len()));
    }
    obs.check_domain(h, w)?;
    let rates = obs
        .local_rates()
        .ok_or_else(|| Error::InvalidArgument("local rates must be populated before lifting".into()))?;
    let n = h * w;
    let mut rho = vec![0.0; n];
    let mut num = vec![0.0; n * v];
    for (m, (&coord, &alpha)) in obs.coords().iter().zip(rates).enumerate() {
        let fp = footprint(coord, alpha, h, w, kernel, window);
        let y = obs.value(m);
        for (ri, &row) in fp.rows.iter().enumerate() {
            for (ci, &col) in fp.cols.iter().enumerate() {
                let phi = fp.a[ri] * fp.b[ci];
                let idx = row * w + col;
                rho[idx] += phi;
                for k in 0..v {
                    num[idx * v + k] += phi * y[k];
                }
            }
        }
    }
    for idx in 0..n {
        for k in 0..v {
            num[idx * v + k] = if rho[idx] >= RHO_EPS {
                num[idx * v + k] / rho[idx]
            } else {
                fallback[k]
            };
        }
    }
    let x_o = GridState::new(h, w, v, num, obs.variable_names().to_vec())?;
    Ok(LiftResult {
        x_o,
        rho: DensityField { h, w, values: rho },
    })
}

/// Reverse pass of [`lift`] for learned kernels.
///
/// `g_xo` (`N × V`) and `g_rho` (`N`) are gradients of a scalar with respect
/// to the lift outputs; parameter gradients are accumulated into `grad_h`
/// and `grad_w`. Gaussian kernels have no parameters and return immediately.
#[allow(clippy::too_many_arguments)]
pub fn lift_backward(
    obs: &ObservationSet,
    kernel: &Kernel<'_>,
    window: Option<usize>,
    out: &LiftResult,
    g_xo: &[f64],
    g_rho: &[f64],
    grad_h: &mut [f64],
    grad_w: &mut [f64],
) -> Result<()> {
    let Kernel::Learned {
        mlp_h,
        theta_h,
        mlp_w,
        theta_w,
    } = kernel
    else {
        return Ok(());
    };
    let (h, w, v) = out.x_o.dims();
    let rates = obs
        .local_rates()
        .ok_or_else(|| Error::InvalidArgument("local rates must be populated before lifting".into()))?;
    let rho = &out.rho.values;
    let xo = out.x_o.values();
    for (m, (&coord, &alpha)) in obs.coords().iter().zip(rates).enumerate() {
        let fp = footprint(coord, alpha, h, w, kernel, window);
        let y = obs.value(m);
        let mut ga = vec![0.0; fp.rows.len()];
        let mut gb = vec![0.0; fp.cols.len()];
        for (ri, &row) in fp.rows.iter().enumerate() {
            for (ci, &col) in fp.cols.iter().enumerate() {
                let idx = row * w + col;
                let mut g_phi = g_rho[idx];
                if rho[idx] >= RHO_EPS {
                    let inv = 1.0 / rho[idx];
                    for k in 0..v {
                        g_phi += g_xo[idx * v + k] * (y[k] - xo[idx * v + k]) * inv;
                    }
                }
                ga[ri] += g_phi * fp.b[ci];
                gb[ci] += g_phi * fp.a[ri];
            }
        }
        if h > 1 {
            for (ri, &g) in ga.iter().enumerate() {
                mlp_h.backward(theta_h, fp.dh[ri], rates[m], g, grad_h);
            }
        }
        for (ci, &g) in gb.iter().enumerate() {
            mlp_w.backward(theta_w, fp.dw[ci], rates[m], g, grad_w);
        }
    }
    Ok(())
}
