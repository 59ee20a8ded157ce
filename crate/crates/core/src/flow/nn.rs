//! Periodic convolution layers with explicit reverse passes.
//!
//! Activations are channel-major: `C × N` with `N = H·W` grid points in
//! row-major order. A convolution gathers its taps into an im2col matrix and
//! runs one GEMM, so both directions are dense matrix products.

/// Tap offsets and the wrapped gather table for one grid.
#[derive(Debug, Clone)]
pub(crate) struct ConvGeom {
    pub taps: usize,
    pub n: usize,
    /// `src[t * n + p]` is the grid point read by tap `t` at output point `p`.
    src: Vec<usize>,
}

impl ConvGeom {
    /// `size × size` taps on a torus, or `1 × size` when `h == 1`.
    pub fn new(h: usize, w: usize, size: usize) -> Self {
        let r = (size / 2) as isize;
        let offsets: Vec<(isize, isize)> = if h == 1 {
            (-r..=r).map(|dw| (0, dw)).collect()
        } else {
            (-r..=r).flat_map(|dh| (-r..=r).map(move |dw| (dh, dw))).collect()
        };
        Self::from_offsets(h, w, &offsets)
    }

    /// Single tap (pointwise layer).
    pub fn pointwise(h: usize, w: usize) -> Self {
        Self::from_offsets(h, w, &[(0, 0)])
    }

    fn from_offsets(h: usize, w: usize, offsets: &[(isize, isize)]) -> Self {
        let n = h * w;
        let mut src = Vec::with_capacity(offsets.len() * n);
        for &(dh, dw) in offsets {
            for i in 0..h {
                for j in 0..w {
                    let si = (i as isize + dh).rem_euclid(h as isize) as usize;
                    let sj = (j as isize + dw).rem_euclid(w as isize) as usize;
                    src.push(si * w + sj);
                }
            }
        }
        Self {
            taps: offsets.len(),
            n,
            src,
        }
    }
}

/// `c = a · b + beta · c` for row-major `a: m × k`, `b: k × n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds checked above; row-major strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = aᵀ · b + beta · c` for row-major `a: k × m`, `b: k × n`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds checked above; `a` read transposed via swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a · bᵀ + beta · c` for row-major `a: m × k`, `b: n × k`.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds checked above; `b` read transposed via swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shape of one convolution layer. Parameters are `W (c_out × c_in·taps)`
/// row-major followed by `b (c_out)`; column index is `c·taps + t`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub taps: usize,
}

impl ConvShape {
    pub fn param_count(&self) -> usize {
        self.c_out * self.c_in * self.taps + self.c_out
    }

    pub fn fan_in(&self) -> usize {
        self.c_in * self.taps
    }
}

pub(crate) fn im2col(x: &[f64], c_in: usize, geom: &ConvGeom, cols: &mut Vec<f64>) {
    let (n, taps) = (geom.n, geom.taps);
    cols.clear();
    cols.reserve(c_in * taps * n);
    for c in 0..c_in {
        let xc = &x[c * n..(c + 1) * n];
        for t in 0..taps {
            let src = &geom.src[t * n..(t + 1) * n];
            cols.extend(src.iter().map(|&s| xc[s]));
        }
    }
}

/// Forward: returns `c_out × N` and leaves the im2col matrix in `cols`.
pub(crate) fn conv_forward(
    shape: ConvShape,
    params: &[f64],
    x: &[f64],
    geom: &ConvGeom,
    cols: &mut Vec<f64>,
) -> Vec<f64> {
    let n = geom.n;
    let k = shape.fan_in();
    let (wts, bias) = params.split_at(shape.c_out * k);
    let mut y = Vec::with_capacity(shape.c_out * n);
    for &b in &bias[..shape.c_out] {
        y.extend(std::iter::repeat_n(b, n));
    }
    if geom.taps == 1 {
        gemm(shape.c_out, k, n, wts, x, 1.0, &mut y);
    } else {
        im2col(x, shape.c_in, geom, cols);
        gemm(shape.c_out, k, n, wts, cols, 1.0, &mut y);
    }
    y
}

/// Reverse: accumulates parameter gradients into `grad` and, when requested,
/// returns the input gradient (`c_in × N`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    shape: ConvShape,
    params: &[f64],
    x: &[f64],
    cols: &[f64],
    geom: &ConvGeom,
    dy: &[f64],
    grad: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    let n = geom.n;
    let k = shape.fan_in();
    let input = if geom.taps == 1 { x } else { cols };
    let (g_w, g_b) = grad.split_at_mut(shape.c_out * k);
    gemm_nt(shape.c_out, n, k, dy, input, 1.0, g_w);
    for (o, gb) in g_b[..shape.c_out].iter_mut().enumerate() {
        *gb += dy[o * n..(o + 1) * n].iter().sum::<f64>();
    }
    if !want_dx {
        return None;
    }
    let wts = &params[..shape.c_out * k];
    let mut dcols = vec![0.0; k * n];
    gemm_tn(k, shape.c_out, n, wts, dy, 0.0, &mut dcols);
    if geom.taps == 1 {
        return Some(dcols);
    }
    let mut dx = vec![0.0; shape.c_in * n];
    for c in 0..shape.c_in {
        let dxc = &mut dx[c * n..(c + 1) * n];
        for t in 0..geom.taps {
            let row = &dcols[(c * geom.taps + t) * n..(c * geom.taps + t + 1) * n];
            let src = &geom.src[t * n..(t + 1) * n];
            for (p, &s) in src.iter().enumerate() {
                dxc[s] += row[p];
            }
        }
    }
    Some(dx)
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}
