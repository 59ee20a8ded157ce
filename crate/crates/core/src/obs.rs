//! Synthetic point observations: sampling, noise, local rates and CSV exchange.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{GridState, VariableStats};

/// `M` scattered observations of all `V` variables.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    coords: Vec<(f64, f64)>,
    values: Vec<f64>,
    variable_names: Vec<String>,
    local_rates: Option<Vec<f64>>,
}

impl ObservationSet {
    pub fn new(coords: Vec<(f64, f64)>, values: Vec<f64>, variable_names: Vec<String>) -> Result<Self> {
        let v = variable_names.len();
        if v == 0 {
            return Err(Error::InvalidArgument("observations need at least one variable".into()));
        }
        if values.len() != coords.len() * v {
            return Err(Error::shape("observation values", coords.len() * v, values.len()));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite observation value".into()));
        }
        if coords.iter().any(|(h, w)| !h.is_finite() || !w.is_finite()) {
            return Err(Error::InvalidArgument("non-finite observation coordinate".into()));
        }
        Ok(Self {
            coords,
            values,
            variable_names,
            local_rates: None,
        })
    }

    pub fn empty(variable_names: Vec<String>) -> Self {
        Self {
            coords: Vec::new(),
            values: Vec::new(),
            variable_names,
            local_rates: Some(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn v(&self) -> usize {
        self.variable_names.len()
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, m: usize) -> &[f64] {
        let v = self.v();
        &self.values[m * v..(m + 1) * v]
    }

    pub fn variable_names(&self) -> &[String] {
        &self.variable_names
    }

    pub fn local_rates(&self) -> Option<&[f64]> {
        self.local_rates.as_deref()
    }

    /// Rejects coordinates outside `[0, H) × [0, W)`.
    pub fn check_domain(&self, h: usize, w: usize) -> Result<()> {
        for (m, &(ch, cw)) in self.coords.iter().enumerate() {
            if !(0.0..h as f64).contains(&ch) || !(0.0..w as f64).contains(&cw) {
                return Err(Error::OutOfRange(format!(
                    "observation {m} at ({ch}, {cw}) outside {h}x{w} domain"
                )));
            }
        }
        Ok(())
    }

    pub fn with_local_rates(mut self, rates: Vec<f64>) -> Result<Self> {
        if rates.len() != self.len() {
            return Err(Error::shape("local_rates", self.len(), rates.len()));
        }
        if rates.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::InvalidArgument("local rates must lie in (0, 1]".into()));
        }
        self.local_rates = Some(rates);
        Ok(self)
    }

    /// Computes and attaches local rates for window size `k`.
    pub fn populate_local_rates(self, k: usize, h: usize, w: usize) -> Result<Self> {
        let rates = local_rate(&self, k, h, w)?;
        self.with_local_rates(rates)
    }

    /// Integer grid location of each observation (nearest point, wrapped).
    pub fn grid_indices(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        self.coords
            .iter()
            .map(|&(ch, cw)| (nearest(ch, h), nearest(cw, w)))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header = vec!["h".to_string(), "w".to_string()];
        header.extend((0..self.v()).map(|k| format!("v{k}")));
        wtr.write_record(&header).map_err(|e| csv_err(path, e))?;
        for m in 0..self.len() {
            let (ch, cw) = self.coords[m];
            let mut row = vec![ch.to_string(), cw.to_string()];
            row.extend(self.value(m).iter().map(|x| x.to_string()));
            wtr.write_record(&row).map_err(|e| csv_err(path, e))?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads the `h,w,v0,...` CSV; `variable_names` labels the value columns.
    pub fn read_csv(path: &Path, variable_names: Vec<String>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
        let v = variable_names.len();
        let expected: Vec<String> = ["h".to_string(), "w".to_string()]
            .into_iter()
            .chain((0..v).map(|k| format!("v{k}")))
            .collect();
        if headers.iter().collect::<Vec<_>>() != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Format(format!(
                "{}: expected header {}, got {}",
                path.display(),
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut coords = Vec::new();
        let mut values = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let parse = |i: usize| -> Result<f64> {
                rec[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("{}: row {}: column {i}: {e}", path.display(), line + 1)))
            };
            coords.push((parse(0)?, parse(1)?));
            for k in 0..v {
                values.push(parse(2 + k)?);
            }
        }
        Self::new(coords, values, variable_names)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

fn nearest(c: f64, n: usize) -> usize {
    (c.round() as i64).rem_euclid(n as i64) as usize
}

/// Location selection for [`sample_observations`].
#[derive(Debug, Clone, Copy)]
pub enum SampleMode<'a> {
    /// Draw new distinct locations.
    Fresh,
    /// Observe exactly these `(h, w)` grid points.
    Reuse(&'a [(usize, usize)]),
}

/// Number of observations for a global rate: `round(alpha * H * W)`.
pub fn observation_count(alpha: f64, h: usize, w: usize) -> Result<usize> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "observation rate must lie in (0, 1], got {alpha}"
        )));
    }
    let m = (alpha * (h * w) as f64).round() as usize;
    if m == 0 {
        return Err(Error::InvalidArgument(format!(
            "rate {alpha} on a {h}x{w} grid yields no observations"
        )));
    }
    if m > h * w {
        return Err(Error::InvalidArgument(format!(
            "{m} observations exceed {} grid points",
            h * w
        )));
    }
    Ok(m)
}

/// Draws `round(alpha·H·W)` distinct grid points (sorted row-major).
pub fn sample_locations(alpha: f64, h: usize, w: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    let m = observation_count(alpha, h, w)?;
    let mut flat = index::sample(rng, h * w, m).into_vec();
    flat.sort_unstable();
    Ok(flat.into_iter().map(|n| (n / w, n % w)).collect())
}

/// Samples the truth at grid points. In `Reuse` mode `alpha` is ignored.
pub fn sample_observations(truth: &GridState, alpha: f64, mode: SampleMode<'_>, seed: u64) -> Result<ObservationSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_observations_with_rng(truth, alpha, mode, &mut rng)
}

pub fn sample_observations_with_rng(
    truth: &GridState,
    alpha: f64,
    mode: SampleMode<'_>,
    rng: &mut impl Rng,
) -> Result<ObservationSet> {
    let (h, w, v) = truth.dims();
    let fresh;
    let locations = match mode {
        SampleMode::Fresh => {
            fresh = sample_locations(alpha, h, w, rng)?;
            &fresh[..]
        }
        SampleMode::Reuse(locs) => {
            if locs.len() > h * w {
                return Err(Error::InvalidArgument(format!(
                    "{} observations exceed {} grid points",
                    locs.len(),
                    h * w
                )));
            }
            if let Some(&(i, j)) = locs.iter().find(|&&(i, j)| i >= h || j >= w) {
                return Err(Error::OutOfRange(format!("location ({i}, {j}) outside {h}x{w} grid")));
            }
            locs
        }
    };
    let mut coords = Vec::with_capacity(locations.len());
    let mut values = Vec::with_capacity(locations.len() * v);
    for &(i, j) in locations {
        coords.push((i as f64, j as f64));
        values.extend((0..v).map(|k| truth.get(i, j, k)));
    }
    ObservationSet::new(coords, values, truth.variable_names().to_vec())
}

/// Adds `N(0, sigma_rel * std_v)` to every observed value.
pub fn perturb_observations(
    obs: &ObservationSet,
    sigma_rel: f64,
    stats: &VariableStats,
    seed: u64,
) -> Result<ObservationSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perturb_observations_with_rng(obs, sigma_rel, stats, &mut rng)
}

pub fn perturb_observations_with_rng(
    obs: &ObservationSet,
    sigma_rel: f64,
    stats: &VariableStats,
    rng: &mut impl Rng,
) -> Result<ObservationSet> {
    if !(sigma_rel >= 0.0) || !sigma_rel.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "relative noise level must be >= 0, got {sigma_rel}"
        )));
    }
    if stats.len() != obs.v() {
        return Err(Error::shape("V", obs.v(), stats.len()));
    }
    if sigma_rel == 0.0 {
        return Ok(obs.clone());
    }
    let v = obs.v();
    let values = obs
        .values
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let z: f64 = StandardNormal.sample(rng);
            y + sigma_rel * stats.std()[i % v] * z
        })
        .collect();
    let mut out = obs.clone();
    out.values = values;
    if out.values.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("perturbation produced non-finite values".into()));
    }
    Ok(out)
}

/// Checks that the window size is odd and fits the domain.
pub fn validate_window(k: usize, h: usize, w: usize) -> Result<()> {
    let max_w = 2 * w - 1;
    let max = if h == 1 { max_w } else { max_w.min(2 * h - 1) };
    if k.is_multiple_of(2) || k < 1 || k > max {
        return Err(Error::InvalidArgument(format!(
            "window size k={k} must be odd and within [1, {max}] for a {h}x{w} grid"
        )));
    }
    Ok(())
}

/// Distinct indices within half-width `r` of `center` on a ring of `n`.
pub(crate) fn window_indices(center: usize, r: usize, n: usize) -> Vec<usize> {
    if 2 * r + 1 >= n {
        (0..n).collect()
    } else {
        (0..=2 * r).map(|o| (center + n + o - r) % n).collect()
    }
}

fn ring_distance(a: usize, b: usize, n: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(n - d)
}

/// `alpha_m = M_k / (cells in the k × k window)` per observation.
///
/// `M_k` counts observations (including `m`) whose wrapped integer distance
/// is at most `(k-1)/2` along both axes. The window holds `min(k,H)·min(k,W)`
/// distinct cells, which is `k·k` on grids wider than the window and `k` on a
/// single-row grid.
pub fn local_rate(obs: &ObservationSet, k: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    validate_window(k, h, w)?;
    let r = (k - 1) / 2;
    let idx = obs.grid_indices(h, w);
    let cells = (k.min(h) * k.min(w)) as f64;
    Ok(idx
        .iter()
        .map(|&(ih, iw)| {
            let count = idx
                .iter()
                .filter(|&&(jh, jw)| ring_distance(ih, jh, h) <= r && ring_distance(iw, jw, w) <= r)
                .count();
            count as f64 / cells
        })
        .collect())
}
