//! Free transition density of the relativistic stable process.
//!
//! With the subordinator scaled as `u = t^{1/β} z`,
//!
//! ```text
//! p(t, x) = e^{mt} t^{-d/α} F(|x| t^{-1/α}, mt),
//! F(ρ, μ) = (4π)^{-d/2} ∫_0^∞ z^{-d/2} e^{-ρ²/(4z)} e^{-μ^{1/β} z} θ_β(1, z) dz,
//! ```
//!
//! so one scaled profile serves every time. [`scaled_profile`] evaluates `F`
//! by nested adaptive quadrature and is the accuracy reference.
//! [`KernelFamily`] precomputes `θ_β` on a fixed Gauss–Legendre grid in
//! `ln z`, after which a whole [`RadialKernelTable`] for a new `μ` costs one
//! sparse matrix–vector product.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::quad::{gauss_legendre, integrate_panels, QuadOptions};
use crate::specfun::{
    gamma, negligible_below, surface_area, ProcessParams, StableSubordinatorDensity,
};

/// Table grid in scaled radius: `[TABLE_RHO_MIN, TABLE_RHO_MAX]`, log-spaced.
pub const TABLE_RHO_MIN: f64 = 1e-3;
pub const TABLE_RHO_MAX: f64 = 50.0;
pub const TABLE_NODES: usize = 512;
/// Log-spaced extension beyond the main grid, used for short remaining times.
pub const TAIL_RHO_MAX: f64 = 1e6;
pub const TAIL_NODES: usize = 128;

const PROFILE_RTOL: f64 = 1e-10;
const KERNEL_PANEL_WIDTH: f64 = 0.25;
const KERNEL_PANEL_NODES: usize = 8;

/// `C_1 = ω_d Γ(d/α) / ((2π)^d α)`.
pub fn c1_const(params: &ProcessParams) -> Result<f64> {
    let d = params.dim();
    Ok(surface_area(params.d)? * gamma(d / params.alpha)? / ((2.0 * PI).powf(d) * params.alpha))
}

/// `F(ρ, μ)` by nested adaptive quadrature in `ln z`.
pub fn scaled_profile(rho: f64, mu: f64, params: &ProcessParams) -> Result<f64> {
    if !(rho >= 0.0 && mu >= 0.0) {
        return Err(Error::Domain(format!(
            "scaled profile needs rho >= 0 and mu >= 0, got ({rho}, {mu})"
        )));
    }
    let dens = StableSubordinatorDensity::new(params.beta)?;
    let tilt = mu.powf(1.0 / params.beta);
    let half_d = params.dim() / 2.0;
    let quarter_rho2 = 0.25 * rho * rho;
    let lo = negligible_below(params.beta).ln();
    let mut hi = (1e16 * rho.max(1.0).powi(2)).ln();
    if tilt > 0.0 {
        hi = hi.min((800.0 / tilt).ln());
    }
    if hi <= lo {
        return Ok(0.0);
    }
    let mut failure = None;
    let integrand = |l: f64| {
        let z = l.exp();
        let log_weight = (1.0 - half_d) * l - quarter_rho2 / z - tilt * z;
        if log_weight < -745.0 {
            return 0.0;
        }
        match dens.density(z) {
            Ok(theta) => log_weight.exp() * theta,
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        }
    };
    let value = integrate_panels(integrand, lo, hi, 1.0, QuadOptions::rel(PROFILE_RTOL))?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(value * (4.0 * PI).powf(-half_d))
}

/// A free-density evaluation together with its quadrature bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityEval {
    pub value: f64,
    /// `false` when the scaled radius exceeds [`TABLE_RHO_MAX`]; the value is
    /// still a quadrature result but outside the calibrated accuracy range.
    pub nominal_accuracy: bool,
}

/// `p(t, x)` at `|x| = r`.
pub fn free_density(t: f64, r: f64, params: &ProcessParams) -> Result<f64> {
    Ok(free_density_eval(t, r, params)?.value)
}

pub fn free_density_eval(t: f64, r: f64, params: &ProcessParams) -> Result<DensityEval> {
    if !(t > 0.0) || !(r >= 0.0) {
        return Err(Error::Domain(format!(
            "free density needs t > 0, r >= 0, got ({t}, {r})"
        )));
    }
    let rho = r * t.powf(-1.0 / params.alpha);
    let mu = params.m * t;
    let f = scaled_profile(rho, mu, params)?;
    Ok(DensityEval {
        value: (mu).exp() * t.powf(-params.dim() / params.alpha) * f,
        nominal_accuracy: rho <= TABLE_RHO_MAX,
    })
}

/// `e^{mt} t^{-d/α} C_1`, the upper bound on `p(t, x)`.
pub fn density_upper_bound(t: f64, params: &ProcessParams) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("time must be positive, got {t}")));
    }
    Ok((params.m * t).exp() * t.powf(-params.dim() / params.alpha) * c1_const(params)?)
}

/// `C_1(t) = (4π)^{-d/2} ∫ z^{-d/2} e^{-(mt)^{1/β} z} θ_β(1, z) dz = F(0, mt)`.
pub fn c1_of_t(t: f64, params: &ProcessParams) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("time must be nonnegative, got {t}")));
    }
    if t == 0.0 || params.m == 0.0 {
        return c1_const(params);
    }
    scaled_profile(0.0, params.m * t, params)
}

/// Precomputed quadrature for `F(ρ_j, μ)` on the fixed table radii.
#[derive(Debug, Clone)]
pub struct KernelFamily {
    params: ProcessParams,
    z: Vec<f64>,
    radii: Vec<f64>,
    main_len: usize,
    /// Row `j` holds `w_i (4π)^{-d/2} z_i^{1-d/2} θ(z_i) e^{-ρ_j²/(4 z_i)}` for
    /// `i >= row_start[j]`. Row 0 is `ρ = 0`.
    rows: Vec<Vec<f64>>,
    row_start: Vec<usize>,
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

impl KernelFamily {
    pub fn new(params: &ProcessParams) -> Result<Self> {
        let dens = StableSubordinatorDensity::new(params.beta)?;
        let half_d = params.dim() / 2.0;
        let lo = negligible_below(params.beta).ln();
        let hi = (1e16 * TAIL_RHO_MAX * TAIL_RHO_MAX).ln();
        let n_panels = ((hi - lo) / KERNEL_PANEL_WIDTH).ceil() as usize;
        let h = (hi - lo) / n_panels as f64;
        let (gx, gw) = gauss_legendre(KERNEL_PANEL_NODES);
        let norm = (4.0 * PI).powf(-half_d);
        let mut z = Vec::with_capacity(n_panels * KERNEL_PANEL_NODES);
        let mut base = Vec::with_capacity(z.capacity());
        for p in 0..n_panels {
            let center = lo + (p as f64 + 0.5) * h;
            for (x, w) in gx.iter().zip(&gw) {
                let l = center + 0.5 * h * x;
                let zi = l.exp();
                let theta = dens.density(zi)?;
                z.push(zi);
                base.push(0.5 * h * w * norm * ((1.0 - half_d) * l).exp() * theta);
            }
        }
        let mut radii = log_grid(TABLE_RHO_MIN, TABLE_RHO_MAX, TABLE_NODES);
        let tail = log_grid(TABLE_RHO_MAX, TAIL_RHO_MAX, TAIL_NODES + 1);
        radii.extend_from_slice(&tail[1..]);
        let mut rows = Vec::with_capacity(radii.len() + 1);
        let mut row_start = Vec::with_capacity(radii.len() + 1);
        for &rho in std::iter::once(&0.0).chain(radii.iter()) {
            let q = 0.25 * rho * rho;
            let start = z.partition_point(|&zi| q / zi > 745.0);
            row_start.push(start);
            rows.push(
                z[start..]
                    .iter()
                    .zip(&base[start..])
                    .map(|(&zi, &b)| b * (-q / zi).exp())
                    .collect(),
            );
        }
        Ok(Self {
            params: *params,
            z,
            radii,
            main_len: TABLE_NODES,
            rows,
            row_start,
        })
    }

    pub fn params(&self) -> &ProcessParams {
        &self.params
    }

    /// Builds the table of `F(·, mt)`.
    pub fn table(&self, mt: f64) -> Result<RadialKernelTable> {
        if !(mt >= 0.0 && mt.is_finite()) {
            return Err(Error::Domain(format!(
                "m*t must be finite and nonnegative, got {mt}"
            )));
        }
        let tilt = mt.powf(1.0 / self.params.beta);
        let damp: Vec<f64> = self.z.iter().map(|&z| (-tilt * z).exp()).collect();
        let end = if tilt > 0.0 {
            self.z.partition_point(|&z| tilt * z < 745.0)
        } else {
            self.z.len()
        };
        let mut values: Vec<f64> = self
            .rows
            .iter()
            .zip(&self.row_start)
            .map(|(row, &start)| {
                if start >= end {
                    return 0.0;
                }
                row[..end - start]
                    .iter()
                    .zip(&damp[start..end])
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let f0 = values.remove(0);
        let log_values = values.iter().map(|v| v.ln()).collect();
        Ok(RadialKernelTable {
            mt,
            radii: self.radii.clone(),
            values,
            log_values,
            f0,
            main_len: self.main_len,
            params: self.params,
        })
    }
}

/// Scaled free-density profile `F(·, mt)` on a log grid of scaled radii.
///
/// `radii[..main_len]` spans `[TABLE_RHO_MIN, TABLE_RHO_MAX]`; the remaining
/// nodes extend the grid to [`TAIL_RHO_MAX`]. Beyond that, evaluation falls
/// back to [`scaled_profile`].
#[derive(Debug, Clone)]
pub struct RadialKernelTable {
    pub mt: f64,
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    log_values: Vec<f64>,
    /// `F(0, mt) = C_1(t)`.
    pub f0: f64,
    main_len: usize,
    pub params: ProcessParams,
}

/// One-off table build. Prefer [`KernelFamily`] or [`KernelCache`] when more
/// than one `mt` is needed.
pub fn build_table(mt: f64, params: &ProcessParams) -> Result<RadialKernelTable> {
    KernelFamily::new(params)?.table(mt)
}

/// `p(t, r)` from `table`, which must have been built for `mt = m t`.
pub fn table_eval(table: &RadialKernelTable, t: f64, r: f64) -> Result<f64> {
    table.eval(t, r)
}

impl RadialKernelTable {
    pub fn check_time(&self, t: f64) -> Result<()> {
        let requested = self.params.m * t;
        if (requested - self.mt).abs() > 1e-9 * self.mt.max(1.0) {
            return Err(Error::StaleTable {
                table_mt: self.mt,
                requested_mt: requested,
            });
        }
        Ok(())
    }

    pub fn eval(&self, t: f64, r: f64) -> Result<f64> {
        if !(t > 0.0) || !(r >= 0.0) {
            return Err(Error::Domain(format!(
                "table evaluation needs t > 0, r >= 0, got ({t}, {r})"
            )));
        }
        self.check_time(t)?;
        let a = self.params.alpha;
        let f = self.eval_scaled(r * t.powf(-1.0 / a))?;
        Ok((self.params.m * t).exp() * t.powf(-self.params.dim() / a) * f)
    }

    pub fn main_radii(&self) -> &[f64] {
        &self.radii[..self.main_len]
    }

    /// `F(ρ, mt)`; beyond the last node this falls back to direct quadrature.
    pub fn eval_scaled(&self, rho: f64) -> Result<f64> {
        if rho > *self.radii.last().expect("table is nonempty") {
            return scaled_profile(rho, self.mt, &self.params);
        }
        Ok(self.eval_scaled_fast(rho))
    }

    /// `F(ρ, mt)` without quadrature: beyond the last node the tail is
    /// extrapolated, as `ρ^{-d-α}` when `mt = 0` and along the last log-log
    /// secant otherwise (the tempered tail only decays faster).
    #[inline]
    pub fn eval_scaled_fast(&self, rho: f64) -> f64 {
        let first = self.radii[0];
        if rho < first {
            let w = rho / first;
            return self.f0 + (self.values[0] - self.f0) * w * w;
        }
        let last = self.radii.len() - 1;
        if rho > self.radii[last] {
            let v = self.values[last];
            if v == 0.0 {
                return 0.0;
            }
            let slope = if self.mt == 0.0 {
                -(self.params.dim() + self.params.alpha)
            } else {
                (self.log_values[last] - self.log_values[last - 1])
                    / (self.radii[last] / self.radii[last - 1]).ln()
            };
            return v * (rho / self.radii[last]).powf(slope);
        }
        // Locate the interval through the two uniform log spacings.
        let lr = rho.ln();
        let main_step =
            (self.radii[self.main_len - 1].ln() - first.ln()) / (self.main_len - 1) as f64;
        let j = if rho <= self.radii[self.main_len - 1] {
            ((lr - first.ln()) / main_step).floor() as usize
        } else {
            let base = self.main_len - 1;
            let tail_step = (self.radii[last].ln() - self.radii[base].ln()) / (last - base) as f64;
            base + ((lr - self.radii[base].ln()) / tail_step).floor() as usize
        };
        let j = j.min(last - 1);
        // Four-point Lagrange interpolation of ln F against ln ρ.
        let lo = j.saturating_sub(1).min(last.saturating_sub(3));
        let idx = [lo, lo + 1, lo + 2, lo + 3];
        if idx.iter().any(|&i| !self.log_values[i].is_finite()) {
            let (x0, x1) = (self.radii[j].ln(), self.radii[j + 1].ln());
            let w = (lr - x0) / (x1 - x0);
            return self.values[j] * (1.0 - w) + self.values[j + 1] * w;
        }
        let xs = idx.map(|i| self.radii[i].ln());
        let mut acc = 0.0;
        for a in 0..4 {
            let mut basis = 1.0;
            for b in 0..4 {
                if a != b {
                    basis *= (lr - xs[b]) / (xs[a] - xs[b]);
                }
            }
            acc += basis * self.log_values[idx[a]];
        }
        acc.exp()
    }

    /// Writes `scaled_radius,F_value` rows (including `ρ = 0`) with a header.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::InvalidParameter(format!("csv output failed: {e}"));
        out.write_record(["scaled_radius", "F_value"]).map_err(io)?;
        out.write_record([format!("{:e}", 0.0), format!("{:e}", self.f0)])
            .map_err(io)?;
        for (r, v) in self.radii.iter().zip(&self.values) {
            out.write_record([format!("{r:e}"), format!("{v:e}")])
                .map_err(io)?;
        }
        out.flush()
            .map_err(|e| Error::InvalidParameter(format!("csv output failed: {e}")))?;
        Ok(())
    }
}

/// Thread-safe cache of tables keyed by `mt` rounded to `1e-12`.
#[derive(Debug)]
pub struct KernelCache {
    family: KernelFamily,
    tables: Mutex<HashMap<i64, Arc<RadialKernelTable>>>,
}

impl KernelCache {
    pub fn new(params: &ProcessParams) -> Result<Self> {
        Ok(Self::from_family(KernelFamily::new(params)?))
    }

    pub fn from_family(family: KernelFamily) -> Self {
        Self {
            family,
            tables: Mutex::new(HashMap::new()),
        }
    }

    pub fn params(&self) -> &ProcessParams {
        self.family.params()
    }

    pub fn family(&self) -> &KernelFamily {
        &self.family
    }

    /// Table for the remaining time `t` (keyed by `m t`).
    pub fn for_time(&self, t: f64) -> Result<Arc<RadialKernelTable>> {
        self.get(self.family.params.m * t)
    }

    pub fn get(&self, mt: f64) -> Result<Arc<RadialKernelTable>> {
        let key = (mt * 1e12).round() as i64;
        if let Some(t) = self.tables.lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(t));
        }
        let table = Arc::new(self.family.table(mt)?);
        let mut guard = self.tables.lock().expect("cache lock");
        Ok(Arc::clone(guard.entry(key).or_insert(table)))
    }

    pub fn len(&self) -> usize {
        self.tables.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
