//! Monte Carlo estimators for the interior term
//! `r_D(t,x,x) = E^x[p(t - τ_D, X_{τ_D}, x); τ_D < t]`, the half-space
//! profile and surface constant `C_2(t)`, the heat trace `Z_D(t)`, the
//! normalized second-order residual, and `λ_1` from large-time decay.
//!
//! Every estimator monitors exits on a step-halving [`Ladder`] and reports
//! the Richardson-extrapolated value together with the per-level means and a
//! bias check from the next-coarser extrapolation.

mod ladder;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use ladder::{walk_exits, KernelPoint, Ladder, LadderKernels, LadderStats, Region};

use crate::error::{Error, Result};
use crate::geometry::{Domain, Shape};
use crate::kernels::{c1_of_t, free_density, KernelCache};
use crate::sampler::{map_blocks, IncrementSampler, PathGrid, RngStream, SimRng, DEFAULT_BLOCK};
use crate::specfun::ProcessParams;
use crate::stats::{linear_fit, weighted_linear_fit};

/// Standard errors used by the "within joint CIs" comparisons.
pub const DEFAULT_Z: f64 = 3.0;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `sqrt(a² + b²)`, the standard error of a difference of independent estimates.
pub fn joint_stderr(a: f64, b: f64) -> f64 {
    a.hypot(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelEstimate {
    pub dt: f64,
    pub mean: f64,
    pub stderr: f64,
}

/// A Monte Carlo estimate with its ladder diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_samples: u64,
    /// Finest path step.
    pub dt: f64,
    pub t: f64,
    /// Difference between the reported extrapolation and the one from the
    /// next-coarser pair of levels (zero with fewer than three levels).
    pub bias: f64,
    pub bias_stderr: f64,
    /// Raw means per level, coarse to fine.
    pub levels: Vec<LevelEstimate>,
    pub meta: BTreeMap<String, String>,
}

impl TraceEstimate {
    /// A value known without sampling error.
    pub fn exact(value: f64, t: f64, dt: f64, meta: BTreeMap<String, String>) -> Self {
        Self {
            value,
            stderr: 0.0,
            n_samples: 0,
            dt,
            t,
            bias: 0.0,
            bias_stderr: 0.0,
            levels: Vec::new(),
            meta,
        }
    }

    /// Weighted sum `Σ w_i X_i` of independent ladder accumulators.
    pub fn from_parts(
        parts: &[(f64, &LadderStats)],
        t: f64,
        ladder: &Ladder,
        meta: BTreeMap<String, String>,
    ) -> Self {
        let mut value = 0.0;
        let mut var = 0.0;
        let mut bias = 0.0;
        let mut bias_var = 0.0;
        let mut n = 0;
        let mut levels: Vec<LevelEstimate> = (0..ladder.levels)
            .map(|l| LevelEstimate {
                dt: t / ladder.steps(l) as f64,
                mean: 0.0,
                stderr: 0.0,
            })
            .collect();
        for (w, s) in parts {
            value += w * s.extrap.mean();
            var += (w * s.extrap.stderr()).powi(2);
            bias += w * s.diff.mean();
            bias_var += (w * s.diff.stderr()).powi(2);
            n += s.count();
            for (lv, ls) in levels.iter_mut().zip(&s.levels) {
                lv.mean += w * ls.mean();
                lv.stderr += (w * ls.stderr()).powi(2);
            }
        }
        for lv in &mut levels {
            lv.stderr = lv.stderr.sqrt();
        }
        Self {
            value,
            stderr: var.sqrt(),
            n_samples: n,
            dt: ladder.fine_dt(t),
            t,
            bias: bias.abs(),
            bias_stderr: bias_var.sqrt(),
            levels,
            meta,
        }
    }

    pub fn ci(&self, z: f64) -> (f64, f64) {
        (self.value - z * self.stderr, self.value + z * self.stderr)
    }

    /// `|a - b| ≤ z · joint s.e.`
    pub fn agrees_with(&self, other: &Self, z: f64) -> bool {
        (self.value - other.value).abs() <= z * joint_stderr(self.stderr, other.stderr)
    }

    /// Whether the two finest extrapolations agree to within `budget`.
    pub fn bias_within(&self, budget: f64) -> bool {
        self.bias <= budget
    }

    fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }
}

fn meta(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

/// Shared estimator context: process parameters, kernel tables, exit ladder
/// and work-splitting rule.
#[derive(Debug)]
pub struct Lab {
    cache: KernelCache,
    pub ladder: Ladder,
    /// Samples per RNG stream block; part of the determinism contract.
    pub block: usize,
    kernels: Mutex<HashMap<u64, Arc<LadderKernels>>>,
}

impl Lab {
    pub fn new(params: &ProcessParams, ladder: Ladder) -> Result<Self> {
        Ok(Self::from_cache(KernelCache::new(params)?, ladder))
    }

    pub fn from_cache(cache: KernelCache, ladder: Ladder) -> Self {
        Self {
            cache,
            ladder,
            block: DEFAULT_BLOCK,
            kernels: Mutex::new(HashMap::new()),
        }
    }

    pub fn params(&self) -> &ProcessParams {
        self.cache.params()
    }

    pub fn cache(&self) -> &KernelCache {
        &self.cache
    }

    /// Kernel tables for every exit slot of the ladder at heat time `t`.
    pub fn kernels(&self, t: f64) -> Result<Arc<LadderKernels>> {
        let key = t.to_bits();
        if let Some(k) = self.kernels.lock().expect("kernel lock").get(&key) {
            return Ok(Arc::clone(k));
        }
        let k = Arc::new(LadderKernels::new(&self.cache, t, self.ladder)?);
        Ok(Arc::clone(
            self.kernels
                .lock()
                .expect("kernel lock")
                .entry(key)
                .or_insert(k),
        ))
    }

    pub fn sampler(&self, t: f64) -> Result<IncrementSampler> {
        IncrementSampler::new(self.ladder.fine_dt(t), self.params())
    }

    /// `p(t, 0) = e^{mt} C_1(t) t^{-d/α}`.
    pub fn diagonal_density(&self, t: f64) -> Result<f64> {
        let p = self.params();
        Ok((p.m * t).exp() * c1_of_t(t, p)? * t.powf(-p.dim() / p.alpha))
    }

    /// Runs one path from `start` against each region and writes the kernel
    /// value `p(t - τ, X_τ - start)` per region and level into `out`.
    fn path_values(
        &self,
        kernels: &LadderKernels,
        sampler: &IncrementSampler,
        start: &[f64],
        regions: &[ladder::Region<'_>],
        rng: &mut SimRng,
        out: &mut [Vec<f64>],
    ) {
        for row in out.iter_mut() {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        walk_exits(
            sampler,
            &self.ladder,
            start,
            regions,
            rng,
            |i, level, k, x| {
                out[i][level] = kernels.eval(level, k, dist(x, start));
            },
        );
    }

    fn stats(&self) -> LadderStats {
        LadderStats::new(self.ladder.levels)
    }
}

fn merge_all(parts: Vec<Result<LadderStats>>, levels: usize) -> Result<LadderStats> {
    let mut total = LadderStats::new(levels);
    for p in parts {
        total.merge(&p?);
    }
    Ok(total)
}

/// First grid index `k ≥ 1` with `positions[k] ∉ D`, with that position.
pub fn first_exit(path: &PathGrid, domain: &Domain) -> Result<Option<(usize, Vec<f64>)>> {
    if !domain.contains(&path.start) {
        return Err(Error::Precondition(
            "path must start inside the domain".into(),
        ));
    }
    Ok(path
        .positions
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, x)| !domain.contains(x))
        .map(|(k, x)| (k, x.clone())))
}

pub const MIN_PATHS: usize = 100;

/// `r_D(t, x, x)` from `n_paths` paths started at `x`.
pub fn r_estimate(
    lab: &Lab,
    t: f64,
    x: &[f64],
    domain: &Domain,
    n_paths: usize,
    stream: &RngStream,
) -> Result<TraceEstimate> {
    if n_paths < MIN_PATHS {
        return Err(Error::InsufficientBudget(format!(
            "r_estimate needs at least {MIN_PATHS} paths, got {n_paths}"
        )));
    }
    if x.len() != lab.params().d || !domain.contains(x) {
        return Err(Error::Precondition(
            "start point must lie inside the domain".into(),
        ));
    }
    let kernels = lab.kernels(t)?;
    let sampler = lab.sampler(t)?;
    let inside = |y: &[f64]| domain.contains(y);
    let parts = map_blocks(n_paths, lab.block, stream, |rng, range| {
        let mut st = lab.stats();
        let mut vals = vec![vec![0.0; lab.ladder.levels]];
        for _ in range {
            lab.path_values(&kernels, &sampler, x, &[&inside], rng, &mut vals);
            st.push(&lab.ladder, &vals[0]);
        }
        Ok(st)
    });
    let st = merge_all(parts, lab.ladder.levels)?;
    Ok(TraceEstimate::from_parts(
        &[(1.0, &st)],
        t,
        &lab.ladder,
        meta(&[
            ("estimator", "r_estimate".into()),
            ("domain", domain.to_string()),
            ("x", format!("{x:?}")),
        ]),
    ))
}

/// Estimates of `f_H(t, q)` on a grid of depths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfspaceProfile {
    pub t: f64,
    pub q_grid: Vec<f64>,
    pub f_values: Vec<TraceEstimate>,
}

/// `f_H(t, q) = r_H(t, q e_1, q e_1)`; depth `j` uses stream `stream.child(j)`.
pub fn halfspace_profile(
    lab: &Lab,
    t: f64,
    q_grid: &[f64],
    n_paths: usize,
    stream: &RngStream,
) -> Result<HalfspaceProfile> {
    let d = lab.params().d;
    let h = Domain::half_space(d)?;
    let mut f_values = Vec::with_capacity(q_grid.len());
    for (j, &q) in q_grid.iter().enumerate() {
        if !(q > 0.0) {
            return Err(Error::Domain(format!(
                "half-space depths must be positive, got {q}"
            )));
        }
        let mut x = vec![0.0; d];
        x[0] = q;
        let est = r_estimate(lab, t, &x, &h, n_paths, &stream.child(j as u64))?;
        f_values.push(est.with_meta("estimator", "f_H").with_meta("q", q));
    }
    Ok(HalfspaceProfile {
        t,
        q_grid: q_grid.to_vec(),
        f_values,
    })
}

/// Depth grid for [`c2_of_t`]: log-spaced from `0.01 t^{1/α}` to
/// `max(5 t^{1/α}, 3)` with `per_decade` points per decade.
pub fn c2_depth_grid(t: f64, alpha: f64, per_decade: usize) -> Vec<f64> {
    let h = t.powf(1.0 / alpha);
    let (lo, hi) = ((0.01 * h).ln(), (5.0 * h).max(3.0).ln());
    let n = ((hi - lo) / std::f64::consts::LN_10 * per_decade as f64).ceil() as usize;
    (0..=n)
        .map(|j| (lo + (hi - lo) * j as f64 / n as f64).exp())
        .collect()
}

/// Power-law tail fitted on the last decade of a profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    /// Free log-log slope (NaN when fewer than three usable points).
    pub slope: f64,
    pub slope_stderr: f64,
    /// Amplitude `A` of the `A q^{-(d+α)}` envelope.
    pub amplitude: f64,
}

/// Fits the tail over `q ≥ q_from`: the `-(d+α)` envelope amplitude by
/// inverse-variance weighting, and a free slope for diagnostics.
pub fn fit_tail(profile: &HalfspaceProfile, q_from: f64, exponent: f64) -> TailFit {
    let mut amp_num = 0.0;
    let mut amp_den = 0.0;
    let (mut lx, mut ly, mut lw) = (Vec::new(), Vec::new(), Vec::new());
    for (q, f) in profile.q_grid.iter().zip(&profile.f_values) {
        if *q < q_from || f.stderr <= 0.0 {
            continue;
        }
        let scale = q.powf(exponent);
        let w = (f.stderr * scale).powi(-2);
        amp_num += w * f.value * scale;
        amp_den += w;
        if f.value > 0.0 {
            lx.push(q.ln());
            ly.push(f.value.ln());
            lw.push((f.value / f.stderr).powi(2));
        }
    }
    let amplitude = if amp_den > 0.0 {
        (amp_num / amp_den).max(0.0)
    } else {
        0.0
    };
    let (slope, slope_stderr) = if lx.len() >= 3 {
        let (_, b, se) = weighted_linear_fit(&lx, &ly, &lw);
        (b, se)
    } else {
        (f64::NAN, f64::NAN)
    };
    TailFit {
        slope,
        slope_stderr,
        amplitude,
    }
}

/// `C_2(t) = ∫_0^∞ f_H(t, q) dq`: trapezoid in `ln q` over [`c2_depth_grid`],
/// a linear piece on `[0, q_1]` using `f_H(t, 0) = p(t, 0)`, and the fitted
/// `q^{-(d+α)}` tail beyond the grid.
pub fn c2_of_t(
    lab: &Lab,
    t: f64,
    n_paths: usize,
    per_decade: usize,
    stream: &RngStream,
) -> Result<(TraceEstimate, HalfspaceProfile)> {
    let p = *lab.params();
    let grid = c2_depth_grid(t, p.alpha, per_decade.max(2));
    let profile = halfspace_profile(lab, t, &grid, n_paths, stream)?;
    let n = grid.len();
    let step = (grid[n - 1] / grid[0]).ln() / (n - 1) as f64;
    let mut weights: Vec<f64> = grid.iter().map(|q| q * step).collect();
    weights[0] *= 0.5;
    weights[n - 1] *= 0.5;
    weights[0] += 0.5 * grid[0];
    let f0 = lab.diagonal_density(t)?;
    let exponent = p.dim() + p.alpha;
    let q_max = grid[n - 1];
    let tail = fit_tail(&profile, q_max / 10.0, exponent);
    if tail.slope.is_finite() && tail.slope >= -1.0 {
        return Err(Error::TailFit { slope: tail.slope });
    }
    let tail_factor = q_max.powf(1.0 - exponent) / (exponent - 1.0);
    // The tail amplitude is a fixed linear combination of the last-decade
    // estimates; fold it into the quadrature weights for error propagation.
    let mut amp_w: Vec<f64> = vec![0.0; n];
    let mut amp_den = 0.0;
    for (j, (q, f)) in grid.iter().zip(&profile.f_values).enumerate() {
        if *q >= q_max / 10.0 && f.stderr > 0.0 {
            let scale = q.powf(exponent);
            let w = (f.stderr * scale).powi(-2);
            amp_w[j] = w * scale;
            amp_den += w;
        }
    }
    if amp_den > 0.0 && tail.amplitude > 0.0 {
        for (w, a) in weights.iter_mut().zip(&amp_w) {
            *w += tail_factor * a / amp_den;
        }
    }
    let mut value = 0.5 * grid[0] * f0;
    let mut var = 0.0;
    let mut bias = 0.0;
    let mut bias_var = 0.0;
    let mut n_samples = 0;
    let mut levels: Vec<LevelEstimate> = profile.f_values[0]
        .levels
        .iter()
        .map(|l| LevelEstimate {
            dt: l.dt,
            mean: value,
            stderr: 0.0,
        })
        .collect();
    for (w, f) in weights.iter().zip(&profile.f_values) {
        value += w * f.value;
        var += (w * f.stderr).powi(2);
        bias += w * f.bias;
        bias_var += (w * f.bias_stderr).powi(2);
        n_samples += f.n_samples;
        for (lv, fl) in levels.iter_mut().zip(&f.levels) {
            lv.mean += w * fl.mean;
            lv.stderr += (w * fl.stderr).powi(2);
        }
    }
    for lv in &mut levels {
        lv.stderr = lv.stderr.sqrt();
    }
    let est = TraceEstimate {
        value,
        stderr: var.sqrt(),
        n_samples,
        dt: lab.ladder.fine_dt(t),
        t,
        bias,
        bias_stderr: bias_var.sqrt(),
        levels,
        meta: meta(&[
            ("estimator", "c2_of_t".into()),
            ("q_max", q_max.to_string()),
            ("n_depths", n.to_string()),
            ("tail_slope", tail.slope.to_string()),
            ("tail_slope_stderr", tail.slope_stderr.to_string()),
            ("tail_amplitude", tail.amplitude.to_string()),
            ("tail_value", (tail.amplitude * tail_factor).to_string()),
        ]),
    };
    Ok((est, profile))
}

/// `C_4 = C_2(1)` for the stable process; `lab` must have `m = 0`.
pub fn c4_const(
    lab: &Lab,
    n_paths: usize,
    per_decade: usize,
    stream: &RngStream,
) -> Result<TraceEstimate> {
    if lab.params().m != 0.0 {
        return Err(Error::Precondition(
            "C4 is defined for the stable process (m = 0)".into(),
        ));
    }
    let (est, _) = c2_of_t(lab, 1.0, n_paths, per_decade, stream)?;
    Ok(est.with_meta("estimator", "c4_const"))
}

/// Depth strata `[0, h), [h, 2h), [2h, 4h), …, [R/2, max_depth]` with
/// `h = t^{1/α}`.
pub fn strata_edges(domain: &Domain, t: f64, alpha: f64) -> Result<Vec<f64>> {
    let r = domain.smoothness_radius()?;
    let h = t.powf(1.0 / alpha);
    let mut edges = vec![0.0];
    let mut e = h;
    while e < 0.5 * r {
        edges.push(e);
        e *= 2.0;
    }
    edges.push(0.5 * r);
    if domain.max_depth() > 0.5 * r {
        edges.push(domain.max_depth());
    }
    Ok(edges)
}

/// `Z_D(t) = C_1(t) e^{mt} |D| t^{-d/α} - ∫_D r_D(t, x, x) dx`, with the
/// integral stratified by depth. `n_x` points are split over the strata in
/// proportion to volume times the envelope `min(t/δ^{d+α}, t^{-d/α})`, with
/// at least `n_x/50` (and 16) per stratum; each point runs `n_paths` paths.
pub fn z_trace(
    lab: &Lab,
    t: f64,
    domain: &Domain,
    n_x: usize,
    n_paths: usize,
    stream: &RngStream,
) -> Result<TraceEstimate> {
    let p = *lab.params();
    if !domain.is_bounded() {
        return Err(Error::Precondition(
            "the heat trace needs a bounded domain".into(),
        ));
    }
    if n_paths == 0 {
        return Err(Error::InsufficientBudget(
            "z_trace needs at least one path per point".into(),
        ));
    }
    let edges = strata_edges(domain, t, p.alpha)?;
    let envelope = |delta: f64| (t / delta.powf(p.dim() + p.alpha)).min(t.powf(-p.dim() / p.alpha));
    let vols: Vec<f64> = edges
        .windows(2)
        .map(|w| domain.layer_volume(w[0], w[1]))
        .collect::<Result<_>>()?;
    let weights: Vec<f64> = vols
        .iter()
        .zip(&edges)
        .map(|(v, &lo)| v * envelope(lo))
        .collect();
    let total_w: f64 = weights.iter().sum();
    let floor = (n_x / 50).max(16);
    let counts: Vec<usize> = weights
        .iter()
        .map(|w| ((n_x as f64 * w / total_w).round() as usize).max(floor))
        .collect();
    let kernels = lab.kernels(t)?;
    let sampler = lab.sampler(t)?;
    let inside = |y: &[f64]| domain.contains(y);
    let x_block = (lab.block / n_paths).max(1);
    let mut strata = Vec::with_capacity(counts.len());
    for (s, &n_s) in counts.iter().enumerate() {
        let (lo, hi) = (edges[s], edges[s + 1]);
        let parts = map_blocks(n_s, x_block, &stream.child(s as u64), |rng, range| {
            let mut st = lab.stats();
            let mut vals = vec![vec![0.0; lab.ladder.levels]];
            let mut acc = vec![0.0; lab.ladder.levels];
            for _ in range {
                let x = domain.sample_layer(lo, hi, rng)?;
                acc.iter_mut().for_each(|a| *a = 0.0);
                for _ in 0..n_paths {
                    lab.path_values(&kernels, &sampler, &x, &[&inside], rng, &mut vals);
                    for (a, v) in acc.iter_mut().zip(&vals[0]) {
                        *a += v / n_paths as f64;
                    }
                }
                st.push(&lab.ladder, &acc);
            }
            Ok(st)
        });
        let st = merge_all(parts, lab.ladder.levels)?;
        if st.count() == 0 {
            return Err(Error::InsufficientBudget(format!(
                "stratum {s} received no samples"
            )));
        }
        strata.push(st);
    }
    let parts: Vec<(f64, &LadderStats)> = vols.iter().map(|v| -v).zip(strata.iter()).collect();
    let first = first_term(lab, t, domain)?;
    let mut est = TraceEstimate::from_parts(
        &parts,
        t,
        &lab.ladder,
        meta(&[
            ("estimator", "z_trace".into()),
            ("domain", domain.to_string()),
            ("first_term", first.to_string()),
            ("strata", format!("{edges:?}")),
            ("points_per_stratum", format!("{counts:?}")),
            ("paths_per_point", n_paths.to_string()),
        ]),
    );
    est.meta
        .insert("r_integral".into(), (-est.value).to_string());
    est.meta
        .insert("r_integral_stderr".into(), est.stderr.to_string());
    est.value += first;
    for lv in &mut est.levels {
        lv.mean += first;
    }
    Ok(est)
}

/// `C_1(t) e^{mt} |D| / t^{d/α}`.
pub fn first_term(lab: &Lab, t: f64, domain: &Domain) -> Result<f64> {
    Ok(lab.diagonal_density(t)? * domain.volume()?)
}

/// One row of a [`ResidualReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub t: f64,
    pub z: TraceEstimate,
    pub first_term: f64,
    /// `C_2(t) |∂D|`.
    pub second_term: TraceEstimate,
    /// `Z - first + second`, signed.
    pub residual: TraceEstimate,
    /// `|residual| R² t^{(d-2)/α} e^{-2mt} / |D|`.
    pub rho: f64,
    pub rho_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub domain: String,
    pub rows: Vec<ResidualRow>,
    /// `max_t ρ(t)`.
    pub c3: f64,
    /// Least-squares slope of `ln ρ` against `ln t`.
    pub slope: f64,
}

impl ResidualReport {
    /// `ρ` at the smallest over `ρ` at the second-smallest `t`.
    pub fn small_t_ratio(&self) -> f64 {
        let mut rows: Vec<&ResidualRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| a.t.total_cmp(&b.t));
        rows[0].rho / rows[1].rho
    }
}

/// Nearest boundary point's tangent half-space `H(x)` as `(origin, inward normal)`,
/// for `x` at depth `q` on the chosen sphere of a ball or annulus.
fn tangent_plane(domain: &Domain, dir: &[f64], inner_sphere: bool) -> (Vec<f64>, Vec<f64>) {
    match &domain.shape {
        Shape::Ball { center, radius }
        | Shape::Annulus {
            center,
            r_out: radius,
            ..
        } if !inner_sphere => (
            center
                .iter()
                .zip(dir)
                .map(|(c, u)| c + radius * u)
                .collect(),
            dir.iter().map(|u| -u).collect(),
        ),
        Shape::Annulus { center, r_in, .. } => (
            center.iter().zip(dir).map(|(c, u)| c + r_in * u).collect(),
            dir.to_vec(),
        ),
        _ => unreachable!("tangent planes exist for balls and annuli"),
    }
}

/// Coupled estimate of `Z_D(t)`, `C_2(t)|∂D|` and their residual at one `t`.
///
/// A depth `q` is drawn from `g(q) = h^{-1}(1 + q/h)^{-2}`, a point `x` at
/// depth `q` uniformly on the level set, and one path from `x` is monitored
/// against both `D` and the tangent half-space `H(x)`. Since
/// `∫_D r_D = ∫ |∂D_q| r_D(q) dq` and `C_2 |∂D| = |∂D| ∫ f_H(q) dq`, the
/// per-path differences estimate the residual with the common path noise
/// and most of the common monitoring bias cancelled.
pub fn residual_point(
    lab: &Lab,
    t: f64,
    domain: &Domain,
    n_samples: usize,
    stream: &RngStream,
) -> Result<ResidualRow> {
    let p = *lab.params();
    let r = domain.smoothness_radius()?;
    let h = t.powf(1.0 / p.alpha);
    if h > 0.5 * r {
        return Err(Error::Precondition(format!(
            "t^(1/alpha) = {h} exceeds R/2 = {}",
            0.5 * r
        )));
    }
    let (vol, area) = (domain.volume()?, domain.surface()?);
    let max_depth = domain.max_depth();
    let kernels = lab.kernels(t)?;
    let sampler = lab.sampler(t)?;
    let levels = lab.ladder.levels;
    let d = p.d;
    let parts = map_blocks(n_samples, lab.block, stream, |rng, range| {
        let mut sz = lab.stats();
        let mut s2 = lab.stats();
        let mut sr = lab.stats();
        let mut vals = vec![vec![0.0; levels]; 2];
        let (mut az, mut a2, mut ad) = (vec![0.0; levels], vec![0.0; levels], vec![0.0; levels]);
        for _ in range {
            let u: f64 = 1.0 - rand::Rng::random::<f64>(rng);
            let q = h * (1.0 / u - 1.0);
            let g = (1.0 + q / h).powi(-2) / h;
            if q < max_depth {
                let (radius, inner) = match &domain.shape {
                    Shape::Ball { radius, .. } => (radius - q, false),
                    Shape::Annulus { r_in, r_out, .. } => {
                        let (ro, ri) = (
                            (r_out - q).powi(d as i32 - 1),
                            (r_in + q).powi(d as i32 - 1),
                        );
                        if rand::Rng::random::<f64>(rng) * (ro + ri) < ro {
                            (r_out - q, false)
                        } else {
                            (r_in + q, true)
                        }
                    }
                    Shape::HalfSpace => unreachable!(),
                };
                let mut dir: Vec<f64> = (0..d)
                    .map(|_| rand::Rng::sample(rng, rand_distr::StandardNormal))
                    .collect();
                let norm = dir.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
                dir.iter_mut().for_each(|x| *x /= norm);
                let center = match &domain.shape {
                    Shape::Ball { center, .. } | Shape::Annulus { center, .. } => center,
                    Shape::HalfSpace => unreachable!(),
                };
                let x: Vec<f64> = center
                    .iter()
                    .zip(&dir)
                    .map(|(c, u)| c + radius * u)
                    .collect();
                let (origin, normal) = tangent_plane(domain, &dir, inner);
                let in_d = |y: &[f64]| domain.contains(y);
                let in_h = |y: &[f64]| {
                    y.iter()
                        .zip(&origin)
                        .zip(&normal)
                        .map(|((y, o), n)| (y - o) * n)
                        .sum::<f64>()
                        > 0.0
                };
                lab.path_values(&kernels, &sampler, &x, &[&in_d, &in_h], rng, &mut vals);
                let level_area = domain.level_area(q);
                for l in 0..levels {
                    az[l] = level_area * vals[0][l] / g;
                    a2[l] = area * vals[1][l] / g;
                    ad[l] = a2[l] - az[l];
                }
            } else {
                let mut x = vec![0.0; d];
                x[0] = q;
                let in_h = |y: &[f64]| y[0] > 0.0;
                lab.path_values(&kernels, &sampler, &x, &[&in_h], rng, &mut vals);
                for l in 0..levels {
                    az[l] = 0.0;
                    a2[l] = area * vals[0][l] / g;
                    ad[l] = a2[l];
                }
            }
            sz.push(&lab.ladder, &az);
            s2.push(&lab.ladder, &a2);
            sr.push(&lab.ladder, &ad);
        }
        Ok([sz, s2, sr])
    });
    let mut acc = [lab.stats(), lab.stats(), lab.stats()];
    for part in parts {
        let part: [LadderStats; 3] = part?;
        for (a, b) in acc.iter_mut().zip(&part) {
            a.merge(b);
        }
    }
    let first = first_term(lab, t, domain)?;
    let tag = |name: &str| {
        meta(&[
            ("estimator", name.to_string()),
            ("domain", domain.to_string()),
        ])
    };
    let mut z = TraceEstimate::from_parts(&[(-1.0, &acc[0])], t, &lab.ladder, tag("z_coupled"));
    z.value += first;
    for lv in &mut z.levels {
        lv.mean += first;
    }
    let second =
        TraceEstimate::from_parts(&[(1.0, &acc[1])], t, &lab.ladder, tag("c2_area_coupled"));
    let residual = TraceEstimate::from_parts(&[(1.0, &acc[2])], t, &lab.ladder, tag("residual"));
    let norm = r * r * t.powf((p.dim() - 2.0) / p.alpha) * (-2.0 * p.m * t).exp() / vol;
    Ok(ResidualRow {
        t,
        first_term: first,
        rho: residual.value.abs() * norm,
        rho_stderr: residual.stderr * norm,
        z,
        second_term: second,
        residual,
    })
}

/// [`residual_point`] over `t_grid`, with the fitted `C_3 = max ρ` and the
/// log-log slope of `ρ` against `t`. Grid point `i` uses `stream.child(i)`.
pub fn residual_scan(
    lab: &Lab,
    t_grid: &[f64],
    domain: &Domain,
    n_samples: usize,
    stream: &RngStream,
) -> Result<ResidualReport> {
    if t_grid.len() < 2 {
        return Err(Error::InvalidParameter(
            "residual scan needs at least two times".into(),
        ));
    }
    let rows = t_grid
        .iter()
        .enumerate()
        .map(|(i, &t)| residual_point(lab, t, domain, n_samples, &stream.child(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let c3 = rows.iter().map(|r| r.rho).fold(0.0, f64::max);
    let lx: Vec<f64> = rows.iter().map(|r| r.t.ln()).collect();
    let ly: Vec<f64> = rows
        .iter()
        .map(|r| r.rho.max(f64::MIN_POSITIVE).ln())
        .collect();
    let (_, slope, _) = linear_fit(&lx, &ly);
    Ok(ResidualReport {
        domain: domain.to_string(),
        rows,
        c3,
        slope,
    })
}

/// `λ_1` as the least-squares slope of `-ln Z_D(t)` over large times, with
/// the delta-method standard error. `meta["second_mode_flag"]` is `true`
/// when the slopes over the first and last pairs of times differ by more
/// than the slope's standard error.
pub fn lambda1_estimate(
    lab: &Lab,
    domain: &Domain,
    t_grid: &[f64],
    n_x: usize,
    n_paths: usize,
    stream: &RngStream,
) -> Result<(TraceEstimate, Vec<TraceEstimate>)> {
    if t_grid.len() < 2 {
        return Err(Error::InvalidParameter(
            "lambda1 needs at least two times".into(),
        ));
    }
    let zs = t_grid
        .iter()
        .enumerate()
        .map(|(i, &t)| z_trace(lab, t, domain, n_x, n_paths, &stream.child(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(z) = zs.iter().find(|z| z.value <= 0.0) {
        return Err(Error::InsufficientBudget(format!(
            "trace estimate at t = {} is not positive ({} ± {})",
            z.t, z.value, z.stderr
        )));
    }
    let y: Vec<f64> = zs.iter().map(|z| -z.value.ln()).collect();
    let w: Vec<f64> = zs
        .iter()
        .map(|z| (z.value / z.stderr.max(1e-300)).powi(2))
        .collect();
    let (_, slope, se) = weighted_linear_fit(t_grid, &y, &w);
    let pair = |i: usize, j: usize| (y[j] - y[i]) / (t_grid[j] - t_grid[i]);
    let n = t_grid.len();
    let curvature = if n >= 3 {
        (pair(n - 2, n - 1) - pair(0, 1)).abs()
    } else {
        0.0
    };
    let max_z = zs.iter().map(|z| z.value).fold(0.0, f64::max);
    let est = TraceEstimate {
        value: slope,
        stderr: se,
        n_samples: zs.iter().map(|z| z.n_samples).sum(),
        dt: lab.ladder.fine_dt(t_grid[0]),
        t: t_grid[n - 1],
        bias: 0.0,
        bias_stderr: 0.0,
        levels: Vec::new(),
        meta: meta(&[
            ("estimator", "lambda1".into()),
            ("domain", domain.to_string()),
            ("t_grid", format!("{t_grid:?}")),
            ("curvature", curvature.to_string()),
            ("second_mode_flag", (curvature > se).to_string()),
            ("single_mode_regime", (max_z < 1.5).to_string()),
        ]),
    };
    Ok((est, zs))
}

/// One point of a [`ryznar_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RyznarRow {
    pub x: Vec<f64>,
    pub r: TraceEstimate,
    pub r_stable: TraceEstimate,
    /// `r_D - e^{2mt} r̃_D`, expected `≤ 0`.
    pub r_gap: f64,
    pub r_gap_stderr: f64,
    /// `p_D - e^{mt} p̃_D` with `p_D = p(t, 0) - r_D`, expected `≤ 0`.
    pub p_gap: f64,
    pub p_gap_stderr: f64,
    pub violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RyznarReport {
    pub t: f64,
    pub z: f64,
    pub rows: Vec<RyznarRow>,
}

impl RyznarReport {
    pub fn any_violation(&self) -> bool {
        self.rows.iter().any(|r| r.violation)
    }
}

/// Compares `r_D` for the relativistic process (`lab`) with `e^{2mt} r̃_D`
/// for the stable one (`stable_lab`) at each point, and the same for `p_D`
/// with factor `e^{mt}`. A violation is a gap above `z` joint standard errors.
#[allow(clippy::too_many_arguments)]
pub fn ryznar_check(
    lab: &Lab,
    stable_lab: &Lab,
    t: f64,
    x_list: &[Vec<f64>],
    domain: &Domain,
    n_paths: usize,
    z: f64,
    stream: &RngStream,
) -> Result<RyznarReport> {
    let m = lab.params().m;
    if stable_lab.params().m != 0.0 || stable_lab.params().alpha != lab.params().alpha {
        return Err(Error::Precondition(
            "the comparison process must be the stable process with the same alpha".into(),
        ));
    }
    let p_rel = lab.diagonal_density(t)?;
    let p_stable = free_density(t, 0.0, stable_lab.params())?;
    let mut rows = Vec::with_capacity(x_list.len());
    for (i, x) in x_list.iter().enumerate() {
        let s = stream.child(i as u64);
        let r = r_estimate(lab, t, x, domain, n_paths, &s.named("relativistic"))?;
        let r_stable = r_estimate(stable_lab, t, x, domain, n_paths, &s.named("stable"))?;
        let e2 = (2.0 * m * t).exp();
        let e1 = (m * t).exp();
        let r_gap = r.value - e2 * r_stable.value;
        let r_gap_stderr = joint_stderr(r.stderr, e2 * r_stable.stderr);
        let p_gap = (p_rel - r.value) - e1 * (p_stable - r_stable.value);
        let p_gap_stderr = joint_stderr(r.stderr, e1 * r_stable.stderr);
        let violation = r_gap > z * r_gap_stderr || p_gap > z * p_gap_stderr;
        rows.push(RyznarRow {
            x: x.clone(),
            r,
            r_stable,
            r_gap,
            r_gap_stderr,
            p_gap,
            p_gap_stderr,
            violation,
        });
    }
    Ok(RyznarReport { t, z, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::simulate_path;

    fn lab(alpha: f64, m: f64) -> Lab {
        Lab::new(
            &ProcessParams::new(alpha, m, 2).unwrap(),
            Ladder::new(32, 3, 1.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn first_exit_definition() {
        let ball = Domain::ball(2, 1.0).unwrap();
        let path = PathGrid {
            start: vec![0.0, 0.0],
            dt: 0.1,
            positions: vec![
                vec![0.0, 0.0],
                vec![0.5, 0.0],
                vec![0.9, 0.0],
                vec![1.2, 0.0],
                vec![0.0, 0.0],
            ],
            horizon: 0.4,
        };
        assert_eq!(first_exit(&path, &ball).unwrap(), Some((3, vec![1.2, 0.0])));
        let inside = PathGrid {
            positions: vec![vec![0.0, 0.0], vec![0.1, 0.1]],
            ..path.clone()
        };
        assert_eq!(first_exit(&inside, &ball).unwrap(), None);
        let outside = PathGrid {
            start: vec![2.0, 0.0],
            ..path
        };
        assert!(matches!(
            first_exit(&outside, &ball),
            Err(Error::Precondition(_))
        ));
        // A simulated path in all of R^d never exits.
        let p = ProcessParams::new(1.0, 0.0, 2).unwrap();
        let path =
            simulate_path(&[0.0, 0.0], 1.0, 0.01, &p, &mut RngStream::new(1, 0).rng()).unwrap();
        assert_eq!(
            first_exit(&path, &Domain::whole_space(2).unwrap()).unwrap(),
            None
        );
    }

    #[test]
    fn r_estimate_edge_cases() {
        let lab = lab(1.0, 1.0);
        let s = RngStream::new(1, 0);
        let space = Domain::whole_space(2).unwrap();
        let zero = r_estimate(&lab, 0.1, &[0.0, 0.0], &space, 200, &s).unwrap();
        assert_eq!((zero.value, zero.stderr), (0.0, 0.0));
        let ball = Domain::ball(2, 1.0).unwrap();
        assert!(matches!(
            r_estimate(&lab, 0.1, &[0.0, 0.0], &ball, 99, &s),
            Err(Error::InsufficientBudget(_))
        ));
        assert!(matches!(
            r_estimate(&lab, 0.1, &[1.5, 0.0], &ball, 500, &s),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn r_is_bounded_by_diagonal_density_and_grows_toward_boundary() {
        let lab = lab(1.0, 1.0);
        let ball = Domain::ball(2, 1.0).unwrap();
        let t = 0.05;
        let p0 = lab.diagonal_density(t).unwrap();
        let center = r_estimate(&lab, t, &[0.0, 0.0], &ball, 4000, &RngStream::new(2, 0)).unwrap();
        let near = r_estimate(&lab, t, &[0.9, 0.0], &ball, 4000, &RngStream::new(2, 1)).unwrap();
        for e in [&center, &near] {
            assert!(e.value >= -3.0 * e.stderr && e.value <= p0 + 3.0 * e.stderr);
        }
        assert!(near.value - center.value > 3.0 * joint_stderr(near.stderr, center.stderr));
    }

    #[test]
    fn smaller_domain_has_larger_interior_term() {
        let lab = lab(1.0, 1.0);
        let small = Domain::ball(2, 1.0).unwrap();
        let large = Domain::ball(2, 1.5).unwrap();
        let x = [0.6, 0.0];
        let a = r_estimate(&lab, 0.1, &x, &small, 4000, &RngStream::new(3, 0)).unwrap();
        let b = r_estimate(&lab, 0.1, &x, &large, 4000, &RngStream::new(3, 1)).unwrap();
        assert!(a.value >= b.value - 3.0 * joint_stderr(a.stderr, b.stderr));
    }

    #[test]
    fn halfspace_profile_matches_direct_estimate_and_scaling() {
        let lab = lab(1.0, 0.0);
        let s = RngStream::new(4, 0);
        let prof = halfspace_profile(&lab, 0.5, &[0.1, 0.4], 4000, &s).unwrap();
        let direct = r_estimate(
            &lab,
            0.5,
            &[0.4, 0.0],
            &Domain::half_space(2).unwrap(),
            4000,
            &RngStream::new(4, 9),
        )
        .unwrap();
        assert!(prof.f_values[1].agrees_with(&direct, 3.0));
        // m = 0: f(t, q) = t^{-d/α} f(1, q t^{-1/α}).
        let unit = halfspace_profile(&lab, 1.0, &[0.2, 0.8], 4000, &RngStream::new(4, 1)).unwrap();
        for (a, b) in prof.f_values.iter().zip(&unit.f_values) {
            let scaled_value = b.value / 0.25;
            let scaled_se = b.stderr / 0.25;
            assert!((a.value - scaled_value).abs() <= 3.0 * joint_stderr(a.stderr, scaled_se));
        }
        assert!(prof
            .f_values
            .iter()
            .all(|f| f.value <= lab.diagonal_density(0.5).unwrap() + 3.0 * f.stderr));
    }

    #[test]
    fn c2_and_c4_are_positive_and_consistent() {
        let lab0 = lab(1.0, 0.0);
        let c4 = c4_const(&lab0, 1500, 4, &RngStream::new(5, 0)).unwrap();
        assert!(c4.value > 0.0);
        let (half, _) = c2_of_t(&lab0, 0.5, 1500, 4, &RngStream::new(5, 1)).unwrap();
        // m = 0: C2(t) t^{(d-1)/α} = C4.
        assert!(
            (half.value * 0.5 - c4.value).abs() <= 3.0 * joint_stderr(half.stderr * 0.5, c4.stderr)
        );
        assert!(matches!(
            c4_const(&lab(1.0, 1.0), 1500, 4, &RngStream::new(5, 2)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn strata_cover_the_domain() {
        let ball = Domain::ball(2, 1.0).unwrap();
        let e = strata_edges(&ball, 0.02, 1.0).unwrap();
        assert_eq!(e, vec![0.0, 0.02, 0.04, 0.08, 0.16, 0.32, 0.5, 1.0]);
        let ann = Domain::annulus(2, 1.0, 4.0).unwrap();
        let e = strata_edges(&ann, 0.5, 1.0).unwrap();
        assert_eq!(e, vec![0.0, 0.5, 1.5]);
    }

    #[test]
    fn trace_is_positive_decreasing_and_below_first_term() {
        let lab = lab(1.0, 1.0);
        let ball = Domain::ball(2, 1.0).unwrap();
        let mut prev = f64::INFINITY;
        for (i, &t) in [0.05, 0.1, 0.2].iter().enumerate() {
            let z = z_trace(&lab, t, &ball, 3000, 1, &RngStream::new(6, i as u64)).unwrap();
            let first = first_term(&lab, t, &ball).unwrap();
            assert!(z.value > 0.0 && z.value <= first + 3.0 * z.stderr);
            assert!(z.value < prev);
            prev = z.value;
        }
        assert!(z_trace(
            &lab,
            0.1,
            &Domain::half_space(2).unwrap(),
            100,
            1,
            &RngStream::new(6, 9)
        )
        .is_err());
    }

    #[test]
    fn annulus_trace_runs() {
        let lab = lab(1.0, 0.5);
        let ann = Domain::annulus(2, 1.0, 3.0).unwrap();
        let z = z_trace(&lab, 0.05, &ann, 2000, 1, &RngStream::new(7, 0)).unwrap();
        assert!(z.value > 0.0 && z.value.is_finite());
        let row = residual_point(&lab, 0.05, &ann, 5000, &RngStream::new(7, 1)).unwrap();
        assert!(row.rho >= 0.0 && row.rho.is_finite());
        // The coupled and stratified trace estimators agree.
        assert!(row.z.agrees_with(&z, 4.0));
    }

    #[test]
    fn residual_report_shape() {
        let lab = lab(1.0, 1.0);
        let ball = Domain::ball(2, 1.0).unwrap();
        let rep = residual_scan(&lab, &[0.04, 0.08], &ball, 5000, &RngStream::new(8, 0)).unwrap();
        assert_eq!(rep.rows.len(), 2);
        for row in &rep.rows {
            assert!(row.rho >= 0.0 && row.rho.is_finite() && row.first_term.is_finite());
            let rebuilt = row.z.value - row.first_term + row.second_term.value;
            assert!((rebuilt - row.residual.value).abs() < 1e-9 * row.first_term);
        }
        assert!(rep.c3 >= rep.rows[0].rho);
        assert!(matches!(
            residual_point(&lab, 0.8, &ball, 100, &RngStream::new(8, 1)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn ryznar_comparison_holds() {
        let rel = lab(1.0, 1.0);
        let stable = lab(1.0, 0.0);
        let ball = Domain::ball(2, 1.0).unwrap();
        let xs = vec![vec![0.0, 0.0], vec![0.7, 0.0]];
        let rep = ryznar_check(
            &rel,
            &stable,
            0.1,
            &xs,
            &ball,
            3000,
            3.0,
            &RngStream::new(9, 0),
        )
        .unwrap();
        assert!(!rep.any_violation(), "{rep:?}");
        // m = 0 on both sides: the gaps vanish up to noise.
        let same = ryznar_check(
            &stable,
            &stable,
            0.1,
            &xs[..1],
            &ball,
            3000,
            3.0,
            &RngStream::new(9, 1),
        )
        .unwrap();
        assert!(same.rows[0].r_gap.abs() <= 3.0 * same.rows[0].r_gap_stderr);
    }

    #[test]
    fn lambda1_orders_and_scales() {
        let lab = lab(1.0, 0.0);
        let b1 = Domain::ball(2, 1.0).unwrap();
        let b2 = Domain::ball(2, 2.0).unwrap();
        let (l1, _) =
            lambda1_estimate(&lab, &b1, &[1.0, 1.5, 2.0], 3000, 1, &RngStream::new(10, 0)).unwrap();
        let (l2, _) =
            lambda1_estimate(&lab, &b2, &[2.0, 3.0, 4.0], 3000, 1, &RngStream::new(10, 1)).unwrap();
        assert!(l1.value > 0.0 && l2.value > 0.0);
        assert!(l1.value - l2.value > 3.0 * joint_stderr(l1.stderr, l2.stderr));
        assert!(
            (l2.value - l1.value / 2.0).abs() <= 3.0 * joint_stderr(l2.stderr, l1.stderr / 2.0)
        );
    }
}
