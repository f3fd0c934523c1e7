//! The `verify` suite: ten criteria, each a list of individual checks.
//!
//! Problem parameters are fixed per criterion; the configuration supplies
//! the seed, the ladder, the band widths and a scale applied to every
//! Monte Carlo budget.

use std::f64::consts::PI;

use relstable::geometry::Domain;
use relstable::kernels::{c1_of_t, free_density};
use relstable::sampler::RngStream;
use relstable::specfun::{gamma, StableSubordinatorDensity};
use relstable::tracelab::{
    c2_of_t, c4_const, first_term, halfspace_profile, joint_stderr, r_estimate, residual_scan,
    ryznar_check, z_trace, Lab, Ladder, TraceEstimate, MIN_PATHS,
};
use relstable::ProcessParams;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::selftest::{acceptance_fit, charfn_fit};
use crate::CliError;

/// One pass/fail check within a criterion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub criterion: u32,
    pub check: String,
    pub passed: bool,
    pub observed: f64,
    pub expected: f64,
    /// Allowed `|observed - expected|`, or the bound for one-sided checks.
    pub tolerance: f64,
    pub detail: String,
}

/// Unscaled per-check budgets (the documented defaults).
pub mod budget {
    pub const CHARFN_DRAWS: usize = 1_000_000;
    pub const TRACE_POINTS: usize = 100_000;
    pub const RYZNAR_PATHS: usize = 20_000;
    pub const SCALING_PATHS: usize = 20_000;
    pub const TAIL_PATHS: usize = 50_000;
    pub const RESIDUAL_SAMPLES: usize = 400_000;
    pub const C2_PATHS: usize = 10_000;
    pub const C2_PER_DECADE: usize = 8;
    pub const BOUND_PATHS: usize = 20_000;
}

#[derive(Debug, Clone)]
pub struct Suite {
    pub seed: u64,
    pub ladder: Ladder,
    pub z: f64,
    pub z_sampler: f64,
    pub scale: f64,
}

fn row(
    criterion: u32,
    check: impl Into<String>,
    passed: bool,
    observed: f64,
    expected: f64,
    tolerance: f64,
    detail: impl Into<String>,
) -> CheckRow {
    CheckRow {
        criterion,
        check: check.into(),
        passed,
        observed,
        expected,
        tolerance,
        detail: detail.into(),
    }
}

/// `|obs - exp| ≤ tol`, failing on NaN.
fn close(obs: f64, exp: f64, tol: f64) -> bool {
    (obs - exp).abs() <= tol
}

fn params(alpha: f64, m: f64, d: usize) -> ProcessParams {
    ProcessParams::new(alpha, m, d).expect("fixed parameters are valid")
}

impl Suite {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        Ok(Self {
            seed: cfg.seed,
            ladder: cfg.ladder()?,
            z: cfg.z,
            z_sampler: cfg.z_sampler,
            scale: cfg.budget_scale,
        })
    }

    fn n(&self, base: usize, floor: usize) -> usize {
        ((base as f64 * self.scale).round() as usize).max(floor)
    }

    fn stream(&self, label: &str) -> RngStream {
        RngStream::new(self.seed, 0).named("verify").named(label)
    }

    fn lab(&self, alpha: f64, m: f64, d: usize) -> Result<Lab, CliError> {
        Ok(Lab::new(&params(alpha, m, d), self.ladder)?)
    }

    /// Runs every criterion in order.
    pub fn run_all(
        &self,
        mut progress: impl FnMut(u32, &[CheckRow]),
    ) -> Result<Vec<CheckRow>, CliError> {
        let mut all = Vec::new();
        let mut record = |id: u32, rows: Vec<CheckRow>, all: &mut Vec<CheckRow>| {
            progress(id, &rows);
            all.extend(rows);
        };
        record(1, self.criterion_1()?, &mut all);
        record(2, self.criterion_2()?, &mut all);
        record(3, self.criterion_3()?, &mut all);
        record(4, self.criterion_4()?, &mut all);
        let (rows5, z5) = self.criterion_5()?;
        record(5, rows5, &mut all);
        record(6, self.criterion_6()?, &mut all);
        record(7, self.criterion_7()?, &mut all);
        let (rows8, c4) = self.criterion_8()?;
        record(8, rows8, &mut all);
        record(9, self.criterion_9(&z5, &c4)?, &mut all);
        record(10, self.criterion_10()?, &mut all);
        Ok(all)
    }

    /// Half-stable subordinator density against its closed form.
    pub fn criterion_1(&self) -> Result<Vec<CheckRow>, CliError> {
        let dens = StableSubordinatorDensity::new(0.5)?;
        let mut worst = 0.0f64;
        let mut at = 0.0;
        for i in 0..100 {
            let u = (0.01f64.ln() + (20.0f64 / 0.01).ln() * i as f64 / 99.0).exp();
            let exact = u.powf(-1.5) * (-0.25 / u).exp() / (2.0 * PI.sqrt());
            let rel = ((dens.density(u)? - exact) / exact).abs();
            if !(rel <= worst) {
                worst = rel;
                at = u;
            }
        }
        Ok(vec![row(
            1,
            "theta_half_closed_form",
            worst <= 1e-7,
            worst,
            0.0,
            1e-7,
            format!("max relative error at u = {at:.4}"),
        )])
    }

    /// `∫ e^{-λu} θ_β(1, u) du = e^{-λ^β}`.
    pub fn criterion_2(&self) -> Result<Vec<CheckRow>, CliError> {
        let mut rows = Vec::new();
        for beta in [0.3, 0.5, 0.7, 0.9] {
            let dens = StableSubordinatorDensity::new(beta)?;
            for lambda in [0.1, 1.0, 10.0] {
                let got = dens.laplace_transform(lambda)?;
                let exact = (-lambda.powf(beta)).exp();
                rows.push(row(
                    2,
                    format!("laplace_beta{beta}_lambda{lambda}"),
                    close(got, exact, 1e-6),
                    got,
                    exact,
                    1e-6,
                    "absolute",
                ));
            }
        }
        Ok(rows)
    }

    /// Cauchy kernel for `α = 1, m = 0`.
    pub fn criterion_3(&self) -> Result<Vec<CheckRow>, CliError> {
        let mut rows = Vec::new();
        for d in [2usize, 3] {
            let p = params(1.0, 0.0, d);
            let k = (d as f64 + 1.0) / 2.0;
            let c = gamma(k)? / PI.powf(k);
            for r in [0.0f64, 0.5, 1.0, 2.0, 5.0] {
                let exact = c / (1.0 + r * r).powf(k);
                let got = free_density(1.0, r, &p)?;
                let rel = ((got - exact) / exact).abs();
                rows.push(row(
                    3,
                    format!("cauchy_d{d}_r{r}"),
                    rel <= 1e-6,
                    got,
                    exact,
                    1e-6 * exact,
                    format!("relative error {rel:.2e}"),
                ));
            }
        }
        Ok(rows)
    }

    /// Empirical characteristic function and tempering acceptance rate.
    pub fn criterion_4(&self) -> Result<Vec<CheckRow>, CliError> {
        let n = self.n(budget::CHARFN_DRAWS, 1000);
        let dt = 0.1;
        let mut rows = Vec::new();
        for (i, (alpha, m)) in [(1.0, 0.0), (1.0, 1.0), (0.5, 1.0)].into_iter().enumerate() {
            let p = params(alpha, m, 2);
            let s = self.stream("c4").child(i as u64);
            for r in charfn_fit(&p, dt, &[0.5, 1.0, 2.0], n, &s.named("charfn"))? {
                rows.push(row(
                    4,
                    format!("charfn_alpha{alpha}_m{m}_xi{}", r.xi),
                    r.z_score <= self.z_sampler,
                    r.re,
                    r.expected,
                    self.z_sampler * r.re_stderr,
                    format!(
                        "im = {:.3e} ± {:.1e}, max z = {:.2}, n = {n}",
                        r.im, r.im_stderr, r.z_score
                    ),
                ));
            }
            let a = acceptance_fit(&p, dt, n, &s.named("acceptance"))?;
            rows.push(row(
                4,
                format!("acceptance_alpha{alpha}_m{m}"),
                a.z_score <= self.z_sampler,
                a.rate,
                a.expected,
                self.z_sampler * a.rate_stderr,
                format!(
                    "{} of {} proposals, z = {:.2}",
                    a.accepted, a.proposals, a.z_score
                ),
            ));
        }
        Ok(rows)
    }

    /// Normalized trace at small `t` against `C1 |D|`.
    pub fn criterion_5(&self) -> Result<(Vec<CheckRow>, TraceEstimate), CliError> {
        let lab = self.lab(1.0, 1.0, 2)?;
        let ball = Domain::ball(2, 1.0)?;
        let t = 0.02;
        let z = z_trace(
            &lab,
            t,
            &ball,
            self.n(budget::TRACE_POINTS, 1000),
            1,
            &self.stream("c5"),
        )?;
        let norm = t * t * (-t).exp();
        let (obs, se) = (z.value * norm, z.stderr * norm);
        // C1 |B(0,1)| = π / (2π).
        let target = 0.5;
        let tol = (3.0 * se).max(0.05 * target);
        let detail = format!(
            "stderr {se:.2e}, bias {:.2e}, n = {}",
            z.bias * norm,
            z.n_samples
        );
        Ok((
            vec![row(
                5,
                "normalized_trace_t0.02",
                close(obs, target, tol),
                obs,
                target,
                tol,
                detail,
            )],
            z,
        ))
    }

    /// `r_D ≤ e^{2mt} r̃_D` (and the matching `p_D` comparison).
    pub fn criterion_6(&self) -> Result<Vec<CheckRow>, CliError> {
        let lab = self.lab(1.0, 1.0, 2)?;
        let stable = self.lab(1.0, 0.0, 2)?;
        let ball = Domain::ball(2, 1.0)?;
        let xs = ryznar_points();
        let mut rows = Vec::new();
        for (i, t) in [0.05, 0.1].into_iter().enumerate() {
            let rep = ryznar_check(
                &lab,
                &stable,
                t,
                &xs,
                &ball,
                self.n(budget::RYZNAR_PATHS, MIN_PATHS),
                self.z,
                &self.stream("c6").child(i as u64),
            )?;
            for r in rep.rows {
                rows.push(row(
                    6,
                    format!("ryznar_t{t}_x{:?}", r.x),
                    !r.violation,
                    r.r_gap,
                    0.0,
                    self.z * r.r_gap_stderr,
                    format!(
                        "r = {:.4e}, e^(2mt) r~ = {:.4e}, p_D gap {:.2e} ± {:.1e}",
                        r.r.value,
                        r.r.value - r.r_gap,
                        r.p_gap,
                        r.p_gap_stderr
                    ),
                ));
            }
        }
        Ok(rows)
    }

    /// Half-space scaling at `m = 0` and the tail slope of `f̃_H(1, ·)`.
    pub fn criterion_7(&self) -> Result<Vec<CheckRow>, CliError> {
        let lab = self.lab(1.0, 0.0, 2)?;
        let (d, alpha) = (2.0, 1.0);
        let s = self.stream("c7");
        let n = self.n(budget::SCALING_PATHS, MIN_PATHS);
        let unit_q = [0.1, 0.3, 1.0];
        let unit = halfspace_profile(&lab, 1.0, &unit_q, n, &s.named("unit"))?;
        let mut rows = Vec::new();
        for (i, t) in [0.25f64, 4.0].into_iter().enumerate() {
            let h = t.powf(1.0 / alpha);
            let qs: Vec<f64> = unit_q.iter().map(|q| q * h).collect();
            let prof = halfspace_profile(&lab, t, &qs, n, &s.child(i as u64))?;
            let scale = t.powf(-d / alpha);
            for ((q, f), g) in qs.iter().zip(&prof.f_values).zip(&unit.f_values) {
                let tol = self.z * joint_stderr(f.stderr, scale * g.stderr);
                rows.push(row(
                    7,
                    format!("scaling_t{t}_q{q}"),
                    close(f.value, scale * g.value, tol),
                    f.value,
                    scale * g.value,
                    tol,
                    format!("f_H(t, q) against t^(-d/alpha) f_H(1, {:.2})", q / h),
                ));
            }
        }
        let tail_q: Vec<f64> = (0..5).map(|j| 2.0 * 2f64.powf(j as f64 / 2.0)).collect();
        let tail = halfspace_profile(
            &lab,
            1.0,
            &tail_q,
            self.n(budget::TAIL_PATHS, MIN_PATHS),
            &s.named("tail"),
        )?;
        let (slope, se) = tail_slope(&tail.q_grid, &tail.f_values);
        let target = -(d + alpha);
        rows.push(row(
            7,
            "tail_slope_q2_8",
            close(slope, target, 0.5),
            slope,
            target,
            0.5,
            format!("weighted log-log slope ± {se:.3}; the q^-(d+alpha) envelope is an upper bound, observed decay is q^-(d+2 alpha)"),
        ));
        Ok(rows)
    }

    /// Residual stability and the `m = 0` cross-check of `C2` against `C4`.
    pub fn criterion_8(&self) -> Result<(Vec<CheckRow>, TraceEstimate), CliError> {
        let lab = self.lab(1.0, 1.0, 2)?;
        let ball = Domain::ball(2, 1.0)?;
        let s = self.stream("c8");
        let rep = residual_scan(
            &lab,
            &[0.02, 0.04, 0.08, 0.16],
            &ball,
            self.n(budget::RESIDUAL_SAMPLES, 1000),
            &s.named("residual"),
        )?;
        let rhos: Vec<String> = rep
            .rows
            .iter()
            .map(|r| format!("{:.3e}±{:.1e}", r.rho, r.rho_stderr))
            .collect();
        let mut rows = vec![row(
            8,
            "residual_slope",
            rep.slope <= 0.5,
            rep.slope,
            0.5,
            0.5,
            format!("rho(t) = {}", rhos.join(", ")),
        )];
        let ratio = rep.small_t_ratio();
        rows.push(row(
            8,
            "c3_small_t_ratio",
            (0.5..=2.0).contains(&ratio),
            ratio,
            1.0,
            2.0,
            "rho(0.02) / rho(0.04) within a factor 2",
        ));
        let stable = self.lab(1.0, 0.0, 2)?;
        let n = self.n(budget::C2_PATHS, MIN_PATHS);
        let c4 = c4_const(&stable, n, budget::C2_PER_DECADE, &s.named("c4"))?;
        let t = 0.25;
        let (c2, _) = c2_of_t(&stable, t, n, budget::C2_PER_DECADE, &s.named("c2"))?;
        let scaled = c2.value * t;
        let tol = self.z * joint_stderr(c2.stderr * t, c4.stderr);
        rows.push(row(
            8,
            "c2_t0.25_vs_c4",
            close(scaled, c4.value, tol),
            scaled,
            c4.value,
            tol,
            format!("C4 = {:.5} ± {:.5}", c4.value, c4.stderr),
        ));
        Ok((rows, c4))
    }

    /// Inequalities: `C1(t) ≤ C1`, `Z ≤ first term`, `r ≤ p(t, 0)`, the
    /// boundary-layer area and volume bounds, and `C2(t) ≤ C4 e^{2mt} t^{(1-d)/α}`.
    pub fn criterion_9(
        &self,
        z5: &TraceEstimate,
        c4: &TraceEstimate,
    ) -> Result<Vec<CheckRow>, CliError> {
        let p = params(1.0, 1.0, 2);
        let lab = self.lab(1.0, 1.0, 2)?;
        let ball = Domain::ball(2, 1.0)?;
        let s = self.stream("c9");
        let c1 = 1.0 / (2.0 * PI);
        let mut rows = Vec::new();
        for t in [0.01, 0.1, 1.0, 10.0] {
            let v = c1_of_t(t, &p)?;
            rows.push(row(
                9,
                format!("c1_of_t_{t}"),
                v <= c1,
                v,
                c1,
                c1,
                "C1(t) <= C1",
            ));
        }
        let mut traces = vec![z5.clone()];
        for (i, t) in [0.05, 0.1].into_iter().enumerate() {
            traces.push(z_trace(
                &lab,
                t,
                &ball,
                self.n(budget::TRACE_POINTS / 4, 1000),
                1,
                &s.named("trace").child(i as u64),
            )?);
        }
        for z in &traces {
            let first = first_term(&lab, z.t, &ball)?;
            rows.push(row(
                9,
                format!("trace_below_first_t{}", z.t),
                z.value <= first + self.z * z.stderr,
                z.value,
                first,
                first + self.z * z.stderr,
                "Z <= first term",
            ));
        }
        for (i, x) in [[0.0, 0.0], [0.9, 0.0]].iter().enumerate() {
            for (j, t) in [0.02, 0.1].into_iter().enumerate() {
                let r = r_estimate(
                    &lab,
                    t,
                    x,
                    &ball,
                    self.n(budget::BOUND_PATHS, MIN_PATHS),
                    &s.named("r").child((2 * i + j) as u64),
                )?;
                let p0 = lab.diagonal_density(t)?;
                rows.push(row(
                    9,
                    format!("r_below_p0_t{t}_x{x:?}"),
                    r.value <= p0 + self.z * r.stderr,
                    r.value,
                    p0,
                    p0 + self.z * r.stderr,
                    "r_D(t,x,x) <= p(t,0)",
                ));
            }
        }
        rows.extend(layer_bound_rows()?);
        let t = 0.1;
        let (c2, _) = c2_of_t(
            &lab,
            t,
            self.n(budget::C2_PATHS, MIN_PATHS),
            budget::C2_PER_DECADE,
            &s.named("c2"),
        )?;
        let factor = (2.0 * t).exp() / t;
        let bound = c4.value * factor;
        let slack = self.z * joint_stderr(c2.stderr, c4.stderr * factor);
        rows.push(row(
            9,
            "c2_below_c4_bound_t0.1",
            c2.value <= bound + slack,
            c2.value,
            bound,
            bound + slack,
            "C2(t) <= C4 e^(2mt) t^((1-d)/alpha)",
        ));
        Ok(rows)
    }

    /// The same estimates on pools of one and two workers are bit-identical.
    pub fn criterion_10(&self) -> Result<Vec<CheckRow>, CliError> {
        let lab = self.lab(1.0, 1.0, 2)?;
        let ball = Domain::ball(2, 1.0)?;
        let s = self.stream("c10");
        let run = |threads: usize| -> Result<(f64, f64), CliError> {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()?;
            pool.install(|| {
                let r = r_estimate(&lab, 0.05, &[0.5, 0.0], &ball, 2000, &s)?;
                Ok((r.value, r.stderr))
            })
        };
        let (a, b) = (run(1)?, run(2)?);
        let same = a.0.to_bits() == b.0.to_bits() && a.1.to_bits() == b.1.to_bits();
        Ok(vec![row(
            10,
            "pool_size_invariance",
            same,
            b.0,
            a.0,
            0.0,
            "r_estimate on 1 and 2 workers",
        )])
    }
}

/// Five interior points of the unit disk.
pub fn ryznar_points() -> Vec<Vec<f64>> {
    vec![
        vec![0.0, 0.0],
        vec![0.3, 0.0],
        vec![0.0, 0.5],
        vec![-0.7, 0.0],
        vec![0.6, 0.6],
    ]
}

/// Weighted least-squares slope of `ln f` against `ln q`.
pub fn tail_slope(q: &[f64], f: &[TraceEstimate]) -> (f64, f64) {
    let (mut x, mut y, mut w) = (Vec::new(), Vec::new(), Vec::new());
    for (q, e) in q.iter().zip(f) {
        if e.value > 0.0 && e.stderr > 0.0 {
            x.push(q.ln());
            y.push(e.value.ln());
            w.push((e.value / e.stderr).powi(2));
        }
    }
    if x.len() < 2 {
        return (f64::NAN, f64::NAN);
    }
    let (_, b, se) = relstable::stats::weighted_linear_fit(&x, &y, &w);
    (b, se)
}

/// Boundary-layer inequalities on closed-form balls and annuli, with the
/// two-sided layer bound checked on `(0, R/2]`.
fn layer_bound_rows() -> Result<Vec<CheckRow>, CliError> {
    let mut rows = Vec::new();
    for d in 2..=3usize {
        let two = 2f64.powi(d as i32);
        for dom in [
            Domain::ball(d, 1.0)?,
            Domain::ball(d, 2.5)?,
            Domain::annulus(d, 1.0, 3.0)?,
        ] {
            let (vol, area, r) = (dom.volume()?, dom.surface()?, dom.smoothness_radius()?);
            let mut ok = [true; 3];
            let mut worst = [f64::NEG_INFINITY; 3];
            for i in 1..=50 {
                let q = r * i as f64 / 50.0;
                let aq = dom.layer_area(q)?;
                if q <= 0.5 * r {
                    let lo = 2.0 * area / two;
                    let hi = 0.5 * two * area;
                    ok[0] &= lo <= aq && aq <= hi;
                    worst[0] = worst[0].max((lo - aq).max(aq - hi));
                }
                let gap = (aq - area).abs() - two * d as f64 * q * area / r;
                ok[2] &= gap <= 0.0;
                worst[2] = worst[2].max(gap);
            }
            ok[1] = area <= two * vol / r;
            worst[1] = area - two * vol / r;
            for (k, name) in [
                "i_layer_area_two_sided",
                "ii_area_by_volume",
                "iii_layer_area_lipschitz",
            ]
            .iter()
            .enumerate()
            {
                rows.push(row(
                    9,
                    format!("layer_{name}_d{d}_{dom}"),
                    ok[k],
                    worst[k],
                    0.0,
                    0.0,
                    "largest signed violation (<= 0 passes)",
                ));
            }
        }
    }
    Ok(rows)
}
