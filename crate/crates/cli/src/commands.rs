//! Subcommand bodies. Each writes its tables through an [`Emitter`] and
//! prints a short summary to stdout.

use std::fs;
use std::path::Path;

use relstable::kernels::{c1_const, c1_of_t};
use relstable::sampler::RngStream;
use relstable::tracelab::{
    c2_of_t, c4_const, first_term, lambda1_estimate, residual_scan, z_trace,
};
use serde::{Deserialize, Serialize};

use crate::checks::{CheckRow, Suite};
use crate::config::{ExperimentConfig, Format};
use crate::output::Emitter;
use crate::selftest::{acceptance_fit, charfn_fit, subordinator_laplace};
use crate::CliError;

/// Outcome of a subcommand: exit status 0 unless `verify` found failures.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Ok,
    Failed(Vec<CheckRow>),
}

/// `x` to six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if (-4..6).contains(&mag) {
        format!("{:.*}", (5 - mag).max(0) as usize, x)
    } else {
        format!("{x:.5e}")
    }
}

fn root_stream(cfg: &ExperimentConfig, name: &str) -> RngStream {
    RngStream::new(cfg.seed, 0).named(name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantRow {
    pub quantity: String,
    pub t: Option<f64>,
    pub value: f64,
    pub stderr: Option<f64>,
}

const C4_CACHE: &str = "c4_cache";

fn c4_cache_path(cfg: &ExperimentConfig) -> std::path::PathBuf {
    cfg.out
        .join(format!("{C4_CACHE}.{}", Format::Json.extension()))
}

/// A cached `C4` for the configured `(α, d)`, if one was written by `halfspace`.
fn read_c4(cfg: &ExperimentConfig) -> Option<ConstantRow> {
    let text = fs::read_to_string(c4_cache_path(cfg)).ok()?;
    let mut lines = text.lines();
    let meta: serde_json::Value = serde_json::from_str(lines.next()?).ok()?;
    let same = meta["config"]["alpha"].as_f64() == Some(cfg.alpha)
        && meta["config"]["d"].as_u64() == Some(cfg.d as u64);
    if !same {
        return None;
    }
    serde_json::from_str(lines.next()?).ok()
}

pub fn constants(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let p = cfg.params()?;
    let c1 = c1_const(&p)?;
    println!("C1 = {}", sig6(c1));
    let mut rows = vec![ConstantRow {
        quantity: "C1".into(),
        t: None,
        value: c1,
        stderr: None,
    }];
    for &t in &cfg.t_grid {
        let v = c1_of_t(t, &p)?;
        println!("C1(t = {t}) = {}", sig6(v));
        rows.push(ConstantRow {
            quantity: "C1(t)".into(),
            t: Some(t),
            value: v,
            stderr: None,
        });
    }
    if let Some(c4) = read_c4(cfg) {
        println!(
            "C4 = {} ± {} (cached)",
            sig6(c4.value),
            sig6(c4.stderr.unwrap_or(0.0))
        );
        rows.push(c4);
    }
    Emitter::new("constants", cfg).emit("constants", &rows)?;
    Ok(Outcome::Ok)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityRow {
    pub t: f64,
    pub r: f64,
    pub p: f64,
    pub scaled_radius: f64,
    pub profile: f64,
}

pub fn density(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let lab = cfg.lab()?;
    let p = cfg.params()?;
    let mut rows = Vec::new();
    for &t in &cfg.t_grid {
        let table = lab.cache().for_time(t)?;
        let h = t.powf(1.0 / p.alpha);
        for rho in std::iter::once(0.0).chain(table.main_radii().iter().copied()) {
            let r = rho * h;
            rows.push(DensityRow {
                t,
                r,
                p: table.eval(t, r)?,
                scaled_radius: rho,
                profile: table.eval_scaled(rho)?,
            });
        }
        println!("p({t}, 0) = {}", sig6(table.eval(t, 0.0)?));
    }
    Emitter::new("density", cfg).emit("density", &rows)?;
    Ok(Outcome::Ok)
}

pub fn subordinator(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let p = cfg.params()?;
    let s = root_stream(cfg, "subordinator");
    let lambdas = [0.1, 1.0, 10.0, 100.0];
    let laplace = subordinator_laplace(&p, cfg.dt, &lambdas, cfg.n_draws, &s.named("laplace"))?;
    for r in &laplace {
        println!(
            "E exp(-{} T) = {} (exact {}, z = {:.2})",
            r.lambda,
            sig6(r.observed),
            sig6(r.expected),
            r.z_score
        );
    }
    let acc = acceptance_fit(&p, cfg.dt, cfg.n_draws, &s.named("acceptance"))?;
    println!(
        "acceptance rate {} (exact {}, z = {:.2})",
        sig6(acc.rate),
        sig6(acc.expected),
        acc.z_score
    );
    let e = Emitter::new("subordinator", cfg);
    e.emit("subordinator_laplace", &laplace)?;
    e.emit("subordinator_acceptance", &[acc])?;
    Ok(Outcome::Ok)
}

pub fn charfn(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let p = cfg.params()?;
    let rows = charfn_fit(
        &p,
        cfg.dt,
        &[0.5, 1.0, 2.0],
        cfg.n_draws,
        &root_stream(cfg, "charfn"),
    )?;
    for r in &rows {
        println!(
            "xi = {}: {} vs {} (max z = {:.2})",
            r.xi,
            sig6(r.re),
            sig6(r.expected),
            r.z_score
        );
    }
    Emitter::new("charfn", cfg).emit("charfn", &rows)?;
    Ok(Outcome::Ok)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileRow {
    pub t: f64,
    pub q: f64,
    pub f: f64,
    pub stderr: f64,
    pub bias: f64,
    pub n_paths: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct C2Row {
    pub t: f64,
    pub c2: f64,
    pub stderr: f64,
    pub bias: f64,
    /// `C2(t) t^{(d-1)/α}`, equal to `C4` when `m = 0`.
    pub c2_scaled: f64,
    pub tail_slope: f64,
    pub tail_value: f64,
}

pub fn halfspace(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let lab = cfg.lab()?;
    let p = cfg.params()?;
    let s = root_stream(cfg, "halfspace");
    let mut profile_rows = Vec::new();
    let mut c2_rows = Vec::new();
    let meta_f64 = |m: &std::collections::BTreeMap<String, String>, k: &str| {
        m.get(k).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN)
    };
    for (i, &t) in cfg.t_grid.iter().enumerate() {
        let (c2, prof) = c2_of_t(&lab, t, cfg.n_paths, cfg.per_decade, &s.child(i as u64))?;
        for (q, f) in prof.q_grid.iter().zip(&prof.f_values) {
            profile_rows.push(ProfileRow {
                t,
                q: *q,
                f: f.value,
                stderr: f.stderr,
                bias: f.bias,
                n_paths: f.n_samples,
            });
        }
        let scaled = c2.value * t.powf((p.dim() - 1.0) / p.alpha);
        println!(
            "C2({t}) = {} ± {}  (scaled {})",
            sig6(c2.value),
            sig6(c2.stderr),
            sig6(scaled)
        );
        c2_rows.push(C2Row {
            t,
            c2: c2.value,
            stderr: c2.stderr,
            bias: c2.bias,
            c2_scaled: scaled,
            tail_slope: meta_f64(&c2.meta, "tail_slope"),
            tail_value: meta_f64(&c2.meta, "tail_value"),
        });
    }
    let e = Emitter::new("halfspace", cfg);
    e.emit("halfspace_profile", &profile_rows)?;
    e.emit("halfspace_c2", &c2_rows)?;
    if p.m == 0.0 {
        let c4 = match c2_rows.iter().find(|r| r.t == 1.0) {
            Some(r) => (r.c2, r.stderr),
            None => {
                let c4 = c4_const(&lab, cfg.n_paths, cfg.per_decade, &s.named("c4"))?;
                (c4.value, c4.stderr)
            }
        };
        println!("C4 = {} ± {}", sig6(c4.0), sig6(c4.1));
        let mut json = cfg.clone();
        json.format = Format::Json;
        Emitter::new("halfspace", &json).emit(
            C4_CACHE,
            &[ConstantRow {
                quantity: "C4".into(),
                t: Some(1.0),
                value: c4.0,
                stderr: Some(c4.1),
            }],
        )?;
    }
    Ok(Outcome::Ok)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: f64,
    pub z: f64,
    pub stderr: f64,
    pub bias: f64,
    pub first_term: f64,
    /// `t^{d/α} e^{-mt} Z_D(t)`, tending to `C1 |D|`.
    pub normalized: f64,
    pub normalized_stderr: f64,
    pub c1_volume: f64,
    pub n_points: u64,
}

pub fn trace(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let lab = cfg.lab()?;
    let p = cfg.params()?;
    let dom = cfg.domain()?;
    let s = root_stream(cfg, "trace");
    let c1_volume = c1_const(&p)? * dom.volume()?;
    let mut rows = Vec::new();
    for (i, &t) in cfg.t_grid.iter().enumerate() {
        let z = z_trace(&lab, t, &dom, cfg.n_x, cfg.paths_per_x, &s.child(i as u64))?;
        let norm = t.powf(p.dim() / p.alpha) * (-p.m * t).exp();
        println!(
            "Z({t}) = {} ± {}  normalized {}",
            sig6(z.value),
            sig6(z.stderr),
            sig6(z.value * norm)
        );
        rows.push(TraceRow {
            t,
            z: z.value,
            stderr: z.stderr,
            bias: z.bias,
            first_term: first_term(&lab, t, &dom)?,
            normalized: z.value * norm,
            normalized_stderr: z.stderr * norm,
            c1_volume,
            n_points: z.n_samples,
        });
    }
    Emitter::new("trace", cfg).emit("trace", &rows)?;
    Ok(Outcome::Ok)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualCsvRow {
    pub t: f64,
    pub z: f64,
    pub z_stderr: f64,
    pub first_term: f64,
    pub second_term: f64,
    pub second_term_stderr: f64,
    pub residual: f64,
    pub residual_stderr: f64,
    pub rho: f64,
    pub rho_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualSummary {
    pub domain: String,
    pub c3: f64,
    pub slope: f64,
    pub small_t_ratio: f64,
}

pub fn residual(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let lab = cfg.lab()?;
    let rep = residual_scan(
        &lab,
        &cfg.t_grid,
        &cfg.domain()?,
        cfg.n_x,
        &root_stream(cfg, "residual"),
    )?;
    let rows: Vec<ResidualCsvRow> = rep
        .rows
        .iter()
        .map(|r| ResidualCsvRow {
            t: r.t,
            z: r.z.value,
            z_stderr: r.z.stderr,
            first_term: r.first_term,
            second_term: r.second_term.value,
            second_term_stderr: r.second_term.stderr,
            residual: r.residual.value,
            residual_stderr: r.residual.stderr,
            rho: r.rho,
            rho_stderr: r.rho_stderr,
        })
        .collect();
    for r in &rows {
        println!(
            "t = {}: rho = {} ± {}",
            r.t,
            sig6(r.rho),
            sig6(r.rho_stderr)
        );
    }
    let summary = ResidualSummary {
        domain: rep.domain.clone(),
        c3: rep.c3,
        slope: rep.slope,
        small_t_ratio: rep.small_t_ratio(),
    };
    println!(
        "C3 ~ {}, log-log slope {}",
        sig6(summary.c3),
        sig6(summary.slope)
    );
    let e = Emitter::new("residual", cfg);
    e.emit("residual", &rows)?;
    e.emit("residual_summary", &[summary])?;
    Ok(Outcome::Ok)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lambda1Row {
    pub domain: String,
    pub lambda1: f64,
    pub stderr: f64,
    pub curvature: f64,
    pub second_mode_flag: bool,
    pub single_mode_regime: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lambda1TraceRow {
    pub t: f64,
    pub z: f64,
    pub stderr: f64,
}

pub fn lambda1(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let lab = cfg.lab()?;
    let dom = cfg.domain()?;
    let (est, zs) = lambda1_estimate(
        &lab,
        &dom,
        &cfg.t_grid,
        cfg.n_x,
        cfg.paths_per_x,
        &root_stream(cfg, "lambda1"),
    )?;
    let flag = |k: &str| est.meta.get(k).map(|v| v == "true").unwrap_or(false);
    let row = Lambda1Row {
        domain: dom.to_string(),
        lambda1: est.value,
        stderr: est.stderr,
        curvature: est
            .meta
            .get("curvature")
            .and_then(|v| v.parse().ok())
            .unwrap_or(f64::NAN),
        second_mode_flag: flag("second_mode_flag"),
        single_mode_regime: flag("single_mode_regime"),
    };
    println!("lambda1 = {} ± {}", sig6(row.lambda1), sig6(row.stderr));
    if !row.single_mode_regime {
        println!("warning: Z(t) >= 1.5 on the grid; higher modes bias the slope, use larger t");
    }
    let traces: Vec<Lambda1TraceRow> = zs
        .iter()
        .map(|z| Lambda1TraceRow {
            t: z.t,
            z: z.value,
            stderr: z.stderr,
        })
        .collect();
    let e = Emitter::new("lambda1", cfg);
    e.emit("lambda1", &[row])?;
    e.emit("lambda1_traces", &traces)?;
    Ok(Outcome::Ok)
}

pub fn verify(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let suite = Suite::from_config(cfg)?;
    let rows = suite.run_all(|id, rows| {
        let failed = rows.iter().filter(|r| !r.passed).count();
        let status = if failed == 0 { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:>2}: {status} ({} checks, {failed} failed)",
            rows.len()
        );
        for r in rows.iter().filter(|r| !r.passed) {
            println!(
                "    {}: observed {} expected {} tolerance {} ({})",
                r.check,
                sig6(r.observed),
                sig6(r.expected),
                sig6(r.tolerance),
                r.detail
            );
        }
    })?;
    let failures: Vec<CheckRow> = rows.iter().filter(|r| !r.passed).cloned().collect();
    let e = Emitter::new("verify", cfg);
    e.emit("verify_checks", &rows)?;
    let path = e.emit("verify_failures", &failures)?;
    if failures.is_empty() {
        println!("all {} checks passed", rows.len());
        Ok(Outcome::Ok)
    } else {
        println!(
            "{} of {} checks failed; see {}",
            failures.len(),
            rows.len(),
            display(&path)
        );
        Ok(Outcome::Failed(failures))
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(1.0 / (2.0 * std::f64::consts::PI)), "0.159155");
        assert_eq!(sig6(123456.7), "123457");
        assert_eq!(sig6(1234567.0), "1.23457e6");
        assert_eq!(sig6(2.5), "2.50000");
        assert_eq!(sig6(0.00012345678), "0.000123457");
        assert_eq!(sig6(-3.0e-9), "-3.00000e-9");
    }
}
