//! Statistical self-tests of the increment sampler.

use relstable::sampler::{map_blocks, IncrementSampler, RngStream};
use relstable::stats::RunningStats;
use relstable::ProcessParams;
use serde::Serialize;

use crate::CliError;

const BLOCK: usize = 4096;

/// `e^{-dt((m^{2/α} + |ξ|²)^{α/2} - m)}`.
pub fn charfn_exact(params: &ProcessParams, dt: f64, xi: f64) -> f64 {
    let a = params.alpha;
    let m = params.m;
    (-dt * ((m.powf(2.0 / a) + xi * xi).powf(0.5 * a) - m)).exp()
}

/// `E e^{-λ T(dt, m)} = e^{-dt((λ + m^{1/β})^β - m)}`.
pub fn laplace_exact(params: &ProcessParams, dt: f64, lambda: f64) -> f64 {
    let b = params.beta;
    (-dt * ((lambda + params.tilt()).powf(b) - params.m)).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CharfnRow {
    pub alpha: f64,
    pub m: f64,
    pub d: usize,
    pub dt: f64,
    pub xi: f64,
    pub n: usize,
    pub re: f64,
    pub re_stderr: f64,
    pub im: f64,
    pub im_stderr: f64,
    pub expected: f64,
    /// `max(|re - expected| / se_re, |im| / se_im)`.
    pub z_score: f64,
}

/// Empirical characteristic function of `n` increments at `ξ e_1`.
pub fn charfn_fit(
    params: &ProcessParams,
    dt: f64,
    xis: &[f64],
    n: usize,
    stream: &RngStream,
) -> Result<Vec<CharfnRow>, CliError> {
    let sampler = IncrementSampler::new(dt, params)?;
    let k = xis.len();
    let blocks = map_blocks(n, BLOCK, stream, |rng, range| {
        let mut acc = vec![RunningStats::new(); 2 * k];
        let mut x = vec![0.0; params.d];
        for _ in range {
            sampler.increment_into(rng, &mut x);
            for (j, xi) in xis.iter().enumerate() {
                let (s, c) = (xi * x[0]).sin_cos();
                acc[2 * j].push(c);
                acc[2 * j + 1].push(s);
            }
        }
        acc
    });
    let mut acc = vec![RunningStats::new(); 2 * k];
    for b in &blocks {
        for (a, s) in acc.iter_mut().zip(b) {
            a.merge(s);
        }
    }
    Ok(xis
        .iter()
        .enumerate()
        .map(|(j, &xi)| {
            let (re, im) = (acc[2 * j], acc[2 * j + 1]);
            let expected = charfn_exact(params, dt, xi);
            let z_re = (re.mean() - expected).abs() / re.stderr();
            let z_im = im.mean().abs() / im.stderr();
            CharfnRow {
                alpha: params.alpha,
                m: params.m,
                d: params.d,
                dt,
                xi,
                n,
                re: re.mean(),
                re_stderr: re.stderr(),
                im: im.mean(),
                im_stderr: im.stderr(),
                expected,
                z_score: z_re.max(z_im),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AcceptanceRow {
    pub alpha: f64,
    pub m: f64,
    pub dt: f64,
    pub proposals: u64,
    pub accepted: u64,
    pub rate: f64,
    pub rate_stderr: f64,
    pub expected: f64,
    pub z_score: f64,
}

/// Observed tempering acceptance rate over `n` stable proposals.
pub fn acceptance_fit(
    params: &ProcessParams,
    dt: f64,
    n: usize,
    stream: &RngStream,
) -> Result<AcceptanceRow, CliError> {
    let sampler = IncrementSampler::new(dt, params)?;
    let counts = map_blocks(n, BLOCK, stream, |rng, range| {
        range.filter(|_| sampler.propose(rng).1).count() as u64
    });
    let accepted: u64 = counts.iter().sum();
    let rate = accepted as f64 / n as f64;
    let expected = sampler.acceptance_rate();
    let rate_stderr = (expected * (1.0 - expected) / n as f64).sqrt();
    let z_score = if rate_stderr > 0.0 {
        (rate - expected).abs() / rate_stderr
    } else if rate == expected {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(AcceptanceRow {
        alpha: params.alpha,
        m: params.m,
        dt,
        proposals: n as u64,
        accepted,
        rate,
        rate_stderr,
        expected,
        z_score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LaplaceRow {
    pub beta: f64,
    pub m: f64,
    pub dt: f64,
    pub lambda: f64,
    pub n: usize,
    pub observed: f64,
    pub stderr: f64,
    pub expected: f64,
    pub z_score: f64,
}

/// Empirical Laplace transform of `n` tempered subordinator draws.
pub fn subordinator_laplace(
    params: &ProcessParams,
    dt: f64,
    lambdas: &[f64],
    n: usize,
    stream: &RngStream,
) -> Result<Vec<LaplaceRow>, CliError> {
    let sampler = IncrementSampler::new(dt, params)?;
    let blocks = map_blocks(n, BLOCK, stream, |rng, range| {
        let mut acc = vec![RunningStats::new(); lambdas.len()];
        for _ in range {
            let u = sampler.tempered(rng);
            for (a, l) in acc.iter_mut().zip(lambdas) {
                a.push((-l * u).exp());
            }
        }
        acc
    });
    let mut acc = vec![RunningStats::new(); lambdas.len()];
    for b in &blocks {
        for (a, s) in acc.iter_mut().zip(b) {
            a.merge(s);
        }
    }
    Ok(lambdas
        .iter()
        .zip(&acc)
        .map(|(&lambda, a)| {
            let expected = laplace_exact(params, dt, lambda);
            LaplaceRow {
                beta: params.beta,
                m: params.m,
                dt,
                lambda,
                n,
                observed: a.mean(),
                stderr: a.stderr(),
                expected,
                z_score: (a.mean() - expected).abs() / a.stderr(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_forms_at_known_points() {
        let cauchy = ProcessParams::new(1.0, 0.0, 2).unwrap();
        assert!((charfn_exact(&cauchy, 0.5, 2.0) - (-1.0f64).exp()).abs() < 1e-15);
        let p = ProcessParams::new(1.0, 1.0, 2).unwrap();
        // (1 + ξ²)^{1/2} - 1 at ξ² = 3 is 1.
        assert!((charfn_exact(&p, 0.3, 3f64.sqrt()) - (-0.3f64).exp()).abs() < 1e-15);
        assert_eq!(laplace_exact(&p, 0.7, 0.0), 1.0);
    }

    #[test]
    fn small_runs_agree_with_exact_forms() {
        let p = ProcessParams::new(1.0, 1.0, 2).unwrap();
        let s = RngStream::new(3, 0);
        for row in charfn_fit(&p, 0.1, &[0.5, 2.0], 20_000, &s).unwrap() {
            assert!(row.z_score < 5.0, "{row:?}");
        }
        let acc = acceptance_fit(&p, 0.1, 20_000, &s).unwrap();
        assert!(acc.z_score < 5.0 && acc.accepted <= acc.proposals);
        for row in subordinator_laplace(&p, 0.1, &[0.5, 5.0], 20_000, &s).unwrap() {
            assert!(row.z_score < 5.0, "{row:?}");
        }
    }
}
