//! Special functions and exact densities.
//!
//! The one-sided β-stable law with Laplace transform `E e^{-λT} = e^{-λ^β}`
//! is evaluated through Zolotarev's single-integral representation
//!
//! ```text
//! θ_β(1,u) = β / ((1-β) π u) ∫_0^π y(φ) e^{-y(φ)} dφ,   y(φ) = A(φ) u^{-β/(1-β)},
//! A(φ) = (sin βφ / sin φ)^{β/(1-β)} · sin((1-β)φ) / sin φ,
//! ```
//!
//! which is also the law sampled by the Kanter transform in
//! [`crate::sampler`]. `A` is increasing on `(0, π)`, so the integrand has a
//! single interior maximum where `y = 1`; the integral is split there.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::{integrate, integrate_panels, QuadOptions};

/// Largest argument accepted by [`gamma`]; `Γ(171.62)` overflows `f64`.
pub const GAMMA_MAX_ARG: f64 = 171.0;
/// Smallest (negative) argument accepted by [`gamma`].
pub const GAMMA_MIN_ARG: f64 = -50.0;

/// Default relative accuracy of the subordinator density.
pub const DEFAULT_DENSITY_RTOL: f64 = 1e-10;

/// Fixed parameters of the relativistic α-stable process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessParams {
    pub alpha: f64,
    pub beta: f64,
    pub m: f64,
    pub d: usize,
    pub p: f64,
}

impl ProcessParams {
    pub fn new(alpha: f64, m: f64, d: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 2.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must lie in (0, 2), got {alpha}"
            )));
        }
        if !(m >= 0.0 && m.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "mass must be finite and nonnegative, got {m}"
            )));
        }
        if d < 2 {
            return Err(Error::InvalidParameter(format!(
                "dimension must be at least 2, got {d}"
            )));
        }
        Ok(Self {
            alpha,
            beta: alpha / 2.0,
            m,
            d,
            p: (d as f64 + alpha) / 2.0,
        })
    }

    /// Same `(α, d)` with the mass set to zero: the isotropic stable process.
    pub fn stable(&self) -> Self {
        Self { m: 0.0, ..*self }
    }

    pub fn with_mass(&self, m: f64) -> Result<Self> {
        Self::new(self.alpha, m, self.d)
    }

    /// `m^{1/β}`, the exponential tilt applied to the subordinator.
    pub fn tilt(&self) -> f64 {
        self.m.powf(1.0 / self.beta)
    }

    pub fn dim(&self) -> f64 {
        self.d as f64
    }
}

/// Gamma function on `(GAMMA_MIN_ARG, GAMMA_MAX_ARG]`, excluding the poles.
pub fn gamma(x: f64) -> Result<f64> {
    if !(x > GAMMA_MIN_ARG && x <= GAMMA_MAX_ARG) || (x <= 0.0 && x == x.round()) {
        return Err(Error::Domain(format!("gamma({x})")));
    }
    Ok(statrs::function::gamma::gamma(x))
}

/// `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::Domain(format!("ln_gamma({x})")));
    }
    Ok(statrs::function::gamma::ln_gamma(x))
}

/// Surface area `ω_d = 2π^{d/2} / Γ(d/2)` of the unit sphere in `R^d`.
pub fn surface_area(d: usize) -> Result<f64> {
    if d < 2 {
        return Err(Error::InvalidParameter(format!(
            "dimension must be at least 2, got {d}"
        )));
    }
    let half = d as f64 / 2.0;
    Ok(2.0 * PI.powf(half) / gamma(half)?)
}

/// `ψ(θ) = ∫_0^∞ e^{-v} v^{p-1/2} (θ + v/2)^{p-1/2} dv`.
pub fn psi(theta: f64, p: f64) -> Result<f64> {
    if !(theta >= 0.0 && theta.is_finite()) {
        return Err(Error::Domain(format!(
            "psi requires theta >= 0, got {theta}"
        )));
    }
    if !(p > 0.5 && p.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "psi requires p > 1/2, got {p}"
        )));
    }
    let q = p - 0.5;
    let log_integrand = |v: f64| -v + q * (v.ln() + (theta + 0.5 * v).ln());
    let integrand = |v: f64| {
        if v <= 0.0 {
            0.0
        } else {
            log_integrand(v).exp()
        }
    };
    // Doubling panels [0,1], [1,2], [2,4], ... until the integrand at the
    // panel end is negligible against the running total.
    let opts = QuadOptions::rel(1e-13);
    let mut total = integrate(integrand, 0.0, 1.0, opts)?.value;
    let mut lo = 1.0;
    loop {
        let hi = 2.0 * lo;
        total += integrate(integrand, lo, hi, opts)?.value;
        let tail = (log_integrand(hi) + hi.ln()).exp();
        if tail < 1e-16 * total || hi > 1e6 {
            break;
        }
        lo = hi;
    }
    Ok(total)
}

/// `A(v, d) = Γ((d - v)/2) / (π^{d/2} 2^v |Γ(v/2)|)`.
pub fn riesz_constant(v: f64, d: usize) -> Result<f64> {
    let dd = d as f64;
    Ok(gamma((dd - v) / 2.0)? / (PI.powf(dd / 2.0) * 2f64.powf(v) * gamma(v / 2.0)?.abs()))
}

/// `R(α, d) = A(-α, d) / ψ(0)` with `p = (d + α)/2`.
pub fn relativistic_levy_constant(params: &ProcessParams) -> Result<f64> {
    Ok(riesz_constant(-params.alpha, params.d)? / psi(0.0, params.p)?)
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// Lévy density `ν̃(x) = A(-α, d) / |x|^{d+α}` of the isotropic stable process.
pub fn stable_levy_density(x: &[f64], params: &ProcessParams) -> Result<f64> {
    let r = norm(x);
    if r == 0.0 {
        return Err(Error::Singularity);
    }
    Ok(riesz_constant(-params.alpha, params.d)? / r.powf(params.dim() + params.alpha))
}

/// Lévy density `ν(x) = R(α,d) e^{-m^{1/α}|x|} ψ(m^{1/α}|x|) / |x|^{d+α}` of
/// the relativistic process. Reduces to [`stable_levy_density`] at `m = 0`.
pub fn levy_density(x: &[f64], params: &ProcessParams) -> Result<f64> {
    if params.m == 0.0 {
        return stable_levy_density(x, params);
    }
    let r = norm(x);
    if r == 0.0 {
        return Err(Error::Singularity);
    }
    let theta = params.m.powf(1.0 / params.alpha) * r;
    Ok(
        relativistic_levy_constant(params)? * (-theta).exp() * psi(theta, params.p)?
            / r.powf(params.dim() + params.alpha),
    )
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "stability index beta must lie in (0, 1), got {beta}"
        )))
    }
}

/// `ln A(φ)` for the Zolotarev/Kanter function. `eps = π - φ` is passed
/// separately so that `sin φ` keeps full relative precision near `π`.
#[inline]
pub(crate) fn zolotarev_ln_a(phi: f64, eps: f64, beta: f64) -> f64 {
    let sin_phi = if phi > FRAC_PI_2 {
        eps.sin()
    } else {
        phi.sin()
    };
    let ln_sin_phi = sin_phi.ln();
    let k = beta / (1.0 - beta);
    k * ((beta * phi).sin().ln() - ln_sin_phi) + ((1.0 - beta) * phi).sin().ln() - ln_sin_phi
}

/// Evaluator for the one-sided stable density `θ_β(1, ·)` at a configurable
/// relative tolerance.
#[derive(Debug, Clone, Copy)]
pub struct StableSubordinatorDensity {
    beta: f64,
    rel_tol: f64,
}

impl StableSubordinatorDensity {
    pub fn new(beta: f64) -> Result<Self> {
        Self::with_tolerance(beta, DEFAULT_DENSITY_RTOL)
    }

    pub fn with_tolerance(beta: f64, rel_tol: f64) -> Result<Self> {
        check_beta(beta)?;
        if !(rel_tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tolerance must be positive, got {rel_tol}"
            )));
        }
        Ok(Self { beta, rel_tol })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `θ_β(1, u)`.
    pub fn density(&self, u: f64) -> Result<f64> {
        if !(u > 0.0) {
            return Err(Error::Domain(format!(
                "subordinator density needs u > 0, got {u}"
            )));
        }
        if u.is_infinite() {
            return Ok(0.0);
        }
        let beta = self.beta;
        let k = beta / (1.0 - beta);
        let ln_s = -k * u.ln();
        Ok(k / (PI * u) * self.peak_integral(ln_s, |y| y * (-y).exp())?)
    }

    /// `P(T_β(1) ≤ u) = (1/π) ∫_0^π e^{-y(φ)} dφ`.
    pub fn cdf(&self, u: f64) -> Result<f64> {
        if u <= 0.0 {
            return Ok(0.0);
        }
        let ln_s = -self.beta / (1.0 - self.beta) * u.ln();
        Ok((self.peak_integral(ln_s, |y| (-y).exp())? / PI).min(1.0))
    }

    /// `∫_0^∞ e^{-λu} θ_β(1, u) du` by quadrature in `ln u`; equals
    /// `e^{-λ^β}` analytically, which makes it a self-check of [`Self::density`].
    pub fn laplace_transform(&self, lambda: f64) -> Result<f64> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Domain(format!(
                "Laplace variable must be finite and nonnegative, got {lambda}"
            )));
        }
        let lo = negligible_below(self.beta).ln();
        // For λ = 0 the tail mass beyond e^hi is about e^{-β hi} / Γ(1-β).
        let mut hi = 80.0_f64.max(25.0 / self.beta);
        if lambda > 0.0 {
            hi = hi.min((800.0 / lambda).ln());
        }
        let mut failure = None;
        let value = integrate_panels(
            |l| {
                let u = l.exp();
                match self.density(u) {
                    Ok(theta) => theta * u * (-lambda * u).exp(),
                    Err(e) => {
                        failure.get_or_insert(e);
                        0.0
                    }
                }
            },
            lo,
            hi,
            1.0,
            QuadOptions::rel(1e-10),
        )?;
        match failure {
            Some(e) => Err(e),
            None => Ok(value),
        }
    }

    /// `∫_0^π g(A(φ) s) dφ` with the range split at `π/2` (above which the
    /// complementary angle is the integration variable) and at `y = 1`.
    fn peak_integral(&self, ln_s: f64, g: impl Fn(f64) -> f64 + Copy) -> Result<f64> {
        let beta = self.beta;
        let y_at = move |phi: f64, eps: f64| -> f64 {
            let ln_y = zolotarev_ln_a(phi, eps, beta) + ln_s;
            if ln_y > 7.0 {
                // y > 1096: g(y) underflows for every integrand used here.
                return f64::INFINITY;
            }
            ln_y.exp()
        };
        let lower = move |phi: f64| {
            let y = y_at(phi, PI - phi);
            if y.is_infinite() {
                0.0
            } else {
                g(y)
            }
        };
        let upper = move |eps: f64| {
            let y = y_at(PI - eps, eps);
            if y.is_infinite() {
                0.0
            } else {
                g(y)
            }
        };
        let opts = QuadOptions::rel(self.rel_tol);
        let ln_a0 = (1.0 - beta).ln() + beta / (1.0 - beta) * beta.ln();
        let ln_a_mid = zolotarev_ln_a(FRAC_PI_2, FRAC_PI_2, beta);
        let mut total = 0.0;
        if ln_a0 + ln_s >= 0.0 {
            // y ≥ 1 everywhere: integrand is monotone decreasing.
            total += integrate(lower, 0.0, FRAC_PI_2, opts)?.value;
            total += integrate(upper, 0.0, FRAC_PI_2, opts)?.value;
        } else if ln_a_mid + ln_s >= 0.0 {
            let (mut lo, mut hi) = (0.0, FRAC_PI_2);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if zolotarev_ln_a(mid, PI - mid, beta) + ln_s < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= 1e-15 * hi {
                    break;
                }
            }
            let split = 0.5 * (lo + hi);
            total += integrate(lower, 0.0, split, opts)?.value;
            total += integrate(lower, split, FRAC_PI_2, opts)?.value;
            total += integrate(upper, 0.0, FRAC_PI_2, opts)?.value;
        } else {
            // Peak lies in (π/2, π): bisect geometrically in ε = π - φ.
            let (mut lo, mut hi) = (1e-300_f64.ln(), FRAC_PI_2.ln());
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let eps = mid.exp();
                if zolotarev_ln_a(PI - eps, eps, beta) + ln_s < 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
                if hi - lo <= 1e-14 {
                    break;
                }
            }
            let split = (0.5 * (lo + hi)).exp();
            total += integrate(lower, 0.0, FRAC_PI_2, opts)?.value;
            total += integrate(upper, split, FRAC_PI_2, opts)?.value;
            total += integrate(upper, 0.0, split, opts)?.value;
        }
        Ok(total)
    }
}

/// Point below which `θ_β(1, z)` is smaller than `e^{-200}`, from the
/// small-`z` behaviour `exp(-(1-β) β^{β/(1-β)} z^{-β/(1-β)})`.
pub fn negligible_below(beta: f64) -> f64 {
    let k = beta / (1.0 - beta);
    ((1.0 - beta) * beta.powf(k) / 200.0).powf(1.0 / k)
}

/// `θ_β(1, u)`, the density of the strictly β-stable subordinator at time 1.
pub fn stable_subordinator_density(u: f64, beta: f64) -> Result<f64> {
    StableSubordinatorDensity::new(beta)?.density(u)
}

/// `θ_β(t, u) = t^{-1/β} θ_β(1, u t^{-1/β})`.
pub fn subordinator_density_at(t: f64, u: f64, beta: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("time must be positive, got {t}")));
    }
    let scale = t.powf(-1.0 / beta);
    Ok(scale * stable_subordinator_density(u * scale, beta)?)
}

/// `θ_β(t, u, m) = e^{-m^{1/β} u + m t} θ_β(t, u)`, the relativistic
/// (exponentially tilted) subordinator density.
pub fn tempered_density(t: f64, u: f64, params: &ProcessParams) -> Result<f64> {
    let base = subordinator_density_at(t, u, params.beta)?;
    if params.m == 0.0 {
        return Ok(base);
    }
    Ok(base * (params.m * t - params.tilt() * u).exp())
}
