//! Domains with `R`-smooth boundary (ball, annulus) and the half-space
//! `H = {x_1 > 0}`, with the closed-form boundary-layer geometry used by the
//! stratified trace estimator.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::specfun::surface_area;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// Open ball; an infinite radius models all of `R^d`.
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    Annulus {
        center: Vec<f64>,
        r_in: f64,
        r_out: f64,
    },
    HalfSpace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub shape: Shape,
    pub d: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn check_dim(d: usize) -> Result<()> {
    if d >= 2 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "dimension must be at least 2, got {d}"
        )))
    }
}

impl Domain {
    pub fn ball(d: usize, radius: f64) -> Result<Self> {
        Self::ball_at(vec![0.0; d], radius)
    }

    pub fn ball_at(center: Vec<f64>, radius: f64) -> Result<Self> {
        check_dim(center.len())?;
        if !(radius > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "ball radius must be positive, got {radius}"
            )));
        }
        Ok(Self {
            d: center.len(),
            shape: Shape::Ball { center, radius },
        })
    }

    /// All of `R^d`, as a ball of infinite radius.
    pub fn whole_space(d: usize) -> Result<Self> {
        Self::ball(d, f64::INFINITY)
    }

    pub fn annulus(d: usize, r_in: f64, r_out: f64) -> Result<Self> {
        check_dim(d)?;
        if !(r_in > 0.0 && r_out > r_in && r_out.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "annulus needs 0 < r_in < r_out < inf, got ({r_in}, {r_out})"
            )));
        }
        Ok(Self {
            d,
            shape: Shape::Annulus {
                center: vec![0.0; d],
                r_in,
                r_out,
            },
        })
    }

    pub fn half_space(d: usize) -> Result<Self> {
        check_dim(d)?;
        Ok(Self {
            d,
            shape: Shape::HalfSpace,
        })
    }

    /// Parses `ball:R0=1`, `annulus:rin=1,rout=3`, `halfspace` or `space`
    /// (case-insensitive). Shapes are centred at the origin.
    pub fn parse(spec: &str, d: usize) -> Result<Self> {
        let spec = spec.trim().to_ascii_lowercase();
        let (kind, args) = match spec.split_once(':') {
            Some((k, a)) => (k.trim().to_string(), a.to_string()),
            None => (spec.clone(), String::new()),
        };
        let mut kv = Vec::new();
        for part in args.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| {
                Error::InvalidParameter(format!("expected key=value in domain spec, got '{part}'"))
            })?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("bad number '{v}' in domain spec")))?;
            kv.push((k.trim().to_string(), v));
        }
        let get = |key: &str| {
            kv.iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| {
                    Error::InvalidParameter(format!("domain spec '{spec}' lacks '{key}'"))
                })
        };
        let allow = |keys: &[&str]| match kv.iter().find(|(k, _)| !keys.contains(&k.as_str())) {
            Some((k, _)) => Err(Error::InvalidParameter(format!(
                "unknown key '{k}' in domain spec"
            ))),
            None => Ok(()),
        };
        match kind.as_str() {
            "ball" => {
                allow(&["r0"])?;
                Self::ball(d, get("r0")?)
            }
            "annulus" => {
                allow(&["rin", "rout"])?;
                Self::annulus(d, get("rin")?, get("rout")?)
            }
            "halfspace" => {
                allow(&[])?;
                Self::half_space(d)
            }
            "space" => {
                allow(&[])?;
                Self::whole_space(d)
            }
            other => Err(Error::InvalidParameter(format!(
                "unknown domain kind '{other}'"
            ))),
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn is_bounded(&self) -> bool {
        match &self.shape {
            Shape::Ball { radius, .. } => radius.is_finite(),
            Shape::Annulus { .. } => true,
            Shape::HalfSpace => false,
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match &self.shape {
            Shape::Ball { radius, .. } if radius.is_infinite() => true,
            Shape::Ball { center, radius } => dist(x, center) < *radius,
            Shape::Annulus {
                center,
                r_in,
                r_out,
            } => {
                let r = dist(x, center);
                r > *r_in && r < *r_out
            }
            Shape::HalfSpace => x[0] > 0.0,
        }
    }

    /// Distance to the boundary for `x` in the domain, zero outside.
    pub fn delta(&self, x: &[f64]) -> f64 {
        match &self.shape {
            Shape::Ball { center, radius } => (radius - dist(x, center)).max(0.0),
            Shape::Annulus {
                center,
                r_in,
                r_out,
            } => {
                let r = dist(x, center);
                (r - r_in).min(r_out - r).max(0.0)
            }
            Shape::HalfSpace => x[0].max(0.0),
        }
    }

    fn bounded_only(&self, what: &str) -> Result<()> {
        if self.is_bounded() {
            Ok(())
        } else {
            Err(Error::Precondition(format!(
                "{what} is only defined for bounded domains"
            )))
        }
    }

    /// `|D|`.
    pub fn volume(&self) -> Result<f64> {
        self.bounded_only("volume")?;
        let w = surface_area(self.d)? / self.d as f64;
        Ok(match &self.shape {
            Shape::Ball { radius, .. } => w * radius.powi(self.d as i32),
            Shape::Annulus { r_in, r_out, .. } => {
                w * (r_out.powi(self.d as i32) - r_in.powi(self.d as i32))
            }
            Shape::HalfSpace => unreachable!(),
        })
    }

    /// `|∂D|`.
    pub fn surface(&self) -> Result<f64> {
        self.bounded_only("surface area")?;
        let w = surface_area(self.d)?;
        let k = self.d as i32 - 1;
        Ok(match &self.shape {
            Shape::Ball { radius, .. } => w * radius.powi(k),
            Shape::Annulus { r_in, r_out, .. } => w * (r_out.powi(k) + r_in.powi(k)),
            Shape::HalfSpace => unreachable!(),
        })
    }

    /// Radius `R` of the inner and outer tangent balls. For the annulus this
    /// is `min(r_in, (r_out - r_in)/2)`.
    pub fn smoothness_radius(&self) -> Result<f64> {
        self.bounded_only("smoothness radius")?;
        Ok(match &self.shape {
            Shape::Ball { radius, .. } => *radius,
            Shape::Annulus { r_in, r_out, .. } => r_in.min(0.5 * (r_out - r_in)),
            Shape::HalfSpace => unreachable!(),
        })
    }

    /// `sup_x δ_D(x)`.
    pub fn max_depth(&self) -> f64 {
        match &self.shape {
            Shape::Ball { radius, .. } => *radius,
            Shape::Annulus { r_in, r_out, .. } => 0.5 * (r_out - r_in),
            Shape::HalfSpace => f64::INFINITY,
        }
    }

    /// `|∂D_q|` for `0 ≤ q ≤ R`.
    pub fn layer_area(&self, q: f64) -> Result<f64> {
        let r = self.smoothness_radius()?;
        if !(0.0..=r).contains(&q) {
            return Err(Error::Domain(format!("layer depth {q} outside [0, {r}]")));
        }
        Ok(self.level_area(q))
    }

    /// `|{δ_D = q}|` for any `0 ≤ q ≤ max_depth` (bounded shapes).
    pub(crate) fn level_area(&self, q: f64) -> f64 {
        let w = surface_area(self.d).expect("dimension checked at construction");
        let k = self.d as i32 - 1;
        match &self.shape {
            Shape::Ball { radius, .. } => w * (radius - q).powi(k),
            Shape::Annulus { r_in, r_out, .. } => w * ((r_out - q).powi(k) + (r_in + q).powi(k)),
            Shape::HalfSpace => f64::NAN,
        }
    }

    /// Volume of `{q_lo ≤ δ_D < q_hi}`, with `q_hi` clipped to the maximal depth.
    pub fn layer_volume(&self, q_lo: f64, q_hi: f64) -> Result<f64> {
        self.bounded_only("layer volume")?;
        let (lo, hi) = self.layer_bounds(q_lo, q_hi)?;
        let w = surface_area(self.d)? / self.d as f64;
        let p = |x: f64| x.powi(self.d as i32);
        Ok(match &self.shape {
            Shape::Ball { radius, .. } => w * (p(radius - lo) - p(radius - hi)),
            Shape::Annulus { r_in, r_out, .. } => {
                w * (p(r_out - lo) - p(r_out - hi) + p(r_in + hi) - p(r_in + lo))
            }
            Shape::HalfSpace => unreachable!(),
        })
    }

    fn layer_bounds(&self, q_lo: f64, q_hi: f64) -> Result<(f64, f64)> {
        let hi = q_hi.min(self.max_depth());
        if !(q_lo >= 0.0 && hi > q_lo) {
            return Err(Error::Domain(format!(
                "empty layer [{q_lo}, {q_hi}) for maximal depth {}",
                self.max_depth()
            )));
        }
        Ok((q_lo, hi))
    }

    fn center(&self) -> &[f64] {
        match &self.shape {
            Shape::Ball { center, .. } | Shape::Annulus { center, .. } => center,
            Shape::HalfSpace => &[],
        }
    }

    fn point_at_radius<R: Rng + ?Sized>(&self, r: f64, rng: &mut R) -> Vec<f64> {
        let mut v: Vec<f64> = (0..self.d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        for (x, c) in v.iter_mut().zip(self.center()) {
            *x = c + *x * r / n;
        }
        v
    }

    /// Radius with density `∝ r^{d-1}` on `(a, b]`.
    fn shell_radius<R: Rng + ?Sized>(&self, a: f64, b: f64, rng: &mut R) -> f64 {
        let d = self.d as i32;
        let u = 1.0 - rng.random::<f64>();
        (a.powi(d) + u * (b.powi(d) - a.powi(d))).powf(1.0 / self.d as f64)
    }

    /// Uniform point of `D`.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        self.sample_layer(0.0, self.max_depth(), rng)
    }

    /// Uniform point of `{q_lo ≤ δ_D < q_hi}`.
    pub fn sample_layer<R: Rng + ?Sized>(
        &self,
        q_lo: f64,
        q_hi: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        self.bounded_only("sampling")?;
        let (lo, hi) = self.layer_bounds(q_lo, q_hi)?;
        let full = hi >= self.max_depth();
        loop {
            let x = match &self.shape {
                Shape::Ball { radius, .. } => {
                    let r = self.shell_radius(radius - hi, radius - lo, rng);
                    self.point_at_radius(r, rng)
                }
                Shape::Annulus { r_in, r_out, .. } => {
                    let d = self.d as i32;
                    let outer = (r_out - lo).powi(d) - (r_out - hi).powi(d);
                    let inner = (r_in + hi).powi(d) - (r_in + lo).powi(d);
                    let r = if rng.random::<f64>() * (outer + inner) < outer {
                        self.shell_radius(r_out - hi, r_out - lo, rng)
                    } else {
                        self.shell_radius(r_in + lo, r_in + hi, rng)
                    };
                    self.point_at_radius(r, rng)
                }
                Shape::HalfSpace => unreachable!(),
            };
            let q = self.delta(&x);
            // Rounding can put a point a hair outside the layer; redraw then.
            if self.contains(&x) && q >= lo && (q < hi || full) {
                return Ok(x);
            }
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.shape {
            Shape::Ball { radius, .. } if radius.is_infinite() => write!(f, "space"),
            Shape::Ball { radius, .. } => write!(f, "ball:R0={radius}"),
            Shape::Annulus { r_in, r_out, .. } => write!(f, "annulus:rin={r_in},rout={r_out}"),
            Shape::HalfSpace => write!(f, "halfspace"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::RngStream;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn shapes(d: usize) -> Vec<Domain> {
        vec![
            Domain::ball(d, 1.0).unwrap(),
            Domain::ball(d, 2.5).unwrap(),
            Domain::annulus(d, 1.0, 3.0).unwrap(),
            Domain::annulus(d, 2.0, 3.0).unwrap(),
        ]
    }

    #[test]
    fn parsing_is_case_insensitive() {
        assert_eq!(
            Domain::parse("Ball:R0=1", 2).unwrap(),
            Domain::ball(2, 1.0).unwrap()
        );
        assert_eq!(
            Domain::parse("ANNULUS:rin=1, rout=3", 3).unwrap(),
            Domain::annulus(3, 1.0, 3.0).unwrap()
        );
        assert_eq!(
            Domain::parse("HalfSpace", 2).unwrap().shape,
            Shape::HalfSpace
        );
        assert!(Domain::parse("cube:a=1", 2).is_err());
        assert!(Domain::parse("ball:r=1", 2).is_err());
        assert!(Domain::parse("annulus:rin=3,rout=1", 2).is_err());
        let a = Domain::annulus(2, 1.0, 3.0).unwrap();
        assert_eq!(Domain::parse(&a.to_string(), 2).unwrap(), a);
    }

    #[test]
    fn delta_examples() {
        assert_eq!(Domain::ball(2, 1.0).unwrap().delta(&[0.0, 0.0]), 1.0);
        assert!(
            (Domain::annulus(3, 1.0, 3.0)
                .unwrap()
                .delta(&[0.0, 2.0, 0.0])
                - 1.0)
                .abs()
                < 1e-15
        );
        assert_eq!(Domain::half_space(2).unwrap().delta(&[0.7, -4.0]), 0.7);
        assert_eq!(Domain::ball(2, 1.0).unwrap().delta(&[2.0, 0.0]), 0.0);
        assert!(Domain::whole_space(2).unwrap().contains(&[1e300, 0.0]));
    }

    #[test]
    fn closed_forms() {
        let b = Domain::ball(2, 1.0).unwrap();
        assert!((b.volume().unwrap() - PI).abs() < 1e-14);
        assert!((b.layer_area(0.0).unwrap() - 2.0 * PI).abs() < 1e-14);
        assert!((b.layer_area(0.5).unwrap() - PI).abs() < 1e-14);
        assert!(b.layer_area(1.5).is_err());
        let a = Domain::annulus(2, 1.0, 3.0).unwrap();
        assert!((a.volume().unwrap() - 8.0 * PI).abs() < 1e-13);
        assert!((a.surface().unwrap() - 8.0 * PI).abs() < 1e-13);
        assert_eq!(a.smoothness_radius().unwrap(), 1.0);
        assert!(Domain::half_space(2).unwrap().volume().is_err());
        // Layer volumes partition the domain.
        let total = a.layer_volume(0.0, 0.3).unwrap() + a.layer_volume(0.3, 5.0).unwrap();
        assert!((total - a.volume().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn layer_bounds_on_closed_forms() {
        for d in 2..=4 {
            let two = 2f64.powi(d as i32);
            for dom in shapes(d) {
                let (vol, area, r) = (
                    dom.volume().unwrap(),
                    dom.surface().unwrap(),
                    dom.smoothness_radius().unwrap(),
                );
                assert!(area <= two * vol / r);
                for i in 1..=40 {
                    let q = r * i as f64 / 40.0;
                    let aq = dom.layer_area(q).unwrap();
                    // (i) holds on (0, R/2]; beyond that the inner layer of a ball shrinks to a point.
                    if q <= 0.5 * r {
                        assert!(
                            2.0 * area / two <= aq && aq <= 0.5 * two * area,
                            "{dom} q={q}"
                        );
                    }
                    assert!((aq - area).abs() <= two * d as f64 * q * area / r);
                    assert!((aq - area).abs() <= two * two * d as f64 * q * vol / (r * r));
                    if q < r {
                        let s = (r - q) / r;
                        let k = d as i32 - 1;
                        assert!(
                            s.powi(k) * area <= aq * (1.0 + 1e-12)
                                && aq <= area / s.powi(k) * (1.0 + 1e-12)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_sampling_volume_ratio() {
        for d in [2, 3] {
            let b = Domain::ball(d, 1.0).unwrap();
            let mut rng = RngStream::new(2, d as u64).rng();
            let n = 100_000;
            let mut hits = 0usize;
            for _ in 0..n {
                let x = b.sample_uniform(&mut rng).unwrap();
                assert!(b.contains(&x));
                hits += (b.delta(&x) >= 0.5) as usize;
            }
            let p = 0.5f64.powi(d as i32);
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((hits as f64 / n as f64 - p).abs() < 4.0 * se);
        }
    }

    #[test]
    fn layer_sampling_respects_bounds_and_weights() {
        let a = Domain::annulus(2, 1.0, 3.0).unwrap();
        let mut rng = RngStream::new(6, 0).rng();
        let n = 50_000;
        let mut outer = 0usize;
        for _ in 0..n {
            let x = a.sample_layer(0.2, 0.5, &mut rng).unwrap();
            let q = a.delta(&x);
            assert!((0.2..0.5).contains(&q));
            outer += (norm(&x) > 2.0) as usize;
        }
        let p = (2.8f64.powi(2) - 2.5f64.powi(2))
            / (2.8f64.powi(2) - 2.5f64.powi(2) + 1.5f64.powi(2) - 1.2f64.powi(2));
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((outer as f64 / n as f64 - p).abs() < 4.0 * se);
        assert!(a.sample_layer(1.0, 1.5, &mut rng).is_err());
        assert!(Domain::half_space(2)
            .unwrap()
            .sample_uniform(&mut rng)
            .is_err());
    }

    proptest! {
        #[test]
        fn delta_is_one_lipschitz(x in prop::collection::vec(-4.0f64..4.0, 3), y in prop::collection::vec(-4.0f64..4.0, 3)) {
            for dom in [Domain::ball(3, 2.0).unwrap(), Domain::annulus(3, 1.0, 3.5).unwrap(), Domain::half_space(3).unwrap()] {
                // Along the segment, consecutive points differ by at most their distance.
                let n = 20;
                let pts: Vec<Vec<f64>> = (0..=n).map(|i| {
                    let s = i as f64 / n as f64;
                    x.iter().zip(&y).map(|(a, b)| a + s * (b - a)).collect()
                }).collect();
                for w in pts.windows(2) {
                    prop_assert!((dom.delta(&w[0]) - dom.delta(&w[1])).abs() <= dist(&w[0], &w[1]) + 1e-12);
                }
            }
        }

        #[test]
        fn layer_sandwich_random_q(frac in 0.0f64..0.999) {
            for dom in shapes(3) {
                let r = dom.smoothness_radius().unwrap();
                let q = frac * r;
                let area = dom.surface().unwrap();
                let s = (r - q) / r;
                let aq = dom.layer_area(q).unwrap();
                prop_assert!(s * s * area <= aq * (1.0 + 1e-12));
                prop_assert!(aq <= area / (s * s) * (1.0 + 1e-12));
            }
        }
    }
}
