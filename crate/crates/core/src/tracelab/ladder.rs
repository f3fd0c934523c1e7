//! Discrete exit monitoring on a step-halving ladder.
//!
//! One path is simulated at the finest step; level `ℓ` observes it every
//! `2^{L-1-ℓ}` steps, so all levels share the same randomness and a coarser
//! level can only detect exits later than a finer one. Per-path kernel
//! values from the two finest levels are combined by Richardson
//! extrapolation; the same combination one level coarser gives a bias check.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelCache, RadialKernelTable};
use crate::sampler::IncrementSampler;
use crate::stats::RunningStats;

/// Step-halving ladder: level `ℓ` uses `base_steps · 2^ℓ` steps over `[0, t]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ladder {
    pub base_steps: usize,
    pub levels: usize,
    /// Assumed convergence order `p` of the monitoring bias, `O(dt^p)`.
    pub order: f64,
}

impl Default for Ladder {
    fn default() -> Self {
        Self {
            base_steps: 64,
            levels: 3,
            order: 1.0,
        }
    }
}

impl Ladder {
    pub fn new(base_steps: usize, levels: usize, order: f64) -> Result<Self> {
        if base_steps == 0 || levels == 0 || levels > 12 {
            return Err(Error::InvalidParameter(format!(
                "ladder needs base_steps >= 1 and 1..=12 levels, got ({base_steps}, {levels})"
            )));
        }
        if !(order > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "Richardson order must be positive, got {order}"
            )));
        }
        Ok(Self {
            base_steps,
            levels,
            order,
        })
    }

    /// A single level with `steps` steps: no extrapolation.
    pub fn single(steps: usize) -> Self {
        Self {
            base_steps: steps,
            levels: 1,
            order: 1.0,
        }
    }

    pub fn fine_steps(&self) -> usize {
        self.base_steps << (self.levels - 1)
    }

    pub fn steps(&self, level: usize) -> usize {
        self.base_steps << level
    }

    fn stride(&self, level: usize) -> usize {
        1 << (self.levels - 1 - level)
    }

    /// Finest step for horizon `t`.
    pub fn fine_dt(&self, t: f64) -> f64 {
        t / self.fine_steps() as f64
    }

    /// `(2^p v_fine - v_coarse) / (2^p - 1)` over the last two entries.
    fn extrapolate(&self, fine: f64, coarse: f64) -> f64 {
        let w = self.order.exp2();
        (w * fine - coarse) / (w - 1.0)
    }
}

/// `p(s, ·)` at one remaining time, in scaled form.
#[derive(Debug, Clone)]
pub struct KernelPoint {
    prefactor: f64,
    inv_scale: f64,
    table: Arc<RadialKernelTable>,
}

impl KernelPoint {
    pub fn new(cache: &KernelCache, s: f64) -> Result<Self> {
        let p = cache.params();
        Ok(Self {
            prefactor: (p.m * s).exp() * s.powf(-p.dim() / p.alpha),
            inv_scale: s.powf(-1.0 / p.alpha),
            table: cache.for_time(s)?,
        })
    }

    #[inline]
    pub fn eval(&self, r: f64) -> f64 {
        self.prefactor * self.table.eval_scaled_fast(r * self.inv_scale)
    }
}

/// Kernels `p(t - τ_k, ·)` at the midpoint exit times `τ_k = (k - 1/2) dt_ℓ`
/// for every level and step of the ladder.
#[derive(Debug, Clone)]
pub struct LadderKernels {
    pub t: f64,
    pub ladder: Ladder,
    points: Vec<Vec<KernelPoint>>,
}

impl LadderKernels {
    pub fn new(cache: &KernelCache, t: f64, ladder: Ladder) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Domain(format!(
                "heat time must be positive, got {t}"
            )));
        }
        let points = (0..ladder.levels)
            .map(|level| {
                let n = ladder.steps(level);
                let h = t / n as f64;
                (1..=n)
                    .map(|k| KernelPoint::new(cache, t - (k as f64 - 0.5) * h))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { t, ladder, points })
    }

    /// `p(t - τ, r)` for an exit first seen at step `k ≥ 1` of `level`.
    #[inline]
    pub fn eval(&self, level: usize, k: usize, r: f64) -> f64 {
        self.points[level][k - 1].eval(r)
    }
}

/// Membership test for one monitored region.
pub type Region<'a> = &'a dyn Fn(&[f64]) -> bool;

/// Simulates one path of `ladder.fine_steps()` steps from `start` and calls
/// `on_exit(region, level, k, x)` the first time each level sees the path
/// outside each region. Stops early once every (region, level) pair exited.
pub fn walk_exits<R, F>(
    sampler: &IncrementSampler,
    ladder: &Ladder,
    start: &[f64],
    regions: &[Region<'_>],
    rng: &mut R,
    mut on_exit: F,
) where
    R: Rng + ?Sized,
    F: FnMut(usize, usize, usize, &[f64]),
{
    let n_fine = ladder.fine_steps();
    let mut x = start.to_vec();
    let mut step = vec![0.0; start.len()];
    // Per region, the coarsest level that has not exited yet; levels exit
    // from fine to coarse, so pending levels are always `0..pending[i]`.
    let mut pending = vec![ladder.levels; regions.len()];
    let mut remaining = regions.len() * ladder.levels;
    for j in 1..=n_fine {
        sampler.increment_into(rng, &mut step);
        for (xi, dx) in x.iter_mut().zip(&step) {
            *xi += dx;
        }
        for (i, inside) in regions.iter().enumerate() {
            if pending[i] == 0 || inside(&x) {
                continue;
            }
            // Levels that observe step j and have not yet exited.
            let mut level = pending[i];
            while level > 0 && j % ladder.stride(level - 1) == 0 {
                level -= 1;
                on_exit(i, level, j / ladder.stride(level), &x);
                remaining -= 1;
            }
            pending[i] = level;
        }
        if remaining == 0 {
            break;
        }
    }
}

/// Accumulates per-sample level values and their Richardson combinations.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LadderStats {
    pub levels: Vec<RunningStats>,
    /// Extrapolated from the two finest levels.
    pub extrap: RunningStats,
    /// Extrapolated from the next pair down (when there are three levels).
    pub extrap_coarse: RunningStats,
    pub diff: RunningStats,
}

impl LadderStats {
    pub fn new(levels: usize) -> Self {
        Self {
            levels: vec![RunningStats::new(); levels],
            ..Default::default()
        }
    }

    pub fn push(&mut self, ladder: &Ladder, values: &[f64]) {
        for (s, &v) in self.levels.iter_mut().zip(values) {
            s.push(v);
        }
        let l = values.len();
        let e = if l >= 2 {
            ladder.extrapolate(values[l - 1], values[l - 2])
        } else {
            values[0]
        };
        self.extrap.push(e);
        if l >= 3 {
            let c = ladder.extrapolate(values[l - 2], values[l - 3]);
            self.extrap_coarse.push(c);
            self.diff.push(e - c);
        }
    }

    pub fn merge(&mut self, other: &Self) {
        if self.levels.is_empty() {
            *self = other.clone();
            return;
        }
        for (a, b) in self.levels.iter_mut().zip(&other.levels) {
            a.merge(b);
        }
        self.extrap.merge(&other.extrap);
        self.extrap_coarse.merge(&other.extrap_coarse);
        self.diff.merge(&other.diff);
    }

    pub fn count(&self) -> u64 {
        self.extrap.count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Domain;
    use crate::sampler::RngStream;
    use crate::specfun::ProcessParams;

    #[test]
    fn coarse_levels_see_subsampled_path() {
        let p = ProcessParams::new(1.0, 0.0, 2).unwrap();
        let ladder = Ladder::new(4, 3, 1.0).unwrap();
        let sampler = IncrementSampler::new(1.0 / 16.0, &p).unwrap();
        let ball = Domain::ball(2, 0.3).unwrap();
        let inside = |x: &[f64]| ball.contains(x);
        for seed in 0..200 {
            let mut exits = [None; 3];
            walk_exits(
                &sampler,
                &ladder,
                &[0.0, 0.0],
                &[&inside],
                &mut RngStream::new(seed, 0).rng(),
                |_, l, k, _| {
                    exits[l] = Some(k);
                },
            );
            // Replay the same path and check each level's first exit directly.
            let path = crate::sampler::simulate_path(
                &[0.0, 0.0],
                1.0,
                1.0 / 16.0,
                &p,
                &mut RngStream::new(seed, 0).rng(),
            )
            .unwrap();
            for (l, got) in exits.iter().enumerate() {
                let stride = 1 << (2 - l);
                let want =
                    (1..=ladder.steps(l)).find(|&k| !ball.contains(&path.positions[k * stride]));
                assert_eq!(*got, want, "seed {seed} level {l}");
            }
        }
    }

    #[test]
    fn exit_time_is_monotone_in_step() {
        // Pathwise: a finer grid never reports a later exit.
        let p = ProcessParams::new(1.0, 1.0, 2).unwrap();
        let ladder = Ladder::new(8, 4, 1.0).unwrap();
        let sampler = IncrementSampler::new(1.0 / 64.0, &p).unwrap();
        let ball = Domain::ball(2, 0.5).unwrap();
        let inside = |x: &[f64]| ball.contains(x);
        let mut means = [RunningStats::new(); 4];
        let mut rng = RngStream::new(77, 0).rng();
        for _ in 0..5000 {
            let mut times = [1.0; 4];
            walk_exits(
                &sampler,
                &ladder,
                &[0.1, 0.0],
                &[&inside],
                &mut rng,
                |_, l, k, _| {
                    times[l] = k as f64 / ladder.steps(l) as f64;
                },
            );
            assert!(times.windows(2).all(|w| w[1] <= w[0]));
            for (m, t) in means.iter_mut().zip(times) {
                m.push(t);
            }
        }
        assert!(means.windows(2).all(|w| w[1].mean() <= w[0].mean()));
    }

    #[test]
    fn richardson_is_exact_for_linear_bias() {
        let ladder = Ladder::new(4, 3, 1.0).unwrap();
        let mut s = LadderStats::new(3);
        // v(h) = 2 + 3h with h = 1, 1/2, 1/4.
        s.push(&ladder, &[5.0, 3.5, 2.75]);
        assert!((s.extrap.mean() - 2.0).abs() < 1e-14);
        assert!(s.diff.mean().abs() < 1e-14);
    }
}
