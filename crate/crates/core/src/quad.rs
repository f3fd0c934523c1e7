//! Globally adaptive Gauss–Kronrod (G10/K21) quadrature.
//!
//! Intervals are bisected in order of decreasing error estimate until the
//! total estimate falls below `max(abs_tol, rel_tol * |result|)`. Error
//! estimates follow the QUADPACK `qk21` heuristic.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689_003,
    0.973_906_528_517_171_720_077_964_012_084_452,
    0.930_157_491_355_708_226_001_207_180_059_508,
    0.865_063_366_688_984_510_732_096_688_423_493,
    0.780_817_726_586_416_897_063_717_578_345_042,
    0.679_409_568_299_024_406_234_327_365_114_874,
    0.562_757_134_668_604_683_339_000_099_272_694,
    0.433_395_394_129_247_190_799_265_943_165_784,
    0.294_392_862_701_460_198_131_126_603_103_866,
    0.148_874_338_981_631_210_884_826_001_129_720,
    0.0,
];

const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062_192,
    0.032_558_162_307_964_727_478_818_972_459_390,
    0.054_755_896_574_351_996_031_381_300_244_580,
    0.075_039_674_810_919_952_767_043_140_916_190,
    0.093_125_454_583_697_605_535_065_465_083_366,
    0.109_387_158_802_297_641_899_210_590_325_805,
    0.123_491_976_262_065_851_077_208_322_252_181,
    0.134_709_217_311_473_325_928_054_001_771_707,
    0.142_775_938_577_060_080_797_094_273_138_717,
    0.147_739_104_901_338_491_374_841_515_972_068,
    0.149_445_554_002_916_905_664_936_468_389_821,
];

// Gauss weights for the odd-indexed Kronrod nodes.
const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893_332,
    0.149_451_349_150_580_593_145_776_339_657_697,
    0.219_086_362_515_982_043_995_534_934_228_163,
    0.269_266_719_309_996_355_091_226_921_569_469,
    0.295_524_224_714_752_870_173_892_994_651_338,
];

/// Tolerances and limits for [`integrate`].
#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        Self {
            abs_tol: 0.0,
            rel_tol: 1e-10,
            max_intervals: 2000,
        }
    }
}

impl QuadOptions {
    pub fn rel(rel_tol: f64) -> Self {
        Self {
            rel_tol,
            ..Self::default()
        }
    }

    pub fn with_abs(mut self, abs_tol: f64) -> Self {
        self.abs_tol = abs_tol;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadResult {
    pub value: f64,
    pub abs_err: f64,
    pub evals: usize,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    err: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}

impl Eq for Segment {}

impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.err.total_cmp(&other.err)
    }
}

/// One 21-point Kronrod panel on `[a, b]`: returns (value, error estimate).
pub fn gk21<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut res_k = fc * WGK[10];
    let mut res_g = 0.0;
    let mut res_abs = res_k.abs();
    let mut fv1 = [0.0; 10];
    let mut fv2 = [0.0; 10];
    for j in 0..10 {
        let dx = half * XGK[j];
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        fv1[j] = f1;
        fv2[j] = f2;
        res_k += WGK[j] * (f1 + f2);
        res_abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            res_g += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = 0.5 * res_k;
    let mut res_asc = WGK[10] * (fc - mean).abs();
    for j in 0..10 {
        res_asc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let value = res_k * half;
    res_abs *= half.abs();
    res_asc *= half.abs();
    let mut err = ((res_k - res_g) * half).abs();
    if res_asc != 0.0 && err != 0.0 {
        err = res_asc * (200.0 * err / res_asc).powf(1.5).min(1.0);
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        err = err.max(50.0 * f64::EPSILON * res_abs);
    }
    (value, err)
}

/// Integrates `f` over the finite interval `[a, b]`.
pub fn integrate<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    opts: QuadOptions,
) -> Result<QuadResult> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "integration bounds must be finite, got [{a}, {b}]"
        )));
    }
    if a == b {
        return Ok(QuadResult {
            value: 0.0,
            abs_err: 0.0,
            evals: 0,
        });
    }
    let (value, err) = gk21(&mut f, a, b);
    let mut evals = 21;
    let mut heap = BinaryHeap::new();
    heap.push(Segment { a, b, value, err });
    let mut total = value;
    let mut total_err = err;
    loop {
        let tol = opts.abs_tol.max(opts.rel_tol * total.abs());
        if total_err <= tol {
            break;
        }
        if heap.len() >= opts.max_intervals {
            if !total.is_finite() || total_err > 10.0 * tol.max(f64::MIN_POSITIVE) {
                return Err(Error::Quadrature {
                    partial: total,
                    residual: total_err,
                });
            }
            break;
        }
        let seg = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (seg.a + seg.b);
        if mid <= seg.a || mid >= seg.b {
            // Interval cannot be split further in floating point.
            heap.push(Segment { err: 0.0, ..seg });
            total_err -= seg.err;
            continue;
        }
        let (v1, e1) = gk21(&mut f, seg.a, mid);
        let (v2, e2) = gk21(&mut f, mid, seg.b);
        evals += 42;
        total += v1 + v2 - seg.value;
        total_err += e1 + e2 - seg.err;
        heap.push(Segment {
            a: seg.a,
            b: mid,
            value: v1,
            err: e1,
        });
        heap.push(Segment {
            a: mid,
            b: seg.b,
            value: v2,
            err: e2,
        });
    }
    // Re-sum to shed accumulated rounding from the running updates.
    let (value, abs_err) = heap
        .iter()
        .fold((0.0, 0.0), |(v, e), s| (v + s.value, e + s.err));
    if !value.is_finite() {
        return Err(Error::Quadrature {
            partial: value,
            residual: abs_err,
        });
    }
    Ok(QuadResult {
        value,
        abs_err,
        evals,
    })
}

/// Integrates over `[lo, hi]` in panels of at most `width`, so that narrow
/// peaks cannot hide between the nodes of a single coarse rule.
pub fn integrate_panels<F: FnMut(f64) -> f64>(
    mut f: F,
    lo: f64,
    hi: f64,
    width: f64,
    opts: QuadOptions,
) -> Result<f64> {
    let n = ((hi - lo) / width).ceil().max(1.0) as usize;
    let h = (hi - lo) / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let a = lo + i as f64 * h;
        let b = if i + 1 == n { hi } else { a + h };
        total += integrate(&mut f, a, b, opts)?.value;
    }
    Ok(total)
}

/// Integrates `f` over `[a, ∞)` through the map `x = a + (1 - u) / u`.
pub fn integrate_to_infinity<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    opts: QuadOptions,
) -> Result<QuadResult> {
    integrate(
        |u| {
            if u <= 0.0 {
                return 0.0;
            }
            let x = a + (1.0 - u) / u;
            f(x) / (u * u)
        },
        0.0,
        1.0,
        opts,
    )
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` by Newton iteration.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}
