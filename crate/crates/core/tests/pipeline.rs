//! The public API end to end: parameters, kernels, paths and the trace.

use relstable::geometry::Domain;
use relstable::kernels::{c1_const, free_density, KernelCache};
use relstable::sampler::{simulate_path, RngStream};
use relstable::tracelab::{first_exit, first_term, r_estimate, z_trace, Lab, Ladder};
use relstable::{Error, ProcessParams};

#[test]
fn cauchy_density_matches_closed_form_through_the_table() {
    // α = 1, m = 0, d = 2: p(t, r) = t / (2π (t² + r²)^{3/2}).
    let p = ProcessParams::new(1.0, 0.0, 2).unwrap();
    let cache = KernelCache::new(&p).unwrap();
    let table = cache.for_time(0.5).unwrap();
    for r in [0.0f64, 0.1, 0.5, 2.0, 10.0] {
        let exact = 0.5 / (2.0 * std::f64::consts::PI * (0.25 + r * r).powf(1.5));
        let direct = free_density(0.5, r, &p).unwrap();
        let tabled = table.eval(0.5, r).unwrap();
        assert!(
            (direct / exact - 1.0).abs() < 1e-8,
            "r={r}: {direct} vs {exact}"
        );
        assert!(
            (tabled / exact - 1.0).abs() < 1e-5,
            "r={r}: {tabled} vs {exact}"
        );
    }
    assert!((c1_const(&p).unwrap() - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-14);
}

#[test]
fn paths_leave_a_small_ball_and_stay_in_whole_space() {
    let p = ProcessParams::new(1.0, 1.0, 2).unwrap();
    let mut rng = RngStream::new(1, 0).rng();
    let path = simulate_path(&[0.0, 0.0], 50.0, 0.1, &p, &mut rng).unwrap();
    assert_eq!(path.positions.len(), 501);
    let tiny = Domain::ball(2, 0.05).unwrap();
    let (k, at) = first_exit(&path, &tiny)
        .unwrap()
        .expect("exits a tiny ball");
    assert!(k >= 1 && !tiny.contains(&at));
    let plane = Domain::whole_space(2).unwrap();
    assert!(first_exit(&path, &plane).unwrap().is_none());
}

#[test]
fn trace_pipeline_is_reproducible_and_consistent() {
    let p = ProcessParams::new(1.0, 1.0, 2).unwrap();
    let lab = Lab::new(&p, Ladder::new(32, 3, 1.0).unwrap()).unwrap();
    let ball = Domain::parse("ball:R0=1", 2).unwrap();
    let s = RngStream::new(42, 0).named("pipeline");
    let t = 0.05;

    let r = r_estimate(&lab, t, &[0.0, 0.0], &ball, 2000, &s).unwrap();
    assert!(r.value >= 0.0 && r.value <= lab.diagonal_density(t).unwrap() * 1.01);

    let a = z_trace(&lab, t, &ball, 2000, 1, &s).unwrap();
    let b = z_trace(&lab, t, &ball, 2000, 1, &s).unwrap();
    assert_eq!(a.value.to_bits(), b.value.to_bits());
    assert!(a.value > 0.0 && a.value < first_term(&lab, t, &ball).unwrap());
}

#[test]
fn invalid_inputs_are_reported_not_panicked() {
    assert!(matches!(
        ProcessParams::new(2.5, 1.0, 2),
        Err(Error::InvalidParameter(_))
    ));
    assert!(ProcessParams::new(1.0, -1.0, 2).is_err());
    assert!(Domain::parse("cube:side=1", 2).is_err());
    let p = ProcessParams::new(1.0, 1.0, 2).unwrap();
    let lab = Lab::new(&p, Ladder::default()).unwrap();
    let half = Domain::half_space(2).unwrap();
    assert!(z_trace(&lab, 0.1, &half, 100, 1, &RngStream::new(0, 0)).is_err());
    let ball = Domain::ball(2, 1.0).unwrap();
    assert!(r_estimate(&lab, 0.1, &[0.0, 0.0], &ball, 10, &RngStream::new(0, 0)).is_err());
}
