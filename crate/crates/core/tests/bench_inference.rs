use std::fs;

use ndarray::Array1;

use sista::bench::{
    self, emit_plot_data, find_gamma_for_sparsity, gamma_max, gen_synthetic, gen_synthetic_bundle,
    run_race, BenchSpec, GammaSearchConfig, SolverKind,
};
use sista::inference::{bootstrap_se, fit_with_support_size, BootstrapConfig};
use sista::solvers::{sista_solve, InitialPoint, SolverConfig, SolverTrace, TraceRecord};

#[test]
fn same_seed_gives_identical_instance() {
    let spec = BenchSpec::new(6, 9, 0.5, 77);
    let a = gen_synthetic(&spec).unwrap();
    let b = gen_synthetic(&spec).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    let c = gen_synthetic(&BenchSpec::new(6, 9, 0.5, 78)).unwrap();
    assert_ne!(a.fingerprint(), c.fingerprint());
}

#[test]
fn raw_draws_have_standard_normal_moments() {
    let bundle = gen_synthetic_bundle(3, 200, 5).unwrap();
    let m = bundle.basis.len() as f64;
    let mean = bundle.basis.sum() / m;
    let var = bundle.basis.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    // Standard errors of the sample mean and variance.
    assert!(mean.abs() < 5.0 / m.sqrt());
    assert!((var - 1.0).abs() < 5.0 * (2.0 / m).sqrt());
    let problem = bundle.to_problem(None, None).unwrap();
    assert!(problem.plan().is_full_support());
    assert!((problem.plan().entries().sum() - 1.0).abs() < 1e-12);
    assert!(problem.basis().is_centered());
}

#[test]
fn nnz_is_nonincreasing_on_a_penalty_grid() {
    let p = gen_synthetic(&BenchSpec::new(12, 10, 0.5, 3)).unwrap();
    let gmax = gamma_max(&p).unwrap();
    let mut last = usize::MAX;
    for frac in [0.05, 0.3, 0.8] {
        let q = p.with_gamma(frac * gmax).unwrap();
        let s = sista_solve(&q, &SolverConfig::default(), &InitialPoint::zeros(&q)).unwrap();
        assert!(s.beta.nnz() <= last);
        last = s.beta.nnz();
    }
}

#[test]
fn sparsity_search_hits_the_requested_count() {
    let p = gen_synthetic(&BenchSpec::new(20, 12, 0.2, 9)).unwrap();
    let out = find_gamma_for_sparsity(&p, 0.2, &GammaSearchConfig::default()).unwrap();
    assert!(out.exact);
    assert_eq!(out.nnz, 4);
    assert_eq!(out.solution.beta.nnz(), 4);
    assert!(out.gamma > 0.0 && out.gamma < gamma_max(&p).unwrap());
    assert!(find_gamma_for_sparsity(&p, 0.01, &GammaSearchConfig::default()).is_err());
}

#[test]
fn support_size_zero_and_full() {
    let p = gen_synthetic(&BenchSpec::new(5, 8, 0.2, 4)).unwrap();
    let zero = fit_with_support_size(&p, 0, &GammaSearchConfig::default()).unwrap();
    assert_eq!(zero.nnz, 0);
    assert_eq!(zero.gamma, gamma_max(&p).unwrap());
    let full = fit_with_support_size(&p, 5, &GammaSearchConfig::default()).unwrap();
    assert_eq!(full.nnz, 5);
    assert_eq!(full.gamma, 0.0);
    assert!(fit_with_support_size(&p, 6, &GammaSearchConfig::default()).is_err());
}

#[test]
fn supports_for_two_sizes_can_be_reported_side_by_side() {
    let p = gen_synthetic(&BenchSpec::new(16, 10, 0.2, 12)).unwrap();
    let cfg = GammaSearchConfig::default();
    let five = fit_with_support_size(&p, 5, &cfg).unwrap();
    let eight = fit_with_support_size(&p, 8, &cfg).unwrap();
    assert_eq!((five.nnz, eight.nnz), (5, 8));
    assert!(eight.gamma < five.gamma);
}

fn small_race(parallel: bool) -> bench::RaceResult {
    let mut spec = BenchSpec::new(8, 10, 0.25, 21);
    spec.parallel = parallel;
    let p = gen_synthetic(&spec).unwrap();
    let g = find_gamma_for_sparsity(&p, 0.25, &GammaSearchConfig::default()).unwrap();
    run_race(&p.with_gamma(g.gamma).unwrap(), &spec).unwrap()
}

#[test]
fn race_shares_start_point_and_reference() {
    for parallel in [false, true] {
        let race = small_race(parallel);
        assert_eq!(race.entries.len(), 3);
        let last_ref = race.reference.trace.last().unwrap();
        assert!(last_ref.gap.unwrap() <= 1e-10);
        assert!(race.reference.kkt_residual <= 1e-12);
        let phi0 = race.entries[0].trace().records()[0].phi;
        for e in &race.entries {
            let recs = e.trace().records();
            assert_eq!(recs[0].phi, phi0);
            assert!(recs.iter().all(|r| r.gap.unwrap() >= 0.0));
            assert!(e.reached_floor, "{}", e.solver);
        }
        let sista = race.entry(SolverKind::Sista).unwrap().trace().records();
        for w in sista.windows(2) {
            assert!(w[1].gap.unwrap() <= w[0].gap.unwrap() + 1e-12);
        }
    }
}

#[test]
fn race_traces_are_deterministic_apart_from_time() {
    let a = small_race(false);
    let b = small_race(false);
    for (x, y) in a.entries.iter().zip(&b.entries) {
        let strip = |t: &SolverTrace| -> Vec<(usize, f64, f64, usize)> {
            t.records().iter().map(|r| (r.t, r.phi, r.kkt, r.nnz)).collect()
        };
        assert_eq!(strip(x.trace()), strip(y.trace()));
    }
}

#[test]
fn race_output_layout_and_plot_files() {
    let dir = tempfile::tempdir().unwrap();
    let race = small_race(false);
    let instance = gen_synthetic_bundle(8, 10, 21).unwrap();
    bench::write_race(&race, &instance, dir.path()).unwrap();
    for f in [
        "manifest.toml",
        "instance/manifest.toml",
        "traces/sista.csv",
        "traces/ista.csv",
        "traces/cd.csv",
        "traces/reference.csv",
        "plots/manifest.toml",
        "plots/sista.csv",
        "plots/ista.csv",
        "plots/cd.csv",
    ] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let back = SolverTrace::read_csv(&dir.path().join("traces/cd.csv")).unwrap();
    assert_eq!(back.len(), race.entry(SolverKind::Cd).unwrap().trace().len());
}

#[test]
fn plot_rows_with_zero_gap_are_dropped_and_counted() {
    let mut trace = SolverTrace::default();
    for (t, elapsed, gap) in [(0, 0.0, 1.0), (1, 0.5, 1e-3), (2, 1.0, 0.0), (3, 2.0, 1e-6)] {
        trace.push(TraceRecord {
            t,
            elapsed,
            phi: 1.0 + gap,
            gap: Some(gap),
            kkt: 0.0,
            nnz: 0,
            rho: 1.0,
        });
    }
    let dir = tempfile::tempdir().unwrap();
    let manifest = emit_plot_data(&[("sista", &trace)], dir.path()).unwrap();
    assert_eq!(manifest.series[0].rows, 2);
    assert_eq!(manifest.series[0].dropped, 2);
    let text = fs::read_to_string(dir.path().join("sista.csv")).unwrap();
    let rows: Vec<(f64, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 2);
    assert!((rows[0].0 - 0.5f64.log10()).abs() < 1e-15);
    assert!((rows[1].1 + 6.0).abs() < 1e-12);
    assert!(emit_plot_data(&[], dir.path()).is_err());
}

fn bootstrap_problem() -> (sista::Problem, f64) {
    let p = gen_synthetic(&BenchSpec::new(6, 8, 0.5, 31)).unwrap();
    let g = 0.3 * gamma_max(&p).unwrap();
    (p, g)
}

#[test]
fn disabled_resampling_gives_zero_errors() {
    let (p, g) = bootstrap_problem();
    let cfg = BootstrapConfig {
        replicates: 8,
        sample_size: None,
        ..BootstrapConfig::default()
    };
    let out = bootstrap_se(&p, g, &cfg).unwrap();
    assert_eq!(out.se, Array1::<f64>::zeros(6));
    assert_eq!(out.used, 8);
}

#[test]
fn bootstrap_is_reproducible_and_nonnegative() {
    let (p, g) = bootstrap_problem();
    let cfg = BootstrapConfig {
        replicates: 20,
        sample_size: Some(50_000),
        seed: 4,
        ..BootstrapConfig::default()
    };
    let a = bootstrap_se(&p, g, &cfg).unwrap();
    let b = bootstrap_se(&p, g, &cfg).unwrap();
    assert_eq!(a.se, b.se);
    assert_eq!(a.se.len(), 6);
    assert!(a.se.iter().all(|&s| s >= 0.0 && s.is_finite()));
    assert!(a.se.iter().any(|&s| s > 0.0));
    let c = bootstrap_se(&p, g, &BootstrapConfig { seed: 5, ..cfg }).unwrap();
    assert_ne!(a.se, c.se);
}

#[test]
fn errors_shrink_with_larger_samples() {
    let (p, _) = bootstrap_problem();
    let cfg = |m| BootstrapConfig {
        replicates: 40,
        sample_size: Some(m),
        seed: 8,
        ..BootstrapConfig::default()
    };
    // Unpenalized, so every component stays active.
    let small = bootstrap_se(&p, 0.0, &cfg(10_000)).unwrap();
    let large = bootstrap_se(&p, 0.0, &cfg(1_000_000)).unwrap();
    let norm = |x: &Array1<f64>| x.iter().map(|s| s * s).sum::<f64>().sqrt();
    // Expected ratio is sqrt(100) = 10.
    assert!(norm(&large.se) < 0.3 * norm(&small.se));
}

#[test]
fn components_dead_in_every_replicate_report_zero() {
    let (p, _) = bootstrap_problem();
    let g = 1.5 * gamma_max(&p).unwrap();
    let cfg = BootstrapConfig {
        replicates: 10,
        sample_size: Some(1_000_000),
        ..BootstrapConfig::default()
    };
    let out = bootstrap_se(&p, g, &cfg).unwrap();
    assert!(out.se.iter().all(|&s| s == 0.0));
}

#[test]
fn bootstrap_needs_two_replicates() {
    let (p, g) = bootstrap_problem();
    let cfg = BootstrapConfig {
        replicates: 1,
        ..BootstrapConfig::default()
    };
    assert!(bootstrap_se(&p, g, &cfg).is_err());
}
