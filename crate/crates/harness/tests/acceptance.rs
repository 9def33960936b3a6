//! Runs acceptance criteria 1-11 at full scale and prints one line per criterion.
//! `REPP_ACCEPT_FULL_DETERMINISM=1` makes criterion 11 rerun the full suite.

use std::process::ExitCode;

use repp_harness::accept::*;

fn pinned() {
    assert_eq!(ORACLE_LAUNCHES, 1_000);
    assert_eq!(ORACLE_TOL, 1e-9);
    assert_eq!(REVERSIBILITY_POINTS, 10_000);
    assert_eq!(REVERSIBILITY_TOL, 1e-9);
    assert_eq!(PUSHFORWARD_SAMPLES, 100_000);
    assert_eq!(PUSHFORWARD_LEVEL, 0.001);
    assert_eq!(PUSHFORWARD_BINS, 20);
    assert_eq!(THRESHOLD_CASES, 10);
    assert_eq!(THRESHOLD_RTOL, 1e-6);
    assert_eq!(CLOSED_FORM_TOL, 1e-3);
    assert_eq!(CLOSED_FORM_MAX_RADIUS, 1e-3);
    assert_eq!(KAC_SAMPLES, 100_000);
    assert_eq!(KAC_Z_MAX, 3.0);
    assert_eq!(SCATTERER_INV_MASS, 2.0);
    assert_eq!(STADIUM_ARC_INV_MASS, 1.6366);
    assert_eq!(POISSON_TARGETS, 20);
    assert_eq!(POISSON_N, 100_000);
    assert_eq!(POISSON_TAU, 1.0);
    assert_eq!(POISSON_REALIZATIONS, 2_000);
    assert_eq!(POISSON_WINDOWS, [0.5, 1.0, 2.0]);
    assert_eq!(TV_MAX, 0.05);
    assert_eq!(KS_ALPHA, 0.01);
    assert_eq!(PASS_FRACTION, 0.9);
    assert_eq!(POISSON_PMF_T1, [0.3679, 0.3679, 0.1839]);
    assert_eq!(DPRIME_N, 100_000);
    assert_eq!(DPRIME_K, [5, 10, 20]);
    assert_eq!(DPRIME_SIGMAS, 3.0);
    assert_eq!(DPRIME_CLUSTER_FACTOR, 10.0);
    assert_eq!(ANNULUS_CASES, 10);
    assert_eq!(ANNULUS_EPS, (1e-4, 1e-2));
    assert_eq!(SHORT_RETURN_K, [100, 1_000, 10_000]);
    assert_eq!(SHORT_RETURN_SEEDS, 10);
    assert_ne!(DETERMINISM_THREADS.0, DETERMINISM_THREADS.1);
}

fn main() -> ExitCode {
    pinned();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let opts = AcceptOptions { seed: 0, scale: Scale::Full, threads, echo: true, progress: false };
    let out = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    println!("acceptance: full scale, seed {}, {threads} thread(s), output in {}", opts.seed, out.display());
    match run_suite(opts, Some(&out)) {
        Ok(run) => {
            let failed: Vec<u8> = run.outcomes.iter().filter(|o| !o.ok()).map(|o| o.id).collect();
            if failed.is_empty() {
                println!("acceptance: all {} criteria passed", run.outcomes.len());
                ExitCode::SUCCESS
            } else {
                println!("acceptance: failed criteria {failed:?}");
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            println!("acceptance: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
