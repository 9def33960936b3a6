use samplers::{exp1, poisson};
use repp_core::stats::{dprime_estimate, dprime_estimates, ks_exponential, poisson_count_test, IidSurrogate};
use repp_core::SeedTree;

mod samplers {
    use rand::Rng;

    pub fn exp1<R: Rng + ?Sized>(rng: &mut R) -> f64 {
        -(1.0 - rng.random::<f64>()).ln()
    }

    /// Knuth's product method; fine for small means.
    pub fn poisson<R: Rng + ?Sized>(t: f64, rng: &mut R) -> u64 {
        let limit = (-t).exp();
        let mut k = 0;
        let mut p = rng.random::<f64>();
        while p > limit {
            k += 1;
            p *= rng.random::<f64>();
        }
        k
    }
}

/// Largest number of rejections among 200 tests at level 0.01 that a valid
/// test produces with probability above 0.999 (Binomial(200, 0.01)).
const MAX_REJECTIONS: usize = 8;

#[test]
fn ks_p_values_are_calibrated_under_the_null() {
    let mut rng = SeedTree::new(41).rng();
    let rejections = (0..200)
        .filter(|_| {
            let gaps: Vec<f64> = (0..500).map(|_| exp1(&mut rng)).collect();
            ks_exponential(&gaps).unwrap().p_value < 0.01
        })
        .count();
    assert!(rejections <= MAX_REJECTIONS, "{rejections}");
}

#[test]
fn ks_rejects_a_wrong_rate() {
    let mut rng = SeedTree::new(42).rng();
    let gaps: Vec<f64> = (0..2000).map(|_| 1.2 * exp1(&mut rng)).collect();
    assert!(ks_exponential(&gaps).unwrap().p_value < 0.01);
}

#[test]
fn chi_square_p_values_are_calibrated_under_the_null() {
    let mut rng = SeedTree::new(43).rng();
    for t in [0.5, 1.0, 2.0] {
        let rejections = (0..200)
            .filter(|_| {
                let counts: Vec<u64> = (0..2000).map(|_| poisson(t, &mut rng)).collect();
                poisson_count_test(&counts, t).unwrap().result.p_value < 0.01
            })
            .count();
        assert!(rejections <= MAX_REJECTIONS, "t = {t}: {rejections}");
    }
}

#[test]
fn poisson_tv_is_small_for_poisson_samples() {
    let mut rng = SeedTree::new(44).rng();
    let counts: Vec<u64> = (0..2000).map(|_| poisson(1.0, &mut rng)).collect();
    assert!(poisson_count_test(&counts, 1.0).unwrap().result.statistic < 0.05);
    let shifted: Vec<u64> = (0..2000).map(|_| poisson(1.3, &mut rng)).collect();
    assert!(poisson_count_test(&shifted, 1.0).unwrap().result.statistic > 0.05);
}

#[test]
fn dprime_surrogate_converges_to_the_iid_level() {
    let (n, tau, k) = (100_000u64, 1.0, 10u64);
    let src = IidSurrogate::new(n, tau);
    let level = tau * tau / k as f64;
    let small = dprime_estimate(&src, n, k, 2_000, &SeedTree::new(1)).unwrap();
    let large = dprime_estimate(&src, n, k, 32_000, &SeedTree::new(2)).unwrap();
    for e in [small, large] {
        assert!((e.value - level).abs() < 4.0 * e.stderr, "{e:?}");
    }
    // 16x the samples gives about 1/4 of the standard error
    let ratio = small.stderr / large.stderr;
    assert!((3.0..5.3).contains(&ratio), "{ratio}");
}

#[test]
fn dprime_halves_when_k_doubles() {
    let (n, tau) = (100_000u64, 1.0);
    let ks = [5u64, 10, 20, 40];
    let est = dprime_estimates(&IidSurrogate::new(n, tau), n, &ks, 20_000, &SeedTree::new(9)).unwrap();
    for w in est.windows(2) {
        assert!(w[1].value < w[0].value);
    }
    for (e, k) in est.iter().zip(ks) {
        assert!((e.value * k as f64 / (tau * tau) - 1.0).abs() < 0.1, "k = {k}: {e:?}");
    }
}
