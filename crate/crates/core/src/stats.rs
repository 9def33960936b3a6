//! Goodness-of-fit tests and Monte Carlo diagnostics for exceedance processes.
//!
//! Every estimator returns an [`Estimate`] carrying a standard error. Monte Carlo
//! loops run over fixed chunks with per-chunk seed streams (see
//! [`crate::measure::map_chunks`]), so results are bit-identical for any number
//! of worker threads.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::geometry::{BilliardTable, BoundaryState, GeometryError, PhasePoint};
use crate::measure::{binomial, map_chunks, MeasureError, MeasureModel};
use crate::repp::{BallTarget, ThresholdSchedule};
use crate::rng::{SeedTree, StreamRng};

/// Consecutive degenerate orbits tolerated per Monte Carlo sample.
const MAX_RESTARTS: u32 = 1000;

/// Chi-square buckets are merged until their expected count reaches this.
pub const MIN_EXPECTED: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewEvents { needed: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{0} consecutive degenerate orbits")]
    TooManyRestarts(u32),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestMethod {
    #[serde(rename = "KS")]
    Ks,
    ChiSquare,
    TotalVariation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub sample_size: u64,
    pub method: TestMethod,
}

/// A Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub n_samples: u64,
    pub restarts: u64,
}

/// Survival function of the Kolmogorov distribution, `P(K > lambda)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Jacobi-theta form converges fast for small lambda
        let y = (-PI * PI / (8.0 * lambda * lambda)).exp();
        let mut s = 0.0;
        let mut k = 1.0f64;
        loop {
            let term = y.powf(k * k);
            s += term;
            if term < 1e-17 {
                break;
            }
            k += 2.0;
        }
        return (1.0 - (2.0 * PI).sqrt() / lambda * s).clamp(0.0, 1.0);
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        s += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov–Smirnov test of `samples` against a continuous `cdf`,
/// with the asymptotic p-value (Stephens' finite-sample correction).
pub fn ks_one_sample<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> TestResult {
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &v) in x.iter().enumerate() {
        let f = cdf(v);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    TestResult {
        statistic: d,
        p_value: kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d),
        sample_size: x.len() as u64,
        method: TestMethod::Ks,
    }
}

/// KS test of rescaled gaps against `Exp(1)`.
pub fn ks_exponential(gaps: &[f64]) -> Result<TestResult, StatsError> {
    if gaps.len() < 20 {
        return Err(StatsError::TooFewEvents { needed: 20, got: gaps.len() });
    }
    Ok(ks_one_sample(gaps, |x| if x <= 0.0 { 0.0 } else { -(-x).exp_m1() }))
}

/// `Poisson(t)`, the counts of a standard Poisson process on a window of length `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoissonReference {
    pub t: f64,
}

impl PoissonReference {
    pub fn new(t: f64) -> Self {
        Self { t }
    }

    pub fn pmf(&self, k: u64) -> f64 {
        if self.t == 0.0 {
            return if k == 0 { 1.0 } else { 0.0 };
        }
        let k = k as f64;
        (k * self.t.ln() - self.t - ln_gamma(k + 1.0)).exp()
    }

    /// Smallest `K` with `P(N > K) < 1e-16`.
    pub fn truncation(&self) -> u64 {
        let mut k = 0u64;
        let mut cdf = 0.0;
        while 1.0 - cdf >= 1e-16 && k < 10_000 {
            cdf += self.pmf(k);
            if (k as f64) > self.t && self.pmf(k) < 1e-18 {
                break;
            }
            k += 1;
        }
        k
    }

    /// `pmf(0..=truncation())`.
    pub fn table(&self) -> Vec<f64> {
        (0..=self.truncation()).map(|k| self.pmf(k)).collect()
    }
}

fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Pearson chi-square test of observed counts against expected counts,
/// merging adjacent cells left to right until each bucket expects at least
/// [`MIN_EXPECTED`]; any remainder joins the last bucket.
fn chi_square_buckets(observed: &[f64], expected: &[f64], n: u64) -> TestResult {
    let mut buckets: Vec<(f64, f64)> = Vec::new();
    let (mut o, mut e) = (0.0, 0.0);
    for (&oi, &ei) in observed.iter().zip(expected) {
        o += oi;
        e += ei;
        if e >= MIN_EXPECTED {
            buckets.push((o, e));
            o = 0.0;
            e = 0.0;
        }
    }
    if e > 0.0 || o > 0.0 {
        match buckets.last_mut() {
            Some(last) => {
                last.0 += o;
                last.1 += e;
            }
            None => buckets.push((o, e)),
        }
    }
    let stat: f64 = buckets.iter().filter(|b| b.1 > 0.0).map(|(o, e)| (o - e) * (o - e) / e).sum();
    let df = buckets.len().saturating_sub(1);
    let p_value = if df == 0 { 1.0 } else { ChiSquared::new(df as f64).map(|c| c.sf(stat)).unwrap_or(0.0) };
    TestResult { statistic: stat, p_value, sample_size: n, method: TestMethod::ChiSquare }
}

/// Outcome of [`poisson_count_test`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoissonCountTest {
    /// Total variation distance; `method` is [`TestMethod::TotalVariation`] and
    /// `p_value` is the chi-square p-value.
    pub result: TestResult,
    pub chi_square: f64,
    pub chi_square_df: u64,
}

/// Compares the empirical law of `counts` with `Poisson(t)`.
pub fn poisson_count_test(counts: &[u64], t: f64) -> Result<PoissonCountTest, StatsError> {
    if counts.len() < 500 {
        return Err(StatsError::TooFewEvents { needed: 500, got: counts.len() });
    }
    if !(t > 0.0) {
        return Err(StatsError::InvalidArgument(format!("window must be positive, got {t}")));
    }
    let reference = PoissonReference::new(t);
    let kmax = counts.iter().copied().max().unwrap_or(0).max(reference.truncation()) as usize;
    let mut hist = vec![0u64; kmax + 1];
    for &c in counts {
        hist[c as usize] += 1;
    }
    let n = counts.len() as f64;
    let pmf: Vec<f64> = (0..=kmax as u64).map(|k| reference.pmf(k)).collect();
    let tail = (1.0 - pmf.iter().sum::<f64>()).max(0.0);
    let tv = 0.5 * (hist.iter().zip(&pmf).map(|(&h, &p)| (h as f64 / n - p).abs()).sum::<f64>() + tail);
    let observed: Vec<f64> = hist.iter().map(|&h| h as f64).collect();
    let mut expected: Vec<f64> = pmf.iter().map(|p| p * n).collect();
    *expected.last_mut().unwrap() += tail * n;
    let chi = chi_square_buckets(&observed, &expected, counts.len() as u64);
    let df = chi_df(&expected);
    Ok(PoissonCountTest {
        result: TestResult {
            statistic: tv,
            p_value: chi.p_value,
            sample_size: counts.len() as u64,
            method: TestMethod::TotalVariation,
        },
        chi_square: chi.statistic,
        chi_square_df: df,
    })
}

fn chi_df(expected: &[f64]) -> u64 {
    let mut buckets = 0u64;
    let mut e = 0.0;
    for &ei in expected {
        e += ei;
        if e >= MIN_EXPECTED {
            buckets += 1;
            e = 0.0;
        }
    }
    buckets.max(1) - 1
}

/// Chi-square goodness of fit of binned counts against equal cell probabilities.
pub fn chi_square_uniform(counts: &[u64]) -> TestResult {
    let n: u64 = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    let observed: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    chi_square_buckets(&observed, &vec![e; counts.len()], n)
}

/// Two-sample chi-square homogeneity test on matching bins.
pub fn chi_square_homogeneity(a: &[u64], b: &[u64]) -> Result<TestResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::InvalidArgument("bin counts differ in length".into()));
    }
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    let n = na + nb;
    let mut stat = 0.0;
    let mut cells = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let tot = (x + y) as f64;
        if tot == 0.0 {
            continue;
        }
        cells += 1;
        let ea = tot * na / n;
        let eb = tot * nb / n;
        stat += (x as f64 - ea).powi(2) / ea + (y as f64 - eb).powi(2) / eb;
    }
    let df = cells.saturating_sub(1);
    let p_value = if df == 0 { 1.0 } else { ChiSquared::new(df as f64).map(|c| c.sf(stat)).unwrap_or(0.0) };
    Ok(TestResult { statistic: stat, p_value, sample_size: n as u64, method: TestMethod::ChiSquare })
}

/// Total variation distance between two empirical count distributions.
pub fn tv_distance(a: &[u64], b: &[u64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.len() == b.len() { 0.0 } else { 1.0 };
    }
    let kmax = a.iter().chain(b).copied().max().unwrap_or(0) as usize;
    let (mut ha, mut hb) = (vec![0u64; kmax + 1], vec![0u64; kmax + 1]);
    a.iter().for_each(|&k| ha[k as usize] += 1);
    b.iter().for_each(|&k| hb[k as usize] += 1);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    0.5 * ha.iter().zip(&hb).map(|(&x, &y)| (x as f64 / na - y as f64 / nb).abs()).sum::<f64>()
}

/// Least-squares line `y = intercept + slope x` with the Pearson correlation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r: f64,
}

impl LinearFit {
    pub fn r_squared(&self) -> f64 {
        self.r * self.r
    }
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r = if syy == 0.0 { 1.0 } else { sxy / (sxx * syy).sqrt() };
    Some(LinearFit { slope, intercept: my - slope * mx, r })
}

/// A process that, step by step, reports whether it currently sits in a
/// rare set `U`. Implemented by billiard orbits and by the i.i.d. surrogate.
pub trait ExceedanceSource: Sync {
    type State: Copy;

    /// `mu(U)`.
    fn target_mass(&self) -> f64;
    /// A draw from the invariant law.
    fn stationary(&self, rng: &mut StreamRng) -> Self::State;
    /// A draw from the invariant law conditioned on `U`.
    fn conditioned(&self, rng: &mut StreamRng) -> Self::State;
    fn in_target(&self, s: &Self::State) -> bool;
    fn advance(&self, s: &mut Self::State, rng: &mut StreamRng) -> Result<(), GeometryError>;
}

/// Orbits of a billiard map with `U = U_n` from a threshold schedule.
#[derive(Clone, Copy, Debug)]
pub struct BilliardSource<'a> {
    mm: MeasureModel<'a>,
    target: BallTarget,
    mass: f64,
}

impl<'a> BilliardSource<'a> {
    pub fn new(mm: MeasureModel<'a>, ts: &ThresholdSchedule) -> Result<Self, GeometryError> {
        Ok(Self { mm, target: ts.target(mm.table())?, mass: ts.ball_mass })
    }

    fn table(&self) -> &'a BilliardTable {
        self.mm.table()
    }

    fn state(&self, p: &PhasePoint) -> BoundaryState {
        self.table().state_of(p).expect("samplers return valid phase points")
    }
}

impl ExceedanceSource for BilliardSource<'_> {
    type State = BoundaryState;

    fn target_mass(&self) -> f64 {
        self.mass
    }

    fn stationary(&self, rng: &mut StreamRng) -> BoundaryState {
        self.state(&self.mm.sample(rng))
    }

    fn conditioned(&self, rng: &mut StreamRng) -> BoundaryState {
        self.state(&self.mm.sample_in_ball(&self.target.zeta, self.target.radius, rng))
    }

    #[inline]
    fn in_target(&self, s: &BoundaryState) -> bool {
        self.target.contains(self.table(), s)
    }

    #[inline]
    fn advance(&self, s: &mut BoundaryState, _rng: &mut StreamRng) -> Result<(), GeometryError> {
        *s = self.table().step(s)?.0;
        Ok(())
    }
}

/// Independent events with probability `p` at every step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IidSurrogate {
    pub p: f64,
}

impl IidSurrogate {
    /// The surrogate matching `n mu(U) = tau`.
    pub fn new(n: u64, tau: f64) -> Self {
        Self { p: tau / n as f64 }
    }
}

impl ExceedanceSource for IidSurrogate {
    type State = bool;

    fn target_mass(&self) -> f64 {
        self.p
    }

    fn stationary(&self, rng: &mut StreamRng) -> bool {
        rng.random::<f64>() < self.p
    }

    fn conditioned(&self, _rng: &mut StreamRng) -> bool {
        true
    }

    fn in_target(&self, s: &bool) -> bool {
        *s
    }

    fn advance(&self, s: &mut bool, rng: &mut StreamRng) -> Result<(), GeometryError> {
        *s = rng.random::<f64>() < self.p;
        Ok(())
    }
}

/// Runs `body` from fresh starting states until it avoids a degenerate collision.
fn restartable<S, T, F>(
    src: &S,
    rng: &mut StreamRng,
    conditioned: bool,
    mut body: F,
) -> Result<(T, u64), StatsError>
where
    S: ExceedanceSource,
    F: FnMut(S::State, &mut StreamRng) -> Result<T, GeometryError>,
{
    for restarts in 0..=MAX_RESTARTS {
        let s = if conditioned { src.conditioned(rng) } else { src.stationary(rng) };
        match body(s, rng) {
            Ok(v) => return Ok((v, restarts as u64)),
            Err(e) if e.is_degenerate() => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(StatsError::TooManyRestarts(MAX_RESTARTS))
}

/// Running sums for mean and variance of per-sample values.
#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    n: u64,
    sum: f64,
    sum_sq: f64,
    restarts: u64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn merge(mut self, o: &Moments) -> Self {
        self.n += o.n;
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
        self.restarts += o.restarts;
        self
    }

    fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    fn stderr(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let var = ((self.sum_sq - n * self.mean() * self.mean()) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    }

    fn scaled(&self, factor: f64) -> Estimate {
        Estimate { value: factor * self.mean(), stderr: factor * self.stderr(), n_samples: self.n, restarts: self.restarts }
    }
}

fn collect_moments<const K: usize>(parts: Vec<Result<[Moments; K], StatsError>>) -> Result<[Moments; K], StatsError> {
    let mut tot = [Moments::default(); K];
    for p in parts {
        for (t, m) in tot.iter_mut().zip(p?) {
            *t = t.merge(&m);
        }
    }
    Ok(tot)
}

/// `n sum_{j=1}^{floor(n/k)} mu(U ∩ T^{-j} U)` for several `k`, from shared orbits.
///
/// Orbits start from `mu` conditioned on `U`; the mean number of re-entries
/// within `floor(n/k)` steps is scaled by `n mu(U)`.
pub fn dprime_estimates<S: ExceedanceSource>(
    src: &S,
    n: u64,
    ks: &[u64],
    n_mc: usize,
    seeds: &SeedTree,
) -> Result<Vec<Estimate>, StatsError> {
    if ks.is_empty() || ks.iter().any(|&k| k < 2) {
        return Err(StatsError::InvalidArgument("block counts must be at least 2".into()));
    }
    if n_mc < 2 {
        return Err(StatsError::TooFewEvents { needed: 2, got: n_mc });
    }
    let horizons: Vec<u64> = ks.iter().map(|&k| n / k).collect();
    let longest = *horizons.iter().max().unwrap();
    let parts = map_chunks(n_mc, seeds, |rng, len| -> Result<Vec<Moments>, StatsError> {
        let mut m = vec![Moments::default(); ks.len()];
        let mut hits = vec![0u64; ks.len()];
        for _ in 0..len {
            let ((), restarts) = restartable(src, rng, true, |mut s, rng| {
                hits.iter_mut().for_each(|h| *h = 0);
                for j in 1..=longest {
                    src.advance(&mut s, rng)?;
                    if src.in_target(&s) {
                        for (h, &hz) in hits.iter_mut().zip(&horizons) {
                            if j <= hz {
                                *h += 1;
                            }
                        }
                    }
                }
                Ok(())
            })?;
            for (mi, &h) in m.iter_mut().zip(&hits) {
                mi.push(h as f64);
            }
            m[0].restarts += restarts;
        }
        Ok(m)
    });
    let mut tot = vec![Moments::default(); ks.len()];
    for p in parts {
        for (t, mi) in tot.iter_mut().zip(p?) {
            *t = t.merge(&mi);
        }
    }
    let restarts = tot[0].restarts;
    let scale = n as f64 * src.target_mass();
    Ok(tot.iter().map(|m| Estimate { restarts, ..m.scaled(scale) }).collect())
}

pub fn dprime_estimate<S: ExceedanceSource>(
    src: &S,
    n: u64,
    k: u64,
    n_mc: usize,
    seeds: &SeedTree,
) -> Result<Estimate, StatsError> {
    Ok(dprime_estimates(src, n, &[k], n_mc, seeds)?[0])
}

/// `|P(X_0 > u, M(A + t) <= u) - P(X_0 > u) P(M(A) <= u)|` for a union `A` of
/// integer intervals `[a, b)`.
///
/// With `P(X_0 > u) = mu(U)` the discrepancy equals
/// `mu(U) |P_U(no entry in A + t) - P(no entry in A)|`; the two probabilities
/// are estimated from conditioned and stationary orbits respectively, each
/// with `n_mc` samples.
pub fn d3_estimate<S: ExceedanceSource>(
    src: &S,
    t_gap: u64,
    a: &[(u64, u64)],
    n_mc: usize,
    seeds: &SeedTree,
) -> Result<Estimate, StatsError> {
    let mut idx: Vec<u64> = a.iter().flat_map(|&(lo, hi)| lo..hi).collect();
    idx.sort_unstable();
    idx.dedup();
    if idx.is_empty() {
        return Ok(Estimate { value: 0.0, stderr: 0.0, n_samples: n_mc as u64, restarts: 0 });
    }
    let shifted: Vec<u64> = idx.iter().map(|i| i + t_gap).collect();
    // true when the orbit avoids U at every listed index
    let avoids = |src: &S, mut s: S::State, rng: &mut StreamRng, times: &[u64]| -> Result<bool, GeometryError> {
        let mut j = 0u64;
        for &i in times {
            while j < i {
                src.advance(&mut s, rng)?;
                j += 1;
            }
            if src.in_target(&s) {
                return Ok(false);
            }
        }
        Ok(true)
    };
    let parts = map_chunks(n_mc, seeds, |rng, len| -> Result<[Moments; 2], StatsError> {
        let mut m = [Moments::default(); 2];
        for _ in 0..len {
            let (f, r1) = restartable(src, rng, true, |s, rng| avoids(src, s, rng, &shifted))?;
            let (g, r2) = restartable(src, rng, false, |s, rng| avoids(src, s, rng, &idx))?;
            m[0].push(f as u8 as f64);
            m[1].push(g as u8 as f64);
            m[0].restarts += r1 + r2;
        }
        Ok(m)
    });
    let [f, g] = collect_moments(parts)?;
    let mass = src.target_mass();
    Ok(Estimate {
        value: mass * (f.mean() - g.mean()).abs(),
        stderr: mass * (f.stderr().powi(2) + g.stderr().powi(2)).sqrt(),
        n_samples: n_mc as u64,
        restarts: f.restarts,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayModel {
    Exp,
    Poly,
}

/// `ln |C(lag)| ≈ a - rate · x` with `x = lag` (exp) or `x = ln lag` (poly).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub model: DecayModel,
    pub rate: f64,
    /// Coefficient of determination of the linearised fit.
    pub goodness: f64,
    pub points: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecaySeries {
    pub lags: Vec<u64>,
    pub values: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub exp_fit: Option<DecayFit>,
    pub poly_fit: Option<DecayFit>,
}

impl DecaySeries {
    /// Fits both models on positive lags whose value exceeds twice its standard error.
    pub fn from_values(lags: Vec<u64>, values: Vec<f64>, stderrs: Vec<f64>) -> Self {
        let pts: Vec<(f64, f64)> = lags
            .iter()
            .zip(&values)
            .zip(&stderrs)
            .filter(|((&l, &v), &se)| l >= 1 && v > 0.0 && v > 2.0 * se)
            .map(|((&l, &v), _)| (l as f64, v.ln()))
            .collect();
        let fit = |model: DecayModel| -> Option<DecayFit> {
            if pts.len() < 3 {
                return None;
            }
            let xs: Vec<f64> =
                pts.iter().map(|&(l, _)| if model == DecayModel::Exp { l } else { l.ln() }).collect();
            let ys: Vec<f64> = pts.iter().map(|&(_, y)| y).collect();
            linear_fit(&xs, &ys).map(|f| DecayFit {
                model,
                rate: -f.slope,
                goodness: f.r_squared(),
                points: pts.len() as u64,
            })
        };
        let (exp_fit, poly_fit) = (fit(DecayModel::Exp), fit(DecayModel::Poly));
        Self { lags, values, stderrs, exp_fit, poly_fit }
    }
}

/// `|∫ f · g∘T^lag dmu - ∫ f dmu ∫ g dmu|` at each lag.
pub fn correlation_decay<F, G>(
    mm: &MeasureModel<'_>,
    f: F,
    g: G,
    lags: &[u64],
    n_mc: usize,
    seeds: &SeedTree,
) -> Result<DecaySeries, StatsError>
where
    F: Fn(&PhasePoint) -> f64 + Sync,
    G: Fn(&PhasePoint) -> f64 + Sync,
{
    if lags.windows(2).any(|w| w[0] >= w[1]) {
        return Err(StatsError::InvalidArgument("lags must be strictly increasing".into()));
    }
    if n_mc < 2 {
        return Err(StatsError::TooFewEvents { needed: 2, got: n_mc });
    }
    let table = mm.table();
    let max_lag = lags.last().copied().unwrap_or(0);
    // per sample: f, and g at every lag
    let parts = map_chunks(n_mc, seeds, |rng, len| -> Result<(Vec<f64>, u64), StatsError> {
        let mut rows = Vec::with_capacity(len * (lags.len() + 1));
        let mut restarts = 0u64;
        let mut row = vec![0.0; lags.len()];
        for _ in 0..len {
            let mut attempt = 0u32;
            let fx = loop {
                let x = mm.sample(rng);
                let mut s = table.state_of(&x)?;
                let mut ok = true;
                let mut li = 0;
                for j in 0..=max_lag {
                    if j > 0 {
                        match table.step(&s) {
                            Ok((n, _)) => s = n,
                            Err(e) if e.is_degenerate() => {
                                ok = false;
                                break;
                            }
                            Err(e) => return Err(e.into()),
                        }
                    }
                    while li < lags.len() && lags[li] == j {
                        row[li] = g(&table.chart(&s));
                        li += 1;
                    }
                }
                if ok {
                    break f(&x);
                }
                attempt += 1;
                restarts += 1;
                if attempt > MAX_RESTARTS {
                    return Err(StatsError::TooManyRestarts(MAX_RESTARTS));
                }
            };
            rows.push(fx);
            rows.extend_from_slice(&row);
        }
        Ok((rows, restarts))
    });
    let mut data = Vec::with_capacity(n_mc * (lags.len() + 1));
    for p in parts {
        data.extend(p?.0);
    }
    let w = lags.len() + 1;
    let n = n_mc as f64;
    let mf = data.iter().step_by(w).sum::<f64>() / n;
    let mut values = Vec::with_capacity(lags.len());
    let mut stderrs = Vec::with_capacity(lags.len());
    for li in 0..lags.len() {
        let mg = data.iter().skip(li + 1).step_by(w).sum::<f64>() / n;
        let mut m = Moments::default();
        for r in data.chunks_exact(w) {
            m.push((r[0] - mf) * (r[li + 1] - mg));
        }
        values.push(m.mean().abs());
        stderrs.push(m.stderr());
    }
    Ok(DecaySeries::from_values(lags.to_vec(), values, stderrs))
}

/// A Lipschitz bump `(1 - (d/width)^2)_+^2` in chart coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: PhasePoint,
    pub width: f64,
}

impl Bump {
    pub fn eval(&self, table: &BilliardTable, p: &PhasePoint) -> f64 {
        let d = table.phase_distance(p, &self.center) / self.width;
        if d >= 1.0 {
            0.0
        } else {
            (1.0 - d * d).powi(2)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnulusCheck {
    pub estimate: f64,
    pub stderr: f64,
    /// Quadrature value of the same shell mass.
    pub exact: f64,
    /// `eps^xi`.
    pub bound: f64,
    pub bound_ok: bool,
}

/// Monte Carlo estimate of `mu({r <= d(zeta, .) <= r + eps})` checked against `eps^xi`.
///
/// Points are drawn uniformly on the chart shell (polar radius with density
/// proportional to itself), so the estimator is the shell area times the mean
/// of `c cos(theta)`.
pub fn annulus_measure_check(
    mm: &MeasureModel<'_>,
    zeta: &PhasePoint,
    r: f64,
    eps: f64,
    xi: f64,
    n_mc: usize,
    seeds: &SeedTree,
) -> Result<AnnulusCheck, StatsError> {
    if !(eps > 0.0 && eps < r) {
        return Err(StatsError::InvalidArgument(format!("need 0 < eps < r, got eps = {eps}, r = {r}")));
    }
    if n_mc < 2 {
        return Err(StatsError::TooFewEvents { needed: 2, got: n_mc });
    }
    let exact = mm.annulus_measure(zeta, r, eps)?;
    let outer = r + eps;
    let area = PI * (outer * outer - r * r);
    let c = mm.c_m();
    let parts = map_chunks(n_mc, seeds, |rng, len| -> Result<[Moments; 1], StatsError> {
        let mut m = Moments::default();
        for _ in 0..len {
            let rho = (r * r + rng.random::<f64>() * (outer * outer - r * r)).sqrt();
            let phi = 2.0 * PI * rng.random::<f64>();
            let theta = zeta.theta + rho * phi.sin();
            m.push(if theta.abs() <= FRAC_PI_2 { c * theta.cos() * area } else { 0.0 });
        }
        Ok([m])
    });
    let [m] = collect_moments(parts)?;
    let (estimate, stderr) = (m.mean(), m.stderr());
    let bound = eps.powf(xi);
    Ok(AnnulusCheck { estimate, stderr, exact, bound, bound_ok: estimate - 3.0 * stderr <= bound })
}

/// `floor(ln(k)^5)`, the number of iterates inspected for `E_k`.
pub fn short_return_budget(k: u64) -> u64 {
    (k as f64).ln().powi(5).floor() as u64
}

/// Fraction of `mu`-samples `x` with `d(T^j x, x) <= 2 / sqrt(k)` for some
/// `1 <= j <= floor(ln(k)^5)`.
pub fn short_return_fraction(
    mm: &MeasureModel<'_>,
    k: u64,
    n_mc: usize,
    seeds: &SeedTree,
) -> Result<Estimate, StatsError> {
    if k < 3 {
        return Err(StatsError::InvalidArgument(format!("k must be at least 3, got {k}")));
    }
    short_return_fraction_with(mm, 2.0 / (k as f64).sqrt(), short_return_budget(k), n_mc, seeds)
}

/// [`short_return_fraction`] with an explicit radius and step budget.
pub fn short_return_fraction_with(
    mm: &MeasureModel<'_>,
    radius: f64,
    budget: u64,
    n_mc: usize,
    seeds: &SeedTree,
) -> Result<Estimate, StatsError> {
    let table = mm.table();
    let parts = map_chunks(n_mc, seeds, |rng, len| -> Result<(usize, u64), StatsError> {
        let (mut hits, mut restarts) = (0usize, 0u64);
        for _ in 0..len {
            let mut attempt = 0u32;
            let hit = loop {
                let x = mm.sample(rng);
                match returns_within(table, &x, radius, budget) {
                    Ok(h) => break h,
                    Err(e) if e.is_degenerate() => {
                        attempt += 1;
                        restarts += 1;
                        if attempt > MAX_RESTARTS {
                            return Err(StatsError::TooManyRestarts(MAX_RESTARTS));
                        }
                    }
                    Err(e) => return Err(e.into()),
                }
            };
            hits += hit as usize;
        }
        Ok((hits, restarts))
    });
    let (mut hits, mut restarts) = (0usize, 0u64);
    for p in parts {
        let (h, r) = p?;
        hits += h;
        restarts += r;
    }
    let (value, stderr) = binomial(hits, n_mc);
    Ok(Estimate { value, stderr, n_samples: n_mc as u64, restarts })
}

fn returns_within(table: &BilliardTable, x: &PhasePoint, radius: f64, budget: u64) -> Result<bool, GeometryError> {
    let mut s = table.state_of(x)?;
    let anchor = s.pos;
    let r2 = radius * radius;
    for _ in 0..budget {
        s = table.step(&s)?.0;
        if s.component == x.component
            && (s.pos - anchor).norm_sq() <= r2
            && table.phase_distance(&table.chart(&s), x) <= radius
        {
            return Ok(true);
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Scatterer, Vec2};
    use crate::repp::threshold_for_tau;
    use approx::assert_relative_eq;

    fn two_disk() -> BilliardTable {
        BilliardTable::lorentz(vec![
            Scatterer { center: Vec2::new(0.25, 0.5), radius: 0.2 },
            Scatterer { center: Vec2::new(0.75, 0.5), radius: 0.2 },
        ])
        .unwrap()
    }

    #[test]
    fn ks_on_exact_quantiles() {
        let m = 200;
        let gaps: Vec<f64> = (1..=m).map(|i| -(1.0 - (i as f64 - 0.5) / m as f64).ln()).collect();
        let r = ks_exponential(&gaps).unwrap();
        assert!(r.statistic <= 0.5 / m as f64 + 1e-12);
        assert!(r.p_value > 0.99);
    }

    #[test]
    fn ks_rejects_degenerate_law() {
        let r = ks_exponential(&[1.0; 100]).unwrap();
        assert!(r.statistic >= 0.26);
        assert!(r.p_value < 0.001);
        assert!(matches!(ks_exponential(&[]), Err(StatsError::TooFewEvents { .. })));
    }

    #[test]
    fn kolmogorov_tail_branches_agree() {
        for &l in &[0.3, 0.8, 1.1, 1.18, 1.25, 2.0] {
            let p = kolmogorov_sf(l);
            assert!((0.0..=1.0).contains(&p));
        }
        // P(K > 1.36) ≈ 0.049 is the classical 5% point
        assert!((kolmogorov_sf(1.358) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_sf(1.1799) - kolmogorov_sf(1.1801)).abs() < 1e-3);
    }

    #[test]
    fn poisson_reference_values() {
        let p = PoissonReference::new(1.0);
        let e = (-1.0f64).exp();
        assert_relative_eq!(p.pmf(0), e, epsilon = 1e-15);
        assert_relative_eq!(p.pmf(1), e, epsilon = 1e-15);
        assert_relative_eq!(p.pmf(2), e / 2.0, epsilon = 1e-15);
        assert!((p.pmf(0) - 0.3679).abs() < 5e-5 && (p.pmf(2) - 0.1839).abs() < 5e-5);
        for t in [0.5, 1.0, 2.0, 10.0] {
            let s: f64 = PoissonReference::new(t).table().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn poisson_test_examples() {
        // counts proportional to the pmf at t = 1 (exact up to rounding at 10^6 draws)
        let t = 1.0;
        let p = PoissonReference::new(t);
        let n = 1_000_000u64;
        let mut counts = Vec::new();
        for k in 0..=p.truncation() {
            counts.extend(std::iter::repeat_n(k, (p.pmf(k) * n as f64).round() as usize));
        }
        let r = poisson_count_test(&counts, t).unwrap();
        assert!(r.result.statistic < 1e-5);
        let zeros = vec![0u64; 1000];
        let r = poisson_count_test(&zeros, 2.0).unwrap();
        assert_relative_eq!(r.result.statistic, 1.0 - (-2.0f64).exp(), epsilon = 1e-12);
        assert!(r.result.p_value < 1e-6);
        assert!(poisson_count_test(&zeros[..499], 1.0).is_err());
    }

    #[test]
    fn tv_and_homogeneity() {
        assert_eq!(tv_distance(&[0, 1, 1, 2], &[1, 0, 2, 1]), 0.0);
        assert_relative_eq!(tv_distance(&[0, 0], &[1, 1]), 1.0);
        let r = chi_square_homogeneity(&[100, 200, 300], &[100, 200, 300]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn linear_fit_recovers_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 - 2.0 * x).collect();
        let f = linear_fit(&xs, &ys).unwrap();
        assert_relative_eq!(f.slope, -2.0, epsilon = 1e-12);
        assert_relative_eq!(f.intercept, 3.0, epsilon = 1e-12);
        assert_relative_eq!(f.r, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn dprime_on_surrogate() {
        let src = IidSurrogate::new(1000, 1.0);
        let est = dprime_estimate(&src, 1000, 10, 20_000, &SeedTree::new(5)).unwrap();
        assert!((est.value - 0.1).abs() < 3.0 * est.stderr, "{est:?}");
        assert!(dprime_estimate(&src, 1000, 1, 10, &SeedTree::new(5)).is_err());
    }

    #[test]
    fn d3_examples_on_surrogate() {
        let src = IidSurrogate { p: 0.05 };
        let seeds = SeedTree::new(6);
        assert_eq!(d3_estimate(&src, 10, &[], 100, &seeds).unwrap().value, 0.0);
        let est = d3_estimate(&src, 0, &[(0, 1)], 100_000, &seeds).unwrap();
        let want = src.p * (1.0 - src.p);
        assert!((est.value - want).abs() < 3.0 * est.stderr.max(1e-12), "{est:?} vs {want}");
    }

    #[test]
    fn correlation_identities() {
        let t = two_disk();
        let mm = MeasureModel::new(&t);
        let bump = Bump { center: PhasePoint::new(0, 0.6, 0.0), width: 0.5 };
        let f = |p: &PhasePoint| bump.eval(&t, p);
        let seeds = SeedTree::new(8);
        let constant = correlation_decay(&mm, f, |_: &PhasePoint| 2.0, &[0, 1, 5], 20_000, &seeds).unwrap();
        assert!(constant.values.iter().all(|&v| v < 1e-12));
        let series = correlation_decay(&mm, f, f, &[0], 20_000, &seeds).unwrap();
        // direct variance of f from the same stream
        let mut rng = seeds.child(0).rng();
        let xs: Vec<f64> = (0..4096).map(|_| f(&mm.sample(&mut rng))).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
        assert!((series.values[0] - var).abs() < 3.0 * series.stderrs[0] + 0.1 * var);
        assert!(correlation_decay(&mm, f, f, &[3, 1], 100, &seeds).is_err());
    }

    #[test]
    fn annulus_matches_quadrature() {
        let t = two_disk();
        let mm = MeasureModel::new(&t);
        let zeta = PhasePoint::new(0, 0.3, 0.0);
        let r = 0.05;
        let eps = 1e-3;
        let a = annulus_measure_check(&mm, &zeta, r, eps, 1.0, 100_000, &SeedTree::new(3)).unwrap();
        assert!((a.estimate - a.exact).abs() < 4.0 * a.stderr);
        let density = 2.0 * PI * r * mm.c_m();
        assert!((a.exact / eps / density - 1.0).abs() < 0.05);
        assert!(a.bound_ok);
        assert!(annulus_measure_check(&mm, &zeta, 0.01, 0.02, 1.0, 100, &SeedTree::new(3)).is_err());
    }

    #[test]
    fn short_return_budget_and_trivial_radius() {
        assert_eq!(short_return_budget(10), 64);
        let t = BilliardTable::lorentz(vec![Scatterer { center: Vec2::new(0.5, 0.5), radius: 0.3 }]).unwrap();
        let mm = MeasureModel::new(&t);
        let e = short_return_fraction_with(&mm, 10.0, 1, 1000, &SeedTree::new(1)).unwrap();
        assert_eq!(e.value, 1.0);
        assert!(short_return_fraction(&mm, 2, 10, &SeedTree::new(1)).is_err());
    }

    #[test]
    fn billiard_source_threshold_round_trip() {
        let t = two_disk();
        let mm = MeasureModel::new(&t);
        let ts = threshold_for_tau(&mm, 1000, 1.0, &PhasePoint::new(0, 0.3, 0.2)).unwrap();
        let src = BilliardSource::new(mm, &ts).unwrap();
        let mut rng = SeedTree::new(1).rng();
        for _ in 0..100 {
            assert!(src.in_target(&src.conditioned(&mut rng)));
        }
    }
}
