//! Acceptance criteria 1-11 with pinned tolerances.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Result};
use rand::Rng;
use serde_json::{json, Value};

use repp_core::geometry::{time_reversal, BilliardTable, PhasePoint, TableSpec};
use repp_core::induced::{InducedSystem, InducingSpec};
use repp_core::measure::{map_chunks, theta_cdf, MeasureModel};
use repp_core::repp::threshold_for_tau;
use repp_core::rng::SeedTree;
use repp_core::stats::{
    chi_square_uniform, dprime_estimates, ks_one_sample, short_return_fraction, BilliardSource, PoissonReference,
};

use crate::config::{ExperimentConfig, HorizonClass, InducedSettings, Levels, Mode, Targets};
use crate::experiment::{annulus_case, median, run_with, Record, RunOptions, RunParts};
use crate::{oracle, report, tables};

pub const ORACLE_TOL: f64 = 1e-9;
pub const ORACLE_LAUNCHES: usize = 1_000;
/// Fraction of launches the oracle must resolve inside its scan block.
pub const ORACLE_MIN_RESOLVED: f64 = 0.5;
pub const REVERSIBILITY_TOL: f64 = 1e-9;
pub const REVERSIBILITY_POINTS: usize = 10_000;
/// Largest fraction of reversibility points lost to degenerate collisions.
pub const REVERSIBILITY_MAX_SKIPPED: f64 = 0.01;
pub const PUSHFORWARD_SAMPLES: usize = 100_000;
pub const PUSHFORWARD_LEVEL: f64 = 0.001;
pub const PUSHFORWARD_BINS: usize = 20;
pub const THRESHOLD_CASES: usize = 10;
pub const THRESHOLD_RTOL: f64 = 1e-6;
pub const CLOSED_FORM_TOL: f64 = 1e-3;
pub const CLOSED_FORM_MAX_RADIUS: f64 = 1e-3;
pub const KAC_SAMPLES: usize = 100_000;
pub const KAC_Z_MAX: f64 = 3.0;
pub const STADIUM_ARC_INV_MASS: f64 = 1.6366;
pub const SCATTERER_INV_MASS: f64 = 2.0;
pub const POISSON_TARGETS: usize = 20;
pub const POISSON_N: u64 = 100_000;
pub const POISSON_TAU: f64 = 1.0;
pub const POISSON_REALIZATIONS: usize = 2_000;
pub const POISSON_WINDOWS: [f64; 3] = [0.5, 1.0, 2.0];
pub const TV_MAX: f64 = 0.05;
pub const KS_ALPHA: f64 = 0.01;
pub const PASS_FRACTION: f64 = 0.9;
/// `Poisson(1)` probabilities of 0, 1 and 2 events.
pub const POISSON_PMF_T1: [f64; 3] = [0.3679, 0.3679, 0.1839];
pub const POISSON_PMF_TOL: f64 = 5e-5;
pub const DPRIME_N: u64 = 100_000;
pub const DPRIME_TAU: f64 = 0.05;
pub const DPRIME_K: [u64; 3] = [5, 10, 20];
pub const DPRIME_SAMPLES: usize = 100_000;
pub const DPRIME_GENERIC_TARGETS: usize = 3;
pub const DPRIME_SIGMAS: f64 = 3.0;
pub const DPRIME_CLUSTER_FACTOR: f64 = 10.0;
pub const ANNULUS_CASES: usize = 10;
pub const ANNULUS_EPS: (f64, f64) = (1e-4, 1e-2);
pub const ANNULUS_SAMPLES: usize = 100_000;
pub const SHORT_RETURN_K: [u64; 3] = [100, 1_000, 10_000];
pub const SHORT_RETURN_SEEDS: usize = 10;
pub const SHORT_RETURN_SAMPLES: usize = 10_000;
/// Thread counts compared by the determinism criterion.
pub const DETERMINISM_THREADS: (usize, usize) = (1, 3);
/// Set to rerun the full-scale suite for the determinism criterion.
pub const FULL_DETERMINISM_ENV: &str = "REPP_ACCEPT_FULL_DETERMINISM";

const LIMIT_C1: Duration = Duration::from_secs(10);
const LIMIT_C2: Duration = Duration::from_secs(10);
const LIMIT_C3: Duration = Duration::from_secs(30);
const LIMIT_C5: Duration = Duration::from_secs(120);
/// Criteria 6 and 7 are budgeted for four threads.
const LIMIT_POISSON_4T: Duration = Duration::from_secs(15 * 60);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Full,
    /// Every criterion at a small fraction of its sample sizes; verdicts are
    /// not meaningful, the output is used to check determinism.
    Reduced,
}

/// Sample sizes of one scale.
#[derive(Clone, Debug)]
struct Sizes {
    launches: usize,
    reversibility: usize,
    pushforward: usize,
    kac: usize,
    targets: usize,
    poisson_n: u64,
    realizations: usize,
    dprime_n: u64,
    dprime_samples: usize,
    annulus_cases: usize,
    annulus_samples: usize,
    short_k: Vec<u64>,
    short_seeds: usize,
    short_samples: usize,
}

impl Sizes {
    fn of(scale: Scale) -> Self {
        match scale {
            Scale::Full => Self {
                launches: ORACLE_LAUNCHES,
                reversibility: REVERSIBILITY_POINTS,
                pushforward: PUSHFORWARD_SAMPLES,
                kac: KAC_SAMPLES,
                targets: POISSON_TARGETS,
                poisson_n: POISSON_N,
                realizations: POISSON_REALIZATIONS,
                dprime_n: DPRIME_N,
                dprime_samples: DPRIME_SAMPLES,
                annulus_cases: ANNULUS_CASES,
                annulus_samples: ANNULUS_SAMPLES,
                short_k: SHORT_RETURN_K.to_vec(),
                short_seeds: SHORT_RETURN_SEEDS,
                short_samples: SHORT_RETURN_SAMPLES,
            },
            Scale::Reduced => Self {
                launches: 40,
                reversibility: 200,
                pushforward: 2_000,
                kac: 2_000,
                targets: 2,
                poisson_n: 1_000,
                realizations: 500,
                dprime_n: 10_000,
                dprime_samples: 200,
                annulus_cases: 2,
                annulus_samples: 1_000,
                short_k: SHORT_RETURN_K.to_vec(),
                short_seeds: 2,
                short_samples: 30,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub limit: Option<Duration>,
}

impl Outcome {
    pub fn within_limit(&self) -> bool {
        self.limit.is_none_or(|l| self.elapsed <= l)
    }

    /// Verdict including the runtime budget.
    pub fn ok(&self) -> bool {
        self.passed && self.within_limit()
    }

    pub fn line(&self) -> String {
        let limit = self.limit.map_or_else(String::new, |l| format!(" / limit {:.0} s", l.as_secs_f64()));
        format!(
            "criterion {:>2}: {} {} - {} [{:.1} s{limit}]",
            self.id,
            if self.ok() { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct AcceptRun {
    pub outcomes: Vec<Outcome>,
    /// Deterministic records of criteria 1-10.
    pub records: Vec<Record>,
}

impl AcceptRun {
    pub fn all_passed(&self) -> bool {
        !self.outcomes.is_empty() && self.outcomes.iter().all(Outcome::ok)
    }
}

pub const NAMES: [&str; 11] = [
    "geometry oracle equivalence",
    "reversibility",
    "measure preservation",
    "threshold exactness",
    "Kac mean return time",
    "Poisson limit, finite-horizon Lorentz gas",
    "Poisson limit, stadium via arc inducing",
    "D' clustering diagnostics",
    "annulus measure bound",
    "short returns",
    "determinism across thread counts",
];

/// Runs `f` on a dedicated rayon pool with `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build()?;
    Ok(pool.install(f))
}

struct Criterion {
    passed: bool,
    detail: String,
    records: Vec<Record>,
}

fn tag(records: Vec<Record>, id: u8) -> Vec<Record> {
    records
        .into_iter()
        .map(|mut r| {
            if let Value::Object(m) = &mut r.params {
                m.insert("criterion".into(), id.into());
            } else {
                r.params = json!({"criterion": id, "value": r.params});
            }
            r
        })
        .collect()
}

fn table_cases() -> Vec<(&'static str, TableSpec)> {
    vec![
        ("finite_horizon", tables::finite_horizon_spec()),
        ("two_disk", tables::two_disk_spec()),
        ("stadium", tables::stadium_spec()),
    ]
}

fn sample_points(mm: &MeasureModel<'_>, n: usize, seeds: &SeedTree) -> Vec<PhasePoint> {
    map_chunks(n, seeds, |rng, len| (0..len).map(|_| mm.sample(rng)).collect::<Vec<_>>()).concat()
}

fn c1(seeds: &SeedTree, sz: &Sizes) -> Criterion {
    use rayon::prelude::*;
    let mut passed = true;
    let mut parts = Vec::new();
    let mut records = Vec::new();
    for (name, spec) in table_cases() {
        let table = tables::build(&spec);
        let mm = MeasureModel::new(&table);
        let s = seeds.named(name);
        let points = sample_points(&mm, sz.launches, &s);
        let diffs: Vec<Option<f64>> = points.par_iter().map(|p| oracle::discrepancy(&table, p)).collect();
        let resolved: Vec<f64> = diffs.iter().flatten().copied().collect();
        let worst = resolved.iter().copied().fold(0.0, f64::max);
        let ok = worst < ORACLE_TOL && resolved.len() as f64 >= ORACLE_MIN_RESOLVED * points.len() as f64;
        passed &= ok;
        parts.push(format!("{name}: max {worst:.1e} over {}/{}", resolved.len(), points.len()));
        records.push(Record::new("oracle_equivalence", json!({"table": name}), worst, 0.0, s.seed(), resolved.len() as u64));
    }
    Criterion { passed, detail: parts.join("; "), records }
}

fn reversal_defect(table: &BilliardTable, p: &PhasePoint) -> Option<f64> {
    let q = table.billiard_map(p).ok()?.outgoing;
    let back = table.billiard_map(&time_reversal(q)).ok()?.outgoing;
    Some(table.phase_distance(&back, &time_reversal(*p)))
}

fn c2(seeds: &SeedTree, sz: &Sizes) -> Criterion {
    use rayon::prelude::*;
    let mut passed = true;
    let mut parts = Vec::new();
    let mut records = Vec::new();
    for (name, spec) in table_cases() {
        let table = tables::build(&spec);
        let mm = MeasureModel::new(&table);
        let s = seeds.named(name);
        let points = sample_points(&mm, sz.reversibility, &s);
        let defects: Vec<Option<f64>> = points.par_iter().map(|p| reversal_defect(&table, p)).collect();
        let done: Vec<f64> = defects.iter().flatten().copied().collect();
        let worst = done.iter().copied().fold(0.0, f64::max);
        let skipped = points.len() - done.len();
        let ok = worst < REVERSIBILITY_TOL && skipped as f64 <= REVERSIBILITY_MAX_SKIPPED * points.len() as f64;
        passed &= ok;
        parts.push(format!("{name}: max {worst:.1e}, {skipped} skipped"));
        records.push(Record::new("reversibility", json!({"table": name, "skipped": skipped}), worst, 0.0, s.seed(), done.len() as u64));
    }
    Criterion { passed, detail: parts.join("; "), records }
}

fn c3(seeds: &SeedTree, sz: &Sizes) -> Criterion {
    let mut passed = true;
    let mut parts = Vec::new();
    let mut records = Vec::new();
    for (name, spec) in table_cases() {
        let table = tables::build(&spec);
        let mm = MeasureModel::new(&table);
        let s = seeds.named(name);
        let offsets: Vec<f64> = table
            .components()
            .iter()
            .scan(0.0, |acc, c| {
                let o = *acc;
                *acc += c.length;
                Some(o)
            })
            .collect();
        let images: Vec<PhasePoint> = map_chunks(sz.pushforward, &s, |rng, len| {
            let mut out = Vec::with_capacity(len);
            while out.len() < len {
                if let Ok(e) = table.billiard_map(&mm.sample(rng)) {
                    out.push(e.outgoing);
                }
            }
            out
        })
        .concat();
        let thetas: Vec<f64> = images.iter().map(|p| p.theta).collect();
        let ks = ks_one_sample(&thetas, theta_cdf);
        let b = PUSHFORWARD_BINS;
        let mut counts = vec![0u64; b * b];
        let total = table.total_boundary_length();
        for p in &images {
            let u = ((offsets[p.component] + p.r) / total * b as f64).floor().clamp(0.0, (b - 1) as f64) as usize;
            let v = ((1.0 + p.theta.sin()) / 2.0 * b as f64).floor().clamp(0.0, (b - 1) as f64) as usize;
            counts[u * b + v] += 1;
        }
        let chi = chi_square_uniform(&counts);
        let ok = ks.p_value > PUSHFORWARD_LEVEL && chi.p_value > PUSHFORWARD_LEVEL;
        passed &= ok;
        parts.push(format!("{name}: KS p {:.3}, chi2 p {:.3}", ks.p_value, chi.p_value));
        records.push(Record::from_test("pushforward_theta_ks", json!({"table": name}), &ks, s.seed()));
        records.push(Record::from_test("pushforward_binned_chi_square", json!({"table": name, "bins": b}), &chi, s.seed()));
    }
    Criterion { passed, detail: parts.join("; "), records }
}

fn c4(seeds: &SeedTree) -> Result<Criterion> {
    let table = tables::build(&tables::finite_horizon_spec());
    let mm = MeasureModel::new(&table);
    let mut rng = seeds.rng();
    let mut records = Vec::new();
    let (mut worst, mut worst_closed, mut closed_cases) = (0.0f64, 0.0f64, 0usize);
    let mut cases = 0;
    while cases < THRESHOLD_CASES {
        let zeta = mm.sample(&mut rng);
        let n = 10f64.powf(rng.random_range(4.0..8.0)).round() as u64;
        let tau = rng.random_range(0.1..5.0);
        let Ok(ts) = threshold_for_tau(&mm, n, tau, &zeta) else { continue };
        let back = n as f64 * mm.ball_measure(&zeta, ts.radius_n)?;
        let rel = (back / tau - 1.0).abs();
        worst = worst.max(rel);
        let mut closed = None;
        if ts.radius_n < CLOSED_FORM_MAX_RADIUS {
            let u = 0.5 * (n as f64 * std::f64::consts::PI * mm.c_m() * zeta.theta.cos() / tau).ln();
            let d = (u - ts.u_n).abs();
            worst_closed = worst_closed.max(d);
            closed_cases += 1;
            closed = Some(u);
        }
        records.push(Record::new(
            "threshold_exactness",
            json!({"n": n, "tau": tau, "zeta": zeta, "u_n": ts.u_n, "closed_form_u": closed}),
            rel,
            0.0,
            seeds.seed(),
            1,
        ));
        cases += 1;
    }
    let passed = worst < THRESHOLD_RTOL && closed_cases > 0 && worst_closed < CLOSED_FORM_TOL;
    Ok(Criterion {
        passed,
        detail: format!(
            "max rel err {worst:.1e} over {cases} cases; closed form max |du| {worst_closed:.1e} over {closed_cases}"
        ),
        records,
    })
}

fn c5(seeds: &SeedTree, sz: &Sizes) -> Result<Criterion> {
    let two_disk = tables::build(&tables::two_disk_spec());
    let stadium = tables::build(&tables::stadium_spec());
    let cases: Vec<(&str, &BilliardTable, InducingSpec, Option<f64>)> = vec![
        ("whole_space", &two_disk, InducingSpec::All, Some(1.0)),
        ("half_space", &two_disk, InducingSpec::HalfSpaceTheta { min: 0.0, max: FRAC_PI_2 }, Some(2.0)),
        ("single_scatterer", &two_disk, InducingSpec::Component { ids: vec![0] }, Some(SCATTERER_INV_MASS)),
        ("stadium_arcs", &stadium, InducingSpec::StadiumArcs, Some(STADIUM_ARC_INV_MASS)),
    ];
    let mut passed = true;
    let mut parts = Vec::new();
    let mut records = Vec::new();
    for (name, table, spec, predicted) in cases {
        let mm = MeasureModel::new(table);
        let sys = InducedSystem::new(table, spec.clone())?;
        let s = seeds.named(name);
        let k = sys.kac_check(&mm, sz.kac, &s)?;
        passed &= k.z_score <= KAC_Z_MAX;
        parts.push(format!("{name}: mean {:.4}, 1/mu(M) {:.4}, z {:.2}", k.mean_return, k.inv_mass, k.z_score));
        records.push(Record::new(
            "kac_check",
            json!({"inducing": spec, "mean_return": k.mean_return, "inv_mass": k.inv_mass,
                "predicted_inv_mass": predicted, "exact_inv_mass": 1.0 / sys.exact_mass()}),
            k.z_score,
            0.0,
            s.seed(),
            k.n_samples,
        ));
    }
    Ok(Criterion { passed, detail: parts.join("; "), records })
}

fn poisson_config(table: TableSpec, horizon: HorizonClass, sz: &Sizes, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        table,
        horizon_class: horizon,
        mode: Mode::FullMap,
        inducing: None,
        targets: Targets::Random(sz.targets),
        n_values: vec![sz.poisson_n],
        tau_values: vec![POISSON_TAU],
        realizations_per_cell: sz.realizations,
        windows: POISSON_WINDOWS.to_vec(),
        seed,
        levels: Levels { tv_max: TV_MAX, ks_alpha: KS_ALPHA, pass_fraction: PASS_FRACTION, ..Levels::default() },
        output_dir: None,
        induced: InducedSettings { kac_samples: 0, tail_samples: 0, lifted_starts: 0, ..InducedSettings::default() },
        diagnostics: Default::default(),
        separation_steps: 10,
        gap_horizon: 50.0,
    }
}

fn poisson_criterion(cfg: &ExperimentConfig, progress: bool) -> Result<Criterion> {
    let parts = RunParts { cells: true, tests: true, induced_checks: false, diagnostics: false };
    let out = run_with(cfg, parts, RunOptions { progress }).map_err(|e| anyhow!(e))?;
    let agg = out.report.aggregate.clone().ok_or_else(|| anyhow!("no aggregate"))?;
    let mut worst_tv = 0.0f64;
    let mut worst_cmp = 0.0f64;
    for c in out.report.cells.iter().filter(|c| !c.near_periodic) {
        for w in &c.windows {
            worst_tv = worst_tv.max(w.tv);
            worst_cmp = worst_cmp.max(w.full_vs_induced_tv.unwrap_or(0.0));
        }
    }
    let mut detail = format!(
        "{}/{} non-flagged targets pass ({} flagged, {} errored), max TV {worst_tv:.4}",
        agg.passed, agg.considered, agg.near_periodic, agg.errored
    );
    if cfg.mode == Mode::Induced {
        detail.push_str(&format!(", max full-vs-induced TV {worst_cmp:.4}"));
    }
    Ok(Criterion { passed: agg.verdict, detail, records: out.report.records })
}

fn c6(seeds: &SeedTree, sz: &Sizes, progress: bool) -> Result<Criterion> {
    let cfg = poisson_config(tables::finite_horizon_spec(), HorizonClass::Finite, sz, seeds.seed());
    let mut c = poisson_criterion(&cfg, progress)?;
    let reference = PoissonReference::new(1.0);
    let pmf_ok = POISSON_PMF_T1.iter().enumerate().all(|(k, &p)| (reference.pmf(k as u64) - p).abs() < POISSON_PMF_TOL);
    c.passed &= pmf_ok;
    c.detail.push_str(if pmf_ok { ", reference pmf ok" } else { ", reference pmf mismatch" });
    Ok(c)
}

fn c7(seeds: &SeedTree, sz: &Sizes, progress: bool) -> Result<Criterion> {
    let mut cfg = poisson_config(tables::stadium_spec(), HorizonClass::Infinite, sz, seeds.seed());
    cfg.mode = Mode::Induced;
    cfg.inducing = Some(InducingSpec::StadiumArcs);
    poisson_criterion(&cfg, progress)
}

fn c8(seeds: &SeedTree, sz: &Sizes) -> Result<Criterion> {
    let table = tables::build(&tables::finite_horizon_spec());
    let mm = MeasureModel::new(&table);
    let (n, tau) = (sz.dprime_n, DPRIME_TAU);
    let mut rng = seeds.named("targets").rng();
    let mut targets = Vec::new();
    while targets.len() < DPRIME_GENERIC_TARGETS {
        let z = mm.sample(&mut rng);
        if let Ok(ts) = threshold_for_tau(&mm, n, tau, &z) {
            targets.push(ts);
        }
    }
    let periodic = threshold_for_tau(&mm, n, tau, &tables::finite_horizon_periodic_point())?;
    let mut records = Vec::new();
    let mut generic = vec![Vec::new(); DPRIME_K.len()];
    let mut passed = true;
    let mut worst_sigma = 0.0f64;
    for (i, ts) in targets.iter().enumerate() {
        let s = seeds.named("generic").child(i as u64);
        let est = dprime_estimates(&BilliardSource::new(mm, ts)?, n, &DPRIME_K, sz.dprime_samples, &s)?;
        for (j, (&k, e)) in DPRIME_K.iter().zip(&est).enumerate() {
            let level = tau * tau / k as f64;
            let diff = (e.value - level).abs();
            let sigmas = if e.stderr > 0.0 { diff / e.stderr } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
            worst_sigma = worst_sigma.max(sigmas);
            passed &= sigmas <= DPRIME_SIGMAS;
            generic[j].push(e.value);
            records.push(Record::from_estimate(
                "dprime_estimate",
                json!({"zeta": ts.zeta, "n": n, "tau": tau, "k": k, "iid_level": level, "periodic": false}),
                e,
                s.seed(),
            ));
        }
    }
    let s = seeds.named("periodic");
    let est = dprime_estimates(&BilliardSource::new(mm, &periodic)?, n, &DPRIME_K, sz.dprime_samples, &s)?;
    let mut ratios = Vec::new();
    for ((&k, e), g) in DPRIME_K.iter().zip(&est).zip(&mut generic) {
        let ratio = e.value / median(g);
        passed &= ratio >= DPRIME_CLUSTER_FACTOR;
        ratios.push(format!("{ratio:.1}"));
        records.push(Record::from_estimate(
            "dprime_estimate",
            json!({"zeta": periodic.zeta, "n": n, "tau": tau, "k": k, "iid_level": tau * tau / k as f64,
                "periodic": true, "ratio_to_generic_median": ratio}),
            e,
            s.seed(),
        ));
    }
    Ok(Criterion {
        passed,
        detail: format!(
            "generic max deviation {worst_sigma:.2} sigma; periodic/generic ratios {} for k = {:?}",
            ratios.join(", "),
            DPRIME_K
        ),
        records,
    })
}

fn c9(seeds: &SeedTree, sz: &Sizes) -> Result<Criterion> {
    let cases =
        [("finite_horizon", tables::finite_horizon_spec(), HorizonClass::Finite), ("two_disk", tables::two_disk_spec(), HorizonClass::Infinite)];
    let mut passed = true;
    let mut records = Vec::new();
    let mut parts = Vec::new();
    for (name, spec, horizon) in cases {
        let table = tables::build(&spec);
        let mm = MeasureModel::new(&table);
        let s = seeds.named(name);
        let mut rng = s.rng();
        let mut worst_ratio = 0.0f64;
        for case in 0..sz.annulus_cases {
            let (z, r, eps) = annulus_case(&mm, ANNULUS_EPS.0, ANNULUS_EPS.1, &mut rng);
            let cs = s.child(case as u64);
            let a = repp_core::stats::annulus_measure_check(&mm, &z, r, eps, horizon.xi(), sz.annulus_samples, &cs)?;
            passed &= a.bound_ok;
            worst_ratio = worst_ratio.max(a.estimate / a.bound);
            records.push(Record::new(
                "annulus_measure_check",
                json!({"table": name, "zeta": z, "r": r, "eps": eps, "xi": horizon.xi(), "bound": a.bound,
                    "bound_ok": a.bound_ok, "quadrature": a.exact}),
                a.estimate,
                a.stderr,
                cs.seed(),
                sz.annulus_samples as u64,
            ));
        }
        parts.push(format!("{name} (xi {}): max estimate/bound {worst_ratio:.3}", horizon.xi()));
    }
    Ok(Criterion { passed, detail: parts.join("; "), records })
}

fn c10(seeds: &SeedTree, sz: &Sizes) -> Result<Criterion> {
    let table = tables::build(&tables::finite_horizon_spec());
    let mm = MeasureModel::new(&table);
    let mut records = Vec::new();
    let mut medians = Vec::new();
    for &k in &sz.short_k {
        let mut vals = Vec::new();
        for rep in 0..sz.short_seeds {
            let s = seeds.child(k).child(rep as u64);
            let e = short_return_fraction(&mm, k, sz.short_samples, &s)?;
            records.push(Record::from_estimate("short_return_fraction", json!({"k": k, "replicate": rep}), &e, s.seed()));
            vals.push(e.value);
        }
        let m = median(&mut vals);
        records.push(Record::new(
            "short_return_median",
            json!({"k": k, "replicates": sz.short_seeds}),
            m,
            0.0,
            seeds.child(k).seed(),
            (sz.short_samples * sz.short_seeds) as u64,
        ));
        medians.push(m);
    }
    let passed = medians.windows(2).all(|w| w[1] <= w[0]);
    let shown: Vec<String> = medians.iter().map(|m| format!("{m:.4}")).collect();
    Ok(Criterion { passed, detail: format!("medians {} for k = {:?}", shown.join(", "), sz.short_k), records })
}

fn limit(id: u8, threads: usize) -> Option<Duration> {
    match id {
        1 => Some(LIMIT_C1),
        2 => Some(LIMIT_C2),
        3 => Some(LIMIT_C3),
        5 => Some(LIMIT_C5),
        6 | 7 => Some(LIMIT_POISSON_4T * 4 / threads.max(1) as u32),
        _ => None,
    }
}

fn run_one(id: u8, root: &SeedTree, sz: &Sizes, progress: bool) -> Result<Criterion> {
    let seeds = root.named(&format!("criterion-{id}"));
    match id {
        1 => Ok(c1(&seeds, sz)),
        2 => Ok(c2(&seeds, sz)),
        3 => Ok(c3(&seeds, sz)),
        4 => c4(&seeds),
        5 => c5(&seeds, sz),
        6 => c6(&seeds, sz, progress),
        7 => c7(&seeds, sz, progress),
        8 => c8(&seeds, sz),
        9 => c9(&seeds, sz),
        10 => c10(&seeds, sz),
        _ => Err(anyhow!("unknown criterion {id}")),
    }
}

/// Options of an acceptance run.
#[derive(Clone, Copy, Debug)]
pub struct AcceptOptions {
    pub seed: u64,
    pub scale: Scale,
    pub threads: usize,
    /// Print each outcome line as soon as it is known.
    pub echo: bool,
    pub progress: bool,
}

/// Runs the listed criteria among 1-10 on a pool of `opts.threads` workers.
pub fn run_criteria(ids: &[u8], opts: AcceptOptions) -> Result<AcceptRun> {
    let root = SeedTree::new(opts.seed);
    let sz = Sizes::of(opts.scale);
    with_threads(opts.threads, || {
        let mut run = AcceptRun::default();
        for &id in ids {
            let start = Instant::now();
            let (passed, detail, records) = match run_one(id, &root, &sz, opts.progress) {
                Ok(c) => (c.passed, c.detail, c.records),
                Err(e) => (false, format!("error: {e}"), Vec::new()),
            };
            let outcome = Outcome {
                id,
                name: NAMES[id as usize - 1],
                passed,
                detail,
                elapsed: start.elapsed(),
                limit: limit(id, opts.threads),
            };
            if opts.echo {
                println!("{}", outcome.line());
            }
            run.records.extend(tag(records, id));
            run.outcomes.push(outcome);
        }
        run
    })
}

/// Criterion 11: criteria 1-10 rerun with two thread counts produce identical
/// `results.jsonl` bytes. `reference` reuses records already computed with
/// `reference_threads` at the same seed and scale.
pub fn determinism(
    seed: u64,
    scale: Scale,
    reference: Option<(&[Record], usize)>,
    out_dir: Option<&Path>,
) -> Outcome {
    let start = Instant::now();
    let ids: Vec<u8> = (1..=10).collect();
    let opts = |threads| AcceptOptions { seed, scale, threads, echo: false, progress: false };
    let (a, threads_a) = match reference {
        Some((r, t)) => (Ok(report::results_bytes(r)), t),
        None => (run_criteria(&ids, opts(DETERMINISM_THREADS.0)).map(|r| report::results_bytes(&r.records)), DETERMINISM_THREADS.0),
    };
    let threads_b = if threads_a == DETERMINISM_THREADS.1 { DETERMINISM_THREADS.0 } else { DETERMINISM_THREADS.1 };
    let b = run_criteria(&ids, opts(threads_b)).map(|r| report::results_bytes(&r.records));
    let (passed, detail) = match (a, b) {
        (Ok(a), Ok(b)) => {
            if let Some(dir) = out_dir {
                let d = dir.join("determinism");
                let _ = std::fs::create_dir_all(&d);
                let _ = std::fs::write(d.join(format!("results-{threads_a}-threads.jsonl")), &a);
                let _ = std::fs::write(d.join(format!("results-{threads_b}-threads.jsonl")), &b);
            }
            let scale_name = if scale == Scale::Full { "full" } else { "reduced" };
            if a == b {
                (true, format!("{scale_name} scale, {threads_a} vs {threads_b} threads: {} identical bytes", a.len()))
            } else {
                let at = a.iter().zip(&b).position(|(x, y)| x != y).unwrap_or(a.len().min(b.len()));
                (false, format!("{scale_name} scale, {threads_a} vs {threads_b} threads: first difference at byte {at}"))
            }
        }
        (Err(e), _) | (_, Err(e)) => (false, format!("error: {e}")),
    };
    Outcome { id: 11, name: NAMES[10], passed, detail, elapsed: start.elapsed(), limit: None }
}

/// Runs criteria 1-11 and writes `results.jsonl` and `summary.md` to `out_dir`.
pub fn run_suite(opts: AcceptOptions, out_dir: Option<&Path>) -> Result<AcceptRun> {
    run_selected(&(1..=11).collect::<Vec<u8>>(), opts, out_dir)
}

/// Runs the listed criteria; criterion 11 reuses the records of 1-10 when all
/// of them were run at a scale it compares.
pub fn run_selected(ids: &[u8], opts: AcceptOptions, out_dir: Option<&Path>) -> Result<AcceptRun> {
    if let Some(bad) = ids.iter().find(|&&i| !(1..=11).contains(&i)) {
        return Err(anyhow!("unknown criterion {bad}"));
    }
    let base: Vec<u8> = ids.iter().copied().filter(|&i| i <= 10).collect();
    let mut run = run_criteria(&base, opts)?;
    if ids.contains(&11) {
        let full_rerun = std::env::var(FULL_DETERMINISM_ENV).is_ok_and(|v| v == "1");
        let complete = base.len() == 10;
        let c11 = if opts.scale == Scale::Full && !full_rerun {
            determinism(opts.seed, Scale::Reduced, None, out_dir)
        } else if complete {
            determinism(opts.seed, opts.scale, Some((&run.records, opts.threads)), out_dir)
        } else {
            determinism(opts.seed, opts.scale, None, out_dir)
        };
        if opts.echo {
            println!("{}", c11.line());
        }
        run.outcomes.push(c11);
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        report::write_records(&dir.join(report::RESULTS_FILE), &run.records)?;
        std::fs::write(dir.join(report::SUMMARY_FILE), summary(&run, opts))?;
    }
    Ok(run)
}

pub fn summary(run: &AcceptRun, opts: AcceptOptions) -> String {
    let mut s = format!(
        "# Acceptance summary\n\n- seed: {}\n- scale: {:?}\n- threads: {}\n\n| criterion | verdict | detail | seconds | limit |\n|---|---|---|---|---|\n",
        opts.seed, opts.scale, opts.threads
    );
    for o in &run.outcomes {
        s.push_str(&format!(
            "| {} {} | {} | {} | {:.1} | {} |\n",
            o.id,
            o.name,
            if o.ok() { "PASS" } else { "FAIL" },
            o.detail,
            o.elapsed.as_secs_f64(),
            o.limit.map_or("-".into(), |l| format!("{:.0}", l.as_secs_f64()))
        ));
    }
    s.push_str(&format!("\nOverall: {}\n", if run.all_passed() { "PASS" } else { "FAIL" }));
    s
}
