//! Experiment orchestration: targets, threshold cells, realizations and checks.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use repp_core::geometry::{BilliardTable, GeometryError, PhasePoint};
use repp_core::induced::{InducedSystem, KacCheck, PairedStop, TailCurve};
use repp_core::measure::MeasureModel;
use repp_core::repp::{
    exceedances_until, min_orbit_separation, repp_count, threshold_for_tau, EventSeries, ReppError,
    ThresholdSchedule,
};
use repp_core::rng::SeedTree;
use repp_core::stats::{
    self, annulus_measure_check, correlation_decay, d3_estimate, dprime_estimates, ks_exponential, linear_fit,
    poisson_count_test, short_return_fraction, tv_distance, BilliardSource, Bump, Estimate, IidSurrogate, TestResult,
};

use crate::config::{ExperimentConfig, Mode, Targets};

/// Consecutive degenerate orbits tolerated per realization.
const MAX_RESTARTS: u32 = 1000;

/// Draws allowed when searching for admissible random targets.
const MAX_TARGET_DRAWS: u64 = 100_000;

/// One line of `results.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Record {
    pub op: String,
    pub params: Value,
    pub estimate: f64,
    pub stderr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    pub seed: u64,
    pub n_samples: u64,
}

impl Record {
    pub fn new(op: &str, params: Value, estimate: f64, stderr: f64, seed: u64, n_samples: u64) -> Self {
        Self { op: op.into(), params, estimate, stderr, p_value: None, seed, n_samples }
    }

    pub fn with_p(mut self, p: f64) -> Self {
        self.p_value = Some(p);
        self
    }

    pub fn from_estimate(op: &str, params: Value, e: &Estimate, seed: u64) -> Self {
        Self::new(op, params, e.value, e.stderr, seed, e.n_samples)
    }

    pub fn from_test(op: &str, params: Value, t: &TestResult, seed: u64) -> Self {
        Self::new(op, params, t.statistic, 0.0, seed, t.sample_size).with_p(t.p_value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetInfo {
    pub index: usize,
    pub zeta: PhasePoint,
    /// `min_{0<=i<j<=N0} d(T^i zeta, T^j zeta)`, `None` if the orbit degenerated.
    pub separation: Option<f64>,
    pub redraws: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WindowResult {
    pub t: f64,
    pub tv: f64,
    pub chi_square_p: f64,
    pub mean_count: f64,
    /// TV between full-map and induced counts (induced mode only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub full_vs_induced_tv: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LiftedSummary {
    pub returns: usize,
    pub starts: usize,
    pub median_max_rel_dev: f64,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellReport {
    pub cell: usize,
    pub target: usize,
    pub n: u64,
    pub tau: f64,
    pub schedule: Option<ThresholdSchedule>,
    pub near_periodic: bool,
    pub error: Option<String>,
    pub windows: Vec<WindowResult>,
    pub ks: Option<TestResult>,
    pub gaps: usize,
    pub censored_gaps: usize,
    pub restarts: u64,
    pub lifted: Option<LiftedSummary>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TailSummary {
    /// Log-log slope of the survival function on `[n_max / 10, n_max]`.
    pub loglog_slope: Option<f64>,
    /// Correlation coefficient of a linear fit to `ln survival` against `n`.
    pub semilog_r: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub cells: usize,
    pub near_periodic: usize,
    pub errored: usize,
    pub considered: usize,
    pub passed: usize,
    pub pass_rate: f64,
    pub verdict: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub version: String,
    pub seed: u64,
    pub mode: Mode,
    pub inducing_mass: Option<f64>,
    pub targets: Vec<TargetInfo>,
    pub cells: Vec<CellReport>,
    pub kac: Option<KacCheck>,
    pub tail: Option<TailSummary>,
    pub aggregate: Option<Aggregate>,
    pub records: Vec<Record>,
}

/// One row of `events.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EventRow {
    pub run_id: String,
    pub seed: u64,
    pub raw_time: u64,
    pub rescaled_time: f64,
}

/// One row of `counts.csv`: empirical and Poisson probabilities of `N([0, t)) = k`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CountRow {
    pub cell: usize,
    pub system: &'static str,
    pub n: u64,
    pub tau: f64,
    pub t: f64,
    pub k: u64,
    pub observed_fraction: f64,
    pub poisson_pmf: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub events: Vec<EventRow>,
    pub counts: Vec<CountRow>,
    pub tail: Option<TailCurve>,
}

/// Which parts of a config to execute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunParts {
    pub cells: bool,
    pub tests: bool,
    pub induced_checks: bool,
    pub diagnostics: bool,
}

impl RunParts {
    pub const ALL: RunParts = RunParts { cells: true, tests: true, induced_checks: true, diagnostics: true };
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub progress: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("{0}")]
    Runtime(String),
}

fn runtime<E: std::fmt::Display>(e: E) -> RunError {
    RunError::Runtime(e.to_string())
}

/// Everything shared by the cells of one run.
struct Context<'t> {
    cfg: &'t ExperimentConfig,
    table: &'t BilliardTable,
    mm: MeasureModel<'t>,
    sys: Option<InducedSystem<'t>>,
    root: SeedTree,
}

impl Context<'_> {
    fn mass(&self) -> f64 {
        self.sys.as_ref().map_or(1.0, |s| s.exact_mass())
    }

    fn admissible(&self, zeta: &PhasePoint) -> bool {
        for &n in &self.cfg.n_values {
            for &tau in &self.cfg.tau_values {
                match threshold_for_tau(&self.mm, n, tau, zeta) {
                    Ok(ts) => {
                        if let Some(sys) = &self.sys {
                            if !sys.contains_ball(zeta, ts.radius_n) {
                                return false;
                            }
                        }
                    }
                    Err(_) => return false,
                }
            }
        }
        true
    }

    fn targets(&self) -> Result<Vec<TargetInfo>, RunError> {
        let points: Vec<(PhasePoint, u64)> = match &self.cfg.targets {
            Targets::Explicit(v) => v.iter().map(|&p| (p, 0)).collect(),
            Targets::Random(count) => {
                let mut rng = self.root.named("targets").rng();
                let mut out = Vec::with_capacity(*count);
                for _ in 0..*count {
                    let mut redraws = 0;
                    let zeta = loop {
                        let z = match &self.sys {
                            Some(sys) => sys.sample_mu_m(&self.mm, &mut rng).map_err(runtime)?.0,
                            None => self.mm.sample(&mut rng),
                        };
                        if self.admissible(&z) {
                            break z;
                        }
                        redraws += 1;
                        if redraws >= MAX_TARGET_DRAWS {
                            return Err(RunError::Runtime("no admissible target found".into()));
                        }
                    };
                    out.push((zeta, redraws));
                }
                out
            }
        };
        Ok(points
            .into_iter()
            .enumerate()
            .map(|(index, (zeta, redraws))| TargetInfo {
                index,
                zeta,
                separation: min_orbit_separation(self.table, &zeta, self.cfg.separation_steps).ok(),
                redraws,
            })
            .collect())
    }
}

/// Outcome of one orbit.
struct Realization {
    seed: u64,
    base: EventSeries,
    induced: Option<EventSeries>,
    restarts: u64,
}

fn realize(ctx: &Context<'_>, ts: &ThresholdSchedule, seeds: SeedTree) -> Result<Realization, RunError> {
    let t_max = ctx.cfg.windows.iter().copied().fold(0.0, f64::max);
    let max_base = (ctx.cfg.gap_horizon * ts.v_n).ceil() as u64;
    let mut rng = seeds.rng();
    for restarts in 0..=MAX_RESTARTS as u64 {
        let attempt: Result<Realization, RunError> = match &ctx.sys {
            None => {
                let x0 = ctx.mm.sample(&mut rng);
                let min_base = (t_max * ts.v_n).ceil() as u64;
                exceedances_until(ctx.table, ts, &x0, min_base, 2, max_base)
                    .map(|base| Realization { seed: seeds.seed(), base, induced: None, restarts })
                    .map_err(geometry_or_restart)
            }
            Some(sys) => {
                let mass = sys.exact_mass();
                let x0 = sys.sample_mu_m(&ctx.mm, &mut rng).map_err(runtime)?.0;
                let stop = PairedStop {
                    min_base_horizon: (t_max * ts.v_n).ceil() as u64,
                    min_induced_horizon: (t_max * ts.v_n * mass).ceil() as u64,
                    min_induced_events: 2,
                    max_base_horizon: max_base,
                };
                match sys.paired_exceedances(ts, mass, &x0, stop) {
                    Ok(p) => Ok(Realization { seed: seeds.seed(), base: p.base, induced: Some(p.induced), restarts }),
                    Err(repp_core::induced::InducedError::Geometry(e)) => Err(geometry_or_restart(e)),
                    Err(e) => Err(runtime(e)),
                }
            }
        };
        match attempt {
            Err(RunError::Runtime(msg)) if msg == RESTART => continue,
            other => return other,
        }
    }
    Err(RunError::Runtime(format!("{MAX_RESTARTS} consecutive degenerate orbits")))
}

const RESTART: &str = "\u{0}restart";

fn geometry_or_restart(e: GeometryError) -> RunError {
    if e.is_degenerate() {
        RunError::Runtime(RESTART.into())
    } else {
        runtime(e)
    }
}

fn first_gap(es: &EventSeries) -> Option<f64> {
    (es.len() >= 2).then(|| es.rescaled_times[1] - es.rescaled_times[0])
}

fn window_counts(es: &EventSeries, t: f64) -> u64 {
    repp_count(es, &[(0.0, t)]).expect("single interval")
}

fn histogram(counts: &[u64]) -> Vec<f64> {
    let kmax = counts.iter().copied().max().unwrap_or(0) as usize;
    let mut h = vec![0.0; kmax + 1];
    counts.iter().for_each(|&c| h[c as usize] += 1.0);
    let n = counts.len() as f64;
    h.iter_mut().for_each(|x| *x /= n);
    h
}

struct CellOutput {
    report: CellReport,
    events: Vec<EventRow>,
    counts: Vec<CountRow>,
    records: Vec<Record>,
}

fn run_cell(
    ctx: &Context<'_>,
    parts: RunParts,
    cell: usize,
    target: &TargetInfo,
    n: u64,
    tau: f64,
    c_hat: f64,
) -> CellOutput {
    let cfg = ctx.cfg;
    let mut report = CellReport {
        cell,
        target: target.index,
        n,
        tau,
        schedule: None,
        near_periodic: false,
        error: None,
        windows: Vec::new(),
        ks: None,
        gaps: 0,
        censored_gaps: 0,
        restarts: 0,
        lifted: None,
        passed: false,
    };
    let mut out = CellOutput { report: report.clone(), events: Vec::new(), counts: Vec::new(), records: Vec::new() };
    let ts = match threshold_for_tau(&ctx.mm, n, tau, &target.zeta) {
        Ok(ts) => ts,
        Err(e) => {
            report.error = Some(e.to_string());
            out.report = report;
            return out;
        }
    };
    report.schedule = Some(ts);
    report.near_periodic = target.separation.is_none_or(|s| ts.radius_n >= s / 2.0);
    let cell_seeds = ctx.root.named("cells").child(cell as u64);
    let reals: Vec<Result<Realization, RunError>> = (0..cfg.realizations_per_cell)
        .into_par_iter()
        .map(|i| realize(ctx, &ts, cell_seeds.child(i as u64)))
        .collect();
    let mut ok = Vec::with_capacity(reals.len());
    for r in reals {
        match r {
            Ok(r) => ok.push(r),
            Err(e) => {
                report.error = Some(e.to_string());
                out.report = report;
                return out;
            }
        }
    }
    report.restarts = ok.iter().map(|r| r.restarts).sum();
    let cell_params = json!({"cell": cell, "target": target.index, "n": n, "tau": tau,
        "zeta": target.zeta, "radius_n": ts.radius_n});
    let t_max = cfg.windows.iter().copied().fold(0.0, f64::max);
    for (i, r) in ok.iter().enumerate() {
        let mut push = |es: &EventSeries, suffix: &str, limit: f64| {
            for (&raw, &g) in es.raw_times.iter().zip(&es.rescaled_times) {
                if g < limit {
                    out.events.push(EventRow {
                        run_id: format!("c{cell}-r{i}{suffix}"),
                        seed: r.seed,
                        raw_time: raw,
                        rescaled_time: g,
                    });
                }
            }
        };
        push(&r.base, "", t_max);
        if let Some(ind) = &r.induced {
            push(ind, "-induced", t_max);
        }
    }
    // the series whose limit law is under test
    let primary: Vec<&EventSeries> = ok.iter().map(|r| r.induced.as_ref().unwrap_or(&r.base)).collect();
    let system = if ctx.sys.is_some() { "induced" } else { "full" };
    let mut passed = true;
    for &t in &cfg.windows {
        let counts: Vec<u64> = primary.iter().map(|es| window_counts(es, t)).collect();
        let full: Option<Vec<u64>> =
            ctx.sys.as_ref().map(|_| ok.iter().map(|r| window_counts(&r.base, t)).collect());
        let reference = stats::PoissonReference::new(t);
        let emit = |out: &mut CellOutput, sys_name: &'static str, counts: &[u64]| {
            let h = histogram(counts);
            let kmax = (h.len() as u64 - 1).max(reference.truncation().min(20));
            for k in 0..=kmax {
                out.counts.push(CountRow {
                    cell,
                    system: sys_name,
                    n,
                    tau,
                    t,
                    k,
                    observed_fraction: h.get(k as usize).copied().unwrap_or(0.0),
                    poisson_pmf: reference.pmf(k),
                });
            }
        };
        emit(&mut out, system, &counts);
        if let Some(f) = &full {
            emit(&mut out, "full", f);
        }
        let mean_count = counts.iter().sum::<u64>() as f64 / counts.len() as f64;
        let mut w = WindowResult { t, tv: f64::NAN, chi_square_p: f64::NAN, mean_count, full_vs_induced_tv: None };
        if parts.tests {
            match poisson_count_test(&counts, t) {
                Ok(pt) => {
                    w.tv = pt.result.statistic;
                    w.chi_square_p = pt.result.p_value;
                    passed &= w.tv < cfg.levels.tv_max;
                    out.records.push(
                        Record::new("poisson_count_test", json!({"cell": cell_params, "t": t, "system": system}),
                            pt.result.statistic, 0.0, cell_seeds.seed(), pt.result.sample_size)
                        .with_p(pt.result.p_value),
                    );
                }
                Err(e) => {
                    report.error.get_or_insert(e.to_string());
                    passed = false;
                }
            }
            if let Some(f) = &full {
                let tv = tv_distance(f, &counts);
                w.full_vs_induced_tv = Some(tv);
                passed &= tv < cfg.levels.tv_max;
                out.records.push(Record::new(
                    "compare_full_vs_induced",
                    json!({"cell": cell_params, "t": t}),
                    tv,
                    0.0,
                    cell_seeds.seed(),
                    counts.len() as u64,
                ));
            }
        }
        report.windows.push(w);
    }
    let gaps: Vec<f64> = primary.iter().filter_map(|es| first_gap(es)).collect();
    report.gaps = gaps.len();
    report.censored_gaps = primary.len() - gaps.len();
    if parts.tests {
        match ks_exponential(&gaps) {
            Ok(ks) => {
                passed &= ks.p_value > cfg.levels.ks_alpha;
                out.records.push(Record::from_test(
                    "ks_exponential",
                    json!({"cell": cell_params, "system": system}),
                    &ks,
                    cell_seeds.seed(),
                ));
                report.ks = Some(ks);
            }
            Err(e) => {
                report.error.get_or_insert(e.to_string());
                passed = false;
            }
        }
    }
    if parts.induced_checks && cfg.induced.lifted_starts > 0 {
        if let Some(sys) = &ctx.sys {
            let lifted = lifted_summary(ctx, sys, &ts, cell_seeds.named("lifted"), c_hat);
            out.records.push(Record::new(
                "lifted_return_comparison",
                json!({"cell": cell_params, "returns": lifted.returns, "starts": lifted.starts, "c": c_hat}),
                lifted.median_max_rel_dev,
                0.0,
                cell_seeds.named("lifted").seed(),
                (lifted.starts - lifted.failures) as u64,
            ));
            report.lifted = Some(lifted);
        }
    }
    report.passed = parts.tests && passed && report.error.is_none();
    out.report = report;
    out
}

fn lifted_summary(
    ctx: &Context<'_>,
    sys: &InducedSystem<'_>,
    ts: &ThresholdSchedule,
    seeds: SeedTree,
    c_hat: f64,
) -> LiftedSummary {
    let k = ctx.cfg.induced.lifted_returns;
    let starts = ctx.cfg.induced.lifted_starts;
    let max_steps = (ctx.cfg.gap_horizon * k as f64 * ts.v_n).ceil() as u64;
    let devs: Vec<Option<f64>> = (0..starts)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds.child(i as u64).rng();
            for _ in 0..MAX_RESTARTS {
                let x0 = ctx.mm.sample_in_ball(&ts.zeta, ts.radius_n, &mut rng);
                match sys.lifted_return_comparison(ts, &x0, k, 1.0 / c_hat, max_steps) {
                    Ok(c) => return Some(c.max_rel_dev),
                    Err(repp_core::induced::InducedError::Geometry(e)) if e.is_degenerate() => continue,
                    Err(_) => return None,
                }
            }
            None
        })
        .collect();
    let mut ok: Vec<f64> = devs.iter().flatten().copied().collect();
    LiftedSummary { returns: k, starts, median_max_rel_dev: median(&mut ok), failures: starts - ok.len() }
}

pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn tail_summary(tail: &TailCurve) -> TailSummary {
    let n_max = tail.points.last().map_or(0, |p| p.n);
    let decade: Vec<(f64, f64)> = tail
        .points
        .iter()
        .filter(|p| p.n >= (n_max / 10).max(1) && p.survival > 0.0)
        .map(|p| ((p.n as f64).ln(), p.survival.ln()))
        .collect();
    let (x, y): (Vec<f64>, Vec<f64>) = decade.into_iter().unzip();
    let semi: Vec<(f64, f64)> =
        tail.points.iter().filter(|p| p.n >= 1 && p.survival > 0.0).map(|p| (p.n as f64, p.survival.ln())).collect();
    let (sx, sy): (Vec<f64>, Vec<f64>) = semi.into_iter().unzip();
    TailSummary {
        loglog_slope: linear_fit(&x, &y).map(|f| f.slope),
        semilog_r: linear_fit(&sx, &sy).map(|f| f.r.abs()),
    }
}

fn aggregate(cells: &[CellReport], pass_fraction: f64) -> Aggregate {
    let near_periodic = cells.iter().filter(|c| c.near_periodic && c.error.is_none()).count();
    let errored = cells.iter().filter(|c| c.error.is_some()).count();
    let considered = cells.iter().filter(|c| !c.near_periodic || c.error.is_some()).count();
    let passed = cells.iter().filter(|c| !c.near_periodic && c.passed).count();
    let pass_rate = if considered == 0 { 0.0 } else { passed as f64 / considered as f64 };
    Aggregate {
        cells: cells.len(),
        near_periodic,
        errored,
        considered,
        passed,
        pass_rate,
        verdict: considered > 0 && pass_rate >= pass_fraction,
    }
}

/// Runs the selected parts of an experiment.
pub fn run_with(cfg: &ExperimentConfig, parts: RunParts, opts: RunOptions) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    let table = cfg.build_table()?;
    let sys = match (&cfg.mode, &cfg.inducing) {
        (Mode::Induced, Some(spec)) => {
            Some(InducedSystem::new(&table, spec.clone()).map_err(runtime)?.with_return_cap(cfg.induced.return_cap))
        }
        _ => None,
    };
    let ctx = Context { cfg, table: &table, mm: MeasureModel::new(&table), sys, root: SeedTree::new(cfg.seed) };
    let mut records = Vec::new();
    let mut report = RunReport {
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        mode: cfg.mode,
        inducing_mass: ctx.sys.as_ref().map(|s| s.exact_mass()),
        targets: Vec::new(),
        cells: Vec::new(),
        kac: None,
        tail: None,
        aggregate: None,
        records: Vec::new(),
    };
    let mut tail_curve = None;
    let mut c_hat = 1.0 / ctx.mass();
    if parts.induced_checks {
        if let Some(sys) = &ctx.sys {
            if cfg.induced.kac_samples > 0 {
                let seeds = ctx.root.named("kac");
                let kac = sys.kac_check(&ctx.mm, cfg.induced.kac_samples, &seeds).map_err(runtime)?;
                records.push(
                    Record::new(
                        "kac_check",
                        json!({"inducing": cfg.inducing, "mean_return": kac.mean_return,
                            "mean_stderr": kac.mean_stderr, "inv_mass": kac.inv_mass,
                            "inv_mass_stderr": kac.inv_mass_stderr, "exact_inv_mass": 1.0 / sys.exact_mass()}),
                        kac.z_score,
                        0.0,
                        seeds.seed(),
                        kac.n_samples,
                    ),
                );
                c_hat = kac.inv_mass;
                report.kac = Some(kac);
            }
            if cfg.induced.tail_samples > 0 {
                let seeds = ctx.root.named("tail");
                let tail =
                    sys.return_tail(&ctx.mm, cfg.induced.tail_samples, cfg.induced.tail_n_max, &seeds).map_err(runtime)?;
                let summary = tail_summary(&tail);
                records.push(Record::new(
                    "return_tail",
                    json!({"inducing": cfg.inducing, "n_max": cfg.induced.tail_n_max,
                        "loglog_slope": summary.loglog_slope, "semilog_r": summary.semilog_r}),
                    tail.points.last().map_or(0.0, |p| p.survival),
                    tail.points.last().map_or(0.0, |p| p.stderr),
                    seeds.seed(),
                    tail.n_samples,
                ));
                report.tail = Some(summary);
                tail_curve = Some(tail);
            }
        }
    }
    let mut events = Vec::new();
    let mut counts = Vec::new();
    if parts.cells || parts.diagnostics {
        report.targets = ctx.targets()?;
    }
    if parts.cells {
        let mut cell = 0;
        for target in &report.targets {
            for &n in &cfg.n_values {
                for &tau in &cfg.tau_values {
                    let out = run_cell(&ctx, parts, cell, target, n, tau, c_hat);
                    if opts.progress {
                        eprintln!(
                            "cell {cell}: target {} n={n} tau={tau} passed={} near_periodic={}{}",
                            target.index,
                            out.report.passed,
                            out.report.near_periodic,
                            out.report.error.as_deref().map(|e| format!(" error: {e}")).unwrap_or_default()
                        );
                    }
                    events.extend(out.events);
                    counts.extend(out.counts);
                    records.extend(out.records);
                    report.cells.push(out.report);
                    cell += 1;
                }
            }
        }
        if parts.tests {
            report.aggregate = Some(aggregate(&report.cells, cfg.levels.pass_fraction));
        }
    }
    if parts.diagnostics {
        records.extend(run_diagnostics(&ctx, &report.targets)?);
    }
    report.records = records;
    Ok(RunOutput { report, events, counts, tail: tail_curve })
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput, RunError> {
    run_with(cfg, RunParts::ALL, RunOptions::default())
}

/// The full-vs-induced section of an induced-mode run: per cell and window,
/// the TV distance between the two count distributions.
pub fn compare_full_vs_induced(cfg: &ExperimentConfig) -> Result<Vec<(usize, f64, f64)>, RunError> {
    if cfg.mode != Mode::Induced {
        return Err(RunError::Runtime("compare_full_vs_induced needs induced mode".into()));
    }
    let parts = RunParts { cells: true, tests: true, induced_checks: false, diagnostics: false };
    let out = run_with(cfg, parts, RunOptions::default())?;
    Ok(out
        .report
        .cells
        .iter()
        .flat_map(|c| c.windows.iter().filter_map(move |w| w.full_vs_induced_tv.map(|tv| (c.cell, w.t, tv))))
        .collect())
}

fn run_diagnostics(ctx: &Context<'_>, targets: &[TargetInfo]) -> Result<Vec<Record>, RunError> {
    let cfg = ctx.cfg;
    let d = &cfg.diagnostics;
    let mut records = Vec::new();
    let root = ctx.root.named("diagnostics");
    let (n, tau) = (cfg.n_values[0], cfg.tau_values[0]);
    let zeta = targets.first().map(|t| t.zeta);
    let ts = match zeta {
        Some(z) if d.dprime.is_some() || d.d3.is_some() => Some(threshold_for_tau(&ctx.mm, n, tau, &z).map_err(runtime)?),
        _ => None,
    };
    if let (Some(s), Some(ts)) = (&d.dprime, &ts) {
        let seeds = root.named("dprime");
        let src = BilliardSource::new(ctx.mm, ts).map_err(runtime)?;
        let est = dprime_estimates(&src, n, &s.k_values, s.samples, &seeds).map_err(runtime)?;
        let iid = dprime_estimates(&IidSurrogate::new(n, tau), n, &s.k_values, s.samples, &seeds.named("iid"))
            .map_err(runtime)?;
        for ((k, e), i) in s.k_values.iter().zip(&est).zip(&iid) {
            records.push(Record::from_estimate(
                "dprime_estimate",
                json!({"zeta": ts.zeta, "n": n, "tau": tau, "k": k, "iid_level": tau * tau / *k as f64,
                    "iid_surrogate": i.value, "iid_surrogate_stderr": i.stderr}),
                e,
                seeds.seed(),
            ));
        }
    }
    if let (Some(s), Some(ts)) = (&d.d3, &ts) {
        let src = BilliardSource::new(ctx.mm, ts).map_err(runtime)?;
        for &gap in &s.gaps {
            let seeds = root.named("d3").child(gap);
            let e = d3_estimate(&src, gap, &s.window, s.samples, &seeds).map_err(runtime)?;
            records.push(Record::from_estimate(
                "d3_estimate",
                json!({"zeta": ts.zeta, "n": n, "tau": tau, "t_gap": gap, "window": s.window}),
                &e,
                seeds.seed(),
            ));
        }
    }
    if let (Some(s), Some(z)) = (&d.correlation, zeta) {
        let seeds = root.named("correlation");
        let bump = Bump { center: z, width: s.bump_width };
        let f = |p: &PhasePoint| bump.eval(ctx.table, p);
        let series = correlation_decay(&ctx.mm, f, f, &s.lags, s.samples, &seeds).map_err(runtime)?;
        for ((lag, v), se) in series.lags.iter().zip(&series.values).zip(&series.stderrs) {
            records.push(Record::new(
                "correlation_decay",
                json!({"zeta": z, "bump_width": s.bump_width, "lag": lag}),
                *v,
                *se,
                seeds.seed(),
                s.samples as u64,
            ));
        }
        records.push(Record::new(
            "correlation_fit",
            json!({"exp": series.exp_fit, "poly": series.poly_fit}),
            series.exp_fit.map_or(f64::NAN, |f| f.goodness) - series.poly_fit.map_or(f64::NAN, |f| f.goodness),
            0.0,
            seeds.seed(),
            s.samples as u64,
        ));
    }
    if let Some(s) = &d.annulus {
        let seeds = root.named("annulus");
        let mut rng = seeds.rng();
        let xi = cfg.horizon_class.xi();
        for case in 0..s.cases {
            let (z, r, eps) = annulus_case(&ctx.mm, s.eps_min, s.eps_max, &mut rng);
            let cs = seeds.child(case as u64);
            let a = annulus_measure_check(&ctx.mm, &z, r, eps, xi, s.samples, &cs).map_err(runtime)?;
            records.push(Record::new(
                "annulus_measure_check",
                json!({"zeta": z, "r": r, "eps": eps, "xi": xi, "bound": a.bound, "bound_ok": a.bound_ok,
                    "quadrature": a.exact}),
                a.estimate,
                a.stderr,
                cs.seed(),
                s.samples as u64,
            ));
        }
    }
    if let Some(s) = &d.short_returns {
        for &k in &s.k_values {
            let mut vals = Vec::new();
            for rep in 0..s.seeds {
                let seeds = root.named("short_returns").child(k).child(rep as u64);
                let e = short_return_fraction(&ctx.mm, k, s.samples, &seeds).map_err(runtime)?;
                records.push(Record::from_estimate(
                    "short_return_fraction",
                    json!({"k": k, "replicate": rep, "budget": stats::short_return_budget(k)}),
                    &e,
                    seeds.seed(),
                ));
                vals.push(e.value);
            }
            records.push(Record::new(
                "short_return_median",
                json!({"k": k, "replicates": s.seeds}),
                median(&mut vals),
                0.0,
                root.named("short_returns").child(k).seed(),
                (s.samples * s.seeds) as u64,
            ));
        }
    }
    Ok(records)
}

/// A random `(zeta, r, eps)` with `eps` log-uniform in `[eps_min, eps_max]`,
/// `5 eps <= r` and `r + eps` below the injectivity radius.
pub fn annulus_case<R: Rng + ?Sized>(
    mm: &MeasureModel<'_>,
    eps_min: f64,
    eps_max: f64,
    rng: &mut R,
) -> (PhasePoint, f64, f64) {
    loop {
        let z = mm.sample(rng);
        let eps = (eps_min.ln() + rng.random::<f64>() * (eps_max / eps_min).ln()).exp();
        let limit = (mm.injectivity_radius(&z).unwrap_or(0.0) * 0.9 - eps).min(0.2);
        if limit <= 5.0 * eps {
            continue;
        }
        let r = 5.0 * eps + rng.random::<f64>() * (limit - 5.0 * eps);
        return (z, r, eps);
    }
}

impl From<ReppError> for RunError {
    fn from(e: ReppError) -> Self {
        runtime(e)
    }
}
