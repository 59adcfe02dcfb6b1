use crate::config::{stream_seed, RunConfig, ESTIMANDS};
use crate::dataset::read_dataset_path;
use crate::error::{CliError, CliResult};
use iie::eif::{IfKind, DELTA_RATIO};
use iie::estimators::{self, EstimateReport, NuisanceSource, Z95};
use iie::nuisance::{cross_fit, make_folds, FittedNuisance, FoldPlan};
use iie::oracle_verify::{run_battery, BatteryReport};
use iie::sensitivity::AssumptionId;
use iie::simlab::{run_convergence, run_table, write_convergence_csv, write_table_csv};
use iie::{ArmPair, IieError, NuisanceSet, Observation};
use serde::Serialize;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

/// Files written by one command, relative to the output directory.
pub type Written = Vec<String>;

fn create(dir: &Path, name: &str) -> CliResult<BufWriter<File>> {
    std::fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Shortest round-trip form; scientific notation for very small or large magnitudes.
fn num(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn write_rows(dir: &Path, name: &str, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(create(dir, name)?);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> CliResult<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn data_path(cfg: &RunConfig) -> CliResult<&Path> {
    cfg.data
        .path
        .as_deref()
        .ok_or_else(|| CliError::Config("data.path is required (or pass --data)".into()))
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> CliResult<Written> {
    let table = cfg.table()?;
    let report = run_table(&table)?;
    let mut w = create(out, "table.csv")?;
    write_table_csv(&mut w, &report)?;
    w.flush()?;
    write_json(out, "summary.json", &report)?;
    Ok(vec!["table.csv".into(), "summary.json".into()])
}

pub fn convergence(cfg: &RunConfig, out: &Path) -> CliResult<Written> {
    let rows = run_convergence(&cfg.convergence()?)?;
    let mut w = create(out, "convergence.csv")?;
    write_convergence_csv(&mut w, &rows)?;
    w.flush()?;
    Ok(vec!["convergence.csv".into()])
}

/// Cross-fitted nuisances for a dataset, with the fold seed derived from the
/// root seed so that library callers can reproduce the pipeline.
pub struct Pipeline {
    pub data: Vec<Observation>,
    pub plan: FoldPlan,
    pub models: Vec<FittedNuisance>,
    pub arms: ArmPair,
}

impl Pipeline {
    pub fn fit(cfg: &RunConfig, data: Vec<Observation>) -> CliResult<Self> {
        let arms = cfg.arms()?;
        let e = &cfg.estimator;
        let plan = make_folds(data.len(), e.folds, stream_seed(cfg.seed, "folds"), e.fold_mode)?;
        let models = cross_fit(&data, &plan, &cfg.nuisance()?)?;
        let p = Self { data, plan, models, arms };
        p.check_positivity(e.positivity_floor)?;
        Ok(p)
    }

    pub fn source(&self) -> NuisanceSource<'_> {
        NuisanceSource::CrossFit(&self.models, &self.plan)
    }

    /// Every row whose out-of-fold propensity or mediator cell is below `floor`.
    fn check_positivity(&self, floor: f64) -> CliResult<()> {
        let mut rows = Vec::new();
        for i in 0..self.data.len() {
            let bad = match self.source().at(&self.data, i) {
                Ok(np) => {
                    np.pi1 < floor || np.pi1 > 1.0 - floor || np.pj.iter().flatten().flatten().any(|&p| p < floor)
                }
                Err(IieError::Positivity { .. }) => true,
                Err(e) => return Err(e.into()),
            };
            if bad {
                rows.push(i + 1);
            }
        }
        if rows.is_empty() {
            Ok(())
        } else {
            Err(CliError::Positivity { floor, rows })
        }
    }
}

fn load(cfg: &RunConfig) -> CliResult<Pipeline> {
    Pipeline::fit(cfg, read_dataset_path(data_path(cfg)?)?)
}

const ESTIMATE_HEADER: [&str; 7] = ["estimator", "estimand", "point", "estimate", "se", "ci_lo", "ci_hi"];

fn estimate_row(estimator: &str, r: &EstimateReport) -> Vec<String> {
    vec![
        estimator.into(),
        r.estimand.clone(),
        opt(r.point),
        num(r.estimate),
        num(r.se),
        num(r.ci_lo),
        num(r.ci_hi),
    ]
}

#[derive(Serialize)]
struct EstimateDiagnostics {
    n: usize,
    folds: usize,
    max_inverse_weight: Option<f64>,
    flagged: bool,
    bandwidths: Vec<(String, Option<f64>, Option<f64>)>,
    skipped: Vec<String>,
}

/// Average proportion mediated as a ratio of one-step means, delta method.
fn one_step_ratio(p: &Pipeline) -> CliResult<EstimateReport> {
    let nps = p.source().points(&p.data)?;
    let num_v = estimators::pseudo_values(&p.data, &nps, IfKind::PsiM1, p.arms)?;
    let den_v = estimators::pseudo_values(&p.data, &nps, IfKind::Cate, p.arms)?;
    let n = num_v.len() as f64;
    let (a, b) = (num_v.iter().sum::<f64>() / n, den_v.iter().sum::<f64>() / n);
    if b.abs() < DELTA_RATIO {
        return Err(IieError::RatioDegenerate {
            value: b.abs(),
            floor: DELTA_RATIO,
            row: None,
        }
        .into());
    }
    let r = a / b;
    let lin: Vec<f64> = num_v.iter().zip(&den_v).map(|(u, d)| (u - r * d) / b).collect();
    let var = lin.iter().map(|v| v * v).sum::<f64>() / ((n - 1.0) * n);
    let mut rep = EstimateReport::new("prop_mediated_M1", None, r, var.sqrt(), iie::Provenance::Fitted);
    rep.diagnostics.n = p.data.len();
    Ok(rep)
}

pub fn estimate(cfg: &RunConfig, out: &Path) -> CliResult<Written> {
    for e in &cfg.estimator.estimands {
        if !ESTIMANDS.contains(&e.as_str()) {
            return Err(CliError::Config(format!("unknown estimand '{e}'; expected one of {ESTIMANDS:?}")));
        }
    }
    let p = load(cfg)?;
    let (src, arms, q) = (p.source(), p.arms, &cfg.estimator.queries);
    let (proj, smooth) = (cfg.projection(), cfg.smoother()?);
    let mut rows = Vec::new();
    let mut diag = EstimateDiagnostics {
        n: p.data.len(),
        folds: p.plan.k,
        max_inverse_weight: None,
        flagged: false,
        bandwidths: vec![],
        skipped: vec![],
    };
    for name in &cfg.estimator.estimands {
        match name.as_str() {
            "prop_mediated" => {
                match one_step_ratio(&p) {
                    Ok(r) => rows.push(estimate_row("one-step", &r)),
                    Err(CliError::Lib(e @ IieError::RatioDegenerate { .. })) => diag.skipped.push(format!("one-step: {e}")),
                    Err(e) => return Err(e),
                }
                match estimators::proportion_mediated(&p.data, src, arms, cfg.estimator.ratio_mode, &smooth, q) {
                    Ok(rs) => rows.extend(rs.iter().map(|r| estimate_row("dr-learner", r))),
                    Err(e @ IieError::RatioDegenerate { .. }) => diag.skipped.push(format!("dr-learner: {e}")),
                    Err(e) => return Err(e.into()),
                }
            }
            _ => {
                let kind = if name == "psi_m1" { IfKind::PsiM1 } else { IfKind::Cate };
                let os = estimators::one_step(&p.data, src, kind, arms)?;
                if kind == IfKind::PsiM1 {
                    diag.max_inverse_weight = os.diagnostics.max_inverse_weight;
                }
                diag.flagged |= os.diagnostics.flagged;
                rows.push(estimate_row("one-step", &os));
                for r in estimators::projection(&p.data, src, kind, arms, &proj, q)? {
                    rows.push(estimate_row("projection", &r));
                }
                for r in estimators::dr_learner(&p.data, src, kind, arms, &smooth, q)? {
                    diag.bandwidths.push((r.estimand.clone(), r.point, r.diagnostics.bandwidth));
                    rows.push(estimate_row("dr-learner", &r));
                }
            }
        }
    }
    for s in &diag.skipped {
        eprintln!("warning[ratio-degenerate]: {s}");
    }
    write_rows(out, "estimates.csv", &ESTIMATE_HEADER, &rows)?;
    write_json(out, "diagnostics.json", &diag)?;
    Ok(vec!["estimates.csv".into(), "diagnostics.json".into()])
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessRow {
    pub estimator: String,
    pub point: Option<f64>,
    /// Smallest grid value whose CI-augmented interval contains zero.
    pub tau: Option<f64>,
}

#[derive(Serialize)]
struct CellBenchmark {
    a: usize,
    m1: usize,
    m2: usize,
    rows: usize,
    adjusted: f64,
    unadjusted: f64,
    tau: f64,
}

#[derive(Serialize)]
struct BoundsSummary {
    assumption: String,
    robustness: Vec<RobustnessRow>,
    /// Deviation implied by dropping every covariate from the outcome regression.
    covariate_benchmark_tau: Option<f64>,
    covariate_benchmark: Vec<CellBenchmark>,
}

/// Compare covariate-averaged regressions with raw cell means.
fn covariate_benchmark(cfg: &RunConfig, p: &Pipeline, id: AssumptionId) -> CliResult<Vec<CellBenchmark>> {
    let all: Vec<usize> = (0..p.data.len()).collect();
    let fit = FittedNuisance::fit(&p.data, &all, &cfg.nuisance()?)?;
    let mut cells = Vec::new();
    for a in 0..2 {
        for m1 in 0..2 {
            for m2 in 0..2 {
                let ys: Vec<f64> = p
                    .data
                    .iter()
                    .filter(|o| (o.a as usize, o.m1 as usize, o.m2 as usize) == (a, m1, m2))
                    .map(|o| o.y)
                    .collect();
                if ys.is_empty() {
                    continue;
                }
                let unadjusted = ys.iter().sum::<f64>() / ys.len() as f64;
                let mut adjusted = 0.0;
                for o in &p.data {
                    adjusted += fit.at(&o.x)?.mu[a][m1][m2];
                }
                adjusted /= p.data.len() as f64;
                let tau = match id {
                    AssumptionId::A1 => (adjusted - unadjusted).abs(),
                    _ => {
                        let r = adjusted / unadjusted;
                        if r.is_finite() && r > 0.0 {
                            1.0 - r.min(1.0 / r)
                        } else {
                            f64::NAN
                        }
                    }
                };
                cells.push(CellBenchmark {
                    a,
                    m1,
                    m2,
                    rows: ys.len(),
                    adjusted,
                    unadjusted,
                    tau,
                });
            }
        }
    }
    Ok(cells)
}

pub fn bounds(cfg: &RunConfig, out: &Path) -> CliResult<Written> {
    let mut taus = cfg.sensitivity.taus.clone();
    if taus.is_empty() {
        return Err(CliError::Config("sensitivity.taus is empty".into()));
    }
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let id = AssumptionId::parse(&cfg.sensitivity.assumption)?;
    for &t in &taus {
        cfg.assumption(t)?;
    }
    let p = load(cfg)?;
    let (src, arms, q) = (p.source(), p.arms, &cfg.estimator.queries);
    let smooth = cfg.smoother()?;
    // (estimator, point) -> first tau whose interval reaches zero
    let mut robust: Vec<RobustnessRow> = std::iter::once(None)
        .chain(q.iter().map(|&v| Some(v)))
        .map(|point| RobustnessRow {
            estimator: if point.is_none() { "one-step" } else { "dr-learner" }.into(),
            point,
            tau: None,
        })
        .collect();
    let mut rows = Vec::new();
    let mut record = |slot: usize, tau: f64, lb: &EstimateReport, ub: &EstimateReport, rows: &mut Vec<Vec<String>>| {
        let (lo, hi) = (lb.estimate - Z95 * lb.se, ub.estimate + Z95 * ub.se);
        if robust[slot].tau.is_none() && lo <= 0.0 && 0.0 <= hi {
            robust[slot].tau = Some(tau);
        }
        rows.push(vec![
            num(tau),
            robust[slot].estimator.clone(),
            opt(lb.point),
            num(lb.estimate),
            num(ub.estimate),
            num(lb.se),
            num(ub.se),
            num(lo),
            num(hi),
        ]);
    };
    for &tau in &taus {
        let sa = cfg.assumption(tau)?;
        let os = estimators::one_step_bounds(&p.data, src, arms, &sa)?;
        record(0, tau, &os.lb, &os.ub, &mut rows);
        for (k, (lb, ub)) in estimators::dr_learner_bounds(&p.data, src, arms, &sa, &smooth, q)?.iter().enumerate() {
            record(k + 1, tau, lb, ub, &mut rows);
        }
    }
    write_rows(
        out,
        "bounds.csv",
        &["tau", "estimator", "point", "lb", "ub", "lb_se", "ub_se", "ci_lo", "ci_hi"],
        &rows,
    )?;
    let rob_rows: Vec<Vec<String>> = robust
        .iter()
        .map(|r| vec![r.estimator.clone(), opt(r.point), opt(r.tau)])
        .collect();
    write_rows(out, "robustness.csv", &["estimator", "point", "robustness_tau"], &rob_rows)?;
    let cells = covariate_benchmark(cfg, &p, id)?;
    let summary = BoundsSummary {
        assumption: format!("{id:?}"),
        robustness: robust,
        covariate_benchmark_tau: cells.iter().map(|c| c.tau).filter(|t| t.is_finite()).reduce(f64::max),
        covariate_benchmark: cells,
    };
    write_json(out, "bounds_summary.json", &summary)?;
    Ok(vec!["bounds.csv".into(), "robustness.csv".into(), "bounds_summary.json".into()])
}

/// Per-problem residual of the earlier eight-line decomposition against the
/// sum of its claimed missing terms.
pub fn discrepancy_text(report: &BatteryReport) -> String {
    let mut s = format!("{:>7} {:>14} {:>14} {:>14}\n", "problem", "residual", "missing", "gap");
    for (p, r, m, g) in report.discrepancy_table() {
        s.push_str(&format!("{p:>7} {r:>14.6e} {m:>14.6e} {g:>14.6e}\n"));
    }
    s
}

pub fn verify(cfg: &RunConfig, out: &Path) -> CliResult<Written> {
    let bc = cfg.battery();
    let report = run_battery(&bc)?;
    if let Some(t) = &bc.corrupt_term {
        let known = report
            .items
            .iter()
            .flat_map(|it| it.remainders.iter().chain(&it.gammas))
            .any(|r| r.terms.iter().any(|(name, _)| name == t));
        if !known {
            return Err(CliError::Config(format!("verify.corrupt_term '{t}' names no remainder term")));
        }
    }
    let mut rows = Vec::new();
    for it in &report.items {
        let exact = |name: &str| name == "termwise" || name == "combined";
        for r in &it.remainders {
            let status = if !exact(&r.name) {
                "descriptive"
            } else if r.passes() {
                "pass"
            } else {
                "fail"
            };
            rows.push(vec![it.problem.to_string(), it.grid_size.to_string(), r.name.clone(), num(r.lhs), num(r.rhs), num(r.residual), status.into()]);
        }
        for g in &it.gammas {
            let status = if g.passes() { "pass" } else { "fail" };
            rows.push(vec![it.problem.to_string(), it.grid_size.to_string(), g.name.clone(), num(g.lhs), num(g.rhs), num(g.residual), status.into()]);
        }
        for c in &it.centering {
            let status = if c.pass { "pass" } else { "fail" };
            rows.push(vec![
                it.problem.to_string(),
                it.grid_size.to_string(),
                format!("centering:{}", c.estimand),
                num(c.mean),
                num(c.target),
                num(c.mean - c.target),
                status.into(),
            ]);
        }
    }
    write_rows(out, "verify_checks.csv", &["problem", "grid_size", "check", "lhs", "rhs", "residual", "status"], &rows)?;
    let table: Vec<Vec<String>> = report
        .discrepancy_table()
        .iter()
        .map(|&(p, r, m, g)| vec![p.to_string(), num(r), num(m), num(g)])
        .collect();
    write_rows(out, "discrepancy.csv", &["problem", "residual", "missing", "residual_minus_missing"], &table)?;
    print!("{}", discrepancy_text(&report));
    if !report.passed() {
        let first = &report.failures[0];
        let term = bc.corrupt_term.clone().unwrap_or_else(|| {
            let check = first.split_once(": ").map_or(first.as_str(), |s| s.1);
            check.split_whitespace().next().unwrap_or(check).to_string()
        });
        return Err(CliError::Verify {
            term,
            detail: format!("{} failing check(s), first: {first}", report.failures.len()),
        });
    }
    Ok(vec!["verify_checks.csv".into(), "discrepancy.csv".into()])
}

pub fn write_positivity_rows(out: &Path, rows: &[usize]) -> CliResult<()> {
    let rows: Vec<Vec<String>> = rows.iter().map(|r| vec![r.to_string()]).collect();
    write_rows(out, "positivity_rows.csv", &["row"], &rows)
}

#[derive(Serialize)]
pub struct Manifest {
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub threads: usize,
    pub wall_time_s: f64,
    pub outputs: Vec<String>,
}

pub fn write_manifest(out: &Path, m: &Manifest) -> CliResult<PathBuf> {
    write_json(out, "manifest.json", m)?;
    Ok(out.join("manifest.json"))
}
