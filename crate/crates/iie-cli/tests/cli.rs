use iie::eif::IfKind;
use iie::estimators::{self, NuisanceSource};
use iie::nuisance::{cross_fit, make_folds, FoldMode, NuisanceConfig};
use iie::simlab::{average_truth, dgp_sample, rep_rng, sample_observed, selection_dgp, Dgp};
use iie::{ArmPair, Observation};
use iie_cli::dataset::{read_dataset, write_dataset};
use iie_cli::{stream_seed, RunConfig};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn iie(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iie"))
        .args(args)
        .env_remove("IIE_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_data(dir: &Path, name: &str, data: &[Observation]) -> PathBuf {
    let p = dir.join(name);
    write_dataset(std::fs::File::create(&p).unwrap(), data).unwrap();
    p
}

/// Data records of a CLI CSV.
fn rows(file: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(file).unwrap().records().map(|r| r.unwrap()).collect()
}

fn find<'a>(rs: &'a [csv::StringRecord], cols: &[(usize, &str)]) -> &'a csv::StringRecord {
    rs.iter()
        .find(|r| cols.iter().all(|&(k, v)| &r[k] == v))
        .unwrap_or_else(|| panic!("no row {cols:?}"))
}

fn f(s: &str) -> f64 {
    s.parse().unwrap()
}

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = RunConfig::default();
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    cfg.estimator.bandwidth = Some(0.35);
    cfg.verify.corrupt_term = Some("m1decomp.4".into());
    cfg.data.path = Some("x.csv".into());
    cfg.sensitivity.taus = vec![0.0, 0.015, 0.1];
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert_ne!(cfg.hash(), RunConfig::default().hash());
}

#[test]
fn overrides_reach_nested_keys() {
    let sets: Vec<String> = ["simulate.reps=7", "estimator.bandwidth=0.5", "sensitivity.assumption=A1", "simulate.convergence.ns=[100, 200]"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let cfg = RunConfig::load(None, &sets).unwrap();
    assert_eq!(cfg.simulate.reps, 7);
    assert_eq!(cfg.estimator.bandwidth, Some(0.5));
    assert_eq!(cfg.sensitivity.assumption, "A1");
    assert_eq!(cfg.simulate.convergence.ns, vec![100, 200]);
    assert!(RunConfig::load(None, &["estimator.nope=1".into()]).is_err());
    assert!(RunConfig::load(None, &["seed".into()]).is_err());
}

#[test]
fn config_file_sections_are_read() {
    let dir = TempDir::new().unwrap();
    let file = dir.path().join("run.toml");
    std::fs::write(
        &file,
        "seed = 9\n[estimator]\nqueries = [1.0]\n[sensitivity]\nassumption = \"A3\"\n[simulate]\nreps = 3\n[verify]\nn_problems = 2\n",
    )
    .unwrap();
    let cfg = RunConfig::load(Some(&file), &["simulate.reps=4".into()]).unwrap();
    assert_eq!((cfg.seed, cfg.simulate.reps, cfg.verify.n_problems), (9, 4, 2));
    assert_eq!(cfg.estimator.queries, vec![1.0]);
    std::fs::write(&file, "[typo]\nx = 1\n").unwrap();
    let o = iie(&["verify", "--config", path(&file)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[config]"));
}

fn small_sim(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["simulate", "--out", path(out), "--set", "simulate.n=400", "--set", "simulate.reps=8"];
    args.extend_from_slice(extra);
    iie(&args)
}

#[test]
fn simulate_writes_the_table_deterministically() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(small_sim(&a, &[]).status.success());
    assert!(small_sim(&b, &["--threads", "2"]).status.success());
    let ta = std::fs::read(a.join("table.csv")).unwrap();
    assert_eq!(ta, std::fs::read(b.join("table.csv")).unwrap());
    let text = String::from_utf8(ta).unwrap();
    assert!(text.starts_with("Point,Strategy,Projection,Truth,Bias,Std,RMSE,Coverage"));
    assert_eq!(text.lines().count(), 1 + 3 * 2);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 1);
    assert_eq!(m["command"], "simulate");
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert!(m["wall_time_s"].as_f64().unwrap() > 0.0);
    assert!(m["version"].is_string());
    let s: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["cells"].as_array().unwrap().len(), 6);
}

#[test]
fn simulate_exit_codes() {
    let dir = TempDir::new().unwrap();
    let o = small_sim(dir.path(), &["--set", "simulate.reps=0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[invalid]"));
    // A bandwidth far below the data spacing leaves no neighbours, so every
    // replication fails.
    let o = small_sim(
        dir.path(),
        &["--set", "estimator.bandwidth=1e-9", "--set", "simulate.strategies=[\"dr-learner\"]"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[failure-cap]"));
    let o = small_sim(dir.path(), &["--set", "simulate.strategies=[\"magic\"]"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn thread_count_falls_back_to_environment() {
    let dir = TempDir::new().unwrap();
    let run = |v: &str| {
        Command::new(env!("CARGO_BIN_EXE_iie"))
            .args(["verify", "--out", path(dir.path()), "--set", "verify.n_problems=1"])
            .env("IIE_THREADS", v)
            .output()
            .unwrap()
    };
    assert!(run("1").status.success());
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["threads"], 1);
    assert_eq!(run("many").status.code(), Some(2));
}

#[test]
fn dataset_schema_is_enforced() {
    let dir = TempDir::new().unwrap();
    let good = "y,a,m1,m2,x1,x2\n0.5,1,0,1,0.1,2\n";
    assert_eq!(read_dataset(good.as_bytes()).unwrap()[0].x, vec![0.1, 2.0]);
    for (text, column) in [
        ("y,a,m1,x1\n0,1,0,0.1\n", "m2"),
        ("y,a,m1,m2\n0,1,0,1\n", "x1"),
        ("y,a,m1,m2,x2\n0,1,0,1,3\n", "x1"),
        ("y,a,m1,m2,x1\n0,2,0,1,3\n", "a"),
        ("y,a,m1,m2,x1\nnan,1,0,1,3\n", "y"),
        ("y,a,m1,m2,x1\n0,1,0,1,abc\n", "x1"),
    ] {
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, text).unwrap();
        let o = iie(&["estimate", "--data", path(&p), "--out", path(dir.path())]);
        assert_eq!(o.status.code(), Some(2), "{text}");
        let e = stderr(&o);
        assert!(e.starts_with("error[schema]") && e.contains(&format!("'{column}'")), "{e}");
    }
}

#[test]
fn estimate_matches_the_library_pipeline_bitwise() {
    let dir = TempDir::new().unwrap();
    let data = dgp_sample(1500, 5);
    let file = write_data(dir.path(), "d.csv", &data);
    let out = dir.path().join("out");
    let o = iie(&["estimate", "--data", path(&file), "--out", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rs = rows(&out.join("estimates.csv"));

    let plan = make_folds(data.len(), 2, stream_seed(1, "folds"), FoldMode::SwapAverage).unwrap();
    let models = cross_fit(&data, &plan, &NuisanceConfig::linear()).unwrap();
    let src = NuisanceSource::CrossFit(&models, &plan);
    let arms = ArmPair::default();
    let os = estimators::one_step(&data, src, IfKind::PsiM1, arms).unwrap();
    assert_eq!(f(&find(&rs, &[(0, "one-step"), (1, "psi_M1")])[3]), os.estimate);
    assert_eq!(f(&find(&rs, &[(0, "one-step"), (1, "psi_M1")])[4]), os.se);
    let dr = estimators::dr_learner(&data, src, IfKind::PsiM1, arms, &Default::default(), &[0.0, 2.0]).unwrap();
    assert_eq!(f(&find(&rs, &[(0, "dr-learner"), (1, "psi_M1"), (2, "2")])[3]), dr[1].estimate);
    let pr = estimators::projection(&data, src, IfKind::Cate, arms, &Default::default(), &[0.0]).unwrap();
    assert_eq!(f(&find(&rs, &[(0, "projection"), (1, "psi_total"), (2, "0")])[3]), pr[0].estimate);
    assert!(rs.iter().any(|r| &r[1] == "prop_mediated_M1"));
}

#[test]
fn large_sample_average_is_within_two_standard_errors() {
    let dir = TempDir::new().unwrap();
    let file = write_data(dir.path(), "d.csv", &dgp_sample(8000, 12));
    let o = iie(&["estimate", "--data", path(&file), "--out", path(dir.path()), "--set", "estimator.estimands=[\"psi_m1\"]"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rs = rows(&dir.path().join("estimates.csv"));
    let r = find(&rs, &[(0, "one-step")]);
    let truth = average_truth(&Dgp::default(), |np| np.psi_m1(ArmPair::default()));
    assert!((f(&r[3]) - truth).abs() <= 2.0 * f(&r[4]), "{} vs {truth}", &r[3]);
}

#[test]
fn positivity_failure_lists_rows() {
    let dir = TempDir::new().unwrap();
    // Treatment is a deterministic function of the covariate.
    let data: Vec<Observation> = dgp_sample(600, 3)
        .into_iter()
        .map(|o| Observation::new(o.y, u8::from(o.x[0] > 0.5), o.m1, o.m2, o.x.clone()).unwrap())
        .collect();
    let file = write_data(dir.path(), "sep.csv", &data);
    let o = iie(&["estimate", "--data", path(&file), "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[positivity]"));
    let listed = rows(&dir.path().join("positivity_rows.csv"));
    assert!(!listed.is_empty());
    assert!(listed.iter().all(|r| (1..=600).contains(&r[0].parse::<usize>().unwrap())));
}

#[test]
fn zero_tau_bounds_equal_point_estimates() {
    let dir = TempDir::new().unwrap();
    let file = write_data(dir.path(), "d.csv", &dgp_sample(1500, 6));
    let (e, b) = (dir.path().join("e"), dir.path().join("b"));
    assert!(iie(&["estimate", "--data", path(&file), "--out", path(&e)]).status.success());
    let o = iie(&["bounds", "--data", path(&file), "--out", path(&b), "--set", "sensitivity.taus=[0.0, 0.05]"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (est, bnd) = (rows(&e.join("estimates.csv")), rows(&b.join("bounds.csv")));
    for (estimator, point) in [("one-step", ""), ("dr-learner", "0"), ("dr-learner", "2")] {
        let p = find(&est, &[(0, estimator), (1, "psi_M1"), (2, point)]);
        let q = find(&bnd, &[(0, "0"), (1, estimator), (2, point)]);
        assert_eq!(q[3], p[3]);
        assert_eq!(q[4], p[3]);
        assert!((f(&q[5]) - f(&p[4])).abs() < 1e-12);
    }
    let wide = find(&bnd, &[(0, "0.05"), (1, "one-step")]);
    assert!(f(&wide[3]) < f(&wide[4]));
}

#[test]
fn robustness_tau_is_positive_for_a_confounded_sample() {
    let dir = TempDir::new().unwrap();
    let s = selection_dgp(10.0 / 3.0).unwrap();
    let data = sample_observed(&s, &s.base, 4000, &mut rep_rng(77, 0)).unwrap();
    let file = write_data(dir.path(), "c.csv", &data);
    let o = iie(&["bounds", "--data", path(&file), "--out", path(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rob = rows(&dir.path().join("robustness.csv"));
    let tau = f(&find(&rob, &[(0, "one-step")])[2]);
    assert!(tau > 0.0 && tau.is_finite(), "{tau}");
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("bounds_summary.json")).unwrap()).unwrap();
    assert!(summary["covariate_benchmark_tau"].as_f64().unwrap() >= 0.0);
}

#[test]
fn bounded_outcome_assumption_rejects_wide_outcomes() {
    let dir = TempDir::new().unwrap();
    let data: Vec<Observation> = dgp_sample(500, 2)
        .into_iter()
        .map(|o| Observation::new(3.0 * o.y, o.a, o.m1, o.m2, o.x).unwrap())
        .collect();
    let file = write_data(dir.path(), "w.csv", &data);
    let o = iie(&["bounds", "--data", path(&file), "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[scale]"));
    let o = iie(&["bounds", "--data", path(&file), "--out", path(dir.path()), "--set", "sensitivity.assumption=A1"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn verify_passes_and_reports_the_audit() {
    let dir = TempDir::new().unwrap();
    let o = iie(&["verify", "--out", path(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.starts_with("problem"));
    assert_eq!(table.lines().count(), 21);
    let checks = rows(&dir.path().join("verify_checks.csv"));
    assert!(checks.iter().filter(|r| &r[2] == "eight-line").all(|r| &r[6] == "descriptive"));
    assert!(checks.iter().all(|r| &r[6] != "fail"));
    assert_eq!(rows(&dir.path().join("discrepancy.csv")).len(), 20);
}

#[test]
fn corrupted_term_fails_verification() {
    let dir = TempDir::new().unwrap();
    let o = iie(&["verify", "--out", path(dir.path()), "--set", "verify.corrupt_term=m1decomp.4"]);
    assert_eq!(o.status.code(), Some(5));
    let e = stderr(&o);
    assert!(e.starts_with("error[verify-residual]") && e.contains("m1decomp.4"), "{e}");
    let o = iie(&["verify", "--out", path(dir.path()), "--set", "verify.corrupt_term=nothing"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn convergence_rows_cover_every_panel() {
    let dir = TempDir::new().unwrap();
    let args = |out: &Path| {
        iie(&[
            "convergence",
            "--out",
            path(out),
            "--set",
            "simulate.convergence.ns=[500, 1000]",
            "--set",
            "simulate.convergence.reps=4",
            "--set",
            "simulate.convergence.pilot_n=1000",
        ])
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(args(&a).status.success());
    assert!(args(&b).status.success());
    let text = std::fs::read_to_string(a.join("convergence.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 3 * 4);
    assert_eq!(text, std::fs::read_to_string(b.join("convergence.csv")).unwrap());
    let o = iie(&["convergence", "--out", path(&a), "--set", "simulate.convergence.panels=[\"slow-x\"]"]);
    assert_eq!(o.status.code(), Some(2));
}
