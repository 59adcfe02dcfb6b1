use iie::estimators::ProjectionBasis;
use iie::sensitivity::{self, AssumptionId, SensitivityAssumption};
use iie::simlab::*;
use iie::{ArmPair, NuisanceSet};

fn grid(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
}

#[test]
fn truth_matches_reported_values() {
    let t = dgp_truth(&[0.0, 2.0]);
    assert!((t.psi_m1[0] - 0.070).abs() <= 0.003, "{}", t.psi_m1[0]);
    assert!((t.psi_m1[1] - 0.112).abs() <= 0.004, "{}", t.psi_m1[1]);
    assert!((t.psi_total[0] - 0.091).abs() <= 0.004, "{}", t.psi_total[0]);
    assert!((t.prop_med[0] - 0.77).abs() <= 0.02, "{}", t.prop_med[0]);
    assert!((t.prop_med[1] - 0.87).abs() <= 0.02, "{}", t.prop_med[1]);
}

#[test]
fn linear_projection_truth() {
    let d = Dgp::default();
    assert!((projection_truth(&d, ProjectionBasis::Linear, 0.0) - 0.070).abs() < 0.002);
    assert!((projection_truth(&d, ProjectionBasis::Linear, 2.0) - 0.112).abs() < 0.002);
    assert!((projection_truth(&d, ProjectionBasis::Quadratic, 0.0) - 0.072).abs() < 0.002);
}

#[test]
fn total_effect_decomposes_pointwise() {
    let xs = grid(-2.0, 4.0, 241);
    let t = dgp_truth(&xs);
    for i in 0..xs.len() {
        let sum = t.psi_ide[i] + t.psi_m1[i] + t.psi_m2[i] + t.psi_cov[i];
        assert!((t.psi_total[i] - sum).abs() < 1e-12);
        // Outcome regressions are shared by the arms.
        assert_eq!(t.psi_ide[i], 0.0);
    }
}

#[test]
fn covariant_effect_is_small() {
    let t = dgp_truth(&grid(-1.0, 3.0, 81));
    assert!(t.psi_cov.iter().all(|c| c.abs() < 0.02));
}

#[test]
fn truth_does_not_depend_on_the_covariate_law() {
    let xs = grid(-2.0, 4.0, 61);
    let a = truth_curves(&Dgp::new(Dispersion::Variance), &xs, ArmPair::default()).unwrap();
    let b = truth_curves(&Dgp::new(Dispersion::Sd), &xs, ArmPair::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn rescaled_outcomes_lie_in_the_unit_interval() {
    let d = Dgp::default();
    for x in grid(-2.0, 4.0, 601) {
        for c in 0..4 {
            let m = d.mu(c >> 1, c & 1, x);
            assert!(m > 0.0 && m < 1.0);
        }
    }
}

#[test]
fn sampling_is_deterministic() {
    let a = dgp_sample(500, 42);
    let b = dgp_sample(500, 42);
    assert_eq!(a, b);
    assert_ne!(a, dgp_sample(500, 43));
}

#[test]
fn upper_tail_propensity() {
    let d = Dgp::default();
    let data = d.sample(400_000, &mut rep_rng(2, 0));
    let tail: Vec<_> = data.iter().filter(|o| o.v() > 3.0).collect();
    let n = tail.len() as f64;
    let p = tail.iter().filter(|o| o.a == 1).count() as f64 / n;
    let se = (0.75 * 0.25 / n).sqrt();
    assert!(n > 200.0);
    assert!((p - 0.75).abs() <= 4.0 * se, "{p} from {n} rows");
}

#[test]
fn mediator_frequencies_match_the_mixture() {
    let d = Dgp::default();
    let data = d.sample(200_000, &mut rep_rng(3, 0));
    for a in 0..2u8 {
        let sub: Vec<_> = data.iter().filter(|o| o.a == a && o.v() < 0.0).collect();
        let n = sub.len() as f64;
        for c in 0..4usize {
            let hits = sub.iter().filter(|o| (o.m1 * 2 + o.m2) as usize == c).count() as f64;
            // Exact conditional expectation given the sampled covariates.
            let expect: f64 = sub.iter().map(|o| d.joint(a as usize, o.v())[c >> 1][c & 1]).sum();
            let var: f64 = sub
                .iter()
                .map(|o| {
                    let p = d.joint(a as usize, o.v())[c >> 1][c & 1];
                    p * (1.0 - p)
                })
                .sum();
            assert!((hits - expect).abs() <= 3.0 * var.sqrt(), "arm {a} cell {c}: {hits} vs {expect} of {n}");
        }
    }
}

#[test]
fn generic_sampler_follows_the_observed_law() {
    let d = Dgp::default();
    let data = sample_observed(&d, &d, 100_000, &mut rep_rng(5, 0)).unwrap();
    let mean_y = data.iter().map(|o| o.y).sum::<f64>() / data.len() as f64;
    let want = average_truth(&d, |np| np.pi1 * np.mean_outcome(1) + (1.0 - np.pi1) * np.mean_outcome(0));
    assert!((mean_y - want).abs() < 4.0 * (0.25f64 / 100_000.0).sqrt());
}

#[test]
fn inverse_weight_extremes() {
    let xs = grid(-1.0, 3.0, 401);
    let w: Vec<f64> = xs.iter().map(|&x| max_inverse_weight(x)).collect();
    assert!(w.iter().all(|v| v.is_finite() && *v > 0.0));
    let argmin = xs[w.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0];
    let argmax = xs[w.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0];
    assert!(argmin.abs() < 0.1, "{argmin}");
    assert!((argmax - 2.0).abs() < 0.1, "{argmax}");
}

#[test]
fn selection_strength_peaks_at_a_tenth() {
    let max = grid(-2.0, 4.0, 6001).into_iter().map(|x| tau_star(x, 10.0 / 3.0)).fold(0.0, f64::max);
    assert!((max - 0.1).abs() < 1e-12);
    assert!(selection_dgp(0.0).is_err());
}

#[test]
fn known_selection_is_recovered() {
    let s = selection_dgp(10.0 / 3.0).unwrap();
    for x in grid(-2.0, 4.0, 121) {
        let np = s.at(&[x]).unwrap();
        let got = sensitivity::recover_known_selection(&np, &s.equality(x), ArmPair::default());
        assert!((got - s.psi_m1(x)).abs() < 1e-8, "x = {x}");
    }
}

#[test]
fn vanishing_selection_leaves_regressions_unchanged() {
    let s = selection_dgp(1e-12).unwrap();
    for x in [-1.0, 0.5, 2.5] {
        let (a, b) = (s.at(&[x]).unwrap(), s.base.point(x).unwrap());
        for (u, v) in a.mu.iter().flatten().flatten().zip(b.mu.iter().flatten().flatten()) {
            assert!((u - v).abs() < 1e-11);
        }
    }
}

#[test]
fn a2_bounds_bracket_the_truth_under_selection() {
    let s = selection_dgp(10.0 / 3.0).unwrap();
    // The smaller value is checked where the mechanism is mild; above x = 3
    // the true strength is 0.1 and the bound at 0.02 is violated.
    for (tau, hi) in [(0.1, 4.0), (0.02, 3.0)] {
        let sa = SensitivityAssumption::new(AssumptionId::A2, tau).unwrap();
        for x in grid(-2.0, hi, 50) {
            let (lb, ub) = s.bounds(x, &sa).unwrap();
            let truth = s.psi_m1(x);
            assert!(lb <= truth + 1e-12 && truth <= ub + 1e-12, "tau {tau}, x {x}: {lb} {truth} {ub}");
        }
    }
    let sa = SensitivityAssumption::new(AssumptionId::A2, 0.02).unwrap();
    let (lb, _) = s.bounds(3.5, &sa).unwrap();
    assert!(lb > s.psi_m1(3.5));
    // The identified curve is biased, so zero width would not cover.
    assert!((s.psi_bar(1.5).unwrap() - s.psi_m1(1.5)).abs() > 1e-3);
}

fn small_table() -> TableConfig {
    TableConfig {
        n: 400,
        reps: 24,
        seed: 11,
        strategies: vec![Strategy::EfficientProjection, Strategy::PluginProjection, Strategy::OracleProjection],
        ..TableConfig::default()
    }
}

#[test]
fn table_is_deterministic_and_consistent() {
    let cfg = small_table();
    let a = run_table(&cfg).unwrap();
    let b = run_table(&cfg).unwrap();
    assert_eq!(a.cells, b.cells);
    assert_eq!(a.cells.len(), 6);
    for c in &a.cells {
        assert!((c.rmse.powi(2) - (c.bias.powi(2) + c.std.powi(2))).abs() < 1e-12 * (1.0 + c.rmse.powi(2)));
        assert!((0.0..=100.0).contains(&c.coverage));
    }
    let mut buf = Vec::new();
    write_table_csv(&mut buf, &a).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("Point,Strategy,Projection,Truth,Bias,Std,RMSE,Coverage"));
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn table_rejects_bad_configs() {
    for cfg in [
        TableConfig { reps: 0, ..small_table() },
        TableConfig { n: 10, ..small_table() },
        TableConfig { points: vec![], ..small_table() },
        TableConfig {
            failure_cap: 1.5,
            ..small_table()
        },
    ] {
        assert!(run_table(&cfg).is_err());
    }
}

#[test]
fn strategy_names_round_trip() {
    for s in Strategy::ALL {
        assert_eq!(Strategy::parse(s.name()).unwrap(), s);
    }
    assert!(Strategy::parse("nope").is_err());
}

#[test]
fn convergence_rows_and_determinism() {
    let cfg = ConvergenceConfig {
        ns: vec![500, 1000],
        reps: 10,
        pilot_n: 1000,
        ..ConvergenceConfig::default()
    };
    let a = run_convergence(&cfg).unwrap();
    assert_eq!(a.len(), 2 * 3 * 4);
    assert_eq!(a, run_convergence(&cfg).unwrap());
    assert!(a.iter().all(|r| r.scaled_rmse.is_finite() && r.scaled_rmse > 0.0));
    let mut buf = Vec::new();
    write_convergence_csv(&mut buf, &a).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 25);
}

#[test]
fn truth_csv_has_expected_columns() {
    let mut buf = Vec::new();
    write_truth_csv(&mut buf, &dgp_truth(&[0.0, 1.0])).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "x,psi_m1,psi_m2,psi_cov,psi_ide,psi_total,prop_med"
    );
}

#[test]
fn projection_of_the_total_effect() {
    let d = Dgp::default();
    let arms = ArmPair::default();
    let lin = |v: f64| projection_truth_of(&d, ProjectionBasis::Linear, v, |np| np.psi_total(arms));
    assert!((lin(0.0) - 0.0899).abs() < 5e-4, "{}", lin(0.0));
    assert!((lin(2.0) - 0.1313).abs() < 5e-4, "{}", lin(2.0));
    // The generic form reproduces the effect-specific one.
    let m1 = projection_truth_of(&d, ProjectionBasis::Quadratic, 1.0, |np| np.psi_m1(arms));
    assert_eq!(m1, projection_truth(&d, ProjectionBasis::Quadratic, 1.0));
}
