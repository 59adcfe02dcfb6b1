use iie::nuisance::*;
use iie::simlab::{rep_rng, Dgp};
use iie::{NuisanceSet, Observation, Provenance};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn obs(y: f64, a: u8, m1: u8, m2: u8, x: f64) -> Observation {
    Observation::new(y, a, m1, m2, vec![x]).unwrap()
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Plain gradient ascent on the multinomial log-likelihood, used as an
/// independent optimizer.
fn gradient_ascent(x: &DMatrix<f64>, labels: &[usize], classes: usize, iters: usize) -> DMatrix<f64> {
    let (n, p) = x.shape();
    let mut b = DMatrix::<f64>::zeros(p, classes - 1);
    for _ in 0..iters {
        let mut g = DMatrix::<f64>::zeros(p, classes - 1);
        for i in 0..n {
            let mut eta = vec![0.0; classes];
            for c in 1..classes {
                eta[c] = (0..p).map(|j| x[(i, j)] * b[(j, c - 1)]).sum();
            }
            let m = eta.iter().cloned().fold(f64::MIN, f64::max);
            let s: f64 = eta.iter().map(|e| (e - m).exp()).sum();
            for c in 1..classes {
                let r = (labels[i] == c) as u8 as f64 - (eta[c] - m).exp() / s;
                for j in 0..p {
                    g[(j, c - 1)] += x[(i, j)] * r;
                }
            }
        }
        b += g * (2.0 / n as f64);
    }
    b
}

#[test]
fn constant_propensity_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<Observation> = (0..5000)
        .map(|_| {
            let x = rng.random_range(-2.0..4.0);
            obs(0.0, (rng.random::<f64>() < 0.5) as u8, 0, 0, x)
        })
        .collect();
    let m = fit_propensity(&data, &all(5000), &BasisSpec::default()).unwrap();
    for k in 0..=60 {
        let p = m.pi1(&[-2.0 + 0.1 * k as f64]);
        assert!((0.45..=0.55).contains(&p), "{p}");
    }
}

#[test]
fn saturated_two_point_design_interpolates() {
    let mut data = Vec::new();
    for (x, p) in [(0.0, 0.2), (1.0, 0.8)] {
        for i in 0..100 {
            data.push(obs(0.0, ((i as f64) < 100.0 * p) as u8, 0, 0, x));
        }
    }
    let m = fit_propensity(&data, &all(200), &BasisSpec::default()).unwrap();
    assert!((m.pi1(&[0.0]) - 0.2).abs() < 1e-6);
    assert!((m.pi1(&[1.0]) - 0.8).abs() < 1e-6);

    // Same for the joint mediator law with every cell occupied.
    let mut data = Vec::new();
    let counts = [[10, 20, 30, 40], [40, 30, 20, 10]];
    for a in 0..2u8 {
        for (x, cs) in [(0.0, counts[0]), (1.0, counts[1])] {
            for (c, &k) in cs.iter().enumerate() {
                for _ in 0..k {
                    data.push(obs(0.0, a, (c >> 1) as u8, (c & 1) as u8, x));
                }
            }
        }
    }
    let m = fit_joint_mediator(&data, &all(data.len()), &BasisSpec::default()).unwrap();
    assert!(!m.smoothed.iter().any(|&s| s));
    for a in 0..2 {
        for (x, cs) in [(0.0, counts[0]), (1.0, counts[1])] {
            let p = m.joint(a, &[x]);
            for c in 0..4 {
                assert!((p[c >> 1][c & 1] - cs[c] as f64 / 100.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn newton_matches_gradient_ascent() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 400;
    let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.5..1.5) });
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let p: f64 = 1.0 / (1.0 + (0.3f64 - 1.1 * x[(i, 1)]).exp());
            (rng.random::<f64>() < p) as u8 as f64
        })
        .collect();
    let fit = logistic_regression(&x, &y).unwrap();
    assert!(fit.converged && !fit.ridge);
    let labels: Vec<usize> = y.iter().map(|&v| v as usize).collect();
    let gd = gradient_ascent(&x, &labels, 2, 20_000);
    for i in 0..n {
        let row = [x[(i, 0)], x[(i, 1)]];
        let p_gd = 1.0 / (1.0 + (-(row[0] * gd[(0, 0)] + row[1] * gd[(1, 0)])).exp());
        assert!((fit.probs(&row)[1] - p_gd).abs() < 1e-6);
    }
}

#[test]
fn multinomial_newton_matches_gradient_ascent() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 600;
    let data: Vec<Observation> = (0..n)
        .map(|_| {
            let x: f64 = rng.random_range(-1.0..2.0);
            let m1 = (rng.random::<f64>() < 0.3 + 0.2 * x.clamp(0.0, 1.0)) as u8;
            let m2 = (rng.random::<f64>() < 0.6 - 0.1 * x) as u8;
            obs(0.0, 1, m1, m2, x)
        })
        .chain((0..50).map(|i| obs(0.0, 0, (i % 2) as u8, ((i / 2) % 2) as u8, i as f64 / 25.0)))
        .collect();
    let spec = BasisSpec {
        kind: BasisKind::Polynomial { degree: 1 },
        ..BasisSpec::default()
    };
    let m = fit_joint_mediator(&data, &all(data.len()), &spec).unwrap();
    let treated: Vec<&Observation> = data.iter().filter(|o| o.a == 1).collect();
    let x = DMatrix::from_fn(treated.len(), 2, |i, j| m.basis.row(&treated[i].x)[j]);
    let labels: Vec<usize> = treated.iter().map(|o| (o.m1 * 2 + o.m2) as usize).collect();
    let gd = gradient_ascent(&x, &labels, 4, 40_000);
    for o in &treated {
        let row = m.basis.row(&o.x);
        let mut eta = [0.0; 4];
        for c in 1..4 {
            eta[c] = row[0] * gd[(0, c - 1)] + row[1] * gd[(1, c - 1)];
        }
        let s: f64 = eta.iter().map(|e| e.exp()).sum();
        let p = m.joint(1, &o.x);
        for c in 0..4 {
            assert!((p[c >> 1][c & 1] - eta[c].exp() / s).abs() < 1e-6);
        }
    }
}

#[test]
fn separation_falls_back_to_ridge() {
    let data: Vec<Observation> = (0..100).map(|i| obs(0.0, (i >= 50) as u8, 0, 0, i as f64)).collect();
    let m = fit_propensity(&data, &all(100), &BasisSpec::default()).unwrap();
    assert!(m.fit.ridge);
    assert!(m.fit.coef.iter().all(|c| c.is_finite()));
    let p = m.pi1(&[0.0]);
    assert!(p >= 1e-6 && p < 0.5);
}

#[test]
fn single_arm_is_rejected() {
    let data: Vec<Observation> = (0..20).map(|i| obs(0.0, 1, 0, 0, i as f64)).collect();
    assert!(fit_propensity(&data, &all(20), &BasisSpec::default()).is_err());
}

#[test]
fn empty_mediator_cell_is_smoothed_and_flagged() {
    let data: Vec<Observation> = (0..200)
        .map(|i| obs(0.0, (i % 2) as u8, ((i / 2) % 2) as u8, 0, (i % 17) as f64 / 4.0))
        .collect();
    let m = fit_joint_mediator(&data, &all(200), &BasisSpec::default()).unwrap();
    assert!(m.smoothed[0] && m.smoothed[1]);
    for a in 0..2 {
        let p = m.joint(a, &[1.0]);
        let s: f64 = p.iter().flatten().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(p.iter().flatten().all(|&v| v >= 1e-6));
    }
}

#[test]
fn continuous_outcome_uses_least_squares() {
    let data: Vec<Observation> = (0..800)
        .map(|i| {
            let (a, m1, m2) = ((i % 2) as u8, ((i / 2) % 2) as u8, ((i / 4) % 2) as u8);
            let x = (i % 97) as f64 / 20.0;
            obs(1.0 + 2.0 * x + a as f64 + 0.5 * m1 as f64 - m2 as f64, a, m1, m2, x)
        })
        .collect();
    let spec = BasisSpec {
        kind: BasisKind::Polynomial { degree: 1 },
        ..BasisSpec::default()
    };
    let m = fit_outcome(&data, &all(800), &spec).unwrap();
    assert!(!m.binary);
    let want = 1.0 + 2.0 * 3.3 + 1.0 + 0.5;
    assert!((m.mu(1, 1, 0, &[3.3]) - want).abs() < 1e-9);
}

#[test]
fn sparse_strata_use_pooled_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<Observation> = (0..300)
        .map(|i| {
            // Stratum (1, 1, 1) gets only a handful of rows.
            let rare = i < 5;
            let a = if rare { 1 } else { (i % 2) as u8 };
            let m1 = if rare { 1 } else { 0 };
            obs((rng.random::<f64>() < 0.4) as u8 as f64, a, m1, m1, rng.random_range(0.0..1.0))
        })
        .collect();
    let fitted = FittedNuisance::fit(&data, &all(300), &NuisanceConfig::default()).unwrap();
    assert!(fitted.outcome.pooled_strata.contains(&(1, 1, 1)));
    assert!(fitted.flagged());
    let np = fitted.at(&[0.5]).unwrap();
    assert!(np.mu[1][1][1] > 0.0 && np.mu[1][1][1] < 1.0);
}

#[test]
fn fitted_marginals_are_sums_of_the_joint() {
    let data = Dgp::default().sample(2000, &mut rep_rng(4, 0));
    let f = FittedNuisance::fit(&data, &all(2000), &NuisanceConfig::linear()).unwrap();
    assert_eq!(f.provenance(), Provenance::Fitted);
    for x in [-1.0, 0.5, 2.0, 3.5] {
        let np = f.at(&[x]).unwrap();
        for a in 0..2 {
            for m in 0..2 {
                assert!((np.pm1[a][m] - (np.pj[a][m][0] + np.pj[a][m][1])).abs() < 1e-12);
                assert!((np.pm2[a][m] - (np.pj[a][0][m] + np.pj[a][1][m])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn cross_fit_never_trains_on_the_held_out_fold() {
    let data = Dgp::default().sample(600, &mut rep_rng(8, 0));
    for mode in [FoldMode::SwapAverage, FoldMode::Pooled] {
        let plan = make_folds(600, 3, 17, mode).unwrap();
        let fits = cross_fit(&data, &plan, &NuisanceConfig::linear()).unwrap();
        for (k, f) in fits.iter().enumerate() {
            assert_eq!(f.held_out_fold, Some(k));
            let held = plan.fold(k);
            assert!(f.trained_on.iter().all(|i| !held.contains(i)));
            assert_eq!(f.trained_on.len() + held.len(), 600);
        }
    }
}

#[test]
fn fold_plans_are_deterministic_and_validated() {
    let a = make_folds(10, 2, 1, FoldMode::SwapAverage).unwrap();
    let b = make_folds(10, 2, 1, FoldMode::SwapAverage).unwrap();
    assert_eq!(a.assignment, b.assignment);
    let mut seen: Vec<usize> = (0..2).flat_map(|f| a.fold(f)).collect();
    seen.sort();
    assert_eq!(seen, all(10));
    assert!(make_folds(10, 1, 1, FoldMode::Pooled).is_err());
    assert!(make_folds(3, 2, 1, FoldMode::Pooled).is_err());
}

#[test]
fn zero_scale_reproduces_the_truth() {
    let truth: Arc<dyn NuisanceSet> = Arc::new(Dgp::default());
    let rates = RateSpec {
        c: 0.0,
        ..RateSpec::uniform(0.5)
    };
    let hat = synthetic_nuisances(truth.clone(), 1000, &rates, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for x in [-2.0, 0.0, 1.7, 4.0] {
        let (a, b) = (hat.at(&[x]).unwrap(), truth.at(&[x]).unwrap());
        assert!((a.pi1 - b.pi1).abs() < 1e-15);
        for (u, v) in a.pj.iter().flatten().flatten().zip(b.pj.iter().flatten().flatten()) {
            assert!((u - v).abs() < 1e-15);
        }
        for (u, v) in a.mu.iter().flatten().flatten().zip(b.mu.iter().flatten().flatten()) {
            assert!((u - v).abs() < 1e-15);
        }
    }
}

fn grid() -> Vec<Vec<f64>> {
    (0..=60).map(|k| vec![-2.0 + 0.1 * k as f64]).collect()
}

/// Mean L2 error of each family over `reps` synthetic draws.
fn mean_error(n: usize, rates: &RateSpec, reps: usize) -> [f64; 3] {
    let truth: Arc<dyn NuisanceSet> = Arc::new(Dgp::default());
    let mut acc = [0.0; 3];
    for r in 0..reps {
        let hat = synthetic_nuisances(truth.clone(), n, rates, &mut rep_rng(77, r)).unwrap();
        let e = l2_error(&hat, truth.as_ref(), &grid()).unwrap();
        for k in 0..3 {
            acc[k] += e[k] / reps as f64;
        }
    }
    acc
}

#[test]
fn fast_rate_error_halves_when_n_quadruples() {
    let rates = RateSpec::uniform(0.5);
    let (a, b) = (mean_error(1000, &rates, 200), mean_error(4000, &rates, 200));
    for k in 0..3 {
        let ratio = a[k] / b[k];
        assert!((ratio - 2.0).abs() <= 0.3, "family {k}: ratio {ratio}");
    }
}

#[test]
fn slow_component_dominates_by_n_to_the_0_4() {
    let n = 10_000;
    let slow = RateSpec {
        alpha_mu: 0.1,
        ..RateSpec::uniform(0.5)
    };
    let ratio = mean_error(n, &slow, 200)[1] / mean_error(n, &RateSpec::uniform(0.5), 200)[1];
    let want = (n as f64).powf(0.4);
    assert!((ratio / want - 1.0).abs() <= 0.3, "ratio {ratio} vs {want}");
}

#[test]
fn log_error_slope_matches_alpha() {
    let ns = [500.0, 1000.0, 2000.0, 4000.0, 8000.0];
    for alpha in [0.1, 0.25, 0.5] {
        let rates = RateSpec::uniform(alpha);
        let pts: Vec<(f64, f64)> = ns
            .iter()
            .map(|&n| ((n as f64).ln(), mean_error(n as usize, &rates, 100)[0].ln()))
            .collect();
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / 5.0;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / 5.0;
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((slope + alpha).abs() <= 0.1, "alpha {alpha}: slope {slope}");
    }
}

#[test]
fn rate_spec_validation() {
    assert!(RateSpec::uniform(0.0).validate().is_err());
    assert!(RateSpec::uniform(0.6).validate().is_err());
    assert!(RateSpec::uniform(0.5).validate().is_ok());
}
