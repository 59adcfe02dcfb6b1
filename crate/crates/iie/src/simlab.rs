//! Simulation designs and Monte-Carlo harnesses.
//!
//! [`Dgp`] is the piecewise design with a latent binary confounder of the two
//! mediators. [`SelectionDgp`] distorts its outcome regressions through a
//! known selection mechanism. [`run_table`] and [`run_convergence`] drive
//! replicated experiments with one RNG stream per replication, so results do
//! not depend on thread scheduling.

use crate::eif::{self, IfKind};
use crate::error::{IieError, Result};
use crate::estimators::{self, NuisanceSource, ProjectionBasis, ProjectionSpec, RatioMode, SmootherSpec};
use crate::model_core::{ArmPair, NuisancePoint, NuisanceSet, Observation, Provenance};
use crate::nuisance::{self, make_folds, FoldMode, NuisanceConfig, RateSpec};
use crate::sensitivity::{self, SelectionEquality, SensitivityAssumption};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StNormal};
use std::io::Write;
use std::sync::Arc;

pub const X_MIN: f64 = -2.0;
pub const X_MAX: f64 = 4.0;
pub const X_MEAN: f64 = 1.0;
/// Grid used to find the outcome rescaling constants.
const Z_GRID: usize = 4001;

/// How the covariate law's dispersion parameter 0.5 is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Dispersion {
    #[default]
    Variance,
    Sd,
}

impl Dispersion {
    pub fn sd(&self) -> f64 {
        match self {
            Dispersion::Variance => 0.5f64.sqrt(),
            Dispersion::Sd => 0.5,
        }
    }
}

/// Propensity `P(A = 1 | x)`, left-continuous at the breakpoints.
pub fn propensity(x: f64) -> f64 {
    if x <= -1.0 {
        0.2
    } else if x <= 0.0 {
        0.2 + 0.55 * (x + 1.0).abs()
    } else if x <= 1.0 {
        0.75 - 0.25 * x
    } else if x <= 2.0 {
        0.5 - 0.25 * (x - 1.0).powi(2)
    } else if x <= 3.0 {
        0.25 + 0.5 * (x - 2.0)
    } else {
        0.75
    }
}

/// `P(M1(a) = 1 | U = u, x)` and `P(M2(a) = 1 | U = u, x)`.
pub fn mediator_probs(a: usize, u: usize, x: f64) -> (f64, f64) {
    match (a, u) {
        (0, 0) => (0.15 + 0.1 * (x + 1.0), 0.15 + 0.125 * (x + 1.0)),
        (1, 0) => (0.55 + 0.05 * (x + 1.0), 0.4 + 0.1 * (x + 0.5)),
        (0, _) => (0.1, 0.1),
        _ => (0.8, 0.8),
    }
}

fn zeta(x: f64) -> f64 {
    let k = -12.0 + 10.0 * 1f64.sin() + 10.0 * 1f64.cos();
    if x <= -0.5 {
        x - x * x
    } else if x <= 0.0 {
        -2.0 + x
    } else if x <= 1.0 {
        -12.0 + 10.0 * (x * x).sin() + 10.0 * (x * x).cos()
    } else if x <= 1.5 {
        k - 5.0 * (x - 1.0) - 5.0 * (x - 1.0).powi(2)
    } else if x <= 2.5 {
        let d = x - 1.5;
        k - 3.75 + 0.5 * d - d * d + 3.0 * d.powi(3)
    } else {
        -4.0 + 2.0 * x
    }
}

/// Unscaled outcome pattern, identical in both arms.
fn mu_tilde(m1: usize, m2: usize, x: f64) -> f64 {
    let z = zeta(x);
    match (m1, m2) {
        (1, 1) => 10.0 + z + 2.0 * x + 0.5 * x * x,
        (0, 1) => 4.0 + z,
        (1, 0) => 8.0 + z + 2.0 * x + 0.5 * x * x,
        _ => z,
    }
}

/// The base simulation design.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dgp {
    pub z_l: f64,
    pub z_u: f64,
    pub dispersion: Dispersion,
}

impl Default for Dgp {
    fn default() -> Self {
        Self::new(Dispersion::Variance)
    }
}

impl Dgp {
    pub fn new(dispersion: Dispersion) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for k in 0..Z_GRID {
            let x = X_MIN + (X_MAX - X_MIN) * k as f64 / (Z_GRID - 1) as f64;
            for c in 0..4 {
                let v = mu_tilde(c >> 1, c & 1, x);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        Self {
            z_l: lo,
            z_u: hi,
            dispersion,
        }
    }

    pub fn mu(&self, m1: usize, m2: usize, x: f64) -> f64 {
        (mu_tilde(m1, m2, x) - self.z_l + 10.0) / (self.z_u - self.z_l + 20.0)
    }

    /// Joint mediator law of arm `a`, mixed over the latent confounder.
    pub fn joint(&self, a: usize, x: f64) -> [[f64; 2]; 2] {
        let mut p = [[0.0; 2]; 2];
        for u in 0..2 {
            let (q1, q2) = mediator_probs(a, u, x);
            for (m1, row) in p.iter_mut().enumerate() {
                for (m2, v) in row.iter_mut().enumerate() {
                    let f1 = if m1 == 1 { q1 } else { 1.0 - q1 };
                    let f2 = if m2 == 1 { q2 } else { 1.0 - q2 };
                    *v += 0.5 * f1 * f2;
                }
            }
        }
        p
    }

    pub fn point(&self, x: f64) -> Result<NuisancePoint> {
        let mut mu = [[[0.0; 2]; 2]; 2];
        for ma in mu.iter_mut() {
            for (m1, row) in ma.iter_mut().enumerate() {
                for (m2, v) in row.iter_mut().enumerate() {
                    *v = self.mu(m1, m2, x);
                }
            }
        }
        NuisancePoint::from_joint(propensity(x), mu, [self.joint(0, x), self.joint(1, x)])
    }

    pub fn draw_x<R: Rng>(&self, rng: &mut R) -> f64 {
        let n = Normal::new(X_MEAN, self.dispersion.sd()).expect("positive sd");
        n.sample(rng).clamp(X_MIN, X_MAX)
    }

    /// `n` draws with the mediators generated through the latent confounder.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Observation> {
        (0..n)
            .map(|_| {
                let x = self.draw_x(rng);
                let a = (rng.random::<f64>() < propensity(x)) as usize;
                let u = (rng.random::<f64>() < 0.5) as usize;
                let (q1, q2) = mediator_probs(a, u, x);
                let m1 = (rng.random::<f64>() < q1) as usize;
                let m2 = (rng.random::<f64>() < q2) as usize;
                let y = (rng.random::<f64>() < self.mu(m1, m2, x)) as u8 as f64;
                Observation {
                    y,
                    a: a as u8,
                    m1: m1 as u8,
                    m2: m2 as u8,
                    x: vec![x],
                }
            })
            .collect()
    }

    /// Quadrature nodes `(weight, x)` for the clamped covariate law: Simpson
    /// on the interior plus the two endpoint masses.
    pub fn x_quadrature(&self, intervals: usize) -> Vec<(f64, f64)> {
        let m = intervals + intervals % 2;
        let sd = self.dispersion.sd();
        let law = StNormal::new(X_MEAN, sd).expect("positive sd");
        let step = (X_MAX - X_MIN) / m as f64;
        let mut q: Vec<(f64, f64)> = (0..=m)
            .map(|k| {
                let x = X_MIN + step * k as f64;
                let c = if k == 0 || k == m {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                (c * step / 3.0 * law.pdf(x), x)
            })
            .collect();
        q[0].0 += law.cdf(X_MIN);
        q[m].0 += 1.0 - law.cdf(X_MAX);
        q
    }
}

impl NuisanceSet for Dgp {
    fn at(&self, x: &[f64]) -> Result<NuisancePoint> {
        self.point(x[0])
    }

    fn provenance(&self) -> Provenance {
        Provenance::TrueDgp
    }
}

/// Draw `n` observations from any nuisance set, mediators from its joint law.
pub fn sample_observed<R: Rng>(eta: &dyn NuisanceSet, base: &Dgp, n: usize, rng: &mut R) -> Result<Vec<Observation>> {
    (0..n)
        .map(|_| {
            let x = base.draw_x(rng);
            let np = eta.at(&[x])?;
            let a = (rng.random::<f64>() < np.pi1) as usize;
            let r: f64 = rng.random();
            let mut acc = 0.0;
            let mut cell = 3;
            for c in 0..4 {
                acc += np.pj[a][c >> 1][c & 1];
                if r < acc {
                    cell = c;
                    break;
                }
            }
            let (m1, m2) = (cell >> 1, cell & 1);
            let y = (rng.random::<f64>() < np.mu[a][m1][m2]) as u8 as f64;
            Ok(Observation {
                y,
                a: a as u8,
                m1: m1 as u8,
                m2: m2 as u8,
                x: vec![x],
            })
        })
        .collect()
}

/// Deterministic sample of the base design.
pub fn dgp_sample(n: usize, seed: u64) -> Vec<Observation> {
    Dgp::default().sample(n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Conditional effects on a covariate grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthCurves {
    pub x: Vec<f64>,
    pub psi_m1: Vec<f64>,
    pub psi_m2: Vec<f64>,
    pub psi_cov: Vec<f64>,
    pub psi_ide: Vec<f64>,
    pub psi_total: Vec<f64>,
    pub prop_med: Vec<f64>,
}

/// Every conditional effect at one nuisance point, by direct summation:
/// `(m1, m2, iie, ide, total)`.
pub fn effects_at(np: &NuisancePoint, arms: ArmPair) -> (f64, f64, f64, f64, f64) {
    let (a, ap) = (arms.a() as usize, arms.a_prime() as usize);
    let (mut m1, mut m2, mut iie, mut ide) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..2 {
        for j in 0..2 {
            let mu = np.mu[a][i][j];
            m1 += mu * (np.pm1[a][i] - np.pm1[ap][i]) * np.pm2[ap][j];
            m2 += mu * (np.pm2[a][j] - np.pm2[ap][j]) * np.pm1[a][i];
            iie += mu * (np.pj[a][i][j] - np.pj[ap][i][j]);
            ide += (mu - np.mu[ap][i][j]) * np.pj[ap][i][j];
        }
    }
    (m1, m2, iie, ide, np.psi_total(arms))
}

pub fn truth_curves(eta: &dyn NuisanceSet, xs: &[f64], arms: ArmPair) -> Result<TruthCurves> {
    let mut t = TruthCurves {
        x: xs.to_vec(),
        psi_m1: vec![],
        psi_m2: vec![],
        psi_cov: vec![],
        psi_ide: vec![],
        psi_total: vec![],
        prop_med: vec![],
    };
    for &x in xs {
        let (m1, m2, iie, ide, total) = effects_at(&eta.at(&[x])?, arms);
        t.psi_m1.push(m1);
        t.psi_m2.push(m2);
        t.psi_cov.push(iie - m1 - m2);
        t.psi_ide.push(ide);
        t.psi_total.push(total);
        t.prop_med.push(m1 / total);
    }
    Ok(t)
}

/// Truth curves of the base design.
pub fn dgp_truth(xs: &[f64]) -> TruthCurves {
    truth_curves(&Dgp::default(), xs, ArmPair::default()).expect("design satisfies positivity")
}

/// Best approximation of `psi_M1` by the working basis under the covariate
/// law, evaluated at `v`.
pub fn projection_truth(dgp: &Dgp, basis: ProjectionBasis, v: f64) -> f64 {
    projection_truth_of(dgp, basis, v, |np| np.psi_m1(ArmPair::default()))
}

/// Projection of any pointwise functional onto the working basis.
pub fn projection_truth_of(dgp: &Dgp, basis: ProjectionBasis, v: f64, f: impl Fn(&NuisancePoint) -> f64) -> f64 {
    let q = dgp.x_quadrature(6000);
    let p = basis.row(0.0).len();
    let mut m = nalgebra::DMatrix::<f64>::zeros(p, p);
    let mut b = nalgebra::DVector::<f64>::zeros(p);
    for &(w, x) in &q {
        let g = nalgebra::DVector::from_vec(basis.row(x));
        let psi = f(&dgp.point(x).expect("positivity"));
        m += w * &g * g.transpose();
        b += w * psi * g;
    }
    let beta = m.try_inverse().expect("full rank") * b;
    nalgebra::DVector::from_vec(basis.row(v)).dot(&beta)
}

/// Population average of a pointwise functional under the covariate law.
pub fn average_truth(dgp: &Dgp, f: impl Fn(&NuisancePoint) -> f64) -> f64 {
    dgp.x_quadrature(6000)
        .iter()
        .map(|&(w, x)| w * f(&dgp.point(x).expect("positivity")))
        .sum()
}

/// Largest inverse-probability factor of the M1 influence function at `x`.
pub fn max_inverse_weight(x: f64) -> f64 {
    estimators::inverse_weight(&Dgp::default().point(x).expect("positivity"), ArmPair::default())
}

/// Step function of selection strength, left-continuous; its maximum is
/// `0.03 sigma`.
pub fn tau_star(x: f64, sigma: f64) -> f64 {
    let s = if x <= -1.0 {
        0.01
    } else if x <= 0.0 {
        0.02
    } else if x <= 1.0 {
        0.03
    } else if x <= 2.0 {
        0.02
    } else if x <= 3.0 {
        0.01
    } else {
        0.03
    };
    sigma * s
}

/// The base design seen through a known selection mechanism: below `x = 1`
/// the off-cell counterfactual mean is `(1 - tau) mu`, from `x = 1` on the
/// off-cell mean of `1 - Y` is `(1 - tau)(1 - mu)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionDgp {
    pub sigma: f64,
    pub base: Dgp,
}

pub fn selection_dgp(sigma: f64) -> Result<SelectionDgp> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(IieError::Invalid(format!("selection strength {sigma} must be positive")));
    }
    Ok(SelectionDgp {
        sigma,
        base: Dgp::default(),
    })
}

impl SelectionDgp {
    pub fn tau(&self, x: f64) -> f64 {
        tau_star(x, self.sigma)
    }

    /// The equality model `mu* - mu = f (c mu + t)` in force at `x`.
    pub fn equality(&self, x: f64) -> SelectionEquality {
        let tau = self.tau(x);
        if x < 1.0 {
            SelectionEquality { c: 1.0, t: 0.0, f: -tau }
        } else {
            SelectionEquality { c: -1.0, t: 1.0, f: tau }
        }
    }

    /// Observed regression implied by counterfactual mean `target`.
    pub fn observed_mu(&self, target: f64, p12: f64, x: f64) -> f64 {
        let d = self.tau(x) * (1.0 - p12);
        if x < 1.0 {
            target / (1.0 - d)
        } else {
            (target - d) / (1.0 - d)
        }
    }

    /// True conditional indirect effect (counterfactual regressions).
    pub fn psi_m1(&self, x: f64) -> f64 {
        self.base.point(x).expect("positivity").psi_m1(ArmPair::default())
    }

    /// Identified but biased version computed from the observed law.
    pub fn psi_bar(&self, x: f64) -> Result<f64> {
        Ok(self.at(&[x])?.psi_m1(ArmPair::default()))
    }

    pub fn bounds(&self, x: f64, sa: &SensitivityAssumption) -> Result<(f64, f64)> {
        sensitivity::bounds_psi_m1_at(&self.at(&[x])?, sa, ArmPair::default())
    }
}

impl NuisanceSet for SelectionDgp {
    fn at(&self, x: &[f64]) -> Result<NuisancePoint> {
        let v = x[0];
        let mut np = self.base.point(v)?;
        for a in 0..2 {
            for m1 in 0..2 {
                for m2 in 0..2 {
                    np.mu[a][m1][m2] = self.observed_mu(np.mu[a][m1][m2], np.pj[a][m1][m2], v);
                }
            }
        }
        NuisancePoint::with_marginals(np.pi1, np.mu, np.pj, np.pm1, np.pm2)
    }

    fn provenance(&self) -> Provenance {
        Provenance::TrueDgp
    }
}

/// Estimation strategies compared in the Monte-Carlo tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    EfficientProjection,
    PluginProjection,
    OracleProjection,
    DrLearner,
    PluginSmoother,
    OracleSmoother,
    PropSeparate,
    PropRatio,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::EfficientProjection,
        Strategy::PluginProjection,
        Strategy::OracleProjection,
        Strategy::DrLearner,
        Strategy::PluginSmoother,
        Strategy::OracleSmoother,
        Strategy::PropSeparate,
        Strategy::PropRatio,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::EfficientProjection => "efficient",
            Strategy::PluginProjection => "plugin",
            Strategy::OracleProjection => "oracle",
            Strategy::DrLearner => "dr-learner",
            Strategy::PluginSmoother => "plugin-smoother",
            Strategy::OracleSmoother => "oracle-smoother",
            Strategy::PropSeparate => "eif-separate",
            Strategy::PropRatio => "eif-ratio",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| IieError::Invalid(format!("unknown strategy {s:?}")))
    }

    fn is_proportion(&self) -> bool {
        matches!(self, Strategy::PropSeparate | Strategy::PropRatio)
    }

    fn is_projection(&self) -> bool {
        matches!(
            self,
            Strategy::EfficientProjection | Strategy::PluginProjection | Strategy::OracleProjection
        )
    }
}

/// One Monte-Carlo experiment on the base design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableConfig {
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub points: Vec<f64>,
    pub strategies: Vec<Strategy>,
    pub nuisance: NuisanceConfig,
    pub projection: ProjectionSpec,
    pub smoother: SmootherSpec,
    pub folds: usize,
    pub fold_mode: FoldMode,
    /// Largest tolerated fraction of failed replications.
    pub failure_cap: f64,
}

impl Default for TableConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            reps: 500,
            seed: 1,
            points: vec![0.0, 2.0],
            strategies: vec![
                Strategy::EfficientProjection,
                Strategy::PluginProjection,
                Strategy::OracleProjection,
            ],
            nuisance: NuisanceConfig::linear(),
            projection: ProjectionSpec::default(),
            smoother: SmootherSpec::default(),
            folds: 2,
            fold_mode: FoldMode::SwapAverage,
            failure_cap: 0.01,
        }
    }
}

impl TableConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(IieError::Invalid("reps must be positive".into()));
        }
        if self.n < 20 * self.folds.max(2) {
            return Err(IieError::TooSmall(format!("n = {} is too small for the second stage", self.n)));
        }
        if self.points.is_empty() || self.strategies.is_empty() {
            return Err(IieError::Invalid("need at least one point and one strategy".into()));
        }
        if !(0.0..1.0).contains(&self.failure_cap) {
            return Err(IieError::Invalid("failure cap must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Summary of one `(strategy, point)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McCell {
    pub point: f64,
    pub strategy: Strategy,
    pub projection: &'static str,
    pub n: usize,
    pub truth: f64,
    pub bias: f64,
    /// Standard deviation across replications (divisor `R`).
    pub std: f64,
    pub rmse: f64,
    /// Percentage of intervals covering the truth.
    pub coverage: f64,
    pub mean_se: f64,
    pub reps: usize,
    /// Replications where this strategy alone hit a degenerate ratio.
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub cells: Vec<McCell>,
    pub failed: usize,
    pub total: usize,
    pub seed: u64,
    /// Per replication, per cell: `(estimate, se)`. The outer `None` marks a
    /// failed replication, the inner one a degenerate ratio.
    #[serde(skip)]
    pub draws: Vec<Option<Vec<Option<(f64, f64)>>>>,
}

impl McReport {
    pub fn cell(&self, strategy: Strategy, point: f64) -> Option<&McCell> {
        self.cells.iter().find(|c| c.strategy == strategy && c.point == point)
    }
}

/// Per-replication RNG: one stream per replication index.
pub fn rep_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(rep as u64);
    r
}

fn truth_for(dgp: &Dgp, s: Strategy, basis: ProjectionBasis, x: f64) -> f64 {
    let np = dgp.point(x).expect("positivity");
    match s {
        _ if s.is_projection() => projection_truth(dgp, basis, x),
        Strategy::PropSeparate | Strategy::PropRatio => np.psi_m1(ArmPair::default()) / np.psi_total(ArmPair::default()),
        _ => np.psi_m1(ArmPair::default()),
    }
}

fn one_rep(cfg: &TableConfig, dgp: &Dgp, rep: usize) -> Result<Vec<Option<(f64, f64)>>> {
    let mut rng = rep_rng(cfg.seed, rep);
    let data = dgp.sample(cfg.n, &mut rng);
    let plan = make_folds(cfg.n, cfg.folds, rng.next_u64(), cfg.fold_mode)?;
    let needs_fit = cfg.strategies.iter().any(|s| {
        !matches!(s, Strategy::OracleProjection | Strategy::OracleSmoother)
    });
    let models = if needs_fit {
        nuisance::cross_fit(&data, &plan, &cfg.nuisance)?
    } else {
        vec![]
    };
    let fitted = NuisanceSource::CrossFit(&models, &plan);
    let oracle = NuisanceSource::Known(dgp);
    let arms = ArmPair::default();
    let k = IfKind::PsiM1;
    let pts = &cfg.points;
    let mut out = Vec::with_capacity(cfg.strategies.len() * pts.len());
    for s in &cfg.strategies {
        let reps = match s {
            Strategy::EfficientProjection => estimators::projection(&data, fitted, k, arms, &cfg.projection, pts),
            Strategy::PluginProjection => estimators::plugin_projection(&data, fitted, k, arms, &cfg.projection, pts),
            Strategy::OracleProjection => estimators::projection(&data, oracle, k, arms, &cfg.projection, pts),
            Strategy::DrLearner => estimators::dr_learner(&data, fitted, k, arms, &cfg.smoother, pts),
            Strategy::PluginSmoother => estimators::plugin_smoother(&data, fitted, k, arms, &cfg.smoother, pts),
            Strategy::OracleSmoother => estimators::dr_learner(&data, oracle, k, arms, &cfg.smoother, pts),
            Strategy::PropSeparate => {
                estimators::proportion_mediated(&data, fitted, arms, RatioMode::Separate, &cfg.smoother, pts)
            }
            Strategy::PropRatio => {
                estimators::proportion_mediated(&data, fitted, arms, RatioMode::Ratio, &cfg.smoother, pts)
            }
        };
        match reps {
            Ok(r) => out.extend(r.iter().map(|r| Some((r.estimate, r.se)))),
            // A near-zero total effect is an outcome of the experiment, not a failure.
            Err(IieError::RatioDegenerate { .. }) if s.is_proportion() => {
                out.extend(std::iter::repeat_n(None, pts.len()))
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Replicate the configured estimators and summarize each cell.
pub fn run_table(cfg: &TableConfig) -> Result<McReport> {
    cfg.validate()?;
    let dgp = Dgp::default();
    let draws: Vec<Option<Vec<Option<(f64, f64)>>>> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| one_rep(cfg, &dgp, rep).ok())
        .collect();
    let failed = draws.iter().filter(|d| d.is_none()).count();
    let cap = (cfg.failure_cap * cfg.reps as f64).floor() as usize;
    if failed > cap {
        return Err(IieError::FailureCap {
            failed,
            total: cfg.reps,
            cap,
        });
    }
    let ok: Vec<&Vec<Option<(f64, f64)>>> = draws.iter().flatten().collect();
    let mut cells = Vec::new();
    for (si, &s) in cfg.strategies.iter().enumerate() {
        for (pi, &x) in cfg.points.iter().enumerate() {
            let col = si * cfg.points.len() + pi;
            let truth = truth_for(&dgp, s, cfg.projection.basis, x);
            let col_draws: Vec<(f64, f64)> = ok.iter().filter_map(|d| d[col]).collect();
            let r = col_draws.len() as f64;
            let est: Vec<f64> = col_draws.iter().map(|d| d.0).collect();
            let mean = est.iter().sum::<f64>() / r;
            let bias = mean - truth;
            let std = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / r).sqrt();
            let rmse = (est.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / r).sqrt();
            let covered = col_draws
                .iter()
                .filter(|d| (d.0 - truth).abs() <= estimators::Z95 * d.1)
                .count();
            cells.push(McCell {
                point: x,
                strategy: s,
                projection: if s.is_projection() {
                    match cfg.projection.basis {
                        ProjectionBasis::Linear => "linear",
                        ProjectionBasis::Quadratic => "quadratic",
                    }
                } else {
                    "none"
                },
                n: cfg.n,
                truth,
                bias,
                std,
                rmse,
                coverage: 100.0 * covered as f64 / r,
                mean_se: col_draws.iter().map(|d| d.1).sum::<f64>() / r,
                reps: col_draws.len(),
                degenerate: ok.len() - col_draws.len(),
            });
        }
    }
    Ok(McReport {
        cells,
        failed,
        total: cfg.reps,
        seed: cfg.seed,
        draws,
    })
}

/// Nuisance-rate panels of the convergence experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub name: String,
    pub rates: RateSpec,
}

pub fn default_panels() -> Vec<Panel> {
    let fast = RateSpec::uniform(0.5);
    vec![
        Panel {
            name: "all-fast".into(),
            rates: fast,
        },
        Panel {
            name: "slow-pi".into(),
            rates: RateSpec { alpha_pi: 0.1, ..fast },
        },
        Panel {
            name: "slow-mu".into(),
            rates: RateSpec { alpha_mu: 0.1, ..fast },
        },
        Panel {
            name: "slow-mediator".into(),
            rates: RateSpec { alpha_med: 0.1, ..fast },
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub panels: Vec<Panel>,
    pub ns: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    /// Evaluation grid `[lo, hi]` with this many points.
    pub grid: (f64, f64, usize),
    /// Size of the pilot sample that fixes the bandwidth.
    pub pilot_n: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            panels: default_panels(),
            ns: vec![500, 1000, 2000, 4000, 8000, 16000],
            reps: 200,
            seed: 3,
            grid: (-1.0, 3.0, 41),
            pilot_n: 4000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub panel: String,
    pub n: usize,
    pub estimator: &'static str,
    pub scaled_rmse: f64,
    pub bandwidth: f64,
}

pub const CONVERGENCE_ESTIMATORS: [&str; 3] = ["plugin", "dr-learner", "oracle"];

/// Pilot bandwidth: LOO-CV on oracle pseudo-outcomes of one pilot sample of
/// size `pilot_n`. Returns `(h0, n0)`; sample size `n` uses
/// `h0 (n0 / n)^(1/5)`.
fn pilot_bandwidth(dgp: &Dgp, cfg: &ConvergenceConfig) -> Result<(f64, usize)> {
    let n0 = cfg.pilot_n;
    let data = dgp.sample(n0, &mut rep_rng(cfg.seed ^ PILOT_STREAM, 0));
    let vals = estimators::pseudo_values(&data, &NuisanceSource::Known(dgp).points(&data)?, IfKind::PsiM1, ArmPair::default())?;
    let v: Vec<f64> = data.iter().map(|o| o.v()).collect();
    let (h, _) = estimators::loocv_bandwidth(&vals, &v)?;
    Ok((h, n0))
}

const PILOT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const NUISANCE_STREAM: u64 = 0x2545_f491_4f6c_dd1d;

/// Scaled integrated RMSE per panel, sample size and estimator.
pub fn run_convergence(cfg: &ConvergenceConfig) -> Result<Vec<ConvergenceRow>> {
    if cfg.reps == 0 || cfg.ns.is_empty() || cfg.panels.is_empty() || cfg.grid.2 < 2 {
        return Err(IieError::Invalid("empty convergence design".into()));
    }
    for p in &cfg.panels {
        p.rates.validate()?;
    }
    let dgp = Dgp::default();
    let truth_eta: Arc<dyn NuisanceSet> = Arc::new(dgp);
    let (lo, hi, g) = cfg.grid;
    let grid: Vec<f64> = (0..g).map(|k| lo + (hi - lo) * k as f64 / (g - 1) as f64).collect();
    let law = StNormal::new(X_MEAN, dgp.dispersion.sd()).expect("positive sd");
    let wsum: f64 = grid.iter().map(|&x| law.pdf(x)).sum();
    let gw: Vec<f64> = grid.iter().map(|&x| law.pdf(x) / wsum).collect();
    let truth: Vec<f64> = grid.iter().map(|&x| dgp.point(x).expect("positivity").psi_m1(ArmPair::default())).collect();
    let arms = ArmPair::default();
    let mut rows = Vec::new();
    let (h0, n0) = pilot_bandwidth(&dgp, cfg)?;
    for &n in &cfg.ns {
        let h = h0 * (n0 as f64 / n as f64).powf(0.2);
        for (pi, panel) in cfg.panels.iter().enumerate() {
            let ise: Vec<[f64; 3]> = (0..cfg.reps)
                .into_par_iter()
                .map(|rep| -> Result<[f64; 3]> {
                    // Nuisance draws reuse one stream per replication across n and
                    // panels (common random numbers); samples are fresh.
                    let data = dgp.sample(n, &mut rep_rng(cfg.seed.wrapping_add(pi as u64) ^ (n as u64) << 32, rep));
                    let mut nrng = rep_rng(cfg.seed ^ NUISANCE_STREAM, rep);
                    let hat = nuisance::synthetic_nuisances(truth_eta.clone(), n, &panel.rates, &mut nrng)?;
                    let v: Vec<f64> = data.iter().map(|o| o.v()).collect();
                    let known = NuisanceSource::Known(&hat);
                    let dr_vals = estimators::pseudo_values(&data, &known.points(&data)?, IfKind::PsiM1, arms)?;
                    let or_vals =
                        estimators::pseudo_values(&data, &NuisanceSource::Known(&dgp).points(&data)?, IfKind::PsiM1, arms)?;
                    let dr = estimators::smooth(&dr_vals, &v, &grid, h)?;
                    let or = estimators::smooth(&or_vals, &v, &grid, h)?;
                    let mut e = [0.0; 3];
                    for k in 0..grid.len() {
                        let plug = eif::target_at(IfKind::PsiM1, &hat.at(&[grid[k]])?, arms)?;
                        e[0] += gw[k] * (plug - truth[k]).powi(2);
                        e[1] += gw[k] * (dr[k] - truth[k]).powi(2);
                        e[2] += gw[k] * (or[k] - truth[k]).powi(2);
                    }
                    Ok(e)
                })
                .collect::<Result<Vec<_>>>()?;
            for (j, name) in CONVERGENCE_ESTIMATORS.iter().enumerate() {
                let mise = ise.iter().map(|e| e[j]).sum::<f64>() / ise.len() as f64;
                rows.push(ConvergenceRow {
                    panel: panel.name.clone(),
                    n,
                    estimator: name,
                    scaled_rmse: mise.sqrt() * (n as f64).sqrt(),
                    bandwidth: h,
                });
            }
        }
    }
    // Order rows by panel, then n, then estimator.
    let order: Vec<&str> = cfg.panels.iter().map(|p| p.name.as_str()).collect();
    rows.sort_by_key(|r| (order.iter().position(|p| *p == r.panel), r.n));
    Ok(rows)
}

fn io_err(e: impl std::fmt::Display) -> IieError {
    IieError::Invalid(format!("write failed: {e}"))
}

pub fn write_truth_csv<W: Write>(w: W, t: &TruthCurves) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["x", "psi_m1", "psi_m2", "psi_cov", "psi_ide", "psi_total", "prop_med"])
        .map_err(io_err)?;
    for i in 0..t.x.len() {
        c.write_record(
            [t.x[i], t.psi_m1[i], t.psi_m2[i], t.psi_cov[i], t.psi_ide[i], t.psi_total[i], t.prop_med[i]]
                .map(|v| v.to_string()),
        )
        .map_err(io_err)?;
    }
    c.flush().map_err(io_err)
}

pub fn write_table_csv<W: Write>(w: W, r: &McReport) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record([
        "Point",
        "Strategy",
        "Projection",
        "Truth",
        "Bias",
        "Std",
        "RMSE",
        "Coverage",
        "n",
        "Reps",
        "Degenerate",
    ])
        .map_err(io_err)?;
    for cell in &r.cells {
        c.write_record([
            cell.point.to_string(),
            cell.strategy.name().to_string(),
            cell.projection.to_string(),
            cell.truth.to_string(),
            cell.bias.to_string(),
            cell.std.to_string(),
            cell.rmse.to_string(),
            cell.coverage.to_string(),
            cell.n.to_string(),
            cell.reps.to_string(),
            cell.degenerate.to_string(),
        ])
        .map_err(io_err)?;
    }
    c.flush().map_err(io_err)
}

pub fn write_convergence_csv<W: Write>(w: W, rows: &[ConvergenceRow]) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["panel", "n", "estimator", "scaled_rmse"]).map_err(io_err)?;
    for r in rows {
        c.write_record([r.panel.clone(), r.n.to_string(), r.estimator.to_string(), r.scaled_rmse.to_string()])
            .map_err(io_err)?;
    }
    c.flush().map_err(io_err)
}
