//! Nuisance sets from data, from prescribed error rates, and fold plans.
//!
//! Fitted learners are basis-expansion GLMs. Propensity and mediator laws use
//! one Newton solver for the multinomial logit (the propensity is its
//! two-class case); outcome regressions are logistic for binary `Y` and least
//! squares otherwise.

use crate::error::{IieError, Result};
use crate::model_core::{NuisancePoint, NuisanceSet, Observation, Provenance, POSITIVITY_FLOOR};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

pub const IRLS_TOL: f64 = 1e-8;
pub const IRLS_MAX_ITER: usize = 100;
pub const RIDGE_PENALTY: f64 = 1e-4;
/// Coefficients beyond this size signal (quasi-)separation.
const SEPARATION_COEF: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BasisKind {
    Polynomial { degree: usize },
    /// Piecewise-linear with knots at equally spaced sample quantiles.
    Spline { knots: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    /// Covariates with at most this many distinct values get indicator columns.
    pub saturate_at: usize,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self {
            kind: BasisKind::Polynomial { degree: 3 },
            saturate_at: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Column {
    Poly { mean: f64, sd: f64, degree: usize },
    Spline { mean: f64, sd: f64, knots: Vec<f64> },
    Levels(Vec<f64>),
}

/// A basis fitted to a covariate sample: intercept plus additive columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    cols: Vec<Column>,
    dim: usize,
}

impl Basis {
    pub fn build(spec: &BasisSpec, xs: &[&[f64]]) -> Result<Self> {
        let d = xs.first().map(|x| x.len()).ok_or_else(|| IieError::TooSmall("no rows".into()))?;
        let mut cols = Vec::with_capacity(d);
        let mut dim = 1;
        for j in 0..d {
            let mut v: Vec<f64> = xs.iter().map(|x| x[j]).collect();
            v.sort_by(|a, b| a.total_cmp(b));
            let mut levels = v.clone();
            levels.dedup();
            if levels.len() <= spec.saturate_at {
                dim += levels.len() - 1;
                cols.push(Column::Levels(levels));
                continue;
            }
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            match spec.kind {
                BasisKind::Polynomial { degree } => {
                    dim += degree;
                    cols.push(Column::Poly { mean, sd, degree });
                }
                BasisKind::Spline { knots } => {
                    let ks: Vec<f64> = (1..=knots)
                        .map(|k| {
                            let q = v[(k * v.len()) / (knots + 1)];
                            (q - mean) / sd
                        })
                        .collect();
                    dim += 1 + ks.len();
                    cols.push(Column::Spline { mean, sd, knots: ks });
                }
            }
        }
        Ok(Self { cols, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, x: &[f64]) -> Vec<f64> {
        let mut r = Vec::with_capacity(self.dim);
        r.push(1.0);
        for (c, &xj) in self.cols.iter().zip(x) {
            match c {
                Column::Poly { mean, sd, degree } => {
                    let z = (xj - mean) / sd;
                    let mut p = 1.0;
                    for _ in 0..*degree {
                        p *= z;
                        r.push(p);
                    }
                }
                Column::Spline { mean, sd, knots } => {
                    let z = (xj - mean) / sd;
                    r.push(z);
                    r.extend(knots.iter().map(|k| (z - k).max(0.0)));
                }
                Column::Levels(levels) => {
                    // Unseen values map to the nearest observed level.
                    let k = levels
                        .iter()
                        .enumerate()
                        .min_by(|a, b| (a.1 - xj).abs().total_cmp(&(b.1 - xj).abs()))
                        .map(|t| t.0)
                        .unwrap_or(0);
                    r.extend((1..levels.len()).map(|l| if l == k { 1.0 } else { 0.0 }));
                }
            }
        }
        r
    }

    fn design(&self, xs: &[&[f64]]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(xs.len(), self.dim);
        for (i, x) in xs.iter().enumerate() {
            for (j, v) in self.row(x).into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }
}

/// Multinomial-logit coefficients, one column per non-baseline class.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitFit {
    pub coef: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// The ridge-stabilized fallback was used.
    pub ridge: bool,
}

impl LogitFit {
    /// Class probabilities for one basis row (class 0 is the baseline).
    pub fn probs(&self, row: &[f64]) -> Vec<f64> {
        let k = self.coef.ncols();
        let mut eta = vec![0.0; k + 1];
        for c in 0..k {
            eta[c + 1] = row.iter().enumerate().map(|(j, r)| r * self.coef[(j, c)]).sum();
        }
        let m = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = eta.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }
}

/// Newton iterations for the multinomial logit with soft class labels
/// `y[i][c]` (rows need not sum to one) and observation weights implicit in
/// the labels. `ridge` penalizes all but the intercept on the mean-loss scale.
fn newton_logit(x: &DMatrix<f64>, y: &[Vec<f64>], ridge: f64) -> Result<LogitFit> {
    let (n, p) = x.shape();
    let k = y[0].len() - 1;
    let dim = p * k;
    let mut beta = DVector::<f64>::zeros(dim);
    let total: f64 = y.iter().flatten().sum();
    let mut converged = false;
    let mut iterations = 0;
    let probs = |beta: &DVector<f64>, i: usize| {
        let mut eta = vec![0.0; k + 1];
        for c in 0..k {
            eta[c + 1] = (0..p).map(|j| x[(i, j)] * beta[c * p + j]).sum();
        }
        let m = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = eta.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    while iterations < IRLS_MAX_ITER {
        iterations += 1;
        let mut grad = DVector::<f64>::zeros(dim);
        let mut hess = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..n {
            let pr = probs(&beta, i);
            let wi: f64 = y[i].iter().sum();
            for c in 0..k {
                let r = y[i][c + 1] - wi * pr[c + 1];
                for j in 0..p {
                    grad[c * p + j] += x[(i, j)] * r;
                }
                for d in 0..k {
                    let h = wi * pr[c + 1] * (if c == d { 1.0 } else { 0.0 } - pr[d + 1]);
                    for j in 0..p {
                        let xh = x[(i, j)] * h;
                        for l in 0..p {
                            hess[(c * p + j, d * p + l)] += xh * x[(i, l)];
                        }
                    }
                }
            }
        }
        if ridge > 0.0 {
            for c in 0..k {
                for j in 1..p {
                    let q = c * p + j;
                    grad[q] -= ridge * total * beta[q];
                    hess[(q, q)] += ridge * total;
                }
            }
        }
        let step = hess
            .clone()
            .cholesky()
            .map(|ch| ch.solve(&grad))
            .or_else(|| hess.clone().lu().solve(&grad))
            .ok_or_else(|| IieError::Rank("logit Hessian is singular".into()))?;
        if step.iter().any(|v| !v.is_finite()) {
            return Err(IieError::Rank("logit Newton step is not finite".into()));
        }
        beta += &step;
        let scale = 1.0 + beta.amax();
        if step.amax() <= IRLS_TOL * scale {
            converged = true;
            break;
        }
    }
    let coef = DMatrix::from_fn(p, k, |j, c| beta[c * p + j]);
    Ok(LogitFit {
        coef,
        iterations,
        converged,
        ridge: ridge > 0.0,
    })
}

/// Unpenalized fit, falling back to the ridge-stabilized one on separation.
fn fit_logit(x: &DMatrix<f64>, y: &[Vec<f64>]) -> Result<LogitFit> {
    match newton_logit(x, y, 0.0) {
        Ok(f) if f.converged && f.coef.amax() < SEPARATION_COEF => Ok(f),
        _ => newton_logit(x, y, RIDGE_PENALTY),
    }
}

/// Binary logistic regression of `y` in [0, 1] on the rows of `x`.
pub fn logistic_regression(x: &DMatrix<f64>, y: &[f64]) -> Result<LogitFit> {
    let labels: Vec<Vec<f64>> = y.iter().map(|&v| vec![1.0 - v, v]).collect();
    fit_logit(x, &labels)
}

fn clip_prob(p: f64) -> f64 {
    p.clamp(POSITIVITY_FLOOR, 1.0 - POSITIVITY_FLOOR)
}

/// Lift cells to the floor and take the excess from the others, so the law
/// stays normalized and every cell is at least the floor.
fn floor_law(p: &mut [f64]) {
    let lifted: f64 = p.iter().map(|&v| (POSITIVITY_FLOOR - v).max(0.0)).sum();
    if lifted == 0.0 {
        return;
    }
    let free: f64 = p.iter().filter(|&&v| v > POSITIVITY_FLOOR).map(|v| v - POSITIVITY_FLOOR).sum();
    for v in p.iter_mut() {
        if *v <= POSITIVITY_FLOOR {
            *v = POSITIVITY_FLOOR;
        } else {
            *v -= lifted * (*v - POSITIVITY_FLOOR) / free;
        }
    }
}

/// Fitted propensity `P(A = 1 | x)`.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    pub basis: Basis,
    pub fit: LogitFit,
}

impl PropensityModel {
    pub fn pi1(&self, x: &[f64]) -> f64 {
        clip_prob(self.fit.probs(&self.basis.row(x))[1])
    }
}

fn rows<'a>(data: &'a [Observation], idx: &[usize]) -> Vec<&'a [f64]> {
    idx.iter().map(|&i| data[i].x.as_slice()).collect()
}

pub fn fit_propensity(data: &[Observation], idx: &[usize], spec: &BasisSpec) -> Result<PropensityModel> {
    let treated = idx.iter().filter(|&&i| data[i].a == 1).count();
    if treated == 0 || treated == idx.len() {
        return Err(IieError::TooSmall("both arms must be observed".into()));
    }
    let xs = rows(data, idx);
    let basis = Basis::build(spec, &xs)?;
    let y: Vec<f64> = idx.iter().map(|&i| data[i].a as f64).collect();
    let fit = logistic_regression(&basis.design(&xs), &y)?;
    Ok(PropensityModel { basis, fit })
}

/// Fitted joint law of `(M1, M2)` given `(A, x)`, one multinomial per arm.
#[derive(Debug, Clone)]
pub struct MediatorModel {
    pub basis: Basis,
    pub fits: [LogitFit; 2],
    /// Add-half smoothing was applied because a cell was empty.
    pub smoothed: [bool; 2],
}

impl MediatorModel {
    pub fn joint(&self, a: usize, x: &[f64]) -> [[f64; 2]; 2] {
        let mut p = self.fits[a].probs(&self.basis.row(x));
        floor_law(&mut p);
        [[p[0], p[1]], [p[2], p[3]]]
    }
}

pub fn fit_joint_mediator(data: &[Observation], idx: &[usize], spec: &BasisSpec) -> Result<MediatorModel> {
    let xs = rows(data, idx);
    let basis = Basis::build(spec, &xs)?;
    let mut fits = Vec::with_capacity(2);
    let mut smoothed = [false; 2];
    for a in 0..2u8 {
        let sub: Vec<usize> = idx.iter().copied().filter(|&i| data[i].a == a).collect();
        if sub.is_empty() {
            return Err(IieError::TooSmall(format!("no observations in arm {a}")));
        }
        let mut labels: Vec<Vec<f64>> = sub
            .iter()
            .map(|&i| {
                let mut l = vec![0.0; 4];
                l[(data[i].m1 * 2 + data[i].m2) as usize] = 1.0;
                l
            })
            .collect();
        let mut counts = [0usize; 4];
        for l in &labels {
            counts[l.iter().position(|&v| v == 1.0).unwrap()] += 1;
        }
        if counts.contains(&0) {
            // Spread half an observation per cell over the arm's rows.
            smoothed[a as usize] = true;
            let w = 0.5 / sub.len() as f64;
            for l in labels.iter_mut() {
                l.iter_mut().for_each(|v| *v += w);
            }
        }
        let x = basis.design(&rows(data, &sub));
        fits.push(fit_logit(&x, &labels)?);
    }
    let f1 = fits.pop().unwrap();
    let f0 = fits.pop().unwrap();
    Ok(MediatorModel {
        basis,
        fits: [f0, f1],
        smoothed,
    })
}

#[derive(Debug, Clone)]
enum Regression {
    Logit(LogitFit),
    Linear(DVector<f64>),
}

impl Regression {
    fn predict(&self, row: &[f64]) -> f64 {
        match self {
            Regression::Logit(f) => clip_prob(f.probs(row)[1]),
            Regression::Linear(b) => row.iter().zip(b.iter()).map(|(r, c)| r * c).sum(),
        }
    }
}

fn least_squares(x: &DMatrix<f64>, y: &[f64]) -> Result<DVector<f64>> {
    let yv = DVector::from_column_slice(y);
    let xtx = x.transpose() * x;
    let xty = x.transpose() * yv;
    if let Some(ch) = xtx.clone().cholesky() {
        return Ok(ch.solve(&xty));
    }
    let mut r = xtx;
    let n = x.nrows() as f64;
    for j in 1..r.nrows() {
        r[(j, j)] += RIDGE_PENALTY * n;
    }
    r.cholesky()
        .map(|ch| ch.solve(&xty))
        .ok_or_else(|| IieError::Rank("outcome design".into()))
}

/// Outcome regressions `mu_a(m1, m2, x)`, one per stratum, with a pooled
/// fallback for thin strata.
#[derive(Debug, Clone)]
pub struct OutcomeModel {
    pub basis: Basis,
    strata: [[[Option<Regression>; 2]; 2]; 2],
    pooled: Option<Regression>,
    pub binary: bool,
    /// Strata served by the pooled model.
    pub pooled_strata: Vec<(u8, u8, u8)>,
}

impl OutcomeModel {
    pub fn mu(&self, a: usize, m1: usize, m2: usize, x: &[f64]) -> f64 {
        let row = self.basis.row(x);
        match &self.strata[a][m1][m2] {
            Some(r) => r.predict(&row),
            None => {
                let mut row = row;
                row.extend([a as f64, m1 as f64, m2 as f64]);
                self.pooled.as_ref().expect("pooled model fitted").predict(&row)
            }
        }
    }
}

pub fn fit_outcome(data: &[Observation], idx: &[usize], spec: &BasisSpec) -> Result<OutcomeModel> {
    let xs = rows(data, idx);
    let basis = Basis::build(spec, &xs)?;
    let binary = idx.iter().all(|&i| data[i].y == 0.0 || data[i].y == 1.0);
    let fit = |x: &DMatrix<f64>, y: &[f64]| -> Result<Regression> {
        Ok(if binary {
            Regression::Logit(logistic_regression(x, y)?)
        } else {
            Regression::Linear(least_squares(x, y)?)
        })
    };
    let mut strata: [[[Option<Regression>; 2]; 2]; 2] = Default::default();
    let mut pooled_strata = Vec::new();
    for c in 0..8u8 {
        let (a, m1, m2) = (c >> 2, (c >> 1) & 1, c & 1);
        let sub: Vec<usize> = idx
            .iter()
            .copied()
            .filter(|&i| data[i].a == a && data[i].m1 == m1 && data[i].m2 == m2)
            .collect();
        if sub.len() < 10 * basis.dim() {
            pooled_strata.push((a, m1, m2));
            continue;
        }
        let y: Vec<f64> = sub.iter().map(|&i| data[i].y).collect();
        strata[a as usize][m1 as usize][m2 as usize] = Some(fit(&basis.design(&rows(data, &sub)), &y)?);
    }
    let pooled = if pooled_strata.is_empty() {
        None
    } else {
        let mut x = DMatrix::zeros(idx.len(), basis.dim() + 3);
        for (r, &i) in idx.iter().enumerate() {
            let o = &data[i];
            let mut row = basis.row(&o.x);
            row.extend([o.a as f64, o.m1 as f64, o.m2 as f64]);
            for (j, v) in row.into_iter().enumerate() {
                x[(r, j)] = v;
            }
        }
        let y: Vec<f64> = idx.iter().map(|&i| data[i].y).collect();
        Some(fit(&x, &y)?)
    };
    Ok(OutcomeModel {
        basis,
        strata,
        pooled,
        binary,
        pooled_strata,
    })
}

/// Basis choices for each nuisance family.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NuisanceConfig {
    pub propensity: BasisSpec,
    pub mediator: BasisSpec,
    pub outcome: BasisSpec,
}

impl NuisanceConfig {
    /// Linear logits throughout. Cubic multinomial logits fitted on a few
    /// hundred rows per arm can push a mediator cell towards the clip floor
    /// in the covariate tails, which the inverse weights then amplify.
    pub fn linear() -> Self {
        let b = BasisSpec {
            kind: BasisKind::Polynomial { degree: 1 },
            ..BasisSpec::default()
        };
        Self {
            propensity: b,
            mediator: b,
            outcome: b,
        }
    }
}

/// All nuisances fitted on one training subsample.
#[derive(Debug, Clone)]
pub struct FittedNuisance {
    pub propensity: PropensityModel,
    pub mediator: MediatorModel,
    pub outcome: OutcomeModel,
    /// Fold whose observations were excluded from training, if any.
    pub held_out_fold: Option<usize>,
    /// Training indices, kept for out-of-fold audits.
    pub trained_on: Vec<usize>,
}

impl FittedNuisance {
    pub fn fit(data: &[Observation], idx: &[usize], cfg: &NuisanceConfig) -> Result<Self> {
        Ok(Self {
            propensity: fit_propensity(data, idx, &cfg.propensity)?,
            mediator: fit_joint_mediator(data, idx, &cfg.mediator)?,
            outcome: fit_outcome(data, idx, &cfg.outcome)?,
            held_out_fold: None,
            trained_on: idx.to_vec(),
        })
    }

    /// Any stabilizing fallback was used somewhere.
    pub fn flagged(&self) -> bool {
        self.propensity.fit.ridge
            || self.mediator.fits.iter().any(|f| f.ridge)
            || self.mediator.smoothed.iter().any(|&s| s)
            || !self.outcome.pooled_strata.is_empty()
    }
}

impl NuisanceSet for FittedNuisance {
    fn at(&self, x: &[f64]) -> Result<NuisancePoint> {
        let mut mu = [[[0.0; 2]; 2]; 2];
        for (a, ma) in mu.iter_mut().enumerate() {
            for (m1, row) in ma.iter_mut().enumerate() {
                for (m2, v) in row.iter_mut().enumerate() {
                    *v = self.outcome.mu(a, m1, m2, x);
                }
            }
        }
        let pj = [self.mediator.joint(0, x), self.mediator.joint(1, x)];
        NuisancePoint::from_joint(self.propensity.pi1(x), mu, pj)
    }

    fn provenance(&self) -> Provenance {
        Provenance::Fitted
    }
}

/// Convergence exponents for the three nuisance families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSpec {
    pub alpha_pi: f64,
    pub alpha_mu: f64,
    pub alpha_med: f64,
    pub c: f64,
    /// Seed of the fixed wiggle shapes.
    pub seed: u64,
}

impl RateSpec {
    pub fn uniform(alpha: f64) -> Self {
        Self {
            alpha_pi: alpha,
            alpha_mu: alpha,
            alpha_med: alpha,
            c: 1.0,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in [self.alpha_pi, self.alpha_mu, self.alpha_med] {
            if !(a > 0.0 && a <= 0.5) {
                return Err(IieError::Invalid(format!("rate exponent {a} outside (0, 0.5]")));
            }
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(IieError::Invalid(format!("rate scale {} must be non-negative", self.c)));
        }
        Ok(())
    }
}

/// Catmull-Rom curve through random knot values in [-1, 1] on [-2, 4].
#[derive(Debug, Clone)]
struct Wiggle {
    knots: Vec<f64>,
}

impl Wiggle {
    const LO: f64 = -2.0;
    const STEP: f64 = 0.5;

    fn new<R: Rng>(rng: &mut R) -> Self {
        Self {
            knots: (0..13).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        }
    }

    fn at(&self, x: f64) -> f64 {
        let last = self.knots.len() - 1;
        let t = ((x - Self::LO) / Self::STEP).clamp(0.0, last as f64);
        let i = (t.floor() as usize).min(last - 1);
        let u = t - i as f64;
        let k = |j: isize| self.knots[j.clamp(0, last as isize) as usize];
        let (p0, p1, p2, p3) = (k(i as isize - 1), k(i as isize), k(i as isize + 1), k(i as isize + 2));
        0.5 * (2.0 * p1
            + (p2 - p0) * u
            + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u * u
            + (3.0 * p1 - p0 - 3.0 * p2 + p3) * u * u * u)
    }
}

/// One perturbed component: `shift + scale * wiggle(x)` on the link scale.
#[derive(Debug, Clone)]
struct Perturbation {
    shift: f64,
    scale: f64,
    wiggle: Wiggle,
}

impl Perturbation {
    fn at(&self, x: f64) -> f64 {
        self.shift + self.scale * self.wiggle.at(x)
    }
}

/// True nuisances perturbed on the logit (or log-cell) scale at prescribed
/// rates, to mimic learners converging as `n^-alpha`.
pub struct SyntheticNuisance {
    truth: Arc<dyn NuisanceSet>,
    pi: Perturbation,
    mu: Vec<Perturbation>,
    med: Vec<Perturbation>,
}

/// Draw one synthetic nuisance set for sample size `n`; shifts come from
/// `rng`, wiggle shapes from `rates.seed`.
pub fn synthetic_nuisances<R: Rng>(
    truth: Arc<dyn NuisanceSet>,
    n: usize,
    rates: &RateSpec,
    rng: &mut R,
) -> Result<SyntheticNuisance> {
    rates.validate()?;
    let mut shapes = ChaCha8Rng::seed_from_u64(rates.seed);
    let mut make = |alpha: f64, rng: &mut R| -> Result<Perturbation> {
        let scale = rates.c * (n as f64).powf(-alpha);
        let shift = if scale > 0.0 {
            Normal::new(scale, scale)
                .map_err(|e| IieError::Invalid(e.to_string()))?
                .sample(rng)
        } else {
            0.0
        };
        Ok(Perturbation {
            shift,
            scale,
            wiggle: Wiggle::new(&mut shapes),
        })
    };
    let pi = make(rates.alpha_pi, rng)?;
    let mu = (0..8).map(|_| make(rates.alpha_mu, rng)).collect::<Result<_>>()?;
    let med = (0..8).map(|_| make(rates.alpha_med, rng)).collect::<Result<_>>()?;
    Ok(SyntheticNuisance { truth, pi, mu, med })
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn expit(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl NuisanceSet for SyntheticNuisance {
    fn at(&self, x: &[f64]) -> Result<NuisancePoint> {
        let t = self.truth.at(x)?;
        let v = x[0];
        let pi1 = clip_prob(expit(logit(t.pi1) + self.pi.at(v)));
        let mut mu = t.mu;
        let mut pj = t.pj;
        for a in 0..2 {
            let mut cells = [0.0; 4];
            for c in 0..4 {
                let (m1, m2) = (c >> 1, c & 1);
                let k = a * 4 + c;
                let m = t.mu[a][m1][m2];
                mu[a][m1][m2] = if m > 0.0 && m < 1.0 {
                    clip_prob(expit(logit(m) + self.mu[k].at(v)))
                } else {
                    m + self.mu[k].at(v)
                };
                cells[c] = t.pj[a][m1][m2].ln() + self.med[k].at(v);
            }
            let mx = cells.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut p: Vec<f64> = cells.iter().map(|c| (c - mx).exp()).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            floor_law(&mut p);
            pj[a] = [[p[0], p[1]], [p[2], p[3]]];
        }
        NuisancePoint::from_joint(pi1, mu, pj)
    }

    fn provenance(&self) -> Provenance {
        Provenance::Synthetic
    }
}

/// Root-mean-square distance between two nuisance sets over sample points,
/// per family: `(propensity, outcome, joint mediator)`.
pub fn l2_error(a: &dyn NuisanceSet, b: &dyn NuisanceSet, xs: &[Vec<f64>]) -> Result<[f64; 3]> {
    let mut s = [0.0; 3];
    for x in xs {
        let (p, q) = (a.at(x)?, b.at(x)?);
        s[0] += (p.pi1 - q.pi1).powi(2);
        for ((u, v), (g, h)) in p
            .mu
            .iter()
            .flatten()
            .flatten()
            .zip(q.mu.iter().flatten().flatten())
            .zip(p.pj.iter().flatten().flatten().zip(q.pj.iter().flatten().flatten()))
        {
            s[1] += (u - v).powi(2) / 8.0;
            s[2] += (g - h).powi(2) / 8.0;
        }
    }
    let n = xs.len() as f64;
    Ok(s.map(|v| (v / n).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FoldMode {
    /// Second stage on each fold separately, estimates averaged.
    #[default]
    SwapAverage,
    /// One second stage on all out-of-fold pseudo-outcomes.
    Pooled,
}

/// A partition of `0..n` into `k` folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub assignment: Vec<usize>,
    pub mode: FoldMode,
}

impl FoldPlan {
    pub fn fold(&self, f: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == f).collect()
    }

    pub fn complement(&self, f: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != f).collect()
    }
}

pub fn make_folds(n: usize, k: usize, seed: u64, mode: FoldMode) -> Result<FoldPlan> {
    if k < 2 || n < 2 * k {
        return Err(IieError::TooSmall(format!("{n} rows cannot form {k} folds of at least 2")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        assignment[i] = pos % k;
    }
    Ok(FoldPlan { k, assignment, mode })
}

/// Nuisances fitted on each fold's complement.
pub fn cross_fit(data: &[Observation], plan: &FoldPlan, cfg: &NuisanceConfig) -> Result<Vec<FittedNuisance>> {
    (0..plan.k)
        .map(|f| {
            let mut m = FittedNuisance::fit(data, &plan.complement(f), cfg)?;
            m.held_out_fold = Some(f);
            Ok(m)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_law_keeps_normalization() {
        let mut p = vec![0.0, 1e-9, 0.3, 0.7 - 1e-9];
        floor_law(&mut p);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p.iter().all(|&v| v >= POSITIVITY_FLOOR));
    }

    #[test]
    fn wiggle_interpolates_knots() {
        let w = Wiggle::new(&mut ChaCha8Rng::seed_from_u64(1));
        for (j, k) in w.knots.iter().enumerate() {
            let x = Wiggle::LO + j as f64 * Wiggle::STEP;
            assert!((w.at(x) - k).abs() < 1e-12);
        }
    }

    #[test]
    fn folds_partition_and_balance() {
        let p = make_folds(10, 2, 3, FoldMode::SwapAverage).unwrap();
        let (a, b) = (p.fold(0), p.fold(1));
        assert_eq!(a.len() + b.len(), 10);
        assert!(a.iter().all(|i| !b.contains(i)));
        let q = make_folds(11, 3, 3, FoldMode::Pooled).unwrap();
        let sizes: Vec<usize> = (0..3).map(|f| q.fold(f).len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert_eq!(make_folds(10, 2, 3, FoldMode::SwapAverage).unwrap(), p);
        assert!(make_folds(3, 2, 0, FoldMode::Pooled).is_err());
    }

    #[test]
    fn basis_saturates_small_support() {
        let xs: Vec<Vec<f64>> = (0..30).map(|i| vec![(i % 3) as f64]).collect();
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let b = Basis::build(&BasisSpec::default(), &refs).unwrap();
        assert_eq!(b.dim(), 3);
        assert_eq!(b.row(&[2.0]), vec![1.0, 0.0, 1.0]);
    }
}
