//! Estimators built on pseudo-outcomes.
//!
//! * one-step: the sample mean of an influence function;
//! * projection: least squares of pseudo-outcomes on a parametric curve in `v`,
//!   with sandwich inference;
//! * DR-Learner: a local-linear smoother of pseudo-outcomes in `v`;
//! * plug-in comparators, sensitivity bounds and the proportion mediated.
//!
//! Nuisances come from a [`NuisanceSource`]: either known (oracle or
//! synthetic), used on the full sample, or cross-fitted, in which case each
//! observation is scored by the model that did not see it.

use crate::eif::{self, IfKind};
use crate::error::{IieError, Result};
use crate::model_core::{ArmPair, Estimand, NuisancePoint, NuisanceSet, Observation, Provenance};
use crate::nuisance::{FittedNuisance, FoldMode, FoldPlan};
use crate::sensitivity::{AssumptionId, SensitivityAssumption};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Supporting numbers attached to an estimate.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    pub n: usize,
    pub max_inverse_weight: Option<f64>,
    /// `sum_i |w_i(v)|` of the second-stage smoother.
    pub sum_abs_weights: Option<f64>,
    pub bandwidth: Option<f64>,
    /// Some nuisance fit needed a stabilizing fallback.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub estimand: String,
    /// Query value of `v`; `None` for averages.
    pub point: Option<f64>,
    pub estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub provenance: Provenance,
    pub diagnostics: Diagnostics,
}

impl EstimateReport {
    pub fn new(estimand: impl Into<String>, point: Option<f64>, estimate: f64, se: f64, provenance: Provenance) -> Self {
        let se = se.max(0.0);
        Self {
            estimand: estimand.into(),
            point,
            estimate,
            se,
            ci_lo: estimate - Z95 * se,
            ci_hi: estimate + Z95 * se,
            provenance,
            diagnostics: Diagnostics::default(),
        }
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_lo <= truth && truth <= self.ci_hi
    }
}

/// Where nuisances for each observation come from.
#[derive(Clone, Copy)]
pub enum NuisanceSource<'a> {
    /// One nuisance set for every row (true or synthetic).
    Known(&'a dyn NuisanceSet),
    /// Model `k` scores fold `k` and was trained on its complement.
    CrossFit(&'a [FittedNuisance], &'a FoldPlan),
}

impl<'a> NuisanceSource<'a> {
    fn provenance(&self) -> Provenance {
        match self {
            NuisanceSource::Known(e) => e.provenance(),
            NuisanceSource::CrossFit(..) => Provenance::Fitted,
        }
    }

    fn flagged(&self) -> bool {
        match self {
            NuisanceSource::Known(_) => false,
            NuisanceSource::CrossFit(m, _) => m.iter().any(|f| f.flagged()),
        }
    }

    /// Nuisances at observation `i`, never from a model trained on it.
    pub fn at(&self, data: &[Observation], i: usize) -> Result<NuisancePoint> {
        match self {
            NuisanceSource::Known(e) => e.at(&data[i].x),
            NuisanceSource::CrossFit(models, plan) => {
                let f = plan.assignment[i];
                let m = &models[f];
                if m.held_out_fold != Some(f) {
                    return Err(IieError::Invalid(format!("model {f} was not trained out of fold")));
                }
                m.at(&data[i].x)
            }
        }
        .map_err(|e| e.at_row(i))
    }

    pub fn points(&self, data: &[Observation]) -> Result<Vec<NuisancePoint>> {
        (0..data.len()).map(|i| self.at(data, i)).collect()
    }
}

/// Pseudo-outcomes of `kind` at precomputed nuisance points.
pub fn pseudo_values(data: &[Observation], nps: &[NuisancePoint], kind: IfKind, arms: ArmPair) -> Result<Vec<f64>> {
    data.iter()
        .zip(nps)
        .enumerate()
        .map(|(i, (o, np))| eif::eval(kind, o.into(), np, arms).map_err(|e| e.at_row(i)))
        .collect()
}

/// Plug-in conditional targets at precomputed nuisance points.
pub fn plugin_values(nps: &[NuisancePoint], kind: IfKind, arms: ArmPair) -> Result<Vec<f64>> {
    nps.iter()
        .enumerate()
        .map(|(i, np)| eif::target_at(kind, np, arms).map_err(|e| e.at_row(i)))
        .collect()
}

/// Largest absolute inverse-probability factor in the influence function of
/// the M1 indirect effect at one covariate value.
pub fn inverse_weight(np: &NuisancePoint, arms: ArmPair) -> f64 {
    let (a, ap) = (arms.a() as usize, arms.a_prime() as usize);
    let pa = np.pi(arms.a());
    let mut w: f64 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let d = pa * np.pj[a][i][j];
            let s = np.pm2[ap][j];
            w = w
                .max((np.pm1[a][i] - np.pm1[ap][i]).abs() * s / d)
                .max(np.pm1[a][i] * s / d)
                .max(np.pm1[ap][i] * s / d);
        }
    }
    w
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

/// Sample mean of pseudo-outcomes with standard error `sd / sqrt(n)`.
pub fn one_step_values(values: &[f64], estimand: &str, provenance: Provenance) -> Result<EstimateReport> {
    if values.len() < 2 {
        return Err(IieError::TooSmall("one-step needs at least two rows".into()));
    }
    let (m, se) = mean_se(values);
    let mut r = EstimateReport::new(estimand, None, m, se, provenance);
    r.diagnostics.n = values.len();
    Ok(r)
}

pub fn one_step(data: &[Observation], source: NuisanceSource, kind: IfKind, arms: ArmPair) -> Result<EstimateReport> {
    let nps = source.points(data)?;
    let vals = pseudo_values(data, &nps, kind, arms)?;
    let mut r = one_step_values(&vals, &kind.estimand().name(), source.provenance())?;
    r.diagnostics.max_inverse_weight = nps.iter().map(|np| inverse_weight(np, arms)).reduce(f64::max);
    r.diagnostics.flagged = source.flagged();
    Ok(r)
}

/// Parametric working model `g(v; beta)` for the projection estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionBasis {
    #[default]
    Linear,
    Quadratic,
}

impl ProjectionBasis {
    pub fn row(&self, v: f64) -> Vec<f64> {
        match self {
            ProjectionBasis::Linear => vec![1.0, v],
            ProjectionBasis::Quadratic => vec![1.0, v, v * v],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub basis: ProjectionBasis,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionFit {
    pub basis: ProjectionBasis,
    pub beta: DVector<f64>,
    /// `P_n[w g g^T]`, the derivative of the moment map up to sign.
    pub m_hat: DMatrix<f64>,
    /// Sample covariance of the moment contributions.
    pub omega: DMatrix<f64>,
    /// `M^-1 Omega M^-T`; divide by `n` for the covariance of `beta`.
    pub sandwich: DMatrix<f64>,
    pub n: usize,
    pub provenance: Provenance,
}

/// Weighted least squares of `y` on the working basis, with sandwich
/// covariance. `w` defaults to uniform weights.
pub fn fit_projection(y: &[f64], v: &[f64], w: Option<&[f64]>, spec: &ProjectionSpec) -> Result<ProjectionFit> {
    let n = y.len();
    if n != v.len() || w.is_some_and(|w| w.len() != n) {
        return Err(IieError::Invalid("projection inputs differ in length".into()));
    }
    let p = spec.basis.row(0.0).len();
    if n <= p {
        return Err(IieError::TooSmall(format!("{n} rows for {p} coefficients")));
    }
    let weight = |i: usize| w.map_or(1.0, |w| w[i]);
    let mut m = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    for i in 0..n {
        let g = DVector::from_vec(spec.basis.row(v[i]));
        m += weight(i) * &g * g.transpose();
        b += weight(i) * y[i] * &g;
    }
    m /= n as f64;
    b /= n as f64;
    let minv = m
        .clone()
        .try_inverse()
        .filter(|inv| inv.iter().all(|x| x.is_finite()) && m.clone().svd(false, false).singular_values.min() > 1e-12 * m.norm())
        .ok_or_else(|| IieError::Rank("projection design".into()))?;
    let beta = &minv * b;
    let mut omega = DMatrix::<f64>::zeros(p, p);
    for i in 0..n {
        let g = DVector::from_vec(spec.basis.row(v[i]));
        let r = y[i] - g.dot(&beta);
        let s = weight(i) * r * g;
        omega += &s * s.transpose();
    }
    omega /= n as f64;
    let sandwich = &minv * &omega * minv.transpose();
    Ok(ProjectionFit {
        basis: spec.basis,
        beta,
        m_hat: m,
        omega,
        sandwich,
        n,
        provenance: Provenance::Fitted,
    })
}

/// `P_n[w g (y - g^T beta)]` at the fitted coefficients.
pub fn moment_residual(fit: &ProjectionFit, y: &[f64], v: &[f64], w: Option<&[f64]>) -> DVector<f64> {
    let mut s = DVector::<f64>::zeros(fit.beta.len());
    for i in 0..y.len() {
        let g = DVector::from_vec(fit.basis.row(v[i]));
        s += w.map_or(1.0, |w| w[i]) * (y[i] - g.dot(&fit.beta)) * g;
    }
    s / y.len() as f64
}

/// `g(v; beta_hat)` with delta-method standard error.
pub fn project_predict(fit: &ProjectionFit, v: f64, estimand: &str) -> EstimateReport {
    let g = DVector::from_vec(fit.basis.row(v));
    let var = (g.transpose() * &fit.sandwich * &g)[(0, 0)] / fit.n as f64;
    let mut r = EstimateReport::new(estimand, Some(v), g.dot(&fit.beta), var.sqrt(), fit.provenance);
    r.diagnostics.n = fit.n;
    r
}

/// Bandwidth choice for the second-stage smoother.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    /// Leave-one-out CV over a log grid on `[0.05, 2] * sd(v)`.
    #[default]
    Loocv,
    Fixed(f64),
}

/// How the pointwise residual variance is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMode {
    /// Kernel-weighted squared residuals around each query point.
    #[default]
    Local,
    /// One residual variance for the whole curve.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SmootherSpec {
    pub bandwidth: Bandwidth,
    pub variance: VarianceMode,
}

pub const CV_GRID_SIZE: usize = 20;
/// Kernel weights beyond this many bandwidths are treated as zero.
const TRUNCATE: f64 = 8.0;

/// A local-linear Gaussian-kernel fit at a set of query points.
#[derive(Debug, Clone, PartialEq)]
pub struct SmootherFit {
    pub bandwidth: f64,
    pub queries: Vec<f64>,
    pub estimates: Vec<f64>,
    pub variances: Vec<f64>,
    /// `w_i(v)` per query, in the caller's row order.
    pub weights: Vec<Vec<f64>>,
    pub sum_abs_weights: Vec<f64>,
    pub sigma2_global: f64,
    /// `(h, LOO score)` when the bandwidth was cross-validated.
    pub cv_scores: Vec<(f64, f64)>,
}

impl SmootherFit {
    pub fn report(&self, q: usize, estimand: &str, provenance: Provenance) -> EstimateReport {
        let mut r = EstimateReport::new(estimand, Some(self.queries[q]), self.estimates[q], self.variances[q].sqrt(), provenance);
        r.diagnostics.n = self.weights[q].len();
        r.diagnostics.bandwidth = Some(self.bandwidth);
        r.diagnostics.sum_abs_weights = Some(self.sum_abs_weights[q]);
        r
    }
}

/// Data sorted by `v`, for windowed kernel sums.
struct Sorted {
    v: Vec<f64>,
    y: Vec<f64>,
    order: Vec<usize>,
}

impl Sorted {
    fn new(y: &[f64], v: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        Self {
            v: order.iter().map(|&i| v[i]).collect(),
            y: order.iter().map(|&i| y[i]).collect(),
            order,
        }
    }

    fn window(&self, v0: f64, h: f64) -> std::ops::Range<usize> {
        let lo = self.v.partition_point(|&x| x < v0 - TRUNCATE * h);
        let hi = self.v.partition_point(|&x| x <= v0 + TRUNCATE * h);
        lo..hi
    }

    /// Kernel moments `(S0, S1, S2, T0, T1)` around `v0`.
    fn moments(&self, v0: f64, h: f64) -> [f64; 5] {
        let mut s = [0.0; 5];
        for j in self.window(v0, h) {
            let d = self.v[j] - v0;
            let k = (-0.5 * (d / h).powi(2)).exp();
            s[0] += k;
            s[1] += k * d;
            s[2] += k * d * d;
            s[3] += k * self.y[j];
            s[4] += k * d * self.y[j];
        }
        s
    }

    fn fitted(&self, v0: f64, h: f64) -> Option<(f64, [f64; 5])> {
        let s = self.moments(v0, h);
        let den = s[0] * s[2] - s[1] * s[1];
        if !(den > 1e-12 * s[0] * s[2]) {
            return None;
        }
        Some(((s[2] * s[3] - s[1] * s[4]) / den, s))
    }

    /// Exact leave-one-out score `mean(((y - yhat) / (1 - L_ii))^2)`.
    fn loo_score(&self, h: f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.v.len() {
            let Some((yhat, s)) = self.fitted(self.v[i], h) else {
                return f64::INFINITY;
            };
            let lii = s[2] / (s[0] * s[2] - s[1] * s[1]);
            if !(lii < 1.0 - 1e-10) {
                return f64::INFINITY;
            }
            acc += ((self.y[i] - yhat) / (1.0 - lii)).powi(2);
        }
        acc / self.v.len() as f64
    }

    /// Weights in sorted order at `v0`.
    fn weights(&self, v0: f64, h: f64) -> Result<Vec<f64>> {
        let s = self.moments(v0, h);
        let den = s[0] * s[2] - s[1] * s[1];
        if !(den > 1e-12 * s[0] * s[2]) {
            return Err(IieError::DegenerateDesign(format!("too few points near v = {v0} for h = {h}")));
        }
        let mut w = vec![0.0; self.v.len()];
        for j in self.window(v0, h) {
            let d = self.v[j] - v0;
            let k = (-0.5 * (d / h).powi(2)).exp();
            w[j] = k * (s[2] - d * s[1]) / den;
        }
        Ok(w)
    }
}

fn sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn check_smoother_input(y: &[f64], v: &[f64]) -> Result<()> {
    if y.len() != v.len() {
        return Err(IieError::Invalid("smoother inputs differ in length".into()));
    }
    if v.len() < 20 {
        return Err(IieError::TooSmall(format!("smoother needs 20 points, got {}", v.len())));
    }
    if !(sd(v) > 0.0) {
        return Err(IieError::DegenerateDesign("all covariate values coincide".into()));
    }
    Ok(())
}

/// The cross-validated bandwidth and the full score table.
pub fn loocv_bandwidth(y: &[f64], v: &[f64]) -> Result<(f64, Vec<(f64, f64)>)> {
    check_smoother_input(y, v)?;
    let s = Sorted::new(y, v);
    let sdv = sd(v);
    let (lo, hi) = (0.05f64.ln(), 2f64.ln());
    let scores: Vec<(f64, f64)> = (0..CV_GRID_SIZE)
        .map(|k| {
            let h = sdv * (lo + (hi - lo) * k as f64 / (CV_GRID_SIZE - 1) as f64).exp();
            (h, s.loo_score(h))
        })
        .collect();
    let best = scores
        .iter()
        .filter(|t| t.1.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| IieError::DegenerateDesign("no bandwidth gives a finite LOO score".into()))?;
    Ok((best.0, scores))
}

/// Point estimates only, at fixed bandwidth `h`. Skips the residual pass
/// that variance estimation needs, so the cost is linear in `n` per query.
pub fn smooth(y: &[f64], v: &[f64], queries: &[f64], h: f64) -> Result<Vec<f64>> {
    check_smoother_input(y, v)?;
    if !(h > 0.0 && h.is_finite()) {
        return Err(IieError::Invalid(format!("bandwidth {h} must be positive")));
    }
    let s = Sorted::new(y, v);
    queries
        .iter()
        .map(|&q| Ok(s.weights(q, h)?.iter().zip(&s.y).map(|(w, y)| w * y).sum()))
        .collect()
}

/// Local-linear smoother of `y` on `v`, evaluated at `queries`.
pub fn fit_smoother(y: &[f64], v: &[f64], queries: &[f64], spec: &SmootherSpec) -> Result<SmootherFit> {
    check_smoother_input(y, v)?;
    let (h, cv_scores) = match spec.bandwidth {
        Bandwidth::Loocv => loocv_bandwidth(y, v)?,
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => (h, vec![]),
        Bandwidth::Fixed(h) => return Err(IieError::Invalid(format!("bandwidth {h} must be positive"))),
    };
    let s = Sorted::new(y, v);
    let n = v.len();
    // Residuals at the data and the trace of the hat matrix.
    let mut resid = vec![0.0; n];
    let mut trace = 0.0;
    for j in 0..n {
        if let Some((yhat, m)) = s.fitted(s.v[j], h) {
            resid[j] = s.y[j] - yhat;
            trace += m[2] / (m[0] * m[2] - m[1] * m[1]);
        }
    }
    let sigma2_global = resid.iter().map(|r| r * r).sum::<f64>() / (n as f64 - trace).max(1.0);
    let mut estimates = Vec::with_capacity(queries.len());
    let mut variances = Vec::with_capacity(queries.len());
    let mut weights = Vec::with_capacity(queries.len());
    let mut sum_abs_weights = Vec::with_capacity(queries.len());
    for &q in queries {
        let w = s.weights(q, h)?;
        estimates.push(w.iter().zip(&s.y).map(|(w, y)| w * y).sum());
        let sw2: f64 = w.iter().map(|w| w * w).sum();
        let sigma2 = match spec.variance {
            VarianceMode::Global => sigma2_global,
            VarianceMode::Local => {
                let (mut num, mut den) = (0.0, 0.0);
                for j in s.window(q, h) {
                    let k = (-0.5 * ((s.v[j] - q) / h).powi(2)).exp();
                    num += k * resid[j] * resid[j];
                    den += k;
                }
                num / den
            }
        };
        variances.push(sigma2 * sw2);
        sum_abs_weights.push(w.iter().map(|w| w.abs()).sum());
        let mut orig = vec![0.0; n];
        for (j, &i) in s.order.iter().enumerate() {
            orig[i] = w[j];
        }
        weights.push(orig);
    }
    Ok(SmootherFit {
        bandwidth: h,
        queries: queries.to_vec(),
        estimates,
        variances,
        weights,
        sum_abs_weights,
        sigma2_global,
        cv_scores,
    })
}

/// Second stage on already computed pseudo-outcomes, honouring the fold mode.
/// For known nuisances there are no folds and one smoother sees every row.
pub fn second_stage(
    values: &[f64],
    data: &[Observation],
    source: NuisanceSource,
    spec: &SmootherSpec,
    queries: &[f64],
    estimand: &str,
) -> Result<Vec<EstimateReport>> {
    let v: Vec<f64> = data.iter().map(|o| o.v()).collect();
    let prov = source.provenance();
    let plan = match source {
        NuisanceSource::CrossFit(_, plan) if plan.mode == FoldMode::SwapAverage => plan,
        _ => {
            let fit = fit_smoother(values, &v, queries, spec)?;
            return Ok((0..queries.len()).map(|q| fit.report(q, estimand, prov)).collect());
        }
    };
    let mut est = vec![0.0; queries.len()];
    let mut var = vec![0.0; queries.len()];
    let mut sabs = vec![0.0; queries.len()];
    let mut bw = 0.0;
    for f in 0..plan.k {
        let idx = plan.fold(f);
        let yf: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
        let vf: Vec<f64> = idx.iter().map(|&i| v[i]).collect();
        let fit = fit_smoother(&yf, &vf, queries, spec)?;
        for q in 0..queries.len() {
            est[q] += fit.estimates[q];
            var[q] += fit.variances[q];
            sabs[q] += fit.sum_abs_weights[q];
        }
        bw += fit.bandwidth;
    }
    let k = plan.k as f64;
    Ok((0..queries.len())
        .map(|q| {
            let mut r = EstimateReport::new(estimand, Some(queries[q]), est[q] / k, (var[q] / (k * k)).sqrt(), prov);
            r.diagnostics.n = data.len();
            r.diagnostics.bandwidth = Some(bw / k);
            r.diagnostics.sum_abs_weights = Some(sabs[q] / k);
            r
        })
        .collect())
}

/// DR-Learner: smooth out-of-fold pseudo-outcomes of `kind` on `v`.
pub fn dr_learner(
    data: &[Observation],
    source: NuisanceSource,
    kind: IfKind,
    arms: ArmPair,
    spec: &SmootherSpec,
    queries: &[f64],
) -> Result<Vec<EstimateReport>> {
    let nps = source.points(data)?;
    let vals = pseudo_values(data, &nps, kind, arms)?;
    let mut out = second_stage(&vals, data, source, spec, queries, &kind.estimand().name())?;
    let miw = nps.iter().map(|np| inverse_weight(np, arms)).reduce(f64::max);
    for r in &mut out {
        r.diagnostics.max_inverse_weight = miw;
        r.diagnostics.flagged = source.flagged();
    }
    Ok(out)
}

/// Projection estimator on out-of-fold pseudo-outcomes (all rows pooled).
pub fn projection(
    data: &[Observation],
    source: NuisanceSource,
    kind: IfKind,
    arms: ArmPair,
    spec: &ProjectionSpec,
    queries: &[f64],
) -> Result<Vec<EstimateReport>> {
    let nps = source.points(data)?;
    let vals = pseudo_values(data, &nps, kind, arms)?;
    let v: Vec<f64> = data.iter().map(|o| o.v()).collect();
    let mut fit = fit_projection(&vals, &v, None, spec)?;
    fit.provenance = source.provenance();
    Ok(queries.iter().map(|&q| project_predict(&fit, q, &kind.estimand().name())).collect())
}

/// Plug-in comparators: regress `target(eta_hat(x_i))` instead of the
/// influence function. Standard errors ignore nuisance uncertainty.
pub fn plugin_projection(
    data: &[Observation],
    source: NuisanceSource,
    kind: IfKind,
    arms: ArmPair,
    spec: &ProjectionSpec,
    queries: &[f64],
) -> Result<Vec<EstimateReport>> {
    let vals = plugin_values(&source.points(data)?, kind, arms)?;
    let v: Vec<f64> = data.iter().map(|o| o.v()).collect();
    let mut fit = fit_projection(&vals, &v, None, spec)?;
    fit.provenance = source.provenance();
    Ok(queries.iter().map(|&q| project_predict(&fit, q, &format!("plugin:{}", kind.estimand().name()))).collect())
}

pub fn plugin_smoother(
    data: &[Observation],
    source: NuisanceSource,
    kind: IfKind,
    arms: ArmPair,
    spec: &SmootherSpec,
    queries: &[f64],
) -> Result<Vec<EstimateReport>> {
    let vals = plugin_values(&source.points(data)?, kind, arms)?;
    second_stage(&vals, data, source, spec, queries, &format!("plugin:{}", kind.estimand().name()))
}

/// Lower and upper bound estimates with their joint covariance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub tau: f64,
    pub lb: EstimateReport,
    pub ub: EstimateReport,
    /// Covariance of `(lb, ub)` estimates.
    pub cov: [[f64; 2]; 2],
}

fn check_scale(data: &[Observation], sa: &SensitivityAssumption) -> Result<()> {
    if sa.id == AssumptionId::A2 {
        if let Some(o) = data.iter().find(|o| !(0.0..=1.0).contains(&o.y)) {
            return Err(IieError::Scale {
                assumption: "A2",
                value: o.y,
            });
        }
    }
    Ok(())
}

/// One-step estimates of both bounds.
pub fn one_step_bounds(
    data: &[Observation],
    source: NuisanceSource,
    arms: ArmPair,
    sa: &SensitivityAssumption,
) -> Result<BoundsReport> {
    check_scale(data, sa)?;
    let nps = source.points(data)?;
    let lb = pseudo_values(data, &nps, IfKind::XiLb(*sa), arms)?;
    let ub = pseudo_values(data, &nps, IfKind::XiUb(*sa), arms)?;
    let n = lb.len() as f64;
    let (ml, mu) = (lb.iter().sum::<f64>() / n, ub.iter().sum::<f64>() / n);
    let mut c = [[0.0; 2]; 2];
    for (l, u) in lb.iter().zip(&ub) {
        let d = [l - ml, u - mu];
        for r in 0..2 {
            for s in 0..2 {
                c[r][s] += d[r] * d[s] / ((n - 1.0) * n);
            }
        }
    }
    let prov = source.provenance();
    let mk = |est: f64, var: f64, name: Estimand| {
        let mut r = EstimateReport::new(name.name(), None, est, var.sqrt(), prov);
        r.diagnostics.n = data.len();
        r.diagnostics.flagged = source.flagged();
        r
    };
    Ok(BoundsReport {
        tau: sa.tau,
        lb: mk(ml, c[0][0], Estimand::PsiM1Lb { tau: sa.tau }),
        ub: mk(mu, c[1][1], Estimand::PsiM1Ub { tau: sa.tau }),
        cov: c,
    })
}

/// Projection estimates of both bound curves at `queries`.
pub fn projection_bounds(
    data: &[Observation],
    source: NuisanceSource,
    arms: ArmPair,
    sa: &SensitivityAssumption,
    spec: &ProjectionSpec,
    queries: &[f64],
) -> Result<Vec<(EstimateReport, EstimateReport)>> {
    check_scale(data, sa)?;
    let lb = projection(data, source, IfKind::XiLb(*sa), arms, spec, queries)?;
    let ub = projection(data, source, IfKind::XiUb(*sa), arms, spec, queries)?;
    Ok(lb.into_iter().zip(ub).collect())
}

/// DR-Learner estimates of both bound curves at `queries`.
pub fn dr_learner_bounds(
    data: &[Observation],
    source: NuisanceSource,
    arms: ArmPair,
    sa: &SensitivityAssumption,
    spec: &SmootherSpec,
    queries: &[f64],
) -> Result<Vec<(EstimateReport, EstimateReport)>> {
    check_scale(data, sa)?;
    let lb = dr_learner(data, source, IfKind::XiLb(*sa), arms, spec, queries)?;
    let ub = dr_learner(data, source, IfKind::XiUb(*sa), arms, spec, queries)?;
    Ok(lb.into_iter().zip(ub).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RatioMode {
    /// Smooth the influence function of the ratio directly.
    Ratio,
    /// Smooth numerator and denominator separately and divide.
    #[default]
    Separate,
}

/// Conditional proportion mediated through M1 at `queries`.
///
/// In separate mode the delta-method variance omits the covariance of the two
/// smoothers; with positively dependent errors this is conservative.
pub fn proportion_mediated(
    data: &[Observation],
    source: NuisanceSource,
    arms: ArmPair,
    mode: RatioMode,
    spec: &SmootherSpec,
    queries: &[f64],
) -> Result<Vec<EstimateReport>> {
    match mode {
        RatioMode::Ratio => dr_learner(
            data,
            source,
            IfKind::Ratio {
                delta: eif::DELTA_RATIO,
            },
            arms,
            spec,
            queries,
        ),
        RatioMode::Separate => {
            let nps = source.points(data)?;
            let num_v = pseudo_values(data, &nps, IfKind::PsiM1, arms)?;
            let den_v = pseudo_values(data, &nps, IfKind::Cate, arms)?;
            let num = second_stage(&num_v, data, source, spec, queries, "psi_M1")?;
            let den = second_stage(&den_v, data, source, spec, queries, "psi_total")?;
            num.iter()
                .zip(&den)
                .map(|(a, b)| {
                    if b.estimate.abs() < eif::DELTA_RATIO {
                        return Err(IieError::RatioDegenerate {
                            value: b.estimate.abs(),
                            floor: eif::DELTA_RATIO,
                            row: None,
                        });
                    }
                    let r = a.estimate / b.estimate;
                    let var = (a.se.powi(2) + r * r * b.se.powi(2)) / b.estimate.powi(2);
                    let mut rep = EstimateReport::new("prop_mediated_M1", a.point, r, var.sqrt(), source.provenance());
                    rep.diagnostics = a.diagnostics.clone();
                    Ok(rep)
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_reproduce_lines() {
        let v: Vec<f64> = (0..50).map(|i| i as f64 / 10.0).collect();
        let y: Vec<f64> = v.iter().map(|x| 3.0 - 2.0 * x).collect();
        let fit = fit_smoother(&y, &v, &[0.0, 2.55, 4.9], &SmootherSpec::default()).unwrap();
        for (q, e) in fit.queries.iter().zip(&fit.estimates) {
            assert!((e - (3.0 - 2.0 * q)).abs() < 1e-9);
        }
        for w in &fit.weights {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loo_matches_brute_force() {
        let v: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        let y: Vec<f64> = v.iter().enumerate().map(|(i, x)| x * x + 0.1 * ((i * 7) % 5) as f64).collect();
        let h = 0.4;
        let s = Sorted::new(&y, &v);
        let fast = s.loo_score(h);
        let mut brute = 0.0;
        for i in 0..v.len() {
            let (yy, vv): (Vec<f64>, Vec<f64>) = (0..v.len()).filter(|&j| j != i).map(|j| (y[j], v[j])).unzip();
            let t = Sorted::new(&yy, &vv);
            let (yhat, _) = t.fitted(v[i], h).unwrap();
            brute += (y[i] - yhat).powi(2);
        }
        brute /= v.len() as f64;
        assert!((fast - brute).abs() < 1e-10 * brute, "{fast} {brute}");
    }

    #[test]
    fn identical_covariates_are_rejected() {
        let v = vec![1.0; 30];
        let y = vec![0.0; 30];
        assert!(matches!(
            fit_smoother(&y, &v, &[1.0], &SmootherSpec::default()),
            Err(IieError::DegenerateDesign(_))
        ));
    }

    #[test]
    fn projection_interpolates_exact_lines() {
        let v: Vec<f64> = (0..20).map(|i| i as f64 * 0.3 - 2.0).collect();
        let y: Vec<f64> = v.iter().map(|x| 0.5 + 0.25 * x).collect();
        let fit = fit_projection(&y, &v, None, &ProjectionSpec::default()).unwrap();
        assert!((fit.beta[0] - 0.5).abs() < 1e-10 && (fit.beta[1] - 0.25).abs() < 1e-10);
        assert!(moment_residual(&fit, &y, &v, None).amax() < 1e-10);
    }
}
