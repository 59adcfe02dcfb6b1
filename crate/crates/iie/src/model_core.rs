//! Shared domain types: observations, arm labels, nuisance functions
//! evaluated at a covariate point, and fully enumerated discrete problems.
//!
//! Nuisances are exposed through [`NuisanceSet::at`], which returns every
//! component at one covariate value as a validated [`NuisancePoint`]. All
//! influence-function code works on `NuisancePoint`s, so positivity and
//! normalization are checked exactly once per query.

use crate::error::{IieError, Result};
use serde::{Deserialize, Serialize};

/// Lower bound enforced on every probability that enters a denominator.
pub const POSITIVITY_FLOOR: f64 = 1e-6;

/// Tolerance used when checking that conditional laws sum to one.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// One data row `Z = (Y, A, X, M1, M2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: f64,
    pub a: u8,
    pub m1: u8,
    pub m2: u8,
    pub x: Vec<f64>,
}

impl Observation {
    pub fn new(y: f64, a: u8, m1: u8, m2: u8, x: Vec<f64>) -> Result<Self> {
        if a > 1 || m1 > 1 || m2 > 1 {
            return Err(IieError::Invalid(format!(
                "a, m1, m2 must be binary, got ({a}, {m1}, {m2})"
            )));
        }
        if !y.is_finite() {
            return Err(IieError::Invalid(format!("non-finite outcome {y}")));
        }
        if x.is_empty() || x.iter().any(|v| !v.is_finite()) {
            return Err(IieError::Invalid("covariates must be finite and non-empty".into()));
        }
        Ok(Self { y, a, m1, m2, x })
    }

    /// Scalar covariate used for conditioning (first coordinate).
    pub fn v(&self) -> f64 {
        self.x[0]
    }
}

/// Treated arm `a` and reference arm `a'`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmPair {
    a: u8,
    a_prime: u8,
}

impl ArmPair {
    pub fn new(a: u8, a_prime: u8) -> Result<Self> {
        if a > 1 || a_prime > 1 || a == a_prime {
            return Err(IieError::Invalid(format!(
                "arms must be distinct binary labels, got a={a}, a'={a_prime}"
            )));
        }
        Ok(Self { a, a_prime })
    }

    pub fn a(&self) -> u8 {
        self.a
    }

    pub fn a_prime(&self) -> u8 {
        self.a_prime
    }

    /// The same pair with roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            a: self.a_prime,
            a_prime: self.a,
        }
    }
}

impl Default for ArmPair {
    fn default() -> Self {
        Self { a: 1, a_prime: 0 }
    }
}

/// Where a nuisance set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    TrueDgp,
    Fitted,
    Synthetic,
    Marginalized,
}

/// Every nuisance component evaluated at one covariate value.
///
/// Indexing is `[arm][m1][m2]` for the outcome regression and the joint
/// mediator law, `[arm][m]` for the marginals. `pi1` is `P(A = 1 | x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuisancePoint {
    pub pi1: f64,
    pub mu: [[[f64; 2]; 2]; 2],
    pub pj: [[[f64; 2]; 2]; 2],
    pub pm1: [[f64; 2]; 2],
    pub pm2: [[f64; 2]; 2],
}

impl NuisancePoint {
    /// Build from a joint mediator law; marginals are exact sums of it.
    pub fn from_joint(pi1: f64, mu: [[[f64; 2]; 2]; 2], pj: [[[f64; 2]; 2]; 2]) -> Result<Self> {
        let mut pm1 = [[0.0; 2]; 2];
        let mut pm2 = [[0.0; 2]; 2];
        for a in 0..2 {
            for i in 0..2 {
                pm1[a][i] = pj[a][i][0] + pj[a][i][1];
                pm2[a][i] = pj[a][0][i] + pj[a][1][i];
            }
        }
        Self::with_marginals(pi1, mu, pj, pm1, pm2)
    }

    /// Build with separately supplied marginals.
    pub fn with_marginals(
        pi1: f64,
        mu: [[[f64; 2]; 2]; 2],
        pj: [[[f64; 2]; 2]; 2],
        pm1: [[f64; 2]; 2],
        pm2: [[f64; 2]; 2],
    ) -> Result<Self> {
        let p = Self {
            pi1,
            mu,
            pj,
            pm1,
            pm2,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        check_prob("propensity", self.pi1)?;
        if self.pi1 > 1.0 - POSITIVITY_FLOOR {
            return Err(IieError::Positivity {
                what: "propensity",
                value: self.pi1,
                floor: POSITIVITY_FLOOR,
                row: None,
            });
        }
        for a in 0..2 {
            let mut s = 0.0;
            for m1 in 0..2 {
                for m2 in 0..2 {
                    check_prob("joint mediator probability", self.pj[a][m1][m2])?;
                    s += self.pj[a][m1][m2];
                    if !self.mu[a][m1][m2].is_finite() {
                        return Err(IieError::Invalid("non-finite outcome regression".into()));
                    }
                }
            }
            check_sum("joint mediator law", s)?;
            check_prob("M1 marginal", self.pm1[a][0])?;
            check_prob("M1 marginal", self.pm1[a][1])?;
            check_prob("M2 marginal", self.pm2[a][0])?;
            check_prob("M2 marginal", self.pm2[a][1])?;
            check_sum("M1 marginal", self.pm1[a][0] + self.pm1[a][1])?;
            check_sum("M2 marginal", self.pm2[a][0] + self.pm2[a][1])?;
        }
        Ok(())
    }

    /// `P(A = a | x)`.
    #[inline]
    pub fn pi(&self, a: u8) -> f64 {
        if a == 1 {
            self.pi1
        } else {
            1.0 - self.pi1
        }
    }

    /// `E[Y | A = a, x] = sum_m mu_a(m, x) p(m | a, x)`.
    pub fn mean_outcome(&self, a: u8) -> f64 {
        let a = a as usize;
        let mut s = 0.0;
        for m1 in 0..2 {
            for m2 in 0..2 {
                s += self.mu[a][m1][m2] * self.pj[a][m1][m2];
            }
        }
        s
    }

    /// Plug-in value of the conditional effect through M1 at this point.
    pub fn psi_m1(&self, arms: ArmPair) -> f64 {
        let m = marginalize(self, arms);
        m.mu_a_m1xm2p - m.mu_a_m1pxm2p
    }

    /// Plug-in conditional average treatment effect at this point.
    pub fn psi_total(&self, arms: ArmPair) -> f64 {
        self.mean_outcome(arms.a()) - self.mean_outcome(arms.a_prime())
    }
}

fn check_prob(what: &'static str, v: f64) -> Result<()> {
    if !v.is_finite() || v < POSITIVITY_FLOOR || v > 1.0 + NORMALIZATION_TOL {
        return Err(IieError::Positivity {
            what,
            value: v,
            floor: POSITIVITY_FLOOR,
            row: None,
        });
    }
    Ok(())
}

fn check_sum(what: &'static str, s: f64) -> Result<()> {
    if (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(IieError::Normalization { what, sum: s });
    }
    Ok(())
}

/// A family of nuisance functions that can be queried pointwise.
pub trait NuisanceSet: Send + Sync {
    /// All components at covariate value `x`.
    fn at(&self, x: &[f64]) -> Result<NuisancePoint>;
    fn provenance(&self) -> Provenance;
}

impl<T: NuisanceSet + ?Sized> NuisanceSet for std::sync::Arc<T> {
    fn at(&self, x: &[f64]) -> Result<NuisancePoint> {
        (**self).at(x)
    }
    fn provenance(&self) -> Provenance {
        (**self).provenance()
    }
}

/// The five marginalized outcome regressions at one covariate value.
///
/// Functions of a mediator value are stored as two-element arrays indexed by
/// that value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalizedOutcomes {
    /// `sum_{m1} mu_a(m1, m2) p(m1 | a)`, indexed by `m2`.
    pub mu_a_m1: [f64; 2],
    /// `sum_{m1} mu_a(m1, m2) p(m1 | a')`, indexed by `m2`.
    pub mu_a_m1p: [f64; 2],
    /// `sum_{m2} mu_a(m1, m2) p(m2 | a')`, indexed by `m1`.
    pub mu_a_m2p: [f64; 2],
    /// `sum mu_a p(m1 | a) p(m2 | a')`.
    pub mu_a_m1xm2p: f64,
    /// `sum mu_a p(m1 | a') p(m2 | a')`.
    pub mu_a_m1pxm2p: f64,
}

/// Marginalize the arm-`a` outcome regression against the mediator laws.
pub fn marginalize(np: &NuisancePoint, arms: ArmPair) -> MarginalizedOutcomes {
    let (a, ap) = (arms.a() as usize, arms.a_prime() as usize);
    let mu = &np.mu[a];
    let p1 = &np.pm1[a];
    let p1p = &np.pm1[ap];
    let p2p = &np.pm2[ap];
    let mut out = MarginalizedOutcomes {
        mu_a_m1: [0.0; 2],
        mu_a_m1p: [0.0; 2],
        mu_a_m2p: [0.0; 2],
        mu_a_m1xm2p: 0.0,
        mu_a_m1pxm2p: 0.0,
    };
    for m2 in 0..2 {
        out.mu_a_m1[m2] = mu[0][m2] * p1[0] + mu[1][m2] * p1[1];
        out.mu_a_m1p[m2] = mu[0][m2] * p1p[0] + mu[1][m2] * p1p[1];
    }
    for m1 in 0..2 {
        out.mu_a_m2p[m1] = mu[m1][0] * p2p[0] + mu[m1][1] * p2p[1];
    }
    out.mu_a_m1xm2p = out.mu_a_m2p[0] * p1[0] + out.mu_a_m2p[1] * p1[1];
    out.mu_a_m1pxm2p = out.mu_a_m2p[0] * p1p[0] + out.mu_a_m2p[1] * p1p[1];
    out
}

/// Query `eta` at `x` and marginalize.
pub fn marginalize_outcomes(
    eta: &dyn NuisanceSet,
    x: &[f64],
    arms: ArmPair,
) -> Result<MarginalizedOutcomes> {
    Ok(marginalize(&eta.at(x)?, arms))
}

/// Identifier of every target quantity the crate can compute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    PsiM1,
    PsiM1A,
    PsiM1Aprime,
    PsiM2,
    PsiCov,
    PsiIde,
    PsiIie,
    PsiTotal,
    PropMediatedM1,
    PsiM1Lb { tau: f64 },
    PsiM1Ub { tau: f64 },
    Gamma1A,
    Gamma1Aprime,
    Gamma2A,
    Gamma2Aprime,
    Gamma1AM2,
    Gamma1AprimeM2,
    Gamma2AM2,
    Gamma2AprimeM2,
    Gamma1Iie,
    Gamma2Iie,
}

impl Estimand {
    pub fn name(&self) -> String {
        match self {
            Estimand::PsiM1 => "psi_M1".into(),
            Estimand::PsiM1A => "psi_M1_a".into(),
            Estimand::PsiM1Aprime => "psi_M1_aprime".into(),
            Estimand::PsiM2 => "psi_M2".into(),
            Estimand::PsiCov => "psi_Cov".into(),
            Estimand::PsiIde => "psi_IDE".into(),
            Estimand::PsiIie => "psi_IIE".into(),
            Estimand::PsiTotal => "psi_total".into(),
            Estimand::PropMediatedM1 => "prop_mediated_M1".into(),
            Estimand::PsiM1Lb { tau } => format!("psi_M1_lb({tau})"),
            Estimand::PsiM1Ub { tau } => format!("psi_M1_ub({tau})"),
            Estimand::Gamma1A => "gamma_1a".into(),
            Estimand::Gamma1Aprime => "gamma_1aprime".into(),
            Estimand::Gamma2A => "gamma_2a".into(),
            Estimand::Gamma2Aprime => "gamma_2aprime".into(),
            Estimand::Gamma1AM2 => "gamma_1a_M2".into(),
            Estimand::Gamma1AprimeM2 => "gamma_1aprime_M2".into(),
            Estimand::Gamma2AM2 => "gamma_2a_M2".into(),
            Estimand::Gamma2AprimeM2 => "gamma_2aprime_M2".into(),
            Estimand::Gamma1Iie => "gamma_1_IIE".into(),
            Estimand::Gamma2Iie => "gamma_2_IIE".into(),
        }
    }
}

/// A finite-support joint law: covariate grid, its weights, and the true
/// nuisances at every grid point.
///
/// Because every influence function is affine in `Y` given `(A, X, M1, M2)`,
/// the conditional mean `mu` is all that is needed for exact expectations.
#[derive(Debug, Clone)]
pub struct DiscreteProblem {
    xs: Vec<Vec<f64>>,
    px: Vec<f64>,
    eta: Vec<NuisancePoint>,
}

impl DiscreteProblem {
    pub fn new(xs: Vec<Vec<f64>>, px: Vec<f64>, eta: Vec<NuisancePoint>) -> Result<Self> {
        if xs.is_empty() || xs.len() != px.len() || xs.len() != eta.len() {
            return Err(IieError::Invalid(
                "grid, weights and nuisances must have equal non-zero length".into(),
            ));
        }
        if px.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(IieError::Invalid("covariate weights must be non-negative".into()));
        }
        check_sum("covariate law", px.iter().sum())?;
        Ok(Self { xs, px, eta })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn xs(&self) -> &[Vec<f64>] {
        &self.xs
    }

    pub fn px(&self) -> &[f64] {
        &self.px
    }

    pub fn eta(&self) -> &[NuisancePoint] {
        &self.eta
    }

    /// Every `(grid index, a, m1, m2)` cell with its probability and the
    /// conditional mean of `Y` in that cell.
    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.len()).flat_map(move |k| {
            let np = &self.eta[k];
            let pk = self.px[k];
            (0..8u8).map(move |c| {
                let (a, m1, m2) = (c >> 2, (c >> 1) & 1, c & 1);
                Cell {
                    k,
                    a,
                    m1,
                    m2,
                    prob: pk
                        * np.pi(a)
                        * np.pj[a as usize][m1 as usize][m2 as usize],
                    ybar: np.mu[a as usize][m1 as usize][m2 as usize],
                }
            })
        })
    }

    /// Covariate-weighted average of a pointwise functional.
    pub fn average(&self, f: impl Fn(&NuisancePoint) -> f64) -> f64 {
        self.eta
            .iter()
            .zip(&self.px)
            .map(|(np, &p)| p * f(np))
            .sum()
    }
}

/// One support point of a [`DiscreteProblem`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub k: usize,
    pub a: u8,
    pub m1: u8,
    pub m2: u8,
    pub prob: f64,
    pub ybar: f64,
}

impl NuisanceSet for DiscreteProblem {
    fn at(&self, x: &[f64]) -> Result<NuisancePoint> {
        self.xs
            .iter()
            .position(|g| g.as_slice() == x)
            .map(|k| self.eta[k])
            .ok_or_else(|| IieError::Invalid(format!("{x:?} is not a grid point")))
    }

    fn provenance(&self) -> Provenance {
        Provenance::TrueDgp
    }
}
