//! Bounds on indirect effects under mediator-outcome confounding.
//!
//! Every assumption bounds the gap between the counterfactual outcome
//! regression off the observed mediator cell and the observed regression by
//! `b(mu) = f(tau) * (c * mu + t)`, with one `(c, t, f)` triple for the lower
//! side and one for the upper side. Constants are signed because the
//! bounded-outcome risk-ratio assumption needs `c_u = -1`.

use crate::eif::{bound_zetas, BoundZetas};
use crate::error::{IieError, Result};
use crate::model_core::{marginalize, ArmPair, NuisancePoint};
use serde::{Deserialize, Serialize};

/// Named assumption families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssumptionId {
    /// Absolute deviation at most `tau`.
    A1,
    /// Risk-ratio deviation for an outcome in `[0, 1]`, both tails.
    A2,
    /// Risk-ratio deviation, upper tail on the `mu` scale.
    A3,
    /// Caller-supplied constants.
    Custom,
}

impl AssumptionId {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A1" => Ok(AssumptionId::A1),
            "A2" => Ok(AssumptionId::A2),
            "A3" => Ok(AssumptionId::A3),
            _ => Err(IieError::Invalid(format!("unknown assumption '{s}'"))),
        }
    }
}

/// Signed constants and transforms defining one bound family at one `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityAssumption {
    pub id: AssumptionId,
    pub tau: f64,
    pub c_l: f64,
    pub c_u: f64,
    pub t_l: f64,
    pub t_u: f64,
    pub f_l: f64,
    pub f_u: f64,
}

impl SensitivityAssumption {
    pub fn new(id: AssumptionId, tau: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&tau) {
            return Err(IieError::Invalid(format!("tau must lie in [0, 1), got {tau}")));
        }
        let (c_l, t_l, f_l, c_u, t_u, f_u) = match id {
            AssumptionId::A1 => (0.0, 1.0, -tau, 0.0, 1.0, tau),
            AssumptionId::A2 => (1.0, 0.0, -tau, -1.0, 1.0, tau),
            AssumptionId::A3 => (1.0, 0.0, -tau, 1.0, 0.0, tau / (1.0 - tau)),
            AssumptionId::Custom => {
                return Err(IieError::Invalid("use SensitivityAssumption::custom".into()))
            }
        };
        Ok(Self {
            id,
            tau,
            c_l,
            c_u,
            t_l,
            t_u,
            f_l,
            f_u,
        })
    }

    /// Arbitrary constants in `{-1, 0, 1}` with given transforms.
    pub fn custom(c_l: f64, c_u: f64, t_l: f64, t_u: f64, f_l: f64, f_u: f64) -> Result<Self> {
        for c in [c_l, c_u, t_l, t_u] {
            if ![-1.0, 0.0, 1.0].contains(&c) {
                return Err(IieError::Invalid(format!("constant {c} is not in {{-1, 0, 1}}")));
            }
        }
        if !f_l.is_finite() || !f_u.is_finite() {
            return Err(IieError::Invalid("transforms must be finite".into()));
        }
        Ok(Self {
            id: AssumptionId::Custom,
            tau: f64::NAN,
            c_l,
            c_u,
            t_l,
            t_u,
            f_l,
            f_u,
        })
    }

    fn check_scale(&self, mu: f64) -> Result<()> {
        if self.id == AssumptionId::A2 && !(0.0..=1.0).contains(&mu) {
            return Err(IieError::Scale {
                assumption: "A2",
                value: mu,
            });
        }
        Ok(())
    }

    fn check_point(&self, np: &NuisancePoint, arms: ArmPair) -> Result<()> {
        for row in &np.mu[arms.a() as usize] {
            for &m in row {
                self.check_scale(m)?;
            }
        }
        Ok(())
    }
}

/// Bounds on `E[Y^{m1 m2} | a, x] - mu_a(m1, m2, x)` for one cell.
pub fn bound_mu(mu: f64, p_joint: f64, sa: &SensitivityAssumption) -> Result<(f64, f64)> {
    sa.check_scale(mu)?;
    if !(0.0..=1.0).contains(&p_joint) {
        return Err(IieError::Invalid(format!("joint probability {p_joint} outside [0, 1]")));
    }
    let w = 1.0 - p_joint;
    Ok((
        sa.f_l * (sa.c_l * mu + sa.t_l) * w,
        sa.f_u * (sa.c_u * mu + sa.t_u) * w,
    ))
}

/// Which effect to bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundTarget {
    M1,
    M2,
    Iie,
}

/// Shared pattern: `psi_bar + f_u c_u A - f_l c_l B + t_u f_u - t_l f_l
/// - f_u (c_u Ga + t_u Ha) + f_l (c_l Gb + t_l Hb)` and its mirror.
fn contrast_bounds(
    sa: &SensitivityAssumption,
    psi_bar: f64,
    arm_a: f64,
    arm_ap: f64,
    (g1a, g2a): (f64, f64),
    (g1ap, g2ap): (f64, f64),
) -> (f64, f64) {
    let (cl, cu, tl, tu, fl, fu) = (sa.c_l, sa.c_u, sa.t_l, sa.t_u, sa.f_l, sa.f_u);
    let ub = psi_bar + arm_a * fu * cu - arm_ap * fl * cl + tu * fu - tl * fl
        - fu * (cu * g1a + tu * g2a)
        + fl * (cl * g1ap + tl * g2ap);
    let lb = psi_bar + arm_a * fl * cl - arm_ap * fu * cu + tl * fl - tu * fu
        - fl * (cl * g1a + tl * g2a)
        + fu * (cu * g1ap + tu * g2ap);
    (lb, ub)
}

/// Pointwise bounds on the conditional indirect effect through M1.
pub fn bounds_psi_m1_at(
    np: &NuisancePoint,
    sa: &SensitivityAssumption,
    arms: ArmPair,
) -> Result<(f64, f64)> {
    bounds_at(np, sa, arms, BoundTarget::M1)
}

/// Pointwise bounds for any supported target.
pub fn bounds_at(
    np: &NuisancePoint,
    sa: &SensitivityAssumption,
    arms: ArmPair,
    target: BoundTarget,
) -> Result<(f64, f64)> {
    sa.check_point(np, arms)?;
    let zt = bound_zetas(np, arms);
    let (a, ap) = (arms.a() as usize, arms.a_prime() as usize);
    Ok(match target {
        BoundTarget::M1 => {
            let mo = marginalize(np, arms);
            contrast_bounds(
                sa,
                mo.mu_a_m1xm2p - mo.mu_a_m1pxm2p,
                mo.mu_a_m1xm2p,
                mo.mu_a_m1pxm2p,
                (zt.zeta_1a, zt.zeta_2a),
                (zt.zeta_1ap, zt.zeta_2ap),
            )
        }
        BoundTarget::M2 => {
            let (pa, pap) = m2_arm_values(np, a, ap);
            contrast_bounds(
                sa,
                pa - pap,
                pa,
                pap,
                (zt.zeta_1a_m2, zt.zeta_2a_m2),
                (zt.zeta_1ap_m2, zt.zeta_2ap_m2),
            )
        }
        BoundTarget::Iie => iie_bounds(np, sa, arms, &zt),
    })
}

/// `(sum mu p(m1|a) p(m2|a), sum mu p(m1|a) p(m2|a'))`.
fn m2_arm_values(np: &NuisancePoint, a: usize, ap: usize) -> (f64, f64) {
    let (mut pa, mut pap) = (0.0, 0.0);
    for m1 in 0..2 {
        for m2 in 0..2 {
            let base = np.mu[a][m1][m2] * np.pm1[a][m1];
            pa += base * np.pm2[a][m2];
            pap += base * np.pm2[ap][m2];
        }
    }
    (pa, pap)
}

fn iie_bounds(
    np: &NuisancePoint,
    sa: &SensitivityAssumption,
    arms: ArmPair,
    zt: &BoundZetas,
) -> (f64, f64) {
    let (a, ap) = (arms.a() as usize, arms.a_prime() as usize);
    let psi_a = np.mean_outcome(arms.a());
    let mut bar_ap = 0.0;
    for m1 in 0..2 {
        for m2 in 0..2 {
            bar_ap += np.mu[a][m1][m2] * np.pj[ap][m1][m2];
        }
    }
    // The upper bound subtracts the smallest admissible counterfactual mean,
    // so it uses the lower-side constants, and vice versa.
    let side = |c: f64, t: f64, f: f64| {
        psi_a - bar_ap - f * c * bar_ap - f * t + f * (c * zt.zeta_1_iie + t * zt.zeta_2_iie)
    };
    (
        side(sa.c_u, sa.t_u, sa.f_u),
        side(sa.c_l, sa.t_l, sa.f_l),
    )
}

/// Bounds averaged over a weighted covariate law (grid or empirical).
pub fn bounds_average(
    points: &[(f64, NuisancePoint)],
    sa: &SensitivityAssumption,
    arms: ArmPair,
    target: BoundTarget,
) -> Result<(f64, f64)> {
    let wsum: f64 = points.iter().map(|(w, _)| w).sum();
    if points.is_empty() || !(wsum > 0.0) {
        return Err(IieError::Invalid("empty or zero-weight covariate law".into()));
    }
    let (mut lb, mut ub) = (0.0, 0.0);
    for (w, np) in points {
        let (l, u) = bounds_at(np, sa, arms, target)?;
        lb += w * l;
        ub += w * u;
    }
    Ok((lb / wsum, ub / wsum))
}

/// Bounds on each identified-up-to-`tau` component plus the identified total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentBounds {
    pub total: f64,
    pub m1: (f64, f64),
    pub m2: (f64, f64),
    pub iie: (f64, f64),
}

/// Bounds implied for the direct and covariant effects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecomposedBounds {
    pub ide: (f64, f64),
    pub cov: (f64, f64),
}

pub fn decompose_bounds(c: &ComponentBounds) -> DecomposedBounds {
    DecomposedBounds {
        ide: (c.total - c.iie.1, c.total - c.iie.0),
        cov: (c.iie.0 - (c.m2.1 + c.m1.1), c.iie.1 - (c.m2.0 + c.m1.0)),
    }
}

/// Component bounds at one covariate value.
pub fn component_bounds_at(
    np: &NuisancePoint,
    sa: &SensitivityAssumption,
    arms: ArmPair,
) -> Result<ComponentBounds> {
    Ok(ComponentBounds {
        total: np.psi_total(arms),
        m1: bounds_at(np, sa, arms, BoundTarget::M1)?,
        m2: bounds_at(np, sa, arms, BoundTarget::M2)?,
        iie: bounds_at(np, sa, arms, BoundTarget::Iie)?,
    })
}

/// A selection mechanism known exactly: `mu* - mu = f (c mu + t) (1 - p12)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionEquality {
    pub c: f64,
    pub t: f64,
    pub f: f64,
}

/// Conditional indirect effect through M1 when the selection is known.
pub fn recover_known_selection(np: &NuisancePoint, sel: &SelectionEquality, arms: ArmPair) -> f64 {
    let zt = bound_zetas(np, arms);
    let psi_bar = np.psi_m1(arms);
    let (c, t, f) = (sel.c, sel.t, sel.f);
    psi_bar * (1.0 + c * f) - c * f * (zt.zeta_1a - zt.zeta_1ap) - t * f * (zt.zeta_2a - zt.zeta_2ap)
}
