//! Exact verification of influence-function algebra on enumerable laws.
//!
//! Every check here is a finite sum. `enumerate_functional` computes targets
//! from their defining formulas with its own loops (it never calls into
//! `eif`), so agreement with `exact_plugin_mean` is a genuine cross-check.

use crate::eif::{self, Arm, Extension, IfKind, Z};
use crate::error::{IieError, Result};
use crate::model_core::{ArmPair, DiscreteProblem, Estimand, NuisancePoint};
use crate::sensitivity::{AssumptionId, SensitivityAssumption};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

/// Relative tolerance for every exact identity.
pub const IDENTITY_TOL: f64 = 1e-10;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= IDENTITY_TOL * (1.0 + a.abs().max(b.abs()))
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn expit(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Random problem: grid `0..k`, probabilities uniform on `[floor, 1+floor]`
/// then normalized, propensity in `[floor, 1-floor]`, outcome means in (0,1).
pub fn random_problem<R: Rng>(rng: &mut R, grid_size: usize, floor: f64) -> DiscreteProblem {
    let norm = |v: Vec<f64>| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    let px = norm((0..grid_size).map(|_| floor + rng.random::<f64>()).collect());
    let mut eta = Vec::with_capacity(grid_size);
    for _ in 0..grid_size {
        let pi1 = floor + (1.0 - 2.0 * floor) * rng.random::<f64>();
        let mut mu = [[[0.0; 2]; 2]; 2];
        let mut pj = [[[0.0; 2]; 2]; 2];
        for a in 0..2 {
            let cells = norm((0..4).map(|_| floor + rng.random::<f64>()).collect());
            for c in 0..4 {
                pj[a][c >> 1][c & 1] = cells[c];
                mu[a][c >> 1][c & 1] = 0.02 + 0.96 * rng.random::<f64>();
            }
        }
        eta.push(NuisancePoint::from_joint(pi1, mu, pj).expect("valid by construction"));
    }
    let xs = (0..grid_size).map(|k| vec![k as f64]).collect();
    DiscreteProblem::new(xs, px, eta).expect("valid by construction")
}

/// A fixed perturbation direction on the logit (or log) scale of every
/// nuisance component at every grid point.
#[derive(Debug, Clone)]
pub struct Direction {
    pi: Vec<f64>,
    mu: Vec<[[[f64; 2]; 2]; 2]>,
    pj: Vec<[[[f64; 2]; 2]; 2]>,
}

impl Direction {
    pub fn random<R: Rng>(rng: &mut R, grid_size: usize) -> Self {
        let mut cube = || {
            let mut c = [[[0.0; 2]; 2]; 2];
            for v in c.iter_mut().flatten().flatten() {
                *v = rng.sample(StandardNormal);
            }
            c
        };
        let mu = (0..grid_size).map(|_| cube()).collect();
        let pj = (0..grid_size).map(|_| cube()).collect();
        let pi = (0..grid_size).map(|_| rng.sample(StandardNormal)).collect();
        Self { pi, mu, pj }
    }

    pub fn zero(grid_size: usize) -> Self {
        Self {
            pi: vec![0.0; grid_size],
            mu: vec![[[[0.0; 2]; 2]; 2]; grid_size],
            pj: vec![[[[0.0; 2]; 2]; 2]; grid_size],
        }
    }

    /// `eta` moved by `eps` along this direction; joint laws are renormalized.
    pub fn apply(&self, eta: &[NuisancePoint], eps: f64) -> Result<Vec<NuisancePoint>> {
        eta.iter()
            .enumerate()
            .map(|(k, np)| {
                let pi1 = expit(logit(np.pi1) + eps * self.pi[k]);
                let mut mu = np.mu;
                let mut pj = np.pj;
                for a in 0..2 {
                    let mut s = 0.0;
                    for m1 in 0..2 {
                        for m2 in 0..2 {
                            mu[a][m1][m2] = expit(logit(np.mu[a][m1][m2]) + eps * self.mu[k][a][m1][m2]);
                            pj[a][m1][m2] *= (eps * self.pj[k][a][m1][m2]).exp();
                            s += pj[a][m1][m2];
                        }
                    }
                    pj[a].iter_mut().flatten().for_each(|v| *v /= s);
                }
                NuisancePoint::from_joint(pi1, mu, pj)
            })
            .collect()
    }
}

/// Random perturbation of relative size `size` (one fresh direction).
pub fn perturb<R: Rng>(problem: &DiscreteProblem, rng: &mut R, size: f64) -> Result<Vec<NuisancePoint>> {
    Direction::random(rng, problem.len()).apply(problem.eta(), size)
}

/// Quantities computed directly from the law at one grid point.
struct Direct {
    mu: [[f64; 2]; 2],
    p12: [[f64; 2]; 2],
    p12p: [[f64; 2]; 2],
    p1: [f64; 2],
    p1p: [f64; 2],
    p2: [f64; 2],
    p2p: [f64; 2],
    mu_ap: [[f64; 2]; 2],
}

impl Direct {
    fn new(np: &NuisancePoint, arms: ArmPair) -> Self {
        let (a, ap) = (arms.a() as usize, arms.a_prime() as usize);
        let m1 = |arm: usize| [np.pj[arm][0][0] + np.pj[arm][0][1], np.pj[arm][1][0] + np.pj[arm][1][1]];
        let m2 = |arm: usize| [np.pj[arm][0][0] + np.pj[arm][1][0], np.pj[arm][0][1] + np.pj[arm][1][1]];
        Self {
            mu: np.mu[a],
            p12: np.pj[a],
            p12p: np.pj[ap],
            p1: m1(a),
            p1p: m1(ap),
            p2: m2(a),
            p2p: m2(ap),
            mu_ap: np.mu[ap],
        }
    }

    fn sum(&self, f: impl Fn(usize, usize) -> f64) -> f64 {
        let mut s = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                s += f(i, j);
            }
        }
        s
    }

    fn psi_m1(&self) -> f64 {
        self.sum(|i, j| self.mu[i][j] * (self.p1[i] - self.p1p[i]) * self.p2p[j])
    }

    fn psi_total(&self) -> f64 {
        self.sum(|i, j| self.mu[i][j] * self.p12[i][j] - self.mu_ap[i][j] * self.p12p[i][j])
    }

    /// Bounds from cellwise worst cases of the counterfactual regression.
    fn m1_bounds(&self, sa: &SensitivityAssumption) -> (f64, f64) {
        let lo = |i: usize, j: usize| self.mu[i][j] + sa.f_l * (sa.c_l * self.mu[i][j] + sa.t_l) * (1.0 - self.p12[i][j]);
        let hi = |i: usize, j: usize| self.mu[i][j] + sa.f_u * (sa.c_u * self.mu[i][j] + sa.t_u) * (1.0 - self.p12[i][j]);
        let ub = self.sum(|i, j| hi(i, j) * self.p1[i] * self.p2p[j] - lo(i, j) * self.p1p[i] * self.p2p[j]);
        let lb = self.sum(|i, j| lo(i, j) * self.p1[i] * self.p2p[j] - hi(i, j) * self.p1p[i] * self.p2p[j]);
        (lb, ub)
    }
}

/// Exact value of a target functional by direct summation over the law.
pub fn enumerate_functional(
    problem: &DiscreteProblem,
    estimand: Estimand,
    arms: ArmPair,
    sa: Option<&SensitivityAssumption>,
) -> Result<f64> {
    let need_sa = || sa.ok_or_else(|| IieError::Invalid("bound target needs an assumption".into()));
    let mut total = 0.0;
    for (np, &w) in problem.eta().iter().zip(problem.px()) {
        let d = Direct::new(np, arms);
        let v = match estimand {
            Estimand::PsiM1 => d.psi_m1(),
            Estimand::PsiM1A => d.sum(|i, j| d.mu[i][j] * d.p1[i] * d.p2p[j]),
            Estimand::PsiM1Aprime => d.sum(|i, j| d.mu[i][j] * d.p1p[i] * d.p2p[j]),
            Estimand::PsiM2 => d.sum(|i, j| d.mu[i][j] * (d.p2[j] - d.p2p[j]) * d.p1[i]),
            Estimand::PsiIie => d.sum(|i, j| d.mu[i][j] * (d.p12[i][j] - d.p12p[i][j])),
            Estimand::PsiCov => d.sum(|i, j| {
                d.mu[i][j]
                    * (d.p12[i][j] - d.p1[i] * d.p2[j] - (d.p12p[i][j] - d.p1p[i] * d.p2p[j]))
            }),
            Estimand::PsiIde => d.sum(|i, j| (d.mu[i][j] - d.mu_ap[i][j]) * d.p12p[i][j]),
            Estimand::PsiTotal => d.psi_total(),
            Estimand::PropMediatedM1 => {
                let t = d.psi_total();
                if t.abs() < eif::DELTA_RATIO {
                    return Err(IieError::RatioDegenerate {
                        value: t.abs(),
                        floor: eif::DELTA_RATIO,
                        row: None,
                    });
                }
                d.psi_m1() / t
            }
            Estimand::PsiM1Lb { .. } => d.m1_bounds(need_sa()?).0,
            Estimand::PsiM1Ub { .. } => d.m1_bounds(need_sa()?).1,
            Estimand::Gamma1A => d.sum(|i, j| d.mu[i][j] * d.p12[i][j] * d.p1[i] * d.p2p[j]),
            Estimand::Gamma1Aprime => d.sum(|i, j| d.mu[i][j] * d.p12[i][j] * d.p1p[i] * d.p2p[j]),
            Estimand::Gamma2A => d.sum(|i, j| d.p12[i][j] * d.p1[i] * d.p2p[j]),
            Estimand::Gamma2Aprime => d.sum(|i, j| d.p12[i][j] * d.p1p[i] * d.p2p[j]),
            Estimand::Gamma1AM2 => d.sum(|i, j| d.mu[i][j] * d.p12[i][j] * d.p2[j] * d.p1[i]),
            Estimand::Gamma1AprimeM2 => d.sum(|i, j| d.mu[i][j] * d.p12[i][j] * d.p2p[j] * d.p1[i]),
            Estimand::Gamma2AM2 => d.sum(|i, j| d.p12[i][j] * d.p2[j] * d.p1[i]),
            Estimand::Gamma2AprimeM2 => d.sum(|i, j| d.p12[i][j] * d.p2p[j] * d.p1[i]),
            Estimand::Gamma1Iie => d.sum(|i, j| d.mu[i][j] * d.p12[i][j] * d.p12p[i][j]),
            Estimand::Gamma2Iie => d.sum(|i, j| d.p12[i][j] * d.p12p[i][j]),
        };
        total += w * v;
    }
    Ok(total)
}

/// `P[IF(Z; eta_hat)]` under the true law, with `Y` replaced by its
/// conditional mean (valid because every influence function is affine in Y).
pub fn exact_plugin_mean(
    problem: &DiscreteProblem,
    hat: &[NuisancePoint],
    kind: IfKind,
    arms: ArmPair,
) -> Result<f64> {
    if hat.len() != problem.len() {
        return Err(IieError::Invalid("estimated nuisances must match the grid".into()));
    }
    let mut s = 0.0;
    for c in problem.cells() {
        let z = Z {
            y: c.ybar,
            a: c.a,
            m1: c.m1,
            m2: c.m2,
        };
        s += c.prob * eif::eval(kind, z, &hat[c.k], arms)?;
    }
    Ok(s)
}

/// Same expectation with `Y` drawn Bernoulli(mean); needs means in [0, 1].
pub fn exact_plugin_mean_bernoulli(
    problem: &DiscreteProblem,
    hat: &[NuisancePoint],
    kind: IfKind,
    arms: ArmPair,
) -> Result<f64> {
    let mut s = 0.0;
    for c in problem.cells() {
        for (y, py) in [(1.0, c.ybar), (0.0, 1.0 - c.ybar)] {
            let z = Z {
                y,
                a: c.a,
                m1: c.m1,
                m2: c.m2,
            };
            s += c.prob * py * eif::eval(kind, z, &hat[c.k], arms)?;
        }
    }
    Ok(s)
}

/// Target functional of an influence-function kind, by enumeration.
pub fn target_of(problem: &DiscreteProblem, kind: IfKind, arms: ArmPair) -> Result<f64> {
    let sa = match kind {
        IfKind::XiLb(sa) | IfKind::XiUb(sa) => Some(sa),
        _ => None,
    };
    enumerate_functional(problem, kind.estimand(), arms, sa.as_ref())
}

/// Which decomposition of the one-step bias to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Terms (i)-(vii) for each arm component.
    Termwise,
    /// Seven combined lines, with the index and sign slips repaired.
    Combined,
    /// The same seven lines exactly as typeset (descriptive only).
    CombinedAsTypeset,
    /// Eight lines as quoted from the earlier derivation (descriptive only).
    EightLine,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Termwise,
        Variant::Combined,
        Variant::CombinedAsTypeset,
        Variant::EightLine,
    ];

    /// Variants whose residual must vanish.
    pub fn is_exact(&self) -> bool {
        matches!(self, Variant::Termwise | Variant::Combined)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Termwise => "termwise",
            Variant::Combined => "combined",
            Variant::CombinedAsTypeset => "combined-typeset",
            Variant::EightLine => "eight-line",
        }
    }
}

/// Outcome of one exact decomposition check.
#[derive(Debug, Clone, Serialize)]
pub struct RemainderReport {
    pub name: String,
    pub lhs: f64,
    /// Signed contributions; `rhs` is their sum.
    pub terms: Vec<(String, f64)>,
    pub rhs: f64,
    pub residual: f64,
    /// Claimed omitted terms, when the variant has any.
    pub missing: Vec<(String, f64)>,
    /// `residual - sum(missing)`, when `missing` is non-empty.
    pub residual_minus_missing: Option<f64>,
}

impl RemainderReport {
    fn build(name: String, lhs: f64, terms: Vec<(String, f64)>, missing: Vec<(String, f64)>) -> Self {
        let rhs = terms.iter().map(|t| t.1).sum::<f64>();
        let residual = lhs - rhs;
        let residual_minus_missing = if missing.is_empty() {
            None
        } else {
            Some(residual - missing.iter().map(|t| t.1).sum::<f64>())
        };
        Self {
            name,
            lhs,
            terms,
            rhs,
            residual,
            missing,
            residual_minus_missing,
        }
    }

    pub fn passes(&self) -> bool {
        self.residual.abs() <= IDENTITY_TOL * (1.0 + self.lhs.abs())
    }

    /// Add `delta` to a named term (test hook for the verification CLI).
    pub fn corrupt(&mut self, term: &str, delta: f64) -> bool {
        let Some(t) = self.terms.iter_mut().find(|t| t.0 == term) else {
            return false;
        };
        t.1 += delta;
        self.rhs += delta;
        self.residual -= delta;
        true
    }
}

/// True and estimated pieces at one grid point, arm `a` outcome model.
struct Pair {
    w: f64,
    mu: [[f64; 2]; 2],
    mh: [[f64; 2]; 2],
    p12: [[f64; 2]; 2],
    h12: [[f64; 2]; 2],
    h12p: [[f64; 2]; 2],
    p1: [f64; 2],
    h1: [f64; 2],
    p1p: [f64; 2],
    h1p: [f64; 2],
    p2: [f64; 2],
    p2p: [f64; 2],
    h2p: [f64; 2],
    /// `pi / pi_hat` and `(pi - pi_hat) / pi_hat` for arms a and a'.
    ta: f64,
    ra: f64,
    rap: f64,
}

impl Pair {
    fn new(w: f64, t: &NuisancePoint, h: &NuisancePoint, arms: ArmPair) -> Self {
        let (a, ap) = (arms.a() as usize, arms.a_prime() as usize);
        let (pa, pap) = (t.pi(arms.a()), t.pi(arms.a_prime()));
        let (ha, hap) = (h.pi(arms.a()), h.pi(arms.a_prime()));
        Self {
            w,
            mu: t.mu[a],
            mh: h.mu[a],
            p12: t.pj[a],
            h12: h.pj[a],
            h12p: h.pj[ap],
            p1: t.pm1[a],
            h1: h.pm1[a],
            p1p: t.pm1[ap],
            h1p: h.pm1[ap],
            p2: t.pm2[a],
            p2p: t.pm2[ap],
            h2p: h.pm2[ap],
            ta: pa / ha,
            ra: (pa - ha) / ha,
            rap: (pap - hap) / hap,
        }
    }

    fn sum(&self, f: impl Fn(usize, usize) -> f64) -> f64 {
        let mut s = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                s += f(i, j);
            }
        }
        self.w * s
    }

    fn dmu(&self, i: usize, j: usize) -> f64 {
        self.mu[i][j] - self.mh[i][j]
    }
}

fn pairs(problem: &DiscreteProblem, hat: &[NuisancePoint], arms: ArmPair) -> Vec<Pair> {
    problem
        .eta()
        .iter()
        .zip(hat)
        .zip(problem.px())
        .map(|((t, h), &w)| Pair::new(w, t, h, arms))
        .collect()
}

fn accumulate(ps: &[Pair], names: &[&str], f: impl Fn(&Pair) -> Vec<f64>) -> Vec<(String, f64)> {
    let mut acc = vec![0.0; names.len()];
    for p in ps {
        for (s, v) in acc.iter_mut().zip(f(p)) {
            *s += v;
        }
    }
    names.iter().map(|n| n.to_string()).zip(acc).collect()
}

/// Second-order terms (i)-(vii) of one arm component; `prime` selects the
/// reference-arm M1 law.
fn note_terms(p: &Pair, prime: bool) -> Vec<f64> {
    let (q, hq) = if prime { (p.p1p, p.h1p) } else { (p.p1, p.h1) };
    let rw = if prime { p.rap } else { p.ra };
    vec![
        p.ta * p.sum(|i, j| p.dmu(i, j) * (p.p12[i][j] - p.h12[i][j]) * hq[i] * p.h2p[j] / p.h12[i][j]),
        p.ra * p.sum(|i, j| hq[i] * p.h2p[j] * p.dmu(i, j)),
        rw * p.sum(|i, j| p.mh[i][j] * p.h2p[j] * (q[i] - hq[i])),
        p.rap * p.sum(|i, j| p.mh[i][j] * hq[i] * (p.p2p[j] - p.h2p[j])),
        -p.sum(|i, j| p.dmu(i, j) * p.h2p[j] * (q[i] - hq[i])),
        -p.sum(|i, j| p.mh[i][j] * (q[i] - hq[i]) * (p.p2p[j] - p.h2p[j])),
        -p.sum(|i, j| p.dmu(i, j) * q[i] * (p.p2p[j] - p.h2p[j])),
    ]
}

const ROMAN: [&str; 7] = ["i", "ii", "iii", "iv", "v", "vi", "vii"];

/// Evaluate one decomposition of `P[phi(.; eta_hat)] - psi_M1`.
pub fn remainder_decomposition(
    problem: &DiscreteProblem,
    hat: &[NuisancePoint],
    variant: Variant,
    arms: ArmPair,
) -> Result<RemainderReport> {
    let lhs = exact_plugin_mean(problem, hat, IfKind::PsiM1, arms)?
        - enumerate_functional(problem, Estimand::PsiM1, arms, None)?;
    let ps = pairs(problem, hat, arms);
    let name = variant.name().to_string();
    Ok(match variant {
        Variant::Termwise => {
            let names: Vec<String> = ROMAN
                .iter()
                .map(|r| format!("a.{r}"))
                .chain(ROMAN.iter().map(|r| format!("aprime.{r}")))
                .collect();
            let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
            let terms = accumulate(&ps, &refs, |p| {
                let mut v = note_terms(p, false);
                v.extend(note_terms(p, true).into_iter().map(|t| -t));
                v
            });
            RemainderReport::build(name, lhs, terms, vec![])
        }
        Variant::Combined => {
            let names = ["m1decomp.1", "m1decomp.2", "m1decomp.3", "m1decomp.4", "m1decomp.5", "m1decomp.6", "m1decomp.7"];
            let terms = accumulate(&ps, &names, |p| {
                let d1 = |i: usize| (p.p1[i] - p.h1[i]) - (p.p1p[i] - p.h1p[i]);
                vec![
                    p.ta * p.sum(|i, j| {
                        (p.h1[i] - p.h1p[i]) * p.h2p[j] / p.h12[i][j] * (p.p12[i][j] - p.h12[i][j]) * p.dmu(i, j)
                    }),
                    p.ra * p.sum(|i, j| p.h2p[j] * (p.h1[i] - p.h1p[i]) * p.dmu(i, j)),
                    p.ra * p.sum(|i, j| p.mh[i][j] * p.h2p[j] * (p.p1[i] - p.h1[i]))
                        - p.rap * p.sum(|i, j| p.mh[i][j] * p.h2p[j] * (p.p1p[i] - p.h1p[i])),
                    p.rap * p.sum(|i, j| p.mh[i][j] * (p.h1[i] - p.h1p[i]) * (p.p2p[j] - p.h2p[j])),
                    -p.sum(|i, j| p.h2p[j] * p.dmu(i, j) * d1(i)),
                    -p.sum(|i, j| p.mh[i][j] * (p.p2p[j] - p.h2p[j]) * d1(i)),
                    -p.sum(|i, j| (p.p1[i] - p.p1p[i]) * p.dmu(i, j) * (p.p2p[j] - p.h2p[j])),
                ]
            });
            RemainderReport::build(name, lhs, terms, vec![])
        }
        Variant::CombinedAsTypeset => {
            let names = ["m1decomp.1", "m1decomp.2", "m1decomp.3", "m1decomp.4", "m1decomp.5", "m1decomp.6", "m1decomp.7"];
            let terms = accumulate(&ps, &names, |p| {
                let d1 = |i: usize| (p.p1[i] - p.h1[i]) - (p.p1p[i] - p.h1p[i]);
                vec![
                    p.ta * p.sum(|i, j| {
                        (p.h1[i] - p.h1p[i]) * p.h2p[j] / p.h12p[i][j] * (p.p12[i][j] - p.h12[i][j]) * p.dmu(i, j)
                    }),
                    p.ra * p.sum(|i, j| p.h2p[j] * (p.h1[i] - p.h1p[i]) * p.dmu(i, j)),
                    -p.ra * p.sum(|i, j| p.mh[i][j] * p.h2p[j] * ((p.p1[i] - p.h1[i]) + (p.p1p[i] - p.h1p[i]))),
                    -p.ra * p.sum(|i, j| p.mh[i][j] * (p.h1[i] - p.h1p[i]) * (p.p2[j] - p.h2p[j])),
                    -p.sum(|i, j| p.h2p[j] * p.dmu(i, j) * d1(i)),
                    -p.sum(|i, j| p.mh[i][j] * (p.p2p[j] - p.h2p[j]) * d1(i)),
                    -p.sum(|i, j| (p.p1[i] - p.p1p[i]) * p.dmu(i, j) * (p.p2p[j] - p.h2p[j])),
                ]
            });
            RemainderReport::build(name, lhs, terms, vec![])
        }
        Variant::EightLine => {
            let names = ["br.1", "br.2", "br.3", "br.4", "br.5", "br.6", "br.7", "br.8"];
            // Quoted lines use (hat - true) orderings; signs kept as quoted.
            let terms = accumulate(&ps, &names, |p| {
                let (ea, eap) = (-p.ra, -p.rap);
                vec![
                    p.ta * p.sum(|i, j| {
                        (p.h1[i] - p.h1p[i]) * p.h2p[j] / (p.p12[i][j] * p.h12[i][j])
                            * (-p.dmu(i, j))
                            * (p.h12[i][j] - p.p12[i][j])
                    }),
                    -ea * p.sum(|i, j| -p.dmu(i, j) * p.h1p[i] * p.h2p[j]),
                    -eap * p.sum(|i, j| p.mu[i][j] * (p.h1p[i] * p.h2p[j] - p.p1p[i] * p.p2p[j])),
                    eap * p.sum(|i, j| p.mh[i][j] * p.h1[i] * (p.h2p[j] - p.p2p[j])),
                    ea * p.sum(|i, j| -p.dmu(i, j) * p.h1[i] * p.h2p[j]),
                    ea * p.sum(|i, j| p.mh[i][j] * p.h2p[j] * (p.h1[i] - p.p1[i])),
                    -p.sum(|i, j| -p.dmu(i, j) * (p.h1[i] * p.h2p[j] - p.p1[i] * p.p2p[j])),
                    -p.sum(|i, j| p.mh[i][j] * (p.h2p[j] - p.p2p[j]) * (p.h1[i] - p.p1[i])),
                ]
            });
            let missing = accumulate(&ps, &["missing.1", "missing.2"], |p| {
                vec![
                    p.sum(|i, j| -p.dmu(i, j) * (p.h1p[i] * p.h2p[j] - p.p1p[i] * p.p2p[j])),
                    p.sum(|i, j| p.mh[i][j] * (p.h1p[i] - p.p1p[i]) * (p.h2p[j] - p.p2p[j])),
                ]
            });
            RemainderReport::build(name, lhs, terms, missing)
        }
    })
}

/// Bias decompositions of the four bound components.
///
/// With `g = mu p12` (or `p12` alone for the second family), `q` the M1 law of
/// the component and `s = p(m2 | a')`, the exact bias splits into three
/// propensity-error products and six products of regression and mediator
/// errors.
pub fn gamma_remainders(
    problem: &DiscreteProblem,
    hat: &[NuisancePoint],
    arms: ArmPair,
) -> Result<Vec<RemainderReport>> {
    let ps = pairs(problem, hat, arms);
    let names = [
        "pi_a x mu",
        "pi_a x p12",
        "pi_q x q",
        "pi_aprime x s",
        "mu x q",
        "p12 x q",
        "mu x s",
        "p12 x s",
        "q x s",
    ];
    let mut out = Vec::new();
    for (kind, with_mu, prime, label) in [
        (IfKind::Bound1(Arm::A), true, false, "phi_1a"),
        (IfKind::Bound1(Arm::APrime), true, true, "phi_1aprime"),
        (IfKind::Bound2(Arm::A), false, false, "phi_2a"),
        (IfKind::Bound2(Arm::APrime), false, true, "phi_2aprime"),
    ] {
        let lhs = exact_plugin_mean(problem, hat, kind, arms)? - target_of(problem, kind, arms)?;
        let terms = accumulate(&ps, &names, |p| {
            let (q, hq) = if prime { (p.p1p, p.h1p) } else { (p.p1, p.h1) };
            let rq = if prime { p.rap } else { p.ra };
            let mu = |i: usize, j: usize| if with_mu { p.mu[i][j] } else { 1.0 };
            let mh = |i: usize, j: usize| if with_mu { p.mh[i][j] } else { 1.0 };
            let dmu = |i: usize, j: usize| mu(i, j) - mh(i, j);
            let dp = |i: usize, j: usize| p.p12[i][j] - p.h12[i][j];
            let gh = |i: usize, j: usize| mh(i, j) * p.h12[i][j];
            let ds = |j: usize| p.p2p[j] - p.h2p[j];
            vec![
                p.ra * p.sum(|i, j| dmu(i, j) * p.p12[i][j] * hq[i] * p.h2p[j]),
                p.ra * p.sum(|i, j| mh(i, j) * dp(i, j) * hq[i] * p.h2p[j]),
                rq * p.sum(|i, j| gh(i, j) * (q[i] - hq[i]) * p.h2p[j]),
                p.rap * p.sum(|i, j| gh(i, j) * hq[i] * ds(j)),
                -p.sum(|i, j| dmu(i, j) * p.p12[i][j] * (q[i] - hq[i]) * p.p2p[j]),
                -p.sum(|i, j| mh(i, j) * dp(i, j) * (q[i] - hq[i]) * p.p2p[j]),
                -p.sum(|i, j| dmu(i, j) * p.p12[i][j] * hq[i] * ds(j)),
                -p.sum(|i, j| mh(i, j) * dp(i, j) * hq[i] * ds(j)),
                -p.sum(|i, j| gh(i, j) * (q[i] - hq[i]) * ds(j)),
            ]
        });
        out.push(RemainderReport::build(label.to_string(), lhs, terms, vec![]));
    }
    Ok(out)
}

/// One-step (influence-function mean) or plug-in functional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalingKind {
    OneStep(IfKind),
    Plugin(IfKind),
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub eps: Vec<f64>,
    pub bias: Vec<f64>,
    pub slope: f64,
}

/// Log-log slope of `|bias|` against `eps` along a fixed direction.
pub fn second_order_scaling(
    problem: &DiscreteProblem,
    direction: &Direction,
    eps_grid: &[f64],
    kind: ScalingKind,
    arms: ArmPair,
) -> Result<ScalingReport> {
    let (ifk, one_step) = match kind {
        ScalingKind::OneStep(k) => (k, true),
        ScalingKind::Plugin(k) => (k, false),
    };
    let truth = target_of(problem, ifk, arms)?;
    let mut eps = Vec::new();
    let mut bias = Vec::new();
    for &e in eps_grid {
        let hat = direction.apply(problem.eta(), e)?;
        let est = if one_step {
            exact_plugin_mean(problem, &hat, ifk, arms)?
        } else {
            let mut s = 0.0;
            for (h, w) in hat.iter().zip(problem.px()) {
                s += w * eif::target_at(ifk, h, arms)?;
            }
            s
        };
        let b = est - truth;
        // Differences this small are rounding noise, not bias.
        if b.abs() > 1e-13 {
            eps.push(e);
            bias.push(b);
        }
    }
    if eps.len() < 2 {
        return Ok(ScalingReport {
            eps,
            bias,
            slope: f64::NAN,
        });
    }
    let lx: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let ly: Vec<f64> = bias.iter().map(|b| b.abs().ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(ScalingReport {
        eps,
        bias,
        slope: sxy / sxx,
    })
}

/// Every influence function with a closed-form target, for centering checks.
pub fn centering_kinds() -> Vec<IfKind> {
    let mut v = vec![
        IfKind::PsiM1,
        IfKind::PsiM1Arm(Arm::A),
        IfKind::PsiM1Arm(Arm::APrime),
        IfKind::Cate,
        IfKind::Ratio {
            delta: eif::DELTA_RATIO,
        },
        IfKind::Bound1(Arm::A),
        IfKind::Bound1(Arm::APrime),
        IfKind::Bound2(Arm::A),
        IfKind::Bound2(Arm::APrime),
    ];
    for id in [AssumptionId::A1, AssumptionId::A2, AssumptionId::A3] {
        let sa = SensitivityAssumption::new(id, 0.1).expect("valid tau");
        v.push(IfKind::XiLb(sa));
        v.push(IfKind::XiUb(sa));
    }
    v.extend(Extension::ALL.iter().map(|&e| IfKind::Ext(e)));
    v
}

/// Battery settings.
#[derive(Debug, Clone, Serialize)]
pub struct BatteryConfig {
    pub n_problems: usize,
    pub grid_sizes: Vec<usize>,
    pub floor: f64,
    pub perturbation: f64,
    pub seed: u64,
    /// Test hook: add 1e-3 to this named term in every report.
    pub corrupt_term: Option<String>,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self {
            n_problems: 20,
            grid_sizes: vec![2, 3, 5],
            floor: 0.05,
            perturbation: 0.2,
            seed: 20240601,
            corrupt_term: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CenteringCheck {
    pub estimand: String,
    pub target: f64,
    pub mean: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BatteryItem {
    pub problem: usize,
    pub grid_size: usize,
    pub remainders: Vec<RemainderReport>,
    pub gammas: Vec<RemainderReport>,
    pub centering: Vec<CenteringCheck>,
    pub truth_terms_zero: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BatteryReport {
    pub items: Vec<BatteryItem>,
    /// Names of failed exact checks, e.g. `problem 3: combined`.
    pub failures: Vec<String>,
}

impl BatteryReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Per problem: Eight-line residual, missing-term sum and their gap.
    pub fn discrepancy_table(&self) -> Vec<(usize, f64, f64, f64)> {
        self.items
            .iter()
            .filter_map(|it| {
                let r = it.remainders.iter().find(|r| r.name == Variant::EightLine.name())?;
                let miss: f64 = r.missing.iter().map(|t| t.1).sum();
                Some((it.problem, r.residual, miss, r.residual_minus_missing.unwrap_or(f64::NAN)))
            })
            .collect()
    }
}

/// Run every exact identity on a battery of random problems.
pub fn run_battery(cfg: &BatteryConfig) -> Result<BatteryReport> {
    if cfg.grid_sizes.is_empty() {
        return Err(IieError::Invalid("battery needs at least one grid size".into()));
    }
    let arms = ArmPair::default();
    let mut items = Vec::new();
    let mut failures = Vec::new();
    for p in 0..cfg.n_problems {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(p as u64);
        let grid_size = cfg.grid_sizes[p % cfg.grid_sizes.len()];
        let problem = random_problem(&mut rng, grid_size, cfg.floor);
        let hat = perturb(&problem, &mut rng, cfg.perturbation)?;

        let mut remainders = Vec::new();
        for v in Variant::ALL {
            let mut r = remainder_decomposition(&problem, &hat, v, arms)?;
            if let Some(t) = &cfg.corrupt_term {
                r.corrupt(t, 1e-3);
            }
            if v.is_exact() && !r.passes() {
                failures.push(format!("problem {p}: {} residual {:e}", r.name, r.residual));
            }
            remainders.push(r);
        }
        let mut gammas = gamma_remainders(&problem, &hat, arms)?;
        for g in &mut gammas {
            if let Some(t) = &cfg.corrupt_term {
                g.corrupt(t, 1e-3);
            }
            if !g.passes() {
                failures.push(format!("problem {p}: {} residual {:e}", g.name, g.residual));
            }
        }

        // At the truth every term and the bias itself vanish.
        let mut truth_terms_zero = true;
        for v in [Variant::Termwise, Variant::Combined] {
            let r = remainder_decomposition(&problem, problem.eta(), v, arms)?;
            truth_terms_zero &= r.lhs.abs() < 1e-13 && r.terms.iter().all(|t| t.1.abs() < 1e-13);
        }
        for g in gamma_remainders(&problem, problem.eta(), arms)? {
            truth_terms_zero &= g.lhs.abs() < 1e-13 && g.terms.iter().all(|t| t.1.abs() < 1e-13);
        }
        if !truth_terms_zero {
            failures.push(format!("problem {p}: nonzero terms at the truth"));
        }

        let mut centering = Vec::new();
        for kind in centering_kinds() {
            let target = match target_of(&problem, kind, arms) {
                Ok(t) => t,
                // Ratio targets are undefined when the CATE nearly vanishes.
                Err(IieError::RatioDegenerate { .. }) => continue,
                Err(e) => return Err(e),
            };
            let mean = exact_plugin_mean(&problem, problem.eta(), kind, arms)?;
            let pass = close(mean, target);
            let estimand = kind.estimand().name();
            if !pass {
                failures.push(format!("problem {p}: centering {estimand}"));
            }
            centering.push(CenteringCheck {
                estimand,
                target,
                mean,
                pass,
            });
        }
        items.push(BatteryItem {
            problem: p,
            grid_size,
            remainders,
            gammas,
            centering,
            truth_terms_zero,
        });
    }
    Ok(BatteryReport { items, failures })
}
