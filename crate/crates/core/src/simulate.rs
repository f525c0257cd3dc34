//! Benchmark data-generating processes with quadrature ground truth, and a
//! replication harness summarizing estimates against that truth.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Gamma, Normal};

use crate::comparators::pte_freedman;
use crate::data::{AnalysisConfig, TrialDataset, TrialRecord};
use crate::effects::{contrast, estimate_effects};
use crate::error::{Error, Result};
use crate::normal;
use crate::numeric::{bisect, mean, sample_sd, simpson};
use crate::power::relative_power;
use crate::resample::{cv_estimate, derive_seed, CvEstimator, CvPlan, PerturbationScheme, TAG_STUDY};
use crate::transform::{fit_transform, AnalyticCurves, Interval, Orientation, SupportPartition};

/// Threshold t used by settings 1–4 unless one is given.
pub const DEFAULT_T: [f64; 4] = [0.852_181, 3.5865, 3.5865, 2.618_881];

/// Tail mass cut from each end of an unbounded surrogate law.
const TAIL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum SurrogateLaw {
    /// Independent Gamma(shape, scale) surrogates per arm.
    Gamma {
        shape1: f64,
        scale1: f64,
        shape0: f64,
        scale0: f64,
    },
    Uniform {
        lo1: f64,
        hi1: f64,
        lo0: f64,
        hi0: f64,
    },
    /// Jointly normal (S⁽¹⁾, S⁽⁰⁾).
    BivariateNormal {
        mean1: f64,
        mean0: f64,
        var1: f64,
        var0: f64,
        cov: f64,
    },
}

/// Link G applied to the surrogate inside the threshold outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Link {
    Identity,
    /// s − 3 log s
    MinusThreeLog,
    Constant(f64),
    Scaled(f64),
    Shifted(f64),
}

impl Link {
    pub fn apply(&self, s: f64) -> f64 {
        match *self {
            Link::Identity => s,
            Link::MinusThreeLog => s - 3.0 * s.ln(),
            Link::Constant(c) => c,
            Link::Scaled(a) => a * s,
            Link::Shifted(b) => b + s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum OutcomeFamily {
    /// Y⁽¹⁾ = I{E/(0.2 G1(S)) > t}, Y⁽⁰⁾ = I{E/(0.2 + 0.22 G0(S)) > t}, E ~ Exp(1).
    ExponentialThreshold { t: f64 },
    /// P(Y⁽ᵃ⁾ = 1 | S) = exp(−offset_a − curvature·S²).
    BernoulliExp { offset1: f64, offset0: f64, curvature: f64 },
    /// P(Y = 1 | S) = expit(slope·S) in both arms.
    Logistic { slope: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSetting {
    /// "1" to "5" for the benchmark settings, anything else for custom ones.
    pub id: String,
    pub surrogate: SurrogateLaw,
    pub link1: Link,
    pub link0: Link,
    pub outcome: OutcomeFamily,
}

/// Denominators at or below zero make the threshold event impossible, except
/// exactly zero, where E/0 = ∞ exceeds every t.
fn threshold_prob(den: f64, t: f64) -> f64 {
    if den > 0.0 {
        (-t * den).exp()
    } else if den == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn threshold_draw(e: f64, den: f64, t: f64) -> bool {
    if den > 0.0 {
        e / den > t
    } else {
        den == 0.0
    }
}

impl SimulationSetting {
    /// Benchmark setting 1–5; `t` defaults to [`DEFAULT_T`] and is ignored by
    /// setting 5.
    pub fn benchmark(id: u8, t: Option<f64>) -> Result<Self> {
        let thr = |k: usize| OutcomeFamily::ExponentialThreshold { t: t.unwrap_or(DEFAULT_T[k]) };
        let gamma = |shape1, scale1, shape0, scale0| SurrogateLaw::Gamma { shape1, scale1, shape0, scale0 };
        let (surrogate, link1, link0, outcome) = match id {
            1 => (gamma(2.0, 2.0, 9.0, 0.5), Link::Identity, Link::Identity, thr(0)),
            2 => (gamma(2.0, 2.0, 9.0, 0.5), Link::MinusThreeLog, Link::Constant(3.0), thr(1)),
            3 => (gamma(5.0, 1.0, 9.0, 0.5), Link::Scaled(0.5), Link::Shifted(9.0 / 11.0), thr(2)),
            4 => (
                SurrogateLaw::Uniform { lo1: 1.0, hi1: 3.0, lo0: 2.0, hi0: 4.0 },
                Link::Identity,
                Link::Identity,
                thr(3),
            ),
            5 => (
                SurrogateLaw::BivariateNormal { mean1: 5.0, mean0: 5.0, var1: 2.0, var0: 1.0, cov: 1.0 },
                Link::Identity,
                Link::Identity,
                OutcomeFamily::BernoulliExp { offset1: 1.0, offset0: 4.0, curvature: 0.1 },
            ),
            _ => return Err(Error::InvalidParameters(format!("unknown setting {id}; expected 1-5"))),
        };
        Ok(Self { id: id.to_string(), surrogate, link1, link0, outcome })
    }

    /// Shared conditional mean in both arms, so the untransformed-outcome
    /// regression is already optimal and PTE = 1.
    pub fn perfect_surrogate() -> Self {
        Self {
            id: "custom".into(),
            surrogate: SurrogateLaw::BivariateNormal { mean1: 1.0, mean0: 0.0, var1: 2.25, var0: 1.0, cov: 0.0 },
            link1: Link::Identity,
            link0: Link::Identity,
            outcome: OutcomeFamily::Logistic { slope: 1.5 },
        }
    }

    pub fn with_t(mut self, t: f64) -> Self {
        if let OutcomeFamily::ExponentialThreshold { t: ref mut old } = self.outcome {
            *old = t;
        }
        self
    }

    pub fn t(&self) -> Option<f64> {
        match self.outcome {
            OutcomeFamily::ExponentialThreshold { t } => Some(t),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameters(m.to_string()));
        match self.surrogate {
            SurrogateLaw::Gamma { shape1, scale1, shape0, scale0 } => {
                if [shape1, scale1, shape0, scale0].iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                    return bad("gamma parameters must be positive");
                }
            }
            SurrogateLaw::Uniform { lo1, hi1, lo0, hi0 } => {
                if !(lo1 < hi1 && lo0 < hi0) {
                    return bad("uniform bounds must satisfy lo < hi");
                }
            }
            SurrogateLaw::BivariateNormal { var1, var0, cov, .. } => {
                if !(var1 > 0.0 && var0 > 0.0 && cov * cov < var1 * var0) {
                    return bad("covariance matrix must be positive definite");
                }
            }
        }
        if let OutcomeFamily::ExponentialThreshold { t } = self.outcome {
            if !(t > 0.0 && t.is_finite()) {
                return bad("threshold t must be positive");
            }
        }
        Ok(())
    }

    /// P(Y⁽¹⁾ = 1 | S⁽¹⁾ = s).
    pub fn m1(&self, s: f64) -> f64 {
        match self.outcome {
            OutcomeFamily::ExponentialThreshold { t } => threshold_prob(0.2 * self.link1.apply(s), t),
            OutcomeFamily::BernoulliExp { offset1, curvature, .. } => (-offset1 - curvature * s * s).exp(),
            OutcomeFamily::Logistic { slope } => 1.0 / (1.0 + (-slope * s).exp()),
        }
    }

    /// P(Y⁽⁰⁾ = 1 | S⁽⁰⁾ = s).
    pub fn m0(&self, s: f64) -> f64 {
        match self.outcome {
            OutcomeFamily::ExponentialThreshold { t } => threshold_prob(0.2 + 0.22 * self.link0.apply(s), t),
            OutcomeFamily::BernoulliExp { offset0, curvature, .. } => (-offset0 - curvature * s * s).exp(),
            OutcomeFamily::Logistic { slope } => 1.0 / (1.0 + (-slope * s).exp()),
        }
    }

    fn marginals(&self) -> (Marginal, Marginal) {
        match self.surrogate {
            SurrogateLaw::Gamma { shape1, scale1, shape0, scale0 } => (
                Marginal::Gamma(Gamma::new(shape1, 1.0 / scale1).unwrap()),
                Marginal::Gamma(Gamma::new(shape0, 1.0 / scale0).unwrap()),
            ),
            SurrogateLaw::Uniform { lo1, hi1, lo0, hi0 } => (Marginal::Uniform(lo1, hi1), Marginal::Uniform(lo0, hi0)),
            SurrogateLaw::BivariateNormal { mean1, mean0, var1, var0, .. } => (
                Marginal::Normal(Normal::new(mean1, var1.sqrt()).unwrap()),
                Marginal::Normal(Normal::new(mean0, var0.sqrt()).unwrap()),
            ),
        }
    }

    pub fn f1(&self, s: f64) -> f64 {
        self.marginals().0.pdf(s)
    }

    pub fn f0(&self, s: f64) -> f64 {
        self.marginals().1.pdf(s)
    }

    /// Supports (Ω0, Ω1) used for population quantities. Unbounded laws share
    /// the hull of both arms' central 1 − 2·10⁻¹² ranges.
    pub fn supports(&self) -> (Interval, Interval) {
        let (m1, m0) = self.marginals();
        match self.surrogate {
            SurrogateLaw::Uniform { lo1, hi1, lo0, hi0 } => (Interval::new(lo0, hi0), Interval::new(lo1, hi1)),
            _ => {
                let (a1, b1) = m1.central();
                let (a0, b0) = m0.central();
                let hull = Interval::new(a1.min(a0), b1.max(b0));
                (hull, hull)
            }
        }
    }

    /// Points where a density or conditional mean is not smooth.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b = Vec::new();
        if let SurrogateLaw::Uniform { lo1, hi1, lo0, hi0 } = self.surrogate {
            b.extend([lo1, hi1, lo0, hi0]);
        }
        if let OutcomeFamily::ExponentialThreshold { .. } = self.outcome {
            if self.link1 == Link::MinusThreeLog {
                // s − 3 log s has its minimum at s = 3 and crosses zero on either side.
                let g = |s: f64| s - 3.0 * s.ln();
                b.extend(bisect(g, 1.0, 3.0, 1e-14));
                b.extend(bisect(g, 3.0, 20.0, 1e-14));
            }
        }
        b
    }

    /// One subject's potential outcomes.
    pub fn draw_potentials(&self, rng: &mut impl Rng) -> PotentialOutcomes {
        let (s1, s0) = match self.surrogate {
            SurrogateLaw::Gamma { shape1, scale1, shape0, scale0 } => (
                rand_distr::Gamma::new(shape1, scale1).unwrap().sample(rng),
                rand_distr::Gamma::new(shape0, scale0).unwrap().sample(rng),
            ),
            SurrogateLaw::Uniform { lo1, hi1, lo0, hi0 } => (rng.random_range(lo1..hi1), rng.random_range(lo0..hi0)),
            SurrogateLaw::BivariateNormal { mean1, mean0, var1, var0, cov } => {
                let z1: f64 = StandardNormal.sample(rng);
                let z2: f64 = StandardNormal.sample(rng);
                let sd1 = var1.sqrt();
                let b = cov / sd1;
                (mean1 + sd1 * z1, mean0 + b * z1 + (var0 - b * b).sqrt() * z2)
            }
        };
        let (y1, y0) = match self.outcome {
            OutcomeFamily::ExponentialThreshold { t } => {
                let e1: f64 = Exp1.sample(rng);
                let e0: f64 = Exp1.sample(rng);
                (
                    threshold_draw(e1, 0.2 * self.link1.apply(s1), t),
                    threshold_draw(e0, 0.2 + 0.22 * self.link0.apply(s0), t),
                )
            }
            _ => (rng.random::<f64>() < self.m1(s1), rng.random::<f64>() < self.m0(s0)),
        };
        PotentialOutcomes { y1: y1 as u8 as f64, y0: y0 as u8 as f64, s1, s0 }
    }
}

#[derive(Debug, Clone, Copy)]
enum Marginal {
    Gamma(Gamma),
    Normal(Normal),
    Uniform(f64, f64),
}

impl Marginal {
    fn pdf(&self, s: f64) -> f64 {
        match self {
            Marginal::Gamma(g) => {
                if s > 0.0 {
                    g.pdf(s)
                } else {
                    0.0
                }
            }
            Marginal::Normal(n) => n.pdf(s),
            Marginal::Uniform(lo, hi) => {
                if s >= *lo && s <= *hi {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
        }
    }

    fn central(&self) -> (f64, f64) {
        match self {
            Marginal::Gamma(g) => (g.inverse_cdf(TAIL), g.inverse_cdf(1.0 - TAIL)),
            Marginal::Normal(n) => (n.inverse_cdf(TAIL), n.inverse_cdf(1.0 - TAIL)),
            Marginal::Uniform(lo, hi) => (*lo, *hi),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialOutcomes {
    pub y1: f64,
    pub y0: f64,
    pub s1: f64,
    pub s0: f64,
}

/// A simulated trial with the potential outcomes it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedTrial {
    pub dataset: TrialDataset,
    pub potentials: Vec<PotentialOutcomes>,
}

/// n subjects with A ~ Bernoulli(1/2); each observes its own arm's potentials.
pub fn generate_with_potentials(setting: &SimulationSetting, n: usize, seed: u64) -> Result<SimulatedTrial> {
    setting.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    let mut potentials = Vec::with_capacity(n);
    for _ in 0..n {
        let a = rng.random::<bool>() as u8;
        let p = setting.draw_potentials(&mut rng);
        records.push(if a == 1 { TrialRecord { y: p.y1, s: p.s1, a } } else { TrialRecord { y: p.y0, s: p.s0, a } });
        potentials.push(p);
    }
    Ok(SimulatedTrial { dataset: TrialDataset::new(records)?, potentials })
}

pub fn generate(setting: &SimulationSetting, n: usize, seed: u64) -> Result<TrialDataset> {
    generate_with_potentials(setting, n, seed).map(|t| t.dataset)
}

/// Population values of the estimands under a setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationTruth {
    pub mu0: f64,
    pub mu1: f64,
    pub mu_g0: f64,
    pub mu_g1: f64,
    pub delta: f64,
    pub delta_g: f64,
    pub sigma2: f64,
    pub sigma2_g: f64,
    pub pte: f64,
    pub rp: Vec<(u64, f64)>,
    pub lambda: f64,
    pub c: Option<f64>,
    pub k1: f64,
    pub k2: f64,
    pub orientation: Orientation,
    /// ∫ g f0 − μ0; zero up to quadrature error.
    pub constraint_residual: f64,
    /// Δ_g − Δ_L under the reference law F_new.
    pub reference_gap: f64,
    /// C·K1·(m0(s*) − m1(s*)), the closed form of that gap.
    pub reference_gap_formula: f64,
}

/// Panels per smooth piece of the quadrature.
pub const TRUTH_PANELS: usize = 4000;

/// Closed-form g_opt and all estimands by composite Simpson quadrature over
/// the analytic densities, split at every non-smooth point.
pub fn population_truth(setting: &SimulationSetting, n_bars: &[u64], z: f64) -> Result<PopulationTruth> {
    setting.validate()?;
    let (om0, om1) = setting.supports();
    let partition = SupportPartition::from_supports(om0, om1)?;
    let mut breaks = setting.breakpoints();
    if let Some(s) = partition.s_star {
        breaks.push(s);
    }
    let int = |f: &dyn Fn(f64) -> f64, iv: Interval| simpson(f, iv.lo, iv.hi, &breaks, TRUTH_PANELS);
    let f0 = |s: f64| setting.f0(s);
    let f1 = |s: f64| setting.f1(s);
    let m0 = |s: f64| setting.m0(s);
    let m1 = |s: f64| setting.m1(s);
    let r = |s: f64| {
        let d = f1(s);
        if d > 0.0 {
            f0(s) / d
        } else {
            0.0
        }
    };
    let dc = partition.d_c;
    let int_d = int(&|s| (m0(s) - m1(s)) * f0(s), dc);
    let k2 = int(&|s| r(s) * f0(s), dc);
    if !(k2 > 0.0) {
        return Err(Error::DegenerateK2(k2));
    }
    let mass_c = int(&f0, dc);
    let (lambda, c, k1, r_star, d_star) = match (partition.d_0, partition.s_star) {
        (Some(d0), Some(st)) => {
            let k1 = int(&f0, d0);
            // One-sided limit of r from inside D_c.
            let inside = if st >= dc.hi { st - 1e-12 * dc.len() } else { st + 1e-12 * dc.len() };
            let r_star = r(inside);
            let d_star = m0(st) - m1(st);
            let den = k2 + k1 * r_star;
            ((int_d + k1 * d_star) / den, Some((r_star * int_d - k2 * d_star) / den), k1, r_star, d_star)
        }
        _ => (int_d / k2, None, 0.0, 0.0, 0.0),
    };
    let g1 = |s: f64| if dc.contains(s) { m1(s) + lambda * r(s) } else { m1(s) };
    let mu1 = int(&|s| m1(s) * f1(s), om1);
    let mu0 = int(&|s| m0(s) * f0(s), om0);
    let mut mu_g1 = 0.0;
    let mut sq_g1 = 0.0;
    for iv in std::iter::once(dc).chain(partition.d_1.iter().copied()) {
        mu_g1 += int(&|s| g1(s) * f1(s), iv);
        sq_g1 += int(&|s| g1(s).powi(2) * f1(s), iv);
    }
    let mut mu_g0 = int(&|s| g1(s) * f0(s), dc);
    let mut sq_g0 = int(&|s| g1(s).powi(2) * f0(s), dc);
    if let (Some(d0), Some(c)) = (partition.d_0, c) {
        mu_g0 += int(&|s| (m0(s) + c) * f0(s), d0);
        sq_g0 += int(&|s| (m0(s) + c).powi(2) * f0(s), d0);
    }
    let delta = mu1 - mu0;
    let delta_g = mu_g1 - mu_g0;
    // Binary outcomes; equal allocation doubles each arm's variance.
    let sigma2 = 2.0 * (mu1 * (1.0 - mu1) + mu0 * (1.0 - mu0));
    let sigma2_g = 2.0 * ((sq_g1 - mu_g1 * mu_g1) + (sq_g0 - mu_g0 * mu_g0));
    let (ey, eg) = (delta / sigma2.sqrt(), delta_g / sigma2_g.sqrt());

    let scale = mass_c / (k2 + k1 * r_star);
    let delta_l = (mu1 - scale * int(&|s| m1(s) * f0(s), dc)) - (mu0 - scale * int(&|s| m0(s) * f0(s), dc));
    Ok(PopulationTruth {
        mu0,
        mu1,
        mu_g0,
        mu_g1,
        delta,
        delta_g,
        sigma2,
        sigma2_g,
        pte: delta_g / delta,
        rp: n_bars.iter().map(|&nb| (nb, relative_power(eg, ey, nb, nb, z))).collect(),
        lambda,
        c,
        k1,
        k2,
        orientation: partition.orientation,
        constraint_residual: mu_g0 - mu0,
        reference_gap: delta_g - delta_l,
        reference_gap_formula: scale * k1 * d_star,
    })
}

/// Population g_opt by the closed form and by the constrained least-squares
/// oracle on the same grid, returning their sup-norm distance.
pub fn oracle_agreement(setting: &SimulationSetting, points: usize) -> Result<f64> {
    let (om0, om1) = setting.supports();
    let partition = SupportPartition::from_supports(om0, om1)?;
    let f0 = |s: f64| if om0.contains(s) { setting.f0(s) } else { 0.0 };
    let f1 = |s: f64| setting.f1(s);
    let m0 = |s: f64| setting.m0(s);
    let m1 = |s: f64| setting.m1(s);
    let curves = AnalyticCurves { f0: &f0, f1: &f1, m0: &m0, m1: &m1 };
    let closed = crate::transform::closed_form_gopt(&curves, &partition, points)?;
    let oracle = crate::transform::oracle_gopt(&curves, &partition, points)?;
    Ok(closed.sup_distance(&oracle))
}

/// Threshold t in [lo, hi] at which the population PTE equals `target`.
pub fn calibrate_t(setting: &SimulationSetting, target: f64, lo: f64, hi: f64) -> Result<f64> {
    if setting.t().is_none() {
        return Err(Error::InvalidParameters("setting has no threshold parameter".into()));
    }
    let pte_at = |t: f64| population_truth(&setting.clone().with_t(t), &[], 1.96).map(|v| v.pte);
    let (a, b) = (pte_at(lo)? - target, pte_at(hi)? - target);
    if a * b > 0.0 {
        return Err(Error::Calibration(format!(
            "PTE does not cross {target} on [{lo}, {hi}] (ends {:.4}, {:.4})",
            a + target,
            b + target
        )));
    }
    bisect(|t| pte_at(t).map_or(f64::NAN, |v| v - target), lo, hi, 1e-10)
        .ok_or_else(|| Error::Calibration("bisection failed".into()))
}

// ---------------------------------------------------------------------------
// Replication studies.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    pub n_bars: Vec<u64>,
    /// Perturbation SEs per replicate; without them ASE and CP are omitted.
    pub resample: bool,
    pub comparators: bool,
    /// Largest tolerated fraction of failed replicates.
    pub max_failure: f64,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self { n_bars: vec![50, 100, 150], resample: true, comparators: true, max_failure: 0.02 }
    }
}

/// Estimates from one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub index: usize,
    pub seed: u64,
    pub orientation: Orientation,
    pub lambda: f64,
    /// In-sample PTE of the full-data transform.
    pub pte_full: f64,
    /// |mean over arm 0 of Y − ĝ(S)| / sd(Y | A = 0).
    pub constraint_ratio: f64,
    /// Perturbation SE of Δ̂ and the influence-function σ̂/√n.
    pub delta: f64,
    pub delta_if_se: f64,
    pub delta_pert_se: Option<f64>,
    pub pte_cv: f64,
    pub pte_se: Option<f64>,
    pub rp_cv: Vec<f64>,
    pub rp_se: Vec<Option<f64>>,
    pub pte_f: Option<f64>,
}

fn run_replicate(
    setting: &SimulationSetting,
    n: usize,
    cfg: &AnalysisConfig,
    opts: &StudyOptions,
    index: usize,
) -> Result<ReplicateResult> {
    let seed = derive_seed(cfg.seed, TAG_STUDY, index as u64);
    let data = generate(setting, n, seed)?;
    let full = fit_transform(&data, cfg)?;
    let g = full.transform();
    let est = estimate_effects(&data, |s| g.evaluate(s).ok(), cfg.exclusion_cap)?;
    let arm0: Vec<(f64, f64)> = data.records().iter().filter(|r| r.a == 0).map(|r| (r.y, r.s)).collect();
    let resid: Vec<f64> = arm0.iter().map(|&(y, s)| y - g.evaluate_clamped(s).0).collect();
    let y0: Vec<f64> = arm0.iter().map(|p| p.0).collect();
    let constraint_ratio = mean(&resid).abs() / sample_sd(&y0);

    let plan = CvPlan::new(&data, cfg.cv_folds, seed);
    let cv = CvEstimator::new(&data, &plan, cfg, &opts.n_bars)?;
    let (pte_cv, pte_se, rp_cv, rp_se, delta_pert_se) = if opts.resample {
        let scheme = PerturbationScheme::new(cfg.resample_count, seed);
        let rep = cv_estimate(&cv, n, &scheme, cfg.alpha)?;
        let y: Vec<f64> = data.records().iter().map(|r| r.y).collect();
        let arms: Vec<u8> = data.records().iter().map(|r| r.a).collect();
        let (draws, _) =
            crate::resample::perturb_raw(n, |w| Ok(vec![contrast(&y, &arms, Some(w), None).delta]), &scheme)?;
        let d: Vec<f64> = draws.iter().map(|v| v[0]).collect();
        (
            rep.pte.point,
            Some(rep.pte.se),
            rep.rp.iter().map(|(_, r)| r.point).collect(),
            rep.rp.iter().map(|(_, r)| Some(r.se)).collect(),
            Some(sample_sd(&d)),
        )
    } else {
        let o = cv.evaluate(None)?;
        (o.pte, None, o.rp, vec![None; opts.n_bars.len()], None)
    };
    Ok(ReplicateResult {
        index,
        seed,
        orientation: full.partition.orientation,
        lambda: full.lambda,
        pte_full: est.delta_g / est.delta,
        constraint_ratio,
        delta: est.delta,
        delta_if_se: (est.sigma2 / n as f64).sqrt(),
        delta_pert_se,
        pte_cv,
        pte_se,
        rp_cv,
        rp_se,
        pte_f: if opts.comparators { pte_freedman(&data).ok().map(|f| f.pte_f) } else { None },
    })
}

/// Truth, mean estimate, empirical and average estimated SE, and coverage of
/// the normal-theory 95% interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub estimand: String,
    pub truth: Option<f64>,
    pub est: f64,
    pub ese: f64,
    pub ase: Option<f64>,
    pub cp: Option<f64>,
}

fn summarize(estimand: &str, truth: Option<f64>, est: &[f64], se: &[Option<f64>], z: f64) -> SummaryRow {
    let ses: Option<Vec<f64>> = se.iter().copied().collect();
    let cp = match (truth, &ses) {
        (Some(t), Some(ses)) if !ses.is_empty() => {
            Some(est.iter().zip(ses).filter(|(e, s)| (t - **e).abs() <= z * **s).count() as f64 / est.len() as f64)
        }
        _ => None,
    };
    SummaryRow {
        estimand: estimand.into(),
        truth,
        est: mean(est),
        ese: sample_sd(est),
        ase: ses.filter(|v| !v.is_empty()).map(|v| mean(&v)),
        cp,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub setting: SimulationSetting,
    pub n: usize,
    pub reps: usize,
    pub failed: usize,
    pub rows: Vec<SummaryRow>,
    /// Replicates whose estimated partition had a nonempty D0.
    pub nonempty_d0: usize,
    pub truth: PopulationTruth,
    pub replicates: Vec<ReplicateResult>,
    pub runtime_secs: f64,
}

pub fn run_study(
    setting: &SimulationSetting,
    reps: usize,
    n: usize,
    cfg: &AnalysisConfig,
    truth: &PopulationTruth,
    opts: &StudyOptions,
) -> Result<StudySummary> {
    if reps == 0 {
        return Err(Error::InvalidParameters("reps must be positive".into()));
    }
    cfg.validate()?;
    let start = Instant::now();
    let outcomes: Vec<Result<ReplicateResult>> =
        (0..reps).into_par_iter().map(|i| run_replicate(setting, n, cfg, opts, i)).collect();
    let failed = outcomes.iter().filter(|r| r.is_err()).count();
    if failed as f64 > opts.max_failure * reps as f64 {
        let last = outcomes.iter().rev().find_map(|r| r.as_ref().err()).unwrap().to_string();
        return Err(Error::StudyFailed { failed, total: reps, last });
    }
    let replicates: Vec<ReplicateResult> = outcomes.into_iter().flatten().collect();
    let z = normal::quantile(0.975);
    let col = |f: &dyn Fn(&ReplicateResult) -> f64| replicates.iter().map(f).collect::<Vec<f64>>();
    let ocol = |f: &dyn Fn(&ReplicateResult) -> Option<f64>| replicates.iter().map(f).collect::<Vec<_>>();
    let mut rows = vec![summarize("PTE", Some(truth.pte), &col(&|r| r.pte_cv), &ocol(&|r| r.pte_se), z)];
    for (j, &nb) in opts.n_bars.iter().enumerate() {
        let t = truth.rp.iter().find(|(m, _)| *m == nb).map(|p| p.1);
        rows.push(summarize(&format!("RP({nb})"), t, &col(&|r| r.rp_cv[j]), &ocol(&|r| r.rp_se[j]), z));
    }
    if opts.comparators {
        let f: Vec<f64> = replicates.iter().filter_map(|r| r.pte_f).collect();
        if !f.is_empty() {
            rows.push(summarize("PTE_F", None, &f, &vec![None; f.len()], z));
        }
    }
    Ok(StudySummary {
        setting: setting.clone(),
        n,
        reps,
        failed,
        rows,
        nonempty_d0: replicates.iter().filter(|r| r.orientation != Orientation::D0Empty).count(),
        truth: truth.clone(),
        replicates,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

impl StudySummary {
    /// Table with one row per estimand: True, Est, ESE, ASE, CP.
    pub fn to_markdown(&self) -> String {
        let f = |v: Option<f64>| v.map_or("–".to_string(), |x| format!("{x:.3}"));
        let mut out = format!(
            "Setting {} (n = {}, {} replicates, {} failed)\n\n| Estimand | True | Est | ESE | ASE | CP |\n|---|---|---|---|---|---|\n",
            self.setting.id, self.n, self.reps, self.failed
        );
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {:.3} | {:.3} | {} | {} |\n",
                r.estimand,
                f(r.truth),
                r.est,
                r.ese,
                f(r.ase),
                f(r.cp)
            ));
        }
        out.push_str(&format!(
            "\nNonempty D0 branch in {} of {} replicates.\n",
            self.nonempty_d0,
            self.replicates.len()
        ));
        if self.rows.iter().any(|r| r.estimand == "PTE_F") {
            out.push_str("PTE_F uses linear least squares for Y on A and S.\n");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_setting_is_rejected() {
        assert!(matches!(SimulationSetting::benchmark(6, None), Err(Error::InvalidParameters(_))));
        assert!(matches!(
            SimulationSetting::benchmark(1, Some(-1.0)).unwrap().validate(),
            Err(Error::InvalidParameters(_))
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let s = SimulationSetting::benchmark(2, None).unwrap();
        assert_eq!(generate(&s, 300, 5).unwrap(), generate(&s, 300, 5).unwrap());
        assert_ne!(generate(&s, 300, 5).unwrap(), generate(&s, 300, 6).unwrap());
    }

    #[test]
    fn gamma_mean_and_binary_outcomes() {
        let s = SimulationSetting::benchmark(1, None).unwrap();
        let t = generate_with_potentials(&s, 200_000, 1).unwrap();
        let s1: Vec<f64> = t.potentials.iter().map(|p| p.s1).collect();
        let se = sample_sd(&s1) / (s1.len() as f64).sqrt();
        assert!((mean(&s1) - 4.0).abs() < 4.0 * se);
        for k in 1..=4 {
            let d = generate(&SimulationSetting::benchmark(k, None).unwrap(), 2000, 2).unwrap();
            assert!(d.records().iter().all(|r| r.y == 0.0 || r.y == 1.0));
        }
    }

    #[test]
    fn observed_values_come_from_the_assigned_arm() {
        let t = generate_with_potentials(&SimulationSetting::benchmark(5, None).unwrap(), 500, 3).unwrap();
        for (r, p) in t.dataset.records().iter().zip(&t.potentials) {
            let (y, s) = if r.a == 1 { (p.y1, p.s1) } else { (p.y0, p.s0) };
            assert_eq!((r.y, r.s), (y, s));
        }
        let arm1 = t.dataset.n1() as f64 / 500.0;
        assert!((arm1 - 0.5).abs() < 0.1);
    }

    #[test]
    fn correlated_normal_surrogates() {
        let t = generate_with_potentials(&SimulationSetting::benchmark(5, None).unwrap(), 100_000, 4).unwrap();
        let s1: Vec<f64> = t.potentials.iter().map(|p| p.s1).collect();
        let s0: Vec<f64> = t.potentials.iter().map(|p| p.s0).collect();
        let (m1, m0) = (mean(&s1), mean(&s0));
        let cov = s1.iter().zip(&s0).map(|(a, b)| (a - m1) * (b - m0)).sum::<f64>() / (s1.len() - 1) as f64;
        assert!((sample_sd(&s1).powi(2) - 2.0).abs() < 0.05);
        assert!((sample_sd(&s0).powi(2) - 1.0).abs() < 0.03);
        assert!((cov - 1.0).abs() < 0.03);
    }

    /// E exp(−aX²) = (1 + 2aσ²)^(−1/2) exp(−aμ²/(1 + 2aσ²)) for X ~ N(μ, σ²).
    fn gauss_quad(a: f64, mu: f64, var: f64) -> f64 {
        let d = 1.0 + 2.0 * a * var;
        d.powf(-0.5) * (-a * mu * mu / d).exp()
    }

    #[test]
    fn setting_five_means() {
        let s = SimulationSetting::benchmark(5, None).unwrap();
        let mu1 = (-1.0f64).exp() * gauss_quad(0.1, 5.0, 2.0);
        let mu0 = (-4.0f64).exp() * gauss_quad(0.1, 5.0, 1.0);
        assert!((mu1 - 0.052_133_35).abs() < 1e-8 && (mu0 - 0.002_081_9).abs() < 1e-7);
        let truth = population_truth(&s, &[], 1.96).unwrap();
        assert!((truth.mu1 - mu1).abs() < 1e-10 && (truth.mu0 - mu0).abs() < 1e-10);
        assert!((truth.delta - 0.0501).abs() < 1e-4);

        let t = generate_with_potentials(&s, 1_000_000, 9).unwrap();
        let y1: Vec<f64> = t.potentials.iter().map(|p| p.y1).collect();
        let y0: Vec<f64> = t.potentials.iter().map(|p| p.y0).collect();
        let n = y1.len() as f64;
        assert!((mean(&y1) - mu1).abs() < 3.0 * (mu1 * (1.0 - mu1) / n).sqrt());
        assert!((mean(&y0) - mu0).abs() < 3.0 * (mu0 * (1.0 - mu0) / n).sqrt());
    }

    #[test]
    fn threshold_outcome_matches_conditional_mean() {
        let s = SimulationSetting::benchmark(2, None).unwrap();
        let t = generate_with_potentials(&s, 400_000, 10).unwrap();
        let y1: Vec<f64> = t.potentials.iter().map(|p| p.y1).collect();
        let truth = population_truth(&s, &[], 1.96).unwrap();
        let n = y1.len() as f64;
        assert!((mean(&y1) - truth.mu1).abs() < 4.0 * (truth.mu1 * (1.0 - truth.mu1) / n).sqrt());
    }

    #[test]
    fn perfect_surrogate_truth() {
        let s = SimulationSetting::perfect_surrogate();
        let truth = population_truth(&s, &[50], 1.96).unwrap();
        assert!(truth.lambda.abs() < 1e-12);
        assert!((truth.pte - 1.0).abs() < 1e-9);
        // g = m, so RP depends only on σ/σ_g.
        let ratio = (truth.sigma2 / truth.sigma2_g).sqrt();
        let expect =
            relative_power(truth.delta / truth.sigma2.sqrt() * ratio, truth.delta / truth.sigma2.sqrt(), 50, 50, 1.96);
        assert!((truth.rp[0].1 - expect).abs() < 1e-12);
        assert!(truth.rp[0].1 > 1.0);
    }

    #[test]
    fn constraint_and_pte_bound_hold_in_every_setting() {
        for k in 1..=5 {
            let truth = population_truth(&SimulationSetting::benchmark(k, None).unwrap(), &[50], 1.96).unwrap();
            assert!(truth.constraint_residual.abs() < 1e-8, "setting {k}: {}", truth.constraint_residual);
            assert!(truth.delta - truth.delta_g >= -1e-8, "setting {k}");
        }
    }

    #[test]
    fn setting_four_uses_d0_and_reference_gap_formula() {
        let truth = population_truth(&SimulationSetting::benchmark(4, None).unwrap(), &[], 1.96).unwrap();
        assert_eq!(truth.orientation, Orientation::D0Above);
        assert!(truth.c.is_some() && truth.k1 > 0.0);
        assert!(truth.reference_gap_formula.abs() > 1e-3);
        assert!((truth.reference_gap - truth.reference_gap_formula).abs() < 1e-6);
        for k in [1, 2, 3, 5] {
            let t = population_truth(&SimulationSetting::benchmark(k, None).unwrap(), &[], 1.96).unwrap();
            assert_eq!(t.orientation, Orientation::D0Empty);
            assert!(t.reference_gap.abs() < 1e-8);
        }
    }

    #[test]
    fn default_thresholds_reproduce_targets() {
        let pte = |k: u8| population_truth(&SimulationSetting::benchmark(k, None).unwrap(), &[], 1.96).unwrap().pte;
        assert!((pte(1) - 0.657).abs() < 1e-3);
        assert!((pte(4) - 0.772).abs() < 1e-3);
    }

    #[test]
    fn calibration_inverts_truth() {
        let s = SimulationSetting::benchmark(1, None).unwrap();
        let t = calibrate_t(&s, 0.6, 0.2, 8.0).unwrap();
        let got = population_truth(&s.with_t(t), &[], 1.96).unwrap().pte;
        assert!((got - 0.6).abs() < 1e-6);
        assert!(matches!(
            calibrate_t(&SimulationSetting::benchmark(1, None).unwrap(), 5.0, 0.2, 8.0),
            Err(Error::Calibration(_))
        ));
        assert!(matches!(
            calibrate_t(&SimulationSetting::benchmark(5, None).unwrap(), 0.3, 0.2, 8.0),
            Err(Error::InvalidParameters(_))
        ));
    }

    #[test]
    fn oracle_agrees_with_closed_form() {
        for k in [1, 4] {
            let d = oracle_agreement(&SimulationSetting::benchmark(k, None).unwrap(), 2048).unwrap();
            assert!(d < 1e-6, "setting {k}: {d}");
        }
    }

    #[test]
    fn empty_study_is_an_error() {
        let s = SimulationSetting::benchmark(1, None).unwrap();
        let truth = population_truth(&s, &[50], 1.96).unwrap();
        let err = run_study(&s, 0, 100, &AnalysisConfig::default(), &truth, &StudyOptions::default());
        assert!(matches!(err, Err(Error::InvalidParameters(_))));
    }

    #[test]
    fn small_study_summary() {
        let s = SimulationSetting::benchmark(4, None).unwrap();
        let truth = population_truth(&s, &[50], 1.96).unwrap();
        let cfg = AnalysisConfig { resample_count: 20, ..Default::default() };
        let opts = StudyOptions { n_bars: vec![50], ..Default::default() };
        let sum = run_study(&s, 4, 600, &cfg, &truth, &opts).unwrap();
        assert_eq!(sum.replicates.len() + sum.failed, 4);
        assert_eq!(sum.rows.len(), 3);
        for r in &sum.rows {
            assert!(r.ese >= 0.0);
            if let Some(cp) = r.cp {
                assert!((0.0..=1.0).contains(&cp));
            }
        }
        let md = sum.to_markdown();
        assert!(md.contains("| PTE |") && md.contains("RP(50)") && md.contains("Nonempty D0"));
        let again = run_study(&s, 4, 600, &cfg, &truth, &opts).unwrap();
        assert_eq!(sum.replicates, again.replicates);
    }
}
