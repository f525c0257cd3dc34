//! Treatment effects on Y and on g(S), influence-function variances, PTE and
//! the surrogacy diagnostics.

use serde::{Deserialize, Serialize};

use crate::data::TrialDataset;
use crate::error::{Error, Result};
use crate::kernel::{bandwidth, KernelConfig};
use crate::numeric::trapezoid;
use crate::transform::{CurveSet, LagrangeSolution, RegionIndex, SupportPartition};

/// Difference in arm means with per-subject influence values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmContrast {
    pub delta: f64,
    pub sigma2: f64,
    pub mu0: f64,
    pub mu1: f64,
    pub psi: Vec<f64>,
}

/// Weighted arm-mean contrast of `values`.
///
/// ψ_i = (W / W_{A_i})(v_i − μ_{A_i})(2A_i − 1) and σ² = Σ w ψ² / W, where W
/// sums the weights over everyone and W_a over arm a. Subjects with
/// `include[i] == false` are dropped and receive ψ_i = 0.
pub fn contrast(values: &[f64], arms: &[u8], weights: Option<&[f64]>, include: Option<&[bool]>) -> ArmContrast {
    let n = values.len();
    let w = |i: usize| weights.map_or(1.0, |w| w[i]) * include.map_or(1.0, |m| m[i] as u8 as f64);
    let mut tot = [0.0; 2];
    let mut sum = [0.0; 2];
    for i in 0..n {
        let a = arms[i] as usize;
        tot[a] += w(i);
        sum[a] += w(i) * values[i];
    }
    let mu = [sum[0] / tot[0], sum[1] / tot[1]];
    let all = tot[0] + tot[1];
    let mut psi = vec![0.0; n];
    let mut ss = 0.0;
    for i in 0..n {
        if w(i) == 0.0 {
            continue;
        }
        let a = arms[i] as usize;
        let sign = if a == 1 { 1.0 } else { -1.0 };
        psi[i] = all / tot[a] * (values[i] - mu[a]) * sign;
        ss += w(i) * psi[i] * psi[i];
    }
    ArmContrast { delta: mu[1] - mu[0], sigma2: ss / all, mu0: mu[0], mu1: mu[1], psi }
}

fn arms(dataset: &TrialDataset) -> Vec<u8> {
    dataset.records().iter().map(|r| r.a).collect()
}

/// Δ̂, σ̂² and ψ̂ for the primary outcome.
pub fn treatment_effect(dataset: &TrialDataset) -> ArmContrast {
    let y: Vec<f64> = dataset.records().iter().map(|r| r.y).collect();
    contrast(&y, &arms(dataset), None, None)
}

/// Values of `g` at every subject's surrogate; `None` marks subjects outside
/// the transform's support.
pub fn transformed(dataset: &TrialDataset, g: impl Fn(f64) -> Option<f64>) -> Vec<Option<f64>> {
    dataset.records().iter().map(|r| g(r.s)).collect()
}

/// Δ̂_g, σ̂²_g and ψ̂_g with Y replaced by g(S). Subjects where `g` is
/// undefined are excluded; more than `cap` of them is an error.
pub fn surrogate_effect(
    dataset: &TrialDataset,
    g: impl Fn(f64) -> Option<f64>,
    weights: Option<&[f64]>,
    cap: f64,
) -> Result<(ArmContrast, usize)> {
    let gv = transformed(dataset, g);
    let excluded = gv.iter().filter(|v| v.is_none()).count();
    if excluded as f64 > cap * dataset.len() as f64 {
        return Err(Error::TooManyExcluded { excluded, total: dataset.len() });
    }
    let include: Vec<bool> = gv.iter().map(Option::is_some).collect();
    let values: Vec<f64> = gv.iter().map(|v| v.unwrap_or(0.0)).collect();
    Ok((contrast(&values, &arms(dataset), weights, Some(&include)), excluded))
}

/// Joint point estimates for Y and g(S).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub delta: f64,
    pub delta_g: f64,
    pub sigma2: f64,
    pub sigma2_g: f64,
    pub mu0: f64,
    pub mu1: f64,
    pub mu_g0: f64,
    pub mu_g1: f64,
    pub psi: Vec<f64>,
    pub psi_g: Vec<f64>,
    pub excluded: usize,
}

impl EffectEstimate {
    pub fn from_parts(y: ArmContrast, g: ArmContrast, excluded: usize) -> Self {
        Self {
            delta: y.delta,
            delta_g: g.delta,
            sigma2: y.sigma2,
            sigma2_g: g.sigma2,
            mu0: y.mu0,
            mu1: y.mu1,
            mu_g0: g.mu0,
            mu_g1: g.mu1,
            psi: y.psi,
            psi_g: g.psi,
            excluded,
        }
    }

    /// Standardized effect sizes (Δ/σ, Δ_g/σ_g).
    pub fn effect_sizes(&self) -> (f64, f64) {
        (self.delta / self.sigma2.sqrt(), self.delta_g / self.sigma2_g.sqrt())
    }
}

pub fn estimate_effects(dataset: &TrialDataset, g: impl Fn(f64) -> Option<f64>, cap: f64) -> Result<EffectEstimate> {
    let y = treatment_effect(dataset);
    let (gc, excluded) = surrogate_effect(dataset, g, None, cap)?;
    Ok(EffectEstimate::from_parts(y, gc, excluded))
}

/// PTE = Δ_g / Δ.
pub fn pte(delta_g: f64, delta: f64) -> f64 {
    delta_g / delta
}

/// PTE, refused when |Δ̂| / (σ̂/√n) falls below `min_z`.
pub fn checked_pte(est: &EffectEstimate, n: usize, min_z: f64) -> Result<f64> {
    let z = est.delta.abs() / (est.sigma2.sqrt() / (n as f64).sqrt());
    if !(z >= min_z) {
        return Err(Error::NullPrimaryEffect { z });
    }
    Ok(pte(est.delta_g, est.delta))
}

/// Empirical check of (C1) S1(u) ≥ S0(u) and (C2) M1(u) ≥ M0(u) for u = g(S).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub u_grid: Vec<f64>,
    /// P̂{g(S) > u | A = a}.
    pub survival0: Vec<f64>,
    pub survival1: Vec<f64>,
    /// Ê{Y | g(S) = u, A = a} on the common support of g(S), else absent.
    pub mean0: Vec<Option<f64>>,
    pub mean1: Vec<Option<f64>>,
    pub noise_band: f64,
    pub c1_holds: bool,
    /// Largest excess of S0 − S1 beyond the noise band (0 if none).
    pub c1_max_violation: f64,
    pub c2_holds: bool,
    pub c2_max_violation: f64,
    pub bandwidth: f64,
}

const U_POINTS: usize = 128;

/// Survival curves and kernel regressions of Y on u = g(S) per arm, with
/// verdicts allowing `noise_band` pointwise standard errors.
pub fn check_conditions(
    dataset: &TrialDataset,
    g: impl Fn(f64) -> Option<f64>,
    c0: f64,
    noise_band: f64,
) -> ConditionCheck {
    let mut u: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut y: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for r in dataset.records() {
        if let Some(v) = g(r.s) {
            u[r.a as usize].push(v);
            y[r.a as usize].push(r.y);
        }
    }
    let pooled: Vec<f64> = u[0].iter().chain(&u[1]).copied().collect();
    let lo = pooled.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = pooled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let u_grid: Vec<f64> = if hi > lo {
        (0..U_POINTS).map(|k| lo + (hi - lo) * k as f64 / (U_POINTS - 1) as f64).collect()
    } else {
        vec![lo]
    };
    let h = bandwidth(&pooled, c0).unwrap_or(1.0);
    let kc = KernelConfig::gaussian(h).unwrap();

    let sorted: [Vec<f64>; 2] = [0, 1].map(|a| crate::numeric::sorted(&u[a]));
    let survival = |a: usize, t: f64| {
        let s = &sorted[a];
        (s.len() - s.partition_point(|&v| v <= t)) as f64 / s.len() as f64
    };
    let survival0: Vec<f64> = u_grid.iter().map(|&t| survival(0, t)).collect();
    let survival1: Vec<f64> = u_grid.iter().map(|&t| survival(1, t)).collect();
    let (n0, n1) = (u[0].len() as f64, u[1].len() as f64);
    let mut c1_max_violation: f64 = 0.0;
    for k in 0..u_grid.len() {
        let p = (n0 * survival0[k] + n1 * survival1[k]) / (n0 + n1);
        let se = (p * (1.0 - p) * (1.0 / n0 + 1.0 / n1)).sqrt();
        c1_max_violation = c1_max_violation.max(survival0[k] - survival1[k] - noise_band * se);
    }

    let common = match (sorted[0].first(), sorted[1].first()) {
        (Some(&a), Some(&b)) => (a.max(b), sorted[0][sorted[0].len() - 1].min(sorted[1][sorted[1].len() - 1])),
        _ => (f64::INFINITY, f64::NEG_INFINITY),
    };
    // Kernel regression with its pointwise variance Σ K²(Y − M)² / (Σ K)².
    let regress = |a: usize, t: f64| -> Option<(f64, f64)> {
        let (mut sk, mut sky) = (0.0, 0.0);
        for (&ui, &yi) in u[a].iter().zip(&y[a]) {
            let k = kc.weight(ui - t);
            sk += k;
            sky += k * yi;
        }
        if sk < 1e-300 {
            return None;
        }
        let m = sky / sk;
        let v: f64 = u[a].iter().zip(&y[a]).map(|(&ui, &yi)| (kc.weight(ui - t) * (yi - m)).powi(2)).sum();
        Some((m, v / (sk * sk)))
    };
    let mut mean0 = Vec::with_capacity(u_grid.len());
    let mut mean1 = Vec::with_capacity(u_grid.len());
    let mut c2_max_violation: f64 = 0.0;
    for &t in &u_grid {
        let inside = t >= common.0 && t <= common.1;
        let (r0, r1) = if inside { (regress(0, t), regress(1, t)) } else { (None, None) };
        if let (Some((m0, v0)), Some((m1, v1))) = (r0, r1) {
            c2_max_violation = c2_max_violation.max(m0 - m1 - noise_band * (v0 + v1).sqrt());
        }
        mean0.push(r0.map(|p| p.0));
        mean1.push(r1.map(|p| p.0));
    }
    ConditionCheck {
        u_grid,
        survival0,
        survival1,
        mean0,
        mean1,
        noise_band,
        c1_holds: c1_max_violation <= 0.0,
        c1_max_violation,
        c2_holds: c2_max_violation <= 0.0,
        c2_max_violation,
        bandwidth: h,
    }
}

/// The reference law under which PTE coincides with the landmark-style
/// PTE_L, and the gap Δ_g − Δ_L between the two effect definitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDistribution {
    pub grid: Vec<f64>,
    /// F_new(s) = C ∫_{D_c} I(v ≤ s) f0(v) dv with C = ∫_{D_c} f0 / (K2 + K1 r(s*)).
    pub f_new: Vec<f64>,
    pub scale: f64,
    pub delta_g: f64,
    pub delta_l: f64,
    pub delta_l_gap: f64,
}

/// Condition checks and the reference-distribution gap, reported together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogacyDiagnostics {
    pub conditions: ConditionCheck,
    pub reference: ReferenceDistribution,
}

pub fn reference_distribution(
    curves: &CurveSet,
    partition: &SupportPartition,
    sol: &LagrangeSolution,
) -> ReferenceDistribution {
    let x = &curves.grid;
    let idx = RegionIndex::new(x, partition);
    let (ca, cb) = idx.common;
    let r_star = idx.s_star.and_then(|j| curves.r[j]).unwrap_or(0.0);
    let mass_c = trapezoid(x, &curves.f0, ca, cb);
    let scale = mass_c / (sol.k2 + sol.k1 * r_star);

    let mut f_new = vec![0.0; x.len()];
    for j in 0..x.len() {
        f_new[j] = if j <= ca {
            0.0
        } else {
            f_new[j - 1]
                + if j <= cb { 0.5 * (x[j] - x[j - 1]) * (curves.f0[j] + curves.f0[j - 1]) * scale } else { 0.0 }
        };
    }

    let prod =
        |m: &[Option<f64>], f: &[f64]| -> Vec<f64> { m.iter().zip(f).map(|(v, fv)| v.unwrap_or(0.0) * fv).collect() };
    let (o1a, o1b) = idx.omega1;
    let (o0a, o0b) = idx.omega0;
    let mu1 = trapezoid(x, &prod(&curves.m1, &curves.f1), o1a, o1b);
    let mu0 = trapezoid(x, &prod(&curves.m0, &curves.f0), o0a, o0b);
    let m1c = trapezoid(x, &prod(&curves.m1, &curves.f0), ca, cb);
    let m0c = trapezoid(x, &prod(&curves.m0, &curves.f0), ca, cb);
    let delta_l = (mu1 - scale * m1c) - (mu0 - scale * m0c);

    let g = crate::transform::g_on_grid(curves, partition, sol);
    let g1: Vec<f64> = g.iter().zip(&curves.f1).map(|(a, b)| a * b).collect();
    let g0: Vec<f64> = g.iter().zip(&curves.f0).map(|(a, b)| a * b).collect();
    let delta_g = trapezoid(x, &g1, o1a, o1b) - trapezoid(x, &g0, o0a, o0b);
    ReferenceDistribution { grid: x.clone(), f_new, scale, delta_g, delta_l, delta_l_gap: delta_g - delta_l }
}
