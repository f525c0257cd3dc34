//! End-to-end analysis of one trial dataset.

use serde::{Deserialize, Serialize};

use crate::comparators::{ComparatorRegistry, ComparatorResult};
use crate::data::{AnalysisConfig, TrialDataset};
use crate::effects::{
    check_conditions, checked_pte, contrast, estimate_effects, reference_distribution, SurrogacyDiagnostics,
};
use crate::error::Result;
use crate::power::EffectSizeDraws;
use crate::resample::{cv_estimate, perturb_estimate, CvEstimator, CvPlan, PerturbationScheme, ResampleReport};
use crate::transform::{fit_transform, GTransform, LagrangeSolution, SupportPartition};

/// Settings needed to reproduce a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub config: AnalysisConfig,
    pub bandwidth: f64,
    pub n: usize,
    pub n0: usize,
    pub n1: usize,
    pub n_bars: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSummary {
    pub lambda: f64,
    pub c: Option<f64>,
    pub k1: f64,
    pub k2: f64,
    pub partition: SupportPartition,
    pub continuity_gap: f64,
    /// Ω1 grid nodes where the density floor bound f̂1.
    pub floor_bound: usize,
    pub g: GTransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectsSummary {
    pub delta: f64,
    pub delta_g: f64,
    pub sigma: f64,
    pub sigma_g: f64,
    pub mu0: f64,
    pub mu1: f64,
    pub mu_g0: f64,
    pub mu_g1: f64,
    /// Full-sample PTE with ĝ fit and evaluated on the same data.
    pub pte_in_sample: f64,
    pub excluded: usize,
    /// Perturbation SE and intervals for Δ̂.
    pub delta_resampled: ResampleReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpRow {
    pub n_bar: u64,
    pub estimate: ResampleReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidated {
    pub k: usize,
    pub pte: ResampleReport,
    pub rp: Vec<RpRow>,
    /// Held-out subjects outside their fold's ĝ support.
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub config: ConfigEcho,
    pub transform: TransformSummary,
    pub effects: EffectsSummary,
    pub cross_validated: CrossValidated,
    pub diagnostics: SurrogacyDiagnostics,
    pub effect_size_draws: EffectSizeDraws,
    pub comparators: Option<Vec<ComparatorResult>>,
    pub warnings: Vec<String>,
}

/// Full pipeline: ĝ on all data, effects and diagnostics, then K-fold PTE and
/// RP(n̄) with perturbation standard errors.
pub fn analyze(
    dataset: &TrialDataset,
    cfg: &AnalysisConfig,
    n_bars: &[u64],
    with_comparators: bool,
) -> Result<AnalysisReport> {
    cfg.validate()?;
    let n = dataset.len();
    let fit = fit_transform(dataset, cfg)?;
    let g = fit.transform();
    let est = estimate_effects(dataset, |s| g.evaluate(s).ok(), cfg.exclusion_cap)?;
    let pte_in_sample = checked_pte(&est, n, cfg.null_effect_z)?;

    let scheme = PerturbationScheme::new(cfg.resample_count, cfg.seed);
    let y: Vec<f64> = dataset.records().iter().map(|r| r.y).collect();
    let arms: Vec<u8> = dataset.records().iter().map(|r| r.a).collect();
    let delta_resampled =
        perturb_estimate(dataset, |w| Ok(contrast(&y, &arms, Some(w), None).delta), &scheme, cfg.alpha)?;

    let plan = CvPlan::new(dataset, cfg.cv_folds, cfg.seed);
    let cv = CvEstimator::new(dataset, &plan, cfg, n_bars)?;
    let cvr = cv_estimate(&cv, n, &scheme, cfg.alpha)?;

    let sol = LagrangeSolution { lambda: fit.lambda, c: fit.c, k1: fit.k1, k2: fit.k2 };
    let diagnostics = SurrogacyDiagnostics {
        conditions: check_conditions(dataset, |s| g.evaluate(s).ok(), cfg.undersmooth_exponent, cfg.noise_band),
        reference: reference_distribution(&fit.curves, &fit.partition, &sol),
    };

    let mut warnings = Vec::new();
    if !diagnostics.conditions.c1_holds {
        warnings.push(format!(
            "survival dominance of g(S) fails beyond the noise band (max excess {:.4})",
            diagnostics.conditions.c1_max_violation
        ));
    }
    if !diagnostics.conditions.c2_holds {
        warnings.push(format!(
            "conditional mean dominance fails beyond the noise band (max excess {:.4})",
            diagnostics.conditions.c2_max_violation
        ));
    }
    if fit.curves.floor_bound > 0 {
        warnings.push(format!("density floor bound f1 at {} grid points", fit.curves.floor_bound));
    }
    if !fit.curves.excluded.is_empty() {
        warnings.push(format!("{} grid points had no kernel mass and were interpolated", fit.curves.excluded.len()));
    }
    if cvr.clamped > 0 {
        warnings
            .push(format!("{} held-out evaluations fell outside their fold's support and were clamped", cvr.clamped));
    }
    for r in std::iter::once(&cvr.pte).chain(cvr.rp.iter().map(|p| &p.1)) {
        if r.point_outside_percentile {
            warnings.push(format!("point estimate {:.4} lies outside its percentile interval", r.point));
            break;
        }
    }

    Ok(AnalysisReport {
        config: ConfigEcho {
            config: cfg.clone(),
            bandwidth: fit.bandwidth,
            n,
            n0: dataset.n0(),
            n1: dataset.n1(),
            n_bars: n_bars.to_vec(),
        },
        transform: TransformSummary {
            lambda: fit.lambda,
            c: fit.c,
            k1: fit.k1,
            k2: fit.k2,
            partition: fit.partition.clone(),
            continuity_gap: fit.continuity_gap(),
            floor_bound: fit.curves.floor_bound,
            g,
        },
        effects: EffectsSummary {
            delta: est.delta,
            delta_g: est.delta_g,
            sigma: est.sigma2.sqrt(),
            sigma_g: est.sigma2_g.sqrt(),
            mu0: est.mu0,
            mu1: est.mu1,
            mu_g0: est.mu_g0,
            mu_g1: est.mu_g1,
            pte_in_sample,
            excluded: est.excluded,
            delta_resampled,
        },
        cross_validated: CrossValidated {
            k: cvr.k,
            pte: cvr.pte,
            rp: cvr.rp.into_iter().map(|(n_bar, estimate)| RpRow { n_bar, estimate }).collect(),
            clamped: cvr.clamped,
        },
        diagnostics,
        effect_size_draws: cvr.effect_size_draws,
        comparators: with_comparators.then(|| ComparatorRegistry::default().run(dataset)),
        warnings,
    })
}
