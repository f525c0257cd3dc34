//! Perturbation resampling and K-fold cross-validated PTE / RP estimates.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AnalysisConfig, TrialDataset};
use crate::effects::contrast;
use crate::error::{Error, Result};
use crate::normal;
use crate::numeric::{quantile_sorted, sample_sd, sorted};
use crate::power::{relative_power, EffectSizeDraws};
use crate::transform::{GTransform, TransformFitter};

/// Stream tags keeping independent uses of one base seed apart.
pub const TAG_PERTURB: u64 = 1;
pub const TAG_FOLDS: u64 = 2;
pub const TAG_STUDY: u64 = 3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `index` of kind `tag` under `base`.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(base) ^ tag) ^ index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightLaw {
    ExponentialMeanOne,
    /// Every weight is 1; replicates reproduce the point estimate.
    Unit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationScheme {
    pub law: WeightLaw,
    pub replicates: usize,
    pub base_seed: u64,
    /// Largest tolerated fraction of failed replicates.
    pub max_failure: f64,
}

impl PerturbationScheme {
    pub fn new(replicates: usize, base_seed: u64) -> Self {
        Self { law: WeightLaw::ExponentialMeanOne, replicates, base_seed, max_failure: 0.05 }
    }

    /// Weights of replicate `b` for `n` subjects.
    pub fn weights(&self, b: usize, n: usize) -> Vec<f64> {
        match self.law {
            WeightLaw::Unit => vec![1.0; n],
            WeightLaw::ExponentialMeanOne => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.base_seed, TAG_PERTURB, b as u64));
                (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    Normal,
    Percentile,
    NormalOneSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lo: f64,
    /// Absent for one-sided lower bounds.
    pub hi: Option<f64>,
    pub level: f64,
    pub method: CiMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleReport {
    pub point: f64,
    pub se: f64,
    pub ci_normal: ConfidenceInterval,
    pub ci_percentile: ConfidenceInterval,
    pub ci_lower_one_sided: ConfidenceInterval,
    /// Set when the point estimate falls outside the percentile interval.
    pub point_outside_percentile: bool,
    pub failed: usize,
    pub draws: Vec<f64>,
}

impl ResampleReport {
    pub fn from_draws(point: f64, draws: Vec<f64>, alpha: f64, failed: usize) -> Self {
        let se = sample_sd(&draws);
        let level = 1.0 - alpha;
        let z2 = normal::quantile(1.0 - alpha / 2.0);
        let z1 = normal::quantile(1.0 - alpha);
        let s = sorted(&draws);
        let (plo, phi) = if s.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (quantile_sorted(&s, alpha / 2.0), quantile_sorted(&s, 1.0 - alpha / 2.0))
        };
        Self {
            point,
            se,
            ci_normal: ConfidenceInterval {
                lo: point - z2 * se,
                hi: Some(point + z2 * se),
                level,
                method: CiMethod::Normal,
            },
            ci_percentile: ConfidenceInterval { lo: plo, hi: Some(phi), level, method: CiMethod::Percentile },
            ci_lower_one_sided: ConfidenceInterval {
                lo: point - z1 * se,
                hi: None,
                level,
                method: CiMethod::NormalOneSided,
            },
            point_outside_percentile: !(point >= plo && point <= phi),
            failed,
            draws,
        }
    }

    pub fn covers(&self, truth: f64) -> bool {
        truth >= self.ci_normal.lo && truth <= self.ci_normal.hi.unwrap()
    }
}

/// Replicate outputs of a vector-valued estimator, in replicate order.
/// Failed replicates are dropped; more than `scheme.max_failure` of them is an
/// error.
pub fn perturb_raw<F>(n: usize, estimator: F, scheme: &PerturbationScheme) -> Result<(Vec<Vec<f64>>, usize)>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let results: Vec<Result<Vec<f64>>> =
        (0..scheme.replicates).into_par_iter().map(|b| estimator(&scheme.weights(b, n))).collect();
    let failed = results.iter().filter(|r| r.is_err()).count();
    if failed as f64 > scheme.max_failure * scheme.replicates as f64 {
        return Err(Error::EstimatorFailure { failed, total: scheme.replicates });
    }
    Ok((results.into_iter().flatten().collect(), failed))
}

/// Perturbation reports for each output of a vector-valued estimator.
pub fn perturb_estimates<F>(
    n: usize,
    point: &[f64],
    estimator: F,
    scheme: &PerturbationScheme,
    alpha: f64,
) -> Result<Vec<ResampleReport>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let (reps, failed) = perturb_raw(n, estimator, scheme)?;
    Ok((0..point.len())
        .map(|k| ResampleReport::from_draws(point[k], reps.iter().map(|r| r[k]).collect(), alpha, failed))
        .collect())
}

/// Perturbation report for a scalar estimator taking per-subject weights.
pub fn perturb_estimate<F>(
    dataset: &TrialDataset,
    estimator: F,
    scheme: &PerturbationScheme,
    alpha: f64,
) -> Result<ResampleReport>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let n = dataset.len();
    let point = estimator(&vec![1.0; n])?;
    let mut reports = perturb_estimates(n, &[point], |w| estimator(w).map(|v| vec![v]), scheme, alpha)?;
    Ok(reports.remove(0))
}

/// Arm-stratified assignment of records to K folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    pub k: usize,
    pub seed: u64,
    pub fold_of: Vec<usize>,
}

impl CvPlan {
    /// Shuffles each arm and deals its records round-robin, continuing the
    /// deal across arms so fold sizes differ by at most one overall and per arm.
    pub fn new(dataset: &TrialDataset, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_FOLDS, k as u64));
        let mut fold_of = vec![0; dataset.len()];
        let mut next = 0;
        for arm in [0u8, 1] {
            let mut rows: Vec<usize> =
                dataset.records().iter().enumerate().filter(|(_, r)| r.a == arm).map(|(i, _)| i).collect();
            rows.shuffle(&mut rng);
            for i in rows {
                fold_of[i] = next % k;
                next += 1;
            }
        }
        Self { k, seed, fold_of }
    }

    pub fn fold(&self, k: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == k).collect()
    }

    pub fn complement(&self, k: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != k).collect()
    }
}

enum FoldTransform {
    Fitted(Box<TransformFitter>),
    Fixed(GTransform),
}

struct FoldModel {
    train: Vec<usize>,
    test: Vec<usize>,
    transform: FoldTransform,
}

/// One evaluation of the cross-validated estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    /// Σ_k Δ̂_g⁽⁻ᵏ⁾ / Σ_k Δ̂⁽⁻ᵏ⁾: fold-averaged effects, then their ratio.
    pub pte: f64,
    /// Fold averages of RP̂⁽⁻ᵏ⁾(n̄).
    pub rp: Vec<f64>,
    pub fold_pte: Vec<f64>,
    /// Held-out (Δ/σ, Δ_g/σ_g) per fold.
    pub effect_sizes: Vec<(f64, f64)>,
    /// Held-out subjects beyond their fold's transform support, evaluated at
    /// the nearest boundary value.
    pub clamped: usize,
}

/// Cross-validated estimator: ĝ from fold k, effects on its complement.
pub struct CvEstimator {
    folds: Vec<FoldModel>,
    y: Vec<f64>,
    s: Vec<f64>,
    arms: Vec<u8>,
    n_bars: Vec<u64>,
    z: f64,
}

impl CvEstimator {
    pub fn new(dataset: &TrialDataset, plan: &CvPlan, cfg: &AnalysisConfig, n_bars: &[u64]) -> Result<Self> {
        let mut folds = Vec::with_capacity(plan.k);
        for k in 0..plan.k {
            let train = plan.fold(k);
            let test = plan.complement(k);
            for part in [&train, &test] {
                for arm in [0u8, 1] {
                    let count = part.iter().filter(|&&i| dataset.records()[i].a == arm).count();
                    if count < cfg.min_fold_arm {
                        return Err(Error::FoldTooSmall { fold: k, arm, count, min: cfg.min_fold_arm });
                    }
                }
            }
            let fitter = TransformFitter::new(&dataset.subset(&train)?, cfg)?;
            folds.push(FoldModel { train, test, transform: FoldTransform::Fitted(Box::new(fitter)) });
        }
        Ok(Self::assemble(dataset, folds, n_bars, cfg.critical_z))
    }

    /// Every fold uses the same externally supplied transform.
    pub fn with_fixed_transform(dataset: &TrialDataset, plan: &CvPlan, g: &GTransform, n_bars: &[u64], z: f64) -> Self {
        let folds = (0..plan.k)
            .map(|k| FoldModel {
                train: plan.fold(k),
                test: plan.complement(k),
                transform: FoldTransform::Fixed(g.clone()),
            })
            .collect();
        Self::assemble(dataset, folds, n_bars, z)
    }

    fn assemble(dataset: &TrialDataset, folds: Vec<FoldModel>, n_bars: &[u64], z: f64) -> Self {
        let r = dataset.records();
        Self {
            folds,
            y: r.iter().map(|v| v.y).collect(),
            s: r.iter().map(|v| v.s).collect(),
            arms: r.iter().map(|v| v.a).collect(),
            n_bars: n_bars.to_vec(),
            z,
        }
    }

    pub fn n_bars(&self) -> &[u64] {
        &self.n_bars
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Training-fold transforms under the given weights.
    pub fn fold_transforms(&self, weights: Option<&[f64]>) -> Result<Vec<GTransform>> {
        self.folds
            .iter()
            .map(|f| match &f.transform {
                FoldTransform::Fixed(g) => Ok(g.clone()),
                FoldTransform::Fitted(fitter) => {
                    let w: Option<Vec<f64>> = weights.map(|w| f.train.iter().map(|&i| w[i]).collect());
                    Ok(fitter.fit(w.as_deref())?.transform())
                }
            })
            .collect()
    }

    pub fn evaluate(&self, weights: Option<&[f64]>) -> Result<CvOutcome> {
        let transforms = self.fold_transforms(weights)?;
        let k = self.folds.len() as f64;
        let mut out = CvOutcome {
            pte: 0.0,
            rp: vec![0.0; self.n_bars.len()],
            fold_pte: Vec::new(),
            effect_sizes: Vec::new(),
            clamped: 0,
        };
        let (mut num, mut den) = (0.0, 0.0);
        for (fold, g) in self.folds.iter().zip(&transforms) {
            let y: Vec<f64> = fold.test.iter().map(|&i| self.y[i]).collect();
            let arms: Vec<u8> = fold.test.iter().map(|&i| self.arms[i]).collect();
            let gv: Vec<f64> = fold
                .test
                .iter()
                .map(|&i| {
                    let (v, clamped) = g.evaluate_clamped(self.s[i]);
                    out.clamped += clamped as usize;
                    v
                })
                .collect();
            let w: Option<Vec<f64>> = weights.map(|w| fold.test.iter().map(|&i| w[i]).collect());
            let cy = contrast(&y, &arms, w.as_deref(), None);
            let cg = contrast(&gv, &arms, w.as_deref(), None);
            let (ey, eg) = (cy.delta / cy.sigma2.sqrt(), cg.delta / cg.sigma2.sqrt());
            num += cg.delta;
            den += cy.delta;
            out.fold_pte.push(cg.delta / cy.delta);
            for (acc, &nb) in out.rp.iter_mut().zip(&self.n_bars) {
                *acc += relative_power(eg, ey, nb, nb, self.z) / k;
            }
            out.effect_sizes.push((ey, eg));
        }
        out.pte = num / den;
        Ok(out)
    }
}

/// Cross-validated PTE and RP(n̄) with perturbation standard errors; the fold
/// partition, grids and bandwidths stay fixed across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub pte: ResampleReport,
    pub rp: Vec<(u64, ResampleReport)>,
    pub clamped: usize,
    pub effect_size_draws: EffectSizeDraws,
}

pub fn cv_estimate(estimator: &CvEstimator, n: usize, scheme: &PerturbationScheme, alpha: f64) -> Result<CvReport> {
    let point = estimator.evaluate(None)?;
    let flatten = |o: &CvOutcome| -> Vec<f64> {
        let mut v = vec![o.pte];
        v.extend(&o.rp);
        for &(ey, eg) in &o.effect_sizes {
            v.push(ey);
            v.push(eg);
        }
        v
    };
    let (reps, failed) = perturb_raw(n, |w| estimator.evaluate(Some(w)).map(|o| flatten(&o)), scheme)?;
    let column = |j: usize| reps.iter().map(|r| r[j]).collect::<Vec<f64>>();
    let m = estimator.n_bars.len();
    let pairs = |v: &[f64]| v[1 + m..].chunks(2).map(|c| (c[0], c[1])).collect::<Vec<_>>();
    Ok(CvReport {
        k: estimator.k(),
        pte: ResampleReport::from_draws(point.pte, column(0), alpha, failed),
        rp: estimator
            .n_bars
            .iter()
            .enumerate()
            .map(|(j, &nb)| (nb, ResampleReport::from_draws(point.rp[j], column(1 + j), alpha, failed)))
            .collect(),
        clamped: point.clamped,
        effect_size_draws: EffectSizeDraws {
            point: point.effect_sizes.clone(),
            replicates: reps.iter().map(|r| pairs(r)).collect(),
        },
    })
}
