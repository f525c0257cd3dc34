//! Estimation of an optimal surrogate-marker transformation from two-arm trial
//! data, the proportion of treatment effect it explains, and the relative power
//! of testing on the transformed surrogate instead of the primary outcome.
//!
//! The pipeline is: [`data`] → [`transform`] (kernel curves, support partition,
//! closed-form ĝ) → [`effects`] (means, influence variances, PTE, diagnostics)
//! → [`power`] (RP and sample-size design), with [`resample`] supplying
//! perturbation standard errors and cross-validated estimates. [`simulate`]
//! generates benchmark trials with known truth.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod comparators;
pub mod data;
pub mod effects;
pub mod error;
pub mod kernel;
pub mod normal;
pub mod numeric;
pub mod power;
pub mod resample;
pub mod simulate;
pub mod transform;

pub use analysis::{analyze, AnalysisReport};
pub use comparators::{pte_freedman, FreedmanFit};
pub use data::{AnalysisConfig, ColumnMap, Field, MissingPolicy, TrialDataset, TrialRecord};
pub use effects::{pte, surrogate_effect, treatment_effect, EffectEstimate, SurrogacyDiagnostics};
pub use error::{Error, ErrorClass, Result};
pub use kernel::{bandwidth, density_ratio, kde, nw_regress, BandwidthRule, KernelConfig};
pub use power::{power, relative_power, solve_sample_size, DesignResult, DesignTarget};
pub use resample::{CvPlan, PerturbationScheme, ResampleReport};
pub use simulate::{SimulationSetting, StudySummary};
pub use transform::{estimate_partition, CurveSet, GTransform, SupportPartition, TransformEstimate, TransformFitter};
