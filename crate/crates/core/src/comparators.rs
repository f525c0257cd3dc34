//! Baseline PTE estimators for benchmarking.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::TrialDataset;
use crate::error::{Error, Result};

/// Regression-based PTE: the change in the treatment coefficient when S is
/// added to a linear model for Y. Linear OLS is used even for binary Y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreedmanFit {
    pub beta_a_marginal: f64,
    pub beta_a_adjusted: f64,
    pub pte_f: f64,
}

/// |β_A| below this in the marginal fit is treated as no effect.
pub const NULL_EFFECT_TOL: f64 = 1e-12;

fn ols(x: DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let xtx = x.transpose() * &x;
    // Condition check on the scaled Gram matrix.
    let d: Vec<f64> = (0..xtx.nrows()).map(|i| xtx[(i, i)].sqrt()).collect();
    if d.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::SingularDesign);
    }
    let scaled = DMatrix::from_fn(xtx.nrows(), xtx.ncols(), |i, j| xtx[(i, j)] / (d[i] * d[j]));
    let sv = scaled.singular_values();
    if sv.min() < 1e-10 * sv.max() {
        return Err(Error::SingularDesign);
    }
    let chol = xtx.cholesky().ok_or(Error::SingularDesign)?;
    Ok(chol.solve(&(x.transpose() * y)))
}

pub fn pte_freedman(dataset: &TrialDataset) -> Result<FreedmanFit> {
    let r = dataset.records();
    let n = r.len();
    let y = DVector::from_iterator(n, r.iter().map(|v| v.y));
    let marginal = ols(DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { r[i].a as f64 }), &y)?;
    let adjusted = ols(
        DMatrix::from_fn(n, 3, |i, j| match j {
            0 => 1.0,
            1 => r[i].a as f64,
            _ => r[i].s,
        }),
        &y,
    )?;
    let (bm, ba) = (marginal[1], adjusted[1]);
    if bm.abs() < NULL_EFFECT_TOL {
        return Err(Error::NullMarginalEffect);
    }
    Ok(FreedmanFit { beta_a_marginal: bm, beta_a_adjusted: ba, pte_f: 1.0 - ba / bm })
}

/// A PTE estimator that can be run next to the proposed one.
pub trait Comparator: Send + Sync {
    fn name(&self) -> &str;
    fn estimate(&self, dataset: &TrialDataset) -> Result<f64>;
}

pub struct Freedman;

impl Comparator for Freedman {
    fn name(&self) -> &str {
        "pte_f_linear"
    }

    fn estimate(&self, dataset: &TrialDataset) -> Result<f64> {
        pte_freedman(dataset).map(|f| f.pte_f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparatorResult {
    pub name: String,
    pub estimate: Option<f64>,
    pub error: Option<String>,
}

/// Named comparators; the built-in one is the linear Freedman estimator.
pub struct ComparatorRegistry {
    entries: Vec<Box<dyn Comparator>>,
}

impl Default for ComparatorRegistry {
    fn default() -> Self {
        Self { entries: vec![Box::new(Freedman)] }
    }
}

impl ComparatorRegistry {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn register(&mut self, c: Box<dyn Comparator>) {
        self.entries.push(c);
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|c| c.name()).collect()
    }

    pub fn run(&self, dataset: &TrialDataset) -> Vec<ComparatorResult> {
        self.entries
            .iter()
            .map(|c| match c.estimate(dataset) {
                Ok(v) => ComparatorResult { name: c.name().into(), estimate: Some(v), error: None },
                Err(e) => ComparatorResult { name: c.name().into(), estimate: None, error: Some(e.to_string()) },
            })
            .collect()
    }
}
