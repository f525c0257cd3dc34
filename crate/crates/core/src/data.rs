//! Two-arm trial data: loading, validation, per-arm views and the shared
//! analysis configuration.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::BandwidthRule;

/// One subject: primary outcome, surrogate marker and treatment arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub y: f64,
    pub s: f64,
    pub a: u8,
}

/// Which observed quantity to extract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    Y,
    S,
}

/// Validated, immutable collection of trial records.
///
/// Record order is significant: influence values and fold assignments are
/// indexed by position.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialDataset {
    records: Vec<TrialRecord>,
    n0: usize,
    n1: usize,
}

impl TrialDataset {
    pub fn new(records: Vec<TrialRecord>) -> Result<Self> {
        let mut n1 = 0;
        for (i, r) in records.iter().enumerate() {
            if r.a > 1 {
                return Err(Error::NonBinaryArm { row: i + 1, value: r.a.to_string() });
            }
            if !r.y.is_finite() {
                return Err(Error::NonFiniteValue { row: i + 1, field: "y".into() });
            }
            if !r.s.is_finite() {
                return Err(Error::NonFiniteValue { row: i + 1, field: "s".into() });
            }
            n1 += r.a as usize;
        }
        let n0 = records.len() - n1;
        if n0 < 2 {
            return Err(Error::ArmTooSmall { arm: 0, count: n0 });
        }
        if n1 < 2 {
            return Err(Error::ArmTooSmall { arm: 1, count: n1 });
        }
        Ok(Self { records, n0, n1 })
    }

    /// Builds a dataset from parallel columns.
    pub fn from_columns(y: &[f64], s: &[f64], a: &[u8]) -> Result<Self> {
        if y.len() != s.len() || y.len() != a.len() {
            return Err(Error::Malformed("column lengths differ".into()));
        }
        let records = y.iter().zip(s).zip(a).map(|((&y, &s), &a)| TrialRecord { y, s, a }).collect();
        Self::new(records)
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn arm_count(&self, arm: u8) -> usize {
        if arm == 1 {
            self.n1
        } else {
            self.n0
        }
    }

    /// Values of `field` for subjects in `arm`, in record order.
    pub fn arm_values(&self, arm: u8, field: Field) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.a == arm)
            .map(|r| match field {
                Field::Y => r.y,
                Field::S => r.s,
            })
            .collect()
    }

    pub fn surrogates(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.s).collect()
    }

    /// A new dataset holding the records at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.records[i]).collect())
    }

    /// A copy with every outcome replaced by `f(index, record)`.
    pub fn map_outcomes(&self, f: impl Fn(usize, &TrialRecord) -> f64) -> Result<Self> {
        let records = self.records.iter().enumerate().map(|(i, r)| TrialRecord { y: f(i, r), ..*r }).collect();
        Self::new(records)
    }
}

/// Column names used when reading delimited input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMap {
    pub y: String,
    pub s: String,
    pub a: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self { y: "y".into(), s: "s".into(), a: "a".into() }
    }
}

/// How rows with missing fields are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingPolicy {
    #[default]
    Strict,
    /// Drop incomplete rows and report how many were dropped.
    Lenient,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: TrialDataset,
    pub dropped_rows: usize,
}

fn is_missing(field: &str) -> bool {
    let t = field.trim();
    t.is_empty() || t == "NA"
}

/// Reads comma-delimited text with a header row.
pub fn load_dataset<R: Read>(source: R, columns: &ColumnMap, policy: MissingPolicy) -> Result<LoadedDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers().map_err(|e| Error::Malformed(e.to_string()))?.clone();
    let find =
        |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn(name.to_string()));
    let (iy, is, ia) = (find(&columns.y)?, find(&columns.s)?, find(&columns.a)?);

    let mut records = Vec::new();
    let mut dropped = 0;
    for (idx, row) in reader.records().enumerate() {
        let row_no = idx + 1;
        let row = row.map_err(|e| Error::Malformed(e.to_string()))?;
        let fields = [(iy, &columns.y), (is, &columns.s), (ia, &columns.a)];
        let mut missing = None;
        for (pos, name) in fields {
            if row.get(pos).is_none_or(is_missing) {
                missing = Some(name.clone());
                break;
            }
        }
        if let Some(field) = missing {
            match policy {
                MissingPolicy::Strict => return Err(Error::MissingValue { row: row_no, field }),
                MissingPolicy::Lenient => {
                    dropped += 1;
                    continue;
                }
            }
        }
        let number = |pos: usize, name: &String| -> Result<f64> {
            let text = row.get(pos).unwrap_or_default();
            match text.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::NonFiniteValue { row: row_no, field: name.clone() }),
            }
        };
        let y = number(iy, &columns.y)?;
        let s = number(is, &columns.s)?;
        let arm_text = row.get(ia).unwrap_or_default();
        let a = match arm_text.parse::<f64>() {
            Ok(0.0) => 0,
            Ok(1.0) => 1,
            _ => return Err(Error::NonBinaryArm { row: row_no, value: arm_text.to_string() }),
        };
        records.push(TrialRecord { y, s, a });
    }
    Ok(LoadedDataset { dataset: TrialDataset::new(records)?, dropped_rows: dropped })
}

/// Writes the dataset as `y,s,a` CSV using shortest round-trip float formatting.
pub fn write_dataset<W: Write>(dataset: &TrialDataset, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let io = |e: csv::Error| Error::Malformed(e.to_string());
    w.write_record(["y", "s", "a"]).map_err(io)?;
    for r in dataset.records() {
        w.write_record([r.y.to_string(), r.s.to_string(), r.a.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Malformed(e.to_string()))?;
    Ok(())
}

/// Global analysis settings shared by every stage of the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub bandwidth_rule: BandwidthRule,
    /// Undersmoothing exponent: h = h_opt * n^(-c0).
    pub undersmooth_exponent: f64,
    pub grid_points: usize,
    /// Fraction trimmed from each end of each arm's surrogate range.
    pub support_trim: f64,
    /// Density floor for the ratio f0/f1, relative to max f1 on the grid.
    pub density_floor_rel: f64,
    pub resample_count: usize,
    pub cv_folds: usize,
    pub critical_z: f64,
    pub alpha: f64,
    pub seed: u64,
    /// Minimum per-arm subjects in every fold and its complement.
    pub min_fold_arm: usize,
    /// Largest tolerated fraction of subjects outside the transform support.
    pub exclusion_cap: f64,
    /// PTE is refused when |delta| / se(delta) falls below this.
    pub null_effect_z: f64,
    /// Width, in standard errors, of the noise band for condition checks.
    pub noise_band: f64,
    pub max_n: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            bandwidth_rule: BandwidthRule::ScottUndersmoothed,
            undersmooth_exponent: 0.06,
            grid_points: 512,
            support_trim: 0.0,
            density_floor_rel: 1e-4,
            resample_count: 500,
            cv_folds: 2,
            critical_z: 1.96,
            alpha: 0.05,
            seed: 20_240_601,
            min_fold_arm: 50,
            exclusion_cap: 0.02,
            null_effect_z: 1.0,
            noise_band: 2.0,
            max_n: 1_000_000,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(0.0..0.5).contains(&self.support_trim) {
            return bad("support_trim must lie in [0, 0.5)");
        }
        if self.grid_points < 16 {
            return bad("grid_points must be at least 16");
        }
        if self.cv_folds < 2 {
            return bad("cv_folds must be at least 2");
        }
        if self.resample_count < 2 {
            return bad("resample_count must be at least 2");
        }
        if !(self.critical_z > 0.0) {
            return bad("critical_z must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.undersmooth_exponent >= 0.0) {
            return bad("undersmooth exponent must be non-negative");
        }
        if !(self.density_floor_rel > 0.0) {
            return bad("density floor must be positive");
        }
        if let BandwidthRule::Fixed(h) = self.bandwidth_rule {
            if !(h > 0.0 && h.is_finite()) {
                return bad("fixed bandwidth must be positive");
            }
        }
        Ok(())
    }
}
