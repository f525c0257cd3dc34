//! Support partition, kernel curve estimation and the optimal transformation
//!
//! ```text
//! g(s) = m1(s) + λ r(s)   on Ω1
//! g(s) = m0(s) + c        on D0 = Ω0 \ Ω1
//! ```
//!
//! which minimizes E{Y⁽¹⁾ − g(S⁽¹⁾)}² subject to E{Y⁽⁰⁾ − g(S⁽⁰⁾)} = 0 and
//! continuity at the boundary point s* between D_c = Ω0 ∩ Ω1 and D0.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{AnalysisConfig, Field, TrialDataset};
use crate::error::{Error, Result};
use crate::kernel::{density_ratio, select_bandwidth, KernelSmoother};
use crate::numeric::{interpolate, quantile_sorted, sorted, trapezoid, trapezoid_weights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, s: f64) -> bool {
        s >= self.lo && s <= self.hi
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    D0Above,
    D0Below,
    D0Empty,
}

/// Supports of the two arms and the regions derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportPartition {
    pub omega0: Interval,
    pub omega1: Interval,
    pub d_c: Interval,
    /// Ω1 \ Ω0; up to two pieces when Ω1 extends past Ω0 on both sides.
    pub d_1: Vec<Interval>,
    pub d_0: Option<Interval>,
    pub s_star: Option<f64>,
    pub orientation: Orientation,
}

impl SupportPartition {
    pub fn from_supports(omega0: Interval, omega1: Interval) -> Result<Self> {
        let d_c = Interval::new(omega0.lo.max(omega1.lo), omega0.hi.min(omega1.hi));
        if !(d_c.lo < d_c.hi) {
            return Err(Error::NoOverlap);
        }
        let below = omega0.lo < omega1.lo;
        let above = omega0.hi > omega1.hi;
        let (d_0, s_star, orientation) = match (below, above) {
            (true, true) => return Err(Error::TwoSidedD0),
            (true, false) => (Some(Interval::new(omega0.lo, omega1.lo)), Some(omega1.lo), Orientation::D0Below),
            (false, true) => (Some(Interval::new(omega1.hi, omega0.hi)), Some(omega1.hi), Orientation::D0Above),
            (false, false) => (None, None, Orientation::D0Empty),
        };
        let mut d_1 = Vec::new();
        if omega1.lo < omega0.lo {
            d_1.push(Interval::new(omega1.lo, omega0.lo));
        }
        if omega1.hi > omega0.hi {
            d_1.push(Interval::new(omega0.hi, omega1.hi));
        }
        Ok(Self { omega0, omega1, d_c, d_1, d_0, s_star, orientation })
    }

    /// Ω0 ∪ Ω1.
    pub fn hull(&self) -> Interval {
        Interval::new(self.omega0.lo.min(self.omega1.lo), self.omega0.hi.max(self.omega1.hi))
    }

    /// Regions in ascending order of location.
    pub fn regions(&self) -> Vec<(Region, Interval)> {
        let mut out: Vec<(Region, Interval)> = self.d_1.iter().map(|&i| (Region::D1, i)).collect();
        out.push((Region::Common, self.d_c));
        if let Some(d0) = self.d_0 {
            out.push((Region::D0, d0));
        }
        out.sort_by(|a, b| a.1.lo.total_cmp(&b.1.lo));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    D1,
    Common,
    D0,
}

/// Ω_a = [q(trim), q(1 − trim)] of each arm's surrogate values.
pub fn estimate_partition(dataset: &TrialDataset, trim: f64) -> Result<SupportPartition> {
    let support = |arm| {
        let s = sorted(&dataset.arm_values(arm, Field::S));
        Interval::new(quantile_sorted(&s, trim), quantile_sorted(&s, 1.0 - trim))
    };
    SupportPartition::from_supports(support(0), support(1))
}

/// Splits `intervals` subintervals across regions in proportion to length,
/// giving each region at least two.
fn allocate(lengths: &[f64], intervals: usize) -> Vec<usize> {
    let total: f64 = lengths.iter().sum();
    let mut counts: Vec<usize> =
        lengths.iter().map(|l| ((l / total) * intervals as f64).round().max(2.0) as usize).collect();
    let largest = (0..counts.len()).max_by(|&a, &b| lengths[a].total_cmp(&lengths[b])).unwrap();
    let assigned: usize = counts.iter().sum();
    counts[largest] = (counts[largest] + intervals).saturating_sub(assigned).max(2);
    counts
}

/// Piecewise-uniform grid over Ω0 ∪ Ω1 with every region boundary as a node.
pub fn build_grid(partition: &SupportPartition, points: usize) -> Vec<f64> {
    let regions = partition.regions();
    let counts = allocate(&regions.iter().map(|r| r.1.len()).collect::<Vec<_>>(), points.saturating_sub(1));
    let mut grid = vec![regions[0].1.lo];
    for ((_, iv), &m) in regions.iter().zip(&counts) {
        let step = iv.len() / m as f64;
        grid.extend((1..m).map(|k| iv.lo + k as f64 * step));
        grid.push(iv.hi);
    }
    grid
}

fn node(grid: &[f64], v: f64) -> usize {
    let j = grid.partition_point(|&g| g < v);
    if j < grid.len() && grid[j] == v {
        return j;
    }
    // Not an exact node: take the nearest.
    match j {
        0 => 0,
        j if j >= grid.len() => grid.len() - 1,
        j if (grid[j] - v).abs() < (v - grid[j - 1]).abs() => j,
        j => j - 1,
    }
}

/// Inclusive node ranges of each region on a grid built by [`build_grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct RegionIndex {
    pub common: (usize, usize),
    pub d0: Option<(usize, usize)>,
    pub d1: Vec<(usize, usize)>,
    pub omega0: (usize, usize),
    pub omega1: (usize, usize),
    pub s_star: Option<usize>,
}

impl RegionIndex {
    pub fn new(grid: &[f64], p: &SupportPartition) -> Self {
        let range = |iv: &Interval| (node(grid, iv.lo), node(grid, iv.hi));
        Self {
            common: range(&p.d_c),
            d0: p.d_0.as_ref().map(range),
            d1: p.d_1.iter().map(range).collect(),
            omega0: range(&p.omega0),
            omega1: range(&p.omega1),
            s_star: p.s_star.map(|s| node(grid, s)),
        }
    }

    pub fn in_omega1(&self, j: usize) -> bool {
        j >= self.omega1.0 && j <= self.omega1.1
    }

    pub fn in_omega0(&self, j: usize) -> bool {
        j >= self.omega0.0 && j <= self.omega0.1
    }

    pub fn in_common(&self, j: usize) -> bool {
        j >= self.common.0 && j <= self.common.1
    }
}

/// Kernel curves on the analysis grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub grid: Vec<f64>,
    pub f0: Vec<f64>,
    pub f1: Vec<f64>,
    /// m̂0 on Ω0 nodes, absent elsewhere.
    pub m0: Vec<Option<f64>>,
    /// m̂1 on Ω1 nodes, absent elsewhere.
    pub m1: Vec<Option<f64>>,
    /// Floored density ratio on Ω1 nodes.
    pub r: Vec<Option<f64>>,
    /// m̂0 − m̂1 on D_c nodes.
    pub delta01: Vec<Option<f64>>,
    pub floor: f64,
    /// Ω1 nodes where the density floor replaced f̂1.
    pub floor_bound: usize,
    /// Grid points where a regression had no kernel mass and was interpolated.
    pub excluded: Vec<f64>,
}

impl CurveSet {
    /// Assembles a curve set from values on `grid`. `m0`/`m1` may be missing
    /// at isolated nodes inside their supports; these are filled by linear
    /// interpolation and reported in `excluded`.
    pub fn assemble(
        partition: &SupportPartition,
        grid: Vec<f64>,
        f0: Vec<f64>,
        f1: Vec<f64>,
        m0: Vec<Option<f64>>,
        m1: Vec<Option<f64>>,
        floor: f64,
    ) -> Result<Self> {
        let idx = RegionIndex::new(&grid, partition);
        let mut excluded = Vec::new();
        let m0 = fill(&grid, &m0, idx.omega0, &mut excluded)?;
        let m1 = fill(&grid, &m1, idx.omega1, &mut excluded)?;
        let mut floor_bound = 0;
        let r = (0..grid.len())
            .map(|j| {
                idx.in_omega1(j).then(|| {
                    let (v, bound) = density_ratio(f0[j], f1[j], floor);
                    floor_bound += bound as usize;
                    v
                })
            })
            .collect();
        let delta01 = (0..grid.len()).map(|j| if idx.in_common(j) { Some(m0[j]? - m1[j]?) } else { None }).collect();
        Ok(Self { grid, f0, f1, m0, m1, r, delta01, floor, floor_bound, excluded })
    }

    /// Curves from known functions; used for population-level computations.
    pub fn from_functions(
        partition: &SupportPartition,
        grid: Vec<f64>,
        f0: impl Fn(f64) -> f64,
        f1: impl Fn(f64) -> f64,
        m0: impl Fn(f64) -> f64,
        m1: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        let idx = RegionIndex::new(&grid, partition);
        let f0v = grid.iter().enumerate().map(|(j, &s)| if idx.in_omega0(j) { f0(s) } else { 0.0 }).collect();
        let f1v = grid.iter().map(|&s| f1(s)).collect();
        let m0v = grid.iter().enumerate().map(|(j, &s)| idx.in_omega0(j).then(|| m0(s))).collect();
        let m1v = grid.iter().enumerate().map(|(j, &s)| idx.in_omega1(j).then(|| m1(s))).collect();
        Self::assemble(partition, grid, f0v, f1v, m0v, m1v, f64::MIN_POSITIVE)
    }
}

/// Fills missing values inside `range` by linear interpolation between the
/// nearest present neighbors (constant extension at the ends).
fn fill(grid: &[f64], v: &[Option<f64>], range: (usize, usize), excluded: &mut Vec<f64>) -> Result<Vec<Option<f64>>> {
    let (a, b) = range;
    let present: Vec<usize> = (a..=b).filter(|&j| v[j].is_some()).collect();
    if present.is_empty() {
        return Err(Error::EmptyNeighborhood(grid[a]));
    }
    let mut out = vec![None; v.len()];
    for j in a..=b {
        out[j] = match v[j] {
            Some(x) => Some(x),
            None => {
                excluded.push(grid[j]);
                let k = present.partition_point(|&p| p < j);
                Some(match (k.checked_sub(1).map(|i| present[i]), present.get(k).copied()) {
                    (Some(l), Some(r)) => {
                        let w = (grid[j] - grid[l]) / (grid[r] - grid[l]);
                        v[l].unwrap() + w * (v[r].unwrap() - v[l].unwrap())
                    }
                    (Some(l), None) => v[l].unwrap(),
                    (None, Some(r)) => v[r].unwrap(),
                    (None, None) => unreachable!(),
                })
            }
        };
    }
    Ok(out)
}

/// Multiplier, shift and normalizing integrals of the closed form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagrangeSolution {
    pub lambda: f64,
    /// Absent when D0 is empty.
    pub c: Option<f64>,
    pub k1: f64,
    pub k2: f64,
}

fn masked(v: &[Option<f64>], f: &[f64], lo: usize, hi: usize) -> Vec<f64> {
    (0..v.len()).map(|j| if j >= lo && j <= hi { v[j].unwrap_or(0.0) * f[j] } else { 0.0 }).collect()
}

/// λ, c, K1 = ∫_{D0} f0 and K2 = ∫_{D_c} r f0 by the trapezoid rule.
pub fn solve_lambda_c(curves: &CurveSet, partition: &SupportPartition) -> Result<LagrangeSolution> {
    let x = &curves.grid;
    let idx = RegionIndex::new(x, partition);
    let (a, b) = idx.common;
    let int_d = trapezoid(x, &masked(&curves.delta01, &curves.f0, a, b), a, b);
    let k2 = trapezoid(x, &masked(&curves.r, &curves.f0, a, b), a, b);
    if !(k2 > 0.0) {
        return Err(Error::DegenerateK2(k2));
    }
    match (idx.d0, idx.s_star) {
        (Some((lo, hi)), Some(js)) => {
            let k1 = trapezoid(x, &curves.f0, lo, hi);
            let r_star = curves.r[js].expect("s* lies in Ω1");
            let d_star = curves.delta01[js].expect("s* lies in D_c");
            let denom = k2 + k1 * r_star;
            Ok(LagrangeSolution {
                lambda: (int_d + k1 * d_star) / denom,
                c: Some((r_star * int_d - k2 * d_star) / denom),
                k1,
                k2,
            })
        }
        _ => Ok(LagrangeSolution { lambda: int_d / k2, c: None, k1: 0.0, k2 }),
    }
}

/// ĝ on every grid node.
pub fn g_on_grid(curves: &CurveSet, partition: &SupportPartition, sol: &LagrangeSolution) -> Vec<f64> {
    let idx = RegionIndex::new(&curves.grid, partition);
    (0..curves.grid.len())
        .map(|j| {
            if idx.in_omega1(j) {
                curves.m1[j].unwrap() + sol.lambda * curves.r[j].unwrap()
            } else {
                curves.m0[j].unwrap() + sol.c.unwrap_or(0.0)
            }
        })
        .collect()
}

/// Portable form of ĝ: enough to evaluate it and reload it from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GTransform {
    pub grid: Vec<f64>,
    pub g: Vec<f64>,
    pub lambda: f64,
    pub c: Option<f64>,
    pub k1: f64,
    pub k2: f64,
    pub partition: SupportPartition,
}

impl GTransform {
    /// Linear interpolation of ĝ; s* is a grid node, so no interval straddles
    /// the two branches.
    pub fn evaluate(&self, s: f64) -> Result<f64> {
        interpolate(&self.grid, &self.g, s).ok_or(Error::OutOfSupport(s))
    }

    /// As [`evaluate`](Self::evaluate), but values beyond the grid take the
    /// nearest boundary value. The flag reports whether clamping happened.
    pub fn evaluate_clamped(&self, s: f64) -> (f64, bool) {
        let n = self.grid.len();
        if s < self.grid[0] {
            (self.g[0], true)
        } else if s > self.grid[n - 1] {
            (self.g[n - 1], true)
        } else {
            (interpolate(&self.grid, &self.g, s).unwrap(), false)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformEstimate {
    pub partition: SupportPartition,
    pub curves: CurveSet,
    pub lambda: f64,
    pub c: Option<f64>,
    pub k1: f64,
    pub k2: f64,
    pub g_values: Vec<f64>,
    pub bandwidth: f64,
}

impl TransformEstimate {
    pub fn from_curves(partition: SupportPartition, curves: CurveSet, bandwidth: f64) -> Result<Self> {
        let sol = solve_lambda_c(&curves, &partition)?;
        let g_values = g_on_grid(&curves, &partition, &sol);
        Ok(Self { partition, curves, lambda: sol.lambda, c: sol.c, k1: sol.k1, k2: sol.k2, g_values, bandwidth })
    }

    pub fn transform(&self) -> GTransform {
        GTransform {
            grid: self.curves.grid.clone(),
            g: self.g_values.clone(),
            lambda: self.lambda,
            c: self.c,
            k1: self.k1,
            k2: self.k2,
            partition: self.partition.clone(),
        }
    }

    pub fn evaluate(&self, s: f64) -> Result<f64> {
        interpolate(&self.curves.grid, &self.g_values, s).ok_or(Error::OutOfSupport(s))
    }

    /// |(m̂1 + λ̂ r̂)(s*) − (m̂0 + ĉ)(s*)|, zero when D0 is empty.
    pub fn continuity_gap(&self) -> f64 {
        let idx = RegionIndex::new(&self.curves.grid, &self.partition);
        match (idx.s_star, self.c) {
            (Some(j), Some(c)) => {
                let upper = self.curves.m1[j].unwrap() + self.lambda * self.curves.r[j].unwrap();
                let lower = self.curves.m0[j].unwrap() + c;
                (upper - lower).abs()
            }
            _ => 0.0,
        }
    }
}

/// Kernel curve estimation with the grid, partition and bandwidth fixed from
/// one dataset, so that weighted refits (perturbation replicates) reuse the
/// precomputed kernel weights.
#[derive(Debug, Clone)]
pub struct TransformFitter {
    partition: SupportPartition,
    grid: Vec<f64>,
    h: f64,
    floor_rel: f64,
    arm_rows: [Vec<usize>; 2],
    y: [Vec<f64>; 2],
    smoothers: [KernelSmoother; 2],
}

impl TransformFitter {
    pub fn new(dataset: &TrialDataset, cfg: &AnalysisConfig) -> Result<Self> {
        let partition = estimate_partition(dataset, cfg.support_trim)?;
        let h = select_bandwidth(&dataset.surrogates(), cfg.bandwidth_rule, cfg.undersmooth_exponent)?;
        Ok(Self::with_partition(dataset, partition, h, cfg.grid_points, cfg.density_floor_rel))
    }

    pub fn with_partition(
        dataset: &TrialDataset,
        partition: SupportPartition,
        h: f64,
        grid_points: usize,
        floor_rel: f64,
    ) -> Self {
        let grid = build_grid(&partition, grid_points);
        let rows = |arm: u8| -> Vec<usize> {
            dataset.records().iter().enumerate().filter(|(_, r)| r.a == arm).map(|(i, _)| i).collect()
        };
        let arm_rows = [rows(0), rows(1)];
        let y = [dataset.arm_values(0, Field::Y), dataset.arm_values(1, Field::Y)];
        let smoothers = [
            KernelSmoother::new(&dataset.arm_values(0, Field::S), &grid, h),
            KernelSmoother::new(&dataset.arm_values(1, Field::S), &grid, h),
        ];
        Self { partition, grid, h, floor_rel, arm_rows, y, smoothers }
    }

    pub fn partition(&self) -> &SupportPartition {
        &self.partition
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Curves under per-record weights (indexed like the dataset's records).
    pub fn curves(&self, weights: Option<&[f64]>) -> Result<CurveSet> {
        let idx = RegionIndex::new(&self.grid, &self.partition);
        let arm_w: [Option<Vec<f64>>; 2] =
            [0, 1].map(|a| weights.map(|w| self.arm_rows[a].iter().map(|&i| w[i]).collect()));
        let f0 = self.smoothers[0].density(arm_w[0].as_deref());
        let f1 = self.smoothers[1].density(arm_w[1].as_deref());
        let reg = |a: usize, range: (usize, usize)| -> Vec<Option<f64>> {
            let all = self.smoothers[a].regression(&self.y[a], arm_w[a].as_deref());
            all.into_iter().enumerate().map(|(j, v)| if j >= range.0 && j <= range.1 { v } else { None }).collect()
        };
        let m0 = reg(0, idx.omega0);
        let m1 = reg(1, idx.omega1);
        let fmax = f1.iter().cloned().fold(0.0, f64::max);
        CurveSet::assemble(&self.partition, self.grid.clone(), f0, f1, m0, m1, self.floor_rel * fmax)
    }

    pub fn fit(&self, weights: Option<&[f64]>) -> Result<TransformEstimate> {
        TransformEstimate::from_curves(self.partition.clone(), self.curves(weights)?, self.h)
    }
}

/// Kernel curves for `dataset` on the grid of `partition`.
pub fn estimate_curves(
    dataset: &TrialDataset,
    partition: &SupportPartition,
    h: f64,
    grid_points: usize,
    floor_rel: f64,
) -> Result<CurveSet> {
    TransformFitter::with_partition(dataset, partition.clone(), h, grid_points, floor_rel).curves(None)
}

/// Unweighted fit with the configured partition, bandwidth and grid.
pub fn fit_transform(dataset: &TrialDataset, cfg: &AnalysisConfig) -> Result<TransformEstimate> {
    TransformFitter::new(dataset, cfg)?.fit(None)
}

// ---------------------------------------------------------------------------
// Population-level g_opt from known curves, by closed form and by brute force.

/// Densities and conditional means as functions. f0 is taken as zero off Ω0.
pub struct AnalyticCurves<'a> {
    pub f0: &'a dyn Fn(f64) -> f64,
    pub f1: &'a dyn Fn(f64) -> f64,
    pub m0: &'a dyn Fn(f64) -> f64,
    pub m1: &'a dyn Fn(f64) -> f64,
}

/// g on one region's own uniform node set (boundary nodes are repeated in
/// adjacent regions so one-sided values at jumps are kept apart).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionValues {
    pub region: Region,
    pub s: Vec<f64>,
    pub g: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoptSolution {
    pub lambda: f64,
    pub c: Option<f64>,
    pub k1: f64,
    pub k2: f64,
    pub regions: Vec<RegionValues>,
}

impl GoptSolution {
    pub fn sup_distance(&self, other: &GoptSolution) -> f64 {
        self.regions
            .iter()
            .zip(&other.regions)
            .flat_map(|(a, b)| a.g.iter().zip(&b.g).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// g at s, preferring the Ω1 branch at shared boundaries.
    pub fn evaluate(&self, s: f64) -> Option<f64> {
        let mut found = None;
        for rv in &self.regions {
            if let Some(v) = interpolate(&rv.s, &rv.g, s) {
                if rv.region != Region::D0 {
                    return Some(v);
                }
                found = Some(v);
            }
        }
        found
    }
}

struct Discretized {
    regions: Vec<(Region, Vec<f64>, Vec<f64>)>, // nodes, trapezoid weights
}

fn discretize(partition: &SupportPartition, points: usize) -> Discretized {
    let regions = partition.regions();
    let counts = allocate(&regions.iter().map(|r| r.1.len()).collect::<Vec<_>>(), points.saturating_sub(1));
    let regions = regions
        .into_iter()
        .zip(counts)
        .map(|((region, iv), m)| {
            let mut s: Vec<f64> = (0..m).map(|k| iv.lo + k as f64 * iv.len() / m as f64).collect();
            s.push(iv.hi);
            let w = trapezoid_weights(&s, 0, m);
            (region, s, w)
        })
        .collect();
    Discretized { regions }
}

/// Closed-form g_opt from known curves, with integrals by the trapezoid rule
/// on each region's grid.
pub fn closed_form_gopt(curves: &AnalyticCurves, partition: &SupportPartition, points: usize) -> Result<GoptSolution> {
    let disc = discretize(partition, points);
    let ratio = |s: f64| density_ratio((curves.f0)(s), (curves.f1)(s), f64::MIN_POSITIVE).0;
    let (mut int_d, mut k2, mut k1) = (0.0, 0.0, 0.0);
    for (region, s, w) in &disc.regions {
        for (&sj, &wj) in s.iter().zip(w) {
            match region {
                Region::Common => {
                    let f0 = (curves.f0)(sj);
                    int_d += ((curves.m0)(sj) - (curves.m1)(sj)) * f0 * wj;
                    k2 += ratio(sj) * f0 * wj;
                }
                Region::D0 => k1 += (curves.f0)(sj) * wj,
                Region::D1 => {}
            }
        }
    }
    if !(k2 > 0.0) {
        return Err(Error::DegenerateK2(k2));
    }
    let (lambda, c) = match partition.s_star {
        Some(st) => {
            let r_star = ratio(st);
            let d_star = (curves.m0)(st) - (curves.m1)(st);
            let denom = k2 + k1 * r_star;
            ((int_d + k1 * d_star) / denom, Some((r_star * int_d - k2 * d_star) / denom))
        }
        None => (int_d / k2, None),
    };
    let regions = disc
        .regions
        .into_iter()
        .map(|(region, s, _)| {
            let g = s
                .iter()
                .map(|&sj| match region {
                    Region::Common => (curves.m1)(sj) + lambda * ratio(sj),
                    Region::D1 => (curves.m1)(sj),
                    Region::D0 => (curves.m0)(sj) + c.unwrap(),
                })
                .collect();
            RegionValues { region, s, g }
        })
        .collect();
    Ok(GoptSolution { lambda, c, k1: if c.is_some() { k1 } else { 0.0 }, k2, regions })
}

/// Minimizes Σ a_j (x_j − t_j)² subject to B x = d (rows of B given as
/// slices), returning x and the multipliers ν/2 with x = t + A⁻¹Bᵀ(ν/2).
///
/// Coordinates with a_j = 0 that no constraint touches stay at t_j; a zero
/// weight on a constrained coordinate makes the problem singular.
pub fn solve_equality_qp(a: &[f64], t: &[f64], b: &[Vec<f64>], d: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = a.len();
    let m = b.len();
    for j in 0..n {
        if !(a[j] > 0.0) && b.iter().any(|row| row[j] != 0.0) {
            return Err(Error::SingularSystem(format!("zero objective weight on constrained coordinate {j}")));
        }
    }
    let inv_a: Vec<f64> = a.iter().map(|&v| if v > 0.0 { 1.0 / v } else { 0.0 }).collect();
    let schur = DMatrix::from_fn(m, m, |k, l| (0..n).map(|j| b[k][j] * inv_a[j] * b[l][j]).sum::<f64>());
    let resid = DVector::from_fn(m, |k, _| d[k] - (0..n).map(|j| b[k][j] * t[j]).sum::<f64>());
    let nu = schur
        .lu()
        .solve(&resid)
        .filter(|v| v.iter().all(|x| x.is_finite()))
        .ok_or_else(|| Error::SingularSystem("constraint Gram matrix".into()))?;
    let x = (0..n).map(|j| t[j] + inv_a[j] * (0..m).map(|k| b[k][j] * nu[k]).sum::<f64>()).collect();
    Ok((x, nu.iter().copied().collect()))
}

/// Brute-force g_opt: solves the discretized constrained least-squares problem
///
/// ```text
/// min Σ_{Ω1} (g − m1)² f1 w   s.t.   Σ_{Ω0} g f0 w = Σ_{Ω0} m0 f0 w,
/// ```
///
/// with g = m0 + c on D0. For fixed c the problem is an equality-constrained
/// QP; c is then chosen so that the Ω1 branch meets m0 + c at s*. The
/// continuity residual is affine in c, so two solves determine it exactly.
pub fn oracle_gopt(curves: &AnalyticCurves, partition: &SupportPartition, points: usize) -> Result<GoptSolution> {
    let disc = discretize(partition, points);
    // Ω1 unknowns are the D1 and D_c nodes, in region order.
    let mut a = Vec::new();
    let mut t = Vec::new();
    let mut bc = Vec::new();
    let mut rhs0 = 0.0;
    let mut k1 = 0.0;
    let mut k2 = 0.0;
    let mut star = None;
    for (region, s, w) in &disc.regions {
        for (i, (&sj, &wj)) in s.iter().zip(w).enumerate() {
            match region {
                Region::D0 => {
                    let f0 = (curves.f0)(sj);
                    k1 += f0 * wj;
                }
                _ => {
                    let f1 = (curves.f1)(sj);
                    a.push(f1 * wj);
                    t.push((curves.m1)(sj));
                    if *region == Region::Common {
                        let f0 = (curves.f0)(sj);
                        bc.push(f0 * wj);
                        rhs0 += (curves.m0)(sj) * f0 * wj;
                        k2 += density_ratio(f0, f1, f64::MIN_POSITIVE).0 * f0 * wj;
                        if partition.s_star == Some(sj) && (i == 0 || i == s.len() - 1) {
                            star = Some(a.len() - 1);
                        }
                    } else {
                        bc.push(0.0);
                    }
                }
            }
        }
    }
    // Σ_{D0} (m0 + c) f0 w − Σ_{D0} m0 f0 w = c K1 moves to the right-hand side.
    let solve = |c: f64| solve_equality_qp(&a, &t, std::slice::from_ref(&bc), &[rhs0 - c * k1]);
    let (x, nu, c) = match (partition.s_star, star) {
        (Some(st), Some(js)) => {
            let m0_star = (curves.m0)(st);
            let resid = |c: f64| -> Result<f64> { Ok(solve(c)?.0[js] - m0_star - c) };
            let (r0, r1) = (resid(0.0)?, resid(1.0)?);
            if r1 == r0 {
                return Err(Error::SingularSystem("continuity condition does not determine c".into()));
            }
            let c = -r0 / (r1 - r0);
            let (x, nu) = solve(c)?;
            (x, nu, Some(c))
        }
        _ => {
            let (x, nu) = solve(0.0)?;
            (x, nu, None)
        }
    };
    let mut offset = 0;
    let regions = disc
        .regions
        .into_iter()
        .map(|(region, s, _)| {
            let g = match region {
                Region::D0 => s.iter().map(|&sj| (curves.m0)(sj) + c.unwrap()).collect(),
                _ => {
                    let g = x[offset..offset + s.len()].to_vec();
                    offset += s.len();
                    g
                }
            };
            RegionValues { region, s, g }
        })
        .collect();
    Ok(GoptSolution { lambda: nu[0], c, k1: if c.is_some() { k1 } else { 0.0 }, k2, regions })
}
