//! Gaussian kernel smoothing: bandwidth selection, density estimation,
//! Nadaraya–Watson regression and the density ratio f0/f1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal;
use crate::numeric::{quantile_sorted, sample_sd, sorted};

/// How the bandwidth is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "h", rename_all = "snake_case")]
pub enum BandwidthRule {
    /// Robust normal-reference rule, shrunk by n^(-c0).
    ScottUndersmoothed,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    #[default]
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub kernel: Kernel,
    pub h: f64,
}

impl KernelConfig {
    pub fn gaussian(h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {h}")));
        }
        Ok(Self { kernel: Kernel::Gaussian, h })
    }

    /// K_h(u) = K(u/h)/h.
    #[inline]
    pub fn weight(&self, u: f64) -> f64 {
        normal::pdf(u / self.h) / self.h
    }
}

/// Normal-reference bandwidth 1.06·min(sd, IQR/1.34)·n^(-1/5).
///
/// When the IQR is zero but the sample still has spread, the sd alone is used.
pub fn reference_bandwidth(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::DegenerateSample);
    }
    let sd = sample_sd(values);
    if !(sd > 0.0) {
        return Err(Error::DegenerateSample);
    }
    let s = sorted(values);
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(1.06 * spread * (n as f64).powf(-0.2))
}

/// Undersmoothed bandwidth h_opt·n^(-c0).
pub fn bandwidth(values: &[f64], c0: f64) -> Result<f64> {
    Ok(reference_bandwidth(values)? * (values.len() as f64).powf(-c0))
}

pub fn select_bandwidth(values: &[f64], rule: BandwidthRule, c0: f64) -> Result<f64> {
    match rule {
        BandwidthRule::ScottUndersmoothed => bandwidth(values, c0),
        BandwidthRule::Fixed(h) => KernelConfig::gaussian(h).map(|k| k.h),
    }
}

/// Kernel density estimate n⁻¹ Σ K_h(S_i − s).
pub fn kde(sample: &[f64], s: f64, cfg: &KernelConfig) -> f64 {
    sample.iter().map(|&v| cfg.weight(v - s)).sum::<f64>() / sample.len() as f64
}

/// Smallest kernel mass (Σ K_h) accepted as a neighborhood.
const MASS_FLOOR: f64 = 1e-300;
/// Regression is refused beyond this many bandwidths outside the sample range.
const REACH: f64 = 5.0;

/// Nadaraya–Watson estimate of E(Y | S = s).
pub fn nw_regress(sample_s: &[f64], sample_y: &[f64], s: f64, cfg: &KernelConfig) -> Result<f64> {
    assert_eq!(sample_s.len(), sample_y.len(), "paired samples must have equal length");
    let (lo, hi) = sample_s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if sample_s.is_empty() || s < lo - REACH * cfg.h || s > hi + REACH * cfg.h {
        return Err(Error::EmptyNeighborhood(s));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (&si, &yi) in sample_s.iter().zip(sample_y) {
        let k = cfg.weight(si - s);
        num += k * yi;
        den += k;
    }
    if den < MASS_FLOOR {
        return Err(Error::EmptyNeighborhood(s));
    }
    let (ymin, ymax) = sample_y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    Ok((num / den).clamp(ymin, ymax))
}

/// f0 / max(f1, floor), and whether the floor was binding.
pub fn density_ratio(f0: f64, f1: f64, floor: f64) -> (f64, bool) {
    let bound = f1 < floor;
    (f0 / f1.max(floor), bound)
}

/// Log-weight margin beyond which kernel terms are dropped: e^-37 ≈ 8.5e-17
/// relative to the closest sample point.
const LOG_CUTOFF: f64 = 37.0;

/// Kernel weights from one sample to a fixed set of evaluation points,
/// precomputed so that weighted densities and regressions reduce to sparse
/// dot products.
#[derive(Debug, Clone)]
pub struct KernelSmoother {
    h: f64,
    /// Sample positions in ascending order of S.
    order: Vec<usize>,
    /// For each evaluation point, its window into `order` and the weights.
    windows: Vec<(usize, usize, usize)>,
    weights: Vec<f64>,
    /// Distance, in bandwidths, from each evaluation point to the nearest sample point.
    nearest: Vec<f64>,
    points: Vec<f64>,
}

impl KernelSmoother {
    pub fn new(sample: &[f64], points: &[f64], h: f64) -> Self {
        let mut order: Vec<usize> = (0..sample.len()).collect();
        order.sort_by(|&a, &b| sample[a].total_cmp(&sample[b]));
        let s: Vec<f64> = order.iter().map(|&i| sample[i]).collect();
        let cfg = KernelConfig { kernel: Kernel::Gaussian, h };
        let mut windows = Vec::with_capacity(points.len());
        let mut weights = Vec::new();
        let mut nearest = Vec::with_capacity(points.len());
        for &x in points {
            let j = s.partition_point(|&v| v < x);
            let d_left = if j > 0 { x - s[j - 1] } else { f64::INFINITY };
            let d_right = if j < s.len() { s[j] - x } else { f64::INFINITY };
            let dmin = d_left.min(d_right);
            let reach = (dmin * dmin + 2.0 * LOG_CUTOFF * h * h).sqrt();
            let lo = s.partition_point(|&v| v < x - reach);
            let hi = s.partition_point(|&v| v <= x + reach);
            let start = weights.len();
            weights.extend(s[lo..hi].iter().map(|&v| cfg.weight(v - x)));
            windows.push((lo, hi, start));
            nearest.push(dmin / h);
        }
        Self { h, order, windows, weights, nearest, points: points.to_vec() }
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    fn permuted(&self, v: &[f64]) -> Vec<f64> {
        self.order.iter().map(|&i| v[i]).collect()
    }

    /// Weighted density Σ w_i K_h / Σ w_i at every evaluation point.
    pub fn density(&self, w: Option<&[f64]>) -> Vec<f64> {
        let n = self.order.len() as f64;
        match w {
            None => self
                .windows
                .iter()
                .map(|&(lo, hi, st)| self.weights[st..st + hi - lo].iter().sum::<f64>() / n)
                .collect(),
            Some(w) => {
                let total: f64 = w.iter().sum();
                let pw = self.permuted(w);
                self.windows
                    .iter()
                    .map(|&(lo, hi, st)| dot(&self.weights[st..st + hi - lo], &pw[lo..hi]) / total)
                    .collect()
            }
        }
    }

    /// Weighted Nadaraya–Watson regression of `y`. Points with no kernel mass
    /// or more than five bandwidths from the sample are `None`.
    pub fn regression(&self, y: &[f64], w: Option<&[f64]>) -> Vec<Option<f64>> {
        let py = self.permuted(y);
        let pw = w.map(|w| self.permuted(w));
        self.windows
            .iter()
            .zip(&self.nearest)
            .map(|(&(lo, hi, st), &near)| {
                if near > REACH {
                    return None;
                }
                let k = &self.weights[st..st + hi - lo];
                let (num, den) = match &pw {
                    None => (dot(k, &py[lo..hi]), k.iter().sum::<f64>()),
                    Some(pw) => {
                        let mut num = 0.0;
                        let mut den = 0.0;
                        for ((&kj, &yj), &wj) in k.iter().zip(&py[lo..hi]).zip(&pw[lo..hi]) {
                            num += kj * wj * yj;
                            den += kj * wj;
                        }
                        (num, den)
                    }
                };
                (den >= MASS_FLOOR).then(|| num / den)
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k(h: f64) -> KernelConfig {
        KernelConfig::gaussian(h).unwrap()
    }

    #[test]
    fn kde_point_values() {
        assert!((kde(&[0.0], 0.0, &k(1.0)) - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert!((kde(&[-1.0, 1.0], 0.0, &k(1.0)) - 0.241_970_724_519_143_37).abs() < 1e-15);
    }

    #[test]
    fn kde_scales_inversely() {
        let sample = [0.3, 1.2, -0.7, 2.5];
        let base = kde(&sample, 0.4, &k(0.8));
        let scaled: Vec<f64> = sample.iter().map(|v| v * 3.0).collect();
        assert!((kde(&scaled, 1.2, &k(2.4)) - base / 3.0).abs() < 1e-15);
    }

    #[test]
    fn regression_examples() {
        assert!((nw_regress(&[-1.0, 1.0], &[0.0, 2.0], 0.0, &k(1.0)).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(nw_regress(&[5.0], &[3.0], 5.7, &k(1.0)).unwrap(), 3.0);
        let phi0 = normal::pdf(0.0);
        let phi2 = normal::pdf(2.0);
        let expect = phi2 / (phi0 + phi2);
        let got = nw_regress(&[0.0, 2.0], &[0.0, 1.0], 0.0, &k(1.0)).unwrap();
        assert!((got - expect).abs() < 1e-15);
        assert!((got - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn regression_refuses_far_points() {
        assert!(matches!(nw_regress(&[0.0, 1.0], &[0.0, 1.0], 6.5, &k(1.0)), Err(Error::EmptyNeighborhood(_))));
        // Inside the range but in a gap with no kernel mass.
        assert!(matches!(nw_regress(&[0.0, 200.0], &[0.0, 1.0], 100.0, &k(1.0)), Err(Error::EmptyNeighborhood(_))));
    }

    #[test]
    fn ratio_floor() {
        assert_eq!(density_ratio(0.2, 0.4, 1e-6), (0.5, false));
        let (r, bound) = density_ratio(0.2, 0.0, 1e-3);
        assert!((r - 200.0).abs() < 1e-12 && bound);
        assert_eq!(density_ratio(0.0, 0.3, 1e-6).0, 0.0);
    }

    #[test]
    fn bandwidth_rule() {
        // Standard normal quantiles: sd = 1 and IQR/1.34 > 1 for this sample.
        let n = 2000;
        let mut v: Vec<f64> = (1..=n).map(|i| normal::quantile((i as f64 - 0.5) / n as f64)).collect();
        let m = crate::numeric::mean(&v);
        let sd = sample_sd(&v);
        v.iter_mut().for_each(|x| *x = (*x - m) / sd);
        let s = sorted(&v);
        assert!((quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25)) / 1.34 >= 1.0);
        let h = bandwidth(&v, 0.06).unwrap();
        assert!((h - 1.06 * (n as f64).powf(-0.26)).abs() < 1e-12);
        assert!((h - 0.1469).abs() < 1e-4);
        assert_eq!(bandwidth(&v, 0.0).unwrap(), reference_bandwidth(&v).unwrap());
        assert_eq!(bandwidth(&[2.0; 10], 0.06), Err(Error::DegenerateSample));
    }

    #[test]
    fn zero_iqr_falls_back_to_sd() {
        let mut v = vec![1.0; 20];
        v[0] = 0.0;
        v[19] = 2.0;
        let h = reference_bandwidth(&v).unwrap();
        assert!((h - 1.06 * sample_sd(&v) * 20f64.powf(-0.2)).abs() < 1e-15);
    }

    #[test]
    fn smoother_matches_direct_formulas() {
        let s: Vec<f64> = (0..300).map(|i| ((i * 37) % 101) as f64 / 10.0).collect();
        let y: Vec<f64> = s.iter().map(|v| v.sin()).collect();
        let w: Vec<f64> = (0..300).map(|i| 0.5 + (i % 7) as f64 / 7.0).collect();
        let grid: Vec<f64> = (0..50).map(|i| -0.5 + i as f64 * 0.23).collect();
        let sm = KernelSmoother::new(&s, &grid, 0.4);
        let cfg = k(0.4);
        let dens = sm.density(None);
        let reg = sm.regression(&y, None);
        let wdens = sm.density(Some(&w));
        let wreg = sm.regression(&y, Some(&w));
        let wsum: f64 = w.iter().sum();
        for (j, &x) in grid.iter().enumerate() {
            assert!((dens[j] - kde(&s, x, &cfg)).abs() < 1e-14);
            assert!((reg[j].unwrap() - nw_regress(&s, &y, x, &cfg).unwrap()).abs() < 1e-12);
            let wd: f64 = s.iter().zip(&w).map(|(&v, &wi)| wi * cfg.weight(v - x)).sum::<f64>() / wsum;
            assert!((wdens[j] - wd).abs() < 1e-14);
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..s.len() {
                num += w[i] * cfg.weight(s[i] - x) * y[i];
                den += w[i] * cfg.weight(s[i] - x);
            }
            assert!((wreg[j].unwrap() - num / den).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn kde_integrates_to_one(sample in prop::collection::vec(-10.0f64..10.0, 2..40), h in 0.1f64..2.0) {
            let lo = sample.iter().cloned().fold(f64::INFINITY, f64::min) - 5.0 * h;
            let hi = sample.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 5.0 * h;
            let m = 4000;
            let x: Vec<f64> = (0..=m).map(|i| lo + (hi - lo) * i as f64 / m as f64).collect();
            let f: Vec<f64> = x.iter().map(|&v| kde(&sample, v, &k(h))).collect();
            let total = crate::numeric::trapezoid(&x, &f, 0, m);
            prop_assert!((total - 1.0).abs() < 1e-3);
        }

        #[test]
        fn regression_is_permutation_invariant(
            pairs in prop::collection::vec((-5.0f64..5.0, -3.0f64..3.0), 1..30),
            rot in 0usize..30,
            at in -5.0f64..5.0,
        ) {
            let s: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let mut rs = s.clone();
            let mut ry = y.clone();
            let r = rot % s.len();
            rs.rotate_left(r);
            ry.rotate_left(r);
            rs.reverse();
            ry.reverse();
            let a = nw_regress(&s, &y, at, &k(0.7));
            let b = nw_regress(&rs, &ry, at, &k(0.7));
            match (a, b) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12 * (1.0 + a.abs())),
                (Err(_), Err(_)) => {}
                other => prop_assert!(false, "mismatch {:?}", other),
            }
        }

        #[test]
        fn regression_stays_in_outcome_range(
            pairs in prop::collection::vec((-5.0f64..5.0, -3.0f64..3.0), 1..30),
            at in -5.0f64..5.0,
        ) {
            let s: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            if let Ok(m) = nw_regress(&s, &y, at, &k(0.5)) {
                let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(m >= lo && m <= hi);
            }
        }

        #[test]
        fn bandwidth_is_scale_equivariant(
            sample in prop::collection::vec(-10.0f64..10.0, 3..60),
            scale in 0.01f64..100.0,
        ) {
            if let Ok(h) = bandwidth(&sample, 0.06) {
                let scaled: Vec<f64> = sample.iter().map(|v| v * scale).collect();
                let hs = bandwidth(&scaled, 0.06).unwrap();
                prop_assert!((hs - h * scale).abs() <= 1e-9 * hs);
            }
        }
    }
}
