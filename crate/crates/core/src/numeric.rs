//! Small numerical utilities: summary statistics, quadrature, root finding.

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation with the n − 1 divisor.
pub fn sample_sd(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    let ss: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (x.len() - 1) as f64).sqrt()
}

/// Linear-interpolation quantile of an ascending slice (Hyndman–Fan type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Trapezoid rule for `y` sampled on `x[lo..=hi]`.
pub fn trapezoid(x: &[f64], y: &[f64], lo: usize, hi: usize) -> f64 {
    (lo..hi).map(|j| 0.5 * (x[j + 1] - x[j]) * (y[j] + y[j + 1])).sum()
}

/// Trapezoid weights for nodes `x[lo..=hi]`; entries outside the range are zero.
pub fn trapezoid_weights(x: &[f64], lo: usize, hi: usize) -> Vec<f64> {
    let mut w = vec![0.0; x.len()];
    for j in lo..hi {
        let half = 0.5 * (x[j + 1] - x[j]);
        w[j] += half;
        w[j + 1] += half;
    }
    w
}

/// Composite Simpson rule over [a, b] split at `breaks` (points outside the
/// interval are ignored), with `panels` subintervals per piece.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, breaks: &[f64], panels: usize) -> f64 {
    let mut cuts = vec![a];
    cuts.extend(breaks.iter().copied().filter(|&t| t > a && t < b));
    cuts.push(b);
    cuts.sort_by(f64::total_cmp);
    let m = panels + panels % 2;
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let h = (hi - lo) / m as f64;
        // One-sided limits at the piece ends avoid evaluating on a jump.
        let nudge = h * 1e-9;
        let mut s = f(lo + nudge) + f(hi - nudge);
        for k in 1..m {
            s += f(lo + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        total += s * h / 3.0;
    }
    total
}

/// Bisection for a sign change of `f` on [lo, hi].
pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> Option<f64> {
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Some(lo);
    }
    if fhi == 0.0 {
        return Some(hi);
    }
    if flo.signum() == fhi.signum() || !flo.is_finite() || !fhi.is_finite() {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 || (hi - lo) < tol {
            return Some(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Linear interpolation on an ascending grid; `None` outside [x0, x_last].
pub fn interpolate(x: &[f64], y: &[f64], t: f64) -> Option<f64> {
    let n = x.len();
    if n == 0 || t < x[0] || t > x[n - 1] || t.is_nan() {
        return None;
    }
    let j = x.partition_point(|&v| v <= t);
    if j >= n {
        return Some(y[n - 1]);
    }
    if j == 0 {
        return Some(y[0]);
    }
    let (x0, x1) = (x[j - 1], x[j]);
    if x1 == x0 {
        return Some(y[j]);
    }
    let w = (t - x0) / (x1 - x0);
    Some(y[j - 1] + w * (y[j] - y[j - 1]))
}
