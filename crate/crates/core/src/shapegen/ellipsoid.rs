//! Closest point on an axis-aligned ellipse / ellipsoid boundary.
//!
//! Reduces the query to the positive orthant with axes sorted in decreasing
//! order, then solves the single-root secular equation by bisection. Points
//! on a symmetry plane fall back to the lower-dimensional problem when the
//! foot point lies on that plane.

/// Foot point on the boundary `Σ (x_i / e_i)² = 1` nearest to `y`.
pub fn closest_point<const N: usize>(axes: [f64; N], y: [f64; N]) -> [f64; N] {
    let mut order: [usize; N] = std::array::from_fn(|i| i);
    order.sort_by(|&a, &b| axes[b].total_cmp(&axes[a]));
    let e: [f64; N] = std::array::from_fn(|i| axes[order[i]]);
    let ys: [f64; N] = std::array::from_fn(|i| y[order[i]].abs());
    let mut xs = [0.0; N];
    foot_sorted(&e, &ys, &mut xs);
    let mut out = [0.0; N];
    for i in 0..N {
        out[order[i]] = xs[i].copysign(y[order[i]]);
    }
    out
}

/// True when `y` lies inside or on the boundary.
pub fn contains<const N: usize>(axes: [f64; N], y: [f64; N]) -> bool {
    level(axes, y) <= 1.0
}

/// `Σ (y_i / e_i)²`
pub fn level<const N: usize>(axes: [f64; N], y: [f64; N]) -> f64 {
    (0..N).map(|i| (y[i] / axes[i]).powi(2)).sum()
}

fn foot_sorted(e: &[f64], y: &[f64], x: &mut [f64]) {
    let n = e.len();
    let m = n - 1;
    if n == 1 {
        x[0] = e[0];
        return;
    }
    let em2 = e[m] * e[m];
    if y[m] > 0.0 {
        let u = secular_root(e, y, em2);
        for i in 0..n {
            x[i] = e[i] * e[i] * y[i] / (u + e[i] * e[i] - em2);
        }
        return;
    }
    // Query on the plane x_m = 0: the foot either leaves the plane (interior
    // candidate) or stays on it.
    let mut s = 0.0;
    let mut feasible = true;
    for i in 0..m {
        if y[i] == 0.0 {
            x[i] = 0.0;
            continue;
        }
        let d = e[i] * e[i] - em2;
        if d <= 0.0 {
            feasible = false;
            break;
        }
        x[i] = e[i] * e[i] * y[i] / d;
        s += (x[i] / e[i]).powi(2);
    }
    if feasible && s < 1.0 {
        x[m] = e[m] * (1.0 - s).sqrt();
        return;
    }
    x[m] = 0.0;
    foot_sorted(&e[..m], &y[..m], &mut x[..m]);
}

/// Root `u > 0` of `Σ (e_i y_i / (u + e_i² − e_m²))² = 1`, which is strictly
/// decreasing in `u` and unbounded at `u → 0⁺` because `y_m > 0`.
fn secular_root(e: &[f64], y: &[f64], em2: f64) -> f64 {
    let g = |u: f64| -> f64 {
        e.iter()
            .zip(y)
            .map(|(&ei, &yi)| (ei * yi / (u + ei * ei - em2)).powi(2))
            .sum::<f64>()
            - 1.0
    };
    let mut lo = 0.0;
    let mut hi = e.iter().zip(y).map(|(a, b)| (a * b).powi(2)).sum::<f64>().sqrt();
    for _ in 0..2200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= 4.0 * f64::EPSILON * lo {
            break;
        }
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
