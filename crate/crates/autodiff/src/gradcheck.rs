//! Central finite differences, used to validate analytic gradients.
//!
//! Only forward evaluations are used here, so the check stays independent of
//! the backward pass it validates.

/// Outcome of comparing one analytic partial derivative against finite differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Probe {
    /// Relative error between the analytic and numeric value.
    Checked(f64),
    /// One-sided slopes disagree: the probe straddles a kink (e.g. ReLU at 0).
    NonSmooth,
}

/// Relative error with a small absolute floor so exact zeros compare cleanly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-5);
    (analytic - numeric).abs() / scale
}

/// Compares `analytic` to the central difference of `f` along one coordinate.
///
/// `f(delta)` must evaluate the function with the probed coordinate shifted by `delta`.
pub fn probe(mut f: impl FnMut(f64) -> f64, analytic: f64, h: f64) -> Probe {
    let plus = f(h);
    let minus = f(-h);
    let center = f(0.0);
    let right = (plus - center) / h;
    let left = (center - minus) / h;
    let central = (plus - minus) / (2.0 * h);
    // Smooth functions have one-sided slopes within O(h) of each other.
    if (right - left).abs() > 1e-3 * (1.0 + central.abs()) {
        return Probe::NonSmooth;
    }
    // A kink inside (h/2, h) shifts the wide difference but not the narrow one.
    let narrow = (f(0.5 * h) - f(-0.5 * h)) / h;
    if (narrow - central).abs() > 1e-6 * (1.0 + central.abs()) {
        return Probe::NonSmooth;
    }
    Probe::Checked(relative_error(analytic, central))
}

/// Summary of a batch of probes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckSummary {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl GradCheckSummary {
    pub fn record(&mut self, p: Probe) {
        match p {
            Probe::Checked(e) => {
                self.checked += 1;
                self.max_rel_error = self.max_rel_error.max(e);
            }
            Probe::NonSmooth => self.skipped += 1,
        }
    }

    pub fn passes(&self, tol: f64, min_checked: usize) -> bool {
        self.checked >= min_checked && self.max_rel_error < tol
    }
}
