//! Central finite-difference gradient checking.
//!
//! Coordinates where the left and right one-sided slopes disagree sit on a
//! ReLU or max-pool kink; the derivative is not defined there, so they are
//! reported as skipped instead of compared.

use super::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-6;
/// Gradients smaller than this are compared on an absolute scale.
pub const MAGNITUDE_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol && self.skipped_kinks * 4 <= self.checked
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Compare `analytic` against central differences of `f` at the listed
/// flat coordinates of `x`.
pub fn check(f: impl Fn(&Tensor) -> f64, x: &Tensor, analytic: &Tensor, coords: &[usize], eps: f64) -> GradCheckReport {
    assert_eq!(x.shape(), analytic.shape());
    let f0 = f(x);
    let mut report = GradCheckReport::default();
    for &i in coords {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let fp = f(&xp);
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        let fm = f(&xm);
        let right = (fp - f0) / eps;
        let left = (f0 - fm) / eps;
        if (right - left).abs() > 1e-3 * right.abs().max(left.abs()).max(MAGNITUDE_FLOOR) {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let e = rel_err(a, numeric);
        report.checked += 1;
        if e > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(e);
            if e >= report.max_rel_err {
                report.worst = Some((i, a, numeric));
            }
        }
    }
    report
}

/// Evenly spread coordinate sample of at most `n` indices out of `len`.
pub fn sample_coords(len: usize, n: usize, offset: usize) -> Vec<usize> {
    if len <= n {
        return (0..len).collect();
    }
    let step = len as f64 / n as f64;
    (0..n).map(|k| ((k as f64 * step) as usize + offset) % len).collect()
}
