//! Central finite differences, used as an independent oracle for tape gradients.

/// Relative error used throughout the gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_difference<F>(f: &mut F, x: &[f64], i: usize, step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    probe[i] = x[i] + step;
    let up = f(&probe);
    probe[i] = x[i] - step;
    let down = f(&probe);
    (up - down) / (2.0 * step)
}

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub probed: usize,
    pub passed: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn pass_rate(&self) -> f64 {
        if self.probed == 0 {
            1.0
        } else {
            self.passed as f64 / self.probed as f64
        }
    }
}

/// Compares `analytic` against central differences on the listed coordinates.
pub fn check<F>(
    mut f: F,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    step: f64,
    tol: f64,
) -> GradCheck
where
    F: FnMut(&[f64]) -> f64,
{
    let mut out = GradCheck::default();
    for &i in coords {
        let fd = central_difference(&mut f, x, i, step);
        let err = relative_error(analytic[i], fd);
        out.probed += 1;
        if err <= tol {
            out.passed += 1;
        }
        out.worst = out.worst.max(err);
    }
    out
}
