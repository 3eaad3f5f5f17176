// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small descriptive statistics used by the profiler, the masker and the
//! drift metrics. All standard deviations use the population convention.

/// Arithmetic mean; `NaN` on empty input.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation around a precomputed mean.
pub fn pop_std_with_mean(xs: &[f64], mu: f64) -> f64 {
    (xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Population standard deviation.
pub fn pop_std(xs: &[f64]) -> f64 {
    pop_std_with_mean(xs, mean(xs))
}

/// Formats a float with nine significant digits, the precision used for
/// every numeric CSV cell.
pub fn sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if (-5..9).contains(&mag) {
        let decimals = (8 - mag).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.8e}")
    }
}
