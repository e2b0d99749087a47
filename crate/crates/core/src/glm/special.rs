//! Special functions not provided by `statrs`.

/// Trigamma function ψ'(x) for x > 0.
///
/// Upward recurrence to x ≥ 10 followed by the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let r = 1.0 / x;
    let r2 = r * r;
    let series = r + 0.5 * r2
        + r * r2 * (1.0 / 6.0 - r2 * (1.0 / 30.0 - r2 * (1.0 / 42.0 - r2 * (1.0 / 30.0 - r2 * (5.0 / 66.0)))));
    acc + series
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::function::gamma::digamma;
    use std::f64::consts::PI;

    #[test]
    fn known_values() {
        assert!((trigamma(1.0) - PI * PI / 6.0).abs() < 1e-13);
        assert!((trigamma(0.5) - PI * PI / 2.0).abs() < 1e-12);
        // ψ'(2) = π²/6 − 1
        assert!((trigamma(2.0) - (PI * PI / 6.0 - 1.0)).abs() < 1e-13);
    }

    #[test]
    fn matches_digamma_derivative() {
        for &x in &[0.05f64, 0.3, 1.7, 4.2, 9.9, 55.0, 1234.5] {
            let h = 1e-5 * x.max(1.0);
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert!(((trigamma(x) - fd) / fd).abs() < 1e-6, "x={x}");
        }
    }
}
