//! Binomial proportion intervals.

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Wilson score interval for `successes / trials` at quantile `z`.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if successes == 0 {
        0.0
    } else {
        (center - half).max(0.0)
    };
    let hi = if successes >= trials {
        1.0
    } else {
        (center + half).min(1.0)
    };
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        // 5/100 at 95%: (0.02154, 0.11175)
        let (lo, hi) = wilson_interval(5, 100, Z95);
        assert!((lo - 0.021_543).abs() < 1e-5, "{lo}");
        assert!((hi - 0.111_752).abs() < 1e-5, "{hi}");
        let (lo, _) = wilson_interval(0, 50, Z95);
        assert_eq!(lo, 0.0);
        let (lo, hi) = wilson_interval(50, 50, Z95);
        assert!(lo > 0.9 && hi == 1.0);
    }
}
