use libm::erfc;

/// Standard normal distribution function, accurate in both tails.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson rule for ∫_0^x φ.
    fn simpson(x: f64) -> f64 {
        let n = 20_000;
        let h = x / n as f64;
        let mut s = norm_pdf(0.0) + norm_pdf(x);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * norm_pdf(i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn matches_quadrature() {
        for x in [-3.0, -1.2, -0.1, 0.0, 0.4, 1.0, 2.5] {
            let expected = 0.5 + simpson(x);
            assert!((norm_cdf(x) - expected).abs() < 1e-12, "x = {x}: {}", norm_cdf(x) - expected);
        }
    }

    #[test]
    fn symmetric_and_tail_accurate() {
        for x in [0.3, 1.7, 4.0] {
            assert!((norm_cdf(x) + norm_cdf(-x) - 1.0).abs() < 1e-15);
        }
        // Φ(-10) ≈ 7.6198530241605e-24
        assert!((norm_cdf(-10.0) / 7.619_853_024_160_5e-24 - 1.0).abs() < 1e-9);
    }
}
