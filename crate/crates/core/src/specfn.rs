//! Special functions and expectations under gamma distributions.
//!
//! Every bound and gradient in the inference code is assembled from the
//! kernels in this module. The checked entry points return
//! [`PofError::Domain`] for invalid arguments; the `*_unchecked` variants are
//! used in hot loops where the caller has already validated positivity.

use crate::error::{PofError, Result};

/// Shape/rate parameterisation of a gamma distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaParams {
    shape: f64,
    rate: f64,
}

impl GammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite()) {
            return Err(PofError::Validation(format!(
                "gamma shape must be positive and finite, got {shape}"
            )));
        }
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(PofError::Validation(format!(
                "gamma rate must be positive and finite, got {rate}"
            )));
        }
        Ok(Self { shape, rate })
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
}

fn check_positive(function: &'static str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(PofError::Domain { function, value: x })
    }
}

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> Result<f64> {
    check_positive("ln_gamma", x)?;
    Ok(ln_gamma_unchecked(x))
}

#[inline]
pub(crate) fn ln_gamma_unchecked(x: f64) -> f64 {
    libm::lgamma(x)
}

pub fn digamma(x: f64) -> Result<f64> {
    check_positive("digamma", x)?;
    Ok(digamma_unchecked(x))
}

pub fn trigamma(x: f64) -> Result<f64> {
    check_positive("trigamma", x)?;
    Ok(trigamma_unchecked(x))
}

// Shift target for the recurrences; the asymptotic series is accurate to
// well below 1e-12 from here on.
const ASYMPTOTIC_FROM: f64 = 6.0;

/// B_{2k} / (2k) for k = 1..7.
const DIGAMMA_COEFFS: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
];

/// B_{2k} for k = 1..7.
const BERNOULLI_EVEN: [f64; 7] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
];

#[inline]
pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < ASYMPTOTIC_FROM {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    // Horner over powers of x^-2, highest order first.
    let mut series = 0.0;
    for c in DIGAMMA_COEFFS.iter().rev() {
        series = series * inv2 + c;
    }
    acc + x.ln() - 0.5 / x - series * inv2
}

#[inline]
pub(crate) fn trigamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < ASYMPTOTIC_FROM {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut series = 0.0;
    for b in BERNOULLI_EVEN.iter().rev() {
        series = series * inv2 + b;
    }
    acc + inv + 0.5 * inv2 + series * inv2 * inv
}

/// Differential entropy of Gamma(shape, rate).
pub fn gamma_entropy(q: GammaParams) -> f64 {
    entropy_raw(q.shape, q.rate)
}

#[inline]
pub(crate) fn entropy_raw(shape: f64, rate: f64) -> f64 {
    entropy_shape_part(shape) - rate.ln()
}

// Above this shape the direct formulas below cancel catastrophically, so the
// Stirling expansions take over. Truncation error there is O(shape^-6).
const ENTROPY_ASYMPTOTIC_FROM: f64 = 1.0e3;

/// lnΓ(k) + (1 - k)ψ(k) + k, the shape-only part of the gamma entropy.
#[inline]
pub(crate) fn entropy_shape_part(k: f64) -> f64 {
    if k < ENTROPY_ASYMPTOTIC_FROM {
        return k + ln_gamma_unchecked(k) + (1.0 - k) * digamma_unchecked(k);
    }
    let inv = 1.0 / k;
    let tail = inv
        * (-1.0 / 3.0
            + inv * (-1.0 / 12.0 + inv * (-1.0 / 90.0 + inv * (1.0 / 120.0 + inv / 210.0))));
    0.5 * (std::f64::consts::TAU * k).ln() + 0.5 + tail
}

/// Derivative of [`entropy_shape_part`]: 1 + (1 - k)ψ'(k).
#[inline]
pub(crate) fn entropy_shape_part_deriv(k: f64) -> f64 {
    if k < ENTROPY_ASYMPTOTIC_FROM {
        return 1.0 + (1.0 - k) * trigamma_unchecked(k);
    }
    let inv = 1.0 / k;
    inv * (0.5
        + inv * (1.0 / 3.0 + inv * (1.0 / 6.0 + inv * (1.0 / 30.0 + inv * (-1.0 / 30.0)))))
}

/// E[a] under Gamma(shape, rate).
pub fn gamma_expect_a(q: GammaParams) -> f64 {
    q.shape / q.rate
}

/// E[log a] under Gamma(shape, rate).
pub fn gamma_expect_log_a(q: GammaParams) -> f64 {
    digamma_unchecked(q.shape) - q.rate.ln()
}

/// log E[exp(-u a)] under Gamma(shape, rate).
///
/// The expectation diverges for `u <= -rate`; that case returns
/// `f64::INFINITY`, which downstream bounds turn into `-inf` so line
/// searches reject the point.
pub fn log_gamma_mgf(u: f64, q: GammaParams) -> f64 {
    log_mgf_raw(u, q.shape, q.rate)
}

#[inline]
pub(crate) fn log_mgf_raw(u: f64, shape: f64, rate: f64) -> f64 {
    if u > -rate {
        -shape * (u / rate).ln_1p()
    } else {
        f64::INFINITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma};

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn entropy_shape_part_joins_smoothly() {
        for k in [900.0, 999.0, 1000.0, 1500.0, 3000.0] {
            let direct = k + ln_gamma_unchecked(k) + (1.0 - k) * digamma_unchecked(k);
            let asym = 0.5 * (std::f64::consts::TAU * k).ln() + 0.5 - 1.0 / (3.0 * k);
            assert!((entropy_shape_part(k) - direct).abs() < 1e-9, "k={k}");
            assert!((entropy_shape_part(k) - asym).abs() < 1e-6, "k={k}");
            let d_direct = 1.0 + (1.0 - k) * trigamma_unchecked(k);
            assert!((entropy_shape_part_deriv(k) - d_direct).abs() < 1e-11, "k={k}");
        }
    }

    #[test]
    fn entropy_shape_part_stays_accurate_for_huge_shapes() {
        // Tends to ½ln(2πek); the derivative must stay positive and ≈ 1/(2k).
        for k in [1e6, 1e10, 1e16] {
            let limit = 0.5 * (std::f64::consts::TAU * std::f64::consts::E * k).ln();
            assert!((entropy_shape_part(k) - limit).abs() < 1e-5);
            let d = entropy_shape_part_deriv(k);
            assert!(rel(d, 0.5 / k) < 1e-5, "k={k} d={d}");
        }
    }

    // Reference values computed with mpmath at 40 significant digits.
    const ORACLE: [(f64, f64, f64, f64); 13] = [
        (1e-6, 13.815509980749431669, -1000000.5772140199687, 1000000000001.6449317),
        (0.01, 4.5994798780420217225, -100.5608854578686745, 10001.62121352831322),
        (0.5, 0.57236494292470008707, -1.9635100260214234794, 4.9348022005446793094),
        (1.0, 0.0, -0.57721566490153286061, 1.6449340668482264365),
        (1.5, -0.12078223763524522235, 0.036489973978576520559, 0.93480220054467930942),
        (2.0, 0.0, 0.42278433509846713939, 0.64493406684822643647),
        (2.5, 0.28468287047291915963, 0.70315664064524318723, 0.49035775610023486497),
        (3.0, 0.69314718055994530942, 0.92278433509846713939, 0.39493406684822643647),
        (7.3, 7.1478925230222490328, 1.9178203356379860984, 0.14679576813142709816),
        (10.0, 12.801827480081469611, 2.2517525890667211076, 0.10516633568168574612),
        (100.0, 359.13420536957539878, 4.6001618527380874002, 0.010050166663333571395),
        (1e3, 5905.2204232091812118, 6.9072551956488120521, 0.0010005001666666333334),
        (1e6, 12815504.56914761166, 13.815510057964190771, 1.0000005000001666667e-6),
    ];

    #[test]
    fn ln_gamma_matches_high_precision() {
        for &(x, lg, _, _) in &ORACLE {
            let got = ln_gamma(x).unwrap();
            if lg == 0.0 {
                assert_eq!(got, 0.0, "x={x}");
            } else {
                assert!(rel(got, lg) <= 1e-12, "x={x}: {got} vs {lg}");
            }
        }
        assert_abs_diff_eq!(ln_gamma(0.5).unwrap(), 0.5723649429, epsilon = 1e-10);
        assert_abs_diff_eq!(ln_gamma(10.0).unwrap(), 12.8018274801, epsilon = 1e-10);
    }

    #[test]
    fn digamma_and_trigamma_match_high_precision() {
        for &(x, _, dg, tg) in &ORACLE {
            assert!((digamma(x).unwrap() - dg).abs() <= 1e-10 * dg.abs().max(1.0), "x={x}");
            assert!((trigamma(x).unwrap() - tg).abs() <= 1e-10 * tg.abs().max(1.0), "x={x}");
        }
        assert_abs_diff_eq!(digamma(1.0).unwrap(), -0.5772156649, epsilon = 1e-10);
        assert_abs_diff_eq!(digamma(2.0).unwrap(), 0.4227843351, epsilon = 1e-10);
        assert_abs_diff_eq!(trigamma(1.0).unwrap(), 1.6449340668, epsilon = 1e-10);
        assert_abs_diff_eq!(trigamma(2.0).unwrap(), 0.6449340668, epsilon = 1e-10);
        assert_abs_diff_eq!(trigamma(0.5).unwrap(), 4.9348022005, epsilon = 1e-10);
        let x = 1e6;
        assert_abs_diff_eq!(digamma(x).unwrap(), x.ln() - 0.5 / x, epsilon = 1e-12);
    }

    #[test]
    fn domain_errors() {
        for bad in [0.0, -1.0, f64::NAN, f64::INFINITY, f64::NEG_INFINITY] {
            assert!(ln_gamma(bad).is_err());
            assert!(digamma(bad).is_err());
            assert!(trigamma(bad).is_err());
        }
        assert!(GammaParams::new(0.0, 1.0).is_err());
        assert!(GammaParams::new(1.0, -2.0).is_err());
    }

    #[test]
    fn recurrences_hold_on_grid() {
        let mut x = 0.01;
        while x <= 100.0 {
            let d = digamma(x + 1.0).unwrap() - digamma(x).unwrap() - 1.0 / x;
            let t = trigamma(x + 1.0).unwrap() - trigamma(x).unwrap() + 1.0 / (x * x);
            assert!(d.abs() <= 1e-10 * (1.0 / x).max(1.0), "digamma recurrence at {x}: {d}");
            assert!(t.abs() <= 1e-10 * (1.0 / (x * x)).max(1.0), "trigamma recurrence at {x}: {t}");
            x *= 1.07;
        }
    }

    #[test]
    fn entropy_examples() {
        let g = |a, b| GammaParams::new(a, b).unwrap();
        assert_abs_diff_eq!(gamma_entropy(g(1.0, 1.0)), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(gamma_entropy(g(1.0, 2.0)), 1.0 - 2f64.ln(), epsilon = 1e-14);
        assert_abs_diff_eq!(gamma_entropy(g(3.0, 1.0)), 1.8475785104, epsilon = 1e-10);
    }

    #[test]
    fn entropy_monte_carlo_at_shape_three() {
        let q = GammaParams::new(3.0, 1.0).unwrap();
        let dist = Gamma::new(3.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let ln_norm = ln_gamma(3.0).unwrap();
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let a: f64 = dist.sample(&mut rng);
            let neg_log_q = -(2.0 * a.ln() - a - ln_norm);
            s += neg_log_q;
            s2 += neg_log_q * neg_log_q;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - gamma_entropy(q)).abs() <= 3.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn expectations() {
        let q = GammaParams::new(1.0, 1.0).unwrap();
        assert_eq!(gamma_expect_a(q), 1.0);
        assert_abs_diff_eq!(gamma_expect_log_a(q), -0.5772156649, epsilon = 1e-10);
        assert_eq!(gamma_expect_a(GammaParams::new(100.0, 100.0).unwrap()), 1.0);
        assert_eq!(gamma_expect_a(GammaParams::new(5.0, 2.0).unwrap()), 2.5);
    }

    #[test]
    fn log_mgf_examples() {
        let unit = GammaParams::new(1.0, 1.0).unwrap();
        assert_eq!(log_gamma_mgf(0.0, GammaParams::new(3.7, 0.2).unwrap()), 0.0);
        assert_abs_diff_eq!(log_gamma_mgf(1.0, unit), 0.5f64.ln(), epsilon = 1e-15);
        assert_eq!(log_gamma_mgf(-2.0, unit), f64::INFINITY);
        assert_eq!(log_gamma_mgf(-1.0, unit), f64::INFINITY);

        let q = GammaParams::new(2.5, 1.7).unwrap();
        let dist = Gamma::new(2.5, 1.0 / 1.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let a: f64 = dist.sample(&mut rng);
            let v = (-0.3 * a).exp();
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((log_gamma_mgf(0.3, q).exp() - mean).abs() <= 3.0 * se);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn entropy_rate_shift(shape in 0.01f64..200.0, rate in 0.01f64..200.0) {
                let a = gamma_entropy(GammaParams::new(shape, rate).unwrap());
                let b = gamma_entropy(GammaParams::new(shape, 1.0).unwrap()) - rate.ln();
                prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
            }

            #[test]
            fn mgf_monotone_decreasing(shape in 0.05f64..50.0, rate in 0.05f64..50.0,
                                       t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
                let q = GammaParams::new(shape, rate).unwrap();
                // Map into (-rate, 10 rate).
                let u1 = -rate + (t1.min(t2) * 11.0 + 1e-6) * rate;
                let u2 = -rate + (t1.max(t2) * 11.0 + 1e-6) * rate;
                prop_assert!(log_gamma_mgf(u1, q) >= log_gamma_mgf(u2, q));
            }

            #[test]
            fn jensen_on_log_expectation(shape in 0.01f64..1e4, rate in 0.01f64..1e3) {
                let q = GammaParams::new(shape, rate).unwrap();
                prop_assert!(gamma_expect_log_a(q).exp() < gamma_expect_a(q));
            }
        }
    }
}
