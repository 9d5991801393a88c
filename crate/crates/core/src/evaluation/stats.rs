//! Hypothesis tests used to compare match rates and preferences.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::factorial::ln_binomial;
use statrs::function::gamma::gamma_ur;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
    #[error("pooled proportion is {0}; the standard error is zero")]
    DegeneratePool(f64),
    #[error("contingency table has a zero row or column total")]
    ZeroMargin,
    #[error("contingency table must be at least 2x2 and rectangular")]
    BadShape,
    #[error("null proportion must lie strictly between 0 and 1, got {0}")]
    BadProportion(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatResult {
    pub statistic: f64,
    pub p_value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub df: Option<u32>,
}

/// Pooled two-proportion z-test with a two-sided normal p-value.
pub fn two_proportion_z(k1: u64, n1: u64, k2: u64, n2: u64) -> Result<StatResult, StatsError> {
    if n1 == 0 || n2 == 0 || k1 > n1 || k2 > n2 {
        return Err(StatsError::InvalidCounts(format!("{k1}/{n1} vs {k2}/{n2}")));
    }
    let (p1, p2) = (k1 as f64 / n1 as f64, k2 as f64 / n2 as f64);
    let pooled = (k1 + k2) as f64 / (n1 + n2) as f64;
    if pooled <= 0.0 || pooled >= 1.0 {
        return Err(StatsError::DegeneratePool(pooled));
    }
    let se = (pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    let z = (p1 - p2) / se;
    let p = erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0);
    Ok(StatResult {
        statistic: z,
        p_value: p,
        df: None,
    })
}

/// Pearson chi-square test of independence on an r x c table of counts.
pub fn chi_square_independence(table: &[Vec<u64>]) -> Result<StatResult, StatsError> {
    let rows = table.len();
    let cols = table.first().map_or(0, Vec::len);
    if rows < 2 || cols < 2 || table.iter().any(|r| r.len() != cols) {
        return Err(StatsError::BadShape);
    }
    let row_tot: Vec<f64> = table.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let col_tot: Vec<f64> = (0..cols).map(|j| table.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
    if row_tot.iter().chain(&col_tot).any(|&t| t == 0.0) {
        return Err(StatsError::ZeroMargin);
    }
    let n: f64 = row_tot.iter().sum();
    let mut x2 = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &obs) in row.iter().enumerate() {
            let expected = row_tot[i] * col_tot[j] / n;
            x2 += (obs as f64 - expected).powi(2) / expected;
        }
    }
    let df = ((rows - 1) * (cols - 1)) as u32;
    let p = if x2 <= 0.0 {
        1.0
    } else {
        gamma_ur(df as f64 / 2.0, x2 / 2.0).clamp(0.0, 1.0)
    };
    Ok(StatResult {
        statistic: x2,
        p_value: p,
        df: Some(df),
    })
}

fn binomial_pmf(i: u64, n: u64, p0: f64) -> f64 {
    (ln_binomial(n, i) + i as f64 * p0.ln() + (n - i) as f64 * (1.0 - p0).ln()).exp()
}

/// Exact two-sided binomial test: sums the probability of every outcome no
/// more likely than `k` under Binomial(n, p0). The reported statistic is `k`.
pub fn exact_binomial_two_sided(k: u64, n: u64, p0: f64) -> Result<StatResult, StatsError> {
    if k > n {
        return Err(StatsError::InvalidCounts(format!("{k} successes out of {n}")));
    }
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(StatsError::BadProportion(p0));
    }
    // Relative slack so that outcomes tied with k in exact arithmetic are not
    // lost to rounding.
    const REL_TOL: f64 = 1e-7;
    let threshold = binomial_pmf(k, n, p0) * (1.0 + REL_TOL);
    let p: f64 = (0..=n).map(|i| binomial_pmf(i, n, p0)).filter(|&d| d <= threshold).sum();
    Ok(StatResult {
        statistic: k as f64,
        p_value: p.min(1.0),
        df: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigUint;
    use num_traits::{One, ToPrimitive, Zero};
    use proptest::prelude::*;

    /// Composite Simpson's rule.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    fn normal_two_sided_oracle(z: f64) -> f64 {
        let pdf = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        1.0 - 2.0 * simpson(pdf, 0.0, z.abs(), 20_000)
    }

    /// Gamma(df/2) for integer df from Gamma(1) = 1 and Gamma(1/2) = sqrt(pi).
    fn half_gamma(df: u32) -> f64 {
        let (mut g, mut a) = if df.is_multiple_of(2) {
            (1.0, 1.0)
        } else {
            (std::f64::consts::PI.sqrt(), 0.5)
        };
        while a < df as f64 / 2.0 {
            g *= a;
            a += 1.0;
        }
        g
    }

    /// Upper chi-square tail integrated in u = sqrt(t), which removes the
    /// singularity of the density at zero for df = 1.
    fn chi2_tail_oracle(x: f64, df: u32) -> f64 {
        let k = df as f64 / 2.0;
        let norm = 2f64.powf(k) * half_gamma(df);
        let f = |u: f64| 2.0 * u.powi(df as i32 - 1) * (-u * u / 2.0).exp() / norm;
        simpson(f, x.sqrt(), x.sqrt() + 40.0, 200_000)
    }

    fn choose(n: u64, k: u64) -> BigUint {
        (0..k).fold(BigUint::one(), |acc, i| acc * (n - i) / (i + 1))
    }

    /// Exact minlike p-value at p0 = 1/2 over rationals.
    fn binomial_half_oracle(k: u64, n: u64) -> f64 {
        let target = choose(n, k);
        let num = (0..=n)
            .map(|i| choose(n, i))
            .filter(|c| *c <= target)
            .fold(BigUint::zero(), |a, c| a + c);
        let den = BigUint::one() << n;
        let p = num.to_f64().unwrap() / den.to_f64().unwrap();
        p.min(1.0)
    }

    #[test]
    fn z_test_reference_case() {
        let r = two_proportion_z(45, 80, 28, 80).unwrap();
        assert!((r.statistic - 2.698285231410648).abs() < 1e-9);
        assert!((r.p_value - 0.0069697694332348).abs() < 1e-9);
        assert!((r.p_value - normal_two_sided_oracle(r.statistic)).abs() < 1e-9);
    }

    #[test]
    fn z_test_edges() {
        let r = two_proportion_z(40, 80, 40, 80).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert!(matches!(two_proportion_z(80, 80, 80, 80), Err(StatsError::DegeneratePool(_))));
        assert!(matches!(two_proportion_z(0, 80, 0, 80), Err(StatsError::DegeneratePool(_))));
        assert!(two_proportion_z(81, 80, 1, 80).is_err());
        assert!(two_proportion_z(0, 0, 1, 80).is_err());
    }

    #[test]
    fn chi_square_reference_cases() {
        let r = chi_square_independence(&[vec![15, 15, 10], vec![7, 14, 19]]).unwrap();
        assert!((r.statistic - 5.736677115987462).abs() < 1e-9);
        assert_eq!(r.df, Some(2));
        assert!((r.p_value - 0.056793206857096004).abs() < 1e-9);
        // df = 2 tail is exp(-x/2) in closed form
        assert!((r.p_value - (-r.statistic / 2.0).exp()).abs() < 1e-12);

        let r = chi_square_independence(&[vec![10, 10], vec![10, 10]]).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));

        let r = chi_square_independence(&[vec![5, 0], vec![0, 5]]).unwrap();
        assert!((r.statistic - 10.0).abs() < 1e-12);
        assert_eq!(r.df, Some(1));
        assert!((r.p_value - 0.001565402258002549).abs() < 1e-9);
        assert!((r.p_value - chi2_tail_oracle(10.0, 1)).abs() < 1e-6);
    }

    #[test]
    fn chi_square_errors() {
        assert_eq!(chi_square_independence(&[vec![0, 0], vec![1, 2]]), Err(StatsError::ZeroMargin));
        assert_eq!(chi_square_independence(&[vec![1, 0], vec![1, 0]]), Err(StatsError::ZeroMargin));
        assert_eq!(chi_square_independence(&[vec![1, 2]]), Err(StatsError::BadShape));
        assert_eq!(chi_square_independence(&[vec![1, 2], vec![1]]), Err(StatsError::BadShape));
    }

    #[test]
    fn binomial_reference_cases() {
        let r = exact_binomial_two_sided(55, 87, 0.5).unwrap();
        assert!((r.p_value - binomial_half_oracle(55, 87)).abs() < 1e-9);
        assert!((r.p_value - 0.017827552929735955).abs() < 1e-9);
        assert!((exact_binomial_two_sided(3, 3, 0.5).unwrap().p_value - 0.25).abs() < 1e-12);
        assert_eq!(exact_binomial_two_sided(44, 87, 0.5).unwrap().p_value, 1.0);
        // asymmetric null against a scipy-computed value
        assert!((exact_binomial_two_sided(7, 20, 0.3).unwrap().p_value - 0.6294979666766769).abs() < 1e-9);
        assert!(exact_binomial_two_sided(4, 3, 0.5).is_err());
        assert!(exact_binomial_two_sided(1, 3, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn z_is_antisymmetric(n1 in 1u64..200, n2 in 1u64..200, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (k1, k2) = ((a * n1 as f64) as u64, (b * n2 as f64) as u64);
            if let (Ok(x), Ok(y)) = (two_proportion_z(k1, n1, k2, n2), two_proportion_z(k2, n2, k1, n1)) {
                prop_assert!((x.statistic + y.statistic).abs() < 1e-12);
                prop_assert!((x.p_value - y.p_value).abs() < 1e-12);
                prop_assert!((x.p_value - normal_two_sided_oracle(x.statistic)).abs() < 1e-6);
            }
        }

        #[test]
        fn binomial_half_is_symmetric_and_exact(n in 1u64..120, frac in 0.0f64..=1.0) {
            let k = (frac * n as f64) as u64;
            let p = exact_binomial_two_sided(k, n, 0.5).unwrap().p_value;
            let q = exact_binomial_two_sided(n - k, n, 0.5).unwrap().p_value;
            prop_assert!((p - q).abs() < 1e-12);
            prop_assert!((p - binomial_half_oracle(k, n)).abs() < 1e-9);
        }

        #[test]
        fn chi_square_matches_quadrature(a in 1u64..30, b in 1u64..30, c in 1u64..30, d in 1u64..30, e in 1u64..30, f in 1u64..30) {
            let r = chi_square_independence(&[vec![a, b, c], vec![d, e, f]]).unwrap();
            prop_assert!((r.p_value - (-r.statistic / 2.0).exp()).abs() < 1e-9);
            let r = chi_square_independence(&[vec![a, b], vec![d, e]]).unwrap();
            if r.statistic > 1e-3 {
                prop_assert!((r.p_value - chi2_tail_oracle(r.statistic, 1)).abs() < 1e-6);
            }
        }
    }
}
