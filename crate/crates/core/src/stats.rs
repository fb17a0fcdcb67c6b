//! Paired-comparison statistics: one-sample t-test, t-based confidence
//! intervals, and Holm step-down correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::sig;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// Student-t cumulative distribution function.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * regularized_incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Two-sided p-value of a t statistic.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    regularized_incomplete_beta(0.5 * df, 0.5, df / (df + t * t)).min(1.0)
}

/// Quantile of the Student-t distribution, by bisection on the CDF.
pub fn student_t_quantile(p: f64, df: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile probability must be in (0, 1)");
    if p < 0.5 {
        return -student_t_quantile(1.0 - p, df);
    }
    if p == 0.5 {
        return 0.0;
    }
    let mut hi = 1.0;
    while student_t_cdf(hi, df) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if student_t_cdf(mid, df) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_sd(values: &[f64], mean: f64) -> f64 {
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (values.len() as f64 - 1.0)).sqrt()
}

/// A mean with its 95% t-interval, absent for a single observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub n: usize,
    #[serde(serialize_with = "sig::f64")]
    pub mean: f64,
    #[serde(serialize_with = "sig::opt_pair")]
    pub ci95: Option<(f64, f64)>,
}

pub fn mean_ci95(values: &[f64]) -> Result<MeanCi> {
    if values.is_empty() {
        return Err(Error::Empty("no values for a mean".into()));
    }
    let n = values.len();
    let m = mean(values);
    let ci95 = (n >= 2).then(|| {
        let half = student_t_quantile(0.975, (n - 1) as f64) * sample_sd(values, m) / (n as f64).sqrt();
        (m - half, m + half)
    });
    Ok(MeanCi { n, mean: m, ci95 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    #[serde(serialize_with = "sig::vec")]
    pub differences: Vec<f64>,
    #[serde(serialize_with = "sig::f64")]
    pub mean_diff: f64,
    #[serde(serialize_with = "sig::pair")]
    pub ci95: (f64, f64),
    #[serde(serialize_with = "sig::f64")]
    pub t_statistic: f64,
    pub df: usize,
    #[serde(serialize_with = "sig::f64")]
    pub p_value: f64,
    /// Set when the skewness/kurtosis screen suggests non-normal
    /// differences. Advisory only.
    pub normality_advisory: bool,
}

/// Skewness / excess-kurtosis screen: flags when either exceeds twice its
/// large-sample standard error. Needs at least 4 values to say anything.
pub fn normality_doubtful(values: &[f64]) -> bool {
    let n = values.len();
    if n < 4 {
        return false;
    }
    let m = mean(values);
    let nf = n as f64;
    let m2 = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / nf;
    if m2 == 0.0 {
        return false;
    }
    let m3 = values.iter().map(|v| (v - m).powi(3)).sum::<f64>() / nf;
    let m4 = values.iter().map(|v| (v - m).powi(4)).sum::<f64>() / nf;
    let skew = m3 / m2.powf(1.5);
    let kurt = m4 / (m2 * m2) - 3.0;
    skew.abs() > 2.0 * (6.0 / nf).sqrt() || kurt.abs() > 2.0 * (24.0 / nf).sqrt()
}

/// Two-sided one-sample t-test of the differences against zero.
pub fn one_sample_t(differences: &[f64]) -> Result<PairedComparison> {
    let n = differences.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("need at least 2 differences, got {n}")));
    }
    if differences.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidParameter("non-finite difference".into()));
    }
    let m = mean(differences);
    let sd = sample_sd(differences, m);
    if sd == 0.0 {
        return Err(Error::Degenerate("all differences are equal".into()));
    }
    let df = n - 1;
    let se = sd / (n as f64).sqrt();
    let t = m / se;
    let half = student_t_quantile(0.975, df as f64) * se;
    Ok(PairedComparison {
        differences: differences.to_vec(),
        mean_diff: m,
        ci95: (m - half, m + half),
        t_statistic: t,
        df,
        p_value: student_t_two_sided_p(t, df as f64),
        normality_advisory: normality_doubtful(differences),
    })
}

/// Holm step-down adjustment; results are returned in input order.
pub fn holm_correct(p_values: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidProbability(*p));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|a, b| p_values[*a].total_cmp(&p_values[*b]).then(a.cmp(b)));
    let mut adjusted = vec![0.0; m];
    let mut running = 0.0f64;
    for (rank, &i) in order.iter().enumerate() {
        let scaled = ((m - rank) as f64 * p_values[i]).min(1.0);
        running = running.max(scaled);
        adjusted[i] = running;
    }
    Ok(adjusted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn t_test_examples() {
        let r = one_sample_t(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.mean_diff, 2.0);
        assert_eq!(r.df, 2);
        assert!((r.t_statistic - 3.464_101_615_137_755).abs() < 1e-12);
        assert!((r.p_value - 0.074_179_900_227_448_53).abs() < 1e-10);

        let r = one_sample_t(&[-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(r.t_statistic, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-15);

        assert!(matches!(
            one_sample_t(&[5.0, 5.0, 5.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(one_sample_t(&[5.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn holm_examples() {
        assert_eq!(holm_correct(&[0.01, 0.04]).unwrap(), vec![0.02, 0.04]);
        assert_eq!(holm_correct(&[0.3]).unwrap(), vec![0.3]);
        assert_eq!(holm_correct(&[0.5, 0.9]).unwrap(), vec![1.0, 1.0]);
        assert!(matches!(
            holm_correct(&[0.2, 1.5]),
            Err(Error::InvalidProbability(_))
        ));
        assert!(holm_correct(&[]).unwrap().is_empty());
    }

    #[test]
    fn mean_ci_examples() {
        let ci = mean_ci95(&[10.0, 14.0, 18.0]).unwrap();
        assert_eq!(ci.mean, 14.0);
        let (lo, hi) = ci.ci95.unwrap();
        assert!((lo - 4.063_449_153_121_816).abs() < 1e-9);
        assert!((hi - 23.936_550_846_878_184).abs() < 1e-9);
        assert_eq!(mean_ci95(&[3.0]).unwrap().ci95, None);
        assert_eq!(mean_ci95(&[0.0, 0.0, 0.0]).unwrap().ci95, Some((0.0, 0.0)));
    }

    #[test]
    fn quantile_special_cases() {
        // df = 1 is Cauchy: q(0.975) = tan(0.475 pi)
        let expected = (0.475 * std::f64::consts::PI).tan();
        assert!((student_t_quantile(0.975, 1.0) - expected).abs() < 1e-9);
        assert!((student_t_cdf(0.0, 4.0) - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn holm_properties(p in prop::collection::vec(0.0f64..=1.0, 1..12)) {
            let adj = holm_correct(&p).unwrap();
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|a, b| p[*a].total_cmp(&p[*b]).then(a.cmp(b)));
            for w in order.windows(2) {
                prop_assert!(adj[w[0]] <= adj[w[1]]);
            }
            for (a, r) in adj.iter().zip(&p) {
                prop_assert!(a >= r && *a <= 1.0);
            }
        }

        #[test]
        fn t_test_antisymmetric(d in prop::collection::vec(-10.0f64..10.0, 2..15)) {
            prop_assume!(d.iter().any(|x| (x - d[0]).abs() > 1e-6));
            let a = one_sample_t(&d).unwrap();
            let neg: Vec<f64> = d.iter().map(|x| -x).collect();
            let b = one_sample_t(&neg).unwrap();
            prop_assert!((a.t_statistic + b.t_statistic).abs() < 1e-9 * (1.0 + a.t_statistic.abs()));
            prop_assert!((a.p_value - b.p_value).abs() < 1e-12);
            prop_assert!(a.ci95.0 <= a.mean_diff && a.mean_diff <= a.ci95.1);
        }

        #[test]
        fn ci_shrinks_with_n(base in prop::collection::vec(-5.0f64..5.0, 2..8)) {
            prop_assume!(base.iter().any(|x| (x - base[0]).abs() > 1e-3));
            // repeating the sample keeps its spread while n grows
            let small = mean_ci95(&base).unwrap().ci95.unwrap();
            let doubled: Vec<f64> = base.iter().chain(base.iter()).copied().collect();
            let large = mean_ci95(&doubled).unwrap().ci95.unwrap();
            prop_assert!(large.1 - large.0 < small.1 - small.0);
        }
    }
}
