//! Minimal statistics for the acceptance suite: Welch's t-test and the
//! chi-square goodness-of-fit p-value, via the regularized incomplete
//! gamma/beta functions (Lentz continued fractions).

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation
    const G: [f64; 7] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 6.5;
    for (i, &g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma P(a, x).
fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        // series
        let mut sum = 1.0 / a;
        let mut term = sum;
        let mut n = a;
        for _ in 0..500 {
            n += 1.0;
            term *= x / n;
            sum += term;
            if term.abs() < sum.abs() * 1e-15 {
                break;
            }
        }
        (sum.ln() + a * x.ln() - x - ln_gamma(a)).exp()
    } else {
        // continued fraction for Q, then P = 1 - Q
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / 1e-300;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < 1e-300 {
                d = 1e-300;
            }
            c = b + an / c;
            if c.abs() < 1e-300 {
                c = 1e-300;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-15 {
                break;
            }
        }
        let q = (a * x.ln() - x - ln_gamma(a)).exp() * h;
        1.0 - q
    }
}

/// Survival function of the chi-square distribution with `dof` degrees.
pub fn chi_square_sf(x: f64, dof: usize) -> f64 {
    1.0 - gamma_p(dof as f64 / 2.0, x / 2.0)
}

/// Regularized incomplete beta I_x(a, b).
fn beta_inc(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // continued fraction (Numerical Recipes betacf)
    let cf = |a: f64, b: f64, x: f64| -> f64 {
        let qab = a + b;
        let qap = a + 1.0;
        let qam = a - 1.0;
        let mut c = 1.0;
        let mut d = 1.0 - qab * x / qap;
        if d.abs() < 1e-300 {
            d = 1e-300;
        }
        d = 1.0 / d;
        let mut h = d;
        for m in 1..300 {
            let m = m as f64;
            let m2 = 2.0 * m;
            let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
            d = 1.0 + aa * d;
            if d.abs() < 1e-300 {
                d = 1e-300;
            }
            c = 1.0 + aa / c;
            if c.abs() < 1e-300 {
                c = 1e-300;
            }
            d = 1.0 / d;
            h *= d * c;
            let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
            d = 1.0 + aa * d;
            if d.abs() < 1e-300 {
                d = 1e-300;
            }
            c = 1.0 + aa / c;
            if c.abs() < 1e-300 {
                c = 1e-300;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-12 {
                break;
            }
        }
        h
    };
    if x < (a + 1.0) / (a + b + 2.0) {
        front * cf(a, b, x) / a
    } else {
        1.0 - (ln_gamma(a + b) - ln_gamma(b) - ln_gamma(a)
            + b * (1.0 - x).ln()
            + a * x.ln())
        .exp()
            * cf(b, a, 1.0 - x)
            / b
    }
}

/// Survival function (one-sided upper p) of Student's t with `dof` degrees.
pub fn student_t_sf(t: f64, dof: f64) -> f64 {
    let x = dof / (dof + t * t);
    let p = 0.5 * beta_inc(dof / 2.0, 0.5, x);
    if t > 0.0 {
        p
    } else {
        1.0 - p
    }
}

/// One-sided Welch t-test p-value for mean(a) > mean(b).
pub fn welch_one_sided_p(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    assert!(na >= 2.0 && nb >= 2.0);
    let ma = a.iter().sum::<f64>() / na;
    let mb = b.iter().sum::<f64>() / nb;
    let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (na - 1.0);
    let vb = b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / (nb - 1.0);
    let se2 = va / na + vb / nb;
    if se2 <= 0.0 {
        return if ma > mb { 0.0 } else { 1.0 };
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    student_t_sf(t, dof)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi_square_known_quantiles() {
        // P(chi2_3 > 11.345) = 0.01
        assert!((chi_square_sf(11.345, 3) - 0.01).abs() < 5e-4);
        // P(chi2_9 > 21.666) = 0.01
        assert!((chi_square_sf(21.666, 9) - 0.01).abs() < 5e-4);
        // P(chi2_1 > 3.841) = 0.05
        assert!((chi_square_sf(3.841, 1) - 0.05).abs() < 5e-4);
    }

    #[test]
    fn student_t_known_quantiles() {
        // one-sided p for t=1.812, dof=10 is 0.05
        assert!((student_t_sf(1.812, 10.0) - 0.05).abs() < 5e-4);
        // large dof approaches the normal tail: t=1.6449 -> 0.05
        assert!((student_t_sf(1.6449, 10000.0) - 0.05).abs() < 1e-3);
        assert!(student_t_sf(-1.0, 5.0) > 0.5);
    }

    #[test]
    fn welch_detects_a_shifted_mean() {
        let a: Vec<f64> = (0..100).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect();
        let b: Vec<f64> = (0..100).map(|i| 0.5 + (i % 7) as f64 * 0.1).collect();
        assert!(welch_one_sided_p(&a, &b) < 1e-6);
        assert!(welch_one_sided_p(&b, &a) > 0.99);
    }
}
