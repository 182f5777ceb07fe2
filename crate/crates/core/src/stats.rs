//! Chi-square goodness-of-fit machinery for the Monte Carlo oracles.

use crate::error::{Result, SpclError};

/// ln Γ(x) via the Lanczos approximation (g = 7, n = 9), |rel err| < 1e-13 for x > 0.
fn ln_gamma(x: f64) -> f64 {
    // Coefficients transcribed at full published precision.
    #[allow(clippy::excessive_precision)]
    const COEFFS: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    assert!(x > 0.0, "ln_gamma domain");
    if x < 0.5 {
        // Reflection: Γ(x)Γ(1−x) = π / sin(πx)
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Lower regularized incomplete gamma P(a, x) by series expansion (x < a + 1).
fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut n = a;
    for _ in 0..500 {
        n += 1.0;
        term *= x / n;
        sum += term;
        if term.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Upper regularized incomplete gamma Q(a, x) by Lentz continued fraction (x ≥ a + 1).
fn gamma_q_cf(a: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Survival function of the chi-square distribution: P(X ≥ stat) with `dof` degrees of freedom.
pub fn chi_square_sf(stat: f64, dof: usize) -> Result<f64> {
    if !(stat.is_finite() && stat >= 0.0) || dof == 0 {
        return Err(SpclError::Argument(format!(
            "chi_square_sf needs stat >= 0 and dof >= 1, got stat {stat}, dof {dof}"
        )));
    }
    if stat == 0.0 {
        return Ok(1.0);
    }
    let a = dof as f64 / 2.0;
    let x = stat / 2.0;
    let p = if x < a + 1.0 { 1.0 - gamma_p_series(a, x) } else { gamma_q_cf(a, x) };
    Ok(p.clamp(0.0, 1.0))
}

/// Pearson statistic and p-value of observed counts against a uniform expectation.
pub fn chi_square_uniform(observed: &[u64]) -> Result<(f64, f64)> {
    if observed.len() < 2 {
        return Err(SpclError::Argument("need at least two cells".into()));
    }
    let total: u64 = observed.iter().sum();
    if total == 0 {
        return Err(SpclError::Argument("no observations".into()));
    }
    let expected = total as f64 / observed.len() as f64;
    let stat: f64 = observed.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p = chi_square_sf(stat, observed.len() - 1)?;
    Ok((stat, p))
}
