//! Real-argument special functions used by the mode expansions.

use std::f64::consts::PI;

use crate::error::SpecfunError;

// Lanczos approximation, g = 7, n = 9.
const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEFFS: [f64; 9] = [
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

fn is_pole(x: f64) -> bool {
    x <= 0.0 && x == x.floor()
}

/// Gamma function for real arguments.
///
/// Uses a Lanczos series for `x >= 0.5` and the reflection formula below
/// that. Non-positive integers are poles and return an error.
pub fn gamma_real(x: f64) -> Result<f64, SpecfunError> {
    if x.is_nan() {
        return Err(SpecfunError::Domain(x));
    }
    if is_pole(x) {
        return Err(SpecfunError::Pole(x));
    }
    if x < 0.5 {
        let s = (PI * x).sin();
        // sin(pi x) vanishes only at integers, which were rejected above.
        return Ok(PI / (s * gamma_lanczos(1.0 - x)));
    }
    // Integers: exact factorial up to the f64 range.
    if x == x.floor() && x <= 171.0 {
        return Ok(factorial(x as u32 - 1));
    }
    Ok(gamma_lanczos(x))
}

fn gamma_lanczos(x: f64) -> f64 {
    let x = x - 1.0;
    let mut a = LANCZOS_COEFFS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    (2.0 * PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * a
}

/// Natural log of |Γ(x)|.
pub fn ln_gamma(x: f64) -> Result<f64, SpecfunError> {
    if x.is_nan() {
        return Err(SpecfunError::Domain(x));
    }
    if is_pole(x) {
        return Err(SpecfunError::Pole(x));
    }
    if x < 0.5 {
        let s = (PI * x).sin().abs();
        return Ok(PI.ln() - s.ln() - ln_gamma(1.0 - x)?);
    }
    let xm = x - 1.0;
    let mut a = LANCZOS_COEFFS[0];
    let t = xm + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        a += c / (xm + i as f64);
    }
    Ok(0.5 * (2.0 * PI).ln() + (xm + 0.5) * t.ln() - t + a.ln())
}

/// n! as f64 (exact up to 22!, correctly rounded products beyond).
pub fn factorial(n: u32) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

/// Rising factorial (x)_n = x (x+1) ... (x+n-1). Finite for every real `x`,
/// which makes it the pole-free form of Γ(x+n)/Γ(x).
pub fn pochhammer(x: f64, n: u32) -> f64 {
    (0..n).fold(1.0, |acc, i| acc * (x + i as f64))
}

/// Generalized Laguerre polynomial L_k^a(x) by the three-term recurrence.
pub fn assoc_laguerre(k: u32, a: f64, x: f64) -> f64 {
    let mut prev = 1.0;
    if k == 0 {
        return prev;
    }
    let mut cur = 1.0 + a - x;
    for n in 1..k {
        let n = n as f64;
        let next = ((2.0 * n + 1.0 + a - x) * cur - (n + a) * prev) / (n + 1.0);
        prev = cur;
        cur = next;
    }
    cur
}

/// Fills `out[k] = L_k^a(x)` for `k = 0..out.len()` in one recurrence pass.
pub fn assoc_laguerre_all(a: f64, x: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() == 1 {
        return;
    }
    out[1] = 1.0 + a - x;
    for n in 1..out.len() - 1 {
        let nf = n as f64;
        out[n + 1] = ((2.0 * nf + 1.0 + a - x) * out[n] - (nf + a) * out[n - 1]) / (nf + 1.0);
    }
}
