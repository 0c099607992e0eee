//! Laguerre-Gauss and Hypergeometric-Gaussian transverse modes.
//!
//! Mode functions exclude the plane-wave carrier `exp(-i k z)`; sampled
//! [`Field`](crate::field::Field)s produced by propagation keep it. The phase
//! convention is the one of a carrier `exp(-i k z)`: curvature enters as
//! `exp(-i k r^2 / 2R)` and the Gouy phase as `exp(+i (2p + |m| + 1) psi)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Grid, Pol};
use crate::specfun::{assoc_laguerre_all, factorial, gamma_real};

/// Default number of LG terms kept when a HyGG mode is evaluated on its own.
pub const DEFAULT_HYGG_TERMS: usize = 40;

/// Tail mass above which a truncated HyGG series is reported.
pub const TAIL_WARN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LgIndex {
    pub p: u32,
    pub m: i32,
}

impl LgIndex {
    pub fn new(p: u32, m: i32) -> Self {
        LgIndex { p, m }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyggIndex {
    pub p: f64,
    pub m: i32,
}

impl HyggIndex {
    pub fn new(p: f64, m: i32) -> Result<Self> {
        check_hygg_domain(p, m)?;
        Ok(HyggIndex { p, m })
    }
}

fn check_hygg_domain(p: f64, m: i32) -> Result<()> {
    if !p.is_finite() || p < -(m.abs() as f64) - 1e-12 {
        return Err(Error::InvalidIndex(format!(
            "HyGG radial parameter p = {p} must satisfy p >= -|m| = {}",
            -m.abs()
        )));
    }
    Ok(())
}

/// Gaussian beam frame: waist `w0` located at z = 0, evaluated at plane `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamParams {
    pub w0: f64,
    pub wavelength: f64,
    pub z: f64,
}

impl BeamParams {
    pub fn new(w0: f64, wavelength: f64) -> Result<Self> {
        if !(w0 > 0.0 && wavelength > 0.0) {
            return Err(Error::Config(format!(
                "beam waist and wavelength must be positive (w0 = {w0}, wavelength = {wavelength})"
            )));
        }
        Ok(BeamParams { w0, wavelength, z: 0.0 })
    }

    pub fn at(self, z: f64) -> Self {
        BeamParams { z, ..self }
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    pub fn rayleigh_range(&self) -> f64 {
        PI * self.w0 * self.w0 / self.wavelength
    }

    pub fn width(&self) -> f64 {
        let zr = self.rayleigh_range();
        self.w0 * (1.0 + (self.z / zr).powi(2)).sqrt()
    }

    /// 1/R(z); zero at the waist.
    pub fn inv_curvature(&self) -> f64 {
        let zr = self.rayleigh_range();
        self.z / (self.z * self.z + zr * zr)
    }

    pub fn gouy(&self) -> f64 {
        (self.z / self.rayleigh_range()).atan()
    }
}

/// Unit-power LG mode at a single point.
pub fn lg_amplitude(idx: LgIndex, params: &BeamParams, r: f64, phi: f64) -> Complex64 {
    let basis = LgBasis::new(idx.m, idx.p as usize, params);
    let mut buf = vec![Complex64::new(0.0, 0.0); idx.p as usize + 1];
    basis.eval_all(r, phi, &mut buf);
    buf[idx.p as usize]
}

/// Evaluates LG_{k,m} for k = 0..=kmax at one plane, sharing the Laguerre
/// recurrence between orders.
#[derive(Debug, Clone)]
pub struct LgBasis {
    m: i32,
    abs_m: u32,
    norms: Vec<f64>,
    gouy: Vec<Complex64>,
    w: f64,
    half_k_inv_r: f64,
}

impl LgBasis {
    pub fn new(m: i32, kmax: usize, params: &BeamParams) -> Self {
        let abs_m = m.unsigned_abs();
        let w = params.width();
        let psi = params.gouy();
        // sqrt(2 k! / (pi (k+|m|)!)) / w, built iteratively
        let mut ratio = 1.0 / factorial(abs_m);
        let mut norms = Vec::with_capacity(kmax + 1);
        let mut gouy = Vec::with_capacity(kmax + 1);
        for k in 0..=kmax {
            if k > 0 {
                ratio *= k as f64 / (k as f64 + abs_m as f64);
            }
            norms.push((2.0 * ratio / PI).sqrt() / w);
            let order = (2 * k) as f64 + abs_m as f64 + 1.0;
            gouy.push(Complex64::from_polar(1.0, order * psi));
        }
        LgBasis {
            m,
            abs_m,
            norms,
            gouy,
            w,
            half_k_inv_r: 0.5 * params.wavenumber() * params.inv_curvature(),
        }
    }

    pub fn kmax(&self) -> usize {
        self.norms.len() - 1
    }

    pub fn m(&self) -> i32 {
        self.m
    }

    /// Radial part shared by every order: (sqrt2 r/w)^|m| exp(-r^2/w^2) with
    /// curvature and azimuthal phases.
    fn common(&self, r: f64, phi: f64) -> (Complex64, f64) {
        let x = 2.0 * r * r / (self.w * self.w);
        let amp = x.sqrt().powi(self.abs_m as i32) * (-0.5 * x).exp();
        let phase = self.m as f64 * phi - self.half_k_inv_r * r * r;
        (Complex64::from_polar(amp, phase), x)
    }

    pub fn eval_all(&self, r: f64, phi: f64, out: &mut [Complex64]) {
        let n = self.norms.len().min(out.len());
        let (common, x) = self.common(r, phi);
        let mut lag = vec![0.0; n];
        assoc_laguerre_all(self.abs_m as f64, x, &mut lag);
        for k in 0..n {
            out[k] = common * (self.norms[k] * lag[k]) * self.gouy[k];
        }
    }

    /// Σ_k coeffs[k] LG_k at one point; `scratch` must hold `coeffs.len()`.
    pub fn eval_series(&self, coeffs: &[Complex64], r: f64, phi: f64, scratch: &mut [f64]) -> Complex64 {
        let n = coeffs.len().min(self.norms.len());
        let (common, x) = self.common(r, phi);
        assoc_laguerre_all(self.abs_m as f64, x, &mut scratch[..n]);
        let mut acc = Complex64::new(0.0, 0.0);
        for k in 0..n {
            acc += coeffs[k] * self.gouy[k] * (self.norms[k] * scratch[k]);
        }
        common * acc
    }
}

/// HyGG → LG expansion coefficients A_{p,k}, k = 0..=kmax.
///
/// The ratio Γ(k - p/2)/Γ(-p/2) is evaluated as the rising factorial
/// (-p/2)_k, which is finite for every p and reproduces the analytic limit
/// at the poles p = 0, 2, 4, ...: for p = 2j only k <= j survive.
pub fn hygg_coefficients(p: f64, m: i32, kmax: usize) -> Result<Vec<f64>> {
    check_hygg_domain(p, m)?;
    let am = m.unsigned_abs() as f64;
    // guard p = -|m| - tiny so Γ(p+|m|+1) stays at its limit
    let p = p.max(-am);
    let prefactor = gamma_real(p / 2.0 + am + 1.0)? / gamma_real(p + am + 1.0)?.sqrt();
    let mut b = 1.0 / factorial(m.unsigned_abs()).sqrt();
    let mut out = Vec::with_capacity(kmax + 1);
    out.push(prefactor * b);
    for k in 1..=kmax {
        let kf = k as f64;
        b *= ((kf + am) / kf).sqrt() * (kf - 1.0 - p / 2.0) / (kf + am);
        out.push(prefactor * b);
    }
    Ok(out)
}

/// 1 - Σ A_k^2 for a truncated coefficient vector.
pub fn tail_mass(coeffs: &[f64]) -> f64 {
    (1.0 - coeffs.iter().map(|a| a * a).sum::<f64>()).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyggEval {
    pub value: Complex64,
    /// Power of the LG series beyond the truncation order.
    pub tail: f64,
}

/// HyGG mode at a point as the LG series truncated at `kmax`.
pub fn hygg_amplitude(idx: HyggIndex, params: &BeamParams, r: f64, phi: f64, kmax: usize) -> Result<HyggEval> {
    let a = hygg_coefficients(idx.p, idx.m, kmax)?;
    let tail = tail_mass(&a);
    if tail > TAIL_WARN {
        log::warn!(
            "HyGG_({}, {}) truncated at k = {kmax} leaves tail mass {tail:.2e}",
            idx.p,
            idx.m
        );
    }
    let coeffs: Vec<Complex64> = a.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let basis = LgBasis::new(idx.m, kmax, params);
    let mut scratch = vec![0.0; kmax + 1];
    Ok(HyggEval {
        value: basis.eval_series(&coeffs, r, phi, &mut scratch),
        tail,
    })
}

/// A fixed-m field written as Σ_k c_k LG_{k,m} in the frame of `BeamParams`
/// (waist at z = 0).
#[derive(Debug, Clone, PartialEq)]
pub struct RadialSeries {
    pub m: i32,
    pub coeffs: Vec<Complex64>,
}

impl RadialSeries {
    pub fn lg(idx: LgIndex) -> Self {
        let mut coeffs = vec![Complex64::new(0.0, 0.0); idx.p as usize + 1];
        coeffs[idx.p as usize] = Complex64::new(1.0, 0.0);
        RadialSeries { m: idx.m, coeffs }
    }

    /// HyGG mode whose profile at plane `origin_z` is ρ^{p+|m|} times the
    /// frame's Gaussian. `origin_z = 0` gives the textbook mode; other
    /// origins describe a mode launched by an element at that plane, which
    /// picks up the phases exp(-2ik ψ(origin_z)).
    pub fn hygg(idx: HyggIndex, frame: &BeamParams, origin_z: f64, kmax: usize) -> Result<Self> {
        let a = hygg_coefficients(idx.p, idx.m, kmax)?;
        let psi = frame.at(origin_z).gouy();
        let coeffs = a
            .iter()
            .enumerate()
            .map(|(k, &v)| Complex64::from_polar(v, -2.0 * k as f64 * psi))
            .collect();
        Ok(RadialSeries { m: idx.m, coeffs })
    }

    pub fn power(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn value(&self, params: &BeamParams, r: f64, phi: f64) -> Complex64 {
        let basis = LgBasis::new(self.m, self.coeffs.len().saturating_sub(1), params);
        let mut scratch = vec![0.0; self.coeffs.len()];
        basis.eval_series(&self.coeffs, r, phi, &mut scratch)
    }

    /// Samples the series on `grid` at plane `params.z`.
    pub fn sample(&self, grid: &Grid, params: &BeamParams) -> Vec<Complex64> {
        let n = grid.n;
        let basis = LgBasis::new(self.m, self.coeffs.len().saturating_sub(1), params);
        let mut out = vec![Complex64::new(0.0, 0.0); n * n];
        out.par_chunks_mut(n).enumerate().for_each(|(iy, row)| {
            let mut scratch = vec![0.0; self.coeffs.len()];
            let y = grid.coord(iy);
            for (ix, v) in row.iter_mut().enumerate() {
                let x = grid.coord(ix);
                *v = basis.eval_series(&self.coeffs, x.hypot(y), y.atan2(x), &mut scratch);
            }
        });
        out
    }
}

/// Numerical projections ⟨LG_{k,m}|u⟩, k = 0..=kmax, of one sampled
/// component `u` (row-major on `grid`) at plane `params.z`.
pub fn project_onto_lg(u: &[Complex64], grid: &Grid, m: i32, kmax: usize, params: &BeamParams) -> Vec<Complex64> {
    let n = grid.n;
    let basis = LgBasis::new(m, kmax, params);
    let da = grid.cell_area();
    let rows: Vec<Vec<Complex64>> = u
        .par_chunks(n)
        .enumerate()
        .map(|(iy, row)| {
            let mut acc = vec![Complex64::new(0.0, 0.0); kmax + 1];
            let mut vals = vec![Complex64::new(0.0, 0.0); kmax + 1];
            let y = grid.coord(iy);
            for (ix, &v) in row.iter().enumerate() {
                if v.norm_sqr() == 0.0 {
                    continue;
                }
                let x = grid.coord(ix);
                basis.eval_all(x.hypot(y), y.atan2(x), &mut vals);
                for (a, b) in acc.iter_mut().zip(&vals) {
                    *a += b.conj() * v;
                }
            }
            acc
        })
        .collect();
    // fixed-order reduction keeps results independent of thread scheduling
    let mut total = vec![Complex64::new(0.0, 0.0); kmax + 1];
    for row in rows {
        for (t, r) in total.iter_mut().zip(row) {
            *t += r;
        }
    }
    total.iter().map(|c| c * da).collect()
}

/// Mode label used inside superpositions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModeIndex {
    Lg(LgIndex),
    Hygg(HyggIndex),
}

impl ModeIndex {
    pub fn m(&self) -> i32 {
        match self {
            ModeIndex::Lg(i) => i.m,
            ModeIndex::Hygg(i) => i.m,
        }
    }

    fn same_as(&self, other: &ModeIndex) -> bool {
        match (self, other) {
            (ModeIndex::Lg(a), ModeIndex::Lg(b)) => a == b,
            (ModeIndex::Hygg(a), ModeIndex::Hygg(b)) => a.m == b.m && (a.p - b.p).abs() < 1e-12,
            _ => false,
        }
    }
}

/// Weighted modes on the two circular polarizations.
///
/// HyGG terms are launched at `origin_z` (see [`RadialSeries::hygg`]).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolarizedSuperposition {
    pub terms_l: Vec<(Complex64, ModeIndex)>,
    pub terms_r: Vec<(Complex64, ModeIndex)>,
    #[serde(default)]
    pub origin_z: f64,
}

impl PolarizedSuperposition {
    pub fn terms(&self, pol: Pol) -> &[(Complex64, ModeIndex)] {
        match pol {
            Pol::L => &self.terms_l,
            Pol::R => &self.terms_r,
        }
    }

    /// Adds `coeff` to the term `index` on `pol`, merging duplicates.
    pub fn push(&mut self, pol: Pol, coeff: Complex64, index: ModeIndex) {
        let list = match pol {
            Pol::L => &mut self.terms_l,
            Pol::R => &mut self.terms_r,
        };
        if let Some(slot) = list.iter_mut().find(|(_, i)| i.same_as(&index)) {
            slot.0 += coeff;
        } else {
            list.push((coeff, index));
        }
    }

    /// Σ|coeff|² over both polarizations.
    pub fn coeff_norm_sqr(&self) -> f64 {
        self.terms_l.iter().chain(&self.terms_r).map(|(c, _)| c.norm_sqr()).sum()
    }

    pub fn scaled(&self, s: Complex64) -> Self {
        let f = |v: &Vec<(Complex64, ModeIndex)>| v.iter().map(|(c, i)| (c * s, *i)).collect();
        PolarizedSuperposition {
            terms_l: f(&self.terms_l),
            terms_r: f(&self.terms_r),
            origin_z: self.origin_z,
        }
    }

    /// Moves the L terms onto horizontal polarization, dropping R terms.
    pub fn as_h(&self) -> Self {
        let h = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        let terms: Vec<_> = self.terms_l.iter().map(|(c, i)| (c * h, *i)).collect();
        PolarizedSuperposition {
            terms_l: terms.clone(),
            terms_r: terms,
            origin_z: self.origin_z,
        }
    }

    pub fn has_unique_indices(&self) -> bool {
        [&self.terms_l, &self.terms_r].iter().all(|list| {
            list.iter()
                .enumerate()
                .all(|(i, (_, a))| list[i + 1..].iter().all(|(_, b)| !a.same_as(b)))
        })
    }

    /// ⟨self|other⟩ evaluated exactly in LG-coefficient space of `frame`;
    /// HyGG terms are truncated at `kmax`.
    pub fn inner(&self, other: &PolarizedSuperposition, frame: &BeamParams, kmax: usize) -> Result<Complex64> {
        let a = self.radial_series(frame, kmax)?;
        let b = other.radial_series(frame, kmax)?;
        let mut acc = Complex64::new(0.0, 0.0);
        for (pa, sa) in &a {
            for (pb, sb) in &b {
                if pa == pb && sa.m == sb.m {
                    acc += sa.coeffs.iter().zip(&sb.coeffs).map(|(x, y)| x.conj() * y).sum::<Complex64>();
                }
            }
        }
        Ok(acc)
    }

    /// Field power ⟨self|self⟩ (HyGG terms are not mutually orthogonal, so
    /// this differs from [`coeff_norm_sqr`](Self::coeff_norm_sqr)).
    pub fn power(&self, frame: &BeamParams, kmax: usize) -> Result<f64> {
        Ok(self.inner(self, frame, kmax)?.re)
    }

    /// Collects the terms of each (polarization, m) pair into an LG series of
    /// length `kmax + 1`.
    pub fn radial_series(&self, frame: &BeamParams, kmax: usize) -> Result<Vec<(Pol, RadialSeries)>> {
        let mut out: Vec<(Pol, RadialSeries)> = Vec::new();
        for pol in [Pol::L, Pol::R] {
            for (c, idx) in self.terms(pol) {
                let series = match idx {
                    ModeIndex::Lg(i) => {
                        let mut s = RadialSeries::lg(*i);
                        s.coeffs.resize(kmax.max(i.p as usize) + 1, Complex64::new(0.0, 0.0));
                        s
                    }
                    ModeIndex::Hygg(i) => RadialSeries::hygg(*i, frame, self.origin_z, kmax)?,
                };
                let m = series.m;
                let slot = match out.iter_mut().position(|(p, s)| *p == pol && s.m == m) {
                    Some(pos) => pos,
                    None => {
                        out.push((pol, RadialSeries { m, coeffs: Vec::new() }));
                        out.len() - 1
                    }
                };
                let dst = &mut out[slot].1.coeffs;
                if dst.len() < series.coeffs.len() {
                    dst.resize(series.coeffs.len(), Complex64::new(0.0, 0.0));
                }
                for (d, s) in dst.iter_mut().zip(&series.coeffs) {
                    *d += c * s;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> BeamParams {
        BeamParams::new(1e-3, 808e-9).unwrap()
    }

    #[test]
    fn fundamental_on_axis_amplitude() {
        let v = lg_amplitude(LgIndex::new(0, 0), &params(), 0.0, 0.0);
        let expected = (2.0 / PI).sqrt() / 1e-3;
        assert!((v.re - expected).abs() < 1e-9 * expected);
        assert!(v.im.abs() < 1e-9 * expected);
    }

    #[test]
    fn vortex_has_null_on_axis() {
        for z in [0.0, 0.3, 2.0] {
            let v = lg_amplitude(LgIndex::new(0, 3), &params().at(z), 0.0, 1.0);
            assert_eq!(v.norm(), 0.0);
        }
    }

    #[test]
    fn azimuthal_phase_law() {
        let p = params().at(0.7);
        for m in [-4, -1, 2, 5] {
            let a = lg_amplitude(LgIndex::new(1, m), &p, 0.4e-3, 0.0);
            let b = lg_amplitude(LgIndex::new(1, m), &p, 0.4e-3, PI / 2.0);
            let d = (b / a).arg();
            let expect = (m as f64 * PI / 2.0).rem_euclid(2.0 * PI);
            let diff = (d.rem_euclid(2.0 * PI) - expect).abs();
            assert!(diff < 1e-9 || (diff - 2.0 * PI).abs() < 1e-9, "m = {m}");
        }
    }

    #[test]
    fn zero_p_coefficients_are_unit_vector() {
        let a = hygg_coefficients(0.0, 1, 3).unwrap();
        assert_eq!(a, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn coefficient_domain_is_checked() {
        assert!(hygg_coefficients(-2.5, 2, 3).is_err());
        assert!(hygg_coefficients(-2.0, 2, 3).is_ok());
        assert!(HyggIndex::new(-6.0, 5).is_err());
    }

    #[test]
    fn even_p_keeps_a_finite_polynomial() {
        // ρ² e^{-ρ²} at m = 0 is (LG_0 - LG_1)/√2
        let a = hygg_coefficients(2.0, 0, 4).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((a[0] - s).abs() < 1e-14);
        assert!((a[1] + s).abs() < 1e-14);
        assert!(a[2..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn superposition_merges_duplicates() {
        let mut s = PolarizedSuperposition::default();
        let idx = ModeIndex::Lg(LgIndex::new(0, 1));
        s.push(Pol::L, Complex64::new(0.5, 0.0), idx);
        s.push(Pol::L, Complex64::new(0.5, 0.0), idx);
        assert_eq!(s.terms_l.len(), 1);
        assert!(s.has_unique_indices());
        assert!((s.coeff_norm_sqr() - 1.0).abs() < 1e-15);
    }
}
