//! Free-space Fresnel propagation and thin polarization elements.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Field, Grid, Pol};
use crate::polarization::JonesMatrix;

/// Largest grid accepted by [`fresnel_direct`].
pub const DIRECT_MAX_N: usize = 256;

struct Fft2 {
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    n: usize,
}

impl Fft2 {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
            n,
        }
    }

    fn rows(&self, data: &mut [Complex64], inverse: bool) {
        let plan = if inverse { &self.inv } else { &self.fwd };
        data.par_chunks_mut(self.n).for_each(|row| plan.process(row));
    }

    fn transpose(&self, data: &mut [Complex64]) {
        let n = self.n;
        for i in 0..n {
            for j in i + 1..n {
                data.swap(i * n + j, j * n + i);
            }
        }
    }

    fn run(&self, data: &mut [Complex64], inverse: bool) {
        self.rows(data, inverse);
        self.transpose(data);
        self.rows(data, inverse);
        self.transpose(data);
        if inverse {
            let s = 1.0 / (self.n * self.n) as f64;
            data.par_iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Forward 2D DFT (unnormalized).
pub fn fft2(data: &mut [Complex64], n: usize) {
    Fft2::new(n).run(data, false);
}

/// Inverse 2D DFT, normalized by 1/n².
pub fn ifft2(data: &mut [Complex64], n: usize) {
    Fft2::new(n).run(data, true);
}

/// Spatial frequency of DFT bin `i` on an `n`-point grid of side `extent`.
pub fn freq(i: usize, n: usize, extent: f64) -> f64 {
    let k = if i < n / 2 { i as f64 } else { i as f64 - n as f64 };
    k / extent
}

/// Transfer-function sampling check: λ|dz| <= extent·dx.
pub fn check_sampling(grid: &Grid, wavelength: f64, dz: f64) -> Result<()> {
    let lhs = wavelength * dz.abs();
    let rhs = grid.extent * grid.dx();
    if lhs > rhs * (1.0 + 1e-12) {
        let min_n = (lhs / grid.cell_area()).ceil() as usize;
        return Err(Error::Sampling {
            dz,
            lhs,
            rhs,
            min_n: min_n + min_n % 2,
        });
    }
    Ok(())
}

/// Fresnel propagation by `dz` through the convolution theorem, using the
/// transfer function `exp(-ik dz) exp(i pi lambda dz (fx^2 + fy^2))`.
pub fn fresnel_fft(f: &Field, dz: f64) -> Result<Field> {
    if dz == 0.0 {
        return Err(Error::ZeroDistance);
    }
    check_sampling(&f.grid, f.wavelength, dz)?;
    let n = f.grid.n;
    let k = 2.0 * PI / f.wavelength;
    let carrier = Complex64::from_polar(1.0, -k * dz);
    let chirp = PI * f.wavelength * dz;
    let fx: Vec<f64> = (0..n).map(|i| freq(i, n, f.grid.extent)).collect();
    let plan = Fft2::new(n);
    let mut out = f.clone();
    out.z = f.z + dz;
    for pol in [Pol::L, Pol::R] {
        let data = out.component_mut(pol);
        if data.iter().all(|v| v.norm_sqr() == 0.0) {
            continue;
        }
        plan.run(data, false);
        data.par_chunks_mut(n).enumerate().for_each(|(iy, row)| {
            let fy2 = fx[iy] * fx[iy];
            for (ix, v) in row.iter_mut().enumerate() {
                let ph = chirp * (fx[ix] * fx[ix] + fy2);
                *v *= carrier * Complex64::from_polar(1.0, ph);
            }
        });
        plan.run(data, true);
    }
    Ok(out)
}

/// Brute-force quadrature of the Fresnel integral with prefactor
/// `-exp(-ik dz)/(i lambda dz)`. The kernel is separable, so the double sum
/// is evaluated as two matrix products.
pub fn fresnel_direct(f: &Field, dz: f64) -> Result<Field> {
    let n = f.grid.n;
    if n > DIRECT_MAX_N {
        return Err(Error::GridTooLarge(n));
    }
    if dz == 0.0 {
        return Err(Error::ZeroDistance);
    }
    let k = 2.0 * PI / f.wavelength;
    let pref = -Complex64::from_polar(1.0, -k * dz) / Complex64::new(0.0, f.wavelength * dz) * f.grid.cell_area();
    let coords: Vec<f64> = (0..n).map(|i| f.grid.coord(i)).collect();
    let kernel: Vec<Complex64> = (0..n * n)
        .map(|idx| {
            let d = coords[idx / n] - coords[idx % n];
            Complex64::from_polar(1.0, -k * d * d / (2.0 * dz))
        })
        .collect();
    let mut out = f.clone();
    out.z = f.z + dz;
    for pol in [Pol::L, Pol::R] {
        let src = f.component(pol);
        // tmp[iy][ox] = Σ_ix src[iy][ix] K[ox][ix]
        let tmp: Vec<Complex64> = (0..n * n)
            .into_par_iter()
            .map(|idx| {
                let (iy, ox) = (idx / n, idx % n);
                let row = &src[iy * n..(iy + 1) * n];
                let kr = &kernel[ox * n..(ox + 1) * n];
                row.iter().zip(kr).map(|(a, b)| a * b).sum()
            })
            .collect();
        let dst: Vec<Complex64> = (0..n * n)
            .into_par_iter()
            .map(|idx| {
                let (oy, ox) = (idx / n, idx % n);
                let kr = &kernel[oy * n..(oy + 1) * n];
                (0..n).map(|iy| kr[iy] * tmp[iy * n + ox]).sum::<Complex64>() * pref
            })
            .collect();
        *out.component_mut(pol) = dst;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QPlateConfig {
    /// Topological charge; 2q must be an integer.
    pub q: f64,
    /// Birefringent retardation, in [0, π].
    pub delta: f64,
    /// Optic-axis offset angle.
    pub alpha0: f64,
}

impl QPlateConfig {
    pub fn tuned(q: f64) -> Self {
        QPlateConfig { q, delta: PI, alpha0: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=PI + 1e-12).contains(&self.delta) {
            return Err(Error::Config(format!("q-plate retardation {} outside [0, pi]", self.delta)));
        }
        let two_q = 2.0 * self.q;
        if (two_q - two_q.round()).abs() > 1e-9 {
            return Err(Error::Config(format!("q-plate charge {} is not a half-integer", self.q)));
        }
        Ok(())
    }

    /// OAM shift 2q applied to the L → R branch.
    pub fn shift(&self) -> i32 {
        (2.0 * self.q).round() as i32
    }
}

/// Thin q-plate acting at the field's plane:
/// L' = cos(δ/2) L + i e^{-2iα₀} sin(δ/2) e^{-2iqφ} R,
/// R' = cos(δ/2) R + i e^{+2iα₀} sin(δ/2) e^{+2iqφ} L.
pub fn qplate_transform(f: &Field, qp: &QPlateConfig) -> Result<Field> {
    qp.validate()?;
    let n = f.grid.n;
    let (c, s) = ((qp.delta / 2.0).cos(), (qp.delta / 2.0).sin());
    let mut out = f.clone();
    out.amp_l
        .par_chunks_mut(n)
        .zip(out.amp_r.par_chunks_mut(n))
        .enumerate()
        .for_each(|(iy, (row_l, row_r))| {
            let y = f.grid.coord(iy);
            for ix in 0..n {
                let x = f.grid.coord(ix);
                let phase = 2.0 * (qp.q * y.atan2(x) + qp.alpha0);
                let to_r = Complex64::new(0.0, s) * Complex64::from_polar(1.0, phase);
                let to_l = Complex64::new(0.0, s) * Complex64::from_polar(1.0, -phase);
                let (l, r) = (f.amp_l[iy * n + ix], f.amp_r[iy * n + ix]);
                row_l[ix] = l * c + to_l * r;
                row_r[ix] = r * c + to_r * l;
            }
        });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveplateConfig {
    pub retardance: f64,
    /// Fast-axis orientation from horizontal.
    pub angle: f64,
}

impl WaveplateConfig {
    pub fn quarter(angle: f64) -> Self {
        WaveplateConfig { retardance: PI / 2.0, angle }
    }

    pub fn half(angle: f64) -> Self {
        WaveplateConfig { retardance: PI, angle }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [PI / 2.0, PI].iter().any(|r| (self.retardance - r).abs() < 1e-12);
        if !ok {
            return Err(Error::Config(format!(
                "waveplate retardance {} is neither pi/2 nor pi",
                self.retardance
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> JonesMatrix {
        JonesMatrix::retarder(self.retardance, self.angle)
    }
}

pub fn waveplate_transform(f: &Field, wp: &WaveplateConfig) -> Result<Field> {
    wp.validate()?;
    Ok(f.apply_jones(&wp.matrix()))
}

/// Fraction of power in each azimuthal harmonic e^{imφ}, from a polar
/// resampling (bilinear) followed by an angular DFT. `pol = None` sums
/// both circular components.
pub fn azimuthal_spectrum(f: &Field, pol: Option<Pol>) -> BTreeMap<i32, f64> {
    const N_PHI: usize = 128;
    let comps: Vec<Pol> = match pol {
        Some(p) => vec![p],
        None => vec![Pol::L, Pol::R],
    };
    let grid = f.grid;
    let dr = grid.dx() / 2.0;
    let r_max = grid.extent / 2.0 - grid.dx();
    let n_r = (r_max / dr) as usize;
    let fft = FftPlanner::new().plan_fft_forward(N_PHI);
    let mut power = vec![0.0; N_PHI];
    for p in comps {
        let data = f.component(p);
        let rings: Vec<Vec<f64>> = (0..n_r)
            .into_par_iter()
            .map(|j| {
                let r = (j as f64 + 0.5) * dr;
                let mut ring: Vec<Complex64> = (0..N_PHI)
                    .map(|t| {
                        let phi = 2.0 * PI * t as f64 / N_PHI as f64;
                        bilinear(data, &grid, r * phi.cos(), r * phi.sin())
                    })
                    .collect();
                fft.process(&mut ring);
                ring.iter().map(|c| c.norm_sqr() * r).collect()
            })
            .collect();
        for ring in rings {
            for (acc, v) in power.iter_mut().zip(ring) {
                *acc += v;
            }
        }
    }
    let total: f64 = power.iter().sum();
    let mut out = BTreeMap::new();
    for (i, v) in power.iter().enumerate() {
        let m = if i < N_PHI / 2 { i as i32 } else { i as i32 - N_PHI as i32 };
        out.insert(m, if total > 0.0 { v / total } else { 0.0 });
    }
    out
}

fn bilinear(data: &[Complex64], grid: &Grid, x: f64, y: f64) -> Complex64 {
    let n = grid.n;
    let half = (n as f64 - 1.0) / 2.0;
    let fx = x / grid.dx() + half;
    let fy = y / grid.dx() + half;
    if fx < 0.0 || fy < 0.0 || fx >= (n - 1) as f64 || fy >= (n - 1) as f64 {
        return Complex64::new(0.0, 0.0);
    }
    let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
    let (tx, ty) = (fx - ix as f64, fy - iy as f64);
    let at = |i: usize, j: usize| data[j * n + i];
    at(ix, iy) * ((1.0 - tx) * (1.0 - ty))
        + at(ix + 1, iy) * (tx * (1.0 - ty))
        + at(ix, iy + 1) * ((1.0 - tx) * ty)
        + at(ix + 1, iy + 1) * (tx * ty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::overlap;
    use crate::modes::{BeamParams, LgIndex, RadialSeries};
    use crate::polarization::Jones;

    fn lg_field(p: u32, m: i32, pol: Jones, n: usize) -> Field {
        let params = BeamParams::new(1e-3, 808e-9).unwrap();
        let grid = Grid::new(n, 12e-3).unwrap();
        Field::from_series(grid, &params, &RadialSeries::lg(LgIndex::new(p, m)), pol)
    }

    #[test]
    fn tiny_step_is_identity() {
        let f = lg_field(1, 2, Jones::H, 128);
        let dz = f.grid.extent * 1e-9;
        let g = fresnel_fft(&f, dz).unwrap();
        let carrier = Complex64::from_polar(1.0, 2.0 * PI / f.wavelength * dz);
        let rms = (f.amp_l.iter().zip(&g.amp_l).map(|(a, b)| (a - b * carrier).norm_sqr()).sum::<f64>()
            / f.amp_l.len() as f64)
            .sqrt();
        let scale = (f.amp_l.iter().map(|a| a.norm_sqr()).sum::<f64>() / f.amp_l.len() as f64).sqrt();
        assert!(rms < 1e-6 * scale, "rms {rms} scale {scale}");
    }

    #[test]
    fn zero_distance_and_undersampling_are_errors() {
        let f = lg_field(0, 0, Jones::L, 128);
        assert!(matches!(fresnel_fft(&f, 0.0), Err(Error::ZeroDistance)));
        match fresnel_fft(&f, 100.0) {
            Err(Error::Sampling { min_n, .. }) => {
                assert!(min_n > 128 && min_n % 2 == 0);
                let dx = f.grid.dx();
                assert!(min_n as f64 * dx * dx >= 808e-9 * 100.0);
            }
            other => panic!("expected sampling error, got {other:?}"),
        }
    }

    #[test]
    fn direct_refuses_large_grids() {
        let f = lg_field(0, 0, Jones::L, 512);
        assert!(matches!(fresnel_direct(&f, 0.1), Err(Error::GridTooLarge(512))));
    }

    #[test]
    fn qplate_with_zero_retardation_is_identity() {
        let f = lg_field(0, 1, Jones::D, 64);
        let g = qplate_transform(&f, &QPlateConfig { q: 0.5, delta: 0.0, alpha0: 0.3 }).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn tuned_qplate_flips_and_raises_charge() {
        let f = lg_field(0, 0, Jones::L, 128);
        let g = qplate_transform(&f, &QPlateConfig::tuned(0.5)).unwrap();
        assert!(g.component_power(Pol::L) < 1e-20);
        let spec = azimuthal_spectrum(&g, Some(Pol::R));
        assert!(spec[&1] > 0.999, "{:?}", spec.get(&1));
        // global factor i: R'(x>0, y≈0) ≈ i L(x, y)
        let n = 128;
        let idx = (n / 2) * n + n / 2 + 5;
        let ratio = g.amp_r[idx] / f.amp_l[idx];
        assert!((ratio.arg() - (PI / 2.0 + f.grid.coord(n / 2).atan2(f.grid.coord(n / 2 + 5)))).abs() < 1e-9);
    }

    #[test]
    fn thin_elements_conserve_power_pointwise() {
        let f = lg_field(2, -3, Jones::linear(0.4), 64);
        let qp = QPlateConfig { q: 1.5, delta: 1.1, alpha0: 0.2 };
        let g = qplate_transform(&f, &qp).unwrap();
        for (a, b) in f.intensity().iter().zip(g.intensity()) {
            assert!((a - b).abs() <= 1e-12 * a.max(1e-300));
        }
        let h = waveplate_transform(&f, &WaveplateConfig::quarter(0.7)).unwrap();
        assert!((h.power() - f.power()).abs() < 1e-12 * f.power());
    }

    #[test]
    fn half_wave_at_zero_swaps_components() {
        let f = lg_field(0, 2, Jones::L, 64);
        let g = waveplate_transform(&f, &WaveplateConfig::half(0.0)).unwrap();
        let o = overlap(&g, &lg_field(0, 2, Jones::R, 64)).unwrap();
        assert!((o.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn invalid_elements_are_rejected() {
        assert!(WaveplateConfig { retardance: 1.0, angle: 0.0 }.validate().is_err());
        assert!(QPlateConfig { q: 0.3, delta: PI, alpha0: 0.0 }.validate().is_err());
        assert!(QPlateConfig { q: 0.5, delta: 4.0, alpha0: 0.0 }.validate().is_err());
    }
}
