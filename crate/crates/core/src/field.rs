//! Sampled two-component transverse fields.
//!
//! Grids are square and cell-centred: sample `i` sits at
//! `(i - (n-1)/2) * dx`, so no sample falls on the optical axis.
//!
//! # Snapshot format
//!
//! Little-endian, 64-byte header followed by the L and R components, each
//! `n*n` row-major complex64 values stored as interleaved `f32` (re, im):
//!
//! | offset | type     | content            |
//! |--------|----------|--------------------|
//! | 0      | [u8; 8]  | magic `OAMFIELD`   |
//! | 8      | u32      | n                  |
//! | 12     | u32      | components (= 2)   |
//! | 16     | f64      | extent (m)         |
//! | 24     | f64      | z (m)              |
//! | 32     | f64      | wavelength (m)     |
//! | 40     | [u8; 24] | zero padding       |

use std::io::{Read, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modes::{BeamParams, PolarizedSuperposition, RadialSeries};
pub use crate::polarization::Pol;
use crate::polarization::{Jones, JonesMatrix};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"OAMFIELD";
pub const SNAPSHOT_HEADER_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n: usize,
    pub extent: f64,
}

impl Grid {
    pub fn new(n: usize, extent: f64) -> Result<Self> {
        if n < 64 || n % 2 != 0 {
            return Err(Error::InvalidGrid(format!("n = {n} must be even and >= 64")));
        }
        if !(extent > 0.0 && extent.is_finite()) {
            return Err(Error::InvalidGrid(format!("extent = {extent} must be positive")));
        }
        Ok(Grid { n, extent })
    }

    pub fn dx(&self) -> f64 {
        self.extent / self.n as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dx()
    }

    pub fn coord(&self, i: usize) -> f64 {
        (i as f64 - (self.n as f64 - 1.0) / 2.0) * self.dx()
    }

    pub fn same_as(&self, other: &Grid) -> bool {
        self.n == other.n && rel_eq(self.extent, other.extent)
    }
}

fn rel_eq(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub grid: Grid,
    pub z: f64,
    pub wavelength: f64,
    pub amp_l: Vec<Complex64>,
    pub amp_r: Vec<Complex64>,
}

impl Field {
    pub fn zeros(grid: Grid, z: f64, wavelength: f64) -> Self {
        let len = grid.n * grid.n;
        Field {
            grid,
            z,
            wavelength,
            amp_l: vec![Complex64::new(0.0, 0.0); len],
            amp_r: vec![Complex64::new(0.0, 0.0); len],
        }
    }

    /// Samples `f(x, y) -> (L, R)` at every grid point.
    pub fn from_fn(grid: Grid, z: f64, wavelength: f64, f: impl Fn(f64, f64) -> (Complex64, Complex64)) -> Self {
        let mut out = Field::zeros(grid, z, wavelength);
        for iy in 0..grid.n {
            let y = grid.coord(iy);
            for ix in 0..grid.n {
                let (l, r) = f(grid.coord(ix), y);
                out.amp_l[iy * grid.n + ix] = l;
                out.amp_r[iy * grid.n + ix] = r;
            }
        }
        out
    }

    /// A scalar mode profile carried by the polarization `pol`.
    pub fn from_scalar(grid: Grid, params: &BeamParams, values: Vec<Complex64>, pol: Jones) -> Self {
        let mut out = Field::zeros(grid, params.z, params.wavelength);
        out.amp_l = values.iter().map(|v| v * pol.l()).collect();
        out.amp_r = values.iter().map(|v| v * pol.r()).collect();
        out
    }

    /// Samples one LG series on `grid` with polarization `pol`.
    pub fn from_series(grid: Grid, params: &BeamParams, series: &RadialSeries, pol: Jones) -> Self {
        Field::from_scalar(grid, params, series.sample(&grid, params), pol)
    }

    /// Samples a superposition at plane `frame.z`; HyGG terms use `kmax`
    /// LG orders.
    pub fn from_superposition(grid: Grid, frame: &BeamParams, sup: &PolarizedSuperposition, kmax: usize) -> Result<Self> {
        let mut out = Field::zeros(grid, frame.z, frame.wavelength);
        for (pol, series) in sup.radial_series(frame, kmax)? {
            let vals = series.sample(&grid, frame);
            let dst = out.component_mut(pol);
            for (d, v) in dst.iter_mut().zip(vals) {
                *d += v;
            }
        }
        Ok(out)
    }

    pub fn component(&self, pol: Pol) -> &[Complex64] {
        match pol {
            Pol::L => &self.amp_l,
            Pol::R => &self.amp_r,
        }
    }

    pub fn component_mut(&mut self, pol: Pol) -> &mut Vec<Complex64> {
        match pol {
            Pol::L => &mut self.amp_l,
            Pol::R => &mut self.amp_r,
        }
    }

    pub fn power(&self) -> f64 {
        let s: f64 = self.amp_l.iter().chain(&self.amp_r).map(|v| v.norm_sqr()).sum();
        s * self.grid.cell_area()
    }

    pub fn component_power(&self, pol: Pol) -> f64 {
        self.component(pol).iter().map(|v| v.norm_sqr()).sum::<f64>() * self.grid.cell_area()
    }

    pub fn scaled(&self, s: Complex64) -> Field {
        Field {
            amp_l: self.amp_l.iter().map(|v| v * s).collect(),
            amp_r: self.amp_r.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }

    /// Unit-power copy. Zero fields are returned unchanged.
    pub fn normalized(&self) -> Field {
        let p = self.power();
        if p > 0.0 {
            self.scaled(Complex64::new(1.0 / p.sqrt(), 0.0))
        } else {
            self.clone()
        }
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, other: &Field, s: Complex64) -> Result<Field> {
        check_compatible(self, other)?;
        let mut out = self.clone();
        for (d, v) in out.amp_l.iter_mut().zip(&other.amp_l) {
            *d += v * s;
        }
        for (d, v) in out.amp_r.iter_mut().zip(&other.amp_r) {
            *d += v * s;
        }
        Ok(out)
    }

    /// Applies a uniform Jones matrix at every sample.
    pub fn apply_jones(&self, m: &JonesMatrix) -> Field {
        let mut out = self.clone();
        for i in 0..self.amp_l.len() {
            let (l, r) = m.apply(self.amp_l[i], self.amp_r[i]);
            out.amp_l[i] = l;
            out.amp_r[i] = r;
        }
        out
    }

    /// Scalar amplitude along the polarization `pol`, ⟨pol|E⟩.
    pub fn project_scalar(&self, pol: &Jones) -> Vec<Complex64> {
        let (a, b) = (pol.l().conj(), pol.r().conj());
        self.amp_l.iter().zip(&self.amp_r).map(|(l, r)| a * l + b * r).collect()
    }

    /// Field after an ideal polarizer transmitting `pol`.
    pub fn polarizer(&self, pol: &Jones) -> Field {
        let pol = pol.normalized();
        let s = self.project_scalar(&pol);
        let mut out = self.clone();
        out.amp_l = s.iter().map(|v| v * pol.l()).collect();
        out.amp_r = s.iter().map(|v| v * pol.r()).collect();
        out
    }

    pub fn intensity(&self) -> Vec<f64> {
        self.amp_l.iter().zip(&self.amp_r).map(|(l, r)| l.norm_sqr() + r.norm_sqr()).collect()
    }

    pub fn write_snapshot(&self, mut w: impl Write) -> Result<()> {
        let mut header = [0u8; SNAPSHOT_HEADER_LEN];
        header[..8].copy_from_slice(SNAPSHOT_MAGIC);
        header[8..12].copy_from_slice(&(self.grid.n as u32).to_le_bytes());
        header[12..16].copy_from_slice(&2u32.to_le_bytes());
        header[16..24].copy_from_slice(&self.grid.extent.to_le_bytes());
        header[24..32].copy_from_slice(&self.z.to_le_bytes());
        header[32..40].copy_from_slice(&self.wavelength.to_le_bytes());
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(self.amp_l.len() * 16);
        for v in self.amp_l.iter().chain(&self.amp_r) {
            buf.extend_from_slice(&(v.re as f32).to_le_bytes());
            buf.extend_from_slice(&(v.im as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_snapshot(mut r: impl Read) -> Result<Field> {
        let mut header = [0u8; SNAPSHOT_HEADER_LEN];
        r.read_exact(&mut header)?;
        if &header[..8] != SNAPSHOT_MAGIC {
            return Err(Error::Snapshot("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(header[o..o + 8].try_into().unwrap());
        let n = u32_at(8) as usize;
        if u32_at(12) != 2 {
            return Err(Error::Snapshot(format!("expected 2 components, found {}", u32_at(12))));
        }
        let grid = Grid::new(n, f64_at(16)).map_err(|e| Error::Snapshot(e.to_string()))?;
        let mut field = Field::zeros(grid, f64_at(24), f64_at(32));
        let mut data = vec![0u8; 2 * n * n * 8];
        r.read_exact(&mut data)?;
        let values = data.chunks_exact(8).map(|c| {
            let re = f32::from_le_bytes(c[..4].try_into().unwrap());
            let im = f32::from_le_bytes(c[4..].try_into().unwrap());
            Complex64::new(re as f64, im as f64)
        });
        for (i, v) in values.enumerate() {
            if i < n * n {
                field.amp_l[i] = v;
            } else {
                field.amp_r[i - n * n] = v;
            }
        }
        Ok(field)
    }
}

pub fn check_compatible(a: &Field, b: &Field) -> Result<()> {
    if !a.grid.same_as(&b.grid) {
        return Err(Error::GridMismatch(format!(
            "n/extent {}/{} vs {}/{}",
            a.grid.n, a.grid.extent, b.grid.n, b.grid.extent
        )));
    }
    let z_scale = a.z.abs().max(b.z.abs()).max(a.wavelength);
    if (a.z - b.z).abs() > 1e-9 * z_scale || !rel_eq(a.wavelength, b.wavelength) {
        return Err(Error::GridMismatch(format!(
            "planes/wavelengths differ: z {} vs {}, lambda {} vs {}",
            a.z, b.z, a.wavelength, b.wavelength
        )));
    }
    Ok(())
}

/// ⟨a|b⟩ = ∬ conj(a)·b dA summed over both circular components.
pub fn overlap(a: &Field, b: &Field) -> Result<Complex64> {
    check_compatible(a, b)?;
    let s: Complex64 = a
        .amp_l
        .iter()
        .zip(&b.amp_l)
        .chain(a.amp_r.iter().zip(&b.amp_r))
        .map(|(x, y)| x.conj() * y)
        .sum();
    Ok(s * a.grid.cell_area())
}

/// |⟨a|b⟩|² / (‖a‖² ‖b‖²).
pub fn normalized_overlap_sqr(a: &Field, b: &Field) -> Result<f64> {
    let o = overlap(a, b)?;
    let d = a.power() * b.power();
    if d <= 0.0 {
        return Err(Error::Degenerate("overlap with a zero field".into()));
    }
    Ok(o.norm_sqr() / d)
}
