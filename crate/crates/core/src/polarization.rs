//! Jones vectors and matrices in the circular (L, R) basis.
//!
//! Convention: e_L = (H + iV)/√2 and e_R = (H - iV)/√2, so a left-circular
//! state has S3 = +1.

use std::f64::consts::FRAC_1_SQRT_2;
use std::ops::Mul;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pol {
    L,
    R,
}

impl Pol {
    pub fn flipped(self) -> Pol {
        match self {
            Pol::L => Pol::R,
            Pol::R => Pol::L,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Pol::L => 0,
            Pol::R => 1,
        }
    }
}

/// Polarization state as (L, R) amplitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jones(pub [Complex64; 2]);

const fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

impl Jones {
    pub const L: Jones = Jones([c(1.0, 0.0), c(0.0, 0.0)]);
    pub const R: Jones = Jones([c(0.0, 0.0), c(1.0, 0.0)]);
    pub const H: Jones = Jones([c(FRAC_1_SQRT_2, 0.0), c(FRAC_1_SQRT_2, 0.0)]);
    pub const V: Jones = Jones([c(0.0, -FRAC_1_SQRT_2), c(0.0, FRAC_1_SQRT_2)]);
    pub const D: Jones = Jones([c(0.5, -0.5), c(0.5, 0.5)]);
    pub const A: Jones = Jones([c(0.5, 0.5), c(0.5, -0.5)]);

    pub fn l(&self) -> Complex64 {
        self.0[0]
    }

    pub fn r(&self) -> Complex64 {
        self.0[1]
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0[0].norm_sqr() + self.0[1].norm_sqr()
    }

    pub fn normalized(&self) -> Jones {
        let n = self.norm_sqr().sqrt();
        Jones([self.0[0] / n, self.0[1] / n])
    }

    /// ⟨self|other⟩
    pub fn inner(&self, other: &Jones) -> Complex64 {
        self.0[0].conj() * other.0[0] + self.0[1].conj() * other.0[1]
    }

    /// Linear polarization at `angle` from horizontal.
    pub fn linear(angle: f64) -> Jones {
        Jones([
            Complex64::from_polar(FRAC_1_SQRT_2, -angle),
            Complex64::from_polar(FRAC_1_SQRT_2, angle),
        ])
    }

    /// Parses `H`, `V`, `D`, `A`, `L` or `R`.
    pub fn from_label(label: &str) -> Option<Jones> {
        match label.trim().to_ascii_uppercase().as_str() {
            "H" => Some(Jones::H),
            "V" => Some(Jones::V),
            "D" => Some(Jones::D),
            "A" => Some(Jones::A),
            "L" => Some(Jones::L),
            "R" => Some(Jones::R),
            _ => None,
        }
    }
}

/// 2×2 operator acting on (L, R) amplitudes; `m[out][in]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JonesMatrix(pub [[Complex64; 2]; 2]);

impl JonesMatrix {
    pub fn identity() -> Self {
        JonesMatrix([[c(1.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(1.0, 0.0)]])
    }

    /// Linear retarder with the given retardance and fast-axis angle:
    /// cos(Γ/2) 1 - i sin(Γ/2) [[0, e^{-2iθ}], [e^{2iθ}, 0]].
    pub fn retarder(retardance: f64, angle: f64) -> Self {
        let cs = c((retardance / 2.0).cos(), 0.0);
        let s = (retardance / 2.0).sin();
        let lr = c(0.0, -s) * Complex64::from_polar(1.0, -2.0 * angle);
        let rl = c(0.0, -s) * Complex64::from_polar(1.0, 2.0 * angle);
        JonesMatrix([[cs, lr], [rl, cs]])
    }

    pub fn apply(&self, l: Complex64, r: Complex64) -> (Complex64, Complex64) {
        let m = &self.0;
        (m[0][0] * l + m[0][1] * r, m[1][0] * l + m[1][1] * r)
    }

    pub fn dagger(&self) -> Self {
        let m = &self.0;
        JonesMatrix([[m[0][0].conj(), m[1][0].conj()], [m[0][1].conj(), m[1][1].conj()]])
    }
}

impl Mul for JonesMatrix {
    type Output = JonesMatrix;

    fn mul(self, rhs: JonesMatrix) -> JonesMatrix {
        let a = &self.0;
        let b = &rhs.0;
        let mut out = [[c(0.0, 0.0); 2]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        JonesMatrix(out)
    }
}

impl Mul<Jones> for JonesMatrix {
    type Output = Jones;

    fn mul(self, v: Jones) -> Jones {
        let (l, r) = self.apply(v.0[0], v.0[1]);
        Jones([l, r])
    }
}
