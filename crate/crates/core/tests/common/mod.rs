//! Randomized power and normalization checks shared by the unitarity test
//! and the acceptance runner.

use std::f64::consts::PI;

use num_complex::Complex64;
use oamsim::cascade::{ideal_walk, vvb_target, ModeModel, VvbTarget, WalkSpec};
use oamsim::imaging::classes;
use oamsim::modes::{hygg_coefficients, RadialSeries};
use oamsim::propagation::{fresnel_fft, qplate_transform, waveplate_transform, QPlateConfig, WaveplateConfig};
use oamsim::{BeamParams, Field, Grid, Jones, JonesMatrix, LgIndex};
use rand::Rng;

pub const KINDS: usize = 7;

fn random_jones(rng: &mut impl Rng) -> Jones {
    Jones([
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
    ])
    .normalized()
}

fn random_field(rng: &mut impl Rng) -> Field {
    let beam = BeamParams::new(rng.random_range(0.6e-3..1.2e-3), 808e-9).unwrap();
    let grid = Grid::new(64, 12e-3).unwrap();
    let mut f = Field::zeros(grid, 0.0, beam.wavelength);
    for _ in 0..3 {
        let idx = LgIndex::new(rng.random_range(0..3), rng.random_range(-3..=3));
        let mode = Field::from_series(grid, &beam, &RadialSeries::lg(idx), random_jones(rng));
        let c = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        f = f.add_scaled(&mode, c).unwrap();
    }
    f
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol * want.abs().max(1.0) {
        Ok(())
    } else {
        Err(format!("{name}: {got} vs {want}"))
    }
}

/// Runs case `i`; the kind cycles through the transforms.
pub fn run_case(i: usize, rng: &mut impl Rng) -> Result<(), String> {
    match i % KINDS {
        0 => {
            let f = random_field(rng);
            let angle = rng.random_range(0.0..PI);
            let wp = if rng.random_bool(0.5) { WaveplateConfig::quarter(angle) } else { WaveplateConfig::half(angle) };
            close("waveplate power", waveplate_transform(&f, &wp).unwrap().power(), f.power(), 1e-12)
        }
        1 => {
            let f = random_field(rng);
            let qp = QPlateConfig {
                q: rng.random_range(-4..=4) as f64 / 2.0,
                delta: rng.random_range(0.0..PI),
                alpha0: rng.random_range(0.0..PI),
            };
            close("q-plate power", qplate_transform(&f, &qp).unwrap().power(), f.power(), 1e-12)
        }
        2 => {
            let f = random_field(rng);
            let limit = f.grid.extent * f.grid.dx() / f.wavelength;
            let dz = rng.random_range(-limit..limit);
            close("Fresnel power", fresnel_fft(&f, dz).unwrap().power(), f.power(), 1e-10)
        }
        3 => {
            let m = JonesMatrix::retarder(rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..PI));
            let u = m.dagger();
            for r in 0..2 {
                for c in 0..2 {
                    let v: Complex64 = (0..2).map(|k| u.0[r][k] * m.0[k][c]).sum();
                    let want = if r == c { 1.0 } else { 0.0 };
                    if (v - want).norm() > 1e-12 {
                        return Err(format!("Jones matrix not unitary: {v}"));
                    }
                }
            }
            Ok(())
        }
        4 => {
            let pairs = classes();
            let c = pairs[rng.random_range(0..pairs.len())];
            let t = VvbTarget::new(rng.random_range(0.0..PI), rng.random_range(0.0..2.0 * PI), c.m1, c.m2).unwrap();
            close("VVB weights", vvb_target(&t, ModeModel::Lg).coeff_norm_sqr(), 1.0, 1e-12)
        }
        5 => {
            let m: i32 = rng.random_range(-5..=5);
            let even = 2 * rng.random_range(0..4);
            let exact: f64 = hygg_coefficients(even as f64, m, even as usize).unwrap().iter().map(|a| a * a).sum();
            close("finite HyGG expansion", exact, 1.0, 1e-10)?;
            let p = rng.random_range(-(m.abs() as f64)..4.0);
            let short: f64 = hygg_coefficients(p, m, 10).unwrap().iter().map(|a| a * a).sum();
            let long: f64 = hygg_coefficients(p, m, 60).unwrap().iter().map(|a| a * a).sum();
            if short <= long + 1e-12 && long <= 1.0 + 1e-10 {
                Ok(())
            } else {
                Err(format!("HyGG coefficients p = {p}, m = {m}: {short} then {long}"))
            }
        }
        _ => {
            let beam = BeamParams::new(1e-3, 808e-9).unwrap();
            let steps = rng.random_range(1..=5);
            let mut spec = WalkSpec::identity(beam, steps, 0.05);
            spec.input_polarization = random_jones(rng);
            let angles: Vec<f64> = (0..3 * steps).map(|_| rng.random_range(0.0..PI)).collect();
            spec = spec.with_coin_angles(&angles);
            close("walker norm", ideal_walk(&spec).norm_sqr(), 1.0, 1e-12)
        }
    }
}

