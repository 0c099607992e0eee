use std::f64::consts::PI;

use num_complex::Complex64;
use oamsim::cascade::{standard_targets, grid_for, simulate_numeric, solve_coins, walker_superposition, SolveOptions, WalkSpec};
use oamsim::holography::{
    default_period, efficiency_ratio, fidelity_on_basis, generate_hologram, lg_model_field, measure_holographic,
    measure_ideal, BasisSet, ModelTag, Projection, DEFAULT_PERIOD_CELLS,
};
use oamsim::modes::{ModeIndex, PolarizedSuperposition, RadialSeries};
use oamsim::{BeamParams, Field, Grid, Jones, LgIndex, Pol};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn beam() -> BeamParams {
    BeamParams::new(1e-3, 808e-9).unwrap()
}

fn lg(grid: Grid, p: u32, m: i32) -> Field {
    Field::from_series(grid, &beam(), &RadialSeries::lg(LgIndex::new(p, m)), Jones::H)
}

fn winding(values: &[Complex64], grid: &Grid, radius: f64) -> f64 {
    let n = grid.n;
    let samples = 720;
    let at = |t: f64| {
        let (x, y) = (radius * t.cos(), radius * t.sin());
        let ix = ((x / grid.dx()) + n as f64 / 2.0 - 0.5).round() as usize;
        let iy = ((y / grid.dx()) + n as f64 / 2.0 - 0.5).round() as usize;
        values[iy * n + ix]
    };
    let mut total = 0.0;
    let mut prev = at(0.0);
    for s in 1..=samples {
        let cur = at(2.0 * PI * s as f64 / samples as f64);
        total += (cur * prev.conj()).arg();
        prev = cur;
    }
    total
}

#[test]
fn single_charge_target_gives_one_fork() {
    let grid = Grid::new(512, 12e-3).unwrap();
    let h = generate_hologram(&lg(grid, 0, 1), default_period(&grid, DEFAULT_PERIOD_CELLS), ModelTag::Lg).unwrap();
    let n = grid.n;
    // remove the carrier and measure the leftover phase circulation
    let detilted: Vec<Complex64> = h
        .phase
        .iter()
        .enumerate()
        .map(|(idx, p)| Complex64::from_polar(1.0, p - 2.0 * PI * grid.coord(idx % n) / h.grating_period))
        .collect();
    let w = winding(&detilted, &grid, 1e-3);
    assert!((w.abs() - 2.0 * PI).abs() < 0.1, "circulation {w}");
}

#[test]
fn first_order_reconstructs_the_conjugate_target() {
    let grid = Grid::new(1024, 12e-3).unwrap();
    let target = lg(grid, 1, 3).add_scaled(&lg(grid, 0, -1), Complex64::new(0.0, 0.7)).unwrap().normalized();
    let h = generate_hologram(&target, default_period(&grid, DEFAULT_PERIOD_CELLS), ModelTag::Lg).unwrap();
    let rec = h.first_order_field();
    let t = target.project_scalar(&Jones::H);
    let o: Complex64 = rec.iter().zip(&t).map(|(a, b)| b * a).sum();
    let na: f64 = rec.iter().map(|v| v.norm_sqr()).sum();
    let nb: f64 = t.iter().map(|v| v.norm_sqr()).sum();
    assert!(o.norm_sqr() / (na * nb) >= 0.95);
}

/// The same physical grating sampled at 8 and 16 pixels per fringe. At 8
/// pixels the sampled grating folds order -7 onto order +1.
#[test]
fn holographic_readout_converges_to_ideal_projection() {
    let template = WalkSpec::identity(beam(), 5, 0.05);
    let opts = SolveOptions::default();
    let mut worst = [0.0f64; 2];
    for target in standard_targets() {
        let sol = solve_coins(&target.superposition(), &template, &opts).unwrap();
        for (slot, (n, cells)) in [(1024, DEFAULT_PERIOD_CELLS), (2048, 2 * DEFAULT_PERIOD_CELLS)].into_iter().enumerate() {
            let grid = grid_for(&template, n).unwrap();
            let input = simulate_numeric(&sol.spec, grid).unwrap().polarizer(&Jones::H);
            let model = lg_model_field(&sol.spec, &target.amps, grid).unwrap();
            let ideal = measure_ideal(&input, &model).unwrap().eta;
            let h = generate_hologram(&model, default_period(&grid, cells), ModelTag::Lg).unwrap();
            let holo = measure_holographic(&input, &h, 12.0 * beam().w0).unwrap().eta;
            let rel = (holo - ideal).abs() / ideal;
            worst[slot] = worst[slot].max(rel);
            if n == 2048 {
                assert!(rel <= 0.03, "{}: {holo} vs {ideal}", target.label);
            }
        }
    }
    assert!(worst[1] < worst[0], "{worst:?}");
}

#[test]
fn mismatched_charge_does_not_couple() {
    let grid = Grid::new(512, 12e-3).unwrap();
    let h = generate_hologram(&lg(grid, 0, -5), default_period(&grid, DEFAULT_PERIOD_CELLS), ModelTag::Lg).unwrap();
    let a = measure_holographic(&lg(grid, 0, 5), &h, 12e-3).unwrap();
    assert!(a.eta <= 1e-3, "eta {}", a.eta);
    let b = measure_holographic(&lg(grid, 0, 5), &h, 12e-3).unwrap();
    assert_eq!(a.eta.to_bits(), b.eta.to_bits());
}

#[test]
fn coarse_grating_reports_order_overlap() {
    let grid = Grid::new(256, 12e-3).unwrap();
    let h = generate_hologram(&lg(grid, 0, 5), 64.0 * grid.dx(), ModelTag::Lg).unwrap();
    let err = measure_holographic(&lg(grid, 0, 5), &h, 12e-3).unwrap_err();
    assert!(err.to_string().contains("grating"));
}

#[test]
fn extremal_cascade_output_prefers_its_own_model() {
    let target = walker_superposition(&[(5, Complex64::new(1.0, 0.0))], Jones::H);
    let template = WalkSpec::identity(beam(), 5, 0.05);
    let sol = solve_coins(&target, &template, &SolveOptions::default()).unwrap();
    let grid = grid_for(&sol.spec, 512).unwrap();
    let output = simulate_numeric(&sol.spec, grid).unwrap().polarizer(&Jones::H);
    let lg_model = lg_model_field(&sol.spec, &[(5, Complex64::new(1.0, 0.0))], grid).unwrap();
    // the numeric walk itself stands in for the HyGG-model hologram
    let hygg_model = output.normalized();
    let slightly_wider = {
        let mut s = sol.spec.clone();
        s.beam = BeamParams::new(1.05e-3, 808e-9).unwrap();
        simulate_numeric(&s, grid).unwrap().polarizer(&Jones::H)
    };
    assert!(efficiency_ratio(&slightly_wider, &hygg_model, &lg_model).unwrap() > 1.0);
    assert!((efficiency_ratio(&slightly_wider, &lg_model, &lg_model).unwrap() - 1.0).abs() < 1e-12);
}

fn lg_profiles() -> Vec<(i32, PolarizedSuperposition)> {
    [-5, -3, -1, 1, 3, 5]
        .iter()
        .map(|&m| {
            let mut s = PolarizedSuperposition::default();
            s.push(Pol::L, Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0), ModeIndex::Lg(LgIndex::new(0, m)));
            s.push(Pol::R, Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0), ModeIndex::Lg(LgIndex::new(0, m)));
            (m, s)
        })
        .collect()
}

#[test]
fn fidelity_limits_and_symmetries() {
    let grid = Grid::new(256, 12e-3).unwrap();
    let amps = [(-3, Complex64::new(0.6, 0.0)), (5, Complex64::new(0.0, 0.8))];
    let basis = BasisSet::complete(&lg_profiles(), &amps, beam()).unwrap();
    let target = Field::from_superposition(grid, &beam(), &basis.elements[0], 0).unwrap();
    let f = fidelity_on_basis(&target, &basis, Projection::Ideal, ModelTag::Lg).unwrap();
    assert!((f - 1.0).abs() < 1e-4);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let mut input = Field::zeros(grid, 0.0, 808e-9);
        for m in [-5, -3, -1, 1, 3, 5] {
            let c = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            input = input.add_scaled(&lg(grid, rng.random_range(0..2), m), c).unwrap();
        }
        let input = input.normalized();
        let f = fidelity_on_basis(&input, &basis, Projection::Ideal, ModelTag::Lg).unwrap();
        assert!((0.0..=1.0).contains(&f));
        let phased = input.scaled(Complex64::from_polar(1.0, 1.234));
        let g = fidelity_on_basis(&phased, &basis, Projection::Ideal, ModelTag::Lg).unwrap();
        assert!((f - g).abs() < 1e-12);
        let mut relabeled = basis.clone();
        relabeled.elements[1..].reverse();
        let h = fidelity_on_basis(&input, &relabeled, Projection::Ideal, ModelTag::Lg).unwrap();
        assert!((f - h).abs() < 1e-12);
    }
}
