use std::f64::consts::{FRAC_1_SQRT_2, PI};

use num_complex::Complex64;
use oamsim::cascade::{
    standard_targets, grid_for, ideal_walk, semianalytic_field, simulate_numeric, simulate_semianalytic, solve_coins,
    walker_superposition, SemiAnalyticOptions, SolveOptions, TermCache, WalkSpec,
};
use oamsim::modes::{project_onto_lg, RadialSeries};
use oamsim::propagation::{azimuthal_spectrum, fresnel_fft};
use oamsim::{overlap, BeamParams, Field, HyggIndex, Jones, LgIndex, Pol};
use proptest::prelude::*;

fn beam() -> BeamParams {
    BeamParams::new(1e-3, 808e-9).unwrap()
}

fn normalized_overlap(a: &Field, b: &Field) -> f64 {
    overlap(a, b).unwrap().norm() / (a.power() * b.power()).sqrt()
}

#[test]
fn first_step_output_is_two_hygg_modes() {
    let spec = WalkSpec::identity(beam(), 1, 0.05);
    let grid = grid_for(&spec, 512).unwrap();
    let out = simulate_numeric(&spec, grid).unwrap().normalized();
    let frame = beam().at(spec.output_z());
    for (m, pol) in [(1, Jones::R), (-1, Jones::L)] {
        let series = RadialSeries::hygg(HyggIndex::new(-1.0, m).unwrap(), &beam(), 0.0, 40).unwrap();
        let mode = Field::from_series(grid, &frame, &series, pol).normalized();
        let a = overlap(&mode, &out).unwrap().norm();
        assert!((a - FRAC_1_SQRT_2).abs() < 0.01 * FRAC_1_SQRT_2, "m = {m}: {a}");
    }
}

#[test]
fn disabled_qplates_leave_a_free_gaussian() {
    let mut spec = WalkSpec::identity(beam(), 5, 0.05);
    for s in &mut spec.steps {
        s.qplate.delta = 0.0;
    }
    let grid = grid_for(&spec, 256).unwrap();
    let out = simulate_numeric(&spec, grid).unwrap();
    let input = Field::from_series(grid, &beam(), &RadialSeries::lg(LgIndex::new(0, 0)), Jones::H);
    let free = fresnel_fft(&input, spec.output_z()).unwrap();
    assert!(normalized_overlap(&out, &free) >= 0.999);
}

#[test]
fn identity_walk_lives_on_odd_charges() {
    let spec = WalkSpec::identity(beam(), 5, 0.05);
    let grid = grid_for(&spec, 512).unwrap();
    let out = simulate_numeric(&spec, grid).unwrap();
    let spectrum = azimuthal_spectrum(&out, None);
    let odd: f64 = [-5, -3, -1, 1, 3, 5].iter().map(|m| spectrum.get(m).copied().unwrap_or(0.0)).sum();
    assert!(odd >= 0.99, "odd power {odd}");
}

#[test]
fn extremal_state_carries_higher_radial_orders() {
    let target = walker_superposition(&[(5, Complex64::new(1.0, 0.0))], Jones::H);
    let template = WalkSpec::identity(beam(), 5, 0.05);
    let sol = solve_coins(&target, &template, &SolveOptions::default()).unwrap();
    let grid = grid_for(&sol.spec, 512).unwrap();
    let out = simulate_numeric(&sol.spec, grid).unwrap().polarizer(&Jones::H).normalized();
    let frame = beam().at(sol.spec.output_z());
    let h = out.project_scalar(&Jones::H);
    let c = project_onto_lg(&h, &grid, 5, 20, &frame);
    let total: f64 = c.iter().map(|v| v.norm_sqr()).sum();
    let higher = (total - c[0].norm_sqr()) / total;
    assert!(higher > 0.05, "p >= 1 content {higher}");
}

#[test]
fn coin_solver_reaches_listed_targets() {
    let template = WalkSpec::identity(beam(), 5, 0.05);
    let opts = SolveOptions::default();
    let identity_out = ideal_walk(&template).to_superposition();
    assert!(solve_coins(&identity_out, &template, &opts).unwrap().overlap >= 0.999);
    let targets = standard_targets();
    let pick = |label: &str| targets.iter().find(|t| t.label == label).unwrap().superposition();
    assert!(solve_coins(&pick("(|-5>+|5>)/sqrt2"), &template, &opts).unwrap().overlap >= 0.98);
    assert!(solve_coins(&pick("QFT1"), &template, &opts).unwrap().overlap >= 0.95);
}

#[test]
fn semianalytic_output_is_normalized_up_to_its_tail() {
    let target = walker_superposition(&[(3, Complex64::new(1.0, 0.0))], Jones::H);
    let template = WalkSpec::identity(beam(), 5, 0.05);
    let sol = solve_coins(&target, &template, &SolveOptions::default()).unwrap();
    let grid = grid_for(&sol.spec, 256).unwrap();
    let cache = TermCache::new();
    let out = simulate_semianalytic(&sol.spec, &SemiAnalyticOptions::new(grid), &cache).unwrap();
    assert!(out.power <= 1.0 + 1e-6);
    assert!((1.0 - out.power - out.tail()).abs() < 1e-2, "power {} tail {}", out.power, out.tail());
    let field = semianalytic_field(&sol.spec, &out, grid).unwrap();
    assert!((field.power() - out.power).abs() < 1e-2);
    assert!(!cache.is_empty());
}

#[test]
fn semianalytic_model_rejects_detuned_plates() {
    let mut spec = WalkSpec::identity(beam(), 2, 0.05);
    spec.steps[1].qplate.delta = PI / 2.0;
    let grid = grid_for(&spec, 128).unwrap();
    assert!(simulate_semianalytic(&spec, &SemiAnalyticOptions::new(grid), &TermCache::new()).is_err());
}

#[test]
fn config_errors_name_the_offending_field() {
    let text = "[beam]\nw0_mm = 1.0\nwavelength_nm = 808.0\n\n[[step]]\nhwp_deg = 10.0\nbogus = 1\n";
    let err = WalkSpec::from_toml_str(text).unwrap_err().to_string();
    assert!(err.contains("bogus"), "{err}");
    let text = "[beam]\nw0_mm = -1.0\nwavelength_nm = 808.0\n\n[[step]]\n";
    assert!(WalkSpec::from_toml_str(text).unwrap_err().to_string().contains("w0"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn each_step_shifts_charge_by_one(angles in prop::collection::vec(0.0f64..PI, 6)) {
        let template = WalkSpec::identity(beam(), 2, 0.05);
        let spec = template.with_coin_angles(&angles);
        let grid = grid_for(&spec, 128).unwrap();
        let out = simulate_numeric(&spec, grid).unwrap();
        let p = out.power();
        let r = azimuthal_spectrum(&out, Some(Pol::R));
        let l = azimuthal_spectrum(&out, Some(Pol::L));
        let pr = out.component_power(Pol::R) / p;
        let pl = out.component_power(Pol::L) / p;
        let allowed_r: f64 = [0, 2].iter().map(|m| r.get(m).copied().unwrap_or(0.0)).sum();
        let allowed_l: f64 = [0, -2].iter().map(|m| l.get(m).copied().unwrap_or(0.0)).sum();
        prop_assert!(allowed_r * pr + allowed_l * pl >= 0.99 * (pr + pl));
    }
}
