//! The five-step q-plate quantum walk.
//!
//! Each step applies a coin (QWP, HWP, QWP), a q-plate, then free
//! propagation over `gap`. The first q-plate sits at z = 0, where the input
//! Gaussian has its waist. Three descriptions of the same walk are provided:
//!
//! * [`simulate_numeric`]: sampled fields pushed through every element.
//! * [`ideal_walk`]: the LG model, discrete amplitudes on (polarization, m).
//! * [`simulate_semianalytic`]: HyGG superpositions, truncated to `k_trunc`
//!   LG orders between plates, with per-term maps obtained numerically and
//!   memoized in a [`TermCache`].

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::{Arc, OnceLock, RwLock};

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Field, Grid};
use crate::modes::{
    project_onto_lg, BeamParams, HyggIndex, LgIndex, ModeIndex, PolarizedSuperposition,
    RadialSeries, DEFAULT_HYGG_TERMS, TAIL_WARN,
};
use crate::polarization::{Jones, JonesMatrix, Pol};
use crate::propagation::{fresnel_fft, qplate_transform, waveplate_transform, QPlateConfig, WaveplateConfig};

pub const DEFAULT_GAP: f64 = 0.05;
pub const DEFAULT_STEPS: usize = 5;
pub const DEFAULT_K_TRUNC: usize = 3;
/// LG orders used when fitting a propagated term onto the HyGG basis.
pub const DEFAULT_FIT_KMAX: usize = 20;
/// Walker positions reachable after five q = 1/2 steps.
pub const WALKER_M: [i32; 6] = [-5, -3, -1, 1, 3, 5];

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub qwp1: WaveplateConfig,
    pub hwp: WaveplateConfig,
    pub qwp2: WaveplateConfig,
    pub qplate: QPlateConfig,
    /// Free propagation after the q-plate (m).
    pub gap: f64,
}

impl StepConfig {
    /// All waveplate axes at 0 (the coin is -1) and a tuned q = 1/2 plate.
    pub fn identity(gap: f64) -> Self {
        StepConfig::with_angles([0.0; 3], gap)
    }

    pub fn with_angles(angles: [f64; 3], gap: f64) -> Self {
        StepConfig {
            qwp1: WaveplateConfig::quarter(angles[0]),
            hwp: WaveplateConfig::half(angles[1]),
            qwp2: WaveplateConfig::quarter(angles[2]),
            qplate: QPlateConfig::tuned(0.5),
            gap,
        }
    }

    pub fn angles(&self) -> [f64; 3] {
        [self.qwp1.angle, self.hwp.angle, self.qwp2.angle]
    }

    pub fn set_angles(&mut self, angles: [f64; 3]) {
        self.qwp1.angle = angles[0];
        self.hwp.angle = angles[1];
        self.qwp2.angle = angles[2];
    }

    /// Coin operator, QWP₂·HWP·QWP₁.
    pub fn coin(&self) -> JonesMatrix {
        self.qwp2.matrix() * self.hwp.matrix() * self.qwp1.matrix()
    }

    pub fn validate(&self) -> Result<()> {
        self.qwp1.validate()?;
        self.hwp.validate()?;
        self.qwp2.validate()?;
        self.qplate.validate()?;
        if !(self.gap >= 0.0 && self.gap.is_finite()) {
            return Err(Error::Config(format!("step gap {} must be a non-negative length", self.gap)));
        }
        Ok(())
    }
}

/// Input beam, input polarization and the ordered steps of a walk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkSpec {
    pub beam: BeamParams,
    pub input_polarization: Jones,
    pub steps: Vec<StepConfig>,
}

impl WalkSpec {
    /// H-polarized input and `n_steps` identity-coin steps.
    pub fn identity(beam: BeamParams, n_steps: usize, gap: f64) -> Self {
        WalkSpec {
            beam: beam.at(0.0),
            input_polarization: Jones::H,
            steps: vec![StepConfig::identity(gap); n_steps],
        }
    }

    /// Waveplate angles, three per step.
    pub fn coin_angles(&self) -> Vec<f64> {
        self.steps.iter().flat_map(|s| s.angles()).collect()
    }

    pub fn with_coin_angles(&self, angles: &[f64]) -> WalkSpec {
        let mut out = self.clone();
        for (step, a) in out.steps.iter_mut().zip(angles.chunks(3)) {
            step.set_angles([a[0], a[1], a[2]]);
        }
        out
    }

    /// Plane of each q-plate.
    pub fn plate_positions(&self) -> Vec<f64> {
        let mut z = 0.0;
        self.steps
            .iter()
            .map(|s| {
                let here = z;
                z += s.gap;
                here
            })
            .collect()
    }

    /// Plane at which the walk output is reported.
    pub fn output_z(&self) -> f64 {
        self.steps.iter().map(|s| s.gap).sum()
    }

    /// Largest |m| reachable by the walk.
    pub fn max_charge(&self) -> i32 {
        self.steps.iter().map(|s| s.qplate.shift().abs()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Config("walk has no steps".into()));
        }
        if (self.input_polarization.norm_sqr() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("input polarization is not normalized".into()));
        }
        self.steps.iter().try_for_each(StepConfig::validate)
    }

    pub fn from_toml_str(text: &str) -> Result<WalkSpec> {
        let file: WalkFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        file.into_spec()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&WalkFile::from_spec(self)).expect("walk file serializes")
    }
}

/// On-disk walk description. Angles are in degrees, lengths in millimetres
/// and the wavelength in nanometres:
///
/// ```toml
/// [beam]
/// w0_mm = 1.0
/// wavelength_nm = 808.0
///
/// [input]
/// polarization = "H"        # H, V, D, A, L, R, or { l = [re, im], r = [re, im] }
///
/// [[step]]                  # repeated once per step; every key is optional
/// qwp1_deg = 0.0
/// hwp_deg = 0.0
/// qwp2_deg = 0.0
/// q = 0.5
/// delta_deg = 180.0
/// alpha0_deg = 0.0
/// gap_mm = 50.0
/// ```
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WalkFile {
    beam: BeamFile,
    #[serde(default)]
    input: InputFile,
    step: Vec<StepFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BeamFile {
    w0_mm: f64,
    wavelength_nm: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InputFile {
    polarization: PolarizationFile,
}

impl Default for InputFile {
    fn default() -> Self {
        InputFile { polarization: PolarizationFile::Label("H".into()) }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum PolarizationFile {
    Label(String),
    Components { l: [f64; 2], r: [f64; 2] },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct StepFile {
    qwp1_deg: f64,
    hwp_deg: f64,
    qwp2_deg: f64,
    q: f64,
    delta_deg: f64,
    alpha0_deg: f64,
    gap_mm: f64,
}

impl Default for StepFile {
    fn default() -> Self {
        StepFile {
            qwp1_deg: 0.0,
            hwp_deg: 0.0,
            qwp2_deg: 0.0,
            q: 0.5,
            delta_deg: 180.0,
            alpha0_deg: 0.0,
            gap_mm: DEFAULT_GAP * 1e3,
        }
    }
}

impl WalkFile {
    fn into_spec(self) -> Result<WalkSpec> {
        let beam = BeamParams::new(self.beam.w0_mm * 1e-3, self.beam.wavelength_nm * 1e-9)
            .map_err(|_| Error::Config("beam.w0_mm and beam.wavelength_nm must be positive".into()))?;
        let input_polarization = match self.input.polarization {
            PolarizationFile::Label(s) => Jones::from_label(&s)
                .ok_or_else(|| Error::Config(format!("input.polarization: unknown label {s:?}")))?,
            PolarizationFile::Components { l, r } => {
                let j = Jones([Complex64::new(l[0], l[1]), Complex64::new(r[0], r[1])]);
                if j.norm_sqr() == 0.0 {
                    return Err(Error::Config("input.polarization: zero Jones vector".into()));
                }
                j.normalized()
            }
        };
        let steps = self
            .step
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let step = StepConfig {
                    qwp1: WaveplateConfig::quarter(s.qwp1_deg.to_radians()),
                    hwp: WaveplateConfig::half(s.hwp_deg.to_radians()),
                    qwp2: WaveplateConfig::quarter(s.qwp2_deg.to_radians()),
                    qplate: QPlateConfig {
                        q: s.q,
                        delta: s.delta_deg.to_radians(),
                        alpha0: s.alpha0_deg.to_radians(),
                    },
                    gap: s.gap_mm * 1e-3,
                };
                step.validate().map_err(|e| Error::Config(format!("step[{i}]: {e}")))?;
                Ok(step)
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = WalkSpec { beam, input_polarization, steps };
        spec.validate()?;
        Ok(spec)
    }

    fn from_spec(spec: &WalkSpec) -> WalkFile {
        let j = spec.input_polarization;
        WalkFile {
            beam: BeamFile {
                w0_mm: spec.beam.w0 * 1e3,
                wavelength_nm: spec.beam.wavelength * 1e9,
            },
            input: InputFile {
                polarization: PolarizationFile::Components {
                    l: [j.l().re, j.l().im],
                    r: [j.r().re, j.r().im],
                },
            },
            step: spec
                .steps
                .iter()
                .map(|s| StepFile {
                    qwp1_deg: s.qwp1.angle.to_degrees(),
                    hwp_deg: s.hwp.angle.to_degrees(),
                    qwp2_deg: s.qwp2.angle.to_degrees(),
                    q: s.qplate.q,
                    delta_deg: s.qplate.delta.to_degrees(),
                    alpha0_deg: s.qplate.alpha0.to_degrees(),
                    gap_mm: s.gap * 1e3,
                })
                .collect(),
        }
    }
}

/// Default extent in waists.
pub const EXTENT_WAISTS: f64 = 12.0;

/// An `n`-point grid spanning 12 waists, widened when needed so every gap
/// of `spec` meets the transfer-function sampling criterion.
pub fn grid_for(spec: &WalkSpec, n: usize) -> Result<Grid> {
    let gap = spec.steps.iter().map(|s| s.gap).fold(0.0, f64::max);
    let sampled = (n as f64 * spec.beam.wavelength * gap).sqrt() * (1.0 + 1e-9);
    Grid::new(n, (EXTENT_WAISTS * spec.beam.w0).max(sampled))
}

// ---------------------------------------------------------------------------
// numeric cascade

/// Sampled output of the walk at [`WalkSpec::output_z`].
pub fn simulate_numeric(spec: &WalkSpec, grid: Grid) -> Result<Field> {
    let mut trace = simulate_numeric_trace(spec, grid)?;
    Ok(trace.pop().expect("walk has at least one step"))
}

/// Field after each step (coin, q-plate and gap).
pub fn simulate_numeric_trace(spec: &WalkSpec, grid: Grid) -> Result<Vec<Field>> {
    spec.validate()?;
    let beam = spec.beam.at(0.0);
    let mut f = Field::from_series(grid, &beam, &RadialSeries::lg(LgIndex::new(0, 0)), spec.input_polarization);
    let mut out = Vec::with_capacity(spec.steps.len());
    for step in &spec.steps {
        f = waveplate_transform(&f, &step.qwp1)?;
        f = waveplate_transform(&f, &step.hwp)?;
        f = waveplate_transform(&f, &step.qwp2)?;
        f = qplate_transform(&f, &step.qplate)?;
        if step.gap > 0.0 {
            f = fresnel_fft(&f, step.gap)?;
        }
        out.push(f.clone());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// LG-model walker

/// Amplitudes on (polarization, m) for |m| ≤ `m_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkerState {
    m_max: i32,
    amps: Vec<[Complex64; 2]>,
}

impl WalkerState {
    pub fn new(m_max: i32) -> Self {
        WalkerState {
            m_max,
            amps: vec![[ZERO; 2]; (2 * m_max + 1) as usize],
        }
    }

    pub fn m_max(&self) -> i32 {
        self.m_max
    }

    fn slot(&self, m: i32) -> Option<usize> {
        (m.abs() <= self.m_max).then(|| (m + self.m_max) as usize)
    }

    pub fn get(&self, pol: Pol, m: i32) -> Complex64 {
        self.slot(m).map_or(ZERO, |i| self.amps[i][pol.index()])
    }

    /// Adds `c` at (pol, m); panics when |m| exceeds the range.
    pub fn add(&mut self, pol: Pol, m: i32, c: Complex64) {
        let i = self.slot(m).expect("walker index out of range");
        self.amps[i][pol.index()] += c;
    }

    pub fn jones(&self, m: i32) -> Jones {
        Jones([self.get(Pol::L, m), self.get(Pol::R, m)])
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a[0].norm_sqr() + a[1].norm_sqr()).sum()
    }

    pub fn inner(&self, other: &WalkerState) -> Complex64 {
        let r = self.m_max.min(other.m_max);
        (-r..=r)
            .map(|m| self.jones(m).inner(&other.jones(m)))
            .sum()
    }

    /// Amplitude ⟨analyzer|ψ_m⟩ for every m.
    pub fn analyzed(&self, analyzer: &Jones) -> BTreeMap<i32, Complex64> {
        (-self.m_max..=self.m_max)
            .map(|m| (m, analyzer.inner(&self.jones(m))))
            .collect()
    }

    /// Reads a superposition of LG_{0,m} terms.
    pub fn from_superposition(sup: &PolarizedSuperposition) -> Result<WalkerState> {
        let mut terms = Vec::new();
        for pol in [Pol::L, Pol::R] {
            for (c, idx) in sup.terms(pol) {
                match idx {
                    ModeIndex::Lg(LgIndex { p: 0, m }) => terms.push((pol, *m, *c)),
                    other => {
                        return Err(Error::InvalidIndex(format!(
                            "walker states hold LG_0,m terms only, found {other:?}"
                        )))
                    }
                }
            }
        }
        let m_max = terms.iter().map(|t| t.1.abs()).max().unwrap_or(0);
        let mut out = WalkerState::new(m_max);
        for (pol, m, c) in terms {
            out.add(pol, m, c);
        }
        Ok(out)
    }

    pub fn to_superposition(&self) -> PolarizedSuperposition {
        let mut sup = PolarizedSuperposition::default();
        for m in -self.m_max..=self.m_max {
            for pol in [Pol::L, Pol::R] {
                let c = self.get(pol, m);
                if c.norm_sqr() > 1e-28 {
                    sup.push(pol, c, ModeIndex::Lg(LgIndex::new(0, m)));
                }
            }
        }
        sup
    }
}

/// The walk in the LG model: each q-plate moves LG_{0,m} to LG_{0,m±2q}
/// with the Gouy phase difference of the two modes at the plate.
pub fn ideal_walk(spec: &WalkSpec) -> WalkerState {
    let m_max = spec.max_charge();
    let mut state = WalkerState::new(m_max);
    state.add(Pol::L, 0, spec.input_polarization.l());
    state.add(Pol::R, 0, spec.input_polarization.r());
    for (step, z) in spec.steps.iter().zip(spec.plate_positions()) {
        let coin = step.coin();
        let psi = spec.beam.at(z).gouy();
        let qp = &step.qplate;
        let (c, s) = ((qp.delta / 2.0).cos(), (qp.delta / 2.0).sin());
        let shift = qp.shift();
        let to_r = Complex64::new(0.0, s) * Complex64::from_polar(1.0, 2.0 * qp.alpha0);
        let to_l = Complex64::new(0.0, s) * Complex64::from_polar(1.0, -2.0 * qp.alpha0);
        let gouy = |m: i32, m2: i32| Complex64::from_polar(1.0, (m.abs() - m2.abs()) as f64 * psi);
        let mut next = WalkerState::new(m_max);
        for m in -m_max..=m_max {
            let (l, r) = coin.apply(state.get(Pol::L, m), state.get(Pol::R, m));
            if l.norm_sqr() + r.norm_sqr() == 0.0 {
                continue;
            }
            next.add(Pol::L, m, l * c);
            next.add(Pol::R, m, r * c);
            next.add(Pol::R, m + shift, l * to_r * gouy(m, m + shift));
            next.add(Pol::L, m - shift, r * to_l * gouy(m, m - shift));
        }
        state = next;
    }
    state
}

/// A walker target. Targets whose polarization is the same for every m are
/// compared after an analyzer along that polarization, as in a
/// polarizer-then-hologram measurement.
#[derive(Debug, Clone, PartialEq)]
pub enum WalkerTarget {
    Full(WalkerState),
    Analyzed { analyzer: Jones, amps: BTreeMap<i32, Complex64> },
}

impl WalkerTarget {
    pub fn from_superposition(sup: &PolarizedSuperposition) -> Result<WalkerTarget> {
        let state = WalkerState::from_superposition(sup)?;
        let norm = state.norm_sqr();
        if norm == 0.0 {
            return Err(Error::Degenerate("empty target".into()));
        }
        let s = 1.0 / norm.sqrt();
        let m_max = state.m_max();
        let lead = (-m_max..=m_max)
            .max_by(|a, b| state.jones(*a).norm_sqr().total_cmp(&state.jones(*b).norm_sqr()))
            .expect("non-empty range");
        let analyzer = state.jones(lead).normalized();
        let separable = (-m_max..=m_max).all(|m| {
            let j = state.jones(m);
            (j.norm_sqr() - analyzer.inner(&j).norm_sqr()).abs() <= 1e-9 * norm
        });
        if separable {
            let amps = state
                .analyzed(&analyzer)
                .into_iter()
                .filter(|(_, c)| c.norm_sqr() > 0.0)
                .map(|(m, c)| (m, c * s))
                .collect();
            Ok(WalkerTarget::Analyzed { analyzer, amps })
        } else {
            let mut full = WalkerState::new(m_max);
            for m in -m_max..=m_max {
                full.add(Pol::L, m, state.get(Pol::L, m) * s);
                full.add(Pol::R, m, state.get(Pol::R, m) * s);
            }
            Ok(WalkerTarget::Full(full))
        }
    }

    /// |⟨target|ψ⟩|² with ψ normalized (after the analyzer, when present).
    pub fn fidelity(&self, out: &WalkerState) -> f64 {
        match self {
            WalkerTarget::Full(t) => {
                let n = out.norm_sqr();
                if n == 0.0 {
                    0.0
                } else {
                    t.inner(out).norm_sqr() / n
                }
            }
            WalkerTarget::Analyzed { analyzer, amps } => {
                let proj = out.analyzed(analyzer);
                let n: f64 = proj.values().map(|c| c.norm_sqr()).sum();
                if n < 1e-14 {
                    return 0.0;
                }
                let o: Complex64 = amps
                    .iter()
                    .map(|(m, t)| t.conj() * proj.get(m).copied().unwrap_or(ZERO))
                    .sum();
                o.norm_sqr() / n
            }
        }
    }
}

// ---------------------------------------------------------------------------
// coin optimisation

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub starts: usize,
    pub max_iters: u64,
    pub seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            starts: 16,
            max_iters: 4000,
            seed: 0x0a4d_5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoinSolution {
    pub spec: WalkSpec,
    /// Achieved walker-space fidelity.
    pub overlap: f64,
    pub converged: bool,
}

/// Overlap below which [`solve_coins`] reports a convergence failure.
pub const SOLVE_THRESHOLD: f64 = 0.95;

struct CoinCost<'a> {
    template: &'a WalkSpec,
    target: &'a WalkerTarget,
}

impl CostFunction for CoinCost<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, angles: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let out = ideal_walk(&self.template.with_coin_angles(angles));
        Ok(1.0 - self.target.fidelity(&out))
    }
}

/// Finds waveplate angles whose LG-model output matches `target`, a
/// superposition of LG_{0,m} terms. The search is a deterministic
/// multi-start Nelder–Mead; the template's own angles are the first start.
pub fn solve_coins(target: &PolarizedSuperposition, template: &WalkSpec, opts: &SolveOptions) -> Result<CoinSolution> {
    template.validate()?;
    let target = WalkerTarget::from_superposition(target)?;
    let dim = 3 * template.steps.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = vec![template.coin_angles()];
    for _ in 1..opts.starts.max(1) {
        starts.push((0..dim).map(|_| rng.random_range(0.0..PI)).collect());
    }
    let runs: Vec<(f64, Vec<f64>)> = starts
        .into_par_iter()
        .map(|x0| {
            let cost = CoinCost { template, target: &target };
            let c0 = cost.cost(&x0).unwrap_or(1.0);
            if c0 < 1e-12 {
                return (c0, x0);
            }
            let mut simplex = vec![x0.clone()];
            for i in 0..dim {
                let mut v = x0.clone();
                v[i] += 0.4;
                simplex.push(v);
            }
            let solver = NelderMead::new(simplex)
                .with_sd_tolerance(1e-13)
                .expect("valid tolerance");
            match Executor::new(cost, solver)
                .configure(|s| s.max_iters(opts.max_iters))
                .run()
            {
                Ok(res) => {
                    let st = res.state();
                    let best = st.best_param.clone().unwrap_or(x0);
                    (st.best_cost, best)
                }
                Err(_) => (c0, x0),
            }
        })
        .collect();
    let (cost, angles) = runs
        .into_iter()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("at least one start");
    let angles: Vec<f64> = angles.iter().map(|a| a.rem_euclid(PI)).collect();
    let spec = template.with_coin_angles(&angles);
    let overlap = target.fidelity(&ideal_walk(&spec));
    let converged = overlap >= SOLVE_THRESHOLD;
    if !converged {
        log::warn!("coin search reached overlap {overlap:.4} (cost {cost:.3e}), below {SOLVE_THRESHOLD}");
    }
    Ok(CoinSolution { spec, overlap, converged })
}

// ---------------------------------------------------------------------------
// semi-analytic HyGG pipeline

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemiAnalyticOptions {
    pub k_trunc: usize,
    /// Grid used for the numerically computed per-term maps.
    pub grid: Grid,
    pub fit_kmax: usize,
}

impl SemiAnalyticOptions {
    pub fn new(grid: Grid) -> Self {
        SemiAnalyticOptions {
            k_trunc: DEFAULT_K_TRUNC,
            grid,
            fit_kmax: DEFAULT_FIT_KMAX,
        }
    }

    pub fn with_k_trunc(self, k_trunc: usize) -> Self {
        SemiAnalyticOptions { k_trunc, ..self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiAnalyticOutput {
    /// HyGG terms launched at the last q-plate.
    pub superposition: PolarizedSuperposition,
    /// Power discarded by the LG truncation between plates, per step.
    pub step_tails: Vec<f64>,
    /// Power outside the HyGG span at the per-term fits, summed over steps.
    pub fit_residual: f64,
    /// Field power of `superposition`.
    pub power: f64,
}

impl SemiAnalyticOutput {
    pub fn tail(&self) -> f64 {
        self.step_tails.iter().sum::<f64>() + self.fit_residual
    }
}

/// HyGG radial parameters spanning the output of a q-plate of charge shift
/// `shift` acting on LG_{k,m_src}, k ≤ `k_trunc`, for m_src = m_out ∓ shift.
///
/// At the plate LG_{k,m} is ρ^{|m|} times a polynomial of degree k in ρ²,
/// while a HyGG_{p,m'} launched there is ρ^{p+|m'|} times the Gaussian,
/// so p = |m_src| − |m_out| + 2j, j = 0..=k_trunc, spans the result exactly.
pub fn hygg_orders(m_out: i32, shift: i32, k_trunc: usize) -> Vec<f64> {
    let mut ps: Vec<i32> = Vec::new();
    for src in [m_out - shift, m_out + shift] {
        for j in 0..=k_trunc as i32 {
            let p = src.abs() - m_out.abs() + 2 * j;
            if !ps.contains(&p) {
                ps.push(p);
            }
        }
    }
    ps.sort_unstable();
    ps.into_iter().map(f64::from).collect()
}

/// LG coefficients (k ≤ kmax, frame of `beam`) of HyGG_{p,m} launched at
/// `origin_z`.
fn hygg_column(p: f64, m: i32, beam: &BeamParams, origin_z: f64, kmax: usize) -> Result<Vec<Complex64>> {
    Ok(RadialSeries::hygg(HyggIndex::new(p, m)?, beam, origin_z, kmax)?.coeffs)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct TermKey {
    k: usize,
    m: i32,
    pol: Pol,
    n: usize,
    fit_kmax: usize,
    k_trunc: usize,
    bits: [u64; 8],
}

impl TermKey {
    fn new(k: usize, m: i32, pol: Pol, z: f64, step: &StepConfig, beam: &BeamParams, opts: &SemiAnalyticOptions) -> Self {
        let qp = &step.qplate;
        TermKey {
            k,
            m,
            pol,
            n: opts.grid.n,
            fit_kmax: opts.fit_kmax,
            k_trunc: opts.k_trunc,
            bits: [z, step.gap, beam.w0, beam.wavelength, qp.q, qp.delta, qp.alpha0, opts.grid.extent]
                .map(f64::to_bits),
        }
    }
}

/// Output of one LG term pushed through a tuned q-plate and a gap,
/// expressed on HyGG terms launched at the plate.
#[derive(Debug, Clone, PartialEq)]
pub struct TermMap {
    pub pol: Pol,
    pub m: i32,
    pub orders: Vec<f64>,
    pub coeffs: Vec<Complex64>,
    /// Relative power left outside the span by the least-squares fit.
    pub residual: f64,
}

/// Memo of per-term maps. Reads are concurrent; each missing entry is
/// computed outside the lock and inserted once, so the contents do not
/// depend on population order.
#[derive(Debug, Default)]
pub struct TermCache {
    maps: RwLock<HashMap<TermKey, Arc<TermMap>>>,
}

impl TermCache {
    pub fn new() -> Self {
        TermCache::default()
    }

    /// Process-wide cache used by [`simulate_semianalytic`].
    pub fn global() -> &'static TermCache {
        static CACHE: OnceLock<TermCache> = OnceLock::new();
        CACHE.get_or_init(TermCache::new)
    }

    pub fn len(&self) -> usize {
        self.maps.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.maps.write().expect("cache lock").clear();
    }

    fn get(&self, key: &TermKey) -> Option<Arc<TermMap>> {
        self.maps.read().expect("cache lock").get(key).cloned()
    }

    fn insert(&self, key: TermKey, map: TermMap) -> Arc<TermMap> {
        self.maps
            .write()
            .expect("cache lock")
            .entry(key)
            .or_insert_with(|| Arc::new(map))
            .clone()
    }
}

fn compute_term(k: usize, m: i32, pol: Pol, z: f64, step: &StepConfig, beam: &BeamParams, opts: &SemiAnalyticOptions) -> Result<TermMap> {
    let qp = &step.qplate;
    let shift = qp.shift();
    let (pol_out, m_out) = match pol {
        Pol::L => (Pol::R, m + shift),
        Pol::R => (Pol::L, m - shift),
    };
    let jones = match pol {
        Pol::L => Jones::L,
        Pol::R => Jones::R,
    };
    let at_plate = beam.at(z);
    let f = Field::from_series(opts.grid, &at_plate, &RadialSeries::lg(LgIndex::new(k as u32, m)), jones);
    let mut g = qplate_transform(&f, qp)?;
    if step.gap > 0.0 {
        g = fresnel_fft(&g, step.gap)?;
    }
    let d = project_onto_lg(g.component(pol_out), &opts.grid, m_out, opts.fit_kmax, &beam.at(z + step.gap));
    let orders = hygg_orders(m_out, shift, opts.k_trunc);
    let rows = opts.fit_kmax + 1;
    let mut b = DMatrix::<Complex64>::zeros(rows, orders.len());
    for (j, &p) in orders.iter().enumerate() {
        for (i, v) in hygg_column(p, m_out, beam, z, opts.fit_kmax)?.into_iter().enumerate() {
            b[(i, j)] = v;
        }
    }
    let dv = DVector::from_vec(d);
    let coeffs = b
        .clone()
        .svd(true, true)
        .solve(&dv, 1e-12)
        .map_err(|e| Error::Degenerate(format!("HyGG fit: {e}")))?;
    let fitted = &b * &coeffs;
    let total = dv.norm_squared();
    let residual = if total > 0.0 { (&dv - fitted).norm_squared() / total } else { 0.0 };
    Ok(TermMap {
        pol: pol_out,
        m: m_out,
        orders,
        coeffs: coeffs.iter().copied().collect(),
        residual,
    })
}

/// Key of a (polarization, m) block.
type Block = (Pol, i32);

/// Runs the walk on HyGG superpositions. Between plates every HyGG block is
/// expanded to LG orders k ≤ `k_trunc`; each LG term is pushed through the
/// coin, the q-plate and the gap, and re-collected on the HyGG orders of
/// [`hygg_orders`]. The per-term maps are numerical and memoized in `cache`.
pub fn simulate_semianalytic(spec: &WalkSpec, opts: &SemiAnalyticOptions, cache: &TermCache) -> Result<SemiAnalyticOutput> {
    spec.validate()?;
    for (i, s) in spec.steps.iter().enumerate() {
        if (s.qplate.delta - PI).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "step[{i}]: the semi-analytic model needs a tuned q-plate (delta = pi)"
            )));
        }
    }
    let beam = spec.beam.at(0.0);
    let kt = opts.k_trunc;
    // LG coefficients per block, global frame
    let mut lg: BTreeMap<Block, Vec<Complex64>> = BTreeMap::new();
    lg.insert((Pol::L, 0), vec![spec.input_polarization.l()]);
    lg.insert((Pol::R, 0), vec![spec.input_polarization.r()]);
    let mut step_tails = Vec::new();
    let mut fit_residual = 0.0;
    let plates = spec.plate_positions();
    let last = spec.steps.len() - 1;
    for (i, (step, &z)) in spec.steps.iter().zip(&plates).enumerate() {
        let coin = step.coin();
        let ms: Vec<i32> = lg.keys().map(|b| b.1).collect();
        let mut coined: BTreeMap<Block, Vec<Complex64>> = BTreeMap::new();
        for m in ms {
            let l = lg.get(&(Pol::L, m)).cloned().unwrap_or_default();
            let r = lg.get(&(Pol::R, m)).cloned().unwrap_or_default();
            let len = l.len().max(r.len());
            let (mut nl, mut nr) = (vec![ZERO; len], vec![ZERO; len]);
            for k in 0..len {
                let (a, b) = coin.apply(l.get(k).copied().unwrap_or(ZERO), r.get(k).copied().unwrap_or(ZERO));
                nl[k] = a;
                nr[k] = b;
            }
            coined.insert((Pol::L, m), nl);
            coined.insert((Pol::R, m), nr);
        }
        let terms: Vec<(Block, usize, Complex64)> = coined
            .iter()
            .flat_map(|(blk, cs)| cs.iter().enumerate().map(move |(k, c)| (*blk, k, *c)))
            .filter(|(_, _, c)| c.norm_sqr() > 1e-24)
            .collect();
        let keys: Vec<TermKey> = terms
            .iter()
            .map(|((pol, m), k, _)| TermKey::new(*k, *m, *pol, z, step, &beam, opts))
            .collect();
        let missing: Vec<(usize, TermKey)> = keys
            .iter()
            .enumerate()
            .filter(|(_, key)| cache.get(key).is_none())
            .map(|(j, key)| (j, key.clone()))
            .collect();
        let computed: Vec<(TermKey, TermMap)> = missing
            .into_par_iter()
            .map(|(j, key)| {
                let ((pol, m), k, _) = terms[j];
                compute_term(k, m, pol, z, step, &beam, opts).map(|map| (key, map))
            })
            .collect::<Result<_>>()?;
        for (key, map) in computed {
            cache.insert(key, map);
        }
        let mut hygg: BTreeMap<Block, (Vec<f64>, Vec<Complex64>)> = BTreeMap::new();
        for ((_, _, c), key) in terms.iter().zip(&keys) {
            let map = cache.get(key).expect("term map populated");
            let slot = hygg
                .entry((map.pol, map.m))
                .or_insert_with(|| (map.orders.clone(), vec![ZERO; map.orders.len()]));
            for (dst, v) in slot.1.iter_mut().zip(&map.coeffs) {
                *dst += c * v;
            }
            fit_residual += c.norm_sqr() * map.residual;
        }
        if i == last {
            let mut sup = PolarizedSuperposition {
                origin_z: z,
                ..Default::default()
            };
            for ((pol, m), (orders, cs)) in &hygg {
                for (p, c) in orders.iter().zip(cs) {
                    if c.norm_sqr() > 1e-28 {
                        sup.push(*pol, *c, ModeIndex::Hygg(HyggIndex::new(*p, *m)?));
                    }
                }
            }
            let power = sup.power(&beam, DEFAULT_HYGG_TERMS)?;
            let out = SemiAnalyticOutput { superposition: sup, step_tails, fit_residual, power };
            if out.tail() > TAIL_WARN {
                log::debug!("semi-analytic walk discarded {:.3e} of the power", out.tail());
            }
            return Ok(out);
        }
        let mut tail = 0.0;
        lg.clear();
        for ((pol, m), (orders, cs)) in hygg {
            let mut full = vec![ZERO; DEFAULT_HYGG_TERMS + 1];
            for (p, c) in orders.iter().zip(&cs) {
                for (dst, v) in full.iter_mut().zip(hygg_column(*p, m, &beam, z, DEFAULT_HYGG_TERMS)?) {
                    *dst += c * v;
                }
            }
            let kept: Vec<Complex64> = full[..=kt].to_vec();
            tail += full[kt + 1..].iter().map(|c| c.norm_sqr()).sum::<f64>();
            lg.insert((pol, m), kept);
        }
        step_tails.push(tail);
    }
    unreachable!("loop returns at the last step")
}

/// Samples a semi-analytic output at the walk's output plane.
pub fn semianalytic_field(spec: &WalkSpec, out: &SemiAnalyticOutput, grid: Grid) -> Result<Field> {
    let frame = spec.beam.at(spec.output_z());
    Field::from_superposition(grid, &frame, &out.superposition, DEFAULT_HYGG_TERMS)
}

// ---------------------------------------------------------------------------
// targets

/// Vector vortex beam cos(θ/2) E_{m1} e_L + e^{iβ} sin(θ/2) E_{m2} e_R.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VvbTarget {
    pub theta: f64,
    pub beta: f64,
    pub m1: i32,
    pub m2: i32,
}

impl VvbTarget {
    pub fn new(theta: f64, beta: f64, m1: i32, m2: i32) -> Result<Self> {
        if !(0.0..=PI).contains(&theta) || !(0.0..=2.0 * PI).contains(&beta) {
            return Err(Error::Config(format!("VVB angles out of range: theta {theta}, beta {beta}")));
        }
        if m1 == m2 || !WALKER_M.contains(&m1) || !WALKER_M.contains(&m2) {
            return Err(Error::InvalidIndex(format!("VVB charges ({m1}, {m2})")));
        }
        Ok(VvbTarget { theta, beta, m1, m2 })
    }

    pub fn weights(&self) -> (Complex64, Complex64) {
        (
            Complex64::new((self.theta / 2.0).cos(), 0.0),
            Complex64::from_polar((self.theta / 2.0).sin(), self.beta),
        )
    }
}

/// Normalized HyGG profile of each walker position, taken from the
/// semi-analytic output of a walk tuned to |m⟩ and read through an H
/// analyzer.
#[derive(Debug, Clone, PartialEq)]
pub struct HyggProfiles {
    pub origin_z: f64,
    pub profiles: BTreeMap<i32, Vec<(f64, Complex64)>>,
}

impl HyggProfiles {
    pub fn from_cascade(template: &WalkSpec, opts: &SemiAnalyticOptions, solve: &SolveOptions, cache: &TermCache) -> Result<Self> {
        let mut profiles = BTreeMap::new();
        let mut origin_z = 0.0;
        for m in WALKER_M {
            let target = walker_superposition(&[(m, Complex64::new(1.0, 0.0))], Jones::H);
            let sol = solve_coins(&target, template, solve)?;
            let out = simulate_semianalytic(&sol.spec, opts, cache)?;
            origin_z = out.superposition.origin_z;
            profiles.insert(m, analyzed_profile(&out.superposition, m, &Jones::H, &template.beam)?);
        }
        Ok(HyggProfiles { origin_z, profiles })
    }

    /// E_m as a superposition on polarization `pol`.
    pub fn mode(&self, m: i32, pol: Pol, weight: Complex64) -> PolarizedSuperposition {
        let mut sup = PolarizedSuperposition {
            origin_z: self.origin_z,
            ..Default::default()
        };
        if let Some(terms) = self.profiles.get(&m) {
            for (p, c) in terms {
                sup.push(pol, weight * c, ModeIndex::Hygg(HyggIndex { p: *p, m }));
            }
        }
        sup
    }
}

/// HyGG coefficients of the m-block of `sup` seen through `analyzer`,
/// normalized to unit field power.
pub fn analyzed_profile(sup: &PolarizedSuperposition, m: i32, analyzer: &Jones, beam: &BeamParams) -> Result<Vec<(f64, Complex64)>> {
    analyzed_profile_with_weight(sup, m, analyzer, beam).map(|(p, _)| p)
}

/// As [`analyzed_profile`], also returning the block's amplitude (square
/// root of its power before normalization).
pub fn analyzed_profile_with_weight(
    sup: &PolarizedSuperposition,
    m: i32,
    analyzer: &Jones,
    beam: &BeamParams,
) -> Result<(Vec<(f64, Complex64)>, f64)> {
    let a = analyzer.normalized();
    let mut block = PolarizedSuperposition {
        origin_z: sup.origin_z,
        ..Default::default()
    };
    for (pol, w) in [(Pol::L, a.l().conj()), (Pol::R, a.r().conj())] {
        for (c, idx) in sup.terms(pol) {
            if idx.m() == m {
                block.push(Pol::L, c * w, *idx);
            }
        }
    }
    let power = block.power(&beam.at(0.0), DEFAULT_HYGG_TERMS)?;
    if power <= 1e-20 {
        return Err(Error::Degenerate(format!("no power at m = {m}")));
    }
    let s = 1.0 / power.sqrt();
    let profile = block
        .terms_l
        .iter()
        .map(|(c, idx)| match idx {
            ModeIndex::Hygg(h) => (h.p, c * s),
            ModeIndex::Lg(l) => (l.p as f64, c * s),
        })
        .collect();
    Ok((profile, power.sqrt()))
}

/// Mode family used for E_m.
#[derive(Debug, Clone, Copy)]
pub enum ModeModel<'a> {
    Lg,
    Hygg(&'a HyggProfiles),
}

/// The VVB of `t` under `model`: LG_{0,m} terms, or the cascade HyGG
/// profiles.
pub fn vvb_target(t: &VvbTarget, model: ModeModel) -> PolarizedSuperposition {
    let (a, b) = t.weights();
    match model {
        ModeModel::Lg => {
            let mut sup = PolarizedSuperposition::default();
            sup.push(Pol::L, a, ModeIndex::Lg(LgIndex::new(0, t.m1)));
            sup.push(Pol::R, b, ModeIndex::Lg(LgIndex::new(0, t.m2)));
            sup
        }
        ModeModel::Hygg(profiles) => {
            let mut sup = profiles.mode(t.m1, Pol::L, a);
            for (c, idx) in profiles.mode(t.m2, Pol::R, b).terms_r {
                sup.push(Pol::R, c, idx);
            }
            sup
        }
    }
}

/// Σ_m c_m LG_{0,m} carried by the polarization `pol`.
pub fn walker_superposition(amps: &[(i32, Complex64)], pol: Jones) -> PolarizedSuperposition {
    let mut sup = PolarizedSuperposition::default();
    for &(m, c) in amps {
        for (p, w) in [(Pol::L, pol.l()), (Pol::R, pol.r())] {
            if w.norm_sqr() > 0.0 {
                sup.push(p, c * w, ModeIndex::Lg(LgIndex::new(0, m)));
            }
        }
    }
    sup
}

/// A labelled walker state.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTarget {
    pub label: String,
    pub amps: Vec<(i32, Complex64)>,
}

impl NamedTarget {
    /// The state carried by horizontal polarization.
    pub fn superposition(&self) -> PolarizedSuperposition {
        walker_superposition(&self.amps, Jones::H)
    }
}

/// The fourteen measured states: computational basis, balanced extremal
/// superpositions and four Fourier-basis states.
pub fn standard_targets() -> Vec<NamedTarget> {
    let one = Complex64::new(1.0, 0.0);
    let mut out = Vec::new();
    for m in [-1, 1, 3, -3, -5, 5] {
        out.push(NamedTarget { label: format!("|{m}>"), amps: vec![(m, one)] });
    }
    let s = FRAC_1_SQRT_2;
    for (label, ph) in [("+", 0.0), ("-", PI), ("-i", 1.5 * PI), ("+i", 0.5 * PI)] {
        out.push(NamedTarget {
            label: format!("(|-5>{label}|5>)/sqrt2"),
            amps: vec![(-5, Complex64::new(s, 0.0)), (5, Complex64::from_polar(s, ph))],
        });
    }
    let norm = 1.0 / 6f64.sqrt();
    for k in [1, 2, 3, 6] {
        let amps = WALKER_M
            .iter()
            .enumerate()
            .map(|(j, &m)| (m, Complex64::from_polar(norm, PI * ((j + 1) * k) as f64 / 3.0)))
            .collect();
        out.push(NamedTarget { label: format!("QFT{k}"), amps });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn beam() -> BeamParams {
        BeamParams::new(1e-3, 808e-9).unwrap()
    }

    #[test]
    fn identity_coin_is_minus_one() {
        let c = StepConfig::identity(0.05).coin();
        let m = JonesMatrix([[Complex64::new(-1.0, 0.0), ZERO], [ZERO, Complex64::new(-1.0, 0.0)]]);
        for i in 0..2 {
            for j in 0..2 {
                assert!((c.0[i][j] - m.0[i][j]).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn plate_positions_accumulate_gaps() {
        let mut spec = WalkSpec::identity(beam(), 3, 0.05);
        spec.steps[1].gap = 0.02;
        assert_eq!(spec.plate_positions(), vec![0.0, 0.05, 0.07]);
        assert!((spec.output_z() - 0.12).abs() < 1e-15);
    }

    #[test]
    fn identity_walk_splits_into_extremes_of_parity() {
        let spec = WalkSpec::identity(beam(), 5, 0.05);
        let out = ideal_walk(&spec);
        assert!((out.norm_sqr() - 1.0).abs() < 1e-12);
        for m in -5..=5 {
            if m % 2 == 0 {
                assert!(out.jones(m).norm_sqr() < 1e-20);
            }
        }
    }

    #[test]
    fn one_step_walk_matches_qplate_rule() {
        let spec = WalkSpec::identity(beam(), 1, 0.05);
        let out = ideal_walk(&spec);
        assert!((out.get(Pol::R, 1).norm() - FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((out.get(Pol::L, -1).norm() - FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn hygg_orders_for_the_worked_example() {
        assert_eq!(hygg_orders(0, 1, 3), vec![1.0, 3.0, 5.0, 7.0]);
        assert_eq!(hygg_orders(1, 1, 3), vec![-1.0, 1.0, 3.0, 5.0, 7.0]);
        assert_eq!(hygg_orders(5, 1, 0), vec![-1.0, 1.0]);
    }

    #[test]
    fn toml_round_trip() {
        let mut spec = WalkSpec::identity(beam(), 5, 0.05);
        spec.steps[2].set_angles([0.1, 0.2, 0.3]);
        spec.steps[4].qplate.alpha0 = 0.25;
        let back = WalkSpec::from_toml_str(&spec.to_toml_string()).unwrap();
        assert_eq!(back.steps.len(), 5);
        for (a, b) in back.coin_angles().iter().zip(spec.coin_angles()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((back.steps[4].qplate.alpha0 - 0.25).abs() < 1e-12);
        assert!((back.beam.w0 - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn toml_errors_name_the_field() {
        let err = WalkSpec::from_toml_str("[beam]\nw0_mm = 1.0\nwavelength_nm = 808\n[[step]]\nhwp_dg = 3\n").unwrap_err();
        assert!(err.to_string().contains("hwp_dg"), "{err}");
        let err = WalkSpec::from_toml_str("[beam]\nw0_mm = 1.0\nwavelength_nm = 808\n[[step]]\ndelta_deg = 200\n").unwrap_err();
        assert!(err.to_string().contains("step[0]"), "{err}");
    }

    #[test]
    fn targets_are_normalized() {
        let t = standard_targets();
        assert_eq!(t.len(), 14);
        for target in &t {
            let n: f64 = target.amps.iter().map(|(_, c)| c.norm_sqr()).sum();
            assert!((n - 1.0).abs() < 1e-12, "{}", target.label);
            assert!((target.superposition().coeff_norm_sqr() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn separable_targets_use_an_analyzer() {
        let t = WalkerTarget::from_superposition(&standard_targets()[6].superposition()).unwrap();
        assert!(matches!(t, WalkerTarget::Analyzed { .. }));
        let vvb = vvb_target(&VvbTarget::new(PI / 2.0, 0.0, -1, 1).unwrap(), ModeModel::Lg);
        let t = WalkerTarget::from_superposition(&vvb).unwrap();
        assert!(matches!(t, WalkerTarget::Full(_)));
    }

    #[test]
    fn vvb_weights_are_normalized() {
        for (theta, beta) in [(0.0, 0.0), (0.3, 1.0), (PI / 2.0, 4.0), (PI, 6.0)] {
            let t = VvbTarget::new(theta, beta, -3, 5).unwrap();
            let s = vvb_target(&t, ModeModel::Lg);
            assert!((s.coeff_norm_sqr() - 1.0).abs() < 1e-12);
        }
        assert!(VvbTarget::new(1.0, 0.0, 3, 3).is_err());
        assert!(VvbTarget::new(1.0, 0.0, 2, 3).is_err());
    }
}
